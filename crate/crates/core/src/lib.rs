//! Simulation and planning library for prefetching supplier prices into a
//! metasearch cache under a per-second query budget.

pub mod cache;
pub mod domain;
pub mod error;
pub mod experiment;
pub mod io;
pub mod rng;
pub mod scheduler;
pub mod simulator;
pub mod smartttl;
pub mod supplier;
pub mod trace;

pub use cache::{LruSearchCache, PriceDb};
pub use domain::{
    expected_bookings, BookingProbabilities, DcId, HotelId, Itinerary, Price, PriceQuote,
    Probability, SearchCriteria, Seconds, SimClock, UserId, UserSearch, DAY,
};
pub use error::{Error, Result};
pub use experiment::{ExperimentConfig, Prepared};
pub use scheduler::{Admission, SchedulePlan, ValueTable};
pub use simulator::{Metrics, PolicySpec, Scenario, Simulation};
pub use smartttl::{ClusterKey, TtlTable};
pub use supplier::SupplierConfig;
