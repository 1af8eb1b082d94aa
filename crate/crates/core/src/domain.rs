//! Domain types shared by every module, plus the expected-bookings objective.
//!
//! All values here are plain immutable data. Time is integer simulation
//! seconds and prices are integer minor currency units, so every comparison
//! the simulator makes is exact.

use std::collections::HashMap;
use std::fmt;

use chrono::{Datelike, Days, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Simulation time and durations, in whole seconds.
pub type Seconds = i64;

/// One simulated day.
pub const DAY: Seconds = 86_400;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct HotelId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct UserId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DcId(pub u16);

impl fmt::Display for HotelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A price in minor currency units. Zero marks a sold-out itinerary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Price(pub u64);

impl Price {
    pub const SOLD_OUT: Price = Price(0);

    pub fn is_available(self) -> bool {
        self.0 > 0
    }
}

/// Upper bounds on the occupancy fields of [`SearchCriteria`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CriteriaBounds {
    pub max_adults: u8,
    pub max_children: u8,
    pub max_rooms: u8,
}

impl Default for CriteriaBounds {
    fn default() -> Self {
        Self {
            max_adults: 8,
            max_children: 8,
            max_rooms: 4,
        }
    }
}

/// Stay dates and occupancy of a search.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SearchCriteria {
    checkin: NaiveDate,
    checkout: NaiveDate,
    adults: u8,
    children: u8,
    rooms: u8,
}

impl SearchCriteria {
    pub fn new(
        checkin: NaiveDate,
        checkout: NaiveDate,
        adults: u8,
        children: u8,
        rooms: u8,
    ) -> Result<Self> {
        Self::with_bounds(
            checkin,
            checkout,
            adults,
            children,
            rooms,
            CriteriaBounds::default(),
        )
    }

    pub fn with_bounds(
        checkin: NaiveDate,
        checkout: NaiveDate,
        adults: u8,
        children: u8,
        rooms: u8,
        bounds: CriteriaBounds,
    ) -> Result<Self> {
        if checkout <= checkin {
            return Err(Error::InvalidCriteria(format!(
                "checkout {checkout} is not after checkin {checkin}"
            )));
        }
        if adults == 0 || adults > bounds.max_adults {
            return Err(Error::InvalidCriteria(format!(
                "adults {adults} outside 1..={}",
                bounds.max_adults
            )));
        }
        if children > bounds.max_children {
            return Err(Error::InvalidCriteria(format!(
                "children {children} above {}",
                bounds.max_children
            )));
        }
        if rooms == 0 || rooms > bounds.max_rooms {
            return Err(Error::InvalidCriteria(format!(
                "rooms {rooms} outside 1..={}",
                bounds.max_rooms
            )));
        }
        Ok(Self {
            checkin,
            checkout,
            adults,
            children,
            rooms,
        })
    }

    pub fn checkin(&self) -> NaiveDate {
        self.checkin
    }

    pub fn checkout(&self) -> NaiveDate {
        self.checkout
    }

    pub fn adults(&self) -> u8 {
        self.adults
    }

    pub fn children(&self) -> u8 {
        self.children
    }

    pub fn rooms(&self) -> u8 {
        self.rooms
    }

    pub fn nights(&self) -> i64 {
        (self.checkout - self.checkin).num_days()
    }
}

/// A (hotel, criteria) pair: the unit a supplier prices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Itinerary {
    pub hotel: HotelId,
    pub criteria: SearchCriteria,
}

impl Itinerary {
    pub fn new(hotel: HotelId, criteria: SearchCriteria) -> Self {
        Self { hotel, criteria }
    }

    /// A platform-independent 64-bit digest, used to derive per-itinerary
    /// random streams.
    pub fn digest(&self) -> u64 {
        let c = &self.criteria;
        let mut h = crate::rng::mix(self.hotel.0 as u64);
        h = crate::rng::mix(h ^ c.checkin.num_days_from_ce() as u64);
        h = crate::rng::mix(h ^ c.checkout.num_days_from_ce() as u64);
        let occupancy = (c.adults as u64) << 16 | (c.children as u64) << 8 | c.rooms as u64;
        crate::rng::mix(h ^ occupancy)
    }
}

/// One user search event. Searches form a multiset: the same user searching
/// the same itinerary twice yields two events.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UserSearch {
    pub user: UserId,
    pub itinerary: Itinerary,
    pub timestamp: Seconds,
    pub dc: DcId,
}

/// A cached price. Live on the half-open window `[fetched_at, fetched_at + ttl)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PriceQuote<K = Itinerary> {
    pub itinerary: K,
    pub price: Price,
    pub fetched_at: Seconds,
    pub ttl: Seconds,
}

impl<K> PriceQuote<K> {
    pub fn expires_at(&self) -> Seconds {
        self.fetched_at + self.ttl
    }

    pub fn is_live(&self, t: Seconds) -> bool {
        self.fetched_at <= t && t < self.expires_at()
    }
}

/// A probability checked to lie in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Default)]
pub struct Probability(f64);

impl Probability {
    pub fn new(p: f64) -> Result<Self> {
        if (0.0..=1.0).contains(&p) {
            Ok(Self(p))
        } else {
            Err(Error::InvalidProbability(p))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

/// Search-to-booking-attempt propensity per itinerary.
#[derive(Debug, Clone)]
pub struct BookingProbabilities {
    default: Probability,
    per_itinerary: HashMap<Itinerary, Probability>,
}

impl BookingProbabilities {
    pub fn uniform(default: Probability) -> Self {
        Self {
            default,
            per_itinerary: HashMap::new(),
        }
    }

    pub fn insert(&mut self, itinerary: Itinerary, p_b: Probability) {
        self.per_itinerary.insert(itinerary, p_b);
    }

    pub fn get(&self, itinerary: &Itinerary) -> Probability {
        self.per_itinerary
            .get(itinerary)
            .copied()
            .unwrap_or(self.default)
    }

    pub fn len(&self) -> usize {
        self.per_itinerary.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_itinerary.is_empty()
    }
}

/// Expected bookings: the sum of `p_d * p_b * p_a` over searches.
pub fn expected_bookings<I>(terms: I) -> Result<f64>
where
    I: IntoIterator<Item = (f64, f64, f64)>,
{
    terms.into_iter().try_fold(0.0, |acc, (p_d, p_b, p_a)| {
        let p_d = Probability::new(p_d)?.get();
        let p_b = Probability::new(p_b)?.get();
        let p_a = Probability::new(p_a)?.get();
        Ok(acc + p_d * p_b * p_a)
    })
}

/// Maps simulation seconds onto calendar dates. Second zero is midnight of
/// `epoch`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimClock {
    pub epoch: NaiveDate,
}

impl Default for SimClock {
    fn default() -> Self {
        Self {
            epoch: NaiveDate::from_ymd_opt(2019, 9, 30).expect("valid date"),
        }
    }
}

impl SimClock {
    pub fn new(epoch: NaiveDate) -> Self {
        Self { epoch }
    }

    pub fn day_index(t: Seconds) -> i64 {
        t.div_euclid(DAY)
    }

    pub fn date_at(&self, t: Seconds) -> NaiveDate {
        let day = Self::day_index(t);
        if day >= 0 {
            self.epoch + Days::new(day as u64)
        } else {
            self.epoch - Days::new(day.unsigned_abs())
        }
    }

    /// Whole days from the date at `t` until `checkin`; negative once the
    /// checkin date has passed.
    pub fn lead_days(&self, checkin: NaiveDate, t: Seconds) -> i64 {
        (checkin - self.date_at(t)).num_days()
    }
}
