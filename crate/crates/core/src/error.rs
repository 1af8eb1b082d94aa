use crate::domain::Seconds;

/// Errors raised across the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("probability {0} outside [0, 1]")]
    InvalidProbability(f64),

    #[error("invalid search criteria: {0}")]
    InvalidCriteria(String),

    #[error("ttl must be positive, got {0}")]
    NonPositiveTtl(Seconds),

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: u64,
        message: String,
    },

    #[error("unknown data centre {0}")]
    UnknownDc(u16),

    #[error("time went backwards: {now} after {last}")]
    TimeWentBackwards { now: Seconds, last: Seconds },

    #[error("fetch log is not time-ordered for hotel {hotel} at t={time}")]
    UnsortedLog { hotel: u32, time: Seconds },

    #[error("checkin {checkin} is before search date {search_date}")]
    CheckinBeforeSearch {
        checkin: chrono::NaiveDate,
        search_date: chrono::NaiveDate,
    },

    #[error("no {0}")]
    EmptySamples(&'static str),

    #[error("capacity exceeded at second {second}: {load} sends scheduled against a limit of {limit} (item {item})")]
    CapacityExceeded {
        second: Seconds,
        load: u32,
        limit: u32,
        item: usize,
    },

    #[error("plan budget {planned} exceeds daily budget {budget}")]
    BudgetExceeded { planned: u64, budget: u64 },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn parse(path: impl Into<String>, line: u64, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }
}
