//! Synthetic workloads: search arrivals, itinerary catalogs, ground-truth
//! price timelines, and trace-file ingestion.

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use chrono::{Days, NaiveDate};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Exp, LogNormal, Normal, Zipf};
use serde::{Deserialize, Serialize};

use crate::domain::{
    BookingProbabilities, DcId, HotelId, Itinerary, Price, Probability, SearchCriteria, Seconds,
    SimClock, UserId, UserSearch, DAY,
};
use crate::error::{Error, Result};
use crate::io;
use crate::rng;

/// A bucket of a piecewise-uniform histogram over integers `lo..=hi`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    pub lo: i64,
    pub hi: i64,
    pub weight: f64,
}

impl Bucket {
    pub fn new(lo: i64, hi: i64, weight: f64) -> Self {
        Self { lo, hi, weight }
    }
}

#[derive(Debug, Clone)]
pub struct BucketSampler {
    buckets: Vec<Bucket>,
    cumulative: Vec<f64>,
}

impl BucketSampler {
    fn new(buckets: &[Bucket], min_value: i64, what: &str) -> Result<Self> {
        if buckets.is_empty() {
            return Err(Error::InvalidDistribution(format!("{what}: no buckets")));
        }
        let mut cumulative = Vec::with_capacity(buckets.len());
        let mut total = 0.0;
        for b in buckets {
            if b.lo < min_value || b.hi < b.lo {
                return Err(Error::InvalidDistribution(format!(
                    "{what}: bucket [{}, {}] must satisfy {min_value} <= lo <= hi",
                    b.lo, b.hi
                )));
            }
            if !(b.weight >= 0.0 && b.weight.is_finite()) {
                return Err(Error::InvalidDistribution(format!(
                    "{what}: negative or non-finite weight {}",
                    b.weight
                )));
            }
            total += b.weight;
            cumulative.push(total);
        }
        if total <= 0.0 {
            return Err(Error::InvalidDistribution(format!("{what}: zero total weight")));
        }
        Ok(Self {
            buckets: buckets.to_vec(),
            cumulative,
        })
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> i64 {
        let total = *self.cumulative.last().expect("nonempty");
        let x = rng.random::<f64>() * total;
        let idx = self
            .cumulative
            .partition_point(|&c| c <= x)
            .min(self.buckets.len() - 1);
        let b = self.buckets[idx];
        rng.random_range(b.lo..=b.hi)
    }
}

/// A distribution over positive durations in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DurationDist {
    Constant { seconds: Seconds },
    /// Never ends: a price that never changes.
    Infinite,
    Exponential { mean: f64 },
    LogNormal { median: f64, sigma: f64 },
    /// Piecewise-uniform over whole seconds.
    Histogram { buckets: Vec<Bucket> },
}

impl DurationDist {
    pub fn sampler(&self) -> Result<DurationSampler> {
        let bad = |m: String| Err(Error::InvalidDistribution(m));
        Ok(match self {
            DurationDist::Constant { seconds } => {
                if *seconds <= 0 {
                    return bad(format!("constant duration {seconds} must be > 0"));
                }
                DurationSampler::Constant(*seconds)
            }
            DurationDist::Infinite => DurationSampler::Infinite,
            DurationDist::Exponential { mean } => {
                if !(*mean > 0.0 && mean.is_finite()) {
                    return bad(format!("exponential mean {mean} must be > 0"));
                }
                DurationSampler::Exponential(Exp::new(1.0 / mean).expect("positive rate"))
            }
            DurationDist::LogNormal { median, sigma } => {
                if !(*median > 0.0 && median.is_finite() && *sigma >= 0.0 && sigma.is_finite()) {
                    return bad(format!("lognormal median {median} sigma {sigma}"));
                }
                DurationSampler::LogNormal(
                    LogNormal::new(median.ln(), *sigma).expect("validated parameters"),
                )
            }
            DurationDist::Histogram { buckets } => {
                DurationSampler::Histogram(BucketSampler::new(buckets, 1, "duration histogram")?)
            }
        })
    }

    pub fn is_finite(&self) -> bool {
        !matches!(self, DurationDist::Infinite)
    }
}

#[derive(Debug, Clone)]
pub enum DurationSampler {
    Constant(Seconds),
    Infinite,
    Exponential(Exp<f64>),
    LogNormal(LogNormal<f64>),
    Histogram(BucketSampler),
}

impl DurationSampler {
    /// A duration of at least one second, or `None` for "never".
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Option<Seconds> {
        let continuous = |x: f64| Some((x.round() as Seconds).max(1));
        match self {
            DurationSampler::Constant(s) => Some(*s),
            DurationSampler::Infinite => None,
            DurationSampler::Exponential(d) => continuous(d.sample(rng)),
            DurationSampler::LogNormal(d) => continuous(d.sample(rng)),
            DurationSampler::Histogram(h) => Some(h.sample(rng)),
        }
    }
}

/// Hourly arrival-rate multipliers over a day, linearly interpolated
/// between hour marks (and from 23:00 back to 00:00).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiurnalProfile {
    pub hourly: Vec<f64>,
}

impl DiurnalProfile {
    pub fn flat(level: f64) -> Self {
        Self {
            hourly: vec![level; 24],
        }
    }

    /// A smooth single-peak day: `peak` at `peak_hour`, `trough` twelve hours
    /// away.
    pub fn peaked(peak_hour: f64, trough: f64, peak: f64) -> Self {
        let hourly = (0..24)
            .map(|h| {
                let phase = 2.0 * std::f64::consts::PI * (h as f64 - peak_hour) / 24.0;
                trough + (peak - trough) * (1.0 + phase.cos()) / 2.0
            })
            .collect();
        Self { hourly }
    }

    fn validate(&self) -> Result<()> {
        if self.hourly.len() != 24 {
            return Err(Error::InvalidConfig(format!(
                "diurnal profile needs 24 hourly points, got {}",
                self.hourly.len()
            )));
        }
        if self.hourly.iter().any(|m| !(*m >= 0.0 && m.is_finite())) {
            return Err(Error::InvalidConfig(
                "diurnal rate multipliers must be finite and >= 0".into(),
            ));
        }
        Ok(())
    }

    pub fn multiplier(&self, t: f64) -> f64 {
        let hour = t.rem_euclid(DAY as f64) / 3600.0;
        let lo = hour.floor() as usize % 24;
        let hi = (lo + 1) % 24;
        let frac = hour - hour.floor();
        self.hourly[lo] * (1.0 - frac) + self.hourly[hi] * frac
    }

    pub fn peak(&self) -> f64 {
        self.hourly.iter().copied().fold(0.0, f64::max)
    }
}

/// How search timestamps are produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ArrivalModel {
    /// Per data centre, a Poisson process with rate `base_rate * profile(t)`
    /// (thinned); each arrival picks an itinerary by Zipf popularity.
    Diurnal { base_rate: f64 },
    /// Every catalog itinerary is an independent renewal process whose
    /// inter-search gaps follow `gap_time_distribution`. Popularity skew and
    /// rate profiles are not used; each search is routed to a uniformly
    /// random data centre.
    Renewal,
}

/// Per-hotel booking propensity: `p_b ~ Beta(alpha, beta)`, shared by the
/// hotel's itineraries.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BookingPropensity {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for BookingPropensity {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 4.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorkloadConfig {
    pub n_hotels: u32,
    pub itineraries_per_hotel: u32,
    pub n_users: u64,
    pub horizon: Seconds,
    pub epoch: NaiveDate,
    pub popularity_skew: f64,
    pub arrival: ArrivalModel,
    pub gap_time_distribution: DurationDist,
    /// Days from the end of the horizon to checkin.
    pub checkin_lead: Vec<Bucket>,
    pub max_nights: u32,
    pub dc_traffic_profiles: Vec<DiurnalProfile>,
    pub booking: BookingPropensity,
    pub seed: u64,
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        Self {
            n_hotels: 400,
            itineraries_per_hotel: 5,
            n_users: 50_000,
            horizon: 14 * DAY,
            epoch: SimClock::default().epoch,
            popularity_skew: 1.0,
            arrival: ArrivalModel::Diurnal { base_rate: 1.0 },
            gap_time_distribution: DurationDist::Exponential { mean: 3600.0 },
            checkin_lead: vec![
                Bucket::new(0, 6, 0.3),
                Bucket::new(7, 30, 0.4),
                Bucket::new(31, 120, 0.3),
            ],
            max_nights: 3,
            dc_traffic_profiles: vec![DiurnalProfile::peaked(18.0, 0.2, 1.0)],
            booking: BookingPropensity::default(),
            seed: 1,
        }
    }
}

impl WorkloadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon <= 0 {
            return Err(Error::InvalidConfig("horizon must be > 0".into()));
        }
        if self.n_hotels == 0 || self.itineraries_per_hotel == 0 || self.n_users == 0 {
            return Err(Error::InvalidConfig(
                "n_hotels, itineraries_per_hotel and n_users must be > 0".into(),
            ));
        }
        if !(self.popularity_skew >= 0.0 && self.popularity_skew.is_finite()) {
            return Err(Error::InvalidDistribution(format!(
                "popularity_skew {} must be >= 0",
                self.popularity_skew
            )));
        }
        if self.max_nights == 0 {
            return Err(Error::InvalidConfig("max_nights must be >= 1".into()));
        }
        if self.dc_traffic_profiles.is_empty() {
            return Err(Error::InvalidConfig(
                "at least one data-centre traffic profile is required".into(),
            ));
        }
        for p in &self.dc_traffic_profiles {
            p.validate()?;
        }
        if let ArrivalModel::Diurnal { base_rate } = self.arrival {
            if !(base_rate >= 0.0 && base_rate.is_finite()) {
                return Err(Error::InvalidConfig(format!(
                    "base_rate {base_rate} must be >= 0"
                )));
            }
        }
        if !self.gap_time_distribution.is_finite() {
            return Err(Error::InvalidDistribution(
                "gap_time_distribution must be finite".into(),
            ));
        }
        self.gap_time_distribution.sampler()?;
        let leads = BucketSampler::new(&self.checkin_lead, 0, "checkin_lead")?;
        if leads.buckets.iter().any(|b| b.hi > 365) {
            return Err(Error::InvalidDistribution(
                "checkin_lead must lie within 0..=365 days".into(),
            ));
        }
        let BookingPropensity { alpha, beta } = self.booking;
        if !(alpha > 0.0 && beta > 0.0) {
            return Err(Error::InvalidDistribution(format!(
                "booking Beta({alpha}, {beta}) needs positive parameters"
            )));
        }
        Ok(())
    }

    pub fn clock(&self) -> SimClock {
        SimClock::new(self.epoch)
    }

    pub fn n_itineraries(&self) -> usize {
        self.n_hotels as usize * self.itineraries_per_hotel as usize
    }
}

/// The universe of itineraries, in popularity-rank order (index 0 is the
/// most searched under Zipf arrivals).
#[derive(Debug, Clone)]
pub struct Catalog {
    pub itineraries: Vec<Itinerary>,
}

/// A generated workload: the itinerary catalog, the ground-truth booking
/// propensities, and the search stream.
#[derive(Debug, Clone)]
pub struct Workload {
    pub catalog: Catalog,
    pub booking: BookingProbabilities,
    pub searches: Vec<UserSearch>,
}

pub fn generate_catalog(config: &WorkloadConfig) -> Result<Catalog> {
    config.validate()?;
    let mut rng = rng::stream(config.seed, "catalog");
    let leads = BucketSampler::new(&config.checkin_lead, 0, "checkin_lead")?;
    let horizon_days = (config.horizon + DAY - 1) / DAY;
    let mut itineraries = Vec::with_capacity(config.n_itineraries());
    for h in 0..config.n_hotels {
        let mut seen = HashSet::new();
        let mut attempts = 0;
        while seen.len() < config.itineraries_per_hotel as usize {
            attempts += 1;
            if attempts > 1000 * config.itineraries_per_hotel {
                return Err(Error::InvalidConfig(format!(
                    "cannot draw {} distinct itineraries for a hotel",
                    config.itineraries_per_hotel
                )));
            }
            let lead = leads.sample(&mut rng);
            let checkin = config.epoch + Days::new((horizon_days + lead) as u64);
            let nights = rng.random_range(1..=config.max_nights);
            let checkout = checkin + Days::new(nights as u64);
            let adults = rng.random_range(1..=2u8);
            let children = if rng.random::<f64>() < 0.8 {
                0
            } else {
                rng.random_range(1..=2u8)
            };
            let criteria = SearchCriteria::new(checkin, checkout, adults, children, 1)?;
            let itinerary = Itinerary::new(HotelId(h), criteria);
            if seen.insert(itinerary) {
                itineraries.push(itinerary);
            }
        }
    }
    itineraries.shuffle(&mut rng);
    Ok(Catalog { itineraries })
}

pub fn generate_booking_probabilities(
    config: &WorkloadConfig,
    catalog: &Catalog,
) -> Result<BookingProbabilities> {
    let mut rng = rng::stream(config.seed, "booking-propensity");
    let beta = Beta::new(config.booking.alpha, config.booking.beta)
        .map_err(|e| Error::InvalidDistribution(e.to_string()))?;
    let per_hotel: Vec<f64> = (0..config.n_hotels).map(|_| beta.sample(&mut rng)).collect();
    let mean = config.booking.alpha / (config.booking.alpha + config.booking.beta);
    let mut out = BookingProbabilities::uniform(Probability::new(mean)?);
    for it in &catalog.itineraries {
        out.insert(*it, Probability::new(per_hotel[it.hotel.0 as usize])?);
    }
    Ok(out)
}

pub fn generate_workload(config: &WorkloadConfig) -> Result<Workload> {
    let catalog = generate_catalog(config)?;
    let booking = generate_booking_probabilities(config, &catalog)?;
    let searches = generate_searches_for(config, &catalog)?;
    Ok(Workload {
        catalog,
        booking,
        searches,
    })
}

/// The time-ordered search stream of `config`. A pure function of the
/// config (including its seed).
pub fn generate_searches(config: &WorkloadConfig) -> Result<Vec<UserSearch>> {
    let catalog = generate_catalog(config)?;
    generate_searches_for(config, &catalog)
}

pub fn generate_searches_for(config: &WorkloadConfig, catalog: &Catalog) -> Result<Vec<UserSearch>> {
    config.validate()?;
    let mut out = match config.arrival {
        ArrivalModel::Diurnal { base_rate } => diurnal_arrivals(config, catalog, base_rate)?,
        ArrivalModel::Renewal => renewal_arrivals(config, catalog)?,
    };
    out.sort_by_key(|s| (s.timestamp, s.dc));
    Ok(out)
}

fn diurnal_arrivals(
    config: &WorkloadConfig,
    catalog: &Catalog,
    base_rate: f64,
) -> Result<Vec<UserSearch>> {
    let n = catalog.itineraries.len();
    let zipf = Zipf::new(n as f64, config.popularity_skew)
        .map_err(|e| Error::InvalidDistribution(e.to_string()))?;
    let mut out = Vec::new();
    for (dc, profile) in config.dc_traffic_profiles.iter().enumerate() {
        let mut rng = rng::stream(config.seed, &format!("arrivals-dc{dc}"));
        let max_rate = base_rate * profile.peak();
        if max_rate <= 0.0 {
            continue;
        }
        let gap = Exp::new(max_rate).expect("positive rate");
        let mut t = 0.0;
        loop {
            t += gap.sample(&mut rng);
            if t >= config.horizon as f64 {
                break;
            }
            let accept = base_rate * profile.multiplier(t) / max_rate;
            if rng.random::<f64>() >= accept {
                continue;
            }
            let rank = (zipf.sample(&mut rng) as usize).clamp(1, n) - 1;
            out.push(UserSearch {
                user: UserId(rng.random_range(0..config.n_users)),
                itinerary: catalog.itineraries[rank],
                timestamp: t.floor() as Seconds,
                dc: DcId(dc as u16),
            });
        }
    }
    Ok(out)
}

fn renewal_arrivals(config: &WorkloadConfig, catalog: &Catalog) -> Result<Vec<UserSearch>> {
    let gaps = config.gap_time_distribution.sampler()?;
    let mut rng = rng::stream(config.seed, "arrivals-renewal");
    let n_dc = config.dc_traffic_profiles.len() as u16;
    let mut out = Vec::new();
    for itinerary in &catalog.itineraries {
        let first = gaps.sample(&mut rng).expect("finite gap distribution");
        let mut t = (rng.random::<f64>() * first as f64).floor() as Seconds;
        while t < config.horizon {
            out.push(UserSearch {
                user: UserId(rng.random_range(0..config.n_users)),
                itinerary: *itinerary,
                timestamp: t,
                dc: DcId(rng.random_range(0..n_dc)),
            });
            t += gaps.sample(&mut rng).expect("finite gap distribution");
        }
    }
    Ok(out)
}

/// How long a price stays unchanged, by checkin lead and availability.
/// Bands are matched by the first `max_lead_days` at or above the lead; the
/// last band also catches longer leads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DurationBand {
    pub max_lead_days: i64,
    pub available: DurationDist,
    pub sold_out: DurationDist,
}

/// New prices are `old * exp(N(0, relative_sigma))`, rounded, and always
/// differ from the old price.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriceJump {
    pub relative_sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriceProcessConfig {
    pub bands: Vec<DurationBand>,
    pub sold_out_probability: f64,
    pub base_price_min: u64,
    pub base_price_max: u64,
    pub price_jump: PriceJump,
}

impl Default for PriceProcessConfig {
    fn default() -> Self {
        Self {
            bands: vec![DurationBand {
                max_lead_days: 365,
                available: DurationDist::Exponential { mean: 3600.0 },
                sold_out: DurationDist::Exponential { mean: 3600.0 },
            }],
            sold_out_probability: 0.0,
            base_price_min: 5_000,
            base_price_max: 50_000,
            price_jump: PriceJump {
                relative_sigma: 0.05,
            },
        }
    }
}

impl PriceProcessConfig {
    /// A process whose every segment lasts `dist`.
    pub fn single(dist: DurationDist) -> Self {
        Self {
            bands: vec![DurationBand {
                max_lead_days: 365,
                available: dist.clone(),
                sold_out: dist,
            }],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.samplers().map(|_| ())
    }

    fn samplers(&self) -> Result<Vec<(i64, DurationSampler, DurationSampler)>> {
        if self.bands.is_empty() {
            return Err(Error::InvalidConfig("price process needs a band".into()));
        }
        if !(0.0..=1.0).contains(&self.sold_out_probability) {
            return Err(Error::InvalidProbability(self.sold_out_probability));
        }
        if self.base_price_min == 0 || self.base_price_max < self.base_price_min {
            return Err(Error::InvalidConfig(
                "base prices must satisfy 0 < min <= max".into(),
            ));
        }
        if !(self.price_jump.relative_sigma >= 0.0 && self.price_jump.relative_sigma.is_finite()) {
            return Err(Error::InvalidDistribution(
                "price_jump.relative_sigma must be >= 0".into(),
            ));
        }
        self.bands
            .iter()
            .map(|b| Ok((b.max_lead_days, b.available.sampler()?, b.sold_out.sampler()?)))
            .collect()
    }
}

/// A piecewise-constant price function of time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PriceTimeline {
    starts: Vec<Seconds>,
    prices: Vec<Price>,
}

impl PriceTimeline {
    pub fn constant(price: Price) -> Self {
        Self {
            starts: vec![0],
            prices: vec![price],
        }
    }

    /// Build from `(start, price)` segments. The first must start at 0 and
    /// starts must increase.
    pub fn from_segments(segments: Vec<(Seconds, Price)>) -> Result<Self> {
        if segments.first().map(|s| s.0) != Some(0) {
            return Err(Error::InvalidConfig(
                "price timeline must start at t=0".into(),
            ));
        }
        if segments.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::InvalidConfig(
                "price timeline starts must increase".into(),
            ));
        }
        let (starts, prices) = segments.into_iter().unzip();
        Ok(Self { starts, prices })
    }

    pub fn price_at(&self, t: Seconds) -> Price {
        let idx = self.starts.partition_point(|&s| s <= t);
        self.prices[idx.saturating_sub(1)]
    }

    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    pub fn segments(&self) -> impl Iterator<Item = (Seconds, Price)> + '_ {
        self.starts.iter().copied().zip(self.prices.iter().copied())
    }

    /// Lengths of the segments that end before `horizon` (the last segment is
    /// cut off by the horizon and is excluded).
    pub fn complete_segment_lengths(&self) -> impl Iterator<Item = Seconds> + '_ {
        self.starts.windows(2).map(|w| w[1] - w[0])
    }
}

/// Ground-truth prices of `itinerary` over `[0, horizon)`. Segment lengths
/// are drawn from the band matching the lead at each segment's start.
pub fn generate_price_timeline(
    config: &PriceProcessConfig,
    itinerary: &Itinerary,
    clock: &SimClock,
    horizon: Seconds,
    seed: u64,
) -> Result<PriceTimeline> {
    let bands = config.samplers()?;
    let mut rng = rng::stream(rng::mix(seed ^ itinerary.digest()), "price-timeline");
    let jump = Normal::new(0.0, config.price_jump.relative_sigma).expect("validated sigma");
    let base = rng.random_range(config.base_price_min..=config.base_price_max);

    let mut starts = Vec::new();
    let mut prices = Vec::new();
    let mut last_available = Price(base);
    let mut price = if rng.random::<f64>() < config.sold_out_probability {
        Price::SOLD_OUT
    } else {
        last_available
    };
    let mut t = 0;
    loop {
        starts.push(t);
        prices.push(price);
        let lead = clock.lead_days(itinerary.criteria.checkin(), t).max(0);
        let band = bands
            .iter()
            .find(|(max_lead, _, _)| lead <= *max_lead)
            .unwrap_or_else(|| bands.last().expect("nonempty"));
        let sampler = if price.is_available() { &band.1 } else { &band.2 };
        let Some(duration) = sampler.sample(&mut rng) else {
            break;
        };
        t += duration;
        if t >= horizon {
            break;
        }
        // A sold-out spell always ends with a fresh available price, so
        // consecutive segments always differ.
        price = if price.is_available() && rng.random::<f64>() < config.sold_out_probability {
            Price::SOLD_OUT
        } else {
            let factor: f64 = jump.sample(&mut rng);
            let mut next = ((last_available.0 as f64) * factor.exp()).round().max(1.0) as u64;
            if next == last_available.0 {
                next += 1;
            }
            last_available = Price(next);
            last_available
        };
    }
    Ok(PriceTimeline { starts, prices })
}

pub const TRACE_HEADER: [&str; 9] = [
    "timestamp_s",
    "user_id",
    "hotel_id",
    "checkin",
    "checkout",
    "adults",
    "children",
    "rooms",
    "dc_id",
];

/// Read a search trace. Events must be in nondecreasing timestamp order.
pub fn ingest_trace(path: &Path) -> Result<Vec<UserSearch>> {
    let source = path.display().to_string();
    read_trace(io::open_reader(path)?, &source)
}

pub fn read_trace<R: std::io::Read>(input: R, source: &str) -> Result<Vec<UserSearch>> {
    let mut out: Vec<UserSearch> = Vec::new();
    io::for_each_row(input, source, &TRACE_HEADER, |rec, line| {
        let timestamp: Seconds = io::field(rec, 0, "timestamp_s", source, line)?;
        let user: u64 = io::field(rec, 1, "user_id", source, line)?;
        let itinerary = io::itinerary_fields(rec, 2, source, line)?;
        let dc: u16 = io::field(rec, 8, "dc_id", source, line)?;
        if let Some(prev) = out.last() {
            if timestamp < prev.timestamp {
                return Err(Error::parse(
                    source,
                    line,
                    format!(
                        "timestamp {timestamp} is earlier than the previous event at {}",
                        prev.timestamp
                    ),
                ));
            }
        }
        out.push(UserSearch {
            user: UserId(user),
            itinerary,
            timestamp,
            dc: DcId(dc),
        });
        Ok(())
    })?;
    Ok(out)
}

pub fn write_trace(path: &Path, searches: &[UserSearch]) -> Result<()> {
    let mut w = io::create_writer(path)?;
    write_trace_to(&mut w, searches)?;
    w.flush()?;
    Ok(())
}

pub fn write_trace_to<W: Write>(w: &mut W, searches: &[UserSearch]) -> Result<()> {
    writeln!(w, "{}", TRACE_HEADER.join(","))?;
    for s in searches {
        writeln!(
            w,
            "{},{},{},{}",
            s.timestamp,
            s.user.0,
            io::format_itinerary(&s.itinerary),
            s.dc.0
        )?;
    }
    Ok(())
}
