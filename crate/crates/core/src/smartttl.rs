//! Per-cluster TTL assignment.
//!
//! The pipeline has three stages:
//!
//! 1. **Duration extraction.** Consecutive fetches of the same itinerary that
//!    observe different prices bound how long the earlier price lasted; each
//!    such pair yields one sample (the time between the two fetches).
//! 2. **Clustering.** Itineraries are grouped by whole-day checkin lead and
//!    availability (sold out or not). Leads are clamped to a cap, so there
//!    are at most `2 * (cap + 1)` clusters.
//! 3. **Assignment.** For each cluster the hit rate of a TTL is read off the
//!    empirical CDF of same-itinerary search gaps, and price accuracy is
//!    approximated as `mean(min(1, d / ttl))` over duration samples `d`. The
//!    TTL on a candidate grid maximizing `hit * p_b * accuracy` wins.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::domain::{Itinerary, Price, Seconds, SimClock, UserSearch, DAY};
use crate::error::{Error, Result};
use crate::io;

/// One supplier response: what the fetch log records.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FetchRecord {
    pub itinerary: Itinerary,
    pub time: Seconds,
    pub price: Price,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DurationSample {
    pub itinerary: Itinerary,
    /// When the price whose duration this is was (first) observed.
    pub observed_at: Seconds,
    /// The price whose duration this is.
    pub price: Price,
    pub duration: Seconds,
    /// A lower bound ("lasted at least this long") rather than an observed
    /// change. Only emitted on request.
    pub censored: bool,
}

/// Extract price-duration samples from a fetch log.
///
/// Records may interleave itineraries but must be time-ordered within each
/// itinerary. With `emit_censored`, consecutive equal prices also emit a
/// censored sample.
pub fn extract_durations(log: &[FetchRecord], emit_censored: bool) -> Result<Vec<DurationSample>> {
    let mut last: HashMap<Itinerary, (Seconds, Price)> = HashMap::new();
    let mut out = Vec::new();
    for rec in log {
        if let Some(&(t0, p0)) = last.get(&rec.itinerary) {
            if rec.time < t0 {
                return Err(Error::UnsortedLog {
                    hotel: rec.itinerary.hotel.0,
                    time: rec.time,
                });
            }
            let duration = rec.time - t0;
            if duration > 0 && (p0 != rec.price || emit_censored) {
                out.push(DurationSample {
                    itinerary: rec.itinerary,
                    observed_at: t0,
                    price: p0,
                    duration,
                    censored: p0 == rec.price,
                });
            }
        }
        last.insert(rec.itinerary, (rec.time, rec.price));
    }
    Ok(out)
}

/// Default cap on the checkin lead used for clustering.
pub const DEFAULT_LEAD_CAP: u16 = 365;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ClusterKey {
    pub checkin_lead: u16,
    pub available: bool,
}

impl ClusterKey {
    /// Cluster of a search made on `search_date`.
    pub fn for_search(
        itinerary: &Itinerary,
        search_date: NaiveDate,
        available: bool,
        lead_cap: u16,
    ) -> Result<Self> {
        let checkin = itinerary.criteria.checkin();
        let lead = (checkin - search_date).num_days();
        if lead < 0 {
            return Err(Error::CheckinBeforeSearch {
                checkin,
                search_date,
            });
        }
        Ok(Self {
            checkin_lead: lead.min(lead_cap as i64) as u16,
            available,
        })
    }

    /// Cluster at simulation time `t`. Past checkins clamp to lead 0.
    pub fn at(itinerary: &Itinerary, clock: &SimClock, t: Seconds, available: bool, lead_cap: u16) -> Self {
        let lead = clock.lead_days(itinerary.criteria.checkin(), t);
        Self {
            checkin_lead: lead.clamp(0, lead_cap as i64) as u16,
            available,
        }
    }

    /// Number of distinct keys under `lead_cap`.
    pub fn cardinality(lead_cap: u16) -> usize {
        2 * (lead_cap as usize + 1)
    }
}

/// Hit probability as a function of TTL: the empirical CDF of gap times.
#[derive(Debug, Clone)]
pub struct MissRatioCurve {
    sorted: Vec<Seconds>,
}

impl MissRatioCurve {
    pub fn from_gaps(gaps: &[Seconds]) -> Result<Self> {
        if gaps.is_empty() {
            return Err(Error::EmptySamples("gap samples"));
        }
        let mut sorted = gaps.to_vec();
        sorted.sort_unstable();
        Ok(Self { sorted })
    }

    /// Fraction of gaps `<= ttl`.
    pub fn hit(&self, ttl: Seconds) -> f64 {
        self.sorted.partition_point(|&g| g <= ttl) as f64 / self.sorted.len() as f64
    }

    pub fn miss(&self, ttl: Seconds) -> f64 {
        1.0 - self.hit(ttl)
    }

    pub fn len(&self) -> usize {
        self.sorted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted.is_empty()
    }
}

/// Convenience wrapper returning the curve as a closure.
pub fn miss_ratio_curve(gaps: &[Seconds]) -> Result<impl Fn(Seconds) -> f64> {
    let curve = MissRatioCurve::from_gaps(gaps)?;
    Ok(move |ttl| curve.hit(ttl))
}

/// Sorted durations with prefix sums, so `sum(min(d, ttl))` is a binary
/// search.
#[derive(Debug, Clone)]
struct DurationProfile {
    sorted: Vec<Seconds>,
    prefix: Vec<i128>,
}

impl DurationProfile {
    fn new(durations: &[Seconds]) -> Self {
        let mut sorted = durations.to_vec();
        sorted.sort_unstable();
        let mut prefix = Vec::with_capacity(sorted.len() + 1);
        prefix.push(0i128);
        for &d in &sorted {
            prefix.push(prefix.last().unwrap() + d as i128);
        }
        Self { sorted, prefix }
    }

    /// `(sum(min(d, ttl)), n * ttl)`.
    fn ratio(&self, ttl: Seconds) -> (i128, i128) {
        let k = self.sorted.partition_point(|&d| d <= ttl);
        let n = self.sorted.len();
        let num = self.prefix[k] + (n - k) as i128 * ttl as i128;
        (num, n as i128 * ttl as i128)
    }

    fn accuracy(&self, ttl: Seconds) -> f64 {
        let (num, den) = self.ratio(ttl);
        num as f64 / den as f64
    }
}

/// `mean(min(1, d / ttl))` over the duration samples, as an exact fraction
/// `(numerator, denominator)`.
pub fn accuracy_ratio(durations: &[Seconds], ttl: Seconds) -> Result<(i128, i128)> {
    if ttl <= 0 {
        return Err(Error::NonPositiveTtl(ttl));
    }
    if durations.is_empty() {
        return Err(Error::EmptySamples("duration samples"));
    }
    Ok(DurationProfile::new(durations).ratio(ttl))
}

/// Approximate price accuracy of serving quotes cached for `ttl`.
pub fn accuracy_estimate(durations: &[Seconds], ttl: Seconds) -> Result<f64> {
    accuracy_ratio(durations, ttl).map(|(n, d)| n as f64 / d as f64)
}

/// Candidate TTLs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TtlGrid(Vec<Seconds>);

impl TtlGrid {
    pub fn new(mut ttls: Vec<Seconds>) -> Result<Self> {
        if ttls.is_empty() {
            return Err(Error::EmptySamples("candidate TTLs"));
        }
        if let Some(&bad) = ttls.iter().find(|&&t| t <= 0) {
            return Err(Error::NonPositiveTtl(bad));
        }
        ttls.sort_unstable();
        ttls.dedup();
        Ok(Self(ttls))
    }

    /// `start, start + step, ..., <= end`.
    pub fn range(start: Seconds, end: Seconds, step: Seconds) -> Result<Self> {
        if step <= 0 {
            return Err(Error::InvalidConfig("grid step must be > 0".into()));
        }
        Self::new((0..).map(|i| start + i * step).take_while(|&t| t <= end).collect())
    }

    pub fn as_slice(&self) -> &[Seconds] {
        &self.0
    }
}

impl Default for TtlGrid {
    /// 15 minutes to 24 hours in 15-minute steps.
    fn default() -> Self {
        Self::range(900, DAY, 900).expect("static grid")
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Cluster {
    pub key: Option<ClusterKey>,
    pub duration_samples: Vec<Seconds>,
    pub gap_samples: Vec<Seconds>,
    pub assigned_ttl: Option<Seconds>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TtlChoice {
    pub ttl: Seconds,
    pub hit: f64,
    pub accuracy: f64,
    pub objective: f64,
}

/// The grid TTL maximizing `hit(ttl) * p_b_mean * accuracy(ttl)`. Ties go to
/// the smaller TTL.
pub fn assign_ttl(cluster: &Cluster, p_b_mean: f64, grid: &TtlGrid) -> Result<TtlChoice> {
    if cluster.duration_samples.is_empty() {
        return Err(Error::EmptySamples("duration samples"));
    }
    let curve = MissRatioCurve::from_gaps(&cluster.gap_samples)?;
    let profile = DurationProfile::new(&cluster.duration_samples);
    let mut best: Option<TtlChoice> = None;
    for &ttl in grid.as_slice() {
        let hit = curve.hit(ttl);
        let accuracy = profile.accuracy(ttl);
        let objective = hit * p_b_mean * accuracy;
        if best.is_none_or(|b| objective > b.objective) {
            best = Some(TtlChoice {
                ttl,
                hit,
                accuracy,
                objective,
            });
        }
    }
    Ok(best.expect("grid is nonempty"))
}

/// Per-cluster statistics gathered from training data.
#[derive(Debug, Clone, Default)]
pub struct ClusterStats {
    pub durations: Vec<Seconds>,
    pub gaps: Vec<Seconds>,
    /// Searches served a price.
    pub served: u64,
    /// Served searches that led to a booking attempt.
    pub attempts: u64,
}

#[derive(Debug, Clone, Default)]
pub struct TtlTrainingSet {
    pub clusters: BTreeMap<ClusterKey, ClusterStats>,
}

impl TtlTrainingSet {
    pub fn add_duration(&mut self, key: ClusterKey, duration: Seconds) {
        self.clusters.entry(key).or_default().durations.push(duration);
    }

    pub fn add_gap(&mut self, key: ClusterKey, gap: Seconds) {
        self.clusters.entry(key).or_default().gaps.push(gap);
    }

    pub fn add_served(&mut self, key: ClusterKey, attempted: bool) {
        let c = self.clusters.entry(key).or_default();
        c.served += 1;
        c.attempts += attempted as u64;
    }

    pub fn n_duration_samples(&self) -> usize {
        self.clusters.values().map(|c| c.durations.len()).sum()
    }

    /// Attempt rate over every served search, if any were served.
    pub fn global_p_b(&self) -> Option<f64> {
        let served: u64 = self.clusters.values().map(|c| c.served).sum();
        let attempts: u64 = self.clusters.values().map(|c| c.attempts).sum();
        (served > 0).then(|| attempts as f64 / served as f64)
    }

    pub fn cluster_p_b(&self, key: &ClusterKey) -> Option<f64> {
        self.clusters
            .get(key)
            .filter(|c| c.served > 0)
            .map(|c| c.attempts as f64 / c.served as f64)
    }

    /// Build the training set from a fetch log alone, or from a fetch log plus
    /// the search trace it served. Without searches, gaps are taken between
    /// consecutive fetches of an itinerary.
    pub fn from_fetch_log(
        log: &[FetchRecord],
        searches: Option<&[UserSearch]>,
        clock: &SimClock,
        lead_cap: u16,
    ) -> Result<Self> {
        let mut set = Self::default();
        for s in extract_durations(log, false)? {
            let key = ClusterKey::at(&s.itinerary, clock, s.observed_at, s.price.is_available(), lead_cap);
            set.add_duration(key, s.duration);
        }
        match searches {
            Some(searches) => {
                // Availability at a search is that of the newest fetch at or
                // before it.
                let mut by_itinerary: HashMap<Itinerary, Vec<(Seconds, Price)>> = HashMap::new();
                for r in log {
                    by_itinerary.entry(r.itinerary).or_default().push((r.time, r.price));
                }
                let available_at = |it: &Itinerary, t: Seconds| {
                    by_itinerary
                        .get(it)
                        .and_then(|v| {
                            let i = v.partition_point(|&(ft, _)| ft <= t);
                            i.checked_sub(1).map(|i| v[i].1.is_available())
                        })
                        .unwrap_or(true)
                };
                for (s, gap) in search_gaps(searches) {
                    let key = ClusterKey::at(
                        &s.itinerary,
                        clock,
                        s.timestamp,
                        available_at(&s.itinerary, s.timestamp),
                        lead_cap,
                    );
                    set.add_gap(key, gap);
                }
            }
            None => {
                let mut last: HashMap<Itinerary, Seconds> = HashMap::new();
                for r in log {
                    if let Some(prev) = last.insert(r.itinerary, r.time) {
                        let key = ClusterKey::at(&r.itinerary, clock, r.time, r.price.is_available(), lead_cap);
                        set.add_gap(key, r.time - prev);
                    }
                }
            }
        }
        Ok(set)
    }
}

/// Each search that repeats an earlier search of the same itinerary,
/// paired with the time since that earlier search.
pub fn search_gaps(searches: &[UserSearch]) -> Vec<(&UserSearch, Seconds)> {
    let mut last: HashMap<Itinerary, Seconds> = HashMap::new();
    let mut out = Vec::new();
    for s in searches {
        if let Some(prev) = last.insert(s.itinerary, s.timestamp) {
            out.push((s, s.timestamp - prev));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TtlPipelineConfig {
    pub grid: TtlGrid,
    /// Clusters with fewer duration samples inherit from the nearest lead.
    pub min_duration_samples: usize,
    pub lead_cap: u16,
    /// TTL for keys with no usable data at all.
    pub default_ttl: Seconds,
}

impl Default for TtlPipelineConfig {
    fn default() -> Self {
        Self {
            grid: TtlGrid::default(),
            min_duration_samples: 30,
            lead_cap: DEFAULT_LEAD_CAP,
            default_ttl: 900,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TtlRow {
    pub ttl: Seconds,
    pub n_duration_samples: usize,
    pub n_gap_samples: usize,
    /// Estimated accuracy at `ttl`, when known.
    pub accuracy: Option<f64>,
    /// Objective value at `ttl`, when assigned from this cluster's own data.
    pub objective: Option<f64>,
}

/// Cluster -> TTL. Keys missing from the table resolve to the nearest lead
/// with the same availability, then the nearest with either availability,
/// then the default.
#[derive(Debug, Clone)]
pub struct TtlTable {
    rows: BTreeMap<ClusterKey, TtlRow>,
    default_ttl: Seconds,
    lead_cap: u16,
    // Index `lead * 2 + available` -> (ttl, accuracy).
    dense: Vec<(Seconds, Option<f64>)>,
}

impl TtlTable {
    pub fn new(rows: BTreeMap<ClusterKey, TtlRow>, default_ttl: Seconds, lead_cap: u16) -> Result<Self> {
        if default_ttl <= 0 {
            return Err(Error::NonPositiveTtl(default_ttl));
        }
        if let Some(r) = rows.values().find(|r| r.ttl <= 0) {
            return Err(Error::NonPositiveTtl(r.ttl));
        }
        let mut table = Self {
            rows,
            default_ttl,
            lead_cap,
            dense: Vec::new(),
        };
        table.dense = (0..ClusterKey::cardinality(lead_cap))
            .map(|i| {
                let key = ClusterKey {
                    checkin_lead: (i / 2) as u16,
                    available: i % 2 == 1,
                };
                table.resolve(&key)
            })
            .collect();
        Ok(table)
    }

    /// Every key maps to `ttl`.
    pub fn uniform(ttl: Seconds) -> Result<Self> {
        Self::new(BTreeMap::new(), ttl, DEFAULT_LEAD_CAP)
    }

    fn nearest<'a>(
        iter: impl Iterator<Item = (&'a ClusterKey, &'a TtlRow)>,
        lead: u16,
    ) -> Option<&'a TtlRow> {
        iter.min_by_key(|(k, _)| ((k.checkin_lead as i32 - lead as i32).abs(), k.checkin_lead))
            .map(|(_, r)| r)
    }

    fn resolve(&self, key: &ClusterKey) -> (Seconds, Option<f64>) {
        if let Some(r) = self.rows.get(key) {
            return (r.ttl, r.accuracy);
        }
        let same = Self::nearest(
            self.rows.iter().filter(|(k, _)| k.available == key.available),
            key.checkin_lead,
        );
        match same.or_else(|| Self::nearest(self.rows.iter(), key.checkin_lead)) {
            Some(r) => (r.ttl, r.accuracy),
            None => (self.default_ttl, None),
        }
    }

    pub fn lookup(&self, key: &ClusterKey) -> Seconds {
        self.lookup_with_accuracy(key).0
    }

    pub fn lookup_with_accuracy(&self, key: &ClusterKey) -> (Seconds, Option<f64>) {
        let lead = key.checkin_lead.min(self.lead_cap) as usize;
        self.dense[lead * 2 + key.available as usize]
    }

    pub fn rows(&self) -> &BTreeMap<ClusterKey, TtlRow> {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn default_ttl(&self) -> Seconds {
        self.default_ttl
    }

    pub fn lead_cap(&self) -> u16 {
        self.lead_cap
    }

    pub const CSV_HEADER: [&'static str; 5] = [
        "checkin_lead",
        "available",
        "ttl_seconds",
        "n_duration_samples",
        "n_gap_samples",
    ];

    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "{}", Self::CSV_HEADER.join(","))?;
        for (k, r) in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{}",
                k.checkin_lead, k.available, r.ttl, r.n_duration_samples, r.n_gap_samples
            )?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut w = io::create_writer(path)?;
        self.write_csv(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(input: R, source: &str, default_ttl: Seconds) -> Result<Self> {
        let mut rows = BTreeMap::new();
        let mut lead_cap = DEFAULT_LEAD_CAP;
        io::for_each_row(input, source, &Self::CSV_HEADER, |rec, line| {
            let lead: u16 = io::field(rec, 0, "checkin_lead", source, line)?;
            let available: bool = io::field(rec, 1, "available", source, line)?;
            let ttl: Seconds = io::field(rec, 2, "ttl_seconds", source, line)?;
            if ttl <= 0 {
                return Err(Error::parse(source, line, format!("ttl_seconds {ttl} must be > 0")));
            }
            lead_cap = lead_cap.max(lead);
            let row = TtlRow {
                ttl,
                n_duration_samples: io::field(rec, 3, "n_duration_samples", source, line)?,
                n_gap_samples: io::field(rec, 4, "n_gap_samples", source, line)?,
                accuracy: None,
                objective: None,
            };
            if rows
                .insert(ClusterKey { checkin_lead: lead, available }, row)
                .is_some()
            {
                return Err(Error::parse(source, line, "duplicate cluster key"));
            }
            Ok(())
        })?;
        Self::new(rows, default_ttl, lead_cap)
    }

    pub fn load_csv(path: &Path, default_ttl: Seconds) -> Result<Self> {
        Self::read_csv(io::open_reader(path)?, &path.display().to_string(), default_ttl)
    }
}

/// Assign a TTL to every cluster of the training set.
pub fn build_ttl_table(set: &TtlTrainingSet, config: &TtlPipelineConfig) -> Result<TtlTable> {
    if set.n_duration_samples() == 0 {
        return Err(Error::EmptySamples("duration samples"));
    }
    let global_p_b = set.global_p_b().filter(|&p| p > 0.0);
    let qualified = |c: &ClusterStats| c.durations.len() >= config.min_duration_samples && !c.gaps.is_empty();

    let mut own: BTreeMap<ClusterKey, TtlChoice> = BTreeMap::new();
    for (key, stats) in &set.clusters {
        if stats.durations.is_empty() || stats.gaps.is_empty() {
            continue;
        }
        // Positive scaling leaves the argmax alone, so a missing or zero
        // booking rate falls back to one.
        let p_b = set
            .cluster_p_b(key)
            .filter(|&p| p > 0.0)
            .or(global_p_b)
            .unwrap_or(1.0);
        let cluster = Cluster {
            key: Some(*key),
            duration_samples: stats.durations.clone(),
            gap_samples: stats.gaps.clone(),
            assigned_ttl: None,
        };
        own.insert(*key, assign_ttl(&cluster, p_b, &config.grid)?);
    }

    let donors: Vec<(ClusterKey, TtlChoice)> = own
        .iter()
        .filter(|(k, _)| qualified(&set.clusters[k]))
        .map(|(k, c)| (*k, *c))
        .collect();
    let nearest_donor = |key: &ClusterKey, same_availability: bool| {
        donors
            .iter()
            .filter(|(k, _)| !same_availability || k.available == key.available)
            .min_by_key(|(k, _)| {
                (
                    (k.checkin_lead as i32 - key.checkin_lead as i32).abs(),
                    k.checkin_lead,
                )
            })
            .map(|(_, c)| *c)
    };

    let mut rows = BTreeMap::new();
    for (key, stats) in &set.clusters {
        let choice = if qualified(stats) {
            own.get(key).copied()
        } else {
            nearest_donor(key, true)
                .or_else(|| nearest_donor(key, false))
                .or_else(|| own.get(key).copied())
        };
        let row = TtlRow {
            ttl: choice.map_or(config.default_ttl, |c| c.ttl),
            n_duration_samples: stats.durations.len(),
            n_gap_samples: stats.gaps.len(),
            accuracy: choice.map(|c| c.accuracy),
            objective: if qualified(stats) { choice.map(|c| c.objective) } else { None },
        };
        rows.insert(*key, row);
    }
    TtlTable::new(rows, config.default_ttl, config.lead_cap)
}

pub const FETCH_LOG_HEADER: [&str; 8] = [
    "timestamp_s",
    "hotel_id",
    "checkin",
    "checkout",
    "adults",
    "children",
    "rooms",
    "price_minor",
];

pub fn read_fetch_log<R: std::io::Read>(input: R, source: &str) -> Result<Vec<FetchRecord>> {
    let mut out = Vec::new();
    io::for_each_row(input, source, &FETCH_LOG_HEADER, |rec, line| {
        out.push(FetchRecord {
            time: io::field(rec, 0, "timestamp_s", source, line)?,
            itinerary: io::itinerary_fields(rec, 1, source, line)?,
            price: Price(io::field(rec, 7, "price_minor", source, line)?),
        });
        Ok(())
    })?;
    Ok(out)
}

pub fn load_fetch_log(path: &Path) -> Result<Vec<FetchRecord>> {
    read_fetch_log(io::open_reader(path)?, &path.display().to_string())
}

pub fn write_fetch_log<W: Write>(w: &mut W, log: &[FetchRecord]) -> Result<()> {
    writeln!(w, "{}", FETCH_LOG_HEADER.join(","))?;
    for r in log {
        writeln!(w, "{},{},{}", r.time, io::format_itinerary(&r.itinerary), r.price.0)?;
    }
    Ok(())
}

pub fn save_fetch_log(path: &Path, log: &[FetchRecord]) -> Result<()> {
    let mut w = io::create_writer(path)?;
    write_fetch_log(&mut w, log)?;
    w.flush()?;
    Ok(())
}
