//! The discrete-event loop.
//!
//! Time advances in whole seconds. Within a second the order is: planned
//! fetches of the aggressive planner, then user searches in trace order,
//! then the LRU refresher spends the budget left over. A hit serves the
//! cached quote. A miss serves nothing; under passive policies it fetches
//! from the supplier (if the per-second cap allows) so that later searches
//! can hit.
//! Booking attempts use common random numbers indexed by the search's
//! position in the trace, so arms replaying the same trace face identical
//! booking draws.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cache::{LruSearchCache, PriceDb};
use crate::domain::{
    BookingProbabilities, Itinerary, Price, PriceQuote, Seconds, SimClock, UserSearch, DAY,
};
use crate::error::{Error, Result};
use crate::rng;
use crate::scheduler::{
    build_schedule_lenient, lru_refresh_batch, select_top_requests, Admission, ValueRow,
    ValueTable,
};
use crate::smartttl::{
    build_ttl_table, search_gaps, ClusterKey, FetchRecord, TtlPipelineConfig, TtlTable,
    TtlTrainingSet,
};
use crate::supplier::{FetchOutcome, Supplier, SupplierConfig, UtilizationReport};
use crate::trace::{generate_price_timeline, PriceProcessConfig, PriceTimeline};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicySpec {
    /// Fetch on miss; every quote lives `ttl` seconds.
    PassiveFixedTtl { ttl: Seconds },
    /// Fetch on miss; quotes live for their cluster's TTL.
    PassiveSmartTtl,
    /// Passive with cluster TTLs, plus refreshing the recently searched
    /// itineraries closest to expiry with each second's unused budget.
    AggressiveLru { capacity: usize },
    /// A daily plan of the most valuable refreshes. A positive
    /// `reserve_passive_fraction` holds that share of the budget back for
    /// fetches on misses; at zero, misses are never fetched.
    AggressiveSmartScheduler {
        #[serde(default)]
        reserve_passive_fraction: f64,
        #[serde(default)]
        admission: Admission,
    },
}

impl PolicySpec {
    pub fn smart_scheduler() -> Self {
        Self::AggressiveSmartScheduler { reserve_passive_fraction: 0.0, admission: Admission::Atomic }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::PassiveFixedTtl { .. } => "passive_fixed_ttl",
            Self::PassiveSmartTtl => "passive_smart_ttl",
            Self::AggressiveLru { .. } => "aggressive_lru",
            Self::AggressiveSmartScheduler { .. } => "aggressive_smart_scheduler",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::PassiveFixedTtl { ttl } if ttl <= 0 => Err(Error::NonPositiveTtl(ttl)),
            Self::AggressiveLru { capacity: 0 } => {
                Err(Error::InvalidConfig("LRU capacity must be > 0".into()))
            }
            Self::AggressiveSmartScheduler { reserve_passive_fraction: r, .. }
                if !(0.0..=1.0).contains(&r) =>
            {
                Err(Error::InvalidConfig(format!("reserve_passive_fraction {r} must lie in [0, 1]")))
            }
            _ => Ok(()),
        }
    }

    fn needs_ttl_table(&self) -> bool {
        !matches!(self, Self::PassiveFixedTtl { .. })
    }
}

/// Learned inputs of the smart policies.
#[derive(Debug, Clone, Default)]
pub struct Models {
    pub ttl_table: Option<TtlTable>,
    pub values: Option<ValueTable>,
}

/// Everything a run replays: the search trace, the hidden booking
/// propensities, and the ground-truth price process.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub clock: SimClock,
    /// End of the simulated time line; searches must precede it.
    pub horizon: Seconds,
    pub searches: Vec<UserSearch>,
    pub booking: BookingProbabilities,
    pub price: PriceProcessConfig,
    pub seed: u64,
}

/// A half-open time range `[start, end)` starting at a midnight.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub start: Seconds,
    pub end: Seconds,
}

impl Window {
    pub fn new(start: Seconds, end: Seconds) -> Result<Self> {
        if start < 0 || end <= start {
            return Err(Error::InvalidConfig(format!("empty window [{start}, {end})")));
        }
        if start % DAY != 0 {
            return Err(Error::InvalidConfig(format!("window start {start} is not a midnight")));
        }
        Ok(Self { start, end })
    }

    pub fn days(&self) -> usize {
        ((self.end - self.start + DAY - 1) / DAY) as usize
    }
}

/// Which half of a 50/50 user split a run sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UserSplit {
    pub seed: u64,
    pub arm: u8,
}

impl UserSplit {
    pub fn arm_of(seed: u64, user: u64) -> u8 {
        (rng::mix(user ^ rng::stream_seed(seed, "user-split")) % 2) as u8
    }

    fn admits(&self, s: &UserSearch) -> bool {
        Self::arm_of(self.seed, s.user.0) == self.arm
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RecordOptions {
    pub fetch_log: bool,
    pub outcomes: bool,
}

#[derive(Debug, Clone)]
pub struct RunSpec<'a> {
    pub label: String,
    pub window: Window,
    pub supplier: SupplierConfig,
    pub policy: PolicySpec,
    pub models: &'a Models,
    pub split: Option<UserSplit>,
    pub record: RecordOptions,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DayMetrics {
    pub searches: u64,
    pub hits: u64,
    pub misses: u64,
    pub fetches: u64,
    pub rejected: u64,
    pub attempts: u64,
    pub bookings: u64,
}

impl DayMetrics {
    pub fn hit_rate(&self) -> f64 {
        ratio(self.hits, self.searches)
    }

    /// Share of booking attempts whose price was still right.
    pub fn accuracy(&self) -> f64 {
        ratio(self.bookings, self.attempts)
    }

    fn add(&mut self, o: &DayMetrics) {
        self.searches += o.searches;
        self.hits += o.hits;
        self.misses += o.misses;
        self.fetches += o.fetches;
        self.rejected += o.rejected;
        self.attempts += o.attempts;
        self.bookings += o.bookings;
    }
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub arm: String,
    pub days: Vec<DayMetrics>,
    pub total: DayMetrics,
    /// Accepted supplier calls in each second of the window.
    pub qps: Vec<u32>,
}

pub const METRICS_HEADER: [&str; 10] = [
    "day", "arm", "searches", "hits", "hit_rate", "fetches", "rejected", "attempts", "bookings",
    "accuracy",
];

impl Metrics {
    fn row<W: Write>(w: &mut W, day: &str, arm: &str, m: &DayMetrics) -> Result<()> {
        writeln!(
            w,
            "{day},{arm},{},{},{:.6},{},{},{},{},{:.6}",
            m.searches,
            m.hits,
            m.hit_rate(),
            m.fetches,
            m.rejected,
            m.attempts,
            m.bookings,
            m.accuracy()
        )?;
        Ok(())
    }

    /// Per-day rows followed by a `total` row.
    pub fn write_csv_rows<W: Write>(&self, w: &mut W) -> Result<()> {
        for (d, m) in self.days.iter().enumerate() {
            Self::row(w, &d.to_string(), &self.arm, m)?;
        }
        Self::row(w, "total", &self.arm, &self.total)
    }

    pub fn write_qps_csv<W: Write>(&self, w: &mut W, start: Seconds) -> Result<()> {
        writeln!(w, "second,accepted")?;
        for (i, q) in self.qps.iter().enumerate() {
            writeln!(w, "{},{q}", start + i as Seconds)?;
        }
        Ok(())
    }
}

pub fn write_metrics_csv<W: Write>(w: &mut W, metrics: &[&Metrics]) -> Result<()> {
    writeln!(w, "{}", METRICS_HEADER.join(","))?;
    for m in metrics {
        m.write_csv_rows(w)?;
    }
    Ok(())
}

pub fn save_metrics_csv(path: &Path, metrics: &[&Metrics]) -> Result<()> {
    let mut w = crate::io::create_writer(path)?;
    write_metrics_csv(&mut w, metrics)?;
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SearchOutcome {
    /// Position in the scenario's trace.
    pub index: usize,
    pub hit: bool,
    pub served: Option<Price>,
    pub attempted: bool,
    pub booked: bool,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub metrics: Metrics,
    pub utilization: UtilizationReport,
    pub fetch_log: Vec<FetchRecord>,
    pub outcomes: Vec<SearchOutcome>,
}

/// A scenario with its price timelines materialized.
#[derive(Debug, Clone)]
pub struct Simulation {
    scenario: Scenario,
    ids: HashMap<Itinerary, u32>,
    itineraries: Vec<Itinerary>,
    timelines: Vec<PriceTimeline>,
    p_b: Vec<f64>,
    search_ids: Vec<u32>,
    price_seed: u64,
    booking_seed: u64,
}

struct Universe<'a> {
    sim: &'a Simulation,
    extra_ids: HashMap<Itinerary, u32>,
    extra: Vec<(Itinerary, PriceTimeline)>,
}

impl Universe<'_> {
    fn id_of(&self, it: &Itinerary) -> Option<u32> {
        self.sim.ids.get(it).or_else(|| self.extra_ids.get(it)).copied()
    }

    fn itinerary(&self, id: u32) -> &Itinerary {
        let n = self.sim.itineraries.len();
        match (id as usize).checked_sub(n) {
            None => &self.sim.itineraries[id as usize],
            Some(e) => &self.extra[e].0,
        }
    }

    fn price_at(&self, id: u32, t: Seconds) -> Price {
        let n = self.sim.itineraries.len();
        match (id as usize).checked_sub(n) {
            None => self.sim.timelines[id as usize].price_at(t),
            Some(e) => self.extra[e].1.price_at(t),
        }
    }
}

enum TtlRule<'a> {
    Fixed(Seconds),
    Table(&'a TtlTable),
}

impl TtlRule<'_> {
    fn ttl(&self, it: &Itinerary, clock: &SimClock, t: Seconds, price: Price) -> Seconds {
        match self {
            TtlRule::Fixed(ttl) => *ttl,
            TtlRule::Table(table) => {
                table.lookup(&ClusterKey::at(it, clock, t, price.is_available(), table.lead_cap()))
            }
        }
    }
}

/// A day's plan resolved to interned ids, with the TTL of each item.
struct DayPlan {
    plan: crate::scheduler::SchedulePlan,
    ids: Vec<u32>,
}

impl Simulation {
    pub fn new(scenario: Scenario) -> Result<Self> {
        scenario.price.validate()?;
        if scenario.horizon <= 0 {
            return Err(Error::InvalidConfig("scenario horizon must be > 0".into()));
        }
        if let Some(w) = scenario.searches.windows(2).find(|w| w[1].timestamp < w[0].timestamp) {
            return Err(Error::UnsortedLog { hotel: w[1].itinerary.hotel.0, time: w[1].timestamp });
        }
        if let Some(s) = scenario.searches.iter().find(|s| s.timestamp < 0 || s.timestamp >= scenario.horizon) {
            return Err(Error::InvalidConfig(format!(
                "search at {} outside [0, {})",
                s.timestamp, scenario.horizon
            )));
        }
        let price_seed = rng::stream_seed(scenario.seed, "price");
        let booking_seed = rng::stream_seed(scenario.seed, "booking");
        let mut sim = Self {
            ids: HashMap::new(),
            itineraries: Vec::new(),
            timelines: Vec::new(),
            p_b: Vec::new(),
            search_ids: Vec::with_capacity(scenario.searches.len()),
            price_seed,
            booking_seed,
            scenario,
        };
        for i in 0..sim.scenario.searches.len() {
            let it = sim.scenario.searches[i].itinerary;
            let id = match sim.ids.get(&it) {
                Some(&id) => id,
                None => {
                    let id = sim.itineraries.len() as u32;
                    sim.ids.insert(it, id);
                    sim.itineraries.push(it);
                    sim.timelines.push(generate_price_timeline(
                        &sim.scenario.price,
                        &it,
                        &sim.scenario.clock,
                        sim.scenario.horizon,
                        price_seed,
                    )?);
                    sim.p_b.push(sim.scenario.booking.get(&it).get());
                    id
                }
            };
            sim.search_ids.push(id);
        }
        Ok(sim)
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn clock(&self) -> &SimClock {
        &self.scenario.clock
    }

    /// Ground-truth price of a traced itinerary.
    pub fn true_price(&self, it: &Itinerary, t: Seconds) -> Option<Price> {
        self.ids.get(it).map(|&id| self.timelines[id as usize].price_at(t))
    }

    /// Indices of the trace's searches inside `window`.
    pub fn search_range(&self, window: Window) -> std::ops::Range<usize> {
        let s = &self.scenario.searches;
        s.partition_point(|x| x.timestamp < window.start)..s.partition_point(|x| x.timestamp < window.end)
    }

    fn universe(&self, models: &Models) -> Result<Universe<'_>> {
        let mut u = Universe { sim: self, extra_ids: HashMap::new(), extra: Vec::new() };
        if let Some(values) = &models.values {
            for (it, _) in &values.rows {
                if u.id_of(it).is_none() {
                    let id = (self.itineraries.len() + u.extra.len()) as u32;
                    let timeline = generate_price_timeline(
                        &self.scenario.price,
                        it,
                        &self.scenario.clock,
                        self.scenario.horizon,
                        self.price_seed,
                    )?;
                    u.extra_ids.insert(*it, id);
                    u.extra.push((*it, timeline));
                }
            }
        }
        Ok(u)
    }

    fn plan_day(
        &self,
        universe: &Universe,
        models: &Models,
        day_start: Seconds,
        mu: u32,
        admission: Admission,
    ) -> Result<DayPlan> {
        let (Some(table), Some(values)) = (&models.ttl_table, &models.values) else {
            return Err(Error::InvalidConfig("the scheduler needs a TTL table and a value table".into()));
        };
        let clock = &self.scenario.clock;
        let entries = values.plan_entries(|it| {
            table.lookup(&ClusterKey::at(it, clock, day_start, true, table.lead_cap()))
        })?;
        let selected = select_top_requests(&entries, mu as u64 * DAY as u64, admission);
        let (plan, _) = build_schedule_lenient(&selected, mu);
        let audit = plan.audit();
        if !audit.is_ok() {
            return Err(Error::Invariant(format!("plan for day at {day_start} fails audit: {}", audit.summary())));
        }
        let ids = plan
            .items()
            .iter()
            .map(|item| universe.id_of(&item.itinerary).expect("value table itineraries are interned"))
            .collect();
        Ok(DayPlan { plan, ids })
    }

    pub fn run(&self, spec: &RunSpec) -> Result<RunOutput> {
        spec.policy.validate()?;
        spec.supplier.validate()?;
        let window = spec.window;
        if window.end > self.scenario.horizon {
            return Err(Error::InvalidConfig(format!(
                "window end {} beyond scenario horizon {}",
                window.end, self.scenario.horizon
            )));
        }
        let range = self.search_range(window);
        let n_dc = spec.supplier.n_datacentres();
        if let Some(s) = self.scenario.searches[range.clone()].iter().find(|s| s.dc.0 as usize >= n_dc) {
            return Err(Error::InvalidConfig(format!(
                "trace routes a search to data centre {} but the supplier has {n_dc}",
                s.dc.0
            )));
        }
        if spec.policy.needs_ttl_table() && spec.models.ttl_table.is_none() {
            return Err(Error::InvalidConfig(format!("policy {} needs a TTL table", spec.policy.name())));
        }

        let clock = &self.scenario.clock;
        let universe = self.universe(spec.models)?;
        let source = |id: &u32, t: Seconds| universe.price_at(*id, t);
        let mut supplier = Supplier::new(spec.supplier.clone(), source)?;
        let allocations = spec.supplier.per_dc_allocation.clone();

        let ttl_rule = match (&spec.policy, &spec.models.ttl_table) {
            (PolicySpec::PassiveFixedTtl { ttl }, _) => TtlRule::Fixed(*ttl),
            (_, Some(table)) => TtlRule::Table(table),
            (_, None) => unreachable!("checked above"),
        };
        let (passive, mut lru, scheduler) = match spec.policy {
            PolicySpec::PassiveFixedTtl { .. } | PolicySpec::PassiveSmartTtl => (true, None, None),
            PolicySpec::AggressiveLru { capacity } => (true, Some(LruSearchCache::<u32>::new(capacity)), None),
            PolicySpec::AggressiveSmartScheduler { reserve_passive_fraction: r, admission } => {
                let allocated = spec.supplier.allocated().min(spec.supplier.qps_limit);
                let mu_plan = (allocated as f64 * (1.0 - r)).floor() as u32;
                (r > 0.0, None, Some((mu_plan, admission)))
            }
        };

        let mut db: PriceDb<u32> = PriceDb::new();
        let mut days = vec![DayMetrics::default(); window.days()];
        let mut fetch_log = Vec::new();
        let mut outcomes = Vec::new();
        let mut plan: Option<DayPlan> = None;
        let mut next = range.start;

        // First data centre with budget left this second.
        let free_dc = |supplier: &Supplier<_>, t: Seconds| -> Result<Option<crate::domain::DcId>> {
            for d in 0..allocations.len() {
                let dc = crate::domain::DcId(d as u16);
                if supplier.remaining(dc, t)? > 0 {
                    return Ok(Some(dc));
                }
            }
            Ok(None)
        };

        for t in window.start..window.end {
            let day = &mut days[((t - window.start) / DAY) as usize];

            if let Some((mu_plan, admission)) = scheduler {
                if t % DAY == 0 || plan.is_none() {
                    let day_start = t - t.rem_euclid(DAY);
                    plan = Some(self.plan_day(&universe, spec.models, day_start, mu_plan, admission)?);
                }
                let p = plan.as_ref().expect("planned above");
                for &item in p.plan.at(t.rem_euclid(DAY)) {
                    let id = p.ids[item as usize];
                    let Some(dc) = free_dc(&supplier, t)? else {
                        day.rejected += 1;
                        continue;
                    };
                    match supplier.fetch(&id, dc, t)? {
                        FetchOutcome::Priced { price, fetched_at } => {
                            day.fetches += 1;
                            let ttl = p.plan.items()[item as usize].ttl;
                            db.put(PriceQuote { itinerary: id, price, fetched_at, ttl })?;
                            if spec.record.fetch_log {
                                fetch_log.push(FetchRecord { itinerary: *universe.itinerary(id), time: t, price });
                            }
                        }
                        FetchOutcome::Rejected => day.rejected += 1,
                    }
                }
            }

            while next < range.end && self.scenario.searches[next].timestamp == t {
                let index = next;
                next += 1;
                let search = &self.scenario.searches[index];
                if spec.split.is_some_and(|s| !s.admits(search)) {
                    continue;
                }
                let id = self.search_ids[index];
                day.searches += 1;
                if let Some(lru) = lru.as_mut() {
                    lru.admit(id);
                }
                let mut hit = false;
                let mut served = None;
                if let Some(q) = db.get(&id, t) {
                    if universe.price_at(id, q.fetched_at) != q.price {
                        return Err(Error::Invariant(format!(
                            "cached price of {} differs from the truth at its fetch time",
                            search.itinerary.hotel
                        )));
                    }
                    hit = true;
                    served = Some(q.price);
                    day.hits += 1;
                } else {
                    day.misses += 1;
                    if passive {
                        match supplier.fetch(&id, search.dc, t)? {
                            FetchOutcome::Priced { price, fetched_at } => {
                                day.fetches += 1;
                                let ttl = ttl_rule.ttl(&search.itinerary, clock, t, price);
                                db.put(PriceQuote { itinerary: id, price, fetched_at, ttl })?;
                                if let Some(lru) = lru.as_mut() {
                                    lru.record_fetch(&id, fetched_at, ttl);
                                }
                                if spec.record.fetch_log {
                                    fetch_log.push(FetchRecord { itinerary: search.itinerary, time: t, price });
                                }
                            }
                            FetchOutcome::Rejected => day.rejected += 1,
                        }
                    }
                }
                let mut attempted = false;
                let mut booked = false;
                if let Some(price) = served {
                    if price.is_available() && rng::unit(self.booking_seed, index as u64) < self.p_b[id as usize] {
                        attempted = true;
                        day.attempts += 1;
                        if price == universe.price_at(id, t) {
                            booked = true;
                            day.bookings += 1;
                        }
                    }
                }
                if spec.record.outcomes {
                    outcomes.push(SearchOutcome { index, hit, served, attempted, booked });
                }
            }

            if let Some(lru) = lru.as_mut() {
                // Per-DC leftovers; the loop below stops once the total cap
                // is reached.
                let left: u32 = (0..allocations.len())
                    .map(|d| supplier.remaining(crate::domain::DcId(d as u16), t))
                    .sum::<Result<u32>>()?;
                let mu = spec.supplier.qps_limit;
                let used_this_second = mu - left.min(mu);
                let batch = lru_refresh_batch(lru, mu, used_this_second, t);
                for id in batch {
                    let Some(dc) = free_dc(&supplier, t)? else { break };
                    match supplier.fetch(&id, dc, t)? {
                        FetchOutcome::Priced { price, fetched_at } => {
                            day.fetches += 1;
                            let it = universe.itinerary(id);
                            let ttl = ttl_rule.ttl(it, clock, t, price);
                            db.put(PriceQuote { itinerary: id, price, fetched_at, ttl })?;
                            lru.record_fetch(&id, fetched_at, ttl);
                            if spec.record.fetch_log {
                                fetch_log.push(FetchRecord { itinerary: *it, time: t, price });
                            }
                        }
                        FetchOutcome::Rejected => day.rejected += 1,
                    }
                }
            }
        }

        let (mut utilization, _) = supplier.into_parts();
        utilization.pad_to(window.end);
        let violations = utilization.audit(&spec.supplier);
        if let Some(v) = violations.first() {
            return Err(Error::Invariant(format!(
                "supplier cap exceeded at second {}: {} > {}",
                v.second, v.accepted, v.limit
            )));
        }
        let per_second = utilization.accepted_per_second();
        let qps = per_second[window.start as usize..window.end as usize].to_vec();
        let mut total = DayMetrics::default();
        for d in &days {
            total.add(d);
        }
        Ok(RunOutput {
            metrics: Metrics { arm: spec.label.clone(), days, total, qps },
            utilization,
            fetch_log,
            outcomes,
        })
    }
}

/// One run over a whole scenario with no learned models beyond `models`.
pub fn run(
    scenario: Scenario,
    supplier: &SupplierConfig,
    policy: &PolicySpec,
    models: &Models,
) -> Result<Metrics> {
    let horizon = scenario.horizon;
    let sim = Simulation::new(scenario)?;
    let out = sim.run(&RunSpec {
        label: policy.name().to_string(),
        window: Window::new(0, horizon)?,
        supplier: supplier.clone(),
        policy: policy.clone(),
        models,
        split: None,
        record: RecordOptions::default(),
    })?;
    Ok(out.metrics)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    /// TTL of the passive policy that generates the training fetch log.
    pub fixed_ttl: Seconds,
    pub pipeline: TtlPipelineConfig,
    /// Pseudo-searches pulling each itinerary's booking rate toward its
    /// cluster mean.
    pub smoothing_weight: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self { fixed_ttl: 900, pipeline: TtlPipelineConfig::default(), smoothing_weight: 10.0 }
    }
}

/// `(attempts + weight * prior) / (served + weight)`.
pub fn smoothed_p_b(attempts: u64, served: u64, prior: f64, weight: f64) -> f64 {
    let denom = served as f64 + weight;
    if denom <= 0.0 {
        return prior;
    }
    (attempts as f64 + weight * prior) / denom
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ServedCounts {
    pub searches: u64,
    pub served: u64,
    pub attempts: u64,
}

#[derive(Debug, Clone)]
pub struct Estimates {
    pub ttl_table: TtlTable,
    pub values: ValueTable,
    pub cluster_p_b: BTreeMap<ClusterKey, f64>,
    pub global_p_b: f64,
    pub per_itinerary: BTreeMap<Itinerary, ServedCounts>,
    pub training: RunOutput,
}

impl Estimates {
    pub fn models(&self) -> Models {
        Models { ttl_table: Some(self.ttl_table.clone()), values: Some(self.values.clone()) }
    }

    /// Booking rate of an itinerary never seen in training.
    pub fn fallback_p_b(&self, key: &ClusterKey) -> f64 {
        self.cluster_p_b.get(key).copied().unwrap_or(self.global_p_b)
    }
}

/// Learn the TTL table and per-itinerary values from a passive fixed-TTL
/// run over `window`.
pub fn estimate_probabilities(
    sim: &Simulation,
    window: Window,
    supplier: &SupplierConfig,
    config: &TrainingConfig,
) -> Result<Estimates> {
    let range = sim.search_range(window);
    if range.is_empty() {
        return Err(Error::EmptySamples("training searches"));
    }
    let no_models = Models::default();
    let training = sim.run(&RunSpec {
        label: "training".into(),
        window,
        supplier: supplier.clone(),
        policy: PolicySpec::PassiveFixedTtl { ttl: config.fixed_ttl },
        models: &no_models,
        split: None,
        record: RecordOptions { fetch_log: true, outcomes: true },
    })?;
    let clock = sim.clock();
    let cap = config.pipeline.lead_cap;
    let searches = &sim.scenario().searches[range.clone()];

    let mut set = TtlTrainingSet::from_fetch_log(&training.fetch_log, None, clock, cap)?;
    // Gaps come from the searches, not the fetches.
    for c in set.clusters.values_mut() {
        c.gaps.clear();
    }
    for (s, gap) in search_gaps(searches) {
        let available = sim.true_price(&s.itinerary, s.timestamp).is_none_or(|p| p.is_available());
        set.add_gap(ClusterKey::at(&s.itinerary, clock, s.timestamp, available, cap), gap);
    }

    let mut per_itinerary: BTreeMap<Itinerary, ServedCounts> = BTreeMap::new();
    for s in searches {
        per_itinerary.entry(s.itinerary).or_default().searches += 1;
    }
    for o in &training.outcomes {
        let s = &sim.scenario().searches[o.index];
        if let Some(price) = o.served {
            set.add_served(ClusterKey::at(&s.itinerary, clock, s.timestamp, price.is_available(), cap), o.attempted);
            let c = per_itinerary.entry(s.itinerary).or_default();
            c.served += 1;
            c.attempts += o.attempted as u64;
        }
    }

    let ttl_table = build_ttl_table(&set, &config.pipeline)?;
    let global_p_b = set.global_p_b().unwrap_or(0.0);
    let cluster_p_b: BTreeMap<ClusterKey, f64> =
        set.clusters.keys().filter_map(|k| set.cluster_p_b(k).map(|p| (*k, p))).collect();

    let train_days = (window.end - window.start) as f64 / DAY as f64;
    let mut rows = Vec::with_capacity(per_itinerary.len());
    for (it, counts) in &per_itinerary {
        let key = ClusterKey::at(it, clock, window.end, true, cap);
        let prior = cluster_p_b.get(&key).copied().unwrap_or(global_p_b);
        let p_b = smoothed_p_b(counts.attempts, counts.served, prior, config.smoothing_weight).clamp(0.0, 1.0);
        let p_a = ttl_table.lookup_with_accuracy(&key).1.unwrap_or(1.0).clamp(0.0, 1.0);
        rows.push((*it, ValueRow::new(counts.searches as f64 / train_days, p_b, p_a)?));
    }
    Ok(Estimates {
        ttl_table,
        values: ValueTable { rows },
        cluster_p_b,
        global_p_b,
        per_itinerary,
        training,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DayDelta {
    pub day: usize,
    /// Arm B minus arm A.
    pub bookings: i64,
    pub hit_rate: f64,
}

#[derive(Debug, Clone)]
pub struct AbReport {
    pub arms: [Metrics; 2],
    pub deltas: Vec<DayDelta>,
}

/// Halve a supplier budget for one arm of a 50/50 split.
pub fn split_budget(config: &SupplierConfig) -> Result<SupplierConfig> {
    let half = SupplierConfig {
        qps_limit: config.qps_limit / 2,
        per_dc_allocation: config.per_dc_allocation.iter().map(|a| a / 2).collect(),
    };
    if half.qps_limit == 0 || half.allocated() == 0 {
        return Err(Error::InvalidConfig(format!(
            "qps_limit {} is too small to split between two arms",
            config.qps_limit
        )));
    }
    Ok(half)
}

/// Replay `window` under two arms, each seeing half of the users and half
/// of the supplier budget.
pub fn ab_compare(
    sim: &Simulation,
    window: Window,
    supplier: &SupplierConfig,
    arms: [(&str, &PolicySpec); 2],
    models: &Models,
    split_seed: u64,
) -> Result<AbReport> {
    if window.end - window.start < DAY {
        return Err(Error::InvalidConfig("an A/B comparison needs at least one day".into()));
    }
    let half = split_budget(supplier)?;
    let mut out = Vec::with_capacity(2);
    for (arm, (label, policy)) in arms.iter().enumerate() {
        let run = sim.run(&RunSpec {
            label: label.to_string(),
            window,
            supplier: half.clone(),
            policy: (*policy).clone(),
            models,
            split: Some(UserSplit { seed: split_seed, arm: arm as u8 }),
            record: RecordOptions::default(),
        })?;
        out.push(run.metrics);
    }
    let b = out.pop().expect("two arms");
    let a = out.pop().expect("two arms");
    let deltas = a
        .days
        .iter()
        .zip(&b.days)
        .enumerate()
        .map(|(day, (x, y))| DayDelta {
            day,
            bookings: y.bookings as i64 - x.bookings as i64,
            hit_rate: y.hit_rate() - x.hit_rate(),
        })
        .collect();
    Ok(AbReport { arms: [a, b], deltas })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{DcId, HotelId, Probability, SearchCriteria, UserId};
    use crate::scheduler::ValueRow;
    use crate::trace::DurationDist;
    use chrono::NaiveDate;

    fn itin(h: u32) -> Itinerary {
        let d = NaiveDate::from_ymd_opt(2019, 12, 1).unwrap();
        Itinerary::new(HotelId(h), SearchCriteria::new(d, d.succ_opt().unwrap(), 1, 0, 1).unwrap())
    }

    fn search(t: Seconds, h: u32, user: u64) -> UserSearch {
        UserSearch { user: UserId(user), itinerary: itin(h), timestamp: t, dc: DcId(0) }
    }

    fn scenario(searches: Vec<UserSearch>, price: PriceProcessConfig, p_b: f64) -> Scenario {
        Scenario {
            clock: SimClock::default(),
            horizon: 2 * DAY,
            searches,
            booking: BookingProbabilities::uniform(Probability::new(p_b).unwrap()),
            price,
            seed: 3,
        }
    }

    fn run_one(sc: Scenario, qps: u32, policy: PolicySpec, models: &Models) -> RunOutput {
        let horizon = sc.horizon;
        let sim = Simulation::new(sc).unwrap();
        sim.run(&RunSpec {
            label: "t".into(),
            window: Window::new(0, horizon).unwrap(),
            supplier: SupplierConfig::single_dc(qps),
            policy,
            models,
            split: None,
            record: RecordOptions { fetch_log: true, outcomes: true },
        })
        .unwrap()
    }

    fn static_prices() -> PriceProcessConfig {
        PriceProcessConfig::single(DurationDist::Infinite)
    }

    #[test]
    fn empty_trace() {
        let out = run_one(scenario(vec![], static_prices(), 0.5), 1, PolicySpec::PassiveFixedTtl { ttl: 900 }, &Models::default());
        assert_eq!(out.metrics.total, DayMetrics::default());
        assert_eq!(out.metrics.days.len(), 2);
        assert_eq!(out.metrics.qps.len(), 2 * DAY as usize);
    }

    #[test]
    fn miss_fetch_then_hit() {
        let sc = scenario(vec![search(10, 1, 1), search(500, 1, 2), search(950, 1, 3)], static_prices(), 0.5);
        let out = run_one(sc, 1, PolicySpec::PassiveFixedTtl { ttl: 900 }, &Models::default());
        let hits: Vec<bool> = out.outcomes.iter().map(|o| o.hit).collect();
        assert_eq!(hits, vec![false, true, false]);
        assert_eq!(out.metrics.total.fetches, 2);
        assert_eq!(out.metrics.total.hits + out.metrics.total.misses, 3);
    }

    #[test]
    fn misses_are_not_served() {
        let sc = scenario(vec![search(10, 1, 1), search(10, 2, 1), search(20, 1, 1), search(20, 2, 1)], static_prices(), 1.0);
        let out = run_one(sc, 1, PolicySpec::PassiveFixedTtl { ttl: 900 }, &Models::default());
        assert_eq!(out.metrics.total.rejected, 1);
        assert!(out.outcomes[..2].iter().all(|o| o.served.is_none()));
        // Only the itinerary whose fetch was accepted hits later.
        assert!(out.outcomes[2].hit && !out.outcomes[3].hit);
        assert_eq!(out.metrics.total.attempts, 1);
        assert_eq!(out.metrics.total.fetches, 2);
    }

    #[test]
    fn scheduler_on_static_prices_is_always_accurate() {
        let searches: Vec<_> = (0..2000).map(|i| search(i * 80, (i % 5) as u32, i as u64)).collect();
        let values = ValueTable {
            rows: (0..5).map(|h| (itin(h), ValueRow::new(10.0, 0.5, 1.0).unwrap())).collect(),
        };
        let models = Models { ttl_table: Some(TtlTable::uniform(4 * 3600).unwrap()), values: Some(values) };
        let out = run_one(scenario(searches, static_prices(), 0.5), 1, PolicySpec::smart_scheduler(), &models);
        let m = out.metrics.total;
        assert!(m.attempts > 0);
        assert_eq!(m.bookings, m.attempts);
        assert_eq!(m.accuracy(), 1.0);
        // Every itinerary is planned; misses only happen before its first
        // refresh on the cold first day.
        let scenario_searches: Vec<_> = (0..2000).map(|i| i * 80).collect::<Vec<Seconds>>();
        for o in out.outcomes.iter().filter(|o| !o.hit) {
            assert!(scenario_searches[o.index] < 4 * 3600);
        }
    }

    #[test]
    fn scheduler_without_reserve_never_fetches_on_miss() {
        let searches = vec![search(10, 9, 1)];
        let values = ValueTable { rows: vec![(itin(1), ValueRow::new(1.0, 0.5, 1.0).unwrap())] };
        let models = Models { ttl_table: Some(TtlTable::uniform(DAY).unwrap()), values: Some(values) };
        let out = run_one(scenario(searches, static_prices(), 0.5), 2, PolicySpec::smart_scheduler(), &models);
        assert_eq!(out.metrics.total.misses, 1);
        // One planned fetch per day for itinerary 1 and nothing else.
        assert_eq!(out.metrics.total.fetches, 2);
    }

    #[test]
    fn lru_spends_idle_budget() {
        let price = PriceProcessConfig::single(DurationDist::Constant { seconds: 3600 });
        let searches: Vec<_> = (0..100).map(|i| search(i * 600, (i % 3) as u32, 1)).collect();
        let models = Models { ttl_table: Some(TtlTable::uniform(900).unwrap()), values: None };
        let passive = run_one(scenario(searches.clone(), price.clone(), 0.5), 1, PolicySpec::PassiveSmartTtl, &models);
        let lru = run_one(scenario(searches, price, 0.5), 1, PolicySpec::AggressiveLru { capacity: 10 }, &models);
        assert!(lru.metrics.total.fetches > passive.metrics.total.fetches);
        assert!(lru.metrics.total.hits > passive.metrics.total.hits);
        assert_eq!(lru.utilization.audit(&SupplierConfig::single_dc(1)), vec![]);
    }

    #[test]
    fn stale_hits_fail_to_book() {
        // Prices change every 100 s but quotes live 900 s.
        let price = PriceProcessConfig::single(DurationDist::Constant { seconds: 100 });
        let searches: Vec<_> = (0..50).map(|i| search(i * 50, 1, 1)).collect();
        let out = run_one(scenario(searches, price, 1.0), 5, PolicySpec::PassiveFixedTtl { ttl: 900 }, &Models::default());
        let m = out.metrics.total;
        assert_eq!(m.attempts, m.hits);
        assert!(m.bookings < m.attempts);
        for o in &out.outcomes {
            assert_eq!(o.hit, o.served.is_some());
        }
    }

    #[test]
    fn unknown_dc_is_a_config_error() {
        let mut s = search(0, 1, 1);
        s.dc = DcId(3);
        let sim = Simulation::new(scenario(vec![s], static_prices(), 0.5)).unwrap();
        let err = sim
            .run(&RunSpec {
                label: "x".into(),
                window: Window::new(0, DAY).unwrap(),
                supplier: SupplierConfig::single_dc(1),
                policy: PolicySpec::PassiveFixedTtl { ttl: 900 },
                models: &Models::default(),
                split: None,
                record: RecordOptions::default(),
            })
            .unwrap_err();
        assert!(matches!(err, Error::InvalidConfig(_)));
    }

    #[test]
    fn smart_policies_need_models() {
        let sim = Simulation::new(scenario(vec![], static_prices(), 0.5)).unwrap();
        for policy in [PolicySpec::PassiveSmartTtl, PolicySpec::smart_scheduler()] {
            let r = sim.run(&RunSpec {
                label: "x".into(),
                window: Window::new(0, DAY).unwrap(),
                supplier: SupplierConfig::single_dc(1),
                policy,
                models: &Models::default(),
                split: None,
                record: RecordOptions::default(),
            });
            assert!(r.is_err());
        }
    }

    #[test]
    fn smoothing() {
        assert_eq!(smoothed_p_b(2, 8, 0.9, 0.0), 0.25);
        assert!((smoothed_p_b(2, 8, 0.1, 10.0) - 3.0 / 18.0).abs() < 1e-12);
        assert_eq!(smoothed_p_b(0, 0, 0.3, 10.0), 0.3);
    }

    #[test]
    fn user_split_is_balanced_and_stable() {
        let ones = (0..10_000u64).filter(|&u| UserSplit::arm_of(5, u) == 1).count();
        assert!((4800..5200).contains(&ones));
        assert_eq!(UserSplit::arm_of(5, 42), UserSplit::arm_of(5, 42));
    }

    #[test]
    fn ab_needs_a_day_and_a_splittable_budget() {
        let sim = Simulation::new(scenario(vec![], static_prices(), 0.5)).unwrap();
        let p = PolicySpec::PassiveFixedTtl { ttl: 900 };
        let short = Window::new(0, DAY - 1).unwrap();
        assert!(ab_compare(&sim, short, &SupplierConfig::single_dc(2), [("a", &p), ("b", &p)], &Models::default(), 1).is_err());
        let day = Window::new(0, DAY).unwrap();
        assert!(ab_compare(&sim, day, &SupplierConfig::single_dc(1), [("a", &p), ("b", &p)], &Models::default(), 1).is_err());
    }

    #[test]
    fn metrics_csv_format() {
        let m = Metrics {
            arm: "a".into(),
            days: vec![DayMetrics { searches: 4, hits: 1, misses: 3, fetches: 3, rejected: 0, attempts: 2, bookings: 1 }],
            total: DayMetrics { searches: 4, hits: 1, misses: 3, fetches: 3, rejected: 0, attempts: 2, bookings: 1 },
            qps: vec![],
        };
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, &[&m]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "day,arm,searches,hits,hit_rate,fetches,rejected,attempts,bookings,accuracy\n\
             0,a,4,1,0.250000,3,0,2,1,0.500000\n\
             total,a,4,1,0.250000,3,0,2,1,0.500000\n"
        );
    }
}
