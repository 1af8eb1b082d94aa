//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fetchsim_core::domain::{expected_bookings, HotelId, Itinerary, SearchCriteria, UserId, UserSearch, DcId, DAY};
use fetchsim_core::experiment::{ExperimentConfig, Prepared};
use fetchsim_core::scheduler::{
    build_schedule, itinerary_frequency, select_top_requests, Admission, ItineraryPlanEntry,
};
use fetchsim_core::simulator::{
    write_metrics_csv, Metrics, Models, PolicySpec, RecordOptions, RunSpec, Scenario, Simulation,
    Window,
};
use fetchsim_core::smartttl::{accuracy_ratio, accuracy_estimate, miss_ratio_curve, search_gaps, TtlTable};
use fetchsim_core::supplier::SupplierConfig;
use fetchsim_core::trace::{
    generate_catalog, generate_workload, ArrivalModel, Bucket, DurationDist, PriceProcessConfig,
    WorkloadConfig,
};
use fetchsim_core::LruSearchCache;

type Artifacts = Vec<(String, Vec<u8>)>;

struct Outcome {
    pass: bool,
    detail: String,
    artifacts: Artifacts,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into(), artifacts: Vec::new() }
    }
}

fn fail(detail: impl std::fmt::Display) -> Outcome {
    Outcome::new(false, detail.to_string())
}

fn metrics_csv(metrics: &[&Metrics]) -> Vec<u8> {
    let mut out = Vec::new();
    write_metrics_csv(&mut out, metrics).expect("in-memory write");
    out
}

fn minutes(m: i64) -> i64 {
    m * 60
}

fn worked_examples() -> Outcome {
    let durations = [minutes(120), minutes(100)];
    let (num, den) = match accuracy_ratio(&durations, minutes(150)) {
        Ok(r) => r,
        Err(e) => return fail(e),
    };
    let exact = num * 15 == den * 11;
    let approx = accuracy_estimate(&durations, minutes(150)).map(|a| (a - 11.0 / 15.0).abs() <= 1e-12);
    let eb = expected_bookings([(0.8, 0.25, 0.5)]);
    let pass = exact && matches!(approx, Ok(true)) && matches!(eb, Ok(v) if v == 0.1);
    Outcome::new(pass, format!("accuracy {num}/{den}, expected bookings {eb:?}"))
}

fn frequency_table() -> Outcome {
    let start = Instant::now();
    let table = [(21600, 4), (86400, 1), (25200, 4)];
    let mut bad: Vec<String> = table
        .iter()
        .filter_map(|&(ttl, f)| match itinerary_frequency(ttl) {
            Ok(got) if got == f => None,
            other => Some(format!("f({ttl}) = {other:?}, want {f}")),
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..10_000 {
        let ttl = rng.random_range(1..=2 * DAY);
        match itinerary_frequency(ttl) {
            Ok(f) if f as i64 * ttl >= DAY => {}
            other => bad.push(format!("f({ttl}) = {other:?} does not cover a day")),
        }
    }
    let elapsed = start.elapsed();
    bad.truncate(3);
    Outcome::new(
        bad.is_empty() && elapsed < Duration::from_secs(1),
        format!("{elapsed:.2?}; {}", if bad.is_empty() { "table and coverage hold".into() } else { bad.join("; ") }),
    )
}

fn synthetic_itinerary(i: u32) -> Itinerary {
    let checkin = chrono::NaiveDate::from_ymd_opt(2019, 12, 1).expect("valid date");
    let checkout = checkin + chrono::Days::new(1);
    Itinerary::new(HotelId(i), SearchCriteria::new(checkin, checkout, 2, 0, 1).expect("valid criteria"))
}

fn g4_layout() -> Outcome {
    let start = Instant::now();
    let entries: Vec<_> = (0..43_200)
        .map(|i| ItineraryPlanEntry::new(synthetic_itinerary(i), 21_600, 1.0).expect("valid entry"))
        .collect();
    let selected = select_top_requests(&entries, 2 * DAY as u64, Admission::Atomic);
    let plan = match build_schedule(&selected, 2) {
        Ok(p) => p,
        Err(e) => return fail(e),
    };
    let audit = plan.audit();
    let every_second = (0..DAY).all(|t| plan.load(t) == 2);
    let times = plan.send_times();
    let all_items = plan.items().len() == 43_200;
    let four_times = times.iter().all(|t| t.len() == 4);
    let gaps = times.iter().all(|t| t.windows(2).all(|w| w[1] - w[0] == 21_600));
    let elapsed = start.elapsed();
    let pass = audit.is_ok() && every_second && all_items && four_times && gaps && elapsed < Duration::from_secs(10);
    Outcome::new(
        pass,
        format!(
            "{elapsed:.2?}; max load {}, 2 per second {every_second}, {} items, 4 sends {four_times}, 21600 s gaps {gaps}",
            audit.max_load,
            plan.items().len()
        ),
    )
}

const CAP_CONFIG: &str = r#"
    training_days = 1
    horizon_days = 1
    [workload]
    n_hotels = 60
    itineraries_per_hotel = 5
    n_users = 5000
    arrival = { kind = "diurnal", base_rate = 2.0 }
    dc_traffic_profiles = [
      { hourly = [0.2, 0.2, 0.2, 0.2, 0.3, 0.4, 0.6, 0.8, 1.0, 1.0, 1.0, 1.0,
                  1.0, 1.0, 1.0, 1.0, 0.9, 0.8, 0.6, 0.5, 0.4, 0.3, 0.2, 0.2] },
      { hourly = [1.0, 1.0, 1.0, 0.9, 0.8, 0.6, 0.4, 0.3, 0.2, 0.2, 0.2, 0.2,
                  0.2, 0.2, 0.3, 0.4, 0.6, 0.8, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0] },
    ]
    [price]
    bands = [{ max_lead_days = 365, available = { kind = "exponential", mean = 3600.0 }, sold_out = { kind = "exponential", mean = 7200.0 } }]
    [supplier]
    qps_limit = 3
    per_dc_allocation = [2, 1]
    [[arms]]
    label = "fixed15"
    policy = { kind = "passive_fixed_ttl", ttl = 900 }
    [[arms]]
    label = "smartttl"
    policy = { kind = "passive_smart_ttl" }
    [[arms]]
    label = "lru"
    policy = { kind = "aggressive_lru", capacity = 200 }
    [[arms]]
    label = "scheduler"
    policy = { kind = "aggressive_smart_scheduler" }
"#;

fn qps_cap() -> Outcome {
    let config = match ExperimentConfig::from_toml(CAP_CONFIG, "qps-cap", None) {
        Ok(c) => c,
        Err(e) => return fail(e),
    };
    let mut runs = 0;
    let mut rejected = 0;
    let mut violations = Vec::new();
    let mut artifacts = Artifacts::new();
    for seed in 1..=5u64 {
        let prepared = match Prepared::new(&config, seed) {
            Ok(p) => p,
            Err(e) => return fail(format!("seed {seed}: {e}")),
        };
        let models = prepared.models();
        let mut metrics = Vec::new();
        for arm in &config.arms {
            let out = match prepared.sim.run(&RunSpec {
                label: arm.label.clone(),
                window: config.test_window(),
                supplier: config.supplier.clone(),
                policy: arm.policy.clone(),
                models: &models,
                split: None,
                record: RecordOptions::default(),
            }) {
                Ok(o) => o,
                Err(e) => return fail(format!("seed {seed} arm {}: {e}", arm.label)),
            };
            runs += 1;
            rejected += out.metrics.total.rejected;
            let report = &out.utilization;
            for t in 0..report.seconds() as i64 {
                let mut total = 0;
                for (d, &limit) in config.supplier.per_dc_allocation.iter().enumerate() {
                    let accepted = report.get(DcId(d as u16), t).accepted;
                    total += accepted;
                    if accepted > limit {
                        violations.push(format!("seed {seed} {} dc {d} second {t}: {accepted}", arm.label));
                    }
                }
                if total > config.supplier.qps_limit {
                    violations.push(format!("seed {seed} {} second {t}: {total} total", arm.label));
                }
            }
            if out.metrics.qps.iter().any(|&q| q > config.supplier.qps_limit) {
                violations.push(format!("seed {seed} {}: metrics qps above cap", arm.label));
            }
            metrics.push(out.metrics);
        }
        artifacts.push((format!("qps-cap seed {seed}"), metrics_csv(&metrics.iter().collect::<Vec<_>>())));
    }
    let mut out = Outcome::new(
        violations.is_empty() && runs >= 20 && rejected > 0,
        format!(
            "{runs} runs over 2 data centres, {rejected} rejected requests, {} violating seconds{}",
            violations.len(),
            violations.first().map(|v| format!(" (first: {v})")).unwrap_or_default()
        ),
    );
    out.artifacts = artifacts;
    out
}

fn renewal_scenario(gaps: DurationDist, days: i64, n_hotels: u32, seed: u64) -> fetchsim_core::Result<Scenario> {
    let workload = WorkloadConfig {
        n_hotels,
        itineraries_per_hotel: 4,
        horizon: days * DAY,
        arrival: ArrivalModel::Renewal,
        gap_time_distribution: gaps,
        seed,
        ..WorkloadConfig::default()
    };
    let w = generate_workload(&workload)?;
    Ok(Scenario {
        clock: workload.clock(),
        horizon: workload.horizon,
        searches: w.searches,
        booking: w.booking,
        price: PriceProcessConfig::default(),
        seed,
    })
}

fn hit_curve() -> Outcome {
    let start = Instant::now();
    let gaps = DurationDist::Histogram {
        buckets: vec![Bucket::new(1, 600, 0.8), Bucket::new(7201, 14_400, 0.2)],
    };
    let scenario = match renewal_scenario(gaps, 6, 170, 5) {
        Ok(s) => s,
        Err(e) => return fail(e),
    };
    let gap_samples: Vec<i64> = search_gaps(&scenario.searches).into_iter().map(|(_, g)| g).collect();
    let curve = match miss_ratio_curve(&gap_samples) {
        Ok(c) => c,
        Err(e) => return fail(e),
    };
    let predicted = curve(7200);
    let horizon = scenario.horizon;
    let sim = match Simulation::new(scenario) {
        Ok(s) => s,
        Err(e) => return fail(e),
    };
    let models = Models::default();
    let out = match sim.run(&RunSpec {
        label: "ttl7200".into(),
        window: Window::new(0, horizon).expect("whole horizon"),
        supplier: SupplierConfig::single_dc(1000),
        policy: PolicySpec::PassiveFixedTtl { ttl: 7200 },
        models: &models,
        split: None,
        record: RecordOptions { fetch_log: false, outcomes: true },
    }) {
        Ok(o) => o,
        Err(e) => return fail(e),
    };
    let searches = &sim.scenario().searches;
    let mut seen = HashSet::new();
    let (mut repeats, mut repeat_hits) = (0u64, 0u64);
    for o in &out.outcomes {
        if !seen.insert(searches[o.index].itinerary) {
            repeats += 1;
            repeat_hits += o.hit as u64;
        }
    }
    let measured = repeat_hits as f64 / repeats as f64;
    let elapsed = start.elapsed();
    let pass = gap_samples.len() >= 100_000
        && (predicted - 0.80).abs() <= 0.01
        && (measured - predicted).abs() <= 0.02
        && out.metrics.total.rejected == 0
        && elapsed < Duration::from_secs(60);
    let mut outcome = Outcome::new(
        pass,
        format!(
            "{elapsed:.2?}; n={} gaps, curve(7200)={predicted:.4}, repeat-search hit={measured:.4}",
            gap_samples.len()
        ),
    );
    outcome.artifacts.push(("hit-curve".into(), metrics_csv(&[&out.metrics])));
    outcome
}

fn hit_ceiling() -> Outcome {
    let workload = WorkloadConfig { n_hotels: 500, itineraries_per_hotel: 4, horizon: 2 * DAY, seed: 6, ..WorkloadConfig::default() };
    let catalog = match generate_catalog(&workload) {
        Ok(c) => c,
        Err(e) => return fail(e),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut searches: Vec<UserSearch> = catalog
        .itineraries
        .iter()
        .flat_map(|it| {
            (0..5)
                .map(|_| UserSearch {
                    user: UserId(rng.random_range(0..1000)),
                    itinerary: *it,
                    timestamp: rng.random_range(0..DAY),
                    dc: DcId(0),
                })
                .collect::<Vec<_>>()
        })
        .collect();
    searches.sort_by_key(|s| s.timestamp);
    let firsts = searches.iter().map(|s| s.itinerary).collect::<HashSet<_>>().len() as u64;
    let n = searches.len() as u64;
    let scenario = Scenario {
        clock: workload.clock(),
        horizon: workload.horizon,
        searches,
        booking: fetchsim_core::BookingProbabilities::uniform(fetchsim_core::Probability::new(0.1).expect("valid")),
        price: PriceProcessConfig::default(),
        seed: 6,
    };
    let sim = match Simulation::new(scenario) {
        Ok(s) => s,
        Err(e) => return fail(e),
    };
    let supplier = SupplierConfig::single_dc(100);
    let mut worst = 0.0f64;
    let mut bad = Vec::new();
    let mut metrics = Vec::new();
    for ttl in [900, 3600, 7200, 21_600, 43_200, DAY] {
        let fixed = (PolicySpec::PassiveFixedTtl { ttl }, Models::default());
        let table = match TtlTable::uniform(ttl) {
            Ok(t) => t,
            Err(e) => return fail(e),
        };
        let smart = (PolicySpec::PassiveSmartTtl, Models { ttl_table: Some(table), values: None });
        for (policy, models) in [fixed, smart] {
            let out = match sim.run(&RunSpec {
                label: format!("{}-{ttl}", policy.name()),
                window: Window::new(0, 2 * DAY).expect("valid window"),
                supplier: supplier.clone(),
                policy,
                models: &models,
                split: None,
                record: RecordOptions::default(),
            }) {
                Ok(o) => o,
                Err(e) => return fail(e),
            };
            let t = out.metrics.total;
            worst = worst.max(t.hit_rate());
            if t.hits > n - firsts || t.hit_rate() > 0.8 {
                bad.push(format!("{}: {} hits", out.metrics.arm, t.hits));
            }
            metrics.push(out.metrics);
        }
    }
    let mut outcome = Outcome::new(
        firsts * 5 == n && bad.is_empty(),
        format!(
            "{n} searches, {firsts} first occurrences, best hit rate {worst:.4} over 12 runs{}",
            bad.first().map(|b| format!("; over ceiling: {b}")).unwrap_or_default()
        ),
    );
    outcome.artifacts.push(("hit-ceiling".into(), metrics_csv(&metrics.iter().collect::<Vec<_>>())));
    outcome
}

fn desk_config_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml")
}

fn policy_ordering() -> Outcome {
    let start = Instant::now();
    let config = match ExperimentConfig::load(&desk_config_path()) {
        Ok(c) => c,
        Err(e) => return fail(e),
    };
    let find = |metrics: &[Metrics], pred: &dyn Fn(&PolicySpec) -> bool| -> Option<u64> {
        let arm = config.arms.iter().position(|a| pred(&a.policy))?;
        Some(metrics[arm].total.bookings)
    };
    let mut lines = Vec::new();
    let mut pass = config.seeds.len() >= 5;
    let mut artifacts = Artifacts::new();
    for &seed in &config.seeds {
        let metrics = match Prepared::new(&config, seed).and_then(|p| p.run_arms()) {
            Ok(m) => m,
            Err(e) => return fail(format!("seed {seed}: {e}")),
        };
        let fixed = find(&metrics, &|p| matches!(p, PolicySpec::PassiveFixedTtl { ttl: 900 }));
        let smart = find(&metrics, &|p| matches!(p, PolicySpec::PassiveSmartTtl));
        let lru = find(&metrics, &|p| matches!(p, PolicySpec::AggressiveLru { .. }));
        let sched = find(&metrics, &|p| matches!(p, PolicySpec::AggressiveSmartScheduler { .. }));
        let (Some(fixed), Some(smart), Some(lru), Some(sched)) = (fixed, smart, lru, sched) else {
            return fail("desk config lacks one of the four policies");
        };
        let lift = sched as f64 / fixed as f64 - 1.0;
        let ok = sched >= lru && lru >= smart && smart >= fixed && lift >= 0.10;
        pass &= ok;
        lines.push(format!("seed {seed}: {sched} >= {lru} >= {smart} >= {fixed} (+{:.1}%){}", lift * 100.0, if ok { "" } else { " VIOLATED" }));
        artifacts.push((format!("desk seed {seed}"), metrics_csv(&metrics.iter().collect::<Vec<_>>())));
    }
    let elapsed = start.elapsed();
    pass &= elapsed < Duration::from_secs(600);
    let mut outcome = Outcome::new(pass, format!("{elapsed:.1?}; {}", lines.join("; ")));
    outcome.artifacts = artifacts;
    outcome
}

/// Best total value of a subset with total frequency within `budget`,
/// enumerating every subset in Gray-code order.
fn knapsack_brute_force(entries: &[ItineraryPlanEntry], budget: u64) -> f64 {
    let n = entries.len();
    let (mut weight, mut value, mut best) = (0u64, 0.0f64, 0.0f64);
    let mut in_set = vec![false; n];
    for k in 1u64..(1 << n) {
        let bit = k.trailing_zeros() as usize;
        let e = &entries[bit];
        if in_set[bit] {
            weight -= e.frequency as u64;
            value -= e.value;
        } else {
            weight += e.frequency as u64;
            value += e.value;
        }
        in_set[bit] = !in_set[bit];
        if weight <= budget && value > best {
            best = value;
        }
    }
    best
}

fn random_instance(rng: &mut ChaCha8Rng, equal_ttl: Option<i64>) -> (Vec<ItineraryPlanEntry>, u64) {
    let entries: Vec<_> = (0..20)
        .map(|i| {
            let ttl = equal_ttl.unwrap_or_else(|| 900 * rng.random_range(1..=96));
            ItineraryPlanEntry::new(synthetic_itinerary(i), ttl, rng.random_range(0.0..10.0)).expect("valid entry")
        })
        .collect();
    let total: u64 = entries.iter().map(|e| e.frequency as u64).sum();
    let budget = (total as f64 * rng.random_range(0.2..0.7)) as u64;
    (entries, budget)
}

#[derive(Default)]
struct ReferenceLru {
    capacity: usize,
    tick: u64,
    /// `(key, last use, expiry)`.
    entries: Vec<(u32, u64, i64)>,
}

impl ReferenceLru {
    fn admit(&mut self, key: u32) -> Option<u32> {
        self.tick += 1;
        if let Some(e) = self.entries.iter_mut().find(|e| e.0 == key) {
            e.1 = self.tick;
            return None;
        }
        self.entries.push((key, self.tick, i64::MIN));
        if self.entries.len() > self.capacity {
            let oldest = (0..self.entries.len()).min_by_key(|&i| self.entries[i].1).expect("nonempty");
            return Some(self.entries.remove(oldest).0);
        }
        None
    }

    fn record_fetch(&mut self, key: u32, at: i64, ttl: i64) {
        if let Some(e) = self.entries.iter_mut().find(|e| e.0 == key) {
            e.2 = at + ttl;
        }
    }

    fn pull(&self, k: usize) -> Vec<u32> {
        let mut v = self.entries.clone();
        v.sort_by(|a, b| a.2.cmp(&b.2).then(b.1.cmp(&a.1)));
        v.into_iter().take(k).map(|e| e.0).collect()
    }

    fn by_recency(&self) -> Vec<u32> {
        let mut v = self.entries.clone();
        v.sort_by_key(|e| e.1);
        v.into_iter().map(|e| e.0).collect()
    }
}

fn oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst = f64::INFINITY;
    for _ in 0..50 {
        let (entries, budget) = random_instance(&mut rng, None);
        let greedy: f64 = select_top_requests(&entries, budget, Admission::Atomic).iter().map(|s| s.entry.value).sum();
        let best = knapsack_brute_force(&entries, budget);
        if best > 0.0 {
            worst = worst.min(greedy / best);
        }
    }
    let mut equal_mismatch = 0;
    for _ in 0..50 {
        let ttl = 900 * rng.random_range(1..=96);
        let (entries, budget) = random_instance(&mut rng, Some(ttl));
        let greedy: f64 = select_top_requests(&entries, budget, Admission::Atomic).iter().map(|s| s.entry.value).sum();
        let best = knapsack_brute_force(&entries, budget);
        if (greedy - best).abs() > 1e-9 * best.max(1.0) {
            equal_mismatch += 1;
        }
    }

    let mut lru = LruSearchCache::<u32>::new(16);
    let mut reference = ReferenceLru { capacity: 16, ..Default::default() };
    let mut lru_mismatch = None;
    for op in 0..100_000u32 {
        let key = rng.random_range(0..40);
        let ok = match rng.random_range(0..3) {
            0 => lru.admit(key) == reference.admit(key),
            1 => {
                let (at, ttl) = (rng.random_range(0..10_000), rng.random_range(1..5_000));
                lru.record_fetch(&key, at, ttl);
                reference.record_fetch(key, at, ttl);
                true
            }
            _ => {
                let k = rng.random_range(0..20);
                lru.pull_expiring(0, k) == reference.pull(k)
            }
        };
        if !ok || lru.keys_by_recency().copied().collect::<Vec<_>>() != reference.by_recency() {
            lru_mismatch = Some(op);
            break;
        }
    }
    Outcome::new(
        worst >= 0.9 && equal_mismatch == 0 && lru_mismatch.is_none(),
        format!(
            "worst greedy/optimum {worst:.4} over 50 instances, {equal_mismatch} equal-frequency mismatches, LRU model {}",
            lru_mismatch.map_or("agrees over 100000 ops".to_string(), |op| format!("diverges at op {op}"))
        ),
    )
}

fn determinism(first: &HashMap<usize, Artifacts>) -> Outcome {
    let reruns: [(usize, fn() -> Outcome); 4] = [(4, qps_cap), (5, hit_curve), (6, hit_ceiling), (7, policy_ordering)];
    let mut compared = 0;
    let mut differing = Vec::new();
    for (criterion, run) in reruns {
        let again = run().artifacts;
        let before = first.get(&criterion).cloned().unwrap_or_default();
        if before.len() != again.len() {
            differing.push(format!("criterion {criterion}: artifact count changed"));
            continue;
        }
        for ((name, a), (_, b)) in before.iter().zip(&again) {
            compared += 1;
            if a != b {
                differing.push(name.clone());
            }
        }
    }
    Outcome::new(
        compared > 0 && differing.is_empty(),
        format!("{compared} metric CSVs compared, {} differ{}", differing.len(),
            if differing.is_empty() { String::new() } else { format!(": {}", differing.join(", ")) }),
    )
}

type Criterion = (usize, &'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 8] = [
        (1, "worked examples", worked_examples),
        (2, "frequency table", frequency_table),
        (3, "quarter-day layout", g4_layout),
        (4, "QPS hard cap", qps_cap),
        (5, "miss-ratio curve", hit_curve),
        (6, "cache-hit ceiling", hit_ceiling),
        (7, "policy ordering", policy_ordering),
        (8, "oracle checks", oracles),
    ];
    let mut failed = 0;
    let mut artifacts = HashMap::new();
    let mut report = |n: usize, name: &str, o: &Outcome| {
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        println!("criterion {n} ({name}): {verdict}: {}", o.detail);
        if !o.pass {
            failed += 1;
        }
    };
    for (n, name, check) in criteria {
        let outcome = check();
        report(n, name, &outcome);
        artifacts.insert(n, outcome.artifacts);
    }
    report(9, "determinism", &determinism(&artifacts));
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
