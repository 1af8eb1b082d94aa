//! Aggressive fetch planning.
//!
//! Two policies live here. The LRU refresher spends whatever budget passive
//! misses leave unused in a second on the cached entries closest to expiry.
//! The value-driven planner picks, once a day, the itineraries whose
//! expected bookings per supplier request are highest and lays their
//! refreshes out over the day so that each stays live around the clock.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cache::LruSearchCache;
use crate::domain::{expected_bookings, Itinerary, Probability, Seconds, DAY};
use crate::error::{Error, Result};
use crate::io;

/// Daily sends needed to keep a quote with this TTL always live.
pub fn itinerary_frequency(ttl: Seconds) -> Result<u32> {
    if ttl <= 0 {
        return Err(Error::NonPositiveTtl(ttl));
    }
    Ok(((DAY + ttl - 1) / ttl) as u32)
}

/// Expected bookings per day of an itinerary that is always a cache hit,
/// given the `(p_b, p_a)` of each of its searches.
pub fn itinerary_value(searches: &[(f64, f64)]) -> Result<f64> {
    expected_bookings(searches.iter().map(|&(p_b, p_a)| (1.0, p_b, p_a)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ItineraryPlanEntry {
    pub itinerary: Itinerary,
    pub ttl: Seconds,
    pub frequency: u32,
    pub value: f64,
    pub value_per_request: f64,
}

impl ItineraryPlanEntry {
    pub fn new(itinerary: Itinerary, ttl: Seconds, value: f64) -> Result<Self> {
        let frequency = itinerary_frequency(ttl)?;
        if !(value.is_finite() && value >= 0.0) {
            return Err(Error::InvalidConfig(format!("itinerary value {value} must be finite and >= 0")));
        }
        Ok(Self {
            itinerary,
            ttl,
            frequency,
            value,
            value_per_request: value / frequency as f64,
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Admission {
    /// Whole itineraries only; one that does not fit is skipped.
    #[default]
    Atomic,
    /// The first itinerary that does not fit takes whatever budget is left.
    Partial,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub entry: ItineraryPlanEntry,
    /// Requests granted; below `entry.frequency` only for a partial admit.
    pub sends: u32,
}

impl Selection {
    pub fn is_partial(&self) -> bool {
        self.sends < self.entry.frequency
    }
}

/// Greedy by value per request, ties by higher value, then input order.
pub fn select_top_requests(entries: &[ItineraryPlanEntry], budget: u64, admission: Admission) -> Vec<Selection> {
    let mut order: Vec<usize> = (0..entries.len()).collect();
    order.sort_by(|&a, &b| {
        let (ea, eb) = (&entries[a], &entries[b]);
        eb.value_per_request
            .total_cmp(&ea.value_per_request)
            .then(eb.value.total_cmp(&ea.value))
            .then(a.cmp(&b))
    });
    let mut left = budget;
    let mut out = Vec::new();
    for i in order {
        let e = &entries[i];
        let f = e.frequency as u64;
        if f <= left {
            left -= f;
            out.push(Selection { entry: e.clone(), sends: e.frequency });
        } else if admission == Admission::Partial {
            if left > 0 {
                out.push(Selection { entry: e.clone(), sends: left as u32 });
            }
            break;
        }
        if left == 0 {
            break;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanItem {
    pub itinerary: Itinerary,
    pub ttl: Seconds,
    pub expected_sends: u32,
    /// Partially admitted: fewer sends than needed for full coverage.
    pub partial: bool,
}

/// One day of planned fetches, indexed by second since midnight.
#[derive(Debug, Clone, PartialEq)]
pub struct SchedulePlan {
    mu: u32,
    items: Vec<PlanItem>,
    seconds: Vec<Vec<u32>>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PlanAudit {
    pub max_load: u32,
    pub total_sends: u64,
    pub budget: u64,
    pub overloaded_seconds: Vec<Seconds>,
    /// `(item index, largest gap)` for items whose refreshes leave a hole.
    pub gap_violations: Vec<(usize, Seconds)>,
    /// `(item index, expected, actual)`.
    pub count_violations: Vec<(usize, u32, u32)>,
}

impl PlanAudit {
    pub fn is_ok(&self) -> bool {
        self.overloaded_seconds.is_empty()
            && self.gap_violations.is_empty()
            && self.count_violations.is_empty()
            && self.total_sends <= self.budget
    }

    pub fn summary(&self) -> String {
        format!(
            "max_load={} total_sends={} budget={} overloaded_seconds={} gap_violations={} count_violations={}",
            self.max_load,
            self.total_sends,
            self.budget,
            self.overloaded_seconds.len(),
            self.gap_violations.len(),
            self.count_violations.len()
        )
    }
}

impl SchedulePlan {
    pub fn empty(mu: u32) -> Self {
        Self { mu, items: Vec::new(), seconds: vec![Vec::new(); DAY as usize] }
    }

    pub fn mu(&self) -> u32 {
        self.mu
    }

    pub fn budget(&self) -> u64 {
        self.mu as u64 * DAY as u64
    }

    pub fn items(&self) -> &[PlanItem] {
        &self.items
    }

    /// Item indices to fetch at `second` (since midnight).
    pub fn at(&self, second: Seconds) -> &[u32] {
        &self.seconds[second as usize]
    }

    pub fn load(&self, second: Seconds) -> u32 {
        self.seconds[second as usize].len() as u32
    }

    pub fn total_sends(&self) -> u64 {
        self.seconds.iter().map(|s| s.len() as u64).sum()
    }

    /// Send seconds of every item, ascending.
    pub fn send_times(&self) -> Vec<Vec<Seconds>> {
        let mut out = vec![Vec::new(); self.items.len()];
        for (t, slot) in self.seconds.iter().enumerate() {
            for &i in slot {
                out[i as usize].push(t as Seconds);
            }
        }
        out
    }

    pub fn audit(&self) -> PlanAudit {
        let mut audit = PlanAudit { budget: self.budget(), ..Default::default() };
        for (t, slot) in self.seconds.iter().enumerate() {
            let load = slot.len() as u32;
            audit.max_load = audit.max_load.max(load);
            audit.total_sends += load as u64;
            if load > self.mu {
                audit.overloaded_seconds.push(t as Seconds);
            }
        }
        for (i, times) in self.send_times().into_iter().enumerate() {
            let item = &self.items[i];
            let n = times.len() as u32;
            if n != item.expected_sends {
                audit.count_violations.push((i, item.expected_sends, n));
            }
            if item.partial {
                continue;
            }
            let worst = match (times.first(), times.last()) {
                (Some(&first), Some(&last)) => times
                    .windows(2)
                    .map(|w| w[1] - w[0])
                    .chain(std::iter::once(first + DAY - last))
                    .max()
                    .unwrap(),
                _ => DAY,
            };
            if worst > item.ttl {
                audit.gap_violations.push((i, worst));
            }
        }
        audit
    }

    pub const CSV_HEADER: [&'static str; 7] =
        ["second", "hotel_id", "checkin", "checkout", "adults", "children", "rooms"];

    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "{}", Self::CSV_HEADER.join(","))?;
        for (t, slot) in self.seconds.iter().enumerate() {
            for &i in slot {
                writeln!(w, "{t},{}", io::format_itinerary(&self.items[i as usize].itinerary))?;
            }
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut w = io::create_writer(path)?;
        self.write_csv(&mut w)?;
        w.flush()?;
        Ok(())
    }

    /// Read an exported plan. Each itinerary's TTL comes from `ttl_of`, and it
    /// is expected to be sent `itinerary_frequency(ttl)` times.
    pub fn read_csv<R: std::io::Read>(
        input: R,
        source: &str,
        mu: u32,
        mut ttl_of: impl FnMut(&Itinerary) -> Result<Seconds>,
    ) -> Result<Self> {
        let mut plan = Self::empty(mu);
        let mut index: HashMap<Itinerary, u32> = HashMap::new();
        let mut pending = Vec::new();
        io::for_each_row(input, source, &Self::CSV_HEADER, |rec, line| {
            let second: Seconds = io::field(rec, 0, "second", source, line)?;
            if !(0..DAY).contains(&second) {
                return Err(Error::parse(source, line, format!("second {second} outside [0, {DAY})")));
            }
            let itinerary = io::itinerary_fields(rec, 1, source, line)?;
            let next = index.len() as u32;
            let i = *index.entry(itinerary).or_insert_with(|| {
                pending.push(itinerary);
                next
            });
            plan.seconds[second as usize].push(i);
            Ok(())
        })?;
        for itinerary in pending {
            let ttl = ttl_of(&itinerary)?;
            plan.items.push(PlanItem {
                itinerary,
                ttl,
                expected_sends: itinerary_frequency(ttl)?,
                partial: false,
            });
        }
        Ok(plan)
    }

    pub fn load_csv(path: &Path, mu: u32, ttl_of: impl FnMut(&Itinerary) -> Result<Seconds>) -> Result<Self> {
        Self::read_csv(io::open_reader(path)?, &path.display().to_string(), mu, ttl_of)
    }
}

/// The `n` send seconds of an item whose first send is at `offset`.
fn send_seconds(offset: Seconds, n: u32) -> impl Iterator<Item = Seconds> {
    (0..n as Seconds).map(move |j| offset + j * DAY / n as Seconds)
}

fn gcd(a: Seconds, b: Seconds) -> Seconds {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Layout {
    /// Each group's items are spread evenly over its period.
    Spread,
    /// Items share residue classes with earlier ones where possible, and
    /// TTLs with slack may use unevenly spaced sends.
    Packed,
}

struct Placement {
    /// `(index into selected, send seconds)` in placement order.
    placed: Vec<(usize, Vec<Seconds>)>,
    skipped: Vec<usize>,
    /// First failure: `(index into selected, second, load there)`.
    failure: Option<(usize, Seconds, u32)>,
}

struct Placer {
    mu: u32,
    load: Vec<u32>,
}

impl Placer {
    fn fits(&self, offset: Seconds, n: u32, cap: u32) -> bool {
        send_seconds(offset, n).all(|t| self.load[t as usize] < cap)
    }

    fn take(&mut self, times: &[Seconds]) {
        for &t in times {
            self.load[t as usize] += 1;
        }
    }

    /// Sends no more than `ttl` apart (wrap-around included) starting at
    /// `s0`, each as late as possible, padded to exactly `n`.
    fn chain(&self, s0: Seconds, n: u32, ttl: Seconds, cap: u32) -> Option<Vec<Seconds>> {
        let mut times = vec![s0];
        let mut s = s0;
        while s0 + DAY - s > ttl {
            let hi = (s + ttl).min(DAY - 1);
            let t = (s + 1..=hi).rev().find(|&t| self.load[t as usize] < cap)?;
            times.push(t);
            s = t;
            if times.len() > n as usize {
                return None;
            }
        }
        let mut t = s0;
        while times.len() < n as usize {
            t += 1;
            if t >= DAY {
                return None;
            }
            if self.load[t as usize] < cap && !times.contains(&t) {
                times.push(t);
            }
        }
        times.sort_unstable();
        Some(times)
    }

    /// The first `n` seconds with spare capacity.
    fn any_free(&self, n: u32, cap: u32) -> Option<Vec<Seconds>> {
        let times: Vec<Seconds> = (0..DAY)
            .filter(|&t| self.load[t as usize] < cap)
            .take(n as usize)
            .collect();
        (times.len() == n as usize).then_some(times)
    }

    fn packed(&self, order: &[Seconds], n: u32, ttl: Seconds, partial: bool) -> Option<Vec<Seconds>> {
        const CHAIN_STARTS: usize = 256;
        for cap in 1..=self.mu {
            if let Some(&o) = order.iter().find(|&&o| self.fits(o, n, cap)) {
                return Some(send_seconds(o, n).collect());
            }
            if partial {
                if let Some(times) = self.any_free(n, cap) {
                    return Some(times);
                }
                continue;
            }
            if (n as Seconds) * ttl > DAY {
                let found = order
                    .iter()
                    .filter(|&&o| self.load[o as usize] < cap)
                    .take(CHAIN_STARTS)
                    .find_map(|&o| self.chain(o, n, ttl, cap));
                if found.is_some() {
                    return found;
                }
            }
        }
        None
    }
}

/// Offsets in `[0, span)` ordered by residue mod `lane`, then value.
fn lane_major(span: Seconds, lane: Seconds) -> Vec<Seconds> {
    let lane = lane.clamp(1, span);
    (0..lane).flat_map(|r| (r..span).step_by(lane as usize)).collect()
}

fn place(selected: &[Selection], groups: &[((u32, Seconds), Vec<usize>)], mu: u32, layout: Layout) -> Placement {
    let mut placer = Placer { mu, load: vec![0; DAY as usize] };
    let mut out = Placement { placed: Vec::new(), skipped: Vec::new(), failure: None };
    // Residue class width shared with the densest group.
    let spacing = |n: u32| (DAY % n as Seconds == 0).then(|| DAY / n as Seconds);
    let base = groups.iter().filter_map(|((n, _), _)| spacing(*n)).min().unwrap_or(1);
    for ((n, ttl), members) in groups {
        let (n, ttl) = (*n, *ttl);
        // Offsets in [0, span) keep every send inside the day.
        let span = (DAY + n as Seconds - 1) / n as Seconds;
        let k = members.len() as Seconds;
        let order = match layout {
            Layout::Spread => Vec::new(),
            Layout::Packed => lane_major(span, spacing(n).map_or(1, |p| gcd(p, base))),
        };
        for (rank, &i) in members.iter().enumerate() {
            let times = match layout {
                Layout::Spread => {
                    let ideal = rank as Seconds * span / k;
                    let found = (0..span).map(|d| (ideal + d) % span).find(|&o| placer.fits(o, n, mu));
                    if found.is_none() && out.failure.is_none() {
                        let second = send_seconds(ideal, n)
                            .find(|&t| placer.load[t as usize] >= mu)
                            .unwrap_or(ideal);
                        out.failure = Some((i, second, placer.load[second as usize]));
                    }
                    found.map(|o| send_seconds(o, n).collect::<Vec<_>>())
                }
                Layout::Packed => placer.packed(&order, n, ttl, selected[i].is_partial()),
            };
            match times {
                Some(times) => {
                    placer.take(&times);
                    out.placed.push((i, times));
                }
                None => out.skipped.push(i),
            }
        }
    }
    out
}

fn schedule(selected: &[Selection], mu: u32, strict: bool) -> Result<(SchedulePlan, Vec<usize>)> {
    let planned: u64 = selected.iter().map(|s| s.sends as u64).sum();
    let mut plan = SchedulePlan::empty(mu);
    if strict && planned > plan.budget() {
        return Err(Error::BudgetExceeded { planned, budget: plan.budget() });
    }

    // Groups of equal (sends, ttl), most frequent first, each in input order.
    let mut groups: Vec<((u32, Seconds), Vec<usize>)> = Vec::new();
    let mut group_of: HashMap<(u32, Seconds), usize> = HashMap::new();
    for (i, s) in selected.iter().enumerate() {
        if s.sends == 0 {
            continue;
        }
        let key = (s.sends, s.entry.ttl);
        let g = *group_of.entry(key).or_insert_with(|| {
            groups.push((key, Vec::new()));
            groups.len() - 1
        });
        groups[g].1.push(i);
    }
    groups.sort_by(|a, b| b.0 .0.cmp(&a.0 .0).then(a.0 .1.cmp(&b.0 .1)));

    let mut result = place(selected, &groups, mu, Layout::Spread);
    if !result.skipped.is_empty() {
        let value = |p: &Placement| p.placed.iter().map(|(i, _)| selected[*i].entry.value).sum::<f64>();
        let packed = place(selected, &groups, mu, Layout::Packed);
        if packed.skipped.is_empty() || value(&packed) > value(&result) {
            result = Placement { failure: result.failure, ..packed };
        }
    }
    if strict && !result.skipped.is_empty() {
        let (item, second, load) = result.failure.unwrap_or((result.skipped[0], 0, mu));
        return Err(Error::CapacityExceeded { second, load, limit: mu, item });
    }
    for (i, times) in result.placed {
        let s = &selected[i];
        let item = plan.items.len() as u32;
        plan.items.push(PlanItem {
            itinerary: s.entry.itinerary,
            ttl: s.entry.ttl,
            expected_sends: s.sends,
            partial: s.is_partial(),
        });
        for t in times {
            plan.seconds[t as usize].push(item);
        }
    }
    Ok((plan, result.skipped))
}

/// Spread the selected itineraries' sends over the day. Fails if the budget
/// is exceeded or some itinerary cannot be placed without overloading a
/// second.
pub fn build_schedule(selected: &[Selection], mu: u32) -> Result<SchedulePlan> {
    schedule(selected, mu, true).map(|(plan, _)| plan)
}

/// Like [`build_schedule`] but drops itineraries that cannot be placed, and
/// returns their indices into `selected`.
pub fn build_schedule_lenient(selected: &[Selection], mu: u32) -> (SchedulePlan, Vec<usize>) {
    schedule(selected, mu, false).expect("lenient scheduling does not fail")
}

/// The budget passive fetches left unused this second, spent on the cached
/// entries closest to expiry.
pub fn lru_refresh_batch<K: std::hash::Hash + Ord + Clone>(
    lru: &LruSearchCache<K>,
    mu: u32,
    passive_used: u32,
    now: Seconds,
) -> Vec<K> {
    debug_assert!(passive_used <= mu);
    lru.pull_expiring(now, mu.saturating_sub(passive_used) as usize)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValueRow {
    pub searches_per_day: f64,
    pub p_b: f64,
    pub p_a: f64,
}

impl ValueRow {
    pub fn new(searches_per_day: f64, p_b: f64, p_a: f64) -> Result<Self> {
        Probability::new(p_b)?;
        Probability::new(p_a)?;
        if !(searches_per_day.is_finite() && searches_per_day >= 0.0) {
            return Err(Error::InvalidConfig(format!("searches_per_day {searches_per_day} must be >= 0")));
        }
        Ok(Self { searches_per_day, p_b, p_a })
    }

    /// Expected bookings per day when always a cache hit.
    pub fn value(&self) -> f64 {
        self.searches_per_day * self.p_b * self.p_a
    }
}

/// Per-itinerary demand and probability estimates, in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValueTable {
    pub rows: Vec<(Itinerary, ValueRow)>,
}

impl ValueTable {
    pub const CSV_HEADER: [&'static str; 9] = [
        "hotel_id",
        "checkin",
        "checkout",
        "adults",
        "children",
        "rooms",
        "searches_per_day",
        "p_b",
        "p_a",
    ];

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Plan entries with TTLs from `ttl_of`.
    pub fn plan_entries(&self, mut ttl_of: impl FnMut(&Itinerary) -> Seconds) -> Result<Vec<ItineraryPlanEntry>> {
        self.rows
            .iter()
            .map(|(it, row)| ItineraryPlanEntry::new(*it, ttl_of(it), row.value()))
            .collect()
    }

    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "{}", Self::CSV_HEADER.join(","))?;
        for (it, r) in &self.rows {
            writeln!(
                w,
                "{},{:.6},{:.6},{:.6}",
                io::format_itinerary(it),
                r.searches_per_day,
                r.p_b,
                r.p_a
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

    pub fn read_csv<R: std::io::Read>(input: R, source: &str) -> Result<Self> {
        let mut rows = Vec::new();
        io::for_each_row(input, source, &Self::CSV_HEADER, |rec, line| {
            let it = io::itinerary_fields(rec, 0, source, line)?;
            let row = ValueRow::new(
                io::field(rec, 6, "searches_per_day", source, line)?,
                io::field(rec, 7, "p_b", source, line)?,
                io::field(rec, 8, "p_a", source, line)?,
            )
            .map_err(|e| Error::parse(source, line, e.to_string()))?;
            rows.push((it, row));
            Ok(())
        })?;
        Ok(Self { rows })
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        Self::read_csv(io::open_reader(path)?, &path.display().to_string())
    }
}
