//! The simulated supplier: ground-truth prices behind a fixed-window
//! per-second QPS limit shared by one or more data centres.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::domain::{DcId, Price, Seconds};
use crate::error::{Error, Result};
use crate::io;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SupplierConfig {
    /// Requests per second the supplier accepts in total.
    pub qps_limit: u32,
    /// Per-second budget of each data centre; sums to at most `qps_limit`.
    pub per_dc_allocation: Vec<u32>,
}

impl SupplierConfig {
    pub fn single_dc(qps_limit: u32) -> Self {
        Self {
            qps_limit,
            per_dc_allocation: vec![qps_limit],
        }
    }

    /// Split `qps_limit` over `n` data centres as evenly as integers allow.
    pub fn even_split(qps_limit: u32, n: u16) -> Self {
        let n = n.max(1) as u32;
        let per_dc_allocation = (0..n)
            .map(|d| qps_limit / n + u32::from(d < qps_limit % n))
            .collect();
        Self {
            qps_limit,
            per_dc_allocation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.qps_limit == 0 {
            return Err(Error::InvalidConfig("qps_limit must be > 0".into()));
        }
        if self.per_dc_allocation.is_empty() {
            return Err(Error::InvalidConfig(
                "at least one data centre is required".into(),
            ));
        }
        let total: u64 = self.per_dc_allocation.iter().map(|&a| a as u64).sum();
        if total > self.qps_limit as u64 {
            return Err(Error::InvalidConfig(format!(
                "per-DC allocations sum to {total}, above qps_limit {}",
                self.qps_limit
            )));
        }
        Ok(())
    }

    pub fn n_datacentres(&self) -> usize {
        self.per_dc_allocation.len()
    }

    /// Total per-second budget the data centres can actually use.
    pub fn allocated(&self) -> u32 {
        self.per_dc_allocation.iter().sum()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Bucket {
    pub accepted: u32,
    pub rejected: u32,
}

/// Accepted and rejected fetches per data centre per second.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UtilizationReport {
    per_dc: Vec<Vec<Bucket>>,
}

/// A second in which accepted fetches exceeded a limit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CapViolation {
    pub second: Seconds,
    /// `None` for the supplier-wide limit.
    pub dc: Option<DcId>,
    pub accepted: u32,
    pub limit: u32,
}

impl UtilizationReport {
    fn new(n_dc: usize) -> Self {
        Self {
            per_dc: vec![Vec::new(); n_dc],
        }
    }

    fn bucket_mut(&mut self, dc: usize, second: Seconds) -> &mut Bucket {
        let series = &mut self.per_dc[dc];
        let idx = second as usize;
        if series.len() <= idx {
            series.resize(idx + 1, Bucket::default());
        }
        &mut series[idx]
    }

    /// Pad every series with empty buckets up to `horizon` seconds.
    pub fn pad_to(&mut self, horizon: Seconds) {
        let n = horizon.max(0) as usize;
        for series in &mut self.per_dc {
            if series.len() < n {
                series.resize(n, Bucket::default());
            }
        }
    }

    pub fn n_datacentres(&self) -> usize {
        self.per_dc.len()
    }

    pub fn seconds(&self) -> usize {
        self.per_dc.iter().map(Vec::len).max().unwrap_or(0)
    }

    pub fn get(&self, dc: DcId, second: Seconds) -> Bucket {
        self.per_dc
            .get(dc.0 as usize)
            .and_then(|s| s.get(second as usize))
            .copied()
            .unwrap_or_default()
    }

    /// Accepted fetches per second summed over data centres.
    pub fn accepted_per_second(&self) -> Vec<u32> {
        let mut out = vec![0; self.seconds()];
        for series in &self.per_dc {
            for (o, b) in out.iter_mut().zip(series) {
                *o += b.accepted;
            }
        }
        out
    }

    pub fn total_accepted(&self) -> u64 {
        self.per_dc
            .iter()
            .flatten()
            .map(|b| b.accepted as u64)
            .sum()
    }

    pub fn total_rejected(&self) -> u64 {
        self.per_dc
            .iter()
            .flatten()
            .map(|b| b.rejected as u64)
            .sum()
    }

    /// Every second where a data centre or the supplier as a whole accepted
    /// more than its limit.
    pub fn audit(&self, config: &SupplierConfig) -> Vec<CapViolation> {
        let mut out = Vec::new();
        for (d, series) in self.per_dc.iter().enumerate() {
            let limit = config.per_dc_allocation.get(d).copied().unwrap_or(0);
            for (s, b) in series.iter().enumerate() {
                if b.accepted > limit {
                    out.push(CapViolation {
                        second: s as Seconds,
                        dc: Some(DcId(d as u16)),
                        accepted: b.accepted,
                        limit,
                    });
                }
            }
        }
        for (s, &total) in self.accepted_per_second().iter().enumerate() {
            if total > config.qps_limit {
                out.push(CapViolation {
                    second: s as Seconds,
                    dc: None,
                    accepted: total,
                    limit: config.qps_limit,
                });
            }
        }
        out
    }

    /// `dc_id,second,accepted,rejected`, one row per data centre per second.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "dc_id,second,accepted,rejected")?;
        for (d, series) in self.per_dc.iter().enumerate() {
            for (s, b) in series.iter().enumerate() {
                writeln!(w, "{d},{s},{},{}", b.accepted, b.rejected)?;
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
}

/// Fixed-window limiter over integer seconds.
#[derive(Debug, Clone)]
pub struct RateLimiter {
    config: SupplierConfig,
    second: Seconds,
    used: Vec<u32>,
    total_used: u32,
    report: UtilizationReport,
}

impl RateLimiter {
    pub fn new(config: SupplierConfig) -> Result<Self> {
        config.validate()?;
        let n = config.n_datacentres();
        Ok(Self {
            config,
            second: 0,
            used: vec![0; n],
            total_used: 0,
            report: UtilizationReport::new(n),
        })
    }

    pub fn config(&self) -> &SupplierConfig {
        &self.config
    }

    fn roll(&mut self, now: Seconds) -> Result<()> {
        if now < self.second {
            return Err(Error::TimeWentBackwards {
                now,
                last: self.second,
            });
        }
        if now > self.second {
            self.second = now;
            self.used.iter_mut().for_each(|u| *u = 0);
            self.total_used = 0;
        }
        Ok(())
    }

    fn dc_index(&self, dc: DcId) -> Result<usize> {
        let d = dc.0 as usize;
        if d < self.used.len() {
            Ok(d)
        } else {
            Err(Error::UnknownDc(dc.0))
        }
    }

    /// Budget still available to `dc` in second `now`.
    pub fn remaining(&self, dc: DcId, now: Seconds) -> Result<u32> {
        let d = self.dc_index(dc)?;
        if now < self.second {
            return Err(Error::TimeWentBackwards {
                now,
                last: self.second,
            });
        }
        let (used, total_used) = if now > self.second {
            (0, 0)
        } else {
            (self.used[d], self.total_used)
        };
        let dc_left = self.config.per_dc_allocation[d].saturating_sub(used);
        let total_left = self.config.qps_limit.saturating_sub(total_used);
        Ok(dc_left.min(total_left))
    }

    /// Take one unit of `dc`'s budget in second `now`. Returns whether the
    /// request was accepted; a rejection leaves the budget untouched.
    pub fn try_acquire(&mut self, dc: DcId, now: Seconds) -> Result<bool> {
        let d = self.dc_index(dc)?;
        self.roll(now)?;
        let ok = self.used[d] < self.config.per_dc_allocation[d]
            && self.total_used < self.config.qps_limit;
        let bucket = self.report.bucket_mut(d, now);
        if ok {
            bucket.accepted += 1;
            self.used[d] += 1;
            self.total_used += 1;
        } else {
            bucket.rejected += 1;
        }
        Ok(ok)
    }

    pub fn report(&self) -> &UtilizationReport {
        &self.report
    }

    pub fn into_report(self) -> UtilizationReport {
        self.report
    }
}

/// Where a supplier gets its true prices from.
pub trait PriceSource<K> {
    fn price_at(&self, key: &K, t: Seconds) -> Price;
}

impl<K, F: Fn(&K, Seconds) -> Price> PriceSource<K> for F {
    fn price_at(&self, key: &K, t: Seconds) -> Price {
        self(key, t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FetchOutcome {
    Priced { price: Price, fetched_at: Seconds },
    Rejected,
}

/// A rate-limited supplier answering with ground-truth prices. Latency is
/// zero: a priced answer is usable in the second it was requested.
#[derive(Debug, Clone)]
pub struct Supplier<S> {
    limiter: RateLimiter,
    source: S,
}

impl<S> Supplier<S> {
    pub fn new(config: SupplierConfig, source: S) -> Result<Self> {
        Ok(Self {
            limiter: RateLimiter::new(config)?,
            source,
        })
    }

    pub fn fetch<K>(&mut self, key: &K, dc: DcId, now: Seconds) -> Result<FetchOutcome>
    where
        S: PriceSource<K>,
    {
        if self.limiter.try_acquire(dc, now)? {
            Ok(FetchOutcome::Priced {
                price: self.source.price_at(key, now),
                fetched_at: now,
            })
        } else {
            Ok(FetchOutcome::Rejected)
        }
    }

    pub fn remaining(&self, dc: DcId, now: Seconds) -> Result<u32> {
        self.limiter.remaining(dc, now)
    }

    pub fn config(&self) -> &SupplierConfig {
        self.limiter.config()
    }

    pub fn source(&self) -> &S {
        &self.source
    }

    pub fn utilization_report(&self) -> &UtilizationReport {
        self.limiter.report()
    }

    pub fn into_parts(self) -> (UtilizationReport, S) {
        (self.limiter.into_report(), self.source)
    }
}
