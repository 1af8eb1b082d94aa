//! Experiment configuration: a workload (generated or read from a trace
//! file), a price process, a supplier budget, a training period and a set
//! of policy arms, replayed over one or more seeds.

use std::path::{Path, PathBuf};

use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::domain::{BookingProbabilities, Probability, DAY};
use crate::error::{Error, Result};
use crate::rng;
use crate::simulator::{
    ab_compare, estimate_probabilities, AbReport, Estimates, Metrics, Models, PolicySpec,
    RecordOptions, RunSpec, Scenario, Simulation, TrainingConfig, Window,
};
use crate::supplier::SupplierConfig;
use crate::trace::{
    generate_booking_probabilities, generate_catalog, generate_searches_for, ingest_trace,
    PriceProcessConfig, WorkloadConfig,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmConfig {
    pub label: String,
    pub policy: PolicySpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    /// Replay this trace instead of generating searches. Relative paths
    /// resolve against the config file's directory.
    #[serde(default)]
    pub trace: Option<PathBuf>,
    #[serde(default)]
    pub workload: WorkloadConfig,
    #[serde(default)]
    pub price: PriceProcessConfig,
    pub supplier: SupplierConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default = "default_training_days")]
    pub training_days: u32,
    #[serde(default = "default_horizon_days")]
    pub horizon_days: u32,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub arms: Vec<ArmConfig>,
}

fn default_name() -> String {
    "experiment".into()
}

fn default_training_days() -> u32 {
    3
}

fn default_horizon_days() -> u32 {
    14
}

fn default_seeds() -> Vec<u64> {
    vec![1]
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, source: &str, base_dir: Option<&Path>) -> Result<Self> {
        let mut config: Self = toml::from_str(text)
            .map_err(|e| Error::InvalidConfig(format!("{source}: {e}")))?;
        if let (Some(trace), Some(dir)) = (&config.trace, base_dir) {
            if trace.is_relative() {
                config.trace = Some(dir.join(trace));
            }
        }
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
        })?;
        Self::from_toml(&text, &path.display().to_string(), path.parent())
    }

    pub fn validate(&self) -> Result<()> {
        if self.arms.is_empty() {
            return Err(Error::InvalidConfig("at least one arm is required".into()));
        }
        for arm in &self.arms {
            arm.policy.validate()?;
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("at least one seed is required".into()));
        }
        if self.horizon_days == 0 {
            return Err(Error::InvalidConfig("horizon_days must be >= 1".into()));
        }
        let needs_training = self.arms.iter().any(|a| !matches!(a.policy, PolicySpec::PassiveFixedTtl { .. }));
        if needs_training && self.training_days == 0 {
            return Err(Error::InvalidConfig("smart policies need training_days >= 1".into()));
        }
        self.supplier.validate()?;
        self.price.validate()?;
        match &self.trace {
            Some(path) if !path.exists() => Err(Error::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("{}: trace file not found", path.display()),
            ))),
            Some(_) => Ok(()),
            None => {
                self.workload.validate()?;
                let n_dc = self.workload.dc_traffic_profiles.len();
                if n_dc > self.supplier.n_datacentres() {
                    return Err(Error::InvalidConfig(format!(
                        "workload has {n_dc} data centres but the supplier allocates {}",
                        self.supplier.n_datacentres()
                    )));
                }
                Ok(())
            }
        }
    }

    pub fn total_days(&self) -> u32 {
        self.training_days + self.horizon_days
    }

    pub fn training_window(&self) -> Option<Window> {
        (self.training_days > 0).then(|| Window::new(0, self.training_days as i64 * DAY).expect("nonempty"))
    }

    pub fn test_window(&self) -> Window {
        Window::new(self.training_days as i64 * DAY, self.total_days() as i64 * DAY).expect("nonempty")
    }

    /// The workload used for `seed`, spanning training and test.
    pub fn workload_for(&self, seed: u64) -> WorkloadConfig {
        WorkloadConfig { seed, horizon: self.total_days() as i64 * DAY, ..self.workload.clone() }
    }

    pub fn scenario(&self, seed: u64) -> Result<Scenario> {
        let workload = self.workload_for(seed);
        let clock = workload.clock();
        let horizon = workload.horizon;
        let (searches, booking) = match &self.trace {
            Some(path) => {
                let searches = ingest_trace(path)?;
                let booking = hotel_propensities(&workload, searches.iter().map(|s| s.itinerary))?;
                (searches, booking)
            }
            None => {
                let catalog = generate_catalog(&workload)?;
                let booking = generate_booking_probabilities(&workload, &catalog)?;
                (generate_searches_for(&workload, &catalog)?, booking)
            }
        };
        let horizon = horizon.max(searches.last().map_or(0, |s| s.timestamp + 1));
        Ok(Scenario { clock, horizon, searches, booking, price: self.price.clone(), seed })
    }
}

/// Per-hotel booking propensities for itineraries outside a generated
/// catalog, drawn independently for each hotel id.
fn hotel_propensities(
    workload: &WorkloadConfig,
    itineraries: impl Iterator<Item = crate::domain::Itinerary>,
) -> Result<BookingProbabilities> {
    let b = workload.booking;
    let beta = Beta::new(b.alpha, b.beta).map_err(|e| Error::InvalidDistribution(e.to_string()))?;
    let mut out = BookingProbabilities::uniform(Probability::new(b.alpha / (b.alpha + b.beta))?);
    for it in itineraries {
        let mut r = rng::stream(rng::mix(workload.seed ^ it.hotel.0 as u64), "hotel-propensity");
        out.insert(it, Probability::new(beta.sample(&mut r))?);
    }
    Ok(out)
}

/// A scenario for one seed, with models trained on its training period.
pub struct Prepared {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub sim: Simulation,
    pub estimates: Option<Estimates>,
}

impl Prepared {
    pub fn new(config: &ExperimentConfig, seed: u64) -> Result<Self> {
        let sim = Simulation::new(config.scenario(seed)?)?;
        let estimates = match config.training_window() {
            Some(w) => Some(estimate_probabilities(&sim, w, &config.supplier, &config.training)?),
            None => None,
        };
        Ok(Self { config: config.clone(), seed, sim, estimates })
    }

    pub fn models(&self) -> Models {
        self.estimates.as_ref().map(Estimates::models).unwrap_or_default()
    }

    /// Each arm on the full trace and the full budget.
    pub fn run_arms(&self) -> Result<Vec<Metrics>> {
        let models = self.models();
        self.config
            .arms
            .iter()
            .map(|arm| {
                Ok(self
                    .sim
                    .run(&RunSpec {
                        label: arm.label.clone(),
                        window: self.config.test_window(),
                        supplier: self.config.supplier.clone(),
                        policy: arm.policy.clone(),
                        models: &models,
                        split: None,
                        record: RecordOptions::default(),
                    })?
                    .metrics)
            })
            .collect()
    }

    /// The first two arms as a 50/50 user split.
    pub fn run_ab(&self) -> Result<AbReport> {
        let [a, b] = match self.config.arms.as_slice() {
            [a, b, ..] => [a, b],
            _ => return Err(Error::InvalidConfig("an A/B comparison needs two arms".into())),
        };
        ab_compare(
            &self.sim,
            self.config.test_window(),
            &self.config.supplier,
            [(&a.label, &a.policy), (&b.label, &b.policy)],
            &self.models(),
            rng::stream_seed(self.seed, "ab"),
        )
    }
}
