//! Run configuration: a single TOML file is the source of truth; a few
//! command-line flags may override individual keys.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use protoselect::{
    BlobSpec, EnergyWeights, Error, OptimizerConfig, OuterConfig, PerturbationConfig,
    PerturbationDims, RaySpec, Result, SplitFractions, ValidationMetric,
};

/// Raw TOML shape; validated into richer types by the accessors below.
#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_bins")]
    pub bins: usize,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    /// 0 perturbs every dimension; a positive value perturbs a fixed seeded
    /// subset of that many dimensions.
    #[serde(default)]
    pub perturb_dims: usize,
    /// 0 uses the default thread pool.
    #[serde(default)]
    pub threads: usize,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub input: InputConfig,
    #[serde(default)]
    pub split: Option<SplitConfig>,
    #[serde(default)]
    pub weights: Option<WeightsConfig>,
    #[serde(default)]
    pub outer: Option<OuterTomlConfig>,
    #[serde(default)]
    pub optimizer: OptimizerTomlConfig,
    #[serde(default)]
    pub plan: Option<PlanConfig>,
}

fn default_seed() -> u64 {
    0
}
fn default_k() -> usize {
    10
}
fn default_bins() -> usize {
    5
}
fn default_epsilon() -> f64 {
    1.0
}
fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct InputConfig {
    pub csv: Option<PathBuf>,
    pub db: Option<PathBuf>,
    pub rays: Option<RaysConfig>,
    pub blobs: Option<BlobsConfig>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RaysConfig {
    pub length: usize,
    pub boundaries: Vec<usize>,
    #[serde(default)]
    pub flip: f64,
    pub per_class: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobsConfig {
    pub dimension: usize,
    pub means: Vec<Vec<f64>>,
    pub stds: Vec<f64>,
    pub per_class: usize,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub train: f64,
    #[serde(default)]
    pub validate: f64,
    #[serde(default)]
    pub test: f64,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightsConfig {
    pub alpha: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OuterTomlConfig {
    /// `[low, high]` searched in log space.
    pub alpha: [f64; 2],
    pub beta: [f64; 2],
    #[serde(default = "default_metric")]
    pub metric: String,
    #[serde(default = "default_outer_budget")]
    pub budget: usize,
}

fn default_metric() -> String {
    "auc".into()
}
fn default_outer_budget() -> usize {
    18
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerTomlConfig {
    #[serde(default = "default_inner_budget")]
    pub budget: usize,
    #[serde(default = "default_initial_step")]
    pub initial_step: f64,
    #[serde(default = "default_min_step")]
    pub min_step: f64,
    #[serde(default)]
    pub initial_plan: Option<Vec<f64>>,
    #[serde(default = "default_restarts")]
    pub restarts: usize,
}

fn default_inner_budget() -> usize {
    400
}
fn default_initial_step() -> f64 {
    0.25
}
fn default_min_step() -> f64 {
    1e-3
}
fn default_restarts() -> usize {
    2
}

impl Default for OptimizerTomlConfig {
    fn default() -> Self {
        OptimizerTomlConfig {
            budget: default_inner_budget(),
            initial_step: default_initial_step(),
            min_step: default_min_step(),
            initial_plan: None,
            restarts: default_restarts(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanConfig {
    pub fractions: Vec<f64>,
}

/// Which optimization mode the config selects.
pub enum OptimizeMode {
    Fixed(EnergyWeights),
    Outer(OuterConfig),
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("cannot parse config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks ranges and referenced paths; called at load time so commands
    /// can assume a sane config.
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if self.bins == 0 {
            return Err(Error::Config("bins must be at least 1".into()));
        }
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::Config(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        let sources = [
            self.input.csv.is_some(),
            self.input.db.is_some(),
            self.input.rays.is_some(),
            self.input.blobs.is_some(),
        ]
        .iter()
        .filter(|&&s| s)
        .count();
        if sources != 1 {
            return Err(Error::Config(format!(
                "exactly one input source (csv, db, rays, blobs) must be set, found {sources}"
            )));
        }
        for path in [self.input.csv.as_deref(), self.input.db.as_deref()]
            .into_iter()
            .flatten()
        {
            if !path.exists() {
                return Err(Error::Config(format!(
                    "input path {} does not exist",
                    path.display()
                )));
            }
        }
        if let Some(s) = &self.split {
            SplitFractions::new(s.train, s.validate, s.test)?;
        }
        if let Some(w) = &self.weights {
            EnergyWeights::new(w.alpha, w.beta)?;
        }
        if let Some(o) = &self.outer {
            ValidationMetric::from_name(&o.metric)?;
            if o.budget == 0 {
                return Err(Error::Config("outer budget must be at least 1".into()));
            }
        }
        if let Some(p) = &self.plan {
            if p.fractions.len() != self.bins {
                return Err(Error::Config(format!(
                    "plan has {} fractions but bins = {}",
                    p.fractions.len(),
                    self.bins
                )));
            }
        }
        Ok(())
    }

    pub fn split_fractions(&self) -> Result<SplitFractions> {
        match &self.split {
            None => Ok(SplitFractions::train_only()),
            Some(s) => SplitFractions::new(s.train, s.validate, s.test),
        }
    }

    pub fn perturbation(&self) -> Result<PerturbationConfig> {
        let dims = if self.perturb_dims == 0 {
            PerturbationDims::All
        } else {
            PerturbationDims::Subset {
                count: self.perturb_dims,
                seed: self.seed,
            }
        };
        PerturbationConfig::new(self.epsilon, dims)
    }

    pub fn optimizer_config(&self) -> OptimizerConfig {
        OptimizerConfig {
            max_evaluations: self.optimizer.budget,
            initial_plan: self.optimizer.initial_plan.clone(),
            initial_step: self.optimizer.initial_step,
            min_step: self.optimizer.min_step,
            seed: self.seed,
            restarts: self.optimizer.restarts,
        }
    }

    pub fn optimize_mode(&self) -> Result<OptimizeMode> {
        match (&self.weights, &self.outer) {
            (Some(_), Some(_)) => Err(Error::Config(
                "set either [weights] or [outer], not both".into(),
            )),
            (Some(w), None) => Ok(OptimizeMode::Fixed(EnergyWeights::new(w.alpha, w.beta)?)),
            (None, Some(o)) => Ok(OptimizeMode::Outer(OuterConfig {
                alpha_range: (o.alpha[0], o.alpha[1]),
                beta_range: (o.beta[0], o.beta[1]),
                metric: ValidationMetric::from_name(&o.metric)?,
                budget: o.budget,
            })),
            (None, None) => Err(Error::Config(
                "optimization needs a [weights] or an [outer] section".into(),
            )),
        }
    }

    pub fn ray_spec(&self) -> Option<RaySpec> {
        self.input.rays.as_ref().map(|r| RaySpec {
            length: r.length,
            boundaries: r.boundaries.clone(),
            flip_probability: r.flip,
            samples_per_class: r.per_class,
            seed: self.seed,
        })
    }

    pub fn blob_spec(&self) -> Option<BlobSpec> {
        self.input.blobs.as_ref().map(|b| BlobSpec {
            dimension: b.dimension,
            means: b.means.clone(),
            stds: b.stds.clone(),
            samples_per_class: b.per_class,
            seed: self.seed,
        })
    }

    /// Seed for the train/validate/test shuffle, derived from the root seed
    /// so it does not alias the generator stream.
    pub fn split_seed(&self) -> u64 {
        self.seed.wrapping_add(0x9E37_79B9_7F4A_7C15)
    }
}
