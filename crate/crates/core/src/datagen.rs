//! Seeded synthetic dataset generators and deterministic splits.
//!
//! Two generators cover the benchmark regimes: isotropic Gaussian blobs
//! for generic continuous features, and binary rays — vectors of ones up
//! to a class-specific boundary index and zeros after, with independent
//! bit flips — which mimic databases whose classes are ordered boundary
//! positions. Both are pure functions of their spec, seed included.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;

use crate::error::{Error, Result};
use crate::store::{Metric, PrototypeDatabase};

/// Isotropic Gaussian mixture spec. Class `c` draws `samples_per_class`
/// points from `Normal(means[c], stds[c] * I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlobSpec {
    pub dimension: usize,
    pub means: Vec<Vec<f64>>,
    pub stds: Vec<f64>,
    pub samples_per_class: usize,
    pub seed: u64,
}

impl BlobSpec {
    fn validate(&self) -> Result<()> {
        if self.dimension == 0 {
            return Err(Error::InvalidArgument("dimension must be at least 1".into()));
        }
        if self.means.is_empty() {
            return Err(Error::InvalidArgument("need at least one class mean".into()));
        }
        if self.stds.len() != self.means.len() {
            return Err(Error::InvalidArgument(
                "need one standard deviation per class".into(),
            ));
        }
        for m in &self.means {
            if m.len() != self.dimension {
                return Err(Error::DimensionMismatch {
                    expected: self.dimension,
                    actual: m.len(),
                });
            }
        }
        for (i, a) in self.means.iter().enumerate() {
            for b in &self.means[i + 1..] {
                if a == b {
                    return Err(Error::InvalidArgument("class means must be distinct".into()));
                }
            }
        }
        if self.stds.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidArgument(
                "standard deviations must be positive".into(),
            ));
        }
        if self.samples_per_class == 0 {
            return Err(Error::InvalidArgument(
                "need at least one sample per class".into(),
            ));
        }
        Ok(())
    }
}

/// Generates Gaussian blobs with class codes `0..num_classes`.
pub fn gen_blobs(spec: &BlobSpec) -> Result<PrototypeDatabase> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut rows = Vec::with_capacity(spec.means.len() * spec.samples_per_class);
    for (class, mean) in spec.means.iter().enumerate() {
        let normal = Normal::new(0.0, spec.stds[class])
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        for _ in 0..spec.samples_per_class {
            let feat: Vec<f64> = mean.iter().map(|&mu| mu + normal.sample(&mut rng)).collect();
            rows.push((class as u32, feat));
        }
    }
    PrototypeDatabase::from_rows(spec.dimension, Metric::Euclidean, rows)
}

/// Binary-ray spec: class `c` is the step pattern with ones before
/// `boundaries[c]` and zeros after, each coordinate flipped independently
/// with `flip_probability`.
#[derive(Debug, Clone, PartialEq)]
pub struct RaySpec {
    /// Samples along the ray (the feature dimension J).
    pub length: usize,
    /// Strictly increasing boundary indices, each strictly inside `[1, J-1]`.
    pub boundaries: Vec<usize>,
    pub flip_probability: f64,
    pub samples_per_class: usize,
    pub seed: u64,
}

impl RaySpec {
    fn validate(&self) -> Result<()> {
        if self.length < 2 {
            return Err(Error::InvalidArgument(
                "ray length must be at least 2".into(),
            ));
        }
        if self.boundaries.is_empty() {
            return Err(Error::InvalidArgument("need at least one radius class".into()));
        }
        for &b in &self.boundaries {
            if b < 1 || b > self.length - 1 {
                return Err(Error::InvalidArgument(format!(
                    "boundary {b} outside [1, {}]",
                    self.length - 1
                )));
            }
        }
        if self.boundaries.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument(
                "boundaries must be strictly increasing".into(),
            ));
        }
        if !(0.0..0.5).contains(&self.flip_probability) {
            return Err(Error::InvalidArgument(format!(
                "flip probability {} outside [0, 0.5)",
                self.flip_probability
            )));
        }
        if self.samples_per_class == 0 {
            return Err(Error::InvalidArgument(
                "need at least one sample per class".into(),
            ));
        }
        Ok(())
    }
}

/// Generates noisy binary rays; the class code is the boundary's index in
/// `boundaries`.
pub fn gen_rays(spec: &RaySpec) -> Result<PrototypeDatabase> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut rows = Vec::with_capacity(spec.boundaries.len() * spec.samples_per_class);
    for (class, &boundary) in spec.boundaries.iter().enumerate() {
        for _ in 0..spec.samples_per_class {
            let feat: Vec<f64> = (0..spec.length)
                .map(|i| {
                    let bit = if i < boundary { 1.0 } else { 0.0 };
                    if spec.flip_probability > 0.0 && rng.random::<f64>() < spec.flip_probability {
                        1.0 - bit
                    } else {
                        bit
                    }
                })
                .collect();
            rows.push((class as u32, feat));
        }
    }
    PrototypeDatabase::from_rows(spec.length, Metric::Euclidean, rows)
}

/// Train/validate/test shares; must sum to one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitFractions {
    pub train: f64,
    pub validate: f64,
    pub test: f64,
}

impl SplitFractions {
    pub fn new(train: f64, validate: f64, test: f64) -> Result<SplitFractions> {
        for f in [train, validate, test] {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::Config(format!("split fraction {f} outside [0, 1]")));
            }
        }
        if ((train + validate + test) - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split fractions must sum to 1, got {}",
                train + validate + test
            )));
        }
        if train <= 0.0 {
            return Err(Error::Config("training fraction must be positive".into()));
        }
        Ok(SplitFractions {
            train,
            validate,
            test,
        })
    }

    /// Everything in the training split.
    pub fn train_only() -> SplitFractions {
        SplitFractions {
            train: 1.0,
            validate: 0.0,
            test: 0.0,
        }
    }
}

/// Stratified deterministic split of a database.
#[derive(Debug)]
pub struct DatabaseSplit {
    pub train: PrototypeDatabase,
    pub validate: Option<PrototypeDatabase>,
    pub test: Option<PrototypeDatabase>,
}

/// Splits per class with a seeded shuffle, so the three parts are disjoint,
/// class-balanced, and identical across runs.
pub fn split(
    db: &PrototypeDatabase,
    fractions: &SplitFractions,
    seed: u64,
) -> Result<DatabaseSplit> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train_rows: Vec<(u32, Vec<f64>)> = Vec::new();
    let mut validate_rows: Vec<(u32, Vec<f64>)> = Vec::new();
    let mut test_rows: Vec<(u32, Vec<f64>)> = Vec::new();
    for &class in db.class_registry() {
        let mut ids = db.ids_of_class(class);
        ids.shuffle(&mut rng);
        let n = ids.len();
        let n_train = ((fractions.train * n as f64).round() as usize).min(n);
        let n_validate = ((fractions.validate * n as f64).round() as usize).min(n - n_train);
        for (i, &id) in ids.iter().enumerate() {
            let row = (class, db.features_of(id).to_vec());
            if i < n_train {
                train_rows.push(row);
            } else if i < n_train + n_validate {
                validate_rows.push(row);
            } else {
                test_rows.push(row);
            }
        }
    }
    if train_rows.is_empty() {
        return Err(Error::Config(
            "training split is empty; raise the training fraction".into(),
        ));
    }
    let dim = db.dimension();
    let metric = db.metric();
    let build = |rows: Vec<(u32, Vec<f64>)>| -> Result<Option<PrototypeDatabase>> {
        if rows.is_empty() {
            Ok(None)
        } else {
            PrototypeDatabase::from_rows(dim, metric, rows).map(Some)
        }
    };
    Ok(DatabaseSplit {
        train: PrototypeDatabase::from_rows(dim, metric, train_rows)?,
        validate: build(validate_rows)?,
        test: build(test_rows)?,
    })
}
