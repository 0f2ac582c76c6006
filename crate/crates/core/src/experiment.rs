//! One experiment trial: sample a world, cluster, train, evaluate.
//!
//! Every random choice in a trial is derived from the trial seed through
//! [`sub_seed`], so a trial is a pure function of `(spec, seed)`.

use serde::{Deserialize, Serialize};

use crate::bound::BoundInputs;
use crate::data::{merge, DataSet, GapSpec, GaussianWorld};
use crate::error::{param, Result};
use crate::loss::regularizer_metrics;
use crate::model::SoftmaxModel;
use crate::partition::{kmeans_fit, region_table, Partition, RegionTable};
use crate::train::{accuracy, train, MetricTrace, TrainConfig, TrainMode};

/// Deterministic child seed `tag` of `seed` (SplitMix64 finalizer).
pub fn sub_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed
        .wrapping_add(tag.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// What predictor a trial produces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PredictorKind {
    /// Trained with the configured loop.
    Trained,
    /// The untrained all-zero model, which predicts the uniform distribution.
    Constant,
}

/// Everything a trial needs apart from its seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub dim: usize,
    pub classes: usize,
    /// Distance between class means.
    pub separation: f64,
    /// Class variance σ².
    pub cov_scale: f64,
    pub gap: GapSpec,
    /// Fraction of the gap removed before sampling (`0` keeps it, `1` removes it).
    pub gap_reduction: f64,
    /// Real sample count `n`.
    pub n: usize,
    /// Synthetic sample count `g`.
    pub g: usize,
    /// Partition size `K`.
    pub k: usize,
    pub kmeans_iters: usize,
    /// Hidden width; 0 gives a linear model.
    pub hidden: usize,
    pub train: TrainConfig,
    pub bound: BoundInputs,
    /// Held-out `P_0` draws for accuracy.
    pub test_samples: usize,
    pub predictor: PredictorKind,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        let classes = 3;
        let k = 2 * classes;
        Self {
            dim: 2,
            classes,
            separation: 3.0,
            cov_scale: 1.0,
            gap: GapSpec {
                mean_shift: vec![0.5, 0.0],
                variance_scale: 1.2,
                label_flip_prob: 0.0,
            },
            gap_reduction: 0.0,
            n: 16 * classes,
            g: 100 * classes,
            k,
            kmeans_iters: 100,
            hidden: 0,
            train: TrainConfig {
                clusters: k,
                ..TrainConfig::default()
            },
            bound: BoundInputs::new(0.1, k, 2000),
            test_samples: 2000,
            predictor: PredictorKind::Trained,
        }
    }
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.g == 0 {
            return Err(param("n and g must be at least 1"));
        }
        if self.k == 0 || self.k > self.n + self.g {
            return Err(param(format!("K = {} must lie in [1, n + g]", self.k)));
        }
        if !(0.0..=1.0).contains(&self.gap_reduction) {
            return Err(param("gap_reduction must lie in [0, 1]"));
        }
        if self.test_samples == 0 {
            return Err(param("test_samples must be at least 1"));
        }
        if self.bound.k != self.k {
            return Err(param("bound K must equal the partition size K"));
        }
        if self.train.mode == TrainMode::Lightweight && self.train.clusters != self.k {
            return Err(param("lightweight clusters must equal K"));
        }
        self.gap.validate(self.dim)?;
        self.train.validate()?;
        self.bound.validate()
    }

    /// The world of a trial, after gap reduction.
    pub fn world(&self, seed: u64) -> Result<GaussianWorld> {
        let w = GaussianWorld::new(
            self.dim,
            self.classes,
            self.separation,
            self.cov_scale,
            self.gap.clone(),
            sub_seed(seed, 0),
        )?;
        w.apply_gap_reduction(1.0 - self.gap_reduction)
    }
}

/// Everything a trial produced.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialOutcome {
    pub seed: u64,
    pub world: GaussianWorld,
    pub real: DataSet,
    pub synth: DataSet,
    /// The partition in force after training.
    pub partition: Partition,
    pub table: RegionTable,
    pub model: SoftmaxModel,
    pub trace: MetricTrace,
    pub test_accuracy: f64,
    /// Unweighted regularizers of the final model over all data.
    pub final_disc: f64,
    pub final_rob: f64,
}

/// Runs one trial. The partition is fit by Lloyd on `S ∪ G` features except
/// in the lightweight mode, which streams its own.
pub fn run_trial(spec: &ExperimentSpec, seed: u64) -> Result<TrialOutcome> {
    spec.validate()?;
    let world = spec.world(seed)?;
    let real = world.sample_real(spec.n, sub_seed(seed, 1))?;
    let synth = world.sample_synthetic(spec.g, sub_seed(seed, 2))?;
    let test = world.sample_real(spec.test_samples, sub_seed(seed, 6))?;
    let init = SoftmaxModel::new(spec.dim, spec.classes, spec.hidden, sub_seed(seed, 4))?;
    let cfg = TrainConfig {
        seed: sub_seed(seed, 5),
        ..spec.train
    };

    let fitted = if cfg.mode == TrainMode::Lightweight && spec.predictor == PredictorKind::Trained {
        None
    } else {
        let all = merge(&real, &synth)?;
        let pts: Vec<&[f64]> = all.features().collect();
        Some(kmeans_fit(&pts, spec.k, spec.kmeans_iters, sub_seed(seed, 3))?.partition)
    };

    let (model, trace, partition) = match spec.predictor {
        PredictorKind::Trained => train(&real, &synth, fitted.as_ref(), init, &cfg, Some(&test))?,
        PredictorKind::Constant => (
            SoftmaxModel::zeros(spec.dim, spec.classes, spec.hidden)?,
            MetricTrace::default(),
            fitted.expect("fitted for the constant predictor"),
        ),
    };
    let table = region_table(&partition, &real, &synth)?;
    let regs = regularizer_metrics(&model, &real, &synth, &table, spec.train.loss.output_mode)?;
    Ok(TrialOutcome {
        seed,
        test_accuracy: accuracy(&model, &test)?,
        world,
        real,
        synth,
        partition,
        table,
        model,
        trace,
        final_disc: regs.discrepancy,
        final_rob: regs.robustness,
    })
}
