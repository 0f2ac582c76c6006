//! Few-shot classification with synthetic data.
//!
//! The crate trains small softmax classifiers on a union of real and synthetic
//! samples with a loss that penalizes, region by region, the disagreement
//! between predictions on real and synthetic points and the spread of
//! predictions among synthetic points. It also evaluates the generalization
//! bounds that motivate that loss and checks them by Monte Carlo simulation on
//! Gaussian worlds where every population quantity can be sampled.
//!
//! Module map:
//!
//! - [`data`]: Gaussian worlds, real and gapped synthetic samplers.
//! - [`partition`]: K-means partitions (Lloyd and streaming) and region tables.
//! - [`model`]: the softmax predictor with analytic gradients.
//! - [`loss`]: discrepancy, robustness and the composite training loss.
//! - [`bound`]: bound evaluation and violation campaigns.
//! - [`train`]: the full and lightweight training loops.
//! - [`experiment`]: the sample, cluster, train, evaluate pipeline shared by
//!   the bound campaigns and the command-line harness.

pub mod bound;
pub mod data;
pub mod error;
pub mod experiment;
pub mod loss;
pub mod model;
pub mod partition;
pub mod train;

mod linalg;

pub use bound::{
    BoundInputs, BoundKind, BoundReport, CorollaryReport, Direction, Estimate, RegionMeasures,
    SingleDistributionReport, Theorem2Report, TrialRecord, VerificationReport,
};
pub use data::{DataSet, GapSpec, GaussianWorld, Population, Sample, Source};
pub use error::{Error, Result};
pub use experiment::{ExperimentSpec, PredictorKind, TrialOutcome};
pub use loss::{BaseLoss, LipschitzLossSpec, LossConfig, OutputMode};
pub use model::SoftmaxModel;
pub use partition::{KMeansFit, Partition, RegionTable};
pub use train::{MetricTrace, TraceRow, TrainConfig, TrainMode};
