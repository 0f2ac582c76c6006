//! Minibatch training loops.
//!
//! All modes run SGD with heavy-ball momentum (`v ← μv + ∇L`, `θ ← θ − ηv`)
//! over epochs of proportional minibatches: each epoch shuffles `S` and `G`
//! and cuts both into the same number of contiguous slices, so every batch
//! mixes real and synthetic samples in the dataset ratio.
//!
//! - [`TrainMode::Full`]: regions from a fixed partition; the composite loss
//!   is evaluated on batch-local region tables.
//! - [`TrainMode::Lightweight`]: centroids start from k-means++ on the first
//!   batch and absorb every synthetic batch with running-mean updates; the
//!   regularizers are evaluated over all data, the empirical losses over the
//!   batch.
//! - [`TrainMode::SyntheticOnly`]: synthetic batches only, with the
//!   synthetic-only loss on batch-local tables.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DataSet, GaussianWorld};
use crate::error::{check_dim, param, Result};
use crate::linalg::argmax;
use crate::loss::{
    empirical_loss, loss_grad, regularizer_metrics, synthetic_only_loss_grad, LossConfig,
    Regularization,
};
use crate::model::SoftmaxModel;
use crate::partition::{kmeans_plus_plus, region_table, Partition, RegionTable};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainMode {
    Full,
    Lightweight,
    SyntheticOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub loss: LossConfig,
    pub mode: TrainMode,
    /// Trace checkpoints per epoch.
    pub trace_per_epoch: usize,
    pub seed: u64,
    /// Centroid count for the lightweight mode.
    pub clusters: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            learning_rate: 0.02,
            momentum: 0.9,
            loss: LossConfig::default(),
            mode: TrainMode::Full,
            trace_per_epoch: 2,
            seed: 0,
            clusters: 6,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(param("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(param("batch_size must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(param("learning_rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(param("momentum must lie in [0, 1)"));
        }
        if self.trace_per_epoch == 0 {
            return Err(param("trace_per_epoch must be at least 1"));
        }
        if self.mode == TrainMode::Lightweight && self.clusters == 0 {
            return Err(param("clusters must be at least 1"));
        }
        self.loss.validate()
    }
}

/// One checkpoint of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    /// Optimizer steps taken so far.
    pub step: usize,
    /// Discrepancy regularizer without its weight, over all of `S` and `G`.
    pub disc: f64,
    /// Robustness regularizer without its weight, over all of `S` and `G`.
    pub rob: f64,
    pub loss_real: f64,
    pub loss_synth: f64,
    /// Accuracy on the held-out set, when one was supplied.
    pub test_acc: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricTrace {
    pub rows: Vec<TraceRow>,
}

impl MetricTrace {
    pub const CSV_HEADER: &'static str = "step,disc,rob,loss_real,loss_synth,test_acc";

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn last(&self) -> Option<&TraceRow> {
        self.rows.last()
    }

    /// Writes the trace as CSV with LF line endings; a missing accuracy is an empty field.
    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "{}", Self::CSV_HEADER)?;
        for r in &self.rows {
            let acc = r.test_acc.map(|a| a.to_string()).unwrap_or_default();
            writeln!(
                w,
                "{},{},{},{},{},{}",
                r.step, r.disc, r.rob, r.loss_real, r.loss_synth, acc
            )?;
        }
        Ok(())
    }
}

/// Fraction of `n_draws` fresh `P_0` draws whose argmax prediction matches the label.
pub fn evaluate_accuracy(model: &SoftmaxModel, world: &GaussianWorld, n_draws: usize, seed: u64) -> Result<f64> {
    let test = world.sample_real(n_draws, seed)?;
    accuracy(model, &test)
}

/// Argmax accuracy on a labelled set; ties go to the lowest class index.
pub fn accuracy(model: &SoftmaxModel, data: &DataSet) -> Result<f64> {
    if data.is_empty() {
        return Err(param("accuracy of an empty dataset"));
    }
    check_dim("accuracy", model.input_dim(), data.dim())?;
    let hits = data
        .samples()
        .iter()
        .filter(|s| argmax(&model.forward_unchecked(&s.features).probs) == s.label)
        .count();
    Ok(hits as f64 / data.len() as f64)
}

/// Dispatches on `cfg.mode`. The returned partition is the one in force at
/// the end of training: `partition` itself for the full and synthetic-only
/// modes, the streamed centroids for the lightweight mode.
pub fn train(
    real: &DataSet,
    synth: &DataSet,
    partition: Option<&Partition>,
    model: SoftmaxModel,
    cfg: &TrainConfig,
    test: Option<&DataSet>,
) -> Result<(SoftmaxModel, MetricTrace, Partition)> {
    let need = || param("this training mode needs a fitted partition");
    match cfg.mode {
        TrainMode::Full => {
            let p = partition.ok_or_else(need)?;
            let (m, t) = train_full(real, synth, p, model, cfg, test)?;
            Ok((m, t, p.clone()))
        }
        TrainMode::SyntheticOnly => {
            let p = partition.ok_or_else(need)?;
            let (m, t) = train_synthetic_only(real, synth, p, model, cfg, test)?;
            Ok((m, t, p.clone()))
        }
        TrainMode::Lightweight => train_lightweight(real, synth, model, cfg, test),
    }
}

/// Composite-loss training on batch-local region tables of a fixed partition.
pub fn train_full(
    real: &DataSet,
    synth: &DataSet,
    partition: &Partition,
    model: SoftmaxModel,
    cfg: &TrainConfig,
    test: Option<&DataSet>,
) -> Result<(SoftmaxModel, MetricTrace)> {
    check_inputs(real, synth, &model, cfg)?;
    if real.is_empty() {
        return Err(param("full training needs at least one real sample"));
    }
    let real_regions = partition.assign_all(&real.features().collect::<Vec<_>>())?;
    let synth_regions = partition.assign_all(&synth.features().collect::<Vec<_>>())?;
    let global = RegionTable::from_assignments(partition.k(), &real_regions, &synth_regions)?;
    let mut run = Run::new(model, cfg, real.len(), synth.len())?;
    for _ in 0..cfg.epochs {
        let order = run.shuffle(real.len(), synth.len());
        for b in 0..run.batches {
            let (ri, si) = run.batch(&order, b);
            let rs: Vec<usize> = ri.iter().map(|&i| real_regions[i]).collect();
            let gs: Vec<usize> = si.iter().map(|&i| synth_regions[i]).collect();
            let table = RegionTable::from_assignments(partition.k(), &rs, &gs)?;
            let (sb, gb) = (real.subset(ri), synth.subset(si));
            let all_r: Vec<usize> = (0..sb.len()).collect();
            let all_g: Vec<usize> = (0..gb.len()).collect();
            let (loss, grad) = loss_grad(
                &run.model,
                &sb,
                &gb,
                &all_r,
                &all_g,
                &table,
                &cfg.loss,
                Regularization::Composite,
            )?;
            run.step(loss, &grad)?;
            run.maybe_trace(b, real, synth, &global, test)?;
        }
    }
    Ok((run.model, run.trace))
}

/// Training with streamed centroids and regularizers over all data.
///
/// Returns the trained model, its trace and the final centroids, whose
/// counts equal the number of synthetic points each absorbed.
pub fn train_lightweight(
    real: &DataSet,
    synth: &DataSet,
    model: SoftmaxModel,
    cfg: &TrainConfig,
    test: Option<&DataSet>,
) -> Result<(SoftmaxModel, MetricTrace, Partition)> {
    check_inputs(real, synth, &model, cfg)?;
    let mut run = Run::new(model, cfg, real.len(), synth.len())?;
    let real_pts: Vec<&[f64]> = real.features().collect();
    let synth_pts: Vec<&[f64]> = synth.features().collect();
    let mut partition: Option<Partition> = None;

    for _ in 0..cfg.epochs {
        let order = run.shuffle(real.len(), synth.len());
        for b in 0..run.batches {
            let (ri, si) = run.batch(&order, b);
            let p = match partition.as_mut() {
                Some(p) => p,
                None => {
                    let mut seed_pts: Vec<&[f64]> = ri
                        .iter()
                        .map(|&i| real_pts[i])
                        .chain(si.iter().map(|&i| synth_pts[i]))
                        .collect();
                    if seed_pts.len() < cfg.clusters {
                        seed_pts = real_pts.iter().chain(&synth_pts).copied().collect();
                    }
                    if seed_pts.len() < cfg.clusters {
                        return Err(param(format!(
                            "{} clusters requested but only {} points available",
                            cfg.clusters,
                            seed_pts.len()
                        )));
                    }
                    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6b6d_6561_6e73);
                    let c = kmeans_plus_plus(&seed_pts, cfg.clusters, &mut rng);
                    partition.insert(Partition::with_counts(c, vec![0; cfg.clusters])?)
                }
            };
            let batch_synth: Vec<&[f64]> = si.iter().map(|&i| synth_pts[i]).collect();
            p.absorb(&batch_synth)?;
            let table = region_table(p, real, synth)?;
            let (loss, grad) = loss_grad(
                &run.model,
                real,
                synth,
                ri,
                si,
                &table,
                &cfg.loss,
                Regularization::Composite,
            )?;
            run.step(loss, &grad)?;
            if run.is_checkpoint(b) {
                run.record(real, synth, &table, test)?;
            }
        }
    }
    let partition = partition.expect("at least one batch ran");
    Ok((run.model, run.trace, partition))
}

/// Training on synthetic data alone with the synthetic-only loss.
///
/// `real` is used for tracing only and may be empty.
pub fn train_synthetic_only(
    real: &DataSet,
    synth: &DataSet,
    partition: &Partition,
    model: SoftmaxModel,
    cfg: &TrainConfig,
    test: Option<&DataSet>,
) -> Result<(SoftmaxModel, MetricTrace)> {
    check_inputs(real, synth, &model, cfg)?;
    let synth_regions = partition.assign_all(&synth.features().collect::<Vec<_>>())?;
    let real_regions = partition.assign_all(&real.features().collect::<Vec<_>>())?;
    let global = RegionTable::from_assignments(partition.k(), &real_regions, &synth_regions)?;
    let mut run = Run::new(model, cfg, 0, synth.len())?;
    for _ in 0..cfg.epochs {
        let order = run.shuffle(0, synth.len());
        for b in 0..run.batches {
            let (_, si) = run.batch(&order, b);
            let gs: Vec<usize> = si.iter().map(|&i| synth_regions[i]).collect();
            let table = RegionTable::from_assignments(partition.k(), &[], &gs)?;
            let gb = synth.subset(si);
            let (loss, grad) = synthetic_only_loss_grad(&run.model, &gb, &table, &cfg.loss)?;
            run.step(loss, &grad)?;
            run.maybe_trace(b, real, synth, &global, test)?;
        }
    }
    Ok((run.model, run.trace))
}

fn check_inputs(real: &DataSet, synth: &DataSet, model: &SoftmaxModel, cfg: &TrainConfig) -> Result<()> {
    cfg.validate()?;
    if synth.is_empty() {
        return Err(param("training needs at least one synthetic sample"));
    }
    check_dim("model input dimension", model.input_dim(), synth.dim())?;
    check_dim("model class count", model.num_classes(), synth.num_classes())?;
    if !real.is_empty() {
        check_dim("real vs synthetic dimension", synth.dim(), real.dim())?;
        check_dim("real vs synthetic classes", synth.num_classes(), real.num_classes())?;
    }
    Ok(())
}

/// Optimizer state and batch schedule shared by the loops.
struct Run<'c> {
    model: SoftmaxModel,
    velocity: Vec<f64>,
    cfg: &'c TrainConfig,
    rng: ChaCha8Rng,
    batches: usize,
    n: usize,
    g: usize,
    steps: usize,
    trace: MetricTrace,
}

struct Order {
    real: Vec<usize>,
    synth: Vec<usize>,
}

impl<'c> Run<'c> {
    fn new(model: SoftmaxModel, cfg: &'c TrainConfig, n: usize, g: usize) -> Result<Self> {
        let batches = (n + g).div_ceil(cfg.batch_size);
        if batches < cfg.trace_per_epoch {
            return Err(param(format!(
                "{batches} batch(es) per epoch cannot hold {} trace checkpoints",
                cfg.trace_per_epoch
            )));
        }
        Ok(Self {
            velocity: vec![0.0; model.param_count()],
            model,
            cfg,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            batches,
            n,
            g,
            steps: 0,
            trace: MetricTrace::default(),
        })
    }

    fn shuffle(&mut self, n: usize, g: usize) -> Order {
        let mut real: Vec<usize> = (0..n).collect();
        let mut synth: Vec<usize> = (0..g).collect();
        real.shuffle(&mut self.rng);
        synth.shuffle(&mut self.rng);
        Order { real, synth }
    }

    /// Slice `b` of both shuffled orders.
    fn batch<'o>(&self, order: &'o Order, b: usize) -> (&'o [usize], &'o [usize]) {
        let cut = |len: usize, b: usize| b * len / self.batches;
        (
            &order.real[cut(self.n, b)..cut(self.n, b + 1)],
            &order.synth[cut(self.g, b)..cut(self.g, b + 1)],
        )
    }

    fn step(&mut self, loss: f64, grad: &[f64]) -> Result<()> {
        if !loss.is_finite() || grad.iter().any(|v| !v.is_finite()) {
            return Err(param(format!("training diverged at step {}", self.steps + 1)));
        }
        let (mu, lr) = (self.cfg.momentum, self.cfg.learning_rate);
        for ((p, v), g) in self.model.params_mut().iter_mut().zip(&mut self.velocity).zip(grad) {
            *v = mu * *v + g;
            *p -= lr * *v;
        }
        self.steps += 1;
        Ok(())
    }

    /// Checkpoints sit after batches `⌊(j+1)B/T⌋ − 1`, `j = 0..T`.
    fn is_checkpoint(&self, b: usize) -> bool {
        let t = self.cfg.trace_per_epoch;
        (0..t).any(|j| (j + 1) * self.batches / t == b + 1)
    }

    fn maybe_trace(
        &mut self,
        b: usize,
        real: &DataSet,
        synth: &DataSet,
        table: &RegionTable,
        test: Option<&DataSet>,
    ) -> Result<()> {
        if self.is_checkpoint(b) {
            self.record(real, synth, table, test)?;
        }
        Ok(())
    }

    fn record(
        &mut self,
        real: &DataSet,
        synth: &DataSet,
        table: &RegionTable,
        test: Option<&DataSet>,
    ) -> Result<()> {
        let m = &self.model;
        let base = self.cfg.loss.base_loss;
        let regs = regularizer_metrics(m, real, synth, table, self.cfg.loss.output_mode)?;
        let loss_real = if real.is_empty() {
            f64::NAN
        } else {
            empirical_loss(m, real, base)?
        };
        let row = TraceRow {
            step: self.steps,
            disc: regs.discrepancy,
            rob: regs.robustness,
            loss_real,
            loss_synth: empirical_loss(m, synth, base)?,
            test_acc: test.map(|t| accuracy(m, t)).transpose()?,
        };
        self.trace.rows.push(row);
        Ok(())
    }
}
