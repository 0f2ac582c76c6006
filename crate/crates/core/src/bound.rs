//! Generalization bound evaluation by Monte Carlo.
//!
//! Every bound is evaluated with the residual loss `ℓ(h, z) = ‖h(x) − e_y‖`
//! and residual outputs, for which `L_h = 1` and `C_h = √2`. Population
//! quantities are sampled from the [`GaussianWorld`] that generated the data.
//!
//! Region-conditioned expectations `E_{z∼P}[· : z ∈ Z_i]` are estimated by
//! rejection sampling: draws from `P` are assigned to their nearest centroid
//! and kept for region `i` until every region of interest holds `N` accepted
//! draws or `50·N` draws have been attempted. A region that accepts nothing
//! contributes 0 and is counted in the report's `empty_regions`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{DataSet, GaussianWorld, Population};
use crate::error::{check_dim, param, Error, Result};
use crate::experiment::{run_trial, sub_seed, ExperimentSpec};
use crate::linalg::{dist, mean_and_std_err};
pub use crate::loss::LipschitzLossSpec;
use crate::loss::{compared_output, OutputMode};
use crate::model::SoftmaxModel;
use crate::partition::{region_table, Partition, RegionTable};

/// Largest attempt budget for rejection sampling, as a multiple of `N`.
pub const REJECTION_BUDGET: usize = 50;

/// Number of standard errors a population estimate must exceed the bound by
/// before a trial counts as a violation.
pub const VIOLATION_SE: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    /// Confidence parameter `δ`.
    pub delta: f64,
    pub spec: LipschitzLossSpec,
    /// Partition size `K`.
    pub k: usize,
    /// Draws per Monte Carlo estimate, and accepted draws per region.
    pub mc_samples: usize,
}

impl BoundInputs {
    pub fn new(delta: f64, k: usize, mc_samples: usize) -> Self {
        Self {
            delta,
            spec: LipschitzLossSpec::l2_residual(),
            k,
            mc_samples,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(param("delta must lie in (0, 1)"));
        }
        if self.mc_samples == 0 {
            return Err(param("mc_samples must be at least 1"));
        }
        if self.k == 0 {
            return Err(param("K must be at least 1"));
        }
        if !(self.spec.lipschitz >= 0.0 && self.spec.sup_loss >= 0.0) {
            return Err(param("Lipschitz constant and loss bound must be non-negative"));
        }
        Ok(())
    }
}

/// `C_h (1/√n + 1/√g) √(2K ln2 + 2 ln(2/δ))`
pub fn concentration_two_sample(sup_loss: f64, n: usize, g: usize, k: usize, delta: f64) -> f64 {
    let n = n as f64;
    let g = g as f64;
    sup_loss
        * (1.0 / n.sqrt() + 1.0 / g.sqrt())
        * (2.0 * k as f64 * std::f64::consts::LN_2 + 2.0 * (2.0 / delta).ln()).sqrt()
}

/// `C/√n · √(2K ln2 − 2 lnδ)`
pub fn concentration_one_sample(sup_loss: f64, n: usize, k: usize, delta: f64) -> f64 {
    sup_loss / (n as f64).sqrt()
        * (2.0 * k as f64 * std::f64::consts::LN_2 - 2.0 * delta.ln()).sqrt()
}

/// A Monte Carlo mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub std_err: f64,
}

/// `(1/N) Σ ℓ(h, z_j)` over `N` fresh draws from `population`.
pub fn mc_population_loss(
    model: &SoftmaxModel,
    world: &GaussianWorld,
    population: Population,
    spec: &LipschitzLossSpec,
    n_draws: usize,
    seed: u64,
) -> Result<Estimate> {
    check_dim("model input vs world", world.dim(), model.input_dim())?;
    let draws = world.sample(population, n_draws, seed)?;
    let losses: Vec<f64> = draws
        .samples()
        .iter()
        .map(|s| spec.loss(&model.forward_unchecked(&s.features).probs, s.label))
        .collect();
    let (mean, std_err) = mean_and_std_err(&losses);
    Ok(Estimate { mean, std_err })
}

/// Residual outputs `h(x) − e_y` for every sample of `data`.
pub fn residual_outputs(model: &SoftmaxModel, data: &DataSet) -> Vec<Vec<f64>> {
    data.samples()
        .iter()
        .map(|s| {
            compared_output(
                &model.forward_unchecked(&s.features).probs,
                s.label,
                OutputMode::Residual,
            )
        })
        .collect()
}

/// Residual outputs of accepted draws per region, plus sampling bookkeeping.
struct RegionDraws {
    outputs: Vec<Vec<Vec<f64>>>,
    empty_regions: usize,
}

fn region_draws(
    model: &SoftmaxModel,
    world: &GaussianWorld,
    population: Population,
    partition: &Partition,
    targets: &[usize],
    per_region: usize,
    seed: u64,
) -> Result<RegionDraws> {
    let k = partition.k();
    let mut wanted = vec![false; k];
    for &r in targets {
        wanted[r] = true;
    }
    let mut outputs: Vec<Vec<Vec<f64>>> = vec![Vec::new(); k];
    let budget = REJECTION_BUDGET * per_region;
    let chunk = per_region.max(64);
    let mut attempts = 0;
    let mut round = 0;
    let full = |o: &Vec<Vec<Vec<f64>>>| targets.iter().all(|&r| o[r].len() >= per_region);
    while !full(&outputs) && attempts < budget {
        let draws = world.sample(population, chunk, sub_seed(seed, round))?;
        round += 1;
        for s in draws.samples() {
            attempts += 1;
            let r = partition.assign(&s.features)?;
            if wanted[r] && outputs[r].len() < per_region {
                let probs = model.forward_unchecked(&s.features).probs;
                outputs[r].push(compared_output(&probs, s.label, OutputMode::Residual));
            }
            if attempts >= budget {
                break;
            }
        }
    }
    let empty_regions = targets.iter().filter(|&&r| outputs[r].is_empty()).count();
    if empty_regions > 0 {
        log::warn!(
            "{empty_regions} region(s) accepted no draws from {population:?} after {attempts} attempts"
        );
    }
    Ok(RegionDraws {
        outputs,
        empty_regions,
    })
}

/// `(1/|A|) Σ_{a∈A} mean_z ‖h̃(z) − h̃(a)‖` over accepted draws `z`; 0 without draws.
fn set_robustness(members: &[usize], outputs: &[Vec<f64>], draws: &[Vec<f64>]) -> f64 {
    if members.is_empty() || draws.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for &a in members {
        for z in draws {
            total += dist(z, &outputs[a]);
        }
    }
    total / (members.len() * draws.len()) as f64
}

fn cross_discrepancy(a: &[usize], out_a: &[Vec<f64>], b: &[usize], out_b: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for &i in a {
        for &j in b {
            total += dist(&out_a[i], &out_b[j]);
        }
    }
    total / (a.len() * b.len()) as f64
}

/// `F(A, h)` for the residual loss, which is the norm of the residual output.
fn region_loss(members: &[usize], outputs: &[Vec<f64>]) -> f64 {
    members.iter().map(|&s| crate::linalg::norm(&outputs[s])).sum::<f64>() / members.len() as f64
}

/// Evaluated right-hand side of the two-sample bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    /// `L_h Σ (g_i/g) d̄_h(G_i, S_i)`
    pub disc_term: f64,
    /// `L_h Σ (g_i/g) R_h(G_i, Z_i | P_g)`
    pub rob_synth_term: f64,
    /// `L_h Σ (n_i/n) R_h(S_i, Z_i | P_0)`
    pub rob_real_term: f64,
    /// `F(P_g, h)`
    pub synth_loss: f64,
    /// `Σ (n_i/n − g_i/g) F(S_i, h)`
    pub reweight_term: f64,
    pub concentration: f64,
    pub total: f64,
    /// Monte Carlo `F(P_0, h)`.
    pub population_loss_estimate: f64,
    pub population_loss_se: f64,
    pub n: usize,
    /// Synthetic samples inside valid regions.
    pub g: usize,
    /// All synthetic samples.
    pub g_total: usize,
    pub k: usize,
    pub empty_regions: usize,
}

impl BoundReport {
    /// `total − population_loss_estimate`
    pub fn slack(&self) -> f64 {
        self.total - self.population_loss_estimate
    }

    pub fn violated(&self) -> bool {
        self.population_loss_estimate - self.total > VIOLATION_SE * self.population_loss_se
    }
}

/// Evaluates the two-sample bound for `model` trained on `(S, G)`.
///
/// Fails with [`Error::Precondition`] naming the first valid region that holds
/// no synthetic sample.
#[allow(clippy::too_many_arguments)]
pub fn bound_theorem1(
    model: &SoftmaxModel,
    real: &DataSet,
    synth: &DataSet,
    partition: &Partition,
    table: &RegionTable,
    inputs: &BoundInputs,
    world: &GaussianWorld,
    seed: u64,
) -> Result<BoundReport> {
    inputs.validate()?;
    table.check_consistent(real.len(), synth.len())?;
    check_dim("partition size", inputs.k, table.k())?;
    check_dim("partition size", partition.k(), table.k())?;
    if real.is_empty() {
        return Err(param("the bound needs at least one real sample"));
    }
    if let Some(region) = table.first_region_without_synth() {
        return Err(Error::Precondition {
            region,
            reason: "valid region holds no synthetic sample (g_i = 0)".into(),
        });
    }

    let l_h = inputs.spec.lipschitz;
    let n = table.n() as f64;
    let g = table.g() as f64;
    let valid = table.valid_regions();
    let out_s = residual_outputs(model, real);
    let out_g = residual_outputs(model, synth);

    let synth_draws = region_draws(
        model,
        world,
        Population::Synthetic,
        partition,
        valid,
        inputs.mc_samples,
        sub_seed(seed, 1),
    )?;
    let real_draws = region_draws(
        model,
        world,
        Population::Real,
        partition,
        valid,
        inputs.mc_samples,
        sub_seed(seed, 2),
    )?;

    let mut disc = 0.0;
    let mut rob_synth = 0.0;
    let mut rob_real = 0.0;
    let mut reweight = 0.0;
    for &r in valid {
        let wg = table.g_i(r) as f64 / g;
        let wn = table.n_i(r) as f64 / n;
        let s_i = table.real_members(r);
        let g_i = table.synth_members(r);
        disc += wg * cross_discrepancy(g_i, &out_g, s_i, &out_s);
        rob_synth += wg * set_robustness(g_i, &out_g, &synth_draws.outputs[r]);
        rob_real += wn * set_robustness(s_i, &out_s, &real_draws.outputs[r]);
        reweight += (wn - wg) * region_loss(s_i, &out_s);
    }

    let synth_loss = mc_population_loss(
        model,
        world,
        Population::Synthetic,
        &inputs.spec,
        inputs.mc_samples,
        sub_seed(seed, 3),
    )?;
    let population = mc_population_loss(
        model,
        world,
        Population::Real,
        &inputs.spec,
        inputs.mc_samples,
        sub_seed(seed, 4),
    )?;
    let concentration =
        concentration_two_sample(inputs.spec.sup_loss, table.n(), table.g(), inputs.k, inputs.delta);

    let disc_term = l_h * disc;
    let rob_synth_term = l_h * rob_synth;
    let rob_real_term = l_h * rob_real;
    let total =
        disc_term + rob_synth_term + rob_real_term + synth_loss.mean + reweight + concentration;
    Ok(BoundReport {
        disc_term,
        rob_synth_term,
        rob_real_term,
        synth_loss: synth_loss.mean,
        reweight_term: reweight,
        concentration,
        total,
        population_loss_estimate: population.mean,
        population_loss_se: population.std_err,
        n: table.n(),
        g: table.g(),
        g_total: table.synth_total(),
        k: inputs.k,
        empty_regions: synth_draws.empty_regions + real_draws.empty_regions,
    })
}

/// Region masses under `P_0` and `P_g`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionMeasures {
    /// `p_i = P_0(Z_i)`
    pub p_real: Vec<f64>,
    /// `p_i^g = P_g(Z_i)`
    pub p_synth: Vec<f64>,
}

/// Region frequencies among `n_draws` draws from each population.
pub fn estimate_region_measures(
    partition: &Partition,
    world: &GaussianWorld,
    n_draws: usize,
    seed: u64,
) -> Result<RegionMeasures> {
    check_dim("partition vs world", world.dim(), partition.dim())?;
    let freq = |pop: Population, s: u64| -> Result<Vec<f64>> {
        let draws = world.sample(pop, n_draws, s)?;
        let mut counts = vec![0usize; partition.k()];
        for r in partition.assign_all(&draws.features().collect::<Vec<_>>())? {
            counts[r] += 1;
        }
        Ok(counts.iter().map(|&c| c as f64 / n_draws as f64).collect())
    };
    Ok(RegionMeasures {
        p_real: freq(Population::Real, sub_seed(seed, 0))?,
        p_synth: freq(Population::Synthetic, sub_seed(seed, 1))?,
    })
}

/// Evaluated right-hand side of the measure-weighted bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem2Report {
    /// `L_h Σ p_i^g R_h(S_i, Z_i | P_g)`
    pub rob_synth_term: f64,
    /// `L_h Σ (n_i/n) R_h(S_i, Z_i | P_0)`
    pub rob_real_term: f64,
    pub synth_loss: f64,
    /// `Σ (n_i/n − p_i^g) F(S_i, h)`
    pub reweight_term: f64,
    pub concentration: f64,
    pub total: f64,
    pub population_loss_estimate: f64,
    pub population_loss_se: f64,
    pub empty_regions: usize,
}

#[allow(clippy::too_many_arguments)]
pub fn bound_theorem2(
    model: &SoftmaxModel,
    real: &DataSet,
    partition: &Partition,
    table: &RegionTable,
    measures: &RegionMeasures,
    inputs: &BoundInputs,
    world: &GaussianWorld,
    seed: u64,
) -> Result<Theorem2Report> {
    inputs.validate()?;
    if table.valid_regions().is_empty() {
        return Err(param("no valid region: the real sample set is empty"));
    }
    check_dim("region table vs real data", real.len(), table.n())?;
    check_dim("partition size", partition.k(), table.k())?;
    check_dim("partition size", inputs.k, table.k())?;
    check_dim("region measures", table.k(), measures.p_synth.len())?;

    let l_h = inputs.spec.lipschitz;
    let n = table.n() as f64;
    let valid = table.valid_regions();
    let out_s = residual_outputs(model, real);
    let synth_draws = region_draws(
        model,
        world,
        Population::Synthetic,
        partition,
        valid,
        inputs.mc_samples,
        sub_seed(seed, 1),
    )?;
    let real_draws = region_draws(
        model,
        world,
        Population::Real,
        partition,
        valid,
        inputs.mc_samples,
        sub_seed(seed, 2),
    )?;

    let mut rob_synth = 0.0;
    let mut rob_real = 0.0;
    let mut reweight = 0.0;
    for &r in valid {
        let pg = measures.p_synth[r];
        let wn = table.n_i(r) as f64 / n;
        let s_i = table.real_members(r);
        rob_synth += pg * set_robustness(s_i, &out_s, &synth_draws.outputs[r]);
        rob_real += wn * set_robustness(s_i, &out_s, &real_draws.outputs[r]);
        reweight += (wn - pg) * region_loss(s_i, &out_s);
    }
    let synth_loss = mc_population_loss(
        model,
        world,
        Population::Synthetic,
        &inputs.spec,
        inputs.mc_samples,
        sub_seed(seed, 3),
    )?;
    let population = mc_population_loss(
        model,
        world,
        Population::Real,
        &inputs.spec,
        inputs.mc_samples,
        sub_seed(seed, 4),
    )?;
    let concentration = concentration_one_sample(inputs.spec.sup_loss, table.n(), inputs.k, inputs.delta);
    let rob_synth_term = l_h * rob_synth;
    let rob_real_term = l_h * rob_real;
    Ok(Theorem2Report {
        rob_synth_term,
        rob_real_term,
        synth_loss: synth_loss.mean,
        reweight_term: reweight,
        concentration,
        total: rob_synth_term + rob_real_term + synth_loss.mean + reweight + concentration,
        population_loss_estimate: population.mean,
        population_loss_se: population.std_err,
        empty_regions: synth_draws.empty_regions + real_draws.empty_regions,
    })
}

/// `d̄_h(P, Q)` estimated from `n_draws` independent pairs.
pub fn distribution_discrepancy(
    model: &SoftmaxModel,
    world: &GaussianWorld,
    first: Population,
    second: Population,
    n_draws: usize,
    seed: u64,
) -> Result<Estimate> {
    let a = world.sample(first, n_draws, sub_seed(seed, 0))?;
    let b = world.sample(second, n_draws, sub_seed(seed, 1))?;
    let oa = residual_outputs(model, &a);
    let ob = residual_outputs(model, &b);
    let d: Vec<f64> = oa.iter().zip(&ob).map(|(x, y)| dist(x, y)).collect();
    let (mean, std_err) = mean_and_std_err(&d);
    Ok(Estimate { mean, std_err })
}

/// Both sides of the large-sample corollary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorollaryReport {
    /// `Σ p_i^g F_i(P_0, h)`
    pub lhs: f64,
    /// `F(P_g, h) + L_h [d̄_h(P_0, P_g) + d̄_h(P_0, P_0)]`
    pub rhs: f64,
    /// Combined standard error of `rhs − lhs`.
    pub std_err: f64,
    /// Regions with no `P_0` draw, left out of `lhs`.
    pub skipped_regions: usize,
}

impl CorollaryReport {
    pub fn holds(&self) -> bool {
        self.lhs <= self.rhs + VIOLATION_SE * self.std_err
    }
}

pub fn bound_corollary(
    model: &SoftmaxModel,
    partition: &Partition,
    world: &GaussianWorld,
    inputs: &BoundInputs,
    seed: u64,
) -> Result<CorollaryReport> {
    inputs.validate()?;
    let k = partition.k();
    let n_draws = inputs.mc_samples;
    let measures = estimate_region_measures(partition, world, n_draws, sub_seed(seed, 0))?;

    let draws = world.sample(Population::Real, n_draws, sub_seed(seed, 1))?;
    let mut sums = vec![0.0; k];
    let mut sq = vec![0.0; k];
    let mut counts = vec![0usize; k];
    for s in draws.samples() {
        let r = partition.assign(&s.features)?;
        let l = inputs.spec.loss(&model.forward_unchecked(&s.features).probs, s.label);
        sums[r] += l;
        sq[r] += l * l;
        counts[r] += 1;
    }
    let mut lhs = 0.0;
    let mut var = 0.0;
    let mut skipped_regions = 0;
    for r in 0..k {
        if counts[r] == 0 {
            if measures.p_synth[r] > 0.0 {
                skipped_regions += 1;
            }
            continue;
        }
        let c = counts[r] as f64;
        let mean = sums[r] / c;
        lhs += measures.p_synth[r] * mean;
        if counts[r] > 1 {
            let v = (sq[r] - c * mean * mean).max(0.0) / (c - 1.0);
            var += measures.p_synth[r].powi(2) * v / c;
        }
    }
    if skipped_regions > 0 {
        log::warn!("{skipped_regions} region(s) had no P_0 draw and were skipped");
    }

    let synth_loss = mc_population_loss(
        model,
        world,
        Population::Synthetic,
        &inputs.spec,
        n_draws,
        sub_seed(seed, 2),
    )?;
    let d_cross = distribution_discrepancy(
        model,
        world,
        Population::Real,
        Population::Synthetic,
        n_draws,
        sub_seed(seed, 3),
    )?;
    let d_self = distribution_discrepancy(
        model,
        world,
        Population::Real,
        Population::Real,
        n_draws,
        sub_seed(seed, 4),
    )?;
    let l_h = inputs.spec.lipschitz;
    let rhs = synth_loss.mean + l_h * (d_cross.mean + d_self.mean);
    let std_err = (var
        + synth_loss.std_err.powi(2)
        + (l_h * d_cross.std_err).powi(2)
        + (l_h * d_self.std_err).powi(2))
    .sqrt();
    Ok(CorollaryReport {
        lhs,
        rhs,
        std_err,
        skipped_regions,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    /// `F(P) ≤ F(S) + L Σ (n_i/n) R_h(S_i, Z_i | P) + conc`
    Upper,
    /// `F(S) ≤ F(P) + L Σ (n_i/n) R_h(S_i, Z_i | P) + conc`
    Lower,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SingleDistributionReport {
    pub direction: Direction,
    /// `F(S, h)`
    pub empirical_loss: f64,
    /// Monte Carlo `F(P, h)`.
    pub population_loss_estimate: f64,
    pub population_loss_se: f64,
    /// `L Σ (n_i/n) R_h(S_i, Z_i | P)`
    pub robustness_term: f64,
    pub concentration: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub empty_regions: usize,
}

impl SingleDistributionReport {
    pub fn slack(&self) -> f64 {
        self.rhs - self.lhs
    }

    pub fn violated(&self) -> bool {
        self.lhs - self.rhs > VIOLATION_SE * self.population_loss_se
    }
}

/// The one-sample bound for `S` drawn i.i.d. from `population`, in either direction.
#[allow(clippy::too_many_arguments)]
pub fn bound_single_distribution(
    model: &SoftmaxModel,
    sample: &DataSet,
    partition: &Partition,
    table: &RegionTable,
    world: &GaussianWorld,
    population: Population,
    inputs: &BoundInputs,
    direction: Direction,
    seed: u64,
) -> Result<SingleDistributionReport> {
    inputs.validate()?;
    if sample.is_empty() {
        return Err(param("the one-sample bound needs a non-empty sample"));
    }
    check_dim("region table vs sample", sample.len(), table.n())?;
    check_dim("partition size", partition.k(), table.k())?;
    check_dim("partition size", inputs.k, table.k())?;

    let out = residual_outputs(model, sample);
    let n = sample.len() as f64;
    let empirical = out.iter().map(|o| crate::linalg::norm(o)).sum::<f64>() / n;
    let valid = table.valid_regions();
    let draws = region_draws(
        model,
        world,
        population,
        partition,
        valid,
        inputs.mc_samples,
        sub_seed(seed, 1),
    )?;
    let mut rob = 0.0;
    for &r in valid {
        rob += table.n_i(r) as f64 / n * set_robustness(table.real_members(r), &out, &draws.outputs[r]);
    }
    let robustness_term = inputs.spec.lipschitz * rob;
    let pop = mc_population_loss(
        model,
        world,
        population,
        &inputs.spec,
        inputs.mc_samples,
        sub_seed(seed, 2),
    )?;
    let concentration = concentration_one_sample(inputs.spec.sup_loss, sample.len(), inputs.k, inputs.delta);
    let (lhs, rhs) = match direction {
        Direction::Upper => (pop.mean, empirical + robustness_term + concentration),
        Direction::Lower => (empirical, pop.mean + robustness_term + concentration),
    };
    Ok(SingleDistributionReport {
        direction,
        empirical_loss: empirical,
        population_loss_estimate: pop.mean,
        population_loss_se: pop.std_err,
        robustness_term,
        concentration,
        lhs,
        rhs,
        empty_regions: draws.empty_regions,
    })
}

/// Which bound a verification campaign checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BoundKind {
    Theorem1,
    SingleUpper,
    SingleLower,
}

/// Outcome of one verification trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub seed: u64,
    /// `None` when the theorem's assumption failed and the trial was skipped.
    pub bound: Option<f64>,
    pub population_loss: Option<f64>,
    pub population_se: Option<f64>,
    pub slack: Option<f64>,
    pub violated: bool,
    pub skip_reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub kind: BoundKind,
    pub trials: usize,
    pub evaluated: usize,
    pub skipped: usize,
    pub violations: usize,
    /// `violations / evaluated` (0 when nothing was evaluated).
    pub rate: f64,
    pub slack_min: f64,
    pub slack_q05: f64,
    pub slack_median: f64,
    pub slack_q95: f64,
    pub slack_max: f64,
    pub slack_mean: f64,
    pub records: Vec<TrialRecord>,
}

/// Runs `trials` independent trials with seeds `seed + index`, evaluating
/// `kind` against a Monte Carlo population loss in each.
///
/// Trials run in parallel; the report does not depend on scheduling.
pub fn verify_bound(
    spec: &ExperimentSpec,
    kind: BoundKind,
    trials: usize,
    seed: u64,
) -> Result<VerificationReport> {
    if trials == 0 {
        return Err(param("trials must be at least 1"));
    }
    spec.validate()?;
    let records: Vec<TrialRecord> = (0..trials)
        .into_par_iter()
        .map(|i| run_verification_trial(spec, kind, i, seed.wrapping_add(i as u64)))
        .collect::<Result<_>>()?;

    let slacks: Vec<f64> = records.iter().filter_map(|r| r.slack).collect();
    let evaluated = slacks.len();
    let violations = records.iter().filter(|r| r.violated).count();
    let mut sorted = slacks.clone();
    sorted.sort_by(f64::total_cmp);
    let q = |p: f64| quantile(&sorted, p);
    Ok(VerificationReport {
        kind,
        trials,
        evaluated,
        skipped: trials - evaluated,
        violations,
        rate: if evaluated == 0 {
            0.0
        } else {
            violations as f64 / evaluated as f64
        },
        slack_min: q(0.0),
        slack_q05: q(0.05),
        slack_median: q(0.5),
        slack_q95: q(0.95),
        slack_max: q(1.0),
        slack_mean: if evaluated == 0 {
            f64::NAN
        } else {
            slacks.iter().sum::<f64>() / evaluated as f64
        },
        records,
    })
}

fn run_verification_trial(
    spec: &ExperimentSpec,
    kind: BoundKind,
    trial: usize,
    seed: u64,
) -> Result<TrialRecord> {
    let out = run_trial(spec, seed)?;
    let bound_seed = sub_seed(seed, 100);
    let mut record = TrialRecord {
        trial,
        seed,
        bound: None,
        population_loss: None,
        population_se: None,
        slack: None,
        violated: false,
        skip_reason: None,
    };
    let (lhs, rhs, se) = match kind {
        BoundKind::Theorem1 => {
            let table = region_table(&out.partition, &out.real, &out.synth)?;
            match bound_theorem1(
                &out.model,
                &out.real,
                &out.synth,
                &out.partition,
                &table,
                &spec.bound,
                &out.world,
                bound_seed,
            ) {
                Ok(r) => (r.population_loss_estimate, r.total, r.population_loss_se),
                Err(Error::Precondition { region, reason }) => {
                    record.skip_reason = Some(format!("region {region}: {reason}"));
                    return Ok(record);
                }
                Err(e) => return Err(e),
            }
        }
        BoundKind::SingleUpper | BoundKind::SingleLower => {
            let empty = DataSet::new(Vec::new(), out.real.dim(), out.real.num_classes())?;
            let table = region_table(&out.partition, &out.real, &empty)?;
            let direction = if kind == BoundKind::SingleUpper {
                Direction::Upper
            } else {
                Direction::Lower
            };
            let r = bound_single_distribution(
                &out.model,
                &out.real,
                &out.partition,
                &table,
                &out.world,
                Population::Real,
                &spec.bound,
                direction,
                bound_seed,
            )?;
            (r.lhs, r.rhs, r.population_loss_se)
        }
    };
    record.bound = Some(rhs);
    record.population_loss = Some(lhs);
    record.population_se = Some(se);
    record.slack = Some(rhs - lhs);
    record.violated = lhs - rhs > VIOLATION_SE * se;
    Ok(record)
}

/// Linear-interpolation quantile of sorted values; NaN when empty.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    match sorted.len() {
        0 => f64::NAN,
        1 => sorted[0],
        m => {
            let pos = p * (m - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
        }
    }
}
