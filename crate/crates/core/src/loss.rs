//! Output-space distances and the regularized training loss.
//!
//! The composite loss for a real set `S`, a synthetic set `G` and a region
//! table is
//!
//! ```text
//! L = λ F(S) + F(G)
//!   + λ1 Σ_{i∈T_S} (g_i/g) · 1/(g_i n_i) · Σ_{s∈S_i, u∈G_i} ‖h(s) − h(u)‖
//!   + λ2 (1/g) Σ_{i∈T_S} (1/g_i) · Σ_{u≠v ∈ G_i} ‖h(u) − h(v)‖
//! ```
//!
//! where the robustness sum runs over ordered pairs of distinct samples and
//! `g` counts synthetic samples in valid regions only. Every term has an exact
//! analytic gradient; the `‖·‖` terms use subgradient 0 where two outputs
//! coincide.

use serde::{Deserialize, Serialize};

use crate::data::DataSet;
use crate::error::{check_dim, param, Error, Result};
use crate::linalg::dist;
use crate::model::{Forward, SoftmaxModel};
use crate::partition::RegionTable;

/// Floor applied to the true-class probability inside `−ln`.
pub const CE_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BaseLoss {
    /// `−ln max(h(x)[y], 1e-12)`
    CrossEntropy,
    /// `‖h(x) − e_y‖₂`
    L2Residual,
}

/// Which vector the distance terms compare.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OutputMode {
    /// The probability vector `h(x)`.
    Raw,
    /// The residual `h(x) − e_y`.
    Residual,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight `λ` of the real-data loss.
    pub lambda_real: f64,
    /// Weight `λ1` of the discrepancy regularizer.
    pub lambda_disc: f64,
    /// Weight `λ2` of the robustness regularizer.
    pub lambda_rob: f64,
    pub base_loss: BaseLoss,
    pub output_mode: OutputMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_real: 4.0,
            lambda_disc: 0.1,
            lambda_rob: 1.0,
            base_loss: BaseLoss::CrossEntropy,
            output_mode: OutputMode::Raw,
        }
    }
}

impl LossConfig {
    /// The same weights with both regularizers switched off.
    pub fn without_regularizers(self) -> Self {
        Self {
            lambda_disc: 0.0,
            lambda_rob: 0.0,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_real", self.lambda_real),
            ("lambda_disc", self.lambda_disc),
            ("lambda_rob", self.lambda_rob),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(param(format!("{name} must be finite and non-negative")));
            }
        }
        Ok(())
    }
}

/// A bounded loss with known Lipschitz constant and supremum.
///
/// The only supported loss is the L2 residual `‖h(x) − e_y‖₂`, which is
/// 1-Lipschitz in the residual output and bounded by `√2` on the simplex.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LipschitzLossSpec {
    /// `L_h`
    pub lipschitz: f64,
    /// `C_h`
    pub sup_loss: f64,
}

impl LipschitzLossSpec {
    pub fn l2_residual() -> Self {
        Self {
            lipschitz: 1.0,
            sup_loss: std::f64::consts::SQRT_2,
        }
    }

    pub fn loss(&self, probs: &[f64], label: usize) -> f64 {
        sample_loss(probs, label, BaseLoss::L2Residual)
    }
}

impl Default for LipschitzLossSpec {
    fn default() -> Self {
        Self::l2_residual()
    }
}

pub fn sample_loss(probs: &[f64], label: usize, base: BaseLoss) -> f64 {
    match base {
        BaseLoss::CrossEntropy => -probs[label].max(CE_CLAMP).ln(),
        BaseLoss::L2Residual => residual_norm(probs, label),
    }
}

fn residual_norm(probs: &[f64], label: usize) -> f64 {
    probs
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let r = if k == label { p - 1.0 } else { *p };
            r * r
        })
        .sum::<f64>()
        .sqrt()
}

/// The vector compared by the distance terms for one prediction.
pub fn compared_output(probs: &[f64], label: usize, mode: OutputMode) -> Vec<f64> {
    let mut out = probs.to_vec();
    if mode == OutputMode::Residual {
        out[label] -= 1.0;
    }
    out
}

/// Mean per-sample loss of `model` on `data`.
pub fn empirical_loss(model: &SoftmaxModel, data: &DataSet, base: BaseLoss) -> Result<f64> {
    if data.is_empty() {
        return Err(param("empirical loss of an empty dataset"));
    }
    check_dim("empirical loss", model.input_dim(), data.dim())?;
    let total: f64 = data
        .samples()
        .iter()
        .map(|s| sample_loss(&model.forward_unchecked(&s.features).probs, s.label, base))
        .sum();
    Ok(total / data.len() as f64)
}

/// Mean Euclidean distance over all cross pairs of two output sets.
pub fn discrepancy<O: AsRef<[f64]>>(outputs_g: &[O], outputs_s: &[O]) -> Result<f64> {
    if outputs_g.is_empty() || outputs_s.is_empty() {
        return Err(param("discrepancy needs two non-empty sets"));
    }
    let dim = outputs_g[0].as_ref().len();
    for o in outputs_g.iter().chain(outputs_s) {
        check_dim("discrepancy", dim, o.as_ref().len())?;
    }
    let mut total = 0.0;
    for u in outputs_g {
        for s in outputs_s {
            total += dist(u.as_ref(), s.as_ref());
        }
    }
    Ok(total / (outputs_g.len() * outputs_s.len()) as f64)
}

/// Mean over points of the mean distance to the other points of the set;
/// zero for sets with fewer than two points.
pub fn empirical_robustness<O: AsRef<[f64]>>(outputs: &[O]) -> f64 {
    let m = outputs.len();
    if m < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 0..m {
        for j in i + 1..m {
            total += dist(outputs[i].as_ref(), outputs[j].as_ref());
        }
    }
    2.0 * total / (m * (m - 1)) as f64
}

/// The two regularizers without their `λ` weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegularizerValues {
    /// `Σ_{i∈T_S} (g_i/g) d̄(G_i, S_i)`
    pub discrepancy: f64,
    /// `(1/g) Σ_{i∈T_S} (1/g_i) Σ_{u≠v ∈ G_i} ‖h(u) − h(v)‖`
    pub robustness: f64,
}

/// Unweighted regularizer values on precomputed compared outputs. Both are 0
/// when no synthetic sample lies in a valid region.
pub fn regularizer_values<O: AsRef<[f64]>>(
    table: &RegionTable,
    outputs_real: &[O],
    outputs_synth: &[O],
) -> Result<RegularizerValues> {
    table.check_consistent(outputs_real.len(), outputs_synth.len())?;
    let mut out = RegularizerValues {
        discrepancy: 0.0,
        robustness: 0.0,
    };
    let g = table.g();
    if g == 0 {
        return Ok(out);
    }
    let g = g as f64;
    for &r in table.valid_regions() {
        let gi = table.g_i(r);
        if gi == 0 {
            continue;
        }
        let ni = table.n_i(r) as f64;
        let mut cross = 0.0;
        for &s in table.real_members(r) {
            for &u in table.synth_members(r) {
                cross += dist(outputs_real[s].as_ref(), outputs_synth[u].as_ref());
            }
        }
        out.discrepancy += cross / (g * ni);
        let members = table.synth_members(r);
        let mut pairs = 0.0;
        for (a, &u) in members.iter().enumerate() {
            for &v in &members[a + 1..] {
                pairs += dist(outputs_synth[u].as_ref(), outputs_synth[v].as_ref());
            }
        }
        out.robustness += 2.0 * pairs / (g * gi as f64);
    }
    Ok(out)
}

/// Unweighted regularizers of `model` on `(S, G)` under `table`.
pub fn regularizer_metrics(
    model: &SoftmaxModel,
    real: &DataSet,
    synth: &DataSet,
    table: &RegionTable,
    mode: OutputMode,
) -> Result<RegularizerValues> {
    let outs = |d: &DataSet| -> Vec<Vec<f64>> {
        d.samples()
            .iter()
            .map(|s| compared_output(&model.forward_unchecked(&s.features).probs, s.label, mode))
            .collect()
    };
    check_dim("regularizer metrics", model.input_dim(), real.dim())?;
    check_dim("regularizer metrics", model.input_dim(), synth.dim())?;
    regularizer_values(table, &outs(real), &outs(synth))
}

/// The composite loss over all of `S` and `G` and its gradient.
pub fn composite_loss_grad(
    model: &SoftmaxModel,
    real: &DataSet,
    synth: &DataSet,
    table: &RegionTable,
    cfg: &LossConfig,
) -> Result<(f64, Vec<f64>)> {
    table.check_consistent(real.len(), synth.len())?;
    let real_idx: Vec<usize> = (0..real.len()).collect();
    let synth_idx: Vec<usize> = (0..synth.len()).collect();
    loss_grad(
        model,
        real,
        synth,
        &real_idx,
        &synth_idx,
        table,
        cfg,
        Regularization::Composite,
    )
}

/// The synthetic-only loss
/// `F(G) + λ2 (1/|G|) Σ_i (1/g_i) Σ_{u≠v ∈ G_i} ‖h(u) − h(v)‖` over every
/// region holding at least two synthetic samples, and its gradient. Real
/// memberships in `table` are ignored.
pub fn synthetic_only_loss_grad(
    model: &SoftmaxModel,
    synth: &DataSet,
    table: &RegionTable,
    cfg: &LossConfig,
) -> Result<(f64, Vec<f64>)> {
    if synth.is_empty() {
        return Err(param("synthetic-only loss needs at least one synthetic sample"));
    }
    if table.synth_total() != synth.len() {
        return Err(Error::Integrity(format!(
            "region table covers {} synthetic samples, data has {}",
            table.synth_total(),
            synth.len()
        )));
    }
    let synth_idx: Vec<usize> = (0..synth.len()).collect();
    let no_real = DataSet::new(Vec::new(), synth.dim(), synth.num_classes())?;
    loss_grad(
        model,
        &no_real,
        synth,
        &[],
        &synth_idx,
        table,
        cfg,
        Regularization::SyntheticOnly,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Regularization {
    Composite,
    SyntheticOnly,
}

/// Shared loss/gradient routine.
///
/// The empirical terms average over `real_idx` and `synth_idx` (an empty
/// index set contributes 0); the regularizers run over every member of
/// `table`, which must index all of `real` and `synth`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn loss_grad(
    model: &SoftmaxModel,
    real: &DataSet,
    synth: &DataSet,
    real_idx: &[usize],
    synth_idx: &[usize],
    table: &RegionTable,
    cfg: &LossConfig,
    reg: Regularization,
) -> Result<(f64, Vec<f64>)> {
    cfg.validate()?;
    check_dim("loss input dimension", model.input_dim(), synth.dim())?;
    check_dim("loss class count", model.num_classes(), synth.num_classes())?;
    if !real.is_empty() {
        check_dim("loss input dimension", model.input_dim(), real.dim())?;
    }

    let real_fw: Vec<Forward> = real
        .samples()
        .iter()
        .map(|s| model.forward_unchecked(&s.features))
        .collect();
    let synth_fw: Vec<Forward> = synth
        .samples()
        .iter()
        .map(|s| model.forward_unchecked(&s.features))
        .collect();
    let mut real_acc = Accum::new(real_fw.len(), model.num_classes());
    let mut synth_acc = Accum::new(synth_fw.len(), model.num_classes());
    let mut loss = 0.0;

    if !real_idx.is_empty() {
        let w = cfg.lambda_real / real_idx.len() as f64;
        loss += w * empirical_part(real, &real_fw, real_idx, cfg.base_loss, w, &mut real_acc);
    }
    if !synth_idx.is_empty() {
        let w = 1.0 / synth_idx.len() as f64;
        loss += w * empirical_part(synth, &synth_fw, synth_idx, cfg.base_loss, w, &mut synth_acc);
    }

    let cmp = |d: &DataSet, fw: &[Forward]| -> Vec<Vec<f64>> {
        d.samples()
            .iter()
            .zip(fw)
            .map(|(s, f)| compared_output(&f.probs, s.label, cfg.output_mode))
            .collect()
    };
    let needs_regs = cfg.lambda_disc > 0.0 || cfg.lambda_rob > 0.0;
    if needs_regs {
        let real_out = cmp(real, &real_fw);
        let synth_out = cmp(synth, &synth_fw);
        match reg {
            Regularization::Composite => {
                let g = table.g();
                if g > 0 {
                    let g = g as f64;
                    for &r in table.valid_regions() {
                        let gi = table.g_i(r);
                        if gi == 0 {
                            continue;
                        }
                        if cfg.lambda_disc > 0.0 {
                            let w = cfg.lambda_disc / (g * table.n_i(r) as f64);
                            for &s in table.real_members(r) {
                                for &u in table.synth_members(r) {
                                    loss += pair_term(
                                        w,
                                        &real_out[s],
                                        &synth_out[u],
                                        &mut real_acc.dprobs[s],
                                        &mut synth_acc.dprobs[u],
                                    );
                                }
                            }
                        }
                        if cfg.lambda_rob > 0.0 {
                            let w = 2.0 * cfg.lambda_rob / (g * gi as f64);
                            loss += robustness_part(w, table.synth_members(r), &synth_out, &mut synth_acc);
                        }
                    }
                }
            }
            Regularization::SyntheticOnly => {
                if cfg.lambda_rob > 0.0 {
                    let g = synth.len() as f64;
                    for r in 0..table.k() {
                        let gi = table.g_i(r);
                        if gi < 2 {
                            continue;
                        }
                        let w = 2.0 * cfg.lambda_rob / (g * gi as f64);
                        loss += robustness_part(w, table.synth_members(r), &synth_out, &mut synth_acc);
                    }
                }
            }
        }
    }

    let mut grad = vec![0.0; model.param_count()];
    real_acc.backprop(model, &real_fw, &mut grad);
    synth_acc.backprop(model, &synth_fw, &mut grad);
    Ok((loss, grad))
}

/// Per-sample gradient accumulators: `∂L/∂p` and a direct `∂L/∂logits` part.
struct Accum {
    dprobs: Vec<Vec<f64>>,
    dlogits: Vec<Vec<f64>>,
    touched: Vec<bool>,
}

impl Accum {
    fn new(len: usize, classes: usize) -> Self {
        Self {
            dprobs: vec![vec![0.0; classes]; len],
            dlogits: vec![vec![0.0; classes]; len],
            touched: vec![false; len],
        }
    }

    fn backprop(&self, model: &SoftmaxModel, fw: &[Forward], grad: &mut [f64]) {
        for (i, f) in fw.iter().enumerate() {
            let any_p = self.dprobs[i].iter().any(|&v| v != 0.0);
            if !any_p && !self.touched[i] {
                continue;
            }
            let mut dz = crate::model::softmax_backward(&f.probs, &self.dprobs[i]);
            for (a, b) in dz.iter_mut().zip(&self.dlogits[i]) {
                *a += b;
            }
            model.backward_logits(f, &dz, grad);
        }
    }
}

/// Adds the gradient of `weight · Σ_{i∈idx} ℓ(h, z_i)` and returns the unweighted sum.
fn empirical_part(
    data: &DataSet,
    fw: &[Forward],
    idx: &[usize],
    base: BaseLoss,
    weight: f64,
    acc: &mut Accum,
) -> f64 {
    let mut total = 0.0;
    for &i in idx {
        let y = data.samples()[i].label;
        let p = &fw[i].probs;
        total += sample_loss(p, y, base);
        match base {
            BaseLoss::CrossEntropy => {
                // d(−ln p_y)/dz = p − e_y, unless the clamp is active.
                if p[y] >= CE_CLAMP {
                    for (k, (dz, pk)) in acc.dlogits[i].iter_mut().zip(p).enumerate() {
                        *dz += weight * (pk - if k == y { 1.0 } else { 0.0 });
                    }
                    acc.touched[i] = true;
                }
            }
            BaseLoss::L2Residual => {
                let r = residual_norm(p, y);
                if r > 0.0 {
                    for (k, (dp, pk)) in acc.dprobs[i].iter_mut().zip(p).enumerate() {
                        let res = if k == y { pk - 1.0 } else { *pk };
                        *dp += weight * res / r;
                    }
                }
            }
        }
    }
    total
}

/// `w ‖a − b‖`, adding its gradient with respect to both outputs.
fn pair_term(w: f64, a: &[f64], b: &[f64], da: &mut [f64], db: &mut [f64]) -> f64 {
    let d = dist(a, b);
    if d > 0.0 {
        for k in 0..a.len() {
            let gk = w * (a[k] - b[k]) / d;
            da[k] += gk;
            db[k] -= gk;
        }
    }
    w * d
}

/// `w Σ_{unordered pairs} ‖·‖` over `members` (callers double `w` for ordered pairs).
fn robustness_part(w: f64, members: &[usize], outs: &[Vec<f64>], acc: &mut Accum) -> f64 {
    let mut total = 0.0;
    for (a, &u) in members.iter().enumerate() {
        for &v in &members[a + 1..] {
            let d = dist(&outs[u], &outs[v]);
            if d > 0.0 {
                for (k, (a, b)) in outs[u].iter().zip(&outs[v]).enumerate() {
                    let gk = w * (a - b) / d;
                    acc.dprobs[u][k] += gk;
                    acc.dprobs[v][k] -= gk;
                }
            }
            total += w * d;
        }
    }
    total
}
