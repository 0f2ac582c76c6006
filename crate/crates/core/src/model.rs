//! Softmax classifiers with hand-derived gradients.
//!
//! Parameters live in one flat vector so that optimizers, gradient checks and
//! serialization all work on the same layout:
//!
//! - linear (`hidden == 0`): `W[C×d]`, `b[C]`
//! - one hidden tanh layer: `W1[H×d]`, `b1[H]`, `W2[C×H]`, `b2[C]`
//!
//! Matrices are row-major.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, param, Error, Result};

/// Standard deviation of the initial weights.
pub const INIT_WEIGHT_STD: f64 = 0.01;

const MAGIC: &[u8; 4] = b"SBM1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxModel {
    input_dim: usize,
    num_classes: usize,
    hidden: usize,
    params: Vec<f64>,
}

/// Intermediate values of one forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct Forward {
    pub input: Vec<f64>,
    /// tanh activations; empty for linear models.
    pub hidden: Vec<f64>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

pub fn param_count(input_dim: usize, num_classes: usize, hidden: usize) -> usize {
    if hidden == 0 {
        num_classes * input_dim + num_classes
    } else {
        hidden * input_dim + hidden + num_classes * hidden + num_classes
    }
}

impl SoftmaxModel {
    /// Gaussian weights with std [`INIT_WEIGHT_STD`], zero biases.
    pub fn new(input_dim: usize, num_classes: usize, hidden: usize, seed: u64) -> Result<Self> {
        let mut model = Self::zeros(input_dim, num_classes, hidden)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_WEIGHT_STD).expect("valid std");
        for range in model.weight_ranges() {
            for p in &mut model.params[range] {
                *p = rng.sample(normal);
            }
        }
        Ok(model)
    }

    /// All parameters zero: predicts the uniform distribution everywhere.
    pub fn zeros(input_dim: usize, num_classes: usize, hidden: usize) -> Result<Self> {
        if input_dim == 0 {
            return Err(param("input dimension must be at least 1"));
        }
        if num_classes < 2 {
            return Err(param("a classifier needs at least 2 classes"));
        }
        Ok(Self {
            input_dim,
            num_classes,
            hidden,
            params: vec![0.0; param_count(input_dim, num_classes, hidden)],
        })
    }

    pub fn from_params(
        input_dim: usize,
        num_classes: usize,
        hidden: usize,
        params: Vec<f64>,
    ) -> Result<Self> {
        let mut m = Self::zeros(input_dim, num_classes, hidden)?;
        check_dim("model parameters", m.params.len(), params.len())?;
        if params.iter().any(|p| !p.is_finite()) {
            return Err(param("model parameters must be finite"));
        }
        m.params = params;
        Ok(m)
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    #[allow(clippy::single_range_in_vec_init)]
    fn weight_ranges(&self) -> Vec<std::ops::Range<usize>> {
        let (d, c, h) = (self.input_dim, self.num_classes, self.hidden);
        if h == 0 {
            vec![0..c * d]
        } else {
            let w2 = h * d + h;
            vec![0..h * d, w2..w2 + c * h]
        }
    }

    /// Class probabilities for `x`.
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim("predict", self.input_dim, x.len())?;
        Ok(self.forward_unchecked(x).probs)
    }

    pub fn forward(&self, x: &[f64]) -> Result<Forward> {
        check_dim("forward", self.input_dim, x.len())?;
        Ok(self.forward_unchecked(x))
    }

    pub(crate) fn forward_unchecked(&self, x: &[f64]) -> Forward {
        let (d, c, h) = (self.input_dim, self.num_classes, self.hidden);
        let p = &self.params;
        let (hidden, logits) = if h == 0 {
            let logits: Vec<f64> = (0..c)
                .map(|k| affine(&p[k * d..(k + 1) * d], p[c * d + k], x))
                .collect();
            (Vec::new(), logits)
        } else {
            let b1 = h * d;
            let w2 = b1 + h;
            let b2 = w2 + c * h;
            let act: Vec<f64> = (0..h)
                .map(|j| affine(&p[j * d..(j + 1) * d], p[b1 + j], x).tanh())
                .collect();
            let logits: Vec<f64> = (0..c)
                .map(|k| affine(&p[w2 + k * h..w2 + (k + 1) * h], p[b2 + k], &act))
                .collect();
            (act, logits)
        };
        let probs = softmax(&logits);
        Forward {
            input: x.to_vec(),
            hidden,
            logits,
            probs,
        }
    }

    /// Adds `∂L/∂θ` to `grad`, given `∂L/∂logits` for one forward pass.
    pub fn backward_logits(&self, fwd: &Forward, dlogits: &[f64], grad: &mut [f64]) {
        let (d, c, h) = (self.input_dim, self.num_classes, self.hidden);
        let x = &fwd.input;
        if h == 0 {
            for k in 0..c {
                let gk = dlogits[k];
                if gk == 0.0 {
                    continue;
                }
                for (g, xi) in grad[k * d..(k + 1) * d].iter_mut().zip(x) {
                    *g += gk * xi;
                }
                grad[c * d + k] += gk;
            }
            return;
        }
        let p = &self.params;
        let b1 = h * d;
        let w2 = b1 + h;
        let b2 = w2 + c * h;
        let mut dact = vec![0.0; h];
        for k in 0..c {
            let gk = dlogits[k];
            if gk == 0.0 {
                continue;
            }
            for j in 0..h {
                grad[w2 + k * h + j] += gk * fwd.hidden[j];
                dact[j] += gk * p[w2 + k * h + j];
            }
            grad[b2 + k] += gk;
        }
        for j in 0..h {
            let dpre = dact[j] * (1.0 - fwd.hidden[j] * fwd.hidden[j]);
            if dpre == 0.0 {
                continue;
            }
            for (g, xi) in grad[j * d..(j + 1) * d].iter_mut().zip(x) {
                *g += dpre * xi;
            }
            grad[b1 + j] += dpre;
        }
    }

    /// Adds `∂L/∂θ` to `grad`, given `∂L/∂p` with respect to the output probabilities.
    pub fn backward_probs(&self, fwd: &Forward, dprobs: &[f64], grad: &mut [f64]) {
        let dlogits = softmax_backward(&fwd.probs, dprobs);
        self.backward_logits(fwd, &dlogits, grad);
    }

    /// Serializes as `SBM1`, then `d`, `C`, `H` as little-endian `u64`, then
    /// the parameters as little-endian `f64` in layout order.
    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        for dim in [self.input_dim, self.num_classes, self.hidden] {
            w.write_all(&(dim as u64).to_le_bytes())?;
        }
        for p in &self.params {
            w.write_all(&p.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 24 + 8 * self.params.len());
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let io = |e: std::io::Error| Error::Format(e.to_string());
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("bad header {magic:?}")));
        }
        let mut word = [0u8; 8];
        let mut dims = [0usize; 3];
        for d in &mut dims {
            r.read_exact(&mut word).map_err(io)?;
            *d = usize::try_from(u64::from_le_bytes(word))
                .map_err(|_| Error::Format("dimension overflows usize".into()))?;
        }
        let count = param_count(dims[0], dims[1], dims[2]);
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            r.read_exact(&mut word).map_err(io)?;
            params.push(f64::from_le_bytes(word));
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest).map_err(io)?;
        if !rest.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes", rest.len())));
        }
        Self::from_params(dims[0], dims[1], dims[2], params)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::read_from(bytes)
    }
}

fn affine(w: &[f64], b: f64, x: &[f64]) -> f64 {
    w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + b
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Pulls `∂L/∂p` back through the softmax: `∂L/∂z = p ⊙ (∂L/∂p − ⟨p, ∂L/∂p⟩)`.
pub fn softmax_backward(probs: &[f64], dprobs: &[f64]) -> Vec<f64> {
    let inner: f64 = probs.iter().zip(dprobs).map(|(p, d)| p * d).sum();
    probs
        .iter()
        .zip(dprobs)
        .map(|(p, d)| p * (d - inner))
        .collect()
}

/// Worst relative disagreement between an analytic gradient and central
/// differences with step `eps`, over every parameter.
///
/// `loss_fn` returns `(loss, gradient)` for a model. The relative error of a
/// coordinate is `|a − n| / max(|a|, |n|, 1e-8)`, so coordinates where both
/// gradients vanish count as agreeing.
pub fn finite_diff_check<F>(model: &SoftmaxModel, loss_fn: F, eps: f64) -> Result<f64>
where
    F: Fn(&SoftmaxModel) -> Result<(f64, Vec<f64>)>,
{
    if eps.is_nan() || eps <= 0.0 {
        return Err(param("finite-difference step must be positive"));
    }
    let (_, analytic) = loss_fn(model)?;
    check_dim("analytic gradient", model.param_count(), analytic.len())?;
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    for (i, &a) in analytic.iter().enumerate() {
        let orig = probe.params[i];
        probe.params[i] = orig + eps;
        let (up, _) = loss_fn(&probe)?;
        probe.params[i] = orig - eps;
        let (down, _) = loss_fn(&probe)?;
        probe.params[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, proptest};
    use rand::Rng;

    #[test]
    fn init_is_deterministic() {
        let a = SoftmaxModel::new(4, 3, 5, 42).unwrap();
        let b = SoftmaxModel::new(4, 3, 5, 42).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, SoftmaxModel::new(4, 3, 5, 43).unwrap());
    }

    #[test]
    fn init_has_zero_biases() {
        let m = SoftmaxModel::new(2, 3, 8, 1).unwrap();
        let p = m.params();
        assert!(p[16..24].iter().all(|&b| b == 0.0));
        assert!(p[48..51].iter().all(|&b| b == 0.0));
        assert!(p[..16].iter().all(|&w| w != 0.0 && w.abs() < 0.1));
    }

    #[test]
    fn parameter_counts() {
        assert_eq!(SoftmaxModel::new(5, 4, 0, 0).unwrap().param_count(), 4 * 5 + 4);
        assert_eq!(SoftmaxModel::new(2, 3, 8, 0).unwrap().param_count(), 51);
    }

    #[test]
    fn invalid_dimensions() {
        assert!(SoftmaxModel::new(0, 2, 0, 0).is_err());
        assert!(SoftmaxModel::new(2, 1, 0, 0).is_err());
        assert!(SoftmaxModel::from_params(2, 2, 0, vec![0.0; 5]).is_err());
    }

    #[test]
    fn zero_model_is_uniform() {
        let m = SoftmaxModel::zeros(3, 4, 2).unwrap();
        assert_eq!(m.predict(&[1.0, -2.0, 3.0]).unwrap(), vec![0.25; 4]);
        assert!(matches!(m.predict(&[1.0]), Err(Error::Shape { .. })));
    }

    #[test]
    fn two_class_linear_model_is_a_sigmoid() {
        // logits z0 = 1.5x + 0.2, z1 = -0.5x - 0.1 at x = 0.7
        let m = SoftmaxModel::from_params(1, 2, 0, vec![1.5, -0.5, 0.2, -0.1]).unwrap();
        let p = m.predict(&[0.7]).unwrap();
        let expected = 0.845_534_734_916_465_2; // 1 / (1 + exp(-(z0 - z1)))
        assert!((p[0] - expected).abs() < 1e-15);
        assert!((p[1] - (1.0 - expected)).abs() < 1e-15);
    }

    #[test]
    fn softmax_is_shift_invariant_and_stable() {
        let z = [1.0, -3.0, 2.5];
        let a = softmax(&z);
        let b = softmax(&z.map(|v| v + 1000.0));
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-15);
        }
        let big = softmax(&[1e300, 0.0]);
        assert_eq!(big, vec![1.0, 0.0]);
    }

    #[test]
    fn serialization_layout() {
        let m = SoftmaxModel::new(2, 3, 4, 9).unwrap();
        let bytes = m.to_bytes();
        assert_eq!(&bytes[..4], b"SBM1");
        assert_eq!(u64::from_le_bytes(bytes[4..12].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(bytes[12..20].try_into().unwrap()), 3);
        assert_eq!(u64::from_le_bytes(bytes[20..28].try_into().unwrap()), 4);
        assert_eq!(bytes.len(), 28 + 8 * m.param_count());
        assert_eq!(
            f64::from_le_bytes(bytes[28..36].try_into().unwrap()),
            m.params()[0]
        );
        assert_eq!(SoftmaxModel::from_bytes(&bytes).unwrap(), m);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(SoftmaxModel::from_bytes(&bad), Err(Error::Format(_))));
        assert!(SoftmaxModel::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(SoftmaxModel::from_bytes(&long).is_err());
    }

    fn cross_entropy(m: &SoftmaxModel, xs: &[Vec<f64>], ys: &[usize]) -> Result<(f64, Vec<f64>)> {
        let mut grad = vec![0.0; m.param_count()];
        let mut loss = 0.0;
        for (x, &y) in xs.iter().zip(ys) {
            let f = m.forward(x)?;
            loss -= f.probs[y].ln();
            let mut dz = f.probs.clone();
            dz[y] -= 1.0;
            m.backward_logits(&f, &dz, &mut grad);
        }
        let n = xs.len() as f64;
        Ok((loss / n, grad.into_iter().map(|g| g / n).collect()))
    }

    #[test]
    fn cross_entropy_gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for hidden in [0, 6] {
            let mut m = SoftmaxModel::new(3, 4, hidden, 5).unwrap();
            for p in m.params_mut() {
                *p = rng.random_range(-1.0..1.0);
            }
            let xs: Vec<Vec<f64>> = (0..10)
                .map(|_| (0..3).map(|_| rng.random_range(-2.0..2.0)).collect())
                .collect();
            let ys: Vec<usize> = (0..10).map(|_| rng.random_range(0..4)).collect();
            let err = finite_diff_check(&m, |m| cross_entropy(m, &xs, &ys), 1e-5).unwrap();
            assert!(err <= 1e-4, "hidden {hidden}: {err}");
        }
    }

    #[test]
    fn probability_gradient_route_matches_logit_route() {
        let m = SoftmaxModel::new(2, 3, 4, 1).unwrap();
        let f = m.forward(&[0.3, -0.8]).unwrap();
        // L = -ln p_1 so dL/dp = -1/p_1 e_1 and dL/dz = p - e_1
        let mut dp = vec![0.0; 3];
        dp[1] = -1.0 / f.probs[1];
        let mut via_p = vec![0.0; m.param_count()];
        m.backward_probs(&f, &dp, &mut via_p);
        let mut dz = f.probs.clone();
        dz[1] -= 1.0;
        let mut via_z = vec![0.0; m.param_count()];
        m.backward_logits(&f, &dz, &mut via_z);
        for (a, b) in via_p.iter().zip(&via_z) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_loss_has_zero_gradients() {
        let m = SoftmaxModel::new(2, 2, 3, 0).unwrap();
        let err = finite_diff_check(&m, |m| Ok((7.0, vec![0.0; m.param_count()])), 1e-5).unwrap();
        assert_eq!(err, 0.0);
        assert!(finite_diff_check(&m, |m| Ok((7.0, vec![0.0; m.param_count()])), 0.0).is_err());
    }

    proptest! {
        #[test]
        fn outputs_lie_on_the_simplex(
            params in proptest::collection::vec(-20.0f64..20.0, 51),
            x in proptest::collection::vec(-50.0f64..50.0, 2),
        ) {
            let m = SoftmaxModel::from_params(2, 3, 8, params).unwrap();
            let p = m.predict(&x).unwrap();
            prop_assert!(p.iter().all(|&v| v >= 0.0));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }

        #[test]
        fn logit_shift_leaves_output_unchanged(
            z in proptest::collection::vec(-30.0f64..30.0, 2..6),
            c in -100.0f64..100.0,
        ) {
            let a = softmax(&z);
            let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
            let b = softmax(&shifted);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }
    }
}
