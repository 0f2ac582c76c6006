//! Labeled samples and the Gaussian worlds they are drawn from.
//!
//! A [`GaussianWorld`] holds a true distribution `P0` (class-conditional
//! isotropic Gaussians) and a synthetic distribution `P_g` obtained by pushing
//! `P0` through a [`GapSpec`]: every synthetic class mean is shifted, the
//! variance is scaled, and labels are flipped at a fixed rate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, param, Error, Result};
use crate::linalg::{dot, norm, sq_dist};

/// Where a sample came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Source {
    Real,
    Synthetic,
}

/// Which of the two world distributions to draw from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Population {
    /// The true distribution `P0`.
    Real,
    /// The generator-induced distribution `P_g`.
    Synthetic,
}

impl Population {
    fn source(self) -> Source {
        match self {
            Population::Real => Source::Real,
            Population::Synthetic => Source::Synthetic,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: usize,
    pub source: Source,
}

/// An ordered collection of samples sharing a feature dimension and class count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSet {
    samples: Vec<Sample>,
    dim: usize,
    num_classes: usize,
}

impl DataSet {
    pub fn new(samples: Vec<Sample>, dim: usize, num_classes: usize) -> Result<Self> {
        if dim == 0 {
            return Err(param("feature dimension must be at least 1"));
        }
        if num_classes < 2 {
            return Err(param("a dataset needs at least 2 classes"));
        }
        for s in &samples {
            check_dim("dataset sample", dim, s.features.len())?;
            if s.label >= num_classes {
                return Err(param(format!(
                    "label {} out of range for {} classes",
                    s.label, num_classes
                )));
            }
            if s.features.iter().any(|x| !x.is_finite()) {
                return Err(param("sample features must be finite"));
            }
        }
        Ok(Self {
            samples,
            dim,
            num_classes,
        })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn features(&self) -> impl Iterator<Item = &[f64]> {
        self.samples.iter().map(|s| s.features.as_slice())
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    pub fn source_count(&self, source: Source) -> usize {
        self.samples.iter().filter(|s| s.source == source).count()
    }

    /// A new dataset holding the samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> DataSet {
        DataSet {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            dim: self.dim,
            num_classes: self.num_classes,
        }
    }
}

/// Concatenates `real` and `synth`, real samples first.
pub fn merge(real: &DataSet, synth: &DataSet) -> Result<DataSet> {
    check_dim("merge feature dimension", real.dim, synth.dim)?;
    check_dim("merge class count", real.num_classes, synth.num_classes)?;
    let mut samples = Vec::with_capacity(real.len() + synth.len());
    samples.extend_from_slice(&real.samples);
    samples.extend_from_slice(&synth.samples);
    Ok(DataSet {
        samples,
        dim: real.dim,
        num_classes: real.num_classes,
    })
}

/// Parametric real-to-synthetic distribution gap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapSpec {
    /// Added to every synthetic class mean.
    pub mean_shift: Vec<f64>,
    /// Multiplies the class variance for synthetic draws.
    pub variance_scale: f64,
    /// Probability that a synthetic label is replaced by a uniformly chosen other class.
    pub label_flip_prob: f64,
}

impl GapSpec {
    /// The gap-free spec: `P_g = P0`.
    pub fn none(dim: usize) -> Self {
        Self {
            mean_shift: vec![0.0; dim],
            variance_scale: 1.0,
            label_flip_prob: 0.0,
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        check_dim("gap mean shift", dim, self.mean_shift.len())?;
        if self.mean_shift.iter().any(|x| !x.is_finite()) {
            return Err(param("gap mean shift must be finite"));
        }
        if !(self.variance_scale > 0.0 && self.variance_scale.is_finite()) {
            return Err(param("gap variance scale must be positive"));
        }
        if !(0.0..1.0).contains(&self.label_flip_prob) {
            return Err(param("label flip probability must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn mean_shift_norm(&self) -> f64 {
        norm(&self.mean_shift)
    }
}

/// Class-conditional isotropic Gaussians for `P0`, plus the gap that defines `P_g`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianWorld {
    pub class_means: Vec<Vec<f64>>,
    /// Isotropic class variance σ².
    pub class_cov_scale: f64,
    pub class_priors: Vec<f64>,
    pub gap: GapSpec,
}

impl GaussianWorld {
    /// Builds a world with uniform priors and class means at mutually distinct
    /// points `mean_separation` apart.
    ///
    /// When `classes <= dim + 1` the means are the vertices of a regular
    /// simplex with edge `mean_separation`; otherwise they sit on a regular
    /// polygon (a line when `dim == 1`) with adjacent spacing
    /// `mean_separation`. The configuration is centered at the origin and
    /// rotated by a random orthogonal matrix drawn from `seed`.
    pub fn new(
        dim: usize,
        classes: usize,
        mean_separation: f64,
        cov_scale: f64,
        gap: GapSpec,
        seed: u64,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(param("dimension must be at least 1"));
        }
        if classes < 2 {
            return Err(param("a world needs at least 2 classes"));
        }
        if !(mean_separation > 0.0 && mean_separation.is_finite()) {
            return Err(param("mean separation must be positive"));
        }
        if !(cov_scale > 0.0 && cov_scale.is_finite()) {
            return Err(param("covariance scale must be positive"));
        }
        gap.validate(dim)?;

        let base = if classes <= dim + 1 {
            simplex_vertices(classes, mean_separation)
        } else if dim == 1 {
            line_points(classes, mean_separation)
        } else {
            polygon_points(classes, mean_separation)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rotation = random_orthogonal(dim, &mut rng);
        let class_means = base
            .iter()
            .map(|p| {
                let mut padded = p.clone();
                padded.resize(dim, 0.0);
                rotation.iter().map(|row| dot(row, &padded)).collect()
            })
            .collect();

        Ok(Self {
            class_means,
            class_cov_scale: cov_scale,
            class_priors: vec![1.0 / classes as f64; classes],
            gap,
        })
    }

    pub fn dim(&self) -> usize {
        self.class_means[0].len()
    }

    pub fn num_classes(&self) -> usize {
        self.class_means.len()
    }

    /// Scales the gap toward zero: `τ' = fτ`, `κ' = 1 + f(κ − 1)`, `ρ' = fρ`.
    pub fn apply_gap_reduction(&self, factor: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&factor) {
            return Err(param("gap reduction factor must lie in [0, 1]"));
        }
        let mut out = self.clone();
        out.gap = GapSpec {
            mean_shift: self.gap.mean_shift.iter().map(|t| factor * t).collect(),
            variance_scale: 1.0 + factor * (self.gap.variance_scale - 1.0),
            label_flip_prob: factor * self.gap.label_flip_prob,
        };
        Ok(out)
    }

    /// `n` i.i.d. draws from `P0`, tagged [`Source::Real`].
    pub fn sample_real(&self, n: usize, seed: u64) -> Result<DataSet> {
        self.sample(Population::Real, n, seed)
    }

    /// `g` i.i.d. draws from `P_g`, tagged [`Source::Synthetic`].
    pub fn sample_synthetic(&self, g: usize, seed: u64) -> Result<DataSet> {
        self.sample(Population::Synthetic, g, seed)
    }

    /// Draws `count` samples from `population`.
    ///
    /// Stream 0 of the seeded generator picks classes, stream 1 decides label
    /// flips and stream `2 + c` produces the features of class `c`.
    pub fn sample(&self, population: Population, count: usize, seed: u64) -> Result<DataSet> {
        if count == 0 {
            return Err(param("sample count must be at least 1"));
        }
        let dim = self.dim();
        let classes = self.num_classes();
        let (shift, var_scale, flip) = match population {
            Population::Real => (None, 1.0, 0.0),
            Population::Synthetic => (
                Some(&self.gap.mean_shift),
                self.gap.variance_scale,
                self.gap.label_flip_prob,
            ),
        };
        let sd = (self.class_cov_scale * var_scale).sqrt();

        let mut class_rng = stream(seed, 0);
        let mut flip_rng = stream(seed, 1);
        let mut feature_rngs: Vec<ChaCha8Rng> =
            (0..classes).map(|c| stream(seed, 2 + c as u64)).collect();

        let mut samples = Vec::with_capacity(count);
        for _ in 0..count {
            let class = draw_class(&self.class_priors, &mut class_rng);
            let rng = &mut feature_rngs[class];
            let mut features = Vec::with_capacity(dim);
            for j in 0..dim {
                let z: f64 = rng.sample(StandardNormal);
                let mut x = self.class_means[class][j] + sd * z;
                if let Some(t) = shift {
                    x += t[j];
                }
                features.push(x);
            }
            let mut label = class;
            if flip > 0.0 && flip_rng.random::<f64>() < flip {
                let other = flip_rng.random_range(0..classes - 1);
                label = if other >= class { other + 1 } else { other };
            }
            samples.push(Sample {
                features,
                label,
                source: population.source(),
            });
        }
        DataSet::new(samples, dim, classes)
    }

    /// Index of the class mean closest to `x` (ties to the lowest index).
    pub fn nearest_mean(&self, x: &[f64]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (c, m) in self.class_means.iter().enumerate() {
            let d = sq_dist(m, x);
            if d < best_d {
                best = c;
                best_d = d;
            }
        }
        best
    }
}

pub(crate) fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn draw_class(priors: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (c, p) in priors.iter().enumerate() {
        acc += p;
        if u < acc {
            return c;
        }
    }
    priors.len() - 1
}

/// Vertices of a regular simplex with `k` vertices and edge `edge`, in `k − 1` coordinates.
fn simplex_vertices(k: usize, edge: f64) -> Vec<Vec<f64>> {
    // Centered standard basis vectors e_i − 1/k lie in the (k−1)-dim subspace
    // orthogonal to the all-ones vector, pairwise √2 apart. Orthonormalize
    // the first k−1 of them and take coordinates in that basis.
    let centered: Vec<Vec<f64>> = (0..k)
        .map(|i| {
            (0..k)
                .map(|j| if i == j { 1.0 } else { 0.0 } - 1.0 / k as f64)
                .collect()
        })
        .collect();
    let basis = gram_schmidt(&centered[..k - 1]);
    let scale = edge / std::f64::consts::SQRT_2;
    centered
        .iter()
        .map(|v| basis.iter().map(|b| scale * dot(b, v)).collect())
        .collect()
}

fn polygon_points(k: usize, edge: f64) -> Vec<Vec<f64>> {
    let radius = edge / (2.0 * (std::f64::consts::PI / k as f64).sin());
    (0..k)
        .map(|i| {
            let a = 2.0 * std::f64::consts::PI * i as f64 / k as f64;
            vec![radius * a.cos(), radius * a.sin()]
        })
        .collect()
}

fn line_points(k: usize, edge: f64) -> Vec<Vec<f64>> {
    let mid = (k - 1) as f64 / 2.0;
    (0..k).map(|i| vec![edge * (i as f64 - mid)]).collect()
}

fn gram_schmidt(vectors: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(vectors.len());
    for v in vectors {
        let mut w = v.clone();
        for b in &basis {
            let p = dot(&w, b);
            w.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let n = norm(&w);
        if n > 1e-12 {
            w.iter_mut().for_each(|x| *x /= n);
            basis.push(w);
        }
    }
    basis
}

/// Rows of a random orthogonal matrix (Gram-Schmidt on a Gaussian matrix).
fn random_orthogonal(dim: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    loop {
        let raw: Vec<Vec<f64>> = (0..dim)
            .map(|_| (0..dim).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        let q = gram_schmidt(&raw);
        if q.len() == dim {
            return q;
        }
    }
}

impl From<Population> for Source {
    fn from(p: Population) -> Self {
        p.source()
    }
}

impl TryFrom<Source> for Population {
    type Error = Error;

    fn try_from(s: Source) -> Result<Self> {
        Ok(match s {
            Source::Real => Population::Real,
            Source::Synthetic => Population::Synthetic,
        })
    }
}
