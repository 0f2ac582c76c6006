//! Partitions of the instance space into nearest-centroid regions.
//!
//! A [`Partition`] is a set of `K` centroids; region `i` is the set of points
//! whose nearest centroid is `i`. Centroids come either from a full-batch
//! Lloyd fit ([`kmeans_fit`]) or from streaming running-mean updates
//! ([`Partition::streaming_update`]). A [`RegionTable`] records which real and
//! synthetic samples fall in each region.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::DataSet;
use crate::error::{check_dim, param, Error, Result};
use crate::linalg::sq_dist;
use crate::loss::empirical_robustness;

const PARALLEL_ASSIGN_MIN: usize = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    centroids: Vec<Vec<f64>>,
    /// Number of points ever assigned to each centroid (streaming mode), or
    /// the final cluster sizes after a Lloyd fit.
    counts: Vec<u64>,
}

impl Partition {
    /// A partition with the given centroids and zero counts.
    pub fn new(centroids: Vec<Vec<f64>>) -> Result<Self> {
        let counts = vec![0; centroids.len()];
        Self::with_counts(centroids, counts)
    }

    pub fn with_counts(centroids: Vec<Vec<f64>>, counts: Vec<u64>) -> Result<Self> {
        if centroids.is_empty() {
            return Err(param("a partition needs at least one centroid"));
        }
        check_dim("partition counts", centroids.len(), counts.len())?;
        let dim = centroids[0].len();
        if dim == 0 {
            return Err(param("centroid dimension must be at least 1"));
        }
        for c in &centroids {
            check_dim("centroid", dim, c.len())?;
            if c.iter().any(|x| !x.is_finite()) {
                return Err(param("centroids must be finite"));
            }
        }
        Ok(Self { centroids, counts })
    }

    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn dim(&self) -> usize {
        self.centroids[0].len()
    }

    pub fn centroids(&self) -> &[Vec<f64>] {
        &self.centroids
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    /// Nearest centroid under Euclidean distance; ties go to the lowest index.
    pub fn assign(&self, x: &[f64]) -> Result<usize> {
        check_dim("assign", self.dim(), x.len())?;
        Ok(nearest(&self.centroids, x).0)
    }

    pub fn assign_all<P: AsRef<[f64]> + Sync>(&self, points: &[P]) -> Result<Vec<usize>> {
        for p in points {
            check_dim("assign", self.dim(), p.as_ref().len())?;
        }
        Ok(assign_points(&self.centroids, points))
    }

    /// Returns the partition after absorbing `batch` point by point.
    pub fn streaming_update<P: AsRef<[f64]>>(&self, batch: &[P]) -> Result<Partition> {
        let mut next = self.clone();
        next.absorb(batch)?;
        Ok(next)
    }

    /// In-place streaming update. Each point is assigned to its nearest
    /// centroid `i`, `count_i` is incremented, and `z_i ← (1 − η) z_i + η x`
    /// with `η = 1 / count_i`. A centroid is therefore the running mean of
    /// every point it has absorbed (its starting position carries weight equal
    /// to its starting count). Returns the region of every point.
    pub fn absorb<P: AsRef<[f64]>>(&mut self, batch: &[P]) -> Result<Vec<usize>> {
        for p in batch {
            check_dim("streaming update", self.dim(), p.as_ref().len())?;
        }
        let mut regions = Vec::with_capacity(batch.len());
        for p in batch {
            let x = p.as_ref();
            let i = nearest(&self.centroids, x).0;
            self.counts[i] += 1;
            let eta = 1.0 / self.counts[i] as f64;
            for (z, xv) in self.centroids[i].iter_mut().zip(x) {
                *z = (1.0 - eta) * *z + eta * xv;
            }
            regions.push(i);
        }
        Ok(regions)
    }
}

/// Result of a Lloyd fit.
#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit {
    pub partition: Partition,
    /// Final assignment of every input point.
    pub assignment: Vec<usize>,
    /// Sum of squared distances to the assigned centroid, after each iteration.
    pub objective_history: Vec<f64>,
    pub converged: bool,
}

impl KMeansFit {
    pub fn objective(&self) -> f64 {
        *self.objective_history.last().expect("at least one iteration")
    }
}

/// Lloyd's algorithm from a k-means++ seeding.
///
/// Stops after `max_iters` iterations or when an assignment pass changes no
/// label. A cluster that becomes empty is re-seeded at the point farthest from
/// its current centroid (taken from a cluster with at least two members). The
/// recorded objective never increases from one iteration to the next.
pub fn kmeans_fit<P: AsRef<[f64]> + Sync>(
    points: &[P],
    k: usize,
    max_iters: usize,
    seed: u64,
) -> Result<KMeansFit> {
    if k == 0 {
        return Err(param("K must be at least 1"));
    }
    if points.len() < k {
        return Err(param(format!(
            "K-means needs at least K = {k} points, got {}",
            points.len()
        )));
    }
    if max_iters == 0 {
        return Err(param("max_iters must be at least 1"));
    }
    let dim = points[0].as_ref().len();
    for p in points {
        check_dim("kmeans point", dim, p.as_ref().len())?;
        if p.as_ref().iter().any(|x| !x.is_finite()) {
            return Err(param("K-means points must be finite"));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_plus_plus(points, k, &mut rng);
    let mut assignment = assign_points(&centroids, points);
    let mut history: Vec<f64> = Vec::new();
    let mut converged = false;

    for _ in 0..max_iters {
        reseed_empty(points, &mut centroids, &mut assignment);
        update_means(points, &mut centroids, &assignment);
        let objective = lloyd_objective(points, &centroids, &assignment);
        if let Some(&prev) = history.last() {
            debug_assert!(
                objective <= prev + 1e-9 * prev.abs().max(1.0),
                "Lloyd objective increased: {prev} -> {objective}"
            );
        }
        history.push(objective);

        let next = assign_points(&centroids, points);
        if next == assignment {
            converged = true;
            break;
        }
        assignment = next;
    }

    let mut counts = vec![0u64; k];
    for &a in &assignment {
        counts[a] += 1;
    }
    Ok(KMeansFit {
        partition: Partition::with_counts(centroids, counts)?,
        assignment,
        objective_history: history,
        converged,
    })
}

/// k-means++ seeding: the first centroid uniformly, then each next one with
/// probability proportional to its squared distance from the chosen set.
pub fn kmeans_plus_plus<P: AsRef<[f64]>>(
    points: &[P],
    k: usize,
    rng: &mut impl Rng,
) -> Vec<Vec<f64>> {
    let first = rng.random_range(0..points.len());
    let mut centroids = vec![points[first].as_ref().to_vec()];
    let mut d2: Vec<f64> = points
        .iter()
        .map(|p| sq_dist(p.as_ref(), &centroids[0]))
        .collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut idx = d2.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if acc > target && w > 0.0 {
                    idx = i;
                    break;
                }
            }
            idx
        } else {
            rng.random_range(0..points.len())
        };
        let c = points[pick].as_ref().to_vec();
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p.as_ref(), &c));
        }
        centroids.push(c);
    }
    centroids
}

fn nearest(centroids: &[Vec<f64>], x: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = sq_dist(c, x);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

fn assign_points<P: AsRef<[f64]> + Sync>(centroids: &[Vec<f64>], points: &[P]) -> Vec<usize> {
    if points.len() >= PARALLEL_ASSIGN_MIN {
        points
            .par_iter()
            .map(|p| nearest(centroids, p.as_ref()).0)
            .collect()
    } else {
        points
            .iter()
            .map(|p| nearest(centroids, p.as_ref()).0)
            .collect()
    }
}

fn reseed_empty<P: AsRef<[f64]>>(
    points: &[P],
    centroids: &mut [Vec<f64>],
    assignment: &mut [usize],
) {
    let k = centroids.len();
    let mut sizes = vec![0usize; k];
    for &a in assignment.iter() {
        sizes[a] += 1;
    }
    for j in 0..k {
        if sizes[j] > 0 {
            continue;
        }
        let mut far = None;
        let mut far_d = 0.0;
        for (i, p) in points.iter().enumerate() {
            let a = assignment[i];
            if sizes[a] < 2 {
                continue;
            }
            let d = sq_dist(p.as_ref(), &centroids[a]);
            if d > far_d {
                far_d = d;
                far = Some(i);
            }
        }
        // All points sit on their centroids: nothing to gain, leave j empty.
        let Some(i) = far else { continue };
        sizes[assignment[i]] -= 1;
        sizes[j] = 1;
        assignment[i] = j;
        centroids[j] = points[i].as_ref().to_vec();
    }
}

fn update_means<P: AsRef<[f64]>>(points: &[P], centroids: &mut [Vec<f64>], assignment: &[usize]) {
    let dim = centroids[0].len();
    let mut sums = vec![vec![0.0; dim]; centroids.len()];
    let mut sizes = vec![0usize; centroids.len()];
    for (p, &a) in points.iter().zip(assignment) {
        sizes[a] += 1;
        for (s, x) in sums[a].iter_mut().zip(p.as_ref()) {
            *s += x;
        }
    }
    for ((c, s), &m) in centroids.iter_mut().zip(sums).zip(&sizes) {
        if m > 0 {
            *c = s.into_iter().map(|v| v / m as f64).collect();
        }
    }
}

fn lloyd_objective<P: AsRef<[f64]>>(points: &[P], centroids: &[Vec<f64>], assignment: &[usize]) -> f64 {
    points
        .iter()
        .zip(assignment)
        .map(|(p, &a)| sq_dist(p.as_ref(), &centroids[a]))
        .sum()
}

/// Per-region membership of a real set `S` and a synthetic set `G`.
///
/// Valid regions (`T_S`) are those holding at least one real sample. `n` is
/// the size of `S`; `g` counts only synthetic samples inside valid regions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionTable {
    k: usize,
    valid_regions: Vec<usize>,
    real_members: Vec<Vec<usize>>,
    synth_members: Vec<Vec<usize>>,
    n: usize,
    g: usize,
    synth_total: usize,
}

impl RegionTable {
    /// Builds the table from the region index of every real and synthetic sample.
    pub fn from_assignments(k: usize, real_regions: &[usize], synth_regions: &[usize]) -> Result<Self> {
        if k == 0 {
            return Err(param("K must be at least 1"));
        }
        let mut real_members = vec![Vec::new(); k];
        let mut synth_members = vec![Vec::new(); k];
        for (i, &r) in real_regions.iter().enumerate() {
            if r >= k {
                return Err(Error::Integrity(format!("real sample {i} in region {r} >= K = {k}")));
            }
            real_members[r].push(i);
        }
        for (i, &r) in synth_regions.iter().enumerate() {
            if r >= k {
                return Err(Error::Integrity(format!(
                    "synthetic sample {i} in region {r} >= K = {k}"
                )));
            }
            synth_members[r].push(i);
        }
        let valid_regions: Vec<usize> = (0..k).filter(|&r| !real_members[r].is_empty()).collect();
        let g = valid_regions.iter().map(|&r| synth_members[r].len()).sum();
        Ok(Self {
            k,
            valid_regions,
            real_members,
            synth_members,
            n: real_regions.len(),
            g,
            synth_total: synth_regions.len(),
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// `T_S`, in increasing region order.
    pub fn valid_regions(&self) -> &[usize] {
        &self.valid_regions
    }

    pub fn is_valid(&self, region: usize) -> bool {
        region < self.k && !self.real_members[region].is_empty()
    }

    /// Indices into `S` of the real samples in `region` (`S_i`).
    pub fn real_members(&self, region: usize) -> &[usize] {
        &self.real_members[region]
    }

    /// Indices into `G` of the synthetic samples in `region` (`G_i`).
    pub fn synth_members(&self, region: usize) -> &[usize] {
        &self.synth_members[region]
    }

    pub fn n_i(&self, region: usize) -> usize {
        self.real_members[region].len()
    }

    pub fn g_i(&self, region: usize) -> usize {
        self.synth_members[region].len()
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Synthetic samples inside valid regions.
    pub fn g(&self) -> usize {
        self.g
    }

    /// All synthetic samples, including those outside valid regions.
    pub fn synth_total(&self) -> usize {
        self.synth_total
    }

    /// Synthetic samples that fell in regions without real samples.
    pub fn orphan_synth(&self) -> usize {
        self.synth_total - self.g
    }

    /// First valid region with no synthetic sample, if any.
    pub fn first_region_without_synth(&self) -> Option<usize> {
        self.valid_regions
            .iter()
            .copied()
            .find(|&r| self.synth_members[r].is_empty())
    }

    /// Checks that the table indexes exactly `real_len` real and `synth_len`
    /// synthetic samples.
    pub fn check_consistent(&self, real_len: usize, synth_len: usize) -> Result<()> {
        if self.n != real_len {
            return Err(Error::Integrity(format!(
                "region table covers {} real samples, data has {real_len}",
                self.n
            )));
        }
        if self.synth_total != synth_len {
            return Err(Error::Integrity(format!(
                "region table covers {} synthetic samples, data has {synth_len}",
                self.synth_total
            )));
        }
        Ok(())
    }
}

/// Assigns every sample of `real` and `synth` to its region under `p`.
pub fn region_table(p: &Partition, real: &DataSet, synth: &DataSet) -> Result<RegionTable> {
    let real_feats: Vec<&[f64]> = real.features().collect();
    let synth_feats: Vec<&[f64]> = synth.features().collect();
    region_table_from_points(p, &real_feats, &synth_feats)
}

/// Like [`region_table`] but for arbitrary point representations (for
/// example model outputs when clustering in prediction space).
pub fn region_table_from_points<P: AsRef<[f64]> + Sync>(
    p: &Partition,
    real: &[P],
    synth: &[P],
) -> Result<RegionTable> {
    let real_regions = p.assign_all(real)?;
    let synth_regions = p.assign_all(synth)?;
    RegionTable::from_assignments(p.k(), &real_regions, &synth_regions)
}

/// Both sides of the within-cluster-variation identity
/// `Σ_{i≠j} ‖x_i − x_j‖² = 2n Σ_i ‖x_i − x̄‖²`.
pub fn cluster_variation<P: AsRef<[f64]>>(points: &[P]) -> Result<(f64, f64)> {
    if points.is_empty() {
        return Err(param("cluster variation needs at least one point"));
    }
    let dim = points[0].as_ref().len();
    for p in points {
        check_dim("cluster variation", dim, p.as_ref().len())?;
    }
    let mut pairwise = 0.0;
    for (i, a) in points.iter().enumerate() {
        for (j, b) in points.iter().enumerate() {
            if i != j {
                pairwise += sq_dist(a.as_ref(), b.as_ref());
            }
        }
    }
    let n = points.len() as f64;
    let mut mean = vec![0.0; dim];
    for p in points {
        for (m, x) in mean.iter_mut().zip(p.as_ref()) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let spread: f64 = points.iter().map(|p| sq_dist(p.as_ref(), &mean)).sum();
    Ok((pairwise, 2.0 * n * spread))
}

/// The partition-optimization objective
/// `Σ_{i∈T_S} (g_i/g) R̂(G_i) + Σ_{i∈T_S} (n_i/n) R̂(S_i)` on model outputs,
/// where `R̂` is the within-region empirical robustness. The synthetic sum is
/// zero when no synthetic sample lies in a valid region.
pub fn partition_objective<O: AsRef<[f64]>>(
    table: &RegionTable,
    outputs_real: &[O],
    outputs_synth: &[O],
) -> Result<f64> {
    if table.valid_regions().is_empty() {
        return Err(param("partition objective needs at least one valid region"));
    }
    table.check_consistent(outputs_real.len(), outputs_synth.len())?;
    let n = table.n() as f64;
    let g = table.g() as f64;
    let mut total = 0.0;
    for &r in table.valid_regions() {
        let s: Vec<&[f64]> = table.real_members(r).iter().map(|&i| outputs_real[i].as_ref()).collect();
        total += (s.len() as f64 / n) * empirical_robustness(&s);
        let gi: Vec<&[f64]> = table.synth_members(r).iter().map(|&i| outputs_synth[i].as_ref()).collect();
        if !gi.is_empty() {
            total += (gi.len() as f64 / g) * empirical_robustness(&gi);
        }
    }
    Ok(total)
}
