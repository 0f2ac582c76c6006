//! Fixtures shared by the benchmarks.

use synthgap_core::partition::{kmeans_fit, region_table};
use synthgap_core::{DataSet, GapSpec, GaussianWorld, RegionTable, SoftmaxModel};

/// A gapped 3-class planar world with `n` real and `g` synthetic samples,
/// partitioned into `k` regions, plus a randomly initialized model.
pub struct Fixture {
    pub world: GaussianWorld,
    pub real: DataSet,
    pub synth: DataSet,
    pub table: RegionTable,
    pub partition: synthgap_core::Partition,
    pub model: SoftmaxModel,
}

pub fn fixture(n: usize, g: usize, k: usize, hidden: usize, seed: u64) -> Fixture {
    let gap = GapSpec {
        mean_shift: vec![0.8, -0.4],
        variance_scale: 1.4,
        label_flip_prob: 0.05,
    };
    let world = GaussianWorld::new(2, 3, 3.0, 1.0, gap, seed).expect("valid world");
    let real = world.sample_real(n, seed + 1).expect("real draw");
    let synth = world.sample_synthetic(g, seed + 2).expect("synthetic draw");
    let points: Vec<&[f64]> = real.features().chain(synth.features()).collect();
    let partition = kmeans_fit(&points, k, 50, seed).expect("k-means").partition;
    let table = region_table(&partition, &real, &synth).expect("table");
    let model = SoftmaxModel::new(2, 3, hidden, seed).expect("model");
    Fixture {
        world,
        real,
        synth,
        table,
        partition,
        model,
    }
}
