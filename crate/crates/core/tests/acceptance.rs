//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any failed.
//!
//! `cargo test -p synthgap-core --test acceptance --release` runs it alone.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use synthgap_core::bound::{residual_outputs, verify_bound};
use synthgap_core::experiment::{run_trial, sub_seed};
use synthgap_core::loss::{
    composite_loss_grad, discrepancy, empirical_loss, synthetic_only_loss_grad,
};
use synthgap_core::model::finite_diff_check;
use synthgap_core::partition::{cluster_variation, kmeans_fit, region_table};
use synthgap_core::train::train_full;
use synthgap_core::{
    BaseLoss, BoundKind, DataSet, ExperimentSpec, GapSpec, GaussianWorld, LossConfig, OutputMode,
    Partition, SoftmaxModel, TrainConfig,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

/// Default world of the bound criteria: 3 classes in the plane, n = 48, g = 300, K = 6.
fn bound_spec() -> ExperimentSpec {
    ExperimentSpec {
        test_samples: 500,
        ..ExperimentSpec::default()
    }
}

fn criterion_1() -> Outcome {
    let spec = bound_spec();
    let start = Instant::now();
    let r = verify_bound(&spec, BoundKind::Theorem1, 200, 1000).expect("campaign runs");
    let secs = start.elapsed().as_secs_f64();
    outcome(
        r.rate <= 0.1 && secs <= 60.0,
        format!(
            "{} violations in {} evaluated trials ({} skipped), rate {:.3} <= 0.1, min slack {:.4}, {secs:.1}s <= 60s",
            r.violations, r.evaluated, r.skipped, r.rate, r.slack_min
        ),
    )
}

fn criterion_2() -> Outcome {
    let spec = bound_spec();
    let up = verify_bound(&spec, BoundKind::SingleUpper, 100, 2000).expect("upper campaign");
    let low = verify_bound(&spec, BoundKind::SingleLower, 100, 2000).expect("lower campaign");
    outcome(
        up.violations == 0 && low.violations == 0 && up.evaluated == 100 && low.evaluated == 100,
        format!(
            "upper {} / {} violations (min slack {:.4}), lower {} / {} violations (min slack {:.4})",
            up.violations, up.evaluated, up.slack_min, low.violations, low.evaluated, low.slack_min
        ),
    )
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let m = rng.random_range(2..=200);
        let d = rng.random_range(1..=10);
        let scale = 10f64.powf(rng.random_range(-2.0..3.0));
        let pts: Vec<Vec<f64>> = (0..m)
            .map(|_| (0..d).map(|_| scale * rng.random_range(-1.0..1.0)).collect())
            .collect();
        let (lhs, rhs) = cluster_variation(&pts).expect("non-empty");
        let rel = (lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(f64::MIN_POSITIVE);
        worst = worst.max(rel);
    }
    outcome(worst <= 1e-9, format!("worst relative error {worst:.3e} <= 1e-9 over 100 sets"))
}

fn random_instance(seed: u64) -> (SoftmaxModel, DataSet, DataSet, synthgap_core::RegionTable, LossConfig) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = rng.random_range(1..=4);
    let classes = rng.random_range(2..=4);
    let gap = GapSpec {
        mean_shift: (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
        variance_scale: rng.random_range(0.5..2.0),
        label_flip_prob: rng.random_range(0.0..0.3),
    };
    let world = GaussianWorld::new(dim, classes, 2.0, 1.0, gap, seed).expect("world");
    let real = world.sample_real(rng.random_range(3..12), sub_seed(seed, 1)).expect("real");
    let synth = world.sample_synthetic(rng.random_range(4..20), sub_seed(seed, 2)).expect("synth");
    let hidden = [0, 3, 5][rng.random_range(0..3)];
    let mut model = SoftmaxModel::new(dim, classes, hidden, seed).expect("model");
    for p in model.params_mut() {
        *p = rng.random_range(-1.5..1.5);
    }
    let pts: Vec<&[f64]> = real.features().chain(synth.features()).collect();
    let k = rng.random_range(1..=4);
    let partition = kmeans_fit(&pts, k, 30, seed).expect("k-means").partition;
    let table = region_table(&partition, &real, &synth).expect("table");
    let cfg = LossConfig {
        lambda_real: rng.random_range(0.5..4.0),
        lambda_disc: rng.random_range(0.05..1.0),
        lambda_rob: rng.random_range(0.05..1.5),
        base_loss: if rng.random::<bool>() {
            BaseLoss::CrossEntropy
        } else {
            BaseLoss::L2Residual
        },
        output_mode: if rng.random::<bool>() {
            OutputMode::Raw
        } else {
            OutputMode::Residual
        },
    };
    (model, real, synth, table, cfg)
}

fn criterion_4() -> Outcome {
    let mut worst_c: f64 = 0.0;
    let mut worst_s: f64 = 0.0;
    for i in 0..20 {
        let (model, real, synth, table, cfg) = random_instance(400 + i);
        let c = finite_diff_check(&model, |m| composite_loss_grad(m, &real, &synth, &table, &cfg), 1e-5)
            .expect("composite");
        let s = finite_diff_check(&model, |m| synthetic_only_loss_grad(m, &synth, &table, &cfg), 1e-5)
            .expect("synthetic-only");
        worst_c = worst_c.max(c);
        worst_s = worst_s.max(s);
    }
    outcome(
        worst_c <= 1e-4 && worst_s <= 1e-4,
        format!("worst relative error composite {worst_c:.2e}, synthetic-only {worst_s:.2e} (<= 1e-4, 20 instances)"),
    )
}

fn criterion_5() -> Outcome {
    let gap = GapSpec {
        mean_shift: vec![1.5, 0.0],
        variance_scale: 1.5,
        label_flip_prob: 0.0,
    };
    let base = ExperimentSpec {
        gap,
        test_samples: 4000,
        ..ExperimentSpec::default()
    };
    let off = ExperimentSpec {
        train: TrainConfig {
            loss: base.train.loss.without_regularizers(),
            ..base.train
        },
        ..base.clone()
    };
    let pairs: Vec<(f64, f64, f64, f64, f64, f64)> = (0..20u64)
        .into_par_iter()
        .map(|i| {
            let seed = 5000 + i;
            let a = run_trial(&base, seed).expect("regularized trial");
            let b = run_trial(&off, seed).expect("baseline trial");
            let (ta, tb) = (a.trace.last().expect("trace"), b.trace.last().expect("trace"));
            (a.test_accuracy, b.test_accuracy, ta.disc, tb.disc, ta.rob, tb.rob)
        })
        .collect();
    let m = pairs.len() as f64;
    let acc_full = pairs.iter().map(|p| p.0).sum::<f64>() / m;
    let acc_base = pairs.iter().map(|p| p.1).sum::<f64>() / m;
    let both_lower = pairs.iter().filter(|p| p.2 < p.3 && p.4 < p.5).count();

    outcome(
        acc_full >= acc_base - 0.005 && both_lower as f64 >= 0.8 * m,
        format!(
            "mean accuracy {:.2}% vs baseline {:.2}% (>= baseline - 0.5), disc and rob both lower in {both_lower}/20 pairs (>= 16)",
            100.0 * acc_full,
            100.0 * acc_base
        ),
    )
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut monotone = true;
    for fit_idx in 0..50u64 {
        let m = rng.random_range(5..150);
        let d = rng.random_range(1..6);
        let k = rng.random_range(1..=m.min(8));
        let pts: Vec<Vec<f64>> = (0..m)
            .map(|_| (0..d).map(|_| rng.random_range(-5.0..5.0)).collect())
            .collect();
        let fit = kmeans_fit(&pts, k, 100, fit_idx).expect("fit");
        monotone &= fit.objective_history.windows(2).all(|w| w[1] <= w[0]);
    }

    // Streaming: the absorbed centroid equals the running mean computed in the
    // same order, and the plain mean of everything it has seen.
    let mut exact = true;
    let mut worst_rel: f64 = 0.0;
    for _ in 0..50 {
        let d = rng.random_range(1..5);
        let k = rng.random_range(1..5);
        let init: Vec<Vec<f64>> = (0..k)
            .map(|_| (0..d).map(|_| rng.random_range(-3.0..3.0)).collect())
            .collect();
        let mut p = Partition::with_counts(init.clone(), vec![0; k]).expect("partition");
        let mut running = init.clone();
        let mut counts = vec![0u64; k];
        let mut sums = vec![vec![0.0; d]; k];
        for _ in 0..rng.random_range(1..6) {
            let batch: Vec<Vec<f64>> = (0..rng.random_range(1..40))
                .map(|_| (0..d).map(|_| rng.random_range(-3.0..3.0)).collect())
                .collect();
            let regions = p.absorb(&batch).expect("absorb");
            for (x, &r) in batch.iter().zip(&regions) {
                counts[r] += 1;
                let eta = 1.0 / counts[r] as f64;
                for j in 0..d {
                    running[r][j] = (1.0 - eta) * running[r][j] + eta * x[j];
                    sums[r][j] += x[j];
                }
            }
        }
        exact &= p.centroids() == running.as_slice() && p.counts() == counts.as_slice();
        for r in 0..k {
            if counts[r] > 0 {
                for (c, s) in p.centroids()[r].iter().zip(&sums[r]) {
                    let mean = s / counts[r] as f64;
                    let rel = (c - mean).abs() / mean.abs().max(1.0);
                    worst_rel = worst_rel.max(rel);
                }
            }
        }
    }
    outcome(
        monotone && exact && worst_rel <= 1e-12,
        format!(
            "Lloyd monotone on 50 fits: {monotone}; streaming equals order-matched running mean bit for bit: {exact}; worst deviation from the plain mean {worst_rel:.1e}"
        ),
    )
}

fn criterion_7() -> Outcome {
    let spec = |g: usize| ExperimentSpec {
        g,
        test_samples: 4000,
        ..ExperimentSpec::default()
    };
    let acc = |g: usize| -> Vec<f64> {
        (0..10u64)
            .into_par_iter()
            .map(|i| run_trial(&spec(g), 7000 + i).expect("trial").test_accuracy)
            .collect()
    };
    let hi = acc(300);
    let lo = acc(25);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let var = |v: &[f64]| {
        let m = mean(v);
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
    };
    let pooled = ((var(&hi) + var(&lo)) / 2.0).sqrt();
    outcome(
        mean(&hi) >= mean(&lo) - pooled,
        format!(
            "accuracy g=300 {:.2}% vs g=25 {:.2}% (pooled sd {:.2} points)",
            100.0 * mean(&hi),
            100.0 * mean(&lo),
            100.0 * pooled
        ),
    )
}

fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let rank = |v: &[f64]| -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut r = vec![0.0; v.len()];
        for (pos, &i) in idx.iter().enumerate() {
            r[i] = pos as f64;
        }
        r
    };
    let (ra, rb) = (rank(a), rank(b));
    let n = a.len() as f64;
    let d2: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - y).powi(2)).sum();
    1.0 - 6.0 * d2 / (n * (n * n - 1.0))
}

fn criterion_8() -> Outcome {
    // A model trained once on the gap-free world, then held fixed.
    let world0 = GaussianWorld::new(2, 3, 3.0, 1.0, GapSpec::none(2), 8).expect("world");
    let real = world0.sample_real(48, 1).expect("real");
    let synth = world0.sample_synthetic(300, 2).expect("synth");
    let pts: Vec<&[f64]> = real.features().chain(synth.features()).collect();
    let partition = kmeans_fit(&pts, 6, 100, 3).expect("fit").partition;
    let init = SoftmaxModel::new(2, 3, 0, 4).expect("model");
    let (model, _) = train_full(&real, &synth, &partition, init, &TrainConfig::default(), None)
        .expect("pre-training");

    let shifts = [0.0, 0.5, 1.0, 1.5, 2.0];
    let a1: Vec<f64> = shifts
        .iter()
        .map(|&t| {
            let world = GaussianWorld {
                gap: GapSpec {
                    mean_shift: vec![t, 0.0],
                    variance_scale: 1.0,
                    label_flip_prob: 0.0,
                },
                ..world0.clone()
            };
            let per_seed: Vec<f64> = (0..20u64)
                .into_par_iter()
                .map(|i| {
                    let s = world.sample_real(48, sub_seed(800 + i, 1)).expect("real");
                    let g = world.sample_synthetic(300, sub_seed(800 + i, 2)).expect("synth");
                    let pts: Vec<&[f64]> = s.features().chain(g.features()).collect();
                    let p = kmeans_fit(&pts, 6, 100, sub_seed(800 + i, 3)).expect("fit").partition;
                    let table = region_table(&p, &s, &g).expect("table");
                    let (os, og) = (residual_outputs(&model, &s), residual_outputs(&model, &g));
                    let gsum = table.g() as f64;
                    table
                        .valid_regions()
                        .iter()
                        .filter(|&&r| table.g_i(r) > 0)
                        .map(|&r| {
                            let si: Vec<&Vec<f64>> = table.real_members(r).iter().map(|&j| &os[j]).collect();
                            let gi: Vec<&Vec<f64>> = table.synth_members(r).iter().map(|&j| &og[j]).collect();
                            table.g_i(r) as f64 / gsum * discrepancy(&gi, &si).expect("non-empty")
                        })
                        .sum::<f64>()
                })
                .collect();
            per_seed.iter().sum::<f64>() / per_seed.len() as f64
        })
        .collect();
    let rho = spearman(&shifts, &a1);
    let shown: Vec<String> = a1.iter().map(|v| format!("{v:.4}")).collect();
    outcome(rho > 0.9, format!("Spearman rho {rho:.3} > 0.9, A1 by shift: [{}]", shown.join(", ")))
}

fn criterion_9() -> Outcome {
    let mut worst: f64 = 0.0;
    for i in 0..20 {
        let (model, real, synth, table, cfg) = random_instance(900 + i);
        let cfg = LossConfig {
            base_loss: BaseLoss::CrossEntropy,
            ..cfg.without_regularizers()
        };
        let (loss, _) = composite_loss_grad(&model, &real, &synth, &table, &cfg).expect("loss");
        let expect = cfg.lambda_real * empirical_loss(&model, &real, BaseLoss::CrossEntropy).expect("S")
            + empirical_loss(&model, &synth, BaseLoss::CrossEntropy).expect("G");
        worst = worst.max((loss - expect).abs());
    }
    outcome(worst <= 1e-12, format!("worst absolute difference {worst:.1e} <= 1e-12 over 20 instances"))
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 9] = [
        ("two-sample bound validity", criterion_1),
        ("one-sample bound, both directions", criterion_2),
        ("within-cluster variance identity", criterion_3),
        ("gradient fidelity", criterion_4),
        ("regularizer ablation direction", criterion_5),
        ("k-means contracts", criterion_6),
        ("synthetic-count trend", criterion_7),
        ("gap monotonicity of discrepancy", criterion_8),
        ("reduction to weighted cross-entropy", criterion_9),
    ];
    let mut failed = 0;
    let only: Option<usize> = std::env::var("ONLY").ok().and_then(|v| v.parse().ok());
    for (i, (name, run)) in criteria.iter().enumerate() {
        if only.is_some_and(|o| o != i + 1) {
            continue;
        }
        let start = Instant::now();
        let o = run();
        let status = if o.pass { "PASS" } else { "FAIL" };
        if !o.pass {
            failed += 1;
        }
        println!(
            "{status} criterion {} ({name}): {} [{:.1}s]",
            i + 1,
            o.detail,
            start.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} acceptance criterion(s) failed");
        std::process::exit(1);
    }
    println!("all 9 acceptance criteria passed");
}
