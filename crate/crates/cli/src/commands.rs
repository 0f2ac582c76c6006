//! The `run`, `sweep` and `verify-bound` commands.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use rayon::prelude::*;
use synthgap_core::bound::{bound_theorem1, verify_bound};
use synthgap_core::experiment::{run_trial, sub_seed};
use synthgap_core::{Error, ExperimentSpec};

use crate::config::{ConfigError, ExperimentConfig};
use crate::report::{summarize, write_rows, Format, ReportRow};

/// Exit status of a command that ran to completion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Ok,
    /// The violation rate exceeded `δ` plus its binomial allowance.
    BoundFailed,
}

pub struct Options {
    pub out: PathBuf,
    pub format: Format,
    pub timing: bool,
}

struct Point<'a> {
    index: usize,
    axis: Option<(&'a str, f64)>,
    spec: ExperimentSpec,
    fingerprint: String,
}

fn trial_row(point: &Point, seed: u64, opts: &Options, write_model: bool) -> Result<ReportRow> {
    let start = Instant::now();
    let spec = &point.spec;
    let t = run_trial(spec, seed).with_context(|| format!("trial with seed {seed}"))?;
    let mut row = ReportRow {
        fingerprint: point.fingerprint.clone(),
        point: point.index,
        axis: point.axis.map(|(a, _)| a.to_string()),
        axis_value: point.axis.map(|(_, v)| v),
        seed,
        test_accuracy: t.test_accuracy,
        final_disc: t.final_disc,
        final_rob: t.final_rob,
        bound_status: String::new(),
        disc_term: None,
        rob_synth_term: None,
        rob_real_term: None,
        synth_loss: None,
        reweight_term: None,
        concentration: None,
        bound_total: None,
        population_loss: None,
        population_loss_se: None,
        slack: None,
        violated: None,
        n: t.real.len(),
        g_valid: None,
        g_total: t.synth.len(),
        k: spec.k,
        empty_regions: None,
        wall_time_s: None,
    };
    match bound_theorem1(
        &t.model,
        &t.real,
        &t.synth,
        &t.partition,
        &t.table,
        &spec.bound,
        &t.world,
        sub_seed(seed, 100),
    ) {
        Ok(b) => row.set_bound(&b),
        Err(Error::Precondition { region, reason }) => {
            row.bound_status = format!("skipped: region {region}: {reason}");
        }
        Err(e) => return Err(e).context("bound evaluation"),
    }

    let trace_name = match point.axis {
        Some(_) => format!("trace_p{}_{seed}.csv", point.index),
        None => format!("trace_{seed}.csv"),
    };
    let path = opts.out.join(trace_name);
    t.trace
        .write_csv(BufWriter::new(create(&path)?))
        .with_context(|| format!("writing {}", path.display()))?;
    if write_model {
        let path = opts.out.join(format!("model_{seed}.sbm"));
        t.model
            .write_to(BufWriter::new(create(&path)?))
            .with_context(|| format!("writing {}", path.display()))?;
    }
    if opts.timing {
        row.wall_time_s = Some(start.elapsed().as_secs_f64());
    }
    log::info!(
        "point {} seed {seed}: acc {:.4}, bound {}",
        point.index,
        row.test_accuracy,
        row.bound_status
    );
    Ok(row)
}

fn create(path: &Path) -> Result<File> {
    File::create(path).with_context(|| format!("creating {}", path.display()))
}

fn write_report<T: serde::Serialize>(rows: &[T], name: &str, opts: &Options) -> Result<PathBuf> {
    let path = opts.out.join(format!("{name}.{}", opts.format.extension()));
    write_rows(rows, opts.format, BufWriter::new(create(&path)?))
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

fn run_points(cfg: &ExperimentConfig, points: &[Point], opts: &Options, write_model: bool) -> Result<Vec<ReportRow>> {
    fs::create_dir_all(&opts.out).with_context(|| format!("creating {}", opts.out.display()))?;
    let jobs: Vec<(&Point, u64)> = points
        .iter()
        .flat_map(|p| (0..cfg.trials).map(move |i| (p, cfg.seed.wrapping_add(i as u64))))
        .collect();
    jobs.par_iter()
        .map(|(p, seed)| trial_row(p, *seed, opts, write_model))
        .collect()
}

pub fn run(cfg: &ExperimentConfig, opts: &Options) -> Result<Outcome> {
    let point = Point {
        index: 0,
        axis: None,
        spec: cfg.spec.clone(),
        fingerprint: cfg.fingerprint(&[]),
    };
    let rows = run_points(cfg, std::slice::from_ref(&point), opts, true)?;
    let path = write_report(&rows, "report", opts)?;
    for r in &rows {
        println!(
            "seed {}: test accuracy {:.4}, disc {:.4}, rob {:.4}, bound {} (total {}, population {})",
            r.seed,
            r.test_accuracy,
            r.final_disc,
            r.final_rob,
            r.bound_status,
            fmt_opt(r.bound_total),
            fmt_opt(r.population_loss)
        );
    }
    println!("wrote {}", path.display());
    Ok(Outcome::Ok)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into())
}

pub fn sweep(cfg: &ExperimentConfig, opts: &Options) -> Result<Outcome> {
    let Some(sweep) = &cfg.sweep else {
        return Err(ConfigError("missing required field `sweep.axis`".into()).into());
    };
    let points: Vec<Point> = sweep
        .values
        .iter()
        .enumerate()
        .map(|(index, &v)| {
            Ok(Point {
                index,
                axis: Some((sweep.axis.as_str(), v)),
                spec: cfg.at_point(&sweep.axis, v)?,
                fingerprint: cfg.fingerprint(&[(sweep.axis.clone(), v.to_string())]),
            })
        })
        .collect::<Result<_, ConfigError>>()?;
    let rows = run_points(cfg, &points, opts, false)?;
    let report = write_report(&rows, "report", opts)?;
    let summary = summarize(&rows);
    let summary_path = write_report(&summary, "summary", opts)?;
    println!("{:>4} {:>14} {:>10} {:>10} {:>12}", "pt", sweep.axis, "acc", "acc_delta", "slack");
    for s in &summary {
        println!(
            "{:>4} {:>14} {:>10.4} {:>10} {:>12}",
            s.point,
            s.axis_value,
            s.test_accuracy_mean,
            fmt_opt(s.acc_delta_prev),
            fmt_opt(s.slack_mean)
        );
    }
    println!("wrote {} and {}", report.display(), summary_path.display());
    Ok(Outcome::Ok)
}

/// Largest violation rate accepted at confidence `δ` over `trials` trials:
/// `δ + 3 √(δ(1 − δ)/trials)`.
pub fn allowed_rate(delta: f64, trials: usize) -> f64 {
    delta + 3.0 * (delta * (1.0 - delta) / trials.max(1) as f64).sqrt()
}

pub fn verify(cfg: &ExperimentConfig, opts: &Options) -> Result<Outcome> {
    fs::create_dir_all(&opts.out).with_context(|| format!("creating {}", opts.out.display()))?;
    let report = verify_bound(&cfg.spec, cfg.bound, cfg.trials, cfg.seed)?;
    let path = opts.out.join("verification.json");
    let mut w = BufWriter::new(create(&path)?);
    serde_json::to_writer_pretty(&mut w, &report)?;
    let allowed = allowed_rate(cfg.spec.bound.delta, report.evaluated);
    println!("bound: {:?}", report.kind);
    println!(
        "trials {} evaluated {} skipped {}",
        report.trials, report.evaluated, report.skipped
    );
    println!(
        "violations {} rate {:.4} (allowed {:.4})",
        report.violations, report.rate, allowed
    );
    println!(
        "slack min {:.4} q05 {:.4} median {:.4} q95 {:.4} max {:.4}",
        report.slack_min, report.slack_q05, report.slack_median, report.slack_q95, report.slack_max
    );
    println!("wrote {}", path.display());
    Ok(if report.rate > allowed {
        Outcome::BoundFailed
    } else {
        Outcome::Ok
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn allowance() {
        assert!((allowed_rate(0.1, 100) - 0.19).abs() < 1e-12);
        assert!(allowed_rate(0.1, 0) > 0.1);
    }
}
