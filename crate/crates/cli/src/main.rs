//! `synthgap`: experiments, sweeps and bound verification campaigns.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 bad config or arguments,
//! 3 bound violation rate above its allowance.

mod commands;
mod config;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{Options, Outcome};
use config::{ConfigError, KEYS};
use report::Format;

#[derive(Parser, Debug)]
#[command(
    name = "synthgap",
    version,
    about = "Train on real + synthetic data and check generalization bounds by simulation",
    after_help = "Any config key can be overridden as `--key value`, e.g. `--train.epochs 5 --K 3`."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 uses every core).
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    /// Output directory.
    #[arg(long, global = true, default_value = "synthgap-out")]
    out: PathBuf,
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,
    /// Record per-row wall time (makes reports non-reproducible).
    #[arg(long, global = true)]
    timing: bool,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// One experiment per seed: sample, cluster, train, evaluate, bound.
    Run,
    /// Repeat `run` over a grid of one parameter.
    Sweep,
    /// Monte Carlo campaign counting bound violations.
    VerifyBound,
    /// List config keys.
    Keys,
}

/// Pulls `--key value` and `--key=value` config overrides out of argv.
fn split_overrides(args: Vec<String>) -> (Vec<String>, Vec<(String, String)>) {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let Some(body) = arg.strip_prefix("--") else {
            rest.push(arg);
            continue;
        };
        let (key, inline) = match body.split_once('=') {
            Some((k, v)) => (k, Some(v.to_string())),
            None => (body, None),
        };
        if key == "seed" || !KEYS.iter().any(|(k, _)| *k == key) {
            rest.push(arg);
            continue;
        }
        let key = key.to_string();
        match inline.or_else(|| it.next()) {
            Some(v) => overrides.push((key, v)),
            // Leave it for clap to reject.
            None => rest.push(arg),
        }
    }
    (rest, overrides)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let (args, overrides) = split_overrides(std::env::args().collect());
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };

    if let Command::Keys = cli.command {
        for (k, help) in KEYS {
            println!("{k:<24} {help}");
        }
        return ExitCode::SUCCESS;
    }

    let cfg = match load(&cli, &overrides) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let opts = Options {
        out: cli.out.clone(),
        format: cli.format,
        timing: cli.timing,
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.jobs).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    let result = pool.install(|| match cli.command {
        Command::Run => commands::run(&cfg, &opts),
        Command::Sweep => commands::sweep(&cfg, &opts),
        Command::VerifyBound => commands::verify(&cfg, &opts),
        Command::Keys => unreachable!(),
    });
    match result {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::BoundFailed) => ExitCode::from(3),
        Err(e) if e.is::<ConfigError>() => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn load(cli: &Cli, overrides: &[(String, String)]) -> Result<config::ExperimentConfig, ConfigError> {
    let text = match &cli.config {
        Some(path) => std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?,
        None => String::new(),
    };
    let mut cfg = config::parse(&text, overrides)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn strings(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn overrides_are_split_from_flags() {
        let (rest, o) = split_overrides(strings(&[
            "synthgap", "run", "--config", "a.toml", "--seed", "5", "--train.epochs", "3", "--K=4",
            "--bogus", "1",
        ]));
        assert_eq!(rest, strings(&["synthgap", "run", "--config", "a.toml", "--seed", "5", "--bogus", "1"]));
        assert_eq!(o, vec![("train.epochs".into(), "3".into()), ("K".into(), "4".into())]);
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
