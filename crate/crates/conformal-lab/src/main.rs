//! Command line front end: coverage simulations, brute-force
//! self-checks, and single prediction sets from a CSV table.

use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use conformal_lab::config::{run_simulation, SimConfig};
use conformal_lab::engine::{derive_rng, prediction_set};
use conformal_lab::methods::{KernelSpec, Method, SwapWeights};
use conformal_lab::oracle::{equivalence_suite, exact_type1_suite};
use conformal_lab::scores;
use conformal_lab::{DataPoint, Error, Result, ScoreFunction};

#[derive(Parser)]
#[command(name = "conformal-lab", version, about = "Conformal prediction toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a coverage or superuniformity simulation from a JSON config.
    Simulate(SimulateArgs),
    /// Check every shortcut p-value against brute-force enumeration.
    OracleCheck(OracleCheckArgs),
    /// Compute one prediction set from a training CSV.
    Predict(PredictArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Path to the JSON configuration.
    #[arg(long)]
    config: PathBuf,
    /// Write the CSV report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the reports as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
    /// Override the seed from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the trial count from the config.
    #[arg(long)]
    trials: Option<usize>,
    /// Run trials on a single thread.
    #[arg(long)]
    serial: bool,
}

#[derive(Args)]
struct OracleCheckArgs {
    /// Largest augmented data size to enumerate.
    #[arg(long, default_value_t = 5)]
    max_n: usize,
    /// Random instances per method.
    #[arg(long, default_value_t = 200)]
    cases: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct PredictArgs {
    /// Training CSV: one row per point, features then response.
    #[arg(long)]
    train: PathBuf,
    /// Test features, comma separated.
    #[arg(long)]
    x: String,
    /// One of: standard_cp, split_cp, wcp, wcp_unnormalized, nexcp,
    /// rlcp, rlcp_resample.
    #[arg(long)]
    method: String,
    #[arg(long, default_value_t = 0.1)]
    alpha: f64,
    /// Response grid as lo:hi:step.
    #[arg(long)]
    y_grid: String,
    /// Score: abs_residual_mean, abs_residual_ls, recency_weighted_ls:<decay>,
    /// knn_residual:<k>.
    #[arg(long, default_value = "abs_residual_mean")]
    score: String,
    /// Calibration comes after the first n0 rows (split_cp).
    #[arg(long)]
    n0: Option<usize>,
    /// Kernel bandwidth (rlcp, rlcp_resample).
    #[arg(long)]
    bandwidth: Option<f64>,
    /// Geometric swap weight decay (nexcp).
    #[arg(long)]
    decay: Option<f64>,
    /// Point weight exp(coef * x_1) (wcp, wcp_unnormalized).
    #[arg(long)]
    weight_coef: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Simulate(args) => simulate(args),
        Command::OracleCheck(args) => oracle_check(args),
        Command::Predict(args) => predict(args),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn simulate(args: SimulateArgs) -> Result<ExitCode> {
    let text = std::fs::read_to_string(&args.config)?;
    let mut cfg = SimConfig::from_json(&text)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(trials) = args.trials {
        cfg.trials = trials;
    }
    let (csv, reports) = run_simulation(&cfg, !args.serial)?;
    match &args.out {
        Some(path) => std::fs::write(path, &csv)?,
        None => print!("{csv}"),
    }
    if let Some(path) = &args.json {
        let text = serde_json::to_string_pretty(&reports)
            .map_err(|e| Error::Config(format!("report serialization failed: {e}")))?;
        std::fs::write(path, text)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn oracle_check(args: OracleCheckArgs) -> Result<ExitCode> {
    let mut all_ok = true;
    for (label, report) in equivalence_suite(args.max_n, args.cases, args.seed)? {
        match &report.first_failure {
            None => println!(
                "PASS {label}: {} cases, max |diff| = {:.3e}",
                report.cases_checked, report.max_abs_diff
            ),
            Some(detail) => {
                all_ok = false;
                println!("FAIL {label}: {detail}");
            }
        }
    }
    for (label, alpha, rejection) in exact_type1_suite()? {
        if rejection <= alpha {
            println!("PASS type1 {label} @ {alpha:.1}: rejection {rejection:.6} <= alpha");
        } else {
            all_ok = false;
            println!("FAIL type1 {label} @ {alpha:.1}: rejection {rejection:.6} > alpha");
        }
    }
    Ok(if all_ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn parse_floats(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|f| {
            f.trim()
                .parse::<f64>()
                .map_err(|_| Error::InvalidArgument(format!("not a number: {f:?}")))
        })
        .collect()
}

fn read_training(path: &PathBuf) -> Result<Vec<DataPoint>> {
    let text = std::fs::read_to_string(path)?;
    let mut points = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let vals = parse_floats(line)?;
        if vals.len() < 2 {
            return Err(Error::InvalidArgument(
                "each row needs at least one feature and a response".into(),
            ));
        }
        let (y, x) = vals.split_last().expect("checked length above");
        points.push(DataPoint::new(x.to_vec(), *y)?);
    }
    if points.is_empty() {
        return Err(Error::InvalidArgument("training table is empty".into()));
    }
    Ok(points)
}

fn parse_grid(spec: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = spec.split(':').collect();
    if parts.len() != 3 {
        return Err(Error::InvalidArgument(
            "response grid must look like lo:hi:step".into(),
        ));
    }
    let lo: f64 = parts[0]
        .parse()
        .map_err(|_| Error::InvalidArgument("bad grid start".into()))?;
    let hi: f64 = parts[1]
        .parse()
        .map_err(|_| Error::InvalidArgument("bad grid end".into()))?;
    let step: f64 = parts[2]
        .parse()
        .map_err(|_| Error::InvalidArgument("bad grid step".into()))?;
    if !(step > 0.0) || hi < lo {
        return Err(Error::InvalidArgument(
            "grid needs hi >= lo and step > 0".into(),
        ));
    }
    let count = ((hi - lo) / step).floor() as usize + 1;
    Ok((0..count).map(|i| lo + step * i as f64).collect())
}

fn parse_score(spec: &str) -> Result<ScoreFunction> {
    let (name, param) = match spec.split_once(':') {
        Some((n, p)) => (n, Some(p)),
        None => (spec, None),
    };
    match (name, param) {
        ("abs_residual_mean", None) => Ok(scores::abs_residual_mean()),
        ("abs_residual_ls", None) => Ok(scores::abs_residual_ls()),
        ("recency_weighted_ls", Some(p)) => {
            let decay: f64 = p
                .parse()
                .map_err(|_| Error::InvalidArgument("bad decay".into()))?;
            scores::recency_weighted_ls(decay)
        }
        ("knn_residual", Some(p)) => {
            let k: usize = p
                .parse()
                .map_err(|_| Error::InvalidArgument("bad neighbor count".into()))?;
            scores::knn_residual(k)
        }
        _ => Err(Error::InvalidArgument(format!("unknown score {spec:?}"))),
    }
}

fn predict(args: PredictArgs) -> Result<ExitCode> {
    let training = read_training(&args.train)?;
    let x_test = parse_floats(&args.x)?;
    let y_grid = parse_grid(&args.y_grid)?;
    let score = parse_score(&args.score)?;
    let n = training.len() + 1;
    let method = match args.method.as_str() {
        "standard_cp" => Method::standard_cp(score)?,
        "split_cp" => {
            let n0 = args
                .n0
                .ok_or_else(|| Error::InvalidArgument("split_cp needs --n0".into()))?;
            Method::split_cp(score, n0)?
        }
        "wcp" | "wcp_unnormalized" => {
            let coef = args.weight_coef.ok_or_else(|| {
                Error::InvalidArgument("weighted methods need --weight-coef".into())
            })?;
            let w = Arc::new(move |p: &DataPoint| (coef * p.x()[0]).exp());
            if args.method == "wcp" {
                Method::wcp(score, w)?
            } else {
                Method::wcp_unnormalized(score, w)?
            }
        }
        "nexcp" => {
            let decay = args
                .decay
                .ok_or_else(|| Error::InvalidArgument("nexcp needs --decay".into()))?;
            Method::nexcp(score, SwapWeights::geometric(n, decay)?)?
        }
        "rlcp" | "rlcp_resample" => {
            let bw = args.bandwidth.ok_or_else(|| {
                Error::InvalidArgument("localized methods need --bandwidth".into())
            })?;
            let kernel = KernelSpec::gaussian(bw)?;
            if args.method == "rlcp" {
                Method::rlcp(score, kernel)?
            } else {
                Method::rlcp_resample(score, kernel)?
            }
        }
        other => {
            return Err(Error::InvalidArgument(format!(
                "method {other:?} is not available from the command line"
            )))
        }
    };
    let mut rng = derive_rng(args.seed, 0);
    let grid = prediction_set(&method, &training, &x_test, &y_grid, args.alpha, &mut rng)?;
    println!("y,p,member");
    for gp in &grid {
        println!("{},{},{}", gp.y, gp.p, gp.member as u8);
    }
    let members: Vec<f64> = grid.iter().filter(|g| g.member).map(|g| g.y).collect();
    match (members.first(), members.last()) {
        (Some(lo), Some(hi)) => eprintln!(
            "set: {} of {} grid points in [{lo}, {hi}]",
            members.len(),
            grid.len()
        ),
        _ => eprintln!("set: empty on this grid"),
    }
    Ok(ExitCode::SUCCESS)
}
