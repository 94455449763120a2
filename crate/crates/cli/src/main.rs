use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::{error, info};
use serde_json::json;

use clipbench::config::{RunConfigFile, SweepConfigFile};
use clipbench::policy::TokenEnv;
use clipbench::ranges::{solve_kl3_range, SMALL_DELTA};
use clipbench::report::{render_report, summary_table, DEFAULT_SMOOTH_WINDOW};
use clipbench::trainer::{sweep, train, TrainState};
use clipbench::verify::{
    log_uniform_deltas, verify_theorem1, verify_theorem2, verify_theorem3_suite, verify_theorem4_suite, Report,
    DEFAULT_ETAS,
};
use clipbench::Error;

const EXIT_VERIFY: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

/// Default KL3 threshold for the event constructions.
const EVENT_DELTA: f64 = 0.07;

#[derive(Parser)]
#[command(name = "clipbench", version, about = "Clipping-rule testbed: KL3 ranges, theorem checks, tabular GRPO runs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Json,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Which {
    All,
    T1,
    T2,
    T3,
    T4,
}

#[derive(Subcommand)]
enum Command {
    /// Ratio range equivalent to the constraint kl3(r) <= delta.
    Ranges {
        #[arg(long, allow_negative_numbers = true)]
        delta: f64,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
    },
    /// Run numerical verification suites; exits 1 if any fails.
    Verify {
        #[arg(long, value_enum, default_value = "all")]
        which: Which,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory for one JSON report per suite.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train several configurations over several seeds.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Chart run directories and print a final (best) summary.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_SMOOTH_WINDOW)]
        smooth_window: usize,
    },
}

/// An error paired with the exit code it maps to.
struct Failure(u8, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) | Error::Domain(_) | Error::Resource(_) | Error::Json(_) => EXIT_CONFIG,
            _ => EXIT_RUNTIME,
        };
        Failure(code, e.to_string())
    }
}

fn config_failure(e: Error) -> Failure {
    Failure(EXIT_CONFIG, e.to_string())
}

fn cmd_ranges(delta: f64, format: Format) -> Result<(), Failure> {
    let range = solve_kl3_range(delta).map_err(config_failure)?;
    let (res_l, res_u) = range.residuals();
    let method = if delta < SMALL_DELTA { "small_delta" } else { "lambert_w" };
    match format {
        Format::Json => {
            let doc = json!({
                "delta": delta,
                "lower": range.lower,
                "upper": range.upper,
                "lower_gap": range.lower_gap(),
                "upper_gap": range.upper_gap(),
                "residual_lower": res_l,
                "residual_upper": res_u,
                "method": method,
            });
            println!("{doc}");
        }
        Format::Text => {
            println!("delta           {delta}");
            println!("lower           {:.6}", range.lower);
            println!("upper           {:.6}", range.upper);
            println!("1 - lower       {:.6}", range.lower_gap());
            println!("upper - 1       {:.6}", range.upper_gap());
            println!("|kl3(l) - d|    {res_l:.3e}");
            println!("|kl3(u) - d|    {res_u:.3e}");
            println!("method          {method}");
        }
    }
    Ok(())
}

fn run_suite(which: Which, seed: u64) -> clipbench::Result<Report> {
    match which {
        Which::T1 => verify_theorem1(200, seed),
        Which::T2 => verify_theorem2(&log_uniform_deltas(10_000, 1e-6, 5.0, seed)),
        Which::T3 => verify_theorem3_suite(EVENT_DELTA, 100, seed),
        Which::T4 => verify_theorem4_suite(EVENT_DELTA, &DEFAULT_ETAS, 50, seed),
        Which::All => unreachable!("expanded by the caller"),
    }
}

fn cmd_verify(which: Which, seed: u64, out: Option<&Path>) -> Result<(), Failure> {
    let suites: Vec<Which> = if which == Which::All {
        vec![Which::T1, Which::T2, Which::T3, Which::T4]
    } else {
        vec![which]
    };
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(Error::from)?;
    }
    let mut all_pass = true;
    for suite in suites {
        let report = run_suite(suite, seed)?;
        let text = serde_json::to_string(&report).map_err(Error::from)?;
        println!("{text}");
        if let Some(dir) = out {
            fs::write(dir.join(format!("{}.json", report.theorem)), text + "\n").map_err(Error::from)?;
        }
        info!("{}: pass={}", report.theorem, report.pass);
        all_pass &= report.pass;
    }
    if all_pass {
        Ok(())
    } else {
        Err(Failure(EXIT_VERIFY, "verification failed".into()))
    }
}

fn resolve_out(flag: Option<PathBuf>, file: Option<PathBuf>) -> Result<PathBuf, Failure> {
    flag.or(file)
        .ok_or_else(|| Failure(EXIT_CONFIG, "no output directory: pass --out or set out_dir".into()))
}

fn cmd_train(config: &Path, out: Option<PathBuf>) -> Result<(), Failure> {
    let cfg = RunConfigFile::load(config).map_err(config_failure)?;
    let out = resolve_out(out, cfg.out_dir.clone())?;
    let env = TokenEnv::new(cfg.env.clone()).map_err(config_failure)?;
    match train(TrainState::new(env), &cfg.train, Some(&out)) {
        Ok(run) => {
            println!("{}", serde_json::to_string(&run.summary).map_err(Error::from)?);
            Ok(())
        }
        Err(Error::Training { step, message, dump }) => {
            let _ = fs::create_dir_all(&out);
            let _ = fs::write(out.join("failure.json"), &dump);
            eprintln!("{dump}");
            Err(Failure(EXIT_RUNTIME, format!("training diverged at step {step}: {message}")))
        }
        Err(e) => Err(e.into()),
    }
}

fn cmd_sweep(config: &Path, out: Option<PathBuf>, jobs: usize) -> Result<(), Failure> {
    let cfg = SweepConfigFile::load(config).map_err(config_failure)?;
    let out = resolve_out(out, cfg.out_dir.clone())?;
    let env = TokenEnv::new(cfg.env.clone()).map_err(config_failure)?;
    let records = sweep(&env, &cfg.runs, &cfg.seeds, &out, jobs)?;
    let mut failed = 0;
    for r in &records {
        if let Some(e) = &r.error {
            error!("{}: {e}", r.dir);
            failed += 1;
        }
    }
    println!("{}", serde_json::to_string(&records).map_err(Error::from)?);
    if failed > 0 {
        Err(Failure(EXIT_RUNTIME, format!("{failed} of {} runs failed", records.len())))
    } else {
        Ok(())
    }
}

fn cmd_report(runs: &[PathBuf], out: &Path, window: usize) -> Result<(), Failure> {
    if window == 0 {
        return Err(Failure(EXIT_CONFIG, "--smooth-window must be positive".into()));
    }
    let output = render_report(runs, out, window).map_err(|e| Failure(EXIT_RUNTIME, e.to_string()))?;
    for (dir, reason) in &output.failures {
        eprintln!("skipped {}: {reason}", dir.display());
    }
    print!("{}", summary_table(&output.lines, window));
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CLIPBENCH_LOG", "error")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Ranges { delta, format } => cmd_ranges(delta, format),
        Command::Verify { which, seed, out } => cmd_verify(which, seed, out.as_deref()),
        Command::Train { config, out } => cmd_train(&config, out),
        Command::Sweep { config, out, jobs } => cmd_sweep(&config, out, jobs),
        Command::Report { runs, out, smooth_window } => cmd_report(&runs, &out, smooth_window),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure(code, message)) => {
            eprintln!("error: {message}");
            ExitCode::from(code)
        }
    }
}
