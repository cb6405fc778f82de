use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use qtca::pipeline::{
    emit_metrics, generate_domains, read_metrics, run_trials, summarize, thread_count, write_csv,
    ExperimentConfig, MetricsReport, ShiftSpec,
};
use qtca::{Error, Result};

#[derive(Parser)]
#[command(name = "qtca", version, about = "Transfer component analysis experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a shifted two-class dataset.
    Gen(GenArgs),
    /// Run the TCA + SVM pipeline and write metrics.
    Run(RunArgs),
    /// Summarize metrics written by `run`.
    Report {
        /// Output directory of a previous run.
        dir: PathBuf,
    },
}

#[derive(Args)]
struct GenArgs {
    /// Data file; target labels are written as `?`.
    #[arg(long, short)]
    output: PathBuf,
    /// Evaluation file with the true target labels.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    n_s: usize,
    #[arg(long, default_value_t = 8)]
    n_t: usize,
    #[arg(long, default_value_t = 2)]
    dim: usize,
    #[arg(long)]
    separation: Option<f64>,
    #[arg(long)]
    spread: Option<f64>,
    /// Target rotation in radians.
    #[arg(long, allow_negative_numbers = true)]
    rotation: Option<f64>,
    /// Target translation, comma separated.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    translation: Option<Vec<f64>>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct RunArgs {
    /// `key = value` configuration file.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// classical, qlinear or vqd.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of consecutive seeds to run, starting at the configured seed.
    #[arg(long, default_value_t = 1)]
    trials: u64,
    /// Output directory.
    #[arg(long, short)]
    output: Option<PathBuf>,
    /// Dataset CSV; replaces the generated dataset.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Evaluation CSV with true target labels.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    mu: Option<f64>,
    /// linear or rbf.
    #[arg(long)]
    kernel: Option<String>,
    /// exact or circuit.
    #[arg(long)]
    sim_mode: Option<String>,
    #[arg(long)]
    clock_qubits: Option<usize>,
    #[arg(long)]
    dme_slices: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    restarts: Option<usize>,
    #[arg(long)]
    xi_inv: Option<f64>,
    /// Any configuration key, as `key=value`; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl RunArgs {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        let flags = [
            ("mode", self.mode.clone()),
            ("seed", self.seed.map(|v| v.to_string())),
            ("output", self.output.as_ref().map(|p| p.display().to_string())),
            ("dataset.path", self.data.as_ref().map(|p| p.display().to_string())),
            ("dataset.labels", self.labels.as_ref().map(|p| p.display().to_string())),
            ("tca.d", self.d.map(|v| v.to_string())),
            ("tca.mu", self.mu.map(|v| v.to_string())),
            ("tca.kernel", self.kernel.clone()),
            ("sim.mode", self.sim_mode.clone()),
            ("sim.clock_qubits", self.clock_qubits.map(|v| v.to_string())),
            ("sim.dme_slices", self.dme_slices.map(|v| v.to_string())),
            ("vqd.layers", self.layers.map(|v| v.to_string())),
            ("vqd.restarts", self.restarts.map(|v| v.to_string())),
            ("svm.xi_inv", self.xi_inv.map(|v| v.to_string())),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                set_flag(&mut cfg, key, &v)?;
            }
        }
        for item in &self.sets {
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| Error::Parameter(format!("--set expects KEY=VALUE, found `{item}`")))?;
            set_flag(&mut cfg, k.trim(), v.trim())?;
        }
        Ok(cfg)
    }
}

/// Command-line settings have no line number to report.
fn set_flag(cfg: &mut ExperimentConfig, key: &str, value: &str) -> Result<()> {
    cfg.set(key, value, 0).map_err(|e| match e {
        Error::Parse { message, .. } => Error::Parameter(message),
        other => other,
    })
}

fn gen(args: &GenArgs) -> Result<()> {
    let defaults = ShiftSpec::default();
    let shift = ShiftSpec {
        separation: args.separation.unwrap_or(defaults.separation),
        spread: args.spread.unwrap_or(defaults.spread),
        rotation: args.rotation.unwrap_or(defaults.rotation),
        translation: args.translation.clone().unwrap_or(defaults.translation),
    };
    let data = generate_domains(&shift, args.n_s, args.n_t, args.dim, args.seed)?;
    write_csv(&data, &args.output, false)?;
    if let Some(path) = &args.labels {
        write_csv(&data, path, true)?;
    }
    log::info!("wrote {} source and {} target points", data.n_s(), data.n_t());
    Ok(())
}

fn write(path: &Path, content: &str) -> Result<()> {
    fs::write(path, content).map_err(|e| Error::io(path, e))
}

fn summary_csv(reports: &[MetricsReport]) -> String {
    let mut out = String::from("metric,value\n");
    for (k, v) in summarize(reports) {
        if v.is_nan() {
            writeln!(out, "{k},NA").unwrap();
        } else {
            writeln!(out, "{k},{v:?}").unwrap();
        }
    }
    out
}

fn print_report(report: &MetricsReport) {
    let acc = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.3}"));
    println!(
        "seed {:>4}  mode {:<9}  mmd {:.4} -> {:.4}  target acc {}  (raw features {})",
        report.seed,
        report.mode.to_string(),
        report.mmd_before,
        report.mmd_after,
        acc(report.target_accuracy),
        acc(report.baseline_target_accuracy),
    );
}

fn run(args: &RunArgs) -> Result<()> {
    let cfg = args.config()?;
    let out = cfg.output.clone().unwrap_or_else(|| PathBuf::from("qtca-out"));
    if args.trials == 0 {
        return Err(Error::Parameter("--trials must be positive".into()));
    }
    cfg.validate()?;
    let seeds: Vec<u64> = (cfg.seed..cfg.seed + args.trials).collect();
    let results = run_trials(&cfg, &seeds, thread_count()?)?;
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    write(&out.join("config.txt"), &cfg.to_text())?;

    let mut reports = Vec::with_capacity(results.len());
    for (seed, result) in seeds.iter().zip(results) {
        let result = result?;
        let dir = if seeds.len() == 1 { out.clone() } else { out.join(format!("seed_{seed}")) };
        emit_metrics(&result, &dir)?;
        print_report(&result.report);
        reports.push(result.report);
    }
    if reports.len() > 1 {
        let summary = summary_csv(&reports);
        write(&out.join("summary.csv"), &summary)?;
        print!("{summary}");
    }
    Ok(())
}

fn report(dir: &Path) -> Result<()> {
    let single = dir.join("metrics.csv");
    let mut reports = Vec::new();
    if single.is_file() {
        reports.push(read_metrics(&single)?);
    } else {
        let mut subdirs: Vec<(u64, PathBuf)> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|entry| {
                let path = entry.ok()?.path();
                let seed = path.file_name()?.to_str()?.strip_prefix("seed_")?.parse().ok()?;
                Some((seed, path.join("metrics.csv")))
            })
            .collect();
        subdirs.sort();
        for (_, path) in subdirs {
            reports.push(read_metrics(&path)?);
        }
    }
    if reports.is_empty() {
        return Err(Error::Format(format!("no metrics.csv under {}", dir.display())));
    }
    for r in &reports {
        print_report(r);
    }
    if reports.len() > 1 {
        print!("{}", summary_csv(&reports));
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Gen(args) => gen(args),
        Command::Run(args) => run(args),
        Command::Report { dir } => report(dir),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
