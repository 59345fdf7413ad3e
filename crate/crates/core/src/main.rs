use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use pehcm::config::{DataSource, RunConfig};
use pehcm::data::{write_binary, write_csv};
use pehcm::io::write_atomic;
use pehcm::network::checkpoint::Checkpoint;
use pehcm::network::gradcheck::{check_tiny, TinyProblem};
use pehcm::network::objective::BackwardFault;
use pehcm::network::Space;
use pehcm::plot::{distance_curves_svg, sweep_csv, sweep_point_from_report, sweep_svg};
use pehcm::train::{cluster_inspect, evaluate, load_dataset, parse_metrics, train_to_dir};
use pehcm::{Error, Result};

#[derive(Parser)]
#[command(name = "pehcm", version, about = "Poincaré embeddings with hierarchical cosine margins")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Config file plus `key=value` overrides, applied in order.
#[derive(clap::Args)]
struct ConfigArgs {
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set alpha=400`. Repeatable; later wins.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        for kv in &self.overrides {
            cfg.apply_override(kv)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Bin,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic train/eval splits as dataset files.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
    },
    /// Train and write checkpoint, metrics and resolved config to `out_dir`.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Few-shot and retrieval evaluation of a checkpoint; prints JSON.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every gradient on a tiny problem.
    Gradcheck {
        #[arg(long, default_value_t = pehcm::hcm::DEFAULT_ALPHA)]
        alpha: f64,
        #[arg(long, default_value = "hyperbolic")]
        space: String,
        #[arg(long, default_value_t = 0.5)]
        curvature: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true)]
        corrupt: bool,
    },
    /// Per-class centroid counts and assignment histograms as JSON.
    ClusterInspect {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Render d1/d2 curves from metrics.csv, or an alpha sweep from reports.
    Plot {
        #[arg(long, conflicts_with = "sweep")]
        metrics: Option<PathBuf>,
        /// `ALPHA=REPORT.json`, repeatable.
        #[arg(long, value_name = "ALPHA=REPORT")]
        sweep: Vec<String>,
        /// Output path; sweeps write `<out>.csv` and `<out>.svg`.
        #[arg(long)]
        out: PathBuf,
    },
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { cfg, out_dir, format } => {
            let cfg = cfg.resolve()?;
            if !matches!(cfg.data, DataSource::Synthetic(_)) {
                return Err(Error::Config("gen-data needs a synthetic data source".into()));
            }
            let data = load_dataset(&cfg)?;
            let (write, ext): (fn(&Path, &[_], usize) -> Result<()>, _) = match format {
                Format::Csv => (write_csv, "csv"),
                Format::Bin => (write_binary, "bin"),
            };
            write(&out_dir.join(format!("train.{ext}")), &data.train, data.dim)?;
            write(&out_dir.join(format!("eval.{ext}")), &data.eval, data.dim)?;
            write_atomic(&out_dir.join("config.resolved"), cfg.to_text().as_bytes())?;
            println!(
                "{}",
                serde_json::json!({"train": data.train.len(), "eval": data.eval.len(), "dim": data.dim})
            );
        }
        Command::Train { cfg, out_dir } => {
            let cfg = cfg.resolve()?;
            let out = train_to_dir(&cfg, &out_dir)?;
            if let Some(last) = out.metrics.last() {
                println!(
                    "{}",
                    serde_json::json!({
                        "epochs": last.epoch, "total": last.total, "l_cls": last.l_cls,
                        "l_hcm": last.l_hcm, "d1": last.d1, "d2": last.d2,
                        "train_coarse_acc": last.train_coarse_acc,
                    })
                );
            }
        }
        Command::Eval { cfg, checkpoint, out } => {
            let cfg = cfg.resolve()?;
            let ck = Checkpoint::load(&checkpoint)?;
            let data = load_dataset(&cfg)?;
            let json = evaluate(&ck.model, &data, &cfg)?.to_json();
            if let Some(path) = out {
                write_atomic(&path, json.as_bytes())?;
            }
            println!("{json}");
        }
        Command::Gradcheck {
            alpha,
            space,
            curvature,
            seed,
            corrupt,
        } => {
            let problem = TinyProblem {
                alpha,
                space: space.parse::<Space>()?,
                curvature,
                seed,
                fault: corrupt.then_some(BackwardFault::IdentityExpMap),
            };
            let report = check_tiny(&problem)?;
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
            if !report.passed {
                return Err(Error::Contract(format!(
                    "max relative error {:.3e} exceeds {:.0e}",
                    report.max_rel_err, report.tolerance
                )));
            }
        }
        Command::ClusterInspect { cfg, checkpoint } => {
            let cfg = cfg.resolve()?;
            let ck = Checkpoint::load(&checkpoint)?;
            let data = load_dataset(&cfg)?;
            let report = cluster_inspect(&ck.model, &data, &cfg)?;
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
        }
        Command::Plot { metrics, sweep, out } => {
            if let Some(path) = metrics {
                let rows = parse_metrics(&read(&path)?)?;
                write_atomic(&out, distance_curves_svg(&rows)?.as_bytes())?;
            } else if !sweep.is_empty() {
                let points = sweep
                    .iter()
                    .map(|item| {
                        let (a, p) = item
                            .split_once('=')
                            .ok_or_else(|| Error::Config(format!("sweep entry '{item}' is not ALPHA=REPORT")))?;
                        let alpha = a
                            .parse::<f64>()
                            .map_err(|_| Error::Config(format!("bad alpha '{a}'")))?;
                        sweep_point_from_report(alpha, &read(Path::new(p))?)
                    })
                    .collect::<Result<Vec<_>>>()?;
                write_atomic(&out.with_extension("csv"), sweep_csv(&points).as_bytes())?;
                write_atomic(&out.with_extension("svg"), sweep_svg(&points)?.as_bytes())?;
            } else {
                return Err(Error::Config("plot needs --metrics or at least one --sweep".into()));
            }
        }
    }
    Ok(())
}

fn init_threads() -> Result<()> {
    let threads = match std::env::var("PEHCM_THREADS") {
        Ok(v) => v
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Config(format!("PEHCM_THREADS must be a positive integer, got '{v}'")))?,
        Err(_) => 1,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match init_threads().and_then(|()| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", serde_json::json!({"error": e.kind(), "message": e.to_string()}));
            ExitCode::FAILURE
        }
    }
}
