use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use serde_json::json;

use seqot_core::align::compute_pseudo_labels;
use seqot_core::config::RunConfig;
use seqot_core::encoder::EncoderModel;
use seqot_core::eval::{evaluate, Evaluation};
use seqot_core::io::{read_dataset, read_features, write_dataset, write_matrix, write_table};
use seqot_core::priors::Match;
use seqot_core::synth::generate;
use seqot_core::train::{log_to_csv, train};
use seqot_core::Error;

const CONFIG_ENV: &str = "SEQOT_CONFIG";

#[derive(Parser)]
#[command(name = "seqot", version, about = "Optimal-transport sequence alignment and action segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Config file (`key = value` lines); defaults to $SEQOT_CONFIG when set.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set solver.epsilon=0.05`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Output directory (paths.dataset).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Align two feature sequences.
    Solve {
        #[command(flatten)]
        common: Common,
        x: PathBuf,
        y: PathBuf,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long)]
        rho: Option<f64>,
        #[arg(long)]
        zeta: Option<f64>,
        #[arg(long)]
        radius: Option<f64>,
        /// Solve without the virtual frame.
        #[arg(long)]
        no_virtual: bool,
        /// Output directory (paths.output).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train an encoder on a dataset directory.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// align-only, seg-only or joint.
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Directory for train_log.csv (paths.output).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate a checkpoint (or raw features) on a dataset directory.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, conflicts_with = "raw")]
        checkpoint: Option<PathBuf>,
        /// Evaluate the raw features instead of a trained encoder.
        #[arg(long)]
        raw: bool,
        /// per-video or full-dataset.
        #[arg(long)]
        matching: Option<String>,
        /// Directory for per-pair and per-frame CSVs.
        #[arg(long)]
        plot_data: Option<PathBuf>,
        /// Directory for metrics.json (paths.output).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn load_config(common: &Common) -> Result<RunConfig, Failure> {
    let path = common.config.clone().or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from));
    let mut cfg = match &path {
        Some(p) => RunConfig::load(p).map_err(|e| Failure::Usage(e.to_string()))?,
        None => RunConfig::default(),
    };
    for o in &common.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got `{o}`")))?;
        cfg.set(k.trim(), v).map_err(|e| Failure::Usage(e.to_string()))?;
    }
    Ok(cfg)
}

fn set(cfg: &mut RunConfig, key: &str, value: Option<impl ToString>) -> Result<(), Failure> {
    if let Some(v) = value {
        cfg.set(key, &v.to_string()).map_err(|e| Failure::Usage(e.to_string()))?;
    }
    Ok(())
}

fn set_path(cfg: &mut RunConfig, key: &str, value: &Option<PathBuf>) -> Result<(), Failure> {
    set(cfg, key, value.as_ref().map(|p| p.display().to_string()))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), Failure> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Failure::Runtime(format!("{}: {e}", parent.display())))?;
    }
    let text = serde_json::to_string_pretty(value).expect("JSON values serialize");
    fs::write(path, text + "\n").map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn finish(cfg: &RunConfig) -> CmdResult {
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))
}

fn cmd_synth(cfg: &RunConfig) -> CmdResult {
    let ds = generate(&cfg.synth)?;
    let dir = &cfg.paths.dataset;
    write_dataset(dir, &ds)?;
    let frames: usize = ds.videos.iter().map(|v| v.len()).sum();
    let summary = json!({
        "path": dir.display().to_string(),
        "seed": cfg.seed,
        "videos": ds.videos.len(),
        "pairs": ds.pairs.len(),
        "frames": frames,
        "dim": ds.params.dim,
        "classes": ds.n_classes(),
        "train_videos": ds.train_split(),
    });
    println!("{summary}");
    Ok(())
}

fn cmd_solve(cfg: &RunConfig, x: &Path, y: &Path) -> CmdResult {
    let xs = read_features(x)?;
    let ys = read_features(y)?;
    let labels = compute_pseudo_labels(&xs, &ys, &cfg.align)?;
    let out = &cfg.paths.output;
    write_matrix(&out.join("coupling.csv"), labels.coupling.values())?;
    write_table(
        &out.join("correspondences.csv"),
        &["i", "j"],
        labels.correspondences.x_to_y.iter().enumerate().map(|(i, m)| {
            vec![
                i.to_string(),
                match m {
                    Match::Frame(j) => j.to_string(),
                    Match::Virtual => "VIRTUAL".to_string(),
                },
            ]
        }),
    )?;
    let r = &labels.report;
    let report = json!({
        "iterations": r.iterations,
        "final_objective": r.final_objective(),
        "converged": r.converged,
        "objectives": r.objectives,
        "changes": r.changes,
        "inner_iterations": r.inner_iterations,
        "projection_converged": r.projection_converged,
        "rows": xs.len(),
        "cols": ys.len(),
        "virtual": labels.has_virtual,
    });
    write_json(&out.join("report.json"), &report)?;
    info!(
        "solved {}x{} in {} iterations (converged: {})",
        xs.len(),
        ys.len(),
        r.iterations,
        r.converged
    );
    Ok(())
}

fn cmd_train(cfg: &RunConfig) -> CmdResult {
    let ds = read_dataset(&cfg.paths.dataset)?;
    info!(
        "training {} on {} videos for {} epochs",
        cfg.train.mode,
        ds.train_split(),
        cfg.train.epochs
    );
    let (model, log) = train(&ds, &cfg.train)?;
    model.save(&cfg.paths.checkpoint)?;
    let log_path = cfg.paths.output.join("train_log.csv");
    if let Some(parent) = log_path.parent() {
        fs::create_dir_all(parent).map_err(|e| Failure::Runtime(format!("{}: {e}", parent.display())))?;
    }
    fs::write(&log_path, log_to_csv(&log)).map_err(|e| Failure::Runtime(format!("{}: {e}", log_path.display())))?;
    if let Some(last) = log.last() {
        info!("final loss {:.6} after {} steps", last.loss, last.step + 1);
    }
    Ok(())
}

fn write_plot_data(dir: &Path, ev: &Evaluation, cfg: &RunConfig) -> CmdResult {
    write_table(
        &dir.join("pair_tau.csv"),
        &["a", "b", "tau"],
        ev.pair_taus.iter().map(|(a, b, t)| vec![a.to_string(), b.to_string(), t.to_string()]),
    )?;
    write_table(
        &dir.join("matches.csv"),
        &["a", "b", "i", "j"],
        ev.pair_taus.iter().zip(&ev.matches).flat_map(|((a, b, _), m)| {
            m.iter()
                .enumerate()
                .map(move |(i, j)| vec![a.to_string(), b.to_string(), i.to_string(), j.to_string()])
        }),
    )?;
    let ds = read_dataset(&cfg.paths.dataset)?;
    write_table(
        &dir.join("segmentation.csv"),
        &["video", "frame", "predicted", "label"],
        ev.test_videos.iter().zip(&ev.segmentation).flat_map(|(&v, pred)| {
            let gt = ds.videos[v].labels.clone();
            pred.iter()
                .zip(gt)
                .enumerate()
                .map(move |(i, (p, g))| vec![v.to_string(), i.to_string(), p.to_string(), g.to_string()])
        }),
    )?;
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, raw: bool, plot_data: Option<&Path>) -> CmdResult {
    let ds = read_dataset(&cfg.paths.dataset)?;
    let model = if raw {
        None
    } else {
        Some(EncoderModel::load(&cfg.paths.checkpoint)?)
    };
    let ev = evaluate(model.as_ref(), &ds, &cfg.eval)?;
    let report = serde_json::to_value(&ev.report).expect("reports serialize");
    write_json(&cfg.paths.output.join("metrics.json"), &report)?;
    if let Some(dir) = plot_data {
        write_plot_data(dir, &ev, cfg)?;
    }
    println!("{report}");
    Ok(())
}

fn run(cli: Cli) -> CmdResult {
    match cli.command {
        Command::Synth { common, out } => {
            let mut cfg = load_config(&common)?;
            set_path(&mut cfg, "paths.dataset", &out)?;
            finish(&cfg)?;
            cmd_synth(&cfg)
        }
        Command::Solve {
            common,
            x,
            y,
            alpha,
            epsilon,
            rho,
            zeta,
            radius,
            no_virtual,
            out,
        } => {
            let mut cfg = load_config(&common)?;
            set(&mut cfg, "solver.alpha", alpha)?;
            set(&mut cfg, "solver.epsilon", epsilon)?;
            set(&mut cfg, "prior.rho", rho)?;
            set(&mut cfg, "prior.zeta", zeta)?;
            set(&mut cfg, "prior.radius", radius)?;
            if no_virtual {
                set(&mut cfg, "align.use_virtual", Some(false))?;
            }
            set_path(&mut cfg, "paths.output", &out)?;
            finish(&cfg)?;
            cmd_solve(&cfg, &x, &y)
        }
        Command::Train {
            common,
            dataset,
            mode,
            epochs,
            out,
            checkpoint,
        } => {
            let mut cfg = load_config(&common)?;
            set_path(&mut cfg, "paths.dataset", &dataset)?;
            set(&mut cfg, "train.mode", mode)?;
            set(&mut cfg, "train.epochs", epochs)?;
            set_path(&mut cfg, "paths.output", &out)?;
            set_path(&mut cfg, "paths.checkpoint", &checkpoint)?;
            finish(&cfg)?;
            cmd_train(&cfg)
        }
        Command::Eval {
            common,
            dataset,
            checkpoint,
            raw,
            matching,
            plot_data,
            out,
        } => {
            let mut cfg = load_config(&common)?;
            set_path(&mut cfg, "paths.dataset", &dataset)?;
            set_path(&mut cfg, "paths.checkpoint", &checkpoint)?;
            set(&mut cfg, "eval.matching", matching)?;
            set_path(&mut cfg, "paths.output", &out)?;
            finish(&cfg)?;
            cmd_eval(&cfg, raw, plot_data.as_deref())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
