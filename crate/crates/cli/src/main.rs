use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use mipcam::io::{write_json, write_jsonl};
use mipcam::model::ClassifierModel;
use mipcam::phantom::{generate_cases, generate_dataset, load_dataset, Case};
use mipcam::pipeline::crossval::{cross_validate, method_name, write_run, CrossValOptions, METRICS_FILE};
use mipcam::pipeline::eval::{evaluate, mean_std};
use mipcam::pipeline::gradcheck::{run_gradcheck, GradCheckConfig};
use mipcam::pipeline::report::{load_run, render_report};
use mipcam::pipeline::train::{prepare_cases, train};
use mipcam::pipeline::ExperimentConfig;
use mipcam::volume::Spacing;

#[derive(Parser)]
#[command(name = "mipcam", version, about = "Tumor localization from two MIP views with class activation maps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Experiment TOML; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Use the built-in benchmark preset instead of the plain defaults.
    #[arg(long, conflicts_with = "config")]
    benchmark: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with masks and annotations.
    Phantom {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n_per_class: Option<usize>,
    },
    /// Train one model on a dataset and save a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Score a checkpoint on a dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Stratified k-fold cross-validation.
    Crossval {
        #[command(flatten)]
        common: Common,
        /// Dataset directory; generated in memory from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Run every distance-loss weight in the config's sweep.
        #[arg(long)]
        sweep: bool,
        /// Write refined predicted masks as NIfTI.
        #[arg(long)]
        save_masks: bool,
    },
    /// Finite-difference check of the analytic gradients.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 5)]
        instances: usize,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Summary table and figures from finished crossval runs.
    Report {
        /// Run directories, each containing report.json.
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 4)]
        overlays: usize,
    },
}

fn load_config(c: &Common) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match (&c.config, c.benchmark) {
        (Some(p), _) => ExperimentConfig::from_file(p)?,
        (None, true) => ExperimentConfig::standard_benchmark(),
        (None, false) => ExperimentConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.train.seed = s;
    }
    if let Some(l) = c.lambda {
        cfg.train.lambda = l;
    }
    if let Some(t) = c.threshold {
        cfg.train.threshold_frac = t;
    }
    if let Some(k) = c.folds {
        cfg.folds = k;
    }
    if let Some(e) = c.epochs {
        cfg.train.epochs = e;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(c: &Common, default: &str) -> PathBuf {
    c.out_dir.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Phantom { common, n_per_class } => {
            let mut cfg = load_config(&common)?;
            if let Some(s) = common.seed {
                cfg.phantom.rng_seed = s;
            }
            let n = n_per_class.unwrap_or(cfg.n_per_class);
            let dir = out_dir(&common, "phantom");
            let cases = generate_dataset(&cfg.phantom, n, &dir)?;
            println!("wrote {} cases to {}", cases.len(), dir.display());
        }
        Command::Train { common, data } => {
            let cfg = load_config(&common)?;
            let cases = prepare_cases(&load_dataset(&data)?, &cfg.train)?;
            let examples: Vec<_> = cases.into_iter().map(|c| c.example).collect();
            let (model, history) = train(&examples, &cfg.train)?;
            let dir = out_dir(&common, "train");
            std::fs::create_dir_all(&dir).with_context(|| dir.display().to_string())?;
            model.save(&dir.join("model.ckpt"))?;
            write_jsonl(&dir.join(METRICS_FILE), &history)?;
            write_json(&dir.join("config.json"), &cfg)?;
            if let Some(last) = history.last() {
                println!("final loss1 {:.4} loss2 {:.4}", last.loss1, last.loss2);
            }
        }
        Command::Eval { common, data, checkpoint } => {
            let cfg = load_config(&common)?;
            let model = ClassifierModel::<f32>::load(&checkpoint)?;
            let cases = prepare_cases(&load_dataset(&data)?, &cfg.train)?;
            let records = evaluate(&model, &cases, &cfg.train)?;
            let dir = out_dir(&common, "eval");
            std::fs::create_dir_all(&dir).with_context(|| dir.display().to_string())?;
            write_jsonl(&dir.join("records.jsonl"), &records)?;
            let (m, s) = mean_std(records.iter().map(|r| r.dice));
            let acc = records.iter().filter(|r| r.correct()).count() as f64 / records.len().max(1) as f64;
            println!("dice {m:.3}±{s:.3} accuracy {acc:.3} over {} cases", records.len());
        }
        Command::Crossval { common, data, sweep, save_masks } => {
            let cfg = load_config(&common)?;
            let raw: Vec<Case> = match &data {
                Some(d) => load_dataset(d)?,
                None => generate_cases(&cfg.phantom, cfg.n_per_class)?,
            };
            let cases = prepare_cases(&raw, &cfg.train)?;
            let lambdas = if sweep { cfg.lambda_sweep.clone() } else { vec![cfg.train.lambda] };
            if lambdas.is_empty() {
                bail!("empty lambda sweep");
            }
            let root = out_dir(&common, "crossval");
            let opts = CrossValOptions { overlay_samples: cfg.overlay_samples, keep_masks: save_masks };
            let mut runs = Vec::new();
            for lambda in lambdas {
                let tcfg = mipcam::pipeline::TrainConfig { lambda, ..cfg.train.clone() };
                let report = cross_validate(&cases, &tcfg, cfg.folds, opts)?;
                let dir = if sweep { root.join(method_name(lambda)) } else { root.clone() };
                write_run(&report, &dir, Spacing(cfg.train.target_spacing))?;
                let a = &report.aggregate;
                println!("{}: dice {:.3}±{:.3} accuracy {:.3} ({} cases)", report.method, a.dice_mean, a.dice_std, a.accuracy, a.n);
                runs.push(report);
            }
            if sweep {
                render_report(&runs, &root.join("report"), cfg.overlay_samples)?;
            }
        }
        Command::Gradcheck { seed, instances, out_dir } => {
            let cfg = GradCheckConfig { seed, instances, ..GradCheckConfig::default() };
            let report = run_gradcheck(&cfg)?;
            if let Some(dir) = out_dir {
                std::fs::create_dir_all(&dir).with_context(|| dir.display().to_string())?;
                write_json(&dir.join("gradcheck.json"), &report)?;
            }
            let [l1, l2, c] = report.max_rel_error;
            println!(
                "max relative error: classification {l1:.2e} distance {l2:.2e} combined {c:.2e} ({:.1}s)",
                report.elapsed_secs
            );
            if !report.passed {
                return Err(mipcam::Error::GradCheck(format!("{} parameters exceed tolerance {:e}", report.offenders.len(), cfg.tolerance)).into());
            }
        }
        Command::Report { runs, out_dir, overlays } => {
            let loaded = runs.iter().map(|d| load_run(d)).collect::<mipcam::Result<Vec<_>>>()?;
            let files = render_report(&loaded, &out_dir, overlays)?;
            println!("wrote {} and {} figures", files.summary.display(), files.figures.len());
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<mipcam::Error>() {
        Some(e) if e.is_config() => 2,
        Some(e) if e.is_numeric() => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
