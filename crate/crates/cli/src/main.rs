//! `acmnet` command-line tool: train, evaluate, sweep sparsity, run ablation
//! matrices, write synthetic datasets and check gradients.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use acmnet::data::{write_dataset, Split, SWEEP_RATIOS};
use acmnet::harness::{
    dump_attention, dump_confidence, evaluate, evaluate_baseline, gradcheck_network, load_model, run_ablation, sweep,
    train_with, write_ablation_csv, write_run, write_sweep_csv, AblationMatrix, RunConfig, RunManifest,
    CHECKPOINT_FILE,
};
use acmnet::network::MetricsRecord;
use acmnet::parallel::{init_thread_pool, worker_count, Exec};
use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::info;

#[derive(Parser)]
#[command(
    name = "acmnet",
    version,
    about = "Sparse depth completion with graph propagation and gated fusion"
)]
struct Cli {
    /// Run every loop on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoint, loss log and run manifest.
    Train {
        /// Run config (JSON); desk-scale defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides model and training seeds.
        #[arg(long)]
        seed: Option<u64>,
        /// Run directory.
        #[arg(long)]
        out: PathBuf,
        /// Also score the nearest-observed fill baseline.
        #[arg(long)]
        baseline: bool,
    },
    /// Evaluate a checkpoint on the evaluation split.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint file or run directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Metrics CSV (per-sample rows, then the aggregate).
        #[arg(long)]
        out: PathBuf,
        /// Score the nearest-observed fill instead of a model.
        #[arg(long)]
        baseline: bool,
        /// Directory for attention CSVs of the first sample.
        #[arg(long)]
        dump_attention: Option<PathBuf>,
        /// Directory for confidence or gate PNGs of the first sample.
        #[arg(long)]
        dump_confidence: Option<PathBuf>,
    },
    /// Evaluate a checkpoint at several sparsity ratios.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated ratios; the eight standard ratios when omitted.
        #[arg(long, value_delimiter = ',')]
        ratios: Option<Vec<f64>>,
        /// Sweep CSV.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate every cell of an ablation matrix.
    Ablate {
        /// Matrix config (JSON); six-cell fusion × propagation grid when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Replaces the matrix's seed list with this one seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory for `ablation.csv` and one run per cell.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the synthetic dataset as PNGs plus `manifest.json`.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare network gradients with central differences.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        probes: usize,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[arg(long, default_value_t = 2e-3)]
        tolerance: f64,
    },
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let cfg = match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
        None => RunConfig::default(),
    };
    Ok(match seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn checkpoint_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(CHECKPOINT_FILE)
    } else {
        p.to_path_buf()
    }
}

fn log_metrics(label: &str, m: &MetricsRecord) {
    info!(
        "{label}: rmse {:.2} mm, mae {:.2} mm, irmse {:.3}, imae {:.3}, rel {:.4}, d1 {:.2}%",
        m.rmse, m.mae, m.irmse, m.imae, m.rel, m.delta1
    );
}

fn cmd_train(cfg: RunConfig, out: &Path, baseline: bool, exec: Exec) -> Result<()> {
    let train_set = cfg.samples(Split::Train, exec)?;
    let eval_set = cfg.samples(Split::Eval, exec)?;
    info!(
        "training {} steps on {} samples ({} workers)",
        cfg.train.steps,
        train_set.len(),
        worker_count()
    );
    let every = (cfg.train.steps / 20).max(1);
    let trained = train_with(&cfg, &train_set, exec, |l| {
        if l.step % every == 0 || l.step + 1 == cfg.train.steps {
            info!(
                "step {:>5}  lr {:.2e}  loss {:.4}  mse {:.4}",
                l.step, l.lr, l.total, l.mse
            );
        }
    })?;
    let metrics = evaluate(&trained.model, &trained.store, &eval_set, exec)?.aggregate;
    log_metrics("model", &metrics);
    let baseline = if baseline {
        let b = evaluate_baseline(&eval_set, exec)?.aggregate;
        log_metrics("baseline", &b);
        Some(b)
    } else {
        None
    };
    let manifest = RunManifest {
        seed: cfg.train.seed,
        losses: trained.losses.clone(),
        metrics: Some(metrics),
        baseline,
        wall_clock_secs: trained.wall_clock_secs,
        param_count: trained.store.scalar_count(),
        config: cfg,
    };
    write_run(out, &trained, &manifest)?;
    info!("wrote {}", out.display());
    Ok(())
}

struct EvalArgs {
    checkpoint: Option<PathBuf>,
    out: PathBuf,
    baseline: bool,
    dump_attention: Option<PathBuf>,
    dump_confidence: Option<PathBuf>,
}

fn cmd_eval(cfg: RunConfig, args: EvalArgs, exec: Exec) -> Result<()> {
    let samples = cfg.samples(Split::Eval, exec)?;
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    if args.baseline {
        let report = evaluate_baseline(&samples, exec)?;
        log_metrics("baseline", &report.aggregate);
        report.write_csv(&args.out)?;
        return Ok(());
    }
    let Some(ckpt) = args.checkpoint else {
        bail!("--checkpoint is required unless --baseline is given");
    };
    let (model, store) = load_model(&cfg.model, &checkpoint_path(&ckpt))?;
    let report = evaluate(&model, &store, &samples, exec)?;
    log_metrics("model", &report.aggregate);
    report.write_csv(&args.out)?;
    let first = samples.first().context("evaluation split is empty")?;
    if let Some(dir) = args.dump_attention {
        let n = dump_attention(&model, &store, first, &dir)?;
        info!("wrote {n} attention files to {}", dir.display());
    }
    if let Some(dir) = args.dump_confidence {
        let n = dump_confidence(&model, &store, first, &dir)?;
        info!("wrote {n} confidence maps to {}", dir.display());
    }
    Ok(())
}

fn cmd_sweep(cfg: RunConfig, checkpoint: &Path, ratios: &[f64], out: &Path, exec: Exec) -> Result<()> {
    if let Some(&r) = ratios.iter().find(|&&r| !(r > 0.0 && r <= 1.0)) {
        bail!("sweep ratio {r} is outside (0, 1]");
    }
    let (model, store) = load_model(&cfg.model, &checkpoint_path(checkpoint))?;
    let rows = sweep(&model, &store, &cfg.data, ratios, exec)?;
    for r in &rows {
        info!(
            "ratio {:<6} density {:.4}  rmse {:.2} mm",
            r.ratio, r.density, r.metrics.rmse
        );
    }
    write_sweep_csv(out, &rows)?;
    Ok(())
}

fn cmd_ablate(path: Option<&Path>, seed: Option<u64>, out: &Path, exec: Exec) -> Result<()> {
    let mut matrix = match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str::<AblationMatrix>(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => AblationMatrix::default(),
    };
    if let Some(s) = seed {
        matrix.seeds = vec![s];
    }
    fs::create_dir_all(out)?;
    let rows = run_ablation(&matrix, exec, Some(out), |r| {
        info!(
            "{:<8} {:<12} seed {}  rmse {:.2} mm",
            r.variant, r.graph, r.seed, r.metrics.rmse
        );
    })?;
    write_ablation_csv(&out.join("ablation.csv"), &rows)?;
    Ok(())
}

fn cmd_gradcheck(cfg: RunConfig, seed: u64, probes: usize, step: f64, tolerance: f64) -> Result<()> {
    let r = gradcheck_network(&cfg.model, cfg.data.width, cfg.data.height, probes, seed, step)?;
    for p in &r.probes {
        println!(
            "{:<32} [{:>6}] analytic {:>13.6e} numeric {:>13.6e} rel {:.2e}",
            p.param, p.index, p.analytic, p.numeric, p.rel_err
        );
    }
    println!("max relative error {:.3e} (tolerance {tolerance:.1e})", r.max_rel_err);
    if r.max_rel_err > tolerance {
        bail!("gradient check failed");
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let exec = if cli.sequential {
        Exec::Sequential
    } else {
        Exec::Parallel
    };
    match cli.command {
        Command::Train {
            config,
            seed,
            out,
            baseline,
        } => cmd_train(load_config(config.as_deref(), seed)?, &out, baseline, exec),
        Command::Eval {
            config,
            checkpoint,
            out,
            baseline,
            dump_attention,
            dump_confidence,
        } => cmd_eval(
            load_config(config.as_deref(), None)?,
            EvalArgs {
                checkpoint,
                out,
                baseline,
                dump_attention,
                dump_confidence,
            },
            exec,
        ),
        Command::Sweep {
            config,
            checkpoint,
            ratios,
            out,
        } => {
            let ratios = ratios.unwrap_or_else(|| SWEEP_RATIOS.to_vec());
            cmd_sweep(load_config(config.as_deref(), None)?, &checkpoint, &ratios, &out, exec)
        }
        Command::Ablate { config, seed, out } => cmd_ablate(config.as_deref(), seed, &out, exec),
        Command::GenData { config, seed, out } => {
            let mut cfg = load_config(config.as_deref(), None)?;
            if let Some(s) = seed {
                cfg.data.seed = s;
            }
            let m = write_dataset(&out, &cfg.data, cfg.train.ratio, exec)?;
            info!("wrote {} samples to {}", m.samples.len(), out.display());
            Ok(())
        }
        Command::Gradcheck {
            config,
            seed,
            probes,
            step,
            tolerance,
        } => cmd_gradcheck(load_config(config.as_deref(), None)?, seed, probes, step, tolerance),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    init_thread_pool();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
