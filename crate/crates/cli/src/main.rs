//! Command-line front end: dataset generation, training, evaluation, the
//! ablation grid, and label-generation statistics.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use pslab_core::ablate::{mean_map, run_grid, table_rows};
use pslab_core::config::{config_hash, RunConfig};
use pslab_core::dataio::{attach_ground_truth, load_dataset, save_dataset};
use pslab_core::labelgen::generate_labels_raw;
use pslab_core::synthdata::{corrupt, generate_dataset, split};
use pslab_core::trainer::{evaluate_model, fit, Checkpoint, EpochLog, MetricReport, CHECKPOINT_FORMAT};
use pslab_core::types::Dataset;
use pslab_core::Error;

#[derive(Parser)]
#[command(name = "pslab", version, about = "Desk-scale person-search training lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// Configuration file (TOML); defaults apply for missing sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the training / generation seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the held-out domain index.
    #[arg(long)]
    holdout_domain: Option<u32>,
    /// Disable multi-task prototype-based domain-specific normalization.
    #[arg(long)]
    no_mdsbn: bool,
    /// Disable box refinement (hard filter + soft weights).
    #[arg(long)]
    no_br: bool,
    /// Disable missing-label generation.
    #[arg(long)]
    no_mlg: bool,
    /// Disable feature decorrelation.
    #[arg(long)]
    no_fd: bool,
    /// Disable inter-frame enhancement.
    #[arg(long)]
    no_ie: bool,
    /// Disable intra-frame distinction.
    #[arg(long)]
    no_id: bool,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_path(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.train.seed = seed;
            cfg.generator.seed = seed;
        }
        if let Some(h) = self.holdout_domain {
            cfg.eval.holdout_domain = h;
        }
        let t = &mut cfg.train.toggles;
        if self.no_mdsbn {
            t.mdsbn = false;
        }
        if self.no_br {
            t.br = false;
        }
        if self.no_mlg {
            t.mlg = false;
        }
        if self.no_fd {
            t.fd = false;
        }
        if self.no_ie {
            t.ie = false;
        }
        if self.no_id {
            t.id = false;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (with injected noise) and its
    /// ground-truth sidecar.
    Gen {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory.
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Train on a generated dataset; writes checkpoint, CSV log, metrics.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset file from `gen`.
        #[arg(long)]
        dataset: PathBuf,
        /// Ground-truth sidecar (default: <dataset>.gt.jsonl next to it).
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset's held-out domain.
    Eval {
        /// Checkpoint from `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        gt: Option<PathBuf>,
        /// Write the metric JSON here as well as to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the toggle grid over several seeds and emit a CSV table.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        gt: Option<PathBuf>,
        /// Comma-separated seeds.
        #[arg(long, default_value = "1,2,3", value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Concurrent jobs (each job single-threaded).
        #[arg(long, default_value_t = 2)]
        jobs: usize,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// One label-generation pass over a dataset with raw appearance
    /// features; reports counts and (with ground truth) precision.
    LabelStats {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        gt: Option<PathBuf>,
    },
}

#[derive(serde::Serialize)]
struct RunManifest<'a> {
    version: &'a str,
    hash: String,
    seed: u64,
    config: &'a RunConfig,
    outputs: Vec<String>,
    timing_secs: f64,
}

fn write_manifest(
    dir: &Path,
    cfg: &RunConfig,
    outputs: &[&Path],
    started: Instant,
) -> Result<String, Error> {
    let hash = config_hash(cfg);
    let manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION"),
        hash: hash.clone(),
        seed: cfg.train.seed,
        config: cfg,
        outputs: outputs
            .iter()
            .map(|p| p.to_string_lossy().into_owned())
            .collect(),
        timing_secs: started.elapsed().as_secs_f64(),
    };
    let path = dir.join("manifest.json");
    std::fs::write(
        &path,
        serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?,
    )?;
    Ok(hash)
}

fn sidecar_path(dataset: &Path, gt: &Option<PathBuf>) -> PathBuf {
    gt.clone().unwrap_or_else(|| {
        let stem = dataset
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into());
        dataset.with_file_name(format!("{stem}.gt.jsonl"))
    })
}

fn load_with_gt(dataset: &Path, gt: &Option<PathBuf>, require_gt: bool) -> Result<Dataset, Error> {
    let (mut ds, _) = load_dataset(dataset)?;
    let side = sidecar_path(dataset, gt);
    if side.exists() {
        attach_ground_truth(&mut ds, &side)?;
    } else if require_gt {
        return Err(Error::Config(format!(
            "ground-truth sidecar not found at {} (needed for held-out metrics)",
            side.display()
        )));
    }
    Ok(ds)
}

fn write_metrics(path: &Path, report: &MetricReport, manifest: &str) -> Result<(), Error> {
    let mut v = serde_json::to_value(report).map_err(|e| Error::Format(e.to_string()))?;
    v["manifest"] = serde_json::Value::String(manifest.to_string());
    std::fs::write(
        path,
        serde_json::to_string_pretty(&v).map_err(|e| Error::Format(e.to_string()))?,
    )?;
    Ok(())
}

const LOG_COLUMNS: &str = "epoch,lr,loss_total,loss_id,loss_ie,loss_cov,loss_det,batches,reid_instances,ie_skipped,pseudo_added,pseudo_precision,mask_size,heldout_map,heldout_top1,heldout_det_ap,heldout_recall";

fn write_train_log(path: &Path, logs: &[EpochLog], manifest: &str) -> Result<(), Error> {
    let mut s = String::new();
    s.push_str(&format!("# manifest: {manifest}\n"));
    s.push_str(LOG_COLUMNS);
    s.push('\n');
    for l in logs {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            l.epoch,
            l.lr,
            l.loss_total,
            l.loss_id,
            l.loss_ie,
            l.loss_cov,
            l.loss_det,
            l.batches,
            l.reid_instances,
            l.ie_skipped,
            l.pseudo_added,
            l.pseudo_precision,
            l.mask_size,
            l.heldout_map,
            l.heldout_top1,
            l.heldout_det_ap,
            l.heldout_recall
        ));
    }
    std::fs::write(path, s)?;
    Ok(())
}

fn cmd_gen(args: &ConfigArgs, out: &Path) -> Result<(), Error> {
    let started = Instant::now();
    let cfg = args.load()?;
    std::fs::create_dir_all(out)?;
    let hash = config_hash(&cfg);
    let clean = generate_dataset(&cfg.generator)?;
    let noisy = corrupt(&clean, &cfg.generator);
    let data_path = out.join("dataset.jsonl");
    let gt_path = out.join("dataset.gt.jsonl");
    save_dataset(&noisy, &data_path, &gt_path, &hash)?;
    write_manifest(out, &cfg, &[&data_path, &gt_path], started)?;
    println!(
        "wrote {} frames ({} boxes) to {}",
        noisy.frames.len(),
        noisy.num_boxes(),
        data_path.display()
    );
    Ok(())
}

fn cmd_train(args: &ConfigArgs, dataset: &Path, gt: &Option<PathBuf>, out: &Path) -> Result<(), Error> {
    let started = Instant::now();
    let cfg = args.load()?;
    let ds = load_with_gt(dataset, gt, true)?;
    std::fs::create_dir_all(out)?;
    let hash = config_hash(&cfg);

    let result = fit(&cfg, &ds)?;
    let ck_path = out.join("checkpoint.json");
    Checkpoint {
        format: CHECKPOINT_FORMAT.into(),
        version: 1,
        manifest: hash.clone(),
        config: cfg.clone(),
        model: result.model,
        memories: result.memories,
        mask: result.mask,
    }
    .save(&ck_path)?;
    let log_path = out.join("train_log.csv");
    write_train_log(&log_path, &result.logs, &hash)?;
    let metrics_path = out.join("metrics.json");
    write_metrics(&metrics_path, &result.report, &hash)?;
    write_manifest(out, &cfg, &[&ck_path, &log_path, &metrics_path], started)?;
    println!(
        "held-out mAP {:.4}, top-1 {:.4}, det AP {:.4}, recall {:.4}",
        result.report.map, result.report.top1, result.report.det_ap, result.report.det_recall
    );
    Ok(())
}

fn cmd_eval(
    checkpoint: &Path,
    dataset: &Path,
    gt: &Option<PathBuf>,
    out: &Option<PathBuf>,
) -> Result<(), Error> {
    let ck = Checkpoint::load(checkpoint)?;
    let ds = load_with_gt(dataset, gt, true)?;
    if ck.model.raw_dim != ds.generator.raw_dim {
        return Err(Error::Config(format!(
            "checkpoint raw_dim {} does not match dataset raw_dim {}",
            ck.model.raw_dim, ds.generator.raw_dim
        )));
    }
    let (_, heldout) = split(&ds, ck.config.eval.holdout_domain)?;
    let report = evaluate_model(&ck.model, &ck.config, &heldout)?;
    let mut v = serde_json::to_value(&report).map_err(|e| Error::Format(e.to_string()))?;
    v["manifest"] = serde_json::Value::String(ck.manifest.clone());
    let s = serde_json::to_string_pretty(&v).map_err(|e| Error::Format(e.to_string()))?;
    println!("{s}");
    if let Some(path) = out {
        std::fs::write(path, s)?;
    }
    Ok(())
}

fn cmd_ablate(
    args: &ConfigArgs,
    dataset: &Path,
    gt: &Option<PathBuf>,
    seeds: &[u64],
    jobs: usize,
    out: &Path,
) -> Result<(), Error> {
    let started = Instant::now();
    let cfg = args.load()?;
    let ds = load_with_gt(dataset, gt, true)?;
    std::fs::create_dir_all(out)?;
    let hash = config_hash(&cfg);

    let rows = table_rows();
    let cells = run_grid(&cfg, &ds, &rows, seeds, jobs)?;
    let csv_path = out.join("ablation.csv");
    let mut s = String::new();
    s.push_str(&format!("# manifest: {hash}\n"));
    s.push_str("name,mdsbn,br,mlg,fd,ie,id,seed,map,top1,det_ap,det_recall\n");
    for c in &cells {
        let t = &c.toggles;
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}\n",
            c.name,
            u8::from(t.mdsbn),
            u8::from(t.br),
            u8::from(t.mlg),
            u8::from(t.fd),
            u8::from(t.ie),
            u8::from(t.id),
            c.seed,
            c.report.map,
            c.report.top1,
            c.report.det_ap,
            c.report.det_recall
        ));
    }
    std::fs::write(&csv_path, s)?;
    write_manifest(out, &cfg, &[&csv_path], started)?;
    for (name, map) in mean_map(&cells) {
        println!("{name:<22} mean held-out mAP {map:.4}");
    }
    println!("table written to {}", csv_path.display());
    Ok(())
}

fn cmd_label_stats(args: &ConfigArgs, dataset: &Path, gt: &Option<PathBuf>) -> Result<(), Error> {
    let cfg = args.load()?;
    let ds = load_with_gt(dataset, gt, false)?;
    let (_, stats) = generate_labels_raw(&ds, cfg.labelgen.psi, cfg.train.prototype_momentum)?;
    let mut v = serde_json::to_value(&stats).map_err(|e| Error::Format(e.to_string()))?;
    if let Some(p) = stats.precision() {
        v["precision"] = serde_json::json!(p);
    }
    println!(
        "{}",
        serde_json::to_string_pretty(&v).map_err(|e| Error::Format(e.to_string()))?
    );
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Gen { cfg, out } => cmd_gen(cfg, out),
        Command::Train {
            cfg,
            dataset,
            gt,
            out,
        } => cmd_train(cfg, dataset, gt, out),
        Command::Eval {
            checkpoint,
            dataset,
            gt,
            out,
        } => cmd_eval(checkpoint, dataset, gt, out),
        Command::Ablate {
            cfg,
            dataset,
            gt,
            seeds,
            jobs,
            out,
        } => cmd_ablate(cfg, dataset, gt, seeds, *jobs, out),
        Command::LabelStats { cfg, dataset, gt } => cmd_label_stats(cfg, dataset, gt),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
