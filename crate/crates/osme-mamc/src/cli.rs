//! Command-line surface: training, evaluation, constraint accounting,
//! gradient verification, heatmap export, and dataset generation.
//!
//! Standard output carries machine-readable JSON only; diagnostics and
//! progress go to standard error. Exit codes are disjoint per error class:
//! 0 success, 2 configuration, 3 non-finite loss, 4 count mismatch,
//! 5 gradient-check violation, 6 IO, 1 internal.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::data::{gen_dataset, load_dataset, save_dataset, DataError};
use crate::mamc::{count_report, mamc_loss, BatchFeatures};
use crate::osme::{heatmap, OsmeConfig, OsmeError, OsmeModel};
use crate::seeded_rng;
use crate::tensor::{
    grad_check, grad_check_corrupted, op_gradient_sweep, Corruption, Tensor, TensorError,
    DEFAULT_STEP,
};
use crate::train::{
    evaluate, load_checkpoint, save_checkpoint, MetricsRecord, Summary, TrainConfig, TrainError,
    Trainer,
};

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    NonFinite(String),
    #[error("closed form and enumeration disagree")]
    CountMismatch,
    #[error("gradient check exceeded tolerance")]
    GradViolation,
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Internal(_) => 1,
            CliError::Config(_) => 2,
            CliError::NonFinite(_) => 3,
            CliError::CountMismatch => 4,
            CliError::GradViolation => 5,
            CliError::Io(_) => 6,
        }
    }
}

fn data_err(e: DataError) -> CliError {
    match e {
        DataError::SpecInvalid(_)
        | DataError::NotEnoughClasses { .. }
        | DataError::NotEnoughImagesInClass { .. } => CliError::Config(e.to_string()),
        DataError::BadPayload(_)
        | DataError::ChecksumMismatch { .. }
        | DataError::Io(_)
        | DataError::Json(_) => CliError::Io(e.to_string()),
    }
}

fn train_err(e: TrainError) -> CliError {
    match e {
        TrainError::BadConfig(_) | TrainError::Osme(OsmeError::BadConfig(_)) => {
            CliError::Config(e.to_string())
        }
        TrainError::NonFiniteLoss { .. } => CliError::NonFinite(e.to_string()),
        TrainError::VersionMismatch { .. }
        | TrainError::CorruptFile(_)
        | TrainError::Io(_)
        | TrainError::Json(_) => CliError::Io(e.to_string()),
        TrainError::Data(d) => data_err(d),
        other => CliError::Internal(other.to_string()),
    }
}

fn io_err(e: impl std::fmt::Display) -> CliError {
    CliError::Io(e.to_string())
}

fn internal(e: impl std::fmt::Display) -> CliError {
    CliError::Internal(e.to_string())
}

#[derive(Debug, Parser)]
#[command(
    name = "osme-mamc",
    version,
    about = "Multi-attention classifier training with metric constraints, \
             plus the oracles that verify it"
)]
struct Cli {
    /// JSON config file. Paths inside it resolve relative to its directory.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory. Overrides `out_dir` from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Train on the synthetic glyph set; writes metrics.jsonl, ckpt.bin,
    /// and summary.json into the output directory.
    Train {
        /// Checkpoint to resume from; metrics append to the existing stream.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Report a checkpoint's top-1 accuracy.
    Eval {
        /// Checkpoint file.
        #[arg(long)]
        ckpt: PathBuf,
        /// Saved dataset directory; defaults to the checkpoint's test split.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Compare the closed-form constraint count against brute-force
    /// enumeration for one anchor.
    Count {
        /// Class-distinct pairs per batch (N).
        pairs: usize,
        /// Attention branches (P).
        branches: usize,
    },
    /// Check analytic gradients against central differences.
    Gradcheck {
        /// What to differentiate.
        #[arg(value_enum, default_value_t = Scale::Full)]
        scale: Scale,
        /// Plant a known analytic error; the run must fail with exit 5.
        #[arg(long, hide = true)]
        corrupt: bool,
    },
    /// Export per-branch attention heatmaps as PGM files plus an index of
    /// peak coordinates.
    Heatmap {
        /// Checkpoint file.
        #[arg(long)]
        ckpt: PathBuf,
        /// Saved dataset directory; defaults to the checkpoint's test split.
        #[arg(long)]
        data: Option<PathBuf>,
        /// How many images to export, from the front of the set.
        #[arg(long, default_value_t = 8)]
        count: usize,
    },
    /// Generate and save the synthetic glyph dataset from the config's
    /// data section.
    GenData,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Scale {
    /// Every tensor op in isolation, tolerance 1e-6.
    Ops,
    /// The attention model under a softmax objective, tolerance 1e-4.
    Osme,
    /// The model plus metric constraints, tolerance 1e-4.
    Full,
}

impl Scale {
    fn as_str(self) -> &'static str {
        match self {
            Scale::Ops => "ops",
            Scale::Osme => "osme",
            Scale::Full => "full",
        }
    }
}

/// On-disk config: a full training configuration plus an optional output
/// directory. Unknown keys are rejected so a typo cannot silently disable
/// a hyperparameter.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CliConfigFile {
    pub train: TrainConfig,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

/// Parse arguments, dispatch, and map errors to stable exit codes.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp
                | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Cmd::Train { resume } => cmd_train(cli.config, cli.out, cli.seed, resume),
        Cmd::Eval { ckpt, data } => cmd_eval(&ckpt, data.as_deref()),
        Cmd::Count { pairs, branches } => cmd_count(pairs, branches),
        Cmd::Gradcheck { scale, corrupt } => {
            cmd_gradcheck(scale, cli.seed.unwrap_or(19), corrupt)
        }
        Cmd::Heatmap { ckpt, data, count } => {
            cmd_heatmap(&ckpt, data.as_deref(), cli.out, count)
        }
        Cmd::GenData => cmd_gen_data(cli.config, cli.out, cli.seed),
    }
}

/// One line of machine-readable JSON on standard output. A closed pipe
/// (`osme-mamc ... | head`) ends the process quietly instead of panicking.
fn emit<T: Serialize>(value: &T) -> Result<(), CliError> {
    let line = serde_json::to_string(value).map_err(internal)?;
    let mut out = std::io::stdout();
    if let Err(e) = writeln!(out, "{line}") {
        if e.kind() == std::io::ErrorKind::BrokenPipe {
            std::process::exit(0);
        }
        return Err(CliError::Io(e.to_string()));
    }
    Ok(())
}

fn load_config(path: &Path) -> Result<CliConfigFile, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {}", path.display(), e)))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("{}: {}", path.display(), e)))
}

/// `--out` wins; otherwise `out_dir` from the config, relative to the
/// config file itself.
fn resolve_out(
    config_path: &Path,
    file: &CliConfigFile,
    flag: Option<PathBuf>,
) -> Result<PathBuf, CliError> {
    if let Some(dir) = flag {
        return Ok(dir);
    }
    match &file.out_dir {
        Some(rel) => {
            let base = config_path.parent().unwrap_or_else(|| Path::new("."));
            Ok(base.join(rel))
        }
        None => Err(CliError::Config(
            "no output directory: pass --out or set out_dir in the config".into(),
        )),
    }
}

fn cmd_train(
    config: Option<PathBuf>,
    out: Option<PathBuf>,
    seed: Option<u64>,
    resume: Option<PathBuf>,
) -> Result<(), CliError> {
    let (mut trainer, out_dir, appending) = match resume {
        Some(ckpt_path) => {
            let out_dir = match (out, &config) {
                (Some(dir), _) => dir,
                (None, Some(cfg_path)) => {
                    let file = load_config(cfg_path)?;
                    resolve_out(cfg_path, &file, None)?
                }
                (None, None) => {
                    return Err(CliError::Config(
                        "resume needs --out or a config with out_dir".into(),
                    ))
                }
            };
            let ck = load_checkpoint(&ckpt_path).map_err(train_err)?;
            (Trainer::from_checkpoint(ck).map_err(train_err)?, out_dir, true)
        }
        None => {
            let cfg_path =
                config.ok_or_else(|| CliError::Config("train needs --config".into()))?;
            let file = load_config(&cfg_path)?;
            let out_dir = resolve_out(&cfg_path, &file, out)?;
            let mut tc = file.train;
            if let Some(s) = seed {
                tc.seed = s;
            }
            (Trainer::new(tc).map_err(train_err)?, out_dir, false)
        }
    };

    fs::create_dir_all(&out_dir).map_err(io_err)?;
    let metrics_path = out_dir.join("metrics.jsonl");
    if appending {
        // A kill mid-epoch leaves records past the last checkpoint (and
        // possibly a torn final line); drop them so the resumed run's
        // metrics read as one uninterrupted trajectory.
        if let Ok(existing) = fs::read_to_string(&metrics_path) {
            let keep: Vec<&str> = existing
                .lines()
                .filter(|line| {
                    serde_json::from_str::<MetricsRecord>(line)
                        .map(|rec| rec.step < trainer.step)
                        .unwrap_or(false)
                })
                .collect();
            let mut rewritten = keep.join("\n");
            if !rewritten.is_empty() {
                rewritten.push('\n');
            }
            fs::write(&metrics_path, rewritten).map_err(io_err)?;
        }
    }
    let metrics_file = fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(appending)
        .truncate(!appending)
        .open(&metrics_path)
        .map_err(io_err)?;
    let mut sink = BufWriter::new(metrics_file);
    let ckpt_path = out_dir.join("ckpt.bin");

    let total_epochs = trainer.cfg.epochs;
    let bpe = trainer.batches_per_epoch();
    let mut best = f64::NEG_INFINITY;
    let mut last = f64::NAN;
    while trainer.step < trainer.total_steps() {
        let top1 = trainer
            .run_epoch(|rec| {
                let line = serde_json::to_string(rec)
                    .map_err(|e| std::io::Error::new(std::io::ErrorKind::Other, e))?;
                writeln!(sink, "{line}")
            })
            .map_err(train_err)?;
        sink.flush().map_err(io_err)?;
        save_checkpoint(&ckpt_path, &trainer).map_err(train_err)?;
        best = best.max(top1);
        last = top1;
        eprintln!(
            "epoch {}/{} top1 {:.4} lr {:.6}",
            trainer.step / bpe,
            total_epochs,
            top1,
            trainer.current_lr()
        );
    }
    // A resume of an already finished run still reports and persists.
    if !last.is_finite() {
        last = evaluate(&trainer.model, &trainer.test_set).map_err(train_err)?;
        best = last;
        save_checkpoint(&ckpt_path, &trainer).map_err(train_err)?;
    }

    let summary = Summary { final_top1: last, best_top1: best, seed: trainer.cfg.seed };
    let pretty = serde_json::to_string_pretty(&summary).map_err(internal)?;
    fs::write(out_dir.join("summary.json"), pretty).map_err(io_err)?;
    emit(&summary)
}

fn cmd_eval(ckpt: &Path, data: Option<&Path>) -> Result<(), CliError> {
    let ck = load_checkpoint(ckpt).map_err(train_err)?;
    let trainer = Trainer::from_checkpoint(ck).map_err(train_err)?;
    let owned;
    let ds = match data {
        Some(dir) => {
            owned = load_dataset(dir).map_err(data_err)?;
            &owned
        }
        None => &trainer.test_set,
    };
    let top1 = evaluate(&trainer.model, ds).map_err(train_err)?;
    emit(&json!({
        "top1": top1,
        "images": ds.len(),
        "step": trainer.step,
    }))
}

fn cmd_count(pairs: usize, branches: usize) -> Result<(), CliError> {
    if pairs == 0 || branches == 0 {
        return Err(CliError::Config(
            "pairs and branches must both be at least 1".into(),
        ));
    }
    if pairs.saturating_mul(branches) > 1_000_000 {
        return Err(CliError::Config(
            "enumeration is limited to pairs * branches <= 1000000".into(),
        ));
    }
    let report = count_report(pairs, branches);
    emit(&report)?;
    if report.closed_form != report.enumerated {
        return Err(CliError::CountMismatch);
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct GradRow {
    component: String,
    max_rel_error: f64,
    pass: bool,
}

fn cmd_gradcheck(scale: Scale, seed: u64, corrupt: bool) -> Result<(), CliError> {
    let tol = match scale {
        Scale::Ops => 1e-6,
        Scale::Osme | Scale::Full => 1e-4,
    };
    let mut rows: Vec<GradRow> = match scale {
        Scale::Ops => op_gradient_sweep(seed)
            .map_err(internal)?
            .into_iter()
            .map(|r| GradRow {
                component: r.op.to_string(),
                max_rel_error: r.max_rel_error,
                pass: r.max_rel_error <= tol,
            })
            .collect(),
        Scale::Osme => model_rows(seed, 0.0, tol)?,
        Scale::Full => model_rows(seed, 0.5, tol)?,
    };
    if corrupt {
        rows.push(corrupted_control(tol)?);
    }
    let max = rows.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let pass = rows.iter().all(|r| r.pass);
    emit(&json!({
        "scale": scale.as_str(),
        "step": DEFAULT_STEP,
        "tolerance": tol,
        "max_rel_error": max,
        "pass": pass,
        "components": rows,
    }))?;
    if !pass {
        return Err(CliError::GradViolation);
    }
    Ok(())
}

/// Per-parameter gradient rows for the micro model on a fixed random
/// two-pair batch: softmax-only when `lambda` is zero, the combined
/// objective otherwise.
fn model_rows(seed: u64, lambda: f64, tol: f64) -> Result<Vec<GradRow>, CliError> {
    use rand::Rng;

    let cfg = OsmeConfig::micro();
    let (w, h) = (cfg.input_w(), cfg.input_h());
    let mut rng = seeded_rng(seed);
    let model = OsmeModel::new(cfg, &mut rng).map_err(internal)?;
    let labels = vec![0usize, 0, 1, 1];
    let mut images = Vec::with_capacity(labels.len());
    for _ in 0..labels.len() {
        let data: Vec<f64> = (0..w * h).map(|_| rng.gen::<f64>()).collect();
        images.push(Tensor::literal(vec![w, h, 1], data).map_err(internal)?);
    }
    let params = model.named_params();
    let loss = || -> Result<Tensor, TrainError> {
        let fwd = model.forward_batch(&images)?;
        let feats: Vec<Vec<Tensor>> = fwd
            .iter()
            .map(|f| f.branches.iter().map(|b| b.feature.clone()).collect())
            .collect();
        let logits: Vec<Tensor> = fwd.iter().map(|f| f.logits.clone()).collect();
        let batch = BatchFeatures::new(feats, labels.clone())?;
        Ok(mamc_loss(&batch, &logits, lambda)?.total)
    };
    let report = grad_check(loss, &params, DEFAULT_STEP).map_err(train_err)?;
    Ok(params
        .iter()
        .map(|(name, _)| {
            let e = report.max_for(name);
            GradRow { component: name.clone(), max_rel_error: e, pass: e <= tol }
        })
        .collect())
}

/// A planted analytic error the checker must flag; proves the harness can
/// fail before anyone trusts its passes.
fn corrupted_control(tol: f64) -> Result<GradRow, CliError> {
    let w = Tensor::param(vec![3], vec![0.3, -0.4, 0.8]).map_err(internal)?;
    let params = vec![("corrupted_control".to_string(), w.clone())];
    let mut loss = || w.inner_product(&w);
    let report: Result<_, TensorError> =
        grad_check_corrupted(&mut loss, &params, DEFAULT_STEP, Some(Corruption {
            param: 0,
            index: 1,
            delta: 0.5,
        }));
    let report = report.map_err(internal)?;
    Ok(GradRow {
        component: "corrupted_control".to_string(),
        max_rel_error: report.max_rel_error,
        pass: report.max_rel_error <= tol,
    })
}

fn cmd_heatmap(
    ckpt: &Path,
    data: Option<&Path>,
    out: Option<PathBuf>,
    count: usize,
) -> Result<(), CliError> {
    let out_dir = out.ok_or_else(|| CliError::Config("heatmap needs --out".into()))?;
    let ck = load_checkpoint(ckpt).map_err(train_err)?;
    let trainer = Trainer::from_checkpoint(ck).map_err(train_err)?;
    let owned;
    let ds = match data {
        Some(dir) => {
            owned = load_dataset(dir).map_err(data_err)?;
            &owned
        }
        None => &trainer.test_set,
    };
    if count > ds.len() {
        return Err(CliError::Config(format!(
            "count {} exceeds dataset size {}",
            count,
            ds.len()
        )));
    }
    fs::create_dir_all(&out_dir).map_err(io_err)?;

    let mut images = Vec::with_capacity(count);
    let mut divergent = 0usize;
    for i in 0..count {
        let img = ds.image_tensor(i).map_err(data_err)?;
        let fwd = trainer.model.forward_image(&img).map_err(|e| train_err(e.into()))?;
        let mut peaks = Vec::new();
        let mut quads = BTreeSet::new();
        for (p, br) in fwd.branches.iter().enumerate() {
            let hm = heatmap(&br.smap).map_err(|e| train_err(e.into()))?;
            let name = format!("hm_{i}_b{p}.pgm");
            fs::write(out_dir.join(&name), hm.to_pgm()).map_err(io_err)?;
            let (pw, ph) = hm.peak();
            let q = quadrant(pw, ph, hm.w, hm.h);
            quads.insert(q);
            peaks.push(json!({
                "branch": p,
                "w": pw,
                "h": ph,
                "quadrant": q,
                "file": name,
            }));
        }
        if quads.len() > 1 {
            divergent += 1;
        }
        images.push(json!({
            "index": i,
            "label": ds.labels[i],
            "peaks": peaks,
        }));
    }

    let branches = trainer.cfg.model.branches;
    let divergent_fraction =
        if count == 0 { 0.0 } else { divergent as f64 / count as f64 };
    let index = json!({
        "count": count,
        "branches": branches,
        "divergent_fraction": divergent_fraction,
        "images": images,
    });
    let pretty = serde_json::to_string_pretty(&index).map_err(internal)?;
    fs::write(out_dir.join("index.json"), pretty).map_err(io_err)?;
    emit(&json!({
        "images": count,
        "files": count * branches,
        "out_dir": out_dir.display().to_string(),
        "divergent_fraction": divergent_fraction,
    }))
}

/// Quadrant of a peak: 0 upper-left, 1 upper-right, 2 lower-left,
/// 3 lower-right, with x growing right and y growing down.
fn quadrant(w: usize, h: usize, width: usize, height: usize) -> usize {
    let right = usize::from(w >= (width + 1) / 2);
    let down = usize::from(h >= (height + 1) / 2);
    down * 2 + right
}

fn cmd_gen_data(
    config: Option<PathBuf>,
    out: Option<PathBuf>,
    seed: Option<u64>,
) -> Result<(), CliError> {
    let cfg_path = config.ok_or_else(|| CliError::Config("gen-data needs --config".into()))?;
    let file = load_config(&cfg_path)?;
    let out_dir = resolve_out(&cfg_path, &file, out)?;
    let mut spec = file.train.data;
    if let Some(s) = seed {
        spec.seed = s;
    }
    let ds = gen_dataset(&spec).map_err(data_err)?;
    fs::create_dir_all(&out_dir).map_err(io_err)?;
    save_dataset(&out_dir, &ds).map_err(data_err)?;
    emit(&json!({
        "images": ds.len(),
        "classes": ds.classes(),
        "checksum": ds.checksum,
        "dir": out_dir.display().to_string(),
    }))
}
