//! Training loop: pair-batch SGD with momentum, a stepped learning-rate
//! decay, per-step metrics, evaluation, and binary checkpoints that resume
//! bit-exactly (parameters, momentum buffers, and sampler RNG position all
//! round-trip).

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io;
use std::path::Path;
use thiserror::Error;

use crate::data::{gen_dataset, DataError, Dataset, SynthSpec};
use crate::hash::fnv1a64;
use crate::mamc::{mamc_loss, BatchFeatures, MamcError};
use crate::osme::{OsmeConfig, OsmeError, OsmeModel};
use crate::seeded_rng;
use crate::tensor::{Tensor, TensorError};

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("loss became non-finite at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("invalid training configuration: {0}")]
    BadConfig(String),
    #[error("checkpoint is version {got}, this build reads version {want}")]
    VersionMismatch { got: u32, want: u32 },
    #[error("corrupt checkpoint: {0}")]
    CorruptFile(String),
    #[error(transparent)]
    Osme(#[from] OsmeError),
    #[error(transparent)]
    Mamc(#[from] MamcError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub model: OsmeConfig,
    pub data: SynthSpec,
    /// Class-distinct pairs per batch (N); batch size is 2N images.
    pub pairs_per_batch: usize,
    /// Weight on the metric constraint terms; 0 trains pure softmax.
    pub lambda: f64,
    pub epochs: usize,
    pub lr: f64,
    /// Multiplicative decay applied every `lr_decay_epochs`.
    pub lr_decay: f64,
    pub lr_decay_epochs: f64,
    pub momentum: f64,
    /// Images per class in the training split; the rest evaluate.
    pub train_per_class: usize,
    /// Seeds parameter init (stream 0) and batch sampling (stream 1).
    pub seed: u64,
}

impl TrainConfig {
    /// Desk-scale defaults: 8 glyph classes, 5 pairs per batch, 60 epochs.
    /// The base rate is calibrated for from-scratch training at this scale;
    /// larger steps destabilize the metric terms, smaller ones plateau.
    pub fn desk(seed: u64) -> TrainConfig {
        TrainConfig {
            model: OsmeConfig::desk(8),
            data: SynthSpec::desk(seed),
            pairs_per_batch: 5,
            lambda: 0.5,
            epochs: 60,
            lr: 0.004,
            lr_decay: 0.96,
            lr_decay_epochs: 0.6,
            momentum: 0.9,
            train_per_class: 20,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(TrainError::BadConfig(msg));
        self.model.validate()?;
        self.data.validate()?;
        if self.model.classes != self.data.classes {
            return bad(format!(
                "model has {} classes, data has {}",
                self.model.classes, self.data.classes
            ));
        }
        if self.model.input_w() != self.data.width || self.model.input_h() != self.data.height {
            return bad(format!(
                "model wants {}x{} input, data is {}x{}",
                self.model.input_w(),
                self.model.input_h(),
                self.data.width,
                self.data.height
            ));
        }
        if self.pairs_per_batch < 1 || self.pairs_per_batch > self.data.classes {
            return bad(format!(
                "pairs_per_batch must be in 1..={}, got {}",
                self.data.classes, self.pairs_per_batch
            ));
        }
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return bad(format!("lambda must be finite and >= 0, got {}", self.lambda));
        }
        if self.epochs < 1 {
            return bad("epochs must be >= 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad(format!("lr_decay must be in (0, 1], got {}", self.lr_decay));
        }
        if !(self.lr_decay_epochs > 0.0 && self.lr_decay_epochs.is_finite()) {
            return bad(format!("lr_decay_epochs must be positive, got {}", self.lr_decay_epochs));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if self.train_per_class == 0 || self.train_per_class >= self.data.images_per_class {
            return bad(format!(
                "train_per_class must be in 1..{}, got {}",
                self.data.images_per_class, self.train_per_class
            ));
        }
        Ok(())
    }
}

/// Stepped decay: the rate drops by `lr_decay` once per
/// ceil(lr_decay_epochs * batches_per_epoch) optimizer steps.
pub fn lr_at(cfg: &TrainConfig, step: usize, batches_per_epoch: usize) -> f64 {
    let interval = (cfg.lr_decay_epochs * batches_per_epoch as f64).ceil() as usize;
    let interval = interval.max(1);
    cfg.lr * cfg.lr_decay.powi((step / interval) as i32)
}

/// Heavy-ball SGD: v <- momentum*v + g, w <- w - lr*v.
pub struct Sgd {
    momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(params: &[(String, Tensor)], momentum: f64) -> Sgd {
        let velocity = params.iter().map(|(_, p)| vec![0.0; p.numel()]).collect();
        Sgd { momentum, velocity }
    }

    /// One update over every parameter, in listing order. Parameters with
    /// no accumulated gradient see a pure momentum step.
    pub fn step(&mut self, params: &[(String, Tensor)], lr: f64) -> Result<()> {
        for ((_, p), v) in params.iter().zip(&mut self.velocity) {
            let grad = p.grad().unwrap_or_else(|| vec![0.0; p.numel()]);
            let mut next = p.to_vec();
            for i in 0..next.len() {
                v[i] = self.momentum * v[i] + grad[i];
                next[i] -= lr * v[i];
            }
            p.set_data(&next)?;
        }
        Ok(())
    }

    pub fn velocities(&self) -> &[Vec<f64>] {
        &self.velocity
    }
}

/// One line of the metrics stream. Serialized as JSONL by the callers;
/// `top1_eval` appears only on epoch-end records.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricsRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_softmax: f64,
    pub loss_sasc: f64,
    pub loss_sadc: f64,
    pub loss_dasc: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub top1_eval: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Summary {
    pub final_top1: f64,
    pub best_top1: f64,
    pub seed: u64,
}

/// Top-1 accuracy over a dataset; logit ties resolve to the lowest class
/// index.
pub fn evaluate(model: &OsmeModel, ds: &Dataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(TrainError::BadConfig("cannot evaluate an empty dataset".into()));
    }
    let mut correct = 0usize;
    for i in 0..ds.len() {
        let fwd = model.forward_image(&ds.image_tensor(i)?)?;
        let logits = fwd.logits.to_vec();
        let mut arg = 0;
        for (j, &v) in logits.iter().enumerate() {
            if v > logits[arg] {
                arg = j;
            }
        }
        if arg == ds.labels[i] {
            correct += 1;
        }
    }
    Ok(correct as f64 / ds.len() as f64)
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: OsmeModel,
    pub train_set: Dataset,
    pub test_set: Dataset,
    params: Vec<(String, Tensor)>,
    sgd: Sgd,
    sampler: ChaCha8Rng,
    pub step: usize,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Trainer> {
        cfg.validate()?;
        let full = gen_dataset(&cfg.data)?;
        let (train_set, test_set) = full.split(cfg.train_per_class)?;
        let mut init_rng = seeded_rng(cfg.seed);
        init_rng.set_stream(0);
        let model = OsmeModel::new(cfg.model.clone(), &mut init_rng)?;
        let params = model.named_params();
        let sgd = Sgd::new(&params, cfg.momentum);
        let mut sampler = seeded_rng(cfg.seed);
        sampler.set_stream(1);
        Ok(Trainer { cfg, model, train_set, test_set, params, sgd, sampler, step: 0 })
    }

    pub fn batches_per_epoch(&self) -> usize {
        (self.train_set.len() / (2 * self.cfg.pairs_per_batch)).max(1)
    }

    pub fn total_steps(&self) -> usize {
        self.cfg.epochs * self.batches_per_epoch()
    }

    pub fn current_lr(&self) -> f64 {
        lr_at(&self.cfg, self.step, self.batches_per_epoch())
    }

    pub fn params(&self) -> &[(String, Tensor)] {
        &self.params
    }

    /// Sample one pair batch, forward, apply the combined loss, backward,
    /// and step the optimizer. Numeric blowups surface as `NonFiniteLoss`.
    pub fn train_step(&mut self) -> Result<MetricsRecord> {
        let lr = self.current_lr();
        let batch = self.train_set.sample_batch(&mut self.sampler, self.cfg.pairs_per_batch)?;
        let step = self.step;
        let blowup = |e: TrainError| match e {
            TrainError::Tensor(TensorError::NumericOverflow { .. })
            | TrainError::Mamc(MamcError::Tensor(TensorError::NumericOverflow { .. }))
            | TrainError::Osme(OsmeError::Tensor(TensorError::NumericOverflow { .. })) => {
                TrainError::NonFiniteLoss { step }
            }
            other => other,
        };

        let mut images = Vec::with_capacity(batch.indices.len());
        for &i in &batch.indices {
            images.push(self.train_set.image_tensor(i)?);
        }
        let fwd = self.model.forward_batch(&images).map_err(|e| blowup(e.into()))?;
        let features: Vec<Vec<Tensor>> = fwd
            .iter()
            .map(|f| f.branches.iter().map(|b| b.feature.clone()).collect())
            .collect();
        let logits: Vec<Tensor> = fwd.iter().map(|f| f.logits.clone()).collect();
        let bf = BatchFeatures::new(features, batch.labels.clone())?;
        let parts = mamc_loss(&bf, &logits, self.cfg.lambda).map_err(|e| blowup(e.into()))?;
        if !parts.total.item().is_finite() {
            return Err(TrainError::NonFiniteLoss { step });
        }

        for (_, p) in &self.params {
            p.zero_grad();
        }
        parts.total.backward().map_err(|e| blowup(e.into()))?;
        self.sgd.step(&self.params, lr).map_err(|e| blowup(e))?;

        let record = MetricsRecord {
            step,
            epoch: step / self.batches_per_epoch(),
            lr,
            loss_total: parts.total.item(),
            loss_softmax: parts.softmax,
            loss_sasc: parts.sasc,
            loss_sadc: parts.sadc,
            loss_dasc: parts.dasc,
            top1_eval: None,
        };
        self.step += 1;
        Ok(record)
    }

    /// One full epoch from an epoch boundary; the last record carries the
    /// test-set accuracy. Returns that accuracy.
    pub fn run_epoch<F>(&mut self, mut sink: F) -> Result<f64>
    where
        F: FnMut(&MetricsRecord) -> io::Result<()>,
    {
        let bpe = self.batches_per_epoch();
        if self.step % bpe != 0 {
            return Err(TrainError::BadConfig(format!(
                "run_epoch must start on an epoch boundary, step is {}",
                self.step
            )));
        }
        let mut top1 = 0.0;
        for b in 0..bpe {
            let mut rec = self.train_step()?;
            if b == bpe - 1 {
                top1 = evaluate(&self.model, &self.test_set)?;
                rec.top1_eval = Some(top1);
            }
            sink(&rec)?;
        }
        Ok(top1)
    }

    /// Run every remaining epoch and summarize.
    pub fn run<F>(&mut self, mut sink: F) -> Result<Summary>
    where
        F: FnMut(&MetricsRecord) -> io::Result<()>,
    {
        let mut best = f64::NEG_INFINITY;
        let mut last = f64::NAN;
        while self.step < self.total_steps() {
            let top1 = self.run_epoch(&mut sink)?;
            best = best.max(top1);
            last = top1;
        }
        if !last.is_finite() {
            last = evaluate(&self.model, &self.test_set)?;
            best = last;
        }
        Ok(Summary { final_top1: last, best_top1: best, seed: self.cfg.seed })
    }
}

const CKPT_MAGIC: &[u8; 8] = b"OSMECKPT";
const CKPT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct CkptMeta {
    config: TrainConfig,
    step: usize,
    rng_seed: u64,
    rng_stream: u64,
    rng_word_lo: u64,
    rng_word_hi: u64,
    tensors: Vec<TensorMeta>,
}

/// Serialize the full training state: config, step counter, sampler RNG
/// position, parameters, and momentum buffers. Layout: magic, version,
/// length-prefixed JSON meta, raw little-endian f64 tensor data in meta
/// order, and a trailing FNV-1a checksum of everything before it.
pub fn save_checkpoint(path: &Path, trainer: &Trainer) -> Result<()> {
    let mut tensors: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
    for (name, p) in &trainer.params {
        tensors.push((name.clone(), p.shape().to_vec(), p.to_vec()));
    }
    for ((name, p), v) in trainer.params.iter().zip(trainer.sgd.velocities()) {
        tensors.push((format!("velocity/{}", name), p.shape().to_vec(), v.clone()));
    }
    let word_pos = trainer.sampler.get_word_pos();
    let meta = CkptMeta {
        config: trainer.cfg.clone(),
        step: trainer.step,
        rng_seed: trainer.cfg.seed,
        rng_stream: trainer.sampler.get_stream(),
        rng_word_lo: word_pos as u64,
        rng_word_hi: (word_pos >> 64) as u64,
        tensors: tensors
            .iter()
            .map(|(name, shape, _)| TensorMeta { name: name.clone(), shape: shape.clone() })
            .collect(),
    };
    let meta_bytes = serde_json::to_vec(&meta)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(meta_bytes.len() as u32).to_le_bytes());
    buf.extend_from_slice(&meta_bytes);
    for (_, _, data) in &tensors {
        for v in data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let checksum = fnv1a64(buf.iter().copied());
    buf.extend_from_slice(&checksum.to_le_bytes());
    fs::write(path, buf)?;
    Ok(())
}

/// A parsed checkpoint, not yet bound to a model.
pub struct Checkpoint {
    pub config: TrainConfig,
    pub step: usize,
    pub rng_seed: u64,
    pub rng_stream: u64,
    pub rng_word_pos: u128,
    pub tensors: Vec<(String, Vec<usize>, Vec<f64>)>,
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let buf = fs::read(path)?;
    let corrupt = |msg: &str| TrainError::CorruptFile(format!("{}: {}", path.display(), msg));
    if buf.len() < 8 + 4 + 4 + 8 {
        return Err(corrupt("too short"));
    }
    let (body, trailer) = buf.split_at(buf.len() - 8);
    let stored = u64::from_le_bytes(trailer.try_into().unwrap());
    let actual = fnv1a64(body.iter().copied());
    if stored != actual {
        return Err(corrupt("checksum mismatch"));
    }
    if &body[..8] != CKPT_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u32::from_le_bytes(body[8..12].try_into().unwrap());
    if version != CKPT_VERSION {
        return Err(TrainError::VersionMismatch { got: version, want: CKPT_VERSION });
    }
    let meta_len = u32::from_le_bytes(body[12..16].try_into().unwrap()) as usize;
    if body.len() < 16 + meta_len {
        return Err(corrupt("truncated meta block"));
    }
    let meta: CkptMeta = serde_json::from_slice(&body[16..16 + meta_len])
        .map_err(|e| corrupt(&format!("meta parse: {}", e)))?;
    let mut offset = 16 + meta_len;
    let mut tensors = Vec::with_capacity(meta.tensors.len());
    for tm in &meta.tensors {
        let numel: usize = tm.shape.iter().product();
        let bytes = numel * 8;
        if body.len() < offset + bytes {
            return Err(corrupt(&format!("truncated tensor data for {}", tm.name)));
        }
        let data: Vec<f64> = body[offset..offset + bytes]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((tm.name.clone(), tm.shape.clone(), data));
        offset += bytes;
    }
    if offset != body.len() {
        return Err(corrupt("trailing bytes after tensor data"));
    }
    Ok(Checkpoint {
        config: meta.config,
        step: meta.step,
        rng_seed: meta.rng_seed,
        rng_stream: meta.rng_stream,
        rng_word_pos: (meta.rng_word_hi as u128) << 64 | meta.rng_word_lo as u128,
        tensors,
    })
}

impl Trainer {
    /// Rebuild a trainer in exactly the saved state. The dataset is
    /// regenerated from the config (generation is deterministic), then
    /// parameters, momentum buffers, and the sampler position are restored.
    pub fn from_checkpoint(ck: Checkpoint) -> Result<Trainer> {
        let mut trainer = Trainer::new(ck.config)?;
        let mut by_name: std::collections::HashMap<&str, &(String, Vec<usize>, Vec<f64>)> =
            ck.tensors.iter().map(|t| (t.0.as_str(), t)).collect();
        for (i, (name, p)) in trainer.params.iter().enumerate() {
            let (_, shape, data) = by_name
                .remove(name.as_str())
                .ok_or_else(|| TrainError::CorruptFile(format!("missing tensor {}", name)))?;
            if shape != p.shape() {
                return Err(TrainError::CorruptFile(format!(
                    "tensor {} has shape {:?}, model wants {:?}",
                    name,
                    shape,
                    p.shape()
                )));
            }
            p.set_data(data)?;
            let vname = format!("velocity/{}", name);
            let (_, vshape, vdata) = by_name
                .remove(vname.as_str())
                .ok_or_else(|| TrainError::CorruptFile(format!("missing tensor {}", vname)))?;
            if vshape != p.shape() {
                return Err(TrainError::CorruptFile(format!("velocity shape mismatch for {}", name)));
            }
            trainer.sgd.velocity[i].copy_from_slice(vdata);
        }
        if let Some((name, _, _)) = by_name.into_values().next() {
            return Err(TrainError::CorruptFile(format!("unexpected tensor {}", name)));
        }
        trainer.sampler = seeded_rng(ck.rng_seed);
        trainer.sampler.set_stream(ck.rng_stream);
        trainer.sampler.set_word_pos(ck.rng_word_pos);
        trainer.step = ck.step;
        Ok(trainer)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    /// Tiny but complete config: micro model on a matching 8x8 dataset.
    fn micro_cfg(seed: u64) -> TrainConfig {
        let model = OsmeConfig::micro();
        let data = SynthSpec {
            classes: 2,
            images_per_class: 6,
            width: 10,
            height: 10,
            noise_std: 0.05,
            seed,
        };
        // micro wants 8x8 inputs; bump the map to keep dims consistent.
        let mut model = model;
        model.map_w = 5;
        model.map_h = 5;
        TrainConfig {
            model,
            data,
            pairs_per_batch: 2,
            lambda: 0.5,
            epochs: 2,
            lr: 0.001,
            lr_decay: 0.96,
            lr_decay_epochs: 0.6,
            momentum: 0.9,
            train_per_class: 4,
            seed,
        }
    }

    #[test]
    fn lr_schedule_hits_reference_values() {
        let mut cfg = micro_cfg(1);
        cfg.lr = 0.001;
        // 16 batches per epoch, decay every ceil(0.6 * 16) = 10 steps.
        assert_eq!(lr_at(&cfg, 0, 16), 0.001);
        assert_eq!(lr_at(&cfg, 9, 16), 0.001);
        assert_eq!(lr_at(&cfg, 10, 16), 0.001 * 0.96);
        assert_eq!(lr_at(&cfg, 19, 16), 0.001 * 0.96);
        assert_eq!(lr_at(&cfg, 20, 16), 0.001 * 0.96 * 0.96);
        assert!((lr_at(&cfg, 20, 16) - 0.0009216).abs() < 1e-18);
    }

    #[test]
    fn config_validation_catches_cross_field_breakage() {
        assert!(micro_cfg(1).validate().is_ok());
        let mut c = micro_cfg(1);
        c.model.classes = 3;
        assert!(matches!(c.validate(), Err(TrainError::BadConfig(_))));
        c = micro_cfg(1);
        c.data.width = 12;
        assert!(c.validate().is_err());
        c = micro_cfg(1);
        c.pairs_per_batch = 3; // only 2 classes
        assert!(c.validate().is_err());
        c = micro_cfg(1);
        c.lambda = f64::INFINITY;
        assert!(c.validate().is_err());
        c = micro_cfg(1);
        c.momentum = 1.0;
        assert!(c.validate().is_err());
        c = micro_cfg(1);
        c.train_per_class = 6;
        assert!(c.validate().is_err());
    }

    #[test]
    fn sgd_matches_a_hand_computed_momentum_update() {
        let w = Tensor::param(vec![2], vec![1.0, -2.0]).unwrap();
        let params = vec![("w".to_string(), w.clone())];
        let mut sgd = Sgd::new(&params, 0.9);
        // loss = sum(w^2), grad = 2w.
        let step = |sgd: &mut Sgd| {
            for (_, p) in &params {
                p.zero_grad();
            }
            w.mul(&w).unwrap().reduce_sum().unwrap().backward().unwrap();
            sgd.step(&params, 0.1).unwrap();
        };
        step(&mut sgd);
        // v = [2, -4], w = [1 - 0.2, -2 + 0.4]
        assert_eq!(*w.data(), vec![0.8, -1.6]);
        step(&mut sgd);
        // g = [1.6, -3.2], v = [0.9*2 + 1.6, 0.9*-4 - 3.2] = [3.4, -6.8]
        // w = [0.8 - 0.34, -1.6 + 0.68]
        let got = w.to_vec();
        assert!((got[0] - 0.46).abs() < 1e-15);
        assert!((got[1] + 0.92).abs() < 1e-15);
    }

    #[test]
    fn two_trainers_with_one_seed_walk_identical_trajectories() {
        let mut a = Trainer::new(micro_cfg(5)).unwrap();
        let mut b = Trainer::new(micro_cfg(5)).unwrap();
        for _ in 0..3 {
            let ra = a.train_step().unwrap();
            let rb = b.train_step().unwrap();
            assert_eq!(ra.loss_total.to_bits(), rb.loss_total.to_bits());
            assert_eq!(ra.lr, rb.lr);
        }
        let mut c = Trainer::new(micro_cfg(6)).unwrap();
        let rc = c.train_step().unwrap();
        let ra = a.train_step().unwrap();
        assert_ne!(ra.loss_total.to_bits(), rc.loss_total.to_bits());
    }

    #[test]
    fn lambda_zero_runs_match_softmax_only_records() {
        let mut cfg = micro_cfg(7);
        cfg.lambda = 0.0;
        let mut t = Trainer::new(cfg).unwrap();
        for _ in 0..4 {
            let r = t.train_step().unwrap();
            assert_eq!(r.loss_total.to_bits(), r.loss_softmax.to_bits());
            assert_eq!(r.loss_sasc, 0.0);
            assert_eq!(r.loss_sadc, 0.0);
            assert_eq!(r.loss_dasc, 0.0);
        }
    }

    #[test]
    fn metrics_records_serialize_with_stable_keys() {
        let rec = MetricsRecord {
            step: 3,
            epoch: 0,
            lr: 0.001,
            loss_total: 1.5,
            loss_softmax: 1.0,
            loss_sasc: 0.25,
            loss_sadc: 0.15,
            loss_dasc: 0.1,
            top1_eval: None,
        };
        let line = serde_json::to_string(&rec).unwrap();
        assert_eq!(
            line,
            r#"{"step":3,"epoch":0,"lr":0.001,"loss_total":1.5,"loss_softmax":1.0,"loss_sasc":0.25,"loss_sadc":0.15,"loss_dasc":0.1}"#
        );
        let with_eval = MetricsRecord { top1_eval: Some(0.75), ..rec };
        assert!(serde_json::to_string(&with_eval).unwrap().ends_with(r#""top1_eval":0.75}"#));
    }

    #[test]
    fn run_epoch_emits_one_eval_record_per_epoch() {
        let mut t = Trainer::new(micro_cfg(8)).unwrap();
        let bpe = t.batches_per_epoch();
        let mut records = Vec::new();
        let top1 = t.run_epoch(|r| {
            records.push(r.clone());
            Ok(())
        })
        .unwrap();
        assert_eq!(records.len(), bpe);
        assert_eq!(records.last().unwrap().top1_eval, Some(top1));
        assert!(records[..bpe - 1].iter().all(|r| r.top1_eval.is_none()));
        assert!((0.0..=1.0).contains(&top1));
    }

    #[test]
    fn evaluate_breaks_logit_ties_toward_class_zero() {
        let t = Trainer::new(micro_cfg(9)).unwrap();
        let w = &t.model.params;
        w.cls_weight.set_data(&vec![0.0; w.cls_weight.numel()]).unwrap();
        w.cls_bias.set_data(&vec![0.0; w.cls_bias.numel()]).unwrap();
        // All logits zero: every image predicts class 0.
        let acc = evaluate(&t.model, &t.test_set).unwrap();
        let zeros = t.test_set.labels.iter().filter(|&&l| l == 0).count();
        assert!((acc - zeros as f64 / t.test_set.len() as f64).abs() < 1e-12);
    }

    #[test]
    fn checkpoints_round_trip_bit_for_bit() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        let mut t = Trainer::new(micro_cfg(10)).unwrap();
        for _ in 0..3 {
            t.train_step().unwrap();
        }
        save_checkpoint(&path, &t).unwrap();
        let back = Trainer::from_checkpoint(load_checkpoint(&path).unwrap()).unwrap();
        assert_eq!(back.step, 3);
        for ((_, p), (_, q)) in t.params.iter().zip(back.params.iter()) {
            let (a, b) = (p.to_vec(), q.to_vec());
            assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        for (v, w) in t.sgd.velocities().iter().zip(back.sgd.velocities()) {
            assert!(v.iter().zip(w).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(t.sampler.get_word_pos(), back.sampler.get_word_pos());
    }

    #[test]
    fn resumed_training_continues_the_exact_trajectory() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.ckpt");

        let mut straight = Trainer::new(micro_cfg(11)).unwrap();
        let mut all: Vec<MetricsRecord> = Vec::new();
        for _ in 0..2 {
            straight.run_epoch(|r| {
                all.push(r.clone());
                Ok(())
            })
            .unwrap();
        }

        let mut first = Trainer::new(micro_cfg(11)).unwrap();
        let mut head: Vec<MetricsRecord> = Vec::new();
        first.run_epoch(|r| {
            head.push(r.clone());
            Ok(())
        })
        .unwrap();
        save_checkpoint(&path, &first).unwrap();

        let mut resumed = Trainer::from_checkpoint(load_checkpoint(&path).unwrap()).unwrap();
        let mut tail: Vec<MetricsRecord> = Vec::new();
        resumed.run_epoch(|r| {
            tail.push(r.clone());
            Ok(())
        })
        .unwrap();

        let rejoined: Vec<MetricsRecord> = head.into_iter().chain(tail).collect();
        assert_eq!(all.len(), rejoined.len());
        for (x, y) in all.iter().zip(&rejoined) {
            assert_eq!(
                serde_json::to_string(x).unwrap(),
                serde_json::to_string(y).unwrap()
            );
            assert_eq!(x.loss_total.to_bits(), y.loss_total.to_bits());
        }
    }

    #[test]
    fn corrupt_and_mismatched_checkpoints_are_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        let mut t = Trainer::new(micro_cfg(12)).unwrap();
        t.train_step().unwrap();
        save_checkpoint(&path, &t).unwrap();

        let good = fs::read(&path).unwrap();
        // Flip a tensor byte.
        let mut bad = good.clone();
        let mid = bad.len() / 2;
        bad[mid] ^= 0x01;
        fs::write(&path, &bad).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(TrainError::CorruptFile(_))));

        // Wrong version, checksum recomputed so only the version differs.
        let mut wrong = good.clone();
        wrong[8] = 99;
        let body_len = wrong.len() - 8;
        let sum = fnv1a64(wrong[..body_len].iter().copied());
        wrong[body_len..].copy_from_slice(&sum.to_le_bytes());
        fs::write(&path, &wrong).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(TrainError::VersionMismatch { got: 99, want: 1 })
        ));

        // Truncation.
        fs::write(&path, &good[..good.len() - 20]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(TrainError::CorruptFile(_))));
    }

    #[test]
    fn exploding_parameters_surface_as_non_finite_loss() {
        let mut t = Trainer::new(micro_cfg(13)).unwrap();
        let p = &t.model.params.project[0];
        let huge = vec![1e200; p.numel()];
        p.set_data(&huge).unwrap();
        let mut saw = None;
        for _ in 0..5 {
            match t.train_step() {
                Ok(_) => continue,
                Err(e) => {
                    saw = Some(e);
                    break;
                }
            }
        }
        assert!(matches!(saw, Some(TrainError::NonFiniteLoss { .. })), "got {:?}", saw);
    }
}
