//! Optimization loop: Adam steps over seeded clip orders, validation after
//! every epoch, early stopping on validation weighted F1.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annotations::{to_binary, ClassVocab, LabelTrack};
use crate::dataset::{class_occurrences, load_pairs, seeded_pcg, shuffle, splitmix64, Corpus, Partition, Split};
use crate::error::{Error, Result};
use crate::features::{write_atomic, FrameMatrix};
use crate::metrics::{evaluate, EvalReport};
use crate::nn::checkpoint::FORMAT_VERSION;
use crate::nn::{class_weights, Checkpoint, CheckpointMeta, Mat, Mode, ModelConfig, SequenceModel};

pub const CLIP_NORM: f64 = 5.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub dropout: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub balance_weights: bool,
    pub binary: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 1,
            dropout: 0.4,
            max_epochs: 200,
            patience: 20,
            learning_rate: 1e-4,
            seed: 0,
            balance_weights: true,
            binary: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::BadConfig(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1");
        }
        if self.patience == 0 {
            return bad("patience must be at least 1");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and non-negative");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub val_weighted_f1: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    Patience,
    /// A resumed checkpoint had already reached `max_epochs`.
    AlreadyComplete,
}

/// Validation scores of a resumed checkpoint, re-measured before training
/// continues.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResumePoint {
    pub epoch: usize,
    pub val_accuracy: f64,
    pub val_weighted_f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_weighted_f1: f64,
    pub stopped_reason: StopReason,
    pub resumed_from: Option<ResumePoint>,
}

impl TrainLog {
    /// One JSON object per epoch, then a summary line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        if let Some(r) = &self.resumed_from {
            out += &serde_json::json!({ "resumed_from": r }).to_string();
            out.push('\n');
        }
        for r in &self.records {
            out += &serde_json::to_string(r).expect("record serializes");
            out.push('\n');
        }
        out += &serde_json::json!({
            "best_epoch": self.best_epoch,
            "best_val_weighted_f1": self.best_val_weighted_f1,
            "stopped_reason": self.stopped_reason,
        })
        .to_string();
        out.push('\n');
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), self.to_jsonl().as_bytes())
    }
}

/// Adam with bias correction.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Mat<f32>>,
    v: Vec<Mat<f32>>,
}

impl Adam {
    pub fn new(model: &SequenceModel, lr: f64) -> Self {
        let zeros = || {
            model
                .params
                .iter()
                .map(|p| Mat::zeros(p.value.rows(), p.value.cols()))
                .collect::<Vec<_>>()
        };
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step(&mut self, model: &mut SequenceModel, grads: &[Mat<f32>]) {
        self.step += 1;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let rate = (self.lr * c2.sqrt() / c1) as f32;
        let eps = (self.eps * c2.sqrt()) as f32;
        for (((p, g), m), v) in model.params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let iter = p
                .value
                .as_mut_slice()
                .iter_mut()
                .zip(g.as_slice())
                .zip(m.as_mut_slice().iter_mut().zip(v.as_mut_slice()));
            for ((w, &gi), (mi, vi)) in iter {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                *w -= rate * *mi / (vi.sqrt() + eps);
            }
        }
    }
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`. Returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut [Mat<f32>], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.sum_sq()).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = (max_norm / norm) as f32;
        for g in grads.iter_mut() {
            g.scale_assign(s);
        }
    }
    norm
}

/// Tracks the best validation score; ties keep the earlier epoch.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(usize, f64)>,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: None,
            stale: 0,
        }
    }

    pub fn with_best(patience: usize, epoch: usize, score: f64) -> Self {
        EarlyStopping {
            patience,
            best: Some((epoch, score)),
            stale: 0,
        }
    }

    /// Records an epoch's score and reports whether it is a new best.
    pub fn observe(&mut self, epoch: usize, score: f64) -> bool {
        match self.best {
            Some((_, best)) if score <= best => {
                self.stale += 1;
                false
            }
            _ => {
                self.best = Some((epoch, score));
                self.stale = 0;
                true
            }
        }
    }

    pub fn should_stop(&self) -> bool {
        self.stale >= self.patience
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

/// Features and label sequences ready for training.
pub struct TrainData {
    pub vocab: ClassVocab,
    pub train: Vec<(FrameMatrix, LabelTrack)>,
    pub val: Vec<(FrameMatrix, LabelTrack)>,
}

impl TrainData {
    pub fn load(corpus: &Corpus, split: &Split, binary: bool) -> Result<Self> {
        if split.train.is_empty() {
            return Err(Error::EmptySplit("train"));
        }
        if split.val.is_empty() {
            return Err(Error::EmptySplit("val"));
        }
        let prep = |p| -> Result<Vec<(FrameMatrix, LabelTrack)>> {
            let pairs = load_pairs(corpus, split.ids(p))?;
            Ok(if binary {
                pairs.into_iter().map(|(f, t)| (f, to_binary(&t))).collect()
            } else {
                pairs
            })
        };
        Ok(TrainData {
            vocab: if binary { ClassVocab::binary() } else { corpus.vocab.clone() },
            train: prep(Partition::Train)?,
            val: prep(Partition::Val)?,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.vocab.num_classes()
    }

    /// Reciprocal training-set class frequencies, or all ones.
    pub fn class_weights(&self, balance: bool) -> Vec<f32> {
        if !balance {
            return vec![1.0; self.num_classes()];
        }
        let counts = class_occurrences(self.train.iter().map(|(_, t)| t), self.num_classes());
        class_weights(&counts).into_iter().map(|w| w as f32).collect()
    }
}

/// Eval-mode scores on `pairs`.
pub fn validate(model: &SequenceModel, pairs: &[(FrameMatrix, LabelTrack)]) -> Result<EvalReport> {
    let posts = pairs
        .par_iter()
        .map(|(f, _)| model.forward(f, Mode::Eval))
        .collect::<Result<Vec<_>>>()?;
    let golds: Vec<LabelTrack> = pairs.iter().map(|(_, t)| t.clone()).collect();
    evaluate(&posts, &golds)
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Parameters from the best validation epoch.
    pub checkpoint: Checkpoint,
    pub log: TrainLog,
}

impl TrainOutcome {
    /// Writes `model.ckpt` and `trainlog.jsonl` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.checkpoint.save(dir.join("model.ckpt"))?;
        self.log.save(dir.join("trainlog.jsonl"))
    }
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut s = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xD1B5_4A32_D192_ED03);
    splitmix64(&mut s)
}

/// Trains a freshly initialized model.
pub fn train(corpus: &Corpus, split: &Split, model_config: &ModelConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let config = ModelConfig {
        dropout: cfg.dropout,
        ..model_config.clone()
    };
    config.validate()?;
    let data = TrainData::load(corpus, split, cfg.binary)?;
    check_compat(&config, &data, corpus)?;
    let model = SequenceModel::init(config, cfg.seed)?;
    run(corpus, &data, model, cfg, 0, None)
}

/// Continues training from a checkpoint with a fresh optimizer state.
pub fn resume(checkpoint_path: impl AsRef<Path>, corpus: &Corpus, split: &Split, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let ck = Checkpoint::load(checkpoint_path)?;
    let data = TrainData::load(corpus, split, cfg.binary)?;
    let mut model = ck.model;
    model.config.dropout = cfg.dropout;
    check_compat(&model.config, &data, corpus).map_err(|e| Error::IncompatibleCheckpoint(e.to_string()))?;
    if ck.meta.feature_kind != corpus.feature_kind {
        return Err(Error::IncompatibleCheckpoint(format!(
            "checkpoint uses {} features, corpus has {}",
            ck.meta.feature_kind, corpus.feature_kind
        )));
    }
    let start = ck.meta.epoch;
    if start >= cfg.max_epochs {
        let log = TrainLog {
            records: Vec::new(),
            best_epoch: start,
            best_val_weighted_f1: ck.meta.val_f1,
            stopped_reason: StopReason::AlreadyComplete,
            resumed_from: None,
        };
        let checkpoint = Checkpoint {
            meta: ck.meta,
            model,
        };
        return Ok(TrainOutcome { checkpoint, log });
    }
    let report = validate(&model, &data.val)?;
    let point = ResumePoint {
        epoch: start,
        val_accuracy: report.accuracy,
        val_weighted_f1: report.weighted_f1,
    };
    run(corpus, &data, model, cfg, start, Some(point))
}

fn check_compat(config: &ModelConfig, data: &TrainData, corpus: &Corpus) -> Result<()> {
    if config.num_class != data.num_classes() {
        return Err(Error::BadConfig(format!(
            "model has {} classes, corpus labels have {}",
            config.num_class,
            data.num_classes()
        )));
    }
    if config.input_dim != corpus.feature_kind.dim() {
        return Err(Error::DimMismatch {
            expected: corpus.feature_kind.dim(),
            found: config.input_dim,
        });
    }
    Ok(())
}

fn run(
    corpus: &Corpus,
    data: &TrainData,
    mut model: SequenceModel,
    cfg: &TrainConfig,
    start_epoch: usize,
    resumed: Option<ResumePoint>,
) -> Result<TrainOutcome> {
    let weights = data.class_weights(cfg.balance_weights);
    let mut adam = Adam::new(&model, cfg.learning_rate);
    let mut stopper = match &resumed {
        Some(r) => EarlyStopping::with_best(cfg.patience, r.epoch, r.val_weighted_f1),
        None => EarlyStopping::new(cfg.patience),
    };
    let mut best_model = model.clone();
    let mut records = Vec::new();
    let mut reason = StopReason::MaxEpochs;
    let labels: Vec<&[usize]> = data.train.iter().map(|(_, t)| t.labels.as_slice()).collect();

    for epoch in start_epoch + 1..=cfg.max_epochs {
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        shuffle(&mut order, &mut seeded_pcg(mix(cfg.seed, epoch as u64, 0)));
        let mut loss_sum = 0.0;
        let mut steps = 0usize;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<(&FrameMatrix, &[usize])> = chunk.iter().map(|&i| (&data.train[i].0, labels[i])).collect();
            let mode = Mode::Train {
                seed: mix(cfg.seed, epoch as u64, step as u64 + 1),
            };
            let (loss, mut grads) = model.loss_and_gradients(&batch, &weights, mode)?;
            if !loss.is_finite() || grads.iter().any(|g| !g.all_finite()) {
                return Err(Error::Divergence {
                    epoch,
                    clip: data.train[chunk[0]].0.clip_id.clone(),
                });
            }
            let norm = clip_global_norm(&mut grads, CLIP_NORM);
            if norm > CLIP_NORM {
                log::debug!("epoch {epoch} step {step}: gradient norm {norm:.3} clipped to {CLIP_NORM}");
            }
            adam.step(&mut model, &grads);
            loss_sum += loss;
            steps += 1;
        }
        let report = validate(&model, &data.val)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / steps as f64,
            val_accuracy: report.accuracy,
            val_weighted_f1: report.weighted_f1,
        };
        log::info!(
            "epoch {epoch}: loss {:.5} val acc {:.4} val f1 {:.4}",
            record.train_loss,
            record.val_accuracy,
            record.val_weighted_f1
        );
        if stopper.observe(epoch, report.weighted_f1) {
            best_model = model.clone();
        }
        records.push(record);
        if stopper.should_stop() {
            reason = StopReason::Patience;
            break;
        }
    }

    let (best_epoch, best_f1) = stopper.best().expect("at least one epoch ran");
    let meta = CheckpointMeta {
        format_version: FORMAT_VERSION,
        config: best_model.config.clone(),
        vocab: data.vocab.clone(),
        feature_kind: corpus.feature_kind,
        train_seed: cfg.seed,
        epoch: best_epoch,
        val_f1: best_f1,
        binary: cfg.binary,
    };
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            meta,
            model: best_model,
        },
        log: TrainLog {
            records,
            best_epoch,
            best_val_weighted_f1: best_f1,
            stopped_reason: reason,
            resumed_from: resumed,
        },
    })
}
