//! Training loop: shuffled mini-batch epochs, one validation check per epoch,
//! learning-rate halving on stalled validation loss and early stopping once
//! the rate falls below a floor.

use crate::checkpoint::to_bytes;
use crate::lexicon::{batch_examples, batch_in_order, EncodedExample};
use crate::metrics::{classifier_metrics, ClassifierMetrics};
use crate::model::{batch_loss, combined_loss, Mode, Model, ModelParams};
use crate::numcore::{clip_global_norm, Optimizer, OptimizerKind, Real, Tape};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr_initial: f64,
    pub lr_floor: f64,
    /// Validation checks without improvement before the rate is halved.
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    /// Global gradient-norm bound; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub optimizer: OptimizerKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 25,
            lr_initial: 0.007,
            lr_floor: 0.00001,
            patience: 5,
            max_epochs: 100,
            seed: 0,
            clip_norm: Some(5.0),
            optimizer: OptimizerKind::Adam,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::contract("batch_size must be at least 1"));
        }
        if !(self.lr_floor > 0.0 && self.lr_initial > 0.0) {
            return Err(Error::contract("learning rate and floor must be positive"));
        }
        if self.patience == 0 {
            return Err(Error::contract("patience must be at least 1"));
        }
        if let Some(c) = self.clip_norm {
            if c.is_nan() || c <= 0.0 {
                return Err(Error::contract(format!("clip norm {c} must be positive")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_decoder: f64,
    pub valid_classifier: f64,
    pub valid_total: f64,
    /// Rate used for this epoch's updates.
    pub lr: f64,
    pub improved: bool,
    pub halved: bool,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Learning-rate schedule and early-stopping bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub epoch: usize,
    pub lr: f64,
    pub lr_floor: f64,
    pub patience: usize,
    pub best_valid: f64,
    pub best_epoch: Option<usize>,
    pub checks_since_best: usize,
    pub halvings: usize,
    pub history: Vec<EpochRecord>,
}

/// Outcome of one validation check for the schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Check {
    pub improved: bool,
    pub halved: bool,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Self {
        TrainState {
            epoch: 0,
            lr: cfg.lr_initial,
            lr_floor: cfg.lr_floor,
            patience: cfg.patience,
            best_valid: f64::INFINITY,
            best_epoch: None,
            checks_since_best: 0,
            halvings: 0,
            history: Vec::new(),
        }
    }

    /// Feeds one validation loss. A strictly lower loss resets the counter;
    /// otherwise the counter grows and the rate halves when it reaches the
    /// patience, after which the counter starts over. The best loss is kept
    /// across halvings.
    pub fn lr_schedule_update(&mut self, valid_loss: f64) -> Check {
        if valid_loss < self.best_valid {
            self.best_valid = valid_loss;
            self.checks_since_best = 0;
            return Check {
                improved: true,
                halved: false,
            };
        }
        self.checks_since_best += 1;
        let halved = self.checks_since_best >= self.patience;
        if halved {
            self.lr /= 2.0;
            self.halvings += 1;
            self.checks_since_best = 0;
        }
        Check {
            improved: false,
            halved,
        }
    }

    pub fn should_stop(&self) -> bool {
        self.lr < self.lr_floor
    }
}

/// Runs one shuffled pass over the training set and returns the mean batch
/// loss. `step` counts updates across epochs and keys the dropout stream.
pub fn train_epoch<T: Real>(
    model: &mut Model<T>,
    data: &[EncodedExample],
    cfg: &TrainConfig,
    epoch: usize,
    lr: f64,
    optimizer: &mut Optimizer<T>,
    step: &mut u64,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::contract("training set is empty"));
    }
    let batches = batch_examples(data, cfg.batch_size, cfg.seed, epoch as u64)?;
    let mut sum = 0.0;
    for (i, batch) in batches.iter().enumerate() {
        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape);
        let mode = Mode::Train {
            seed: cfg.seed,
            step: *step,
        };
        let losses = batch_loss(&mut tape, &bound, &model.config, batch, mode)?;
        let loss = tape.scalar(losses.total).to_f64c();
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("loss {loss} at epoch {epoch}, batch {i}")));
        }
        tape.backward(losses.total)?;
        model.params.collect_grads(&tape, &bound);
        let mut params = model.params.tensors_mut();
        if let Some(c) = cfg.clip_norm {
            clip_global_norm(&mut params, T::from_f64c(c));
        }
        optimizer.step(&mut params, T::from_f64c(lr))?;
        sum += loss;
        *step += 1;
    }
    Ok(sum / batches.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Validation {
    /// Mean NLL over all unmasked target tokens.
    pub decoder: f64,
    /// Mean BCE over all items.
    pub classifier: f64,
    pub total: f64,
    pub metrics: ClassifierMetrics,
    pub probabilities: Vec<f64>,
}

/// Eval-mode losses and classifier metrics (threshold 0.5) over a set.
pub fn validate<T: Real>(model: &Model<T>, data: &[EncodedExample], batch_size: usize) -> Result<Validation> {
    if data.is_empty() {
        return Err(Error::contract("validation set is empty"));
    }
    let mut dec_sum = 0.0;
    let mut tokens = 0usize;
    let mut cls_sum = 0.0;
    let mut probs = Vec::with_capacity(data.len());
    let mut labels = Vec::with_capacity(data.len());
    for batch in batch_in_order(data, batch_size) {
        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape);
        let l = batch_loss(&mut tape, &bound, &model.config, &batch, Mode::Eval)?;
        let n = batch.dec_mask.iter().filter(|&&m| m).count();
        dec_sum += tape.scalar(l.decoder).to_f64c() * n as f64;
        tokens += n;
        cls_sum += tape.scalar(l.classifier).to_f64c() * batch.size as f64;
        probs.extend(tape.value(l.probabilities).iter().map(|p| p.to_f64c()));
        labels.extend_from_slice(&batch.labels);
    }
    let decoder = dec_sum / tokens as f64;
    let classifier = cls_sum / data.len() as f64;
    Ok(Validation {
        decoder,
        classifier,
        total: combined_loss(decoder, classifier, model.config.weighting())?,
        metrics: classifier_metrics(&probs, &labels, 0.5)?,
        probabilities: probs,
    })
}

/// Where a run writes its checkpoints and log.
#[derive(Debug, Clone)]
pub struct RunFiles {
    pub dir: PathBuf,
}

impl RunFiles {
    pub fn best(&self) -> PathBuf {
        self.dir.join("best.ckpt")
    }

    pub fn last(&self) -> PathBuf {
        self.dir.join("final.ckpt")
    }

    pub fn log(&self) -> PathBuf {
        self.dir.join("run_log.jsonl")
    }
}

#[derive(Debug, Clone)]
pub struct FitOutcome<T> {
    pub state: TrainState,
    /// Parameters of the epoch with the lowest validation loss, if any epoch
    /// ran.
    pub best: Option<ModelParams<T>>,
}

fn log_line(log: &mut Vec<u8>, value: serde_json::Value) {
    serde_json::to_writer(&mut *log, &value).expect("in-memory JSON");
    log.push(b'\n');
}

/// Trains until the rate drops below the floor or `max_epochs` pass.
///
/// `echo` is written as the first log record (the resolved run
/// configuration and input hashes). With `files`, the best and final
/// checkpoints and the JSONL run log are written there; the log carries no
/// timestamps so identical runs produce identical bytes.
pub fn fit<T: Real>(
    model: &mut Model<T>,
    train: &[EncodedExample],
    valid: &[EncodedExample],
    cfg: &TrainConfig,
    echo: serde_json::Value,
    files: Option<&RunFiles>,
) -> Result<FitOutcome<T>> {
    cfg.validate()?;
    model.config.validate()?;
    if train.is_empty() || valid.is_empty() {
        return Err(Error::contract("training and validation sets must be non-empty"));
    }
    let mut log = Vec::new();
    log_line(
        &mut log,
        serde_json::json!({
            "record": "config",
            "run": echo,
            "train": cfg,
            "model": model.config,
            "loss": model.config.weighting().to_string(),
            "train_examples": train.len(),
            "valid_examples": valid.len(),
        }),
    );
    let mut state = TrainState::new(cfg);
    let mut optimizer = Optimizer::new(cfg.optimizer);
    let mut best = None;
    let mut step = 0u64;
    while !state.should_stop() && state.epoch < cfg.max_epochs {
        let epoch = state.epoch;
        let lr = state.lr;
        let train_loss = train_epoch(model, train, cfg, epoch, lr, &mut optimizer, &mut step)?;
        let v = validate(model, valid, cfg.batch_size)?;
        let check = state.lr_schedule_update(v.total);
        if check.improved {
            state.best_epoch = Some(epoch);
            best = Some(model.params.clone());
            if let Some(f) = files {
                write_file(&f.best(), &to_bytes(model)?)?;
            }
        }
        let rec = EpochRecord {
            epoch,
            train_loss,
            valid_decoder: v.decoder,
            valid_classifier: v.classifier,
            valid_total: v.total,
            lr,
            improved: check.improved,
            halved: check.halved,
            accuracy: v.metrics.accuracy,
            precision: v.metrics.precision,
            recall: v.metrics.recall,
            f1: v.metrics.f1,
        };
        log::info!(
            "epoch {epoch}: train {train_loss:.5} valid {:.5} (dec {:.5}, cls {:.5}) lr {lr:e}{}",
            v.total,
            v.decoder,
            v.classifier,
            if check.halved { " -> halved" } else { "" }
        );
        let mut line = serde_json::to_value(rec)?;
        line["record"] = "epoch".into();
        line["next_lr"] = state.lr.into();
        log_line(&mut log, line);
        state.history.push(rec);
        state.epoch += 1;
    }
    let reason = if state.should_stop() { "lr_floor" } else { "max_epochs" };
    log_line(
        &mut log,
        serde_json::json!({
            "record": "summary",
            "epochs": state.epoch,
            "stop_reason": reason,
            "best_epoch": state.best_epoch,
            "best_valid_total": if state.best_epoch.is_some() { Some(state.best_valid) } else { None },
            "final_lr": state.lr,
            "halvings": state.halvings,
        }),
    );
    if let Some(f) = files {
        write_file(&f.last(), &to_bytes(model)?)?;
        write_file(&f.log(), &log)?;
    }
    Ok(FitOutcome { state, best })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lexicon::{build_vocabs, encode_all, LexiconEntry, UnknownPolicy};
    use crate::model::ModelConfig;

    fn toy() -> (Model<f32>, Vec<EncodedExample>) {
        let entries = vec![
            LexiconEntry::new("Fan", &["f", "E:", "n"], Some(true)),
            LexiconEntry::new("Tal", &["t", "a:", "l"], Some(false)),
            LexiconEntry::new("Nase", &["n", "a:", "z", "@"], Some(false)),
        ];
        let vocab = build_vocabs(&entries).unwrap();
        let (ex, _, _) = encode_all(&entries, &vocab, UnknownPolicy::Error).unwrap();
        let cfg = ModelConfig {
            embed_dim: 8,
            hidden_dim: 8,
            classifier_hidden1: 4,
            classifier_hidden2: 4,
            ..ModelConfig::for_vocab(&vocab)
        };
        (Model::new(cfg, vocab, 7).unwrap(), ex)
    }

    #[test]
    fn constant_improvement_never_halves() {
        let mut s = TrainState::new(&TrainConfig::default());
        for k in 0..30 {
            assert!(!s.lr_schedule_update(1.0 - k as f64 * 0.01).halved);
        }
        assert_eq!(s.lr, 0.007);
    }

    #[test]
    fn five_stalls_halve_once() {
        let mut s = TrainState::new(&TrainConfig::default());
        s.lr_schedule_update(1.0);
        for _ in 0..4 {
            assert!(!s.lr_schedule_update(1.0).halved);
        }
        assert!(s.lr_schedule_update(1.5).halved);
        assert_eq!(s.lr, 0.0035);
        assert_eq!(s.best_valid, 1.0);
    }

    #[test]
    fn fifty_stalls_halve_ten_times() {
        let mut s = TrainState::new(&TrainConfig::default());
        s.lr_schedule_update(1.0);
        let halvings = (0..50).filter(|_| s.lr_schedule_update(2.0).halved).count();
        assert_eq!(halvings, 10);
        assert_eq!(s.lr, 0.007 / 1024.0);
        assert!(s.should_stop());
        let mut s9 = TrainState::new(&TrainConfig::default());
        s9.lr = 0.007 / 512.0;
        assert!(!s9.should_stop());
    }

    #[test]
    fn zero_rate_leaves_parameters() {
        let (mut m, ex) = toy();
        let before = m.params.clone();
        let cfg = TrainConfig {
            batch_size: 3,
            ..Default::default()
        };
        let mut opt = Optimizer::new(OptimizerKind::Sgd);
        let loss = train_epoch(&mut m, &ex, &cfg, 0, 0.0, &mut opt, &mut 0).unwrap();
        assert!(loss.is_finite());
        for (a, b) in before.tensors().iter().zip(m.params.tensors()) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn single_batch_mean_is_that_batch() {
        let (mut m, ex) = toy();
        let cfg = TrainConfig {
            batch_size: 3,
            ..Default::default()
        };
        let batch = &batch_examples(&ex, 3, cfg.seed, 0).unwrap()[0];
        let mut tape = Tape::new();
        let bound = m.params.bind(&mut tape);
        let mode = Mode::Train { seed: cfg.seed, step: 0 };
        let total = batch_loss(&mut tape, &bound, &m.config, batch, mode).unwrap().total;
        let expect = tape.scalar(total) as f64;
        let mut opt = Optimizer::new(OptimizerKind::Sgd);
        let got = train_epoch(&mut m, &ex, &cfg, 0, 0.007, &mut opt, &mut 0).unwrap();
        assert_eq!(got, expect);
    }

    #[test]
    fn validation_is_repeatable() {
        let (m, ex) = toy();
        let a = validate(&m, &ex, 2).unwrap();
        let b = validate(&m, &ex, 2).unwrap();
        assert_eq!(a, b);
        assert!(validate(&m, &[], 2).is_err());
        // The untrained head is near 0.5 everywhere.
        assert!(a.probabilities.iter().all(|p| (p - 0.5).abs() < 0.1));
    }

    #[test]
    fn rate_below_floor_runs_no_epoch() {
        let (mut m, ex) = toy();
        let before = m.params.clone();
        let cfg = TrainConfig {
            lr_initial: 1e-6,
            ..Default::default()
        };
        let out = fit(&mut m, &ex, &ex, &cfg, serde_json::Value::Null, None).unwrap();
        assert_eq!(out.state.epoch, 0);
        assert!(out.best.is_none());
        assert_eq!(m.params, before);
    }

    #[test]
    fn fit_is_deterministic_and_writes_files() {
        let cfg = TrainConfig {
            batch_size: 2,
            max_epochs: 3,
            seed: 11,
            ..Default::default()
        };
        let run = || {
            let dir = tempfile::tempdir().unwrap();
            let files = RunFiles {
                dir: dir.path().to_path_buf(),
            };
            let (mut m, ex) = toy();
            let out = fit(&mut m, &ex, &ex, &cfg, serde_json::json!({"k": 1}), Some(&files)).unwrap();
            let read = |p: PathBuf| std::fs::read(p).unwrap();
            (out.state, read(files.log()), read(files.last()), read(files.best()))
        };
        let (s1, log1, last1, best1) = run();
        let (s2, log2, last2, best2) = run();
        assert_eq!(s1, s2);
        assert_eq!((log1.clone(), last1, best1), (log2, last2, best2));
        assert_eq!(s1.history.len(), 3);
        let text = String::from_utf8(log1).unwrap();
        assert_eq!(text.lines().count(), 5);
        let min = s1.history.iter().map(|r| r.valid_total).fold(f64::INFINITY, f64::min);
        assert_eq!(min, s1.best_valid);
    }
}
