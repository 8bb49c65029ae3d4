//! Epoch loop, evaluation, run logging and the mixup comparison runner.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::augment::{self, derive_seed, MixupConfig, Rng};
use crate::checkpoint::{self, TrainState};
use crate::data::{self, batch_iter, DatasetSplit, NormStats};
use crate::error::{Error, Result};
use crate::losses::{cross_entropy, mixup_loss, Reduction};
use crate::model::{Mode, ResNet, ResNetConfig};
use crate::optim::{sgd_step, CosineSchedule, SgdConfig, SgdState};
use crate::tensor::{Tape, Tensor};

pub const RUN_LOG: &str = "run.jsonl";
pub const SUMMARY_CSV: &str = "summary.csv";
pub const TIMING_CSV: &str = "timing.csv";
pub const BEST_CKPT: &str = "best.ckpt";
pub const LAST_CKPT: &str = "last.ckpt";

// stream ids for per-batch generators
const STREAM_INIT: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;
const STREAM_CROP: u64 = 3;
const STREAM_FLIP: u64 = 4;
const STREAM_MIX: u64 = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub t_max: usize,
    pub eta_min: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub mixup: MixupConfig,
    pub seed: u64,
    pub loss_reduction: Reduction,
    pub crop_pad: usize,
    pub flip_prob: f64,
    pub eval_every: usize,
    pub model: ResNetConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            batch_size: 128,
            epochs: 200,
            t_max: 200,
            eta_min: 0.0,
            momentum: 0.9,
            weight_decay: 5e-4,
            mixup: MixupConfig::default(),
            seed: 0,
            loss_reduction: Reduction::Mean,
            crop_pad: 4,
            flip_prob: 0.5,
            eval_every: 1,
            model: ResNetConfig::resnet50(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.sgd().validate()?;
        self.schedule()?;
        self.mixup.validate()?;
        self.model.validate()?;
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("eval_every", self.eval_every),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config(format!(
                "flip_prob must be in [0, 1], got {}",
                self.flip_prob
            )));
        }
        Ok(())
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }

    pub fn schedule(&self) -> Result<CosineSchedule> {
        CosineSchedule::new(self.lr, self.eta_min, self.t_max)
    }

    /// Learning rate used throughout `epoch` (1-based); held at the floor
    /// once the schedule has run out.
    pub fn lr_at(&self, epoch: usize) -> Result<f64> {
        let s = self.schedule()?;
        s.lr((epoch - 1).min(s.t_max))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean per-sample training objective (the mixup loss when enabled).
    pub train_loss: f64,
    /// Mean loss of the training logits against the unmixed labels.
    pub clean_train_loss: f64,
    /// Absent on epochs without evaluation.
    pub test_loss: Option<f64>,
    pub test_error_pct: Option<f64>,
    pub lr: f64,
    /// Kept out of the run log so logs of identical runs are byte-identical.
    #[serde(skip)]
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub epochs: usize,
    pub final_train_loss: f64,
    pub final_test_loss: f64,
    pub final_test_error_pct: f64,
    pub best_test_error_pct: f64,
    pub best_epoch: usize,
    pub num_params: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunLog {
    pub config: TrainConfig,
    pub norm: NormStats,
    pub num_params: usize,
    pub epochs: Vec<EpochMetrics>,
    pub summary: Option<RunSummary>,
}

impl RunLog {
    /// The JSON-lines form written to `run.jsonl`.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut text = json_line(&LogLine::Config {
            config: self.config.clone(),
            norm: self.norm,
            num_params: self.num_params,
        })?;
        for m in &self.epochs {
            text.push_str(&json_line(&LogLine::Epoch(m.clone()))?);
        }
        if let Some(s) = &self.summary {
            text.push_str(&json_line(&LogLine::Summary(s.clone()))?);
        }
        Ok(text)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum LogLine {
    Config {
        config: TrainConfig,
        norm: NormStats,
        num_params: usize,
    },
    Epoch(EpochMetrics),
    Summary(RunSummary),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLoss {
    pub train_loss: f64,
    pub clean_train_loss: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub test_loss: f64,
    pub error_pct: f64,
    pub correct: usize,
    pub total: usize,
}

/// One optimization pass over `train` (already normalized).
///
/// Every batch draws its shuffling, crop, flip and mixup randomness from
/// generators derived from `(seed, epoch, batch)`, so an epoch does not
/// depend on what ran before it.
pub fn train_epoch(
    model: &mut ResNet,
    train: &DatasetSplit,
    config: &TrainConfig,
    epoch: usize,
    opt: &mut SgdState,
) -> Result<EpochLoss> {
    let lr = config.lr_at(epoch)?;
    let sgd = SgdConfig { lr, ..config.sgd() };
    let k = config.model.num_classes;
    let seed = config.seed;
    let e = epoch as u64;
    let shuffle_seed = derive_seed(seed, &[STREAM_SHUFFLE, e]);
    let mut total = 0.0;
    let mut clean_total = 0.0;
    for (b, batch) in batch_iter(train, config.batch_size, true, shuffle_seed).enumerate() {
        let b64 = b as u64;
        let images = augment::random_crop(
            &batch.images,
            config.crop_pad,
            &mut Rng::derive(seed, &[STREAM_CROP, e, b64]),
        )?;
        let images = augment::horizontal_flip(
            &images,
            config.flip_prob,
            &mut Rng::derive(seed, &[STREAM_FLIP, e, b64]),
        )?;
        let targets = augment::one_hot::<f32>(&batch.labels, k)?;
        let (inputs, mixed_targets) = if config.mixup.enabled {
            let draw = augment::mixup(
                &images,
                &targets,
                &config.mixup,
                &mut Rng::derive(seed, &[STREAM_MIX, e, b64]),
            )?;
            (draw.mixed_inputs, draw.mixed_targets)
        } else {
            (images, targets.clone())
        };

        let mut tape = Tape::new();
        let fwd = model.forward(&mut tape, &inputs, Mode::Train)?;
        let loss = mixup_loss(&mut tape, fwd.logits, &mixed_targets, config.loss_reduction)?;
        let value = tape.value(loss.total).data()[0] as f64;
        if !value.is_finite() || loss.per_sample.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteLoss {
                value,
                epoch,
                batch: b,
                lr,
            });
        }
        let log_probs = tape.log_softmax_clamped(fwd.logits)?;
        let clean = cross_entropy(&mut tape, &targets, log_probs, Reduction::Sum)?;
        total += loss.per_sample.iter().sum::<f64>();
        clean_total += clean.per_sample.iter().sum::<f64>();

        let grads = tape.backward(loss.total)?;
        let grads = model.param_grads(&fwd, &grads);
        for (p, g) in model.params_mut().iter_mut().zip(&grads) {
            p.accumulate_grad(g)?;
        }
        sgd_step(model.params_mut(), opt, &sgd)?;
        model.params_mut().iter_mut().for_each(Tensor::zero_grad);
        model.apply_bn_stats(&fwd.bn_stats)?;
    }
    let n = train.len() as f64;
    Ok(EpochLoss {
        train_loss: total / n,
        clean_train_loss: clean_total / n,
    })
}

/// Index of the largest logit in each row; ties go to the lowest index.
pub fn argmax_rows(logits: &[f32], classes: usize) -> Vec<usize> {
    logits
        .chunks(classes)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Eval-mode loss and top-1 error on an un-augmented split.
pub fn evaluate(model: &ResNet, split: &DatasetSplit, batch_size: usize) -> Result<EvalResult> {
    if split.is_empty() {
        return Err(Error::Validation("cannot evaluate on an empty split".into()));
    }
    let k = model.config().num_classes;
    let mut loss = 0.0;
    let mut correct = 0;
    for batch in batch_iter(split, batch_size.max(1), false, 0) {
        let mut tape = Tape::new();
        let fwd = model.forward(&mut tape, &batch.images, Mode::Eval)?;
        let targets = augment::one_hot::<f32>(&batch.labels, k)?;
        let log_probs = tape.log_softmax_clamped(fwd.logits)?;
        let ce = cross_entropy(&mut tape, &targets, log_probs, Reduction::Sum)?;
        loss += ce.per_sample.iter().sum::<f64>();
        let predicted = argmax_rows(tape.value(fwd.logits).data(), k);
        correct += predicted
            .iter()
            .zip(&batch.labels)
            .filter(|(p, &l)| **p == l as usize)
            .count();
    }
    let total = split.len();
    Ok(EvalResult {
        test_loss: loss / total as f64,
        error_pct: 100.0 * (1.0 - correct as f64 / total as f64),
        correct,
        total,
    })
}

/// Training state of one run, advanced an epoch at a time.
pub struct Session {
    pub config: TrainConfig,
    pub model: ResNet,
    pub opt: SgdState,
    pub norm: NormStats,
    pub log: RunLog,
    train: Arc<DatasetSplit>,
    test: Arc<DatasetSplit>,
    best_error: f64,
    best_epoch: usize,
}

impl Session {
    /// Starts a run; `train` and `test` are raw `[0, 1]` splits.
    pub fn new(config: &TrainConfig, train: &DatasetSplit, test: &DatasetSplit) -> Result<Self> {
        config.validate()?;
        let norm = data::compute_norm_stats(train)?;
        let train = Arc::new(data::normalize(train, &norm)?);
        let test = Arc::new(data::normalize(test, &norm)?);
        Self::with_normalized(config, norm, train, test)
    }

    /// Starts a run on splits already normalized by `norm`.
    pub fn with_normalized(
        config: &TrainConfig,
        norm: NormStats,
        train: Arc<DatasetSplit>,
        test: Arc<DatasetSplit>,
    ) -> Result<Self> {
        config.validate()?;
        let model = ResNet::new(&config.model, derive_seed(config.seed, &[STREAM_INIT]))?;
        let opt = SgdState::new(model.params());
        let num_params = model.num_params();
        Ok(Self {
            config: config.clone(),
            model,
            opt,
            norm,
            log: RunLog {
                config: config.clone(),
                norm,
                num_params,
                epochs: Vec::new(),
                summary: None,
            },
            train,
            test,
            best_error: f64::INFINITY,
            best_epoch: 0,
        })
    }

    pub fn epochs_done(&self) -> usize {
        self.log.epochs.len()
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        (self.best_epoch > 0).then_some((self.best_epoch, self.best_error))
    }

    pub fn train_state(&self) -> TrainState {
        TrainState {
            epoch: self.epochs_done(),
            best_error_pct: self.best_error,
            velocity: self.opt.velocity.clone(),
        }
    }

    /// Runs the next epoch. Returns the metrics and whether the test error
    /// improved on the best so far.
    pub fn run_epoch(&mut self) -> Result<(EpochMetrics, bool)> {
        let epoch = self.epochs_done() + 1;
        let start = Instant::now();
        let lr = self.config.lr_at(epoch)?;
        let loss = train_epoch(&mut self.model, &self.train, &self.config, epoch, &mut self.opt)?;
        let evaluate_now = epoch.is_multiple_of(self.config.eval_every) || epoch == self.config.epochs;
        let eval = if evaluate_now {
            Some(evaluate(&self.model, &self.test, self.config.batch_size)?)
        } else {
            None
        };
        let improved = eval.is_some_and(|e| e.error_pct < self.best_error);
        if let (true, Some(e)) = (improved, eval) {
            self.best_error = e.error_pct;
            self.best_epoch = epoch;
        }
        let metrics = EpochMetrics {
            epoch,
            train_loss: loss.train_loss,
            clean_train_loss: loss.clean_train_loss,
            test_loss: eval.map(|e| e.test_loss),
            test_error_pct: eval.map(|e| e.error_pct),
            lr,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        self.log.epochs.push(metrics.clone());
        Ok((metrics, improved))
    }

    pub fn summary(&self) -> Option<RunSummary> {
        let last = self.log.epochs.last()?;
        let last_eval = self.log.epochs.iter().rev().find(|m| m.test_loss.is_some())?;
        Some(RunSummary {
            epochs: last.epoch,
            final_train_loss: last.train_loss,
            final_test_loss: last_eval.test_loss?,
            final_test_error_pct: last_eval.test_error_pct?,
            best_test_error_pct: self.best_error,
            best_epoch: self.best_epoch,
            num_params: self.model.num_params(),
        })
    }

    /// Restores model, optimizer and completed epochs from a checkpoint.
    fn restore(&mut self, ckpt: checkpoint::Checkpoint, epochs: Vec<EpochMetrics>) -> Result<()> {
        let state = ckpt
            .state
            .ok_or_else(|| Error::Checkpoint("checkpoint has no training state".into()))?;
        if ckpt.norm != Some(self.norm) {
            return Err(Error::Checkpoint(
                "checkpoint was trained on differently normalized data".into(),
            ));
        }
        if epochs.len() != state.epoch {
            return Err(Error::Checkpoint(format!(
                "run log has {} epochs but the checkpoint is at epoch {}",
                epochs.len(),
                state.epoch
            )));
        }
        self.model = ckpt.model;
        self.opt = SgdState {
            velocity: state.velocity,
        };
        self.best_error = state.best_error_pct;
        self.best_epoch = epochs
            .iter()
            .filter(|m| m.test_error_pct == Some(state.best_error_pct))
            .map(|m| m.epoch)
            .next()
            .unwrap_or(0);
        self.log.epochs = epochs;
        Ok(())
    }
}

fn json_line<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string(value)
        .map(|mut s| {
            s.push('\n');
            s
        })
        .map_err(|e| Error::Serialization(e.to_string()))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

pub fn summary_csv(epochs: &[EpochMetrics]) -> String {
    let mut out = String::from("epoch,train_loss,test_loss,test_error_pct,lr\n");
    for m in epochs {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            m.epoch,
            m.train_loss,
            fmt_opt(m.test_loss),
            fmt_opt(m.test_error_pct),
            m.lr
        ));
    }
    out
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn append(path: &Path, contents: &str) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    f.write_all(contents.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Parses a run log written by [`fit`].
pub fn read_run_log(path: &Path) -> Result<RunLog> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut log: Option<RunLog> = None;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: LogLine =
            serde_json::from_str(&line).map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))?;
        match (parsed, log.as_mut()) {
            (
                LogLine::Config {
                    config,
                    norm,
                    num_params,
                },
                None,
            ) => {
                log = Some(RunLog {
                    config,
                    norm,
                    num_params,
                    epochs: Vec::new(),
                    summary: None,
                })
            }
            (LogLine::Epoch(m), Some(l)) => l.epochs.push(m),
            (LogLine::Summary(s), Some(l)) => l.summary = Some(s),
            _ => return Err(Error::format(path, format!("line {}: out of order", i + 1))),
        }
    }
    log.ok_or_else(|| Error::format(path, "missing config line"))
}

/// Where and how [`fit`] records its progress.
#[derive(Clone, Debug, Default)]
pub struct FitOptions {
    pub out_dir: Option<PathBuf>,
    /// Continue from `last.ckpt` in `out_dir` when present.
    pub resume: bool,
}

/// Full training run: cosine schedule per epoch, evaluation every
/// `eval_every` epochs, incremental run log, best and last checkpoints.
pub fn fit(
    config: &TrainConfig,
    train: &DatasetSplit,
    test: &DatasetSplit,
    options: &FitOptions,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<RunLog> {
    let mut session = Session::new(config, train, test)?;
    let out = options.out_dir.as_deref();
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let last = dir.join(LAST_CKPT);
        let log_path = dir.join(RUN_LOG);
        if options.resume && last.exists() {
            let previous = read_run_log(&log_path)?;
            if previous.config != *config {
                return Err(Error::Config(
                    "cannot resume: configuration differs from the logged run".into(),
                ));
            }
            let ckpt = checkpoint::load_matching(&last, &config.model)?;
            let done = ckpt.state.as_ref().map_or(0, |s| s.epoch);
            let epochs = previous.epochs.into_iter().take(done).collect();
            session.restore(ckpt, epochs)?;
        }
        write_file(&log_path, &session.log.to_jsonl()?)?;
        write_file(&dir.join(SUMMARY_CSV), &summary_csv(&session.log.epochs))?;
        if !dir.join(TIMING_CSV).exists() || session.epochs_done() == 0 {
            write_file(&dir.join(TIMING_CSV), "epoch,wall_seconds\n")?;
        }
    }

    while session.epochs_done() < config.epochs {
        let (metrics, improved) = session.run_epoch()?;
        if let Some(dir) = out {
            append(&dir.join(RUN_LOG), &json_line(&LogLine::Epoch(metrics.clone()))?)?;
            write_file(&dir.join(SUMMARY_CSV), &summary_csv(&session.log.epochs))?;
            append(
                &dir.join(TIMING_CSV),
                &format!("{},{:.3}\n", metrics.epoch, metrics.wall_seconds),
            )?;
            if improved {
                checkpoint::save(&dir.join(BEST_CKPT), &session.model, Some(&session.norm), None)?;
            }
            let state = session.train_state();
            checkpoint::save(&dir.join(LAST_CKPT), &session.model, Some(&session.norm), Some(&state))?;
        }
        on_epoch(&metrics);
    }

    let summary = session.summary();
    if let (Some(dir), Some(s)) = (out, &summary) {
        append(&dir.join(RUN_LOG), &json_line(&LogLine::Summary(s.clone()))?)?;
    }
    session.log.summary = summary;
    Ok(session.log)
}

/// Two runs that differ only in their configs, plus final-epoch deltas.
#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub with_mixup: RunLog,
    pub without_mixup: RunLog,
    pub deltas: ComparisonDeltas,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonDeltas {
    /// Final test loss without mixup divided by final test loss with it.
    pub test_loss_ratio: f64,
    /// Final train loss with mixup minus final train loss without it.
    pub train_loss_delta: f64,
    /// Final test error with mixup minus final test error without it.
    pub test_error_delta: f64,
    pub final_train_loss_mixup: f64,
    pub final_train_loss_no_mixup: f64,
    pub final_test_loss_mixup: f64,
    pub final_test_loss_no_mixup: f64,
    pub final_test_error_pct_mixup: f64,
    pub final_test_error_pct_no_mixup: f64,
}

pub fn deltas(with_mixup: &RunLog, without_mixup: &RunLog) -> Result<ComparisonDeltas> {
    let pick = |l: &RunLog| {
        l.summary
            .clone()
            .ok_or_else(|| Error::Usage("run has no evaluated epochs".into()))
    };
    let (a, b) = (pick(with_mixup)?, pick(without_mixup)?);
    Ok(ComparisonDeltas {
        test_loss_ratio: b.final_test_loss / a.final_test_loss,
        train_loss_delta: a.final_train_loss - b.final_train_loss,
        test_error_delta: a.final_test_error_pct - b.final_test_error_pct,
        final_train_loss_mixup: a.final_train_loss,
        final_train_loss_no_mixup: b.final_train_loss,
        final_test_loss_mixup: a.final_test_loss,
        final_test_loss_no_mixup: b.final_test_loss,
        final_test_error_pct_mixup: a.final_test_error_pct,
        final_test_error_pct_no_mixup: b.final_test_error_pct,
    })
}

/// Runs `first` and `second` on the same data and reports their deltas.
/// Outputs go to `mixup/` and `no_mixup/` under `out_dir`, with curve CSVs and
/// `comparison.json` at its top level.
pub fn compare_runs(
    first: &TrainConfig,
    second: &TrainConfig,
    train: &DatasetSplit,
    test: &DatasetSplit,
    out_dir: Option<&Path>,
) -> Result<Comparison> {
    let sub = |name: &str| FitOptions {
        out_dir: out_dir.map(|d| d.join(name)),
        resume: false,
    };
    let with_mixup = fit(first, train, test, &sub("mixup"), |_| {})?;
    let without_mixup = fit(second, train, test, &sub("no_mixup"), |_| {})?;
    let deltas = deltas(&with_mixup, &without_mixup)?;
    if let Some(dir) = out_dir {
        write_file(&dir.join("curves_mixup.csv"), &summary_csv(&with_mixup.epochs))?;
        write_file(&dir.join("curves_no_mixup.csv"), &summary_csv(&without_mixup.epochs))?;
        let json = serde_json::to_string_pretty(&deltas).map_err(|e| Error::Serialization(e.to_string()))?;
        write_file(&dir.join("comparison.json"), &(json + "\n"))?;
    }
    Ok(Comparison {
        with_mixup,
        without_mixup,
        deltas,
    })
}

/// The same configuration trained with and without mixup.
pub fn compare_mixup(
    config: &TrainConfig,
    train: &DatasetSplit,
    test: &DatasetSplit,
    out_dir: Option<&Path>,
) -> Result<Comparison> {
    let mut with = config.clone();
    with.mixup.enabled = true;
    let mut without = config.clone();
    without.mixup.enabled = false;
    compare_runs(&with, &without, train, test, out_dir)
}
