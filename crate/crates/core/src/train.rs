//! Adam training with teacher forcing, early stopping, and exact
//! checkpoint/resume.
//!
//! Every source of randomness in epoch `e` comes from a stream derived
//! only from `(seed, e)` — never from how the generator was left by
//! earlier epochs. Together with saving the optimizer state exactly,
//! this makes an interrupted-and-resumed run bitwise identical to an
//! uninterrupted one.

use crate::data::{split_observation, DatasetManifest, Sample};
use crate::error::{Error, Result};
use crate::model::{
    forward_backward, forward_full, read_tensor_entries, write_tensor_entries, ModelConfig,
    ModelParams,
};
use crate::rng::stream_rng;
use rand::seq::SliceRandom;
use rand::Rng;
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

/// Optimizer and loop hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub max_epochs: usize,
    /// Stop after this many epochs without a new best validation loss.
    pub patience: usize,
    /// Global gradient-norm ceiling applied before each step.
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            max_epochs: 100,
            patience: 10,
            grad_clip: 5.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: String| Err(Error::Invalid { op: "train_config", what });
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be finite and >= 0", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad(format!("betas ({}, {}) must lie in [0, 1)", self.beta1, self.beta2));
        }
        if !(self.epsilon > 0.0) {
            return bad(format!("epsilon {} must be positive", self.epsilon));
        }
        if self.max_epochs == 0 || self.patience == 0 {
            return bad("max_epochs and patience must be at least 1".into());
        }
        if !(self.grad_clip > 0.0) {
            return bad(format!("grad_clip {} must be positive", self.grad_clip));
        }
        Ok(())
    }
}

/// First and second moment estimates for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamMoments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: ModelParams,
    pub moments: BTreeMap<String, AdamMoments>,
    /// Completed optimizer steps (bias-correction exponent).
    pub step: u64,
    pub best_val: f64,
    pub epochs_since_best: usize,
    /// 1-based index of the next epoch to run.
    pub next_epoch: usize,
}

impl TrainState {
    pub fn new(params: ModelParams) -> Self {
        TrainState {
            params,
            moments: BTreeMap::new(),
            step: 0,
            best_val: f64::INFINITY,
            epochs_since_best: 0,
            next_epoch: 1,
        }
    }

    /// Writes parameters, optimizer moments (`adam.m.*` / `adam.v.*`)
    /// and scalar loop counters (`meta.*`) into one checkpoint file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut entries = Vec::new();
        self.params.visit(&mut |name, t| {
            entries.push((name, t.shape().to_vec(), t.values().to_vec()));
        });
        for (name, mv) in &self.moments {
            entries.push((format!("adam.m.{name}"), vec![mv.m.len()], mv.m.clone()));
            entries.push((format!("adam.v.{name}"), vec![mv.v.len()], mv.v.clone()));
        }
        let scalar = |v: f64| (vec![1], vec![v]);
        for (name, value) in [
            ("meta.step", self.step as f64),
            ("meta.best_val", self.best_val),
            ("meta.epochs_since_best", self.epochs_since_best as f64),
            ("meta.next_epoch", self.next_epoch as f64),
        ] {
            let (shape, values) = scalar(value);
            entries.push((name.to_string(), shape, values));
        }
        write_tensor_entries(path, &entries)
    }

    pub fn load(path: &Path, cfg: &ModelConfig) -> Result<Self> {
        let params = ModelParams::load(path, cfg)?;
        let mut moments = BTreeMap::new();
        let mut meta: BTreeMap<String, f64> = BTreeMap::new();
        for (name, _shape, values) in read_tensor_entries(path)? {
            if let Some(pname) = name.strip_prefix("adam.m.") {
                moments
                    .entry(pname.to_string())
                    .or_insert_with(|| AdamMoments { m: Vec::new(), v: Vec::new() })
                    .m = values;
            } else if let Some(pname) = name.strip_prefix("adam.v.") {
                moments
                    .entry(pname.to_string())
                    .or_insert_with(|| AdamMoments { m: Vec::new(), v: Vec::new() })
                    .v = values;
            } else if name.starts_with("meta.") {
                if values.len() != 1 {
                    return Err(Error::format(path, format!("{name} is not a scalar")));
                }
                meta.insert(name, values[0]);
            }
        }
        let scalar = |key: &str| -> Result<f64> {
            meta.get(key)
                .copied()
                .ok_or_else(|| Error::MissingTensor { name: key.to_string() })
        };
        Ok(TrainState {
            params,
            moments,
            step: scalar("meta.step")? as u64,
            best_val: scalar("meta.best_val")?,
            epochs_since_best: scalar("meta.epochs_since_best")? as usize,
            next_epoch: scalar("meta.next_epoch")? as usize,
        })
    }
}

/// Euclidean norm of all accumulated gradients together.
pub fn global_grad_norm(params: &ModelParams) -> f64 {
    let mut sq = 0.0;
    params.visit(&mut |_, t| {
        for g in t.grad().expect("parameters are trainable") {
            sq += g * g;
        }
    });
    sq.sqrt()
}

/// Rescales every gradient so the global norm does not exceed
/// `max_norm`; returns the pre-clip norm. A non-finite norm is left
/// untouched so the optimizer step can report which tensor produced it.
pub fn clip_gradients(params: &mut ModelParams, max_norm: f64) -> f64 {
    let norm = global_grad_norm(params);
    if norm.is_finite() && norm > max_norm {
        let scale = max_norm / norm;
        params.visit_mut(&mut |_, t| {
            for g in t.grad_mut().expect("parameters are trainable") {
                *g *= scale;
            }
        });
    }
    norm
}

/// One bias-corrected Adam update over every parameter tensor. `step`
/// is the 1-based count including this update. Errors (naming the
/// tensor) if any gradient entry is non-finite; tensors with all-zero
/// gradients do not move.
pub fn adam_step(
    params: &mut ModelParams,
    moments: &mut BTreeMap<String, AdamMoments>,
    step: u64,
    cfg: &TrainConfig,
) -> Result<()> {
    let bias1 = 1.0 - cfg.beta1.powi(step as i32);
    let bias2 = 1.0 - cfg.beta2.powi(step as i32);
    let mut failure: Option<Error> = None;
    params.visit_mut(&mut |name, t| {
        if failure.is_some() {
            return;
        }
        let n = t.numel();
        let mv = moments.entry(name.clone()).or_insert_with(|| AdamMoments {
            m: vec![0.0; n],
            v: vec![0.0; n],
        });
        // First read gradients (immutable), then update values.
        let grads = t.grad().expect("parameters are trainable").to_vec();
        if let Some(_bad) = grads.iter().find(|g| !g.is_finite()) {
            failure = Some(Error::NonFiniteGrad { name });
            return;
        }
        let values = t.values_mut();
        for i in 0..n {
            let g = grads[i];
            mv.m[i] = cfg.beta1 * mv.m[i] + (1.0 - cfg.beta1) * g;
            mv.v[i] = cfg.beta2 * mv.v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = mv.m[i] / bias1;
            let v_hat = mv.v[i] / bias2;
            values[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

/// Mean inference-mode loss over prepared samples. No masking, no
/// dropout, greedy decoding; the generator argument of the forward pass
/// is never consulted.
pub fn validation_loss(params: &ModelParams, cfg: &ModelConfig, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid("validation_loss", "no validation samples".to_string()));
    }
    let mut rng = stream_rng(0, &["validation", "unused"]);
    let mut total = 0.0;
    for s in samples {
        let (_, loss) = forward_full(s, params, cfg, &mut rng, false)?;
        total += loss;
    }
    Ok(total / samples.len() as f64)
}

/// One epoch's log line.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub learning_rate: f64,
}

impl std::fmt::Display for EpochLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "epoch={} train_loss={:.6} val_loss={:.6} lr={:.6}",
            self.epoch, self.train_loss, self.val_loss, self.learning_rate
        )
    }
}

/// What `train` leaves behind.
#[derive(Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub log: Vec<EpochLog>,
    /// Lowest-validation-loss parameters (`best.fafc`).
    pub best_path: PathBuf,
    /// Full optimizer state after the final epoch (`last.fafc`).
    pub last_path: PathBuf,
    pub stopped_early: bool,
}

/// Trains on the manifest's train split (with a held-out validation
/// part) over the given `(p, q)` percentage schedule.
///
/// Each epoch shuffles the training sequences and draws one schedule
/// pair per sequence, all from the epoch's own stream. Batches
/// accumulate mean gradients, clip to the global-norm ceiling, then
/// take one Adam step. After each epoch the mean greedy-decoding loss
/// on the validation samples decides early stopping: `patience` epochs
/// without strict improvement end the run.
///
/// Writes `best.fafc` (parameters only, at every improvement),
/// `last.fafc` (full resumable state, every epoch) and appends to
/// `train.log` in `out_dir`, echoing each line to stdout.
pub fn train(
    manifest: &DatasetManifest,
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    schedule: &[(f64, f64)],
    out_dir: &Path,
    resume: Option<TrainState>,
) -> Result<TrainOutcome> {
    mcfg.validate()?;
    tcfg.validate()?;
    if schedule.is_empty() {
        return Err(Error::invalid("train", "empty (p, q) schedule".to_string()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let (train_seqs, val_seqs) = manifest.train_val_split()?;

    // Validation samples never change across epochs: every held-out
    // sequence at every schedule pair.
    let mut val_samples = Vec::with_capacity(val_seqs.len() * schedule.len());
    for seq in &val_seqs {
        for &(p, q) in schedule {
            val_samples.push(split_observation(seq, p, q, mcfg)?);
        }
    }

    let mut state = match resume {
        Some(s) => s,
        None => TrainState::new(ModelParams::init(mcfg, tcfg.seed)?),
    };
    let best_path = out_dir.join("best.fafc");
    let last_path = out_dir.join("last.fafc");
    let log_path = out_dir.join("train.log");
    let mut log_file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;

    let mut log = Vec::new();
    let mut stopped_early = false;
    while state.next_epoch <= tcfg.max_epochs {
        let epoch = state.next_epoch;
        let mut rng = stream_rng(tcfg.seed, &["epoch", &epoch.to_string()]);
        let mut order: Vec<usize> = (0..train_seqs.len()).collect();
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for batch in order.chunks(tcfg.batch_size) {
            state.params.zero_grads();
            let scale = 1.0 / batch.len() as f64;
            for &idx in batch {
                let (p, q) = schedule[rng.random_range(0..schedule.len())];
                let sample = split_observation(&train_seqs[idx], p, q, mcfg)?;
                let (_, loss) =
                    forward_backward(&sample, &mut state.params, mcfg, &mut rng, scale)?;
                loss_sum += loss;
                seen += 1;
            }
            clip_gradients(&mut state.params, tcfg.grad_clip);
            state.step += 1;
            adam_step(&mut state.params, &mut state.moments, state.step, tcfg)?;
        }
        let train_loss = loss_sum / seen.max(1) as f64;
        let val_loss = validation_loss(&state.params, mcfg, &val_samples)?;

        if val_loss < state.best_val {
            state.best_val = val_loss;
            state.epochs_since_best = 0;
            state.params.save(&best_path)?;
        } else {
            state.epochs_since_best += 1;
        }

        let line = EpochLog {
            epoch,
            train_loss,
            val_loss,
            learning_rate: tcfg.learning_rate,
        };
        println!("{line}");
        writeln!(log_file, "{line}").map_err(|e| Error::io(&log_path, e))?;
        log.push(line);

        state.next_epoch += 1;
        state.save(&last_path)?;
        if state.epochs_since_best >= tcfg.patience {
            stopped_early = true;
            break;
        }
    }
    // A run that never improved on resume start still needs best.fafc
    // to exist for downstream evaluation.
    if !best_path.exists() {
        state.params.save(&best_path)?;
    }
    Ok(TrainOutcome {
        state,
        log,
        best_path,
        last_path,
        stopped_early,
    })
}
