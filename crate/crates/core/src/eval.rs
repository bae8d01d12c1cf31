//! Protocol evaluation: observe `p` percent of a sequence, forecast the
//! following `q` percent, score frame-level predictions with mean
//! per-class accuracy pooled over the whole test split, and average the
//! eight `(p, q)` cells.
//!
//! Decoders emit a fixed number of step labels per sample; those are
//! upsampled back to the future window's true frame count by the same
//! nearest-position rule the training pipeline used for downsampling,
//! so a roundtrip through both directions is as faithful as the step
//! budget allows.

use crate::data::{
    resample_position, split_observation, DatasetManifest, FeatureSequence, Sample, Split,
};
use crate::error::{Error, Result};
use crate::model::{forward_full, ModelConfig, ModelParams, Variant};
use crate::rng::stream_rng;
use crate::train::{train, TrainConfig};
use std::io::Write;
use std::path::Path;

// ---------------------------------------------------------------------------
// Metric
// ---------------------------------------------------------------------------

/// Pooled prediction counts; rows are ground truth, columns predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionMatrix {
    n_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(n_classes: usize) -> Self {
        ConfusionMatrix {
            n_classes,
            counts: vec![0; n_classes * n_classes],
        }
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn record(&mut self, truth: usize, predicted: usize) {
        assert!(truth < self.n_classes && predicted < self.n_classes);
        self.counts[truth * self.n_classes + predicted] += 1;
    }

    pub fn count(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.n_classes + predicted]
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.n_classes, other.n_classes);
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    /// Per-class recall; `None` for classes that never occur as truth.
    pub fn per_class_accuracy(&self) -> Vec<Option<f64>> {
        (0..self.n_classes)
            .map(|c| {
                let row = &self.counts[c * self.n_classes..(c + 1) * self.n_classes];
                let total: u64 = row.iter().sum();
                (total > 0).then(|| self.count(c, c) as f64 / total as f64)
            })
            .collect()
    }

    /// Mean of per-class accuracy over the classes that occur; classes
    /// absent from the ground truth do not dilute the mean.
    pub fn mean_per_class_accuracy(&self) -> Result<f64> {
        let present: Vec<f64> = self.per_class_accuracy().into_iter().flatten().collect();
        if present.is_empty() {
            return Err(Error::invalid(
                "mean_per_class_accuracy",
                "no ground-truth class is present".to_string(),
            ));
        }
        Ok(present.iter().sum::<f64>() / present.len() as f64)
    }
}

/// Mean per-class accuracy of one prediction/truth pairing.
pub fn mean_per_class_accuracy(
    predicted: &[usize],
    truth: &[usize],
    n_classes: usize,
) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(Error::invalid(
            "mean_per_class_accuracy",
            format!("{} predictions vs {} truths", predicted.len(), truth.len()),
        ));
    }
    let mut cm = ConfusionMatrix::new(n_classes);
    for (&p, &t) in predicted.iter().zip(truth) {
        if p >= n_classes || t >= n_classes {
            return Err(Error::LabelOutOfRange {
                context: "mean_per_class_accuracy".to_string(),
                label: p.max(t),
                limit: n_classes,
            });
        }
        cm.record(t, p);
    }
    cm.mean_per_class_accuracy()
}

/// Expands per-step labels to `target_len` frames by nearest position —
/// the inverse-direction counterpart of the training-time downsampling.
pub fn upsample_labels(step_labels: &[usize], target_len: usize) -> Vec<usize> {
    assert!(!step_labels.is_empty(), "no step labels to upsample");
    (0..target_len)
        .map(|i| {
            let pos = resample_position(i, target_len, step_labels.len());
            step_labels[(pos + 0.5).floor() as usize]
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Forecasters
// ---------------------------------------------------------------------------

/// Anything that turns an observed window into per-step future labels.
/// Implementations must be freely shareable across evaluation workers.
pub trait Forecaster: Sync {
    /// Predicted class per decoder step (same length as the sample's
    /// future supervision).
    fn forecast(&self, sample: &Sample) -> Result<Vec<usize>>;
}

/// The trained model decoding greedily in inference mode.
pub struct ModelForecaster<'a> {
    pub params: &'a ModelParams,
    pub cfg: &'a ModelConfig,
}

impl Forecaster for ModelForecaster<'_> {
    fn forecast(&self, sample: &Sample) -> Result<Vec<usize>> {
        // Inference consumes no randomness; the stream is a formality.
        let mut rng = stream_rng(0, &["eval", "unused"]);
        let (out, _) = forward_full(sample, self.params, self.cfg, &mut rng, false)?;
        Ok(out.future_labels)
    }
}

// ---------------------------------------------------------------------------
// Protocol evaluation
// ---------------------------------------------------------------------------

/// One `(p, q)` cell's pooled result.
#[derive(Debug, Clone)]
pub struct EvalCell {
    pub p: f64,
    pub q: f64,
    pub accuracy: f64,
    pub confusion: ConfusionMatrix,
}

/// Scores for every schedule cell plus their unweighted mean.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub cells: Vec<EvalCell>,
    pub mean_accuracy: f64,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("p,q,mean_per_class_acc\n");
        for c in &self.cells {
            out.push_str(&format!("{},{},{:.6}\n", c.p, c.q, c.accuracy));
        }
        out
    }

    pub fn table(&self) -> String {
        let mut out = String::from("  p     q     accuracy\n");
        for c in &self.cells {
            out.push_str(&format!(" {:>3}  {:>3}      {:.4}\n", c.p, c.q, c.accuracy));
        }
        out.push_str(&format!(" mean           {:.4}\n", self.mean_accuracy));
        out
    }
}

/// Evaluates a forecaster over every `(sequence, schedule cell)` pair of
/// the given test sequences, spreading the work over `workers` threads.
/// Counts pool into one confusion matrix per cell, so the result is
/// independent of the worker count and of processing order.
pub fn evaluate_with<F: Forecaster>(
    cfg: &ModelConfig,
    forecaster: &F,
    sequences: &[FeatureSequence],
    schedule: &[(f64, f64)],
    workers: usize,
) -> Result<EvalReport> {
    if sequences.is_empty() {
        return Err(Error::invalid("evaluate", "no test sequences".to_string()));
    }
    if schedule.is_empty() {
        return Err(Error::invalid("evaluate", "empty (p, q) schedule".to_string()));
    }
    let workers = workers.max(1).min(sequences.len() * schedule.len());

    // Worker `w` takes pairs w, w + workers, ... and fills its own
    // per-cell matrices; merging afterwards is pure addition.
    let score_pair = |cell: usize, seq: &FeatureSequence, cm: &mut ConfusionMatrix| -> Result<()> {
        let (p, q) = schedule[cell];
        let sample = split_observation(seq, p, q, cfg)?;
        let steps = forecaster.forecast(&sample)?;
        if steps.len() != sample.fut_labels.len() {
            return Err(Error::invalid(
                "evaluate",
                format!(
                    "forecaster returned {} labels for {} decoder steps",
                    steps.len(),
                    sample.fut_labels.len()
                ),
            ));
        }
        let truth = &seq.labels[sample.fut_range.0..sample.fut_range.1];
        let frames = upsample_labels(&steps, truth.len());
        for (&t, &pr) in truth.iter().zip(&frames) {
            if pr >= cfg.n_classes {
                return Err(Error::LabelOutOfRange {
                    context: format!("forecast for sequence {}", seq.id),
                    label: pr,
                    limit: cfg.n_classes,
                });
            }
            cm.record(t as usize, pr);
        }
        Ok(())
    };

    let n_pairs = sequences.len() * schedule.len();
    let run_worker = |w: usize| -> Result<Vec<ConfusionMatrix>> {
        let mut local: Vec<ConfusionMatrix> = (0..schedule.len())
            .map(|_| ConfusionMatrix::new(cfg.n_classes))
            .collect();
        let mut pair = w;
        while pair < n_pairs {
            let cell = pair % schedule.len();
            let seq = &sequences[pair / schedule.len()];
            score_pair(cell, seq, &mut local[cell])?;
            pair += workers;
        }
        Ok(local)
    };

    let per_worker: Vec<Result<Vec<ConfusionMatrix>>> = if workers == 1 {
        vec![run_worker(0)]
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..workers)
                .map(|w| scope.spawn(move || run_worker(w)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("evaluation worker panicked"))
                .collect()
        })
    };

    let mut merged: Vec<ConfusionMatrix> = (0..schedule.len())
        .map(|_| ConfusionMatrix::new(cfg.n_classes))
        .collect();
    for locals in per_worker {
        for (m, l) in merged.iter_mut().zip(&locals?) {
            m.merge(l);
        }
    }

    let mut cells = Vec::with_capacity(schedule.len());
    for (i, &(p, q)) in schedule.iter().enumerate() {
        let accuracy = merged[i].mean_per_class_accuracy()?;
        cells.push(EvalCell {
            p,
            q,
            accuracy,
            confusion: merged[i].clone(),
        });
    }
    let mean_accuracy = cells.iter().map(|c| c.accuracy).sum::<f64>() / cells.len() as f64;
    Ok(EvalReport {
        cells,
        mean_accuracy,
    })
}

/// Evaluates trained parameters on the manifest's test split.
pub fn evaluate(
    params: &ModelParams,
    cfg: &ModelConfig,
    manifest: &DatasetManifest,
    schedule: &[(f64, f64)],
    workers: usize,
) -> Result<EvalReport> {
    let sequences = manifest.load_split(Split::Test)?;
    let forecaster = ModelForecaster { params, cfg };
    evaluate_with(cfg, &forecaster, &sequences, schedule, workers)
}

// ---------------------------------------------------------------------------
// Ablation and sweeps
// ---------------------------------------------------------------------------

/// Per-variant evaluation results, in `Variant::all()` order.
#[derive(Debug)]
pub struct AblationReport {
    pub rows: Vec<(Variant, EvalReport)>,
}

impl AblationReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,p,q,acc\n");
        for (v, report) in &self.rows {
            for c in &report.cells {
                out.push_str(&format!("{},{},{},{:.6}\n", v, c.p, c.q, c.accuracy));
            }
        }
        out
    }

    pub fn table(&self) -> String {
        let mut out = String::from(format!("{:<16}", "variant"));
        if let Some((_, first)) = self.rows.first() {
            for c in &first.cells {
                out.push_str(&format!("{:>4}/{:<4}", c.p, c.q));
            }
        }
        out.push_str("    mean\n");
        for (v, report) in &self.rows {
            out.push_str(&format!("{:<16}", v.name()));
            for c in &report.cells {
                out.push_str(&format!("{:>8.4}", c.accuracy));
            }
            out.push_str(&format!("{:>8.4}\n", report.mean_accuracy));
        }
        out
    }
}

/// Trains and evaluates all five architecture variants with identical
/// data, schedule and seed, writing each run under
/// `out_dir/<variant>/` plus `ablation.csv` and `ablation.txt`.
pub fn run_ablation(
    manifest: &DatasetManifest,
    base_cfg: &ModelConfig,
    tcfg: &TrainConfig,
    schedule: &[(f64, f64)],
    out_dir: &Path,
    workers: usize,
) -> Result<AblationReport> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let sequences = manifest.load_split(Split::Test)?;
    let mut rows = Vec::new();
    for v in Variant::all() {
        let cfg = base_cfg.with_variant(v);
        let run_dir = out_dir.join(v.name());
        let outcome = train(manifest, &cfg, tcfg, schedule, &run_dir, None)?;
        let best = ModelParams::load(&outcome.best_path, &cfg)?;
        let forecaster = ModelForecaster { params: &best, cfg: &cfg };
        let report = evaluate_with(&cfg, &forecaster, &sequences, schedule, workers)?;
        rows.push((v, report));
    }
    let report = AblationReport { rows };
    write_text(&out_dir.join("ablation.csv"), &report.to_csv())?;
    write_text(&out_dir.join("ablation.txt"), &report.table())?;
    Ok(report)
}

/// The hyperparameter axes exposed to sweeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    /// Percent of observed frames masked during training.
    MaskPercent,
    /// Observed-classifier loss weight.
    Beta,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::MaskPercent => "mask",
            SweepParam::Beta => "beta",
        }
    }
}

impl std::fmt::Display for SweepParam {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Trains one model per value of the swept parameter (same data and
/// seed throughout) and reports each run's mean accuracy. Runs live
/// under `out_dir/<param>_<value>/`; the summary lands in `sweep.csv`.
pub fn run_sweep(
    manifest: &DatasetManifest,
    base_cfg: &ModelConfig,
    tcfg: &TrainConfig,
    param: SweepParam,
    values: &[f64],
    schedule: &[(f64, f64)],
    out_dir: &Path,
    workers: usize,
) -> Result<Vec<(f64, f64)>> {
    if values.is_empty() {
        return Err(Error::invalid("sweep", "no values to sweep".to_string()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let sequences = manifest.load_split(Split::Test)?;
    let mut results = Vec::with_capacity(values.len());
    for &value in values {
        let mut cfg = base_cfg.clone();
        match param {
            SweepParam::MaskPercent => {
                cfg.masking = true;
                cfg.mask_percent = value;
            }
            SweepParam::Beta => {
                cfg.beta = value;
            }
        }
        cfg.validate()?;
        let run_dir = out_dir.join(format!("{param}_{value}"));
        let outcome = train(manifest, &cfg, tcfg, schedule, &run_dir, None)?;
        let best = ModelParams::load(&outcome.best_path, &cfg)?;
        let forecaster = ModelForecaster { params: &best, cfg: &cfg };
        let report = evaluate_with(&cfg, &forecaster, &sequences, schedule, workers)?;
        results.push((value, report.mean_accuracy));
    }
    let mut csv = String::from("param,value,mean_acc\n");
    for (value, acc) in &results {
        csv.push_str(&format!("{param},{value},{acc:.6}\n"));
    }
    write_text(&out_dir.join("sweep.csv"), &csv)?;
    Ok(results)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}
