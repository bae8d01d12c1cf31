//! Scratch calibration harness: times desk-scale training and prints
//! accuracy so the acceptance thresholds stay honest. Not part of the
//! test suite.

use forecast_core::data::{generate_synthetic_dataset, GeneratorConfig, Split, PROTOCOL_PAIRS};
use forecast_core::eval::{evaluate_with, ModelForecaster};
use forecast_core::model::{ModelConfig, ModelParams, Variant};
use forecast_core::train::{train, TrainConfig};
use std::time::Instant;

fn main() {
    let mode = std::env::args().nth(1).unwrap_or_else(|| "learn".into());
    match mode.as_str() {
        "learn" => learnability(),
        "trend" => ablation_trend(),
        other => panic!("unknown mode {other}"),
    }
}

fn learnability() {
    let dir = tempfile::tempdir().unwrap();
    let mut gen = GeneratorConfig::standard(5);
    if let Ok(fidelity) = std::env::var("CAL_FIDELITY") {
        let f: f64 = fidelity.parse().unwrap();
        gen.transitions = if std::env::var("CAL_DISJOINT").is_ok() {
            GeneratorConfig::disjoint_cycles(gen.n_classes, 2, f)
        } else {
            GeneratorConfig::cyclic_transitions(gen.n_classes, 2, f)
        };
    }
    if let Ok(noise) = std::env::var("CAL_NOISE") {
        gen.noise = noise.parse().unwrap();
    }
    if let Ok(dur) = std::env::var("CAL_DUR") {
        let (a, b) = dur.split_once(',').unwrap();
        gen.duration_range = (a.parse().unwrap(), b.parse().unwrap());
    }
    if let Ok(smooth) = std::env::var("CAL_SMOOTH") {
        gen.smoothing = smooth.parse().unwrap();
    }
    if let Ok(actions) = std::env::var("CAL_ACTIONS") {
        let (a, b) = actions.split_once(',').unwrap();
        gen.actions_range = (a.parse().unwrap(), b.parse().unwrap());
    }
    if let Ok(inform) = std::env::var("CAL_INFORM") {
        gen.informative_dims = inform.parse().unwrap();
    }
    let epochs: usize = std::env::var("CAL_EPOCHS").map(|v| v.parse().unwrap()).unwrap_or(20);
    let dh: usize = std::env::var("CAL_DH").map(|v| v.parse().unwrap()).unwrap_or(32);
    let lr: f64 = std::env::var("CAL_LR").map(|v| v.parse().unwrap()).unwrap_or(2e-3);
    let dropout: f64 = std::env::var("CAL_DROPOUT").map(|v| v.parse().unwrap()).unwrap_or(0.1);
    let mask: f64 = std::env::var("CAL_MASK").map(|v| v.parse().unwrap()).unwrap_or(10.0);
    let pairs: Vec<(f64, f64)> = std::env::var("CAL_PQ")
        .map(|v| {
            v.split(',')
                .map(|pair| {
                    let (p, q) = pair.split_once(':').unwrap();
                    (p.parse().unwrap(), q.parse().unwrap())
                })
                .collect()
        })
        .unwrap_or_else(|_| PROTOCOL_PAIRS.to_vec());
    let t0 = Instant::now();
    let manifest = generate_synthetic_dataset(&gen, dir.path()).unwrap();
    println!("generate: {:.1?}", t0.elapsed());
    let test_seqs = manifest.load_split(Split::Test).unwrap();

    // Ceiling estimate: the chain oracle from the test suite.
    let cfg = ModelConfig::desk(gen.n_classes, gen.feature_dim);
    let oracle = ChainOracle {
        transitions: gen.transitions.clone(),
        expected_duration: (gen.duration_range.0 + gen.duration_range.1) as f64 / 2.0,
    };
    let report = evaluate_with(&cfg, &oracle, &test_seqs, &pairs, 2).unwrap();
    println!("chain oracle: mean acc {:.4}", report.mean_accuracy);
    for c in &report.cells {
        print!("  p{}q{}={:.3}", c.p, c.q, c.accuracy);
    }
    println!();

    for seed in [0u64, 1, 2] {
        let mut mcfg = ModelConfig::desk(gen.n_classes, gen.feature_dim);
        mcfg.hidden_dim = dh;
        mcfg.dropout = dropout;
        mcfg.mask_percent = mask;
        mcfg.masking = mask > 0.0;
        let tcfg = TrainConfig {
            batch_size: 8,
            learning_rate: lr,
            max_epochs: epochs,
            patience: epochs,
            seed,
            ..TrainConfig::default()
        };
        let out = dir.path().join(format!("run{seed}"));
        let t0 = Instant::now();
        let outcome = train(&manifest, &mcfg, &tcfg, &pairs, &out, None).unwrap();
        let train_time = t0.elapsed();
        let final_log = outcome.log.last().unwrap();
        println!(
            "seed {seed} losses: train {:.4} val {:.4}",
            final_log.train_loss, final_log.val_loss
        );
        for (tag, path) in [("best", &outcome.best_path), ("last", &outcome.last_path)] {
            let params = ModelParams::load(path, &mcfg).unwrap();
            let fc = ModelForecaster { params: &params, cfg: &mcfg };
            let report = evaluate_with(&mcfg, &fc, &test_seqs, &pairs, 1).unwrap();
            println!(
                "seed {seed} {tag}: {} epochs in {:.1?}, mean acc {:.4} (target 0.375)",
                outcome.log.len(),
                train_time,
                report.mean_accuracy
            );
        }
    }
}

/// Mirror of the test-suite oracle: identify the activity from observed
/// transitions, then roll the argmax chain with expected durations.
struct ChainOracle {
    transitions: Vec<Vec<Vec<f64>>>,
    expected_duration: f64,
}

impl forecast_core::eval::Forecaster for ChainOracle {
    fn forecast(&self, sample: &forecast_core::data::Sample) -> forecast_core::Result<Vec<usize>> {
        let mut observed = sample.obs_labels.clone();
        observed.dedup();
        let mut best = (0usize, f64::NEG_INFINITY);
        for (a, chain) in self.transitions.iter().enumerate() {
            let support = forecast_core::data::chain_support(chain);
            let mut ll: f64 = observed
                .windows(2)
                .map(|w| chain[w[0]][w[1]].max(1e-12).ln())
                .sum();
            for c in &observed {
                ll += if support.contains(c) {
                    -(support.len() as f64).ln()
                } else {
                    f64::NEG_INFINITY
                };
            }
            if ll > best.1 {
                best = (a, ll);
            }
        }
        let activity = best.0;
        let mut current = *sample.obs_labels.last().unwrap();
        let mut remaining = self.expected_duration / 2.0;
        let window = (sample.fut_range.1 - sample.fut_range.0) as f64;
        let steps = sample.fut_labels.len();
        let mut out = Vec::with_capacity(steps);
        let mut elapsed = 0.0;
        for k in 0..steps {
            let frame = ((k as f64 + 0.5) * window / steps as f64).floor();
            while elapsed + remaining <= frame {
                elapsed += remaining;
                current = {
                    let row = &self.transitions[activity][current];
                    let mut b = 0;
                    for (i, v) in row.iter().enumerate() {
                        if *v > row[b] {
                            b = i;
                        }
                    }
                    b
                };
                remaining = self.expected_duration;
            }
            out.push(current);
        }
        Ok(out)
    }
}

fn ablation_trend() {
    let dir = tempfile::tempdir().unwrap();
    let mut gen = GeneratorConfig::sparse(9);
    if let Ok(fidelity) = std::env::var("CAL_FIDELITY") {
        let f: f64 = fidelity.parse().unwrap();
        gen.transitions = if std::env::var("CAL_DISJOINT").is_ok() {
            GeneratorConfig::disjoint_cycles(gen.n_classes, 2, f)
        } else {
            GeneratorConfig::cyclic_transitions(gen.n_classes, 2, f)
        };
    } else if std::env::var("CAL_DISJOINT").is_ok() {
        gen.transitions = GeneratorConfig::disjoint_cycles(gen.n_classes, 2, 0.98);
    }
    if std::env::var("CAL_MARKER").is_ok() {
        // Two activities share a filler cycle 0 -> 1 -> ... -> n-3 and differ
        // only in one marker class spliced in before the wrap-around.
        let n = gen.n_classes;
        let f = 0.98;
        let filler = n - 2;
        let mut mats = Vec::new();
        for a in 0..2usize {
            let marker = filler + a;
            let mut m = vec![vec![0.0; n]; n];
            for c in 0..n {
                let next = if c + 1 < filler {
                    c + 1
                } else if c == filler - 1 {
                    marker
                } else {
                    0
                };
                for (j, cell) in m[c].iter_mut().enumerate() {
                    *cell = if j == next { f } else { (1.0 - f) / (n - 1) as f64 };
                }
            }
            mats.push(m);
        }
        gen.transitions = mats;
    }
    if let Ok(dur) = std::env::var("CAL_DUR") {
        let (a, b) = dur.split_once(',').unwrap();
        gen.duration_range = (a.parse().unwrap(), b.parse().unwrap());
    }
    if let Ok(actions) = std::env::var("CAL_ACTIONS") {
        let (a, b) = actions.split_once(',').unwrap();
        gen.actions_range = (a.parse().unwrap(), b.parse().unwrap());
    }
    if let Ok(noise) = std::env::var("CAL_NOISE") {
        gen.noise = noise.parse().unwrap();
    }
    if let Ok(dim) = std::env::var("CAL_DIM") {
        gen.feature_dim = dim.parse().unwrap();
    }
    if let Ok(inform) = std::env::var("CAL_INFORM") {
        gen.informative_dims = inform.parse().unwrap();
    }
    let epochs: usize = std::env::var("CAL_EPOCHS").map(|v| v.parse().unwrap()).unwrap_or(12);
    let dh: usize = std::env::var("CAL_DH").map(|v| v.parse().unwrap()).unwrap_or(32);
    let lr: f64 = std::env::var("CAL_LR").map(|v| v.parse().unwrap()).unwrap_or(2e-3);
    let beta: f64 = std::env::var("CAL_BETA").map(|v| v.parse().unwrap()).unwrap_or(0.5);
    let dropout: f64 = std::env::var("CAL_DROPOUT").map(|v| v.parse().unwrap()).unwrap_or(0.1);
    let mask: f64 = std::env::var("CAL_MASK").map(|v| v.parse().unwrap()).unwrap_or(10.0);
    let manifest = generate_synthetic_dataset(&gen, dir.path()).unwrap();
    let test_seqs = manifest.load_split(Split::Test).unwrap();

    let mut wins = 0;
    for seed in [0u64, 1, 2, 3, 4] {
        let mut scores = Vec::new();
        for variant in [Variant::FeatureAttn, Variant::GruOnly] {
            let mut mcfg =
                ModelConfig::desk(gen.n_classes, gen.feature_dim).with_variant(variant);
            mcfg.hidden_dim = dh;
            mcfg.beta = beta;
            mcfg.dropout = dropout;
            if mask != 10.0 {
                mcfg.mask_percent = mask;
                mcfg.masking = mask > 0.0;
            }
            let mcfg = mcfg;
            let tcfg = TrainConfig {
                batch_size: 8,
                learning_rate: lr,
                max_epochs: epochs,
                patience: epochs,
                seed,
                ..TrainConfig::default()
            };
            let out = dir.path().join(format!("{}-{seed}", variant.name()));
            let t0 = Instant::now();
            let outcome = train(&manifest, &mcfg, &tcfg, &PROTOCOL_PAIRS, &out, None).unwrap();
            for (tag, path) in [("best", &outcome.best_path), ("last", &outcome.last_path)] {
                let params = ModelParams::load(path, &mcfg).unwrap();
                let fc = ModelForecaster { params: &params, cfg: &mcfg };
                let report = evaluate_with(&mcfg, &fc, &test_seqs, &PROTOCOL_PAIRS, 1).unwrap();
                println!(
                    "seed {seed} {} {tag}: acc {:.4} ({:.1?})",
                    variant.name(),
                    report.mean_accuracy,
                    t0.elapsed()
                );
                if tag == std::env::var("CAL_PICK").as_deref().unwrap_or("best") {
                    scores.push(report.mean_accuracy);
                }
            }
        }
        if scores[0] >= scores[1] {
            wins += 1;
        }
    }
    println!("feature attention wins {wins}/5 (need >= 3)");
}
