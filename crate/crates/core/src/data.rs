//! Feature-sequence data handling: the FSQ1 binary file format, dataset
//! manifests, a synthetic activity generator, temporal resampling, and
//! the observe-p%/predict-q% split that turns a sequence into a model
//! sample.
//!
//! A sequence is a `T_raw x d` matrix of per-frame features plus one
//! action label per frame. Sequences have arbitrary raw length; the
//! model consumes a fixed-length resampled window (see
//! [`resample_sequence`] and [`split_observation`]).

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::rng::{fnv1a, stream_rng};
use crate::tensor::Tensor;
use rand::Rng;
use rand_distr::StandardNormal;
use std::collections::BTreeSet;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

/// The eight evaluation cells: observe 20% or 30%, predict 10/20/30/50%.
pub const PROTOCOL_PAIRS: [(f64, f64); 8] = [
    (20.0, 10.0),
    (20.0, 20.0),
    (20.0, 30.0),
    (20.0, 50.0),
    (30.0, 10.0),
    (30.0, 20.0),
    (30.0, 30.0),
    (30.0, 50.0),
];

// ---------------------------------------------------------------------------
// FeatureSequence + FSQ1 file format
// ---------------------------------------------------------------------------

/// One recorded activity: per-frame feature vectors and action labels.
/// Features are kept as `f32` (their on-disk precision) so write/read
/// round trips are bit-exact; they widen to `f64` when entering the
/// model.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    /// Identifier, by convention the file stem.
    pub id: String,
    pub feature_dim: usize,
    pub n_classes: usize,
    /// Row-major `frames x feature_dim`.
    pub features: Vec<f32>,
    pub labels: Vec<u16>,
}

impl FeatureSequence {
    pub fn frames(&self) -> usize {
        self.labels.len()
    }

    pub fn feature_row(&self, t: usize) -> &[f32] {
        &self.features[t * self.feature_dim..(t + 1) * self.feature_dim]
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames() < 2 {
            return Err(Error::invalid(
                "feature_sequence",
                format!("sequence {} has {} frames, need at least 2", self.id, self.frames()),
            ));
        }
        if self.features.len() != self.frames() * self.feature_dim {
            return Err(Error::invalid(
                "feature_sequence",
                format!(
                    "sequence {}: {} feature values inconsistent with {} frames x {} dims",
                    self.id,
                    self.features.len(),
                    self.frames(),
                    self.feature_dim
                ),
            ));
        }
        if self.n_classes == 0 || self.n_classes > u16::MAX as usize + 1 {
            return Err(Error::invalid(
                "feature_sequence",
                format!("sequence {}: unsupported class count {}", self.id, self.n_classes),
            ));
        }
        for (t, &l) in self.labels.iter().enumerate() {
            if l as usize >= self.n_classes {
                return Err(Error::LabelOutOfRange {
                    context: format!("sequence {} frame {t}", self.id),
                    label: l as usize,
                    limit: self.n_classes,
                });
            }
        }
        Ok(())
    }
}

const FSQ_MAGIC: &[u8; 4] = b"FSQ1";

/// Writes a sequence in the FSQ1 format: magic `FSQ1`, then u32 LE
/// frame count, feature dim and class count, then row-major f32 LE
/// features, then u16 LE labels.
pub fn write_fseq(seq: &FeatureSequence, path: &Path) -> Result<()> {
    seq.validate()?;
    let mut buf =
        Vec::with_capacity(16 + seq.features.len() * 4 + seq.labels.len() * 2);
    buf.extend_from_slice(FSQ_MAGIC);
    buf.extend_from_slice(&(seq.frames() as u32).to_le_bytes());
    buf.extend_from_slice(&(seq.feature_dim as u32).to_le_bytes());
    buf.extend_from_slice(&(seq.n_classes as u32).to_le_bytes());
    for v in &seq.features {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for l in &seq.labels {
        buf.extend_from_slice(&l.to_le_bytes());
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads an FSQ1 file; the sequence id is the file stem.
pub fn read_fseq(path: &Path) -> Result<FeatureSequence> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 {
        return Err(Error::format(path, "truncated header"));
    }
    if &bytes[0..4] != FSQ_MAGIC {
        return Err(Error::format(path, "bad magic (not an FSQ1 file)"));
    }
    let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
    let frames = u32_at(4);
    let feature_dim = u32_at(8);
    let n_classes = u32_at(12);
    let expect = 16 + frames * feature_dim * 4 + frames * 2;
    if bytes.len() < expect {
        return Err(Error::format(
            path,
            format!("truncated body: {} bytes, expected {expect}", bytes.len()),
        ));
    }
    if bytes.len() > expect {
        return Err(Error::format(
            path,
            format!("{} trailing bytes after sequence data", bytes.len() - expect),
        ));
    }
    let mut features = Vec::with_capacity(frames * feature_dim);
    let mut off = 16;
    for _ in 0..frames * feature_dim {
        features.push(f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()));
        off += 4;
    }
    let mut labels = Vec::with_capacity(frames);
    for _ in 0..frames {
        labels.push(u16::from_le_bytes(bytes[off..off + 2].try_into().unwrap()));
        off += 2;
    }
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let seq = FeatureSequence {
        id,
        feature_dim,
        n_classes,
        features,
        labels,
    };
    seq.validate()?;
    Ok(seq)
}

// ---------------------------------------------------------------------------
// Dataset manifest
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = ();
    fn from_str(s: &str) -> std::result::Result<Self, ()> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(()),
        }
    }
}

/// Index of a dataset on disk: a root directory, the shared class count
/// and feature dim, and one `(split, relative path)` entry per sequence.
///
/// On disk this is `manifest.txt`: a header line
/// `fseq-manifest v1 N=<n> d=<d>` followed by `<split>\t<relative path>`
/// lines in order.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub n_classes: usize,
    pub feature_dim: usize,
    pub entries: Vec<(Split, String)>,
}

impl DatasetManifest {
    /// Serializes to `<root>/manifest.txt`.
    pub fn save(&self) -> Result<PathBuf> {
        let path = self.root.join("manifest.txt");
        let mut text = format!(
            "fseq-manifest v1 N={} d={}\n",
            self.n_classes, self.feature_dim
        );
        for (split, rel) in &self.entries {
            text.push_str(&format!("{split}\t{rel}\n"));
        }
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    /// Parses a manifest file and verifies every referenced file exists.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::format(path, "empty manifest"))?;
        let parts: Vec<&str> = header.split_whitespace().collect();
        let (n_classes, feature_dim) = match parts.as_slice() {
            ["fseq-manifest", "v1", n, d] => {
                let n = n
                    .strip_prefix("N=")
                    .and_then(|v| v.parse::<usize>().ok())
                    .ok_or_else(|| Error::format(path, format!("line 1: bad N field {n:?}")))?;
                let d = d
                    .strip_prefix("d=")
                    .and_then(|v| v.parse::<usize>().ok())
                    .ok_or_else(|| Error::format(path, format!("line 1: bad d field {d:?}")))?;
                (n, d)
            }
            _ => {
                return Err(Error::format(
                    path,
                    format!("line 1: expected `fseq-manifest v1 N=<n> d=<d>`, got {header:?}"),
                ))
            }
        };
        let mut entries = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let (split_str, rel) = line.split_once('\t').ok_or_else(|| {
                Error::format(path, format!("line {}: expected `<split>\\t<path>`", i + 1))
            })?;
            let split = Split::from_str(split_str).map_err(|_| {
                Error::format(
                    path,
                    format!("line {}: unknown split tag {split_str:?}", i + 1),
                )
            })?;
            let file = root.join(rel);
            if !file.is_file() {
                return Err(Error::format(
                    path,
                    format!("line {}: referenced file {rel} does not exist", i + 1),
                ));
            }
            entries.push((split, rel.to_string()));
        }
        Ok(DatasetManifest {
            root,
            n_classes,
            feature_dim,
            entries,
        })
    }

    /// Loads every sequence of one split, verifying each file agrees
    /// with the manifest's class count and feature dim.
    pub fn load_split(&self, split: Split) -> Result<Vec<FeatureSequence>> {
        let mut out = Vec::new();
        for (s, rel) in &self.entries {
            if *s != split {
                continue;
            }
            let path = self.root.join(rel);
            let seq = read_fseq(&path)?;
            if seq.feature_dim != self.feature_dim || seq.n_classes != self.n_classes {
                return Err(Error::format(
                    &path,
                    format!(
                        "sequence has d={} N={}, manifest says d={} N={}",
                        seq.feature_dim, seq.n_classes, self.feature_dim, self.n_classes
                    ),
                ));
            }
            out.push(seq);
        }
        Ok(out)
    }

    /// Training and validation sequences. When the manifest has no `val`
    /// entries, 10% of train (rounded up) is carved out deterministically
    /// by ordering sequence ids by (hash, id) and taking the front.
    pub fn train_val_split(&self) -> Result<(Vec<FeatureSequence>, Vec<FeatureSequence>)> {
        let train = self.load_split(Split::Train)?;
        if train.is_empty() {
            return Err(Error::invalid("train_val_split", "empty train split".to_string()));
        }
        let val = self.load_split(Split::Val)?;
        if !val.is_empty() {
            return Ok((train, val));
        }
        let carve = train.len().div_ceil(10);
        if carve >= train.len() {
            return Err(Error::invalid(
                "train_val_split",
                format!("{} train sequences are too few to carve validation from", train.len()),
            ));
        }
        let mut order: Vec<&FeatureSequence> = train.iter().collect();
        order.sort_by_key(|s| (fnv1a(s.id.as_bytes()), s.id.clone()));
        let val_ids: BTreeSet<String> =
            order[..carve].iter().map(|s| s.id.clone()).collect();
        let (carved, kept): (Vec<FeatureSequence>, Vec<FeatureSequence>) = train
            .into_iter()
            .partition(|s| val_ids.contains(&s.id));
        Ok((kept, carved))
    }
}

// ---------------------------------------------------------------------------
// Synthetic generator
// ---------------------------------------------------------------------------

/// Recipe for a synthetic activity corpus. Sequences follow per-activity
/// Markov chains over action classes; each action lasts a uniform number
/// of frames; frames carry the class prototype on the first
/// `informative_dims` feature dimensions plus Gaussian noise everywhere,
/// passed through exponential temporal smoothing.
#[derive(Debug, Clone)]
pub struct GeneratorConfig {
    pub n_classes: usize,
    /// `[activity][from][to]` transition probabilities; rows sum to 1.
    pub transitions: Vec<Vec<Vec<f64>>>,
    /// Frames per action, inclusive range.
    pub duration_range: (usize, usize),
    /// Actions per sequence, inclusive range.
    pub actions_range: (usize, usize),
    pub feature_dim: usize,
    /// Leading dimensions that carry the class prototype signal.
    pub informative_dims: usize,
    /// Standard deviation of per-frame Gaussian noise (all dims).
    pub noise: f64,
    /// Exponential smoothing weight on the previous frame; 0 disables.
    pub smoothing: f64,
    pub train_sequences: usize,
    pub val_sequences: usize,
    pub test_sequences: usize,
    pub seed: u64,
}

impl GeneratorConfig {
    /// Desk-scale default: 8 classes, 2 activities over disjoint class
    /// blocks, 120/20/40 sequences, 32 feature dims of which 8 are
    /// informative. Long action segments keep the future window's labels
    /// stable across the evaluation horizons, so a horizon-blind decoder
    /// has headroom above chance.
    pub fn standard(seed: u64) -> Self {
        GeneratorConfig {
            n_classes: 8,
            transitions: Self::disjoint_cycles(8, 2, 0.98),
            duration_range: (24, 28),
            actions_range: (4, 6),
            feature_dim: 32,
            informative_dims: 8,
            noise: 0.2,
            smoothing: 0.8,
            train_sequences: 120,
            val_sequences: 20,
            test_sequences: 40,
            seed,
        }
    }

    /// Corpus where the class signal hides in few of many dimensions —
    /// the regime feature-wise attention is meant to exploit. Activities
    /// share their filler classes and differ only in one brief marker
    /// segment at an unpredictable offset, so telling them apart needs a
    /// position-invariant read of the whole observed window.
    pub fn sparse(seed: u64) -> Self {
        GeneratorConfig {
            n_classes: 6,
            transitions: Self::marker_cycles(6, 2, 0.98),
            duration_range: (6, 10),
            actions_range: (10, 14),
            feature_dim: 64,
            informative_dims: 4,
            noise: 0.25,
            smoothing: 0.8,
            train_sequences: 60,
            val_sequences: 10,
            test_sequences: 40,
            seed,
        }
    }

    /// Simple well-separated chains: activity `a` moves from class `c`
    /// to `(c + a + 1) mod n` with probability `fidelity`, spreading the
    /// rest uniformly over the remaining classes (never itself).
    pub fn cyclic_transitions(
        n_classes: usize,
        n_activities: usize,
        fidelity: f64,
    ) -> Vec<Vec<Vec<f64>>> {
        assert!(n_classes >= 3, "cyclic chains need at least 3 classes");
        assert!(n_activities < n_classes);
        (0..n_activities)
            .map(|a| {
                (0..n_classes)
                    .map(|c| {
                        let target = (c + a + 1) % n_classes;
                        let spread = (1.0 - fidelity) / (n_classes - 2) as f64;
                        (0..n_classes)
                            .map(|to| {
                                if to == c {
                                    0.0
                                } else if to == target {
                                    fidelity
                                } else {
                                    spread
                                }
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect()
    }

    /// Chains that share one filler cycle and differ only in a marker:
    /// the first `n_classes - n_activities` classes cycle 0 -> 1 -> ...
    /// in every activity, then activity `a` visits its own marker class
    /// before wrapping to 0. Windows that miss the marker segment look
    /// identical across activities, so the marker is the only clue to
    /// which chain produced a sequence.
    pub fn marker_cycles(
        n_classes: usize,
        n_activities: usize,
        fidelity: f64,
    ) -> Vec<Vec<Vec<f64>>> {
        assert!(n_activities >= 1, "need at least one activity");
        assert!(
            n_classes >= n_activities + 2,
            "marker cycles need at least two shared filler classes"
        );
        let filler = n_classes - n_activities;
        (0..n_activities)
            .map(|a| {
                let marker = filler + a;
                (0..n_classes)
                    .map(|c| {
                        let next = if c + 1 < filler {
                            c + 1
                        } else if c == filler - 1 {
                            marker
                        } else {
                            0
                        };
                        let spread = (1.0 - fidelity) / (n_classes - 1) as f64;
                        (0..n_classes)
                            .map(|to| if to == next { fidelity } else { spread })
                            .collect()
                    })
                    .collect()
            })
            .collect()
    }

    /// Chains over disjoint class blocks: activity `a` owns an equal
    /// slice of the classes and cycles within it with probability
    /// `fidelity`, spreading the rest over its other block members.
    /// Any single frame therefore identifies the activity. Rows for
    /// classes outside the block funnel into the block start so every
    /// row is a distribution, but the walk never leaves the block.
    pub fn disjoint_cycles(
        n_classes: usize,
        n_activities: usize,
        fidelity: f64,
    ) -> Vec<Vec<Vec<f64>>> {
        assert!(n_activities >= 1, "need at least one activity");
        assert!(
            n_classes >= 3 * n_activities,
            "disjoint cycles need blocks of at least 3 classes"
        );
        (0..n_activities)
            .map(|a| {
                let lo = a * n_classes / n_activities;
                let hi = (a + 1) * n_classes / n_activities;
                let block = hi - lo;
                (0..n_classes)
                    .map(|c| {
                        let inside = (lo..hi).contains(&c);
                        let target = if inside { lo + (c - lo + 1) % block } else { lo };
                        let others = if inside { block - 2 } else { block - 1 };
                        let spread = (1.0 - fidelity) / others as f64;
                        (0..n_classes)
                            .map(|to| {
                                if to == c || !(lo..hi).contains(&to) {
                                    0.0
                                } else if to == target {
                                    fidelity
                                } else {
                                    spread
                                }
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect()
    }

    pub fn n_activities(&self) -> usize {
        self.transitions.len()
    }

    /// Expected actions per sequence (uniform over the range).
    pub fn expected_actions(&self) -> f64 {
        (self.actions_range.0 + self.actions_range.1) as f64 / 2.0
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::invalid("generator_config", "need at least 2 classes".to_string()));
        }
        if self.informative_dims > self.feature_dim {
            return Err(Error::invalid(
                "generator_config",
                format!(
                    "informative_dims {} exceeds feature_dim {}",
                    self.informative_dims, self.feature_dim
                ),
            ));
        }
        if self.transitions.is_empty() {
            return Err(Error::invalid("generator_config", "no activities".to_string()));
        }
        if self.duration_range.0 == 0 || self.duration_range.0 > self.duration_range.1 {
            return Err(Error::invalid(
                "generator_config",
                format!("bad duration range {:?}", self.duration_range),
            ));
        }
        if self.actions_range.0 == 0 || self.actions_range.0 > self.actions_range.1 {
            return Err(Error::invalid(
                "generator_config",
                format!("bad actions range {:?}", self.actions_range),
            ));
        }
        if !(0.0..1.0).contains(&self.smoothing) {
            return Err(Error::invalid(
                "generator_config",
                format!("smoothing {} outside [0, 1)", self.smoothing),
            ));
        }
        for (a, m) in self.transitions.iter().enumerate() {
            if m.len() != self.n_classes {
                return Err(Error::invalid(
                    "generator_config",
                    format!("activity {a}: transition matrix is not N x N"),
                ));
            }
            for (from, row) in m.iter().enumerate() {
                if row.len() != self.n_classes {
                    return Err(Error::invalid(
                        "generator_config",
                        format!("activity {a} row {from}: wrong length"),
                    ));
                }
                if row.iter().any(|p| *p < 0.0) {
                    return Err(Error::invalid(
                        "generator_config",
                        format!("activity {a} row {from}: negative probability"),
                    ));
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > 1e-9 {
                    return Err(Error::invalid(
                        "generator_config",
                        format!("activity {a} row {from}: probabilities sum to {sum}, not 1"),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Class prototype vectors (length `informative_dims`), shared by
    /// every sequence of a corpus with this seed.
    pub fn prototypes(&self) -> Vec<Vec<f64>> {
        let mut rng = stream_rng(self.seed, &["proto"]);
        (0..self.n_classes)
            .map(|_| {
                (0..self.informative_dims)
                    .map(|_| rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect()
    }
}

fn sample_categorical(row: &[f64], rng: &mut rand_chacha::ChaCha20Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    row.len() - 1 // floating-point dust lands on the last class
}

/// Classes that are the most likely successor of some class — the
/// chain's recurrent support. Initial classes are drawn from here so a
/// sequence starts inside the states its chain actually dwells in; for
/// chains whose argmax map is a permutation this is every class.
pub fn chain_support(matrix: &[Vec<f64>]) -> Vec<usize> {
    let mut support: Vec<usize> = matrix
        .iter()
        .map(|row| {
            let mut best = 0;
            for (i, p) in row.iter().enumerate() {
                if *p > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect();
    support.sort_unstable();
    support.dedup();
    support
}

/// The labeled action runs of one synthetic sequence.
fn roll_chain(
    cfg: &GeneratorConfig,
    activity: usize,
    rng: &mut rand_chacha::ChaCha20Rng,
) -> Vec<(usize, usize)> {
    let n_actions = rng.random_range(cfg.actions_range.0..=cfg.actions_range.1);
    let support = chain_support(&cfg.transitions[activity]);
    let mut class = support[rng.random_range(0..support.len())];
    let mut runs = Vec::with_capacity(n_actions);
    for _ in 0..n_actions {
        let dur = rng.random_range(cfg.duration_range.0..=cfg.duration_range.1);
        runs.push((class, dur));
        class = sample_categorical(&cfg.transitions[activity][class], rng);
    }
    runs
}

fn synthesize_sequence(
    cfg: &GeneratorConfig,
    prototypes: &[Vec<f64>],
    id: String,
    rng: &mut rand_chacha::ChaCha20Rng,
) -> FeatureSequence {
    let activity = rng.random_range(0..cfg.n_activities());
    let runs = roll_chain(cfg, activity, rng);
    let frames: usize = runs.iter().map(|(_, d)| d).sum();
    let d = cfg.feature_dim;
    let mut features = vec![0.0f32; frames * d];
    let mut labels = Vec::with_capacity(frames);
    let mut prev = vec![0.0f64; d];
    let mut t = 0;
    for &(class, dur) in &runs {
        for _ in 0..dur {
            let mut raw = vec![0.0f64; d];
            for (j, r) in raw.iter_mut().enumerate() {
                if j < cfg.informative_dims {
                    *r = prototypes[class][j];
                }
                *r += cfg.noise * rng.sample::<f64, _>(StandardNormal);
            }
            let alpha = cfg.smoothing;
            for j in 0..d {
                let v = if t == 0 || alpha == 0.0 {
                    raw[j]
                } else {
                    alpha * prev[j] + (1.0 - alpha) * raw[j]
                };
                prev[j] = v;
                features[t * d + j] = v as f32;
            }
            labels.push(class as u16);
            t += 1;
        }
    }
    FeatureSequence {
        id,
        feature_dim: d,
        n_classes: cfg.n_classes,
        features,
        labels,
    }
}

/// Generates a full corpus under `out_dir` (created if needed), writes
/// `manifest.txt`, and returns the manifest. Each sequence draws from
/// its own seed stream, so corpora are byte-identical across runs with
/// equal seeds.
pub fn generate_synthetic_dataset(cfg: &GeneratorConfig, out_dir: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let prototypes = cfg.prototypes();
    let mut entries = Vec::new();
    for (split, count) in [
        (Split::Train, cfg.train_sequences),
        (Split::Val, cfg.val_sequences),
        (Split::Test, cfg.test_sequences),
    ] {
        for i in 0..count {
            let id = format!("{split}_{i:04}");
            let mut rng = stream_rng(cfg.seed, &["seq", &split.to_string(), &i.to_string()]);
            let seq = synthesize_sequence(cfg, &prototypes, id.clone(), &mut rng);
            let rel = format!("{id}.fsq");
            write_fseq(&seq, &out_dir.join(&rel))?;
            entries.push((split, rel));
        }
    }
    let manifest = DatasetManifest {
        root: out_dir.to_path_buf(),
        n_classes: cfg.n_classes,
        feature_dim: cfg.feature_dim,
        entries,
    };
    manifest.save()?;
    Ok(manifest)
}

// ---------------------------------------------------------------------------
// Resampling and the observation split
// ---------------------------------------------------------------------------

/// Nearest source index for output slot `i` of `target_len` over
/// `source_len` samples, with endpoints mapping to endpoints.
pub(crate) fn resample_position(i: usize, target_len: usize, source_len: usize) -> f64 {
    if target_len <= 1 || source_len <= 1 {
        return 0.0;
    }
    i as f64 * (source_len - 1) as f64 / (target_len - 1) as f64
}

/// Resamples a sequence window to a fixed length: features by linear
/// interpolation on the normalized time axis (widened to `f64`), labels
/// by nearest frame. Endpoints map to endpoints; `target_len = source`
/// reproduces the input.
pub fn resample_sequence(
    features: &[f32],
    labels: &[u16],
    feature_dim: usize,
    target_len: usize,
) -> Result<(Vec<f64>, Vec<u16>)> {
    let source_len = labels.len();
    if source_len == 0 || target_len == 0 {
        return Err(Error::EmptySequence { op: "resample_sequence" });
    }
    if features.len() != source_len * feature_dim {
        return Err(Error::invalid(
            "resample_sequence",
            format!(
                "{} feature values inconsistent with {source_len} frames x {feature_dim}",
                features.len()
            ),
        ));
    }
    let mut out = vec![0.0f64; target_len * feature_dim];
    let mut out_labels = Vec::with_capacity(target_len);
    for i in 0..target_len {
        let pos = resample_position(i, target_len, source_len);
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(source_len - 1);
        let w = pos - lo as f64;
        for j in 0..feature_dim {
            let a = features[lo * feature_dim + j] as f64;
            let b = features[hi * feature_dim + j] as f64;
            out[i * feature_dim + j] = (1.0 - w) * a + w * b;
        }
        out_labels.push(labels[(pos + 0.5).floor() as usize]);
    }
    Ok((out, out_labels))
}

/// Labels-only nearest-frame resampling.
fn resample_labels(labels: &[u16], target_len: usize) -> Vec<u16> {
    (0..target_len)
        .map(|i| labels[(resample_position(i, target_len, labels.len()) + 0.5).floor() as usize])
        .collect()
}

/// A model-ready sample: the observed window, resampled to the model's
/// fixed length, plus future supervision resampled to the decoder's
/// step count and the raw frame range it came from.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    /// `t_fixed x d` observed features.
    pub x_obs: Tensor,
    /// Length `t_fixed`.
    pub obs_labels: Vec<usize>,
    /// Length `n_f` (decoder steps).
    pub fut_labels: Vec<usize>,
    /// Raw-frame future window `[start, end)`, for frame-level scoring.
    pub fut_range: (usize, usize),
    pub p: f64,
    pub q: f64,
}

/// Splits a sequence into observed/future windows: observed covers the
/// first `floor(p * T_raw / 100)` frames, the future the next
/// `floor((p+q) * T_raw / 100) - observed` frames. The observed window
/// is resampled to the model's fixed length, future labels to its
/// decoder step count.
pub fn split_observation(
    seq: &FeatureSequence,
    p: f64,
    q: f64,
    cfg: &ModelConfig,
) -> Result<Sample> {
    if !(p > 0.0 && q > 0.0 && p + q <= 100.0) {
        return Err(Error::invalid(
            "split_observation",
            format!("percentages p={p}, q={q} violate p > 0, q > 0, p + q <= 100"),
        ));
    }
    let t_raw = seq.frames();
    let obs_end = (p * t_raw as f64 / 100.0).floor() as usize;
    let fut_end = ((p + q) * t_raw as f64 / 100.0).floor() as usize;
    if obs_end == 0 {
        return Err(Error::invalid(
            "split_observation",
            format!("observed window empty: p={p}% of {t_raw} frames floors to 0 (sequence {})", seq.id),
        ));
    }
    if fut_end <= obs_end {
        return Err(Error::invalid(
            "split_observation",
            format!("future window empty: q={q}% of {t_raw} frames floors to 0 (sequence {})", seq.id),
        ));
    }
    let d = seq.feature_dim;
    let (obs_feat, obs_labels) = resample_sequence(
        &seq.features[..obs_end * d],
        &seq.labels[..obs_end],
        d,
        cfg.t_fixed,
    )?;
    let fut_labels = resample_labels(&seq.labels[obs_end..fut_end], cfg.future_steps);
    Ok(Sample {
        id: seq.id.clone(),
        x_obs: Tensor::new(obs_feat, vec![cfg.t_fixed, d])?,
        obs_labels: obs_labels.into_iter().map(usize::from).collect(),
        fut_labels: fut_labels.into_iter().map(usize::from).collect(),
        fut_range: (obs_end, fut_end),
        p,
        q,
    })
}
