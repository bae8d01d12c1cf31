//! The full forecaster: feature masking -> (bidirectional GRU encoder in
//! parallel with feature-wise self-attention) -> observed-frame
//! classifier -> recurrent label decoder -> combined loss.
//!
//! Data flow for one sample (observed window `X`, `T x d`):
//!
//! ```text
//! X --mask--> X' --dropout--> BiGRU ----------------> H (T x d_h), h_last
//!             X' --self-attention--> C (T x d) --P_c--> C' (T x d_h), c_max
//! observed scores_t = (h_t ++ c'_t) . W_obs               (T x N)
//! decoder: h0 = h_last ++ c_max; y_0 = SOS;
//!          h_t = GRU(embed(y_{t-1}), h_{t-1}); scores = h_t . W_fut
//! loss = sum_t CE(future_t) + beta * sum_t CE(observed_t)
//! ```
//!
//! The context projection `P_c` exists so that both classifier inputs
//! (`h_t ++ c'_t`) and the decoder start state (`h_last ++ c_max`) have
//! length exactly `2 * d_h` for any feature dimension.

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::layers::{
    bigru_encode, dropout_apply, embed, feature_attention_encode, gru_cell_step,
    temporal_attention_encode, uniform_init, AttnVars, EncoderOutput, FeatureAttnParams,
    GruParams, GruVars,
};
use crate::tensor::{argmax, Tape, Tensor, Var};
use rand_chacha::ChaCha20Rng;
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Hyperparameters and variant switches for one model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Feature dimension `d` of the input frames.
    pub feature_dim: usize,
    /// GRU hidden width `d_h` (split evenly across the two directions).
    pub hidden_dim: usize,
    /// Length every observed window is resampled to; equals the
    /// attention model width for the feature-wise variant.
    pub t_fixed: usize,
    /// Attention heads.
    pub heads: usize,
    /// Feed-forward width inside the attention block.
    pub ff_dim: usize,
    /// Number of action classes `N`.
    pub n_classes: usize,
    /// Label embedding width fed to the decoder.
    pub embed_dim: usize,
    /// Percent of observed frames zeroed during training, in [0, 100).
    pub mask_percent: f64,
    /// Weight of the observed-classifier loss term.
    pub beta: f64,
    /// Dropout rate on encoder input and decoder embeddings.
    pub dropout: f64,
    /// Decoder steps `n_f` representing the future window.
    pub future_steps: usize,
    /// Attend across feature rows (the main model).
    pub feature_attn: bool,
    /// Include the observed-frame auxiliary classifier in the loss.
    pub observed_classifier: bool,
    /// Zero random observed rows during training.
    pub masking: bool,
    /// Ablation: attend across time steps instead of feature rows.
    pub temporal_attn: bool,
}

impl ModelConfig {
    /// Full-scale configuration from the published experiments
    /// (48-class, 1024-dim features).
    pub fn paper(n_classes: usize, feature_dim: usize) -> Self {
        ModelConfig {
            feature_dim,
            hidden_dim: 512,
            t_fixed: 32,
            heads: 5,
            ff_dim: 2048,
            n_classes,
            embed_dim: 512,
            mask_percent: 10.0,
            beta: 0.5,
            dropout: 0.5,
            future_steps: 32,
            feature_attn: true,
            observed_classifier: true,
            masking: true,
            temporal_attn: false,
        }
    }

    /// Small configuration that trains in seconds on synthetic corpora.
    pub fn desk(n_classes: usize, feature_dim: usize) -> Self {
        ModelConfig {
            feature_dim,
            hidden_dim: 32,
            t_fixed: 24,
            heads: 2,
            ff_dim: 48,
            n_classes,
            embed_dim: 16,
            mask_percent: 10.0,
            beta: 0.5,
            dropout: 0.1,
            future_steps: 16,
            feature_attn: true,
            observed_classifier: true,
            masking: true,
            temporal_attn: false,
        }
    }

    /// Minimal configuration used by gradient checks (< 2k parameters).
    pub fn tiny(n_classes: usize) -> Self {
        ModelConfig {
            feature_dim: 6,
            hidden_dim: 4,
            t_fixed: 4,
            heads: 2,
            ff_dim: 8,
            n_classes,
            embed_dim: 5,
            mask_percent: 0.0,
            beta: 0.5,
            dropout: 0.0,
            future_steps: 3,
            feature_attn: true,
            observed_classifier: true,
            masking: false,
            temporal_attn: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: String| Err(Error::Invalid { op: "model_config", what });
        if self.feature_dim == 0 || self.n_classes == 0 || self.embed_dim == 0 {
            return bad("feature_dim, n_classes and embed_dim must be positive".into());
        }
        if self.hidden_dim == 0 || self.hidden_dim % 2 != 0 {
            return bad(format!(
                "hidden_dim {} must be positive and even (it splits across two GRU directions)",
                self.hidden_dim
            ));
        }
        if self.t_fixed == 0 {
            return bad("t_fixed must be at least 1".into());
        }
        if self.future_steps == 0 {
            return bad("future_steps must be at least 1".into());
        }
        if self.feature_attn && self.temporal_attn {
            return bad("feature_attn and temporal_attn are mutually exclusive".into());
        }
        if (self.feature_attn || self.temporal_attn) && (self.heads == 0 || self.ff_dim == 0) {
            return bad("attention requires heads >= 1 and ff_dim >= 1".into());
        }
        if !(0.0..100.0).contains(&self.mask_percent) {
            return bad(format!("mask_percent {} outside [0, 100)", self.mask_percent));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad(format!("beta {} must be finite and non-negative", self.beta));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    /// The same base hyperparameters with one ablation variant's
    /// switches.
    pub fn with_variant(&self, v: Variant) -> Self {
        let mut cfg = self.clone();
        let (feat, obs, mask, temp) = match v {
            Variant::GruOnly => (false, false, false, false),
            Variant::FeatureAttn => (true, false, false, false),
            Variant::FeatureAttnObserved => (true, true, false, false),
            Variant::Full => (true, true, true, false),
            Variant::TemporalAttn => (false, true, false, true),
        };
        cfg.feature_attn = feat;
        cfg.observed_classifier = obs;
        cfg.masking = mask;
        cfg.temporal_attn = temp;
        cfg
    }
}

/// The five architecture variants of the ablation study, ordered as the
/// reference table's columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Encoder-decoder only.
    GruOnly,
    /// + feature-wise self-attention.
    FeatureAttn,
    /// + the observed-frame classifier.
    FeatureAttnObserved,
    /// + feature masking (the complete model).
    Full,
    /// Attention over time steps instead of features (with the
    /// observed classifier, without masking).
    TemporalAttn,
}

impl Variant {
    pub fn all() -> [Variant; 5] {
        [
            Variant::GruOnly,
            Variant::FeatureAttn,
            Variant::FeatureAttnObserved,
            Variant::Full,
            Variant::TemporalAttn,
        ]
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::GruOnly => "gru_only",
            Variant::FeatureAttn => "feat_attn",
            Variant::FeatureAttnObserved => "feat_attn_obs",
            Variant::Full => "full",
            Variant::TemporalAttn => "temporal_attn",
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

/// Every trainable tensor of the model. The attention block and its
/// projection exist only when an attention variant is enabled; the
/// observed classifier head is always allocated (its loss term is what
/// the `observed_classifier` switch controls).
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub encoder_fwd: GruParams,
    pub encoder_bwd: GruParams,
    pub attention: Option<FeatureAttnParams>,
    /// `d x d_h`, maps attention output rows into GRU-hidden width.
    pub context_proj: Option<Tensor>,
    /// `2 d_h x N`.
    pub observed_head: Tensor,
    pub decoder: GruParams,
    /// `2 d_h x N`.
    pub future_head: Tensor,
    /// `(N + 1) x k_e`; row N is the start-of-sequence token.
    pub embedding: Tensor,
}

impl ModelParams {
    /// Seeded initialization. Each tensor draws from a stream derived
    /// from `(seed, name)`, so configs sharing a sub-module share its
    /// exact initial weights.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let half = cfg.hidden_dim / 2;
        let attention = if cfg.feature_attn {
            Some(FeatureAttnParams::init(cfg.t_fixed, cfg.heads, cfg.ff_dim, seed, "attn"))
        } else if cfg.temporal_attn {
            Some(FeatureAttnParams::init(cfg.feature_dim, cfg.heads, cfg.ff_dim, seed, "attn"))
        } else {
            None
        };
        let context_proj = attention
            .is_some()
            .then(|| uniform_init(cfg.feature_dim, cfg.hidden_dim, seed, "p_c"));
        Ok(ModelParams {
            encoder_fwd: GruParams::init(cfg.feature_dim, half, seed, "enc_fwd"),
            encoder_bwd: GruParams::init(cfg.feature_dim, half, seed, "enc_bwd"),
            attention,
            context_proj,
            observed_head: uniform_init(2 * cfg.hidden_dim, cfg.n_classes, seed, "w_obs"),
            decoder: GruParams::init(cfg.embed_dim, 2 * cfg.hidden_dim, seed, "dec"),
            future_head: uniform_init(2 * cfg.hidden_dim, cfg.n_classes, seed, "w_fut"),
            embedding: uniform_init(cfg.n_classes + 1, cfg.embed_dim, seed, "embed"),
        })
    }

    /// Visits `(name, tensor)` pairs in the fixed checkpoint order.
    pub fn visit(&self, f: &mut dyn FnMut(String, &Tensor)) {
        self.encoder_fwd.visit("enc_fwd", f);
        self.encoder_bwd.visit("enc_bwd", f);
        if let Some(a) = &self.attention {
            a.visit("attn", f);
        }
        if let Some(p) = &self.context_proj {
            f("p_c".into(), p);
        }
        f("w_obs".into(), &self.observed_head);
        self.decoder.visit("dec", f);
        f("w_fut".into(), &self.future_head);
        f("embed".into(), &self.embedding);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.encoder_fwd.visit_mut("enc_fwd", f);
        self.encoder_bwd.visit_mut("enc_bwd", f);
        if let Some(a) = &mut self.attention {
            a.visit_mut("attn", f);
        }
        if let Some(p) = &mut self.context_proj {
            f("p_c".into(), p);
        }
        f("w_obs".into(), &mut self.observed_head);
        self.decoder.visit_mut("dec", f);
        f("w_fut".into(), &mut self.future_head);
        f("embed".into(), &mut self.embedding);
    }

    pub fn n_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.numel());
        n
    }

    pub fn zero_grads(&mut self) {
        self.visit_mut(&mut |_, t| t.zero_grad());
    }

    /// All parameter values concatenated in visit order (for numeric
    /// gradient checking).
    pub fn flatten_values(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit(&mut |_, t| out.extend_from_slice(t.values()));
        out
    }

    /// All gradient values concatenated in visit order.
    pub fn flatten_grads(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit(&mut |_, t| {
            out.extend_from_slice(t.grad().expect("parameters are trainable"))
        });
        out
    }

    /// Overwrites parameter values from a flat buffer in visit order.
    pub fn set_flattened(&mut self, values: &[f64]) {
        let mut off = 0;
        self.visit_mut(&mut |_, t| {
            let n = t.numel();
            t.values_mut().copy_from_slice(&values[off..off + n]);
            off += n;
        });
        assert_eq!(off, values.len(), "flat buffer length mismatch");
    }

    /// Records every tensor on a tape.
    pub fn bind(&self, tape: &mut Tape) -> BoundModel {
        BoundModel {
            enc_fwd: self.encoder_fwd.bind(tape),
            enc_bwd: self.encoder_bwd.bind(tape),
            attn: self.attention.as_ref().map(|a| a.bind(tape)),
            p_c: self.context_proj.as_ref().map(|p| tape.leaf_tensor(p)),
            w_obs: tape.leaf_tensor(&self.observed_head),
            dec: self.decoder.bind(tape),
            w_fut: tape.leaf_tensor(&self.future_head),
            embed: tape.leaf_tensor(&self.embedding),
        }
    }

    /// Adds `scale` times the tape gradients into the parameters'
    /// gradient buffers.
    pub fn absorb(&mut self, tape: &Tape, bound: &BoundModel, scale: f64) {
        use crate::layers::absorb_grad;
        self.encoder_fwd.absorb(tape, &bound.enc_fwd, scale);
        self.encoder_bwd.absorb(tape, &bound.enc_bwd, scale);
        if let (Some(a), Some(av)) = (&mut self.attention, &bound.attn) {
            a.absorb(tape, av, scale);
        }
        if let (Some(p), Some(pv)) = (&mut self.context_proj, bound.p_c) {
            absorb_grad(p, tape, pv, scale);
        }
        absorb_grad(&mut self.observed_head, tape, bound.w_obs, scale);
        self.decoder.absorb(tape, &bound.dec, scale);
        absorb_grad(&mut self.future_head, tape, bound.w_fut, scale);
        absorb_grad(&mut self.embedding, tape, bound.embed, scale);
    }

    /// Writes the parameters alone (no optimizer state) as a checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut entries = Vec::new();
        self.visit(&mut |name, t| {
            entries.push((name, t.shape().to_vec(), t.values().to_vec()));
        });
        write_tensor_entries(path, &entries)
    }

    /// Loads parameters for `cfg` from a checkpoint. Entries beyond the
    /// model's parameters (e.g. optimizer state) are ignored; missing or
    /// wrongly-shaped tensors are errors naming the tensor.
    pub fn load(path: &Path, cfg: &ModelConfig) -> Result<Self> {
        let entries = read_tensor_entries(path)?;
        let mut by_name: BTreeMap<String, (Vec<usize>, Vec<f64>)> = entries
            .into_iter()
            .map(|(n, s, v)| (n, (s, v)))
            .collect();
        let mut params = ModelParams::init(cfg, 0)?;
        let mut failure: Option<Error> = None;
        params.visit_mut(&mut |name, t| {
            if failure.is_some() {
                return;
            }
            match by_name.remove(&name) {
                None => failure = Some(Error::MissingTensor { name }),
                Some((shape, values)) => {
                    if shape != t.shape() {
                        failure = Some(Error::TensorShape {
                            name,
                            expected: t.shape().to_vec(),
                            found: shape,
                        });
                    } else {
                        t.values_mut().copy_from_slice(&values);
                        t.zero_grad();
                    }
                }
            }
        });
        match failure {
            Some(e) => Err(e),
            None => Ok(params),
        }
    }
}

/// Model parameters bound onto a tape for one forward pass.
#[derive(Debug)]
pub struct BoundModel {
    enc_fwd: GruVars,
    enc_bwd: GruVars,
    attn: Option<AttnVars>,
    p_c: Option<Var>,
    w_obs: Var,
    dec: GruVars,
    w_fut: Var,
    embed: Var,
}

// ---------------------------------------------------------------------------
// Checkpoint container (FAFC)
// ---------------------------------------------------------------------------

const FAFC_MAGIC: &[u8; 4] = b"FAFC";
const FAFC_VERSION: u16 = 1;

/// Writes named tensors: magic `FAFC`, u16 LE version, u32 LE entry
/// count, then per entry u32 LE name length + name bytes, u32 LE rank,
/// rank u32 LE extents, and the f64 LE values.
pub(crate) fn write_tensor_entries(
    path: &Path,
    entries: &[(String, Vec<usize>, Vec<f64>)],
) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(FAFC_MAGIC);
    buf.extend_from_slice(&FAFC_VERSION.to_le_bytes());
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, shape, values) in entries {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, values.len(), "entry {name} shape/value mismatch");
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &e in shape {
            buf.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for v in values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub(crate) fn read_tensor_entries(path: &Path) -> Result<Vec<(String, Vec<usize>, Vec<f64>)>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut off = 0usize;
    let take = |off: &mut usize, n: usize| -> Result<&[u8]> {
        if *off + n > bytes.len() {
            return Err(Error::format(
                path,
                format!("truncated at byte {} (needed {n} more)", *off),
            ));
        }
        let s = &bytes[*off..*off + n];
        *off += n;
        Ok(s)
    };
    if take(&mut off, 4)? != FAFC_MAGIC {
        return Err(Error::format(path, "bad magic (not a FAFC checkpoint)"));
    }
    let version = u16::from_le_bytes(take(&mut off, 2)?.try_into().unwrap());
    if version != FAFC_VERSION {
        return Err(Error::format(
            path,
            format!("unsupported checkpoint version {version} (expected {FAFC_VERSION})"),
        ));
    }
    let count = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut off, name_len)?.to_vec())
            .map_err(|_| Error::format(path, "tensor name is not UTF-8"))?;
        let rank = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
        if rank > 8 {
            return Err(Error::format(path, format!("tensor {name}: implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = take(&mut off, numel * 8)?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        entries.push((name, shape, values));
    }
    if off != bytes.len() {
        return Err(Error::format(
            path,
            format!("{} trailing bytes after {count} tensors", bytes.len() - off),
        ));
    }
    Ok(entries)
}

// ---------------------------------------------------------------------------
// Forward pieces
// ---------------------------------------------------------------------------

/// Zeroes `floor(m * T / 100)` distinct rows of the observed window
/// during training; identity (and zero RNG draws) otherwise. Row choice
/// is a partial Fisher-Yates shuffle, so exactly `k` draws are consumed.
pub fn mask_features(
    x: &Tensor,
    mask_percent: f64,
    rng: &mut ChaCha20Rng,
    training: bool,
) -> Tensor {
    assert!(
        (0.0..100.0).contains(&mask_percent),
        "mask percent validated by ModelConfig"
    );
    let mut out = x.clone();
    if !training {
        return out;
    }
    let (t, d) = (x.shape()[0], x.shape()[1]);
    let k = (mask_percent * t as f64 / 100.0).floor() as usize;
    if k == 0 {
        return out;
    }
    let mut indices: Vec<usize> = (0..t).collect();
    for i in 0..k {
        let j = rand::Rng::random_range(rng, i..t);
        indices.swap(i, j);
    }
    for &row in &indices[..k] {
        out.values_mut()[row * d..(row + 1) * d].fill(0.0);
    }
    out
}

/// Everything the observed window produces before decoding.
#[derive(Debug)]
pub struct ObservedForward {
    /// `T x N` classifier scores over observed frames.
    pub scores: Var,
    /// BiGRU hidden states and final state.
    pub hidden: EncoderOutput,
    /// `T x d_h` projected attention context (zeros when disabled).
    pub context: Var,
    /// `[d_h]` max over time of the projected context.
    pub c_max: Var,
    /// Per-head attention matrices (empty when attention is disabled).
    pub attention: Vec<Var>,
}

/// Runs encoder, attention and the observed classifier on a (masked)
/// observed window `x` (`T x d`). Dropout applies to the GRU input only;
/// the attention branch sees the window unperturbed.
pub fn forward_observed(
    tape: &mut Tape,
    bound: &BoundModel,
    cfg: &ModelConfig,
    x: Var,
    rng: &mut ChaCha20Rng,
    training: bool,
) -> Result<ObservedForward> {
    let t_len = tape.shape(x)[0];
    let x_enc = dropout_apply(tape, x, cfg.dropout, rng, training)?;
    let hidden = bigru_encode(tape, x_enc, &bound.enc_fwd, &bound.enc_bwd)?;
    let (context, attention) = match (&bound.attn, bound.p_c) {
        (Some(attn_vars), Some(p_c)) => {
            let out = if cfg.temporal_attn {
                temporal_attention_encode(tape, x, attn_vars)?
            } else {
                feature_attention_encode(tape, x, attn_vars)?
            };
            (tape.matmul(out.encoded, p_c)?, out.attention)
        }
        _ => {
            let zeros = tape.leaf(
                vec![0.0; t_len * cfg.hidden_dim],
                vec![t_len, cfg.hidden_dim],
                false,
            )?;
            (zeros, Vec::new())
        }
    };
    let joined = tape.concat(hidden.hidden, context)?;
    let scores = tape.matmul(joined, bound.w_obs)?;
    let c_max = tape.max_over_time(context)?;
    Ok(ObservedForward {
        scores,
        hidden,
        context,
        c_max,
        attention,
    })
}

/// Decoder rollout result.
#[derive(Debug)]
pub struct DecodedFuture {
    /// `n_f x N` stacked step scores.
    pub scores: Var,
    /// The same scores as per-step vectors (for per-step losses).
    pub step_scores: Vec<Var>,
    /// Argmax label per step.
    pub labels: Vec<usize>,
}

/// Rolls the decoder GRU for exactly `n_f` steps from
/// `h0 = h_last ++ c_max`. Step inputs are embedded labels: the start
/// token first, then either the teacher's ground truth (training) or
/// the decoder's own argmax (inference).
pub fn decode_future(
    tape: &mut Tape,
    bound: &BoundModel,
    cfg: &ModelConfig,
    h_last: Var,
    c_max: Var,
    teacher_labels: Option<&[usize]>,
    rng: &mut ChaCha20Rng,
    training: bool,
) -> Result<DecodedFuture> {
    if let Some(t) = teacher_labels {
        if t.len() != cfg.future_steps {
            return Err(Error::invalid(
                "decode_future",
                format!(
                    "teacher_labels length {} != decoder steps {}",
                    t.len(),
                    cfg.future_steps
                ),
            ));
        }
    }
    let mut h = tape.concat(h_last, c_max)?;
    if tape.numel(h) != bound.dec.hidden_dim() {
        return Err(Error::ShapeMismatch {
            op: "decode_future",
            lhs: tape.shape(h).to_vec(),
            rhs: vec![bound.dec.hidden_dim()],
        });
    }
    let sos = cfg.n_classes;
    let mut prev_label = sos;
    let mut step_scores = Vec::with_capacity(cfg.future_steps);
    let mut labels = Vec::with_capacity(cfg.future_steps);
    for step in 0..cfg.future_steps {
        let emb = embed(tape, bound.embed, prev_label)?;
        let emb = dropout_apply(tape, emb, cfg.dropout, rng, training)?;
        h = gru_cell_step(tape, emb, h, &bound.dec)?;
        let scores = tape.matmul(h, bound.w_fut)?;
        let label = argmax(tape.values(scores));
        step_scores.push(scores);
        labels.push(label);
        prev_label = match teacher_labels {
            Some(t) => t[step],
            None => label,
        };
    }
    let scores = tape.stack_rows(&step_scores)?;
    Ok(DecodedFuture {
        scores,
        step_scores,
        labels,
    })
}

/// Combined loss of one sample: the future cross-entropy summed over
/// decoder steps, plus `beta` times the observed cross-entropy summed
/// over observed frames. `beta = 0` skips the observed term entirely
/// (no gradient ever reaches the classifier head).
pub fn total_loss(
    tape: &mut Tape,
    observed_scores: Var,
    future_step_scores: &[Var],
    observed_labels: &[usize],
    future_labels: &[usize],
    beta: f64,
) -> Result<Var> {
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(Error::invalid("total_loss", format!("beta {beta} must be >= 0")));
    }
    if future_step_scores.len() != future_labels.len() {
        return Err(Error::invalid(
            "total_loss",
            format!(
                "{} future score vectors vs {} labels",
                future_step_scores.len(),
                future_labels.len()
            ),
        ));
    }
    let mut future_sum: Option<Var> = None;
    for (&scores, &label) in future_step_scores.iter().zip(future_labels) {
        let ce = tape.cross_entropy(scores, label)?;
        future_sum = Some(match future_sum {
            Some(acc) => tape.add(acc, ce)?,
            None => ce,
        });
    }
    let mut loss = future_sum.ok_or(Error::EmptySequence { op: "total_loss" })?;
    if beta > 0.0 {
        let t_len = tape.shape(observed_scores)[0];
        if observed_labels.len() != t_len {
            return Err(Error::invalid(
                "total_loss",
                format!("{} observed labels vs {t_len} score rows", observed_labels.len()),
            ));
        }
        let mut observed_sum: Option<Var> = None;
        for (t, &label) in observed_labels.iter().enumerate() {
            let row = tape.row(observed_scores, t)?;
            let ce = tape.cross_entropy(row, label)?;
            observed_sum = Some(match observed_sum {
                Some(acc) => tape.add(acc, ce)?,
                None => ce,
            });
        }
        let scaled = tape.affine(observed_sum.expect("t_len >= 1"), beta, 0.0)?;
        loss = tape.add(loss, scaled)?;
    }
    Ok(loss)
}

// ---------------------------------------------------------------------------
// Full forward
// ---------------------------------------------------------------------------

/// Outputs of one full forward pass, detached from the tape.
#[derive(Debug, Clone)]
pub struct ForecastOutput {
    /// `T x N` observed-frame scores.
    pub observed_scores: Tensor,
    /// `n_f x N` future step scores.
    pub future_scores: Tensor,
    /// Argmax of each future score row.
    pub future_labels: Vec<usize>,
}

pub(crate) struct FullGraph {
    pub tape: Tape,
    pub bound: BoundModel,
    pub loss: Var,
    pub loss_value: f64,
    pub output: ForecastOutput,
}

pub(crate) fn forward_graph(
    sample: &Sample,
    params: &ModelParams,
    cfg: &ModelConfig,
    rng: &mut ChaCha20Rng,
    training: bool,
) -> Result<FullGraph> {
    if sample.x_obs.shape() != [cfg.t_fixed, cfg.feature_dim] {
        return Err(Error::ShapeMismatch {
            op: "forward_full",
            lhs: sample.x_obs.shape().to_vec(),
            rhs: vec![cfg.t_fixed, cfg.feature_dim],
        });
    }
    if sample.obs_labels.len() != cfg.t_fixed || sample.fut_labels.len() != cfg.future_steps {
        return Err(Error::invalid(
            "forward_full",
            format!(
                "sample has {} observed / {} future labels; config wants {} / {}",
                sample.obs_labels.len(),
                sample.fut_labels.len(),
                cfg.t_fixed,
                cfg.future_steps
            ),
        ));
    }
    let masked = if cfg.masking {
        mask_features(&sample.x_obs, cfg.mask_percent, rng, training)
    } else {
        sample.x_obs.clone()
    };
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let x = tape.leaf_tensor(&masked);
    let observed = forward_observed(&mut tape, &bound, cfg, x, rng, training)?;
    let teacher = if training {
        Some(sample.fut_labels.as_slice())
    } else {
        None
    };
    let decoded = decode_future(
        &mut tape,
        &bound,
        cfg,
        observed.hidden.last,
        observed.c_max,
        teacher,
        rng,
        training,
    )?;
    let beta = if cfg.observed_classifier { cfg.beta } else { 0.0 };
    let loss = total_loss(
        &mut tape,
        observed.scores,
        &decoded.step_scores,
        &sample.obs_labels,
        &sample.fut_labels,
        beta,
    )?;
    let loss_value = tape.values(loss)[0];
    let output = ForecastOutput {
        observed_scores: tape.to_tensor(observed.scores),
        future_scores: tape.to_tensor(decoded.scores),
        future_labels: decoded.labels,
    };
    Ok(FullGraph {
        tape,
        bound,
        loss,
        loss_value,
        output,
    })
}

/// One end-to-end pass: mask -> encode -> classify observed -> decode ->
/// loss. In training mode masking/dropout draw from `rng` and the
/// decoder is teacher-forced; in inference the pass is deterministic
/// and the decoder feeds back its own argmax labels.
pub fn forward_full(
    sample: &Sample,
    params: &ModelParams,
    cfg: &ModelConfig,
    rng: &mut ChaCha20Rng,
    training: bool,
) -> Result<(ForecastOutput, f64)> {
    let g = forward_graph(sample, params, cfg, rng, training)?;
    Ok((g.output, g.loss_value))
}

/// Training pass plus backward: accumulates `grad_scale` times the loss
/// gradient into the parameters' gradient buffers and returns the
/// outputs. Callers zero gradients at batch boundaries.
pub fn forward_backward(
    sample: &Sample,
    params: &mut ModelParams,
    cfg: &ModelConfig,
    rng: &mut ChaCha20Rng,
    grad_scale: f64,
) -> Result<(ForecastOutput, f64)> {
    let mut g = forward_graph(sample, params, cfg, rng, true)?;
    g.tape.backward(g.loss)?;
    params.absorb(&g.tape, &g.bound, grad_scale);
    Ok((g.output, g.loss_value))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use proptest::prelude::*;
    use rand::Rng;

    /// A random sample shaped for `cfg`, bypassing file plumbing.
    pub(crate) fn synthetic_sample(cfg: &ModelConfig, seed: u64) -> Sample {
        let mut rng = stream_rng(seed, &["sample"]);
        let numel = cfg.t_fixed * cfg.feature_dim;
        Sample {
            id: format!("synthetic_{seed}"),
            x_obs: Tensor::new(
                (0..numel).map(|_| rng.random_range(-1.5..1.5)).collect(),
                vec![cfg.t_fixed, cfg.feature_dim],
            )
            .unwrap(),
            obs_labels: (0..cfg.t_fixed)
                .map(|_| rng.random_range(0..cfg.n_classes))
                .collect(),
            fut_labels: (0..cfg.future_steps)
                .map(|_| rng.random_range(0..cfg.n_classes))
                .collect(),
            fut_range: (cfg.t_fixed, cfg.t_fixed + cfg.future_steps),
            p: 20.0,
            q: 30.0,
        }
    }

    #[test]
    fn config_validation_catches_contradictions() {
        let mut cfg = ModelConfig::tiny(3);
        assert!(cfg.validate().is_ok());
        cfg.temporal_attn = true; // both attentions on
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::tiny(3);
        cfg.hidden_dim = 5; // odd
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::tiny(3);
        cfg.mask_percent = 100.0;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::tiny(3);
        cfg.dropout = 1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::tiny(3);
        cfg.future_steps = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn masking_identity_cases() {
        let x = Tensor::new((0..40).map(|i| i as f64 + 1.0).collect(), vec![20, 2]).unwrap();
        let mut rng = stream_rng(1, &["m"]);
        let same = mask_features(&x, 0.0, &mut rng, true);
        assert_eq!(same.values(), x.values());
        let infer = mask_features(&x, 90.0, &mut rng, false);
        assert_eq!(infer.values(), x.values());
    }

    #[test]
    fn masking_zeroes_exactly_floor_m_t_over_100_rows() {
        let (t, d) = (20, 3);
        let x = Tensor::new(vec![1.0; t * d], vec![t, d]).unwrap();
        for trial in 0..50 {
            let mut rng = stream_rng(trial, &["mask"]);
            let masked = mask_features(&x, 10.0, &mut rng, true);
            let zero_rows = (0..t)
                .filter(|r| masked.values()[r * d..(r + 1) * d].iter().all(|v| *v == 0.0))
                .count();
            assert_eq!(zero_rows, 2); // floor(10 * 20 / 100)
            for r in 0..t {
                let row = &masked.values()[r * d..(r + 1) * d];
                assert!(
                    row.iter().all(|v| *v == 0.0) || row == &x.values()[r * d..(r + 1) * d]
                );
            }
        }
    }

    proptest! {
        #[test]
        fn masking_count_rule_holds_for_any_m_t(m in 0.0f64..99.9, t in 1usize..64) {
            let d = 2;
            let x = Tensor::new(vec![2.5; t * d], vec![t, d]).unwrap();
            let mut rng = stream_rng(7, &["prop"]);
            let masked = mask_features(&x, m, &mut rng, true);
            let zero_rows = (0..t)
                .filter(|r| masked.values()[r * d..(r + 1) * d].iter().all(|v| *v == 0.0))
                .count();
            prop_assert_eq!(zero_rows, (m * t as f64 / 100.0).floor() as usize);
        }

        #[test]
        fn greedy_labels_ignore_monotone_score_transforms(
            scores in proptest::collection::vec(-10.0f64..10.0, 2..12),
            scale in 0.1f64..4.0,
            shift in -5.0f64..5.0,
        ) {
            use crate::tensor::argmax;
            let direct = argmax(&scores);
            let affine: Vec<f64> = scores.iter().map(|s| s * scale + shift).collect();
            let exped: Vec<f64> = scores.iter().map(|s| (s * scale).exp()).collect();
            prop_assert_eq!(argmax(&affine), direct);
            prop_assert_eq!(argmax(&exped), direct);
        }
    }

    #[test]
    fn total_loss_closed_form_at_uniform_scores() {
        // N = 4, T = 2, n_f = 3, beta = 0.5, all scores zero:
        // loss = 3 ln4 + 0.5 * 2 ln4 = 4 ln4.
        let mut tape = Tape::new();
        let obs = tape.leaf(vec![0.0; 8], vec![2, 4], true).unwrap();
        let fut: Vec<Var> = (0..3)
            .map(|_| tape.leaf(vec![0.0; 4], vec![4], true).unwrap())
            .collect();
        let loss = total_loss(&mut tape, obs, &fut, &[1, 3], &[0, 2, 1], 0.5).unwrap();
        let expect = 4.0 * (4.0f64).ln();
        assert!((tape.values(loss)[0] - expect).abs() < 1e-9);
    }

    #[test]
    fn zeroed_parameters_give_the_uniform_loss_exactly() {
        // The whole network collapses to zero scores when every weight
        // is zero, so the closed form above holds end to end.
        let mut cfg = ModelConfig::tiny(4);
        cfg.t_fixed = 2;
        cfg.future_steps = 3;
        cfg.beta = 0.5;
        let mut params = ModelParams::init(&cfg, 1).unwrap();
        params.visit_mut(&mut |_, t| t.values_mut().iter_mut().for_each(|v| *v = 0.0));
        let sample = synthetic_sample(&cfg, 2);
        let mut rng = stream_rng(3, &["fwd"]);
        let (_, loss) = forward_full(&sample, &params, &cfg, &mut rng, true).unwrap();
        assert!((loss - 4.0 * (4.0f64).ln()).abs() < 1e-9, "loss {loss}");
    }

    #[test]
    fn beta_zero_leaves_observed_head_gradient_free() {
        let mut cfg = ModelConfig::tiny(3);
        cfg.beta = 0.0;
        let mut params = ModelParams::init(&cfg, 5).unwrap();
        let sample = synthetic_sample(&cfg, 6);
        let mut rng = stream_rng(7, &["fwd"]);
        params.zero_grads();
        forward_backward(&sample, &mut params, &cfg, &mut rng, 1.0).unwrap();
        assert!(params
            .observed_head
            .grad()
            .unwrap()
            .iter()
            .all(|g| *g == 0.0));
        // Other heads do receive gradient.
        assert!(params.future_head.grad().unwrap().iter().any(|g| *g != 0.0));
    }

    #[test]
    fn disabling_the_classifier_matches_beta_zero_loss() {
        let base = ModelConfig::tiny(3);
        let sample = synthetic_sample(&base, 8);
        let mut beta0 = base.clone();
        beta0.beta = 0.0;
        let mut disabled = base.clone();
        disabled.observed_classifier = false;
        let params = ModelParams::init(&base, 9).unwrap();
        let mut rng_a = stream_rng(1, &["a"]);
        let mut rng_b = stream_rng(1, &["a"]);
        let (_, loss_a) = forward_full(&sample, &params, &beta0, &mut rng_a, true).unwrap();
        let (_, loss_b) = forward_full(&sample, &params, &disabled, &mut rng_b, true).unwrap();
        assert_eq!(loss_a, loss_b);
    }

    #[test]
    fn inference_is_pure_and_repeatable() {
        let cfg = ModelConfig::tiny(3);
        let params = ModelParams::init(&cfg, 11).unwrap();
        let sample = synthetic_sample(&cfg, 12);
        let mut rng = stream_rng(13, &["unused"]);
        let (out_a, loss_a) = forward_full(&sample, &params, &cfg, &mut rng, false).unwrap();
        let (out_b, loss_b) = forward_full(&sample, &params, &cfg, &mut rng, false).unwrap();
        assert_eq!(loss_a, loss_b);
        assert_eq!(out_a.future_labels, out_b.future_labels);
        assert_eq!(out_a.future_scores.values(), out_b.future_scores.values());
        // Labels are the argmax of their score rows.
        for (t, &l) in out_a.future_labels.iter().enumerate() {
            let row = &out_a.future_scores.values()[t * cfg.n_classes..(t + 1) * cfg.n_classes];
            assert_eq!(argmax(row), l);
        }
    }

    #[test]
    fn single_class_output_shapes() {
        let cfg = ModelConfig::tiny(1);
        let params = ModelParams::init(&cfg, 1).unwrap();
        let sample = synthetic_sample(&cfg, 2);
        let mut rng = stream_rng(3, &["n1"]);
        let (out, _) = forward_full(&sample, &params, &cfg, &mut rng, false).unwrap();
        assert_eq!(out.observed_scores.shape(), &[cfg.t_fixed, 1]);
        assert!(out.future_labels.iter().all(|l| *l == 0));
    }

    #[test]
    fn all_variants_run_forward_and_backward() {
        let base = ModelConfig::tiny(3);
        let sample = synthetic_sample(&base, 20);
        for v in Variant::all() {
            let cfg = base.with_variant(v);
            cfg.validate().unwrap();
            let mut params = ModelParams::init(&cfg, 21).unwrap();
            let mut rng = stream_rng(22, &["var"]);
            params.zero_grads();
            let (out, loss) = forward_backward(&sample, &mut params, &cfg, &mut rng, 1.0)
                .unwrap_or_else(|e| panic!("variant {v}: {e}"));
            assert!(loss.is_finite(), "variant {v}");
            assert_eq!(out.future_labels.len(), cfg.future_steps);
            assert_eq!(
                params.attention.is_some(),
                matches!(v, Variant::FeatureAttn | Variant::FeatureAttnObserved | Variant::Full | Variant::TemporalAttn),
            );
        }
    }

    #[test]
    fn attention_disabled_means_zero_context() {
        let cfg = ModelConfig::tiny(3).with_variant(Variant::GruOnly);
        let params = ModelParams::init(&cfg, 30).unwrap();
        let sample = synthetic_sample(&cfg, 31);
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let x = tape.leaf_tensor(&sample.x_obs);
        let mut rng = stream_rng(32, &["gru"]);
        let obs = forward_observed(&mut tape, &bound, &cfg, x, &mut rng, false).unwrap();
        assert!(tape.values(obs.context).iter().all(|v| *v == 0.0));
        assert!(tape.values(obs.c_max).iter().all(|v| *v == 0.0));
        assert!(obs.attention.is_empty());
        assert_eq!(tape.shape(obs.scores), &[cfg.t_fixed, cfg.n_classes]);
    }

    #[test]
    fn decoder_teacher_mismatch_and_single_step() {
        let mut cfg = ModelConfig::tiny(3);
        cfg.future_steps = 1;
        let params = ModelParams::init(&cfg, 40).unwrap();
        let mut sample = synthetic_sample(&cfg, 41);
        sample.fut_labels = vec![2];
        let mut rng = stream_rng(42, &["dec"]);
        let (out, _) = forward_full(&sample, &params, &cfg, &mut rng, true).unwrap();
        assert_eq!(out.future_scores.shape(), &[1, 3]);

        sample.fut_labels = vec![0, 1]; // wrong length for n_f = 1
        let err = forward_full(&sample, &params, &cfg, &mut rng, true).unwrap_err();
        assert!(err.to_string().contains("future"), "{err}");
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let cfg = ModelConfig::tiny(3);
        let params = ModelParams::init(&cfg, 50).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.fafc");
        params.save(&path).unwrap();
        let loaded = ModelParams::load(&path, &cfg).unwrap();
        let mut pairs = Vec::new();
        params.visit(&mut |n, t| pairs.push((n, t.values().to_vec())));
        loaded.visit(&mut |n, t| {
            let (en, ev) = pairs.remove(0);
            assert_eq!(n, en);
            assert_eq!(t.values(), ev.as_slice(), "{n} changed in round trip");
        });
        assert!(pairs.is_empty());
    }

    #[test]
    fn checkpoint_mismatched_config_names_the_tensor() {
        let cfg = ModelConfig::tiny(3);
        let params = ModelParams::init(&cfg, 51).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.fafc");
        params.save(&path).unwrap();
        let mut other = cfg.clone();
        other.n_classes = 5;
        match ModelParams::load(&path, &other) {
            Err(Error::TensorShape { name, .. }) => assert_eq!(name, "w_obs"),
            other => panic!("expected shape error, got {other:?}"),
        }
        let mut no_attn = cfg.clone();
        no_attn.feature_attn = false;
        // Fewer tensors needed than stored: the extras are ignored.
        ModelParams::load(&path, &no_attn).unwrap();
        // More tensors needed than stored: missing tensor error.
        let gru_only = ModelParams::init(&no_attn, 52).unwrap();
        gru_only.save(&path).unwrap();
        match ModelParams::load(&path, &cfg) {
            Err(Error::MissingTensor { name }) => assert!(name.starts_with("attn"), "{name}"),
            other => panic!("expected missing tensor, got {other:?}"),
        }
    }

    #[test]
    fn checkpoint_rejects_corruption_distinctly() {
        let cfg = ModelConfig::tiny(3);
        let params = ModelParams::init(&cfg, 53).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.fafc");
        params.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        let bad_magic = dir.path().join("bm.fafc");
        let mut b = bytes.clone();
        b[0] = b'X';
        std::fs::write(&bad_magic, &b).unwrap();
        assert!(read_tensor_entries(&bad_magic)
            .unwrap_err()
            .to_string()
            .contains("magic"));

        let bad_version = dir.path().join("bv.fafc");
        let mut b = bytes.clone();
        b[4] = 9;
        std::fs::write(&bad_version, &b).unwrap();
        assert!(read_tensor_entries(&bad_version)
            .unwrap_err()
            .to_string()
            .contains("version"));

        let truncated = dir.path().join("tr.fafc");
        std::fs::write(&truncated, &bytes[..bytes.len() - 5]).unwrap();
        assert!(read_tensor_entries(&truncated)
            .unwrap_err()
            .to_string()
            .contains("truncated"));
    }

    #[test]
    fn shared_submodules_initialize_identically_across_variants() {
        let base = ModelConfig::tiny(3);
        let full = ModelParams::init(&base.with_variant(Variant::Full), 7).unwrap();
        let gru = ModelParams::init(&base.with_variant(Variant::GruOnly), 7).unwrap();
        assert_eq!(
            full.encoder_fwd.w_z.values(),
            gru.encoder_fwd.w_z.values()
        );
        assert_eq!(full.decoder.u_c.values(), gru.decoder.u_c.values());
        assert_eq!(full.embedding.values(), gru.embedding.values());
        assert!(gru.attention.is_none());
    }
}
