//! Neural building blocks: GRU cell, bidirectional GRU encoder,
//! multi-head self-attention encoder layer, inverted dropout, and label
//! embedding lookup.
//!
//! Parameters live in plain structs of [`Tensor`]s. To run a layer you
//! `bind` its parameters onto a [`Tape`] (getting `*Vars` handles), call
//! the layer functions, and after `backward` you `absorb` the tape
//! gradients back into the tensors' gradient buffers. Initialization is
//! derived from a base seed plus the parameter's name, so two models
//! that share a sub-module initialize it identically regardless of which
//! other sub-modules they contain.

use crate::error::{Error, Result};
use crate::rng::stream_rng;
use crate::tensor::{Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha20Rng;

/// Epsilon inside layer-norm's variance square root.
pub const LN_EPS: f64 = 1e-5;

/// Uniform(-a, a) matrix with a = sqrt(1/fan_in), fan_in = rows (all our
/// matrices multiply row vectors from the left). Seeded by name so the
/// same parameter initializes identically in every model that has it.
pub(crate) fn uniform_init(rows: usize, cols: usize, seed: u64, name: &str) -> Tensor {
    let mut rng = stream_rng(seed, &["init", name]);
    let a = (1.0 / rows as f64).sqrt();
    let values = (0..rows * cols).map(|_| rng.random_range(-a..a)).collect();
    Tensor::new(values, vec![rows, cols])
        .expect("row*col values always fill the shape")
        .with_grad()
}

fn zeros_vec(len: usize) -> Tensor {
    Tensor::zeros(&[len]).with_grad()
}

fn ones_vec(len: usize) -> Tensor {
    Tensor::new(vec![1.0; len], vec![len])
        .expect("len values fill [len]")
        .with_grad()
}

/// Adds `scale * tape_grad` into the tensor's gradient buffer.
pub(crate) fn absorb_grad(t: &mut Tensor, tape: &Tape, v: Var, scale: f64) {
    let src = tape.grad(v);
    if src.is_empty() {
        return; // gradient never flowed here
    }
    let dst = t
        .grad_mut()
        .expect("absorb_grad targets trainable tensors only");
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s * scale;
    }
}

// ---------------------------------------------------------------------------
// GRU
// ---------------------------------------------------------------------------

/// Gated recurrent unit parameters: update gate `z`, reset gate `r`, and
/// candidate state `c`, each with an input-to-hidden matrix `w_*`
/// (k_in x k_h), a hidden-to-hidden matrix `u_*` (k_h x k_h) and a bias.
#[derive(Debug, Clone)]
pub struct GruParams {
    pub w_z: Tensor,
    pub u_z: Tensor,
    pub b_z: Tensor,
    pub w_r: Tensor,
    pub u_r: Tensor,
    pub b_r: Tensor,
    pub w_c: Tensor,
    pub u_c: Tensor,
    pub b_c: Tensor,
}

impl GruParams {
    /// Fresh cell with uniform weight init and zero biases. `prefix`
    /// scopes the parameter names (e.g. `enc_fwd`).
    pub fn init(input_dim: usize, hidden_dim: usize, seed: u64, prefix: &str) -> Self {
        let m = |gate: &str, rows, cols| uniform_init(rows, cols, seed, &format!("{prefix}.{gate}"));
        GruParams {
            w_z: m("w_z", input_dim, hidden_dim),
            u_z: m("u_z", hidden_dim, hidden_dim),
            b_z: zeros_vec(hidden_dim),
            w_r: m("w_r", input_dim, hidden_dim),
            u_r: m("u_r", hidden_dim, hidden_dim),
            b_r: zeros_vec(hidden_dim),
            w_c: m("w_c", input_dim, hidden_dim),
            u_c: m("u_c", hidden_dim, hidden_dim),
            b_c: zeros_vec(hidden_dim),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w_z.shape()[0]
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_z.shape()[1]
    }

    /// Records all nine tensors on the tape.
    pub fn bind(&self, tape: &mut Tape) -> GruVars {
        GruVars {
            w_z: tape.leaf_tensor(&self.w_z),
            u_z: tape.leaf_tensor(&self.u_z),
            b_z: tape.leaf_tensor(&self.b_z),
            w_r: tape.leaf_tensor(&self.w_r),
            u_r: tape.leaf_tensor(&self.u_r),
            b_r: tape.leaf_tensor(&self.b_r),
            w_c: tape.leaf_tensor(&self.w_c),
            u_c: tape.leaf_tensor(&self.u_c),
            b_c: tape.leaf_tensor(&self.b_c),
            input_dim: self.input_dim(),
            hidden_dim: self.hidden_dim(),
        }
    }

    /// Pulls tape gradients back into the tensors (scaled).
    pub fn absorb(&mut self, tape: &Tape, vars: &GruVars, scale: f64) {
        absorb_grad(&mut self.w_z, tape, vars.w_z, scale);
        absorb_grad(&mut self.u_z, tape, vars.u_z, scale);
        absorb_grad(&mut self.b_z, tape, vars.b_z, scale);
        absorb_grad(&mut self.w_r, tape, vars.w_r, scale);
        absorb_grad(&mut self.u_r, tape, vars.u_r, scale);
        absorb_grad(&mut self.b_r, tape, vars.b_r, scale);
        absorb_grad(&mut self.w_c, tape, vars.w_c, scale);
        absorb_grad(&mut self.u_c, tape, vars.u_c, scale);
        absorb_grad(&mut self.b_c, tape, vars.b_c, scale);
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(format!("{prefix}.w_z"), &self.w_z);
        f(format!("{prefix}.u_z"), &self.u_z);
        f(format!("{prefix}.b_z"), &self.b_z);
        f(format!("{prefix}.w_r"), &self.w_r);
        f(format!("{prefix}.u_r"), &self.u_r);
        f(format!("{prefix}.b_r"), &self.b_r);
        f(format!("{prefix}.w_c"), &self.w_c);
        f(format!("{prefix}.u_c"), &self.u_c);
        f(format!("{prefix}.b_c"), &self.b_c);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.w_z"), &mut self.w_z);
        f(format!("{prefix}.u_z"), &mut self.u_z);
        f(format!("{prefix}.b_z"), &mut self.b_z);
        f(format!("{prefix}.w_r"), &mut self.w_r);
        f(format!("{prefix}.u_r"), &mut self.u_r);
        f(format!("{prefix}.b_r"), &mut self.b_r);
        f(format!("{prefix}.w_c"), &mut self.w_c);
        f(format!("{prefix}.u_c"), &mut self.u_c);
        f(format!("{prefix}.b_c"), &mut self.b_c);
    }
}

/// A GRU cell bound onto a tape.
#[derive(Debug, Clone)]
pub struct GruVars {
    w_z: Var,
    u_z: Var,
    b_z: Var,
    w_r: Var,
    u_r: Var,
    b_r: Var,
    w_c: Var,
    u_c: Var,
    b_c: Var,
    input_dim: usize,
    hidden_dim: usize,
}

impl GruVars {
    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }
}

/// One GRU step:
/// `z = sigmoid(x W_z + h U_z + b_z)`, `r = sigmoid(x W_r + h U_r + b_r)`,
/// `c = tanh(x W_c + (r * h) U_c + b_c)`, `h' = (1 - z) * c + z * h`.
/// The output is a convex mix of `h_prev` and a tanh candidate, so with
/// `h_0 = 0` every state stays inside (-1, 1).
pub fn gru_cell_step(tape: &mut Tape, x: Var, h_prev: Var, p: &GruVars) -> Result<Var> {
    if tape.shape(x) != [p.input_dim] {
        return Err(Error::ShapeMismatch {
            op: "gru_cell_step",
            lhs: tape.shape(x).to_vec(),
            rhs: vec![p.input_dim],
        });
    }
    if tape.shape(h_prev) != [p.hidden_dim] {
        return Err(Error::ShapeMismatch {
            op: "gru_cell_step",
            lhs: tape.shape(h_prev).to_vec(),
            rhs: vec![p.hidden_dim],
        });
    }
    let gate = |tape: &mut Tape, w, u, b, h_in| -> Result<Var> {
        let xw = tape.matmul(x, w)?;
        let hu = tape.matmul(h_in, u)?;
        let s = tape.add(xw, hu)?;
        tape.add(s, b)
    };
    let z_pre = gate(tape, p.w_z, p.u_z, p.b_z, h_prev)?;
    let z = tape.sigmoid(z_pre)?;
    let r_pre = gate(tape, p.w_r, p.u_r, p.b_r, h_prev)?;
    let r = tape.sigmoid(r_pre)?;
    let rh = tape.mul(r, h_prev)?;
    let c_pre = gate(tape, p.w_c, p.u_c, p.b_c, rh)?;
    let c = tape.tanh(c_pre)?;
    let zc = tape.affine(z, -1.0, 1.0)?; // 1 - z
    let a = tape.mul(zc, c)?;
    let b = tape.mul(z, h_prev)?;
    tape.add(a, b)
}

/// Hidden states of a bidirectional GRU pass.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// `T x (k_f + k_b)`: row `t` is the forward state after step `t`
    /// joined with the backward state after step `t` (reading the
    /// sequence right to left).
    pub hidden: Var,
    /// Forward state after the last step joined with the backward state
    /// after *its* last step (which looks at frame 0).
    pub last: Var,
}

/// Runs a forward and a backward GRU over the rows of `x` (`T x d`),
/// both starting from zero states.
pub fn bigru_encode(tape: &mut Tape, x: Var, fwd: &GruVars, bwd: &GruVars) -> Result<EncoderOutput> {
    let shape = tape.shape(x).to_vec();
    let t_len = match shape.as_slice() {
        &[t, _] => t,
        other => {
            return Err(Error::invalid(
                "bigru_encode",
                format!("expected rank 2 input, got shape {:?}", other),
            ))
        }
    };
    if t_len == 0 {
        return Err(Error::EmptySequence { op: "bigru_encode" });
    }
    let mut h = tape.leaf(vec![0.0; fwd.hidden_dim], vec![fwd.hidden_dim], false)?;
    let mut fwd_states = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let xt = tape.row(x, t)?;
        h = gru_cell_step(tape, xt, h, fwd)?;
        fwd_states.push(h);
    }
    let mut hb = tape.leaf(vec![0.0; bwd.hidden_dim], vec![bwd.hidden_dim], false)?;
    let mut bwd_states = vec![hb; t_len];
    for t in (0..t_len).rev() {
        let xt = tape.row(x, t)?;
        hb = gru_cell_step(tape, xt, hb, bwd)?;
        bwd_states[t] = hb;
    }
    let mut rows = Vec::with_capacity(t_len);
    for t in 0..t_len {
        rows.push(tape.concat(fwd_states[t], bwd_states[t])?);
    }
    let hidden = tape.stack_rows(&rows)?;
    let last = tape.concat(fwd_states[t_len - 1], bwd_states[0])?;
    Ok(EncoderOutput { hidden, last })
}

// ---------------------------------------------------------------------------
// Self-attention encoder layer
// ---------------------------------------------------------------------------

/// One transformer encoder layer where every head keeps the full key
/// width: `d_k = d_model`, so the output projection takes the
/// `(heads * d_k)`-wide concatenation back to `d_model`.
#[derive(Debug, Clone)]
pub struct FeatureAttnParams {
    /// Per-head query/key/value projections, each `d_model x d_k`.
    pub w_q: Vec<Tensor>,
    pub w_k: Vec<Tensor>,
    pub w_v: Vec<Tensor>,
    /// `(heads * d_k) x d_model`.
    pub w_o: Tensor,
    /// Feed-forward expansion `d_model x d_ff` and contraction back.
    pub w_ff1: Tensor,
    pub w_ff2: Tensor,
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
}

impl FeatureAttnParams {
    pub fn init(d_model: usize, heads: usize, ff_dim: usize, seed: u64, prefix: &str) -> Self {
        let d_k = d_model;
        let head_mat = |i: usize, which: &str| {
            uniform_init(d_model, d_k, seed, &format!("{prefix}.h{i}.{which}"))
        };
        FeatureAttnParams {
            w_q: (0..heads).map(|i| head_mat(i, "w_q")).collect(),
            w_k: (0..heads).map(|i| head_mat(i, "w_k")).collect(),
            w_v: (0..heads).map(|i| head_mat(i, "w_v")).collect(),
            w_o: uniform_init(heads * d_k, d_model, seed, &format!("{prefix}.w_o")),
            w_ff1: uniform_init(d_model, ff_dim, seed, &format!("{prefix}.w_ff1")),
            w_ff2: uniform_init(ff_dim, d_model, seed, &format!("{prefix}.w_ff2")),
            ln1_gain: ones_vec(d_model),
            ln1_bias: zeros_vec(d_model),
            ln2_gain: ones_vec(d_model),
            ln2_bias: zeros_vec(d_model),
        }
    }

    pub fn heads(&self) -> usize {
        self.w_q.len()
    }

    pub fn d_model(&self) -> usize {
        self.w_q[0].shape()[0]
    }

    pub fn d_k(&self) -> usize {
        self.w_q[0].shape()[1]
    }

    pub fn bind(&self, tape: &mut Tape) -> AttnVars {
        AttnVars {
            w_q: self.w_q.iter().map(|t| tape.leaf_tensor(t)).collect(),
            w_k: self.w_k.iter().map(|t| tape.leaf_tensor(t)).collect(),
            w_v: self.w_v.iter().map(|t| tape.leaf_tensor(t)).collect(),
            w_o: tape.leaf_tensor(&self.w_o),
            w_ff1: tape.leaf_tensor(&self.w_ff1),
            w_ff2: tape.leaf_tensor(&self.w_ff2),
            ln1_gain: tape.leaf_tensor(&self.ln1_gain),
            ln1_bias: tape.leaf_tensor(&self.ln1_bias),
            ln2_gain: tape.leaf_tensor(&self.ln2_gain),
            ln2_bias: tape.leaf_tensor(&self.ln2_bias),
            d_model: self.d_model(),
            d_k: self.d_k(),
        }
    }

    pub fn absorb(&mut self, tape: &Tape, vars: &AttnVars, scale: f64) {
        for (t, v) in self.w_q.iter_mut().zip(&vars.w_q) {
            absorb_grad(t, tape, *v, scale);
        }
        for (t, v) in self.w_k.iter_mut().zip(&vars.w_k) {
            absorb_grad(t, tape, *v, scale);
        }
        for (t, v) in self.w_v.iter_mut().zip(&vars.w_v) {
            absorb_grad(t, tape, *v, scale);
        }
        absorb_grad(&mut self.w_o, tape, vars.w_o, scale);
        absorb_grad(&mut self.w_ff1, tape, vars.w_ff1, scale);
        absorb_grad(&mut self.w_ff2, tape, vars.w_ff2, scale);
        absorb_grad(&mut self.ln1_gain, tape, vars.ln1_gain, scale);
        absorb_grad(&mut self.ln1_bias, tape, vars.ln1_bias, scale);
        absorb_grad(&mut self.ln2_gain, tape, vars.ln2_gain, scale);
        absorb_grad(&mut self.ln2_bias, tape, vars.ln2_bias, scale);
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        for (i, t) in self.w_q.iter().enumerate() {
            f(format!("{prefix}.h{i}.w_q"), t);
        }
        for (i, t) in self.w_k.iter().enumerate() {
            f(format!("{prefix}.h{i}.w_k"), t);
        }
        for (i, t) in self.w_v.iter().enumerate() {
            f(format!("{prefix}.h{i}.w_v"), t);
        }
        f(format!("{prefix}.w_o"), &self.w_o);
        f(format!("{prefix}.w_ff1"), &self.w_ff1);
        f(format!("{prefix}.w_ff2"), &self.w_ff2);
        f(format!("{prefix}.ln1_gain"), &self.ln1_gain);
        f(format!("{prefix}.ln1_bias"), &self.ln1_bias);
        f(format!("{prefix}.ln2_gain"), &self.ln2_gain);
        f(format!("{prefix}.ln2_bias"), &self.ln2_bias);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (i, t) in self.w_q.iter_mut().enumerate() {
            f(format!("{prefix}.h{i}.w_q"), t);
        }
        for (i, t) in self.w_k.iter_mut().enumerate() {
            f(format!("{prefix}.h{i}.w_k"), t);
        }
        for (i, t) in self.w_v.iter_mut().enumerate() {
            f(format!("{prefix}.h{i}.w_v"), t);
        }
        f(format!("{prefix}.w_o"), &mut self.w_o);
        f(format!("{prefix}.w_ff1"), &mut self.w_ff1);
        f(format!("{prefix}.w_ff2"), &mut self.w_ff2);
        f(format!("{prefix}.ln1_gain"), &mut self.ln1_gain);
        f(format!("{prefix}.ln1_bias"), &mut self.ln1_bias);
        f(format!("{prefix}.ln2_gain"), &mut self.ln2_gain);
        f(format!("{prefix}.ln2_bias"), &mut self.ln2_bias);
    }
}

/// Attention parameters bound onto a tape.
#[derive(Debug, Clone)]
pub struct AttnVars {
    w_q: Vec<Var>,
    w_k: Vec<Var>,
    w_v: Vec<Var>,
    w_o: Var,
    w_ff1: Var,
    w_ff2: Var,
    ln1_gain: Var,
    ln1_bias: Var,
    ln2_gain: Var,
    ln2_bias: Var,
    d_model: usize,
    d_k: usize,
}

/// Encoded tokens plus the per-head attention matrices (each
/// `tokens x tokens`, rows summing to 1).
#[derive(Debug, Clone)]
pub struct AttnOutput {
    pub encoded: Var,
    pub attention: Vec<Var>,
}

/// Shared transformer layer over a `tokens x d_model` matrix:
/// multi-head scaled dot-product attention, residual + layer norm, then
/// a row-wise two-layer ReLU feed-forward, residual + layer norm.
fn attention_block(tape: &mut Tape, tokens: Var, p: &AttnVars) -> Result<AttnOutput> {
    let scale = 1.0 / (p.d_k as f64).sqrt();
    let mut heads = Vec::with_capacity(p.w_q.len());
    let mut attention = Vec::with_capacity(p.w_q.len());
    for i in 0..p.w_q.len() {
        let q = tape.matmul(tokens, p.w_q[i])?;
        let k = tape.matmul(tokens, p.w_k[i])?;
        let v = tape.matmul(tokens, p.w_v[i])?;
        let kt = tape.transpose(k)?;
        let logits = tape.matmul(q, kt)?;
        let scaled = tape.affine(logits, scale, 0.0)?;
        let attn = tape.softmax_rows(scaled)?;
        let head = tape.matmul(attn, v)?;
        heads.push(head);
        attention.push(attn);
    }
    let mut joined = heads[0];
    for &h in &heads[1..] {
        joined = tape.concat(joined, h)?;
    }
    let projected = tape.matmul(joined, p.w_o)?;
    let resid1 = tape.add(tokens, projected)?;
    let normed1 = tape.layer_norm(resid1, p.ln1_gain, p.ln1_bias, LN_EPS)?;
    let expanded = tape.matmul(normed1, p.w_ff1)?;
    let activated = tape.relu(expanded)?;
    let contracted = tape.matmul(activated, p.w_ff2)?;
    let resid2 = tape.add(normed1, contracted)?;
    let encoded = tape.layer_norm(resid2, p.ln2_gain, p.ln2_bias, LN_EPS)?;
    Ok(AttnOutput { encoded, attention })
}

/// Self-attention across *feature rows*: the input `T x d` is transposed
/// so each of the `d` feature dimensions becomes a token of width
/// `d_model = T`, attended with a `d x d` attention matrix, then
/// transposed back to `T x d`. Errors when `T != d_model`.
pub fn feature_attention_encode(tape: &mut Tape, x: Var, p: &AttnVars) -> Result<AttnOutput> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 2 || shape[0] != p.d_model {
        return Err(Error::invalid(
            "feature_attention_encode",
            format!(
                "observed length {:?} does not match d_model {} (resample first)",
                shape, p.d_model
            ),
        ));
    }
    let tokens = tape.transpose(x)?;
    let out = attention_block(tape, tokens, p)?;
    let encoded = tape.transpose(out.encoded)?;
    Ok(AttnOutput {
        encoded,
        attention: out.attention,
    })
}

/// Ablation variant: conventional attention across *time steps*. Tokens
/// are the `T` frame vectors of width `d_model = d`, giving a `T x T`
/// attention matrix. Errors when `d != d_model`.
pub fn temporal_attention_encode(tape: &mut Tape, x: Var, p: &AttnVars) -> Result<AttnOutput> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 2 || shape[1] != p.d_model {
        return Err(Error::invalid(
            "temporal_attention_encode",
            format!(
                "feature width {:?} does not match d_model {}",
                shape, p.d_model
            ),
        ));
    }
    attention_block(tape, x, p)
}

// ---------------------------------------------------------------------------
// Dropout and embedding
// ---------------------------------------------------------------------------

/// Inverted dropout: in training each element is zeroed with probability
/// `rate` and survivors are scaled by `1/(1-rate)` so the expectation is
/// unchanged; at inference (or `rate = 0`) the input passes through
/// untouched and the RNG is not consumed.
pub fn dropout_apply(
    tape: &mut Tape,
    x: Var,
    rate: f64,
    rng: &mut ChaCha20Rng,
    training: bool,
) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid(
            "dropout_apply",
            format!("rate {rate} outside [0, 1)"),
        ));
    }
    if !training || rate == 0.0 {
        return Ok(x);
    }
    let keep_scale = 1.0 / (1.0 - rate);
    let mask: Vec<f64> = (0..tape.numel(x))
        .map(|_| {
            if rng.random::<f64>() < rate {
                0.0
            } else {
                keep_scale
            }
        })
        .collect();
    let shape = tape.shape(x).to_vec();
    let mask_var = tape.leaf(mask, shape, false)?;
    tape.mul(x, mask_var)
}

/// Row lookup into an embedding table (`rows x k_e`). The last row is
/// conventionally the start-of-sequence token. Gradient reaches only the
/// selected row.
pub fn embed(tape: &mut Tape, table: Var, label: usize) -> Result<Var> {
    let shape = tape.shape(table).to_vec();
    let rows = match shape.as_slice() {
        &[r, _] => r,
        other => {
            return Err(Error::invalid(
                "embed",
                format!("table must be rank 2, got shape {:?}", other),
            ))
        }
    };
    if label >= rows {
        return Err(Error::LabelOutOfRange {
            context: "embedding lookup".into(),
            label,
            limit: rows,
        });
    }
    tape.row(table, label)
}
