//! Central finite-difference verification of every differentiable
//! primitive and of the assembled model.
//!
//! Each check owns a set of trainable input tensors and two ways to run
//! the same computation: a pure value evaluation (for perturbed inputs)
//! and an analytic-gradient evaluation. Matrix- or sequence-valued
//! outputs are reduced to a scalar by a fixed random projection so
//! every output element influences the loss.

use crate::data::Sample;
use crate::error::Result;
use crate::layers::{
    bigru_encode, embed, feature_attention_encode, gru_cell_step, temporal_attention_encode,
    FeatureAttnParams, GruParams, LN_EPS,
};
use crate::model::{forward_backward, forward_full, forward_graph, ModelConfig, ModelParams};
use crate::rng::{stream_rng, stream_seed};
use crate::tensor::{Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use std::rc::Rc;

/// Step for central differences.
pub const FD_EPSILON: f64 = 1e-5;
/// Largest acceptable `|analytic - numeric| / max(floor, |numeric|)`.
pub const FD_TOLERANCE: f64 = 1e-4;
/// Check inputs are redrawn until every kinked op (relu, max-pool) is
/// at least this far from its kink, so the ±`FD_EPSILON` probes never
/// straddle a non-differentiable point.
const KINK_MARGIN: f64 = 1e-3;

/// Worst relative error over all elements of one checked graph.
#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub elements: usize,
}

/// The whole run: every primitive and the full model, on several seeds.
#[derive(Debug)]
pub struct SuiteReport {
    pub checks: Vec<CheckReport>,
    pub max_rel_err: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < FD_TOLERANCE
    }

    /// The check with the largest error.
    pub fn worst(&self) -> &CheckReport {
        self.checks
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
            .expect("suite is never empty")
    }
}

/// `|analytic - numeric|` relative to `numeric`, with the denominator
/// floored. Primitives use the tight 1e-8 floor; the full-model check
/// floors at 1e-5 because a central difference of a loss of magnitude
/// ~5 carries ~1e-10 of cancellation noise, so gradients below 1e-5
/// can only be certified absolutely (to ~1e-9), not relatively.
pub(crate) fn rel_err(analytic: f64, numeric: f64, denom_floor: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(denom_floor)
}

const PRIMITIVE_FLOOR: f64 = 1e-8;
const MODEL_FLOOR: f64 = 1e-5;

struct GraphCheck {
    name: String,
    inputs: Vec<Tensor>,
    denom_floor: f64,
    /// Loss at the current input values.
    value: Box<dyn Fn(&[Tensor]) -> Result<f64>>,
    /// Analytic gradient per input, same order and shapes.
    grads: Box<dyn Fn(&[Tensor]) -> Result<Vec<Vec<f64>>>>,
}

fn run_check(mut check: GraphCheck) -> Result<CheckReport> {
    let analytic = (check.grads)(&check.inputs)?;
    assert_eq!(analytic.len(), check.inputs.len(), "{}", check.name);
    let mut max_rel = 0.0f64;
    let mut elements = 0usize;
    for i in 0..check.inputs.len() {
        assert_eq!(analytic[i].len(), check.inputs[i].numel(), "{}", check.name);
        for j in 0..check.inputs[i].numel() {
            let orig = check.inputs[i].values()[j];
            check.inputs[i].values_mut()[j] = orig + FD_EPSILON;
            let up = (check.value)(&check.inputs)?;
            check.inputs[i].values_mut()[j] = orig - FD_EPSILON;
            let down = (check.value)(&check.inputs)?;
            check.inputs[i].values_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * FD_EPSILON);
            max_rel = max_rel.max(rel_err(analytic[i][j], numeric, check.denom_floor));
            elements += 1;
        }
    }
    Ok(CheckReport {
        name: check.name,
        max_rel_err: max_rel,
        elements,
    })
}

// ---------------------------------------------------------------------------
// Check construction helpers
// ---------------------------------------------------------------------------

fn rand_tensor(shape: &[usize], rng: &mut ChaCha20Rng, trainable: bool) -> Tensor {
    let n: usize = shape.iter().product();
    let t = Tensor::new(
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        shape.to_vec(),
    )
    .expect("consistent shape");
    if trainable {
        t.with_grad()
    } else {
        t
    }
}

/// Random values bounded away from zero, for kinked activations whose
/// finite differences are unreliable at the kink.
fn rand_tensor_off_kink(shape: &[usize], rng: &mut ChaCha20Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let values = (0..n)
        .map(|_| {
            let magnitude = rng.random_range(0.1..1.0);
            if rng.random_range(0..2) == 0 {
                magnitude
            } else {
                -magnitude
            }
        })
        .collect();
    Tensor::new(values, shape.to_vec()).unwrap().with_grad()
}

/// Scalarizes `out` as `sum(out * projection)`.
fn project(tape: &mut Tape, out: Var, projection: &Tensor) -> Result<Var> {
    let p = tape.leaf_tensor(projection); // non-trainable
    let weighted = tape.mul(out, p)?;
    tape.sum_all(weighted)
}

fn grad_or_zeros(tape: &Tape, v: Var) -> Vec<f64> {
    let g = tape.grad(v);
    if g.is_empty() {
        vec![0.0; tape.numel(v)]
    } else {
        g.to_vec()
    }
}

/// A check whose graph is a plain closure over leaf vars (one leaf per
/// input tensor, in order).
fn simple_check(
    name: &str,
    inputs: Vec<Tensor>,
    build: Rc<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>,
) -> GraphCheck {
    let run = move |tensors: &[Tensor], want_grads: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf_tensor(t)).collect();
        let loss = build(&mut tape, &vars)?;
        let value = tape.values(loss)[0];
        if !want_grads {
            return Ok((value, Vec::new()));
        }
        tape.backward(loss)?;
        Ok((value, vars.iter().map(|v| grad_or_zeros(&tape, *v)).collect()))
    };
    let run = Rc::new(run);
    let run_v = run.clone();
    GraphCheck {
        name: name.to_string(),
        inputs,
        denom_floor: PRIMITIVE_FLOOR,
        value: Box::new(move |t| Ok(run_v(t, false)?.0)),
        grads: Box::new(move |t| Ok(run(t, true)?.1)),
    }
}

/// GRU parameter tensors in the order `GruParams::visit` reports them.
fn gru_from_slice(tensors: &[Tensor]) -> GruParams {
    GruParams {
        w_z: tensors[0].clone(),
        u_z: tensors[1].clone(),
        b_z: tensors[2].clone(),
        w_r: tensors[3].clone(),
        u_r: tensors[4].clone(),
        b_r: tensors[5].clone(),
        w_c: tensors[6].clone(),
        u_c: tensors[7].clone(),
        b_c: tensors[8].clone(),
    }
}

fn gru_tensor_list(input_dim: usize, hidden_dim: usize, rng: &mut ChaCha20Rng) -> Vec<Tensor> {
    let mut out = Vec::new();
    for _ in 0..3 {
        out.push(rand_tensor(&[input_dim, hidden_dim], rng, true));
        out.push(rand_tensor(&[hidden_dim, hidden_dim], rng, true));
        out.push(rand_tensor(&[hidden_dim], rng, true));
    }
    out
}

/// Collects gradients from a visited parameter structure in visit order.
fn visited_grads(visit: impl FnOnce(&mut dyn FnMut(String, &Tensor))) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    visit(&mut |_, t: &Tensor| out.push(t.grad().expect("trainable").to_vec()));
    out
}

// ---------------------------------------------------------------------------
// The checks
// ---------------------------------------------------------------------------

fn primitive_checks(seed: u64) -> Vec<GraphCheck> {
    let mut rng = stream_rng(seed, &["gradcheck", "inputs"]);
    let mut checks = Vec::new();

    // matmul in all rank combinations.
    checks.push(simple_check(
        "matmul_mat_mat",
        vec![
            rand_tensor(&[2, 3], &mut rng, true),
            rand_tensor(&[3, 2], &mut rng, true),
        ],
        {
            let proj = rand_tensor(&[2, 2], &mut rng, false);
            Rc::new(move |tape, v| {
                let m = tape.matmul(v[0], v[1])?;
                project(tape, m, &proj)
            })
        },
    ));
    checks.push(simple_check(
        "matmul_vec_mat",
        vec![
            rand_tensor(&[3], &mut rng, true),
            rand_tensor(&[3, 2], &mut rng, true),
        ],
        {
            let proj = rand_tensor(&[2], &mut rng, false);
            Rc::new(move |tape, v| {
                let m = tape.matmul(v[0], v[1])?;
                project(tape, m, &proj)
            })
        },
    ));
    checks.push(simple_check(
        "matmul_mat_vec",
        vec![
            rand_tensor(&[2, 3], &mut rng, true),
            rand_tensor(&[3], &mut rng, true),
        ],
        {
            let proj = rand_tensor(&[2], &mut rng, false);
            Rc::new(move |tape, v| {
                let m = tape.matmul(v[0], v[1])?;
                project(tape, m, &proj)
            })
        },
    ));
    checks.push(simple_check(
        "matmul_dot",
        vec![
            rand_tensor(&[3], &mut rng, true),
            rand_tensor(&[3], &mut rng, true),
        ],
        Rc::new(|tape, v| {
            let m = tape.matmul(v[0], v[1])?;
            tape.sum_all(m)
        }),
    ));

    checks.push(simple_check(
        "add",
        vec![
            rand_tensor(&[2, 3], &mut rng, true),
            rand_tensor(&[2, 3], &mut rng, true),
        ],
        {
            let proj = rand_tensor(&[2, 3], &mut rng, false);
            Rc::new(move |tape, v| {
                let s = tape.add(v[0], v[1])?;
                project(tape, s, &proj)
            })
        },
    ));
    checks.push(simple_check(
        "mul",
        vec![
            rand_tensor(&[2, 3], &mut rng, true),
            rand_tensor(&[2, 3], &mut rng, true),
        ],
        {
            let proj = rand_tensor(&[2, 3], &mut rng, false);
            Rc::new(move |tape, v| {
                let s = tape.mul(v[0], v[1])?;
                project(tape, s, &proj)
            })
        },
    ));
    checks.push(simple_check(
        "affine",
        vec![rand_tensor(&[5], &mut rng, true)],
        {
            let proj = rand_tensor(&[5], &mut rng, false);
            Rc::new(move |tape, v| {
                let s = tape.affine(v[0], -1.3, 0.4)?;
                project(tape, s, &proj)
            })
        },
    ));

    for (name, op) in [
        ("sigmoid", 0usize),
        ("tanh", 1),
    ] {
        checks.push(simple_check(
            name,
            vec![rand_tensor(&[5], &mut rng, true)],
            {
                let proj = rand_tensor(&[5], &mut rng, false);
                Rc::new(move |tape, v| {
                    let s = if op == 0 {
                        tape.sigmoid(v[0])?
                    } else {
                        tape.tanh(v[0])?
                    };
                    project(tape, s, &proj)
                })
            },
        ));
    }
    checks.push(simple_check(
        "relu",
        vec![rand_tensor_off_kink(&[6], &mut rng)],
        {
            let proj = rand_tensor(&[6], &mut rng, false);
            Rc::new(move |tape, v| {
                let s = tape.relu(v[0])?;
                project(tape, s, &proj)
            })
        },
    ));
    checks.push(simple_check(
        "softmax_rows",
        vec![rand_tensor(&[2, 4], &mut rng, true)],
        {
            let proj = rand_tensor(&[2, 4], &mut rng, false);
            Rc::new(move |tape, v| {
                let s = tape.softmax_rows(v[0])?;
                project(tape, s, &proj)
            })
        },
    ));
    checks.push(simple_check(
        "layer_norm_2d",
        vec![
            rand_tensor(&[3, 5], &mut rng, true),
            rand_tensor(&[5], &mut rng, true),
            rand_tensor(&[5], &mut rng, true),
        ],
        {
            let proj = rand_tensor(&[3, 5], &mut rng, false);
            Rc::new(move |tape, v| {
                let s = tape.layer_norm(v[0], v[1], v[2], LN_EPS)?;
                project(tape, s, &proj)
            })
        },
    ));
    checks.push(simple_check(
        "layer_norm_1d",
        vec![
            rand_tensor(&[6], &mut rng, true),
            rand_tensor(&[6], &mut rng, true),
            rand_tensor(&[6], &mut rng, true),
        ],
        {
            let proj = rand_tensor(&[6], &mut rng, false);
            Rc::new(move |tape, v| {
                let s = tape.layer_norm(v[0], v[1], v[2], LN_EPS)?;
                project(tape, s, &proj)
            })
        },
    ));
    checks.push(simple_check(
        "concat_vectors",
        vec![
            rand_tensor(&[3], &mut rng, true),
            rand_tensor(&[4], &mut rng, true),
        ],
        {
            let proj = rand_tensor(&[7], &mut rng, false);
            Rc::new(move |tape, v| {
                let s = tape.concat(v[0], v[1])?;
                project(tape, s, &proj)
            })
        },
    ));
    checks.push(simple_check(
        "concat_matrices",
        vec![
            rand_tensor(&[2, 2], &mut rng, true),
            rand_tensor(&[2, 3], &mut rng, true),
        ],
        {
            let proj = rand_tensor(&[2, 5], &mut rng, false);
            Rc::new(move |tape, v| {
                let s = tape.concat(v[0], v[1])?;
                project(tape, s, &proj)
            })
        },
    ));
    checks.push(simple_check(
        "stack_rows",
        vec![
            rand_tensor(&[4], &mut rng, true),
            rand_tensor(&[4], &mut rng, true),
            rand_tensor(&[4], &mut rng, true),
        ],
        {
            let proj = rand_tensor(&[3, 4], &mut rng, false);
            Rc::new(move |tape, v| {
                let s = tape.stack_rows(v)?;
                project(tape, s, &proj)
            })
        },
    ));
    checks.push(simple_check(
        "row",
        vec![rand_tensor(&[3, 4], &mut rng, true)],
        {
            let proj = rand_tensor(&[4], &mut rng, false);
            Rc::new(move |tape, v| {
                let s = tape.row(v[0], 1)?;
                project(tape, s, &proj)
            })
        },
    ));
    checks.push(simple_check(
        "transpose",
        vec![rand_tensor(&[3, 4], &mut rng, true)],
        {
            let proj = rand_tensor(&[4, 3], &mut rng, false);
            Rc::new(move |tape, v| {
                let s = tape.transpose(v[0])?;
                project(tape, s, &proj)
            })
        },
    ));
    let max_input = loop {
        let candidate = rand_tensor(&[4, 3], &mut rng, true);
        let mut tape = Tape::new();
        let v = tape.leaf_tensor(&candidate);
        tape.max_over_time(v).expect("non-empty input");
        if tape.min_kink_margin() > KINK_MARGIN {
            break candidate;
        }
    };
    checks.push(simple_check(
        "max_over_time",
        vec![max_input],
        {
            let proj = rand_tensor(&[3], &mut rng, false);
            Rc::new(move |tape, v| {
                let s = tape.max_over_time(v[0])?;
                project(tape, s, &proj)
            })
        },
    ));
    checks.push(simple_check(
        "cross_entropy",
        vec![rand_tensor(&[5], &mut rng, true)],
        Rc::new(|tape, v| tape.cross_entropy(v[0], 2)),
    ));
    checks.push(simple_check(
        "sum_all",
        vec![rand_tensor(&[2, 3], &mut rng, true)],
        Rc::new(|tape, v| tape.sum_all(v[0])),
    ));
    checks.push(simple_check(
        "embed",
        vec![rand_tensor(&[4, 3], &mut rng, true)],
        {
            let proj = rand_tensor(&[3], &mut rng, false);
            Rc::new(move |tape, v| {
                let s = embed(tape, v[0], 2)?;
                project(tape, s, &proj)
            })
        },
    ));

    checks.push(gru_cell_check(&mut rng));
    checks.push(bigru_check(&mut rng));
    checks.push(attention_check(&mut rng, false));
    checks.push(attention_check(&mut rng, true));
    checks
}

/// One recurrent step with every gate weight trainable. Inputs:
/// `[x, h_prev]` then the nine gate tensors in visit order.
fn gru_cell_check(rng: &mut ChaCha20Rng) -> GraphCheck {
    let (k_in, k_h) = (3usize, 4usize);
    let mut inputs = vec![
        rand_tensor(&[k_in], rng, true),
        rand_tensor(&[k_h], rng, true),
    ];
    inputs.extend(gru_tensor_list(k_in, k_h, rng));
    let proj = rand_tensor(&[k_h], rng, false);
    let run = Rc::new(move |tensors: &[Tensor], want: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut gru = gru_from_slice(&tensors[2..]);
        gru.visit_mut("p", &mut |_, t| t.zero_grad());
        let mut tape = Tape::new();
        let x = tape.leaf_tensor(&tensors[0]);
        let h = tape.leaf_tensor(&tensors[1]);
        let vars = gru.bind(&mut tape);
        let next = gru_cell_step(&mut tape, x, h, &vars)?;
        let loss = project(&mut tape, next, &proj)?;
        let value = tape.values(loss)[0];
        if !want {
            return Ok((value, Vec::new()));
        }
        tape.backward(loss)?;
        gru.absorb(&tape, &vars, 1.0);
        let mut grads = vec![grad_or_zeros(&tape, x), grad_or_zeros(&tape, h)];
        grads.extend(visited_grads(|f| gru.visit("p", f)));
        Ok((value, grads))
    });
    let run_v = run.clone();
    GraphCheck {
        name: "gru_cell".to_string(),
        inputs,
        denom_floor: PRIMITIVE_FLOOR,
        value: Box::new(move |t| Ok(run_v(t, false)?.0)),
        grads: Box::new(move |t| Ok(run(t, true)?.1)),
    }
}

/// The bidirectional encoder end to end: loss projects both the hidden
/// matrix and the final state. Inputs: `[x]`, nine forward-cell
/// tensors, nine backward-cell tensors.
fn bigru_check(rng: &mut ChaCha20Rng) -> GraphCheck {
    let (t_len, d, half) = (3usize, 2usize, 2usize);
    let mut inputs = vec![rand_tensor(&[t_len, d], rng, true)];
    inputs.extend(gru_tensor_list(d, half, rng));
    inputs.extend(gru_tensor_list(d, half, rng));
    let proj_h = rand_tensor(&[t_len, 2 * half], rng, false);
    let proj_last = rand_tensor(&[2 * half], rng, false);
    let run = Rc::new(move |tensors: &[Tensor], want: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut fwd = gru_from_slice(&tensors[1..10]);
        let mut bwd = gru_from_slice(&tensors[10..19]);
        fwd.visit_mut("f", &mut |_, t| t.zero_grad());
        bwd.visit_mut("b", &mut |_, t| t.zero_grad());
        let mut tape = Tape::new();
        let x = tape.leaf_tensor(&tensors[0]);
        let fv = fwd.bind(&mut tape);
        let bv = bwd.bind(&mut tape);
        let enc = bigru_encode(&mut tape, x, &fv, &bv)?;
        let lh = project(&mut tape, enc.hidden, &proj_h)?;
        let ll = project(&mut tape, enc.last, &proj_last)?;
        let loss = tape.add(lh, ll)?;
        let value = tape.values(loss)[0];
        if !want {
            return Ok((value, Vec::new()));
        }
        tape.backward(loss)?;
        fwd.absorb(&tape, &fv, 1.0);
        bwd.absorb(&tape, &bv, 1.0);
        let mut grads = vec![grad_or_zeros(&tape, x)];
        grads.extend(visited_grads(|f| fwd.visit("f", f)));
        grads.extend(visited_grads(|f| bwd.visit("b", f)));
        Ok((value, grads))
    });
    let run_v = run.clone();
    GraphCheck {
        name: "bigru_encode".to_string(),
        inputs,
        denom_floor: PRIMITIVE_FLOOR,
        value: Box::new(move |t| Ok(run_v(t, false)?.0)),
        grads: Box::new(move |t| Ok(run(t, true)?.1)),
    }
}

/// Attention block (feature-wise or temporal) with every projection,
/// feed-forward and normalization tensor trainable. Inputs: `[x]` then
/// the attention tensors in visit order.
fn attention_check(rng: &mut ChaCha20Rng, temporal: bool) -> GraphCheck {
    let (t_len, d) = (4usize, 3usize);
    let d_model = if temporal { d } else { t_len };
    let heads = 2;
    let ff = 6;
    // Draw a template for shapes/ordering, then replace every tensor
    // with fresh random values.
    let template = FeatureAttnParams::init(d_model, heads, ff, 0, "gc");
    let mut shapes = Vec::new();
    template.visit("a", &mut |_, t| shapes.push(t.shape().to_vec()));
    // Redraw until the block's relu inputs sit clear of the kink.
    let inputs = loop {
        let mut candidate = vec![rand_tensor(&[t_len, d], rng, true)];
        for s in &shapes {
            candidate.push(rand_tensor(s, rng, true));
        }
        let mut attn = FeatureAttnParams::init(d_model, heads, ff, 0, "gc");
        let mut idx = 1;
        attn.visit_mut("a", &mut |_, t| {
            t.values_mut().copy_from_slice(candidate[idx].values());
            idx += 1;
        });
        let mut tape = Tape::new();
        let x = tape.leaf_tensor(&candidate[0]);
        let vars = attn.bind(&mut tape);
        let built = if temporal {
            temporal_attention_encode(&mut tape, x, &vars)
        } else {
            feature_attention_encode(&mut tape, x, &vars)
        };
        built.expect("shapes are construction-consistent");
        if tape.min_kink_margin() > KINK_MARGIN {
            break candidate;
        }
    };
    let proj = rand_tensor(&[t_len, d], rng, false);
    let name = if temporal { "temporal_attention" } else { "feature_attention" };
    let run = Rc::new(move |tensors: &[Tensor], want: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut attn = FeatureAttnParams::init(d_model, heads, ff, 0, "gc");
        let mut idx = 1;
        attn.visit_mut("a", &mut |_, t| {
            t.values_mut().copy_from_slice(tensors[idx].values());
            t.zero_grad();
            idx += 1;
        });
        let mut tape = Tape::new();
        let x = tape.leaf_tensor(&tensors[0]);
        let vars = attn.bind(&mut tape);
        let out = if temporal {
            temporal_attention_encode(&mut tape, x, &vars)?
        } else {
            feature_attention_encode(&mut tape, x, &vars)?
        };
        let loss = project(&mut tape, out.encoded, &proj)?;
        let value = tape.values(loss)[0];
        if !want {
            return Ok((value, Vec::new()));
        }
        tape.backward(loss)?;
        attn.absorb(&tape, &vars, 1.0);
        let mut grads = vec![grad_or_zeros(&tape, x)];
        grads.extend(visited_grads(|f| attn.visit("a", f)));
        Ok((value, grads))
    });
    let run_v = run.clone();
    GraphCheck {
        name: name.to_string(),
        inputs,
        denom_floor: PRIMITIVE_FLOOR,
        value: Box::new(move |t| Ok(run_v(t, false)?.0)),
        grads: Box::new(move |t| Ok(run(t, true)?.1)),
    }
}

/// The assembled model: one flat tensor carries every parameter;
/// training-mode forward with teacher forcing (masking off, dropout 0,
/// so the pass is a deterministic smooth function of the parameters).
fn model_check(seed: u64) -> GraphCheck {
    let cfg = ModelConfig::tiny(3);
    let base = ModelParams::init(&cfg, seed).expect("tiny config is valid");
    // Accept only samples whose forward pass keeps every relu input and
    // max-pool column margin clear of the kink at these parameters.
    let sample = {
        let mut salt = 0u64;
        loop {
            let candidate =
                random_sample(&cfg, stream_seed(seed, &["sample", &salt.to_string()]));
            let mut rng = stream_rng(0, &["gradcheck", "probe"]);
            let graph = forward_graph(&candidate, &base, &cfg, &mut rng, true)
                .expect("tiny graph builds");
            if graph.tape.min_kink_margin() > KINK_MARGIN {
                break candidate;
            }
            salt += 1;
        }
    };
    let flat = Tensor::new(base.flatten_values(), vec![base.n_params()])
        .unwrap()
        .with_grad();
    let run = Rc::new(move |tensors: &[Tensor], want: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut params = base.clone();
        params.set_flattened(tensors[0].values());
        let mut rng = stream_rng(0, &["gradcheck", "silent"]);
        if !want {
            let (_, loss) = forward_full(&sample, &params, &cfg, &mut rng, true)?;
            return Ok((loss, Vec::new()));
        }
        params.zero_grads();
        let (_, loss) = forward_backward(&sample, &mut params, &cfg, &mut rng, 1.0)?;
        Ok((loss, vec![params.flatten_grads()]))
    });
    let run_v = run.clone();
    GraphCheck {
        name: "model".to_string(),
        inputs: vec![flat],
        denom_floor: MODEL_FLOOR,
        value: Box::new(move |t| Ok(run_v(t, false)?.0)),
        grads: Box::new(move |t| Ok(run(t, true)?.1)),
    }
}

fn random_sample(cfg: &ModelConfig, seed: u64) -> Sample {
    let mut rng = stream_rng(seed, &["gradcheck", "sample"]);
    let numel = cfg.t_fixed * cfg.feature_dim;
    Sample {
        id: format!("gradcheck_{seed}"),
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

/// Runs every primitive check and the full-model check on five seeds
/// derived from `base_seed`.
pub fn run_suite(base_seed: u64) -> Result<SuiteReport> {
    let mut checks = Vec::new();
    for round in 0..5u64 {
        let seed = stream_seed(base_seed, &["gradcheck", &round.to_string()]);
        for check in primitive_checks(seed) {
            let mut report = run_check(check)?;
            report.name = format!("{}[s{round}]", report.name);
            checks.push(report);
        }
        let mut report = run_check(model_check(seed))?;
        report.name = format!("model[s{round}]");
        checks.push(report);
    }
    let max_rel_err = checks
        .iter()
        .map(|c| c.max_rel_err)
        .fold(0.0f64, f64::max);
    Ok(SuiteReport {
        checks,
        max_rel_err,
    })
}
