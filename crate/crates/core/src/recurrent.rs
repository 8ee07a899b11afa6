//! Spatial-temporal GRU cells.
//!
//! Both cells follow the standard gate algebra
//!   z = sigmoid(F([x, h])),  r = sigmoid(F'([x, h])),
//!   c = tanh(F''([x, r .* h])),  h' = z .* h + (1 - z) .* c
//! with the dense maps F replaced by a spatial-temporal transform: graph
//! convolution for the single-step cell (one time slice per step) and
//! synchronous attention for the multi-step cell (a whole window per step).
//! The three gates share shapes but never parameters.

use rand_chacha::ChaCha8Rng;

use crate::attention::StsAtt;
use crate::error::{Error, Result};
use crate::graphconv::{apgcn, NodeAdaptiveWeights};
use crate::graphgen::GraphBanks;
use crate::params::{Bindings, ParameterStore};
use crate::tape::{Tape, Var};
use crate::tensor::DenseArray;

/// Inner transform of one gate.
#[derive(Clone, Debug)]
pub enum GateTransform {
    GraphConv(NodeAdaptiveWeights),
    Attention(StsAtt),
}

impl GateTransform {
    pub fn register_params(&self, store: &mut ParameterStore, rng: &mut ChaCha8Rng) -> Result<()> {
        match self {
            GateTransform::GraphConv(g) => g.register_params(store, rng),
            GateTransform::Attention(a) => a.register_params(store, rng),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            GateTransform::GraphConv(g) => g.param_count(),
            GateTransform::Attention(a) => a.param_count(),
        }
    }

    fn apply(
        &self,
        tape: &mut Tape,
        binds: &Bindings,
        terms: &[Var],
        embed: Var,
        x: &[Var],
    ) -> Result<Vec<Var>> {
        match self {
            GateTransform::GraphConv(g) => apgcn(tape, binds, g, terms, embed, x),
            GateTransform::Attention(a) => a.apply(tape, binds, terms, embed, x),
        }
    }
}

/// The three independent gate parameter sets of one cell.
#[derive(Clone, Debug)]
pub struct GruGateParams {
    pub update: GateTransform,
    pub reset: GateTransform,
    pub candidate: GateTransform,
}

impl GruGateParams {
    pub fn register_params(&self, store: &mut ParameterStore, rng: &mut ChaCha8Rng) -> Result<()> {
        self.update.register_params(store, rng)?;
        self.reset.register_params(store, rng)?;
        self.candidate.register_params(store, rng)
    }

    pub fn param_count(&self) -> usize {
        self.update.param_count() + self.reset.param_count() + self.candidate.param_count()
    }
}

/// Pre-activation values of one cell application, for inspection in tests.
pub struct GateTrace {
    pub update_pre: Vec<DenseArray>,
    pub reset_pre: Vec<DenseArray>,
    pub candidate_pre: Vec<DenseArray>,
}

fn gru_cell(
    tape: &mut Tape,
    binds: &Bindings,
    gates: &GruGateParams,
    terms: &[Var],
    embed: Var,
    x: &[Var],
    h_prev: &[Var],
    trace: Option<&mut GateTrace>,
) -> Result<Vec<Var>> {
    if x.len() != h_prev.len() || x.is_empty() {
        return Err(Error::Shape {
            op: "gru_cell",
            detail: format!("{} input slices vs {} state slices", x.len(), h_prev.len()),
        });
    }
    let mut joined = Vec::with_capacity(x.len());
    for (&x_t, &h_t) in x.iter().zip(h_prev) {
        joined.push(tape.concat_cols(&[x_t, h_t])?);
    }
    let z_pre = gates.update.apply(tape, binds, terms, embed, &joined)?;
    let r_pre = gates.reset.apply(tape, binds, terms, embed, &joined)?;

    let mut z = Vec::with_capacity(x.len());
    let mut r = Vec::with_capacity(x.len());
    for (&zp, &rp) in z_pre.iter().zip(&r_pre) {
        z.push(tape.sigmoid(zp)?);
        r.push(tape.sigmoid(rp)?);
    }

    let mut joined_reset = Vec::with_capacity(x.len());
    for ((&x_t, &h_t), &r_t) in x.iter().zip(h_prev).zip(&r) {
        let gated = tape.mul(r_t, h_t)?;
        joined_reset.push(tape.concat_cols(&[x_t, gated])?);
    }
    let c_pre = gates.candidate.apply(tape, binds, terms, embed, &joined_reset)?;

    if let Some(trace) = trace {
        trace.update_pre = z_pre.iter().map(|&v| tape.value(v).clone()).collect();
        trace.reset_pre = r_pre.iter().map(|&v| tape.value(v).clone()).collect();
        trace.candidate_pre = c_pre.iter().map(|&v| tape.value(v).clone()).collect();
    }

    let mut h_new = Vec::with_capacity(x.len());
    for ((&cp, &z_t), &h_t) in c_pre.iter().zip(&z).zip(h_prev) {
        let cand = tape.tanh(cp)?;
        let keep = tape.mul(z_t, h_t)?;
        let gate_c = tape.affine(z_t, -1.0, 1.0)?; // 1 - z
        let take = tape.mul(gate_c, cand)?;
        h_new.push(tape.add(keep, take)?);
    }
    Ok(h_new)
}

/// One multi-step cell application over a window of `s` slices. The hidden
/// state is carried at window granularity: `h_prev` is the previous
/// window's full output.
pub fn ms_gru_cell(
    tape: &mut Tape,
    binds: &Bindings,
    gates: &GruGateParams,
    terms: &[Var],
    embed: Var,
    x_window: &[Var],
    h_prev: &[Var],
) -> Result<Vec<Var>> {
    gru_cell(tape, binds, gates, terms, embed, x_window, h_prev, None)
}

/// One single-step cell application (one time slice).
pub fn ss_gru_cell(
    tape: &mut Tape,
    binds: &Bindings,
    gates: &GruGateParams,
    terms: &[Var],
    embed: Var,
    x: Var,
    h_prev: Var,
) -> Result<Var> {
    let out = gru_cell(tape, binds, gates, terms, embed, &[x], &[h_prev], None)?;
    Ok(out[0])
}

/// Cell application that also reports gate pre-activations.
pub fn gru_cell_traced(
    tape: &mut Tape,
    binds: &Bindings,
    gates: &GruGateParams,
    terms: &[Var],
    embed: Var,
    x: &[Var],
    h_prev: &[Var],
) -> Result<(Vec<Var>, GateTrace)> {
    let mut trace = GateTrace {
        update_pre: Vec::new(),
        reset_pre: Vec::new(),
        candidate_pre: Vec::new(),
    };
    let h = gru_cell(tape, binds, gates, terms, embed, x, h_prev, Some(&mut trace))?;
    Ok((h, trace))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    SingleStep,
    MultiStep,
}

/// One recurrent layer: cell parameters plus its scan geometry.
#[derive(Clone, Debug)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub gates: GruGateParams,
    pub feat_in: usize,
    pub hidden: usize,
    pub window: usize,
}

/// Scans the layer's cell left to right over the sequence (zero initial
/// state) and returns one hidden slice per input position.
pub fn run_layer(
    tape: &mut Tape,
    binds: &Bindings,
    banks: &GraphBanks,
    layer: &LayerSpec,
    seq: &[Var],
) -> Result<Vec<Var>> {
    let t = seq.len();
    if t == 0 {
        return Err(Error::Shape {
            op: "run_layer",
            detail: "empty sequence".into(),
        });
    }
    let n = tape.value(seq[0]).rows();
    let zero = tape.leaf(DenseArray::zeros(&[n, layer.hidden]))?;
    let mut out = Vec::with_capacity(t);
    match layer.kind {
        LayerKind::SingleStep => {
            if banks.step_terms.len() != t {
                return Err(Error::Shape {
                    op: "run_layer",
                    detail: format!(
                        "{} step graphs for {t} positions",
                        banks.step_terms.len()
                    ),
                });
            }
            let mut h = zero;
            for (i, &x_t) in seq.iter().enumerate() {
                h = ss_gru_cell(
                    tape,
                    binds,
                    &layer.gates,
                    &banks.step_terms[i],
                    banks.step_embed[i],
                    x_t,
                    h,
                )?;
                out.push(h);
            }
        }
        LayerKind::MultiStep => {
            let s = layer.window;
            if t % s != 0 {
                return Err(Error::Shape {
                    op: "run_layer",
                    detail: format!("sequence length {t} not divisible by window {s}"),
                });
            }
            let n_windows = t / s;
            if banks.window_terms.len() != n_windows {
                return Err(Error::Shape {
                    op: "run_layer",
                    detail: format!(
                        "{} window graphs for {n_windows} windows",
                        banks.window_terms.len()
                    ),
                });
            }
            let mut h: Vec<Var> = vec![zero; s];
            for j in 0..n_windows {
                let window = &seq[j * s..(j + 1) * s];
                h = ms_gru_cell(
                    tape,
                    binds,
                    &layer.gates,
                    &banks.window_terms[j],
                    banks.window_embed[j],
                    window,
                    &h,
                )?;
                out.extend_from_slice(&h);
            }
        }
    }
    Ok(out)
}
