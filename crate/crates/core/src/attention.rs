//! Spatial-temporal synchronous attention.
//!
//! Temporal self-attention runs per node over the positions of a window.
//! What makes it "synchronous" is the value tensor: instead of a learned
//! projection of the input, V comes out of the adaptive position graph
//! convolution, so spatial mixing happens before the temporal scores are
//! applied. Queries and keys are plain projections of the raw input.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graphconv::{apgcn, NodeAdaptiveWeights};
use crate::params::{uniform_init, Bindings, ParameterStore};
use crate::tape::{Tape, Var};

/// Query/key/output projections for multi-head temporal attention. The
/// per-head d_in x (d_out/h) projections are stored concatenated as single
/// d_in x d_out matrices and sliced per head.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub d_in: usize,
    pub d_out: usize,
    pub heads: usize,
    prefix: String,
}

impl AttentionParams {
    pub fn new(prefix: &str, d_in: usize, d_out: usize, heads: usize) -> Result<Self> {
        if heads == 0 {
            return Err(Error::Config("attention needs at least one head".into()));
        }
        if d_out % heads != 0 {
            return Err(Error::Config(format!(
                "output width {d_out} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            d_in,
            d_out,
            heads,
            prefix: prefix.to_string(),
        })
    }

    pub fn head_dim(&self) -> usize {
        self.d_out / self.heads
    }

    fn name(&self, suffix: &str) -> String {
        format!("{}.{suffix}", self.prefix)
    }

    pub fn register_params(&self, store: &mut ParameterStore, rng: &mut ChaCha8Rng) -> Result<()> {
        let bound = 1.0 / (self.d_in as f64).sqrt();
        store.register(
            &self.name("w_query"),
            uniform_init(rng, &[self.d_in, self.d_out], bound),
            true,
        )?;
        store.register(
            &self.name("w_key"),
            uniform_init(rng, &[self.d_in, self.d_out], bound),
            true,
        )?;
        let bound_o = 1.0 / (self.d_out as f64).sqrt();
        store.register(
            &self.name("w_out"),
            uniform_init(rng, &[self.d_out, self.d_out], bound_o),
            true,
        )?;
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        2 * self.d_in * self.d_out + self.d_out * self.d_out
    }
}

/// Scaled dot-product attention over the time axis, independently per node.
/// `q`, `k`, `v` each hold one s x d_h matrix per node; scores are softmax
/// rows of q.k^T / sqrt(d_h).
pub fn temporal_attention(tape: &mut Tape, q: &[Var], k: &[Var], v: &[Var]) -> Result<Vec<Var>> {
    if q.len() != k.len() || q.len() != v.len() || q.is_empty() {
        return Err(Error::Shape {
            op: "temporal_attention",
            detail: format!("{} / {} / {} node matrices", q.len(), k.len(), v.len()),
        });
    }
    let shape = tape.value(q[0]).shape().to_vec();
    let d_h = shape[1];
    let scale = 1.0 / (d_h as f64).sqrt();
    let mut out = Vec::with_capacity(q.len());
    for i in 0..q.len() {
        for var in [q[i], k[i], v[i]] {
            if tape.value(var).shape() != shape {
                return Err(Error::Shape {
                    op: "temporal_attention",
                    detail: format!(
                        "node {i}: {:?}, expected {shape:?}",
                        tape.value(var).shape()
                    ),
                });
            }
        }
        let kt = tape.transpose(k[i])?;
        let logits = tape.matmul(q[i], kt)?;
        let scaled = tape.scale(logits, scale)?;
        let scores = tape.softmax_rows(scaled)?;
        out.push(tape.matmul(scores, v[i])?);
    }
    Ok(out)
}

/// How the attention value tensor is produced.
#[derive(Clone, Debug)]
pub enum SpatialValue {
    /// Adaptive position graph convolution (the synchronous mechanism).
    GraphConv(NodeAdaptiveWeights),
    /// Plain learned projection of the input (ablation).
    Linear,
}

/// Attention block whose value path is spatially mixed.
#[derive(Clone, Debug)]
pub struct StsAtt {
    pub att: AttentionParams,
    pub value: SpatialValue,
    prefix: String,
}

impl StsAtt {
    pub fn new(prefix: &str, att: AttentionParams, value: SpatialValue) -> Self {
        Self {
            att,
            value,
            prefix: prefix.to_string(),
        }
    }

    fn value_name(&self) -> String {
        format!("{}.w_value", self.prefix)
    }

    pub fn register_params(&self, store: &mut ParameterStore, rng: &mut ChaCha8Rng) -> Result<()> {
        self.att.register_params(store, rng)?;
        match &self.value {
            SpatialValue::GraphConv(gcn) => gcn.register_params(store, rng)?,
            SpatialValue::Linear => {
                let bound = 1.0 / (self.att.d_in as f64).sqrt();
                store.register(
                    &self.value_name(),
                    uniform_init(rng, &[self.att.d_in, self.att.d_out], bound),
                    true,
                )?;
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.att.param_count()
            + match &self.value {
                SpatialValue::GraphConv(gcn) => gcn.param_count(),
                SpatialValue::Linear => self.att.d_in * self.att.d_out,
            }
    }

    /// Runs the block on a window. `x` holds one n x d_in matrix per time
    /// position (time-major); the output has the same layout at width d_out.
    pub fn apply(
        &self,
        tape: &mut Tape,
        binds: &Bindings,
        terms: &[Var],
        embed: Var,
        x: &[Var],
    ) -> Result<Vec<Var>> {
        if x.is_empty() {
            return Err(Error::Shape {
                op: "stsatt",
                detail: "empty window".into(),
            });
        }
        let n = tape.value(x[0]).rows();
        let s = x.len();
        for &slice in x {
            if tape.value(slice).shape() != [n, self.att.d_in] {
                return Err(Error::Shape {
                    op: "stsatt",
                    detail: format!(
                        "slice {:?}, expected [{n}, {}]",
                        tape.value(slice).shape(),
                        self.att.d_in
                    ),
                });
            }
        }

        // spatially mixed values, time-major
        let v_time = match &self.value {
            SpatialValue::GraphConv(gcn) => apgcn(tape, binds, gcn, terms, embed, x)?,
            SpatialValue::Linear => {
                let w_v = binds.var(&self.value_name())?;
                let mut v = Vec::with_capacity(s);
                for &slice in x {
                    v.push(tape.matmul(slice, w_v)?);
                }
                v
            }
        };

        // node-major views: one s x width matrix per node
        let gather_node = |tape: &mut Tape, slices: &[Var], node: usize| -> Result<Var> {
            let picks: Vec<(Var, usize)> = slices.iter().map(|&sl| (sl, node)).collect();
            tape.gather_rows(&picks)
        };

        let w_q = binds.var(&self.att.name("w_query"))?;
        let w_k = binds.var(&self.att.name("w_key"))?;
        let w_o = binds.var(&self.att.name("w_out"))?;
        let d_h = self.att.head_dim();

        let mut projected = Vec::with_capacity(n);
        for node in 0..n {
            let x_node = gather_node(tape, x, node)?;
            let v_node = gather_node(tape, &v_time, node)?;
            let q_full = tape.matmul(x_node, w_q)?;
            let k_full = tape.matmul(x_node, w_k)?;

            let mut heads = Vec::with_capacity(self.att.heads);
            for h in 0..self.att.heads {
                let q = tape.slice_cols(q_full, h * d_h, d_h)?;
                let k = tape.slice_cols(k_full, h * d_h, d_h)?;
                let v = tape.slice_cols(v_node, h * d_h, d_h)?;
                let out = temporal_attention(tape, &[q], &[k], &[v])?;
                heads.push(out[0]);
            }
            let concat = if heads.len() == 1 {
                heads[0]
            } else {
                tape.concat_cols(&heads)?
            };
            projected.push(tape.matmul(concat, w_o)?);
        }

        // back to time-major
        let mut out = Vec::with_capacity(s);
        for t in 0..s {
            let picks: Vec<(Var, usize)> = projected.iter().map(|&p| (p, t)).collect();
            out.push(tape.gather_rows(&picks)?);
        }
        Ok(out)
    }
}
