//! Adaptive position graph generation.
//!
//! Graphs are not taken from road topology: a node embedding plus a
//! time-position embedding produce, for every time position, a learned
//! row-stochastic transition matrix (softmax of the embedding similarity),
//! which then seeds a Chebyshev term stack. Single-step positions get their
//! own matrix per step; multi-step positions get one matrix per window of
//! `window` steps.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{uniform_init, Bindings, ParameterStore};
use crate::tape::{Tape, Var};
use crate::tensor::DenseArray;

/// Learnable embedding family: one row per node plus one row per time
/// position at each of the two scales. Layer-norm gain/bias pairs (one per
/// scale) stabilize the sums before the similarity product.
#[derive(Clone, Debug)]
pub struct EmbeddingBank {
    pub n_nodes: usize,
    pub input_len: usize,
    pub window: usize,
    pub n_windows: usize,
    pub embed_dim: usize,
    /// When false, time-position embeddings are not allocated and every
    /// position shares the node-only embedding ("only" ablation).
    pub with_time_embeddings: bool,
    prefix: String,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl EmbeddingBank {
    pub fn new(
        prefix: &str,
        n_nodes: usize,
        input_len: usize,
        window: usize,
        embed_dim: usize,
        with_time_embeddings: bool,
    ) -> Result<Self> {
        if n_nodes == 0 || embed_dim == 0 || input_len == 0 || window == 0 {
            return Err(Error::Config(
                "embedding bank dimensions must be positive".into(),
            ));
        }
        if input_len % window != 0 {
            return Err(Error::Config(format!(
                "input length {input_len} is not divisible by window size {window}"
            )));
        }
        Ok(Self {
            n_nodes,
            input_len,
            window,
            n_windows: input_len / window,
            embed_dim,
            with_time_embeddings,
            prefix: prefix.to_string(),
        })
    }

    fn name(&self, suffix: &str) -> String {
        format!("{}.{suffix}", self.prefix)
    }

    pub fn register_params(&self, store: &mut ParameterStore, rng: &mut ChaCha8Rng) -> Result<()> {
        let bound = 1.0 / (self.embed_dim as f64).sqrt();
        store.register(
            &self.name("node"),
            uniform_init(rng, &[self.n_nodes, self.embed_dim], bound),
            true,
        )?;
        if self.with_time_embeddings {
            store.register(
                &self.name("step"),
                uniform_init(rng, &[self.input_len, self.embed_dim], bound),
                true,
            )?;
            store.register(
                &self.name("window"),
                uniform_init(rng, &[self.n_windows, self.embed_dim], bound),
                true,
            )?;
        }
        for family in ["step_norm", "window_norm"] {
            store.register(
                &self.name(&format!("{family}.gain")),
                DenseArray::filled(&[self.embed_dim], 1.0),
                false,
            )?;
            store.register(
                &self.name(&format!("{family}.bias")),
                DenseArray::zeros(&[self.embed_dim]),
                false,
            )?;
        }
        Ok(())
    }

    /// Trainable embedding entries, excluding the layer-norm parameters.
    pub fn embedding_param_count(&self) -> usize {
        let d = self.embed_dim;
        if self.with_time_embeddings {
            self.n_nodes * d + self.input_len * d + self.n_windows * d
        } else {
            self.n_nodes * d
        }
    }

    /// Normalized per-node embedding for step `i`: the node embedding with
    /// the step's position row added, layer-normalized per node.
    pub fn step_embedding(&self, tape: &mut Tape, binds: &Bindings, i: usize) -> Result<Var> {
        if i >= self.input_len {
            return Err(Error::Config(format!(
                "step index {i} out of range 0..{}",
                self.input_len
            )));
        }
        let node = binds.var(&self.name("node"))?;
        let summed = if self.with_time_embeddings {
            let step = binds.var(&self.name("step"))?;
            let row = tape.slice_chunk(step, i * self.embed_dim, &[1, self.embed_dim])?;
            tape.add_row(node, row)?
        } else {
            node
        };
        let gain = binds.var(&self.name("step_norm.gain"))?;
        let bias = binds.var(&self.name("step_norm.bias"))?;
        tape.layer_norm_rows(summed, gain, bias, LAYER_NORM_EPS)
    }

    /// Normalized per-node embedding for window `j`.
    pub fn window_embedding(&self, tape: &mut Tape, binds: &Bindings, j: usize) -> Result<Var> {
        if j >= self.n_windows {
            return Err(Error::Config(format!(
                "window index {j} out of range 0..{}",
                self.n_windows
            )));
        }
        let node = binds.var(&self.name("node"))?;
        let summed = if self.with_time_embeddings {
            let win = binds.var(&self.name("window"))?;
            let row = tape.slice_chunk(win, j * self.embed_dim, &[1, self.embed_dim])?;
            tape.add_row(node, row)?
        } else {
            node
        };
        let gain = binds.var(&self.name("window_norm.gain"))?;
        let bias = binds.var(&self.name("window_norm.bias"))?;
        tape.layer_norm_rows(summed, gain, bias, LAYER_NORM_EPS)
    }
}

fn similarity_graph(tape: &mut Tape, embedding: Var) -> Result<Var> {
    let t = tape.transpose(embedding)?;
    let sim = tape.matmul(embedding, t)?;
    tape.softmax_rows(sim)
}

/// Row-stochastic transition matrix for step `i` built from the learned
/// embeddings.
pub fn single_step_laplacian(
    tape: &mut Tape,
    binds: &Bindings,
    bank: &EmbeddingBank,
    i: usize,
) -> Result<Var> {
    let e = bank.step_embedding(tape, binds, i)?;
    similarity_graph(tape, e)
}

/// Row-stochastic transition matrix for window `j`.
pub fn multi_step_laplacian(
    tape: &mut Tape,
    binds: &Bindings,
    bank: &EmbeddingBank,
    j: usize,
) -> Result<Var> {
    let e = bank.window_embedding(tape, binds, j)?;
    similarity_graph(tape, e)
}

fn cheb_terms(tape: &mut Tape, identity: Var, lhat: Var, k: usize) -> Result<Vec<Var>> {
    let mut terms = Vec::with_capacity(k);
    terms.push(identity);
    terms.push(lhat);
    for _ in 2..k {
        // T_{n+1} = 2 L T_n - T_{n-1}
        let prod = tape.matmul(lhat, terms[terms.len() - 1])?;
        let doubled = tape.scale(prod, 2.0)?;
        let next = tape.sub(doubled, terms[terms.len() - 2])?;
        terms.push(next);
    }
    Ok(terms)
}

/// Chebyshev term stack [I, L, 2L^2 - I, ...] of depth `k` (k >= 2).
pub fn chebyshev_stack(tape: &mut Tape, lhat: Var, k: usize) -> Result<Vec<Var>> {
    if k < 2 {
        return Err(Error::Config(format!("chebyshev depth must be >= 2, got {k}")));
    }
    let v = tape.value(lhat);
    if !v.is_matrix() || v.rows() != v.cols() {
        return Err(Error::Shape {
            op: "chebyshev_stack",
            detail: format!("expected square matrix, got {:?}", v.shape()),
        });
    }
    let n = v.rows();
    let identity = tape.leaf(DenseArray::identity(n))?;
    cheb_terms(tape, identity, lhat, k)
}

/// Where the transition matrices come from.
#[derive(Clone, Debug)]
pub enum GraphMode {
    /// Learned, time-position dependent (or node-only when the bank has no
    /// time embeddings).
    Adaptive,
    /// A fixed row-normalized adjacency replaces every generated graph.
    Static(DenseArray),
}

/// Chebyshev stacks and embedding slices for every position, ready for the
/// convolution and attention layers.
pub struct GraphBanks {
    /// per step: K term matrices, each n x n
    pub step_terms: Vec<Vec<Var>>,
    /// per window: K term matrices
    pub window_terms: Vec<Vec<Var>>,
    /// per step: normalized embedding, n x d
    pub step_embed: Vec<Var>,
    /// per window: normalized embedding
    pub window_embed: Vec<Var>,
}

/// Builds the full single-step and multi-step banks on the tape. Positions
/// that share identical inputs (static graphs, node-only embeddings) share
/// the same tape nodes rather than recomputing them.
pub fn build_graph_banks(
    tape: &mut Tape,
    binds: &Bindings,
    bank: &EmbeddingBank,
    k: usize,
    mode: &GraphMode,
) -> Result<GraphBanks> {
    if k < 2 {
        return Err(Error::Config(format!("chebyshev depth must be >= 2, got {k}")));
    }
    let identity = tape.leaf(DenseArray::identity(bank.n_nodes))?;

    let mut step_embed = Vec::with_capacity(bank.input_len);
    let mut window_embed = Vec::with_capacity(bank.n_windows);
    for i in 0..bank.input_len {
        if !bank.with_time_embeddings && i > 0 {
            step_embed.push(step_embed[0]);
        } else {
            step_embed.push(bank.step_embedding(tape, binds, i)?);
        }
    }
    for j in 0..bank.n_windows {
        if !bank.with_time_embeddings && j > 0 {
            window_embed.push(window_embed[0]);
        } else {
            window_embed.push(bank.window_embedding(tape, binds, j)?);
        }
    }

    let mut step_terms = Vec::with_capacity(bank.input_len);
    let mut window_terms = Vec::with_capacity(bank.n_windows);
    match mode {
        GraphMode::Static(adj) => {
            if adj.shape() != [bank.n_nodes, bank.n_nodes] {
                return Err(Error::Shape {
                    op: "build_graph_banks",
                    detail: format!(
                        "static adjacency {:?}, expected [{n}, {n}]",
                        adj.shape(),
                        n = bank.n_nodes
                    ),
                });
            }
            let lhat = tape.leaf(adj.clone())?;
            let terms = cheb_terms(tape, identity, lhat, k)?;
            for _ in 0..bank.input_len {
                step_terms.push(terms.clone());
            }
            for _ in 0..bank.n_windows {
                window_terms.push(terms.clone());
            }
        }
        GraphMode::Adaptive => {
            for i in 0..bank.input_len {
                if !bank.with_time_embeddings && i > 0 {
                    step_terms.push(step_terms[0].clone());
                } else {
                    let lhat = similarity_graph(tape, step_embed[i])?;
                    step_terms.push(cheb_terms(tape, identity, lhat, k)?);
                }
            }
            for j in 0..bank.n_windows {
                if !bank.with_time_embeddings && j > 0 {
                    window_terms.push(window_terms[0].clone());
                } else {
                    let lhat = similarity_graph(tape, window_embed[j])?;
                    window_terms.push(cheb_terms(tape, identity, lhat, k)?);
                }
            }
        }
    }

    Ok(GraphBanks {
        step_terms,
        window_terms,
        step_embed,
        window_embed,
    })
}

/// Normalizes each adjacency row to sum to 1. Rows must have a positive sum.
pub fn row_normalize(adj: &DenseArray) -> Result<DenseArray> {
    if !adj.is_matrix() || adj.rows() != adj.cols() {
        return Err(Error::Shape {
            op: "row_normalize",
            detail: format!("expected square matrix, got {:?}", adj.shape()),
        });
    }
    let n = adj.rows();
    let mut out = adj.clone();
    for i in 0..n {
        let sum: f64 = (0..n).map(|j| adj.at2(i, j)).sum();
        if sum <= 0.0 || !sum.is_finite() {
            return Err(Error::Config(format!(
                "static adjacency row {i} has non-positive sum {sum}"
            )));
        }
        for j in 0..n {
            out.set2(i, j, adj.at2(i, j) / sum);
        }
    }
    Ok(out)
}
