//! Adaptive position graph convolution.
//!
//! A Chebyshev graph convolution whose per-node weights are not stored
//! directly: each node's K x d_in x d_out weight block is generated from its
//! embedding row by contracting a shared d x K x d_in x d_out pool over the
//! embedding dimension, and likewise for the per-node bias. The same routine
//! serves single steps (one time slice per call) and whole windows (all
//! slices share one graph and one embedding).

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{uniform_init, Bindings, ParameterStore};
use crate::tape::{Tape, Var};
use crate::tensor::DenseArray;

/// Shared weight/bias pools from which per-node parameters are generated.
#[derive(Clone, Debug)]
pub struct NodeAdaptiveWeights {
    pub embed_dim: usize,
    pub cheb_k: usize,
    pub d_in: usize,
    pub d_out: usize,
    prefix: String,
}

impl NodeAdaptiveWeights {
    pub fn new(prefix: &str, embed_dim: usize, cheb_k: usize, d_in: usize, d_out: usize) -> Self {
        Self {
            embed_dim,
            cheb_k,
            d_in,
            d_out,
            prefix: prefix.to_string(),
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight_pool", self.prefix)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias_pool", self.prefix)
    }

    pub fn register_params(&self, store: &mut ParameterStore, rng: &mut ChaCha8Rng) -> Result<()> {
        let bound = 1.0 / ((self.cheb_k * self.d_in) as f64).sqrt();
        store.register(
            &self.weight_name(),
            uniform_init(
                rng,
                &[self.embed_dim, self.cheb_k, self.d_in, self.d_out],
                bound,
            ),
            true,
        )?;
        store.register(
            &self.bias_name(),
            DenseArray::zeros(&[self.embed_dim, self.d_out]),
            false,
        )?;
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.embed_dim * self.cheb_k * self.d_in * self.d_out + self.embed_dim * self.d_out
    }
}

/// Applies the convolution to each time slice in `x` (each n x d_in), using
/// one Chebyshev term stack and one n x d embedding slice for all of them.
/// Output: one n x d_out matrix per input slice.
///
/// out[t, n] = sum_k (terms[k] . x[t])[n] . theta[n, k] + beta[n]
/// with theta[n] = sum_e embed[n, e] * weight_pool[e] and
/// beta[n] = sum_e embed[n, e] * bias_pool[e].
pub fn apgcn(
    tape: &mut Tape,
    binds: &Bindings,
    weights: &NodeAdaptiveWeights,
    terms: &[Var],
    embed: Var,
    x: &[Var],
) -> Result<Vec<Var>> {
    let (d, k, d_in, d_out) = (
        weights.embed_dim,
        weights.cheb_k,
        weights.d_in,
        weights.d_out,
    );
    if terms.len() != k {
        return Err(Error::Shape {
            op: "apgcn",
            detail: format!("{} chebyshev terms, expected {k}", terms.len()),
        });
    }
    let n = tape.value(embed).rows();
    if tape.value(embed).shape() != [n, d] {
        return Err(Error::Shape {
            op: "apgcn",
            detail: format!("embedding {:?}, expected [{n}, {d}]", tape.value(embed).shape()),
        });
    }
    // the k = 0 term must be the identity; anything else breaks the
    // recurrence contract upstream
    let ident = DenseArray::identity(n);
    if tape.value(terms[0]) != &ident {
        return Err(Error::Shape {
            op: "apgcn",
            detail: "chebyshev term 0 is not the identity matrix".into(),
        });
    }
    for (i, &term) in terms.iter().enumerate() {
        if tape.value(term).shape() != [n, n] {
            return Err(Error::Shape {
                op: "apgcn",
                detail: format!("term {i} is {:?}, expected [{n}, {n}]", tape.value(term).shape()),
            });
        }
    }

    let w_pool = binds.var(&weights.weight_name())?;
    let b_pool = binds.var(&weights.bias_name())?;
    // beta = embed . bias_pool, shared by every slice
    let bias_term = tape.matmul(embed, b_pool)?;

    // per-embedding-channel weight blocks, shared by every slice
    let mut w_blocks = Vec::with_capacity(d);
    for e_idx in 0..d {
        w_blocks.push(tape.slice_chunk(
            w_pool,
            e_idx * k * d_in * d_out,
            &[k * d_in, d_out],
        )?);
    }
    let mut embed_cols = Vec::with_capacity(d);
    for e_idx in 0..d {
        embed_cols.push(tape.slice_cols(embed, e_idx, 1)?);
    }

    let mut out = Vec::with_capacity(x.len());
    for &x_t in x {
        if tape.value(x_t).shape() != [n, d_in] {
            return Err(Error::Shape {
                op: "apgcn",
                detail: format!(
                    "signal slice {:?}, expected [{n}, {d_in}]",
                    tape.value(x_t).shape()
                ),
            });
        }
        // diffused = [x, T1 x, T2 x, ...] laid out k-major along columns
        let mut diffused = Vec::with_capacity(k);
        diffused.push(x_t);
        for &term in &terms[1..] {
            diffused.push(tape.matmul(term, x_t)?);
        }
        let stacked = tape.concat_cols(&diffused)?;

        let mut acc = bias_term;
        for e_idx in 0..d {
            let z = tape.matmul(stacked, w_blocks[e_idx])?;
            let weighted = tape.scale_rows(z, embed_cols[e_idx])?;
            acc = tape.add(acc, weighted)?;
        }
        out.push(acc);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::bind_all;
    use rand::SeedableRng;

    fn setup(
        n: usize,
        d: usize,
        k: usize,
        d_in: usize,
        d_out: usize,
        seed: u64,
    ) -> (NodeAdaptiveWeights, ParameterStore) {
        let w = NodeAdaptiveWeights::new("gcn", d, k, d_in, d_out);
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        w.register_params(&mut store, &mut rng).unwrap();
        let _ = n;
        (w, store)
    }

    fn uniform_graph_terms(tape: &mut Tape, n: usize, k: usize) -> Vec<Var> {
        let l = tape
            .leaf(DenseArray::filled(&[n, n], 1.0 / n as f64))
            .unwrap();
        chebyshev_terms_for_test(tape, l, k)
    }

    fn chebyshev_terms_for_test(tape: &mut Tape, l: Var, k: usize) -> Vec<Var> {
        crate::graphgen::chebyshev_stack(tape, l, k).unwrap()
    }

    #[test]
    fn zero_pools_give_zero_output() {
        let (w, mut store) = setup(3, 2, 2, 2, 2, 5);
        let shape = store.get("gcn.weight_pool").unwrap().value.shape().to_vec();
        store
            .set_value("gcn.weight_pool", DenseArray::zeros(&shape))
            .unwrap();
        let mut tape = Tape::new();
        let binds = bind_all(&store, &mut tape).unwrap();
        let terms = uniform_graph_terms(&mut tape, 3, 2);
        let embed = tape
            .leaf(DenseArray::filled(&[3, 2], 0.7))
            .unwrap();
        let x = tape.leaf(DenseArray::filled(&[3, 2], 1.3)).unwrap();
        let out = apgcn(&mut tape, &binds, &w, &terms, embed, &[x]).unwrap();
        assert!(tape.value(out[0]).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_signal_leaves_bias_only() {
        let (w, mut store) = setup(3, 2, 2, 2, 2, 6);
        let bias = DenseArray::from_rows(&[vec![0.5, -1.0], vec![2.0, 0.25]]).unwrap();
        store.set_value("gcn.bias_pool", bias.clone()).unwrap();
        let mut tape = Tape::new();
        let binds = bind_all(&store, &mut tape).unwrap();
        let terms = uniform_graph_terms(&mut tape, 3, 2);
        let embed_rows = [vec![1.0, 2.0], vec![0.0, 1.0], vec![-1.0, 0.5]];
        let embed = tape
            .leaf(DenseArray::from_rows(&embed_rows).unwrap())
            .unwrap();
        let x = tape.leaf(DenseArray::zeros(&[3, 2])).unwrap();
        let out = apgcn(&mut tape, &binds, &w, &terms, embed, &[x, x]).unwrap();
        for &slice in &out {
            let v = tape.value(slice);
            for node in 0..3 {
                for o in 0..2 {
                    let expect: f64 = (0..2)
                        .map(|e| embed_rows[node][e] * bias.at2(e, o))
                        .sum();
                    assert!((v.at2(node, o) - expect).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn non_identity_first_term_rejected() {
        let (w, store) = setup(2, 1, 2, 1, 1, 7);
        let mut tape = Tape::new();
        let binds = bind_all(&store, &mut tape).unwrap();
        let bad = tape.leaf(DenseArray::filled(&[2, 2], 0.5)).unwrap();
        let terms = vec![bad, bad];
        let embed = tape.leaf(DenseArray::filled(&[2, 1], 1.0)).unwrap();
        let x = tape.leaf(DenseArray::filled(&[2, 1], 1.0)).unwrap();
        let err = apgcn(&mut tape, &binds, &w, &terms, embed, &[x]);
        assert!(err.is_err());
    }

    #[test]
    fn linear_in_signal_when_bias_zero() {
        let (w, store) = setup(3, 2, 2, 2, 2, 8);
        let mut tape = Tape::new();
        let binds = bind_all(&store, &mut tape).unwrap();
        let terms = uniform_graph_terms(&mut tape, 3, 2);
        let embed = tape
            .leaf(DenseArray::from_rows(&[
                vec![0.3, -0.2],
                vec![1.0, 0.5],
                vec![-0.7, 0.9],
            ])
            .unwrap())
            .unwrap();
        let x1 = tape
            .leaf(DenseArray::from_rows(&[
                vec![1.0, 2.0],
                vec![-1.0, 0.5],
                vec![0.25, -2.0],
            ])
            .unwrap())
            .unwrap();
        let x2 = tape
            .leaf(DenseArray::from_rows(&[
                vec![0.5, -1.5],
                vec![2.0, 1.0],
                vec![-0.75, 0.1],
            ])
            .unwrap())
            .unwrap();
        let alpha = 2.5;
        let ax1 = tape.scale(x1, alpha).unwrap();
        let combo = tape.add(ax1, x2).unwrap();

        let out_combo = apgcn(&mut tape, &binds, &w, &terms, embed, &[combo]).unwrap();
        let out_x1 = apgcn(&mut tape, &binds, &w, &terms, embed, &[x1]).unwrap();
        let out_x2 = apgcn(&mut tape, &binds, &w, &terms, embed, &[x2]).unwrap();
        let v_combo = tape.value(out_combo[0]).clone();
        let v1 = tape.value(out_x1[0]).clone();
        let v2 = tape.value(out_x2[0]).clone();
        for i in 0..v_combo.numel() {
            let lin = alpha * v1.data()[i] + v2.data()[i];
            assert!((v_combo.data()[i] - lin).abs() < 1e-8);
        }
    }
}
