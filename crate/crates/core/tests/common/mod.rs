//! Scalar-loop reference implementations used as oracles.
//!
//! Everything here is written with plain nested vectors and explicit loops,
//! independent of the tape and of the production kernels, so agreement is
//! evidence of correctness rather than shared code paths.

#![allow(dead_code)]

use msstrn_core::tensor::DenseArray;

pub type Mat = Vec<Vec<f64>>;

pub fn to_mat(a: &DenseArray) -> Mat {
    assert!(a.is_matrix(), "to_mat on {:?}", a.shape());
    let (r, c) = (a.rows(), a.cols());
    (0..r)
        .map(|i| (0..c).map(|j| a.at2(i, j)).collect())
        .collect()
}

pub fn to_vec(a: &DenseArray) -> Vec<f64> {
    a.data().to_vec()
}

pub fn from_mat(m: &Mat) -> DenseArray {
    DenseArray::from_rows(m).unwrap()
}

/// [d][k][d_in][d_out] weight pool from its flat row-major layout.
pub fn to_pool4(a: &DenseArray) -> Vec<Vec<Mat>> {
    let s = a.shape();
    assert_eq!(s.len(), 4);
    let (d, k, din, dout) = (s[0], s[1], s[2], s[3]);
    let data = a.data();
    let mut out = vec![vec![vec![vec![0.0; dout]; din]; k]; d];
    let mut idx = 0;
    for e in 0..d {
        for kk in 0..k {
            for i in 0..din {
                for o in 0..dout {
                    out[e][kk][i][o] = data[idx];
                    idx += 1;
                }
            }
        }
    }
    out
}

pub fn zeros(r: usize, c: usize) -> Mat {
    vec![vec![0.0; c]; r]
}

pub fn identity(n: usize) -> Mat {
    let mut m = zeros(n, n);
    for (i, row) in m.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    m
}

pub fn matmul_ref(a: &Mat, b: &Mat) -> Mat {
    let (m, k, n) = (a.len(), b.len(), b[0].len());
    let mut out = zeros(m, n);
    for i in 0..m {
        assert_eq!(a[i].len(), k);
        for j in 0..n {
            let mut s = 0.0;
            for kk in 0..k {
                s += a[i][kk] * b[kk][j];
            }
            out[i][j] = s;
        }
    }
    out
}

pub fn transpose_ref(a: &Mat) -> Mat {
    let (r, c) = (a.len(), a[0].len());
    let mut out = zeros(c, r);
    for i in 0..r {
        for j in 0..c {
            out[j][i] = a[i][j];
        }
    }
    out
}

pub fn mat_scale(a: &Mat, s: f64) -> Mat {
    a.iter()
        .map(|row| row.iter().map(|v| v * s).collect())
        .collect()
}

pub fn mat_sub(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(ra, rb)| ra.iter().zip(rb).map(|(x, y)| x - y).collect())
        .collect()
}

pub fn mat_add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(ra, rb)| ra.iter().zip(rb).map(|(x, y)| x + y).collect())
        .collect()
}

pub fn mat_hadamard(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(ra, rb)| ra.iter().zip(rb).map(|(x, y)| x * y).collect())
        .collect()
}

pub fn mat_map(a: &Mat, f: impl Fn(f64) -> f64) -> Mat {
    a.iter()
        .map(|row| row.iter().map(|&v| f(v)).collect())
        .collect()
}

pub fn sigmoid_ref(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Direct exp/normalize softmax (no max subtraction).
pub fn softmax_rows_ref(m: &Mat) -> Mat {
    m.iter()
        .map(|row| {
            let exps: Vec<f64> = row.iter().map(|v| v.exp()).collect();
            let sum: f64 = exps.iter().sum();
            exps.iter().map(|e| e / sum).collect()
        })
        .collect()
}

/// Direct layer normalization of one vector (population variance).
pub fn layer_norm_ref(v: &[f64], gain: &[f64], bias: &[f64], eps: f64) -> Vec<f64> {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + eps).sqrt();
    v.iter()
        .enumerate()
        .map(|(j, x)| gain[j] * (x - mean) * inv + bias[j])
        .collect()
}

/// Composition oracle for the position graphs: add the time row to every
/// node row, layer-normalize each row, softmax the similarity product.
pub fn laplacian_ref(
    node_embed: &Mat,
    time_row: Option<&[f64]>,
    gain: &[f64],
    bias: &[f64],
    eps: f64,
) -> Mat {
    let normed: Mat = node_embed
        .iter()
        .map(|row| {
            let summed: Vec<f64> = match time_row {
                Some(t) => row.iter().zip(t).map(|(a, b)| a + b).collect(),
                None => row.clone(),
            };
            layer_norm_ref(&summed, gain, bias, eps)
        })
        .collect();
    let sim = matmul_ref(&normed, &transpose_ref(&normed));
    softmax_rows_ref(&sim)
}

/// Explicit Chebyshev polynomials: T2 = 2 L^2 - I, T3 = 4 L^3 - 3 L.
pub fn cheb2_explicit(l: &Mat) -> Mat {
    let l2 = matmul_ref(l, l);
    mat_sub(&mat_scale(&l2, 2.0), &identity(l.len()))
}

pub fn cheb3_explicit(l: &Mat) -> Mat {
    let l3 = matmul_ref(&matmul_ref(l, l), l);
    mat_sub(&mat_scale(&l3, 4.0), &mat_scale(l, 3.0))
}

/// Brute-force node-adaptive graph convolution; x is time-major
/// (one n x d_in matrix per slice), all slices share `terms` and `embed`.
pub fn apgcn_ref(
    x: &[Mat],
    terms: &[Mat],
    embed: &Mat,
    weight_pool: &[Vec<Mat>],
    bias_pool: &Mat,
) -> Vec<Mat> {
    let n = embed.len();
    let d = embed[0].len();
    let k = terms.len();
    let d_in = x[0][0].len();
    let d_out = bias_pool[0].len();
    x.iter()
        .map(|x_t| {
            let mut out = zeros(n, d_out);
            for node in 0..n {
                for o in 0..d_out {
                    let mut acc = 0.0;
                    // bias: sum_e embed[node][e] * bias_pool[e][o]
                    for e in 0..d {
                        acc += embed[node][e] * bias_pool[e][o];
                    }
                    // sum_k (terms[k] x)[node] . theta[node][k]
                    for kk in 0..k {
                        for i in 0..d_in {
                            // diffused value (terms[kk] . x_t)[node][i]
                            let mut diff = 0.0;
                            for other in 0..n {
                                diff += terms[kk][node][other] * x_t[other][i];
                            }
                            let mut theta = 0.0;
                            for e in 0..d {
                                theta += embed[node][e] * weight_pool[e][kk][i][o];
                            }
                            acc += diff * theta;
                        }
                    }
                    out[node][o] = acc;
                }
            }
            out
        })
        .collect()
}

/// Brute-force per-node scaled dot-product attention; q/k/v hold one
/// s x d_h matrix per node.
pub fn temporal_attention_ref(q: &[Mat], k: &[Mat], v: &[Mat]) -> Vec<Mat> {
    let d_h = q[0][0].len() as f64;
    q.iter()
        .zip(k)
        .zip(v)
        .map(|((qn, kn), vn)| {
            let logits = mat_scale(&matmul_ref(qn, &transpose_ref(kn)), 1.0 / d_h.sqrt());
            let scores = softmax_rows_ref(&logits);
            matmul_ref(&scores, vn)
        })
        .collect()
}

pub struct StsAttRefParams<'a> {
    pub w_query: &'a Mat,
    pub w_key: &'a Mat,
    pub w_out: &'a Mat,
    pub heads: usize,
    /// graph-convolution value path (weight pool, bias pool); `None` means a
    /// plain projection with `w_value`
    pub gcn: Option<(&'a [Vec<Mat>], &'a Mat)>,
    pub w_value: Option<&'a Mat>,
}

fn col_block(m: &Mat, start: usize, len: usize) -> Mat {
    m.iter().map(|row| row[start..start + len].to_vec()).collect()
}

/// Composition oracle for the synchronous attention block, time-major in
/// and out.
pub fn stsatt_ref(
    x: &[Mat],
    terms: &[Mat],
    embed: &Mat,
    p: &StsAttRefParams,
) -> Vec<Mat> {
    let s = x.len();
    let n = x[0].len();
    let d_out = p.w_out.len();
    let d_h = d_out / p.heads;

    let v_time: Vec<Mat> = match (p.gcn, p.w_value) {
        (Some((pool, bias)), None) => apgcn_ref(x, terms, embed, pool, bias),
        (None, Some(w_v)) => x.iter().map(|x_t| matmul_ref(x_t, w_v)).collect(),
        _ => panic!("exactly one value path"),
    };

    // node-major gathers
    let node_mat = |slices: &[Mat], node: usize| -> Mat {
        slices.iter().map(|sl| sl[node].clone()).collect()
    };

    let mut projected: Vec<Mat> = Vec::with_capacity(n);
    for node in 0..n {
        let x_node = node_mat(x, node);
        let v_node = node_mat(&v_time, node);
        let q_full = matmul_ref(&x_node, p.w_query);
        let k_full = matmul_ref(&x_node, p.w_key);
        let mut heads: Vec<Mat> = Vec::with_capacity(p.heads);
        for h in 0..p.heads {
            let q = col_block(&q_full, h * d_h, d_h);
            let k = col_block(&k_full, h * d_h, d_h);
            let v = col_block(&v_node, h * d_h, d_h);
            heads.push(temporal_attention_ref(&[q], &[k], &[v]).remove(0));
        }
        let mut concat = zeros(s, d_out);
        for (h, head) in heads.iter().enumerate() {
            for t in 0..s {
                for j in 0..d_h {
                    concat[t][h * d_h + j] = head[t][j];
                }
            }
        }
        projected.push(matmul_ref(&concat, p.w_out));
    }

    (0..s)
        .map(|t| (0..n).map(|node| projected[node][t].clone()).collect())
        .collect()
}

/// One gate transform evaluated by oracle code.
pub enum GateRef<'a> {
    GraphConv {
        pool: &'a [Vec<Mat>],
        bias: &'a Mat,
    },
    Attention(StsAttRefParams<'a>),
}

impl GateRef<'_> {
    pub fn apply(&self, x: &[Mat], terms: &[Mat], embed: &Mat) -> Vec<Mat> {
        match self {
            GateRef::GraphConv { pool, bias } => apgcn_ref(x, terms, embed, pool, bias),
            GateRef::Attention(p) => stsatt_ref(x, terms, embed, p),
        }
    }
}

fn concat_cols_ref(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(ra, rb)| {
            let mut row = ra.clone();
            row.extend_from_slice(rb);
            row
        })
        .collect()
}

/// Composition oracle for one GRU cell application over a window (or a
/// single slice).
pub fn gru_cell_ref(
    x: &[Mat],
    h_prev: &[Mat],
    terms: &[Mat],
    embed: &Mat,
    update: &GateRef,
    reset: &GateRef,
    candidate: &GateRef,
) -> Vec<Mat> {
    let joined: Vec<Mat> = x
        .iter()
        .zip(h_prev)
        .map(|(x_t, h_t)| concat_cols_ref(x_t, h_t))
        .collect();
    let z: Vec<Mat> = update
        .apply(&joined, terms, embed)
        .iter()
        .map(|m| mat_map(m, sigmoid_ref))
        .collect();
    let r: Vec<Mat> = reset
        .apply(&joined, terms, embed)
        .iter()
        .map(|m| mat_map(m, sigmoid_ref))
        .collect();
    let joined_reset: Vec<Mat> = x
        .iter()
        .zip(h_prev)
        .zip(&r)
        .map(|((x_t, h_t), r_t)| concat_cols_ref(x_t, &mat_hadamard(r_t, h_t)))
        .collect();
    let cand: Vec<Mat> = candidate
        .apply(&joined_reset, terms, embed)
        .iter()
        .map(|m| mat_map(m, f64::tanh))
        .collect();
    z.iter()
        .zip(h_prev)
        .zip(&cand)
        .map(|((z_t, h_t), c_t)| {
            let keep = mat_hadamard(z_t, h_t);
            let take = mat_hadamard(&mat_map(z_t, |v| 1.0 - v), c_t);
            mat_add(&keep, &take)
        })
        .collect()
}

/// Output head oracle: per-row layer norm then shared linear map.
pub fn head_ref(h_last: &Mat, gain: &[f64], bias: &[f64], w: &Mat, b: &[f64], eps: f64) -> Mat {
    h_last
        .iter()
        .map(|row| {
            let normed = layer_norm_ref(row, gain, bias, eps);
            let mut out = vec![0.0; b.len()];
            for (o, out_v) in out.iter_mut().enumerate() {
                let mut s = b[o];
                for (j, n) in normed.iter().enumerate() {
                    s += n * w[j][o];
                }
                *out_v = s;
            }
            out
        })
        .collect()
}

pub fn max_abs_diff_mat(a: &Mat, b: &Mat) -> f64 {
    let mut worst = 0.0f64;
    for (ra, rb) in a.iter().zip(b) {
        for (x, y) in ra.iter().zip(rb) {
            worst = worst.max((x - y).abs());
        }
    }
    worst
}

/// Deterministic pseudo-random matrix for oracle-side inputs.
pub fn seeded_mat(rows: usize, cols: usize, seed: u64, scale: f64) -> Mat {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.gen_range(-scale..scale)).collect())
        .collect()
}
