//! Reverse-mode differentiation over a linear operation tape.
//!
//! A `Tape` records every primitive applied to tracked arrays during a
//! forward pass and replays the record once, in reverse, to accumulate
//! gradients. One tape serves one forward/backward pass; concurrent passes
//! use independent tapes.
//!
//! Every primitive checks its operand shapes and the finiteness of its
//! output — a NaN or infinity is surfaced as an error immediately rather
//! than propagated. There is no implicit broadcasting: the only cross-shape
//! operations are the explicit ones below (`add_row`, `scale_rows`,
//! `gather_rows`, ...), each with a stated rule.

use crate::error::{Error, Result};
use crate::tensor::DenseArray;

/// Handle to a value recorded on a tape. Only meaningful for the tape that
/// produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// out = mul * x + add (elementwise, scalar coefficients); only the
    /// multiplier matters for the backward pass
    Affine { x: Var, mul: f64 },
    Matmul(Var, Var),
    Transpose(Var),
    Sigmoid(Var),
    Tanh(Var),
    /// |x| with subgradient 0 at 0
    Abs(Var),
    SoftmaxRows(Var),
    /// Per-row normalization over the column axis with learnable gain/bias.
    LayerNormRows { x: Var, gain: Var, bias: Var, eps: f64 },
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize, len: usize },
    /// Contiguous sub-range of the flat buffer, reinterpreted with a new shape.
    SliceChunk { x: Var, offset: usize },
    /// Row r of the output is row `picks[r].1` of matrix `picks[r].0`.
    GatherRows(Vec<(Var, usize)>),
    /// out[r, c] = m[r, c] + row[c]
    AddRow { m: Var, row: Var },
    /// out[r, c] = m[r, c] * scale[r]
    ScaleRows { m: Var, scale: Var },
    SumAll(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Affine { .. } => "affine",
            Op::Matmul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Abs(..) => "abs",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::LayerNormRows { .. } => "layer_norm_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceCols { .. } => "slice_cols",
            Op::SliceChunk { .. } => "slice_chunk",
            Op::GatherRows(..) => "gather_rows",
            Op::AddRow { .. } => "add_row",
            Op::ScaleRows { .. } => "scale_rows",
            Op::SumAll(..) => "sum_all",
        }
    }
}

struct Node {
    value: DenseArray,
    op: Op,
}

pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &DenseArray {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` target with respect to `v`, if `v`
    /// participated in that computation.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, op: Op, value: DenseArray) -> Result<Var> {
        value.check_finite(op.name())?;
        let id = self.nodes.len();
        self.nodes.push(Node { value, op });
        Ok(Var(id))
    }

    fn shape_err(op: &'static str, detail: String) -> Error {
        Error::Shape { op, detail }
    }

    // ── forward primitives ──────────────────────────────────────────────

    /// Records an input or parameter value. Tracked like any other node.
    pub fn leaf(&mut self, value: DenseArray) -> Result<Var> {
        self.push(Op::Leaf, value)
    }

    fn binary_same_shape(&mut self, op_name: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Self::shape_err(op_name, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("add", a, b)?;
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        self.push(Op::Add(a, b), DenseArray::new(shape, data)?)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("sub", a, b)?;
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        self.push(Op::Sub(a, b), DenseArray::new(shape, data)?)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("mul", a, b)?;
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        self.push(Op::Mul(a, b), DenseArray::new(shape, data)?)
    }

    pub fn affine(&mut self, x: Var, mul: f64, add: f64) -> Result<Var> {
        let data: Vec<f64> = self.value(x).data().iter().map(|v| mul * v + add).collect();
        let shape = self.value(x).shape().to_vec();
        self.push(Op::Affine { x, mul }, DenseArray::new(shape, data)?)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.affine(x, c, 0.0)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if !va.is_matrix() || !vb.is_matrix() || va.cols() != vb.rows() {
            return Err(Self::shape_err(
                "matmul",
                format!("{:?} x {:?}", va.shape(), vb.shape()),
            ));
        }
        let (m, k, n) = (va.rows(), va.cols(), vb.cols());
        let mut out = vec![0.0; m * n];
        let (da, db) = (va.data(), vb.data());
        for i in 0..m {
            for kk in 0..k {
                let aik = da[i * k + kk];
                if aik == 0.0 {
                    continue;
                }
                let brow = &db[kk * n..(kk + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += aik * brow[j];
                }
            }
        }
        self.push(Op::Matmul(a, b), DenseArray::new(vec![m, n], out)?)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if !v.is_matrix() {
            return Err(Self::shape_err("transpose", format!("{:?}", v.shape())));
        }
        let (r, c) = (v.rows(), v.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v.data()[i * c + j];
            }
        }
        self.push(Op::Transpose(x), DenseArray::new(vec![c, r], out)?)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let data: Vec<f64> = self.value(x).data().iter().map(|&v| sigmoid(v)).collect();
        let shape = self.value(x).shape().to_vec();
        self.push(Op::Sigmoid(x), DenseArray::new(shape, data)?)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let data: Vec<f64> = self.value(x).data().iter().map(|v| v.tanh()).collect();
        let shape = self.value(x).shape().to_vec();
        self.push(Op::Tanh(x), DenseArray::new(shape, data)?)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let data: Vec<f64> = self.value(x).data().iter().map(|v| v.abs()).collect();
        let shape = self.value(x).shape().to_vec();
        self.push(Op::Abs(x), DenseArray::new(shape, data)?)
    }

    /// Row-wise softmax with max-subtraction for stability. Input must be
    /// 2-D and finite; each output row is nonnegative and sums to 1.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if !v.is_matrix() {
            return Err(Self::shape_err("softmax_rows", format!("{:?}", v.shape())));
        }
        let (r, c) = (v.rows(), v.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &v.data()[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..c {
                let e = (row[j] - max).exp();
                out[i * c + j] = e;
                sum += e;
            }
            for j in 0..c {
                out[i * c + j] /= sum;
            }
        }
        self.push(Op::SoftmaxRows(x), DenseArray::new(vec![r, c], out)?)
    }

    /// Normalizes each row of `x` over its columns (population variance),
    /// then applies `gain` and `bias` (length = column count).
    pub fn layer_norm_rows(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let v = self.value(x);
        if !v.is_matrix() {
            return Err(Self::shape_err(
                "layer_norm_rows",
                format!("input {:?}", v.shape()),
            ));
        }
        let (r, c) = (v.rows(), v.cols());
        if self.value(gain).numel() != c || self.value(bias).numel() != c {
            return Err(Self::shape_err(
                "layer_norm_rows",
                format!(
                    "gain {:?} / bias {:?} vs {c} columns",
                    self.value(gain).shape(),
                    self.value(bias).shape()
                ),
            ));
        }
        let mut out = vec![0.0; r * c];
        {
            let xd = self.value(x).data();
            let gd = self.value(gain).data();
            let bd = self.value(bias).data();
            for i in 0..r {
                let row = &xd[i * c..(i + 1) * c];
                let mean = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                let inv = 1.0 / (var + eps).sqrt();
                for j in 0..c {
                    out[i * c + j] = gd[j] * (row[j] - mean) * inv + bd[j];
                }
            }
        }
        self.push(
            Op::LayerNormRows { x, gain, bias, eps },
            DenseArray::new(vec![r, c], out)?,
        )
    }

    /// Concatenates 2-D parts left to right; all must share a row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Self::shape_err("concat_cols", "no parts".into()));
        }
        let r = self.value(parts[0]).rows();
        let mut total = 0usize;
        for &p in parts {
            let v = self.value(p);
            if !v.is_matrix() || v.rows() != r {
                return Err(Self::shape_err(
                    "concat_cols",
                    format!("{:?} vs {r} rows", v.shape()),
                ));
            }
            total += v.cols();
        }
        let mut out = vec![0.0; r * total];
        let mut col = 0usize;
        for &p in parts {
            let v = self.value(p);
            let c = v.cols();
            for i in 0..r {
                out[i * total + col..i * total + col + c]
                    .copy_from_slice(&v.data()[i * c..(i + 1) * c]);
            }
            col += c;
        }
        self.push(
            Op::ConcatCols(parts.to_vec()),
            DenseArray::new(vec![r, total], out)?,
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x);
        if !v.is_matrix() || start + len > v.cols() || len == 0 {
            return Err(Self::shape_err(
                "slice_cols",
                format!("cols {start}..{} of {:?}", start + len, v.shape()),
            ));
        }
        let (r, c) = (v.rows(), v.cols());
        let mut out = vec![0.0; r * len];
        for i in 0..r {
            out[i * len..(i + 1) * len].copy_from_slice(&v.data()[i * c + start..i * c + start + len]);
        }
        self.push(
            Op::SliceCols { x, start, len },
            DenseArray::new(vec![r, len], out)?,
        )
    }

    /// Views a contiguous range of the flat buffer as a new shape.
    pub fn slice_chunk(&mut self, x: Var, offset: usize, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        let v = self.value(x);
        if offset + numel > v.numel() {
            return Err(Self::shape_err(
                "slice_chunk",
                format!(
                    "range {offset}..{} exceeds {} elements",
                    offset + numel,
                    v.numel()
                ),
            ));
        }
        let data = v.data()[offset..offset + numel].to_vec();
        self.push(
            Op::SliceChunk { x, offset },
            DenseArray::new(shape.to_vec(), data)?,
        )
    }

    /// Row r of the result is row `picks[r].1` of matrix `picks[r].0`.
    /// All sources must be 2-D with the same column count.
    pub fn gather_rows(&mut self, picks: &[(Var, usize)]) -> Result<Var> {
        if picks.is_empty() {
            return Err(Self::shape_err("gather_rows", "no picks".into()));
        }
        let c = self.value(picks[0].0).cols();
        let mut out = vec![0.0; picks.len() * c];
        for (r, &(src, row)) in picks.iter().enumerate() {
            let v = self.value(src);
            if !v.is_matrix() || v.cols() != c || row >= v.rows() {
                return Err(Self::shape_err(
                    "gather_rows",
                    format!("row {row} of {:?}, expected {c} cols", v.shape()),
                ));
            }
            out[r * c..(r + 1) * c].copy_from_slice(&v.data()[row * c..(row + 1) * c]);
        }
        self.push(
            Op::GatherRows(picks.to_vec()),
            DenseArray::new(vec![picks.len(), c], out)?,
        )
    }

    /// Adds a length-C row vector to every row of an R×C matrix.
    pub fn add_row(&mut self, m: Var, row: Var) -> Result<Var> {
        let v = self.value(m);
        if !v.is_matrix() {
            return Err(Self::shape_err("add_row", format!("{:?}", v.shape())));
        }
        let (r, c) = (v.rows(), v.cols());
        if self.value(row).numel() != c {
            return Err(Self::shape_err(
                "add_row",
                format!("row {:?} vs {c} columns", self.value(row).shape()),
            ));
        }
        let mut out = vec![0.0; r * c];
        {
            let md = self.value(m).data();
            let rd = self.value(row).data();
            for i in 0..r {
                for j in 0..c {
                    out[i * c + j] = md[i * c + j] + rd[j];
                }
            }
        }
        self.push(Op::AddRow { m, row }, DenseArray::new(vec![r, c], out)?)
    }

    /// Multiplies row r of an R×C matrix by `scale[r]` (scale has R entries).
    pub fn scale_rows(&mut self, m: Var, scale: Var) -> Result<Var> {
        let v = self.value(m);
        if !v.is_matrix() {
            return Err(Self::shape_err("scale_rows", format!("{:?}", v.shape())));
        }
        let (r, c) = (v.rows(), v.cols());
        if self.value(scale).numel() != r {
            return Err(Self::shape_err(
                "scale_rows",
                format!("scale {:?} vs {r} rows", self.value(scale).shape()),
            ));
        }
        let mut out = vec![0.0; r * c];
        {
            let md = self.value(m).data();
            let sd = self.value(scale).data();
            for i in 0..r {
                for j in 0..c {
                    out[i * c + j] = md[i * c + j] * sd[i];
                }
            }
        }
        self.push(Op::ScaleRows { m, scale }, DenseArray::new(vec![r, c], out)?)
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).data().iter().sum();
        self.push(Op::SumAll(x), DenseArray::scalar(s))
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Accumulates gradients of a scalar output into every node that feeds
    /// it, traversing the tape once in reverse. `seed` is the upstream
    /// gradient of `out` (1.0 for a plain derivative).
    pub fn backward_seeded(&mut self, out: Var, seed: f64) -> Result<()> {
        if self.value(out).numel() != 1 {
            return Err(Self::shape_err(
                "backward",
                format!("target must be scalar, got {:?}", self.value(out).shape()),
            ));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[out.0] = Some(vec![seed]);

        for id in (0..=out.0).rev() {
            let Some(g) = self.grads[id].take() else {
                continue;
            };
            self.propagate(id, &g)?;
            self.grads[id] = Some(g);
        }
        Ok(())
    }

    pub fn backward(&mut self, out: Var) -> Result<()> {
        self.backward_seeded(out, 1.0)
    }

    fn grad_slot(&mut self, v: Var) -> &mut Vec<f64> {
        let n = self.nodes[v.0].value.numel();
        self.grads[v.0].get_or_insert_with(|| vec![0.0; n])
    }

    fn propagate(&mut self, id: usize, g: &[f64]) -> Result<()> {
        // Ops only reference earlier vars, so mutating grads of inputs never
        // aliases the grad buffer taken out for `id`.
        let op = self.nodes[id].op.clone();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                add_into(self.grad_slot(a), g, 1.0);
                add_into(self.grad_slot(b), g, 1.0);
            }
            Op::Sub(a, b) => {
                add_into(self.grad_slot(a), g, 1.0);
                add_into(self.grad_slot(b), g, -1.0);
            }
            Op::Mul(a, b) => {
                let vb = self.nodes[b.0].value.data().to_vec();
                let va = self.nodes[a.0].value.data().to_vec();
                mul_add_into(self.grad_slot(a), g, &vb);
                mul_add_into(self.grad_slot(b), g, &va);
            }
            Op::Affine { x, mul } => {
                add_into(self.grad_slot(x), g, mul);
            }
            Op::Matmul(a, b) => {
                let (m, k) = (self.nodes[a.0].value.rows(), self.nodes[a.0].value.cols());
                let n = self.nodes[b.0].value.cols();
                let bd = self.nodes[b.0].value.data().to_vec();
                let ad = self.nodes[a.0].value.data().to_vec();
                {
                    // dA[i,kk] += sum_j g[i,j] * B[kk,j]
                    let ga = self.grad_slot(a);
                    for i in 0..m {
                        for kk in 0..k {
                            let mut s = 0.0;
                            let grow = &g[i * n..(i + 1) * n];
                            let brow = &bd[kk * n..(kk + 1) * n];
                            for j in 0..n {
                                s += grow[j] * brow[j];
                            }
                            ga[i * k + kk] += s;
                        }
                    }
                }
                {
                    // dB[kk,j] += sum_i A[i,kk] * g[i,j]
                    let gb = self.grad_slot(b);
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for kk in 0..k {
                            let aik = ad[i * k + kk];
                            if aik == 0.0 {
                                continue;
                            }
                            let brow = &mut gb[kk * n..(kk + 1) * n];
                            for j in 0..n {
                                brow[j] += aik * grow[j];
                            }
                        }
                    }
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (self.nodes[x.0].value.rows(), self.nodes[x.0].value.cols());
                let gx = self.grad_slot(x);
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] += g[j * r + i];
                    }
                }
            }
            Op::Sigmoid(x) => {
                let y = self.nodes[id].value.data().to_vec();
                let gx = self.grad_slot(x);
                for i in 0..y.len() {
                    gx[i] += g[i] * y[i] * (1.0 - y[i]);
                }
            }
            Op::Tanh(x) => {
                let y = self.nodes[id].value.data().to_vec();
                let gx = self.grad_slot(x);
                for i in 0..y.len() {
                    gx[i] += g[i] * (1.0 - y[i] * y[i]);
                }
            }
            Op::Abs(x) => {
                let xv = self.nodes[x.0].value.data().to_vec();
                let gx = self.grad_slot(x);
                for i in 0..xv.len() {
                    // subgradient at 0 defined as 0
                    let s = if xv[i] > 0.0 {
                        1.0
                    } else if xv[i] < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    gx[i] += g[i] * s;
                }
            }
            Op::SoftmaxRows(x) => {
                let y = self.nodes[id].value.clone();
                let (r, c) = (y.rows(), y.cols());
                let gx = self.grad_slot(x);
                for i in 0..r {
                    let yrow = &y.data()[i * c..(i + 1) * c];
                    let grow = &g[i * c..(i + 1) * c];
                    let dot: f64 = yrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        gx[i * c + j] += yrow[j] * (grow[j] - dot);
                    }
                }
            }
            Op::LayerNormRows { x, gain, bias, eps } => {
                let xv = self.nodes[x.0].value.clone();
                let gd = self.nodes[gain.0].value.data().to_vec();
                let (r, c) = (xv.rows(), xv.cols());
                // recompute per-row statistics
                let mut xhat = vec![0.0; r * c];
                let mut inv = vec![0.0; r];
                for i in 0..r {
                    let row = &xv.data()[i * c..(i + 1) * c];
                    let mean = row.iter().sum::<f64>() / c as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                    inv[i] = 1.0 / (var + eps).sqrt();
                    for j in 0..c {
                        xhat[i * c + j] = (row[j] - mean) * inv[i];
                    }
                }
                {
                    let ggain = self.grad_slot(gain);
                    for i in 0..r {
                        for j in 0..c {
                            ggain[j] += g[i * c + j] * xhat[i * c + j];
                        }
                    }
                }
                {
                    let gbias = self.grad_slot(bias);
                    for i in 0..r {
                        for j in 0..c {
                            gbias[j] += g[i * c + j];
                        }
                    }
                }
                {
                    let gx = self.grad_slot(x);
                    for i in 0..r {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..c {
                            let gh = g[i * c + j] * gd[j];
                            m1 += gh;
                            m2 += gh * xhat[i * c + j];
                        }
                        m1 /= c as f64;
                        m2 /= c as f64;
                        for j in 0..c {
                            let gh = g[i * c + j] * gd[j];
                            gx[i * c + j] += (gh - m1 - xhat[i * c + j] * m2) * inv[i];
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let r = self.nodes[id].value.rows();
                let total = self.nodes[id].value.cols();
                let mut col = 0usize;
                for p in parts {
                    let c = self.nodes[p.0].value.cols();
                    let gp = self.grad_slot(p);
                    for i in 0..r {
                        for j in 0..c {
                            gp[i * c + j] += g[i * total + col + j];
                        }
                    }
                    col += c;
                }
            }
            Op::SliceCols { x, start, len } => {
                let c = self.nodes[x.0].value.cols();
                let r = self.nodes[x.0].value.rows();
                let gx = self.grad_slot(x);
                for i in 0..r {
                    for j in 0..len {
                        gx[i * c + start + j] += g[i * len + j];
                    }
                }
            }
            Op::SliceChunk { x, offset } => {
                let gx = self.grad_slot(x);
                for (i, gv) in g.iter().enumerate() {
                    gx[offset + i] += gv;
                }
            }
            Op::GatherRows(picks) => {
                let c = self.nodes[id].value.cols();
                for (r, (src, row)) in picks.into_iter().enumerate() {
                    let gs = self.grad_slot(src);
                    for j in 0..c {
                        gs[row * c + j] += g[r * c + j];
                    }
                }
            }
            Op::AddRow { m, row } => {
                let (r, c) = (self.nodes[m.0].value.rows(), self.nodes[m.0].value.cols());
                add_into(self.grad_slot(m), g, 1.0);
                let grow = self.grad_slot(row);
                for i in 0..r {
                    for j in 0..c {
                        grow[j] += g[i * c + j];
                    }
                }
            }
            Op::ScaleRows { m, scale } => {
                let (r, c) = (self.nodes[m.0].value.rows(), self.nodes[m.0].value.cols());
                let sd = self.nodes[scale.0].value.data().to_vec();
                let md = self.nodes[m.0].value.data().to_vec();
                {
                    let gm = self.grad_slot(m);
                    for i in 0..r {
                        for j in 0..c {
                            gm[i * c + j] += g[i * c + j] * sd[i];
                        }
                    }
                }
                {
                    let gs = self.grad_slot(scale);
                    for i in 0..r {
                        let mut s = 0.0;
                        for j in 0..c {
                            s += g[i * c + j] * md[i * c + j];
                        }
                        gs[i] += s;
                    }
                }
            }
            Op::SumAll(x) => {
                let gx = self.grad_slot(x);
                for v in gx.iter_mut() {
                    *v += g[0];
                }
            }
        }
        Ok(())
    }
}

fn add_into(dst: &mut [f64], src: &[f64], scale: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += scale * s;
    }
}

fn mul_add_into(dst: &mut [f64], g: &[f64], other: &[f64]) {
    for i in 0..dst.len() {
        dst[i] += g[i] * other[i];
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: &[Vec<f64>]) -> DenseArray {
        DenseArray::from_rows(rows).unwrap()
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut t = Tape::new();
        let x = t.leaf(mat(&[vec![0.0, 0.0], vec![0.0, 0.0]])).unwrap();
        let y = t.softmax_rows(x).unwrap();
        assert_eq!(t.value(y).data(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn softmax_closed_form() {
        let mut t = Tape::new();
        let x = t.leaf(mat(&[vec![0.0, 3.0_f64.ln()]])).unwrap();
        let y = t.softmax_rows(x).unwrap();
        let d = t.value(y).data();
        assert!((d[0] - 0.25).abs() < 1e-12);
        assert!((d[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one_for_large_inputs() {
        let mut t = Tape::new();
        let x = t
            .leaf(mat(&[vec![1.0e4, -1.0e4, 3.0], vec![-9.9e3, 0.0, 9.9e3]]))
            .unwrap();
        let y = t.softmax_rows(x).unwrap();
        let v = t.value(y);
        for i in 0..2 {
            let s: f64 = v.data()[i * 3..(i + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(v.data()[i * 3..(i + 1) * 3].iter().all(|&e| e >= 0.0));
        }
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let mut t = Tape::new();
        assert!(t.leaf(mat(&[vec![f64::INFINITY, 0.0]])).is_err());
    }

    #[test]
    fn layer_norm_constant_vector_is_zero() {
        let mut t = Tape::new();
        let x = t.leaf(mat(&[vec![5.0, 5.0, 5.0]])).unwrap();
        let gain = t.leaf(DenseArray::filled(&[3], 1.0)).unwrap();
        let bias = t.leaf(DenseArray::zeros(&[3])).unwrap();
        let y = t.layer_norm_rows(x, gain, bias, 1e-5).unwrap();
        for v in t.value(y).data() {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_two_entry_row() {
        let mut t = Tape::new();
        let x = t.leaf(mat(&[vec![1.0, 3.0]])).unwrap();
        let gain = t.leaf(DenseArray::filled(&[2], 1.0)).unwrap();
        let bias = t.leaf(DenseArray::zeros(&[2])).unwrap();
        let y = t.layer_norm_rows(x, gain, bias, 1e-12).unwrap();
        let d = t.value(y).data();
        assert!((d[0] + 1.0).abs() < 1e-6);
        assert!((d[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_matches_reference_formula() {
        let mut t = Tape::new();
        let x = t.leaf(mat(&[vec![1.0, 2.0, 3.0]])).unwrap();
        let gain = t.leaf(DenseArray::filled(&[3], 1.0)).unwrap();
        let bias = t.leaf(DenseArray::zeros(&[3])).unwrap();
        let eps = 1e-5;
        let y = t.layer_norm_rows(x, gain, bias, eps).unwrap();
        // direct formula in double precision
        let mean = 2.0;
        let var = ((1.0f64 - 2.0).powi(2) + 0.0 + 1.0) / 3.0;
        let inv = 1.0 / (var + eps).sqrt();
        let expect = [(1.0 - mean) * inv, 0.0, (3.0 - mean) * inv];
        for (a, b) in t.value(y).data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn identity_matmul_is_exact() {
        let mut t = Tape::new();
        let a = t
            .leaf(mat(&[vec![1.25, -2.5, 3.0], vec![0.5, 7.0, -0.125]]))
            .unwrap();
        let i2 = t.leaf(DenseArray::identity(2)).unwrap();
        let i3 = t.leaf(DenseArray::identity(3)).unwrap();
        let left = t.matmul(i2, a).unwrap();
        let right = t.matmul(a, i3).unwrap();
        assert_eq!(t.value(left).data(), t.value(a).data());
        assert_eq!(t.value(right).data(), t.value(a).data());
    }

    #[test]
    fn sigmoid_tanh_ranges() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert_eq!(0.0f64.tanh(), 0.0);
        let mut t = Tape::new();
        let x = t.leaf(mat(&[vec![-15.0, -1.0, 0.0, 1.0, 15.0]])).unwrap();
        let s = t.sigmoid(x).unwrap();
        let h = t.tanh(x).unwrap();
        for &v in t.value(s).data() {
            assert!(v > 0.0 && v < 1.0);
        }
        for &v in t.value(h).data() {
            assert!(v > -1.0 && v < 1.0);
        }
    }

    #[test]
    fn backward_quadratic() {
        // f(x) = sum(x*x) at x=3 -> df/dx = 6
        let mut t = Tape::new();
        let x = t.leaf(DenseArray::scalar(3.0)).unwrap();
        let y = t.mul(x, x).unwrap();
        let s = t.sum_all(y).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn untouched_leaf_has_no_grad() {
        let mut t = Tape::new();
        let x = t.leaf(DenseArray::scalar(3.0)).unwrap();
        let unused = t.leaf(DenseArray::scalar(1.0)).unwrap();
        let y = t.mul(x, x).unwrap();
        let s = t.sum_all(y).unwrap();
        t.backward(s).unwrap();
        assert!(t.grad(unused).is_none());
    }

    #[test]
    fn shape_mismatch_is_error() {
        let mut t = Tape::new();
        let a = t.leaf(DenseArray::zeros(&[2, 3])).unwrap();
        let b = t.leaf(DenseArray::zeros(&[3, 3])).unwrap();
        assert!(t.add(a, b).is_err());
        assert!(t.matmul(a, b).is_ok());
        assert!(t.matmul(a, a).is_err());
    }
}
