//! Define-by-run reverse-mode autodiff over 2-D f64 tensors.
//!
//! Every op appends one node; parents always have smaller ids, so the reverse
//! insertion order is a valid topological order for backprop. Ops validate
//! shapes and numeric domains when they are built, which keeps `backward`
//! infallible once a graph exists.
//!
//! The tape is rebuilt from scratch every training step. `backward` may run
//! once per tape; a second call is an error rather than a silent re-walk.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    /// x [N,M] + row [1,M], broadcast down rows.
    AddRow(NodeId, NodeId),
    /// x [N,M] / col [N,1], broadcast across columns.
    DivCols(NodeId, NodeId),
    AddScalar(NodeId),
    MulScalar(NodeId, f64),
    Neg(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Sqrt(NodeId),
    Abs(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Gelu(NodeId),
    ClampMin(NodeId, f64),
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    /// Row-wise softmax; tolerates -inf entries from masking.
    Softmax(NodeId),
    LogSoftmax(NodeId),
    /// Entries where mask is true are replaced by `fill` and get zero grad.
    MaskedFill(NodeId, Vec<bool>),
    /// Per-row (mean, inv_std) saved for backward.
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        stats: Vec<(f64, f64)>,
    },
    SumAll(NodeId),
    MeanAll(NodeId),
    RowSums(NodeId),
    ColMeans(NodeId),
    BroadcastRows(NodeId),
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SliceRows(NodeId, usize),
    SliceCols(NodeId, usize),
    GatherRows(NodeId, Vec<usize>),
    TakePerRow(NodeId, Vec<usize>),
    /// K[i,j] = exp(-||x_i - y_j||^2 / (2 sigma^2)).
    GaussianGram { x: NodeId, y: NodeId, sigma: f64 },
    /// Same-length 1-D conv along rows; weight laid out [width*d_in, c_out].
    Conv1dSame { x: NodeId, w: NodeId, width: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Vec<f64>,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

// ── raw matmul kernels ───────────────────────────────────────────────────────

/// c += a [n,k] * b [k,m], ikj order so the inner loop streams rows of b.
fn mm_nn(a: &[f64], b: &[f64], c: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            let crow = &mut c[i * m..(i + 1) * m];
            for j in 0..m {
                crow[j] += av * brow[j];
            }
        }
    }
}

/// c += a [n,k] * b^T where b is [m,k].
fn mm_nt(a: &[f64], b: &[f64], c: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..m {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for p in 0..k {
                s += arow[p] * brow[p];
            }
            c[i * m + j] += s;
        }
    }
}

/// c += a^T * b where a is [k,n], b is [k,m].
fn mm_tn(a: &[f64], b: &[f64], c: &mut [f64], n: usize, k: usize, m: usize) {
    for p in 0..k {
        let brow = &b[p * m..(p + 1) * m];
        for i in 0..n {
            let av = a[p * n + i];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[i * m..(i + 1) * m];
            for j in 0..m {
                crow[j] += av * brow[j];
            }
        }
    }
}

fn phi(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_val(x: f64) -> f64 {
    x * phi(x)
}

fn gelu_grad(x: f64) -> f64 {
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    phi(x) + x * pdf
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the backward root w.r.t. node `id`, row-major.
    pub fn grad(&self, id: NodeId) -> &[f64] {
        assert!(self.backward_done, "grad() before backward()");
        &self.nodes[id.0].grad
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value,
            grad: Vec::new(),
            op,
        });
        id
    }

    fn shape(&self, id: NodeId) -> (usize, usize) {
        let v = &self.nodes[id.0].value;
        (v.rows(), v.cols())
    }

    fn data(&self, id: NodeId) -> &[f64] {
        self.nodes[id.0].value.data()
    }

    // ── graph construction ──────────────────────────────────────────────────

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.push(Tensor::scalar(v), Op::Leaf)
    }

    /// Elementwise; either side may be a 1x1 scalar, which broadcasts.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("add", a, b, |x, y| Ok(x + y), Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("sub", a, b, |x, y| Ok(x - y), Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("mul", a, b, |x, y| Ok(x * y), Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(
            "div",
            a,
            b,
            |x, y| {
                if y == 0.0 {
                    Err(Error::domain("div", "division by zero"))
                } else {
                    Ok(x / y)
                }
            },
            Op::Div(a, b),
        )
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> Result<f64>,
        op: Op,
    ) -> Result<NodeId> {
        let (an, am) = self.shape(a);
        let (bn, bm) = self.shape(b);
        let a_scalar = an == 1 && am == 1;
        let b_scalar = bn == 1 && bm == 1;
        let value = if (an, am) == (bn, bm) {
            let ad = self.data(a);
            let bd = self.data(b);
            let mut out = Vec::with_capacity(ad.len());
            for i in 0..ad.len() {
                out.push(f(ad[i], bd[i])?);
            }
            Tensor::new(vec![an, am], out)?
        } else if b_scalar {
            let s = self.data(b)[0];
            let ad = self.data(a);
            let mut out = Vec::with_capacity(ad.len());
            for &x in ad {
                out.push(f(x, s)?);
            }
            Tensor::new(vec![an, am], out)?
        } else if a_scalar {
            let s = self.data(a)[0];
            let bd = self.data(b);
            let mut out = Vec::with_capacity(bd.len());
            for &y in bd {
                out.push(f(s, y)?);
            }
            Tensor::new(vec![bn, bm], out)?
        } else {
            return Err(Error::ShapeMismatch {
                op: name,
                lhs: vec![an, am],
                rhs: vec![bn, bm],
            });
        };
        Ok(self.push(value, op))
    }

    /// x [N,M] + row [1,M].
    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> Result<NodeId> {
        let (n, m) = self.shape(x);
        let (rn, rm) = self.shape(row);
        if rn != 1 || rm != m {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                lhs: vec![n, m],
                rhs: vec![rn, rm],
            });
        }
        let xd = self.data(x);
        let rd = self.data(row);
        let mut out = Vec::with_capacity(n * m);
        for i in 0..n {
            for j in 0..m {
                out.push(xd[i * m + j] + rd[j]);
            }
        }
        let value = Tensor::new(vec![n, m], out)?;
        Ok(self.push(value, Op::AddRow(x, row)))
    }

    /// x [N,M] / col [N,1], every entry of col must be nonzero.
    pub fn div_cols(&mut self, x: NodeId, col: NodeId) -> Result<NodeId> {
        let (n, m) = self.shape(x);
        let (cn, cm) = self.shape(col);
        if cn != n || cm != 1 {
            return Err(Error::ShapeMismatch {
                op: "div_cols",
                lhs: vec![n, m],
                rhs: vec![cn, cm],
            });
        }
        if self.data(col).iter().any(|&c| c == 0.0) {
            return Err(Error::domain("div_cols", "division by zero"));
        }
        let xd = self.data(x);
        let cd = self.data(col);
        let mut out = Vec::with_capacity(n * m);
        for i in 0..n {
            for j in 0..m {
                out.push(xd[i * m + j] / cd[i]);
            }
        }
        let value = Tensor::new(vec![n, m], out)?;
        Ok(self.push(value, Op::DivCols(x, col)))
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> NodeId {
        self.map(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn mul_scalar(&mut self, x: NodeId, c: f64) -> NodeId {
        self.map(x, |v| v * c, Op::MulScalar(x, c))
    }

    pub fn neg(&mut self, x: NodeId) -> NodeId {
        self.map(x, |v| -v, Op::Neg(x))
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        self.map(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        if self.data(x).iter().any(|&v| v <= 0.0) {
            return Err(Error::domain("log", "input must be positive"));
        }
        Ok(self.map(x, f64::ln, Op::Log(x)))
    }

    pub fn sqrt(&mut self, x: NodeId) -> Result<NodeId> {
        if self.data(x).iter().any(|&v| v < 0.0) {
            return Err(Error::domain("sqrt", "input must be non-negative"));
        }
        Ok(self.map(x, f64::sqrt, Op::Sqrt(x)))
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        self.map(x, f64::abs, Op::Abs(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.map(x, |v| 1.0 / (1.0 + (-v).exp()), Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.map(x, f64::tanh, Op::Tanh(x))
    }

    /// Exact GELU, x * Phi(x) with the Gaussian CDF.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        self.map(x, gelu_val, Op::Gelu(x))
    }

    pub fn clamp_min(&mut self, x: NodeId, c: f64) -> NodeId {
        self.map(x, |v| v.max(c), Op::ClampMin(x, c))
    }

    fn map(&mut self, x: NodeId, f: impl Fn(f64) -> f64, op: Op) -> NodeId {
        let (n, m) = self.shape(x);
        let out: Vec<f64> = self.data(x).iter().map(|&v| f(v)).collect();
        let value = Tensor::new(vec![n, m], out).expect("map preserves shape");
        self.push(value, op)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, k) = self.shape(a);
        let (k2, m) = self.shape(b);
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: vec![n, k],
                rhs: vec![k2, m],
            });
        }
        let mut out = vec![0.0; n * m];
        mm_nn(self.data(a), self.data(b), &mut out, n, k, m);
        let value = Tensor::new(vec![n, m], out)?;
        Ok(self.push(value, Op::Matmul(a, b)))
    }

    pub fn transpose(&mut self, x: NodeId) -> NodeId {
        let (n, m) = self.shape(x);
        let xd = self.data(x);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[j * n + i] = xd[i * m + j];
            }
        }
        let value = Tensor::new(vec![m, n], out).expect("transpose shape");
        self.push(value, Op::Transpose(x))
    }

    /// Row-wise softmax. -inf entries become exact zeros.
    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let (n, m) = self.shape(x);
        let xd = self.data(x);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let row = &xd[i * m..(i + 1) * m];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..m {
                let e = (row[j] - mx).exp();
                out[i * m + j] = e;
                z += e;
            }
            for j in 0..m {
                out[i * m + j] /= z;
            }
        }
        let value = Tensor::new(vec![n, m], out).expect("softmax shape");
        self.push(value, Op::Softmax(x))
    }

    pub fn log_softmax(&mut self, x: NodeId) -> NodeId {
        let (n, m) = self.shape(x);
        let xd = self.data(x);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let row = &xd[i * m..(i + 1) * m];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|&v| (v - mx).exp()).sum();
            let lz = z.ln() + mx;
            for j in 0..m {
                out[i * m + j] = row[j] - lz;
            }
        }
        let value = Tensor::new(vec![n, m], out).expect("log_softmax shape");
        self.push(value, Op::LogSoftmax(x))
    }

    /// Replace masked entries with `fill`. Rejects fully-masked rows because
    /// a later softmax over such a row would be undefined.
    pub fn masked_fill(&mut self, x: NodeId, mask: &[bool], fill: f64) -> Result<NodeId> {
        let (n, m) = self.shape(x);
        if mask.len() != n * m {
            return Err(Error::InvalidShape {
                op: "masked_fill",
                shape: vec![n, m],
                reason: format!("mask has {} entries, tensor has {}", mask.len(), n * m),
            });
        }
        for i in 0..n {
            if mask[i * m..(i + 1) * m].iter().all(|&b| b) {
                return Err(Error::domain("masked_fill", "row is fully masked"));
            }
        }
        let xd = self.data(x);
        let out: Vec<f64> = xd
            .iter()
            .zip(mask)
            .map(|(&v, &b)| if b { fill } else { v })
            .collect();
        let value = Tensor::new(vec![n, m], out)?;
        Ok(self.push(value, Op::MaskedFill(x, mask.to_vec())))
    }

    /// Per-row normalization with learned scale and shift, eps = 1e-5.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let (n, m) = self.shape(x);
        for (name, id) in [("gamma", gamma), ("beta", beta)] {
            let (pn, pm) = self.shape(id);
            if pn != 1 || pm != m {
                return Err(Error::InvalidShape {
                    op: "layer_norm",
                    shape: vec![pn, pm],
                    reason: format!("{name} must be [1, {m}]"),
                });
            }
        }
        let xd = self.data(x);
        let gd = self.data(gamma);
        let bd = self.data(beta);
        let mut out = vec![0.0; n * m];
        let mut stats = Vec::with_capacity(n);
        for i in 0..n {
            let row = &xd[i * m..(i + 1) * m];
            let mean = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let inv_std = 1.0 / (var + LN_EPS).sqrt();
            stats.push((mean, inv_std));
            for j in 0..m {
                out[i * m + j] = (row[j] - mean) * inv_std * gd[j] + bd[j];
            }
        }
        let value = Tensor::new(vec![n, m], out)?;
        Ok(self.push(value, Op::LayerNorm { x, gamma, beta, stats }))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.data(x).iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let d = self.data(x);
        let s: f64 = d.iter().sum::<f64>() / d.len() as f64;
        self.push(Tensor::scalar(s), Op::MeanAll(x))
    }

    /// [N,M] -> [N,1], sum over each row.
    pub fn row_sums(&mut self, x: NodeId) -> NodeId {
        let (n, m) = self.shape(x);
        let xd = self.data(x);
        let out: Vec<f64> = (0..n).map(|i| xd[i * m..(i + 1) * m].iter().sum()).collect();
        let value = Tensor::new(vec![n, 1], out).expect("row_sums shape");
        self.push(value, Op::RowSums(x))
    }

    /// [N,M] -> [1,M], mean down each column.
    pub fn col_means(&mut self, x: NodeId) -> NodeId {
        let (n, m) = self.shape(x);
        let xd = self.data(x);
        let mut out = vec![0.0; m];
        for i in 0..n {
            for j in 0..m {
                out[j] += xd[i * m + j];
            }
        }
        for v in &mut out {
            *v /= n as f64;
        }
        let value = Tensor::new(vec![1, m], out).expect("col_means shape");
        self.push(value, Op::ColMeans(x))
    }

    /// [1,M] -> [N,M], repeat the row.
    pub fn broadcast_rows(&mut self, x: NodeId, n: usize) -> Result<NodeId> {
        let (xn, m) = self.shape(x);
        if xn != 1 {
            return Err(Error::InvalidShape {
                op: "broadcast_rows",
                shape: vec![xn, m],
                reason: "expected a single row".into(),
            });
        }
        let xd = self.data(x);
        let mut out = Vec::with_capacity(n * m);
        for _ in 0..n {
            out.extend_from_slice(xd);
        }
        let value = Tensor::new(vec![n, m], out)?;
        Ok(self.push(value, Op::BroadcastRows(x)))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::domain("concat_rows", "no inputs"));
        }
        let (_, m) = self.shape(parts[0]);
        let mut out = Vec::new();
        let mut n = 0;
        for &p in parts {
            let (pn, pm) = self.shape(p);
            if pm != m {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: vec![n, m],
                    rhs: vec![pn, pm],
                });
            }
            out.extend_from_slice(self.data(p));
            n += pn;
        }
        let value = Tensor::new(vec![n, m], out)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::domain("concat_cols", "no inputs"));
        }
        let (n, _) = self.shape(parts[0]);
        let mut widths = Vec::with_capacity(parts.len());
        let mut m = 0;
        for &p in parts {
            let (pn, pm) = self.shape(p);
            if pn != n {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: vec![n, m],
                    rhs: vec![pn, pm],
                });
            }
            widths.push(pm);
            m += pm;
        }
        let mut out = Vec::with_capacity(n * m);
        for i in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                let pd = self.data(p);
                out.extend_from_slice(&pd[i * w..(i + 1) * w]);
            }
        }
        let value = Tensor::new(vec![n, m], out)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec())))
    }

    /// Rows lo..hi (half-open).
    pub fn slice_rows(&mut self, x: NodeId, lo: usize, hi: usize) -> Result<NodeId> {
        let (n, m) = self.shape(x);
        if lo >= hi || hi > n {
            return Err(Error::InvalidAxis {
                op: "slice_rows",
                axis: hi,
                shape: vec![n, m],
            });
        }
        let out = self.data(x)[lo * m..hi * m].to_vec();
        let value = Tensor::new(vec![hi - lo, m], out)?;
        Ok(self.push(value, Op::SliceRows(x, lo)))
    }

    /// Columns lo..hi (half-open).
    pub fn slice_cols(&mut self, x: NodeId, lo: usize, hi: usize) -> Result<NodeId> {
        let (n, m) = self.shape(x);
        if lo >= hi || hi > m {
            return Err(Error::InvalidAxis {
                op: "slice_cols",
                axis: hi,
                shape: vec![n, m],
            });
        }
        let xd = self.data(x);
        let w = hi - lo;
        let mut out = Vec::with_capacity(n * w);
        for i in 0..n {
            out.extend_from_slice(&xd[i * m + lo..i * m + hi]);
        }
        let value = Tensor::new(vec![n, w], out)?;
        Ok(self.push(value, Op::SliceCols(x, lo)))
    }

    /// Embedding-style lookup: out[l] = table[idx[l]].
    pub fn gather_rows(&mut self, table: NodeId, idx: &[usize]) -> Result<NodeId> {
        let (k, m) = self.shape(table);
        if idx.is_empty() {
            return Err(Error::domain("gather_rows", "empty index list"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= k) {
            return Err(Error::domain(
                "gather_rows",
                format!("index {bad} out of range for {k} rows"),
            ));
        }
        let td = self.data(table);
        let mut out = Vec::with_capacity(idx.len() * m);
        for &i in idx {
            out.extend_from_slice(&td[i * m..(i + 1) * m]);
        }
        let value = Tensor::new(vec![idx.len(), m], out)?;
        Ok(self.push(value, Op::GatherRows(table, idx.to_vec())))
    }

    /// out[i] = x[i, idx[i]], as a column vector.
    pub fn take_per_row(&mut self, x: NodeId, idx: &[usize]) -> Result<NodeId> {
        let (n, m) = self.shape(x);
        if idx.len() != n {
            return Err(Error::InvalidShape {
                op: "take_per_row",
                shape: vec![n, m],
                reason: format!("need {n} indices, got {}", idx.len()),
            });
        }
        if let Some(&bad) = idx.iter().find(|&&j| j >= m) {
            return Err(Error::domain(
                "take_per_row",
                format!("column {bad} out of range for {m} columns"),
            ));
        }
        let xd = self.data(x);
        let out: Vec<f64> = idx.iter().enumerate().map(|(i, &j)| xd[i * m + j]).collect();
        let value = Tensor::new(vec![n, 1], out)?;
        Ok(self.push(value, Op::TakePerRow(x, idx.to_vec())))
    }

    /// Gaussian kernel gram matrix between row sets, fixed bandwidth.
    pub fn gaussian_gram(&mut self, x: NodeId, y: NodeId, sigma: f64) -> Result<NodeId> {
        let (n, d) = self.shape(x);
        let (m, d2) = self.shape(y);
        if d != d2 {
            return Err(Error::ShapeMismatch {
                op: "gaussian_gram",
                lhs: vec![n, d],
                rhs: vec![m, d2],
            });
        }
        if !(sigma > 0.0) {
            return Err(Error::domain("gaussian_gram", "sigma must be positive"));
        }
        let xd = self.data(x);
        let yd = self.data(y);
        let inv = 1.0 / (2.0 * sigma * sigma);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let xi = &xd[i * d..(i + 1) * d];
            for j in 0..m {
                let yj = &yd[j * d..(j + 1) * d];
                let mut s = 0.0;
                for t in 0..d {
                    let diff = xi[t] - yj[t];
                    s += diff * diff;
                }
                out[i * m + j] = (-s * inv).exp();
            }
        }
        let value = Tensor::new(vec![n, m], out)?;
        Ok(self.push(value, Op::GaussianGram { x, y, sigma }))
    }

    /// 1-D conv over the row axis, zero padding keeps the length. Weight is
    /// [width * d_in, c_out]; tap k sees input row t + k - width/2.
    pub fn conv1d_same(&mut self, x: NodeId, w: NodeId, width: usize) -> Result<NodeId> {
        if width % 2 == 0 || width == 0 {
            return Err(Error::domain("conv1d_same", "width must be odd"));
        }
        let (n, d_in) = self.shape(x);
        let (rows, c_out) = self.shape(w);
        if rows != width * d_in {
            return Err(Error::ShapeMismatch {
                op: "conv1d_same",
                lhs: vec![n, d_in],
                rhs: vec![rows, c_out],
            });
        }
        let xd = self.data(x);
        let wd = self.data(w);
        let half = width / 2;
        let mut out = vec![0.0; n * c_out];
        for t in 0..n {
            for k in 0..width {
                let src = t as isize + k as isize - half as isize;
                if src < 0 || src >= n as isize {
                    continue;
                }
                let xrow = &xd[src as usize * d_in..(src as usize + 1) * d_in];
                for d in 0..d_in {
                    let xv = xrow[d];
                    if xv == 0.0 {
                        continue;
                    }
                    let wrow = &wd[(k * d_in + d) * c_out..(k * d_in + d + 1) * c_out];
                    let orow = &mut out[t * c_out..(t + 1) * c_out];
                    for o in 0..c_out {
                        orow[o] += xv * wrow[o];
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, c_out], out)?;
        Ok(self.push(value, Op::Conv1dSame { x, w, width }))
    }

    // ── backward ────────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar root. Call once per tape.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        if !self.nodes[root.0].value.is_scalar() {
            return Err(Error::NonScalarRoot {
                shape: self.nodes[root.0].value.shape().to_vec(),
            });
        }
        for node in &mut self.nodes[..=root.0] {
            node.grad = vec![0.0; node.value.numel()];
        }
        self.nodes[root.0].grad[0] = 1.0;
        self.backward_done = true;

        for i in (0..=root.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            if node.grad.iter().all(|&g| g == 0.0) {
                continue;
            }
            step_backward(node, before);
        }
        Ok(())
    }
}

/// Accumulate `node`'s gradient into its parents (all at smaller indices).
fn step_backward(node: &Node, before: &mut [Node]) {
    let g = &node.grad;
    let y = node.value.data();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            acc_broadcast(before, *a, g, |_, gi| gi);
            acc_broadcast(before, *b, g, |_, gi| gi);
        }
        Op::Sub(a, b) => {
            acc_broadcast(before, *a, g, |_, gi| gi);
            acc_broadcast(before, *b, g, |_, gi| -gi);
        }
        Op::Mul(a, b) => {
            let bd = before[b.0].value.data().to_vec();
            acc_broadcast_other(before, *a, g, &bd, |o, gi| gi * o);
            let ad = before[a.0].value.data().to_vec();
            acc_broadcast_other(before, *b, g, &ad, |o, gi| gi * o);
        }
        Op::Div(a, b) => {
            // y = a/b: da = g/b, db = -g*y/b
            let bd = before[b.0].value.data().to_vec();
            acc_broadcast_other(before, *a, g, &bd, |bv, gi| gi / bv);
            let gb: Vec<f64> = g
                .iter()
                .enumerate()
                .map(|(i, &gi)| {
                    let bv = if bd.len() == 1 { bd[0] } else { bd[i] };
                    -gi * y[i] / bv
                })
                .collect();
            acc_broadcast(before, *b, &gb, |_, gi| gi);
        }
        Op::AddRow(x, row) => {
            let m = before[row.0].value.numel();
            for (i, &gi) in g.iter().enumerate() {
                before[x.0].grad[i] += gi;
            }
            for (i, &gi) in g.iter().enumerate() {
                before[row.0].grad[i % m] += gi;
            }
        }
        Op::DivCols(x, col) => {
            let n = before[col.0].value.numel();
            let m = g.len() / n;
            let cd = before[col.0].value.data().to_vec();
            for i in 0..n {
                for j in 0..m {
                    before[x.0].grad[i * m + j] += g[i * m + j] / cd[i];
                }
            }
            for i in 0..n {
                let mut s = 0.0;
                for j in 0..m {
                    s += g[i * m + j] * y[i * m + j];
                }
                before[col.0].grad[i] -= s / cd[i];
            }
        }
        Op::AddScalar(x) => acc(before, *x, g, |_, gi| gi),
        Op::MulScalar(x, c) => {
            let c = *c;
            acc(before, *x, g, move |_, gi| gi * c)
        }
        Op::Neg(x) => acc(before, *x, g, |_, gi| -gi),
        Op::Exp(x) => acc_with(before, *x, g, y, |yi, gi| gi * yi),
        Op::Log(x) => acc_self(before, *x, g, |xi, gi| gi / xi),
        Op::Sqrt(x) => acc_with(before, *x, g, y, |yi, gi| gi / (2.0 * yi)),
        Op::Abs(x) => acc_self(before, *x, g, |xi, gi| gi * xi.signum()),
        Op::Sigmoid(x) => acc_with(before, *x, g, y, |yi, gi| gi * yi * (1.0 - yi)),
        Op::Tanh(x) => acc_with(before, *x, g, y, |yi, gi| gi * (1.0 - yi * yi)),
        Op::Gelu(x) => acc_self(before, *x, g, |xi, gi| gi * gelu_grad(xi)),
        Op::ClampMin(x, c) => {
            let c = *c;
            acc_self(before, *x, g, move |xi, gi| if xi > c { gi } else { 0.0 })
        }
        Op::Matmul(a, b) => {
            let (n, k) = dims(&before[a.0]);
            let (_, m) = dims(&before[b.0]);
            let bd = before[b.0].value.data().to_vec();
            mm_nt(g, &bd, &mut before[a.0].grad, n, m, k);
            let ad = before[a.0].value.data().to_vec();
            mm_tn(&ad, g, &mut before[b.0].grad, k, n, m);
        }
        Op::Transpose(x) => {
            let (n, m) = dims(&before[x.0]);
            // node is [m, n]; g[j*n + i] feeds x[i*m + j]
            let gx = &mut before[x.0].grad;
            for j in 0..m {
                for i in 0..n {
                    gx[i * m + j] += g[j * n + i];
                }
            }
        }
        Op::Softmax(x) => {
            let (n, m) = dims(&before[x.0]);
            let gx = &mut before[x.0].grad;
            for i in 0..n {
                let yr = &y[i * m..(i + 1) * m];
                let gr = &g[i * m..(i + 1) * m];
                let dot: f64 = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                for j in 0..m {
                    gx[i * m + j] += yr[j] * (gr[j] - dot);
                }
            }
        }
        Op::LogSoftmax(x) => {
            let (n, m) = dims(&before[x.0]);
            let gx = &mut before[x.0].grad;
            for i in 0..n {
                let gr = &g[i * m..(i + 1) * m];
                let gsum: f64 = gr.iter().sum();
                for j in 0..m {
                    gx[i * m + j] += gr[j] - y[i * m + j].exp() * gsum;
                }
            }
        }
        Op::MaskedFill(x, mask) => {
            let gx = &mut before[x.0].grad;
            for (i, &gi) in g.iter().enumerate() {
                if !mask[i] {
                    gx[i] += gi;
                }
            }
        }
        Op::LayerNorm { x, gamma, beta, stats } => {
            let (n, m) = dims(&before[x.0]);
            let xd = before[x.0].value.data().to_vec();
            let gd = before[gamma.0].value.data().to_vec();
            for i in 0..n {
                let (mean, inv_std) = stats[i];
                let gr = &g[i * m..(i + 1) * m];
                // dgamma, dbeta
                for j in 0..m {
                    let xhat = (xd[i * m + j] - mean) * inv_std;
                    before[gamma.0].grad[j] += gr[j] * xhat;
                    before[beta.0].grad[j] += gr[j];
                }
                // dx via the standard layernorm backward
                let mut sum_dxhat = 0.0;
                let mut sum_dxhat_xhat = 0.0;
                for j in 0..m {
                    let xhat = (xd[i * m + j] - mean) * inv_std;
                    let dxhat = gr[j] * gd[j];
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                }
                let inv_m = 1.0 / m as f64;
                for j in 0..m {
                    let xhat = (xd[i * m + j] - mean) * inv_std;
                    let dxhat = gr[j] * gd[j];
                    before[x.0].grad[i * m + j] +=
                        inv_std * (dxhat - inv_m * sum_dxhat - xhat * inv_m * sum_dxhat_xhat);
                }
            }
        }
        Op::SumAll(x) => {
            let g0 = g[0];
            acc(before, *x, &vec![g0; before[x.0].value.numel()], |_, gi| gi);
        }
        Op::MeanAll(x) => {
            let n = before[x.0].value.numel();
            let g0 = g[0] / n as f64;
            acc(before, *x, &vec![g0; n], |_, gi| gi);
        }
        Op::RowSums(x) => {
            let (n, m) = dims(&before[x.0]);
            let gx = &mut before[x.0].grad;
            for i in 0..n {
                for j in 0..m {
                    gx[i * m + j] += g[i];
                }
            }
        }
        Op::ColMeans(x) => {
            let (n, m) = dims(&before[x.0]);
            let gx = &mut before[x.0].grad;
            for i in 0..n {
                for j in 0..m {
                    gx[i * m + j] += g[j] / n as f64;
                }
            }
        }
        Op::BroadcastRows(x) => {
            let m = before[x.0].value.numel();
            let gx = &mut before[x.0].grad;
            for (i, &gi) in g.iter().enumerate() {
                gx[i % m] += gi;
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let len = before[p.0].value.numel();
                let gp = &mut before[p.0].grad;
                for i in 0..len {
                    gp[i] += g[offset + i];
                }
                offset += len;
            }
        }
        Op::ConcatCols(parts) => {
            let n = dims_of(node).0;
            let m = dims_of(node).1;
            let mut col = 0;
            for &p in parts {
                let w = dims(&before[p.0]).1;
                let gp = &mut before[p.0].grad;
                for i in 0..n {
                    for j in 0..w {
                        gp[i * w + j] += g[i * m + col + j];
                    }
                }
                col += w;
            }
        }
        Op::SliceRows(x, lo) => {
            let (_, m) = dims(&before[x.0]);
            let gx = &mut before[x.0].grad;
            for (i, &gi) in g.iter().enumerate() {
                gx[lo * m + i] += gi;
            }
        }
        Op::SliceCols(x, lo) => {
            let (_, m) = dims(&before[x.0]);
            let (n, w) = dims_of(node);
            let gx = &mut before[x.0].grad;
            for i in 0..n {
                for j in 0..w {
                    gx[i * m + lo + j] += g[i * w + j];
                }
            }
        }
        Op::GatherRows(table, idx) => {
            let (_, m) = dims(&before[table.0]);
            let gt = &mut before[table.0].grad;
            for (l, &row) in idx.iter().enumerate() {
                for j in 0..m {
                    gt[row * m + j] += g[l * m + j];
                }
            }
        }
        Op::TakePerRow(x, idx) => {
            let (_, m) = dims(&before[x.0]);
            let gx = &mut before[x.0].grad;
            for (i, &j) in idx.iter().enumerate() {
                gx[i * m + j] += g[i];
            }
        }
        Op::GaussianGram { x, y: yid, sigma } => {
            let (n, d) = dims(&before[x.0]);
            let (m, _) = dims(&before[yid.0]);
            let inv = 1.0 / (sigma * sigma);
            let xd = before[x.0].value.data().to_vec();
            let yd = before[yid.0].value.data().to_vec();
            for i in 0..n {
                for j in 0..m {
                    let coef = g[i * m + j] * y[i * m + j] * inv;
                    if coef == 0.0 {
                        continue;
                    }
                    for t in 0..d {
                        let diff = xd[i * d + t] - yd[j * d + t];
                        before[x.0].grad[i * d + t] -= coef * diff;
                        before[yid.0].grad[j * d + t] += coef * diff;
                    }
                }
            }
        }
        Op::Conv1dSame { x, w, width } => {
            let (n, d_in) = dims(&before[x.0]);
            let (_, c_out) = dims(&before[w.0]);
            let half = width / 2;
            let xd = before[x.0].value.data().to_vec();
            let wd = before[w.0].value.data().to_vec();
            for t in 0..n {
                let gr = &g[t * c_out..(t + 1) * c_out];
                for k in 0..*width {
                    let src = t as isize + k as isize - half as isize;
                    if src < 0 || src >= n as isize {
                        continue;
                    }
                    let src = src as usize;
                    for d in 0..d_in {
                        let widx = (k * d_in + d) * c_out;
                        let mut gx = 0.0;
                        for o in 0..c_out {
                            gx += gr[o] * wd[widx + o];
                            before[w.0].grad[widx + o] += gr[o] * xd[src * d_in + d];
                        }
                        before[x.0].grad[src * d_in + d] += gx;
                    }
                }
            }
        }
    }
}

fn dims(node: &Node) -> (usize, usize) {
    (node.value.rows(), node.value.cols())
}

fn dims_of(node: &Node) -> (usize, usize) {
    dims(node)
}

/// gx[i] += f(_, g[i]); shapes of g and parent match.
fn acc(before: &mut [Node], p: NodeId, g: &[f64], f: impl Fn(f64, f64) -> f64) {
    let gp = &mut before[p.0].grad;
    for (i, &gi) in g.iter().enumerate() {
        gp[i] += f(0.0, gi);
    }
}

/// gx[i] += f(parent_value[i], g[i]).
fn acc_self(before: &mut [Node], p: NodeId, g: &[f64], f: impl Fn(f64, f64) -> f64) {
    let pv = before[p.0].value.data().to_vec();
    let gp = &mut before[p.0].grad;
    for (i, &gi) in g.iter().enumerate() {
        gp[i] += f(pv[i], gi);
    }
}

/// gx[i] += f(aux[i], g[i]) where aux is the node's own output value.
fn acc_with(before: &mut [Node], p: NodeId, g: &[f64], aux: &[f64], f: impl Fn(f64, f64) -> f64) {
    let gp = &mut before[p.0].grad;
    for (i, &gi) in g.iter().enumerate() {
        gp[i] += f(aux[i], gi);
    }
}

/// Accumulate into `p`, collapsing to a scalar when `p` is 1x1 but the
/// gradient is larger (the broadcast case in binary ops).
fn acc_broadcast(before: &mut [Node], p: NodeId, g: &[f64], f: impl Fn(f64, f64) -> f64) {
    let numel = before[p.0].value.numel();
    let gp = &mut before[p.0].grad;
    if numel == g.len() {
        for (i, &gi) in g.iter().enumerate() {
            gp[i] += f(0.0, gi);
        }
    } else {
        debug_assert_eq!(numel, 1);
        gp[0] += g.iter().map(|&gi| f(0.0, gi)).sum::<f64>();
    }
}

/// Like acc_broadcast but f sees the other operand's value, which itself may
/// be scalar-broadcast.
fn acc_broadcast_other(
    before: &mut [Node],
    p: NodeId,
    g: &[f64],
    other: &[f64],
    f: impl Fn(f64, f64) -> f64,
) {
    let numel = before[p.0].value.numel();
    let gp = &mut before[p.0].grad;
    let oth = |i: usize| if other.len() == 1 { other[0] } else { other[i] };
    if numel == g.len() {
        for (i, &gi) in g.iter().enumerate() {
            gp[i] += f(oth(i), gi);
        }
    } else {
        debug_assert_eq!(numel, 1);
        gp[0] += g.iter().enumerate().map(|(i, &gi)| f(oth(i), gi)).sum::<f64>();
    }
}

// ─────────────────────────────────────────────────────────────────────────────
