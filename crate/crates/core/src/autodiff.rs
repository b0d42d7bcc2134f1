//! Tape-style reverse-mode differentiation over [`Tensor`] values.
//!
//! Forward values are computed eagerly as the expression graph is built;
//! [`Graph::backward`] then runs a single reverse sweep over the tape.
//! Gradients are only materialized along paths that reach a parameter
//! leaf, so frozen weights never allocate gradient storage.

use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// One `(source tensor, source row, weight)` contribution to an output row
/// of [`Graph::weighted_gather_rows`].
pub type GatherEntry = (u32, u32, f64);

enum Op {
    Leaf,
    Matmul(Var, Var),
    MatmulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    ConstMinus(Var),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize, usize),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    LayerNorm(Var, f64),
    Gelu(Var),
    SoftmaxRows(Var),
    L2NormalizeRows(Var, f64),
    MeanOf(Vec<Var>),
    SumAll(Var),
    PowConst(Var, f64),
    Ln(Var),
    Clamp(Var, f64, f64),
    ScaleRows(Var, Vec<f64>),
    ScatterRows {
        src: Var,
        indices: Vec<usize>,
    },
    WeightedGatherRows {
        sources: Vec<Var>,
        rows: Vec<Vec<GatherEntry>>,
    },
}

struct Node {
    value: Tensor,
    needs_grad: bool,
    op: Op,
}

/// Expression tape. Build values with the op methods, then call
/// [`Graph::backward`] on a scalar node.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of one backward sweep, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the swept scalar with respect to `v`, if any path from
    /// `v` reached it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_deriv(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn layer_norm_rows(x: &Tensor, eps: f64) -> Tensor {
    let mut out = Tensor::zeros(x.rows(), x.cols());
    let n = x.cols() as f64;
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + eps).sqrt();
        for (c, &v) in row.iter().enumerate() {
            out.set(r, c, (v - mean) * inv);
        }
    }
    out
}

/// Stable two-way softmax; the same arithmetic [`Graph::softmax_rows`]
/// applies to a `1×2` row.
pub fn softmax_pair(a: f64, b: f64) -> (f64, f64) {
    let m = a.max(b);
    let ea = (a - m).exp();
    let eb = (b - m).exp();
    let sum = ea + eb;
    (ea / sum, eb / sum)
}

fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        let row = x.row(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for &v in row {
            sum += (v - max).exp();
        }
        for (c, &v) in row.iter().enumerate() {
            out.set(r, c, (v - max).exp() / sum);
        }
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    /// Leaf that collects a gradient during [`Graph::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, true, Op::Leaf)
    }

    fn push(&mut self, value: Tensor, needs_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            needs_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(value, ng, Op::Matmul(a, b))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_nt(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(value, ng, Op::MatmulNt(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).add(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(value, ng, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).sub(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(value, ng, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).mul(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(value, ng, Op::Mul(a, b))
    }

    /// Broadcast-add a `1×n` row to every row of an `m×n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (m, n) = self.value(a).shape();
        assert_eq!(self.value(row).shape(), (1, n), "add_row shape mismatch");
        let mut value = self.value(a).clone();
        for r in 0..m {
            let rowv = self.nodes[row.0].value.row(0).to_vec();
            for (c, v) in rowv.iter().enumerate() {
                let cur = value.get(r, c);
                value.set(r, c, cur + v);
            }
        }
        let ng = self.needs(a) || self.needs(row);
        self.push(value, ng, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).scale(c);
        let ng = self.needs(a);
        self.push(value, ng, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x + c);
        let ng = self.needs(a);
        self.push(value, ng, Op::AddScalar(a))
    }

    /// Elementwise `c − x`.
    pub fn const_minus(&mut self, c: f64, a: Var) -> Var {
        let value = self.value(a).map(|x| c - x);
        let ng = self.needs(a);
        self.push(value, ng, Op::ConstMinus(a))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols();
        let rows: usize = parts.iter().map(|&p| self.value(p).rows()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols(), cols, "concat_rows col mismatch");
            data.extend_from_slice(t.data());
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(
            Tensor::from_vec(rows, cols, data),
            ng,
            Op::ConcatRows(parts.to_vec()),
        )
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let t = self.value(a);
        assert!(start + len <= t.rows(), "slice_rows out of range");
        let cols = t.cols();
        let data = t.data()[start * cols..(start + len) * cols].to_vec();
        let ng = self.needs(a);
        self.push(
            Tensor::from_vec(len, cols, data),
            ng,
            Op::SliceRows(a, start, len),
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let t = self.value(p).clone();
            assert_eq!(t.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                for c in 0..t.cols() {
                    out.set(r, offset + c, t.get(r, c));
                }
            }
            offset += t.cols();
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(out, ng, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let t = self.value(a);
        assert!(start + len <= t.cols(), "slice_cols out of range");
        let mut out = Tensor::zeros(t.rows(), len);
        for r in 0..t.rows() {
            for c in 0..len {
                out.set(r, c, t.get(r, start + c));
            }
        }
        let ng = self.needs(a);
        self.push(out, ng, Op::SliceCols(a, start, len))
    }

    /// Per-row layer normalization without affine parameters.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let value = layer_norm_rows(self.value(a), eps);
        let ng = self.needs(a);
        self.push(value, ng, Op::LayerNorm(a, eps))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu);
        let ng = self.needs(a);
        self.push(value, ng, Op::Gelu(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a));
        let ng = self.needs(a);
        self.push(value, ng, Op::SoftmaxRows(a))
    }

    /// Rows rescaled to unit norm, `x / sqrt(‖x‖² + eps)`.
    pub fn l2_normalize_rows(&mut self, a: Var, eps: f64) -> Var {
        let t = self.value(a);
        let mut out = Tensor::zeros(t.rows(), t.cols());
        for r in 0..t.rows() {
            let row = t.row(r);
            let nu = (row.iter().map(|v| v * v).sum::<f64>() + eps).sqrt();
            for (c, &v) in row.iter().enumerate() {
                out.set(r, c, v / nu);
            }
        }
        let ng = self.needs(a);
        self.push(out, ng, Op::L2NormalizeRows(a, eps))
    }

    /// Elementwise mean of same-shaped tensors.
    pub fn mean_of(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let mut value = self.value(parts[0]).clone();
        for &p in &parts[1..] {
            value.add_assign(self.value(p));
        }
        let value = value.scale(1.0 / parts.len() as f64);
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(value, ng, Op::MeanOf(parts.to_vec()))
    }

    /// Sum of all entries, as a `1×1` tensor.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let ng = self.needs(a);
        self.push(value, ng, Op::SumAll(a))
    }

    /// Elementwise `x^p`. Negative or fractional `p` assumes positive inputs.
    pub fn pow_const(&mut self, a: Var, p: f64) -> Var {
        let value = self.value(a).map(|x| x.powf(p));
        let ng = self.needs(a);
        self.push(value, ng, Op::PowConst(a, p))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::ln);
        let ng = self.needs(a);
        self.push(value, ng, Op::Ln(a))
    }

    /// Elementwise clamp; gradient passes only strictly inside `(lo, hi)`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(a).map(|x| x.clamp(lo, hi));
        let ng = self.needs(a);
        self.push(value, ng, Op::Clamp(a, lo, hi))
    }

    /// Row `i` scaled by `weights[i]`.
    pub fn scale_rows(&mut self, a: Var, weights: Vec<f64>) -> Var {
        let t = self.value(a);
        assert_eq!(t.rows(), weights.len(), "scale_rows weight count");
        let mut out = t.clone();
        for (r, &w) in weights.iter().enumerate() {
            for v in out.row_mut(r) {
                *v *= w;
            }
        }
        let ng = self.needs(a);
        self.push(out, ng, Op::ScaleRows(a, weights))
    }

    /// Place row `j` of `src` at row `indices[j]` of an `out_rows`-row
    /// output; unfilled rows take the constant `fill`.
    pub fn scatter_rows(&mut self, src: Var, indices: Vec<usize>, out_rows: usize, fill: f64) -> Var {
        let t = self.value(src);
        assert_eq!(t.rows(), indices.len(), "scatter_rows index count");
        let mut out = Tensor::from_vec(out_rows, t.cols(), vec![fill; out_rows * t.cols()]);
        for (j, &i) in indices.iter().enumerate() {
            assert!(i < out_rows, "scatter_rows index out of range");
            let row = t.row(j).to_vec();
            out.row_mut(i).copy_from_slice(&row);
        }
        let ng = self.needs(src);
        self.push(out, ng, Op::ScatterRows { src, indices })
    }

    /// Output row `i` is the weighted sum of source rows listed in
    /// `rows[i]`; all sources must share a column count.
    pub fn weighted_gather_rows(&mut self, sources: &[Var], rows: Vec<Vec<GatherEntry>>) -> Var {
        assert!(!sources.is_empty());
        let cols = self.value(sources[0]).cols();
        for &s in sources {
            assert_eq!(self.value(s).cols(), cols, "gather source col mismatch");
        }
        let mut out = Tensor::zeros(rows.len(), cols);
        for (i, entries) in rows.iter().enumerate() {
            for &(src, src_row, w) in entries {
                let t = &self.nodes[sources[src as usize].0].value;
                let srow = t.row(src_row as usize);
                let orow = out.row_mut(i);
                for (o, &v) in orow.iter_mut().zip(srow.iter()) {
                    *o += w * v;
                }
            }
        }
        let ng = sources.iter().any(|&s| self.needs(s));
        self.push(
            out,
            ng,
            Op::WeightedGatherRows {
                sources: sources.to_vec(),
                rows,
            },
        )
    }

    /// Elementwise `a / b` for positive `b`.
    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let inv = self.pow_const(b, -1.0);
        self.mul(a, inv)
    }

    /// Reverse sweep from a `1×1` loss node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(
            self.value(loss).shape(),
            (1, 1),
            "backward requires a scalar loss"
        );
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, id: usize, g: &Tensor, grads: &mut Vec<Option<Tensor>>) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                if self.needs(*a) {
                    self.accum(grads, *a, g.matmul_nt(self.value(*b)));
                }
                if self.needs(*b) {
                    self.accum(grads, *b, self.value(*a).matmul_tn(g));
                }
            }
            Op::MatmulNt(a, b) => {
                if self.needs(*a) {
                    self.accum(grads, *a, g.matmul(self.value(*b)));
                }
                if self.needs(*b) {
                    self.accum(grads, *b, g.matmul_tn(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    self.accum(grads, *a, g.clone());
                }
                if self.needs(*b) {
                    self.accum(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    self.accum(grads, *a, g.clone());
                }
                if self.needs(*b) {
                    self.accum(grads, *b, g.scale(-1.0));
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    self.accum(grads, *a, g.mul(self.value(*b)));
                }
                if self.needs(*b) {
                    self.accum(grads, *b, g.mul(self.value(*a)));
                }
            }
            Op::AddRow(a, row) => {
                if self.needs(*a) {
                    self.accum(grads, *a, g.clone());
                }
                if self.needs(*row) {
                    let mut dr = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (c, &v) in g.row(r).iter().enumerate() {
                            let cur = dr.get(0, c);
                            dr.set(0, c, cur + v);
                        }
                    }
                    self.accum(grads, *row, dr);
                }
            }
            Op::Scale(a, c) => {
                if self.needs(*a) {
                    self.accum(grads, *a, g.scale(*c));
                }
            }
            Op::AddScalar(a) => {
                if self.needs(*a) {
                    self.accum(grads, *a, g.clone());
                }
            }
            Op::ConstMinus(a) => {
                if self.needs(*a) {
                    self.accum(grads, *a, g.scale(-1.0));
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    if self.needs(p) {
                        let cols = g.cols();
                        let data = g.data()[start * cols..(start + rows) * cols].to_vec();
                        self.accum(grads, p, Tensor::from_vec(rows, cols, data));
                    }
                    start += rows;
                }
            }
            Op::SliceRows(a, start, len) => {
                if self.needs(*a) {
                    let mut da = Tensor::zeros(self.value(*a).rows(), self.value(*a).cols());
                    for r in 0..*len {
                        da.row_mut(start + r).copy_from_slice(g.row(r));
                    }
                    self.accum(grads, *a, da);
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let cols = self.value(p).cols();
                    if self.needs(p) {
                        let mut dp = Tensor::zeros(g.rows(), cols);
                        for r in 0..g.rows() {
                            for c in 0..cols {
                                dp.set(r, c, g.get(r, offset + c));
                            }
                        }
                        self.accum(grads, p, dp);
                    }
                    offset += cols;
                }
            }
            Op::SliceCols(a, start, len) => {
                if self.needs(*a) {
                    let t = self.value(*a);
                    let mut da = Tensor::zeros(t.rows(), t.cols());
                    for r in 0..g.rows() {
                        for c in 0..*len {
                            da.set(r, start + c, g.get(r, c));
                        }
                    }
                    self.accum(grads, *a, da);
                }
            }
            Op::LayerNorm(a, eps) => {
                if self.needs(*a) {
                    let x = self.value(*a);
                    let y = &node.value;
                    let n = x.cols() as f64;
                    let mut da = Tensor::zeros(x.rows(), x.cols());
                    for r in 0..x.rows() {
                        let xr = x.row(r);
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let mean = xr.iter().sum::<f64>() / n;
                        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                        let inv = 1.0 / (var + eps).sqrt();
                        let g_mean = gr.iter().sum::<f64>() / n;
                        let gy_mean =
                            gr.iter().zip(yr.iter()).map(|(&gv, &yv)| gv * yv).sum::<f64>() / n;
                        for c in 0..x.cols() {
                            da.set(r, c, inv * (gr[c] - g_mean - yr[c] * gy_mean));
                        }
                    }
                    self.accum(grads, *a, da);
                }
            }
            Op::Gelu(a) => {
                if self.needs(*a) {
                    let da = self.value(*a).zip(g, |x, gv| gelu_deriv(x) * gv);
                    self.accum(grads, *a, da);
                }
            }
            Op::SoftmaxRows(a) => {
                if self.needs(*a) {
                    let s = &node.value;
                    let mut da = Tensor::zeros(s.rows(), s.cols());
                    for r in 0..s.rows() {
                        let sr = s.row(r);
                        let gr = g.row(r);
                        let dot = sr.iter().zip(gr.iter()).map(|(&sv, &gv)| sv * gv).sum::<f64>();
                        for c in 0..s.cols() {
                            da.set(r, c, sr[c] * (gr[c] - dot));
                        }
                    }
                    self.accum(grads, *a, da);
                }
            }
            Op::L2NormalizeRows(a, eps) => {
                if self.needs(*a) {
                    let x = self.value(*a);
                    let y = &node.value;
                    let mut da = Tensor::zeros(x.rows(), x.cols());
                    for r in 0..x.rows() {
                        let xr = x.row(r);
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let nu = (xr.iter().map(|v| v * v).sum::<f64>() + eps).sqrt();
                        let gy = gr.iter().zip(yr.iter()).map(|(&gv, &yv)| gv * yv).sum::<f64>();
                        for c in 0..x.cols() {
                            da.set(r, c, (gr[c] - yr[c] * gy) / nu);
                        }
                    }
                    self.accum(grads, *a, da);
                }
            }
            Op::MeanOf(parts) => {
                let k = parts.len() as f64;
                for &p in parts {
                    if self.needs(p) {
                        self.accum(grads, p, g.scale(1.0 / k));
                    }
                }
            }
            Op::SumAll(a) => {
                if self.needs(*a) {
                    let t = self.value(*a);
                    let gv = g.item();
                    self.accum(grads, *a, Tensor::from_vec(t.rows(), t.cols(), vec![gv; t.len()]));
                }
            }
            Op::PowConst(a, p) => {
                if self.needs(*a) {
                    let da = self.value(*a).zip(g, |x, gv| p * x.powf(p - 1.0) * gv);
                    self.accum(grads, *a, da);
                }
            }
            Op::Ln(a) => {
                if self.needs(*a) {
                    let da = self.value(*a).zip(g, |x, gv| gv / x);
                    self.accum(grads, *a, da);
                }
            }
            Op::Clamp(a, lo, hi) => {
                if self.needs(*a) {
                    let da = self.value(*a).zip(g, |x, gv| {
                        if x > *lo && x < *hi {
                            gv
                        } else {
                            0.0
                        }
                    });
                    self.accum(grads, *a, da);
                }
            }
            Op::ScaleRows(a, weights) => {
                if self.needs(*a) {
                    let mut da = g.clone();
                    for (r, &w) in weights.iter().enumerate() {
                        for v in da.row_mut(r) {
                            *v *= w;
                        }
                    }
                    self.accum(grads, *a, da);
                }
            }
            Op::ScatterRows { src, indices, .. } => {
                if self.needs(*src) {
                    let cols = g.cols();
                    let mut da = Tensor::zeros(indices.len(), cols);
                    for (j, &i) in indices.iter().enumerate() {
                        da.row_mut(j).copy_from_slice(g.row(i));
                    }
                    self.accum(grads, *src, da);
                }
            }
            Op::WeightedGatherRows { sources, rows } => {
                let cols = g.cols();
                let mut deltas: Vec<Option<Tensor>> = sources
                    .iter()
                    .map(|&s| {
                        if self.needs(s) {
                            let t = self.value(s);
                            Some(Tensor::zeros(t.rows(), t.cols()))
                        } else {
                            None
                        }
                    })
                    .collect();
                for (i, entries) in rows.iter().enumerate() {
                    let gr = g.row(i);
                    for &(src, src_row, w) in entries {
                        if let Some(d) = deltas[src as usize].as_mut() {
                            let drow = d.row_mut(src_row as usize);
                            for (dv, &gv) in drow.iter_mut().zip(gr.iter()) {
                                *dv += w * gv;
                            }
                        }
                    }
                }
                let _ = cols;
                for (k, delta) in deltas.into_iter().enumerate() {
                    if let Some(d) = delta {
                        self.accum(grads, sources[k], d);
                    }
                }
            }
        }
    }

    fn accum(&self, grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }
}
