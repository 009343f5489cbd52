//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records a computation as a flat list of nodes; [`Tape::backward`]
//! walks the list in reverse and accumulates exact gradients. Everything is
//! single-threaded and allocation-order deterministic, so two runs of the same
//! program produce bit-identical results.
//!
//! The op set is deliberately small: dense linear algebra plus the handful of
//! fused kernels (attention, layer norm, row normalization, per-row generated
//! linear layers) that the models in this crate need. Values are `Array2<f64>`
//! throughout; scalars are 1x1 matrices.

use ndarray::{s, Array1, Array2};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(usize);

enum Op {
    Leaf,
    /// a (n,k) . b (k,m)
    Matmul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    /// forward value replaced wholesale; gradient passes through unchanged
    OverrideValue(Var),
    /// x (n,c) + bias (1,c)
    AddBias(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    /// x + constant matrix (no gradient through the constant)
    AddConst(Var),
    Tanh(Var),
    Sigmoid(Var),
    Gelu(Var),
    /// ln(clamp(x, lo, hi)); zero gradient where the clamp is active
    LogClamped { x: Var, lo: f64, hi: f64 },
    /// x (n,c) * col (n,1), broadcast across columns
    MulCol(Var, Var),
    SoftmaxRows(Var),
    /// rows scaled to unit L2 norm; `norms` cached for backward
    RowL2Normalize { x: Var, norms: Array1<f64> },
    /// per-row L2 norm -> (n,1)
    RowNorm(Var),
    /// per-row dot product -> (n,1)
    RowDot(Var, Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Array2<f64>,
        rstd: Array1<f64>,
    },
    /// multi-head causal self-attention over contiguous row blocks
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        blocks: Vec<(usize, usize)>,
        probs: Vec<Array2<f64>>,
    },
    /// out[n,o] = sum_i w[n, o*in_dim+i] * x[n,i] + b[n,o]
    RowwiseLinear {
        w: Var,
        b: Var,
        x: Var,
        out_dim: usize,
        in_dim: usize,
    },
    /// out[n,i] = sum_o w[n, o*in_dim+i] * m[n,o]  (transposed application)
    RowwiseLinearT {
        w: Var,
        m: Var,
        out_dim: usize,
        in_dim: usize,
    },
    /// row-major relayout to a new shape with the same element count
    Reshape(Var),
    ConcatCols(Vec<(Var, usize)>),
    SliceCols { x: Var, start: usize, width: usize },
    /// out[r,:] = x[idx[r],:]; backward scatter-adds (shared rows accumulate)
    SelectRows { x: Var, idx: Vec<usize> },
    /// out[r,0] = x[r, idx[r]]
    GatherCols { x: Var, idx: Vec<usize> },
    MeanAll(Var),
    /// sum_n w[n] * x[n,:] -> (1,c)
    WeightedRowSum { x: Var, w: Array1<f64> },
}

struct Node {
    value: Array2<f64>,
    rg: bool,
    op: Op,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads[v.0].as_ref()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].rg
    }

    fn push(&mut self, value: Array2<f64>, rg: bool, op: Op) -> Var {
        self.nodes.push(Node { value, rg, op });
        Var(self.nodes.len() - 1)
    }

    /// Tracked input; gradients are accumulated for it when `requires_grad`.
    pub fn leaf(&mut self, value: Array2<f64>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Untracked constant.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, false, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(v, rg, Op::Matmul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, rg, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, rg, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, rg, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) / self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, rg, Op::Div(a, b))
    }

    /// Straight-through node: the forward value becomes `value` exactly while
    /// gradients flow into `x` as if the node were `x` itself.
    pub fn override_value(&mut self, x: Var, value: Array2<f64>) -> Var {
        debug_assert_eq!(self.value(x).raw_dim(), value.raw_dim());
        let rg = self.rg(x);
        self.push(value, rg, Op::OverrideValue(x))
    }

    /// Cut the graph: same value, no gradient.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.constant(v)
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let v = self.value(x) + self.value(bias);
        let rg = self.rg(x) || self.rg(bias);
        self.push(v, rg, Op::AddBias(x, bias))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x) * c;
        let rg = self.rg(x);
        self.push(v, rg, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x) + c;
        let rg = self.rg(x);
        self.push(v, rg, Op::AddScalar(x))
    }

    /// `x + c` where `c` is data, not a tracked value.
    pub fn add_const(&mut self, x: Var, c: &Array2<f64>) -> Var {
        let v = self.value(x) + c;
        let rg = self.rg(x);
        self.push(v, rg, Op::AddConst(x))
    }

    pub fn one_minus(&mut self, x: Var) -> Var {
        let neg = self.scale(x, -1.0);
        self.add_scalar(neg, 1.0)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(f64::tanh);
        let rg = self.rg(x);
        self.push(v, rg, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(sigmoid);
        let rg = self.rg(x);
        self.push(v, rg, Op::Sigmoid(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(gelu);
        let rg = self.rg(x);
        self.push(v, rg, Op::Gelu(x))
    }

    pub fn log_clamped(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(x).mapv(|t| t.clamp(lo, hi).ln());
        let rg = self.rg(x);
        self.push(v, rg, Op::LogClamped { x, lo, hi })
    }

    pub fn mul_col(&mut self, x: Var, col: Var) -> Var {
        debug_assert_eq!(self.value(col).ncols(), 1);
        let v = self.value(x) * self.value(col);
        let rg = self.rg(x) || self.rg(col);
        self.push(v, rg, Op::MulCol(x, col))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut v = xv.clone();
        for mut row in v.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|t| (t - max).exp());
            let sum: f64 = row.sum();
            row.mapv_inplace(|t| t / sum);
        }
        let rg = self.rg(x);
        self.push(v, rg, Op::SoftmaxRows(x))
    }

    /// Scale every row to unit L2 norm. Norms are floored at `1e-12`.
    pub fn row_l2_normalize(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut norms = Array1::zeros(xv.nrows());
        let mut v = xv.clone();
        for (i, mut row) in v.rows_mut().into_iter().enumerate() {
            let n = row.dot(&row).sqrt().max(1e-12);
            norms[i] = n;
            row.mapv_inplace(|t| t / n);
        }
        let rg = self.rg(x);
        self.push(v, rg, Op::RowL2Normalize { x, norms })
    }

    /// Per-row L2 norm, floored at `1e-12` so downstream divisions stay
    /// finite for zero rows.
    pub fn row_norm(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut v = Array2::zeros((xv.nrows(), 1));
        for (i, row) in xv.rows().into_iter().enumerate() {
            v[(i, 0)] = row.dot(&row).sqrt().max(1e-12);
        }
        let rg = self.rg(x);
        self.push(v, rg, Op::RowNorm(x))
    }

    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let mut v = Array2::zeros((av.nrows(), 1));
        for i in 0..av.nrows() {
            v[(i, 0)] = av.row(i).dot(&bv.row(i));
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(v, rg, Op::RowDot(a, b))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        const EPS: f64 = 1e-5;
        let xv = self.value(x);
        let c = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut rstd = Array1::zeros(xv.nrows());
        for (i, mut row) in xhat.rows_mut().into_iter().enumerate() {
            let mean = row.sum() / c;
            row.mapv_inplace(|t| t - mean);
            let var = row.dot(&row) / c;
            let r = 1.0 / (var + EPS).sqrt();
            rstd[i] = r;
            row.mapv_inplace(|t| t * r);
        }
        let v = &xhat * self.value(gain) + self.value(bias);
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(
            v,
            rg,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        )
    }

    /// Multi-head causal self-attention. Rows of `q`/`k`/`v` are the
    /// concatenated tokens of several sequences; `lens` gives each sequence's
    /// length. Token `i` of a sequence attends to tokens `0..=i` of the same
    /// sequence only.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, heads: usize, lens: &[usize]) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let dim = qv.ncols();
        assert_eq!(dim % heads, 0, "feature dim must divide into heads");
        let hd = dim / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let total: usize = lens.iter().sum();
        assert_eq!(total, qv.nrows(), "block lengths must cover all rows");

        let mut blocks = Vec::with_capacity(lens.len());
        let mut offset = 0;
        for &len in lens {
            blocks.push((offset, len));
            offset += len;
        }

        let mut out = Array2::zeros(qv.raw_dim());
        let mut probs = Vec::with_capacity(blocks.len() * heads);
        for &(off, len) in &blocks {
            for h in 0..heads {
                let cols = h * hd..(h + 1) * hd;
                let qb = qv.slice(s![off..off + len, cols.clone()]);
                let kb = kv.slice(s![off..off + len, cols.clone()]);
                let vb = vv.slice(s![off..off + len, cols.clone()]);
                let mut scores = qb.dot(&kb.t());
                scores *= scale;
                // causal softmax, row i over columns 0..=i
                for i in 0..len {
                    let mut row = scores.row_mut(i);
                    let row = row.as_slice_mut().expect("contiguous rows");
                    let max = row[..=i].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut sum = 0.0;
                    for v in &mut row[..=i] {
                        *v = (*v - max).exp();
                        sum += *v;
                    }
                    for v in &mut row[..=i] {
                        *v /= sum;
                    }
                    for v in &mut row[i + 1..] {
                        *v = 0.0;
                    }
                }
                let ob = scores.dot(&vb);
                out.slice_mut(s![off..off + len, cols]).assign(&ob);
                probs.push(scores);
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(
            out,
            rg,
            Op::Attention {
                q,
                k,
                v,
                heads,
                blocks,
                probs,
            },
        )
    }

    /// Apply a distinct generated linear layer to each row:
    /// `out[n] = W_n x[n] + b[n]` with `W_n` stored flattened row-major.
    pub fn rowwise_linear(&mut self, w: Var, b: Var, x: Var, out_dim: usize, in_dim: usize) -> Var {
        let (wv, bv, xv) = (self.value(w), self.value(b), self.value(x));
        let n = xv.nrows();
        assert_eq!(wv.ncols(), out_dim * in_dim);
        assert_eq!(xv.ncols(), in_dim);
        assert_eq!(bv.ncols(), out_dim);
        let mut out = Array2::zeros((n, out_dim));
        for r in 0..n {
            let wr = wv.row(r);
            let wr = wr.as_slice().expect("contiguous rows");
            let xr = xv.row(r);
            let xr = xr.as_slice().expect("contiguous rows");
            let mut orow = out.row_mut(r);
            let orow = orow.as_slice_mut().expect("contiguous rows");
            for o in 0..out_dim {
                let base = o * in_dim;
                let dot: f64 = wr[base..base + in_dim]
                    .iter()
                    .zip(xr)
                    .map(|(a, b)| a * b)
                    .sum();
                orow[o] = bv[(r, o)] + dot;
            }
        }
        let rg = self.rg(w) || self.rg(b) || self.rg(x);
        self.push(
            out,
            rg,
            Op::RowwiseLinear {
                w,
                b,
                x,
                out_dim,
                in_dim,
            },
        )
    }

    /// Transposed per-row application: `out[n] = W_n^T m[n]`.
    pub fn rowwise_linear_t(&mut self, w: Var, m: Var, out_dim: usize, in_dim: usize) -> Var {
        let (wv, mv) = (self.value(w), self.value(m));
        let n = mv.nrows();
        assert_eq!(wv.ncols(), out_dim * in_dim);
        assert_eq!(mv.ncols(), out_dim);
        let mut out = Array2::zeros((n, in_dim));
        for r in 0..n {
            let wr = wv.row(r);
            let wr = wr.as_slice().expect("contiguous rows");
            let mr = mv.row(r);
            let mut orow = out.row_mut(r);
            let orow = orow.as_slice_mut().expect("contiguous rows");
            for o in 0..out_dim {
                let base = o * in_dim;
                let m_ro = mr[o];
                for (acc, w) in orow.iter_mut().zip(&wr[base..base + in_dim]) {
                    *acc += w * m_ro;
                }
            }
        }
        let rg = self.rg(w) || self.rg(m);
        self.push(
            out,
            rg,
            Op::RowwiseLinearT {
                w,
                m,
                out_dim,
                in_dim,
            },
        )
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.len(), rows * cols, "reshape must preserve element count");
        let flat: Vec<f64> = xv.iter().cloned().collect();
        let v = Array2::from_shape_vec((rows, cols), flat).expect("shape checked");
        let rg = self.rg(x);
        self.push(v, rg, Op::Reshape(x))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let n = self.value(parts[0]).nrows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).ncols()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Array2::zeros((n, total));
        let mut at = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            out.slice_mut(s![.., at..at + w]).assign(self.value(p));
            at += w;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        let spec = parts.iter().cloned().zip(widths).collect();
        self.push(out, rg, Op::ConcatCols(spec))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Var {
        let v = self.value(x).slice(s![.., start..start + width]).to_owned();
        let rg = self.rg(x);
        self.push(v, rg, Op::SliceCols { x, start, width })
    }

    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let xv = self.value(x);
        let mut out = Array2::zeros((idx.len(), xv.ncols()));
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).assign(&xv.row(i));
        }
        let rg = self.rg(x);
        self.push(
            out,
            rg,
            Op::SelectRows {
                x,
                idx: idx.to_vec(),
            },
        )
    }

    pub fn gather_cols(&mut self, x: Var, idx: &[usize]) -> Var {
        let xv = self.value(x);
        assert_eq!(idx.len(), xv.nrows());
        let mut out = Array2::zeros((idx.len(), 1));
        for (r, &c) in idx.iter().enumerate() {
            out[(r, 0)] = xv[(r, c)];
        }
        let rg = self.rg(x);
        self.push(
            out,
            rg,
            Op::GatherCols {
                x,
                idx: idx.to_vec(),
            },
        )
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let v = Array2::from_elem((1, 1), xv.sum() / xv.len() as f64);
        let rg = self.rg(x);
        self.push(v, rg, Op::MeanAll(x))
    }

    /// Weighted sum of rows with fixed weights: `sum_n w[n] x[n,:]`.
    pub fn weighted_row_sum(&mut self, x: Var, w: Array1<f64>) -> Var {
        let xv = self.value(x);
        assert_eq!(w.len(), xv.nrows());
        let mut out = Array2::zeros((1, xv.ncols()));
        for (i, row) in xv.rows().into_iter().enumerate() {
            let wi = w[i];
            if wi != 0.0 {
                out.row_mut(0).scaled_add(wi, &row);
            }
        }
        let rg = self.rg(x);
        self.push(out, rg, Op::WeightedRowSum { x, w })
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        debug_assert_eq!(val.len(), 1);
        val[(0, 0)]
    }

    /// Reverse pass from a scalar node. Non-`requires_grad` subgraphs are
    /// skipped entirely.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        let lv = self.value(loss);
        assert_eq!(lv.len(), 1, "backward expects a scalar loss");
        grads[loss.0] = Some(Array2::from_elem((1, 1), 1.0));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].rg {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.accumulate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn add_grad(&self, grads: &mut [Option<Array2<f64>>], v: Var, delta: Array2<f64>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => *g += &delta,
            slot => *slot = Some(delta),
        }
    }

    fn accumulate(&self, i: usize, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                if self.rg(*a) {
                    let d = g.dot(&self.value(*b).t());
                    self.add_grad(grads, *a, d);
                }
                if self.rg(*b) {
                    let d = self.value(*a).t().dot(g);
                    self.add_grad(grads, *b, d);
                }
            }
            Op::Add(a, b) => {
                self.add_grad(grads, *a, g.clone());
                self.add_grad(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.add_grad(grads, *a, g.clone());
                self.add_grad(grads, *b, -g);
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    self.add_grad(grads, *a, g * self.value(*b));
                }
                if self.rg(*b) {
                    self.add_grad(grads, *b, g * self.value(*a));
                }
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                if self.rg(*a) {
                    self.add_grad(grads, *a, g / bv);
                }
                if self.rg(*b) {
                    let av = self.value(*a);
                    self.add_grad(grads, *b, -(g * av) / (bv * bv));
                }
            }
            Op::OverrideValue(x) => self.add_grad(grads, *x, g.clone()),
            Op::AddBias(x, bias) => {
                self.add_grad(grads, *x, g.clone());
                if self.rg(*bias) {
                    let mut d = Array2::zeros((1, g.ncols()));
                    for row in g.rows() {
                        d.row_mut(0).scaled_add(1.0, &row);
                    }
                    self.add_grad(grads, *bias, d);
                }
            }
            Op::Scale(x, c) => self.add_grad(grads, *x, g * *c),
            Op::AddScalar(x) | Op::AddConst(x) => self.add_grad(grads, *x, g.clone()),
            Op::Tanh(x) => {
                let y = &self.nodes[i].value;
                self.add_grad(grads, *x, g * &y.mapv(|t| 1.0 - t * t));
            }
            Op::Sigmoid(x) => {
                let y = &self.nodes[i].value;
                self.add_grad(grads, *x, g * &y.mapv(|t| t * (1.0 - t)));
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                self.add_grad(grads, *x, g * &xv.mapv(gelu_deriv));
            }
            Op::LogClamped { x, lo, hi } => {
                let xv = self.value(*x);
                let d = xv.mapv(|t| if t > *lo && t < *hi { 1.0 / t } else { 0.0 });
                self.add_grad(grads, *x, g * &d);
            }
            Op::MulCol(x, col) => {
                if self.rg(*x) {
                    self.add_grad(grads, *x, g * self.value(*col));
                }
                if self.rg(*col) {
                    let xv = self.value(*x);
                    let mut d = Array2::zeros((xv.nrows(), 1));
                    for r in 0..xv.nrows() {
                        d[(r, 0)] = g.row(r).dot(&xv.row(r));
                    }
                    self.add_grad(grads, *col, d);
                }
            }
            Op::SoftmaxRows(x) => {
                let y = &self.nodes[i].value;
                let mut d = g * y;
                for (r, mut row) in d.rows_mut().into_iter().enumerate() {
                    let dot: f64 = row.sum();
                    let yr = y.row(r);
                    for (c, t) in row.iter_mut().enumerate() {
                        *t -= dot * yr[c];
                    }
                }
                self.add_grad(grads, *x, d);
            }
            Op::RowL2Normalize { x, norms } => {
                let y = &self.nodes[i].value;
                let mut d = g.clone();
                for (r, mut row) in d.rows_mut().into_iter().enumerate() {
                    let yr = y.row(r);
                    let dot = row.dot(&yr);
                    for (c, t) in row.iter_mut().enumerate() {
                        *t = (*t - dot * yr[c]) / norms[r];
                    }
                }
                self.add_grad(grads, *x, d);
            }
            Op::RowNorm(x) => {
                let xv = self.value(*x);
                let y = &self.nodes[i].value;
                let mut d = xv.clone();
                for (r, mut row) in d.rows_mut().into_iter().enumerate() {
                    let f = g[(r, 0)] / y[(r, 0)].max(1e-12);
                    row.mapv_inplace(|t| t * f);
                }
                self.add_grad(grads, *x, d);
            }
            Op::RowDot(a, b) => {
                if self.rg(*a) {
                    let mut d = self.value(*b).clone();
                    for (r, mut row) in d.rows_mut().into_iter().enumerate() {
                        row.mapv_inplace(|t| t * g[(r, 0)]);
                    }
                    self.add_grad(grads, *a, d);
                }
                if self.rg(*b) {
                    let mut d = self.value(*a).clone();
                    for (r, mut row) in d.rows_mut().into_iter().enumerate() {
                        row.mapv_inplace(|t| t * g[(r, 0)]);
                    }
                    self.add_grad(grads, *b, d);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let c = xhat.ncols() as f64;
                let gainv = self.value(*gain);
                if self.rg(*gain) {
                    let mut d = Array2::zeros((1, xhat.ncols()));
                    for (r, row) in g.rows().into_iter().enumerate() {
                        for (cix, t) in row.iter().enumerate() {
                            d[(0, cix)] += t * xhat[(r, cix)];
                        }
                    }
                    self.add_grad(grads, *gain, d);
                }
                if self.rg(*bias) {
                    let mut d = Array2::zeros((1, xhat.ncols()));
                    for row in g.rows() {
                        d.row_mut(0).scaled_add(1.0, &row);
                    }
                    self.add_grad(grads, *bias, d);
                }
                if self.rg(*x) {
                    let mut d = Array2::zeros(xhat.raw_dim());
                    for r in 0..xhat.nrows() {
                        let gr = g.row(r);
                        let xr = xhat.row(r);
                        let mut mean_dxhat = 0.0;
                        let mut mean_dxhat_xhat = 0.0;
                        for cix in 0..xhat.ncols() {
                            let dxh = gr[cix] * gainv[(0, cix)];
                            mean_dxhat += dxh;
                            mean_dxhat_xhat += dxh * xr[cix];
                        }
                        mean_dxhat /= c;
                        mean_dxhat_xhat /= c;
                        for cix in 0..xhat.ncols() {
                            let dxh = gr[cix] * gainv[(0, cix)];
                            d[(r, cix)] = rstd[r] * (dxh - mean_dxhat - xr[cix] * mean_dxhat_xhat);
                        }
                    }
                    self.add_grad(grads, *x, d);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                blocks,
                probs,
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let dim = qv.ncols();
                let hd = dim / heads;
                let scale = 1.0 / (hd as f64).sqrt();
                let mut dq = Array2::zeros(qv.raw_dim());
                let mut dk = Array2::zeros(kv.raw_dim());
                let mut dv = Array2::zeros(vv.raw_dim());
                let mut pi = 0;
                for &(off, len) in blocks {
                    for h in 0..*heads {
                        let cols = h * hd..(h + 1) * hd;
                        let p = &probs[pi];
                        pi += 1;
                        let gb = g.slice(s![off..off + len, cols.clone()]);
                        let qb = qv.slice(s![off..off + len, cols.clone()]);
                        let kb = kv.slice(s![off..off + len, cols.clone()]);
                        let vb = vv.slice(s![off..off + len, cols.clone()]);

                        // dV = P^T dO
                        let dvb = p.t().dot(&gb);
                        dv.slice_mut(s![off..off + len, cols.clone()])
                            .scaled_add(1.0, &dvb);

                        // dP = dO V^T, then softmax backward row-wise
                        let mut dp = gb.dot(&vb.t());
                        for r in 0..len {
                            let pr = p.row(r);
                            let pr = pr.as_slice().expect("contiguous rows");
                            let mut row = dp.row_mut(r);
                            let row = row.as_slice_mut().expect("contiguous rows");
                            let dot: f64 = row[..=r].iter().zip(&pr[..=r]).map(|(a, b)| a * b).sum();
                            for (v, pj) in row[..=r].iter_mut().zip(&pr[..=r]) {
                                *v = pj * (*v - dot) * scale;
                            }
                            for v in &mut row[r + 1..] {
                                *v = 0.0;
                            }
                        }

                        let dqb = dp.dot(&kb);
                        dq.slice_mut(s![off..off + len, cols.clone()])
                            .scaled_add(1.0, &dqb);
                        let dkb = dp.t().dot(&qb);
                        dk.slice_mut(s![off..off + len, cols])
                            .scaled_add(1.0, &dkb);
                    }
                }
                self.add_grad(grads, *q, dq);
                self.add_grad(grads, *k, dk);
                self.add_grad(grads, *v, dv);
            }
            Op::RowwiseLinear {
                w,
                b,
                x,
                out_dim,
                in_dim,
            } => {
                let (wv, xv) = (self.value(*w), self.value(*x));
                let n = xv.nrows();
                if self.rg(*w) {
                    let mut d = Array2::zeros(wv.raw_dim());
                    for r in 0..n {
                        let xr = xv.row(r);
                        let xr = xr.as_slice().expect("contiguous rows");
                        let mut drow = d.row_mut(r);
                        let drow = drow.as_slice_mut().expect("contiguous rows");
                        for o in 0..*out_dim {
                            let go = g[(r, o)];
                            let base = o * in_dim;
                            for (dst, xi) in drow[base..base + *in_dim].iter_mut().zip(xr) {
                                *dst = go * xi;
                            }
                        }
                    }
                    self.add_grad(grads, *w, d);
                }
                if self.rg(*b) {
                    self.add_grad(grads, *b, g.clone());
                }
                if self.rg(*x) {
                    let mut d = Array2::zeros(xv.raw_dim());
                    for r in 0..n {
                        let wr = wv.row(r);
                        let wr = wr.as_slice().expect("contiguous rows");
                        let mut drow = d.row_mut(r);
                        let drow = drow.as_slice_mut().expect("contiguous rows");
                        for o in 0..*out_dim {
                            let go = g[(r, o)];
                            let base = o * in_dim;
                            for (dst, w) in drow.iter_mut().zip(&wr[base..base + *in_dim]) {
                                *dst += w * go;
                            }
                        }
                    }
                    self.add_grad(grads, *x, d);
                }
            }
            Op::RowwiseLinearT {
                w,
                m,
                out_dim,
                in_dim,
            } => {
                let (wv, mv) = (self.value(*w), self.value(*m));
                let n = mv.nrows();
                if self.rg(*w) {
                    let mut d = Array2::zeros(wv.raw_dim());
                    for r in 0..n {
                        let mr = mv.row(r);
                        let gr = g.row(r);
                        let gr = gr.as_slice().expect("contiguous rows");
                        let mut drow = d.row_mut(r);
                        let drow = drow.as_slice_mut().expect("contiguous rows");
                        for o in 0..*out_dim {
                            let base = o * in_dim;
                            let m_ro = mr[o];
                            for (dst, gi) in drow[base..base + *in_dim].iter_mut().zip(gr) {
                                *dst = gi * m_ro;
                            }
                        }
                    }
                    self.add_grad(grads, *w, d);
                }
                if self.rg(*m) {
                    let mut d = Array2::zeros(mv.raw_dim());
                    for r in 0..n {
                        let wr = wv.row(r);
                        let wr = wr.as_slice().expect("contiguous rows");
                        let gr = g.row(r);
                        let gr = gr.as_slice().expect("contiguous rows");
                        for o in 0..*out_dim {
                            let base = o * in_dim;
                            let dot: f64 = wr[base..base + *in_dim]
                                .iter()
                                .zip(gr)
                                .map(|(a, b)| a * b)
                                .sum();
                            d[(r, o)] = dot;
                        }
                    }
                    self.add_grad(grads, *m, d);
                }
            }
            Op::Reshape(x) => {
                let xv = self.value(*x);
                let flat: Vec<f64> = g.iter().cloned().collect();
                let d = Array2::from_shape_vec(xv.raw_dim(), flat).expect("same element count");
                self.add_grad(grads, *x, d);
            }
            Op::ConcatCols(parts) => {
                let mut at = 0;
                for &(p, w) in parts {
                    if self.rg(p) {
                        let d = g.slice(s![.., at..at + w]).to_owned();
                        self.add_grad(grads, p, d);
                    }
                    at += w;
                }
            }
            Op::SliceCols { x, start, width } => {
                let xv = self.value(*x);
                let mut d = Array2::zeros(xv.raw_dim());
                d.slice_mut(s![.., *start..*start + *width]).assign(g);
                self.add_grad(grads, *x, d);
            }
            Op::SelectRows { x, idx } => {
                let xv = self.value(*x);
                let mut d = Array2::zeros(xv.raw_dim());
                for (r, &i2) in idx.iter().enumerate() {
                    d.row_mut(i2).scaled_add(1.0, &g.row(r));
                }
                self.add_grad(grads, *x, d);
            }
            Op::GatherCols { x, idx } => {
                let xv = self.value(*x);
                let mut d = Array2::zeros(xv.raw_dim());
                for (r, &c) in idx.iter().enumerate() {
                    d[(r, c)] += g[(r, 0)];
                }
                self.add_grad(grads, *x, d);
            }
            Op::MeanAll(x) => {
                let xv = self.value(*x);
                let n = xv.len() as f64;
                self.add_grad(grads, *x, Array2::from_elem(xv.raw_dim(), g[(0, 0)] / n));
            }
            Op::WeightedRowSum { x, w } => {
                let xv = self.value(*x);
                let mut d = Array2::zeros(xv.raw_dim());
                for (r, mut row) in d.rows_mut().into_iter().enumerate() {
                    if w[r] != 0.0 {
                        row.scaled_add(w[r], &g.row(0));
                    }
                }
                self.add_grad(grads, *x, d);
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_deriv(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}
