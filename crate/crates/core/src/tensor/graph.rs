use std::rc::Rc;

use super::linalg::gemm;
use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::ssm::raw;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How [`Graph::ssm_scan`] evaluates its forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SsmStrategy {
    #[default]
    Recurrent,
    Kernel,
}

/// Sparse linear row mixing: output row `r` is `Σ w · x[src]` over the
/// entries of row `r`. Gathers, flips, zero-padded im2col tables and
/// bilinear interpolation are all instances.
#[derive(Clone, Debug, PartialEq)]
pub struct RowMix {
    src_rows: usize,
    offsets: Vec<usize>,
    entries: Vec<(usize, f64)>,
}

impl RowMix {
    pub fn from_rows(src_rows: usize, rows: &[Vec<(usize, f64)>]) -> Result<Self> {
        let mut offsets = Vec::with_capacity(rows.len() + 1);
        let mut entries = Vec::new();
        offsets.push(0);
        for row in rows {
            for &(i, w) in row {
                if i >= src_rows {
                    return Err(Error::contract(format!(
                        "row mix index {i} out of range for {src_rows} source rows"
                    )));
                }
                entries.push((i, w));
            }
            offsets.push(entries.len());
        }
        Ok(Self {
            src_rows,
            offsets,
            entries,
        })
    }

    pub fn gather(src_rows: usize, idx: &[usize]) -> Result<Self> {
        Self::gather_padded(src_rows, &idx.iter().map(|&i| Some(i)).collect::<Vec<_>>())
    }

    /// `None` entries produce zero rows.
    pub fn gather_padded(src_rows: usize, idx: &[Option<usize>]) -> Result<Self> {
        let mut offsets = Vec::with_capacity(idx.len() + 1);
        let mut entries = Vec::with_capacity(idx.len());
        offsets.push(0);
        for &i in idx {
            if let Some(i) = i {
                if i >= src_rows {
                    return Err(Error::contract(format!(
                        "gather index {i} out of range for {src_rows} source rows"
                    )));
                }
                entries.push((i, 1.0));
            }
            offsets.push(entries.len());
        }
        Ok(Self {
            src_rows,
            offsets,
            entries,
        })
    }

    /// Flips the row order.
    pub fn reverse(n: usize) -> Self {
        Self::gather(n, &(0..n).rev().collect::<Vec<_>>()).expect("indices in range")
    }

    pub fn src_rows(&self) -> usize {
        self.src_rows
    }

    pub fn out_rows(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn row(&self, r: usize) -> &[(usize, f64)] {
        &self.entries[self.offsets[r]..self.offsets[r + 1]]
    }
}

#[derive(Debug)]
enum Op {
    Leaf { param: Option<ParamId> },
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Expm1(Var),
    Gelu(Var),
    Sigmoid(Var),
    LeakyRelu(Var, f64),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Mix(Var, Rc<RowMix>),
    ConcatCols(Vec<Var>),
    GroupMax {
        x: Var,
        argmax: Vec<usize>,
    },
    Sum(Var),
    SmoothL1(Var),
    RowNorm(Var),
    SsmScan {
        u: Var,
        abar: Var,
        bbar: Var,
        cbar: Var,
        dbar: Var,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// One forward pass worth of recorded operations.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    ssm_strategy: SsmStrategy,
}

pub(crate) const SMOOTH_L1_KNEE: f64 = 0.01;

pub(crate) fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

pub(crate) fn smooth_l1_scalar(x: f64) -> f64 {
    let a = x.abs();
    if a < SMOOTH_L1_KNEE {
        0.5 * a
    } else {
        a - 0.5 * SMOOTH_L1_KNEE
    }
}

fn smooth_l1_deriv(x: f64) -> f64 {
    let s = if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    };
    if x.abs() < SMOOTH_L1_KNEE {
        0.5 * s
    } else {
        s
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_ssm_strategy(strategy: SsmStrategy) -> Self {
        Self {
            ssm_strategy: strategy,
            ..Self::default()
        }
    }

    pub fn ssm_strategy(&self) -> SsmStrategy {
        self.ssm_strategy
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward root with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf { param: None }, false)
    }

    /// A non-parameter leaf that still receives a gradient.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf { param: None }, true)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Leaf { param: Some(id) }, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::dim("transpose", s, &[2]));
        }
        let (r, c) = (s[0], s[1]);
        let x = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x[i * c + j];
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(&[c, r], out)?, Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    fn zip(&mut self, op_name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim(op_name, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(ta.shape(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// `x[.., c] + v[c]`.
    pub fn add_row(&mut self, x: Var, v: Var) -> Result<Var> {
        let (tx, tv) = (self.value(x), self.value(v));
        let c = tx.cols();
        if tv.len() != c {
            return Err(Error::dim("add_row", tx.shape(), tv.shape()));
        }
        let vd = tv.data();
        let data = tx.data().iter().enumerate().map(|(i, &a)| a + vd[i % c]).collect();
        let t = Tensor::new(tx.shape(), data)?;
        let rg = self.rg(&[x, v]);
        Ok(self.push(t, Op::AddRow(x, v), rg))
    }

    /// `x[.., c] * v[c]`.
    pub fn mul_row(&mut self, x: Var, v: Var) -> Result<Var> {
        let (tx, tv) = (self.value(x), self.value(v));
        let c = tx.cols();
        if tv.len() != c {
            return Err(Error::dim("mul_row", tx.shape(), tv.shape()));
        }
        let vd = tv.data();
        let data = tx.data().iter().enumerate().map(|(i, &a)| a * vd[i % c]).collect();
        let t = Tensor::new(tx.shape(), data)?;
        let rg = self.rg(&[x, v]);
        Ok(self.push(t, Op::MulRow(x, v), rg))
    }

    /// `x[r, c] * v[r]`.
    pub fn mul_col(&mut self, x: Var, v: Var) -> Result<Var> {
        let (tx, tv) = (self.value(x), self.value(v));
        let c = tx.cols();
        if tv.len() != tx.rows() {
            return Err(Error::dim("mul_col", tx.shape(), tv.shape()));
        }
        let vd = tv.data();
        let data = tx.data().iter().enumerate().map(|(i, &a)| a * vd[i / c]).collect();
        let t = Tensor::new(tx.shape(), data)?;
        let rg = self.rg(&[x, v]);
        Ok(self.push(t, Op::MulCol(x, v), rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(a).map(f);
        let rg = self.rg(&[a]);
        self.push(t, op, rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| s * x, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x + s, Op::AddScalar(a))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn expm1(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp_m1, Op::Expm1(a))
    }

    /// Exact GELU, `x · Φ(x)`.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * std_normal_cdf(x), Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(a, |x| if x > 0.0 { x } else { slope * x }, Op::LeakyRelu(a, slope))
    }

    pub fn smooth_l1(&mut self, a: Var) -> Var {
        self.unary(a, smooth_l1_scalar, Op::SmoothL1(a))
    }

    /// Normalizes every row of the last dimension, then applies `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let c = tx.cols();
        if c < 2 {
            return Err(Error::contract("layer_norm needs at least 2 channels"));
        }
        if self.value(gain).len() != c || self.value(bias).len() != c {
            return Err(Error::dim("layer_norm", tx.shape(), self.value(gain).shape()));
        }
        let rows = tx.rows();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut xhat = vec![0.0; rows * c];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * c];
        for r in 0..rows {
            let row = &tx.data()[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[r * c + j] = h;
                out[r * c + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(tx.shape(), out)?;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Applies a [`RowMix`] to a rank-2 tensor.
    pub fn mix(&mut self, x: Var, table: Rc<RowMix>) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 2 || tx.shape()[0] != table.src_rows() {
            return Err(Error::dim("mix", tx.shape(), &[table.src_rows()]));
        }
        let c = tx.cols();
        let xd = tx.data();
        let o = table.out_rows();
        let mut out = vec![0.0; o * c];
        for r in 0..o {
            let dst = &mut out[r * c..(r + 1) * c];
            for &(i, w) in table.row(r) {
                let src = &xd[i * c..(i + 1) * c];
                if w == 1.0 {
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                } else {
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += w * s;
                    }
                }
            }
        }
        let t = Tensor::new(&[o, c], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Mix(x, table), rg))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let n = self.value(x).shape()[0];
        let table = Rc::new(RowMix::gather(n, idx)?);
        self.mix(x, table)
    }

    /// Flips the leading axis of a rank-2 tensor.
    pub fn reverse_rows(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).shape()[0];
        self.mix(x, Rc::new(RowMix::reverse(n)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat_cols of zero tensors"))?;
        let rows = self.value(*first).shape()[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != rows {
                return Err(Error::dim("concat_cols", self.shape(*first), s));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let d = self.value(p).data();
            for r in 0..rows {
                out[r * total + off..r * total + off + w].copy_from_slice(&d[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let t = Tensor::new(&[rows, total], out)?;
        let rg = self.rg(parts);
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Elementwise max over consecutive groups of `k` rows: `[g·k × c] → [g × c]`.
    /// Ties resolve to the earliest row.
    pub fn group_max(&mut self, x: Var, k: usize) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 2 || k == 0 || tx.shape()[0] % k != 0 {
            return Err(Error::dim("group_max", tx.shape(), &[k]));
        }
        let c = tx.cols();
        let groups = tx.shape()[0] / k;
        let xd = tx.data();
        let mut out = vec![f64::NEG_INFINITY; groups * c];
        let mut argmax = vec![0usize; groups * c];
        for g in 0..groups {
            for r in g * k..(g + 1) * k {
                for j in 0..c {
                    let v = xd[r * c + j];
                    if v > out[g * c + j] || r == g * k {
                        out[g * c + j] = v;
                        argmax[g * c + j] = r;
                    }
                }
            }
        }
        let t = Tensor::new(&[groups, c], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::GroupMax { x, argmax }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Euclidean norm of each row: `[r × c] → [r]`.
    pub fn row_norm(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 2 {
            return Err(Error::dim("row_norm", tx.shape(), &[2]));
        }
        let r = tx.rows();
        let data = (0..r)
            .map(|i| tx.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let t = Tensor::new(&[r], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::RowNorm(x), rg))
    }

    /// Channel-wise diagonal SSM along the leading axis of `u: [L×C]`.
    /// `abar`, `bbar`, `cbar` are `[C×N]`, `dbar` is `[C]`.
    pub fn ssm_scan(&mut self, u: Var, abar: Var, bbar: Var, cbar: Var, dbar: Var) -> Result<Var> {
        let tu = self.value(u);
        if tu.rank() != 2 {
            return Err(Error::dim("ssm_scan", tu.shape(), &[2]));
        }
        let (l, c) = (tu.shape()[0], tu.shape()[1]);
        let ta = self.value(abar);
        if ta.rank() != 2 || ta.shape()[0] != c {
            return Err(Error::dim("ssm_scan", tu.shape(), ta.shape()));
        }
        let n = ta.shape()[1];
        for v in [bbar, cbar] {
            if self.shape(v) != ta.shape() {
                return Err(Error::dim("ssm_scan", ta.shape(), self.shape(v)));
            }
        }
        if self.value(dbar).len() != c {
            return Err(Error::dim("ssm_scan", tu.shape(), self.shape(dbar)));
        }
        let dims = raw::Dims { len: l, channels: c, state: n };
        let (ad, bd, cd, dd) = (
            self.value(abar).data(),
            self.value(bbar).data(),
            self.value(cbar).data(),
            self.value(dbar).data(),
        );
        let out = match self.ssm_strategy {
            SsmStrategy::Recurrent => raw::scan(dims, tu.data(), ad, bd, cd, dd),
            SsmStrategy::Kernel => {
                let taps = raw::kernel_taps(dims, ad, bd, cd);
                raw::causal_conv(dims, &taps, dd, tu.data())
            }
        };
        let t = Tensor::new(&[l, c], out)?;
        let rg = self.rg(&[u, abar, bbar, cbar, dbar]);
        Ok(self.push(
            t,
            Op::SsmScan {
                u,
                abar,
                bbar,
                cbar,
                dbar,
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar `root`; parameter gradients are added to
    /// `store` (they accumulate across calls until [`ParamStore::zero_grad`]).
    pub fn backward(&mut self, root: Var, store: &mut ParamStore) -> Result<()> {
        self.compute_grads(root)?;
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(id) } = node.op {
                if let Some(g) = &self.grads[i] {
                    store.accumulate_grad(id, g.data());
                }
            }
        }
        Ok(())
    }

    /// Reverse pass that only fills the graph-local gradients.
    pub fn compute_grads(&mut self, root: Var) -> Result<()> {
        let rv = &self.nodes[root.0].value;
        if rv.len() != 1 {
            return Err(Error::contract(format!(
                "backward root must be a scalar, got shape {:?}",
                rv.shape()
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[root.0] = Some(Tensor::ones(rv.shape()));
        for i in (0..=root.0).rev() {
            let Some(gout) = self.grads[i].take() else {
                continue;
            };
            if self.nodes[i].requires_grad {
                propagate(&self.nodes, &mut self.grads, i, gout.data());
            }
            self.grads[i] = Some(gout);
        }
        Ok(())
    }
}

/// Logistic function, clamped so finite inputs never round to exactly 0 or 1.
pub(crate) fn sigmoid(x: f64) -> f64 {
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    s.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Tensor>], v: Var) -> Option<&'a mut [f64]> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(
        grads[v.0]
            .get_or_insert_with(|| Tensor::zeros(node.value.shape()))
            .data_mut(),
    )
}

fn propagate(nodes: &[Node], grads: &mut [Option<Tensor>], i: usize, g: &[f64]) {
    let node = &nodes[i];
    let val = |v: Var| nodes[v.0].value.data();
    let out = node.value.data();
    match &node.op {
        Op::Leaf { .. } => {}
        Op::MatMul(a, b) => {
            let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            if let Some(da) = slot(nodes, grads, *a) {
                gemm(m, n, k, g, false, val(*b), true, da, true);
            }
            if let Some(db) = slot(nodes, grads, *b) {
                gemm(k, m, n, val(*a), true, g, false, db, true);
            }
        }
        Op::Transpose(a) => {
            let s = nodes[a.0].value.shape();
            let (r, c) = (s[0], s[1]);
            if let Some(da) = slot(nodes, grads, *a) {
                for p in 0..r {
                    for q in 0..c {
                        da[p * c + q] += g[q * r + p];
                    }
                }
            }
        }
        Op::Reshape(a) | Op::AddScalar(a) => {
            if let Some(da) = slot(nodes, grads, *a) {
                add_into(da, g);
            }
        }
        Op::Add(a, b) => {
            if let Some(da) = slot(nodes, grads, *a) {
                add_into(da, g);
            }
            if let Some(db) = slot(nodes, grads, *b) {
                add_into(db, g);
            }
        }
        Op::Sub(a, b) => {
            if let Some(da) = slot(nodes, grads, *a) {
                add_into(da, g);
            }
            if let Some(db) = slot(nodes, grads, *b) {
                for (d, x) in db.iter_mut().zip(g) {
                    *d -= x;
                }
            }
        }
        Op::Mul(a, b) => {
            let (xa, xb) = (val(*a), val(*b));
            if let Some(da) = slot(nodes, grads, *a) {
                for j in 0..g.len() {
                    da[j] += g[j] * xb[j];
                }
            }
            if let Some(db) = slot(nodes, grads, *b) {
                for j in 0..g.len() {
                    db[j] += g[j] * xa[j];
                }
            }
        }
        Op::Div(a, b) => {
            let (xa, xb) = (val(*a), val(*b));
            if let Some(da) = slot(nodes, grads, *a) {
                for j in 0..g.len() {
                    da[j] += g[j] / xb[j];
                }
            }
            if let Some(db) = slot(nodes, grads, *b) {
                for j in 0..g.len() {
                    db[j] -= g[j] * xa[j] / (xb[j] * xb[j]);
                }
            }
        }
        Op::AddRow(x, v) => {
            let c = nodes[v.0].value.len();
            if let Some(dx) = slot(nodes, grads, *x) {
                add_into(dx, g);
            }
            if let Some(dv) = slot(nodes, grads, *v) {
                for (j, gj) in g.iter().enumerate() {
                    dv[j % c] += gj;
                }
            }
        }
        Op::MulRow(x, v) => {
            let c = nodes[v.0].value.len();
            let (xx, vv) = (val(*x), val(*v));
            if let Some(dx) = slot(nodes, grads, *x) {
                for j in 0..g.len() {
                    dx[j] += g[j] * vv[j % c];
                }
            }
            if let Some(dv) = slot(nodes, grads, *v) {
                for j in 0..g.len() {
                    dv[j % c] += g[j] * xx[j];
                }
            }
        }
        Op::MulCol(x, v) => {
            let c = nodes[x.0].value.cols();
            let (xx, vv) = (val(*x), val(*v));
            if let Some(dx) = slot(nodes, grads, *x) {
                for j in 0..g.len() {
                    dx[j] += g[j] * vv[j / c];
                }
            }
            if let Some(dv) = slot(nodes, grads, *v) {
                for j in 0..g.len() {
                    dv[j / c] += g[j] * xx[j];
                }
            }
        }
        Op::Scale(a, s) => {
            if let Some(da) = slot(nodes, grads, *a) {
                for (d, x) in da.iter_mut().zip(g) {
                    *d += s * x;
                }
            }
        }
        Op::Exp(a) => {
            if let Some(da) = slot(nodes, grads, *a) {
                for j in 0..g.len() {
                    da[j] += g[j] * out[j];
                }
            }
        }
        Op::Expm1(a) => {
            if let Some(da) = slot(nodes, grads, *a) {
                for j in 0..g.len() {
                    da[j] += g[j] * (out[j] + 1.0);
                }
            }
        }
        Op::Gelu(a) => {
            let x = val(*a);
            if let Some(da) = slot(nodes, grads, *a) {
                for j in 0..g.len() {
                    da[j] += g[j] * (std_normal_cdf(x[j]) + x[j] * std_normal_pdf(x[j]));
                }
            }
        }
        Op::Sigmoid(a) => {
            if let Some(da) = slot(nodes, grads, *a) {
                for j in 0..g.len() {
                    da[j] += g[j] * out[j] * (1.0 - out[j]);
                }
            }
        }
        Op::LeakyRelu(a, slope) => {
            let x = val(*a);
            if let Some(da) = slot(nodes, grads, *a) {
                for j in 0..g.len() {
                    da[j] += if x[j] > 0.0 { g[j] } else { slope * g[j] };
                }
            }
        }
        Op::SmoothL1(a) => {
            let x = val(*a);
            if let Some(da) = slot(nodes, grads, *a) {
                for j in 0..g.len() {
                    da[j] += g[j] * smooth_l1_deriv(x[j]);
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        } => {
            let c = nodes[gain.0].value.len();
            let rows = inv_std.len();
            let gv = val(*gain);
            if let Some(dg) = slot(nodes, grads, *gain) {
                for j in 0..g.len() {
                    dg[j % c] += g[j] * xhat[j];
                }
            }
            if let Some(db) = slot(nodes, grads, *bias) {
                for j in 0..g.len() {
                    db[j % c] += g[j];
                }
            }
            if let Some(dx) = slot(nodes, grads, *x) {
                let cf = c as f64;
                for r in 0..rows {
                    let (mut s1, mut s2) = (0.0, 0.0);
                    for j in 0..c {
                        let dh = g[r * c + j] * gv[j];
                        s1 += dh;
                        s2 += dh * xhat[r * c + j];
                    }
                    for j in 0..c {
                        let dh = g[r * c + j] * gv[j];
                        dx[r * c + j] += inv_std[r] / cf * (cf * dh - s1 - xhat[r * c + j] * s2);
                    }
                }
            }
        }
        Op::Mix(x, table) => {
            let c = nodes[x.0].value.cols();
            if let Some(dx) = slot(nodes, grads, *x) {
                for r in 0..table.out_rows() {
                    let src = &g[r * c..(r + 1) * c];
                    for &(s, w) in table.row(r) {
                        for (d, v) in dx[s * c..(s + 1) * c].iter_mut().zip(src) {
                            *d += w * v;
                        }
                    }
                }
            }
        }
        Op::ConcatCols(parts) => {
            let total = node.value.cols();
            let rows = node.value.rows();
            let mut off = 0;
            for p in parts {
                let w = nodes[p.0].value.cols();
                if let Some(dp) = slot(nodes, grads, *p) {
                    for r in 0..rows {
                        add_into(
                            &mut dp[r * w..(r + 1) * w],
                            &g[r * total + off..r * total + off + w],
                        );
                    }
                }
                off += w;
            }
        }
        Op::GroupMax { x, argmax } => {
            let c = nodes[x.0].value.cols();
            if let Some(dx) = slot(nodes, grads, *x) {
                for (j, &r) in argmax.iter().enumerate() {
                    dx[r * c + j % c] += g[j];
                }
            }
        }
        Op::Sum(a) => {
            if let Some(da) = slot(nodes, grads, *a) {
                for d in da.iter_mut() {
                    *d += g[0];
                }
            }
        }
        Op::RowNorm(a) => {
            let x = val(*a);
            let c = nodes[a.0].value.cols();
            if let Some(da) = slot(nodes, grads, *a) {
                for r in 0..out.len() {
                    if out[r] > 0.0 {
                        let s = g[r] / out[r];
                        for j in 0..c {
                            da[r * c + j] += s * x[r * c + j];
                        }
                    }
                }
            }
        }
        Op::SsmScan {
            u,
            abar,
            bbar,
            cbar,
            dbar,
        } => {
            let s = nodes[u.0].value.shape();
            let dims = raw::Dims {
                len: s[0],
                channels: s[1],
                state: nodes[abar.0].value.cols(),
            };
            let gr = raw::scan_backward(dims, g, val(*u), val(*abar), val(*bbar), val(*cbar), val(*dbar));
            for (v, d) in [
                (*u, gr.du),
                (*abar, gr.dabar),
                (*bbar, gr.dbbar),
                (*cbar, gr.dcbar),
                (*dbar, gr.ddbar),
            ] {
                if let Some(dv) = slot(nodes, grads, v) {
                    add_into(dv, &d);
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
