use std::cell::{Cell, Ref, RefCell};
use std::f64::consts::{FRAC_1_SQRT_2, PI};

use super::{fft, split_at_axis, strides, Result, Tensor, TensorError};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Powi(Var, i32),
    Sin(Var),
    Abs(Var),
    Gelu(Var),
    Matmul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    IndexSelect(Var, usize, Vec<usize>),
    IndexScatter(Var, usize, Vec<usize>),
    SumAll(Var),
    MeanAll(Var),
    Rfft(Var),
    Irfft(Var, usize),
    FftAxis(Var, usize, bool),
    ComplexMix(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Tape of primitive operations. Node ids are assigned in creation order,
/// which is a topological order of the recorded computation.
#[derive(Debug)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
    checked: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar loss with respect to every node that needed one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` aligned to `out`, zero along broadcast axes.
fn bc_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let s = strides(shape);
    let off = out.len() - shape.len();
    (0..out.len())
        .map(|i| if i < off || shape[i - off] == 1 { 0 } else { s[i - off] })
        .collect()
}

fn for_each_bc(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let rank = out.len();
    let n: usize = out.iter().product();
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    for o in 0..n {
        f(o, oa, ob);
        let mut d = rank;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out[d] {
                break;
            }
            oa -= sa[d] * out[d];
            ob -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    cdf + x * pdf
}

fn complex_tail(shape: &[usize], op: &'static str) -> Result<()> {
    if shape.last() != Some(&2) {
        return Err(TensorError::Invalid(format!(
            "{op} expects interleaved complex input (last axis 2), got {shape:?}"
        )));
    }
    Ok(())
}

impl Graph {
    pub fn new() -> Self {
        Self::with_checks(cfg!(debug_assertions))
    }

    /// With checks enabled every op rejects non-finite results.
    pub fn with_checks(checked: bool) -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
            checked,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Trainable leaf.
    pub fn param(&self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn leaf(&self, value: Tensor, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    fn push(&self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        if self.checked && !value.is_finite() {
            return Err(TensorError::NonFinite(name));
        }
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Matmul(a, b) | Op::ComplexMix(a, b) => {
                nodes[a.0].requires_grad || nodes[b.0].requires_grad
            }
            Op::Concat(vs, _) => vs.iter().any(|v| nodes[v.0].requires_grad),
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Powi(a, _)
            | Op::Sin(a)
            | Op::Abs(a)
            | Op::Gelu(a)
            | Op::Transpose(a)
            | Op::Reshape(a)
            | Op::IndexSelect(a, _, _)
            | Op::IndexScatter(a, _, _)
            | Op::SumAll(a)
            | Op::MeanAll(a)
            | Op::Rfft(a)
            | Op::Irfft(a, _)
            | Op::FftAxis(a, _, _) => nodes[a.0].requires_grad,
        };
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(nodes.len() - 1))
    }

    fn binary(&self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let nodes = self.nodes.borrow();
        let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
        if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            return Tensor::new(ta.shape().to_vec(), data);
        }
        let out = broadcast_shape(ta.shape(), tb.shape()).ok_or_else(|| TensorError::ShapeMismatch {
            op: name,
            lhs: ta.shape().to_vec(),
            rhs: tb.shape().to_vec(),
        })?;
        let (sa, sb) = (bc_strides(ta.shape(), &out), bc_strides(tb.shape(), &out));
        let mut data = vec![0.0; out.iter().product()];
        let (da, db) = (ta.data(), tb.data());
        for_each_bc(&out, &sa, &sb, |o, ia, ib| data[o] = f(da[ia], db[ib]));
        Tensor::new(out, data)
    }

    /// Elementwise sum with trailing-axis broadcasting.
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "add", |x, y| x + y)?;
        self.push(v, Op::Add(a, b), "add")
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "sub", |x, y| x - y)?;
        self.push(v, Op::Sub(a, b), "sub")
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "mul", |x, y| x * y)?;
        self.push(v, Op::Mul(a, b), "mul")
    }

    pub fn scale(&self, a: Var, s: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s), "scale")
    }

    pub fn add_scalar(&self, a: Var, s: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x + s);
        self.push(v, Op::AddScalar(a), "add_scalar")
    }

    pub fn powi(&self, a: Var, p: i32) -> Result<Var> {
        let v = self.value(a).map(|x| x.powi(p));
        self.push(v, Op::Powi(a, p), "powi")
    }

    pub fn sin(&self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::sin);
        self.push(v, Op::Sin(a), "sin")
    }

    /// Absolute value; the subgradient at zero is taken as zero.
    pub fn abs(&self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::abs);
        self.push(v, Op::Abs(a), "abs")
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&self, a: Var) -> Result<Var> {
        let v = self.value(a).map(gelu);
        self.push(v, Op::Gelu(a), "gelu")
    }

    /// `[m, k] x [..., k, n] -> [..., m, n]`; the left operand is shared
    /// across the batch axes of the right one.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let (sa, sb) = (ta.shape(), tb.shape());
            if sa.len() != 2 || sb.len() < 2 || sa[1] != sb[sb.len() - 2] {
                return Err(TensorError::ShapeMismatch {
                    op: "matmul",
                    lhs: sa.to_vec(),
                    rhs: sb.to_vec(),
                });
            }
            let (m, k, n) = (sa[0], sa[1], sb[sb.len() - 1]);
            let batch: usize = sb[..sb.len() - 2].iter().product();
            let mut data = vec![0.0; batch * m * n];
            let (da, db) = (ta.data(), tb.data());
            for bi in 0..batch {
                let rhs = &db[bi * k * n..(bi + 1) * k * n];
                let dst = &mut data[bi * m * n..(bi + 1) * m * n];
                for i in 0..m {
                    let row = &mut dst[i * n..(i + 1) * n];
                    for kk in 0..k {
                        let w = da[i * k + kk];
                        if w == 0.0 {
                            continue;
                        }
                        for (r, &x) in row.iter_mut().zip(&rhs[kk * n..(kk + 1) * n]) {
                            *r += w * x;
                        }
                    }
                }
            }
            let mut shape = sb[..sb.len() - 2].to_vec();
            shape.extend([m, n]);
            Tensor::new(shape, data)?
        };
        self.push(out, Op::Matmul(a, b), "matmul")
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let out = {
            let t = self.value(a);
            if t.rank() != 2 {
                return Err(TensorError::Invalid(format!(
                    "transpose expects a matrix, got {:?}",
                    t.shape()
                )));
            }
            transpose2(&t)
        };
        self.push(out, Op::Transpose(a), "transpose")
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        self.push(out, Op::Reshape(a), "reshape")
    }

    /// Concatenates along `axis`; all other axes must agree.
    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let first = nodes[parts
                .first()
                .ok_or_else(|| TensorError::Invalid("concat of zero tensors".into()))?
                .0]
                .value
                .shape()
                .to_vec();
            if axis >= first.len() {
                return Err(TensorError::AxisOutOfRange {
                    axis,
                    rank: first.len(),
                });
            }
            let mut total = 0;
            for p in parts {
                let s = nodes[p.0].value.shape();
                let compatible =
                    s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(i, (x, y))| i == axis || x == y);
                if !compatible {
                    return Err(TensorError::ShapeMismatch {
                        op: "concat",
                        lhs: first.clone(),
                        rhs: s.to_vec(),
                    });
                }
                total += s[axis];
            }
            let (outer, _, inner) = split_at_axis(&first, axis);
            let mut data = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for p in parts {
                    let t = &nodes[p.0].value;
                    let len = t.shape()[axis] * inner;
                    data.extend_from_slice(&t.data()[o * len..(o + 1) * len]);
                }
            }
            let mut shape = first;
            shape[axis] = total;
            Tensor::new(shape, data)?
        };
        self.push(out, Op::Concat(parts.to_vec(), axis), "concat")
    }

    /// Gathers `indices` along `axis` (repeats allowed).
    pub fn index_select(&self, a: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        let out = {
            let t = self.value(a);
            check_axis(t.shape(), axis)?;
            let (outer, len, inner) = split_at_axis(t.shape(), axis);
            if let Some(&bad) = indices.iter().find(|&&i| i >= len) {
                return Err(TensorError::Invalid(format!(
                    "index {bad} out of range for axis of length {len}"
                )));
            }
            gather(t.data(), outer, len, inner, indices, t.shape(), axis)
        };
        self.push(out, Op::IndexSelect(a, axis, indices.to_vec()), "index_select")
    }

    /// Places slices of `a` at distinct `indices` of an axis of length `len`,
    /// zero elsewhere.
    pub fn index_scatter(&self, a: Var, axis: usize, indices: &[usize], len: usize) -> Result<Var> {
        let out = {
            let t = self.value(a);
            check_axis(t.shape(), axis)?;
            let (outer, n, inner) = split_at_axis(t.shape(), axis);
            if n != indices.len() {
                return Err(TensorError::Invalid(format!(
                    "index_scatter: {} indices for axis of length {n}",
                    indices.len()
                )));
            }
            let mut seen = vec![false; len];
            for &i in indices {
                if i >= len || seen[i] {
                    return Err(TensorError::Invalid(format!(
                        "index_scatter: index {i} repeated or out of range {len}"
                    )));
                }
                seen[i] = true;
            }
            let mut shape = t.shape().to_vec();
            shape[axis] = len;
            let mut data = vec![0.0; outer * len * inner];
            scatter_add(&mut data, t.data(), outer, len, inner, indices);
            Tensor::new(shape, data)?
        };
        self.push(out, Op::IndexScatter(a, axis, indices.to_vec()), "index_scatter")
    }

    pub fn sum_all(&self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a), "sum_all")
    }

    pub fn mean_all(&self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s: f64 = t.data().iter().sum::<f64>() / t.numel() as f64;
        drop(t);
        self.push(Tensor::scalar(s), Op::MeanAll(a), "mean_all")
    }

    /// Real FFT along the last axis: `[..., n] -> [..., n/2+1, 2]`.
    pub fn rfft(&self, a: Var) -> Result<Var> {
        let out = {
            let t = self.value(a);
            let n = *t
                .shape()
                .last()
                .ok_or_else(|| TensorError::Invalid("rfft of a scalar".into()))?;
            let mut shape = t.shape().to_vec();
            shape.pop();
            shape.extend([fft::half_len(n), 2]);
            Tensor::new(shape, fft::rfft_rows(t.data(), n))?
        };
        self.push(out, Op::Rfft(a), "rfft")
    }

    /// Inverse of [`Graph::rfft`] producing rows of length `n`.
    pub fn irfft(&self, a: Var, n: usize) -> Result<Var> {
        let out = {
            let t = self.value(a);
            let s = t.shape();
            complex_tail(s, "irfft")?;
            if s.len() < 2 || s[s.len() - 2] != fft::half_len(n) {
                return Err(TensorError::Invalid(format!(
                    "irfft: half spectrum {:?} inconsistent with output length {n}",
                    s
                )));
            }
            let mut shape = s[..s.len() - 2].to_vec();
            shape.push(n);
            Tensor::new(shape, fft::irfft_rows(t.data(), n))?
        };
        self.push(out, Op::Irfft(a, n), "irfft")
    }

    /// Complex FFT along `axis` of an interleaved complex tensor. `axis`
    /// indexes the complex shape (the trailing pair axis excluded).
    pub fn fft_axis(&self, a: Var, axis: usize, inverse: bool) -> Result<Var> {
        let out = {
            let t = self.value(a);
            complex_tail(t.shape(), "fft_axis")?;
            let cshape = &t.shape()[..t.rank() - 1];
            check_axis(cshape, axis)?;
            Tensor::new(t.shape().to_vec(), fft::fft_axis(t.data(), cshape, axis, inverse))?
        };
        self.push(out, Op::FftAxis(a, axis, inverse), "fft_axis")
    }

    /// Per-mode complex channel contraction:
    /// `x [B, I, K, 2], w [I, O, K, 2] -> [B, O, K, 2]`.
    pub fn complex_mix(&self, x: Var, w: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (tx, tw) = (&nodes[x.0].value, &nodes[w.0].value);
            let (sx, sw) = (tx.shape(), tw.shape());
            if sx.len() != 4 || sw.len() != 4 || sx[3] != 2 || sw[3] != 2 || sx[1] != sw[0] || sx[2] != sw[2] {
                return Err(TensorError::ShapeMismatch {
                    op: "complex_mix",
                    lhs: sx.to_vec(),
                    rhs: sw.to_vec(),
                });
            }
            let (b, i, k, o) = (sx[0], sx[1], sx[2], sw[1]);
            let (dx, dw) = (tx.data(), tw.data());
            let mut data = vec![0.0; b * o * k * 2];
            for bb in 0..b {
                for ii in 0..i {
                    let xs = &dx[(bb * i + ii) * k * 2..(bb * i + ii + 1) * k * 2];
                    for oo in 0..o {
                        let ws = &dw[(ii * o + oo) * k * 2..(ii * o + oo + 1) * k * 2];
                        let dst = &mut data[(bb * o + oo) * k * 2..(bb * o + oo + 1) * k * 2];
                        for m in 0..k {
                            let (xr, xi) = (xs[2 * m], xs[2 * m + 1]);
                            let (wr, wi) = (ws[2 * m], ws[2 * m + 1]);
                            dst[2 * m] += xr * wr - xi * wi;
                            dst[2 * m + 1] += xr * wi + xi * wr;
                        }
                    }
                }
            }
            Tensor::new(vec![b, o, k, 2], data)?
        };
        self.push(out, Op::ComplexMix(x, w), "complex_mix")
    }

    /// Reverse pass from a scalar `loss`. A graph can be consumed once.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.consumed.replace(true) {
            return Err(TensorError::GraphConsumed);
        }
        let nodes = self.nodes.borrow();
        let loss_shape = nodes[loss.0].value.shape();
        if nodes[loss.0].value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(loss_shape.to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.0] = Some(Tensor::ones(loss_shape));

        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let val = |v: Var| &nodes[v.0].value;
            let needs = |v: Var| nodes[v.0].requires_grad;
            let mut contribs: Vec<(Var, Tensor)> = Vec::with_capacity(2);
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    if needs(*a) {
                        contribs.push((*a, reduce_to(&g, val(*a).shape(), 1.0)));
                    }
                    if needs(*b) {
                        contribs.push((*b, reduce_to(&g, val(*b).shape(), sign)));
                    }
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (val(*a), val(*b));
                    let out = g.shape();
                    let (sa, sb) = (bc_strides(ta.shape(), out), bc_strides(tb.shape(), out));
                    let mut ga = needs(*a).then(|| vec![0.0; ta.numel()]);
                    let mut gb = needs(*b).then(|| vec![0.0; tb.numel()]);
                    let (da, db, dg) = (ta.data(), tb.data(), g.data());
                    for_each_bc(out, &sa, &sb, |o, ia, ib| {
                        if let Some(ga) = ga.as_mut() {
                            ga[ia] += dg[o] * db[ib];
                        }
                        if let Some(gb) = gb.as_mut() {
                            gb[ib] += dg[o] * da[ia];
                        }
                    });
                    if let Some(ga) = ga {
                        contribs.push((*a, Tensor::new(ta.shape().to_vec(), ga)?));
                    }
                    if let Some(gb) = gb {
                        contribs.push((*b, Tensor::new(tb.shape().to_vec(), gb)?));
                    }
                }
                Op::Scale(a, s) => contribs.push((*a, g.map(|x| x * s))),
                Op::AddScalar(a) => contribs.push((*a, g)),
                Op::Powi(a, p) => {
                    let ta = val(*a);
                    let p = *p;
                    let data = g
                        .data()
                        .iter()
                        .zip(ta.data())
                        .map(|(&gi, &x)| if p == 0 { 0.0 } else { gi * p as f64 * x.powi(p - 1) })
                        .collect();
                    contribs.push((*a, Tensor::new(ta.shape().to_vec(), data)?));
                }
                Op::Sin(a) => contribs.push((*a, zip_map(&g, val(*a), |gi, x| gi * x.cos()))),
                Op::Abs(a) => contribs.push((
                    *a,
                    zip_map(&g, val(*a), |gi, x| {
                        if x > 0.0 {
                            gi
                        } else if x < 0.0 {
                            -gi
                        } else {
                            0.0
                        }
                    }),
                )),
                Op::Gelu(a) => contribs.push((*a, zip_map(&g, val(*a), |gi, x| gi * gelu_grad(x)))),
                Op::Matmul(a, b) => {
                    let (ta, tb) = (val(*a), val(*b));
                    let (m, k) = (ta.shape()[0], ta.shape()[1]);
                    let n = *tb.shape().last().unwrap();
                    let batch = tb.numel() / (k * n);
                    let (da, db, dg) = (ta.data(), tb.data(), g.data());
                    if needs(*a) {
                        let mut ga = vec![0.0; m * k];
                        for bi in 0..batch {
                            let rhs = &db[bi * k * n..(bi + 1) * k * n];
                            let gout = &dg[bi * m * n..(bi + 1) * m * n];
                            for i in 0..m {
                                let gr = &gout[i * n..(i + 1) * n];
                                for kk in 0..k {
                                    ga[i * k + kk] += dot(gr, &rhs[kk * n..(kk + 1) * n]);
                                }
                            }
                        }
                        contribs.push((*a, Tensor::new(vec![m, k], ga)?));
                    }
                    if needs(*b) {
                        let mut gb = vec![0.0; tb.numel()];
                        for bi in 0..batch {
                            let gout = &dg[bi * m * n..(bi + 1) * m * n];
                            let dst = &mut gb[bi * k * n..(bi + 1) * k * n];
                            for i in 0..m {
                                let gr = &gout[i * n..(i + 1) * n];
                                for kk in 0..k {
                                    let w = da[i * k + kk];
                                    for (d, &x) in dst[kk * n..(kk + 1) * n].iter_mut().zip(gr) {
                                        *d += w * x;
                                    }
                                }
                            }
                        }
                        contribs.push((*b, Tensor::new(tb.shape().to_vec(), gb)?));
                    }
                }
                Op::Transpose(a) => contribs.push((*a, transpose2(&g))),
                Op::Reshape(a) => contribs.push((*a, g.reshape(val(*a).shape())?)),
                Op::Concat(parts, axis) => {
                    let (outer, total, inner) = split_at_axis(g.shape(), *axis);
                    let mut start = 0;
                    for p in parts {
                        let tp = val(*p);
                        let len = tp.shape()[*axis];
                        if needs(*p) {
                            let mut data = Vec::with_capacity(tp.numel());
                            for o in 0..outer {
                                let base = (o * total + start) * inner;
                                data.extend_from_slice(&g.data()[base..base + len * inner]);
                            }
                            contribs.push((*p, Tensor::new(tp.shape().to_vec(), data)?));
                        }
                        start += len;
                    }
                }
                Op::IndexSelect(a, axis, indices) => {
                    let ta = val(*a);
                    let (outer, len, inner) = split_at_axis(ta.shape(), *axis);
                    let mut data = vec![0.0; ta.numel()];
                    scatter_add(&mut data, g.data(), outer, len, inner, indices);
                    contribs.push((*a, Tensor::new(ta.shape().to_vec(), data)?));
                }
                Op::IndexScatter(a, axis, indices) => {
                    let ta = val(*a);
                    let (outer, len, inner) = split_at_axis(g.shape(), *axis);
                    let t = gather(g.data(), outer, len, inner, indices, g.shape(), *axis);
                    debug_assert_eq!(t.shape(), ta.shape());
                    contribs.push((*a, t));
                }
                Op::SumAll(a) => {
                    let ta = val(*a);
                    contribs.push((*a, Tensor::full(ta.shape(), g.item())));
                }
                Op::MeanAll(a) => {
                    let ta = val(*a);
                    contribs.push((*a, Tensor::full(ta.shape(), g.item() / ta.numel() as f64)));
                }
                Op::Rfft(a) => {
                    let ta = val(*a);
                    let n = *ta.shape().last().unwrap();
                    contribs.push((
                        *a,
                        Tensor::new(ta.shape().to_vec(), fft::rfft_rows_adjoint(g.data(), n))?,
                    ));
                }
                Op::Irfft(a, n) => {
                    let ta = val(*a);
                    contribs.push((
                        *a,
                        Tensor::new(ta.shape().to_vec(), fft::irfft_rows_adjoint(g.data(), *n))?,
                    ));
                }
                Op::FftAxis(a, axis, inverse) => {
                    // Forward F has adjoint n * F^-1; normalized F^-1 has adjoint F / n.
                    let ta = val(*a);
                    let cshape = &ta.shape()[..ta.rank() - 1];
                    let n = cshape[*axis] as f64;
                    let mut data = fft::fft_axis(g.data(), cshape, *axis, !inverse);
                    let s = if *inverse { 1.0 / n } else { n };
                    data.iter_mut().for_each(|x| *x *= s);
                    contribs.push((*a, Tensor::new(ta.shape().to_vec(), data)?));
                }
                Op::ComplexMix(x, w) => {
                    let (tx, tw) = (val(*x), val(*w));
                    let (b, i, k) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
                    let o = tw.shape()[1];
                    let (dx, dw, dg) = (tx.data(), tw.data(), g.data());
                    let mut gx = needs(*x).then(|| vec![0.0; tx.numel()]);
                    let mut gw = needs(*w).then(|| vec![0.0; tw.numel()]);
                    for bb in 0..b {
                        for ii in 0..i {
                            let xo = (bb * i + ii) * k * 2;
                            for oo in 0..o {
                                let wo = (ii * o + oo) * k * 2;
                                let go = (bb * o + oo) * k * 2;
                                for m in 0..k {
                                    let (gr, gi) = (dg[go + 2 * m], dg[go + 2 * m + 1]);
                                    if let Some(gx) = gx.as_mut() {
                                        let (wr, wi) = (dw[wo + 2 * m], dw[wo + 2 * m + 1]);
                                        gx[xo + 2 * m] += gr * wr + gi * wi;
                                        gx[xo + 2 * m + 1] += gi * wr - gr * wi;
                                    }
                                    if let Some(gw) = gw.as_mut() {
                                        let (xr, xi) = (dx[xo + 2 * m], dx[xo + 2 * m + 1]);
                                        gw[wo + 2 * m] += gr * xr + gi * xi;
                                        gw[wo + 2 * m + 1] += gi * xr - gr * xi;
                                    }
                                }
                            }
                        }
                    }
                    if let Some(gx) = gx {
                        contribs.push((*x, Tensor::new(tx.shape().to_vec(), gx)?));
                    }
                    if let Some(gw) = gw {
                        contribs.push((*w, Tensor::new(tw.shape().to_vec(), gw)?));
                    }
                }
            }
            for (parent, gp) in contribs {
                if !nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.data_mut().iter_mut().zip(gp.data()).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(gp),
                }
            }
        }
        // Only leaves keep their gradients; interior slots were taken above.
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn check_axis(shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(TensorError::AxisOutOfRange {
            axis,
            rank: shape.len(),
        });
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn zip_map(g: &Tensor, x: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = g.data().iter().zip(x.data()).map(|(&a, &b)| f(a, b)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("gradient shape matches value")
}

fn transpose2(t: &Tensor) -> Tensor {
    let (m, n) = (t.shape()[0], t.shape()[1]);
    let d = t.data();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = d[i * n + j];
        }
    }
    Tensor::new(vec![n, m], out).expect("transpose shape")
}

/// Sums `g` over the axes along which `shape` was broadcast.
fn reduce_to(g: &Tensor, shape: &[usize], sign: f64) -> Tensor {
    if g.shape() == shape {
        return if sign == 1.0 { g.clone() } else { g.map(|x| -x) };
    }
    let out = g.shape();
    let sa = bc_strides(shape, out);
    let zeros = vec![0; out.len()];
    let mut acc = vec![0.0; shape.iter().product()];
    let dg = g.data();
    for_each_bc(out, &sa, &zeros, |o, ia, _| acc[ia] += sign * dg[o]);
    Tensor::new(shape.to_vec(), acc).expect("reduced shape")
}

fn gather(
    data: &[f64],
    outer: usize,
    len: usize,
    inner: usize,
    indices: &[usize],
    shape: &[usize],
    axis: usize,
) -> Tensor {
    let mut out = Vec::with_capacity(outer * indices.len() * inner);
    for o in 0..outer {
        for &i in indices {
            let base = (o * len + i) * inner;
            out.extend_from_slice(&data[base..base + inner]);
        }
    }
    let mut s = shape.to_vec();
    s[axis] = indices.len();
    Tensor::new(s, out).expect("gather shape")
}

fn scatter_add(dst: &mut [f64], src: &[f64], outer: usize, len: usize, inner: usize, indices: &[usize]) {
    let n = indices.len();
    for o in 0..outer {
        for (j, &i) in indices.iter().enumerate() {
            let s = (o * n + j) * inner;
            let d = (o * len + i) * inner;
            for (a, b) in dst[d..d + inner].iter_mut().zip(&src[s..s + inner]) {
                *a += b;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_hand_example() {
        let g = Graph::new();
        let a = g.constant(t(&[1, 3], &[1.0, 3.0, 0.0]));
        let b = g.constant(t(&[3, 1], &[1.0, 0.0, 2.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[1.0]);
    }

    #[test]
    fn square_derivative_at_three() {
        let g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.powi(x, 2).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.wrt(x).item(), 6.0);
    }

    #[test]
    fn mean_of_constant() {
        let g = Graph::new();
        let x = g.param(Tensor::full(&[2, 5], 4.5));
        let m = g.mean_all(x).unwrap();
        assert_eq!(g.value(m).item(), 4.5);
        let grads = g.backward(m).unwrap();
        assert!(grads.wrt(x).data().iter().all(|&v| v == 0.1));
    }

    #[test]
    fn weighted_sum_gradient_is_input() {
        let g = Graph::new();
        let x = t(&[4], &[0.5, -1.0, 2.0, 7.0]);
        let w = g.param(Tensor::zeros(&[4]));
        let xv = g.constant(x.clone());
        let loss = g.mul(w, xv).and_then(|p| g.sum_all(p)).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(w), x);
    }

    #[test]
    fn unused_parameter_gets_zero_gradient() {
        let g = Graph::new();
        let used = g.param(Tensor::scalar(2.0));
        let unused = g.param(Tensor::full(&[3], 1.0));
        let loss = g.powi(used, 3).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(unused).is_none());
        assert_eq!(grads.wrt(unused), Tensor::zeros(&[3]));
    }

    #[test]
    fn shared_leaf_accumulates_both_paths() {
        // loss = sum(w*a) + sum(w*b) -> dw = a + b
        let g = Graph::new();
        let w = g.param(t(&[2], &[1.0, 2.0]));
        let a = g.constant(t(&[2], &[3.0, 4.0]));
        let b = g.constant(t(&[2], &[-1.0, 10.0]));
        let p1 = g.mul(w, a).unwrap();
        let p2 = g.mul(w, b).unwrap();
        let s = g.add(p1, p2).unwrap();
        let loss = g.sum_all(s).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(w).data(), &[2.0, 14.0]);
    }

    #[test]
    fn backward_twice_is_rejected() {
        let g = Graph::new();
        let x = g.param(Tensor::scalar(1.0));
        let y = g.scale(x, 2.0).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.backward(y).unwrap_err(), TensorError::GraphConsumed);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let g = Graph::new();
        let x = g.param(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(x), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn broadcast_add_reduces_gradient() {
        let g = Graph::new();
        let x = g.param(Tensor::zeros(&[2, 3, 4]));
        let b = g.param(Tensor::zeros(&[3, 1]));
        let y = g.add(x, b).unwrap();
        assert_eq!(g.shape(y), vec![2, 3, 4]);
        let loss = g.sum_all(y).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.wrt(b).data().iter().all(|&v| v == 8.0));
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[4]));
        assert!(matches!(g.add(a, b), Err(TensorError::ShapeMismatch { .. })));
        assert!(matches!(g.matmul(a, b), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn checked_graph_rejects_non_finite() {
        let g = Graph::with_checks(true);
        let a = g.constant(Tensor::full(&[2], f64::NAN));
        assert!(matches!(g.scale(a, 1.0), Err(TensorError::NonFinite(_))));
        let g = Graph::with_checks(false);
        let a = g.constant(Tensor::full(&[2], f64::NAN));
        assert!(g.scale(a, 1.0).is_ok());
    }

    #[test]
    fn concat_and_select_round_trip() {
        let g = Graph::new();
        let a = g.constant(Tensor::from_fn(&[2, 1, 3], |i| i as f64));
        let b = g.constant(Tensor::from_fn(&[2, 2, 3], |i| 100.0 + i as f64));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.shape(c), vec![2, 3, 3]);
        let back = g.index_select(c, 1, &[1, 2]).unwrap();
        assert_eq!(*g.value(back), *g.value(b));
    }
}
