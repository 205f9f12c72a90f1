//! Reverse-mode differentiation over a recorded operation list.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and `backward` is a single reverse sweep.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{shape_err, Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::tensor::{numel, permute_indices, strides, Tensor};

/// Variance floor added inside every standard-deviation square root.
pub const EPS_VAR: f64 = 1e-5;

/// `sqrt(2 / pi)`, the tanh-approximation GELU constant.
pub const GELU_C: f64 = 0.797_884_560_802_865_4;
const GELU_A: f64 = 0.044_715;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UnaryKind {
    Exp,
    Log,
    Sqrt,
    Tanh,
    Relu,
    LeakyRelu(f64),
    Gelu,
    Sigmoid,
    Abs,
    Square,
    Neg,
    Scale(f64),
    AddScalar(f64),
    /// `max(0, x + c)`.
    Max0Shift(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Unary(UnaryKind, Var),
    Binary(BinaryKind, Var, Var),
    Matmul(Var, Var),
    SumAxes(Var),
    Softmax(Var, usize),
    Reshape(Var),
    Gather(Var, Arc<[usize]>),
    Concat(Vec<Var>, usize),
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation. Build one per forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<(u64, usize), Var>,
}

/// Result of a backward sweep.
#[derive(Debug)]
pub struct Gradients {
    by_node: Vec<Option<Tensor>>,
    params: Vec<((u64, usize), Var)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.by_node[v.0].as_ref()
    }

    /// Overwrites `store`'s grads: reached parameters get their gradient, the rest zero.
    pub fn write_to(&self, store: &mut ParamStore) {
        store.zero_grads();
        self.accumulate_into(store);
    }

    /// Adds this sweep's gradients onto `store`'s grads.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        self.accumulate_scaled(store, 1.0);
    }

    /// Adds `k` times this sweep's gradients onto `store`'s grads.
    pub fn accumulate_scaled(&self, store: &mut ParamStore, k: f64) {
        let uid = store.uid();
        for &((sid, idx), var) in &self.params {
            if sid != uid {
                continue;
            }
            if let Some(g) = &self.by_node[var.0] {
                let p = store.get_mut(ParamId(idx));
                for (a, b) in p.grad.data_mut().iter_mut().zip(g.data()) {
                    *a += k * b;
                }
            }
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// Leaf bound to a parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let key = (store.uid(), id.index());
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Leaf, true);
        self.params.insert(key, v);
        v
    }

    /// Copies the value into a fresh constant, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    // ---- elementwise ---------------------------------------------------

    pub fn unary(&mut self, kind: UnaryKind, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let check = |ok: bool, what: &str| -> Result<()> {
            if ok {
                Ok(())
            } else {
                Err(Error::Domain(what.to_string()))
            }
        };
        match kind {
            UnaryKind::Log => check(xv.data().iter().all(|&v| v > 0.0), "log of a non-positive value")?,
            UnaryKind::Sqrt => check(xv.data().iter().all(|&v| v >= 0.0), "sqrt of a negative value")?,
            _ => {}
        }
        let y = xv.map(|v| unary_fwd(kind, v));
        let rg = self.rg(x);
        Ok(self.push(y, Op::Unary(kind, x), rg))
    }

    pub fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if kind == BinaryKind::Div && bv.data().iter().any(|&v| v == 0.0) {
            return Err(Error::Domain("division by zero".into()));
        }
        let out_shape = broadcast_shape(av.shape(), bv.shape())?;
        let f = |x: f64, y: f64| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
        };
        let data = if av.shape() == bv.shape() {
            av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ia = broadcast_offsets(&out_shape, av.shape());
            let ib = broadcast_offsets(&out_shape, bv.shape());
            ia.iter().zip(&ib).map(|(&i, &j)| f(av.data()[i], bv.data()[j])).collect()
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(out_shape, data)?, Op::Binary(kind, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Exp, x)
    }
    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Log, x)
    }
    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Sqrt, x)
    }
    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Tanh, x)
    }
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Relu, x)
    }
    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        self.unary(UnaryKind::LeakyRelu(slope), x)
    }
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Gelu, x)
    }
    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Sigmoid, x)
    }
    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Abs, x)
    }
    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Square, x)
    }
    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Neg, x)
    }
    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(UnaryKind::Scale(c), x)
    }
    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(UnaryKind::AddScalar(c), x)
    }
    pub fn max0_shift(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(UnaryKind::Max0Shift(c), x)
    }

    // ---- contractions and reductions -----------------------------------

    /// `[.., m, k] x [.., k, n] -> [.., m, n]`. Batch dims must be equal, or one
    /// side must be a plain matrix that is shared across the other's batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let geo = MatmulGeometry::new(av.shape(), bv.shape())?;
        let mut out = vec![0.0; geo.batch * geo.m * geo.n];
        for bi in 0..geo.batch {
            let ao = if geo.a_batched { bi * geo.m * geo.k } else { 0 };
            let bo = if geo.b_batched { bi * geo.k * geo.n } else { 0 };
            mm(
                &av.data()[ao..ao + geo.m * geo.k],
                &bv.data()[bo..bo + geo.k * geo.n],
                &mut out[bi * geo.m * geo.n..(bi + 1) * geo.m * geo.n],
                geo.m,
                geo.k,
                geo.n,
            );
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(geo.out_shape, out)?, Op::Matmul(a, b), rg))
    }

    /// Sums over `axes`, keeping them as size-1 dims.
    pub fn sum_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        if axes.is_empty() || axes.iter().any(|&a| a >= shape.len()) {
            return Err(shape_err!("invalid reduction axes {:?} for shape {:?}", axes, shape));
        }
        let mut out_shape = shape.clone();
        for &a in axes {
            out_shape[a] = 1;
        }
        let offs = broadcast_offsets(&shape, &out_shape);
        let mut out = vec![0.0; numel(&out_shape)];
        for (&o, &v) in offs.iter().zip(xv.data()) {
            out[o] += v;
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::SumAxes(x), rg))
    }

    pub fn mean_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x);
        let count: usize = axes.iter().filter_map(|&a| shape.get(a)).product();
        let s = self.sum_axes(x, axes)?;
        self.scale(s, 1.0 / count as f64)
    }

    /// Sum of every entry, as a 0-d tensor.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        if self.shape(x).is_empty() {
            return Ok(x);
        }
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        let s = self.sum_axes(x, &axes)?;
        self.reshape(s, &[])
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        let s = self.sum_all(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Mean and standard deviation over `axes` (kept as size-1 dims), with
    /// `sigma = sqrt(mean((x - mu)^2) + EPS_VAR)`.
    pub fn joint_stats(&mut self, x: Var, axes: &[usize]) -> Result<(Var, Var)> {
        let mu = self.mean_axes(x, axes)?;
        let centered = self.sub(x, mu)?;
        let sq = self.square(centered)?;
        let var = self.mean_axes(sq, axes)?;
        let var = self.add_scalar(var, EPS_VAR)?;
        let sigma = self.sqrt(var)?;
        Ok((mu, sigma))
    }

    /// Numerically shifted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape();
        if axis >= shape.len() {
            return Err(shape_err!("softmax axis {axis} out of range for {:?}", shape));
        }
        let (outer, len, inner) = split_axis(shape, axis);
        let mut out = vec![0.0; xv.len()];
        let d = xv.data();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut m = f64::NEG_INFINITY;
                for j in 0..len {
                    m = m.max(d[base + j * inner]);
                }
                let mut s = 0.0;
                for j in 0..len {
                    let e = (d[base + j * inner] - m).exp();
                    out[base + j * inner] = e;
                    s += e;
                }
                for j in 0..len {
                    out[base + j * inner] /= s;
                }
            }
        }
        let shape = shape.to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax(x, axis), rg))
    }

    // ---- rearrangements ------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(y, Op::Reshape(x), rg))
    }

    pub fn permute(&mut self, x: Var, order: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let idx = permute_indices(&shape, order)?;
        let out_shape: Vec<usize> = order.iter().map(|&a| shape[a]).collect();
        self.gather(x, idx.into(), &out_shape)
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(shape_err!("transpose needs rank >= 2, got {:?}", self.shape(x)));
        }
        let mut order: Vec<usize> = (0..r).collect();
        order.swap(r - 2, r - 1);
        self.permute(x, &order)
    }

    /// `out.flat[i] = x.flat[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, index: Arc<[usize]>, shape: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if numel(shape) != index.len() {
            return Err(shape_err!("gather shape {:?} does not hold {} indices", shape, index.len()));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= xv.len()) {
            return Err(shape_err!("gather index {bad} out of range for {} values", xv.len()));
        }
        let data = index.iter().map(|&i| xv.data()[i]).collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape.to_vec(), data)?, Op::Gather(x, index), rg))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(xs[0]).to_vec();
        if axis >= first.len() {
            return Err(shape_err!("concat axis {axis} out of range for {:?}", first));
        }
        let mut out_shape = first.clone();
        out_shape[axis] = 0;
        for &x in xs {
            let s = self.shape(x);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(shape_err!("cannot concat {:?} with {:?} along axis {axis}", s, first));
            }
            out_shape[axis] += s[axis];
        }
        let (outer, _, inner) = split_axis(&out_shape, axis);
        let mut data = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for &x in xs {
                let len = self.shape(x)[axis] * inner;
                data.extend_from_slice(&self.value(x).data()[o * len..(o + 1) * len]);
            }
        }
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(Tensor::new(out_shape, data)?, Op::Concat(xs.to_vec(), axis), rg))
    }

    // ---- convolution ---------------------------------------------------

    /// Cross-correlation of `x [C_in, H, W]` with `w [C_out, C_in, kh, kw]`,
    /// zero padding `pad` on every side.
    ///
    /// Each output entry accumulates kernel position major, input channel minor,
    /// starting from the bias.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let geo = ConvGeometry::new(xv.shape(), wv.shape(), stride, pad)?;
        if let Some(b) = b {
            if self.shape(b) != [geo.cout] {
                return Err(shape_err!("conv bias shape {:?}, expected [{}]", self.shape(b), geo.cout));
            }
        }
        let mut out = vec![0.0; geo.cout * geo.oh * geo.ow];
        if let Some(b) = b {
            let bv = self.value(b).data();
            for co in 0..geo.cout {
                out[co * geo.oh * geo.ow..(co + 1) * geo.oh * geo.ow].fill(bv[co]);
            }
        }
        conv_forward(&geo, xv.data(), wv.data(), &mut out);
        let rg = self.rg(x) || self.rg(w) || b.map_or(false, |b| self.rg(b));
        let t = Tensor::new(vec![geo.cout, geo.oh, geo.ow], out)?;
        Ok(self.push(t, Op::Conv2d { x, w, b, stride, pad }, rg))
    }

    // ---- backward ------------------------------------------------------

    /// Gradients of the 0-d `loss` with respect to every node that needs one.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.shape(loss).is_empty() {
            return Err(shape_err!("backward needs a 0-d loss, got shape {:?}", self.shape(loss)));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.backward_node(node, &g, &mut grads)?;
            }
            grads[i] = Some(g);
        }
        let params = self
            .params
            .iter()
            .filter(|(_, v)| v.0 <= loss.0)
            .map(|(&k, &v)| (k, v))
            .collect();
        Ok(Gradients { by_node: grads, params })
    }

    fn backward_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Unary(kind, x) => {
                if self.rg(*x) {
                    let xv = self.value(*x);
                    let data = xv
                        .data()
                        .iter()
                        .zip(y.data())
                        .zip(g.data())
                        .map(|((&xi, &yi), &gi)| gi * unary_grad(*kind, xi, yi))
                        .collect();
                    accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), data)?);
                }
            }
            Op::Binary(kind, a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let ia = broadcast_offsets(y.shape(), av.shape());
                let ib = broadcast_offsets(y.shape(), bv.shape());
                let mut ga = vec![0.0; av.len()];
                let mut gb = vec![0.0; bv.len()];
                for k in 0..y.len() {
                    let (x1, x2, gk) = (av.data()[ia[k]], bv.data()[ib[k]], g.data()[k]);
                    let (da, db) = match kind {
                        BinaryKind::Add => (gk, gk),
                        BinaryKind::Sub => (gk, -gk),
                        BinaryKind::Mul => (gk * x2, gk * x1),
                        BinaryKind::Div => (gk / x2, -gk * x1 / (x2 * x2)),
                    };
                    ga[ia[k]] += da;
                    gb[ib[k]] += db;
                }
                if self.rg(*a) {
                    accumulate(grads, *a, Tensor::new(av.shape().to_vec(), ga)?);
                }
                if self.rg(*b) {
                    accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), gb)?);
                }
            }
            Op::Matmul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let geo = MatmulGeometry::new(av.shape(), bv.shape())?;
                let (m, k, n) = (geo.m, geo.k, geo.n);
                if self.rg(*a) {
                    let mut ga = vec![0.0; av.len()];
                    for bi in 0..geo.batch {
                        let ao = if geo.a_batched { bi * m * k } else { 0 };
                        let bo = if geo.b_batched { bi * k * n } else { 0 };
                        mm_nt(&g.data()[bi * m * n..(bi + 1) * m * n], &bv.data()[bo..bo + k * n], &mut ga[ao..ao + m * k], m, n, k);
                    }
                    accumulate(grads, *a, Tensor::new(av.shape().to_vec(), ga)?);
                }
                if self.rg(*b) {
                    let mut gb = vec![0.0; bv.len()];
                    for bi in 0..geo.batch {
                        let ao = if geo.a_batched { bi * m * k } else { 0 };
                        let bo = if geo.b_batched { bi * k * n } else { 0 };
                        mm_tn(&av.data()[ao..ao + m * k], &g.data()[bi * m * n..(bi + 1) * m * n], &mut gb[bo..bo + k * n], m, k, n);
                    }
                    accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), gb)?);
                }
            }
            Op::SumAxes(x) => {
                if self.rg(*x) {
                    let xs = self.shape(*x);
                    let offs = broadcast_offsets(xs, y.shape());
                    let data = offs.iter().map(|&o| g.data()[o]).collect();
                    accumulate(grads, *x, Tensor::new(xs.to_vec(), data)?);
                }
            }
            Op::Softmax(x, axis) => {
                if self.rg(*x) {
                    let (outer, len, inner) = split_axis(y.shape(), *axis);
                    let mut gx = vec![0.0; y.len()];
                    let (yd, gd) = (y.data(), g.data());
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let dot: f64 = (0..len).map(|j| yd[base + j * inner] * gd[base + j * inner]).sum();
                            for j in 0..len {
                                let p = base + j * inner;
                                gx[p] = yd[p] * (gd[p] - dot);
                            }
                        }
                    }
                    accumulate(grads, *x, Tensor::new(y.shape().to_vec(), gx)?);
                }
            }
            Op::Reshape(x) => {
                if self.rg(*x) {
                    accumulate(grads, *x, g.reshape(self.shape(*x))?);
                }
            }
            Op::Gather(x, index) => {
                if self.rg(*x) {
                    let xs = self.shape(*x);
                    let mut gx = vec![0.0; numel(xs)];
                    for (&i, &gi) in index.iter().zip(g.data()) {
                        gx[i] += gi;
                    }
                    accumulate(grads, *x, Tensor::new(xs.to_vec(), gx)?);
                }
            }
            Op::Concat(xs, axis) => {
                let (outer, _, inner) = split_axis(y.shape(), *axis);
                let total = y.shape()[*axis] * inner;
                let mut start = 0;
                for &x in xs {
                    let xs_shape = self.shape(x).to_vec();
                    let len = xs_shape[*axis] * inner;
                    if self.rg(x) {
                        let mut gx = Vec::with_capacity(numel(&xs_shape));
                        for o in 0..outer {
                            gx.extend_from_slice(&g.data()[o * total + start..o * total + start + len]);
                        }
                        accumulate(grads, x, Tensor::new(xs_shape, gx)?);
                    }
                    start += len;
                }
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let geo = ConvGeometry::new(xv.shape(), wv.shape(), *stride, *pad)?;
                if self.rg(*x) || self.rg(*w) {
                    let mut gx = vec![0.0; xv.len()];
                    let mut gw = vec![0.0; wv.len()];
                    conv_backward(&geo, xv.data(), wv.data(), g.data(), &mut gx, &mut gw);
                    if self.rg(*x) {
                        accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), gx)?);
                    }
                    if self.rg(*w) {
                        accumulate(grads, *w, Tensor::new(wv.shape().to_vec(), gw)?);
                    }
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        let plane = geo.oh * geo.ow;
                        let gb = (0..geo.cout).map(|co| g.data()[co * plane..(co + 1) * plane].iter().sum()).collect();
                        accumulate(grads, *b, Tensor::new(vec![geo.cout], gb)?);
                    }
                }
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn unary_fwd(kind: UnaryKind, x: f64) -> f64 {
    match kind {
        UnaryKind::Exp => x.exp(),
        UnaryKind::Log => x.ln(),
        UnaryKind::Sqrt => x.sqrt(),
        UnaryKind::Tanh => x.tanh(),
        UnaryKind::Relu => x.max(0.0),
        UnaryKind::LeakyRelu(s) => {
            if x > 0.0 {
                x
            } else {
                s * x
            }
        }
        UnaryKind::Gelu => gelu(x),
        UnaryKind::Sigmoid => 1.0 / (1.0 + (-x).exp()),
        UnaryKind::Abs => x.abs(),
        UnaryKind::Square => x * x,
        UnaryKind::Neg => -x,
        UnaryKind::Scale(c) => c * x,
        UnaryKind::AddScalar(c) => x + c,
        UnaryKind::Max0Shift(c) => (x + c).max(0.0),
    }
}

fn unary_grad(kind: UnaryKind, x: f64, y: f64) -> f64 {
    match kind {
        UnaryKind::Exp => y,
        UnaryKind::Log => 1.0 / x,
        UnaryKind::Sqrt => 0.5 / y,
        UnaryKind::Tanh => 1.0 - y * y,
        UnaryKind::Relu => f64::from(u8::from(x > 0.0)),
        UnaryKind::LeakyRelu(s) => {
            if x > 0.0 {
                1.0
            } else {
                s
            }
        }
        UnaryKind::Gelu => gelu_grad(x),
        UnaryKind::Sigmoid => y * (1.0 - y),
        UnaryKind::Abs => {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        }
        UnaryKind::Square => 2.0 * x,
        UnaryKind::Neg => -1.0,
        UnaryKind::Scale(c) => c,
        UnaryKind::AddScalar(_) => 1.0,
        UnaryKind::Max0Shift(c) => f64::from(u8::from(x + c > 0.0)),
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Output shape of a size-1-stretching broadcast between trailing-aligned shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let r = a.len().max(b.len());
    let mut out = vec![0; r];
    for i in 0..r {
        let da = if i + a.len() >= r { a[i + a.len() - r] } else { 1 };
        let db = if i + b.len() >= r { b[i + b.len() - r] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(shape_err!("shapes {:?} and {:?} do not broadcast", a, b)),
        };
    }
    Ok(out)
}

/// For every element of `out_shape` (row-major), the offset into an operand of
/// shape `src` broadcast to it.
fn broadcast_offsets(out_shape: &[usize], src: &[usize]) -> Vec<usize> {
    let r = out_shape.len();
    let src_st = strides(src);
    let st: Vec<usize> = (0..r)
        .map(|i| {
            if i + src.len() < r {
                0
            } else {
                let j = i + src.len() - r;
                if src[j] == 1 {
                    0
                } else {
                    src_st[j]
                }
            }
        })
        .collect();
    let n = numel(out_shape);
    let mut out = Vec::with_capacity(n);
    let mut counter = vec![0usize; r];
    let mut off = 0usize;
    for _ in 0..n {
        out.push(off);
        for ax in (0..r).rev() {
            counter[ax] += 1;
            off += st[ax];
            if counter[ax] < out_shape[ax] {
                break;
            }
            off -= st[ax] * out_shape[ax];
            counter[ax] = 0;
        }
    }
    out
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

struct MatmulGeometry {
    batch: usize,
    a_batched: bool,
    b_batched: bool,
    m: usize,
    k: usize,
    n: usize,
    out_shape: Vec<usize>,
}

impl MatmulGeometry {
    fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        let err = || shape_err!("matmul shapes {:?} and {:?} are incompatible", a, b);
        if a.len() < 2 || b.len() < 2 {
            return Err(err());
        }
        let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
        let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
        if k != k2 {
            return Err(err());
        }
        let (ab, bb) = (&a[..a.len() - 2], &b[..b.len() - 2]);
        let batch_dims = if ab == bb || bb.is_empty() {
            ab
        } else if ab.is_empty() {
            bb
        } else {
            return Err(err());
        };
        let mut out_shape = batch_dims.to_vec();
        out_shape.extend([m, n]);
        Ok(Self {
            batch: batch_dims.iter().product(),
            a_batched: !ab.is_empty(),
            b_batched: !bb.is_empty(),
            m,
            k,
            n,
            out_shape,
        })
    }
}

/// `out += a[m,k] . b[k,n]`
fn mm(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

/// `out[m,k] += g[m,n] . b[k,n]^T`
fn mm_nt(g: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out[k,n] += a[m,k]^T . g[m,n]`
fn mm_tn(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += aip * gv;
            }
        }
    }
}

struct ConvGeometry {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeometry {
    fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if x.len() != 3 || w.len() != 4 {
            return Err(shape_err!("conv2d expects input [C,H,W] and weight [O,C,kh,kw], got {:?} and {:?}", x, w));
        }
        if x[0] != w[1] {
            return Err(shape_err!("conv2d channel mismatch: input has {} channels, weight expects {}", x[0], w[1]));
        }
        if stride == 0 {
            return Err(shape_err!("conv2d stride must be positive"));
        }
        let (h, wd, kh, kw) = (x[1], x[2], w[2], w[3]);
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(shape_err!("conv2d kernel {kh}x{kw} larger than padded input {h}x{wd} (pad {pad})"));
        }
        Ok(Self {
            cin: x[0],
            h,
            w: wd,
            cout: w[0],
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (wd + 2 * pad - kw) / stride + 1,
        })
    }

    /// Valid output range along one axis for kernel offset `k`: output positions
    /// `o` with `0 <= o*stride + k - pad < size`.
    fn range(&self, k: usize, size: usize, out: usize) -> std::ops::Range<usize> {
        let s = self.stride;
        let lo = if k >= self.pad { 0 } else { (self.pad - k).div_ceil(s) };
        let hi = if size + self.pad > k { ((size + self.pad - k - 1) / s + 1).min(out) } else { 0 };
        lo..hi.max(lo)
    }
}

fn conv_forward(geo: &ConvGeometry, x: &[f64], w: &[f64], out: &mut [f64]) {
    let (plane_in, plane_out) = (geo.h * geo.w, geo.oh * geo.ow);
    let wstride_co = geo.cin * geo.kh * geo.kw;
    for ky in 0..geo.kh {
        let ys = geo.range(ky, geo.h, geo.oh);
        for kx in 0..geo.kw {
            let xs = geo.range(kx, geo.w, geo.ow);
            for ci in 0..geo.cin {
                let xin = &x[ci * plane_in..(ci + 1) * plane_in];
                for co in 0..geo.cout {
                    let wv = w[co * wstride_co + (ci * geo.kh + ky) * geo.kw + kx];
                    let o = &mut out[co * plane_out..(co + 1) * plane_out];
                    for oy in ys.clone() {
                        let iy = oy * geo.stride + ky - geo.pad;
                        for ox in xs.clone() {
                            let ix = ox * geo.stride + kx - geo.pad;
                            o[oy * geo.ow + ox] += wv * xin[iy * geo.w + ix];
                        }
                    }
                }
            }
        }
    }
}

fn conv_backward(geo: &ConvGeometry, x: &[f64], w: &[f64], g: &[f64], gx: &mut [f64], gw: &mut [f64]) {
    let (plane_in, plane_out) = (geo.h * geo.w, geo.oh * geo.ow);
    let wstride_co = geo.cin * geo.kh * geo.kw;
    for ky in 0..geo.kh {
        let ys = geo.range(ky, geo.h, geo.oh);
        for kx in 0..geo.kw {
            let xs = geo.range(kx, geo.w, geo.ow);
            for ci in 0..geo.cin {
                for co in 0..geo.cout {
                    let widx = co * wstride_co + (ci * geo.kh + ky) * geo.kw + kx;
                    let wv = w[widx];
                    let go = &g[co * plane_out..(co + 1) * plane_out];
                    let mut acc = 0.0;
                    for oy in ys.clone() {
                        let iy = oy * geo.stride + ky - geo.pad;
                        for ox in xs.clone() {
                            let ix = ox * geo.stride + kx - geo.pad;
                            let gv = go[oy * geo.ow + ox];
                            acc += gv * x[ci * plane_in + iy * geo.w + ix];
                            gx[ci * plane_in + iy * geo.w + ix] += wv * gv;
                        }
                    }
                    gw[widx] += acc;
                }
            }
        }
    }
}
