//! Define-by-run reverse-mode differentiation.
//!
//! Every kernel call appends one node holding its forward value and the
//! information its pullback needs. Nodes are appended after their operands,
//! so a single reverse sweep over the node list is a valid topological order.

use std::cell::{Ref, RefCell};
use std::collections::HashMap;

use rand::Rng;

use crate::error::{shape_err, ApnError, Result};
use crate::tensor::{DType, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// What a leaf node stands for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LeafKind {
    /// Model parameter, identified by its slot in the owning parameter set.
    Param(usize),
    /// Differentiable input such as a clip tensor.
    Input,
    /// Value that never receives a gradient.
    Const,
}

#[derive(Debug)]
enum Op {
    Leaf(LeafKind),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    MatMul { a: Var, b: Var, shared_rhs: bool },
    Transpose(Var),
    Relu(Var),
    Dropout { x: Var, mask: Vec<f64> },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Mean { x: Var, axis: usize },
    Sum(Var),
    Reshape(Var),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    CrossEntropy { logits: Var, label: usize, probs: Vec<f64> },
    HalfSqDist { a: Var, b: Var, denom: f64 },
    Gather { x: Var, index: Vec<usize> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recording of one forward pass.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    dtype: DType,
}

/// Gradients of a scalar with respect to the leaves it depends on.
///
/// Leaves the loss does not reach are absent, which stands for a zero gradient.
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    by_leaf: HashMap<Var, Tensor>,
    params: HashMap<usize, Var>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.by_leaf.get(&v)
    }

    /// Gradient for parameter slot `slot`, if reached.
    pub fn param(&self, slot: usize) -> Option<&Tensor> {
        self.params.get(&slot).and_then(|v| self.by_leaf.get(v))
    }

    pub fn len(&self) -> usize {
        self.by_leaf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_leaf.is_empty()
    }
}

/// Split `dims` around `axis` into (outer, len, inner) strides.
fn axis_split(dims: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = dims[..axis].iter().product();
    let inner = dims[axis + 1..].iter().product();
    (outer, dims[axis], inner)
}

// c[n,m] += a[n,k] * b[k,m]
fn mm_acc(a: &[f64], b: &[f64], c: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let crow = &mut c[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

// c[n,q] += x[n,p] * y[q,p]^T
fn mm_nt_acc(x: &[f64], y: &[f64], c: &mut [f64], n: usize, p: usize, q: usize) {
    for i in 0..n {
        let xrow = &x[i * p..(i + 1) * p];
        for j in 0..q {
            let yrow = &y[j * p..(j + 1) * p];
            let dot: f64 = xrow.iter().zip(yrow).map(|(a, b)| a * b).sum();
            c[i * q + j] += dot;
        }
    }
}

// c[n,q] += x[p,n]^T * y[p,q]
fn mm_tn_acc(x: &[f64], y: &[f64], c: &mut [f64], p: usize, n: usize, q: usize) {
    for r in 0..p {
        let yrow = &y[r * q..(r + 1) * q];
        for i in 0..n {
            let xv = x[r * n + i];
            if xv == 0.0 {
                continue;
            }
            let crow = &mut c[i * q..(i + 1) * q];
            for (cv, &yv) in crow.iter_mut().zip(yrow) {
                *cv += xv * yv;
            }
        }
    }
}

impl Tape {
    pub fn new(dtype: DType) -> Self {
        Tape { nodes: RefCell::new(Vec::with_capacity(256)), dtype }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, needs_grad });
        Var(nodes.len() - 1)
    }

    fn out(&self, dims: &[usize], data: Vec<f64>) -> Result<Tensor> {
        Tensor::new(dims, data, self.dtype)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].needs_grad)
    }

    fn check_dtype(&self, t: &Tensor) -> Result<()> {
        if t.dtype() != self.dtype {
            return Err(ApnError::Usage(format!(
                "tensor dtype {:?} recorded on {:?} tape",
                t.dtype(),
                self.dtype
            )));
        }
        if !t.is_finite() {
            return Err(ApnError::Domain("non-finite value recorded on tape".into()));
        }
        Ok(())
    }

    pub fn leaf(&self, t: Tensor, kind: LeafKind) -> Result<Var> {
        self.check_dtype(&t)?;
        Ok(self.push(t, Op::Leaf(kind), kind != LeafKind::Const))
    }

    /// Record a leaf whose dtype the caller has already matched and whose
    /// values it trusts to be finite.
    pub(crate) fn leaf_trusted(&self, t: Tensor, kind: LeafKind) -> Var {
        debug_assert_eq!(t.dtype(), self.dtype);
        self.push(t, Op::Leaf(kind), kind != LeafKind::Const)
    }

    pub fn param(&self, slot: usize, t: Tensor) -> Result<Var> {
        self.leaf(t, LeafKind::Param(slot))
    }

    pub fn input(&self, t: Tensor) -> Result<Var> {
        self.leaf(t, LeafKind::Input)
    }

    pub fn constant(&self, t: Tensor) -> Result<Var> {
        self.leaf(t, LeafKind::Const)
    }

    /// Borrow a node's forward value.
    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn dims(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.dims().to_vec()
    }

    pub fn scalar_value(&self, v: Var) -> Result<f64> {
        self.value(v).item()
    }

    fn binary(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let t = {
            let nodes = self.nodes.borrow();
            nodes[a.0].value.zip_map(&nodes[b.0].value, f)?
        };
        let ng = self.needs(&[a, b]);
        Ok(self.push(t, op, ng))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Add a `[n]` bias along the last dimension of `a`.
    pub fn add_bias(&self, a: Var, bias: Var) -> Result<Var> {
        let t = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.0].value;
            let bv = &nodes[bias.0].value;
            let n = *x.dims().last().unwrap();
            if bv.len() != n {
                return Err(shape_err!("bias of {} entries for last dim {n}", bv.len()));
            }
            let b = bv.data();
            let data = x
                .data()
                .chunks(n)
                .flat_map(|row| row.iter().zip(b).map(|(u, v)| u + v))
                .collect();
            self.out(x.dims(), data)?
        };
        let ng = self.needs(&[a, bias]);
        Ok(self.push(t, Op::AddBias(a, bias), ng))
    }

    pub fn scale(&self, a: Var, s: f64) -> Result<Var> {
        let t = self.value(a).scale(s);
        let ng = self.needs(&[a]);
        Ok(self.push(t, Op::Scale(a, s), ng))
    }

    /// Matrix product over the last two axes.
    ///
    /// `b` is either rank 2 (shared across the leading axes of `a`) or has the
    /// same leading axes as `a`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (t, shared) = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
            if x.dtype() != y.dtype() {
                return Err(shape_err!("matmul dtypes {:?} vs {:?}", x.dtype(), y.dtype()));
            }
            let (xd, yd) = (x.dims(), y.dims());
            if xd.len() < 2 || yd.len() < 2 {
                return Err(shape_err!("matmul needs rank >= 2, got {xd:?} x {yd:?}"));
            }
            let (n, k) = (xd[xd.len() - 2], xd[xd.len() - 1]);
            let (k2, m) = (yd[yd.len() - 2], yd[yd.len() - 1]);
            if k != k2 {
                return Err(shape_err!("matmul inner dims {xd:?} x {yd:?}"));
            }
            let batch: usize = xd[..xd.len() - 2].iter().product();
            let shared = yd.len() == 2;
            if !shared && xd[..xd.len() - 2] != yd[..yd.len() - 2] {
                return Err(shape_err!("matmul batch dims {xd:?} x {yd:?}"));
            }
            let mut c = vec![0.0; batch * n * m];
            for bi in 0..batch {
                let bo = if shared { 0 } else { bi * k * m };
                mm_acc(
                    &x.data()[bi * n * k..(bi + 1) * n * k],
                    &y.data()[bo..bo + k * m],
                    &mut c[bi * n * m..(bi + 1) * n * m],
                    n,
                    k,
                    m,
                );
            }
            let mut od = xd[..xd.len() - 2].to_vec();
            od.extend([n, m]);
            (self.out(&od, c)?, shared)
        };
        let ng = self.needs(&[a, b]);
        Ok(self.push(t, Op::MatMul { a, b, shared_rhs: shared }, ng))
    }

    /// Swap the last two axes.
    pub fn transpose(&self, a: Var) -> Result<Var> {
        let t = {
            let x = self.value(a);
            let d = x.dims();
            if d.len() < 2 {
                return Err(shape_err!("transpose needs rank >= 2, got {d:?}"));
            }
            let (r, c) = (d[d.len() - 2], d[d.len() - 1]);
            let batch = x.len() / (r * c);
            let mut out = vec![0.0; x.len()];
            for bi in 0..batch {
                let src = &x.data()[bi * r * c..(bi + 1) * r * c];
                let dst = &mut out[bi * r * c..(bi + 1) * r * c];
                for i in 0..r {
                    for j in 0..c {
                        dst[j * r + i] = src[i * c + j];
                    }
                }
            }
            let mut od = d.to_vec();
            let l = od.len();
            od.swap(l - 1, l - 2);
            self.out(&od, out)?
        };
        let ng = self.needs(&[a]);
        Ok(self.push(t, Op::Transpose(a), ng))
    }

    pub fn relu(&self, a: Var) -> Result<Var> {
        let t = self.value(a).map(|v| v.max(0.0));
        let ng = self.needs(&[a]);
        Ok(self.push(t, Op::Relu(a), ng))
    }

    /// Inverted dropout: in training, each entry is zeroed with probability
    /// `drop_prob` and survivors are scaled by `1 / (1 - drop_prob)`. Outside
    /// training this is the identity and records nothing.
    pub fn dropout<R: Rng + ?Sized>(&self, a: Var, drop_prob: f64, train: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&drop_prob) {
            return Err(ApnError::Config(format!("dropout probability {drop_prob} outside [0, 1)")));
        }
        if !train || drop_prob == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 - drop_prob;
        let (t, mask) = {
            let x = self.value(a);
            let mask: Vec<f64> = (0..x.len())
                .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                .collect();
            let data = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
            (self.out(x.dims(), data)?, mask)
        };
        let ng = self.needs(&[a]);
        Ok(self.push(t, Op::Dropout { x: a, mask }, ng))
    }

    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(ApnError::Usage("concat of zero tensors".into()));
        }
        let t = {
            let nodes = self.nodes.borrow();
            let first = nodes[parts[0].0].value.dims().to_vec();
            if axis >= first.len() {
                return Err(shape_err!("concat axis {axis} for dims {first:?}"));
            }
            let mut total = 0;
            for p in parts {
                let d = nodes[p.0].value.dims();
                if d.len() != first.len()
                    || d.iter().zip(&first).enumerate().any(|(i, (x, y))| i != axis && x != y)
                {
                    return Err(shape_err!("concat dims {d:?} vs {first:?} along axis {axis}"));
                }
                total += d[axis];
            }
            let mut od = first.clone();
            od[axis] = total;
            let (outer, _, inner) = axis_split(&od, axis);
            let mut data = Vec::with_capacity(od.iter().product());
            for o in 0..outer {
                for p in parts {
                    let v = &nodes[p.0].value;
                    let l = v.dims()[axis] * inner;
                    data.extend_from_slice(&v.data()[o * l..(o + 1) * l]);
                }
            }
            self.out(&od, data)?
        };
        let ng = self.needs(parts);
        Ok(self.push(t, Op::Concat { parts: parts.to_vec(), axis }, ng))
    }

    pub fn slice(&self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = {
            let x = self.value(a);
            let d = x.dims();
            if axis >= d.len() || len == 0 || start + len > d[axis] {
                return Err(shape_err!("slice [{start}, {}) on axis {axis} of {d:?}", start + len));
            }
            let (outer, full, inner) = axis_split(d, axis);
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = o * full * inner + start * inner;
                data.extend_from_slice(&x.data()[base..base + len * inner]);
            }
            let mut od = d.to_vec();
            od[axis] = len;
            self.out(&od, data)?
        };
        let ng = self.needs(&[a]);
        Ok(self.push(t, Op::Slice { x: a, axis, start }, ng))
    }

    /// Mean over `axis`, removing it. A rank-1 input reduces to dims `[1]`.
    pub fn mean_axis(&self, a: Var, axis: usize) -> Result<Var> {
        let t = {
            let x = self.value(a);
            let d = x.dims();
            if axis >= d.len() {
                return Err(shape_err!("mean axis {axis} for dims {d:?}"));
            }
            let (outer, len, inner) = axis_split(d, axis);
            let mut data = vec![0.0; outer * inner];
            for o in 0..outer {
                for l in 0..len {
                    let src = &x.data()[(o * len + l) * inner..(o * len + l + 1) * inner];
                    for (acc, v) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                        *acc += v;
                    }
                }
            }
            let inv = 1.0 / len as f64;
            data.iter_mut().for_each(|v| *v *= inv);
            let mut od: Vec<usize> = d.to_vec();
            od.remove(axis);
            if od.is_empty() {
                od.push(1);
            }
            self.out(&od, data)?
        };
        let ng = self.needs(&[a]);
        Ok(self.push(t, Op::Mean { x: a, axis }, ng))
    }

    pub fn sum(&self, a: Var) -> Result<Var> {
        let t = Tensor::scalar(self.value(a).sum(), self.dtype);
        let ng = self.needs(&[a]);
        Ok(self.push(t, Op::Sum(a), ng))
    }

    pub fn reshape(&self, a: Var, dims: &[usize]) -> Result<Var> {
        let t = self.value(a).reshape(dims)?;
        let ng = self.needs(&[a]);
        Ok(self.push(t, Op::Reshape(a), ng))
    }

    /// Softmax over the last dimension, stabilised by subtracting the row max.
    pub fn softmax_lastdim(&self, a: Var) -> Result<Var> {
        let t = {
            let x = self.value(a);
            let n = *x.dims().last().unwrap();
            let mut data = Vec::with_capacity(x.len());
            for row in x.data().chunks(n) {
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let start = data.len();
                let mut z = 0.0;
                for &v in row {
                    let e = (v - mx).exp();
                    z += e;
                    data.push(e);
                }
                data[start..].iter_mut().for_each(|v| *v /= z);
            }
            self.out(x.dims(), data)?
        };
        let ng = self.needs(&[a]);
        Ok(self.push(t, Op::Softmax(a), ng))
    }

    /// Layer normalisation over the last dimension followed by a per-feature affine map.
    pub fn layer_norm(&self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(ApnError::Config(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let (t, xhat, rstd) = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            let g = nodes[gain.0].value.data();
            let b = nodes[bias.0].value.data();
            let n = *xv.dims().last().unwrap();
            if g.len() != n || b.len() != n {
                return Err(shape_err!("layer_norm gain/bias {}/{} for width {n}", g.len(), b.len()));
            }
            let rows = xv.len() / n;
            let mut xhat = Vec::with_capacity(xv.len());
            let mut rstd = Vec::with_capacity(rows);
            let mut out = Vec::with_capacity(xv.len());
            for row in xv.data().chunks(n) {
                let mu = row.iter().sum::<f64>() / n as f64;
                let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
                let r = 1.0 / (var + eps).sqrt();
                rstd.push(r);
                for (j, &v) in row.iter().enumerate() {
                    let h = (v - mu) * r;
                    xhat.push(h);
                    out.push(g[j] * h + b[j]);
                }
            }
            (self.out(xv.dims(), out)?, xhat, rstd)
        };
        let ng = self.needs(&[x, gain, bias]);
        Ok(self.push(t, Op::LayerNorm { x, gain, bias, xhat, rstd }, ng))
    }

    /// `-log softmax(logits)[label]` for a single logit vector.
    pub fn cross_entropy(&self, logits: Var, label: usize) -> Result<Var> {
        let (t, probs) = {
            let x = self.value(logits);
            let d = x.dims();
            if !(d.len() == 1 || (d.len() == 2 && d[0] == 1)) {
                return Err(shape_err!("cross_entropy expects a logit vector, got {d:?}"));
            }
            let k = x.len();
            if label >= k {
                return Err(ApnError::Domain(format!("label {label} outside 0..{k}")));
            }
            let mx = x.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = x.data().iter().map(|v| (v - mx).exp()).collect();
            let z: f64 = exps.iter().sum();
            let loss = z.ln() + mx - x.data()[label];
            let probs = exps.iter().map(|e| e / z).collect();
            (Tensor::scalar(loss, self.dtype), probs)
        };
        let ng = self.needs(&[logits]);
        Ok(self.push(t, Op::CrossEntropy { logits, label, probs }, ng))
    }

    /// `½ Σ (a − b)²`, divided by the element count when `normalize` is set.
    pub fn half_sq_dist(&self, a: Var, b: Var, normalize: bool) -> Result<Var> {
        let (t, denom) = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
            if x.dims() != y.dims() {
                return Err(shape_err!("half_sq_dist dims {:?} vs {:?}", x.dims(), y.dims()));
            }
            let denom = if normalize { x.len() as f64 } else { 1.0 };
            let s: f64 = x.data().iter().zip(y.data()).map(|(u, v)| (u - v) * (u - v)).sum();
            (Tensor::scalar(0.5 * s / denom, self.dtype), denom)
        };
        let ng = self.needs(&[a, b]);
        Ok(self.push(t, Op::HalfSqDist { a, b, denom }, ng))
    }

    /// `out[i] = x[index[i]]` over flat storage, reshaped to `dims`.
    pub fn gather(&self, x: Var, index: Vec<usize>, dims: &[usize]) -> Result<Var> {
        let t = {
            let v = self.value(x);
            if let Some(&bad) = index.iter().find(|&&i| i >= v.len()) {
                return Err(shape_err!("gather index {bad} outside {} elements", v.len()));
            }
            let data = index.iter().map(|&i| v.data()[i]).collect();
            self.out(dims, data)?
        };
        let ng = self.needs(&[x]);
        Ok(self.push(t, Op::Gather { x, index }, ng))
    }

    /// Row lookup into a `[rows, width]` table.
    pub fn embedding(&self, table: Var, rows: &[usize]) -> Result<Var> {
        let d = self.dims(table);
        if d.len() != 2 {
            return Err(shape_err!("embedding table must be rank 2, got {d:?}"));
        }
        if let Some(&r) = rows.iter().find(|&&r| r >= d[0]) {
            return Err(shape_err!("embedding row {r} outside table of {} rows", d[0]));
        }
        let w = d[1];
        let index = rows.iter().flat_map(|&r| r * w..(r + 1) * w).collect();
        self.gather(table, index, &[rows.len(), w])
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.len() != 1 {
            return Err(ApnError::Usage(format!(
                "backward from non-scalar node with dims {:?}",
                nodes[loss.0].value.dims()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();
        let dtype = self.dtype;

        for idx in (0..=loss.0).rev() {
            let Some(mut g) = grads[idx].take() else { continue };
            let node = &nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if dtype == DType::F32 {
                g.iter_mut().for_each(|v| *v = *v as f32 as f64);
            }
            let mut acc = |v: Var, f: &dyn Fn(&mut [f64])| {
                if !nodes[v.0].needs_grad {
                    return;
                }
                let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
                f(slot);
            };
            match &node.op {
                Op::Leaf(kind) => {
                    if let LeafKind::Param(slot) = kind {
                        out.params.insert(*slot, Var(idx));
                    }
                    let t = Tensor::new(node.value.dims(), g, dtype)?;
                    out.by_leaf.insert(Var(idx), t);
                }
                Op::Add(a, b) => {
                    acc(*a, &|s| s.iter_mut().zip(&g).for_each(|(x, y)| *x += y));
                    acc(*b, &|s| s.iter_mut().zip(&g).for_each(|(x, y)| *x += y));
                }
                Op::Sub(a, b) => {
                    acc(*a, &|s| s.iter_mut().zip(&g).for_each(|(x, y)| *x += y));
                    acc(*b, &|s| s.iter_mut().zip(&g).for_each(|(x, y)| *x -= y));
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    acc(*a, &|s| {
                        for i in 0..s.len() {
                            s[i] += g[i] * bv[i];
                        }
                    });
                    acc(*b, &|s| {
                        for i in 0..s.len() {
                            s[i] += g[i] * av[i];
                        }
                    });
                }
                Op::AddBias(a, bias) => {
                    acc(*a, &|s| s.iter_mut().zip(&g).for_each(|(x, y)| *x += y));
                    acc(*bias, &|s| {
                        let n = s.len();
                        for row in g.chunks(n) {
                            s.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                        }
                    });
                }
                Op::Scale(a, c) => {
                    acc(*a, &|s| s.iter_mut().zip(&g).for_each(|(x, y)| *x += c * y));
                }
                Op::MatMul { a, b, shared_rhs } => {
                    let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
                    let (xd, yd) = (x.dims(), y.dims());
                    let (n, k) = (xd[xd.len() - 2], xd[xd.len() - 1]);
                    let m = yd[yd.len() - 1];
                    let batch = x.len() / (n * k);
                    acc(*a, &|s| {
                        for bi in 0..batch {
                            let bo = if *shared_rhs { 0 } else { bi * k * m };
                            mm_nt_acc(
                                &g[bi * n * m..(bi + 1) * n * m],
                                &y.data()[bo..bo + k * m],
                                &mut s[bi * n * k..(bi + 1) * n * k],
                                n,
                                m,
                                k,
                            );
                        }
                    });
                    acc(*b, &|s| {
                        for bi in 0..batch {
                            let bo = if *shared_rhs { 0 } else { bi * k * m };
                            mm_tn_acc(
                                &x.data()[bi * n * k..(bi + 1) * n * k],
                                &g[bi * n * m..(bi + 1) * n * m],
                                &mut s[bo..bo + k * m],
                                n,
                                k,
                                m,
                            );
                        }
                    });
                }
                Op::Transpose(a) => {
                    let d = node.value.dims();
                    let (r, c) = (d[d.len() - 2], d[d.len() - 1]);
                    let batch = g.len() / (r * c);
                    acc(*a, &|s| {
                        for bi in 0..batch {
                            let o = bi * r * c;
                            for i in 0..r {
                                for j in 0..c {
                                    s[o + j * r + i] += g[o + i * c + j];
                                }
                            }
                        }
                    });
                }
                Op::Relu(a) => {
                    let xv = nodes[a.0].value.data();
                    acc(*a, &|s| {
                        for i in 0..s.len() {
                            if xv[i] > 0.0 {
                                s[i] += g[i];
                            }
                        }
                    });
                }
                Op::Dropout { x, mask } => {
                    acc(*x, &|s| {
                        for i in 0..s.len() {
                            s[i] += g[i] * mask[i];
                        }
                    });
                }
                Op::Concat { parts, axis } => {
                    let od = node.value.dims();
                    let (outer, total, inner) = axis_split(od, *axis);
                    let mut offset = 0;
                    for p in parts {
                        let len = nodes[p.0].value.dims()[*axis];
                        acc(*p, &|s| {
                            for o in 0..outer {
                                let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                                let dst = &mut s[o * len * inner..(o + 1) * len * inner];
                                dst.iter_mut().zip(src).for_each(|(x, y)| *x += y);
                            }
                        });
                        offset += len;
                    }
                }
                Op::Slice { x, axis, start } => {
                    let full = nodes[x.0].value.dims()[*axis];
                    let (outer, len, inner) = axis_split(node.value.dims(), *axis);
                    acc(*x, &|s| {
                        for o in 0..outer {
                            let base = o * full * inner + start * inner;
                            let src = &g[o * len * inner..(o + 1) * len * inner];
                            s[base..base + len * inner].iter_mut().zip(src).for_each(|(x, y)| *x += y);
                        }
                    });
                }
                Op::Mean { x, axis } => {
                    let (outer, len, inner) = axis_split(nodes[x.0].value.dims(), *axis);
                    let inv = 1.0 / len as f64;
                    acc(*x, &|s| {
                        for o in 0..outer {
                            for l in 0..len {
                                let dst = &mut s[(o * len + l) * inner..(o * len + l + 1) * inner];
                                let src = &g[o * inner..(o + 1) * inner];
                                dst.iter_mut().zip(src).for_each(|(x, y)| *x += y * inv);
                            }
                        }
                    });
                }
                Op::Sum(a) => {
                    acc(*a, &|s| s.iter_mut().for_each(|x| *x += g[0]));
                }
                Op::Reshape(a) => {
                    acc(*a, &|s| s.iter_mut().zip(&g).for_each(|(x, y)| *x += y));
                }
                Op::Softmax(a) => {
                    let y = node.value.data();
                    let n = *node.value.dims().last().unwrap();
                    acc(*a, &|s| {
                        for r in 0..y.len() / n {
                            let (yr, gr) = (&y[r * n..(r + 1) * n], &g[r * n..(r + 1) * n]);
                            let dot: f64 = yr.iter().zip(gr).map(|(u, v)| u * v).sum();
                            for j in 0..n {
                                s[r * n + j] += yr[j] * (gr[j] - dot);
                            }
                        }
                    });
                }
                Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                    let gv = nodes[gain.0].value.data();
                    let n = gv.len();
                    acc(*gain, &|s| {
                        for (row, hrow) in g.chunks(n).zip(xhat.chunks(n)) {
                            for j in 0..n {
                                s[j] += row[j] * hrow[j];
                            }
                        }
                    });
                    acc(*bias, &|s| {
                        for row in g.chunks(n) {
                            s.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                        }
                    });
                    acc(*x, &|s| {
                        for (r, &rs) in rstd.iter().enumerate() {
                            let gr = &g[r * n..(r + 1) * n];
                            let hr = &xhat[r * n..(r + 1) * n];
                            let mut m1 = 0.0;
                            let mut m2 = 0.0;
                            for j in 0..n {
                                let dh = gr[j] * gv[j];
                                m1 += dh;
                                m2 += dh * hr[j];
                            }
                            m1 /= n as f64;
                            m2 /= n as f64;
                            for j in 0..n {
                                let dh = gr[j] * gv[j];
                                s[r * n + j] += rs * (dh - m1 - hr[j] * m2);
                            }
                        }
                    });
                }
                Op::CrossEntropy { logits, label, probs } => {
                    acc(*logits, &|s| {
                        for (j, p) in probs.iter().enumerate() {
                            let t = if j == *label { 1.0 } else { 0.0 };
                            s[j] += g[0] * (p - t);
                        }
                    });
                }
                Op::HalfSqDist { a, b, denom } => {
                    let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    let c = g[0] / denom;
                    acc(*a, &|s| {
                        for i in 0..s.len() {
                            s[i] += c * (av[i] - bv[i]);
                        }
                    });
                    acc(*b, &|s| {
                        for i in 0..s.len() {
                            s[i] -= c * (av[i] - bv[i]);
                        }
                    });
                }
                Op::Gather { x, index } => {
                    acc(*x, &|s| {
                        for (gi, &i) in g.iter().zip(index) {
                            s[i] += gi;
                        }
                    });
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(dims: &[usize], v: &[f64]) -> Tensor {
        Tensor::from_f64(dims, v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let tape = Tape::new(DType::F64);
        let a = tape.input(t64(&[2, 2], &[1., 2., 3., 4.])).unwrap();
        let i = tape.constant(Tensor::identity(2, DType::F64).unwrap()).unwrap();
        let c = tape.matmul(a, i).unwrap();
        assert_eq!(tape.value(c).data(), &[1., 2., 3., 4.]);

        let r = tape.input(t64(&[1, 2], &[1., 2.])).unwrap();
        let col = tape.input(t64(&[2, 1], &[3., 4.])).unwrap();
        let d = tape.matmul(r, col).unwrap();
        assert_eq!(tape.value(d).data(), &[11.]);
        assert_eq!(tape.dims(d), vec![1, 1]);
    }

    #[test]
    fn matmul_zeros_and_mismatch() {
        let tape = Tape::new(DType::F64);
        let z = tape.input(Tensor::zeros(&[2, 3], DType::F64).unwrap()).unwrap();
        let b = tape.input(t64(&[3, 4], &(0..12).map(|v| v as f64 + 0.5).collect::<Vec<_>>())).unwrap();
        let c = tape.matmul(z, b).unwrap();
        assert_eq!(tape.dims(c), vec![2, 4]);
        assert!(tape.value(c).data().iter().all(|&v| v == 0.0));
        assert!(matches!(tape.matmul(b, z), Err(ApnError::Shape(_))));
    }

    #[test]
    fn softmax_examples() {
        let tape = Tape::new(DType::F64);
        let x = tape.input(t64(&[3], &[0.7, 0.7, 0.7])).unwrap();
        let s = tape.softmax_lastdim(x).unwrap();
        for &v in tape.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = tape.input(t64(&[2], &[0.0, 3f64.ln()])).unwrap();
        let s = tape.softmax_lastdim(x).unwrap();
        let v = tape.value(s).data().to_vec();
        assert!((v[0] - 0.25).abs() < 1e-12 && (v[1] - 0.75).abs() < 1e-12);
        let x = tape.input(t64(&[2], &[1000.0, 0.0])).unwrap();
        let s = tape.softmax_lastdim(x).unwrap();
        let v = tape.value(s).data().to_vec();
        assert!(v.iter().all(|x| x.is_finite()));
        assert!((v[0] - 1.0).abs() < 1e-12 && v[1] < 1e-12);
    }

    #[test]
    fn layer_norm_examples() {
        let tape = Tape::new(DType::F64);
        let ones = tape.constant(Tensor::full(&[2], 1.0, DType::F64).unwrap()).unwrap();
        let zeros = tape.constant(Tensor::zeros(&[2], DType::F64).unwrap()).unwrap();
        let c = tape.input(t64(&[2], &[5.0, 5.0])).unwrap();
        let y = tape.layer_norm(c, ones, zeros, 1e-5).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0]);

        let x = tape.input(t64(&[2], &[1.0, 3.0])).unwrap();
        let y = tape.layer_norm(x, ones, zeros, 1e-12).unwrap();
        let v = tape.value(y).data().to_vec();
        assert!((v[0] + 1.0).abs() < 1e-9 && (v[1] - 1.0).abs() < 1e-9);

        let g0 = tape.constant(Tensor::zeros(&[2], DType::F64).unwrap()).unwrap();
        let b = tape.constant(t64(&[2], &[0.3, 0.3])).unwrap();
        let y = tape.layer_norm(x, g0, b, 1e-5).unwrap();
        assert_eq!(tape.value(y).data(), &[0.3, 0.3]);
        assert!(tape.layer_norm(x, ones, zeros, 0.0).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let tape = Tape::new(DType::F64);
        let u = tape.input(t64(&[4], &[0.2; 4])).unwrap();
        let l = tape.cross_entropy(u, 2).unwrap();
        assert!((tape.scalar_value(l).unwrap() - 4f64.ln()).abs() < 1e-12);

        let sat = tape.input(t64(&[3], &[0.0, 50.0, 0.0])).unwrap();
        let l = tape.cross_entropy(sat, 1).unwrap();
        assert!(tape.scalar_value(l).unwrap() < 1e-20);

        let one = tape.input(t64(&[1], &[-3.0])).unwrap();
        let l = tape.cross_entropy(one, 0).unwrap();
        assert_eq!(tape.scalar_value(l).unwrap(), 0.0);

        assert!(matches!(tape.cross_entropy(u, 4), Err(ApnError::Domain(_))));
    }

    #[test]
    fn half_sq_dist_examples() {
        let tape = Tape::new(DType::F64);
        let a = tape.input(t64(&[2], &[1.0, 0.0])).unwrap();
        let z = tape.input(t64(&[2], &[0.0, 0.0])).unwrap();
        let two = tape.input(t64(&[2], &[2.0, 2.0])).unwrap();
        let d = tape.half_sq_dist(a, a, false).unwrap();
        assert_eq!(tape.scalar_value(d).unwrap(), 0.0);
        let d = tape.half_sq_dist(a, z, false).unwrap();
        assert_eq!(tape.scalar_value(d).unwrap(), 0.5);
        let d = tape.half_sq_dist(two, z, false).unwrap();
        assert_eq!(tape.scalar_value(d).unwrap(), 4.0);
        let d = tape.half_sq_dist(two, z, true).unwrap();
        assert_eq!(tape.scalar_value(d).unwrap(), 2.0);
        let bad = tape.input(t64(&[3], &[0.0; 3])).unwrap();
        assert!(matches!(tape.half_sq_dist(a, bad, false), Err(ApnError::Shape(_))));
    }

    #[test]
    fn backward_basic() {
        let tape = Tape::new(DType::F64);
        let x = tape.input(t64(&[2], &[3.0, 4.0])).unwrap();
        let p = tape.param(0, t64(&[2], &[1.0, 1.0])).unwrap();
        let z = tape.constant(Tensor::zeros(&[2], DType::F64).unwrap()).unwrap();
        let loss = tape.half_sq_dist(x, z, false).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[3.0, 4.0]);
        assert!(g.get(p).is_none());
        assert!(g.param(0).is_none());
        assert!(g.get(z).is_none());
        assert!(matches!(tape.backward(x), Err(ApnError::Usage(_))));
    }

    #[test]
    fn dropout_eval_is_identity() {
        let tape = Tape::new(DType::F64);
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let x = tape.input(t64(&[3], &[1., 2., 3.])).unwrap();
        let y = tape.dropout(x, 0.8, false, &mut rng).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn concat_slice_mean() {
        let tape = Tape::new(DType::F64);
        let a = tape.input(t64(&[1, 2], &[1., 2.])).unwrap();
        let b = tape.input(t64(&[2, 2], &[3., 4., 5., 6.])).unwrap();
        let c = tape.concat(&[a, b], 0).unwrap();
        assert_eq!(tape.value(c).data(), &[1., 2., 3., 4., 5., 6.]);
        let s = tape.slice(c, 0, 1, 2).unwrap();
        assert_eq!(tape.value(s).data(), &[3., 4., 5., 6.]);
        let m = tape.mean_axis(c, 0).unwrap();
        assert_eq!(tape.value(m).data(), &[3., 4.]);
        let c1 = tape.concat(&[b, b], 1).unwrap();
        assert_eq!(tape.value(c1).data(), &[3., 4., 3., 4., 5., 6., 5., 6.]);
        assert!(tape.slice(c, 0, 2, 2).is_err());
    }
}
