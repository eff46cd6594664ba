use std::collections::HashMap;

use super::conv::{col2im, im2col, ConvGeometry};
use super::{axis_split, ParamId, ParamStore, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// User-supplied differentiable operation. The caller computes the forward
/// value; the graph calls `backward` with the upstream gradient.
pub trait CustomOp<T: Real> {
    fn name(&self) -> &str;

    /// Gradient contribution for each input, in input order.
    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, grad_out: &[T]) -> Vec<Vec<T>>;
}

enum Op<T: Real> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Exp(Var),
    Square(Var),
    Abs(Var),
    Sigmoid(Var),
    Tanh(Var),
    LeakyRelu(Var, T),
    Clamp(Var, T, T),
    Sum(Var),
    SumAxis(Var, usize),
    MinAxis {
        x: Var,
        axis: usize,
        argmin: Vec<usize>,
    },
    Squash(Var, usize),
    Softmax(Var, usize),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Gather(Var, Vec<usize>),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeometry,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Custom(Vec<Var>, Box<dyn CustomOp<T>>),
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Define-by-run computation graph. Nodes are appended in evaluation order,
/// so every input id is smaller than its consumer's.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by leaf [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let pad = |s: &[usize], i: usize| -> usize {
        let off = rank - s.len();
        if i < off {
            1
        } else {
            s[i - off]
        }
    };
    (0..rank)
        .map(|i| {
            let (x, y) = (pad(a, i), pad(b, i));
            if x == y || y == 1 {
                Ok(x)
            } else if x == 1 {
                Ok(y)
            } else {
                Err(Error::dim(format!("cannot broadcast {a:?} with {b:?}")))
            }
        })
        .collect()
}

/// Strides of `shape` read against `out`; broadcast dimensions get stride 0.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let off = out.len() - shape.len();
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i + off] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Visits `(out_index, a_offset, b_offset)` over a broadcast pair.
fn for_each_broadcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let total: usize = out.iter().product();
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    for o in 0..total {
        f(o, oa, ob);
        for d in (0..rank).rev() {
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

/// How the second operand of a binary op maps onto the output.
enum Layout {
    Same,
    /// `b` repeats along leading dimensions (`b` is a suffix of `a`).
    Suffix(usize),
    General(Vec<usize>, Vec<usize>, Vec<usize>),
}

fn layout(a: &[usize], b: &[usize]) -> Result<Layout> {
    if a == b {
        return Ok(Layout::Same);
    }
    if b.len() <= a.len() && a[a.len() - b.len()..] == *b {
        return Ok(Layout::Suffix(b.iter().product()));
    }
    let out = broadcast_shape(a, b)?;
    let sa = broadcast_strides(a, &out);
    let sb = broadcast_strides(b, &out);
    Ok(Layout::General(out, sa, sb))
}

fn zip_binary<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    match layout(a.shape(), b.shape())? {
        Layout::Same => {
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(a.shape(), data)
        }
        Layout::Suffix(n) => {
            let bd = b.data();
            let data = a
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, bd[i % n]))
                .collect();
            Tensor::new(a.shape(), data)
        }
        Layout::General(out, sa, sb) => {
            let mut data = vec![T::zero(); out.iter().product()];
            let (ad, bd) = (a.data(), b.data());
            for_each_broadcast(&out, &sa, &sb, |o, ia, ib| data[o] = f(ad[ia], bd[ib]));
            Tensor::new(&out, data)
        }
    }
}

/// Accumulates `da(g, a, b)` / `db(g, a, b)` back through a broadcast pair.
#[allow(clippy::too_many_arguments)]
fn binary_backward<T: Real>(
    g: &[T],
    a: &Tensor<T>,
    b: &Tensor<T>,
    ga: Option<&mut Vec<T>>,
    gb: Option<&mut Vec<T>>,
    da: impl Fn(T, T, T) -> T,
    db: impl Fn(T, T, T) -> T,
) {
    let (ad, bd) = (a.data(), b.data());
    match layout(a.shape(), b.shape()).expect("validated in forward") {
        Layout::Same => {
            if let Some(ga) = ga {
                for i in 0..g.len() {
                    ga[i] += da(g[i], ad[i], bd[i]);
                }
            }
            if let Some(gb) = gb {
                for i in 0..g.len() {
                    gb[i] += db(g[i], ad[i], bd[i]);
                }
            }
        }
        Layout::Suffix(n) => {
            if let Some(ga) = ga {
                for i in 0..g.len() {
                    ga[i] += da(g[i], ad[i], bd[i % n]);
                }
            }
            if let Some(gb) = gb {
                for i in 0..g.len() {
                    gb[i % n] += db(g[i], ad[i], bd[i % n]);
                }
            }
        }
        Layout::General(out, sa, sb) => {
            let (mut ga, mut gb) = (ga, gb);
            for_each_broadcast(&out, &sa, &sb, |o, ia, ib| {
                if let Some(ga) = ga.as_deref_mut() {
                    ga[ia] += da(g[o], ad[ia], bd[ib]);
                }
                if let Some(gb) = gb.as_deref_mut() {
                    gb[ib] += db(g[o], ad[ia], bd[ib]);
                }
            });
        }
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push(value, op, needs)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Input that receives a gradient.
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf bound to a stored parameter. Repeated requests for the same id
    /// return the same node, so shared weights accumulate one gradient.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let trainable = store.is_trainable(id);
        let v = self.push(store.value(id).clone(), Op::Leaf, trainable);
        self.params.insert(id, v);
        v
    }

    /// Parameter gradients in store order; parameters the loss never reached
    /// get zeros.
    pub fn param_grads(&self, grads: &Gradients<T>, store: &ParamStore<T>) -> Vec<Vec<T>> {
        store
            .ids()
            .map(|id| {
                self.params
                    .get(&id)
                    .and_then(|&v| grads.get(v))
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![T::zero(); store.value(id).len()])
            })
            .collect()
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim(format!("matmul {sa:?} · {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            false,
        );
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.derived(value, Op::MatMul(a, b), &[a, b]))
    }

    // ---- elementwise ----------------------------------------------------

    /// Elementwise sum with broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = zip_binary(self.value(a), self.value(b), |x, y| x + y)?;
        Ok(self.derived(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = zip_binary(self.value(a), self.value(b), |x, y| x - y)?;
        Ok(self.derived(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = zip_binary(self.value(a), self.value(b), |x, y| x * y)?;
        Ok(self.derived(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let v = self.value(x).map(|e| e * s);
        self.derived(v, Op::Scale(x, s), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Var {
        let v = self.value(x).map(|e| e + s);
        self.derived(v, Op::AddScalar(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| e.exp());
        self.derived(v, Op::Exp(x), &[x])
    }

    pub fn square(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| e * e);
        self.derived(v, Op::Square(x), &[x])
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| e.abs());
        self.derived(v, Op::Abs(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(sigmoid);
        self.derived(v, Op::Sigmoid(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| e.tanh());
        self.derived(v, Op::Tanh(x), &[x])
    }

    /// `x` for `x ≥ 0`, `slope·x` otherwise.
    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        let v = self
            .value(x)
            .map(|e| if e >= T::zero() { e } else { e * slope });
        self.derived(v, Op::LeakyRelu(x, slope), &[x])
    }

    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        let v = self.value(x).map(|e| e.max(lo).min(hi));
        self.derived(v, Op::Clamp(x, lo, hi), &[x])
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.derived(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Sums out `axis`, removing it (rank-1 inputs reduce to shape `[1]`).
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.check_axis(x, axis)?;
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let row = &src[(o * len + l) * inner..][..inner];
                for (acc, &v) in out[o * inner..][..inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        let value = Tensor::new(&reduced_shape(&shape, axis), out)?;
        Ok(self.derived(value, Op::SumAxis(x, axis), &[x]))
    }

    /// Minimum over `axis`. Ties resolve to the lowest index, which is also
    /// the only entry that receives gradient.
    pub fn min_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.check_axis(x, axis)?;
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        let mut argmin = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = 0;
                let mut best_v = src[o * len * inner + i];
                for l in 1..len {
                    let v = src[(o * len + l) * inner + i];
                    if v < best_v {
                        best = l;
                        best_v = v;
                    }
                }
                out[o * inner + i] = best_v;
                argmin[o * inner + i] = best;
            }
        }
        let value = Tensor::new(&reduced_shape(&shape, axis), out)?;
        Ok(self.derived(value, Op::MinAxis { x, axis, argmin }, &[x]))
    }

    // ---- vector non-linearities ----------------------------------------

    /// Capsule squash along `axis`: `v · ‖v‖ / (1 + ‖v‖²)`, zero at the origin.
    pub fn squash(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.check_axis(x, axis)?;
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let n2: T = (0..len).map(|l| src[base + l * inner].powi(2)).sum();
                let factor = n2.sqrt() / (T::one() + n2);
                for l in 0..len {
                    out[base + l * inner] = src[base + l * inner] * factor;
                }
            }
        }
        let value = Tensor::new(&shape, out)?;
        Ok(self.derived(value, Op::Squash(x, axis), &[x]))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.check_axis(x, axis)?;
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let max = (0..len)
                    .map(|l| src[base + l * inner])
                    .fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for l in 0..len {
                    let e = (src[base + l * inner] - max).exp();
                    out[base + l * inner] = e;
                    total += e;
                }
                for l in 0..len {
                    out[base + l * inner] = out[base + l * inner] / total;
                }
            }
        }
        let value = Tensor::new(&shape, out)?;
        Ok(self.derived(value, Op::Softmax(x, axis), &[x]))
    }

    // ---- layout ---------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        Ok(self.derived(value, Op::Reshape(x), &[x]))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::dim("concat of zero tensors"))?;
        let base = self.check_axis(*first, axis)?;
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::dim(format!(
                    "concat along {axis}: {s:?} incompatible with {base:?}"
                )));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in xs {
                let len = self.shape(v)[axis];
                out.extend_from_slice(&self.value(v).data()[o * len * inner..][..len * inner]);
            }
        }
        let value = Tensor::new(&shape, out)?;
        Ok(self.derived(value, Op::Concat(xs.to_vec(), axis), xs))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.check_axis(x, axis)?;
        if len == 0 || start + len > shape[axis] {
            return Err(Error::dim(format!(
                "narrow [{start}, {}) out of range for axis {axis} of {shape:?}",
                start + len
            )));
        }
        let (outer, full, inner) = axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&src[(o * full + start) * inner..][..len * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        let value = Tensor::new(&new_shape, out)?;
        Ok(self.derived(value, Op::Narrow { x, axis, start }, &[x]))
    }

    /// Rows `idx` of axis 0, in order, repeats allowed.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if idx.is_empty() {
            return Err(Error::dim("gather with no indices"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= shape[0]) {
            return Err(Error::dim(format!("gather index {bad} out of {}", shape[0])));
        }
        let row: usize = shape[1..].iter().product();
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * row);
        for &i in idx {
            out.extend_from_slice(&src[i * row..][..row]);
        }
        let mut new_shape = shape;
        new_shape[0] = idx.len();
        let value = Tensor::new(&new_shape, out)?;
        Ok(self.derived(value, Op::Gather(x, idx.to_vec()), &[x]))
    }

    // ---- layers ---------------------------------------------------------

    /// Cross-correlation of `x: [N, C, H, W]` with `w: [K, C, kh, kw]` plus
    /// per-channel bias `b: [K]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || bs != [ws[0]] {
            return Err(Error::dim(format!(
                "conv2d input {xs:?}, kernels {ws:?}, bias {bs:?}"
            )));
        }
        let geom = ConvGeometry::new(xs, ws, stride, pad)?;
        let cols = im2col(self.value(x).data(), &geom);
        let (k, ckk, spatial) = (geom.k, geom.patch(), geom.n * geom.out_hw());
        let mut tmp = vec![T::zero(); k * spatial];
        T::gemm(
            k,
            ckk,
            spatial,
            self.value(w).data(),
            false,
            &cols,
            false,
            &mut tmp,
            false,
        );
        let bias = self.value(b).data();
        let hw = geom.out_hw();
        let mut out = vec![T::zero(); geom.n * k * hw];
        for ni in 0..geom.n {
            for ki in 0..k {
                let dst = &mut out[(ni * k + ki) * hw..][..hw];
                let src = &tmp[ki * spatial + ni * hw..][..hw];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = s + bias[ki];
                }
            }
        }
        let value = Tensor::new(&[geom.n, k, geom.out_h, geom.out_w], out)?;
        Ok(self.derived(value, Op::Conv2d { x, w, b, geom }, &[x, w, b]))
    }

    /// Training-mode batch normalization of `x: [B, F]`. Returns the output
    /// and the batch mean and (biased) variance per feature.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> Result<(Var, Vec<T>, Vec<T>)> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || self.shape(gamma) != [shape[1]] || self.shape(beta) != [shape[1]] {
            return Err(Error::dim(format!("batch_norm input {shape:?}")));
        }
        let (rows, feats) = (shape[0], shape[1]);
        if rows < 2 {
            return Err(Error::DegenerateBatch(rows));
        }
        let src = self.value(x).data();
        let nb = T::lit(rows as f64);
        let mut mean = vec![T::zero(); feats];
        let mut var = vec![T::zero(); feats];
        for r in 0..rows {
            for f in 0..feats {
                mean[f] += src[r * feats + f];
            }
        }
        mean.iter_mut().for_each(|m| *m = *m / nb);
        for r in 0..rows {
            for f in 0..feats {
                var[f] += (src[r * feats + f] - mean[f]).powi(2);
            }
        }
        var.iter_mut().for_each(|v| *v = *v / nb);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); rows * feats];
        let mut out = vec![T::zero(); rows * feats];
        for r in 0..rows {
            for f in 0..feats {
                let i = r * feats + f;
                xhat[i] = (src[i] - mean[f]) * inv_std[f];
                out[i] = gd[f] * xhat[i] + bd[f];
            }
        }
        let value = Tensor::new(&shape, out)?;
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        };
        Ok((self.derived(value, op, &[x, gamma, beta]), mean, var))
    }

    /// Records a [`CustomOp`] whose forward value the caller computed.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor<T>, op: Box<dyn CustomOp<T>>) -> Var {
        self.derived(value, Op::Custom(inputs.to_vec(), op), inputs)
    }

    fn check_axis(&self, x: Var, axis: usize) -> Result<Vec<usize>> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim(format!("axis {axis} out of range for {shape:?}")));
        }
        Ok(shape)
    }

    // ---- reverse pass ---------------------------------------------------

    /// Reverse-mode pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let (lower, upper) = grads.split_at_mut(id);
            let Some(g) = upper[0].as_deref() else {
                continue;
            };
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            self.backward_node(node, g, lower);
            if !matches!(node.op, Op::Leaf) {
                upper[0] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn slot<'a>(&self, lower: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(lower[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn unary(&self, lower: &mut [Option<Vec<T>>], x: Var, g: &[T], f: impl Fn(usize, T) -> T) {
        if let Some(gx) = self.slot(lower, x) {
            for (i, (acc, &gi)) in gx.iter_mut().zip(g).enumerate() {
                *acc += f(i, gi);
            }
        }
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], lower: &mut [Option<Vec<T>>]) {
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.slot(lower, *a) {
                    T::gemm(m, n, k, g, false, bv, true, ga, true);
                }
                if let Some(gb) = self.slot(lower, *b) {
                    T::gemm(k, m, n, av, true, g, false, gb, true);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let run = |ga: Option<&mut Vec<T>>, gb: Option<&mut Vec<T>>| match &node.op {
                    Op::Add(..) => binary_backward(g, av, bv, ga, gb, |g, _, _| g, |g, _, _| g),
                    Op::Sub(..) => binary_backward(g, av, bv, ga, gb, |g, _, _| g, |g, _, _| -g),
                    _ => binary_backward(g, av, bv, ga, gb, |g, _, y| g * y, |g, x, _| g * x),
                };
                if a == b {
                    // Same node on both sides: accumulate both routes separately.
                    let mut ta = vec![T::zero(); av.len()];
                    let mut tb = vec![T::zero(); av.len()];
                    run(Some(&mut ta), Some(&mut tb));
                    if let Some(gx) = self.slot(lower, *a) {
                        for i in 0..gx.len() {
                            gx[i] += ta[i] + tb[i];
                        }
                    }
                } else {
                    let (ga, gb) = self.two_slots(lower, *a, *b);
                    run(ga, gb);
                }
            }
            Op::Scale(x, s) => self.unary(lower, *x, g, |_, gi| gi * *s),
            Op::AddScalar(x) => self.unary(lower, *x, g, |_, gi| gi),
            Op::Exp(x) => self.unary(lower, *x, g, |i, gi| gi * out[i]),
            Op::Square(x) => {
                let xv = self.value(*x).data();
                self.unary(lower, *x, g, |i, gi| gi * T::lit(2.0) * xv[i])
            }
            Op::Abs(x) => {
                let xv = self.value(*x).data();
                self.unary(lower, *x, g, |i, gi| {
                    if xv[i] > T::zero() {
                        gi
                    } else if xv[i] < T::zero() {
                        -gi
                    } else {
                        T::zero()
                    }
                })
            }
            Op::Sigmoid(x) => self.unary(lower, *x, g, |i, gi| gi * out[i] * (T::one() - out[i])),
            Op::Tanh(x) => self.unary(lower, *x, g, |i, gi| gi * (T::one() - out[i] * out[i])),
            Op::LeakyRelu(x, slope) => {
                let xv = self.value(*x).data();
                self.unary(lower, *x, g, |i, gi| {
                    if xv[i] >= T::zero() {
                        gi
                    } else {
                        gi * *slope
                    }
                })
            }
            Op::Clamp(x, lo, hi) => {
                let xv = self.value(*x).data();
                self.unary(lower, *x, g, |i, gi| {
                    if xv[i] >= *lo && xv[i] <= *hi {
                        gi
                    } else {
                        T::zero()
                    }
                })
            }
            Op::Sum(x) => {
                if let Some(gx) = self.slot(lower, *x) {
                    for acc in gx.iter_mut() {
                        *acc += g[0];
                    }
                }
            }
            Op::SumAxis(x, axis) => {
                let (outer, len, inner) = axis_split(self.shape(*x), *axis);
                if let Some(gx) = self.slot(lower, *x) {
                    for o in 0..outer {
                        for l in 0..len {
                            for i in 0..inner {
                                gx[(o * len + l) * inner + i] += g[o * inner + i];
                            }
                        }
                    }
                }
            }
            Op::MinAxis { x, axis, argmin } => {
                let (_, len, inner) = axis_split(self.shape(*x), *axis);
                if let Some(gx) = self.slot(lower, *x) {
                    for (j, &l) in argmin.iter().enumerate() {
                        let (o, i) = (j / inner, j % inner);
                        gx[(o * len + l) * inner + i] += g[j];
                    }
                }
            }
            Op::Squash(x, axis) => {
                let (outer, len, inner) = axis_split(self.shape(*x), *axis);
                let xv = self.value(*x).data();
                let eps = T::lit(1e-12);
                if let Some(gx) = self.slot(lower, *x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let at = |l: usize| base + l * inner;
                            let n2: T = (0..len).map(|l| xv[at(l)].powi(2)).sum();
                            let n = n2.sqrt();
                            let d = T::one() + n2;
                            let f = n / d;
                            let fp_over_n = (T::one() - n2) / (d * d * (n + eps));
                            let dot: T = (0..len).map(|l| xv[at(l)] * g[at(l)]).sum();
                            for l in 0..len {
                                gx[at(l)] += f * g[at(l)] + fp_over_n * dot * xv[at(l)];
                            }
                        }
                    }
                }
            }
            Op::Softmax(x, axis) => {
                let (outer, len, inner) = axis_split(self.shape(*x), *axis);
                if let Some(gx) = self.slot(lower, *x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let dot: T = (0..len)
                                .map(|l| g[base + l * inner] * out[base + l * inner])
                                .sum();
                            for l in 0..len {
                                let j = base + l * inner;
                                gx[j] += out[j] * (g[j] - dot);
                            }
                        }
                    }
                }
            }
            Op::Reshape(x) => self.unary(lower, *x, g, |i, _| g[i]),
            Op::Concat(xs, axis) => {
                let (outer, total, inner) = axis_split(node.value.shape(), *axis);
                let mut offset = 0;
                for &v in xs {
                    let len = self.shape(v)[*axis];
                    if let Some(gv) = self.slot(lower, v) {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..][..len * inner];
                            for (acc, &s) in gv[o * len * inner..][..len * inner].iter_mut().zip(src) {
                                *acc += s;
                            }
                        }
                    }
                    offset += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let (outer, full, inner) = axis_split(self.shape(*x), *axis);
                let len = node.value.shape()[*axis];
                if let Some(gx) = self.slot(lower, *x) {
                    for o in 0..outer {
                        let dst = &mut gx[(o * full + start) * inner..][..len * inner];
                        for (acc, &s) in dst.iter_mut().zip(&g[o * len * inner..][..len * inner]) {
                            *acc += s;
                        }
                    }
                }
            }
            Op::Gather(x, idx) => {
                let row: usize = self.shape(*x)[1..].iter().product();
                if let Some(gx) = self.slot(lower, *x) {
                    for (r, &i) in idx.iter().enumerate() {
                        for (acc, &s) in gx[i * row..][..row].iter_mut().zip(&g[r * row..][..row]) {
                            *acc += s;
                        }
                    }
                }
            }
            Op::Conv2d { x, w, b, geom } => self.conv_backward(lower, *x, *w, *b, geom, g),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let feats = inv_std.len();
                let rows = xhat.len() / feats;
                let gd = self.value(*gamma).data();
                let mut sum_g = vec![T::zero(); feats];
                let mut sum_gx = vec![T::zero(); feats];
                for r in 0..rows {
                    for f in 0..feats {
                        let i = r * feats + f;
                        sum_g[f] += g[i];
                        sum_gx[f] += g[i] * xhat[i];
                    }
                }
                if let Some(gg) = self.slot(lower, *gamma) {
                    for f in 0..feats {
                        gg[f] += sum_gx[f];
                    }
                }
                if let Some(gb) = self.slot(lower, *beta) {
                    for f in 0..feats {
                        gb[f] += sum_g[f];
                    }
                }
                if let Some(gx) = self.slot(lower, *x) {
                    let nb = T::lit(rows as f64);
                    for r in 0..rows {
                        for f in 0..feats {
                            let i = r * feats + f;
                            // dxhat = g·γ; sums scale by γ as well.
                            let dxhat = g[i] * gd[f];
                            gx[i] += inv_std[f] / nb
                                * (nb * dxhat - gd[f] * sum_g[f] - xhat[i] * gd[f] * sum_gx[f]);
                        }
                    }
                }
            }
            Op::Custom(inputs, op) => {
                let values: Vec<&Tensor<T>> = inputs.iter().map(|v| self.value(*v)).collect();
                let contributions = op.backward(&values, &node.value, g);
                for (&v, contrib) in inputs.iter().zip(contributions) {
                    if let Some(gv) = self.slot(lower, v) {
                        for (acc, c) in gv.iter_mut().zip(contrib) {
                            *acc += c;
                        }
                    }
                }
            }
        }
    }

    fn two_slots<'a>(
        &self,
        lower: &'a mut [Option<Vec<T>>],
        a: Var,
        b: Var,
    ) -> (Option<&'a mut Vec<T>>, Option<&'a mut Vec<T>>) {
        let (lo, hi) = if a.0 < b.0 { (a, b) } else { (b, a) };
        let need_lo = self.nodes[lo.0].needs_grad;
        let need_hi = self.nodes[hi.0].needs_grad;
        let (n_lo, n_hi) = (self.nodes[lo.0].value.len(), self.nodes[hi.0].value.len());
        let (left, right) = lower.split_at_mut(hi.0);
        let s_lo = need_lo.then(|| left[lo.0].get_or_insert_with(|| vec![T::zero(); n_lo]));
        let s_hi = need_hi.then(|| right[0].get_or_insert_with(|| vec![T::zero(); n_hi]));
        if a.0 < b.0 {
            (s_lo, s_hi)
        } else {
            (s_hi, s_lo)
        }
    }

    fn conv_backward(
        &self,
        lower: &mut [Option<Vec<T>>],
        x: Var,
        w: Var,
        b: Var,
        geom: &ConvGeometry,
        g: &[T],
    ) {
        let (k, ckk, hw) = (geom.k, geom.patch(), geom.out_hw());
        let spatial = geom.n * hw;
        // g: [N, K, HW] -> gt: [K, N·HW]
        let mut gt = vec![T::zero(); k * spatial];
        for ni in 0..geom.n {
            for ki in 0..k {
                gt[ki * spatial + ni * hw..][..hw].copy_from_slice(&g[(ni * k + ki) * hw..][..hw]);
            }
        }
        if let Some(gb) = self.slot(lower, b) {
            for ki in 0..k {
                gb[ki] += gt[ki * spatial..][..spatial].iter().copied().sum::<T>();
            }
        }
        let need_w = self.nodes[w.0].needs_grad;
        let need_x = self.nodes[x.0].needs_grad;
        if need_w {
            let cols = im2col(self.value(x).data(), geom);
            let gw = self.slot(lower, w).expect("needs grad");
            T::gemm(k, spatial, ckk, &gt, false, &cols, true, gw, true);
        }
        if need_x {
            let mut dcols = vec![T::zero(); ckk * spatial];
            T::gemm(
                ckk,
                k,
                spatial,
                self.value(w).data(),
                true,
                &gt,
                false,
                &mut dcols,
                false,
            );
            let gx = self.slot(lower, x).expect("needs grad");
            col2im(&dcols, geom, gx);
        }
    }
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s: Vec<usize> = shape
        .iter()
        .enumerate()
        .filter(|&(d, _)| d != axis)
        .map(|(_, &e)| e)
        .collect();
    if s.is_empty() {
        s.push(1);
    }
    s
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_values() {
        let mut g = Graph::<f64>::new();
        let eye = g.constant(t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]));
        let x = g.constant(t(&[3, 2], &[1., 2., 3., 4., 5., 6.]));
        let y = g.matmul(eye, x).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());

        let a = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let b = g.constant(t(&[2, 1], &[1., 1.]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[3., 7.]);
        assert!(g.matmul(a, x).is_err());
    }

    #[test]
    fn conv_zero_and_identity_kernel() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let w = g.constant(t(&[3, 2, 3, 3], &[0.5; 54]));
        let b = g.constant(Tensor::zeros(&[3]));
        let y = g.conv2d(x, w, b, 1, 1).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));

        let vals: Vec<f64> = (0..18).map(|i| i as f64 * 0.5 - 3.0).collect();
        let x = g.constant(t(&[1, 2, 3, 3], &vals));
        let w = g.constant(t(&[1, 2, 1, 1], &[1., 1.]));
        let b = g.constant(Tensor::zeros(&[1]));
        let y = g.conv2d(x, w, b, 1, 0).unwrap();
        let want: Vec<f64> = (0..9).map(|i| vals[i] + vals[9 + i]).collect();
        assert_eq!(g.value(y).data(), &want[..]);
        assert_eq!(g.shape(y), &[1, 1, 3, 3]);
    }

    #[test]
    fn conv_matches_sliding_window() {
        let x = [1.0, -2.0, 0.5, 3.0, 4.0, -1.0, 2.5, 0.0, 1.5];
        let k = [0.3, -0.7, 1.1, 0.2];
        let mut g = Graph::<f64>::new();
        let xv = g.constant(t(&[1, 1, 3, 3], &x));
        let kv = g.constant(t(&[1, 1, 2, 2], &k));
        let b = g.constant(t(&[1], &[0.25]));
        let y = g.conv2d(xv, kv, b, 1, 0).unwrap();
        for oy in 0..2 {
            for ox in 0..2 {
                let mut s = 0.25;
                for ky in 0..2 {
                    for kx in 0..2 {
                        s += x[(oy + ky) * 3 + ox + kx] * k[ky * 2 + kx];
                    }
                }
                assert!((g.value(y).data()[oy * 2 + ox] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_rejects_oversized_kernel() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 1, 2, 2]));
        let w = g.constant(Tensor::zeros(&[1, 1, 5, 5]));
        let b = g.constant(Tensor::zeros(&[1]));
        assert!(matches!(g.conv2d(x, w, b, 1, 1), Err(Error::Dimension(_))));
        assert!(g.conv2d(x, w, b, 1, 2).is_ok());
    }

    #[test]
    fn leaky_relu_values() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[3], &[2.0, -1.0, 0.0]));
        let y = g.leaky_relu(x, 1e-2);
        assert_eq!(g.value(y).data(), &[2.0, -0.01, 0.0]);
    }

    #[test]
    fn squash_closed_forms() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[3, 2], &[0.0, 0.0, 0.6, 0.8, 600.0, 800.0]));
        let y = g.squash(x, 1).unwrap();
        let v = g.value(y).data().to_vec();
        assert_eq!(&v[..2], &[0.0, 0.0]);
        assert!((v[2] - 0.3).abs() < 1e-15 && (v[3] - 0.4).abs() < 1e-15);
        let big = (v[4].powi(2) + v[5].powi(2)).sqrt();
        assert!(big > 0.999 && big < 1.0);
    }

    #[test]
    fn squash_gradient_at_origin_is_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(Tensor::zeros(&[1, 3]));
        let y = g.squash(x, 1).unwrap();
        let l = g.sum(y);
        let grads = g.backward(l).unwrap();
        assert!(grads.get(x).unwrap().iter().all(|v| v.is_finite() && *v == 0.0));
    }

    #[test]
    fn batch_norm_fixed_point_and_collapse() {
        let data = [-1.0, 2.0, 1.0, -2.0, -1.0, 0.5, 1.0, -0.5];
        // Columns: [-1, 1, -1, 1] and [2, -2, 0.5, -0.5]/sqrt(2.125)
        let s = 2.125f64.sqrt();
        let fixed: Vec<f64> = data
            .iter()
            .enumerate()
            .map(|(i, v)| if i % 2 == 1 { v / s } else { *v })
            .collect();
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[4, 2], &fixed));
        let one = g.constant(t(&[2], &[1.0, 1.0]));
        let zero = g.constant(t(&[2], &[0.0, 0.0]));
        let (y, _, _) = g.batch_norm_train(x, one, zero, 1e-7).unwrap();
        for (a, b) in g.value(y).data().iter().zip(&fixed) {
            assert!((a - b).abs() < 1e-6);
        }
        let gz = g.constant(t(&[2], &[0.0, 0.0]));
        let beta = g.constant(t(&[2], &[0.5, -1.5]));
        let (y, _, _) = g.batch_norm_train(x, gz, beta, 1e-7).unwrap();
        for (i, v) in g.value(y).data().iter().enumerate() {
            assert_eq!(*v, if i % 2 == 0 { 0.5 } else { -1.5 });
        }
        let single = g.constant(t(&[1, 2], &[1.0, 2.0]));
        assert!(matches!(
            g.batch_norm_train(single, one, zero, 1e-7),
            Err(Error::DegenerateBatch(1))
        ));
    }

    #[test]
    fn batch_norm_output_statistics() {
        let vals: Vec<f64> = (0..30).map(|i| ((i * 37 % 11) as f64).sin() * 3.0 + i as f64 * 0.1).collect();
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[10, 3], &vals));
        let one = g.constant(t(&[3], &[1.0; 3]));
        let zero = g.constant(t(&[3], &[0.0; 3]));
        let (y, _, _) = g.batch_norm_train(x, one, zero, 1e-7).unwrap();
        let out = g.value(y).data();
        for f in 0..3 {
            let col: Vec<f64> = (0..10).map(|r| out[r * 3 + f]).collect();
            let mean = col.iter().sum::<f64>() / 10.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 10.0;
            assert!(mean.abs() < 1e-5, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-5, "var {var}");
        }
    }

    #[test]
    fn layout_ops() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let c = g.concat(&[a], 1).unwrap();
        assert_eq!(g.value(c), g.value(a));
        let r = g.reshape(a, &[3, 2]).unwrap();
        let back = g.reshape(r, &[2, 3]).unwrap();
        assert_eq!(g.value(back), g.value(a));
        let b = g.constant(t(&[2, 1], &[7., 8.]));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c).data(), &[1., 2., 3., 7., 4., 5., 6., 8.]);
        let n = g.narrow(c, 1, 2, 2).unwrap();
        assert_eq!(g.value(n).data(), &[3., 7., 6., 8.]);
        assert!(g.concat(&[a, r], 1).is_err());
        assert!(g.narrow(a, 1, 2, 2).is_err());
    }

    #[test]
    fn concat_routes_ones() {
        let mut g = Graph::<f64>::new();
        let a = g.variable(t(&[2, 2], &[1., 2., 3., 4.]));
        let b = g.variable(t(&[1, 2], &[5., 6.]));
        let c = g.concat(&[a, b], 0).unwrap();
        let l = g.sum(c);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(a).unwrap(), &[1.0; 4]);
        assert_eq!(grads.get(b).unwrap(), &[1.0; 2]);
    }

    #[test]
    fn backward_basics() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(t(&[1], &[3.0]));
        let grads = g.backward(x).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0]);

        let mut g = Graph::<f64>::new();
        let x = g.variable(t(&[2], &[1.0, 2.0]));
        let sq = g.square(x);
        let l = g.sum(sq);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[2.0, 4.0]);
        assert!(matches!(g.backward(sq), Err(Error::Contract(_))));
    }

    #[test]
    fn unused_param_gets_zero_gradient() {
        let mut store = ParamStore::<f64>::new();
        let used = store.add("used", t(&[2], &[1.0, 2.0]));
        let _unused = store.add("unused", t(&[3], &[1.0, 2.0, 3.0]));
        let mut g = Graph::<f64>::new();
        let u = g.param(&store, used);
        let l = g.sum(u);
        let grads = g.backward(l).unwrap();
        let pg = g.param_grads(&grads, &store);
        assert_eq!(pg[0], vec![1.0, 1.0]);
        assert_eq!(pg[1], vec![0.0; 3]);
    }

    #[test]
    fn min_axis_prefers_lowest_index() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(t(&[2, 3], &[2.0, 1.0, 1.0, 0.5, 3.0, 0.5]));
        let m = g.min_axis(x, 1).unwrap();
        assert_eq!(g.value(m).data(), &[1.0, 0.5]);
        let l = g.sum(m);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
    }
}
