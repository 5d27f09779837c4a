//! Tape of executed primitives and the reverse sweep over it.
//!
//! Nodes are appended in execution order, so every input index is smaller
//! than the index of the node that consumes it. [`Graph::backward`] walks the
//! tape once from the root down to index 0.

use std::collections::HashMap;

use crate::autodiff::params::{ParamId, ParamStore};
use crate::error::{shape_err, Error, Result};
use crate::fourier;
use crate::kernels::{conv, filter, resample};
use crate::tensor::{Element, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Concat(Vec<Var>),
    Resample(Var),
    GlobalAvgPool(Var),
    Dft2(Var),
    Idft2(Var),
    Amplitude(Var),
    Phase(Var),
    Recompose(Var, Var),
    DynamicFilter { u: Var, kernels: Var, k: usize },
    Sum(Var),
    MeanAbs(Var),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d { x, w, b, .. } => vec![*x, *w, *b],
            Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Scale(a, _)
            | Op::Resample(a)
            | Op::GlobalAvgPool(a)
            | Op::Dft2(a)
            | Op::Idft2(a)
            | Op::Amplitude(a)
            | Op::Phase(a)
            | Op::Sum(a)
            | Op::MeanAbs(a) => vec![*a],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Recompose(a, b) => vec![*a, *b],
            Op::Concat(vs) => vs.clone(),
            Op::DynamicFilter { u, kernels, .. } => vec![*u, *kernels],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// How a smaller operand lines up against an `[N, C, H, W]` operand.
#[derive(Clone, Copy, Debug)]
enum Broadcast {
    Same,
    /// `[C]`, `[1, C, 1, 1]`, or `[N, C, 1, 1]` (when `per_batch`).
    Channel { per_batch: bool },
}

fn broadcast_kind(big: &[usize], small: &[usize]) -> Result<Broadcast> {
    if big == small {
        return Ok(Broadcast::Same);
    }
    if let [n, c, _, _] = *big {
        match *small {
            [sc] if sc == c => return Ok(Broadcast::Channel { per_batch: false }),
            [1, sc, 1, 1] if sc == c => return Ok(Broadcast::Channel { per_batch: false }),
            [sn, sc, 1, 1] if sn == n && sc == c => return Ok(Broadcast::Channel { per_batch: true }),
            _ => {}
        }
    }
    shape_err(format!("cannot broadcast {small:?} against {big:?}"))
}

/// Index of the small operand for flat index `i` of the big one.
fn small_index(kind: Broadcast, big: &[usize], i: usize) -> usize {
    match kind {
        Broadcast::Same => i,
        Broadcast::Channel { per_batch } => {
            let (c, hw) = (big[1], big[2] * big[3]);
            let plane = i / hw;
            if per_batch {
                plane
            } else {
                plane % c
            }
        }
    }
}

fn to_f64<T: Element>(v: T) -> f64 {
    v.to_f64().unwrap_or(f64::NAN)
}

/// Reverse-mode tape. Parameters are read from an optional borrowed
/// [`ParamStore`]; each parameter becomes exactly one leaf per graph.
pub struct Graph<'p, T: Element = f32> {
    nodes: Vec<Node<T>>,
    params: Option<&'p ParamStore<T>>,
    bound: HashMap<ParamId, Var>,
}

impl<T: Element> Default for Graph<'_, T> {
    fn default() -> Self {
        Self { nodes: Vec::new(), params: None, bound: HashMap::new() }
    }
}

impl<'p, T: Element> Graph<'p, T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_params(store: &'p ParamStore<T>) -> Self {
        Self { nodes: Vec::new(), params: Some(store), bound: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad, param: None });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool, param: Option<ParamId>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad, param });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, true, None)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, false, None)
    }

    /// Leaf for a registered parameter (created on first use).
    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.bound.get(&id) {
            return Ok(v);
        }
        let store = self
            .params
            .ok_or_else(|| Error::InvalidArgument("graph has no parameter store".into()))?;
        let value = store.value(id).clone();
        let v = self.leaf(value, true, Some(id));
        self.bound.insert(id, v);
        Ok(v)
    }

    /// Makes later `param(id)` calls resolve to `v` instead of the stored value.
    pub fn bind_param(&mut self, id: ParamId, v: Var) {
        self.bound.insert(id, v);
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let y = conv::conv2d_forward(self.value(x), self.value(w), self.value(b), stride, pad)?;
        Ok(self.push(y, Op::Conv2d { x, w, b, stride, pad }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(y, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| T::lit(1.0 / (1.0 + (-to_f64(v)).exp())));
        self.push(y, Op::Sigmoid(x))
    }

    fn binary_broadcast(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<(Var, Var, Tensor<T>)> {
        // The larger operand goes first; both ops using this are commutative.
        let (a, b) = if self.value(a).numel() >= self.value(b).numel() { (a, b) } else { (b, a) };
        let (ta, tb) = (self.value(a), self.value(b));
        let kind = broadcast_kind(ta.shape(), tb.shape())?;
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &va)| f(va, tb.data()[small_index(kind, ta.shape(), i)]))
            .collect();
        Ok((a, b, Tensor::new(ta.shape(), data)?))
    }

    /// Elementwise sum; `b` may be a per-channel vector broadcast over `N, H, W`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b, y) = self.binary_broadcast(a, b, |x, y| x + y)?;
        Ok(self.push(y, Op::Add(a, b)))
    }

    /// Elementwise product with the same broadcasting rule as [`Graph::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b, y) = self.binary_broadcast(a, b, |x, y| x * y)?;
        Ok(self.push(y, Op::Mul(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(y, Op::Sub(a, b)))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let f = T::lit(factor);
        let y = self.value(x).map(|v| v * f);
        self.push(y, Op::Scale(x, factor))
    }

    /// Stacks rank-4 operands along the channel axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::InvalidArgument("concat of nothing".into()))?;
        let (n, _, h, w) = self.value(first).dims4()?;
        let mut channels = 0;
        for &p in parts {
            let (pn, pc, ph, pw) = self.value(p).dims4()?;
            if (pn, ph, pw) != (n, h, w) {
                return shape_err(format!(
                    "concat: {:?} does not match {:?} outside the channel axis",
                    self.shape(p),
                    self.shape(first)
                ));
            }
            channels += pc;
        }
        let hw = h * w;
        let mut data = Vec::with_capacity(n * channels * hw);
        for ni in 0..n {
            for &p in parts {
                let t = self.value(p);
                let per = t.shape()[1] * hw;
                data.extend_from_slice(&t.data()[ni * per..(ni + 1) * per]);
            }
        }
        let y = Tensor::new(&[n, channels, h, w], data)?;
        Ok(self.push(y, Op::Concat(parts.to_vec())))
    }

    /// Bilinear resampling of the spatial axes.
    pub fn resample(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if oh == 0 || ow == 0 {
            return Err(Error::InvalidArgument(format!("resample target {oh}x{ow} must be >= 1")));
        }
        let y = resample::forward(self.value(x).data(), n * c, h, w, oh, ow);
        let y = Tensor::new(&[n, c, oh, ow], y)?;
        Ok(self.push(y, Op::Resample(x)))
    }

    /// Per-channel spatial mean, `[N, C, H, W] -> [N, C, 1, 1]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let hw = h * w;
        let data = self
            .value(x)
            .data()
            .chunks_exact(hw)
            .map(|pl| T::lit(pl.iter().map(|&v| to_f64(v)).sum::<f64>() / hw as f64))
            .collect();
        let y = Tensor::new(&[n, c, 1, 1], data)?;
        Ok(self.push(y, Op::GlobalAvgPool(x)))
    }

    /// Real tensor to packed `[..., H, W, 2]` spectrum.
    pub fn dft2(&mut self, x: Var) -> Result<Var> {
        let y = fourier::dft2_packed(self.value(x))?;
        Ok(self.push(y, Op::Dft2(x)))
    }

    /// Packed spectrum to its real-valued inverse transform.
    pub fn idft2(&mut self, s: Var) -> Result<Var> {
        let (y, _) = fourier::idft2_packed(self.value(s))?;
        Ok(self.push(y, Op::Idft2(s)))
    }

    pub fn amplitude(&mut self, s: Var) -> Result<Var> {
        let y = fourier::amplitude_packed(self.value(s))?;
        Ok(self.push(y, Op::Amplitude(s)))
    }

    pub fn phase(&mut self, s: Var) -> Result<Var> {
        let y = fourier::phase_packed(self.value(s))?;
        Ok(self.push(y, Op::Phase(s)))
    }

    pub fn recompose(&mut self, a: Var, p: Var) -> Result<Var> {
        let y = fourier::recompose_packed(self.value(a), self.value(p))?;
        Ok(self.push(y, Op::Recompose(a, p)))
    }

    /// Per-pixel `k x k` filtering of `u` by `kernels` (`[N, k*k*C, H, W]`).
    pub fn dynamic_filter(&mut self, u: Var, kernels: Var, k: usize) -> Result<Var> {
        let g = filter::FilterGeom::new(self.shape(u), self.shape(kernels), k)?;
        let y = filter::forward(self.value(u).data(), self.value(kernels).data(), &g);
        let y = Tensor::new(self.shape(u), y)?;
        Ok(self.push(y, Op::DynamicFilter { u, kernels, k }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(T::lit(s)), Op::Sum(x))
    }

    /// `mean(|x|)` over every element.
    pub fn mean_abs(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().map(|&v| to_f64(v).abs()).sum::<f64>() / t.numel().max(1) as f64;
        self.push(Tensor::scalar(T::lit(s)), Op::MeanAbs(x))
    }

    /// Reverse sweep from a single-element root.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.value(root).numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward root must be a scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![T::one()]);
        let mut leaves = Vec::new();
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaves.push((Var(idx), node.param, Tensor::new(node.value.shape(), g)?));
                continue;
            }
            self.backward_node(node, &g, &mut grads)?;
        }
        leaves.reverse();
        Ok(Gradients { leaves })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let mut acc = |v: Var, contrib: Vec<T>| match &mut grads[v.0] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contrib) {
                    *e = *e + c;
                }
            }
            slot @ None => *slot = Some(contrib),
        };
        match &node.op {
            Op::Leaf => {}
            &Op::Conv2d { x, w, b, stride, pad } => {
                let need = [self.needs(x), self.needs(w), self.needs(b)];
                let cg = conv::conv2d_backward(self.value(x), self.value(w), self.value(b), stride, pad, g, need)?;
                if let Some(d) = cg.dx {
                    acc(x, d);
                }
                if let Some(d) = cg.dw {
                    acc(w, d);
                }
                if let Some(d) = cg.db {
                    acc(b, d);
                }
            }
            &Op::Relu(x) => {
                let d = self
                    .value(x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() })
                    .collect();
                acc(x, d);
            }
            &Op::Sigmoid(x) => {
                let d = node.value.data().iter().zip(g).map(|(&y, &gv)| gv * y * (T::one() - y)).collect();
                acc(x, d);
            }
            &Op::Add(a, b) => {
                if self.needs(a) {
                    acc(a, g.to_vec());
                }
                if self.needs(b) {
                    acc(b, self.reduce_to_small(a, b, g, |gv, _| gv)?);
                }
            }
            &Op::Mul(a, b) => {
                let (ta, tb) = (self.value(a), self.value(b));
                let kind = broadcast_kind(ta.shape(), tb.shape())?;
                if self.needs(a) {
                    let d = g
                        .iter()
                        .enumerate()
                        .map(|(i, &gv)| gv * tb.data()[small_index(kind, ta.shape(), i)])
                        .collect();
                    acc(a, d);
                }
                if self.needs(b) {
                    acc(b, self.reduce_to_small(a, b, g, |gv, va| gv * va)?);
                }
            }
            &Op::Sub(a, b) => {
                if self.needs(a) {
                    acc(a, g.to_vec());
                }
                if self.needs(b) {
                    acc(b, g.iter().map(|&v| -v).collect());
                }
            }
            &Op::Scale(x, f) => {
                let f = T::lit(f);
                acc(x, g.iter().map(|&v| v * f).collect());
            }
            Op::Concat(parts) => {
                let (n, c, h, w) = node.value.dims4()?;
                let hw = h * w;
                let mut offset = 0;
                for &p in parts {
                    let pc = self.shape(p)[1];
                    if self.needs(p) {
                        let mut d = Vec::with_capacity(n * pc * hw);
                        for ni in 0..n {
                            let start = (ni * c + offset) * hw;
                            d.extend_from_slice(&g[start..start + pc * hw]);
                        }
                        acc(p, d);
                    }
                    offset += pc;
                }
            }
            &Op::Resample(x) => {
                let (n, c, h, w) = self.value(x).dims4()?;
                let (_, _, oh, ow) = node.value.dims4()?;
                acc(x, resample::backward(g, n * c, h, w, oh, ow));
            }
            &Op::GlobalAvgPool(x) => {
                let (_, _, h, w) = self.value(x).dims4()?;
                let hw = h * w;
                let inv = 1.0 / hw as f64;
                let d = g.iter().flat_map(|&gv| std::iter::repeat(T::lit(to_f64(gv) * inv)).take(hw)).collect();
                acc(x, d);
            }
            &Op::Dft2(x) => {
                // Adjoint of the unitary forward transform: real part of the inverse.
                let gs = Tensor::new(node.value.shape(), g.to_vec())?;
                acc(x, fourier::idft2_packed(&gs)?.0.into_vec());
            }
            &Op::Idft2(s) => {
                let gx = Tensor::new(node.value.shape(), g.to_vec())?;
                acc(s, fourier::dft2_packed(&gx)?.into_vec());
            }
            &Op::Amplitude(s) => acc(s, fourier::amplitude_backward(self.value(s), g)),
            &Op::Phase(s) => acc(s, fourier::phase_backward(self.value(s), g)),
            &Op::Recompose(a, p) => {
                let (da, dp) = fourier::recompose_backward(self.value(a), self.value(p), g);
                if self.needs(a) {
                    acc(a, da);
                }
                if self.needs(p) {
                    acc(p, dp);
                }
            }
            &Op::DynamicFilter { u, kernels, k } => {
                let geom = filter::FilterGeom::new(self.shape(u), self.shape(kernels), k)?;
                let (du, dk) = filter::backward(
                    self.value(u).data(),
                    self.value(kernels).data(),
                    g,
                    &geom,
                    [self.needs(u), self.needs(kernels)],
                );
                if let Some(d) = du {
                    acc(u, d);
                }
                if let Some(d) = dk {
                    acc(kernels, d);
                }
            }
            &Op::Sum(x) => acc(x, vec![g[0]; self.value(x).numel()]),
            &Op::MeanAbs(x) => {
                let t = self.value(x);
                let scale = to_f64(g[0]) / t.numel().max(1) as f64;
                let d = t
                    .data()
                    .iter()
                    .map(|&v| {
                        let s = if v > T::zero() {
                            1.0
                        } else if v < T::zero() {
                            -1.0
                        } else {
                            0.0
                        };
                        T::lit(s * scale)
                    })
                    .collect();
                acc(x, d);
            }
        }
        Ok(())
    }

    /// Sums `f(g_i, a_i)` into the positions of the broadcast operand `b`.
    fn reduce_to_small(&self, a: Var, b: Var, g: &[T], f: impl Fn(f64, f64) -> f64) -> Result<Vec<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        let kind = broadcast_kind(ta.shape(), tb.shape())?;
        let mut out = vec![0.0f64; tb.numel()];
        for (i, (&gv, &va)) in g.iter().zip(ta.data()).enumerate() {
            out[small_index(kind, ta.shape(), i)] += f(to_f64(gv), to_f64(va));
        }
        Ok(out.into_iter().map(T::lit).collect())
    }
}

/// Gradients of the root with respect to every differentiable leaf reached.
#[derive(Clone, Debug)]
pub struct Gradients<T: Element = f32> {
    leaves: Vec<(Var, Option<ParamId>, Tensor<T>)>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.iter().find(|(lv, _, _)| *lv == v).map(|(_, _, t)| t)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.leaves.iter().find(|(_, p, _)| *p == Some(id)).map(|(_, _, t)| t)
    }

    /// Adds parameter gradients into `store`; repeated calls accumulate.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) -> Result<()> {
        for (_, id, g) in &self.leaves {
            let Some(id) = *id else { continue };
            let slot = store.grad_mut(id);
            if slot.shape() != g.shape() {
                return shape_err(format!("gradient shape {:?} vs parameter {:?}", g.shape(), slot.shape()));
            }
            for (s, &v) in slot.data_mut().iter_mut().zip(g.data()) {
                *s = *s + v;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f32]) -> Tensor<f32> {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn conv_with_ones_counts_window_overlap() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let w = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let b = g.constant(Tensor::zeros(&[1]));
        let y = g.conv2d(x, w, b, 1, 1).unwrap();
        assert_eq!(g.value(y).data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn unit_pointwise_kernel_is_identity() {
        let mut g = Graph::<f32>::new();
        let data: Vec<f32> = (0..20).map(|v| v as f32 * 0.3 - 2.0).collect();
        let x = g.constant(t(&[1, 1, 4, 5], &data));
        let w = g.constant(t(&[1, 1, 1, 1], &[1.0]));
        let b = g.constant(Tensor::zeros(&[1]));
        let y = g.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(g.value(y).data(), &data[..]);
    }

    #[test]
    fn elementwise_definitions() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let r = g.relu(x);
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
        let z = g.constant(t(&[1], &[0.0]));
        let s = g.sigmoid(z);
        assert_eq!(g.value(s).data(), &[0.5]);

        let a = g.constant(Tensor::zeros(&[1, 20, 8, 8]));
        let b = g.constant(Tensor::zeros(&[1, 40, 8, 8]));
        let c = g.concat(&[a, b]).unwrap();
        assert_eq!(g.shape(c), &[1, 60, 8, 8]);
        let bad = g.constant(Tensor::zeros(&[1, 4, 4, 8]));
        assert!(g.concat(&[a, bad]).is_err());
        assert!(g.add(a, b).is_err());
    }

    #[test]
    fn channel_broadcast_add_and_mul() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::full(&[2, 2, 2, 2], 1.0));
        let v = g.input(t(&[2], &[10.0, 20.0]));
        let y = g.add(x, v).unwrap();
        assert_eq!(&g.value(y).data()[..8], &[11.0, 11.0, 11.0, 11.0, 21.0, 21.0, 21.0, 21.0]);
        let m = g.mul(v, x).unwrap();
        let s = g.sum(m);
        let grads = g.backward(s).unwrap();
        // Each channel entry touches N*H*W = 8 ones.
        assert_eq!(grads.get(v).unwrap().data(), &[8.0, 8.0]);
        assert_eq!(grads.get(x).unwrap().data()[..4], [10.0; 4]);
    }

    #[test]
    fn resample_preserves_constants() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::full(&[1, 1, 4, 4], 0.7));
        let y = g.resample(x, 2, 2).unwrap();
        assert!(g.value(y).data().iter().all(|v| (v - 0.7).abs() < 1e-7));
        let one = g.constant(Tensor::full(&[1, 1, 1, 1], 0.3));
        let up = g.resample(one, 2, 2).unwrap();
        assert!(g.value(up).data().iter().all(|v| (v - 0.3).abs() < 1e-7));
        let same = g.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let id = g.resample(same, 2, 2).unwrap();
        assert_eq!(g.value(id).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn global_pool_values_and_gradient() {
        let mut g = Graph::<f32>::new();
        let x = g.input(t(&[1, 1, 2, 2], &[1.0, 3.0, 5.0, 7.0]));
        let p = g.global_avg_pool(x).unwrap();
        assert_eq!(g.value(p).data(), &[4.0]);
        let s = g.sum(p);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.25; 4]);
    }

    #[test]
    fn linear_and_dead_relu_gradients() {
        let xs = [0.5f32, -1.5, 2.0];
        let mut store = ParamStore::<f32>::new();
        let wid = store.register("w", t(&[3], &[1.0, 2.0, 3.0])).unwrap();
        let mut g = Graph::with_params(&store);
        let w = g.param(wid).unwrap();
        let x = g.constant(t(&[3], &xs));
        let p = g.mul(w, x).unwrap();
        let s = g.sum(p);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.param(wid).unwrap().data(), &xs);

        let mut store = ParamStore::<f32>::new();
        let wid = store.register("w", t(&[3], &[-1.0, -0.5, -2.0])).unwrap();
        let mut g = Graph::with_params(&store);
        let w = g.param(wid).unwrap();
        let r = g.relu(w);
        let s = g.sum(r);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.param(wid).unwrap().data(), &[0.0; 3]);
    }

    #[test]
    fn backward_accumulates_and_rejects_non_scalar_roots() {
        let mut store = ParamStore::<f32>::new();
        let wid = store.register("w", t(&[2], &[1.0, 2.0])).unwrap();
        let grads = {
            let mut g = Graph::with_params(&store);
            let w = g.param(wid).unwrap();
            assert!(g.backward(w).is_err());
            let s = g.sum(w);
            g.backward(s).unwrap()
        };
        grads.accumulate_into(&mut store).unwrap();
        grads.accumulate_into(&mut store).unwrap();
        assert_eq!(store.grad(wid).data(), &[2.0, 2.0]);
        store.zero_grad();
        assert_eq!(store.grad(wid).data(), &[0.0, 0.0]);
    }

    #[test]
    fn each_param_is_one_leaf() {
        let mut store = ParamStore::<f32>::new();
        let wid = store.register("w", t(&[1], &[3.0])).unwrap();
        let mut g = Graph::with_params(&store);
        let a = g.param(wid).unwrap();
        let b = g.param(wid).unwrap();
        assert_eq!(a, b);
        let p = g.mul(a, b).unwrap();
        let grads = g.backward(p).unwrap();
        assert_eq!(grads.param(wid).unwrap().data(), &[6.0]);
    }
}
