//! Reverse-mode tape.
//!
//! A [`Graph`] records every operation in creation order, which is already a
//! topological order. [`Graph::backward`] walks the tape once in reverse and
//! may only be called once per graph.

use super::conv::{self, ConvGeom};
use super::tensor::{matmul, Real, Tensor};
use crate::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Extension point for fused operations defined outside the engine
/// (likelihood terms live in the entropy module).
pub trait CustomOp<T: Real>: Send + Sync {
    fn name(&self) -> &'static str;

    /// Gradients for each input given the upstream gradient. `None` for an
    /// input means "no contribution".
    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, grad_out: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>>;
}

enum Op<T: Real> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    BiasAdd(Var, Var),
    Conv2d { x: Var, w: Var, geom: ConvGeom, out_ch: usize },
    ConvTranspose2d { x: Var, w: Var, geom: ConvGeom, in_ch: usize },
    Gdn { x: Var, beta: Var, gamma: Var, inverse: bool, norm: Vec<T> },
    RoundSte(Var),
    Relu(Var),
    Abs(Var),
    Softplus(Var),
    LowerBound(Var, T),
    SliceChannels { x: Var, start: usize },
    Sum(Var),
    Mean(Var),
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp<T>> },
}

impl<T: Real> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::BiasAdd(..) => "bias_add",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
            Op::Gdn { inverse: false, .. } => "gdn",
            Op::Gdn { inverse: true, .. } => "igdn",
            Op::RoundSte(..) => "round_ste",
            Op::Relu(..) => "relu",
            Op::Abs(..) => "abs",
            Op::Softplus(..) => "softplus",
            Op::LowerBound(..) => "lower_bound",
            Op::SliceChannels { .. } => "slice_channels",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Custom { op, .. } => op.name(),
        }
    }
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Single-owner operation tape.
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar root with respect to every `requires_grad` leaf.
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for a leaf; `None` if the var is not a gradient-tracking leaf.
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), consumed: false }
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name().to_string() });
        }
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf that does not receive gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Leaf whose gradient is reported by [`Graph::backward`].
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!("{op}: {:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.any_grad(&[a, b]);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let rg = self.any_grad(&[a, b]);
        self.push(out, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.any_grad(&[a, b]);
        self.push(out, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let f = T::from_f64_lossy(factor);
        let out = self.value(a).map(|x| x * f);
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Scale(a, f), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = T::from_f64_lossy(c);
        let out = self.value(a).map(|x| x + c);
        let rg = self.any_grad(&[a]);
        self.push(out, Op::AddScalar(a), rg)
    }

    /// Adds a per-channel bias of shape `[C]` to an NCHW tensor.
    pub fn bias_add(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if self.shape(bias) != [c] {
            return Err(Error::shape(format!("bias {:?} for {c} channels", self.shape(bias))));
        }
        let b = self.value(bias).data();
        let plane = h * w;
        let mut out = self.value(x).data().to_vec();
        for ni in 0..n {
            for ci in 0..c {
                let off = (ni * c + ci) * plane;
                out[off..off + plane].iter_mut().for_each(|v| *v += b[ci]);
            }
        }
        let out = Tensor::new(vec![n, c, h, w], out)?;
        let rg = self.any_grad(&[x, bias]);
        self.push(out, Op::BiasAdd(x, bias), rg)
    }

    /// Cross-correlation of an NCHW input with an `O x C x kh x kw` kernel.
    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let (o, kc, kh, kw) = self.value(kernel).dims4()?;
        if kc != c {
            return Err(Error::shape(format!("conv2d kernel expects {kc} channels, input has {c}")));
        }
        let geom = ConvGeom::new(c, h, w, kh, kw, stride, padding)?;
        let data = conv::conv2d_forward(self.value(x).data(), n, self.value(kernel).data(), o, &geom);
        let out = Tensor::new(vec![n, o, geom.out_h, geom.out_w], data)?;
        let rg = self.any_grad(&[x, kernel]);
        self.push(out, Op::Conv2d { x, w: kernel, geom, out_ch: o }, rg)
    }

    /// Adjoint of [`Graph::conv2d`]; the kernel is laid out
    /// `in_ch x out_ch x kh x kw`.
    pub fn conv_transpose2d(&mut self, x: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let (kc, o, kh, kw) = self.value(kernel).dims4()?;
        if kc != c {
            return Err(Error::shape(format!("conv_transpose2d kernel expects {kc} channels, input has {c}")));
        }
        let geom = ConvGeom::for_transpose(o, h, w, kh, kw, stride, padding)?;
        let data = conv::conv_transpose_forward(self.value(x).data(), n, c, self.value(kernel).data(), &geom);
        let out = Tensor::new(vec![n, o, geom.height, geom.width], data)?;
        let rg = self.any_grad(&[x, kernel]);
        self.push(out, Op::ConvTranspose2d { x, w: kernel, geom, in_ch: c }, rg)
    }

    /// Generalized divisive normalization with effective (already
    /// reparameterized) `beta [C]` and `gamma [C x C]`:
    /// `y_i = x_i * (beta_i + sum_j gamma_ij x_j^2)^(-1/2)`, or `^(+1/2)` when
    /// `inverse` is set.
    pub fn gdn(&mut self, x: Var, beta: Var, gamma: Var, inverse: bool) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if self.shape(beta) != [c] || self.shape(gamma) != [c, c] {
            return Err(Error::shape(format!(
                "gdn over {c} channels got beta {:?}, gamma {:?}",
                self.shape(beta),
                self.shape(gamma)
            )));
        }
        let b = self.value(beta).data();
        if let Some(bad) = b.iter().find(|v| !(**v > T::zero())) {
            return Err(Error::invalid(format!("gdn effective beta must be positive, got {bad}")));
        }
        let xd = self.value(x).data();
        let g = self.value(gamma).data();
        let plane = h * w;
        let mut norm = vec![T::zero(); n * c * plane];
        let mut sq = vec![T::zero(); c * plane];
        for ni in 0..n {
            let xs = &xd[ni * c * plane..(ni + 1) * c * plane];
            sq.iter_mut().zip(xs).for_each(|(s, &v)| *s = v * v);
            let ns = &mut norm[ni * c * plane..(ni + 1) * c * plane];
            matmul(g, false, &sq, false, ns, c, c, plane, false);
            for ci in 0..c {
                ns[ci * plane..(ci + 1) * plane].iter_mut().for_each(|v| *v += b[ci]);
            }
        }
        let data: Vec<T> = xd
            .iter()
            .zip(&norm)
            .map(|(&xv, &nv)| if inverse { xv * nv.sqrt() } else { xv / nv.sqrt() })
            .collect();
        let out = Tensor::new(vec![n, c, h, w], data)?;
        let rg = self.any_grad(&[x, beta, gamma]);
        self.push(out, Op::Gdn { x, beta, gamma, inverse, norm }, rg)
    }

    /// Round to nearest; the backward pass treats rounding as identity.
    pub fn round_ste(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.round());
        let rg = self.any_grad(&[x]);
        self.push(out, Op::RoundSte(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(T::zero()));
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.abs());
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Abs(x), rg)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(softplus);
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Softplus(x), rg)
    }

    /// `max(x, bound)`. The gradient passes where `x >= bound` or where it
    /// would push `x` upward.
    pub fn lower_bound(&mut self, x: Var, bound: f64) -> Result<Var> {
        let b = T::from_f64_lossy(bound);
        let out = self.value(x).map(|v| v.max(b));
        let rg = self.any_grad(&[x]);
        self.push(out, Op::LowerBound(x, b), rg)
    }

    /// Channels `start..start + len` of an NCHW tensor.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if start + len > c {
            return Err(Error::shape(format!("channel slice {start}..{} of {c}", start + len)));
        }
        let plane = h * w;
        let xd = self.value(x).data();
        let mut data = Vec::with_capacity(n * len * plane);
        for ni in 0..n {
            data.extend_from_slice(&xd[(ni * c + start) * plane..(ni * c + start + len) * plane]);
        }
        let out = Tensor::new(vec![n, len, h, w], data)?;
        let rg = self.any_grad(&[x]);
        self.push(out, Op::SliceChannels { x, start }, rg)
    }

    /// Sum of all entries (accumulated in f64).
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum_f64();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(T::from_f64_lossy(s)), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let m = self.value(x).mean_f64();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(T::from_f64_lossy(m)), Op::Mean(x), rg)
    }

    /// `scale * mean((a - b)^2)`.
    pub fn mse(&mut self, a: Var, b: Var, scale: f64) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        let m = self.mean(sq)?;
        self.scale(m, scale)
    }

    /// Records a fused operation whose forward value was computed by the
    /// caller.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor<T>, op: Box<dyn CustomOp<T>>) -> Result<Var> {
        let rg = self.any_grad(inputs);
        self.push(output, Op::Custom { inputs: inputs.to_vec(), op }, rg)
    }

    /// Reverse sweep from a scalar root. A graph can be differentiated once.
    pub fn backward(&mut self, root: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        if self.value(root).numel() != 1 {
            return Err(Error::NonScalarRoot(self.shape(root).to_vec()));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut leaf_grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(vec![T::one()]);
        }

        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf => {
                    if node.requires_grad {
                        leaf_grads[id] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                    }
                }
                op => self.backward_op(op, &node.value, g, &mut grads)?,
            }
        }

        for (id, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && leaf_grads[id].is_none() {
                leaf_grads[id] = Some(Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        Ok(Gradients { grads: leaf_grads })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_op(&self, op: &Op<T>, out: &Tensor<T>, g: Vec<T>, grads: &mut [Option<Vec<T>>]) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.needs(*b) {
                    accumulate(grads, *b, g.clone());
                }
                if self.needs(*a) {
                    accumulate(grads, *a, g);
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*b) {
                    accumulate(grads, *b, g.iter().map(|&v| -v).collect());
                }
                if self.needs(*a) {
                    accumulate(grads, *a, g);
                }
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.needs(*a) {
                    accumulate(grads, *a, g.iter().zip(bv).map(|(&gi, &bi)| gi * bi).collect());
                }
                if self.needs(*b) {
                    accumulate(grads, *b, g.iter().zip(av).map(|(&gi, &ai)| gi * ai).collect());
                }
            }
            Op::Scale(a, f) => accumulate(grads, *a, g.iter().map(|&v| v * *f).collect()),
            Op::AddScalar(a) => accumulate(grads, *a, g),
            Op::BiasAdd(x, b) => {
                if self.needs(*b) {
                    let (n, c, h, w) = out.dims4()?;
                    let plane = h * w;
                    let mut db = vec![T::zero(); c];
                    for ni in 0..n {
                        for (ci, d) in db.iter_mut().enumerate() {
                            let off = (ni * c + ci) * plane;
                            let s: f64 = g[off..off + plane].iter().map(|v| v.as_f64()).sum();
                            *d += T::from_f64_lossy(s);
                        }
                    }
                    accumulate(grads, *b, db);
                }
                if self.needs(*x) {
                    accumulate(grads, *x, g);
                }
            }
            Op::Conv2d { x, w, geom, out_ch } => {
                let xv = self.value(*x);
                let batch = xv.shape()[0];
                let (dx, dw) = conv::conv2d_backward(
                    xv.data(),
                    batch,
                    self.value(*w).data(),
                    *out_ch,
                    geom,
                    &g,
                    self.needs(*x),
                    self.needs(*w),
                );
                if let Some(dx) = dx {
                    accumulate(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    accumulate(grads, *w, dw);
                }
            }
            Op::ConvTranspose2d { x, w, geom, in_ch } => {
                let xv = self.value(*x);
                let batch = xv.shape()[0];
                let (dx, dw) = conv::conv_transpose_backward(
                    xv.data(),
                    batch,
                    *in_ch,
                    self.value(*w).data(),
                    geom,
                    &g,
                    self.needs(*x),
                    self.needs(*w),
                );
                if let Some(dx) = dx {
                    accumulate(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    accumulate(grads, *w, dw);
                }
            }
            Op::Gdn { x, beta, gamma, inverse, norm } => {
                self.backward_gdn(*x, *beta, *gamma, *inverse, norm, &g, grads)?;
            }
            Op::RoundSte(x) => accumulate(grads, *x, g),
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                accumulate(grads, *x, g.iter().zip(xv).map(|(&gi, &v)| if v > T::zero() { gi } else { T::zero() }).collect());
            }
            Op::Abs(x) => {
                let xv = self.value(*x).data();
                accumulate(
                    grads,
                    *x,
                    g.iter()
                        .zip(xv)
                        .map(|(&gi, &v)| {
                            if v > T::zero() {
                                gi
                            } else if v < T::zero() {
                                -gi
                            } else {
                                T::zero()
                            }
                        })
                        .collect(),
                );
            }
            Op::Softplus(x) => {
                let xv = self.value(*x).data();
                accumulate(grads, *x, g.iter().zip(xv).map(|(&gi, &v)| gi * sigmoid(v)).collect());
            }
            Op::LowerBound(x, b) => {
                let xv = self.value(*x).data();
                accumulate(
                    grads,
                    *x,
                    g.iter().zip(xv).map(|(&gi, &v)| if v >= *b || gi < T::zero() { gi } else { T::zero() }).collect(),
                );
            }
            Op::SliceChannels { x, start } => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let len = out.shape()[1];
                let plane = h * w;
                let mut dx = vec![T::zero(); n * c * plane];
                for ni in 0..n {
                    dx[(ni * c + start) * plane..(ni * c + start + len) * plane]
                        .copy_from_slice(&g[ni * len * plane..(ni + 1) * len * plane]);
                }
                accumulate(grads, *x, dx);
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                let v = g[0] / T::from_f64_lossy(n.max(1) as f64);
                accumulate(grads, *x, vec![v; n]);
            }
            Op::Custom { inputs, op } => {
                let vals: Vec<&Tensor<T>> = inputs.iter().map(|v| self.value(*v)).collect();
                let needs: Vec<bool> = inputs.iter().map(|v| self.needs(*v)).collect();
                let contribs = op.backward(&vals, out, &g, &needs);
                for ((v, c), need) in inputs.iter().zip(contribs).zip(needs) {
                    if let (Some(c), true) = (c, need) {
                        if c.len() != self.value(*v).numel() {
                            return Err(Error::shape(format!("{} returned a gradient of wrong length", op.name())));
                        }
                        accumulate(grads, *v, c);
                    }
                }
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_gdn(
        &self,
        x: Var,
        beta: Var,
        gamma: Var,
        inverse: bool,
        norm: &[T],
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) -> Result<()> {
        let xt = self.value(x);
        let (n, c, h, w) = xt.dims4()?;
        let plane = h * w;
        let xd = xt.data();
        let gam = self.value(gamma).data();
        let half = T::from_f64_lossy(0.5);
        // y = x * norm^p with p = -1/2 (forward) or +1/2 (inverse);
        // u = dL/dnorm = g * x * p * norm^(p-1).
        let mut u = vec![T::zero(); n * c * plane];
        let mut dx = vec![T::zero(); n * c * plane];
        for i in 0..u.len() {
            let s = norm[i].sqrt();
            if inverse {
                u[i] = g[i] * xd[i] * half / s;
                dx[i] = g[i] * s;
            } else {
                u[i] = -g[i] * xd[i] * half / (norm[i] * s);
                dx[i] = g[i] / s;
            }
        }
        let mut dgamma = self.needs(gamma).then(|| vec![T::zero(); c * c]);
        let mut dbeta = self.needs(beta).then(|| vec![T::zero(); c]);
        let mut sq = vec![T::zero(); c * plane];
        let mut gu = vec![T::zero(); c * plane];
        for ni in 0..n {
            let us = &u[ni * c * plane..(ni + 1) * c * plane];
            let xs = &xd[ni * c * plane..(ni + 1) * c * plane];
            if let Some(db) = dbeta.as_mut() {
                for ci in 0..c {
                    let s: f64 = us[ci * plane..(ci + 1) * plane].iter().map(|v| v.as_f64()).sum();
                    db[ci] += T::from_f64_lossy(s);
                }
            }
            if let Some(dg) = dgamma.as_mut() {
                sq.iter_mut().zip(xs).for_each(|(s, &v)| *s = v * v);
                matmul(us, false, &sq, true, dg, c, plane, c, true);
            }
            if self.needs(x) {
                // dx_k += 2 x_k (gamma^T u)_k
                matmul(gam, true, us, false, &mut gu, c, c, plane, false);
                let two = T::from_f64_lossy(2.0);
                let dxs = &mut dx[ni * c * plane..(ni + 1) * c * plane];
                for k in 0..c * plane {
                    dxs[k] += two * xs[k] * gu[k];
                }
            }
        }
        if self.needs(x) {
            accumulate(grads, x, dx);
        }
        if let Some(db) = dbeta {
            accumulate(grads, beta, db);
        }
        if let Some(dg) = dgamma {
            accumulate(grads, gamma, dg);
        }
        Ok(())
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, contrib: Vec<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.iter_mut().zip(contrib).for_each(|(e, c)| *e += c),
        slot @ None => *slot = Some(contrib),
    }
}

fn softplus<T: Real>(v: T) -> T {
    // log(1 + e^v) without overflow
    let zero = T::zero();
    v.max(zero) + (-(v.abs())).exp().ln_1p()
}

fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}
