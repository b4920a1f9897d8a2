//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node holding its output value. Nodes are pushed
//! in execution order, so the tape is already topologically sorted and
//! `backward` replays adjoints by walking it in reverse.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::kernels::{self, ConvGeom, ResizePlan};
use super::ops::{check_same_shape, concat_data, concat_shape, conv_geom, flatten_labels};
use super::{LabelMap, Real, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom },
    Relu(Var),
    Softmax(Var),
    Resize { x: Var, plan: ResizePlan },
    Affine { x: Var, sigma: Var, beta: Var },
    /// `scale * x + shift` with constant scalars.
    ScaleShift { x: Var, scale: f64 },
    Concat(Vec<Var>),
    CrossEntropy { p: Var, labels: Vec<u8>, ignore: Option<u8>, valid: usize },
    Mul(Var, Var),
    Sum(Var),
}

struct Node<R> {
    value: Tensor<R>,
    op: Op,
    requires_grad: bool,
}

/// Output of [`Graph::pixel_cross_entropy`]. `all_ignored` marks the
/// empty-mean case, where the loss is zero and carries no gradient.
#[derive(Clone, Copy, Debug)]
pub struct LossOutput {
    pub loss: Var,
    pub valid_pixels: usize,
    pub all_ignored: bool,
}

pub struct Graph<R: Real = f32> {
    nodes: Vec<Node<R>>,
    grads: Vec<Option<Vec<R>>>,
    consumed: bool,
}

impl<R: Real> Default for Graph<R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<R: Real> Graph<R> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grads: Vec::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<R>, op: Op, requires_grad: bool) -> Var {
        let mut value = value;
        value.clear_grad();
        value.set_requires_grad(requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf; it receives a gradient iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor<R>) -> Var {
        let rg = t.requires_grad();
        self.push(t, Op::Leaf, rg)
    }

    pub fn constant(&mut self, t: Tensor<R>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn param(&mut self, t: Tensor<R>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<R> {
        &self.nodes[v.0].value
    }

    /// Activation pattern of every ReLU on the tape (`true` where the input is
    /// positive), in tape order.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::Relu(x) = node.op {
                out.extend(self.nodes[x.0].value.data().iter().map(|&v| v > R::zero()));
            }
        }
        out
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to `v`, if one reached it.
    pub fn grad(&self, v: Var) -> Option<&[R]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Copy of the node value with its gradient slot populated.
    pub fn tensor_with_grad(&self, v: Var) -> Tensor<R> {
        let mut t = self.nodes[v.0].value.clone();
        if let Some(g) = self.grad(v) {
            t.set_grad(g.to_vec()).expect("gradient shape matches value");
        }
        t
    }

    fn rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let geom = conv_geom(self.value(x).shape(), self.value(w).shape(), self.value(b).shape(), stride, padding)?;
        let out = kernels::conv2d_forward(self.value(x).data(), self.value(w).data(), self.value(b).data(), &geom);
        let t = Tensor::new(vec![geom.n, geom.cout, geom.ho, geom.wo], out)?;
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(t, Op::Conv2d { x, w, b, geom }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = super::ops::relu(self.value(x));
        let rg = self.rg(&[x]);
        self.push(t, Op::Relu(x), rg)
    }

    pub fn channel_softmax(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        if c < 2 {
            return Err(shape_err("channel_softmax", format!("need at least 2 channels, got {}", c)));
        }
        let out = kernels::softmax_forward(self.value(x).data(), n, c, h * w);
        let t = Tensor::new(vec![n, c, h, w], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Softmax(x), rg))
    }

    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::InvalidArgument(format!("resize target {}x{} must be positive", out_h, out_w)));
        }
        let plan = ResizePlan::new(h, w, out_h, out_w);
        let t = Tensor::new(vec![n, c, out_h, out_w], plan.forward(self.value(x).data(), n * c))?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Resize { x, plan }, rg))
    }

    pub fn affine_modulate(&mut self, x: Var, sigma: Var, beta: Var) -> Result<Var> {
        check_same_shape("affine_modulate", self.value(x).shape(), self.value(sigma).shape())?;
        check_same_shape("affine_modulate", self.value(x).shape(), self.value(beta).shape())?;
        let t = super::ops::affine_modulate(self.value(x), self.value(sigma), self.value(beta))?;
        let rg = self.rg(&[x, sigma, beta]);
        Ok(self.push(t, Op::Affine { x, sigma, beta }, rg))
    }

    /// `scale * x + shift` for constant scalars.
    pub fn scale_shift(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let (a, c) = (R::from_f64(scale), R::from_f64(shift));
        let src = self.value(x);
        let t = Tensor::from_fn(src.shape(), |i| a * src.data()[i] + c);
        let rg = self.rg(&[x]);
        self.push(t, Op::ScaleShift { x, scale }, rg)
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let shapes: Vec<&[usize]> = xs.iter().map(|&v| self.value(v).shape()).collect();
        let [n, c, h, w] = concat_shape(&shapes)?;
        let parts: Vec<(&[R], usize)> = xs.iter().map(|&v| (self.value(v).data(), self.value(v).shape()[1])).collect();
        let t = Tensor::new(vec![n, c, h, w], concat_data(&parts, n, h * w))?;
        let rg = self.rg(xs);
        Ok(self.push(t, Op::Concat(xs.to_vec()), rg))
    }

    /// Mean per-pixel negative log-likelihood of `labels` under the
    /// probabilities `p` (`[N, C, H, W]`), skipping `ignore_label` pixels.
    pub fn pixel_cross_entropy(&mut self, p: Var, labels: &[LabelMap], ignore_label: Option<u8>) -> Result<LossOutput> {
        let dims = self.value(p).dims4()?;
        let flat = flatten_labels(dims, labels, ignore_label)?;
        let [n, c, h, w] = dims;
        let (loss, valid) = kernels::cross_entropy_forward(self.value(p).data(), &flat, n, c, h * w, ignore_label);
        let rg = self.rg(&[p]);
        let v = self.push(
            Tensor::scalar(R::from_f64(loss)),
            Op::CrossEntropy { p, labels: flat, ignore: ignore_label, valid },
            rg,
        );
        Ok(LossOutput { loss: v, valid_pixels: valid, all_ignored: valid == 0 })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same_shape("mul", self.value(a).shape(), self.value(b).shape())?;
        let (ta, tb) = (self.value(a), self.value(b));
        let t = Tensor::from_fn(ta.shape(), |i| ta.data()[i] * tb.data()[i]);
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: R = self.value(x).data().iter().copied().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Populates the gradient of every grad-requiring node that `loss`
    /// depends on. A graph supports one backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        let shape = self.value(loss).shape();
        if self.value(loss).numel() != 1 {
            return Err(Error::NotScalar(format!("{:?}", shape)));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<R>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            self.grads = grads;
            return Ok(());
        }
        grads[loss.0] = Some(vec![R::one()]);

        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::Conv2d { x, w, b, geom } => {
                    let (x, w, b) = (*x, *w, *b);
                    let mut dx = self.nodes[x.0].requires_grad.then(|| vec![R::zero(); self.nodes[x.0].value.numel()]);
                    let mut dw = self.nodes[w.0].requires_grad.then(|| vec![R::zero(); self.nodes[w.0].value.numel()]);
                    let mut db = self.nodes[b.0].requires_grad.then(|| vec![R::zero(); self.nodes[b.0].value.numel()]);
                    kernels::conv2d_backward(
                        self.nodes[x.0].value.data(),
                        self.nodes[w.0].value.data(),
                        &dy,
                        geom,
                        dx.as_deref_mut(),
                        dw.as_deref_mut(),
                        db.as_deref_mut(),
                    );
                    accumulate(&mut grads, x, dx);
                    accumulate(&mut grads, w, dw);
                    accumulate(&mut grads, b, db);
                }
                Op::Relu(x) => {
                    let xv = self.nodes[x.0].value.data();
                    let dx = dy.iter().zip(xv).map(|(&g, &v)| if v > R::zero() { g } else { R::zero() }).collect();
                    accumulate(&mut grads, *x, Some(dx));
                }
                Op::Softmax(x) => {
                    let [n, c, h, w] = node.value.dims4()?;
                    let mut dx = vec![R::zero(); node.value.numel()];
                    kernels::softmax_backward(node.value.data(), &dy, &mut dx, n, c, h * w);
                    accumulate(&mut grads, *x, Some(dx));
                }
                Op::Resize { x, plan } => {
                    let [n, c, _, _] = node.value.dims4()?;
                    let mut dx = vec![R::zero(); self.nodes[x.0].value.numel()];
                    plan.backward(&dy, &mut dx, n * c);
                    accumulate(&mut grads, *x, Some(dx));
                }
                Op::Affine { x, sigma, beta } => {
                    let (xv, sv) = (self.nodes[x.0].value.data(), self.nodes[sigma.0].value.data());
                    let dx = self.nodes[x.0].requires_grad.then(|| dy.iter().zip(sv).map(|(&g, &s)| g * s).collect());
                    let ds = self.nodes[sigma.0].requires_grad.then(|| dy.iter().zip(xv).map(|(&g, &v)| g * v).collect());
                    let db = self.nodes[beta.0].requires_grad.then(|| dy.clone());
                    let (x, sigma, beta) = (*x, *sigma, *beta);
                    accumulate(&mut grads, x, dx);
                    accumulate(&mut grads, sigma, ds);
                    accumulate(&mut grads, beta, db);
                }
                Op::ScaleShift { x, scale } => {
                    let a = R::from_f64(*scale);
                    accumulate(&mut grads, *x, Some(dy.iter().map(|&g| g * a).collect()));
                }
                Op::Concat(xs) => {
                    let [n, _, h, w] = node.value.dims4()?;
                    let hw = h * w;
                    let total_c = node.value.shape()[1];
                    let mut offset = 0;
                    let xs = xs.clone();
                    for x in xs {
                        let c = self.nodes[x.0].value.shape()[1];
                        if self.nodes[x.0].requires_grad {
                            let mut dx = Vec::with_capacity(n * c * hw);
                            for b in 0..n {
                                let start = (b * total_c + offset) * hw;
                                dx.extend_from_slice(&dy[start..start + c * hw]);
                            }
                            accumulate(&mut grads, x, Some(dx));
                        }
                        offset += c;
                    }
                }
                Op::CrossEntropy { p, labels, ignore, valid } => {
                    let pv = &self.nodes[p.0].value;
                    let [n, c, h, w] = pv.dims4()?;
                    let mut dp = vec![R::zero(); pv.numel()];
                    kernels::cross_entropy_backward(pv.data(), labels, dy[0], &mut dp, n, c, h * w, *ignore, *valid);
                    accumulate(&mut grads, *p, Some(dp));
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                    let da = self.nodes[a.0].requires_grad.then(|| dy.iter().zip(bv).map(|(&g, &v)| g * v).collect());
                    let db = self.nodes[b.0].requires_grad.then(|| dy.iter().zip(av).map(|(&g, &v)| g * v).collect());
                    let (a, b) = (*a, *b);
                    accumulate(&mut grads, a, da);
                    accumulate(&mut grads, b, db);
                }
                Op::Sum(x) => {
                    let n = self.nodes[x.0].value.numel();
                    accumulate(&mut grads, *x, Some(vec![dy[0]; n]));
                }
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(dy);
            }
        }
        self.grads = grads;
        Ok(())
    }
}

fn accumulate<R: Real>(grads: &mut [Option<Vec<R>>], v: Var, g: Option<Vec<R>>) {
    let Some(g) = g else { return };
    match &mut grads[v.0] {
        Some(existing) => existing.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_fn(&[2, 3], |i| i as f64));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn relu_subgradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::new(vec![4], vec![1.0, 2.0, -1.0, 0.0]).unwrap());
        let r = g.relu(x);
        let s = g.sum(r);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        // loss = sum(x * x) → 2x
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, -4.0, 1.0]);
        let t = g.tensor_with_grad(x);
        assert_eq!(t.grad().unwrap(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_consumes_graph() {
        let mut g = Graph::<f32>::new();
        let x = g.param(Tensor::zeros(&[2]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.backward(s), Err(Error::GraphConsumed));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::<f32>::new();
        let x = g.param(Tensor::zeros(&[2]));
        let r = g.relu(x);
        assert!(matches!(g.backward(r), Err(Error::NotScalar(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::<f32>::new();
        let c = g.constant(Tensor::full(&[2], 3.0));
        let p = g.param(Tensor::full(&[2], 2.0));
        let m = g.mul(c, p).unwrap();
        let s = g.sum(m);
        g.backward(s).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(p).unwrap(), &[3.0, 3.0]);
    }
}
