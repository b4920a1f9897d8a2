//! Dense tensors, the reverse-mode autodiff graph, neural primitives and the
//! optimizer used for training.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Debug;
use core::iter::Sum;
use core::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

use crate::error::{shape_err, Error, Result};

mod graph;
mod gradcheck;
pub(crate) mod kernels;
mod ops;
mod optim;

pub use graph::{Graph, LossOutput, Var};
pub use gradcheck::{finite_difference_error, grad_check, grad_check_piecewise, GradCheckReport};
pub use ops::{
    affine_modulate, bilinear_resize, channel_softmax, concat_channels, conv2d, pixel_cross_entropy,
    relu, CrossEntropy,
};
pub use optim::{LrSchedule, OptimizerState};

/// Floating-point scalar the engine runs on. Training uses `f32`; the
/// finite-difference oracle runs the same graphs in `f64`.
pub trait Real:
    Float + Default + Debug + AddAssign + SubAssign + MulAssign + Sum + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `c <- alpha * a·b + beta * c` for an `m×k` by `k×n` product with
    /// arbitrary (row, column) strides.
    #[doc(hidden)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Real for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Real for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Strided matrix view used by [`gemm`].
#[derive(Clone, Copy)]
pub(crate) struct Layout {
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl Layout {
    pub fn row_major(rows: usize, cols: usize) -> Self {
        Layout { rows, cols, rs: cols, cs: 1 }
    }

    pub fn t(self) -> Self {
        Layout { rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs }
    }

    fn extent(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            0
        } else {
            (self.rows - 1) * self.rs + (self.cols - 1) * self.cs + 1
        }
    }
}

/// Bounds-checked wrapper over the strided GEMM kernel.
pub(crate) fn gemm<R: Real>(alpha: R, a: &[R], la: Layout, b: &[R], lb: Layout, beta: R, c: &mut [R], lc: Layout) {
    assert_eq!(la.cols, lb.rows, "gemm inner dimension");
    assert_eq!(la.rows, lc.rows, "gemm output rows");
    assert_eq!(lb.cols, lc.cols, "gemm output cols");
    assert!(la.extent() <= a.len() && lb.extent() <= b.len() && lc.extent() <= c.len());
    if lc.rows == 0 || lc.cols == 0 {
        return;
    }
    // SAFETY: every addressed element lies within the slices (checked above).
    unsafe {
        R::gemm_raw(
            la.rows,
            la.cols,
            lb.cols,
            alpha,
            a.as_ptr(),
            la.rs as isize,
            la.cs as isize,
            b.as_ptr(),
            lb.rs as isize,
            lb.cs as isize,
            beta,
            c.as_mut_ptr(),
            lc.rs as isize,
            lc.cs as isize,
        );
    }
}

/// Dense row-major array with an optional gradient slot.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<R = f32> {
    shape: Vec<usize>,
    data: Vec<R>,
    grad: Option<Vec<R>>,
    requires_grad: bool,
}

impl<R: Real> Tensor<R> {
    pub fn new(shape: Vec<usize>, data: Vec<R>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(shape_err(
                "tensor",
                format!("shape {:?} holds {} elements, data has {}", shape, numel, data.len()),
            ));
        }
        Ok(Tensor { shape, data, grad: None, requires_grad: false })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, R::zero())
    }

    pub fn full(shape: &[usize], value: R) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; numel], grad: None, requires_grad: false }
    }

    pub fn scalar(value: R) -> Self {
        Tensor { shape: vec![1], data: vec![value], grad: None, requires_grad: false }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> R) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: (0..numel).map(&mut f).collect(), grad: None, requires_grad: false }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[R] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [R] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<R> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn grad(&self) -> Option<&[R]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<R>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(shape_err("set_grad", format!("expected {} values, got {}", self.data.len(), grad.len())));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(shape_err("reshape", format!("{:?} -> {:?}", self.shape, shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Dimensions of a 4-d `[N, C, H, W]` tensor.
    pub fn dims4(&self) -> Result<[usize; 4]> {
        match self.shape.as_slice() {
            &[n, c, h, w] => Ok([n, c, h, w]),
            other => Err(shape_err("dims4", format!("expected 4 dimensions, got {:?}", other))),
        }
    }

    pub fn cast<S: Real>(&self) -> Tensor<S> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| S::from_f64(v.as_f64())).collect(),
            grad: self.grad.as_ref().map(|g| g.iter().map(|v| S::from_f64(v.as_f64())).collect()),
            requires_grad: self.requires_grad,
        }
    }

    /// Item `n` of the leading (batch) axis, keeping a batch axis of size 1.
    pub fn batch_item(&self, n: usize) -> Result<Self> {
        let lead = *self.shape.first().ok_or(Error::Empty("batch_item on rank-0 tensor"))?;
        if n >= lead {
            return Err(shape_err("batch_item", format!("index {} >= batch {}", n, lead)));
        }
        let per = self.data.len() / lead;
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Tensor::new(shape, self.data[n * per..(n + 1) * per].to_vec())
    }

    /// Stacks tensors of equal shape along a new leading axis.
    pub fn stack(items: &[&Tensor<R>]) -> Result<Self> {
        let first = items.first().ok_or(Error::Empty("stack of zero tensors"))?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(shape_err("stack", format!("{:?} vs {:?}", t.shape, first.shape)));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Tensor::new(shape, data)
    }

    /// Concatenates along the leading axis.
    pub fn cat_batch(items: &[&Tensor<R>]) -> Result<Self> {
        let first = items.first().ok_or(Error::Empty("cat_batch of zero tensors"))?;
        let mut data = Vec::new();
        let mut lead = 0;
        for t in items {
            if t.shape.len() != first.shape.len() || t.shape[1..] != first.shape[1..] {
                return Err(shape_err("cat_batch", format!("{:?} vs {:?}", t.shape, first.shape)));
            }
            lead += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = lead;
        Tensor::new(shape, data)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor<R>) -> Option<f64> {
        if self.shape != other.shape {
            return None;
        }
        Some(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
                .fold(0.0, f64::max),
        )
    }
}

/// Per-pixel class ids of one image, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height * width != data.len() {
            return Err(shape_err("label_map", format!("{}x{} needs {} labels, got {}", height, width, height * width, data.len())));
        }
        Ok(LabelMap { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        LabelMap { height, width, data: vec![value; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn same_dims(&self, other: &LabelMap) -> bool {
        self.height == other.height && self.width == other.width
    }
}

/// Per-pixel class distribution, stored as an `[N, C, H, W]` tensor whose
/// channel entries sum to one at every pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityMap(Tensor<f32>);

impl ProbabilityMap {
    /// Wraps a tensor without checking normalization. Use [`ProbabilityMap::validate`]
    /// when the source is untrusted.
    pub fn from_tensor(t: Tensor<f32>) -> Result<Self> {
        t.dims4()?;
        Ok(ProbabilityMap(t))
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<f32> {
        self.0
    }

    pub fn shape(&self) -> &[usize] {
        self.0.shape()
    }

    pub fn dims(&self) -> [usize; 4] {
        self.0.dims4().expect("probability maps are 4-d")
    }

    pub fn num_classes(&self) -> usize {
        self.dims()[1]
    }

    /// Largest deviation of a per-pixel channel sum from one, or `None` when
    /// some entry lies outside `[0, 1]` or is not finite.
    pub fn max_sum_deviation(&self) -> Option<f64> {
        let [n, c, h, w] = self.dims();
        let hw = h * w;
        let d = self.0.data();
        let mut worst = 0.0f64;
        for b in 0..n {
            for p in 0..hw {
                let mut s = 0.0f64;
                for k in 0..c {
                    let v = d[(b * c + k) * hw + p];
                    if !(0.0..=1.0).contains(&v) {
                        return None;
                    }
                    s += v as f64;
                }
                worst = worst.max((s - 1.0).abs());
            }
        }
        Some(worst)
    }

    pub fn validate(&self, tol: f64) -> Result<()> {
        match self.max_sum_deviation() {
            Some(dev) if dev <= tol => Ok(()),
            Some(dev) => Err(Error::InvalidArgument(format!("channel sums deviate from 1 by {}", dev))),
            None => Err(Error::InvalidArgument("probability outside [0, 1]".into())),
        }
    }

    /// Per-pixel argmax; ties go to the lowest class index.
    pub fn argmax_labels(&self) -> Vec<LabelMap> {
        argmax_channels(&self.0)
    }

    /// Item `n` of the batch as a single-image map.
    pub fn batch_item(&self, n: usize) -> Result<ProbabilityMap> {
        Ok(ProbabilityMap(self.0.batch_item(n)?))
    }
}

/// Argmax over the channel axis of an `[N, C, H, W]` tensor, lowest index on ties.
pub fn argmax_channels<R: Real>(t: &Tensor<R>) -> Vec<LabelMap> {
    let [n, c, h, w] = t.dims4().expect("argmax over a 4-d tensor");
    let hw = h * w;
    let d = t.data();
    (0..n)
        .map(|b| {
            let mut labels = vec![0u8; hw];
            for p in 0..hw {
                let mut best = 0;
                let mut best_v = d[b * c * hw + p];
                for k in 1..c {
                    let v = d[(b * c + k) * hw + p];
                    if v > best_v {
                        best_v = v;
                        best = k;
                    }
                }
                labels[p] = best as u8;
            }
            LabelMap { height: h, width: w, data: labels }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_mismatched_length() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn grad_slot_must_match_shape() {
        let mut t = Tensor::<f32>::zeros(&[2, 2]);
        assert!(t.set_grad(vec![0.0; 3]).is_err());
        t.set_grad(vec![1.0; 4]).unwrap();
        assert_eq!(t.grad().unwrap(), &[1.0; 4]);
    }

    #[test]
    fn argmax_breaks_ties_low() {
        let t = Tensor::<f32>::new(vec![1, 3, 1, 2], vec![0.2, 0.5, 0.4, 0.5, 0.4, 0.0]).unwrap();
        let labels = argmax_channels(&t);
        assert_eq!(labels[0].data(), &[1, 0]);
    }

    #[test]
    fn gemm_transposed_views() {
        // [1 2; 3 4] · [1 2; 3 4]^T
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let mut c = [0.0f64; 4];
        let l = Layout::row_major(2, 2);
        gemm(1.0, &a, l, &a, l.t(), 0.0, &mut c, l);
        assert_eq!(c, [5.0, 11.0, 11.0, 25.0]);
    }
}
