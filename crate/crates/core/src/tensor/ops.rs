//! Eager (non-recording) versions of the neural primitives.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::kernels::{self, ConvGeom, ResizePlan};
use super::{LabelMap, ProbabilityMap, Real, Tensor};
use crate::error::{shape_err, Error, Result};

pub(crate) fn conv_geom(xs: &[usize], ws: &[usize], bs: &[usize], stride: usize, pad: usize) -> Result<ConvGeom> {
    let (&[n, cin, h, w], &[cout, wcin, kh, kw]) = (xs, ws) else {
        return Err(shape_err("conv2d", format!("expected 4-d input and weight, got {:?} and {:?}", xs, ws)));
    };
    if cin != wcin {
        return Err(shape_err("conv2d", format!("input has {} channels, weight expects {}", cin, wcin)));
    }
    if bs != [cout] {
        return Err(shape_err("conv2d", format!("bias shape {:?}, expected [{}]", bs, cout)));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(shape_err("conv2d", format!("kernel {}x{} must be odd", kh, kw)));
    }
    if stride == 0 {
        return Err(Error::InvalidArgument("conv2d stride must be >= 1".into()));
    }
    if h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(shape_err("conv2d", format!("input {}x{} (pad {}) smaller than kernel {}x{}", h, w, pad, kh, kw)));
    }
    Ok(ConvGeom {
        n,
        cin,
        h,
        w,
        cout,
        kh,
        kw,
        stride,
        pad,
        ho: (h + 2 * pad - kh) / stride + 1,
        wo: (w + 2 * pad - kw) / stride + 1,
    })
}

pub(crate) fn check_same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(shape_err(op, format!("{:?} vs {:?}", a, b)));
    }
    Ok(())
}

pub(crate) fn concat_shape(shapes: &[&[usize]]) -> Result<[usize; 4]> {
    let first = shapes.first().ok_or(Error::Empty("concat_channels of zero tensors"))?;
    let &[n, _, h, w] = *first else {
        return Err(shape_err("concat_channels", format!("expected 4-d tensors, got {:?}", first)));
    };
    let mut c = 0;
    for s in shapes {
        match *s {
            &[sn, sc, sh, sw] if sn == n && sh == h && sw == w => c += sc,
            other => {
                return Err(shape_err("concat_channels", format!("{:?} incompatible with {:?}", other, first)));
            }
        }
    }
    Ok([n, c, h, w])
}

pub(crate) fn concat_data<R: Real>(parts: &[(&[R], usize)], n: usize, hw: usize) -> Vec<R> {
    let total_c: usize = parts.iter().map(|p| p.1).sum();
    let mut out = Vec::with_capacity(n * total_c * hw);
    for b in 0..n {
        for (data, c) in parts {
            out.extend_from_slice(&data[b * c * hw..(b + 1) * c * hw]);
        }
    }
    out
}

/// Flattens and validates labels against a probability tensor of shape `[N, C, H, W]`.
pub(crate) fn flatten_labels(dims: [usize; 4], labels: &[LabelMap], ignore: Option<u8>) -> Result<Vec<u8>> {
    let [n, c, h, w] = dims;
    if labels.len() != n {
        return Err(shape_err("pixel_cross_entropy", format!("{} label maps for batch of {}", labels.len(), n)));
    }
    let mut flat = Vec::with_capacity(n * h * w);
    for l in labels {
        if l.height() != h || l.width() != w {
            return Err(shape_err(
                "pixel_cross_entropy",
                format!("label map {}x{} vs prediction {}x{}", l.height(), l.width(), h, w),
            ));
        }
        for &y in l.data() {
            if Some(y) != ignore && y as usize >= c {
                return Err(Error::LabelOutOfRange { label: y, classes: c });
            }
        }
        flat.extend_from_slice(l.data());
    }
    Ok(flat)
}

/// Zero-padded cross-correlation of `[N, Cin, H, W]` with `[Cout, Cin, kh, kw]`.
pub fn conv2d<R: Real>(x: &Tensor<R>, weight: &Tensor<R>, bias: &Tensor<R>, stride: usize, padding: usize) -> Result<Tensor<R>> {
    let g = conv_geom(x.shape(), weight.shape(), bias.shape(), stride, padding)?;
    let out = kernels::conv2d_forward(x.data(), weight.data(), bias.data(), &g);
    Tensor::new(vec![g.n, g.cout, g.ho, g.wo], out)
}

pub fn relu<R: Real>(x: &Tensor<R>) -> Tensor<R> {
    Tensor::from_fn(x.shape(), |i| {
        let v = x.data()[i];
        if v > R::zero() {
            v
        } else {
            R::zero()
        }
    })
}

pub fn channel_softmax(logits: &Tensor<f32>) -> Result<ProbabilityMap> {
    let [n, c, h, w] = logits.dims4()?;
    if c < 2 {
        return Err(shape_err("channel_softmax", format!("need at least 2 channels, got {}", c)));
    }
    let out = kernels::softmax_forward(logits.data(), n, c, h * w);
    ProbabilityMap::from_tensor(Tensor::new(vec![n, c, h, w], out)?)
}

/// Half-pixel-center bilinear resize with clamped borders.
pub fn bilinear_resize<R: Real>(x: &Tensor<R>, out_h: usize, out_w: usize) -> Result<Tensor<R>> {
    let [n, c, h, w] = x.dims4()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument(format!("resize target {}x{} must be positive", out_h, out_w)));
    }
    let plan = ResizePlan::new(h, w, out_h, out_w);
    Tensor::new(vec![n, c, out_h, out_w], plan.forward(x.data(), n * c))
}

/// `sigma * x + beta`, elementwise.
pub fn affine_modulate<R: Real>(x: &Tensor<R>, sigma: &Tensor<R>, beta: &Tensor<R>) -> Result<Tensor<R>> {
    check_same_shape("affine_modulate", x.shape(), sigma.shape())?;
    check_same_shape("affine_modulate", x.shape(), beta.shape())?;
    Ok(Tensor::from_fn(x.shape(), |i| sigma.data()[i] * x.data()[i] + beta.data()[i]))
}

pub fn concat_channels<R: Real>(xs: &[&Tensor<R>]) -> Result<Tensor<R>> {
    let shapes: Vec<&[usize]> = xs.iter().map(|t| t.shape()).collect();
    let [n, c, h, w] = concat_shape(&shapes)?;
    let parts: Vec<(&[R], usize)> = xs.iter().map(|t| (t.data(), t.shape()[1])).collect();
    Tensor::new(vec![n, c, h, w], concat_data(&parts, n, h * w))
}

/// Result of [`pixel_cross_entropy`]: `all_ignored` flags the empty-mean case,
/// where the loss is defined as zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CrossEntropy {
    pub loss: f64,
    pub valid_pixels: usize,
    pub all_ignored: bool,
}

pub fn pixel_cross_entropy(p: &ProbabilityMap, labels: &[LabelMap], ignore_label: Option<u8>) -> Result<CrossEntropy> {
    let dims = p.dims();
    let flat = flatten_labels(dims, labels, ignore_label)?;
    let [n, c, h, w] = dims;
    let (loss, valid) = kernels::cross_entropy_forward(p.tensor().data(), &flat, n, c, h * w, ignore_label);
    Ok(CrossEntropy { loss, valid_pixels: valid, all_ignored: valid == 0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn t(shape: &[usize], data: &[f32]) -> Tensor<f32> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv_1x1_scaled_plus_bias() {
        let x = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let w = t(&[1, 1, 1, 1], &[2.0]);
        let b = t(&[1], &[1.0]);
        let y = conv2d(&x, &w, &b, 1, 0).unwrap();
        assert_eq!(y.data(), &[3.0, 5.0, 7.0, 9.0]);
    }

    #[test]
    fn conv_zero_weight_gives_bias() {
        let x = Tensor::from_fn(&[2, 3, 5, 5], |i| i as f32 * 0.1);
        let w = Tensor::zeros(&[4, 3, 3, 3]);
        let b = t(&[4], &[0.5, -1.0, 2.0, 0.0]);
        let y = conv2d(&x, &w, &b, 2, 1).unwrap();
        assert_eq!(y.shape(), &[2, 4, 3, 3]);
        for n in 0..2 {
            for c in 0..4 {
                for p in 0..9 {
                    assert_eq!(y.data()[(n * 4 + c) * 9 + p], b.data()[c]);
                }
            }
        }
    }

    #[test]
    fn conv_identity_kernel() {
        let x = Tensor::from_fn(&[1, 1, 3, 4], |i| (i as f32).sin());
        let y = conv2d(&x, &t(&[1, 1, 1, 1], &[1.0]), &t(&[1], &[0.0]), 1, 0).unwrap();
        assert_eq!(y, x);
        // a centered 3x3 delta with padding 1 is also the identity
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let y = conv2d(&x, &t(&[1, 1, 3, 3], &k), &t(&[1], &[0.0]), 1, 1).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_output_size_and_errors() {
        let x = Tensor::<f32>::zeros(&[1, 2, 7, 6]);
        let w = Tensor::zeros(&[3, 2, 3, 3]);
        let b = Tensor::zeros(&[3]);
        assert_eq!(conv2d(&x, &w, &b, 2, 1).unwrap().shape(), &[1, 3, 4, 3]);
        let wrong = Tensor::zeros(&[3, 4, 3, 3]);
        assert!(matches!(conv2d(&x, &wrong, &b, 1, 1), Err(Error::Shape { .. })));
        let even = Tensor::zeros(&[3, 2, 2, 2]);
        assert!(conv2d(&x, &even, &b, 1, 0).is_err());
    }

    #[test]
    fn conv_matches_direct_loop() {
        let x = Tensor::from_fn(&[2, 3, 6, 5], |i| ((i * 37 % 11) as f32 - 5.0) * 0.1);
        let w = Tensor::from_fn(&[4, 3, 3, 3], |i| ((i * 13 % 7) as f32 - 3.0) * 0.2);
        let b = Tensor::from_fn(&[4], |i| i as f32);
        for (stride, pad) in [(1, 1), (2, 1), (1, 0), (2, 0)] {
            let y = conv2d(&x, &w, &b, stride, pad).unwrap();
            let [_, _, ho, wo] = y.dims4().unwrap();
            for n in 0..2 {
                for co in 0..4 {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let mut s = b.data()[co] as f64;
                            for ci in 0..3 {
                                for ky in 0..3 {
                                    for kx in 0..3 {
                                        let iy = (oy * stride + ky) as isize - pad as isize;
                                        let ix = (ox * stride + kx) as isize - pad as isize;
                                        if iy < 0 || ix < 0 || iy >= 6 || ix >= 5 {
                                            continue;
                                        }
                                        let xv = x.data()[((n * 3 + ci) * 6 + iy as usize) * 5 + ix as usize];
                                        let wv = w.data()[((co * 3 + ci) * 3 + ky) * 3 + kx];
                                        s += (xv * wv) as f64;
                                    }
                                }
                            }
                            let got = y.data()[((n * 4 + co) * ho + oy) * wo + ox];
                            assert_abs_diff_eq!(got as f64, s, epsilon = 1e-4);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn relu_cases() {
        assert_eq!(relu(&t(&[3], &[-1.0, 0.0, 2.0])).data(), &[0.0, 0.0, 2.0]);
        assert_eq!(relu(&t(&[2], &[-3.0, -0.5])).data(), &[0.0, 0.0]);
        let pos = t(&[2], &[0.5, 4.0]);
        assert_eq!(relu(&pos), pos);
    }

    #[test]
    fn softmax_closed_forms() {
        let p = channel_softmax(&t(&[1, 2, 1, 2], &[0.0, 2f32.ln(), 0.0, 0.0])).unwrap();
        let d = p.tensor().data();
        assert_abs_diff_eq!(d[0], 0.5, epsilon = 1e-7);
        assert_abs_diff_eq!(d[2], 0.5, epsilon = 1e-7);
        assert_abs_diff_eq!(d[1], 2.0 / 3.0, epsilon = 1e-6);
        assert_abs_diff_eq!(d[3], 1.0 / 3.0, epsilon = 1e-6);
        assert!(channel_softmax(&t(&[1, 1, 1, 1], &[0.0])).is_err());
    }

    #[test]
    fn softmax_shift_invariant_and_overflow_safe() {
        let a = channel_softmax(&t(&[1, 3, 1, 1], &[1.0, 2.0, 3.0])).unwrap();
        let b = channel_softmax(&t(&[1, 3, 1, 1], &[101.0, 102.0, 103.0])).unwrap();
        assert!(a.tensor().max_abs_diff(b.tensor()).unwrap() < 1e-6);
        let c = channel_softmax(&t(&[1, 2, 1, 1], &[1000.0, -1000.0])).unwrap();
        assert_eq!(c.tensor().data(), &[1.0, 0.0]);
    }

    #[test]
    fn resize_cases() {
        let x = t(&[1, 1, 2, 2], &[0.0, 2.0, 4.0, 6.0]);
        assert_eq!(bilinear_resize(&x, 1, 1).unwrap().data(), &[3.0]);
        assert_eq!(bilinear_resize(&x, 2, 2).unwrap(), x);
        let k = Tensor::full(&[2, 3, 5, 7], 0.25f32);
        let r = bilinear_resize(&k, 3, 11).unwrap();
        assert!(r.data().iter().all(|&v| v == 0.25));
        assert!(bilinear_resize(&x, 0, 2).is_err());
    }

    #[test]
    fn resize_upsample_half_pixel() {
        // 1-d [0, 4] upsampled to 4 samples: sources at -0.25, 0.25, 0.75, 1.25
        let x = t(&[1, 1, 1, 2], &[0.0, 4.0]);
        let r = bilinear_resize(&x, 1, 4).unwrap();
        assert_eq!(r.data(), &[0.0, 1.0, 3.0, 4.0]);
    }

    #[test]
    fn affine_cases() {
        let x = t(&[1, 1, 1, 1], &[3.0]);
        let y = affine_modulate(&x, &t(&[1, 1, 1, 1], &[2.0]), &t(&[1, 1, 1, 1], &[1.0])).unwrap();
        assert_eq!(y.data(), &[7.0]);
        let x = Tensor::from_fn(&[1, 2, 2, 2], |i| i as f32 - 3.0);
        let ones = Tensor::full(&[1, 2, 2, 2], 1.0);
        let zeros = Tensor::zeros(&[1, 2, 2, 2]);
        assert_eq!(affine_modulate(&x, &ones, &zeros).unwrap(), x);
        let beta = Tensor::from_fn(&[1, 2, 2, 2], |i| i as f32 * 0.5);
        assert_eq!(affine_modulate(&x, &zeros, &beta).unwrap(), beta);
        assert!(affine_modulate(&x, &Tensor::zeros(&[1, 2, 2, 1]), &zeros).is_err());
    }

    #[test]
    fn concat_cases() {
        let a = Tensor::from_fn(&[1, 3, 4, 4], |i| i as f32);
        let b = Tensor::from_fn(&[1, 2, 4, 4], |i| -(i as f32));
        assert_eq!(concat_channels(&[&a]).unwrap(), a);
        let ab = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(ab.shape(), &[1, 5, 4, 4]);
        let ba = concat_channels(&[&b, &a]).unwrap();
        assert_ne!(ab, ba);
        assert!(concat_channels(&[&a, &Tensor::zeros(&[1, 2, 4, 3])]).is_err());
    }

    #[test]
    fn cross_entropy_cases() {
        let lab = LabelMap::new(1, 2, vec![0, 1]).unwrap();
        let onehot = ProbabilityMap::from_tensor(t(&[1, 2, 1, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
        assert_eq!(pixel_cross_entropy(&onehot, &[lab.clone()], None).unwrap().loss, 0.0);

        let uniform = ProbabilityMap::from_tensor(Tensor::full(&[1, 4, 1, 2], 0.25)).unwrap();
        let l = LabelMap::new(1, 2, vec![3, 2]).unwrap();
        let ce = pixel_cross_entropy(&uniform, &[l], None).unwrap();
        assert_abs_diff_eq!(ce.loss, 4f64.ln(), epsilon = 1e-6);

        let ignored = LabelMap::filled(1, 2, 255);
        let ce = pixel_cross_entropy(&uniform, &[ignored], Some(255)).unwrap();
        assert_eq!(ce.loss, 0.0);
        assert!(ce.all_ignored);

        let bad = LabelMap::new(1, 2, vec![0, 4]).unwrap();
        assert_eq!(
            pixel_cross_entropy(&uniform, &[bad], None),
            Err(Error::LabelOutOfRange { label: 4, classes: 4 })
        );
    }
}
