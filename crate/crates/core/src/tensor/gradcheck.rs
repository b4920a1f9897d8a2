//! Central finite-difference gradient oracle, run in 64-bit.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

fn check_eps(eps: f64) -> Result<()> {
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::InvalidArgument(format!("grad_check eps {} outside (0, 1e-2]", eps)));
    }
    Ok(())
}

fn scalar_of(g: &Graph<f64>, out: Var) -> Result<f64> {
    let t = g.value(out);
    if t.numel() != 1 {
        return Err(Error::NotScalar(format!("{:?}", t.shape())));
    }
    Ok(t.data()[0])
}

/// Compares reverse-mode gradients of the scalar function `f` against central
/// differences at `inputs`, returning the maximum over coordinates of
/// `|g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|)`.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    check_eps(eps)?;
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    scalar_of(&g, out)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();
    finite_difference_error(inputs, &analytic, |xs| {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        scalar_of(&g, out)
    }, eps)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates whose stencil crosses a ReLU kink.
    pub skipped: usize,
}

/// [`grad_check`] for piecewise-smooth functions. A coordinate is compared
/// only when `x - eps`, `x` and `x + eps` share one ReLU activation pattern;
/// elsewhere the central difference straddles a kink and is skipped.
pub fn grad_check_piecewise<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    check_eps(eps)?;
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    scalar_of(&g, out)?;
    let base = g.relu_pattern();
    g.backward(out)?;
    let eval = |xs: &[Tensor<f64>]| -> Result<(f64, Vec<bool>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok((scalar_of(&g, out)?, g.relu_pattern()))
    };
    let mut xs: Vec<Tensor<f64>> = inputs.to_vec();
    let mut report = GradCheckReport { max_rel_error: 0.0, checked: 0, skipped: 0 };
    for (k, &v) in vars.iter().enumerate() {
        let analytic = g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[k].numel()]);
        for (i, &ad) in analytic.iter().enumerate() {
            let orig = xs[k].data()[i];
            xs[k].data_mut()[i] = orig + eps;
            let (up, up_pattern) = eval(&xs)?;
            xs[k].data_mut()[i] = orig - eps;
            let (down, down_pattern) = eval(&xs)?;
            xs[k].data_mut()[i] = orig;
            if up_pattern != base || down_pattern != base {
                report.skipped += 1;
                continue;
            }
            let fd = (up - down) / (2.0 * eps);
            report.max_rel_error = report.max_rel_error.max((ad - fd).abs() / (ad.abs() + fd.abs()).max(1e-8));
            report.checked += 1;
        }
    }
    Ok(report)
}

/// The comparison half of [`grad_check`]: checks caller-supplied `analytic`
/// gradients against central differences of `value`.
pub fn finite_difference_error<V>(inputs: &[Tensor<f64>], analytic: &[Vec<f64>], mut value: V, eps: f64) -> Result<f64>
where
    V: FnMut(&[Tensor<f64>]) -> Result<f64>,
{
    check_eps(eps)?;
    if analytic.len() != inputs.len() || analytic.iter().zip(inputs).any(|(a, t)| a.len() != t.numel()) {
        return Err(Error::InvalidArgument("analytic gradient shapes do not match inputs".into()));
    }
    let mut xs: Vec<Tensor<f64>> = inputs.to_vec();
    let mut worst = 0.0f64;
    for k in 0..xs.len() {
        for i in 0..xs[k].numel() {
            let orig = xs[k].data()[i];
            xs[k].data_mut()[i] = orig + eps;
            let up = value(&xs)?;
            xs[k].data_mut()[i] = orig - eps;
            let down = value(&xs)?;
            xs[k].data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * eps);
            let ad = analytic[k][i];
            let rel = (ad - fd).abs() / (ad.abs() + fd.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::new(vec![5], vec![0.3, -1.2, 2.0, 0.0, 0.7]).unwrap();
        let err = grad_check(
            |g, v| {
                let sq = g.mul(v[0], v[0])?;
                let s = g.sum(sq);
                Ok(g.scale_shift(s, 0.5, 0.0))
            },
            &[x],
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-9, "{}", err);
    }

    #[test]
    fn corrupted_adjoint_is_detected() {
        let x = Tensor::new(vec![3], vec![0.5, -0.25, 1.5]).unwrap();
        let wrong = vec![x.data().iter().map(|v| 1.5 * v).collect::<Vec<_>>()];
        let err = finite_difference_error(
            core::slice::from_ref(&x),
            &wrong,
            |xs| Ok(0.5 * xs[0].data().iter().map(|v| v * v).sum::<f64>()),
            1e-3,
        )
        .unwrap();
        assert!(err > 1e-2, "{}", err);
    }

    #[test]
    fn piecewise_skips_only_kink_straddling_coordinates() {
        // relu(x) summed: x = 5e-4 lies within eps of the kink
        let x = Tensor::new(vec![3], vec![5e-4, 0.5, -0.5]).unwrap();
        let r = grad_check_piecewise(|g, v| { let y = g.relu(v[0]); Ok(g.sum(y)) }, &[x], 1e-3).unwrap();
        assert_eq!((r.checked, r.skipped), (2, 1));
        assert!(r.max_rel_error < 1e-9);
    }

    #[test]
    fn rejects_bad_eps_and_non_scalar() {
        let x = Tensor::<f64>::zeros(&[2]);
        assert!(grad_check(|g, v| Ok(g.sum(v[0])), core::slice::from_ref(&x), 0.1).is_err());
        assert!(matches!(
            grad_check(|g, v| Ok(g.relu(v[0])), &[x], 1e-3),
            Err(Error::NotScalar(_))
        ));
    }
}
