//! Central finite-difference oracle for the reverse sweep.
//!
//! Runs in `f64`: the same generic graph code is evaluated at `x +- eps` for
//! each probed coordinate, and compared against the analytic gradient with
//! `|a - n| / max(|a|, |n|, 1e-8)`.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Flat index of the worst coordinate.
    pub worst: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub checked: Vec<usize>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

/// Checks every coordinate of `point`.
pub fn grad_check<F>(f: F, point: &Tensor<f64>, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_, f64>, Var) -> Result<Var>,
{
    grad_check_in(None, f, point, eps, None)
}

/// General form: optional parameter store for the closure's graph and an
/// optional cap on the number of (seeded, randomly chosen) probed coordinates.
pub fn grad_check_in<'s, F>(
    store: Option<&'s ParamStore<f64>>,
    f: F,
    point: &Tensor<f64>,
    eps: f64,
    max_coords: Option<(usize, u64)>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'s, f64>, Var) -> Result<Var>,
{
    if !(1e-4..=1e-2).contains(&eps) {
        return Err(Error::InvalidArgument(format!("finite-difference step {eps} outside [1e-4, 1e-2]")));
    }
    let new_graph = || match store {
        Some(s) => Graph::with_params(s),
        None => Graph::new(),
    };
    let eval = |x: Tensor<f64>| -> Result<f64> {
        let mut g = new_graph();
        let v = g.input(x);
        let out = f(&mut g, v)?;
        let t = g.value(out);
        if t.numel() != 1 {
            return Err(Error::InvalidArgument(format!("closure output must be scalar, got {:?}", t.shape())));
        }
        Ok(t.data()[0])
    };

    let full = {
        let mut g = new_graph();
        let v = g.input(point.clone());
        let out = f(&mut g, v)?;
        if g.value(out).numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "closure output must be scalar, got {:?}",
                g.shape(out)
            )));
        }
        let grads = g.backward(out)?;
        grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(point.shape()))
    };

    let checked: Vec<usize> = match max_coords {
        Some((cap, seed)) if cap < point.numel() => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut idx = sample(&mut rng, point.numel(), cap).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..point.numel()).collect(),
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: 0,
        analytic: Vec::with_capacity(checked.len()),
        numeric: Vec::with_capacity(checked.len()),
        checked: checked.clone(),
    };
    for &i in &checked {
        let mut plus = point.clone();
        plus.data_mut()[i] += eps;
        let mut minus = point.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let analytic = full.data()[i];
        let err = relative_error(analytic, numeric);
        if err > report.max_rel_err || !err.is_finite() {
            report.max_rel_err = if err.is_finite() { err } else { f64::INFINITY };
            report.worst = i;
        }
        report.analytic.push(analytic);
        report.numeric.push(numeric);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_sum_at_one_two() {
        let x = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        let r = grad_check(|g, v| g.mul(v, v).map(|p| g.sum(p)), &x, 1e-3).unwrap();
        assert_eq!(r.analytic, vec![2.0, 4.0]);
        assert!(r.max_rel_err <= 1e-6, "{}", r.max_rel_err);
    }

    #[test]
    fn plain_sum_has_unit_gradient() {
        let x = Tensor::new(&[2, 3], vec![0.1, -4.0, 2.0, 7.0, 0.0, 1.5]).unwrap();
        let r = grad_check(|g, v| Ok(g.sum(v)), &x, 1e-3).unwrap();
        assert!(r.analytic.iter().all(|&a| a == 1.0));
    }

    #[test]
    fn rejects_bad_step_and_non_scalar_output() {
        let x = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        assert!(grad_check(|g, v| Ok(g.sum(v)), &x, 1.0).is_err());
        assert!(grad_check(|_, v| Ok(v), &x, 1e-3).is_err());
    }
}
