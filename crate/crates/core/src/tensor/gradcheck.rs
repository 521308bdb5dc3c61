//! Central finite-difference gradient checking.

use super::{Graph, Tensor, Var};
use crate::{Error, Result};

/// Scalar function recorded on a graph from a single input leaf.
pub type ScalarFn<'a> = dyn Fn(&mut Graph, Var) -> Result<Var> + 'a;

fn eval(f: &ScalarFn<'_>, x: &Tensor) -> Result<f64> {
    let mut g = Graph::inference();
    let v = g.constant(x.clone());
    let out = f(&mut g, v)?;
    let t = g.value(out);
    if t.numel() != 1 {
        return Err(Error::invalid(format!(
            "grad_check needs a scalar function, got shape {:?}",
            t.shape()
        )));
    }
    Ok(t.item())
}

/// Central differences `(f(x + h e_i) − f(x − h e_i)) / 2h` for every `i`.
pub fn numeric_gradient(f: &ScalarFn<'_>, x: &Tensor, h: f64) -> Result<Tensor> {
    let mut out = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = eval(f, &probe)?;
        probe.data_mut()[i] = orig - h;
        let down = eval(f, &probe)?;
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (up - down) / (2.0 * h);
    }
    Ok(out)
}

/// Gradient of `f` at `x` by reverse-mode differentiation.
pub fn analytic_gradient(f: &ScalarFn<'_>, x: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let v = g.variable(x.clone());
    let out = f(&mut g, v)?;
    let grads = g.backward(out)?;
    Ok(grads.wrt(v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape())))
}

/// Max over coordinates of `|a − n| / max(1, |a|, |n|)`.
pub fn relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / 1f64.max(a.abs()).max(n.abs()))
        .fold(0.0, f64::max)
}

/// Max over coordinates of `|analytic − numeric| / max(1, |analytic|, |numeric|)`.
pub fn grad_check(f: &ScalarFn<'_>, x: &Tensor, h: f64) -> Result<f64> {
    let f0 = eval(f, x)?;
    if !f0.is_finite() {
        return Err(Error::NonFinite(format!("grad_check: f(x) = {f0}")));
    }
    let analytic = analytic_gradient(f, x)?;
    let numeric = numeric_gradient(f, x, h)?;
    Ok(relative_error(&analytic, &numeric))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let f = |g: &mut Graph, x: Var| {
            let s = g.square(x);
            Ok(g.sum_all(s))
        };
        let x = Tensor::row(&[0.3, -1.7, 2.5, 10.0]);
        assert!(grad_check(&f, &x, 1e-5).unwrap() < 1e-8);
    }

    #[test]
    fn non_finite_rejected() {
        let f = |g: &mut Graph, x: Var| {
            let l = g.log(x);
            Ok(g.sum_all(l))
        };
        assert!(matches!(
            grad_check(&f, &Tensor::row(&[-1.0]), 1e-5),
            Err(Error::NonFinite(_))
        ));
    }
}
