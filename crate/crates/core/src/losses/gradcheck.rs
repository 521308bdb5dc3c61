//! Finite-difference checks of every loss on seeded random inputs.

use rand_distr::{Distribution, StandardNormal};

use super::{
    batch_view_corr, batch_view_loss, dvcc_loss, feature_view_corr, feature_view_loss,
    framewise_l1cos, tcode_loss, utterance_l1cos,
};
use crate::rng::{derive, rng_for, tag};
use crate::tensor::{analytic_gradient, grad_check, numeric_gradient, relative_error, Graph, Tensor, Var};
use crate::Result;

const EPS: f64 = 1e-9;
const ALPHA: f64 = 5e-3;
const NEGATIVES: usize = 4;

/// Step used for the central differences.
pub const STEP: f64 = 1e-5;

fn normal(seed: u64, rows: usize, cols: usize) -> Tensor {
    let mut r = rng_for(&[seed]);
    let data = (0..rows * cols).map(|_| StandardNormal.sample(&mut r)).collect();
    Tensor::new(vec![rows, cols], data).expect("shape")
}

/// Worst relative error of one loss over the checked instances.
#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckRow {
    pub name: &'static str,
    pub max_error: f64,
}

/// Gradient of `L_C/sg(L_C) + L_G/sg(L_G)` checked against
/// `∇L_C/L_C + ∇L_G/L_G` with both terms differenced separately: the
/// self-normalized sum itself is constant, so differencing it directly
/// would say nothing.
pub fn dvcc_term_error(h: &Tensor, o: &Tensor, gamma_tcode: Option<(f64, &Tensor, &Tensor)>) -> Result<f64> {
    let hc = h.clone();
    let total = |g: &mut Graph, x: Var| -> Result<Var> {
        let hv = g.constant(hc.clone());
        let d = dvcc_loss(g, hv, x, ALPHA, ALPHA, EPS, 1e-12)?;
        match gamma_tcode {
            Some((gamma, k, n)) => {
                let (k, n) = (g.constant(k.clone()), g.constant(n.clone()));
                let t = tcode_loss(g, x, k, n, EPS)?.sum;
                let t = g.scale(t, gamma);
                g.add(d.total, t)
            }
            None => Ok(d.total),
        }
    };
    let analytic = analytic_gradient(&total, o)?;
    let term = |which: usize| {
        let hc = h.clone();
        move |g: &mut Graph, x: Var| -> Result<Var> {
            let hv = g.constant(hc.clone());
            if which == 0 {
                let c = feature_view_corr(g, hv, x, EPS)?;
                feature_view_loss(g, c, ALPHA)
            } else {
                let m = batch_view_corr(g, hv, x, EPS)?;
                batch_view_loss(g, m, ALPHA)
            }
        }
    };
    let value = |f: &dyn Fn(&mut Graph, Var) -> Result<Var>| -> Result<f64> {
        let mut g = Graph::inference();
        let v = g.constant(o.clone());
        let out = f(&mut g, v)?;
        Ok(g.item(out))
    };
    let (fc, fg) = (term(0), term(1));
    let (lc, lg) = (value(&fc)?, value(&fg)?);
    let nc = numeric_gradient(&fc, o, STEP)?;
    let ng = numeric_gradient(&fg, o, STEP)?;
    let mut expected: Vec<f64> = nc
        .data()
        .iter()
        .zip(ng.data())
        .map(|(a, b)| a / lc + b / lg)
        .collect();
    if let Some((gamma, k, n)) = gamma_tcode {
        let (k, n) = (k.clone(), n.clone());
        let ft = move |g: &mut Graph, x: Var| -> Result<Var> {
            let (k, n) = (g.constant(k.clone()), g.constant(n.clone()));
            Ok(tcode_loss(g, x, k, n, EPS)?.sum)
        };
        let nt = numeric_gradient(&ft, o, STEP)?;
        for (e, t) in expected.iter_mut().zip(nt.data()) {
            *e += gamma * t;
        }
    }
    Ok(relative_error(&analytic, &Tensor::new(o.shape().to_vec(), expected)?))
}

/// Runs every loss on `instances` seeded random inputs.
pub fn loss_gradient_suite(instances: usize, seed: u64) -> Result<Vec<GradcheckRow>> {
    let mut rows = Vec::new();
    let mut run = |name: &'static str, f: &dyn Fn(u64) -> Result<f64>| -> Result<()> {
        let mut worst: f64 = 0.0;
        for i in 0..instances {
            worst = worst.max(f(derive(&[seed, tag(name), i as u64]))?);
        }
        rows.push(GradcheckRow { name, max_error: worst });
        Ok(())
    };

    run("framewise_l1cos", &|s| {
        let h = normal(s, 5, 8);
        let f = move |g: &mut Graph, x: Var| {
            let hv = g.constant(h.clone());
            framewise_l1cos(g, hv, x, 1.0, EPS)
        };
        grad_check(&f, &normal(s + 1, 5, 8), STEP)
    })?;
    run("utterance_l1cos", &|s| {
        let h = normal(s, 1, 8);
        let f = move |g: &mut Graph, x: Var| {
            let hv = g.constant(h.clone());
            utterance_l1cos(g, hv, x, 1.0, EPS)
        };
        grad_check(&f, &normal(s + 1, 1, 8), STEP)
    })?;
    run("feature_view", &|s| {
        let h = normal(s, 4, 3);
        let f = move |g: &mut Graph, x: Var| {
            let hv = g.constant(h.clone());
            let c = feature_view_corr(g, hv, x, EPS)?;
            feature_view_loss(g, c, ALPHA)
        };
        grad_check(&f, &normal(s + 1, 4, 3), STEP)
    })?;
    run("batch_view", &|s| {
        let h = normal(s, 3, 6);
        let f = move |g: &mut Graph, x: Var| {
            let hv = g.constant(h.clone());
            let m = batch_view_corr(g, hv, x, EPS)?;
            batch_view_loss(g, m, ALPHA)
        };
        grad_check(&f, &normal(s + 1, 3, 6), STEP)
    })?;
    run("dual_view", &|s| dvcc_term_error(&normal(s, 4, 5), &normal(s + 1, 4, 5), None))?;
    run("tcode", &|s| {
        let (k, n) = (normal(s, 3, 6), normal(s + 1, 3 * NEGATIVES, 6));
        let f = move |g: &mut Graph, x: Var| {
            let (kv, nv) = (g.constant(k.clone()), g.constant(n.clone()));
            Ok(tcode_loss(g, x, kv, nv, EPS)?.sum)
        };
        grad_check(&f, &normal(s + 2, 3, 6), STEP)
    })?;
    run("combined", &|s| {
        let (k, n) = (normal(s + 2, 4, 5), normal(s + 3, 4 * NEGATIVES, 5));
        dvcc_term_error(&normal(s, 4, 5), &normal(s + 1, 4, 5), Some((1.0, &k, &n)))
    })?;
    Ok(rows)
}
