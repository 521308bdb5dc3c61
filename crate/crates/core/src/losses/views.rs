use crate::tensor::{Graph, Tensor, Var};
use crate::{Error, Result};

fn guarded_outer(g: &mut Graph, left: Var, right_t: Var, eps: f64) -> Result<Var> {
    let l = g.clamp_min(left, eps);
    let r = g.clamp_min(right_t, eps);
    g.matmul(l, r)
}

/// Feature-view cross-correlation `C [d, d]` with
/// `C_ij = Σ_b H_bi O_bj / (‖H_:,i‖·‖O_:,j‖)`, each norm floored at `eps`.
pub fn feature_view_corr(g: &mut Graph, h: Var, o: Var, eps: f64) -> Result<Var> {
    if g.shape(h) != g.shape(o) {
        return Err(Error::Shape {
            op: "feature_view_corr",
            lhs: g.shape(h).to_vec(),
            rhs: g.shape(o).to_vec(),
        });
    }
    let ht = g.transpose(h);
    let ot = g.transpose(o);
    let num = g.matmul(ht, o)?;
    let nh = g.l2_norm_rows(ht);
    let no = g.l2_norm_rows(ot);
    let no_t = g.transpose(no);
    let den = guarded_outer(g, nh, no_t, eps)?;
    g.div(num, den)
}

/// Batch-view similarity `G [b, b]`: cosine between rows of `H` and `O`.
pub fn batch_view_corr(g: &mut Graph, h: Var, o: Var, eps: f64) -> Result<Var> {
    if g.shape(h) != g.shape(o) {
        return Err(Error::Shape {
            op: "batch_view_corr",
            lhs: g.shape(h).to_vec(),
            rhs: g.shape(o).to_vec(),
        });
    }
    let num = g.matmul_nt(h, o)?;
    let nh = g.l2_norm_rows(h);
    let no = g.l2_norm_rows(o);
    let no_t = g.transpose(no);
    let den = guarded_outer(g, nh, no_t, eps)?;
    g.div(num, den)
}

/// `Σ_i (M_ii − 1)² + w·Σ_{i≠j} M_ij²` for a square matrix.
pub fn view_loss(g: &mut Graph, m: Var, off_weight: f64) -> Result<Var> {
    let (r, c) = g.value(m).dims2();
    if r != c {
        return Err(Error::invalid(format!("view loss needs a square matrix, got {r}x{c}")));
    }
    let eye = g.constant(Tensor::identity(r));
    let diag = g.mul(m, eye)?;
    let off = g.sub(m, diag)?;
    let dev = g.sub(diag, eye)?;
    let dev = g.square(dev);
    let on = g.sum_all(dev);
    let off = g.square(off);
    let off = g.sum_all(off);
    let off = g.scale(off, off_weight);
    g.add(on, off)
}

pub fn feature_view_loss(g: &mut Graph, c: Var, alpha: f64) -> Result<Var> {
    view_loss(g, c, alpha)
}

pub fn batch_view_loss(g: &mut Graph, gm: Var, beta: f64) -> Result<Var> {
    view_loss(g, gm, beta)
}

/// The two raw view losses and their self-normalized sum.
#[derive(Clone, Copy, Debug)]
pub struct DvccLoss {
    pub l_c: Var,
    pub l_g: Var,
    pub total: Var,
}

/// `x / sg(x)`, or `x` itself once `x` drops below `eps_sg`.
fn self_normalize(g: &mut Graph, x: Var, eps_sg: f64) -> Result<Var> {
    if g.item(x) < eps_sg {
        return Ok(x);
    }
    let s = g.stop_gradient(x);
    g.div(x, s)
}

/// Dual-view loss `L_C/sg(L_C) + L_G/sg(L_G)`.
pub fn dvcc_loss(
    g: &mut Graph,
    h: Var,
    o: Var,
    alpha: f64,
    beta: f64,
    eps_corr: f64,
    eps_sg: f64,
) -> Result<DvccLoss> {
    let (b, d) = g.value(h).dims2();
    if b < 2 || d < 2 {
        return Err(Error::invalid(format!("dvcc loss needs b, d >= 2, got b={b} d={d}")));
    }
    let c = feature_view_corr(g, h, o, eps_corr)?;
    let l_c = feature_view_loss(g, c, alpha)?;
    let gm = batch_view_corr(g, h, o, eps_corr)?;
    let l_g = batch_view_loss(g, gm, beta)?;
    let nc = self_normalize(g, l_c, eps_sg)?;
    let ng = self_normalize(g, l_g, eps_sg)?;
    let total = g.add(nc, ng)?;
    Ok(DvccLoss { l_c, l_g, total })
}

/// Feature-view loss alone: `(L_C, L_C/sg(L_C))`.
pub fn feature_view_term(
    g: &mut Graph,
    h: Var,
    o: Var,
    alpha: f64,
    eps_corr: f64,
    eps_sg: f64,
) -> Result<(Var, Var)> {
    let c = feature_view_corr(g, h, o, eps_corr)?;
    let l = feature_view_loss(g, c, alpha)?;
    Ok((l, self_normalize(g, l, eps_sg)?))
}

/// Batch-view loss alone: `(L_G, L_G/sg(L_G))`.
pub fn batch_view_term(
    g: &mut Graph,
    h: Var,
    o: Var,
    beta: f64,
    eps_corr: f64,
    eps_sg: f64,
) -> Result<(Var, Var)> {
    let gm = batch_view_corr(g, h, o, eps_corr)?;
    let l = batch_view_loss(g, gm, beta)?;
    Ok((l, self_normalize(g, l, eps_sg)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;

    const EPS: f64 = 1e-9;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn corr(f: fn(&mut Graph, Var, Var, f64) -> Result<Var>, h: &Tensor, o: &Tensor) -> Tensor {
        let mut g = Graph::inference();
        let (h, o) = (g.constant(h.clone()), g.constant(o.clone()));
        let c = f(&mut g, h, o, EPS).unwrap();
        g.value(c).clone()
    }

    #[test]
    fn worked_examples() {
        let x = m(&[&[1.0, 0.0], &[1.0, 1.0]]);
        let r = std::f64::consts::FRAC_1_SQRT_2;
        for c in [corr(feature_view_corr, &x, &x), corr(batch_view_corr, &x, &x)] {
            let want = [1.0, r, r, 1.0];
            for (a, b) in c.data().iter().zip(want) {
                assert!((a - b).abs() < 1e-8);
            }
            let mut g = Graph::inference();
            let cv = g.constant(c);
            let l = view_loss(&mut g, cv, 5e-3).unwrap();
            assert!((g.item(l) - 5.0e-3).abs() < 1e-12, "{}", g.item(l));
        }
        let eye = Tensor::identity(2);
        assert_eq!(corr(feature_view_corr, &eye, &eye).data(), eye.data());
        assert_eq!(corr(batch_view_corr, &eye, &eye).data(), eye.data());
    }

    #[test]
    fn dvcc_is_two_and_guard_gives_zero() {
        let h = m(&[&[0.3, -1.0, 2.0], &[1.5, 0.2, -0.7], &[0.1, 0.9, 0.4]]);
        let o = m(&[&[1.3, 0.4, -0.2], &[-0.5, 1.2, 0.7], &[0.8, -0.3, 1.1]]);
        let mut g = Graph::inference();
        let (hv, ov) = (g.constant(h), g.constant(o));
        let l = dvcc_loss(&mut g, hv, ov, 5e-3, 5e-3, EPS, 1e-12).unwrap();
        assert!((g.item(l.total) - 2.0).abs() < 1e-9);

        let eye = Tensor::identity(2);
        let (hv, ov) = (g.constant(eye.clone()), g.constant(eye));
        let l = dvcc_loss(&mut g, hv, ov, 5e-3, 5e-3, EPS, 1e-12).unwrap();
        assert!(g.item(l.total).abs() < 1e-12);
    }

    #[test]
    fn dvcc_rejects_degenerate_batches() {
        let mut g = Graph::inference();
        let h = g.constant(m(&[&[1.0, 2.0]]));
        assert!(dvcc_loss(&mut g, h, h, 5e-3, 5e-3, EPS, 1e-12).is_err());
    }

    #[test]
    fn composite_gradients() {
        let h = Tensor::new(vec![4, 3], (0..12).map(|i| ((i * 7 % 11) as f64) / 4.0 - 1.2).collect()).unwrap();
        let o = Tensor::new(vec![4, 3], (0..12).map(|i| ((i * 5 % 13) as f64) / 5.0 - 1.1).collect()).unwrap();
        let err = grad_check(
            &|g: &mut Graph, x: Var| {
                let o = g.constant(o.clone());
                let c = feature_view_corr(g, x, o, EPS)?;
                feature_view_loss(g, c, 5e-3)
            },
            &h,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
