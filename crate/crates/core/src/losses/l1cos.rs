use crate::tensor::{Graph, Var};
use crate::Result;

/// `Σ_t ‖h_t − o_t‖₁ − λ·σ(cos(h_t, o_t))` over matching rows.
pub fn framewise_l1cos(g: &mut Graph, h: Var, o: Var, lambda: f64, eps: f64) -> Result<Var> {
    let diff = g.sub(h, o)?;
    let l1 = g.l1_norm_rows(diff);
    let cos = g.cosine_rows(h, o, eps)?;
    let sig = g.sigmoid(cos);
    let sig = g.scale(sig, lambda);
    let per_row = g.sub(l1, sig)?;
    Ok(g.sum_all(per_row))
}

/// The single-row case on time-averaged vectors `[1, d]`.
pub fn utterance_l1cos(g: &mut Graph, h_bar: Var, o_bar: Var, lambda: f64, eps: f64) -> Result<Var> {
    if g.shape(h_bar)[0] != 1 {
        return Err(crate::Error::invalid("utterance_l1cos expects [1, d] inputs"));
    }
    framewise_l1cos(g, h_bar, o_bar, lambda, eps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, Tensor};

    const EPS: f64 = 1e-9;

    fn eval(h: &[Vec<f64>], o: &[Vec<f64>], lambda: f64) -> f64 {
        let mut g = Graph::inference();
        let h = g.constant(Tensor::from_rows(h).unwrap());
        let o = g.constant(Tensor::from_rows(o).unwrap());
        let l = framewise_l1cos(&mut g, h, o, lambda, EPS).unwrap();
        g.item(l)
    }

    #[test]
    fn closed_forms() {
        let u = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert!((eval(&u, &u, 1.0) + 1.46211716).abs() < 1e-8);
        assert!((eval(&[vec![1.0, 0.0]], &[vec![0.0, 1.0]], 0.0) - 2.0).abs() < 1e-15);
        assert!((eval(&[vec![1.0, 0.0]], &[vec![1.0, 0.0]], 1.0) + 0.73105858).abs() < 1e-8);
        assert!((eval(&[vec![1.0, 0.0]], &[vec![-1.0, 0.0]], 1.0) - 1.73105858).abs() < 1e-8);
    }

    #[test]
    fn zero_rows_are_guarded() {
        let v = eval(&[vec![0.0, 0.0]], &[vec![1.0, 0.0]], 1.0);
        assert!((v - 0.5).abs() < 1e-12);
    }

    #[test]
    fn gradients() {
        let o = Tensor::new(vec![5, 8], (0..40).map(|i| ((i * 7 % 11) as f64) / 5.0 - 1.0).collect()).unwrap();
        let h = Tensor::new(vec![5, 8], (0..40).map(|i| ((i * 5 % 13) as f64) / 6.0 - 1.0).collect()).unwrap();
        let err = grad_check(
            &|g: &mut Graph, x: Var| {
                let o = g.constant(o.clone());
                framewise_l1cos(g, x, o, 1.0, EPS)
            },
            &h,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
