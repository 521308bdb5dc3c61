use crate::tensor::{Axis, Graph, Var};
use crate::{Error, Result};

/// Summed and per-frame-mean contrastive loss.
#[derive(Clone, Copy, Debug)]
pub struct TcodeLoss {
    pub sum: Var,
    pub mean: Var,
}

/// `−Σ_t log[exp(cos(o_t, k_t)) / Σ_{k̃ ∈ K_t} exp(cos(o_t, k̃))]` with
/// `K_t` the positive plus its negatives.
///
/// `predictions` and `positives` are `[n, d]`; `negatives` is `[n·N, d]`
/// holding the `N` negatives of frame `t` in rows `t·N .. (t+1)·N`.
pub fn tcode_loss(g: &mut Graph, predictions: Var, positives: Var, negatives: Var, eps: f64) -> Result<TcodeLoss> {
    let (n, d) = g.value(predictions).dims2();
    if g.value(positives).dims2() != (n, d) {
        return Err(Error::Shape {
            op: "tcode_loss",
            lhs: g.shape(predictions).to_vec(),
            rhs: g.shape(positives).to_vec(),
        });
    }
    let (rows, nd) = g.value(negatives).dims2();
    if n == 0 || nd != d || rows == 0 || rows % n != 0 {
        return Err(Error::invalid(format!(
            "tcode_loss: {n} frames of width {d} with negatives [{rows}, {nd}]"
        )));
    }
    let k = rows / n;
    let stacked = g.concat(&[positives, negatives], Axis::Rows)?;
    let mut cand_idx = Vec::with_capacity(n * (k + 1));
    let mut pred_idx = Vec::with_capacity(n * (k + 1));
    for t in 0..n {
        cand_idx.push(t);
        cand_idx.extend((0..k).map(|j| n + t * k + j));
        pred_idx.extend(std::iter::repeat_n(t, k + 1));
    }
    let cands = g.gather_rows(stacked, &cand_idx)?;
    let preds = g.gather_rows(predictions, &pred_idx)?;
    let cos = g.cosine_rows(preds, cands, eps)?;
    let cos = g.reshape(cos, &[n, k + 1])?;
    let pos = g.slice(cos, Axis::Cols, 0, 1)?;
    let e = g.exp(cos);
    let z = g.sum(e, Axis::Cols);
    let lz = g.log(z);
    let per_t = g.sub(lz, pos)?;
    let sum = g.sum_all(per_t);
    let mean = g.scale(sum, 1.0 / n as f64);
    Ok(TcodeLoss { sum, mean })
}
