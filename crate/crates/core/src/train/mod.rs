//! Teacher pretraining, distillation and fine-tuning loops.
//!
//! Every step follows the same pattern: one autodiff graph per sample, built
//! and differentiated through [`Execution`](crate::exec::Execution), then
//! per-sample parameter gradients summed in batch order. Losses that couple
//! samples (the correlation views) add a second, batch-level graph whose
//! gradient with respect to the stacked student views seeds the per-sample
//! backward passes. Batches, masks and negatives are pure functions of
//! `(seed, epoch, step, sample)`, so runs are reproducible and resumable.

mod distill;
mod finetune;
mod teacher;

pub use distill::{distill, DistillState, TeacherCache};
pub use finetune::{bce_with_logit, finetune, FinetuneRecord, FinetuneState};
pub use teacher::{pretrain_teacher, teacher_sample_loss, TeacherState};

use rand::seq::SliceRandom;

use crate::rng::{derive, rng_for, tag};
use crate::tensor::{AdamState, GradMap, Module, Tensor};
use crate::{Error, Result};

/// Indices of the `step`-th batch of `epoch`: consecutive positions of a
/// seeded per-epoch permutation, wrapping around the corpus.
pub fn batch_indices(n: usize, batch: usize, seed: u64, epoch: usize, step: usize) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng_for(&[seed, tag("epoch"), epoch as u64]));
    (0..batch).map(|j| perm[(step * batch + j) % n]).collect()
}

/// Seed for per-sample randomness (masks, negatives).
pub fn sample_seed(seed: u64, phase: &str, epoch: usize, step: usize, sample: usize) -> u64 {
    derive(&[seed, tag(phase), epoch as u64, step as u64, sample as u64])
}

/// One Adam step over the parameters of `modules` selected by `trainable`,
/// using `scale · grads`. Selected parameters without a gradient get a zero
/// gradient, so the trainable set never depends on which terms were active.
pub fn optimizer_step(
    modules: &mut [&mut dyn Module],
    grads: &GradMap,
    scale: f64,
    trainable: &dyn Fn(&str) -> bool,
    adam: &mut AdamState,
) -> Result<()> {
    adam.advance();
    let mut err = None;
    for m in modules.iter_mut() {
        m.visit_params_mut(&mut |p| {
            if err.is_some() || !trainable(p.name()) {
                return;
            }
            let g: Vec<f64> = match grads.get(p.name()) {
                Some(t) => t.data().iter().map(|v| v * scale).collect(),
                None => vec![0.0; p.value.numel()],
            };
            if let Err(e) = adam.update(p, &g) {
                err = Some(e);
            }
        });
    }
    err.map_or(Ok(()), Err)
}

/// Bookkeeping tensors appended to training checkpoints.
pub(crate) fn progress_entries(phase: f64, epochs_done: usize) -> Vec<(String, Tensor)> {
    vec![
        ("train.phase".into(), Tensor::scalar(phase)),
        ("train.epochs_done".into(), Tensor::scalar(epochs_done as f64)),
    ]
}

pub(crate) fn read_progress(entries: &[(String, Tensor)], phase: f64) -> Result<Option<usize>> {
    let find = |k: &str| entries.iter().find(|(n, _)| n == k).map(|(_, t)| t.item());
    match (find("train.phase"), find("train.epochs_done")) {
        (Some(p), Some(e)) if p == phase => Ok(Some(e as usize)),
        (Some(_), Some(_)) | (None, None) => Ok(None),
        _ => Err(Error::format("checkpoint", "incomplete training progress entries")),
    }
}

pub(crate) fn check_finite(loss: f64, step: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss { step })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_are_pure_and_cover_the_epoch() {
        let a = batch_indices(10, 4, 3, 1, 2);
        assert_eq!(a, batch_indices(10, 4, 3, 1, 2));
        assert_ne!(batch_indices(10, 4, 3, 0, 0), batch_indices(10, 4, 3, 1, 0));
        let mut seen: Vec<usize> = (0..5).flat_map(|s| batch_indices(10, 2, 3, 0, s)).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn progress_roundtrip() {
        let e = progress_entries(2.0, 5);
        assert_eq!(read_progress(&e, 2.0).unwrap(), Some(5));
        assert_eq!(read_progress(&e, 1.0).unwrap(), None);
        assert_eq!(read_progress(&[], 1.0).unwrap(), None);
    }
}
