use crate::config::TeacherTrainConfig;
use crate::datagen::Corpus;
use crate::exec::Execution;
use crate::losses::tcode_loss;
use crate::models::{apply_span_mask, argmax, sample_negative_indices, TeacherConfig, TeacherModel};
use crate::rng::derive;
use crate::tensor::{AdamState, Axis, GradMap, Graph, Module, Tensor, Var};
use crate::Result;

use super::{batch_indices, check_finite, optimizer_step, progress_entries, read_progress, sample_seed};

const PHASE: f64 = 0.0;
const EPS: f64 = 1e-9;

/// Teacher plus optimizer progress, checkpointable at epoch boundaries.
#[derive(Clone, Debug)]
pub struct TeacherState {
    pub teacher: TeacherModel,
    pub adam: AdamState,
    pub epochs_done: usize,
}

impl TeacherState {
    pub fn new(config: TeacherConfig, lr: f64) -> Self {
        Self {
            teacher: TeacherModel::new(config),
            adam: AdamState::new(lr),
            epochs_done: 0,
        }
    }

    pub fn to_entries(&self) -> Vec<(String, Tensor)> {
        let mut e = self.teacher.to_entries();
        e.extend(self.adam.to_tensors("adam."));
        e.extend(progress_entries(PHASE, self.epochs_done));
        e
    }

    /// Restores a state; a frozen teacher checkpoint without progress entries
    /// counts as fully trained.
    pub fn from_entries(entries: &[(String, Tensor)], lr: f64) -> Result<Self> {
        let teacher = TeacherModel::from_entries(entries)?;
        let epochs_done = read_progress(entries, PHASE)?.unwrap_or(usize::MAX);
        Ok(Self {
            teacher,
            adam: AdamState::from_tensors(lr, "adam.", entries)?,
            epochs_done,
        })
    }
}

/// Masked-prediction loss of one utterance against the teacher's own
/// codebook: context vectors at masked frames must pick out the
/// straight-through quantized code of the unmasked conv output among
/// sampled codebook negatives. A batch-entropy penalty on the code
/// distribution keeps codes from collapsing.
pub fn teacher_sample_loss(
    teacher: &TeacherModel,
    g: &mut Graph,
    features: &Tensor,
    cfg: &TeacherTrainConfig,
    seed: u64,
) -> Result<Var> {
    let (frames, _) = features.dims2();
    let mask = apply_span_mask(frames, cfg.mask_prob, cfg.mask_span, seed)?;
    let trace = teacher.trace(g, features, Some(&mask))?;
    let last = *trace.layers.last().expect("at least the conv layer");
    let ctx = g.gather_rows(last, mask.indices())?;
    let preds = teacher.context_projector.forward(g, ctx)?;

    let soft = g.softmax(trace.code_logits);
    let logits = g.value(trace.code_logits).clone();
    let v = logits.dims2().1;
    let mut hard = vec![0.0; mask.indices().len() * v];
    let mut negatives = Vec::new();
    for (r, &t) in mask.indices().iter().enumerate() {
        let code = argmax(logits.row_slice(t));
        hard[r * v + code] = 1.0;
        negatives.extend(sample_negative_indices(v, code, cfg.negatives, derive(&[seed, t as u64]))?);
    }
    let hard = g.constant(Tensor::new(vec![mask.indices().len(), v], hard)?);
    let soft_m = g.gather_rows(soft, mask.indices())?;
    let soft_sg = g.stop_gradient(soft_m);
    let st = g.sub(soft_m, soft_sg)?;
    let q = g.add(hard, st)?;
    let codebook = g.param(&teacher.codebook);
    let positives = g.matmul(q, codebook)?;
    let negatives = g.gather_rows(codebook, &negatives)?;
    let contrast = tcode_loss(g, preds, positives, negatives, EPS)?.mean;

    if cfg.diversity_weight == 0.0 {
        return Ok(contrast);
    }
    let usage = g.mean(soft, Axis::Rows);
    let log_usage = g.log(usage);
    let plogp = g.mul(usage, log_usage)?;
    let neg_entropy = g.sum_all(plogp);
    let penalty = g.add_scalar(neg_entropy, (v as f64).ln());
    let penalty = g.scale(penalty, cfg.diversity_weight);
    g.add(contrast, penalty)
}

/// Trains the teacher on `corpus` from `state` until `cfg.phase.epochs`,
/// calling `on_epoch` with the losses so far after each epoch. Returns the
/// per-step mean losses of the epochs run here. The caller freezes the teacher afterwards.
pub fn pretrain_teacher(
    corpus: &Corpus,
    cfg: &TeacherTrainConfig,
    seed: u64,
    state: &mut TeacherState,
    exec: Execution,
    on_epoch: &mut dyn FnMut(&TeacherState, &[f64]) -> Result<()>,
) -> Result<Vec<f64>> {
    let phase = &cfg.phase;
    let n = corpus.len();
    let mut losses = Vec::new();
    state.adam.lr = phase.lr;
    while state.epochs_done < phase.epochs {
        let epoch = state.epochs_done;
        for step in 0..phase.steps_per_epoch {
            let global = epoch * phase.steps_per_epoch + step;
            let idx = batch_indices(n, phase.batch_size, seed, epoch, step);
            let teacher = &state.teacher;
            let outs = exec.map(idx.len(), |j| -> Result<(f64, GradMap)> {
                let mut g = Graph::new();
                let s = sample_seed(seed, "teacher-mask", epoch, step, j);
                let loss = teacher_sample_loss(teacher, &mut g, corpus.utterances[idx[j]].features.frames(), cfg, s)?;
                Ok((g.item(loss), g.backward(loss)?.params()))
            });
            let mut total = 0.0;
            let mut maps = Vec::with_capacity(outs.len());
            for o in outs {
                let (l, m) = o?;
                total += l;
                maps.push(m);
            }
            let mean = total / idx.len() as f64;
            check_finite(mean, global)?;
            let grads = GradMap::sum(maps);
            optimizer_step(
                &mut [&mut state.teacher as &mut dyn Module],
                &grads,
                1.0 / idx.len() as f64,
                &|_| true,
                &mut state.adam,
            )?;
            losses.push(mean);
        }
        state.epochs_done += 1;
        on_epoch(state, &losses)?;
    }
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_teacher() -> TeacherModel {
        TeacherModel::new(TeacherConfig {
            width: 8,
            layers: 1,
            heads: 2,
            codebook_size: 6,
            code_dim: 4,
            seed: 2,
        })
    }

    #[test]
    fn sample_loss_is_finite_and_deterministic() {
        let t = small_teacher();
        let x = Tensor::new(vec![12, 64], (0..768).map(|i| ((i * 31 % 97) as f64) / 20.0 - 2.0).collect()).unwrap();
        let cfg = TeacherTrainConfig {
            mask_prob: 0.2,
            mask_span: 2,
            negatives: 3,
            ..TeacherTrainConfig::default()
        };
        let eval = || {
            let mut g = Graph::new();
            let l = teacher_sample_loss(&t, &mut g, &x, &cfg, 5).unwrap();
            let grads = g.backward(l).unwrap().params();
            (g.item(l), grads)
        };
        let (a, ga) = eval();
        let (b, gb) = eval();
        assert!(a.is_finite() && a > 0.0);
        assert_eq!(a.to_bits(), b.to_bits());
        assert_eq!(ga, gb);
        assert!(ga.get("teacher.codebook").is_some());
        assert!(ga.get("teacher.context_projector.weight").is_some());
        assert!(ga.get("teacher.code_projector.weight").is_some());
    }

    #[test]
    fn context_gradient_matches_finite_differences() {
        let t = small_teacher();
        let x = Tensor::new(vec![10, 64], (0..640).map(|i| ((i * 17 % 89) as f64) / 30.0 - 1.5).collect()).unwrap();
        let cfg = TeacherTrainConfig {
            mask_prob: 0.3,
            mask_span: 2,
            negatives: 2,
            diversity_weight: 0.0,
            ..TeacherTrainConfig::default()
        };
        let w = t.context_projector.weight.value.clone();
        let loss_at = |wv: &Tensor| {
            let mut tt = t.clone();
            tt.context_projector.weight.value = wv.clone();
            let mut g = Graph::new();
            let l = teacher_sample_loss(&tt, &mut g, &x, &cfg, 9).unwrap();
            g.item(l)
        };
        let mut g = Graph::new();
        let l = teacher_sample_loss(&t, &mut g, &x, &cfg, 9).unwrap();
        let analytic = g.backward(l).unwrap().params();
        let analytic = analytic.get("teacher.context_projector.weight").unwrap();
        let h = 1e-5;
        for k in [0, 5, 17, 30] {
            let mut plus = w.clone();
            plus.data_mut()[k] += h;
            let mut minus = w.clone();
            minus.data_mut()[k] -= h;
            let numeric = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
            let a = analytic.data()[k];
            assert!((a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0) < 1e-4, "{a} vs {numeric}");
        }
    }
}
