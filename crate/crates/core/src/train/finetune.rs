use crate::config::{FinetuneMode, PhaseConfig};
use crate::datagen::Corpus;
use crate::exec::Execution;
use crate::models::{param_group, ParamGroup, StudentModel};
use crate::tensor::{AdamState, GradMap, Graph, Module, Tensor, Var};
use crate::Result;

use super::{batch_indices, check_finite, optimizer_step, progress_entries, read_progress};

const PHASE: f64 = 2.0;

#[derive(Clone, Debug)]
pub struct FinetuneState {
    pub student: StudentModel,
    pub adam: AdamState,
    pub epochs_done: usize,
}

impl FinetuneState {
    /// Fresh optimizer state around an initial student.
    pub fn new(student: StudentModel, lr: f64) -> Self {
        Self {
            student,
            adam: AdamState::new(lr),
            epochs_done: 0,
        }
    }

    /// Student weights only; distillation heads and optimizer state are
    /// left out of the deployable model.
    pub fn model_entries(&self) -> Vec<(String, Tensor)> {
        self.student.to_entries()
    }

    pub fn to_entries(&self) -> Vec<(String, Tensor)> {
        let mut e = self.student.to_entries();
        e.extend(self.adam.to_tensors("adam."));
        e.extend(progress_entries(PHASE, self.epochs_done));
        e
    }

    /// Resumes a fine-tuning checkpoint, or starts fresh from any student
    /// checkpoint (for instance a distilled one).
    pub fn from_entries(entries: &[(String, Tensor)], lr: f64) -> Result<Self> {
        let student = StudentModel::from_entries(entries)?;
        Ok(match read_progress(entries, PHASE)? {
            Some(done) => Self {
                student,
                adam: AdamState::from_tensors(lr, "adam.", entries)?,
                epochs_done: done,
            },
            None => Self::new(student, lr),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FinetuneRecord {
    pub step: usize,
    pub loss: f64,
    pub accuracy: f64,
}

impl FinetuneRecord {
    pub const CSV_HEADER: &'static str = "step,loss,accuracy";

    pub fn csv_line(&self) -> String {
        format!("{},{:.17e},{:.17e}", self.step, self.loss, self.accuracy)
    }
}

/// Binary cross-entropy of a `[1, 1]` logit against a 0/1 target, in the
/// overflow-free form `max(z, 0) − z·y + ln(1 + e^{−|z|})`.
pub fn bce_with_logit(g: &mut Graph, z: Var, target: f64) -> Result<Var> {
    let relu = g.clamp_min(z, 0.0);
    let zy = g.scale(z, target);
    let a = g.abs(z);
    let na = g.scale(a, -1.0);
    let e = g.exp(na);
    let e1 = g.add_scalar(e, 1.0);
    let soft = g.log(e1);
    let lin = g.sub(relu, zy)?;
    let out = g.add(lin, soft)?;
    Ok(g.sum_all(out))
}

fn trainable(mode: FinetuneMode) -> impl Fn(&str) -> bool {
    move |name| match param_group(name) {
        ParamGroup::Classifier => true,
        ParamGroup::Backbone => mode == FinetuneMode::Whole,
        ParamGroup::MaskEmbedding | ParamGroup::DistillHeads => false,
    }
}

/// Supervised keyword training with a single-logit BCE head on the pooled
/// final hidden states.
pub fn finetune(
    corpus: &Corpus,
    phase: &PhaseConfig,
    mode: FinetuneMode,
    seed: u64,
    state: &mut FinetuneState,
    exec: Execution,
    on_epoch: &mut dyn FnMut(&FinetuneState, &[FinetuneRecord]) -> Result<()>,
) -> Result<Vec<FinetuneRecord>> {
    let mut records = Vec::new();
    let select = trainable(mode);
    state.adam.lr = phase.lr;
    while state.epochs_done < phase.epochs {
        let epoch = state.epochs_done;
        for step in 0..phase.steps_per_epoch {
            let global = epoch * phase.steps_per_epoch + step;
            let idx = batch_indices(corpus.len(), phase.batch_size, seed, epoch, step);
            let student = &state.student;
            let outs = exec.map(idx.len(), |j| -> Result<(f64, bool, GradMap)> {
                let u = &corpus.utterances[idx[j]];
                let y = if u.label.is_keyword() { 1.0 } else { 0.0 };
                let mut g = Graph::new();
                let z = student.logit(&mut g, u.features.frames())?;
                let loss = bce_with_logit(&mut g, z, y)?;
                let correct = (g.item(z) >= 0.0) == u.label.is_keyword();
                Ok((g.item(loss), correct, g.backward(loss)?.params()))
            });
            let (mut loss, mut hits, mut maps) = (0.0, 0usize, Vec::with_capacity(idx.len()));
            for o in outs {
                let (l, c, m) = o?;
                loss += l;
                hits += c as usize;
                maps.push(m);
            }
            let b = idx.len() as f64;
            check_finite(loss / b, global)?;
            optimizer_step(
                &mut [&mut state.student as &mut dyn Module],
                &GradMap::sum(maps),
                1.0 / b,
                &select,
                &mut state.adam,
            )?;
            records.push(FinetuneRecord {
                step: global,
                loss: loss / b,
                accuracy: hits as f64 / b,
            });
        }
        state.epochs_done += 1;
        on_epoch(state, &records)?;
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bce_matches_direct_formula() {
        for (z, y) in [(0.3, 1.0), (-2.0, 0.0), (40.0, 0.0), (-40.0, 1.0), (0.0, 1.0)] {
            let mut g = Graph::inference();
            let zv = g.constant(Tensor::full(&[1, 1], z));
            let l = bce_with_logit(&mut g, zv, y).unwrap();
            let z: f64 = z;
            let want = y * (-z).exp().ln_1p() + (1.0 - y) * z.exp().ln_1p();
            assert!((g.item(l) - want).abs() < 1e-9 * want.max(1.0), "{z} {y}");
        }
    }

    #[test]
    fn group_selection() {
        let whole = trainable(FinetuneMode::Whole);
        let probe = trainable(FinetuneMode::LinearProbe);
        assert!(whole("student.blocks.0.attn.query.weight"));
        assert!(!probe("student.blocks.0.attn.query.weight"));
        assert!(probe("student.classifier.bias"));
        assert!(!whole("student.distill_projector.weight"));
        assert!(!whole("student.mask_embedding"));
    }
}
