use crate::config::PhaseConfig;
use crate::datagen::Corpus;
use crate::exec::Execution;
use crate::losses::{
    batch_view_term, dvcc_loss, feature_view_term, framewise_l1cos, tcode_loss, utterance_l1cos,
    DistillConfig, DistillVariant, LayerAggregator, LossRecord, NegativeSource,
};
use crate::models::{
    apply_span_mask, argmax, param_group, sample_negative_indices, MaskSpec, ParamGroup,
    StudentConfig, StudentModel, TeacherModel,
};
use crate::rng::derive;
use crate::tensor::{AdamState, GradMap, Graph, Module, Tensor, Var};
use crate::{Error, Result};

use super::{batch_indices, check_finite, optimizer_step, progress_entries, read_progress, sample_seed};

const PHASE: f64 = 1.0;

/// Student, layer aggregator and optimizer progress.
#[derive(Clone, Debug)]
pub struct DistillState {
    pub student: StudentModel,
    pub agg: LayerAggregator,
    pub adam: AdamState,
    pub epochs_done: usize,
}

impl DistillState {
    pub fn new(student: StudentConfig, layer_subset: &[usize], lr: f64) -> Result<Self> {
        Ok(Self {
            student: StudentModel::new(student),
            agg: LayerAggregator::new(layer_subset)?,
            adam: AdamState::new(lr),
            epochs_done: 0,
        })
    }

    pub fn to_entries(&self) -> Vec<(String, Tensor)> {
        let mut e = self.student.to_entries();
        e.push((
            "agg.subset".into(),
            Tensor::row(&self.agg.subset().iter().map(|&l| l as f64).collect::<Vec<_>>()),
        ));
        e.extend(self.agg.named_tensors());
        e.extend(self.adam.to_tensors("adam."));
        e.extend(progress_entries(PHASE, self.epochs_done));
        e
    }

    pub fn from_entries(entries: &[(String, Tensor)], lr: f64) -> Result<Self> {
        let student = StudentModel::from_entries(entries)?;
        let subset: Vec<usize> = entries
            .iter()
            .find(|(n, _)| n == "agg.subset")
            .ok_or_else(|| Error::format("checkpoint", "missing agg.subset"))?
            .1
            .data()
            .iter()
            .map(|&v| v as usize)
            .collect();
        let mut agg = LayerAggregator::new(&subset)?;
        agg.load_tensors(entries)?;
        Ok(Self {
            student,
            agg,
            adam: AdamState::from_tensors(lr, "adam.", entries)?,
            epochs_done: read_progress(entries, PHASE)?.unwrap_or(0),
        })
    }
}

/// Per-utterance teacher statistics, filled lazily: time-mean of every layer
/// (`[L+1, d_t]`) and the hard code index of every frame.
#[derive(Clone, Debug, Default)]
pub struct TeacherCache {
    means: Vec<Option<Tensor>>,
    codes: Vec<Option<Vec<usize>>>,
}

impl TeacherCache {
    pub fn new(n: usize) -> Self {
        Self {
            means: vec![None; n],
            codes: vec![None; n],
        }
    }

    /// Runs the teacher on every listed utterance not cached yet.
    pub fn fill(&mut self, teacher: &TeacherModel, corpus: &Corpus, idx: &[usize], exec: Execution) -> Result<()> {
        let mut missing: Vec<usize> = idx.iter().copied().filter(|&i| self.means[i].is_none()).collect();
        missing.sort_unstable();
        missing.dedup();
        let results = exec.map(missing.len(), |k| -> Result<(Tensor, Vec<usize>)> {
            let mut g = Graph::inference();
            let tr = teacher.trace(&mut g, corpus.utterances[missing[k]].features.frames(), None)?;
            let means: Vec<Tensor> = tr.layers.iter().map(|&l| g.value(l).mean_rows()).collect();
            let logits = g.value(tr.code_logits);
            let codes = (0..logits.dims2().0).map(|t| argmax(logits.row_slice(t))).collect();
            Ok((Tensor::vstack(&means)?, codes))
        });
        for (i, r) in missing.into_iter().zip(results) {
            let (m, c) = r?;
            self.means[i] = Some(m);
            self.codes[i] = Some(c);
        }
        Ok(())
    }

    pub fn means(&self, i: usize) -> &Tensor {
        self.means[i].as_ref().expect("teacher cache filled before use")
    }

    pub fn codes(&self, i: usize) -> &[usize] {
        self.codes[i].as_ref().expect("teacher cache filled before use")
    }
}

struct SampleOut {
    graph: Graph,
    view: Option<Var>,
    local: Option<Var>,
    tcode: Option<Var>,
}

/// Positive and negative codebook rows for the masked frames of one
/// utterance.
fn contrastive_targets(
    teacher: &TeacherModel,
    codes: &[usize],
    mask: &MaskSpec,
    cfg: &DistillConfig,
    seed: u64,
) -> Result<(Tensor, Tensor)> {
    let book = &teacher.codebook.value;
    let v = book.dims2().0;
    let idx = mask.indices();
    let pos: Vec<Tensor> = idx.iter().map(|&t| book.rows(codes[t], 1)).collect();
    let mut neg = Vec::with_capacity(idx.len() * cfg.negatives);
    for (r, &t) in idx.iter().enumerate() {
        let s = derive(&[seed, t as u64]);
        // other masked frames serve as negatives only when there are enough
        // of them; short utterances fall back to codebook sampling
        if cfg.negative_source == NegativeSource::OtherFrames && idx.len() > cfg.negatives {
            for k in sample_negative_indices(idx.len(), r, cfg.negatives, s)? {
                neg.push(book.rows(codes[idx[k]], 1));
            }
        } else {
            for k in sample_negative_indices(v, codes[t], cfg.negatives, s)? {
                neg.push(book.rows(k, 1));
            }
        }
    }
    Ok((Tensor::vstack(&pos)?, Tensor::vstack(&neg)?))
}

/// Layer-mean constants `[1, d_t]` (one per teacher layer) of utterance `i`.
fn mean_layers(g: &mut Graph, means: &Tensor) -> Vec<Var> {
    (0..means.dims2().0).map(|l| g.constant(means.rows(l, 1))).collect()
}

#[allow(clippy::too_many_arguments)]
fn sample_forward(
    state: &DistillState,
    teacher: &TeacherModel,
    cache: &TeacherCache,
    corpus: &Corpus,
    cfg: &DistillConfig,
    i: usize,
    seed: u64,
) -> Result<SampleOut> {
    let variant = cfg.variant;
    let student = &state.student;
    let x = corpus.utterances[i].features.frames();
    let mut g = Graph::new();
    let (mut view, mut local, mut tcode) = (None, None, None);
    match variant {
        DistillVariant::FramewiseL1Cos => {
            let mut tg = Graph::inference();
            let tr = teacher.trace(&mut tg, x, None)?;
            let layers: Vec<Var> = tr.layers.iter().map(|&l| g.constant(tg.value(l).clone())).collect();
            let h = state.agg.aggregate(&mut g, &layers)?;
            let hidden = student.encode(&mut g, x, None)?;
            let o = student.distill_projector.forward(&mut g, hidden)?;
            local = Some(framewise_l1cos(&mut g, h, o, cfg.lambda, cfg.epsilon_corr)?);
        }
        DistillVariant::UtteranceL1Cos => {
            let layers = mean_layers(&mut g, cache.means(i));
            let h = state.agg.aggregate(&mut g, &layers)?;
            let tr = student.trace(&mut g, x, None)?;
            local = Some(utterance_l1cos(&mut g, h, tr.distill_view, cfg.lambda, cfg.epsilon_corr)?);
        }
        DistillVariant::TcodeOnly => {}
        _ => {
            let tr = student.trace(&mut g, x, None)?;
            view = Some(tr.distill_view);
        }
    }
    if variant.uses_tcode() {
        let frames = x.dims2().0;
        let mask = apply_span_mask(frames, cfg.mask_prob, cfg.mask_span, seed)?;
        let (pos, neg) = contrastive_targets(teacher, cache.codes(i), &mask, cfg, seed)?;
        let preds = student.code_predictions(&mut g, x, &mask)?;
        let (pos, neg) = (g.constant(pos), g.constant(neg));
        tcode = Some(tcode_loss(&mut g, preds, pos, neg, cfg.epsilon_corr)?.mean);
    }
    Ok(SampleOut {
        graph: g,
        view,
        local,
        tcode,
    })
}

/// Batch-level view loss. Returns the record terms, the gradient with
/// respect to the stacked student views and the aggregator gradients.
fn batch_view_stage(
    state: &DistillState,
    cache: &TeacherCache,
    cfg: &DistillConfig,
    idx: &[usize],
    views: &[Tensor],
) -> Result<(Option<f64>, Option<f64>, f64, Tensor, GradMap)> {
    let mut g = Graph::new();
    let o = g.variable(Tensor::vstack(views)?);
    let num_layers = cache.means(idx[0]).dims2().0;
    let layers: Vec<Var> = (0..num_layers)
        .map(|l| {
            let rows: Vec<Tensor> = idx.iter().map(|&i| cache.means(i).rows(l, 1)).collect();
            Tensor::vstack(&rows).map(|t| g.constant(t))
        })
        .collect::<Result<_>>()?;
    let h = state.agg.aggregate(&mut g, &layers)?;
    let (l_c, l_g, total) = match cfg.variant {
        DistillVariant::FeatureView => {
            let (raw, norm) = feature_view_term(&mut g, h, o, cfg.alpha, cfg.epsilon_corr, cfg.epsilon_sg)?;
            (Some(g.item(raw)), None, norm)
        }
        DistillVariant::BatchView => {
            let (raw, norm) = batch_view_term(&mut g, h, o, cfg.beta, cfg.epsilon_corr, cfg.epsilon_sg)?;
            (None, Some(g.item(raw)), norm)
        }
        _ => {
            let d = dvcc_loss(&mut g, h, o, cfg.alpha, cfg.beta, cfg.epsilon_corr, cfg.epsilon_sg)?;
            (Some(g.item(d.l_c)), Some(g.item(d.l_g)), d.total)
        }
    };
    let value = g.item(total);
    let grads = g.backward(total)?;
    let d_o = grads
        .wrt(o)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(&[views.len(), views[0].numel()]));
    Ok((l_c, l_g, value, d_o, grads.params()))
}

fn distill_trainable(name: &str) -> bool {
    name.starts_with("agg.") || param_group(name) != ParamGroup::Classifier
}

/// Distills `teacher` into `state.student` on `corpus` until `phase.epochs`
/// epochs are done, calling `on_epoch` with the records so far after each.
/// The teacher is only read; its checksum is verified at the end. Returns one loss record per step.
#[allow(clippy::too_many_arguments)]
pub fn distill(
    corpus: &Corpus,
    teacher: &TeacherModel,
    cfg: &DistillConfig,
    phase: &PhaseConfig,
    seed: u64,
    state: &mut DistillState,
    exec: Execution,
    on_epoch: &mut dyn FnMut(&DistillState, &[LossRecord]) -> Result<()>,
) -> Result<Vec<LossRecord>> {
    cfg.validate(teacher.config().layers)?;
    if state.agg.subset() != cfg.layer_subset.as_slice() {
        return Err(Error::config(
            "distill.layers",
            "checkpoint aggregator subset differs from the configured one",
        ));
    }
    let variant = cfg.variant;
    if variant.is_batch_coupled() && phase.batch_size < 2 {
        return Err(Error::config("distill.batch_size", "batch-coupled losses need >= 2"));
    }
    let before = teacher.checksum();
    let mut cache = TeacherCache::new(corpus.len());
    let mut records = Vec::new();
    state.adam.lr = phase.lr;
    while state.epochs_done < phase.epochs {
        let epoch = state.epochs_done;
        for step in 0..phase.steps_per_epoch {
            let global = epoch * phase.steps_per_epoch + step;
            let idx = batch_indices(corpus.len(), phase.batch_size, seed, epoch, step);
            if variant != DistillVariant::FramewiseL1Cos {
                cache.fill(teacher, corpus, &idx, exec)?;
            }
            let b = idx.len() as f64;

            let outs = {
                let (st, ca) = (&*state, &cache);
                exec.map(idx.len(), |j| {
                    let s = sample_seed(seed, "distill-mask", epoch, step, j);
                    sample_forward(st, teacher, ca, corpus, cfg, idx[j], s)
                })
            };
            let outs: Vec<SampleOut> = outs.into_iter().collect::<Result<_>>()?;

            let mut record = LossRecord {
                step: global,
                variant,
                l_c: None,
                l_g: None,
                l_dvcc: None,
                l_tcode: None,
                total: 0.0,
            };
            let mut batch_grads = GradMap::default();
            let mut d_views = None;
            if variant.is_batch_coupled() {
                let views: Vec<Tensor> = outs
                    .iter()
                    .map(|o| o.graph.value(o.view.expect("view variants record a view")).clone())
                    .collect();
                let (l_c, l_g, value, d_o, grads) = batch_view_stage(state, &cache, cfg, &idx, &views)?;
                record.l_c = l_c;
                record.l_g = l_g;
                record.l_dvcc = Some(value);
                record.total = value;
                batch_grads = grads;
                d_views = Some(d_o);
            }
            let tcode_weight = match variant {
                DistillVariant::Combined => cfg.gamma,
                _ => 1.0,
            };
            if variant.uses_tcode() {
                let mean = outs.iter().map(|o| o.graph.item(o.tcode.expect("tcode"))).sum::<f64>() / b;
                record.l_tcode = Some(mean);
                record.total += tcode_weight * mean;
            }
            if outs[0].local.is_some() {
                record.total = outs.iter().map(|o| o.graph.item(o.local.expect("local"))).sum::<f64>() / b;
            }
            check_finite(record.total, global)?;

            let maps = exec.map(outs.len(), |j| {
                let o = &outs[j];
                let mut seeds = Vec::new();
                if let (Some(v), Some(d)) = (o.view, d_views.as_ref()) {
                    seeds.push((v, d.rows(j, 1)));
                }
                if let Some(t) = o.tcode {
                    seeds.push((t, Tensor::scalar(tcode_weight / b)));
                }
                if let Some(l) = o.local {
                    seeds.push((l, Tensor::scalar(1.0 / b)));
                }
                o.graph.backward_seeded(&seeds).map(|gr| gr.params())
            });
            let mut grads = batch_grads;
            for m in maps {
                grads.merge(m?);
            }
            let train_agg = variant.uses_teacher_features();
            let DistillState { student, agg, adam, .. } = state;
            optimizer_step(
                &mut [student as &mut dyn Module, agg as &mut dyn Module],
                &grads,
                1.0,
                &|n| distill_trainable(n) && (train_agg || !n.starts_with("agg.")),
                adam,
            )?;
            records.push(record);
        }
        state.epochs_done += 1;
        on_epoch(state, &records)?;
    }
    let after = teacher.checksum();
    if before != after {
        return Err(Error::ChecksumMismatch {
            what: "teacher".into(),
            expected: before,
            found: after,
        });
    }
    Ok(records)
}
