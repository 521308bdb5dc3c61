//! Scoring, FRR/FAR at thresholds, operating-point selection, relative FAR,
//! DET sweeps and layer-weight export.
//!
//! A trial is accepted iff its score is at least the threshold. Rates are
//! `FRR = FN / positives` and `FAR = FP / negatives`.

use serde_json::{json, Value};

use crate::datagen::{Condition, Corpus, Label};
use crate::exec::Execution;
use crate::losses::LayerAggregator;
use crate::models::StudentModel;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Trial {
    pub id: u64,
    pub score: f64,
    pub label: Label,
    pub condition: Condition,
}

/// Confusion counts and rates at one threshold.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rates {
    pub threshold: f64,
    pub frr: f64,
    pub far: f64,
    pub tp: usize,
    pub fn_: usize,
    pub fp: usize,
    pub tn: usize,
}

/// One trial per utterance, ordered by utterance id.
pub fn score_corpus(model: &StudentModel, corpus: &Corpus, exec: Execution) -> Result<Vec<Trial>> {
    let scores = exec.map_slice(&corpus.utterances, |u| model.score(&u.features));
    let mut trials = Vec::with_capacity(corpus.len());
    for (u, s) in corpus.utterances.iter().zip(scores) {
        let score = s?;
        if !score.is_finite() {
            return Err(Error::NonFinite(format!("score of utterance {}", u.id)));
        }
        trials.push(Trial {
            id: u.id,
            score,
            label: u.label,
            condition: u.condition,
        });
    }
    trials.sort_by_key(|t| t.id);
    Ok(trials)
}

pub fn filter_condition(trials: &[Trial], condition: Condition) -> Vec<Trial> {
    trials.iter().copied().filter(|t| t.condition == condition).collect()
}

fn split_scores(trials: &[Trial]) -> Result<(Vec<f64>, Vec<f64>)> {
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for t in trials {
        if t.label.is_keyword() {
            pos.push(t.score);
        } else {
            neg.push(t.score);
        }
    }
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::invalid(format!(
            "rates need positive and negative trials, got {} and {}",
            pos.len(),
            neg.len()
        )));
    }
    Ok((pos, neg))
}

pub fn frr_far_at(trials: &[Trial], threshold: f64) -> Result<Rates> {
    let (pos, neg) = split_scores(trials)?;
    let fn_ = pos.iter().filter(|&&s| s < threshold).count();
    let fp = neg.iter().filter(|&&s| s >= threshold).count();
    Ok(Rates {
        threshold,
        frr: fn_ as f64 / pos.len() as f64,
        far: fp as f64 / neg.len() as f64,
        tp: pos.len() - fn_,
        fn_,
        fp,
        tn: neg.len() - fp,
    })
}

/// Distinct trial scores in ascending order followed by `+∞`.
pub fn candidate_thresholds(trials: &[Trial]) -> Vec<f64> {
    let mut c: Vec<f64> = trials.iter().map(|t| t.score).collect();
    c.sort_by(f64::total_cmp);
    c.dedup();
    c.push(f64::INFINITY);
    c
}

/// Largest candidate threshold whose FRR does not exceed `target_frr`.
pub fn select_operating_point(trials: &[Trial], target_frr: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&target_frr) {
        return Err(Error::invalid(format!("target FRR {target_frr} outside [0, 1]")));
    }
    let (mut pos, _) = split_scores(trials)?;
    pos.sort_by(f64::total_cmp);
    let n = pos.len() as f64;
    for &tau in candidate_thresholds(trials).iter().rev() {
        let rejected = pos.partition_point(|&s| s < tau);
        if rejected as f64 / n <= target_frr {
            return Ok(tau);
        }
    }
    unreachable!("the smallest candidate rejects no positives")
}

/// Every candidate threshold with its rates, ascending in threshold.
pub fn det_sweep(trials: &[Trial]) -> Result<Vec<Rates>> {
    let (mut pos, mut neg) = split_scores(trials)?;
    pos.sort_by(f64::total_cmp);
    neg.sort_by(f64::total_cmp);
    let (np, nn) = (pos.len(), neg.len());
    Ok(candidate_thresholds(trials)
        .into_iter()
        .map(|tau| {
            let fn_ = pos.partition_point(|&s| s < tau);
            let fp = nn - neg.partition_point(|&s| s < tau);
            Rates {
                threshold: tau,
                frr: fn_ as f64 / np as f64,
                far: fp as f64 / nn as f64,
                tp: np - fn_,
                fn_,
                fp,
                tn: nn - fp,
            }
        })
        .collect())
}

fn fmt_threshold(t: f64) -> String {
    if t == f64::INFINITY {
        "inf".into()
    } else {
        format!("{t:.17e}")
    }
}

pub fn det_csv(rows: &[Rates]) -> String {
    let mut out = String::from("threshold,frr,far\n");
    for r in rows {
        out.push_str(&format!("{},{:.17e},{:.17e}\n", fmt_threshold(r.threshold), r.frr, r.far));
    }
    out
}

/// FAR of a model relative to a baseline at matched FRR.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RelativeFar {
    Value(f64),
    /// The baseline has no false accepts at its operating point.
    Undefined,
}

/// Outcome for one condition: the baseline's operating point, the model's
/// matched operating point and their FAR ratio.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub condition: String,
    pub num_pos: usize,
    pub num_neg: usize,
    pub model: Rates,
    pub baseline: Rates,
    pub relative_far: RelativeFar,
}

fn same_ids(a: &[Trial], b: &[Trial]) -> bool {
    let mut ia: Vec<u64> = a.iter().map(|t| t.id).collect();
    let mut ib: Vec<u64> = b.iter().map(|t| t.id).collect();
    ia.sort_unstable();
    ib.sort_unstable();
    ia == ib
}

/// Fixes the baseline operating point at `baseline_target_frr`, then picks
/// the model threshold that matches the FRR the baseline actually achieved.
pub fn relative_far(
    condition: &str,
    model: &[Trial],
    baseline: &[Trial],
    baseline_target_frr: f64,
) -> Result<EvalReport> {
    if !same_ids(model, baseline) {
        return Err(Error::invalid("model and baseline trials cover different utterances"));
    }
    let tau_b = select_operating_point(baseline, baseline_target_frr)?;
    let b = frr_far_at(baseline, tau_b)?;
    let tau_m = select_operating_point(model, b.frr)?;
    let m = frr_far_at(model, tau_m)?;
    let relative_far = if b.fp == 0 {
        RelativeFar::Undefined
    } else {
        RelativeFar::Value(m.far / b.far)
    };
    Ok(EvalReport {
        condition: condition.into(),
        num_pos: m.tp + m.fn_,
        num_neg: m.fp + m.tn,
        model: m,
        baseline: b,
        relative_far,
    })
}

fn num(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else {
        json!(fmt_threshold(v))
    }
}

fn rates_json(r: &Rates) -> Value {
    json!({
        "threshold": num(r.threshold),
        "frr": r.frr,
        "far": r.far,
        "tp": r.tp,
        "fn": r.fn_,
        "fp": r.fp,
        "tn": r.tn,
    })
}

impl EvalReport {
    pub fn to_json(&self) -> Value {
        json!({
            "condition": self.condition,
            "num_pos": self.num_pos,
            "num_neg": self.num_neg,
            "threshold": num(self.model.threshold),
            "frr": self.model.frr,
            "far": self.model.far,
            "counts": {"tp": self.model.tp, "fn": self.model.fn_, "fp": self.model.fp, "tn": self.model.tn},
            "relative_far": match self.relative_far {
                RelativeFar::Value(v) => json!(v),
                RelativeFar::Undefined => json!("undefined"),
            },
            "baseline": rates_json(&self.baseline),
        })
    }

    pub fn relative_far_value(&self) -> Option<f64> {
        match self.relative_far {
            RelativeFar::Value(v) => Some(v),
            RelativeFar::Undefined => None,
        }
    }
}

/// Reports for the normal and playback subsets (a condition with no
/// trials, or without both classes, is skipped).
pub fn evaluate_conditions(model: &[Trial], baseline: &[Trial], target_frr: f64) -> Result<Vec<EvalReport>> {
    let mut out = Vec::new();
    for c in [Condition::Normal, Condition::Playback] {
        let (m, b) = (filter_condition(model, c), filter_condition(baseline, c));
        let has_both = m.iter().any(|t| t.label.is_keyword()) && m.iter().any(|t| !t.label.is_keyword());
        if has_both {
            out.push(relative_far(c.name(), &m, &b, target_frr)?);
        }
    }
    Ok(out)
}

/// `layer,weight` rows for every teacher layer, zero outside the subset.
pub fn layer_weights_csv(agg: &LayerAggregator, num_layers: usize) -> String {
    let mut out = String::from("layer,weight\n");
    for (l, w) in agg.full_weights(num_layers).into_iter().enumerate() {
        out.push_str(&format!("{l},{w:.17e}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn trials(pos: &[f64], neg: &[f64]) -> Vec<Trial> {
        let mk = |i: usize, s: f64, label| Trial {
            id: i as u64,
            score: s,
            label,
            condition: Condition::Normal,
        };
        pos.iter()
            .enumerate()
            .map(|(i, &s)| mk(i, s, Label::Keyword))
            .chain(neg.iter().enumerate().map(|(i, &s)| mk(100 + i, s, Label::NonKeyword)))
            .collect()
    }

    #[test]
    fn hand_counted_rates() {
        let t = trials(&[0.9, 0.6, 0.4], &[0.8, 0.3, 0.1]);
        let r = frr_far_at(&t, 0.5).unwrap();
        assert_eq!((r.frr, r.far), (1.0 / 3.0, 1.0 / 3.0));
        let r = frr_far_at(&t, f64::NEG_INFINITY).unwrap();
        assert_eq!((r.frr, r.far), (0.0, 1.0));
        let r = frr_far_at(&t, f64::INFINITY).unwrap();
        assert_eq!((r.frr, r.far), (1.0, 0.0));
    }

    #[test]
    fn operating_points() {
        let t = trials(&[0.9, 0.6, 0.4], &[0.8, 0.3, 0.1]);
        assert_eq!(select_operating_point(&t, 1.0 / 3.0).unwrap(), 0.6);
        assert_eq!(select_operating_point(&t, 1.0).unwrap(), f64::INFINITY);
        assert_eq!(select_operating_point(&t, 0.0).unwrap(), 0.4);
        assert!(select_operating_point(&trials(&[0.1], &[]), 0.1).is_err());
        assert!(select_operating_point(&t, 1.5).is_err());
    }

    #[test]
    fn self_comparison_and_dominance() {
        let t = trials(&[0.9, 0.6, 0.4, 0.7, 0.2], &[0.8, 0.3, 0.1, 0.5, 0.65]);
        let r = relative_far("normal", &t, &t, 0.2).unwrap();
        assert_eq!(r.relative_far, RelativeFar::Value(1.0));
        let better: Vec<Trial> = t
            .iter()
            .map(|x| Trial {
                score: if x.label.is_keyword() { x.score } else { x.score - 0.2 },
                ..*x
            })
            .collect();
        let r = relative_far("normal", &better, &t, 0.2).unwrap();
        assert!(r.relative_far_value().unwrap() <= 1.0);
    }

    #[test]
    fn undefined_when_baseline_has_no_false_accepts() {
        let t = trials(&[0.9, 0.8], &[0.1, 0.2]);
        let r = relative_far("normal", &t, &t, 0.0).unwrap();
        assert_eq!(r.relative_far, RelativeFar::Undefined);
        assert_eq!(r.to_json()["relative_far"], "undefined");
        assert_eq!(r.to_json()["baseline"]["fp"], 0);
    }

    #[test]
    fn mismatched_ids_rejected() {
        let a = trials(&[0.9], &[0.1]);
        let mut b = a.clone();
        b[0].id = 77;
        assert!(relative_far("normal", &a, &b, 0.05).is_err());
    }

    #[test]
    fn det_rows() {
        let t = trials(&[0.9, 0.6, 0.4], &[0.8, 0.3, 0.1, 0.6]);
        let rows = det_sweep(&t).unwrap();
        assert_eq!(rows.len(), 7);
        assert_eq!(rows[0].frr, 0.0);
        assert_eq!(rows.last().unwrap().threshold, f64::INFINITY);
        let csv = det_csv(&rows);
        assert!(csv.lines().last().unwrap().starts_with("inf,"));
        for r in &rows {
            assert_eq!(*r, frr_far_at(&t, r.threshold).unwrap());
        }
    }

    #[test]
    fn weights_csv_has_zero_rows_outside_subset() {
        let a = LayerAggregator::new(&[5, 6, 7, 8]).unwrap();
        let csv = layer_weights_csv(&a, 13);
        let rows: Vec<f64> = csv.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
        assert_eq!(rows.len(), 13);
        assert_eq!(rows.iter().filter(|&&w| w != 0.0).count(), 4);
        assert!((rows.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(rows[5..9].iter().all(|&w| w == 0.25));
    }
}
