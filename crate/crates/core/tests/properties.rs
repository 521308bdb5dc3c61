use proptest::prelude::*;

use dvcc_core::datagen::{Condition, Label};
use dvcc_core::eval::{
    candidate_thresholds, det_sweep, frr_far_at, relative_far, select_operating_point, Trial,
};
use dvcc_core::losses::{batch_view_corr, feature_view_corr, LayerAggregator};
use dvcc_core::tensor::{Graph, Tensor};

fn trials_strategy() -> impl Strategy<Value = Vec<Trial>> {
    prop::collection::vec((-20i32..20, any::<bool>()), 2..40).prop_map(|v| {
        v.into_iter()
            .enumerate()
            .map(|(i, (s, k))| Trial {
                id: i as u64,
                score: s as f64 / 4.0,
                // the first two trials pin one of each class
                label: if i == 0 || (i > 1 && k) { Label::Keyword } else { Label::NonKeyword },
                condition: Condition::Normal,
            })
            .collect()
    })
}

fn matrix(b: usize, d: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-3.0f64..3.0, b * d)
        .prop_filter("non-degenerate rows and columns", move |v| {
            (0..b).all(|i| v[i * d..(i + 1) * d].iter().map(|x| x * x).sum::<f64>() > 1e-3)
                && (0..d).all(|j| (0..b).map(|i| v[i * d + j] * v[i * d + j]).sum::<f64>() > 1e-3)
        })
        .prop_map(move |v| Tensor::new(vec![b, d], v).unwrap())
}

fn pair() -> impl Strategy<Value = (Tensor, Tensor)> {
    (2usize..6, 2usize..6).prop_flat_map(|(b, d)| (matrix(b, d), matrix(b, d)))
}

fn corr(h: &Tensor, o: &Tensor, feature: bool) -> Tensor {
    let mut g = Graph::inference();
    let (hv, ov) = (g.constant(h.clone()), g.constant(o.clone()));
    let m = if feature {
        feature_view_corr(&mut g, hv, ov, 1e-9).unwrap()
    } else {
        batch_view_corr(&mut g, hv, ov, 1e-9).unwrap()
    };
    g.value(m).clone()
}

fn close(a: &Tensor, b: &Tensor, tol: f64) -> bool {
    a.data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() <= tol)
}

proptest! {
    #[test]
    fn det_rates_are_monotone(trials in trials_strategy()) {
        let det = det_sweep(&trials).unwrap();
        prop_assert_eq!(det.len(), candidate_thresholds(&trials).len());
        prop_assert_eq!(det[0].frr, 0.0);
        prop_assert_eq!(det.last().unwrap().far, 0.0);
        for w in det.windows(2) {
            prop_assert!(w[0].frr <= w[1].frr);
            prop_assert!(w[0].far >= w[1].far);
        }
    }

    #[test]
    fn operating_point_reproduces_candidate_frr(trials in trials_strategy(), pick in any::<prop::sample::Index>()) {
        let cands = candidate_thresholds(&trials);
        let tau = cands[pick.index(cands.len())];
        let frr = frr_far_at(&trials, tau).unwrap().frr;
        let chosen = select_operating_point(&trials, frr).unwrap();
        prop_assert_eq!(frr_far_at(&trials, chosen).unwrap().frr, frr);
        prop_assert!(chosen >= tau);
    }

    #[test]
    fn relative_far_ignores_shared_monotone_transforms(
        model in trials_strategy(),
        shift in -5.0f64..5.0,
        gain in 0.1f64..10.0,
    ) {
        // the baseline shares ids and labels; its scores are a fixed scramble
        let baseline: Vec<Trial> = model
            .iter()
            .map(|t| Trial { score: ((t.id * 7919 % 13) as f64) - 6.0, ..*t })
            .collect();
        let f = |ts: &[Trial]| -> Vec<Trial> {
            ts.iter().map(|t| Trial { score: (gain * t.score + shift).exp(), ..*t }).collect()
        };
        let a = relative_far("normal", &model, &baseline, 0.05).unwrap();
        let b = relative_far("normal", &f(&model), &f(&baseline), 0.05).unwrap();
        prop_assert_eq!(a.relative_far, b.relative_far);
        prop_assert_eq!((a.model.fp, a.model.fn_), (b.model.fp, b.model.fn_));
    }

    #[test]
    fn correlations_ignore_positive_scaling((h, o) in pair(), s in 0.1f64..10.0, t in 0.1f64..10.0) {
        let (b, d) = h.dims2();
        let cols = |x: &Tensor, k: f64| Tensor::new(vec![b, d], x.data().iter().enumerate()
            .map(|(i, v)| v * k * (1.0 + (i % d) as f64)).collect()).unwrap();
        let rows = |x: &Tensor, k: f64| Tensor::new(vec![b, d], x.data().iter().enumerate()
            .map(|(i, v)| v * k * (1.0 + (i / d) as f64)).collect()).unwrap();
        prop_assert!(close(&corr(&cols(&h, s), &cols(&o, t), true), &corr(&h, &o, true), 1e-9));
        prop_assert!(close(&corr(&rows(&h, s), &rows(&o, t), false), &corr(&h, &o, false), 1e-9));
    }

    #[test]
    fn correlations_bounded_by_one((h, o) in pair()) {
        for feature in [true, false] {
            prop_assert!(corr(&h, &o, feature).data().iter().all(|v| v.abs() <= 1.0 + 1e-12));
        }
    }

    #[test]
    fn aggregator_weights_form_a_distribution(logits in prop::collection::vec(-30.0f64..30.0, 1..14)) {
        let subset: Vec<usize> = (0..logits.len()).collect();
        let mut agg = LayerAggregator::new(&subset).unwrap();
        agg.logits.value = Tensor::row(&logits);
        let w = agg.full_weights(14);
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(w[logits.len()..].iter().all(|&x| x == 0.0));
        prop_assert!(w.iter().all(|&x| x >= 0.0));
    }
}
