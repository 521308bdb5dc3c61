//! Distillation objectives on the autodiff graph, plus the learned
//! teacher-layer aggregator.

mod aggregate;
pub mod gradcheck;
mod l1cos;
mod tcode;
mod views;

pub use aggregate::LayerAggregator;
pub use l1cos::{framewise_l1cos, utterance_l1cos};
pub use tcode::{tcode_loss, TcodeLoss};
pub use views::{
    batch_view_corr, batch_view_loss, batch_view_term, dvcc_loss, feature_view_corr, feature_view_loss, feature_view_term, view_loss,
    DvccLoss,
};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DistillVariant {
    FramewiseL1Cos,
    UtteranceL1Cos,
    FeatureView,
    BatchView,
    DualView,
    TcodeOnly,
    Combined,
}

impl DistillVariant {
    pub const ALL: [DistillVariant; 7] = [
        DistillVariant::FramewiseL1Cos,
        DistillVariant::UtteranceL1Cos,
        DistillVariant::FeatureView,
        DistillVariant::BatchView,
        DistillVariant::DualView,
        DistillVariant::TcodeOnly,
        DistillVariant::Combined,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DistillVariant::FramewiseL1Cos => "framewise_l1cos",
            DistillVariant::UtteranceL1Cos => "utterance_l1cos",
            DistillVariant::FeatureView => "feature_view",
            DistillVariant::BatchView => "batch_view",
            DistillVariant::DualView => "dual_view",
            DistillVariant::TcodeOnly => "tcode_only",
            DistillVariant::Combined => "combined",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }

    /// Whether the loss couples samples within a batch.
    pub fn is_batch_coupled(self) -> bool {
        matches!(
            self,
            DistillVariant::FeatureView
                | DistillVariant::BatchView
                | DistillVariant::DualView
                | DistillVariant::Combined
        )
    }

    pub fn uses_tcode(self) -> bool {
        matches!(self, DistillVariant::TcodeOnly | DistillVariant::Combined)
    }

    pub fn uses_teacher_features(self) -> bool {
        self != DistillVariant::TcodeOnly
    }
}

/// Where contrastive negatives come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NegativeSource {
    /// Codebook rows other than the positive.
    Codebook,
    /// Quantized targets of other masked frames of the same utterance.
    OtherFrames,
}

impl NegativeSource {
    pub fn name(self) -> &'static str {
        match self {
            NegativeSource::Codebook => "codebook",
            NegativeSource::OtherFrames => "frames",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "codebook" => Some(NegativeSource::Codebook),
            "frames" => Some(NegativeSource::OtherFrames),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistillConfig {
    pub variant: DistillVariant,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub negatives: usize,
    pub negative_source: NegativeSource,
    pub layer_subset: Vec<usize>,
    pub mask_prob: f64,
    pub mask_span: usize,
    pub epsilon_corr: f64,
    pub epsilon_sg: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            variant: DistillVariant::DualView,
            alpha: 5e-3,
            beta: 5e-3,
            gamma: 1.0,
            lambda: 1.0,
            negatives: 7,
            negative_source: NegativeSource::Codebook,
            layer_subset: (0..=4).collect(),
            mask_prob: 0.08,
            mask_span: 4,
            epsilon_corr: 1e-9,
            epsilon_sg: 1e-12,
        }
    }
}

impl DistillConfig {
    /// Checks weights and that the layer subset fits a teacher with
    /// `teacher_layers` transformer blocks (layers `0..=teacher_layers`).
    pub fn validate(&self, teacher_layers: usize) -> Result<()> {
        let bad = |k: &str, r: &str| Err(Error::config(k, r));
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad("distill.alpha", "must be a finite value >= 0");
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad("distill.beta", "must be a finite value >= 0");
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return bad("distill.gamma", "must be a finite value >= 0");
        }
        if !self.lambda.is_finite() {
            return bad("distill.lambda", "must be finite");
        }
        if self.negatives == 0 {
            return bad("distill.negatives", "must be at least 1");
        }
        if self.layer_subset.is_empty() {
            return bad("distill.layers", "layer subset is empty");
        }
        if let Some(l) = self.layer_subset.iter().find(|&&l| l > teacher_layers) {
            return bad(
                "distill.layers",
                &format!("layer {l} outside 0..={teacher_layers}"),
            );
        }
        if !(self.mask_prob > 0.0 && self.mask_prob < 1.0) {
            return bad("distill.mask_prob", "must lie in (0, 1)");
        }
        if self.mask_span == 0 {
            return bad("distill.mask_span", "must be at least 1");
        }
        if !(self.epsilon_corr > 0.0 && self.epsilon_sg > 0.0) {
            return bad("distill.epsilon", "guards must be positive");
        }
        Ok(())
    }
}

/// One line of the per-step loss breakdown log.
#[derive(Clone, Debug, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub variant: DistillVariant,
    pub l_c: Option<f64>,
    pub l_g: Option<f64>,
    pub l_dvcc: Option<f64>,
    pub l_tcode: Option<f64>,
    pub total: f64,
}

impl LossRecord {
    pub const CSV_HEADER: &'static str = "step,variant,L_C,L_G,L_DVCC,L_tcode,total";

    pub fn csv_line(&self) -> String {
        let f = |v: Option<f64>| v.map(|x| format!("{x:.17e}")).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{:.17e}",
            self.step,
            self.variant.name(),
            f(self.l_c),
            f(self.l_g),
            f(self.l_dvcc),
            f(self.l_tcode),
            self.total
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_names_roundtrip() {
        for v in DistillVariant::ALL {
            assert_eq!(DistillVariant::parse(v.name()), Some(v));
        }
        assert_eq!(DistillVariant::parse("dual"), None);
    }

    #[test]
    fn config_validation() {
        let c = DistillConfig::default();
        assert!(c.validate(4).is_ok());
        assert!(c.validate(3).is_err());
        let mut e = c.clone();
        e.layer_subset.clear();
        assert!(e.validate(4).is_err());
        let mut e = c.clone();
        e.negatives = 0;
        assert!(e.validate(4).is_err());
        let mut e = c;
        e.alpha = -1.0;
        assert!(e.validate(4).is_err());
    }

    #[test]
    fn record_line() {
        let r = LossRecord {
            step: 3,
            variant: DistillVariant::DualView,
            l_c: Some(0.5),
            l_g: Some(0.25),
            l_dvcc: Some(2.0),
            l_tcode: None,
            total: 2.0,
        };
        let line = r.csv_line();
        assert!(line.starts_with("3,dual_view,5.0"));
        assert_eq!(line.split(',').count(), 7);
        assert_eq!(line.split(',').nth(5), Some(""));
    }
}
