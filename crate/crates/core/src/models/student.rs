use super::layers::{init_normal, sinusoidal_positions, LayerNorm, Linear, TransformerBlock};
use super::MaskSpec;
use crate::dsp::{FeatureSeq, NUM_CHANNELS};
use crate::impl_module;
use crate::tensor::{Axis, Graph, Module, Param, Tensor, Var};
use crate::{Error, Result};

pub const STUDENT_LAYERS: usize = 3;

/// Stand-ins for the 768- and 256-wide students.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StudentSize {
    Large,
    Small,
}

impl StudentSize {
    pub fn width(self) -> usize {
        match self {
            StudentSize::Large => 64,
            StudentSize::Small => 24,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "large" => Some(StudentSize::Large),
            "small" => Some(StudentSize::Small),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            StudentSize::Large => "large",
            StudentSize::Small => "small",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StudentConfig {
    pub width: usize,
    pub heads: usize,
    pub teacher_width: usize,
    pub code_dim: usize,
    pub positional: bool,
    pub seed: u64,
}

impl StudentConfig {
    pub fn new(size: StudentSize, seed: u64) -> Self {
        Self {
            width: size.width(),
            heads: 4,
            teacher_width: 64,
            code_dim: 64,
            positional: true,
            seed,
        }
    }
}

/// Which training phase a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Backbone,
    MaskEmbedding,
    DistillHeads,
    Classifier,
}

pub fn param_group(name: &str) -> ParamGroup {
    if name.starts_with("student.distill_projector") || name.starts_with("student.code_projector") {
        ParamGroup::DistillHeads
    } else if name.starts_with("student.classifier") {
        ParamGroup::Classifier
    } else if name == "student.mask_embedding" {
        ParamGroup::MaskEmbedding
    } else {
        ParamGroup::Backbone
    }
}

/// Three transformer blocks over LFBE frames, with distillation projectors
/// and a single-logit keyword classifier.
#[derive(Clone, Debug)]
pub struct StudentModel {
    config: StudentConfig,
    pub mask_embedding: Param,
    pub input_norm: LayerNorm,
    pub input_proj: Linear,
    pub blocks: Vec<TransformerBlock>,
    pub final_norm: LayerNorm,
    pub distill_projector: Linear,
    pub code_projector: Linear,
    pub classifier: Linear,
}

impl_module!(StudentModel {
    mask_embedding,
    input_norm,
    input_proj,
    blocks,
    final_norm,
    distill_projector,
    code_projector,
    classifier
});

/// Graph handles produced by [`StudentModel::trace`].
#[derive(Clone, Debug)]
pub struct StudentTrace {
    /// Final hidden states of the unmasked pass, `[T, width]`.
    pub hidden: Var,
    /// Time mean of `hidden`, `[1, width]`.
    pub pooled: Var,
    /// `distill_projector(pooled)`, `[1, teacher_width]`.
    pub distill_view: Var,
    /// Code projections of the masked pass at masked frames, `[|mask|, code_dim]`.
    pub code_predictions: Option<Var>,
}

impl StudentModel {
    pub fn new(config: StudentConfig) -> Self {
        let (s, w) = (config.seed, config.width);
        Self {
            config,
            mask_embedding: init_normal(s, "student.mask_embedding", &[1, NUM_CHANNELS], 1.0),
            input_norm: LayerNorm::new("student.input_norm", NUM_CHANNELS),
            input_proj: Linear::new(s, "student.input_proj", NUM_CHANNELS, w),
            blocks: (0..STUDENT_LAYERS)
                .map(|l| TransformerBlock::new(s, &format!("student.blocks.{l}"), w, config.heads))
                .collect(),
            final_norm: LayerNorm::new("student.final_norm", w),
            distill_projector: Linear::new(s, "student.distill_projector", w, config.teacher_width),
            code_projector: Linear::new(s, "student.code_projector", w, config.code_dim),
            classifier: Linear::new(s, "student.classifier", w, 1),
        }
    }

    pub fn config(&self) -> &StudentConfig {
        &self.config
    }

    pub fn width(&self) -> usize {
        self.config.width
    }

    /// Final hidden states `[T, width]`, with masked input frames replaced
    /// by the learned mask embedding.
    pub fn encode(&self, g: &mut Graph, features: &Tensor, mask: Option<&MaskSpec>) -> Result<Var> {
        let (frames, _) = features.dims2();
        let mut x = g.constant(features.clone());
        if let Some(m) = mask {
            let e = g.param(&self.mask_embedding);
            x = g.replace_rows(x, e, &m.as_flags())?;
        }
        let x = self.input_norm.forward(g, x)?;
        let mut h = self.input_proj.forward(g, x)?;
        if self.config.positional {
            let pos = g.constant(sinusoidal_positions(frames, self.config.width));
            h = g.add(h, pos)?;
        }
        for block in &self.blocks {
            h = block.forward(g, h)?;
        }
        self.final_norm.forward(g, h)
    }

    /// Unmasked pass for pooled and distillation views; with a mask, an
    /// additional masked pass provides code predictions at masked frames.
    pub fn trace(&self, g: &mut Graph, features: &Tensor, mask: Option<&MaskSpec>) -> Result<StudentTrace> {
        let hidden = self.encode(g, features, None)?;
        let pooled = g.mean(hidden, Axis::Rows);
        let distill_view = self.distill_projector.forward(g, pooled)?;
        let code_predictions = match mask {
            Some(m) => Some(self.code_predictions(g, features, m)?),
            None => None,
        };
        Ok(StudentTrace {
            hidden,
            pooled,
            distill_view,
            code_predictions,
        })
    }

    /// Masked pass only: code projections at masked frames.
    pub fn code_predictions(&self, g: &mut Graph, features: &Tensor, mask: &MaskSpec) -> Result<Var> {
        let masked = self.encode(g, features, Some(mask))?;
        let at = g.gather_rows(masked, mask.indices())?;
        self.code_projector.forward(g, at)
    }

    /// Keyword logit `[1, 1]` from the pooled unmasked hidden states.
    pub fn logit(&self, g: &mut Graph, features: &Tensor) -> Result<Var> {
        let hidden = self.encode(g, features, None)?;
        let pooled = g.mean(hidden, Axis::Rows);
        self.classifier.forward(g, pooled)
    }

    pub fn score(&self, features: &FeatureSeq) -> Result<f64> {
        let mut g = Graph::inference();
        let l = self.logit(&mut g, features.frames())?;
        Ok(g.item(l))
    }

    pub fn to_entries(&self) -> Vec<(String, Tensor)> {
        let c = &self.config;
        let mut out = vec![(
            "student.config".to_string(),
            Tensor::row(&[
                c.width as f64,
                c.heads as f64,
                c.teacher_width as f64,
                c.code_dim as f64,
                if c.positional { 1.0 } else { 0.0 },
                c.seed as f64,
            ]),
        )];
        out.extend(self.named_tensors());
        out
    }

    pub fn from_entries(entries: &[(String, Tensor)]) -> Result<Self> {
        let cfg = entries
            .iter()
            .find(|(n, _)| n == "student.config")
            .map(|(_, t)| t.data().to_vec())
            .ok_or_else(|| Error::format("checkpoint", "missing student.config"))?;
        if cfg.len() != 6 {
            return Err(Error::format("checkpoint", "student.config must have 6 entries"));
        }
        let mut model = StudentModel::new(StudentConfig {
            width: cfg[0] as usize,
            heads: cfg[1] as usize,
            teacher_width: cfg[2] as usize,
            code_dim: cfg[3] as usize,
            positional: cfg[4] != 0.0,
            seed: cfg[5] as u64,
        });
        model.load_tensors(entries)?;
        Ok(model)
    }
}
