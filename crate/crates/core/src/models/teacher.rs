use std::collections::BTreeMap;

use super::layers::{init_normal, sinusoidal_positions, LayerNorm, Linear, TransformerBlock};
use super::MaskSpec;
use crate::dsp::{FeatureSeq, NUM_CHANNELS};
use crate::impl_module;
use crate::tensor::{Graph, Module, Param, Tensor, Var};
use crate::{Error, Result};

const CONV_KERNEL: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TeacherConfig {
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub codebook_size: usize,
    pub code_dim: usize,
    pub seed: u64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            width: 64,
            layers: 4,
            heads: 4,
            codebook_size: 64,
            code_dim: 64,
            seed: 7,
        }
    }
}

/// Conv encoder over LFBE frames, a transformer stack and a quantizer
/// codebook. Layer 0 of its outputs is the conv encoder output.
#[derive(Clone, Debug)]
pub struct TeacherModel {
    config: TeacherConfig,
    pub input_norm: LayerNorm,
    pub conv1: Linear,
    pub conv2: Linear,
    pub blocks: Vec<TransformerBlock>,
    pub codebook: Param,
    pub code_projector: Linear,
    pub mask_embedding: Param,
    pub context_projector: Linear,
    frozen: bool,
}

impl_module!(TeacherModel {
    input_norm,
    conv1,
    conv2,
    blocks,
    codebook,
    code_projector,
    mask_embedding,
    context_projector
});

/// Graph handles produced by one teacher pass.
#[derive(Clone, Debug)]
pub struct TeacherTrace {
    /// `L + 1` hidden sequences, `[T, width]` each.
    pub layers: Vec<Var>,
    /// Code logits of the (unmasked) conv output, `[T, V]`.
    pub code_logits: Var,
}

/// Hidden states of every layer plus quantized targets at requested frames.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherOutputs {
    pub layer_features: Vec<Tensor>,
    /// frame → (code index, codebook row)
    pub quantized_targets: BTreeMap<usize, (usize, Vec<f64>)>,
}

/// Index of the first maximal entry.
pub fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

impl TeacherModel {
    pub fn new(config: TeacherConfig) -> Self {
        let s = config.seed;
        let w = config.width;
        Self {
            config,
            input_norm: LayerNorm::new("teacher.input_norm", NUM_CHANNELS),
            conv1: Linear::new(s, "teacher.conv1", CONV_KERNEL * NUM_CHANNELS, w),
            conv2: Linear::new(s, "teacher.conv2", CONV_KERNEL * w, w),
            blocks: (0..config.layers)
                .map(|l| TransformerBlock::new(s, &format!("teacher.blocks.{l}"), w, config.heads))
                .collect(),
            codebook: init_normal(s, "teacher.codebook", &[config.codebook_size, config.code_dim], 1.0),
            code_projector: Linear::new(s, "teacher.code_projector", w, config.codebook_size),
            mask_embedding: init_normal(s, "teacher.mask_embedding", &[1, w], 0.1),
            context_projector: Linear::new(s, "teacher.context_projector", w, config.code_dim),
            frozen: false,
        }
    }

    pub fn config(&self) -> &TeacherConfig {
        &self.config
    }

    pub fn num_layers(&self) -> usize {
        self.config.layers + 1
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Records a pass. With a mask, masked conv frames are replaced by the
    /// mask embedding before the transformer; code logits always come from
    /// the unmasked conv output.
    pub fn trace(&self, g: &mut Graph, features: &Tensor, mask: Option<&MaskSpec>) -> Result<TeacherTrace> {
        let (frames, _) = features.dims2();
        let x = g.constant(features.clone());
        let x = self.input_norm.forward(g, x)?;
        let x = g.unfold_time(x, CONV_KERNEL)?;
        let x = self.conv1.forward(g, x)?;
        let x = g.gelu(x);
        let x = g.unfold_time(x, CONV_KERNEL)?;
        let x = self.conv2.forward(g, x)?;
        let conv = g.gelu(x);
        let code_logits = self.code_projector.forward(g, conv)?;

        let mut h = match mask {
            Some(m) => {
                let e = g.param(&self.mask_embedding);
                g.replace_rows(conv, e, &m.as_flags())?
            }
            None => conv,
        };
        let pos = g.constant(sinusoidal_positions(frames, self.config.width));
        h = g.add(h, pos)?;
        let mut layers = Vec::with_capacity(self.num_layers());
        layers.push(conv);
        for block in &self.blocks {
            h = block.forward(g, h)?;
            layers.push(h);
        }
        Ok(TeacherTrace { layers, code_logits })
    }

    /// Frozen forward: all layer features and the quantized target (argmax
    /// code and its codebook row) for every masked frame.
    pub fn forward(&self, features: &FeatureSeq, mask: Option<&MaskSpec>) -> Result<TeacherOutputs> {
        let mut g = Graph::inference();
        let trace = self.trace(&mut g, features.frames(), None)?;
        let layer_features = trace.layers.iter().map(|&v| g.value(v).clone()).collect();
        let logits = g.value(trace.code_logits);
        let mut quantized_targets = BTreeMap::new();
        if let Some(m) = mask {
            for &t in m.indices() {
                let idx = argmax(logits.row_slice(t));
                quantized_targets.insert(t, (idx, self.codebook.value.row_slice(idx).to_vec()));
            }
        }
        Ok(TeacherOutputs {
            layer_features,
            quantized_targets,
        })
    }

    /// Hard code index of every frame.
    pub fn code_indices(&self, features: &FeatureSeq) -> Result<Vec<usize>> {
        let mut g = Graph::inference();
        let trace = self.trace(&mut g, features.frames(), None)?;
        let logits = g.value(trace.code_logits);
        Ok((0..logits.dims2().0).map(|t| argmax(logits.row_slice(t))).collect())
    }

    pub fn to_entries(&self) -> Vec<(String, Tensor)> {
        let c = &self.config;
        let mut out = vec![(
            "teacher.config".to_string(),
            Tensor::row(&[
                c.width as f64,
                c.layers as f64,
                c.heads as f64,
                c.codebook_size as f64,
                c.code_dim as f64,
                c.seed as f64,
                if self.frozen { 1.0 } else { 0.0 },
            ]),
        )];
        out.extend(self.named_tensors());
        out
    }

    pub fn from_entries(entries: &[(String, Tensor)]) -> Result<Self> {
        let cfg = entries
            .iter()
            .find(|(n, _)| n == "teacher.config")
            .map(|(_, t)| t.data().to_vec())
            .ok_or_else(|| Error::format("checkpoint", "missing teacher.config"))?;
        if cfg.len() != 7 {
            return Err(Error::format("checkpoint", "teacher.config must have 7 entries"));
        }
        let mut model = TeacherModel::new(TeacherConfig {
            width: cfg[0] as usize,
            layers: cfg[1] as usize,
            heads: cfg[2] as usize,
            codebook_size: cfg[3] as usize,
            code_dim: cfg[4] as usize,
            seed: cfg[5] as u64,
        });
        model.load_tensors(entries)?;
        model.frozen = cfg[6] != 0.0;
        Ok(model)
    }
}
