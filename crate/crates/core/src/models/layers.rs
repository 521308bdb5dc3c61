//! Building blocks shared by the teacher and the student.

use rand_distr::{Distribution, Normal};

use crate::impl_module;
use crate::rng;
use crate::tensor::{Axis, Graph, Param, Tensor, Var};
use crate::Result;

const LN_EPS: f64 = 1e-5;

/// Normal(0, std) initialisation keyed by the parameter name, so values do
/// not depend on construction order.
pub(crate) fn init_normal(seed: u64, name: &str, shape: &[usize], std: f64) -> Param {
    let mut r = rng::rng_for(&[seed, rng::tag(name)]);
    let dist = Normal::new(0.0, std).expect("valid std");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(&mut r)).collect();
    Param::new(name, Tensor::new(shape.to_vec(), data).expect("shape"))
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl_module!(Linear { weight, bias });

impl Linear {
    pub fn new(seed: u64, name: &str, inputs: usize, outputs: usize) -> Self {
        Self {
            weight: init_normal(
                seed,
                &format!("{name}.weight"),
                &[inputs, outputs],
                1.0 / (inputs as f64).sqrt(),
            ),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(&[1, outputs])),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(&self.weight);
        let b = g.param(&self.bias);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }

    pub fn outputs(&self) -> usize {
        self.weight.value.shape()[1]
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: Param,
    pub beta: Param,
}

impl_module!(LayerNorm { gamma, beta });

impl LayerNorm {
    pub fn new(name: &str, width: usize) -> Self {
        Self {
            gamma: Param::new(format!("{name}.gamma"), Tensor::full(&[1, width], 1.0)),
            beta: Param::new(format!("{name}.beta"), Tensor::zeros(&[1, width])),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let gamma = g.param(&self.gamma);
        let beta = g.param(&self.beta);
        g.layer_norm(x, gamma, beta, LN_EPS)
    }
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    heads: usize,
}

impl_module!(MultiHeadAttention {
    query,
    key,
    value,
    output
});

impl MultiHeadAttention {
    pub fn new(seed: u64, name: &str, width: usize, heads: usize) -> Self {
        assert!(width.is_multiple_of(heads), "width {width} not divisible by {heads} heads");
        Self {
            query: Linear::new(seed, &format!("{name}.query"), width, width),
            key: Linear::new(seed, &format!("{name}.key"), width, width),
            value: Linear::new(seed, &format!("{name}.value"), width, width),
            output: Linear::new(seed, &format!("{name}.output"), width, width),
            heads,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let q = self.query.forward(g, x)?;
        let k = self.key.forward(g, x)?;
        let v = self.value.forward(g, x)?;
        let width = self.query.outputs();
        let dh = width / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut contexts = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice(q, Axis::Cols, h * dh, dh)?;
            let kh = g.slice(k, Axis::Cols, h * dh, dh)?;
            let vh = g.slice(v, Axis::Cols, h * dh, dh)?;
            let scores = g.matmul_nt(qh, kh)?;
            let scores = g.scale(scores, scale);
            let attn = g.softmax(scores);
            contexts.push(g.matmul(attn, vh)?);
        }
        let ctx = g.concat(&contexts, Axis::Cols)?;
        self.output.forward(g, ctx)
    }
}

/// Pre-norm transformer block with a GELU feed-forward of width `4 · d`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub attn_norm: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ff_norm: LayerNorm,
    pub ff_in: Linear,
    pub ff_out: Linear,
}

impl_module!(TransformerBlock {
    attn_norm,
    attn,
    ff_norm,
    ff_in,
    ff_out
});

impl TransformerBlock {
    pub fn new(seed: u64, name: &str, width: usize, heads: usize) -> Self {
        Self {
            attn_norm: LayerNorm::new(&format!("{name}.attn_norm"), width),
            attn: MultiHeadAttention::new(seed, &format!("{name}.attn"), width, heads),
            ff_norm: LayerNorm::new(&format!("{name}.ff_norm"), width),
            ff_in: Linear::new(seed, &format!("{name}.ff_in"), width, 4 * width),
            ff_out: Linear::new(seed, &format!("{name}.ff_out"), 4 * width, width),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.attn_norm.forward(g, x)?;
        let h = self.attn.forward(g, h)?;
        let x = g.add(x, h)?;
        let h = self.ff_norm.forward(g, x)?;
        let h = self.ff_in.forward(g, h)?;
        let h = g.gelu(h);
        let h = self.ff_out.forward(g, h)?;
        g.add(x, h)
    }
}

/// Fixed sinusoidal position table, `[frames, width]`.
pub fn sinusoidal_positions(frames: usize, width: usize) -> Tensor {
    let mut t = Tensor::zeros(&[frames, width]);
    for pos in 0..frames {
        for i in 0..width {
            let rate = 1.0 / 10_000f64.powf((2 * (i / 2)) as f64 / width as f64);
            let angle = pos as f64 * rate;
            t.data_mut()[pos * width + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    t
}
