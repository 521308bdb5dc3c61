use crate::impl_module;
use crate::tensor::{Axis, Graph, Module, Param, Tensor, Var};
use crate::{Error, Result};

/// Softmax-weighted sum over a subset of teacher layers.
#[derive(Clone, Debug)]
pub struct LayerAggregator {
    subset: Vec<usize>,
    pub logits: Param,
}

impl_module!(LayerAggregator { logits });

impl LayerAggregator {
    /// Zero logits (uniform weights) over `subset`, which is sorted and
    /// deduplicated.
    pub fn new(subset: &[usize]) -> Result<Self> {
        let mut subset = subset.to_vec();
        subset.sort_unstable();
        subset.dedup();
        if subset.is_empty() {
            return Err(Error::invalid("layer aggregator needs a non-empty subset"));
        }
        let logits = Param::new("agg.logits", Tensor::zeros(&[1, subset.len()]));
        Ok(Self { subset, logits })
    }

    pub fn subset(&self) -> &[usize] {
        &self.subset
    }

    /// Effective weights, one per subset layer.
    pub fn weights(&self) -> Vec<f64> {
        let l = self.logits.value.data();
        let m = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = l.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = e.iter().sum();
        e.iter().map(|v| v / z).collect()
    }

    /// Weights over all `num_layers` layers, zero outside the subset.
    pub fn full_weights(&self, num_layers: usize) -> Vec<f64> {
        let mut out = vec![0.0; num_layers];
        for (&l, w) in self.subset.iter().zip(self.weights()) {
            if l < num_layers {
                out[l] = w;
            }
        }
        out
    }

    /// `Σ_{l ∈ subset} softmax(logits)_l · layers[l]`; layers outside the
    /// subset never enter the graph expression.
    pub fn aggregate(&self, g: &mut Graph, layers: &[Var]) -> Result<Var> {
        if let Some(&l) = self.subset.iter().find(|&&l| l >= layers.len()) {
            return Err(Error::invalid(format!(
                "layer {l} requested but only {} available",
                layers.len()
            )));
        }
        let shape = g.shape(layers[self.subset[0]]).to_vec();
        let numel: usize = shape.iter().product();
        let mut flat = Vec::with_capacity(self.subset.len());
        for &l in &self.subset {
            if g.shape(layers[l]) != shape.as_slice() {
                return Err(Error::Shape {
                    op: "aggregate_layers",
                    lhs: shape,
                    rhs: g.shape(layers[l]).to_vec(),
                });
            }
            flat.push(g.reshape(layers[l], &[1, numel])?);
        }
        let stacked = g.concat(&flat, Axis::Rows)?;
        let logits = g.param(&self.logits);
        let w = g.softmax(logits);
        let mixed = g.matmul(w, stacked)?;
        g.reshape(mixed, &shape)
    }

    /// Aggregates plain tensors without recording gradients.
    pub fn aggregate_tensors(&self, layers: &[Tensor]) -> Result<Tensor> {
        let mut g = Graph::inference();
        let vars: Vec<Var> = layers.iter().map(|t| g.constant(t.clone())).collect();
        let out = self.aggregate(&mut g, &vars)?;
        Ok(g.value(out).clone())
    }

    pub fn num_weights(&self) -> usize {
        self.num_params()
    }
}
