use rand::seq::index;
use rand::Rng;

use crate::rng;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Span mask over `frames` time steps.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskSpec {
    frames: usize,
    span: usize,
    starts: Vec<usize>,
    indices: Vec<usize>,
}

impl MaskSpec {
    /// Mask from explicit span starts; spans are truncated at `frames`.
    pub fn from_starts(frames: usize, span: usize, starts: &[usize]) -> Result<Self> {
        if let Some(&s) = starts.iter().find(|&&s| s >= frames) {
            return Err(Error::invalid(format!("span start {s} outside {frames} frames")));
        }
        let mut covered = vec![false; frames];
        for &s in starts {
            for c in covered.iter_mut().skip(s).take(span) {
                *c = true;
            }
        }
        let mut starts = starts.to_vec();
        starts.sort_unstable();
        starts.dedup();
        Ok(Self {
            frames,
            span,
            starts,
            indices: (0..frames).filter(|&t| covered[t]).collect(),
        })
    }

    /// Sorted masked frame indices.
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn starts(&self) -> &[usize] {
        &self.starts
    }

    pub fn span(&self) -> usize {
        self.span
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn as_flags(&self) -> Vec<bool> {
        let mut flags = vec![false; self.frames];
        for &i in &self.indices {
            flags[i] = true;
        }
        flags
    }
}

/// Each frame starts a span of `span` frames with probability `p`. If no
/// frame is drawn, one span is forced at a seeded position so at least one
/// frame is masked.
pub fn apply_span_mask(frames: usize, p: f64, span: usize, seed: u64) -> Result<MaskSpec> {
    if span == 0 || frames < span {
        return Err(Error::invalid(format!(
            "span mask needs frames >= span >= 1, got frames {frames}, span {span}"
        )));
    }
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::invalid(format!("mask probability must be in (0, 1), got {p}")));
    }
    let mut r = rng::rng_for(&[seed, rng::tag("span_mask")]);
    let mut starts: Vec<usize> = (0..frames).filter(|_| r.gen_bool(p)).collect();
    if starts.is_empty() {
        starts.push(r.gen_range(0..=frames - span));
    }
    MaskSpec::from_starts(frames, span, &starts)
}

/// `n` distinct codebook indices drawn uniformly from the `size − 1` rows
/// other than `positive`.
pub fn sample_negative_indices(size: usize, positive: usize, n: usize, seed: u64) -> Result<Vec<usize>> {
    if positive >= size {
        return Err(Error::invalid(format!("positive index {positive} outside codebook of {size}")));
    }
    if n == 0 || n > size - 1 {
        return Err(Error::invalid(format!(
            "need 1 <= N <= {} negatives, got {n}",
            size - 1
        )));
    }
    let mut r = rng::rng_for(&[seed, rng::tag("negatives")]);
    Ok(index::sample(&mut r, size - 1, n)
        .into_iter()
        .map(|i| if i >= positive { i + 1 } else { i })
        .collect())
}

/// The negative codebook rows as an `[n, d_code]` matrix.
pub fn sample_negatives(codebook: &Tensor, positive: usize, n: usize, seed: u64) -> Result<Tensor> {
    let (size, _) = codebook.dims2();
    let idx = sample_negative_indices(size, positive, n, seed)?;
    let rows: Vec<Tensor> = idx.iter().map(|&i| codebook.rows(i, 1)).collect();
    Tensor::vstack(&rows)
}
