//! Tape-based reverse-mode autodiff.
//!
//! Nodes are appended in evaluation order, so the tape is always a valid
//! topological order and reverse iteration is a valid backward schedule.
//! Each graph is self-contained and `Send`; parameters are copied in as
//! leaves, which lets independent graphs run on independent threads.

use std::collections::{BTreeMap, HashMap};

use super::kernels::{dot, gemm_nn, gemm_nt, gemm_tn};
use super::{Module, Param, Tensor};
use crate::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Reduction axis of a rank-2 tensor. `Rows` reduces across rows (result is
/// `[1, m]`), `Cols` reduces across columns (result is `[n, 1]`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Square,
    Sqrt,
    Exp,
    Log,
    Sigmoid,
    Gelu,
    Abs,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

impl Unary {
    fn forward(self, x: f64) -> f64 {
        match self {
            Unary::Square => x * x,
            Unary::Sqrt => x.sqrt(),
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Sigmoid => sigmoid(x),
            Unary::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()),
            Unary::Abs => x.abs(),
        }
    }

    /// dy/dx given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Square => 2.0 * x,
            Unary::Sqrt => {
                if y > 0.0 {
                    0.5 / y
                } else {
                    0.0
                }
            }
            Unary::Exp => y,
            Unary::Log => 1.0 / x,
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Gelu => {
                let u = GELU_C * (x + 0.044715 * x * x * x);
                let t = u.tanh();
                let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
            }
            Unary::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddRow(Var, Var),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Transpose(Var),
    Sum(Var, Axis),
    Mean(Var, Axis),
    SumAll(Var),
    MeanAll(Var),
    Unary(Var, Unary),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    L1Rows(Var),
    L2Rows(Var),
    CosineRows {
        a: Var,
        b: Var,
        eps: f64,
    },
    Concat(Vec<Var>, Axis),
    Slice {
        x: Var,
        axis: Axis,
        start: usize,
    },
    StopGradient,
    Unfold {
        x: Var,
        kernel: usize,
    },
    GatherRows(Var, Vec<usize>),
    ReplaceRows {
        x: Var,
        fill: Var,
        mask: Vec<bool>,
    },
    Reshape(Var),
    ClampMin(Var, f64),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// A recording of one forward computation.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    track_params: bool,
    params: Vec<(String, Var)>,
    param_index: HashMap<String, Var>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

impl Graph {
    /// A graph that records gradients for parameters and variables.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            track_params: true,
            params: Vec::new(),
            param_index: HashMap::new(),
        }
    }

    /// A graph that treats parameters as constants.
    pub fn inference() -> Self {
        Self {
            track_params: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf whose gradient is recorded.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Binds a parameter. Binding the same name twice returns the same leaf.
    pub fn param(&mut self, p: &Param) -> Var {
        if let Some(&v) = self.param_index.get(p.name()) {
            return v;
        }
        let v = self.push(p.value.clone(), Op::Leaf, self.track_params);
        if self.track_params {
            self.params.push((p.name().to_string(), v));
        }
        self.param_index.insert(p.name().to_string(), v);
        v
    }

    fn binary_same(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        mk: fn(Var, Var) -> Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(op, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, mk(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("div", a, b, |x, y| x / y, Op::Div)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x * c).collect())
            .expect("same shape");
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, c), ng)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x + c).collect())
            .expect("same shape");
        let ng = self.ng(a);
        self.push(out, Op::AddScalar(a), ng)
    }

    /// `a[n, m] + row[1, m]`, the row added to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        let (n, m) = ta.dims2();
        if tr.numel() != m {
            return Err(shape_err("add_row", ta, tr));
        }
        let mut data = ta.data().to_vec();
        for i in 0..n {
            for (d, r) in data[i * m..(i + 1) * m].iter_mut().zip(tr.data()) {
                *d += r;
            }
        }
        let out = Tensor::new(vec![n, m], data)?;
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(out, Op::AddRow(a, row), ng))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ` without materialising the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (n, k) = ta.dims2();
        let (m, k2) = tb.dims2();
        if k != k2 {
            return Err(shape_err("matmul_nt", ta, tb));
        }
        let mut data = vec![0.0; n * m];
        gemm_nt(ta.data(), tb.data(), &mut data, n, k, m);
        let out = Tensor::new(vec![n, m], data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMulNT(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose2();
        let ng = self.ng(a);
        self.push(out, Op::Transpose(a), ng)
    }

    fn reduce(&self, a: Var, axis: Axis, mean: bool) -> Tensor {
        let t = self.value(a);
        let (n, m) = t.dims2();
        let d = t.data();
        let out = match axis {
            Axis::Rows => {
                let mut o = vec![0.0; m];
                for i in 0..n {
                    for (acc, v) in o.iter_mut().zip(&d[i * m..(i + 1) * m]) {
                        *acc += v;
                    }
                }
                if mean {
                    o.iter_mut().for_each(|v| *v /= n as f64);
                }
                Tensor::new(vec![1, m], o)
            }
            Axis::Cols => {
                let o = (0..n)
                    .map(|i| {
                        let s: f64 = d[i * m..(i + 1) * m].iter().sum();
                        if mean {
                            s / m as f64
                        } else {
                            s
                        }
                    })
                    .collect();
                Tensor::new(vec![n, 1], o)
            }
        };
        out.expect("reduction shape")
    }

    pub fn sum(&mut self, a: Var, axis: Axis) -> Var {
        let out = self.reduce(a, axis, false);
        let ng = self.ng(a);
        self.push(out, Op::Sum(a, axis), ng)
    }

    pub fn mean(&mut self, a: Var, axis: Axis) -> Var {
        let out = self.reduce(a, axis, true);
        let ng = self.ng(a);
        self.push(out, Op::Mean(a, axis), ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::MeanAll(a), ng)
    }

    fn unary(&mut self, a: Var, u: Unary) -> Var {
        let t = self.value(a);
        let out = Tensor::new(
            t.shape().to_vec(),
            t.data().iter().map(|&x| u.forward(x)).collect(),
        )
        .expect("same shape");
        let ng = self.ng(a);
        self.push(out, Op::Unary(a, u), ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Square)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sqrt)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Log)
    }

    /// Elementwise `max(x, floor)`; gradient flows only where `x > floor`.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        let t = self.value(a);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x.max(floor)).collect())
            .expect("same shape");
        let ng = self.ng(a);
        self.push(out, Op::ClampMin(a, floor), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Gelu)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Abs)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (n, m) = t.dims2();
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(m.max(1)).take(n) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let ng = self.ng(a);
        self.push(out, Op::Softmax(a), ng)
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let (n, m) = tx.dims2();
        if tg.numel() != m {
            return Err(shape_err("layer_norm", tx, tg));
        }
        if tb.numel() != m {
            return Err(shape_err("layer_norm", tx, tb));
        }
        let mut xhat = vec![0.0; n * m];
        let mut rstd = vec![0.0; n];
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let row = &tx.data()[i * m..(i + 1) * m];
            let mu = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / m as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..m {
                let h = (row[j] - mu) * r;
                xhat[i * m + j] = h;
                out[i * m + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// Row-wise L1 norm, `[n, m] → [n, 1]`.
    pub fn l1_norm_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (n, m) = t.dims2();
        let data = (0..n)
            .map(|i| t.data()[i * m..(i + 1) * m].iter().map(|v| v.abs()).sum())
            .collect();
        let out = Tensor::new(vec![n, 1], data).expect("shape");
        let ng = self.ng(a);
        self.push(out, Op::L1Rows(a), ng)
    }

    /// Row-wise L2 norm, `[n, m] → [n, 1]`.
    pub fn l2_norm_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (n, m) = t.dims2();
        let data = (0..n)
            .map(|i| {
                let r = &t.data()[i * m..(i + 1) * m];
                dot(r, r).sqrt()
            })
            .collect();
        let out = Tensor::new(vec![n, 1], data).expect("shape");
        let ng = self.ng(a);
        self.push(out, Op::L2Rows(a), ng)
    }

    /// Cosine similarity between matching rows,
    /// `⟨a_i, b_i⟩ / (max(‖a_i‖, eps)·max(‖b_i‖, eps))`, giving `[n, 1]`.
    pub fn cosine_rows(&mut self, a: Var, b: Var, eps: f64) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.dims2() != tb.dims2() {
            return Err(shape_err("cosine_rows", ta, tb));
        }
        let (n, m) = ta.dims2();
        let data = (0..n)
            .map(|i| {
                let (ra, rb) = (&ta.data()[i * m..(i + 1) * m], &tb.data()[i * m..(i + 1) * m]);
                dot(ra, rb) / (dot(ra, ra).sqrt().max(eps) * dot(rb, rb).sqrt().max(eps))
            })
            .collect();
        let out = Tensor::new(vec![n, 1], data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::CosineRows { a, b, eps }, ng))
    }

    pub fn concat(&mut self, parts: &[Var], axis: Axis) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let (_, c0) = self.value(*first).dims2();
        let (r0, _) = self.value(*first).dims2();
        let out = match axis {
            Axis::Rows => {
                let mut data = Vec::new();
                let mut rows = 0;
                for &p in parts {
                    let t = self.value(p);
                    let (r, c) = t.dims2();
                    if c != c0 {
                        return Err(shape_err("concat", self.value(*first), t));
                    }
                    rows += r;
                    data.extend_from_slice(t.data());
                }
                Tensor::new(vec![rows, c0], data)?
            }
            Axis::Cols => {
                let mut cols = 0;
                for &p in parts {
                    let t = self.value(p);
                    let (r, c) = t.dims2();
                    if r != r0 {
                        return Err(shape_err("concat", self.value(*first), t));
                    }
                    cols += c;
                }
                let mut data = vec![0.0; r0 * cols];
                let mut off = 0;
                for &p in parts {
                    let t = self.value(p);
                    let (_, c) = t.dims2();
                    for i in 0..r0 {
                        data[i * cols + off..i * cols + off + c]
                            .copy_from_slice(&t.data()[i * c..(i + 1) * c]);
                    }
                    off += c;
                }
                Tensor::new(vec![r0, cols], data)?
            }
        };
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(out, Op::Concat(parts.to_vec(), axis), ng))
    }

    /// Contiguous slice of `len` rows (`Axis::Rows`) or columns (`Axis::Cols`).
    pub fn slice(&mut self, x: Var, axis: Axis, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (n, m) = t.dims2();
        let out = match axis {
            Axis::Rows => {
                if start + len > n {
                    return Err(Error::Shape {
                        op: "slice",
                        lhs: t.shape().to_vec(),
                        rhs: vec![start, len],
                    });
                }
                t.rows(start, len)
            }
            Axis::Cols => {
                if start + len > m {
                    return Err(Error::Shape {
                        op: "slice",
                        lhs: t.shape().to_vec(),
                        rhs: vec![start, len],
                    });
                }
                let mut data = Vec::with_capacity(n * len);
                for i in 0..n {
                    data.extend_from_slice(&t.data()[i * m + start..i * m + start + len]);
                }
                Tensor::new(vec![n, len], data)?
            }
        };
        let ng = self.ng(x);
        Ok(self.push(out, Op::Slice { x, axis, start }, ng))
    }

    /// Identity forward, zero backward.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let out = self.value(a).clone();
        self.push(out, Op::StopGradient, false)
    }

    /// Stride-1 "same" unfold for 1-D convolution over the row (time) axis:
    /// `[T, C] → [T, kernel·C]`, zero padded, column block `j` holding the
    /// rows shifted by `j − (kernel − 1)/2`.
    pub fn unfold_time(&mut self, x: Var, kernel: usize) -> Result<Var> {
        if kernel == 0 || kernel.is_multiple_of(2) {
            return Err(Error::invalid(format!("unfold kernel must be odd, got {kernel}")));
        }
        let t = self.value(x);
        let (n, c) = t.dims2();
        let pad = (kernel - 1) / 2;
        let w = kernel * c;
        let mut data = vec![0.0; n * w];
        for row in 0..n {
            for j in 0..kernel {
                let src = row as isize + j as isize - pad as isize;
                if src >= 0 && (src as usize) < n {
                    let s = src as usize;
                    data[row * w + j * c..row * w + (j + 1) * c]
                        .copy_from_slice(&t.data()[s * c..(s + 1) * c]);
                }
            }
        }
        let out = Tensor::new(vec![n, w], data)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::Unfold { x, kernel }, ng))
    }

    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let (n, m) = t.dims2();
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::Shape {
                op: "gather_rows",
                lhs: t.shape().to_vec(),
                rhs: vec![bad],
            });
        }
        let mut data = Vec::with_capacity(indices.len() * m);
        for &i in indices {
            data.extend_from_slice(&t.data()[i * m..(i + 1) * m]);
        }
        let out = Tensor::new(vec![indices.len(), m], data)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::GatherRows(x, indices.to_vec()), ng))
    }

    /// Replaces every row `t` with `mask[t]` set by the single row `fill`.
    pub fn replace_rows(&mut self, x: Var, fill: Var, mask: &[bool]) -> Result<Var> {
        let (tx, tf) = (self.value(x), self.value(fill));
        let (n, m) = tx.dims2();
        if tf.numel() != m || mask.len() != n {
            return Err(shape_err("replace_rows", tx, tf));
        }
        let mut data = tx.data().to_vec();
        for (i, &masked) in mask.iter().enumerate() {
            if masked {
                data[i * m..(i + 1) * m].copy_from_slice(tf.data());
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let ng = self.ng(x) || self.ng(fill);
        Ok(self.push(
            out,
            Op::ReplaceRows {
                x,
                fill,
                mask: mask.to_vec(),
            },
            ng,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::Reshape(x), ng))
    }

    /// Gradients of a scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let t = self.value(loss);
        if t.numel() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                t.shape()
            )));
        }
        self.backward_seeded(&[(loss, Tensor::full(t.shape(), 1.0))])
    }

    /// Backward pass from arbitrary upstream gradients. Used when a loss that
    /// couples several graphs is evaluated on a separate graph.
    pub fn backward_seeded(&self, seeds: &[(Var, Tensor)]) -> Result<Gradients> {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut last = 0;
        for (v, g) in seeds {
            let val = self.value(*v);
            if g.numel() != val.numel() {
                return Err(shape_err("backward seed", val, g));
            }
            if !self.ng(*v) {
                continue;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; val.numel()]);
            for (s, x) in slot.iter_mut().zip(g.data()) {
                *s += x;
            }
            last = last.max(v.0 + 1);
        }

        for i in (0..last).rev() {
            let (lo, hi) = grads.split_at_mut(i);
            let Some(gy) = hi[0].as_ref() else { continue };
            self.propagate(i, gy, lo);
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.map(|g| Tensor::new(n.value.shape().to_vec(), g).expect("shape")))
            .collect();
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn slot<'a>(&self, lo: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        if !self.ng(v) {
            return None;
        }
        let n = self.value(v).numel();
        Some(lo[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(&self, i: usize, gy: &[f64], lo: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::Add(a, b) => {
                if let Some(g) = self.slot(lo, *a) {
                    add_into(g, gy);
                }
                if let Some(g) = self.slot(lo, *b) {
                    add_into(g, gy);
                }
            }
            Op::Sub(a, b) => {
                if let Some(g) = self.slot(lo, *a) {
                    add_into(g, gy);
                }
                if let Some(g) = self.slot(lo, *b) {
                    g.iter_mut().zip(gy).for_each(|(g, d)| *g -= d);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(g) = self.slot(lo, *a) {
                    for k in 0..g.len() {
                        g[k] += gy[k] * vb[k];
                    }
                }
                if let Some(g) = self.slot(lo, *b) {
                    for k in 0..g.len() {
                        g[k] += gy[k] * va[k];
                    }
                }
            }
            Op::Div(a, b) => {
                let vb = self.value(*b).data();
                if let Some(g) = self.slot(lo, *a) {
                    for k in 0..g.len() {
                        g[k] += gy[k] / vb[k];
                    }
                }
                if let Some(g) = self.slot(lo, *b) {
                    for k in 0..g.len() {
                        g[k] -= gy[k] * y[k] / vb[k];
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(g) = self.slot(lo, *a) {
                    g.iter_mut().zip(gy).for_each(|(g, d)| *g += c * d);
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                if let Some(g) = self.slot(lo, *a) {
                    add_into(g, gy);
                }
            }
            Op::AddRow(a, row) => {
                if let Some(g) = self.slot(lo, *a) {
                    add_into(g, gy);
                }
                let m = self.value(*row).numel();
                if let Some(g) = self.slot(lo, *row) {
                    for chunk in gy.chunks(m) {
                        add_into(g, chunk);
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (n, k) = ta.dims2();
                let (_, m) = tb.dims2();
                if let Some(g) = self.slot(lo, *a) {
                    gemm_nt(gy, tb.data(), g, n, m, k);
                }
                if let Some(g) = self.slot(lo, *b) {
                    gemm_tn(ta.data(), gy, g, k, n, m);
                }
            }
            Op::MatMulNT(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (n, k) = ta.dims2();
                let (m, _) = tb.dims2();
                if let Some(g) = self.slot(lo, *a) {
                    gemm_nn(gy, tb.data(), g, n, m, k);
                }
                if let Some(g) = self.slot(lo, *b) {
                    gemm_tn(gy, ta.data(), g, m, n, k);
                }
            }
            Op::Transpose(a) => {
                let (n, m) = self.value(*a).dims2();
                if let Some(g) = self.slot(lo, *a) {
                    for r in 0..n {
                        for c in 0..m {
                            g[r * m + c] += gy[c * n + r];
                        }
                    }
                }
            }
            Op::Sum(a, axis) | Op::Mean(a, axis) => {
                let mean = matches!(node.op, Op::Mean(..));
                let (n, m) = self.value(*a).dims2();
                if let Some(g) = self.slot(lo, *a) {
                    match axis {
                        Axis::Rows => {
                            let s = if mean { 1.0 / n as f64 } else { 1.0 };
                            for r in 0..n {
                                for c in 0..m {
                                    g[r * m + c] += gy[c] * s;
                                }
                            }
                        }
                        Axis::Cols => {
                            let s = if mean { 1.0 / m as f64 } else { 1.0 };
                            for r in 0..n {
                                for c in 0..m {
                                    g[r * m + c] += gy[r] * s;
                                }
                            }
                        }
                    }
                }
            }
            Op::SumAll(a) => {
                if let Some(g) = self.slot(lo, *a) {
                    g.iter_mut().for_each(|g| *g += gy[0]);
                }
            }
            Op::MeanAll(a) => {
                let n = self.value(*a).numel() as f64;
                if let Some(g) = self.slot(lo, *a) {
                    g.iter_mut().for_each(|g| *g += gy[0] / n);
                }
            }
            Op::Unary(a, u) => {
                let x = self.value(*a).data();
                if let Some(g) = self.slot(lo, *a) {
                    for k in 0..g.len() {
                        g[k] += gy[k] * u.derivative(x[k], y[k]);
                    }
                }
            }
            Op::Softmax(a) => {
                let (_, m) = node.value.dims2();
                if let Some(g) = self.slot(lo, *a) {
                    for ((gr, yr), dr) in g.chunks_mut(m).zip(y.chunks(m)).zip(gy.chunks(m)) {
                        let s = dot(yr, dr);
                        for k in 0..m {
                            gr[k] += yr[k] * (dr[k] - s);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (n, m) = node.value.dims2();
                let gam = self.value(*gamma).data();
                if let Some(g) = self.slot(lo, *x) {
                    let mut dxhat = vec![0.0; m];
                    for r in 0..n {
                        let row_gy = &gy[r * m..(r + 1) * m];
                        let row_xh = &xhat[r * m..(r + 1) * m];
                        for c in 0..m {
                            dxhat[c] = row_gy[c] * gam[c];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / m as f64;
                        let mean_dx = dot(&dxhat, row_xh) / m as f64;
                        for c in 0..m {
                            g[r * m + c] += rstd[r] * (dxhat[c] - mean_d - row_xh[c] * mean_dx);
                        }
                    }
                }
                if let Some(g) = self.slot(lo, *gamma) {
                    for r in 0..n {
                        for c in 0..m {
                            g[c] += gy[r * m + c] * xhat[r * m + c];
                        }
                    }
                }
                if let Some(g) = self.slot(lo, *beta) {
                    for chunk in gy.chunks(m) {
                        add_into(g, chunk);
                    }
                }
            }
            Op::L1Rows(a) => {
                let t = self.value(*a);
                let (_, m) = t.dims2();
                if let Some(g) = self.slot(lo, *a) {
                    for (k, (gk, &x)) in g.iter_mut().zip(t.data()).enumerate() {
                        *gk += gy[k / m] * Unary::Abs.derivative(x, 0.0);
                    }
                }
            }
            Op::L2Rows(a) => {
                let t = self.value(*a);
                let (_, m) = t.dims2();
                if let Some(g) = self.slot(lo, *a) {
                    for (k, (gk, &x)) in g.iter_mut().zip(t.data()).enumerate() {
                        let norm = y[k / m];
                        if norm > 0.0 {
                            *gk += gy[k / m] * x / norm;
                        }
                    }
                }
            }
            Op::ClampMin(a, floor) => {
                let t = self.value(*a);
                if let Some(g) = self.slot(lo, *a) {
                    for ((gk, &x), &d) in g.iter_mut().zip(t.data()).zip(gy) {
                        if x > *floor {
                            *gk += d;
                        }
                    }
                }
            }
            Op::CosineRows { a, b, eps } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (n, m) = ta.dims2();
                let mut ga = vec![0.0; n * m];
                let mut gb = vec![0.0; n * m];
                for r in 0..n {
                    let (ra, rb) = (&ta.data()[r * m..(r + 1) * m], &tb.data()[r * m..(r + 1) * m]);
                    let (na, nb) = (dot(ra, ra).sqrt(), dot(rb, rb).sqrt());
                    let (da, db) = (na.max(*eps), nb.max(*eps));
                    let d = dot(ra, rb);
                    let s = gy[r];
                    for c in 0..m {
                        let mut va = rb[c] / (da * db);
                        if na > *eps {
                            va -= d / (da * da * db) * ra[c] / na;
                        }
                        let mut vb = ra[c] / (da * db);
                        if nb > *eps {
                            vb -= d / (da * db * db) * rb[c] / nb;
                        }
                        ga[r * m + c] = s * va;
                        gb[r * m + c] = s * vb;
                    }
                }
                if let Some(g) = self.slot(lo, *a) {
                    add_into(g, &ga);
                }
                if let Some(g) = self.slot(lo, *b) {
                    add_into(g, &gb);
                }
            }
            Op::Concat(parts, axis) => {
                let (_, cols) = node.value.dims2();
                let mut off = 0;
                for &p in parts {
                    let (r, c) = self.value(p).dims2();
                    if let Some(g) = self.slot(lo, p) {
                        match axis {
                            Axis::Rows => add_into(g, &gy[off * cols..(off + r) * cols]),
                            Axis::Cols => {
                                for i in 0..r {
                                    add_into(
                                        &mut g[i * c..(i + 1) * c],
                                        &gy[i * cols + off..i * cols + off + c],
                                    );
                                }
                            }
                        }
                    }
                    off += match axis {
                        Axis::Rows => r,
                        Axis::Cols => c,
                    };
                }
            }
            Op::Slice { x, axis, start } => {
                let (n, m) = self.value(*x).dims2();
                let (on, om) = node.value.dims2();
                if let Some(g) = self.slot(lo, *x) {
                    match axis {
                        Axis::Rows => add_into(&mut g[start * m..(start + on) * m], gy),
                        Axis::Cols => {
                            for i in 0..n {
                                add_into(
                                    &mut g[i * m + start..i * m + start + om],
                                    &gy[i * om..(i + 1) * om],
                                );
                            }
                        }
                    }
                }
            }
            Op::Unfold { x, kernel } => {
                let (n, c) = self.value(*x).dims2();
                let pad = (kernel - 1) / 2;
                let w = kernel * c;
                if let Some(g) = self.slot(lo, *x) {
                    for row in 0..n {
                        for j in 0..*kernel {
                            let src = row as isize + j as isize - pad as isize;
                            if src >= 0 && (src as usize) < n {
                                let s = src as usize;
                                add_into(
                                    &mut g[s * c..(s + 1) * c],
                                    &gy[row * w + j * c..row * w + (j + 1) * c],
                                );
                            }
                        }
                    }
                }
            }
            Op::GatherRows(x, indices) => {
                let (_, m) = self.value(*x).dims2();
                if let Some(g) = self.slot(lo, *x) {
                    for (k, &i) in indices.iter().enumerate() {
                        add_into(&mut g[i * m..(i + 1) * m], &gy[k * m..(k + 1) * m]);
                    }
                }
            }
            Op::ReplaceRows { x, fill, mask } => {
                let (_, m) = node.value.dims2();
                if let Some(g) = self.slot(lo, *x) {
                    for (i, &masked) in mask.iter().enumerate() {
                        if !masked {
                            add_into(&mut g[i * m..(i + 1) * m], &gy[i * m..(i + 1) * m]);
                        }
                    }
                }
                if let Some(g) = self.slot(lo, *fill) {
                    for (i, &masked) in mask.iter().enumerate() {
                        if masked {
                            add_into(g, &gy[i * m..(i + 1) * m]);
                        }
                    }
                }
            }
        }
    }
}

#[inline]
fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Result of a backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(String, Var)>,
}

impl Gradients {
    /// Gradient with respect to any node, `None` if it does not depend on
    /// the seeds or is not tracked.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Parameter gradients keyed by parameter name.
    pub fn params(&self) -> GradMap {
        let mut map = BTreeMap::new();
        for (name, v) in &self.params {
            if let Some(g) = self.wrt(*v) {
                map.insert(name.clone(), g.clone());
            }
        }
        GradMap(map)
    }

    /// Adds parameter gradients into the matching `Param::grad` buffers.
    pub fn accumulate_into(&self, module: &mut dyn Module) {
        self.params().accumulate_into(module);
    }
}

/// Parameter gradients by name; reducible across per-sample graphs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradMap(pub BTreeMap<String, Tensor>);

impl GradMap {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    pub fn merge(&mut self, other: GradMap) {
        for (k, v) in other.0 {
            match self.0.get_mut(&k) {
                Some(acc) => add_into(acc.data_mut(), v.data()),
                None => {
                    self.0.insert(k, v);
                }
            }
        }
    }

    /// Sums a sequence of maps in iteration order.
    pub fn sum(maps: impl IntoIterator<Item = GradMap>) -> GradMap {
        let mut acc = GradMap::default();
        for m in maps {
            acc.merge(m);
        }
        acc
    }

    pub fn accumulate_into(&self, module: &mut dyn Module) {
        module.visit_params_mut(&mut |p| {
            if let Some(g) = self.0.get(p.name()) {
                match p.grad.as_mut() {
                    Some(acc) => add_into(acc.data_mut(), g.data()),
                    None => p.grad = Some(g.clone()),
                }
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn catalog_examples() {
        let mut g = Graph::new();
        let a = g.constant(t(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let i = g.constant(Tensor::identity(2));
        let p = g.matmul(a, i).unwrap();
        assert_eq!(g.value(p), g.value(a));

        let z = g.constant(Tensor::row(&[0.0, 0.0, 0.0]));
        let s = g.softmax(z);
        for v in g.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }

        let x = g.constant(Tensor::row(&[3.0, 4.0]));
        let c = g.cosine_rows(x, x, 0.0).unwrap();
        assert!((g.item(c) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_reports_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[3, 2]));
        match g.add(a, b) {
            Err(Error::Shape { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![3, 2]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
        assert!(g.matmul(a, a).is_err());
    }

    #[test]
    fn backward_examples() {
        // sum(x^2) at [1, 2]
        let mut g = Graph::new();
        let x = g.variable(Tensor::row(&[1.0, 2.0]));
        let sq = g.square(x);
        let l = g.sum_all(sq);
        let gr = g.backward(l).unwrap();
        assert_eq!(gr.wrt(x).unwrap().data(), &[2.0, 4.0]);

        // stop_gradient(x) * y at x=3, y=5
        let mut g = Graph::new();
        let x = g.variable(Tensor::scalar(3.0));
        let y = g.variable(Tensor::scalar(5.0));
        let sx = g.stop_gradient(x);
        let l = g.mul(sx, y).unwrap();
        let gr = g.backward(l).unwrap();
        assert!(gr.wrt(x).is_none_or(|t| t.data() == [0.0]));
        assert_eq!(gr.wrt(y).unwrap().data(), &[3.0]);

        // mean over 4 elements
        let mut g = Graph::new();
        let x = g.variable(Tensor::row(&[1.0, -2.0, 5.0, 0.5]));
        let l = g.mean_all(x);
        let gr = g.backward(l).unwrap();
        assert_eq!(gr.wrt(x).unwrap().data(), &[0.25; 4]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::row(&[1.0, 2.0]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn repeated_accumulation_adds() {
        struct One(Param);
        impl Module for One {
            fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
                f(&self.0)
            }
            fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
                f(&mut self.0)
            }
        }
        let mut m = One(Param::new("w", Tensor::row(&[1.0, 2.0])));
        let mut g = Graph::new();
        let w = g.param(&m.0);
        let sq = g.square(w);
        let l = g.sum_all(sq);
        let gr = g.backward(l).unwrap();
        gr.accumulate_into(&mut m);
        gr.accumulate_into(&mut m);
        assert_eq!(m.0.grad.as_ref().unwrap().data(), &[4.0, 8.0]);
        m.zero_grad();
        assert_eq!(m.0.grad.as_ref().unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn inference_graph_tracks_nothing() {
        let p = Param::new("w", Tensor::row(&[1.0]));
        let mut g = Graph::inference();
        let w = g.param(&p);
        let l = g.sum_all(w);
        let gr = g.backward(l).unwrap();
        assert!(gr.params().0.is_empty());
    }
}
