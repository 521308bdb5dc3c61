//! Every registered operator, checked against central differences on ten
//! seeded random inputs.

use dvcc_core::rng;
use dvcc_core::tensor::{grad_check, Axis, Graph, Tensor, Var};
use dvcc_core::Result;
use rand::Rng;

type OpFn = fn(&mut Graph, Var) -> Result<Var>;

const ROWS: usize = 3;
const COLS: usize = 4;

fn input(seed: u64, len: usize, positive: bool) -> Tensor {
    let mut r = rng::rng(seed);
    let data = (0..len)
        .map(|_| {
            let v: f64 = r.gen_range(-1.5..1.5);
            if positive {
                v.abs() + 0.2
            } else {
                v
            }
        })
        .collect();
    Tensor::new(vec![len], data).unwrap()
}

/// First and second `ROWS × COLS` operands packed in a flat input.
fn pair(g: &mut Graph, x: Var) -> Result<(Var, Var)> {
    let m = g.reshape(x, &[2 * ROWS, COLS])?;
    let a = g.slice(m, Axis::Rows, 0, ROWS)?;
    let b = g.slice(m, Axis::Rows, ROWS, ROWS)?;
    Ok((a, b))
}

fn single(g: &mut Graph, x: Var) -> Result<Var> {
    g.reshape(x, &[ROWS, COLS])
}

/// Contract a tensor-valued op into a scalar with fixed, non-uniform weights
/// so every output coordinate matters.
fn contract(g: &mut Graph, y: Var) -> Result<Var> {
    let n = g.value(y).numel();
    let w: Vec<f64> = (0..n).map(|i| 0.3 + 0.17 * i as f64).collect();
    let shape = g.shape(y).to_vec();
    let w = g.constant(Tensor::new(shape, w)?);
    let p = g.mul(y, w)?;
    Ok(g.sum_all(p))
}

fn check(name: &str, len: usize, positive: bool, f: OpFn) {
    for s in 0..10 {
        let x = input(rng::derive(&[rng::tag(name), s]), len, positive);
        let err = grad_check(&f, &x, 1e-5).unwrap();
        assert!(err < 1e-4, "{name} seed {s}: relative error {err}");
    }
}

const P: usize = 2 * ROWS * COLS;
const S: usize = ROWS * COLS;

#[test]
fn binary_elementwise() {
    check("add", P, false, |g, x| {
        let (a, b) = pair(g, x)?;
        let y = g.add(a, b)?;
        contract(g, y)
    });
    check("sub", P, false, |g, x| {
        let (a, b) = pair(g, x)?;
        let y = g.sub(a, b)?;
        contract(g, y)
    });
    check("mul", P, false, |g, x| {
        let (a, b) = pair(g, x)?;
        let y = g.mul(a, b)?;
        contract(g, y)
    });
    check("div", P, true, |g, x| {
        let (a, b) = pair(g, x)?;
        let y = g.div(a, b)?;
        contract(g, y)
    });
    check("scale", S, false, |g, x| {
        let a = single(g, x)?;
        let y = g.scale(a, -2.5);
        contract(g, y)
    });
    check("add_row", S + COLS, false, |g, x| {
        let a = g.slice(x, Axis::Cols, 0, S)?;
        let a = g.reshape(a, &[ROWS, COLS])?;
        let r = g.slice(x, Axis::Cols, S, COLS)?;
        let y = g.add_row(a, r)?;
        contract(g, y)
    });
}

#[test]
fn products_and_layout() {
    check("matmul", P, false, |g, x| {
        let (a, b) = pair(g, x)?;
        let bt = g.transpose(b);
        let y = g.matmul(a, bt)?;
        contract(g, y)
    });
    check("matmul_nt", P, false, |g, x| {
        let (a, b) = pair(g, x)?;
        let y = g.matmul_nt(a, b)?;
        contract(g, y)
    });
    check("transpose", S, false, |g, x| {
        let a = single(g, x)?;
        let y = g.transpose(a);
        contract(g, y)
    });
    check("concat", P, false, |g, x| {
        let (a, b) = pair(g, x)?;
        let r = g.concat(&[a, b], Axis::Rows)?;
        let c = g.concat(&[b, a], Axis::Cols)?;
        let cr = contract(g, c)?;
        let rr = contract(g, r)?;
        g.add(cr, rr)
    });
    check("slice", S, false, |g, x| {
        let a = single(g, x)?;
        let s = g.slice(a, Axis::Cols, 1, 2)?;
        contract(g, s)
    });
    check("unfold_time", S, false, |g, x| {
        let a = single(g, x)?;
        let u = g.unfold_time(a, 3)?;
        contract(g, u)
    });
    check("gather_rows", S, false, |g, x| {
        let a = single(g, x)?;
        let y = g.gather_rows(a, &[2, 0, 2])?;
        contract(g, y)
    });
    check("replace_rows", S + COLS, false, |g, x| {
        let a = g.slice(x, Axis::Cols, 0, S)?;
        let a = g.reshape(a, &[ROWS, COLS])?;
        let r = g.slice(x, Axis::Cols, S, COLS)?;
        let y = g.replace_rows(a, r, &[true, false, true])?;
        contract(g, y)
    });
}

#[test]
fn reductions() {
    check("sum_rows", S, false, |g, x| {
        let a = single(g, x)?;
        let y = g.sum(a, Axis::Rows);
        contract(g, y)
    });
    check("sum_cols", S, false, |g, x| {
        let a = single(g, x)?;
        let y = g.sum(a, Axis::Cols);
        contract(g, y)
    });
    check("mean_rows", S, false, |g, x| {
        let a = single(g, x)?;
        let y = g.mean(a, Axis::Rows);
        contract(g, y)
    });
    check("mean_cols", S, false, |g, x| {
        let a = single(g, x)?;
        let y = g.mean(a, Axis::Cols);
        contract(g, y)
    });
    check("mean_all", S, false, |g, x| Ok(g.mean_all(x)));
    check("l1_norm", S, false, |g, x| {
        let a = single(g, x)?;
        let y = g.l1_norm_rows(a);
        contract(g, y)
    });
    check("l2_norm", S, false, |g, x| {
        let a = single(g, x)?;
        let y = g.l2_norm_rows(a);
        contract(g, y)
    });
    check("cosine", P, false, |g, x| {
        let (a, b) = pair(g, x)?;
        let y = g.cosine_rows(a, b, 1e-9)?;
        contract(g, y)
    });
}

#[test]
fn pointwise_and_normalisation() {
    check("square", S, false, |g, x| {
        let y = g.square(x);
        contract(g, y)
    });
    check("sqrt", S, true, |g, x| {
        let y = g.sqrt(x);
        contract(g, y)
    });
    check("exp", S, false, |g, x| {
        let y = g.exp(x);
        contract(g, y)
    });
    check("log", S, true, |g, x| {
        let y = g.log(x);
        contract(g, y)
    });
    check("sigmoid", S, false, |g, x| {
        let y = g.sigmoid(x);
        contract(g, y)
    });
    check("clamp_min", S, false, |g, x| {
        let y = g.clamp_min(x, 0.0);
        contract(g, y)
    });
    check("gelu", S, false, |g, x| {
        let y = g.gelu(x);
        contract(g, y)
    });
    check("softmax", S, false, |g, x| {
        let a = single(g, x)?;
        let y = g.softmax(a);
        contract(g, y)
    });
    check("layer_norm", S + 2 * COLS, false, |g, x| {
        let a = g.slice(x, Axis::Cols, 0, S)?;
        let a = g.reshape(a, &[ROWS, COLS])?;
        let gamma = g.slice(x, Axis::Cols, S, COLS)?;
        let beta = g.slice(x, Axis::Cols, S + COLS, COLS)?;
        let y = g.layer_norm(a, gamma, beta, 1e-5)?;
        contract(g, y)
    });
}

#[test]
fn stop_gradient_is_transparent_forward_and_blocks_backward() {
    let x = input(99, S, false);
    let mut g = Graph::new();
    let v = g.variable(x.clone());
    let s = g.stop_gradient(v);
    assert_eq!(
        g.value(s).data().iter().map(|f| f.to_bits()).collect::<Vec<_>>(),
        x.data().iter().map(|f| f.to_bits()).collect::<Vec<_>>()
    );
    let sq = g.square(s);
    let l = g.sum_all(sq);
    let gr = g.backward(l).unwrap();
    assert!(gr.wrt(v).is_none());
}

#[test]
fn identical_op_sequences_are_bitwise_identical() {
    let run = || {
        let x = input(5, P, false);
        let mut g = Graph::new();
        let v = g.variable(x);
        let (a, b) = pair(&mut g, v).unwrap();
        let y = g.matmul_nt(a, b).unwrap();
        let s = g.softmax(y);
        let l = contract(&mut g, s).unwrap();
        let gr = g.backward(l).unwrap();
        (g.value(l).clone(), gr.wrt(v).unwrap().clone())
    };
    let (l1, g1) = run();
    let (l2, g2) = run();
    assert_eq!(l1.data()[0].to_bits(), l2.data()[0].to_bits());
    assert!(g1.data().iter().zip(g2.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
}
