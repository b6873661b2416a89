//! Per-primitive gradient validation: every differentiable primitive is
//! checked against central differences on seeded random instances, plus the
//! engine's contract edge cases (broadcast rules, error paths, linearity,
//! determinism).

use std::sync::Arc;

use neco_core::seed::stage_rng;
use neco_core::tensor::{finite_difference_check, PointwiseFn, Tape, Tensor, Var};
use rand::Rng;

const EPS: f64 = 1e-6;
const TOL: f64 = 1e-5;
const INSTANCES: u64 = 10;

fn rand_tensor(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Runs the finite-difference check on `INSTANCES` seeded points and asserts
/// the worst relative error stays within tolerance.
fn assert_grad<F>(name: &str, shape: &[usize], lo: f64, hi: f64, build: F)
where
    F: Fn(&mut Tape, Var) -> neco_core::Result<Var>,
{
    for inst in 0..INSTANCES {
        let mut rng = stage_rng(0x5eed, name, inst);
        let point = rand_tensor(&mut rng, shape, lo, hi);
        let err = finite_difference_check(&build, &point, EPS).unwrap();
        assert!(
            err <= TOL,
            "{name} instance {inst}: max relative error {err:.3e} > {TOL:.0e}"
        );
    }
}

/// Loss wrapper: weighted sum of the output against a fixed matrix so the
/// cotangent is non-uniform.
fn weighted_sum(tape: &mut Tape, v: Var, seed: u64) -> neco_core::Result<Var> {
    let shape = tape.shape(v).to_vec();
    let mut rng = stage_rng(seed, "cotangent", 0);
    let w = rand_tensor(&mut rng, &shape, -1.0, 1.0);
    let wv = tape.constant(w)?;
    let prod = tape.mul(v, wv)?;
    tape.sum(prod)
}

#[test]
fn elementwise_binary_gradients() {
    for (name, f) in [
        ("add", 0usize),
        ("sub", 1usize),
        ("mul", 2usize),
        ("div", 3usize),
    ] {
        // Other operand fixed; gradient flows through x only.
        let apply = move |tape: &mut Tape, x: Var, other: Var, flip: bool| {
            let (a, b) = if flip { (other, x) } else { (x, other) };
            match f {
                0 => tape.add(a, b),
                1 => tape.sub(a, b),
                2 => tape.mul(a, b),
                _ => tape.div(a, b),
            }
        };
        for flip in [false, true] {
            let label = format!("{name}/{}", if flip { "rhs" } else { "lhs" });
            assert_grad(&label, &[3, 4], 0.5, 2.0, move |tape, x| {
                let mut rng = stage_rng(0xabc, name, u64::from(flip));
                let other = rand_tensor(&mut rng, &[3, 4], 0.5, 2.0);
                let o = tape.constant(other)?;
                let y = apply(tape, x, o, flip)?;
                weighted_sum(tape, y, 11)
            });
            // Scalar broadcast side.
            let label = format!("{name}/scalar-{}", if flip { "lhs" } else { "rhs" });
            assert_grad(&label, &[3, 4], 0.5, 2.0, move |tape, x| {
                let s = tape.constant(Tensor::scalar(1.7))?;
                let y = apply(tape, x, s, flip)?;
                weighted_sum(tape, y, 12)
            });
        }
    }
}

#[test]
fn unary_gradients() {
    assert_grad("neg", &[2, 3], -2.0, 2.0, |tape, x| {
        let y = tape.neg(x)?;
        weighted_sum(tape, y, 21)
    });
    assert_grad("scale", &[2, 3], -2.0, 2.0, |tape, x| {
        let y = tape.scale(x, -0.37)?;
        weighted_sum(tape, y, 22)
    });
    assert_grad("add_const", &[2, 3], -2.0, 2.0, |tape, x| {
        let y = tape.add_const(x, 1.25)?;
        weighted_sum(tape, y, 23)
    });
    assert_grad("max_const", &[2, 3], -2.0, 2.0, |tape, x| {
        let y = tape.max_const(x, 0.25)?;
        weighted_sum(tape, y, 24)
    });
}

#[test]
fn pointwise_gradients() {
    let cases: Vec<(&str, PointwiseFn, f64, f64)> = vec![
        ("arctan", PointwiseFn::Arctan, -2.0, 2.0),
        ("exp", PointwiseFn::Exp, -2.0, 2.0),
        ("log", PointwiseFn::LogGuarded, 0.1, 2.1),
        ("sigmoid", PointwiseFn::Sigmoid, -2.0, 2.0),
        ("gelu", PointwiseFn::Gelu, -2.0, 2.0),
        ("relax_arctan", PointwiseFn::RelaxArctan { beta: 100.0 }, -2.0, 2.0),
        (
            "relax_logistic",
            PointwiseFn::RelaxLogistic { beta: 100.0, lambda: 0.25 },
            -2.0,
            2.0,
        ),
        (
            "relax_logistic_plain",
            PointwiseFn::RelaxLogistic { beta: 100.0, lambda: 0.0 },
            -2.0,
            2.0,
        ),
    ];
    for (name, f, lo, hi) in cases {
        assert_grad(name, &[8], lo, hi, move |tape, x| {
            let y = tape.pointwise(x, f)?;
            weighted_sum(tape, y, 31)
        });
    }
}

#[test]
fn matmul_gradients() {
    assert_grad("matmul/lhs", &[3, 4], -2.0, 2.0, |tape, x| {
        let mut rng = stage_rng(0xabc, "matmul-rhs", 0);
        let b = tape.constant(rand_tensor(&mut rng, &[4, 2], -2.0, 2.0))?;
        let y = tape.matmul(x, b)?;
        weighted_sum(tape, y, 41)
    });
    assert_grad("matmul/rhs", &[4, 2], -2.0, 2.0, |tape, x| {
        let mut rng = stage_rng(0xabc, "matmul-lhs", 0);
        let a = tape.constant(rand_tensor(&mut rng, &[3, 4], -2.0, 2.0))?;
        let y = tape.matmul(a, x)?;
        weighted_sum(tape, y, 42)
    });
    assert_grad("matmul/vec", &[4], -2.0, 2.0, |tape, x| {
        let mut rng = stage_rng(0xabc, "matmul-vec", 0);
        let a = tape.constant(rand_tensor(&mut rng, &[3, 4], -2.0, 2.0))?;
        let y = tape.matmul(a, x)?;
        weighted_sum(tape, y, 43)
    });
    assert_grad("matmul/vec-lhs", &[3, 4], -2.0, 2.0, |tape, x| {
        let mut rng = stage_rng(0xabc, "matmul-vec2", 0);
        let b = tape.constant(rand_tensor(&mut rng, &[4], -2.0, 2.0))?;
        let y = tape.matmul(x, b)?;
        weighted_sum(tape, y, 44)
    });
}

#[test]
fn structural_gradients() {
    assert_grad("transpose", &[3, 4], -2.0, 2.0, |tape, x| {
        let y = tape.transpose(x)?;
        weighted_sum(tape, y, 51)
    });
    assert_grad("sum", &[3, 4], -2.0, 2.0, |tape, x| tape.sum(x));
    assert_grad("mean", &[3, 4], -2.0, 2.0, |tape, x| tape.mean(x));
    assert_grad("reshape", &[3, 4], -2.0, 2.0, |tape, x| {
        let y = tape.reshape(x, &[12])?;
        weighted_sum(tape, y, 52)
    });
    assert_grad("gather_rows", &[5, 3], -2.0, 2.0, |tape, x| {
        let y = tape.gather_rows(x, &[4, 0, 0, 2])?;
        weighted_sum(tape, y, 53)
    });
    assert_grad("gather_elems", &[6], -2.0, 2.0, |tape, x| {
        let y = tape.gather_rows(x, &[5, 1, 1])?;
        weighted_sum(tape, y, 54)
    });
    assert_grad("concat_rows", &[2, 3], -2.0, 2.0, |tape, x| {
        let mut rng = stage_rng(0xabc, "concat", 0);
        let o = tape.constant(rand_tensor(&mut rng, &[3, 3], -2.0, 2.0))?;
        let y = tape.concat_rows(&[x, o, x])?;
        weighted_sum(tape, y, 55)
    });
    assert_grad("slice_cols", &[3, 5], -2.0, 2.0, |tape, x| {
        let y = tape.slice_cols(x, 1, 4)?;
        weighted_sum(tape, y, 56)
    });
    assert_grad("concat_cols", &[3, 2], -2.0, 2.0, |tape, x| {
        let mut rng = stage_rng(0xabc, "concat_cols", 0);
        let o = tape.constant(rand_tensor(&mut rng, &[3, 4], -2.0, 2.0))?;
        let y = tape.concat_cols(&[o, x])?;
        weighted_sum(tape, y, 57)
    });
}

#[test]
fn normalization_gradients() {
    assert_grad("row_normalize", &[3, 4], 0.5, 2.0, |tape, x| {
        let y = tape.row_normalize(x)?;
        weighted_sum(tape, y, 61)
    });
    assert_grad("normalize_cols", &[3, 4], 0.5, 2.5, |tape, x| {
        let y = tape.normalize_cols(x)?;
        weighted_sum(tape, y, 62)
    });
    assert_grad("softmax_rows", &[3, 5], -2.0, 2.0, |tape, x| {
        let y = tape.softmax_rows(x)?;
        weighted_sum(tape, y, 63)
    });
    assert_grad("add_row_bias/mat", &[3, 4], -2.0, 2.0, |tape, x| {
        let b = tape.constant(Tensor::vector(vec![0.3, -0.1, 0.9, 0.2]))?;
        let y = tape.add_row_bias(x, b)?;
        weighted_sum(tape, y, 64)
    });
    assert_grad("add_row_bias/bias", &[4], -2.0, 2.0, |tape, x| {
        let mut rng = stage_rng(0xabc, "bias-mat", 0);
        let a = tape.constant(rand_tensor(&mut rng, &[3, 4], -2.0, 2.0))?;
        let y = tape.add_row_bias(a, x)?;
        weighted_sum(tape, y, 65)
    });
    for (label, which) in [("x", 0usize), ("gamma", 1), ("beta", 2)] {
        let name = format!("layer_norm/{label}");
        let shape: &[usize] = if which == 0 { &[3, 4] } else { &[4] };
        assert_grad(&name, shape, 0.2, 2.0, move |tape, x| {
            let mut rng = stage_rng(0xabc, "ln", which as u64);
            let xm = rand_tensor(&mut rng, &[3, 4], -2.0, 2.0);
            let gm = rand_tensor(&mut rng, &[4], 0.5, 1.5);
            let bm = rand_tensor(&mut rng, &[4], -0.5, 0.5);
            let (a, g, b) = match which {
                0 => (x, tape.constant(gm)?, tape.constant(bm)?),
                1 => (tape.constant(xm)?, x, tape.constant(bm)?),
                _ => (tape.constant(xm)?, tape.constant(gm)?, x),
            };
            let y = tape.layer_norm_rows(a, g, b, 1e-5)?;
            weighted_sum(tape, y, 66)
        });
    }
}

#[test]
fn pair_mix_and_sqdist_gradients() {
    let pairs = Arc::new(vec![(0usize, 1usize), (2, 3)]);
    let p2 = pairs.clone();
    assert_grad("pair_row_mix/x", &[5, 3], -2.0, 2.0, move |tape, x| {
        let c = tape.constant(Tensor::vector(vec![0.3, 0.8]))?;
        let y = tape.pair_row_mix(x, c, p2.clone())?;
        weighted_sum(tape, y, 71)
    });
    let p3 = pairs.clone();
    assert_grad("pair_row_mix/coeff", &[2], 0.1, 0.9, move |tape, x| {
        let mut rng = stage_rng(0xabc, "mix", 0);
        let m = tape.constant(rand_tensor(&mut rng, &[5, 3], -2.0, 2.0))?;
        let y = tape.pair_row_mix(m, x, p3.clone())?;
        weighted_sum(tape, y, 72)
    });
    assert_grad("pairwise_sqdist/lhs", &[3, 4], -2.0, 2.0, |tape, x| {
        let mut rng = stage_rng(0xabc, "sqd", 0);
        let b = tape.constant(rand_tensor(&mut rng, &[5, 4], -2.0, 2.0))?;
        let y = tape.pairwise_sqdist(x, b)?;
        weighted_sum(tape, y, 73)
    });
    assert_grad("pairwise_sqdist/rhs", &[5, 4], -2.0, 2.0, |tape, x| {
        let mut rng = stage_rng(0xabc, "sqd2", 0);
        let a = tape.constant(rand_tensor(&mut rng, &[3, 4], -2.0, 2.0))?;
        let y = tape.pairwise_sqdist(a, x)?;
        weighted_sum(tape, y, 74)
    });
}

#[test]
fn add_matches_hand_example() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::vector(vec![1.0, 2.0])).unwrap();
    let b = tape.constant(Tensor::vector(vec![3.0, 4.0])).unwrap();
    let c = tape.add(a, b).unwrap();
    assert_eq!(tape.value(c).data(), &[4.0, 6.0]);
}

#[test]
fn matmul_identity_is_identity() {
    let mut tape = Tape::new();
    let a = tape
        .constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap())
        .unwrap();
    let i = tape.constant(Tensor::eye(2)).unwrap();
    let y = tape.matmul(a, i).unwrap();
    assert_eq!(tape.value(y).data(), tape.value(a).data());
}

#[test]
fn scaled_arctan_gradient_at_zero_is_beta() {
    // loss = sum(atan(beta * x)) at x = 0 has gradient beta per element.
    let beta = 100.0;
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![0.0, 0.0, 0.0]), true).unwrap();
    let bx = tape.scale(x, beta).unwrap();
    let y = tape.arctan(bx).unwrap();
    let loss = tape.sum(y).unwrap();
    let grads = tape.backward(loss).unwrap();
    for &g in grads.get(x).unwrap().data() {
        assert!((g - beta).abs() < 1e-12);
    }
}

#[test]
fn backward_is_linear_in_the_loss() {
    let mut rng = stage_rng(9, "linear", 0);
    let point = rand_tensor(&mut rng, &[3, 3], -2.0, 2.0);

    let build =
        |tape: &mut Tape, x: Var, which: u8| -> neco_core::Result<Var> {
            match which {
                0 => {
                    let y = tape.softmax_rows(x)?;
                    tape.sum(y)
                }
                _ => {
                    let y = tape.mul(x, x)?;
                    tape.mean(y)
                }
            }
        };

    // Combined loss on one tape.
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone(), true).unwrap();
    let l0 = build(&mut tape, x, 0).unwrap();
    let l1 = build(&mut tape, x, 1).unwrap();
    let l = tape.add(l0, l1).unwrap();
    let combined = tape.backward(l).unwrap().get(x).unwrap().clone();

    // Separate tapes, gradients summed.
    let mut g_sum = Tensor::zeros(&[3, 3]);
    for which in [0u8, 1u8] {
        let mut t = Tape::new();
        let xv = t.leaf(point.clone(), true).unwrap();
        let l = build(&mut t, xv, which).unwrap();
        let g = t.backward(l).unwrap().get(xv).unwrap().clone();
        for (s, v) in g_sum.data_mut().iter_mut().zip(g.data()) {
            *s += v;
        }
    }
    assert!(combined.max_abs_diff(&g_sum) <= 1e-12);
}

#[test]
fn unused_leaf_gets_zero_gradient() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]), true).unwrap();
    let unused = tape.leaf(Tensor::vector(vec![5.0]), true).unwrap();
    let y = tape.mul(x, x).unwrap();
    let loss = tape.sum(y).unwrap();
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.get(unused).unwrap().data(), &[0.0]);
    assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn shape_mismatch_names_operation_and_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
    let b = tape.constant(Tensor::zeros(&[3, 3])).unwrap();
    let err = tape.add(a, b).unwrap_err().to_string();
    assert!(err.contains("add"), "{err}");
    assert!(err.contains("[2, 3]") && err.contains("[3, 3]"), "{err}");
}

#[test]
fn tape_single_use_contract() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![1.0]), true).unwrap();
    let vec_loss = tape.mul(x, x).unwrap();
    // Non-scalar loss is rejected before the sweep.
    let mut t2 = Tape::new();
    let x2 = t2.leaf(Tensor::vector(vec![1.0, 2.0]), true).unwrap();
    let y2 = t2.mul(x2, x2).unwrap();
    assert!(t2.backward(y2).is_err());

    let loss = tape.sum(vec_loss).unwrap();
    tape.backward(loss).unwrap();
    assert!(tape.add(x, x).is_err());
}

#[test]
fn guarded_domain_errors() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::vector(vec![1.0])).unwrap();
    let z = tape.constant(Tensor::vector(vec![0.0])).unwrap();
    assert!(tape.div(a, z).is_err());
    let neg = tape.constant(Tensor::vector(vec![-0.5])).unwrap();
    assert!(tape.log_guarded(neg).is_err());
    // Zero is floored, not an error.
    let zero = tape.constant(Tensor::vector(vec![0.0])).unwrap();
    let y = tape.log_guarded(zero).unwrap();
    assert!((tape.value(y).data()[0] - 1e-12f64.ln()).abs() < 1e-9);
}

#[test]
fn gradients_are_bitwise_deterministic() {
    let run = || {
        let mut rng = stage_rng(33, "det", 0);
        let point = rand_tensor(&mut rng, &[4, 4], -2.0, 2.0);
        let mut tape = Tape::new();
        let x = tape.leaf(point, true).unwrap();
        let s = tape.softmax_rows(x).unwrap();
        let n = tape.row_normalize(s).unwrap();
        let m = tape.matmul(n, x).unwrap();
        let loss = tape.mean(m).unwrap();
        tape.backward(loss).unwrap().get(x).unwrap().clone()
    };
    let a = run();
    let b = run();
    assert_eq!(a.data(), b.data());
}
