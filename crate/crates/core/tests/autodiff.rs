use std::sync::Arc;

use ccf_core::tensor::gradcheck::grad_check_many;
use ccf_core::tensor::tape::Edge;
use ccf_core::tensor::{grad_check, Tape, Tensor, Var};
use ccf_core::Result;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

/// Values bounded away from zero, so relu has no kink nearby.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) { m } else { -m }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// `Σ w ⊙ out` with a fixed random `w`, so every output coordinate matters.
fn project(t: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let shape = t.value(out).shape().to_vec();
    let w = t.constant(rand_t(&mut rng, &shape));
    let p = t.mul(out, w)?;
    t.sum(p)
}

fn check<F>(name: &str, points: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor>, f: F)
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = points(&mut rng);
        let r = grad_check_many(|t, v| { let o = f(t, v)?; project(t, o, seed) }, &pts, STEP, usize::MAX).unwrap();
        assert!(r.passes(TOL), "{name} seed {seed}: max rel error {}", r.max_rel_error);
        assert!(r.kinks.is_empty(), "{name} seed {seed}: unexpected kinks {:?}", r.kinks);
    }
}

#[test]
fn matmul_ops() {
    check("matmul", |r| vec![rand_t(r, &[3, 4]), rand_t(r, &[4, 2])], |t, v| t.matmul(v[0], v[1]));
    check("matmul_nt", |r| vec![rand_t(r, &[3, 4]), rand_t(r, &[2, 4])], |t, v| t.matmul_nt(v[0], v[1]));
}

#[test]
fn broadcasting_elementwise_ops() {
    for (name, shape_b) in [("same", vec![3, 4]), ("row", vec![1, 4]), ("vector", vec![4]), ("scalar", vec![1])] {
        let sb = shape_b.clone();
        check(&format!("add {name}"), |r| vec![rand_t(r, &[3, 4]), rand_t(r, &sb)], |t, v| t.add(v[0], v[1]));
        check(&format!("sub {name}"), |r| vec![rand_t(r, &[3, 4]), rand_t(r, &sb)], |t, v| t.sub(v[0], v[1]));
        check(&format!("mul {name}"), |r| vec![rand_t(r, &[3, 4]), rand_t(r, &sb)], |t, v| t.mul(v[0], v[1]));
        check(&format!("mul {name} swapped"), |r| vec![rand_t(r, &sb), rand_t(r, &[3, 4])], |t, v| t.mul(v[0], v[1]));
    }
    check("scale", |r| vec![rand_t(r, &[2, 3])], |t, v| t.scale(v[0], -1.7));
    check("affine", |r| vec![rand_t(r, &[2, 3])], |t, v| t.affine(v[0], 0.3, 2.0));
}

#[test]
fn unary_ops() {
    check("sigmoid", |r| vec![rand_t(r, &[3, 3])], |t, v| t.sigmoid(v[0]));
    check("tanh", |r| vec![rand_t(r, &[3, 3])], |t, v| t.tanh(v[0]));
    check("relu", |r| vec![off_zero(r, &[3, 3])], |t, v| t.relu(v[0]));
    check(
        "log",
        |r| vec![Tensor::uniform(&[3, 3], 0.2, 2.0, r)],
        |t, v| t.log(v[0]),
    );
}

#[test]
fn structural_ops() {
    check("gather", |r| vec![rand_t(r, &[5, 3])], |t, v| t.gather(v[0], &[4, 0, 4, 2]));
    check("concat_rows", |r| vec![rand_t(r, &[2, 3]), rand_t(r, &[1, 3])], |t, v| t.concat_rows(&[v[0], v[1], v[0]]));
    check("slice_rows", |r| vec![rand_t(r, &[5, 3])], |t, v| t.slice_rows(v[0], 1, 3));
    check("concat_cols", |r| vec![rand_t(r, &[2, 3]), rand_t(r, &[2, 1])], |t, v| t.concat_cols(&[v[1], v[0]]));
    check("slice_cols", |r| vec![rand_t(r, &[3, 5])], |t, v| t.slice_cols(v[0], 2, 2));
}

#[test]
fn reductions_and_normalization() {
    check("sum", |r| vec![rand_t(r, &[3, 4])], |t, v| { let s = t.sum(v[0])?; t.mul(s, s) });
    check("mean", |r| vec![rand_t(r, &[3, 4])], |t, v| { let s = t.mean(v[0])?; t.mul(s, s) });
    check("sum_last", |r| vec![rand_t(r, &[3, 4])], |t, v| t.sum_last(v[0]));
    check("softmax", |r| vec![rand_t(r, &[3, 5])], |t, v| t.softmax(v[0]));
    check("causal_softmax square", |r| vec![rand_t(r, &[4, 4])], |t, v| t.causal_softmax(v[0]));
    check("causal_softmax last rows", |r| vec![rand_t(r, &[2, 5])], |t, v| t.causal_softmax(v[0]));
    check(
        "layer_norm",
        |r| vec![rand_t(r, &[3, 5]), rand_t(r, &[5]), rand_t(r, &[5])],
        |t, v| t.layer_norm(v[0], v[1], v[2]),
    );
    let edges: Arc<[Edge]> = vec![
        Edge { dst: 0, src: 1, weight: 0.5 },
        Edge { dst: 1, src: 0, weight: 0.5 },
        Edge { dst: 2, src: 2, weight: 1.0 },
        Edge { dst: 0, src: 2, weight: -0.25 },
    ]
    .into();
    check("edge_aggregate", |r| vec![rand_t(r, &[3, 2])], move |t, v| t.edge_aggregate(v[0], edges.clone(), 4));
}

#[test]
fn softmax_cross_entropy_matches_finite_differences() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = Tensor::uniform(&[1, 5], -2.0, 2.0, &mut rng);
        let target = rng.random_range(0..5);
        let r = grad_check(
            |t, x| {
                let p = t.softmax(x)?;
                let pt = t.slice_cols(p, target, 1)?;
                let l = t.log(pt)?;
                t.scale(l, -1.0)
            },
            &z,
            STEP,
        )
        .unwrap();
        assert!(r.passes(TOL), "seed {seed}: {}", r.max_rel_error);
    }
}

#[test]
fn sum_of_squares_is_exact_to_rounding() {
    let x = Tensor::vector(vec![0.3, -1.2, 2.5, 0.0]);
    let r = grad_check(|t, x| { let s = t.mul(x, x)?; t.sum(s) }, &x, STEP).unwrap();
    assert!(r.max_rel_error < 1e-8, "{}", r.max_rel_error);
}

/// Two scalar losses sharing inputs, built on one tape.
fn two_losses(t: &mut Tape, x: Var, a: Var) -> Result<(Var, Var)> {
    let s = t.sigmoid(x)?;
    let l1 = project(t, s, 1)?;
    let xa = t.matmul(x, a)?;
    let h = t.tanh(xa)?;
    let l2 = project(t, h, 2)?;
    Ok((l1, l2))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn backward_is_linear(seed in any::<u64>(), a in -3.0..3.0f64, b in -3.0..3.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (xv, av) = (rand_t(&mut rng, &[2, 3]), rand_t(&mut rng, &[3, 3]));
        let mut t = Tape::new();
        let x = t.leaf(xv, true);
        let m = t.leaf(av, true);
        let (l1, l2) = two_losses(&mut t, x, m).unwrap();
        let s1 = t.scale(l1, a).unwrap();
        let s2 = t.scale(l2, b).unwrap();
        let l = t.add(s1, s2).unwrap();
        let g = t.backward(l).unwrap();
        let g1 = t.backward(l1).unwrap();
        let g2 = t.backward(l2).unwrap();
        // a loss that does not reach a leaf leaves no gradient entry for it
        let dense = |g: &ccf_core::tensor::Gradients, v: Var, n: usize| {
            g.get(v).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; n])
        };
        for v in [x, m] {
            let n = t.value(v).len();
            let combo: Vec<f64> = dense(&g1, v, n).iter().zip(dense(&g2, v, n))
                .map(|(p, q)| a * p + b * q).collect();
            for (u, w) in g.get(v).unwrap().data().iter().zip(&combo) {
                prop_assert!((u - w).abs() <= 1e-10 * (1.0 + w.abs()));
            }
        }
    }

    #[test]
    fn forward_and_backward_are_deterministic(seed in any::<u64>()) {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut t = Tape::new();
            let x = t.leaf(rand_t(&mut rng, &[2, 3]), true);
            let m = t.leaf(rand_t(&mut rng, &[3, 3]), true);
            let (l1, l2) = two_losses(&mut t, x, m).unwrap();
            let l = t.add(l1, l2).unwrap();
            let g = t.backward(l).unwrap();
            let mut bits: Vec<u64> = vec![t.value(l).item().to_bits()];
            for v in [x, m] {
                bits.extend(g.get(v).unwrap().data().iter().map(|f| f.to_bits()));
            }
            bits
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn gradients_have_value_shapes(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Tape::new();
        let x = t.leaf(rand_t(&mut rng, &[2, 3]), true);
        let m = t.leaf(rand_t(&mut rng, &[3, 3]), true);
        let (l1, l2) = two_losses(&mut t, x, m).unwrap();
        let l = t.add(l1, l2).unwrap();
        let g = t.backward(l).unwrap();
        prop_assert_eq!(g.get(x).unwrap().shape(), t.value(x).shape());
        prop_assert_eq!(g.get(m).unwrap().shape(), t.value(m).shape());
        prop_assert!(g.get(x).unwrap().is_finite());
    }
}
