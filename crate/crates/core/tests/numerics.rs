use proptest::prelude::*;
use rfnet_core::numerics::{
    dropout, finite_difference_check, AdamState, Graph, ParamSet, Rng, Tensor, Var,
};

const H: f64 = 1e-5;
const TOL: f64 = 1e-7;

fn random(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::new(rows, cols, (0..rows * cols).map(|_| rng.range(-2.0, 2.0)).collect()).unwrap()
}

/// `Σ op(x) ⊙ W` for a fixed random `W`, so every output entry matters.
fn project(g: &mut Graph<'_>, y: Var, seed: u64) -> rfnet_core::Result<Var> {
    let [r, c] = g.shape(y);
    let w = g.constant(random(&mut Rng::new(seed ^ 0x5eed), r, c));
    let m = g.mul(y, w)?;
    Ok(g.sum(m))
}

fn fd<F>(point: &Tensor, seed: u64, op: F) -> f64
where
    F: Fn(&mut Graph<'_>, Var) -> rfnet_core::Result<Var>,
{
    finite_difference_check(
        |g, x| {
            let y = op(g, x)?;
            project(g, y, seed)
        },
        point,
        H,
    )
    .unwrap()
}

macro_rules! check {
    ($e:expr) => {{
        let err = $e;
        prop_assert!(err < TOL, "relative error {}", err);
    }};
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn matmul_both_sides(seed in any::<u64>(), r in 1usize..4, k in 1usize..4, c in 1usize..4) {
        let mut rng = Rng::new(seed);
        let (a, b) = (random(&mut rng, r, k), random(&mut rng, k, c));
        check!(fd(&a, seed, |g, x| { let b = g.constant(b.clone()); g.matmul(x, b) }));
        check!(fd(&b, seed, |g, x| { let a = g.constant(a.clone()); g.matmul(a, x) }));
    }

    #[test]
    fn add_sub_mul(seed in any::<u64>(), r in 1usize..4, c in 1usize..4) {
        let mut rng = Rng::new(seed);
        let (a, b, row) = (random(&mut rng, r, c), random(&mut rng, r, c), random(&mut rng, 1, c));
        check!(fd(&a, seed, |g, x| { let b = g.constant(b.clone()); g.add(x, b) }));
        check!(fd(&row, seed, |g, x| { let a = g.constant(a.clone()); g.add(a, x) }));
        check!(fd(&a, seed, |g, x| { let b = g.constant(b.clone()); g.sub(b, x) }));
        check!(fd(&a, seed, |g, x| { let b = g.constant(b.clone()); g.mul(x, b) }));
        check!(fd(&a, seed, |g, x| g.mul(x, x)));
        check!(fd(&a, seed, |g, x| Ok(g.scale(x, -1.7))));
    }

    #[test]
    fn activations(seed in any::<u64>(), r in 1usize..4, c in 1usize..5) {
        let a = random(&mut Rng::new(seed), r, c);
        check!(fd(&a, seed, |g, x| Ok(g.sigmoid(x))));
        check!(fd(&a, seed, |g, x| Ok(g.tanh(x))));
        check!(fd(&a, seed, |g, x| g.softmax(x)));
    }

    #[test]
    fn reductions(seed in any::<u64>(), r in 1usize..4, c in 1usize..5) {
        let mut rng = Rng::new(seed);
        let (a, b) = (random(&mut rng, r, c), random(&mut rng, r, c));
        check!(fd(&a, seed, |g, x| g.row_max(x)));
        check!(fd(&a, seed, |g, x| { let b = g.constant(b.clone()); g.maximum(x, b) }));
        check!(fd(&a, seed, |g, x| Ok(g.sum(x))));
        check!(fd(&a, seed, |g, x| g.mean(x)));
    }

    #[test]
    fn shape_ops(seed in any::<u64>(), r in 1usize..4, c in 2usize..5) {
        let mut rng = Rng::new(seed);
        let (a, b) = (random(&mut rng, r, c), random(&mut rng, r, c));
        let idx: Vec<usize> = (0..5).map(|_| rng.below(r)).collect();
        check!(fd(&a, seed, |g, x| { let b = g.constant(b.clone()); g.concat_cols(&[b, x, x]) }));
        check!(fd(&a, seed, |g, x| { let b = g.constant(b.clone()); g.concat_rows(&[x, b, x]) }));
        check!(fd(&a, seed, |g, x| g.slice_cols(x, 1, c - 1)));
        check!(fd(&a, seed, |g, x| g.gather_rows(x, &idx)));
        check!(fd(&a, seed, |g, x| g.repeat_rows(x, 3)));
        check!(fd(&a, seed, |g, x| { let b = g.constant(b.clone()); g.interleave_rows(&[x, b, x]) }));
        check!(fd(&a, seed, |g, x| g.reshape(x, c, r)));
    }

    #[test]
    fn attention_pool_both_inputs(seed in any::<u64>(), b in 1usize..3, k in 1usize..4, d in 1usize..4) {
        let mut rng = Rng::new(seed);
        let (alpha, ann) = (random(&mut rng, b, k), random(&mut rng, b * k, d));
        check!(fd(&alpha, seed, |g, x| { let a = g.constant(ann.clone()); g.attention_pool(x, a) }));
        check!(fd(&ann, seed, |g, x| { let w = g.constant(alpha.clone()); g.attention_pool(w, x) }));
    }

    #[test]
    fn losses(seed in any::<u64>(), r in 1usize..4, v in 2usize..6, eps in 0.0f64..0.3) {
        let mut rng = Rng::new(seed);
        let logits = random(&mut rng, r, v);
        let gold: Vec<usize> = (0..r).map(|_| rng.below(v)).collect();
        let weights: Vec<f64> = (0..r).map(|_| rng.range(0.0, 2.0)).collect();
        check!(fd(&logits, seed, |g, x| g.cross_entropy(x, &gold, eps, &weights)));
        let sets: Vec<Vec<usize>> = (0..r).map(|_| (0..v).filter(|_| rng.uniform() < 0.4).collect()).collect();
        check!(fd(&logits, seed, |g, x| g.margin_rank(x, &sets)));
    }

    #[test]
    fn softmax_is_shift_invariant(seed in any::<u64>(), c in 1usize..8, shift in -50.0f64..50.0) {
        let a = random(&mut Rng::new(seed), 2, c);
        let shifted = Tensor::new(2, c, a.data().iter().map(|x| x + shift).collect()).unwrap();
        let mut g = Graph::new();
        let (x, y) = (g.constant(a), g.constant(shifted));
        let (sx, sy) = (g.softmax(x).unwrap(), g.softmax(y).unwrap());
        prop_assert!(g.value(sx).max_abs_diff(g.value(sy)) < 1e-12);
        for r in 0..2 {
            let row = g.value(sx).row_slice(r);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn backward_is_linear(seed in any::<u64>(), r in 1usize..4, c in 1usize..4) {
        let a = random(&mut Rng::new(seed), r, c);
        let grad_of = |which: u8| {
            let mut g = Graph::new();
            let x = g.variable(a.clone());
            let t = g.tanh(x);
            let f1 = project(&mut g, t, seed).unwrap();
            let s = g.softmax(x).unwrap();
            let f2 = project(&mut g, s, seed.wrapping_add(1)).unwrap();
            let loss = match which {
                0 => f1,
                1 => f2,
                _ => g.add(f1, f2).unwrap(),
            };
            g.backward(loss).unwrap().get_or_zeros(x, [r, c])
        };
        let (g1, g2, both) = (grad_of(0), grad_of(1), grad_of(2));
        for i in 0..r * c {
            prop_assert!((g1.data()[i] + g2.data()[i] - both.data()[i]).abs() < 1e-12);
        }
    }
}

#[test]
fn dropout_rate_and_identity() {
    let mut rng = Rng::new(3);
    let mut g = Graph::new();
    let x = g.constant(Tensor::filled(1, 100_000, 1.0));
    let y = dropout(&mut g, x, 0.3, true, &mut rng).unwrap();
    let zeros = g.value(y).data().iter().filter(|&&v| v == 0.0).count() as f64 / 1e5;
    assert!((zeros - 0.3).abs() < 0.01);
    assert!(g.value(y).data().iter().all(|&v| v == 0.0 || (v - 1.0 / 0.7).abs() < 1e-15));
    assert_eq!(dropout(&mut g, x, 0.3, false, &mut rng).unwrap(), x);
    assert_eq!(dropout(&mut g, x, 0.0, true, &mut rng).unwrap(), x);
    assert!(dropout(&mut g, x, 1.0, true, &mut rng).is_err());
}

#[test]
fn same_seed_same_adam_trajectory() {
    let run = |seed: u64| {
        let mut rng = Rng::new(seed);
        let mut params = ParamSet::new();
        params.insert_uniform("w", 3, 2, 0.1, &mut rng).unwrap();
        params.insert_uniform("b", 1, 2, 0.1, &mut rng).unwrap();
        let data = random(&mut rng, 5, 3);
        let mut adam = AdamState::new(&params);
        let mut trail = Vec::new();
        for _ in 0..20 {
            let grads = {
                let mut g = Graph::new();
                let p = params.bind(&mut g);
                let x = g.constant(data.clone());
                let h = g.matmul(x, p.vars()[0]).unwrap();
                let h = g.add(h, p.vars()[1]).unwrap();
                let h = g.tanh(h);
                let sq = g.mul(h, h).unwrap();
                let loss = g.mean(sq).unwrap();
                let grads = g.backward(loss).unwrap();
                params.collect_grads(&grads, &p)
            };
            adam.step(&mut params, &grads, 0.01).unwrap();
            trail.push(params.clone());
        }
        trail
    };
    assert_eq!(run(9), run(9));
    assert_ne!(run(9), run(10));
}
