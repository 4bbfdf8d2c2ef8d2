//! Backward passes of the linear operators are exact adjoints:
//! `<dy, f(x)> == <f^T(dy), x>`.

use mff_tensor::{Graph, Tensor, Var};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn adjoint_gap(shape: &[usize], seed: u64, f: impl Fn(&Graph<f64>, Var) -> Var) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::<f64>::uniform(shape, 1.0, &mut rng);
    let g = Graph::new();
    let xv = g.input(x.clone());
    let y = f(&g, xv);
    let dy = Tensor::<f64>::uniform(&g.shape(y), 1.0, &mut rng);
    let lhs = dy.dot(&g.value(y));
    let c = g.constant(dy);
    let prod = g.mul(y, c).unwrap();
    let loss = g.sum_all(prod);
    let grads = g.backward(loss).unwrap();
    let rhs = grads.get(xv).unwrap().dot(&x);
    (lhs - rhs).abs()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn add_is_adjoint(b in 1usize..3, c in 1usize..4, n in 1usize..6, seed in 0u64..1000) {
        let gap = adjoint_gap(&[b, c, n], seed, |g, x| {
            let y = g.scalar_mul(x, 2.0);
            g.add(x, y).unwrap()
        });
        prop_assert!(gap < 1e-10);
    }

    #[test]
    fn concat_is_adjoint(b in 1usize..3, c in 1usize..4, n in 1usize..6, axis in 0usize..3, seed in 0u64..1000) {
        let gap = adjoint_gap(&[b, c, n], seed, |g, x| {
            let y = g.scalar_mul(x, -1.5);
            g.concat(&[x, y, x], axis).unwrap()
        });
        prop_assert!(gap < 1e-10);
    }

    #[test]
    fn upsample_is_adjoint(b in 1usize..3, c in 1usize..4, f in 1usize..9, k in 0usize..3, seed in 0u64..1000) {
        let factor = [1usize, 4, 16][k];
        let gap = adjoint_gap(&[b, c, 2, f], seed, |g, x| g.upsample_nearest_last(x, factor).unwrap());
        prop_assert!(gap < 1e-10);
    }
}

#[test]
fn same_seed_same_forward() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g = Graph::<f32>::new();
        let x = g.constant(Tensor::uniform(&[1, 2, 5, 8], 1.0, &mut rng));
        let w = g.constant(Tensor::uniform(&[3, 2, 3, 3], 1.0, &mut rng));
        let spec = mff_tensor::ConvSpec::new(2, 3, (3, 3)).padding((1, 1));
        let y = g.conv2d(x, w, None, &spec).unwrap();
        (*g.value(y)).clone()
    };
    assert_eq!(run(), run());
}
