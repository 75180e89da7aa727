use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ddec::calculus::{apply_d, apply_dstar, hodge_decompose, inner_product, Metric};
use ddec::coarsen::{block_partition, build_coarse, greedy_partition, verify_coarse};
use ddec::io::{from_text, to_text};
use ddec::model::SurrogateModel;
use ddec::net::{lipschitz_bound, Activation, Mlp};
use ddec::{ChainComplex, Cochain};

fn grid_and_labels(nx: usize, ny: usize, parts: usize, seed: u64, greedy: bool) -> (ChainComplex, Vec<usize>) {
    let fine = ChainComplex::cartesian(nx, ny, 1.0, 1.0).unwrap();
    let labels = if greedy {
        greedy_partition(&fine, parts.min(nx * ny), seed).unwrap()
    } else {
        block_partition(&fine, parts.min(nx), parts.min(ny)).unwrap()
    };
    (fine, labels)
}

fn random_values(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn coarsening_preserves_exactness_and_commutes(
        nx in 2usize..9, ny in 2usize..9, parts in 1usize..7, seed in any::<u64>(), greedy in any::<bool>()
    ) {
        let (fine, labels) = grid_and_labels(nx, ny, parts, seed, greedy);
        let (coarse, map) = build_coarse(&fine, &labels).unwrap();
        let r = verify_coarse(&coarse, &map, &fine).unwrap();
        prop_assert!(r.pass(), "{r:?}");
        prop_assert_eq!(coarse.betti_numbers(), vec![1, 0, 0]);
    }

    #[test]
    fn d_and_dstar_are_adjoint(nx in 2usize..7, ny in 2usize..7, k in 0usize..2, seed in any::<u64>()) {
        let c = ChainComplex::cartesian(nx, ny, 1.0, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = Metric::random(&c, 1.0, &mut rng);
        let u = Cochain::new(k, random_values(&mut rng, c.count(k)));
        let v = Cochain::new(k + 1, random_values(&mut rng, c.count(k + 1)));
        let lhs = inner_product(&m, k + 1, &apply_d(&m, &c, k, &u).unwrap(), &v).unwrap();
        let rhs = inner_product(&m, k, &u, &apply_dstar(&m, &c, k, &v).unwrap()).unwrap();
        prop_assert!((lhs - rhs).abs() < 1e-12 * (1.0 + lhs.abs()));
    }

    #[test]
    fn hodge_parts_sum_to_the_input(nx in 2usize..6, ny in 2usize..6, k in 0usize..3, seed in any::<u64>()) {
        let c = ChainComplex::cartesian(nx, ny, 1.0, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = Metric::random(&c, 0.5, &mut rng);
        let u = Cochain::new(k, random_values(&mut rng, c.count(k)));
        let h = hodge_decompose(&m, &c, k, &u).unwrap();
        for i in 0..u.len() {
            let sum = h.exact.values[i] + h.harmonic.values[i] + h.coexact.values[i];
            prop_assert!((sum - u.values[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn lipschitz_bound_sits_between_jacobian_norm_and_layer_product(
        a in 1usize..3, h in 1usize..6, act in 0usize..3, seed in any::<u64>()
    ) {
        let c = ChainComplex::cartesian(a, 1, 1.0, 1.0).unwrap();
        let n = c.count(0);
        let activation = [Activation::Elu, Activation::Tanh, Activation::Prelu][act];
        let net = Mlp::init_he(&[n, h, n], activation, seed).unwrap();
        let l = lipschitz_bound(&net, &Metric::identity(&c), 1).unwrap();
        prop_assert!(l <= net.spectral_product() * (1.0 + 1e-9));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let j = net.jacobian(&random_values(&mut rng, n)).unwrap();
        prop_assert!(j.norm() / (n as f64).sqrt() <= l * (1.0 + 1e-9));
    }

    #[test]
    fn models_round_trip_through_text(seed in any::<u64>(), eps in 0.0f64..0.5) {
        let fine = ChainComplex::cartesian(4, 4, 1.0, 1.0).unwrap();
        let (c, _) = build_coarse(&fine, &block_partition(&fine, 2, 2).unwrap()).unwrap();
        let n = c.count(1);
        let mut mo = SurrogateModel::new(c.clone(), 2, Mlp::init_he(&[n, 3, n], Activation::Elu, seed).unwrap(), eps).unwrap();
        mo.metric = Metric::random(&c, 2.0, &mut ChaCha8Rng::seed_from_u64(seed));
        let text = to_text(&mo).unwrap();
        let back: SurrogateModel = from_text(&text).unwrap();
        prop_assert_eq!(&back, &mo);
        prop_assert_eq!(to_text(&back).unwrap(), text);
    }
}
