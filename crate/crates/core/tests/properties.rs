mod common;

use common::*;
use gngan::autodiff::Graph;
use gngan::checkpoint::Checkpoint;
use gngan::eval::register_samples;
use gngan::neighbors::{self, AffinityKind};
use gngan::nn::Activation;
use gngan::objectives::{self, GmForm, HyperParams, MatchingWeights};
use gngan::synth::{grid25_spec, sample_data};
use gngan::train::{Architecture, GnGanModel};
use gngan::Matrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn points(max_n: usize, max_d: usize) -> impl Strategy<Value = Matrix> {
    (2..=max_n, 1..=max_d).prop_flat_map(|(n, d)| {
        prop::collection::vec(-5.0f64..5.0, n * d).prop_map(move |v| Matrix::from_vec(n, d, v).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn joint_affinities_are_a_symmetric_distribution(p in points(10, 4)) {
        let a = neighbors::joint_affinities(&p, AffinityKind::LatentP).unwrap().values;
        let n = p.rows();
        let mut total = 0.0;
        for i in 0..n {
            prop_assert_eq!(a[(i, i)], 0.0);
            for j in 0..n {
                prop_assert!(a[(i, j)] >= 0.0);
                prop_assert!((a[(i, j)] - a[(j, i)]).abs() <= 1e-12);
                total += a[(i, j)];
            }
        }
        prop_assert!((total - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn affinities_ignore_uniform_scaling(p in points(8, 3), c in 0.05f64..20.0) {
        let a = neighbors::joint_affinities(&p, AffinityKind::DataQ).unwrap().values;
        let b = neighbors::joint_affinities(&p.map(|v| c * v), AffinityKind::DataQ).unwrap().values;
        prop_assert!(a.zip_map(&b, |x, y| (x - y).abs()).max_abs() <= 1e-9);
    }

    #[test]
    fn kl_is_non_negative(seed in any::<u64>(), n in 2usize..9, dz in 1usize..4, dx in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = random_rows(&mut rng, n, dz, 1.0);
        let x = random_rows(&mut rng, n, dx, 2.0);
        prop_assert!(neighbors::ne_loss_value(&z, &x).unwrap() >= -1e-9);
    }

    #[test]
    fn backward_matches_finite_differences(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = random_mlp(&mut rng, 3, 2, Activation::Sigmoid, 3);
        let x = random_rows(&mut rng, 4, 3, 1.0);
        prop_assume!(relu_margin(&net, &x) > 1e-3);
        let loss = |params: &[Matrix]| {
            let y = with_params(&net, params).eval(&x).unwrap();
            y.as_slice().iter().map(|v| v * v).sum::<f64>()
        };
        let mut g = Graph::new();
        let b = net.bind(&mut g, true).unwrap();
        let xn = g.constant(x.clone()).unwrap();
        let y = b.forward(&mut g, xn).unwrap();
        let sq = g.square(y).unwrap();
        let l = g.sum_all(sq).unwrap();
        let mut grads = g.backward(l).unwrap();
        let fd = finite_differences(&params_of(&net), 1e-5, loss);
        for (node, want) in b.param_nodes().into_iter().zip(&fd) {
            let got = grads.remove(node).unwrap();
            prop_assert!(rel_err(&got, want, 1e-6) <= 1e-5, "{}", rel_err(&got, want, 1e-6));
        }
    }

    #[test]
    fn matching_loss_vanishes_on_equal_batches(seed in any::<u64>(), form in prop_oneof![Just(GmForm::Norms), Just(GmForm::Literal)]) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = random_mlp(&mut rng, 2, 1, Activation::Sigmoid, 3);
        let x = random_rows(&mut rng, 5, 2, 2.0);
        let mut g = Graph::new();
        let bd = d.bind(&mut g, false).unwrap();
        let r = g.constant(x.clone()).unwrap();
        let f = g.param(x).unwrap();
        let w = MatchingWeights { lambda_m1: 0.1, lambda_m2: 0.1, form };
        let l = objectives::g_loss_gm(&mut g, &bd, r, f, w).unwrap();
        prop_assert_eq!(g.value(l).item(), 0.0);
    }

    #[test]
    fn registration_is_permutation_equivariant(seed in any::<u64>(), shift in 0usize..2000) {
        let spec = grid25_spec();
        let x = sample_data(&spec, 200, &mut ChaCha8Rng::seed_from_u64(seed)).map(|v| 1.02 * v);
        let n = x.rows();
        let perm: Vec<usize> = (0..n).map(|i| (i * 7 + shift) % n).collect();
        let shuffled = Matrix::from_rows(&perm.iter().map(|&i| x.row(i).to_vec()).collect::<Vec<_>>());
        let a = register_samples(&x, &spec).unwrap();
        let b = register_samples(&shuffled, &spec).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            prop_assert_eq!(b[k], a[i]);
        }
    }

    #[test]
    fn sampling_is_seeded(seed in any::<u64>()) {
        let spec = grid25_spec();
        let a = sample_data(&spec, 20, &mut ChaCha8Rng::seed_from_u64(seed));
        let b = sample_data(&spec, 20, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(a, b);
    }

    #[test]
    fn matmul_is_linear(seed in any::<u64>(), c in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_rows(&mut rng, 3, 4, 1.0);
        let b1 = random_rows(&mut rng, 4, 2, 1.0);
        let b2 = random_rows(&mut rng, 4, 2, 1.0);
        let lhs = a.matmul(&b1.zip_map(&b2, |x, y| c * x + y));
        let rhs = a.matmul(&b1).zip_map(&a.matmul(&b2), |x, y| c * x + y);
        prop_assert!(lhs.zip_map(&rhs, |x, y| (x - y).abs()).max_abs() <= 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn checkpoints_roundtrip(seed in any::<u64>(), hash in any::<u64>()) {
        let hp = HyperParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = GnGanModel::init(&Architecture::small(1, 1), &hp, &mut rng).unwrap();
        let ck = Checkpoint::new(m, hash);
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
        prop_assert_eq!(back, ck);
    }
}
