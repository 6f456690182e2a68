//! Property tests for the crate's load-bearing invariants.

use finegates::gates::{
    deterministic_gates, expected_l0, sample_gates, GateAxis, StochasticGateVector,
};
use finegates::matrix::Matrix;
use finegates::numerics::{erf, min_eig_sym, pearson_kurtosis};
use finegates::rng::RngStream;
use proptest::prelude::*;

proptest! {
    #[test]
    fn erf_is_odd_and_bounded(x in -20.0f64..20.0) {
        let v = erf(x);
        prop_assert!(v.abs() <= 1.0);
        prop_assert_eq!(erf(-x), -v);
    }

    #[test]
    fn kurtosis_affine_invariant(
        seed in 0u64..1000,
        a in prop::sample::select(vec![-4.0f64, -0.7, 0.3, 1.0, 5.0]),
        c in -10.0f64..10.0,
    ) {
        let mut rng = RngStream::new(seed);
        let v: Vec<f64> = (0..48).map(|_| rng.next_gauss()).collect();
        let w: Vec<f64> = v.iter().map(|x| a * x + c).collect();
        let kv = pearson_kurtosis(&v).unwrap();
        let kw = pearson_kurtosis(&w).unwrap();
        prop_assert!(((kv - kw) / kv).abs() < 1e-9, "{} vs {}", kv, kw);
    }

    #[test]
    fn gate_realizations_stay_in_unit_interval(
        seed in 0u64..5000,
        mu_scale in 0.1f64..4.0,
    ) {
        let mut rng = RngStream::new(seed);
        let mu: Vec<f64> = (0..8).map(|_| rng.next_gauss() * mu_scale).collect();
        let g = StochasticGateVector::from_mu(mu, 0.5, GateAxis::Row);
        let (omega, _) = sample_gates(&g, &mut rng);
        prop_assert!(omega.iter().all(|&v| (0.0..=1.0).contains(&v)));
        prop_assert!(deterministic_gates(&g).iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn expected_l0_monotone_in_each_coordinate(
        seed in 0u64..1000,
        bump in 1e-4f64..0.5,
        coord in 0usize..6,
    ) {
        let mut rng = RngStream::new(seed);
        let mu: Vec<f64> = (0..6).map(|_| rng.next_gauss()).collect();
        let base = expected_l0(&StochasticGateVector::from_mu(mu.clone(), 0.5, GateAxis::Row));
        let mut up = mu;
        up[coord] += bump;
        let bumped = expected_l0(&StochasticGateVector::from_mu(up, 0.5, GateAxis::Row));
        prop_assert!(bumped >= base);
    }

    #[test]
    fn min_eig_respects_rayleigh_bound(seed in 0u64..500, n in 2usize..7) {
        let mut rng = RngStream::new(seed);
        let a = Matrix::<f64>::from_fn(n, n, |_, _| rng.next_gauss());
        let m = a.matmul_tn(&a);
        let min = min_eig_sym(&m).unwrap();
        for i in 0..n {
            prop_assert!(min <= m[(i, i)] + 1e-9);
        }
    }

    #[test]
    fn checkpoint_container_round_trips_tensors(
        seed in 0u64..300,
        rows in 1usize..6,
        cols in 1usize..6,
    ) {
        use finegates::model::{Container, NamedTensor};
        let mut rng = RngStream::new(seed);
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.next_gauss()).collect();
        let mut c = Container::default();
        c.push_meta("kind", "gated");
        c.tensors.push(NamedTensor::from_scalars("t", vec![rows, cols], &data));
        let bytes = c.to_bytes();
        let back = Container::from_bytes(&bytes).unwrap();
        let got: Vec<f64> = back.tensor("t").unwrap().to_scalars().unwrap();
        prop_assert_eq!(got, data);
        prop_assert_eq!(back.to_bytes(), bytes);
    }
}
