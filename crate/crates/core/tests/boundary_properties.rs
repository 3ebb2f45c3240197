use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tollgate_core::boundary::{
    boundary_toll, path_dependence_counterexample, random_partition, random_potential_spec, splitting_invariance_check, BoundaryLedger,
    BoundarySpec, BoundaryState, Knot, Potential, PotentialSpec, XiPolicy,
};
use tollgate_core::Error;

fn vector(rng: &mut ChaCha8Rng, d: usize, hi: f64) -> Vec<f64> {
    (0..d).map(|_| rng.gen_range(0.0..hi)).collect()
}

fn convex(spec: &PotentialSpec) -> bool {
    !matches!(spec, PotentialSpec::Linear { .. })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn split_tolls_telescope(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = rng.gen_range(1..=3);
        let pot = Potential::new(random_potential_spec(&mut rng, d)).unwrap();
        let e0 = vector(&mut rng, d, 5.0);
        let total = vector(&mut rng, d, 5.0);
        let partitions: Vec<_> = (0..4).map(|_| random_partition(&mut rng, &total, 8)).collect();
        let report = splitting_invariance_check(&pot, &e0, &total, &partitions).unwrap();
        prop_assert!(report.passed(), "{:?}", report.violations);
        let direct = pot.eval(&e0.iter().zip(&total).map(|(a, b)| a + b).collect::<Vec<_>>()) - pot.eval(&e0);
        for s in &report.sums {
            prop_assert!((s - direct).abs() <= 1e-9);
        }
    }

    #[test]
    fn tolls_are_nonnegative(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = rng.gen_range(1..=3);
        let pot = Potential::new(random_potential_spec(&mut rng, d)).unwrap();
        let state = BoundaryState { exposure: vector(&mut rng, d, 10.0), ..BoundaryState::new("b", d, "") };
        let inc = vector(&mut rng, d, 3.0);
        prop_assert!(boundary_toll(&state, &inc, &pot).unwrap() >= 0.0);
    }

    #[test]
    fn convex_marginal_tolls_increase_with_exposure(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = rng.gen_range(1..=3);
        let spec = random_potential_spec(&mut rng, d);
        prop_assume!(convex(&spec));
        let pot = Potential::new(spec).unwrap();
        let low = vector(&mut rng, d, 5.0);
        let high: Vec<f64> = low.iter().map(|x| x + rng.gen_range(0.0..5.0)).collect();
        let inc = vector(&mut rng, d, 2.0);
        let at = |e: &[f64]| boundary_toll(&BoundaryState { exposure: e.to_vec(), ..BoundaryState::new("b", d, "") }, &inc, &pot).unwrap();
        prop_assert!(at(&low) <= at(&high) + 1e-9);
    }
}

#[test]
fn non_monotone_potential_is_caught_by_splitting() {
    let dip = PotentialSpec::PiecewiseConvex {
        knots: vec![vec![Knot { at: 0.0, slope: 2.0 }, Knot { at: 1.0, slope: -3.0 }]],
    };
    assert!(matches!(Potential::new(dip.clone()), Err(Error::InvalidPotential(_))));
    let pot = Potential::unchecked(dip);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let partitions: Vec<_> = (0..200).map(|_| random_partition(&mut rng, &[2.0], 6)).collect();
    let report = splitting_invariance_check(&pot, &[0.0], &[2.0], &partitions).unwrap();
    assert!(!report.passed());
}

#[test]
fn bad_partitions_and_increments_are_rejected() {
    let pot = Potential::new(PotentialSpec::Linear { weights: vec![1.0, 1.0] }).unwrap();
    let r = splitting_invariance_check(&pot, &[0.0, 0.0], &[1.0, 1.0], &[vec![vec![1.0, 0.5]]]);
    assert!(matches!(r, Err(Error::PartitionSum { .. })));
    let s = BoundaryState::new("b", 2, "");
    assert!(matches!(boundary_toll(&s, &[1.0], &pot), Err(Error::DimensionMismatch { .. })));
    assert!(matches!(boundary_toll(&s, &[1.0, -0.1], &pot), Err(Error::NegativeIncrement { .. })));
}

#[test]
fn ledger_is_monotone_under_concurrent_commits() {
    let spec = BoundarySpec {
        id: "funds".into(),
        dimension: 2,
        potential: PotentialSpec::Power { weights: vec![1.0, 0.5], exponent: 2.0 },
        xi_policy: XiPolicy { sources: vec!["account".into()], persistent: true },
    };
    let xi = BTreeMap::from([("funds".to_string(), "acct-1".to_string())]);
    let ledger = BoundaryLedger::new(&[spec], &xi).unwrap();
    let (threads, per_thread) = (8, 50);
    let charged: Vec<f64> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|k| {
                let ledger = &ledger;
                s.spawn(move || {
                    let mut rng = ChaCha8Rng::seed_from_u64(k);
                    let mut total = 0.0;
                    for _ in 0..per_thread {
                        let inc = vec![rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
                        loop {
                            let (toll, version) = ledger.quote("funds", &inc).unwrap();
                            match ledger.commit("funds", &inc, version) {
                                Ok(_) => {
                                    total += toll;
                                    break;
                                }
                                Err(Error::VersionConflict { .. }) => continue,
                                Err(e) => panic!("{e}"),
                            }
                        }
                    }
                    total
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let history = ledger.history();
    assert_eq!(history.len(), threads as usize * per_thread);
    for (i, w) in history.windows(2).enumerate() {
        assert_eq!(w[0].version + 1, w[1].version, "record {i}");
        assert!(w[0].exposure.iter().zip(&w[1].exposure).all(|(a, b)| a <= b));
    }
    assert!(history.iter().all(|r| r.xi == "acct-1"));
    // Quotes priced against the committed version telescope to the final potential.
    let last = ledger.snapshot("funds").unwrap();
    let phi = 0.5f64.mul_add(last.exposure[1].powi(2), last.exposure[0].powi(2));
    assert!((charged.iter().sum::<f64>() - phi).abs() <= 1e-9 * (1.0 + phi));
    assert!(matches!(ledger.commit("funds", &[0.0, 0.0], 0), Err(Error::VersionConflict { .. })));
    assert!(matches!(ledger.quote("other", &[0.0, 0.0]), Err(Error::UnknownBoundary(_))));
}

#[test]
fn path_dependence_gap_vanishes_after_redesign() {
    let r = path_dependence_counterexample();
    assert_eq!(r.lambda_sums[0], r.lambda_sums[1]);
    assert!(r.gap > 0.01);
    assert!(r.redesigned_max_spread <= 1e-9);
    assert!(r.assumption_max_spread <= 1e-9);
}
