mod common;

use approx::assert_abs_diff_eq;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tollgate_core::instances::{hedgeable_witness, riskier_incumbent_witness, wire_transfer_witness};
use tollgate_core::mdp::{coupled_outcomes, terminal_loss_distribution, Branch, SafeDefaultEntry};
use tollgate_core::oracle::EnumerationBudget;
use tollgate_core::random::{random_ambiguity_set, random_payment_witness, random_policy, random_risk_spec, random_tree, TreeConfig};
use tollgate_core::toll::{
    authority_premium, counterfactual_toll, iap_check, interventional_risk, premium_gaps, robust_capital,
    verify_witness, AmbiguitySet,
};
use tollgate_core::{EnvironmentModel, Error, Intervention, Policy, RiskSpec, SafeDefaultMap};

const SPECS: [RiskSpec; 3] = [
    RiskSpec::Expectation,
    RiskSpec::Entropic { gamma: 0.5 },
    RiskSpec::ConditionalEs { alpha: 0.8 },
];

fn entry(action: &str, default: &str) -> SafeDefaultEntry {
    SafeDefaultEntry { action: action.into(), default: default.into(), time: None, state: None }
}

fn pair(levels_a: &[f64], levels_b: &[f64]) -> AmbiguitySet {
    let acts = [("safe", 0), ("plus", 1)];
    AmbiguitySet::new(vec![common::one_shot(&acts, levels_a), common::one_shot(&acts, levels_b)]).unwrap()
}

#[test]
fn deterministic_toll_examples() {
    let m = common::one_shot(&[("safe", 0), ("big", 1), ("small", 2)], &[2.0, 5.0, 1.0]);
    let cont = Policy::noop(&m);
    let sdm = m.safe_defaults().clone();
    let id = |n: &str| m.action_id(n).unwrap();
    for spec in SPECS {
        let same = counterfactual_toll(&m, m.root(), id("safe"), &cont, &spec, &sdm).unwrap();
        assert_eq!((same.signed_toll, same.positive_toll), (0.0, 0.0));
        let big = counterfactual_toll(&m, m.root(), id("big"), &cont, &spec, &sdm).unwrap();
        assert_abs_diff_eq!(big.signed_toll, 3.0, epsilon = 1e-12);
        let small = counterfactual_toll(&m, m.root(), id("small"), &cont, &spec, &sdm).unwrap();
        assert_abs_diff_eq!(small.signed_toll, -1.0, epsilon = 1e-12);
        assert_eq!(small.positive_toll, 0.0);
    }
}

#[test]
fn repeated_evaluation_is_bit_identical_and_defaults_matter() {
    let m = common::one_shot(&[("safe", 0), ("mid", 1), ("risky", 2)], &[0.0, 1.0, 5.0]);
    let cont = Policy::noop(&m);
    let spec = RiskSpec::Entropic { gamma: 0.7 };
    let risky = m.action_id("risky").unwrap();
    let to_safe = SafeDefaultMap::new(&m, &[entry("risky", "safe"), entry("mid", "safe")]).unwrap();
    let to_mid = SafeDefaultMap::new(&m, &[entry("risky", "mid"), entry("safe", "safe")]).unwrap();
    let a = counterfactual_toll(&m, m.root(), risky, &cont, &spec, &to_safe).unwrap();
    for _ in 0..10 {
        let again = counterfactual_toll(&m, m.root(), risky, &cont, &spec, &to_safe).unwrap();
        assert_eq!(a.signed_toll.to_bits(), again.signed_toll.to_bits());
    }
    let b = counterfactual_toll(&m, m.root(), risky, &cont, &spec, &to_mid).unwrap();
    assert_abs_diff_eq!(a.signed_toll, 5.0, epsilon = 1e-12);
    assert_abs_diff_eq!(b.signed_toll, 4.0, epsilon = 1e-12);
    assert_ne!(a.safe_default_used, b.safe_default_used);
}

fn losses_of(m: &EnvironmentModel, cells: &[tollgate_core::mdp::CoupledOutcome], k: usize) -> Vec<f64> {
    cells.iter().map(|c| m.terminal_loss(c.terminals[k]).unwrap()).collect()
}

#[test]
fn pathwise_dominance_orders_signed_tolls() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let cfg = TreeConfig { max_depth: 4, max_extra_actions: 2, ..TreeConfig::default() };
    let mut dominated = 0;
    let mut trees = 0;
    while dominated < 100 {
        trees += 1;
        assert!(trees < 20_000, "too few dominated pairs");
        let m = random_tree(&mut rng, &cfg).unwrap();
        let acts = m.actions(m.root()).unwrap().to_vec();
        if acts.len() < 3 {
            continue;
        }
        let cont = random_policy(&mut rng, &m).unwrap();
        let (a, b) = (acts[1], acts[2]);
        let cells = coupled_outcomes(&m, m.root(), &[Branch { action: a, cont: &cont }, Branch { action: b, cont: &cont }])
            .unwrap();
        let (la, lb) = (losses_of(&m, &cells, 0), losses_of(&m, &cells, 1));
        let (lo, hi) = if la.iter().zip(&lb).all(|(x, y)| x <= y) {
            (a, b)
        } else if la.iter().zip(&lb).all(|(x, y)| y <= x) {
            (b, a)
        } else {
            continue;
        };
        dominated += 1;
        let sdm = m.safe_defaults();
        for spec in SPECS {
            let tlo = counterfactual_toll(&m, m.root(), lo, &cont, &spec, sdm).unwrap().signed_toll;
            let thi = counterfactual_toll(&m, m.root(), hi, &cont, &spec, sdm).unwrap().signed_toll;
            assert!(tlo <= thi + 1e-12, "{spec:?}: {tlo} > {thi}");
        }
    }
}

#[test]
fn tolls_are_bounded_by_the_largest_reachable_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let cfg = TreeConfig { max_depth: 5, ..TreeConfig::default() };
    for _ in 0..200 {
        let m = random_tree(&mut rng, &cfg).unwrap();
        let cont = random_policy(&mut rng, &m).unwrap();
        let spec = random_risk_spec(&mut rng);
        for &a in m.actions(m.root()).unwrap() {
            let q = counterfactual_toll(&m, m.root(), a, &cont, &spec, m.safe_defaults()).unwrap();
            let bound = [a, q.safe_default_used]
                .iter()
                .map(|&x| {
                    let iv = Intervention::new(&m, m.root(), x).unwrap();
                    let law = terminal_loss_distribution(&m, &iv, &cont).unwrap();
                    law.atoms().iter().map(|(l, _)| *l).fold(0.0, f64::max)
                })
                .fold(0.0, f64::max);
            assert!(q.signed_toll.abs() <= bound + 1e-9);
        }
    }
}

#[test]
fn premium_and_capital_examples() {
    let one = AmbiguitySet::new(vec![common::one_shot(&[("safe", 0), ("plus", 1)], &[0.0, 1.0])]).unwrap();
    let m = one.reference();
    let (cont, plus) = (Policy::noop(m), m.action_id("plus").unwrap());
    let sdm = m.safe_defaults().clone();
    let spec = RiskSpec::Entropic { gamma: 1.0 };
    assert_abs_diff_eq!(authority_premium(&one, m.root(), plus, &cont, &spec, &sdm).unwrap(), 1.0, epsilon = 1e-12);
    assert_abs_diff_eq!(robust_capital(&one, m.root(), &[plus], &cont, &spec).unwrap(), 1.0, epsilon = 1e-12);

    let two = pair(&[0.0, 0.3], &[0.0, 0.5]);
    let premium = authority_premium(&two, m.root(), plus, &cont, &spec, &sdm).unwrap();
    assert_abs_diff_eq!(premium, 0.5, epsilon = 1e-12);

    let dominated = pair(&[1.0, 0.5], &[2.0, 2.0]);
    assert_eq!(authority_premium(&dominated, m.root(), plus, &cont, &spec, &sdm).unwrap(), 0.0);

    // Risks {{1.0, 0.4}, {0.7, 1.2}} by model and action; the 4-cell max is 1.2.
    let grid = pair(&[1.0, 0.4], &[0.7, 1.2]);
    let safe = m.action_id("safe").unwrap();
    let cells = [[1.0, 0.4], [0.7, 1.2]];
    let oracle = cells.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
    let k = robust_capital(&grid, m.root(), &[safe, plus], &cont, &spec).unwrap();
    assert_abs_diff_eq!(k, oracle, epsilon = 1e-12);
    assert_abs_diff_eq!(k, 1.2, epsilon = 1e-12);

    // Adding an action whose worst case sits below K(U) leaves K unchanged.
    let acts = [("safe", 0), ("plus", 1), ("low", 2)];
    let three = AmbiguitySet::new(vec![
        common::one_shot(&acts, &[1.0, 0.4, 0.1]),
        common::one_shot(&acts, &[0.7, 1.2, 0.3]),
    ])
    .unwrap();
    let low = three.reference().action_id("low").unwrap();
    let before = robust_capital(&three, m.root(), &[safe, plus], &cont, &spec).unwrap();
    let after = robust_capital(&three, m.root(), &[safe, plus, low], &cont, &spec).unwrap();
    assert_eq!(before, after);
    assert!(matches!(robust_capital(&three, m.root(), &[], &cont, &spec), Err(Error::EmptyActionSetArgument)));
}

#[test]
fn ambiguity_set_rejects_mismatched_skeletons() {
    assert!(matches!(AmbiguitySet::new(vec![]), Err(Error::EmptyAmbiguitySet)));
    let a = common::one_shot(&[("safe", 0), ("plus", 1)], &[0.0, 1.0]);
    let b = common::one_shot(&[("safe", 0), ("other", 1)], &[0.0, 1.0]);
    assert!(matches!(AmbiguitySet::new(vec![a, b]), Err(Error::SkeletonMismatch(_))));
}

#[test]
fn clamp_before_or_after_the_max_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let cfg = TreeConfig { max_depth: 4, max_extra_actions: 2, ..TreeConfig::default() };
    for _ in 0..200 {
        let n = rng.gen_range(1..=4);
        let amb = random_ambiguity_set(&mut rng, &cfg, n).unwrap();
        let m = amb.reference();
        let cont = random_policy(&mut rng, m).unwrap();
        let spec = random_risk_spec(&mut rng);
        for &a in m.actions(m.root()).unwrap() {
            let inner = authority_premium(&amb, m.root(), a, &cont, &spec, m.safe_defaults()).unwrap();
            let gaps = premium_gaps(&amb, m.root(), a, &cont, &spec, m.safe_defaults()).unwrap();
            let outer = gaps.iter().copied().fold(f64::NEG_INFINITY, f64::max).max(0.0);
            assert_eq!(inner, outer);
        }
    }
}

#[test]
fn capital_max_decomposition_on_random_sets() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let cfg = TreeConfig { max_depth: 4, max_extra_actions: 2, ..TreeConfig::default() };
    let mut checked = 0;
    while checked < 150 {
        let n = rng.gen_range(1..=4);
        let amb = random_ambiguity_set(&mut rng, &cfg, n).unwrap();
        let m = amb.reference();
        let acts = m.actions(m.root()).unwrap().to_vec();
        if acts.len() < 2 {
            continue;
        }
        let cont = random_policy(&mut rng, m).unwrap();
        let spec = random_risk_spec(&mut rng);
        let a_plus = *acts.last().unwrap();
        let base = &acts[..acts.len() - 1];
        let r = iap_check(&amb, m.root(), base, a_plus, &cont, &spec, m.safe_defaults()).unwrap();
        assert!(r.decomposition_holds(1e-9), "{r:?}");
        assert!(r.iff_holds(), "{r:?}");
        // Independent double loop over models and actions.
        let mut worst = f64::NEG_INFINITY;
        for model in amb.models() {
            for &a in &acts {
                worst = worst.max(interventional_risk(model, m.root(), a, &cont, &spec).unwrap());
            }
        }
        assert_eq!(worst, r.capital_extended);
        checked += 1;
    }
}

#[test]
fn built_in_witness_instances() {
    let budget = EnumerationBudget::default();
    let run = |inst: &tollgate_core::instances::WitnessInstance| {
        let amb = &inst.ambiguity;
        let sdm = inst.safe_defaults();
        let w = verify_witness(amb, inst.node, inst.a_plus, &inst.cont, &inst.spec, sdm, &inst.witness, &budget).unwrap();
        let iap = iap_check(amb, inst.node, &inst.base, inst.a_plus, &inst.cont, &inst.spec, sdm).unwrap();
        (w, iap)
    };
    let (w, iap) = run(&wire_transfer_witness().unwrap());
    assert!(w.all_hold());
    assert!(iap.premium > 0.0 && iap.capital_increases && iap.iff_holds());

    let (w, _) = run(&hedgeable_witness().unwrap());
    assert!(w.tail_gap && !w.irreversible);

    let (w, iap) = run(&riskier_incumbent_witness().unwrap());
    assert!(w.all_hold());
    assert!(iap.premium > 0.0 && !iap.capital_increases && !iap.added_action_binds);
    assert!(iap.decomposition_holds(1e-9));
}

#[test]
fn duplicate_action_has_zero_premium_and_leaves_capital() {
    let acts = [("safe", 0), ("twin", 0)];
    let amb = AmbiguitySet::new(vec![common::one_shot(&acts, &[3.0]), common::one_shot(&acts, &[4.0])]).unwrap();
    let m = amb.reference();
    let cont = Policy::noop(m);
    let (safe, twin) = (m.action_id("safe").unwrap(), m.action_id("twin").unwrap());
    let spec = RiskSpec::ConditionalEs { alpha: 0.9 };
    let r = iap_check(&amb, m.root(), &[m.noop(), safe], twin, &cont, &spec, m.safe_defaults()).unwrap();
    assert_eq!(r.premium, 0.0);
    assert_eq!(r.capital_base, r.capital_extended);
    assert!(r.iff_holds());
}

#[test]
fn all_true_witness_implies_positive_premium() {
    let mut rng = ChaCha8Rng::seed_from_u64(53);
    let budget = EnumerationBudget::default();
    let (mut holds, mut fails) = (0, 0);
    for _ in 0..600 {
        let inst = random_payment_witness(&mut rng).unwrap();
        let sdm = inst.safe_defaults();
        let w = verify_witness(&inst.ambiguity, inst.node, inst.a_plus, &inst.cont, &inst.spec, sdm, &inst.witness, &budget)
            .unwrap();
        if w.all_hold() {
            holds += 1;
            let p = authority_premium(&inst.ambiguity, inst.node, inst.a_plus, &inst.cont, &inst.spec, sdm).unwrap();
            assert!(p > 0.0, "premium {p} with a valid witness");
        } else {
            fails += 1;
        }
    }
    assert!(holds >= 30 && fails >= 30, "holds {holds}, fails {fails}");
}
