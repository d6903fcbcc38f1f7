use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sailr_core::absorbing::{build_absorbing, intervention_probability};
use sailr_core::env::random::{random_cmdp_with, random_policy, RandomMdpSpec};
use sailr_core::mdp::{evaluate_policy, occupancy, RewardKind};
use sailr_core::rules::{build_intervention_set, certify_admissibility, is_partial, shield};
use sailr_core::verify::{make_rule, safer_policy, RuleKind};

fn instance(seed: u64, n: usize, na: usize, gamma: f64) -> sailr_core::mdp::FiniteMdp {
    let spec = RandomMdpSpec {
        num_safe_states: n,
        num_actions: na,
        unsafe_reach_prob: 0.6,
        gamma,
        max_successors: 3,
    };
    random_cmdp_with(&spec, seed).unwrap()
}

fn kind(i: usize) -> RuleKind {
    RuleKind::ALL[i % RuleKind::ALL.len()]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn evaluation_is_consistent(seed in any::<u64>(), n in 2usize..6, na in 2usize..4, gamma in 0.1f64..0.97) {
        let mdp = instance(seed, n, na, gamma);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pi = random_policy(mdp.num_states(), na, 0.3, &mut rng);
        let cost = evaluate_policy(&mdp, &pi, RewardKind::Cost).unwrap();
        for s in 0..mdp.num_states() {
            let avg: f64 = (0..na).map(|a| pi.prob(s, a) * cost.q(s, a)).sum();
            prop_assert!((avg - cost.v[s]).abs() < 1e-10);
            prop_assert!(cost.v[s] >= -1e-12 && cost.v[s] <= 1.0 / (1.0 - gamma) + 1e-9);
        }
        let d = occupancy(&mdp, &pi).unwrap();
        prop_assert!((d.total_mass() - 1.0).abs() < 1e-10);
        prop_assert!(d.d.iter().all(|&x| x >= -1e-14));
    }

    #[test]
    fn shielded_policy_properties(seed in any::<u64>(), n in 2usize..5, na in 2usize..4, k in 0usize..6, gamma in 0.3f64..0.95) {
        let mdp = instance(seed, n, na, gamma);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let eta = if k % 2 == 0 { 0.0 } else { 0.05 };
        let rule = make_rule(&mdp, kind(k), eta, &mut rng).unwrap();
        let pi = random_policy(mdp.num_states(), na, 0.3, &mut rng);
        let sp = shield(&pi, &rule).unwrap();
        prop_assert!(is_partial(&sp.set));
        for s in mdp.safe_states() {
            let adv: f64 = (0..na).map(|a| sp.policy.prob(s, a) * rule.advantage(s, a)).sum();
            prop_assert!(adv <= eta + 1e-10);
        }
        // shielded safety
        let sigma = certify_admissibility(&mdp, &rule).unwrap().sigma_min;
        let v = evaluate_policy(&mdp, &sp.policy, RewardKind::Cost).unwrap().at(mdp.d0());
        let bound = rule.qbar_mu_at(mdp.d0()) + (sigma + eta).min(2.0 * gamma) / (1.0 - gamma);
        prop_assert!(v <= bound + 1e-8);
    }

    #[test]
    fn value_offset_sandwich(seed in any::<u64>(), n in 2usize..5, na in 2usize..4, k in 0usize..6, penalty in -3.0f64..=0.0) {
        let mdp = instance(seed, n, na, 0.9);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 2);
        let rule = make_rule(&mdp, kind(k), 0.0, &mut rng).unwrap();
        let set = build_intervention_set(&rule);
        let pi = random_policy(mdp.num_states(), na, 0.3, &mut rng);
        let abs = build_absorbing(&mdp, &set, penalty).unwrap();
        let v = evaluate_policy(&mdp, &pi, RewardKind::Reward).unwrap().at(mdp.d0());
        let vt = evaluate_policy(&abs, &abs.extend_policy(&pi).unwrap(), RewardKind::Reward).unwrap().at(abs.d0());
        let pg = intervention_probability(&mdp, &set, &pi).unwrap();
        let r = penalty.abs();
        prop_assert!(r * pg <= v - vt + 1e-8);
        prop_assert!(v - vt <= (r + 10.0) * pg + 1e-8);
    }

    #[test]
    fn safer_policy_never_loses(seed in any::<u64>(), n in 2usize..5, na in 2usize..4, k in 0usize..6, penalty in -3.0f64..=0.0) {
        let mdp = instance(seed, n, na, 0.9);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 3);
        let rule = make_rule(&mdp, kind(k), 0.0, &mut rng).unwrap();
        let set = build_intervention_set(&rule);
        let pi = random_policy(mdp.num_states(), na, 0.3, &mut rng);
        let pf = safer_policy(&pi, &set).unwrap();
        let abs = build_absorbing(&mdp, &set, penalty).unwrap();
        let v = evaluate_policy(&abs, &abs.extend_policy(&pi).unwrap(), RewardKind::Reward).unwrap().at(abs.d0());
        let vf = evaluate_policy(&abs, &abs.extend_policy(&pf).unwrap(), RewardKind::Reward).unwrap().at(abs.d0());
        prop_assert!(vf >= v - 1e-9);
        let pg = intervention_probability(&mdp, &set, &pi).unwrap();
        if penalty < -1e-6 && pg > 1e-6 {
            prop_assert!(vf > v);
        }
        prop_assert!(intervention_probability(&mdp, &set, &pf).unwrap() <= 1e-12);
    }
}
