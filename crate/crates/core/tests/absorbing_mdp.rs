use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sailr_core::absorbing::{
    build_absorbing, intervention_probability, intervention_probability_segments, transform_trajectory, StepRecord,
};
use sailr_core::env::random::{random_cmdp, random_policy};
use sailr_core::env::toy::{appendix_b_counterexample, counterexample_layout, fig2, fig2_toy};
use sailr_core::mdp::{evaluate_policy, occupancy, sample_categorical, value_iteration, RewardKind, TabularPolicy};
use sailr_core::rules::{build_intervention_set, make_baseline_rule, perturb_rule, shield_sample, InterventionSet};
use sailr_core::SailrError;

fn fig2_policy(actions: [usize; 4]) -> TabularPolicy {
    let mut all = actions.to_vec();
    all.extend([0, 0]);
    TabularPolicy::deterministic(6, 3, &all).unwrap()
}

#[test]
fn fig2_surrogate_redirects_the_intervened_edges() {
    let (mdp, rule) = fig2_toy();
    let set = build_intervention_set(&rule);
    let abs = build_absorbing(&mdp, &set, -1.0).unwrap();
    let dagger = abs.dagger_state();
    assert_eq!(dagger, 6);
    assert_eq!(abs.num_states(), 7);
    for a in [fig2::TO_2, fig2::TO_3] {
        assert_eq!(abs.next(fig2::S1, a)[dagger], 1.0);
        assert_eq!(abs.reward(fig2::S1, a), -1.0);
    }
    assert_eq!(abs.next(fig2::S1, fig2::TO_4)[fig2::S4], 1.0);
    assert_eq!(abs.reward(fig2::S1, fig2::TO_4), 0.1);
    for a in 0..3 {
        assert_eq!(abs.next(dagger, a)[dagger], 1.0);
        assert_eq!(abs.reward(dagger, a), 0.0);
    }
    // the surrogate optimum is the safe cycle
    let (vf, pi) = value_iteration(&abs, RewardKind::Reward, 1e-13).unwrap();
    assert_eq!(pi.mode(fig2::S1), fig2::TO_4);
    assert_eq!(pi.mode(fig2::S4), fig2::TO_1_FROM_4);
    assert!((vf.v[fig2::S1] - 0.1 / (1.0 - 0.9)).abs() < 1e-9);
}

#[test]
fn empty_and_full_sets() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for seed in 0..10 {
        let mdp = random_cmdp(4, 2, 0.3, seed).unwrap();
        let pi = random_policy(6, 2, 0.3, &mut rng);
        let empty = build_absorbing(&mdp, &InterventionSet::empty(6, 2), -1.0).unwrap();
        let ext = empty.extend_policy(&pi).unwrap();
        let v = evaluate_policy(&mdp, &pi, RewardKind::Reward).unwrap();
        let vt = evaluate_policy(&empty, &ext, RewardKind::Reward).unwrap();
        for s in 0..6 {
            assert!((v.v[s] - vt.v[s]).abs() < 1e-12);
        }
        assert_eq!(occupancy(&empty, &ext).unwrap().state_marginal()[6], 0.0);

        let pairs: Vec<(usize, usize)> = mdp.safe_states().flat_map(|s| [(s, 0), (s, 1)]).collect();
        let full = InterventionSet::from_pairs(&mdp, &pairs).unwrap();
        let penalty = -0.7;
        let abs = build_absorbing(&mdp, &full, penalty).unwrap();
        let vt = evaluate_policy(&abs, &abs.extend_policy(&pi).unwrap(), RewardKind::Reward).unwrap();
        assert!((vt.at(abs.d0()) - penalty).abs() < 1e-12);
    }
}

#[test]
fn positive_penalty_is_a_contract_violation() {
    let (mdp, rule) = fig2_toy();
    let set = build_intervention_set(&rule);
    assert!(matches!(build_absorbing(&mdp, &set, 0.5), Err(SailrError::Contract(_))));
    assert!(build_absorbing(&mdp, &set, 0.0).is_ok());
}

#[test]
fn intervention_probability_examples() {
    let (mdp, rule) = fig2_toy();
    let set = build_intervention_set(&rule);
    let cycle = fig2_policy([fig2::TO_4, 0, 0, fig2::TO_1_FROM_4]);
    assert_eq!(intervention_probability(&mdp, &set, &cycle).unwrap(), 0.0);
    let risky = fig2_policy([fig2::TO_2, 0, 0, 0]);
    assert!((intervention_probability(&mdp, &set, &risky).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn segment_form_is_gamma_times_occupancy_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for seed in 0..50 {
        let mdp = random_cmdp(4, 3, 0.4, seed).unwrap();
        let mu = random_policy(6, 3, 0.5, &mut rng);
        let rule = make_baseline_rule(&mdp, &mu, 0.0, false).unwrap();
        let rule = perturb_rule(&mdp, &rule, 0.1, &mut rng).unwrap();
        let set = build_intervention_set(&rule);
        let pi = random_policy(6, 3, 0.3, &mut rng);
        let occ = intervention_probability(&mdp, &set, &pi).unwrap();
        let seg = intervention_probability_segments(&mdp, &set, &pi, 400).unwrap();
        assert!((seg.value - mdp.gamma() * occ).abs() <= seg.truncation_error + 1e-12);
        assert!((0.0..=1.0).contains(&occ));
    }
}

#[test]
fn counterexample_surrogate_values() {
    let (mdp, set) = appendix_b_counterexample(0);
    let lay = counterexample_layout(0);
    let g = mdp.gamma();

    let abs = build_absorbing(&mdp, &set, -0.5).unwrap();
    let (vf, pi) = value_iteration(&abs, RewardKind::Reward, 1e-13).unwrap();
    assert!((vf.v[lay.start] - (1.0 + g * -0.5)).abs() < 1e-9);
    assert!((vf.v[lay.start] - 0.55).abs() < 1e-9);
    let pi = abs.restrict_policy(&pi).unwrap();
    assert!(intervention_probability(&mdp, &set, &pi).unwrap() > 0.0);

    let abs = build_absorbing(&mdp, &set, -2.0).unwrap();
    let (vf, pi) = value_iteration(&abs, RewardKind::Reward, 1e-13).unwrap();
    assert!(vf.v[lay.start].abs() < 1e-9);
    let pi = abs.restrict_policy(&pi).unwrap();
    assert_eq!(intervention_probability(&mdp, &set, &pi).unwrap(), 0.0);
}

/// Runs the shielded policy in the base MDP for `len` steps, recording the
/// log the training loop would write; after an intervention the backup acts.
fn raw_rollout(
    mdp: &sailr_core::mdp::FiniteMdp,
    rule: &sailr_core::rules::InterventionRule,
    pi: &TabularPolicy,
    len: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<StepRecord> {
    let mut s = sample_categorical(mdp.d0(), rng);
    let mut out = Vec::with_capacity(len);
    let mut backup_in_control = false;
    for t in 0..len {
        let (proposed, executed, intervened) = if backup_in_control {
            (None, sample_categorical(rule.backup().row(s), rng), true)
        } else {
            let a = sample_categorical(pi.row(s), rng);
            let d = shield_sample(rule, &s, a, rng).unwrap();
            backup_in_control = d.intervened;
            (Some(a), d.action, d.intervened)
        };
        out.push(StepRecord {
            t,
            state: s,
            proposed_action: proposed,
            executed_action: executed,
            reward: mdp.reward(s, executed),
            intervened,
            violated: s == mdp.violation_state(),
        });
        s = sample_categorical(mdp.next(s, executed), rng);
    }
    out
}

#[test]
fn transformed_rollouts_match_surrogate_occupancy() {
    let (mdp, rule) = fig2_toy();
    let set = build_intervention_set(&rule);
    let abs = build_absorbing(&mdp, &set, -1.0).unwrap();
    let pi = TabularPolicy::uniform(6, 3);
    let exact = occupancy(&abs, &abs.extend_policy(&pi).unwrap())
        .unwrap()
        .state_marginal();
    let g = mdp.gamma();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let n = 10_000;
    let mut counts = vec![0usize; 7];
    for _ in 0..n {
        // stopping time with P(tau = t) = (1 - g) g^t
        let mut tau = 0;
        while rng.random::<f64>() < g {
            tau += 1;
        }
        let raw = raw_rollout(&mdp, &rule, &pi, tau + 1, &mut rng);
        let pair = transform_trajectory(raw, -1.0).unwrap();
        let state = if tau < pair.surrogate.len() {
            pair.surrogate[tau].state
        } else {
            assert!(pair.absorbed);
            abs.dagger_state()
        };
        counts[state] += 1;
    }
    for s in 0..7 {
        let p = exact[s];
        let freq = counts[s] as f64 / n as f64;
        let se = (p * (1.0 - p) / n as f64).sqrt().max(1e-12);
        assert!((freq - p).abs() <= 3.0 * se + 1e-12, "state {s}: {freq} vs {p}");
    }
}

#[test]
fn transform_records_the_proposal_at_the_intervention() {
    let (mdp, rule) = fig2_toy();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let pi = fig2_policy([fig2::TO_3, 0, 0, 0]);
    let raw = raw_rollout(&mdp, &rule, &pi, 5, &mut rng);
    let pair = transform_trajectory(raw.clone(), -2.0).unwrap();
    assert_eq!(pair.intervention_time, Some(0));
    assert_eq!(pair.surrogate.len(), 1);
    assert_eq!(pair.surrogate[0].action, fig2::TO_3);
    assert_eq!(pair.surrogate[0].reward, -2.0);
    assert_eq!(pair.raw[0].executed_action, fig2::TO_4);
    assert_eq!(pair.raw, raw);
}
