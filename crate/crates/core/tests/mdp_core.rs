use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sailr_core::env::random::{random_cmdp, random_policy};
use sailr_core::env::toy::{fig2, fig2_backup, fig2_mdp, FIG2_GAMMA, FIG2_VIOLATION};
use sailr_core::mdp::{
    chance_constraint_value, discounted_average_value, enumerate_trajectories, evaluate_policy, occupancy,
    performance_difference, value_iteration, FiniteMdp, RewardKind, TabularPolicy,
};
use sailr_core::SailrError;

fn fig2_policy(actions: [usize; 4]) -> TabularPolicy {
    let mut all = actions.to_vec();
    all.extend([0, 0]);
    TabularPolicy::deterministic(6, 3, &all).unwrap()
}

/// Two safe states that flip a fair coin between them, plus meta-states.
fn coin_mdp() -> FiniteMdp {
    let ns = 4;
    let mut t = vec![0.0; ns * ns];
    for s in 0..2 {
        t[s * ns] = 0.5;
        t[s * ns + 1] = 0.5;
    }
    t[2 * ns + 3] = 1.0;
    t[3 * ns + 3] = 1.0;
    FiniteMdp::new(ns, 1, 0.9, vec![1.0, 0.0, 0.0, 0.0], t, vec![0.3, 0.7, 0.0, 0.0], 2, 3).unwrap()
}

#[test]
fn backup_cost_value_at_state_three() {
    let mdp = fig2_mdp();
    let vf = evaluate_policy(&mdp, &fig2_backup(), RewardKind::Cost).unwrap();
    assert!((vf.v[fig2::S3] - FIG2_GAMMA).abs() < 1e-12);
    assert!((vf.v[FIG2_VIOLATION] - 1.0).abs() < 1e-12);
    assert!(vf.v[fig2::S1].abs() < 1e-12);
}

#[test]
fn unreachable_violation_costs_nothing() {
    let mdp = fig2_mdp();
    // 1 -> 4 -> 1 forever
    let pi = fig2_policy([fig2::TO_4, 0, 0, fig2::TO_1_FROM_4]);
    let vf = evaluate_policy(&mdp, &pi, RewardKind::Cost).unwrap();
    assert_eq!(vf.at(mdp.d0()), 0.0);
}

#[test]
fn policy_shape_mismatch_is_structural() {
    let mdp = fig2_mdp();
    let pi = TabularPolicy::uniform(5, 3);
    assert!(matches!(
        evaluate_policy(&mdp, &pi, RewardKind::Reward),
        Err(SailrError::Structural(_))
    ));
}

#[test]
fn occupancy_of_the_risky_path() {
    let mdp = fig2_mdp();
    let pi = fig2_policy([fig2::TO_2, fig2::TO_VIOLATION_FROM_2, 0, 0]);
    let d = occupancy(&mdp, &pi).unwrap();
    assert!((d.get(fig2::S1, fig2::TO_2) - (1.0 - FIG2_GAMMA)).abs() < 1e-12);
    assert!((d.total_mass() - 1.0).abs() < 1e-10);
}

#[test]
fn occupancy_cost_matches_evaluation_on_random_mdps() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for seed in 0..50 {
        let mdp = random_cmdp(4, 3, 0.4, seed).unwrap();
        let pi = random_policy(6, 3, 0.3, &mut rng);
        let d = occupancy(&mdp, &pi).unwrap();
        let g = mdp.gamma();
        let v = evaluate_policy(&mdp, &pi, RewardKind::Cost).unwrap().at(mdp.d0());
        assert!((d.expect(mdp.signal(RewardKind::Cost)) / (1.0 - g) - v).abs() < 1e-8);
        let vr = evaluate_policy(&mdp, &pi, RewardKind::Reward).unwrap().at(mdp.d0());
        assert!((d.expect(mdp.signal(RewardKind::Reward)) / (1.0 - g) - vr).abs() < 1e-8);
        assert!(d.d.iter().all(|&x| x >= -1e-15));
    }
}

#[test]
fn occupancy_satisfies_discounted_flow() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for seed in 0..20 {
        let mdp = random_cmdp(4, 2, 0.3, seed).unwrap();
        let pi = random_policy(6, 2, 0.3, &mut rng);
        let d = occupancy(&mdp, &pi).unwrap();
        let marg = d.state_marginal();
        let g = mdp.gamma();
        for s2 in 0..6 {
            let mut inflow = 0.0;
            for s in 0..6 {
                for a in 0..2 {
                    inflow += d.get(s, a) * mdp.next(s, a)[s2];
                }
            }
            let rhs = (1.0 - g) * mdp.d0()[s2] + g * inflow;
            assert!((marg[s2] - rhs).abs() < 1e-12);
        }
    }
}

#[test]
fn cost_value_iteration_finds_the_safe_cycle() {
    let mdp = fig2_mdp();
    let (vf, pi) = value_iteration(&mdp, RewardKind::Cost, 1e-12).unwrap();
    assert!(vf.v[fig2::S1].abs() < 1e-12);
    // 1 -> 2 -> 1 is also cost-free; ties go to the lowest index
    assert_eq!(pi.mode(fig2::S1), fig2::TO_2);
    assert_eq!(pi.mode(fig2::S2), fig2::TO_1_FROM_2);
    let cost = evaluate_policy(&mdp, &pi, RewardKind::Cost).unwrap();
    assert_eq!(cost.at(mdp.d0()), 0.0);
}

#[test]
fn value_iteration_contracts() {
    for seed in 0..10 {
        let mdp = random_cmdp(4, 3, 0.3, seed).unwrap();
        let (star, _) = value_iteration(&mdp, RewardKind::Reward, 1e-13).unwrap();
        let mut q = vec![0.0; 18];
        let mut prev = f64::INFINITY;
        for _ in 0..30 {
            q = sailr_core::mdp::bellman_optimality_backup(&mdp, RewardKind::Reward, &q);
            let err = q.iter().zip(&star.q).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err <= mdp.gamma() * prev + 1e-10);
            prev = err;
        }
    }
}

#[test]
fn enumeration_examples() {
    let mdp = fig2_mdp();
    let pi = fig2_policy([fig2::TO_4, 0, 0, fig2::TO_1_FROM_4]);
    let trajs = enumerate_trajectories(&mdp, &pi, 6).unwrap();
    assert_eq!(trajs.len(), 1);
    assert_eq!(trajs[0].probability, 1.0);

    let coin = coin_mdp();
    let trajs = enumerate_trajectories(&coin, &TabularPolicy::uniform(4, 1), 2).unwrap();
    assert_eq!(trajs.len(), 4);
    let total: f64 = trajs.iter().map(|t| t.probability).sum();
    assert!((total - 1.0).abs() < 1e-12);
    assert!(trajs.iter().all(|t| (t.probability - 0.25).abs() < 1e-12));
}

#[test]
fn enumeration_budget_is_enforced() {
    let coin = coin_mdp();
    let err = enumerate_trajectories(&coin, &TabularPolicy::uniform(4, 1), 25).unwrap_err();
    assert!(matches!(err, SailrError::Budget(_)));
}

#[test]
fn enumerated_violation_mass_matches_truncated_cost() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for seed in 0..10 {
        let mdp = random_cmdp(2, 2, 0.5, seed).unwrap();
        let pi = random_policy(4, 2, 0.2, &mut rng);
        let h = 6;
        let trajs = enumerate_trajectories(&mdp, &pi, h).unwrap();
        // expected number of visits to the violation state before h
        let mut from_enum = 0.0;
        for t in &trajs {
            let visits = t.steps.iter().filter(|(s, _)| *s == mdp.violation_state()).count();
            from_enum += t.probability * visits as f64;
        }
        // forward distribution oracle
        let mut dist = mdp.d0().to_vec();
        let mut direct = 0.0;
        for _ in 0..h {
            direct += dist[mdp.violation_state()];
            let mut next = vec![0.0; 4];
            for s in 0..4 {
                for a in 0..2 {
                    for s2 in 0..4 {
                        next[s2] += dist[s] * pi.prob(s, a) * mdp.next(s, a)[s2];
                    }
                }
            }
            dist = next;
        }
        assert!((from_enum - direct).abs() < 1e-12);
    }
}

#[test]
fn chance_constraint_examples() {
    let mdp = fig2_mdp();
    let safe = fig2_policy([fig2::TO_4, 0, 0, fig2::TO_1_FROM_4]);
    let v = chance_constraint_value(&mdp, &safe, 300).unwrap();
    assert!((v.value - 1.0).abs() < 1e-12);
    let risky = fig2_policy([fig2::TO_3, 0, 0, 0]);
    let v = chance_constraint_value(&mdp, &risky, 300).unwrap();
    let g = FIG2_GAMMA;
    assert!((v.value - (1.0 - g * g)).abs() < 1e-12 + v.truncation_error);
}

#[test]
fn chance_constraint_matches_cost_value() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for seed in 0..100 {
        let mdp = random_cmdp(2 + (seed as usize % 3), 2 + (seed as usize % 2), 0.5, seed).unwrap();
        let ns = mdp.num_states();
        let pi = random_policy(ns, mdp.num_actions(), 0.3, &mut rng);
        let cap = 200;
        let c = chance_constraint_value(&mdp, &pi, cap).unwrap();
        let vbar = evaluate_policy(&mdp, &pi, RewardKind::Cost).unwrap().at(mdp.d0());
        assert!(((1.0 - c.value) - vbar).abs() <= 1e-5 + c.truncation_error);
    }
}

#[test]
fn discounted_average_and_performance_difference() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for seed in 0..20 {
        let mdp = random_cmdp(3, 2, 0.3, seed).unwrap();
        let pi = random_policy(5, 2, 0.3, &mut rng);
        let v = evaluate_policy(&mdp, &pi, RewardKind::Reward).unwrap().at(mdp.d0());
        let avg = discounted_average_value(&mdp, &pi, RewardKind::Reward, 400, 1.0).unwrap();
        assert!((v - avg.value).abs() <= avg.truncation_error + 1e-10);
        let f: Vec<f64> = (0..5).map(|i| (i as f64 * 0.37 + seed as f64 * 0.11) % 1.0).collect();
        let fd0: f64 = mdp.d0().iter().zip(&f).map(|(p, x)| p * x).sum();
        let pdl = performance_difference(&mdp, &pi, &f).unwrap();
        assert!((v - fd0 - pdl).abs() < 1e-8);
    }
}

#[test]
fn json_round_trip_is_bit_stable() {
    let mdp = fig2_mdp();
    let text = mdp.to_json();
    let back = FiniteMdp::from_json(&text).unwrap();
    assert_eq!(back, mdp);
    assert_eq!(back.to_json(), text);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    mdp.save(&path).unwrap();
    assert_eq!(FiniteMdp::load(&path).unwrap(), mdp);
}

#[test]
fn invalid_models_are_rejected() {
    let mdp = fig2_mdp();
    let mut file = mdp.to_file_repr();
    file.reward[0][0] = 1.5;
    assert!(FiniteMdp::from_file_repr(file).is_err());
    let mut file = mdp.to_file_repr();
    file.d0 = vec![0.0, 0.0, 0.0, 0.0, 1.0, 0.0];
    assert!(FiniteMdp::from_file_repr(file).is_err());
    let mut file = mdp.to_file_repr();
    file.transition[0][0][1] = 0.9;
    assert!(FiniteMdp::from_file_repr(file).is_err());
    assert!(FiniteMdp::from_json("{\"num_states\": 2}").is_err());
}
