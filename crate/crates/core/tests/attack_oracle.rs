mod common;

use dmao_core::linalg::{dist2, rel_dist};
use dmao_core::{
    battery_damage_matrix, equivalent_objective, predicted_activation, reference_solve, run_spds, time_tuning_matrix,
    Attack, Channel, Config, GoalSpec, ReferenceOptions, RunOptions, StealthGate, StepSchedule,
};
use proptest::prelude::*;

/// Feeds a gate the residual of the previous iteration at each round, as the
/// attacker sees it, and returns the activation it latched.
fn replay(residuals: &[f64], eps_s: f64) -> Option<usize> {
    let mut gate = StealthGate::new(eps_s);
    for k in 1..=residuals.len() + 1 {
        let seen = if k == 1 { f64::INFINITY } else { residuals[k - 2] };
        gate.observe(k, seen);
    }
    gate.activation()
}

#[test]
fn gate_opens_on_first_residual_below_threshold() {
    let residuals: Vec<f64> = (1..=20).map(|k| 0.5f64.powi(k)).collect();
    // Between the residuals of iterations 10 and 11.
    let eps_s = 0.5 * (residuals[9] + residuals[10]);
    assert_eq!(replay(&residuals, eps_s), Some(11));
    assert_eq!(predicted_activation(&residuals, eps_s), Some(11));
    assert_eq!(replay(&residuals, 0.0), None);
    assert_eq!(predicted_activation(&residuals, 0.0), None);
    assert_eq!(replay(&residuals, f64::INFINITY), Some(0));
}

proptest! {
    #[test]
    fn gate_replay_matches_prediction(
        residuals in prop::collection::vec(0.0f64..1.0, 1..40),
        eps_s in 0.0f64..1.0,
    ) {
        prop_assert_eq!(replay(&residuals, eps_s), predicted_activation(&residuals, eps_s));
    }

    #[test]
    fn reshape_goal_matches_weighted_sum(c in prop::collection::vec(0.0f64..1.0, 12), t_f in 1usize..5) {
        let a = battery_damage_matrix(t_f, 0.2, 7.0, 12).unwrap();
        let want: f64 = (1..=12)
            .map(|t| {
                let w: f64 = if t % t_f == 0 { 0.2 } else { 7.0 };
                (w * c[t - 1]).powi(2)
            })
            .sum();
        prop_assert!((a.goal(&c) - want).abs() <= 1e-12 * want.max(1.0));
        let g = a.goal_grad(&c);
        for t in 0..12 {
            let mut up = c.clone();
            up[t] += 1e-6;
            let mut dn = c.clone();
            dn[t] -= 1e-6;
            let fd = (a.goal(&up) - a.goal(&dn)) / 2e-6;
            prop_assert!((fd - g[t]).abs() <= 1e-6 * g[t].abs().max(1.0));
        }
    }
}

#[test]
fn time_tuning_weights_mark_preferred_slots() {
    let a = time_tuning_matrix(&[2, 3], 0.2, 5.0, 4).unwrap();
    assert_eq!(a.diag, vec![5.0, 0.2, 0.2, 5.0]);
    assert_eq!(a.lipschitz(), 50.0);
    assert!(time_tuning_matrix(&[5], 0.2, 5.0, 4).is_err());
    assert!(time_tuning_matrix(&[1], 5.0, 0.2, 4).is_err());
}

fn run_cfg() -> Config {
    Config {
        eps: Some(1e-9),
        ..Config::default()
    }
}

#[test]
fn closed_gate_leaves_run_untouched() {
    let prob = common::small_problem(&[0, 1, 2], 1e-2);
    let clean = run_spds(&prob, &run_cfg(), &[], RunOptions::default()).unwrap();
    let gated = Attack::Stealthy {
        inner: Box::new(Attack::SmoothCharging { attacker: 0, omega: 1.0 }),
        eps_s: Some(0.0),
    };
    let out = run_spds(&prob, &run_cfg(), &[gated], RunOptions::default()).unwrap();
    assert_eq!(out.solution, clean.solution);
    assert!(out.trace.records.iter().all(|r| r.attacks[0].injection_norm == 0.0));
}

#[test]
fn gated_attack_injects_only_after_activation() {
    let prob = common::small_problem(&[0, 1, 2], 1e-2);
    let clean = run_spds(&prob, &run_cfg(), &[], RunOptions::default()).unwrap().trace.residuals();
    let eps_s = clean[clean.len() / 3] * 1.01;
    let attack = Attack::Stealthy {
        inner: Box::new(Attack::TimeTuning { attacker: 1, omega: 1.0, theta: (8..=14).collect(), m: 0.2, big_m: 5.0 }),
        eps_s: Some(eps_s),
    };
    let out = run_spds(&prob, &run_cfg(), &[attack], RunOptions::default()).unwrap();
    let activation = predicted_activation(&out.trace.residuals(), eps_s).expect("gate opens");
    for r in &out.trace.records {
        let injected = r.attacks[0].injection_norm != 0.0;
        // Round k acts on iterate k, and only iterates after the activation
        // iteration may carry the goal.
        assert_eq!(injected, r.k > activation, "round {}", r.k);
    }
}

#[test]
fn stiff_time_tuning_matches_reference() {
    let prob = common::small_problem(&[0, 1, 2], 1e-2);
    let attack = Attack::TimeTuning { attacker: 0, omega: 1.0, theta: (8..=16).collect(), m: 0.2, big_m: 1e5 };
    let extra = equivalent_objective(std::slice::from_ref(&attack), prob.horizon()).unwrap();
    let reference = reference_solve(&prob, &ReferenceOptions { extra, ..Default::default() }).unwrap();
    let cfg = Config {
        eps: Some(1e-10),
        dual_eps: Some(1e-10),
        max_iter: 200_000,
        ..Config::default()
    };
    let out = run_spds(&prob, &cfg, &[attack], RunOptions::default()).unwrap();
    assert!(out.converged);
    assert!(rel_dist(&out.solution, &reference.c) <= 1e-4);
    // The attacker charges only inside the preferred slots.
    let outside: f64 = prob.block(&out.solution, 0).iter().enumerate().filter(|(t, _)| !(7..16).contains(t)).map(|(_, v)| v).sum();
    assert!(outside <= 1e-6);
}

#[test]
fn full_falsification_reaches_attacked_optimum() {
    let prob = common::toy_eq(1e-2);
    let attack = Attack::DualFull { attacker: 0, goal: GoalSpec::Smooth, omega: 1.0 };
    let extra = equivalent_objective(std::slice::from_ref(&attack), prob.horizon()).unwrap();
    let reference = reference_solve(&prob, &ReferenceOptions { extra, ..Default::default() }).unwrap();
    let a0 = 1.0 / prob.hessian_norm_estimate();
    let cfg = Config {
        alpha: Some(StepSchedule { a0, a1: 0.0 }),
        beta: Some(StepSchedule { a0, a1: 0.0 }),
        eps: Some(1e-10),
        dual_eps: Some(1e-10),
        max_iter: 500_000,
        ..Config::default()
    };
    let out = run_spds(&prob, &cfg, &[attack], RunOptions::default()).unwrap();
    assert!(out.converged);
    assert!(rel_dist(prob.block(&out.solution, 0), prob.block(&reference.c, 0)) <= 1e-3);
}

#[test]
fn power_balance_rewrites_only_victim_downlinks() {
    let prob = common::small_problem(&[0, 1, 2, 0], 1e-2);
    let attack = Attack::DualPowerBalance { attacker: 0, victims: vec![3], omega: 1.0, goal: GoalSpec::Smooth, eps_s: None };
    let out = run_spds(&prob, &run_cfg(), &[attack], RunOptions::default()).unwrap();
    assert!(!out.mutations.is_empty());
    for ((_, channel), count) in &out.mutations {
        assert!(*count > 0);
        match channel {
            Channel::Agent { agent, dir } => {
                assert_eq!(*agent, 3);
                assert_eq!(*dir, dmao_core::Direction::Downlink);
            }
            Channel::OperatorIo => panic!("operator channel rewritten"),
        }
    }
    let clean = run_spds(&prob, &run_cfg(), &[], RunOptions::default()).unwrap();
    assert!(dist2(prob.block(&out.solution, 3), prob.block(&clean.solution, 3)) > 1e-6);
}
