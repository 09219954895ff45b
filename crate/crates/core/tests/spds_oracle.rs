mod common;

use dmao_core::linalg::{dist2, rel_dist, std_dev};
use dmao_core::{
    dual_update, primal_update, reference_solve, run_in_memory, run_spds, Attack, Config, LocalSet, ReferenceOptions,
    RunOptions, StepSchedule,
};
use proptest::prelude::*;

/// Projection onto `{lo ≤ x ≤ hi, a·x = b}` by bisection on the multiplier
/// of the energy row.
fn bisection_projection(y: &[f64], set: &LocalSet) -> Vec<f64> {
    let at = |nu: f64| -> Vec<f64> {
        (0..y.len())
            .map(|t| (y[t] + nu * set.coeff[t]).clamp(set.lower[t], set.upper[t]))
            .collect()
    };
    let energy = |x: &[f64]| x.iter().zip(&set.coeff).map(|(v, a)| v * a).sum::<f64>();
    let (mut lo, mut hi) = (-1e6, 1e6);
    for _ in 0..300 {
        let mid = 0.5 * (lo + hi);
        if energy(&at(mid)) < set.rhs {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    at(0.5 * (lo + hi))
}

#[test]
fn shrunken_step_by_hand() {
    // Inner point τc − αg = (0.2, 0.3) projects to (0.45, 0.55); dividing by
    // τ gives (0.9, 1.1), which projects to (0.4, 0.6).
    let set = LocalSet::new(0, vec![0.0; 2], vec![1.0; 2], vec![1.0; 2], 1.0).unwrap();
    let next = primal_update(&set, &[0.6, 0.4], &[1.0, -1.0], 0.1, 0.5).unwrap();
    assert!(dist2(&next, &[0.4, 0.6]) <= 1e-14);
}

proptest! {
    #[test]
    fn unshrunk_step_is_projected_gradient(
        c in prop::collection::vec(0.0f64..1.0, 8),
        g in prop::collection::vec(-5.0f64..5.0, 8),
        coeff in prop::collection::vec(0.1f64..2.0, 8),
        fill in 0.05f64..0.95,
        alpha in 0.01f64..1.0,
    ) {
        let rhs = fill * coeff.iter().sum::<f64>();
        let set = LocalSet::new(0, vec![0.0; 8], vec![1.0; 8], coeff, rhs).unwrap();
        let got = primal_update(&set, &c, &g, alpha, 1.0).unwrap();
        let y: Vec<f64> = c.iter().zip(&g).map(|(x, d)| x - alpha * d).collect();
        prop_assert!(dist2(&got, &bisection_projection(&y, &set)) <= 1e-12);
    }

    #[test]
    fn unshrunk_dual_step_is_clamped_ascent(
        mu in prop::collection::vec(0.0f64..10.0, 6),
        g in prop::collection::vec(-20.0f64..20.0, 6),
        beta in 0.01f64..1.0,
    ) {
        let got = dual_update(&mu, &g, beta, 1.0, 0.0, 10.0);
        for k in 0..6 {
            prop_assert_eq!(got[k], (mu[k] + beta * g[k]).clamp(0.0, 10.0));
        }
    }

    #[test]
    fn dual_step_stays_in_box(
        mu in prop::collection::vec(-1.0f64..1.0, 6),
        g in prop::collection::vec(-20.0f64..20.0, 6),
        tau in 0.1f64..1.0,
    ) {
        for v in dual_update(&mu, &g, 0.3, tau, -1.0, 1.0) {
            prop_assert!((-1.0..=1.0).contains(&v));
        }
    }
}

fn constant_steps(prob: &dmao_core::Problem) -> Config {
    let a0 = 1.0 / prob.hessian_norm_estimate();
    Config {
        alpha: Some(StepSchedule { a0, a1: 0.0 }),
        beta: Some(StepSchedule { a0, a1: 0.0 }),
        eps: Some(1e-11),
        dual_eps: Some(1e-11),
        max_iter: 500_000,
        ..Config::default()
    }
}

#[test]
fn toy_without_attack_reaches_reference_objective() {
    let prob = common::toy(1e-2);
    let (c, _, _, converged) = run_in_memory(&prob, &constant_steps(&prob)).unwrap();
    assert!(converged);
    let reference = reference_solve(&prob, &ReferenceOptions::default()).unwrap();
    assert!((prob.objective(&c) - reference.objective).abs() <= 1e-6);
    assert!(prob.ineq_violation(&c) <= 1e-6);
}

#[test]
fn bus_run_matches_in_memory_run() {
    let prob = common::small_problem(&[0, 1, 2, 0], 1e-2);
    let cfg = Config {
        eps: Some(1e-9),
        ..Config::default()
    };
    let (c, duals, iters, _) = run_in_memory(&prob, &cfg).unwrap();
    let out = run_spds(&prob, &cfg, &[], RunOptions::default()).unwrap();
    assert_eq!(out.iterations, iters);
    assert!(dist2(&out.solution, &c) <= 1e-12);
    assert!(dist2(&out.duals.mu, &duals.mu) <= 1e-12);
}

#[test]
fn runs_are_deterministic() {
    let prob = common::small_problem(&[0, 1, 2], 1e-2);
    let attacks = [Attack::SmoothCharging { attacker: 1, omega: 1.0 }];
    let a = run_spds(&prob, &Config::default(), &attacks, RunOptions::default()).unwrap();
    let b = run_spds(&prob, &Config::default(), &attacks, RunOptions::default()).unwrap();
    assert_eq!(a.solution, b.solution);
    assert_eq!(a.trace.residuals(), b.trace.residuals());
}

#[test]
fn smooth_attack_flattens_attacker() {
    let prob = common::small_problem(&[0, 1, 2], 1e-2);
    let cfg = Config {
        eps: Some(1e-9),
        ..Config::default()
    };
    let clean = run_spds(&prob, &cfg, &[], RunOptions::default()).unwrap();
    let attacked = run_spds(&prob, &cfg, &[Attack::SmoothCharging { attacker: 1, omega: 1.0 }], RunOptions::default()).unwrap();
    assert!(clean.converged && attacked.converged);
    let before = std_dev(prob.block(&clean.solution, 1));
    let after = std_dev(prob.block(&attacked.solution, 1));
    assert!(after < 0.8 * before, "std {before} -> {after}");
    assert!(rel_dist(&attacked.solution, &clean.solution) > 1e-3);
}
