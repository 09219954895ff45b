#![allow(dead_code)]

use dmao_core::{
    build_injection_model, Baseline, EqualityCoupling, Ev, InequalityCoupling, Line, LocalSet, Matrix, Network,
    PerUnitBase, Problem, ProblemParts,
};

pub fn small_feeder() -> Network {
    let lines = [
        Line { from: 0, to: 1, r_ohm: 0.4, x_ohm: 0.8 },
        Line { from: 1, to: 2, r_ohm: 0.3, x_ohm: 0.6 },
        Line { from: 1, to: 3, r_ohm: 0.3, x_ohm: 0.6 },
    ];
    Network::from_lines(3, &lines, 1.0, 0.95, PerUnitBase { kv: 4.16, kva: 5000.0 }).unwrap()
}

pub fn small_fleet(buses: &[usize]) -> Vec<Ev> {
    buses
        .iter()
        .enumerate()
        .map(|(i, &bus)| Ev {
            id: i,
            bus,
            p_max: [7.2, 6.6, 3.3, 7.2, 6.6][i % 5],
            eta: 0.9,
            cap: 40.0,
            soc_ini: 0.3 + 0.05 * i as f64,
            soc_des: 0.8,
            dt: 0.5,
        })
        .collect()
}

pub fn small_baseline(t_len: usize) -> Baseline {
    let p = Matrix::from_fn(3, t_len, |b, t| {
        (8.0 + 2.0 * b as f64) * (1.0 + 0.5 * (2.0 * std::f64::consts::PI * (t as f64 + 0.5) / t_len as f64).cos())
    });
    let q = p.scale(0.33);
    Baseline::new(p, q).unwrap()
}

/// EVs on a three-bus feeder with a cosine baseline, interior valley fill.
pub fn small_problem(buses: &[usize], delta: f64) -> Problem {
    let net = small_feeder();
    let fleet = small_fleet(buses);
    let base = small_baseline(24);
    let inj = build_injection_model(&net, &fleet, &base).unwrap();
    Problem::on_network(&net, &inj, &fleet, base.aggregate(), None, delta, 10.0).unwrap()
}

pub fn toy_baseline(t_len: usize) -> Vec<f64> {
    (0..t_len)
        .map(|t| 2.0 + (2.0 * std::f64::consts::PI * (t as f64 + 0.5) / t_len as f64).cos())
        .collect()
}

fn toy_sets(t_len: usize) -> Vec<LocalSet> {
    (0..3)
        .map(|i| LocalSet::new(i, vec![0.0; t_len], vec![1.0; t_len], vec![0.25; t_len], 1.0 + i as f64).unwrap())
        .collect()
}

/// Three EVs sharing `c1 + 0.2 c2 + 0.3 c3 ≤ 0.6`.
pub fn toy(delta: f64) -> Problem {
    let t_len = 24;
    Problem::from_parts(ProblemParts {
        sets: toy_sets(t_len),
        pbar: vec![1.0, 0.2, 0.3],
        p_b: toy_baseline(t_len),
        ineq: Some(InequalityCoupling {
            d: Matrix::from_rows(&[vec![-1.0, -0.2, -0.3]]),
            y_b: vec![-0.6; t_len],
        }),
        eq: None,
        delta,
    })
    .unwrap()
}

/// Three EVs with `c1 + 0.2 c2 + 0.3 c3 = 9.2/24` in every slot.
pub fn toy_eq(delta: f64) -> Problem {
    let t_len = 24;
    Problem::from_parts(ProblemParts {
        sets: toy_sets(t_len),
        pbar: vec![1.0, 0.8, 1.2],
        p_b: toy_baseline(t_len),
        ineq: None,
        eq: Some(EqualityCoupling {
            weights: vec![1.0, 0.2, 0.3],
            rhs: vec![9.2 / 24.0; t_len],
        }),
        delta,
    })
    .unwrap()
}
