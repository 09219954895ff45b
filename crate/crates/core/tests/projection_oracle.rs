use dmao_core::analysis::{project_onto_cone, PolyCone, SparseRow};
use dmao_core::linalg::{dist2, dot, sub};
use dmao_core::LocalSet;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Projection onto `{0 ≤ x ≤ 1, a·x = b}`: every coordinate is tried at its
/// lower bound, its upper bound, or free; the free ones solve the
/// equality-constrained least-squares problem in closed form.
fn enumerate_box_faces(y: &[f64], a: &[f64], b: f64) -> Vec<f64> {
    let n = y.len();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for code in 0..3usize.pow(n as u32) {
        let mut c = code;
        let state: Vec<usize> = (0..n)
            .map(|_| {
                let s = c % 3;
                c /= 3;
                s
            })
            .collect();
        let mut x = vec![0.0; n];
        let (mut fixed, mut aa, mut ay) = (0.0, 0.0, 0.0);
        for k in 0..n {
            match state[k] {
                0 => {}
                1 => {
                    x[k] = 1.0;
                    fixed += a[k];
                }
                _ => {
                    aa += a[k] * a[k];
                    ay += a[k] * y[k];
                }
            }
        }
        if aa == 0.0 {
            if (fixed - b).abs() > 1e-12 {
                continue;
            }
        } else {
            let nu = (ay + fixed - b) / aa;
            for k in (0..n).filter(|&k| state[k] == 2) {
                x[k] = y[k] - nu * a[k];
            }
        }
        if x.iter().any(|&v| !(-1e-12..=1.0 + 1e-12).contains(&v)) {
            continue;
        }
        let d = dist2(&x, y);
        if best.as_ref().map_or(true, |(bd, _)| d < *bd) {
            best = Some((d, x));
        }
    }
    best.unwrap().1
}

fn random_set(rng: &mut ChaCha8Rng, n: usize) -> (LocalSet, Vec<f64>, f64) {
    let a: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..2.0)).collect();
    let b = rng.gen_range(0.0..a.iter().sum::<f64>());
    (LocalSet::new(0, vec![0.0; n], vec![1.0; n], a.clone(), b).unwrap(), a, b)
}

#[test]
fn six_dim_projection_matches_face_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..300 {
        let (set, a, b) = random_set(&mut rng, 6);
        let y: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..3.0)).collect();
        let p = set.project(&y).unwrap().into_inner();
        assert!(dist2(&p, &enumerate_box_faces(&y, &a, b)) <= 1e-8);
    }
}

#[test]
fn two_slot_unit_request_splits_evenly() {
    let set = LocalSet::new(0, vec![0.0; 2], vec![1.0; 2], vec![1.0; 2], 1.0).unwrap();
    assert_eq!(set.project(&[1.0, 1.0]).unwrap().into_inner(), vec![0.5, 0.5]);
}

/// Projection onto `{d : E d = 0, G d ≥ 0}` by trying every subset of
/// inequality rows as equalities.
fn enumerate_cone(v: &[f64], eq: &[Vec<f64>], ineq: &[Vec<f64>]) -> Vec<f64> {
    let n = v.len();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for mask in 0..(1usize << ineq.len()) {
        let rows: Vec<&Vec<f64>> = eq
            .iter()
            .chain(ineq.iter().enumerate().filter(|(j, _)| mask >> j & 1 == 1).map(|(_, r)| r))
            .collect();
        let d = if rows.is_empty() {
            v.to_vec()
        } else {
            let a = DMatrix::from_fn(rows.len(), n, |i, j| rows[i][j]);
            let vv = DVector::from_column_slice(v);
            let gram_pinv = (&a * a.transpose()).pseudo_inverse(1e-12).unwrap();
            let d = &vv - a.transpose() * gram_pinv * (&a * &vv);
            d.as_slice().to_vec()
        };
        if ineq.iter().any(|g| dot(g, &d) < -1e-10) {
            continue;
        }
        let dist = dist2(&d, v);
        if best.as_ref().map_or(true, |(bd, _)| dist < *bd) {
            best = Some((dist, d));
        }
    }
    best.unwrap().1
}

fn dense_row(r: &[f64]) -> SparseRow {
    SparseRow {
        idx: (0..r.len()).collect(),
        val: r.to_vec(),
    }
}

#[test]
fn four_dim_cone_projection_matches_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for case in 0..300 {
        let n_eq = case % 2;
        let n_ineq = 1 + case % 4;
        let mut row = || (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
        let eq: Vec<Vec<f64>> = (0..n_eq).map(|_| row()).collect();
        let mut ineq: Vec<Vec<f64>> = (0..n_ineq).map(|_| row()).collect();
        if case % 3 == 0 {
            // Unit rows take a separate elimination path.
            ineq.push(vec![0.0, 0.0, 1.0, 0.0]);
        }
        let v = row();
        let cone = PolyCone {
            dim: 4,
            equalities: eq.iter().map(|r| dense_row(r)).collect(),
            inequalities: ineq
                .iter()
                .map(|r| {
                    if r.iter().filter(|&&x| x != 0.0).count() == 1 {
                        SparseRow::unit(2, 1.0)
                    } else {
                        dense_row(r)
                    }
                })
                .collect(),
        };
        let got = project_onto_cone(&cone, &v).unwrap();
        let want = enumerate_cone(&v, &eq, &ineq);
        assert!(dist2(&got, &want) <= 1e-8, "case {case}: {got:?} vs {want:?}");
    }
}

fn arb_instance() -> impl Strategy<Value = (Vec<f64>, f64, Vec<f64>, Vec<f64>)> {
    (2usize..10).prop_flat_map(|n| {
        (
            prop::collection::vec(0.05f64..3.0, n),
            0.0f64..1.0,
            prop::collection::vec(-3.0f64..4.0, n),
            prop::collection::vec(-3.0f64..4.0, n),
        )
    })
}

proptest! {
    #[test]
    fn fleet_projection_is_nonexpansive_idempotent_and_optimal((a, frac, x, y) in arb_instance()) {
        let n = a.len();
        let b = frac * a.iter().sum::<f64>();
        let set = LocalSet::new(0, vec![0.0; n], vec![1.0; n], a, b).unwrap();
        let px = set.project(&x).unwrap().into_inner();
        let py = set.project(&y).unwrap().into_inner();
        prop_assert!(dist2(&px, &py) <= dist2(&x, &y) + 1e-10);
        let ppx = set.project(&px).unwrap().into_inner();
        prop_assert!(dist2(&ppx, &px) <= 1e-12);
        prop_assert!(set.contains(&px, 1e-9));
        // Variational inequality against another feasible point.
        let r = sub(&x, &px);
        let w = sub(&py, &px);
        prop_assert!(dot(&r, &w) <= 1e-8 * dist2(&x, &px) * dist2(&py, &px) + 1e-12);
    }

    #[test]
    fn cone_projection_is_idempotent_and_in_cone(
        rows in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 5), 1..5),
        v in prop::collection::vec(-2.0f64..2.0, 5),
    ) {
        let cone = PolyCone {
            dim: 5,
            equalities: vec![],
            inequalities: rows.iter().map(|r| dense_row(r)).collect(),
        };
        let p = project_onto_cone(&cone, &v).unwrap();
        for r in &rows {
            prop_assert!(dot(r, &p) >= -1e-9);
        }
        let pp = project_onto_cone(&cone, &p).unwrap();
        prop_assert!(dist2(&pp, &p) <= 1e-9);
        // Moreau: the residual is orthogonal to the projection.
        prop_assert!(dot(&sub(&v, &p), &p).abs() <= 1e-8);
    }
}
