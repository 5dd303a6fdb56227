//! Series regression: basis examples, exact-span fits, cross-validation and
//! the least-squares properties.

use aipw_gmm::sieve::{self, bspline_basis, build_basis, fit_least_squares, SieveSpec};
use aipw_gmm::RowMatrix;
use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn col(v: &[f64]) -> RowMatrix {
    RowMatrix::from_columns(&[v.to_vec()]).unwrap()
}

fn grid(n: usize) -> Vec<f64> {
    (0..n).map(|i| i as f64 / (n - 1) as f64).collect()
}

#[test]
fn power_basis_rows() {
    let b = build_basis(&col(&[0.0, 0.5, 1.0]), &SieveSpec::power(1)).unwrap();
    assert_eq!(b.row(1), &[1.0, 0.5]);
    let b = build_basis(&col(&grid(5)), &SieveSpec::power(2)).unwrap();
    assert_eq!(b.row(2), &[1.0, 0.5, 0.25]);
}

#[test]
fn bspline_partition_of_unity_at_midpoint() {
    let v = bspline_basis(0.5, &[1.0 / 3.0, 2.0 / 3.0], 3);
    assert_eq!(v.len(), 6);
    assert_abs_diff_eq!(v.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
}

#[test]
fn exact_span_fits() {
    let u = grid(30);
    let t: Vec<f64> = u.iter().map(|v| 2.0 + 3.0 * v).collect();
    let p = fit_least_squares(&t, &col(&u), &SieveSpec::power(1)).unwrap();
    assert_abs_diff_eq!(p.coefficients[0], 2.0, epsilon = 1e-10);
    assert_abs_diff_eq!(p.coefficients[1], 3.0, epsilon = 1e-10);

    let c = vec![1.7; 30];
    let p = fit_least_squares(&c, &col(&u), &SieveSpec::power(3)).unwrap();
    assert_abs_diff_eq!(p.coefficients[0], 1.7, epsilon = 1e-10);
    assert!(p.coefficients[1..].iter().all(|b| b.abs() < 1e-10));

    let sq: Vec<f64> = u.iter().map(|v| v * v).collect();
    let p = fit_least_squares(&sq, &col(&u), &SieveSpec::power(2)).unwrap();
    let res: f64 = u.iter().zip(&sq).map(|(v, t)| (p.predict_row(&[*v]) - t).powi(2)).sum::<f64>().sqrt();
    assert!(res < 1e-10, "{res}");
}

#[test]
fn cubic_spline_reproduces_cubic() {
    let u = grid(60);
    let t: Vec<f64> = u.iter().map(|v| 1.0 - 2.0 * v + v.powi(3)).collect();
    let p = fit_least_squares(&t, &col(&u), &SieveSpec::bspline(3, 2)).unwrap();
    for (v, y) in u.iter().zip(&t) {
        assert_abs_diff_eq!(p.predict_row(&[*v]), *y, epsilon = 1e-9);
    }
}

#[test]
fn clamp_bounds_predictions() {
    let u = grid(10);
    let p = fit_least_squares(&u, &col(&u), &SieveSpec::power(1)).unwrap().with_clamp(0.2, 0.7);
    assert!(p.predict(&col(&[-1.0, 0.5, 3.0])).iter().all(|v| (0.2..=0.7).contains(v)));
}

#[test]
fn empty_sample_is_a_config_error() {
    let e = fit_least_squares(&[], &RowMatrix::zeros(0, 1), &SieveSpec::power(1)).unwrap_err();
    assert!(matches!(e, aipw_gmm::Error::Config(_)));
}

#[test]
fn cv_single_candidate() {
    let u = grid(20);
    let s = sieve::cross_validate(&u, &col(&u), &[SieveSpec::power(3)], 5).unwrap();
    assert_eq!(s, SieveSpec::power(3));
}

#[test]
fn cv_prefers_low_degree_for_linear_truth() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let u: Vec<f64> = (0..200).map(|_| rng.random::<f64>()).collect();
    let t: Vec<f64> = u.iter().map(|v| 1.0 + 2.0 * v + 0.5 * (rng.random::<f64>() - 0.5)).collect();
    let cands = [SieveSpec::power(1), SieveSpec::power(8)];
    let scores = sieve::cross_validation_scores(&t, &col(&u), &cands, 5).unwrap();
    let chosen = sieve::cross_validate(&t, &col(&u), &cands, 5).unwrap();
    // Oracle: the direct comparison of the two out-of-fold errors.
    let best = if scores[0].mse.unwrap() <= scores[1].mse.unwrap() { &cands[0] } else { &cands[1] };
    assert_eq!(&chosen, best);
    assert_eq!(chosen, SieveSpec::power(1));
}

#[test]
fn cv_ties_go_to_fewer_terms() {
    // On a binary input every power degree collapses to one term, so the
    // candidates fit identically; with equal K the first listed wins.
    let u: Vec<f64> = (0..40).map(|i| (i % 2) as f64).collect();
    let t: Vec<f64> = u.iter().enumerate().map(|(i, v)| v + 0.01 * (i % 7) as f64).collect();
    let s = sieve::cross_validate(&t, &col(&u), &[SieveSpec::power(4), SieveSpec::power(1)], 4).unwrap();
    assert_eq!(s, SieveSpec::power(4));

    // Two collinear binary inputs: the interaction adds a redundant term
    // with the same out-of-fold error, so the smaller basis is returned.
    let two = RowMatrix::from_columns(&[u.clone(), u.iter().map(|v| 1.0 - v).collect()]).unwrap();
    let s =
        sieve::cross_validate(&t, &two, &[SieveSpec::power(1), SieveSpec::power(1).without_interactions()], 4).unwrap();
    assert_eq!(s, SieveSpec::power(1).without_interactions());
}

#[test]
fn cv_skips_candidates_too_large_for_folds() {
    let u = grid(12);
    let scores =
        sieve::cross_validation_scores(&u, &col(&u), &[SieveSpec::power(1), SieveSpec::bspline(3, 8)], 2).unwrap();
    assert!(scores[0].mse.is_some());
    assert!(scores[1].mse.is_none());
}

#[test]
fn rate_guard_examples() {
    assert!(sieve::rate_guard(1000, 900, 2, 0.5).is_some());
    assert!(sieve::rate_guard(1000, 5, 2, 0.5).is_none());
}

fn inputs_strategy() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>)> {
    (20usize..60).prop_flat_map(|n| {
        (
            prop::collection::vec(-3.0f64..3.0, n),
            prop::collection::vec(0.0f64..10.0, n),
            prop::collection::vec(-5.0f64..5.0, n),
        )
    })
}

proptest! {
    #[test]
    fn residuals_orthogonal_to_design((a, b, t) in inputs_strategy(), spline in any::<bool>()) {
        let inputs = RowMatrix::from_columns(&[a, b]).unwrap();
        let spec = if spline { SieveSpec::bspline(2, 1) } else { SieveSpec::power(2) };
        let p = fit_least_squares(&t, &inputs, &spec).unwrap();
        prop_assume!(p.ridge.is_none());
        let design = build_basis(&inputs, &spec).unwrap();
        let pred = p.predict(&inputs);
        let e: Vec<f64> = t.iter().zip(&pred).map(|(y, f)| y - f).collect();
        for j in 0..design.ncols() {
            let c = design.column(j);
            let dot: f64 = c.iter().zip(&e).map(|(x, r)| x * r).sum();
            let scale = c.iter().map(|x| x * x).sum::<f64>().sqrt() * e.iter().map(|r| r * r).sum::<f64>().sqrt();
            prop_assert!(dot.abs() <= 1e-8 * scale.max(1e-12), "column {j}: {dot} vs {scale}");
        }
    }

    #[test]
    fn predictions_invariant_to_affine_rescaling((a, b, t) in inputs_strategy(), s in 0.1f64..20.0, shift in -50.0f64..50.0) {
        let inputs = RowMatrix::from_columns(&[a.clone(), b.clone()]).unwrap();
        let moved = RowMatrix::from_columns(&[
            a.iter().map(|v| s * v + shift).collect(),
            b.iter().map(|v| shift - s * v).collect(),
        ]).unwrap();
        let spec = SieveSpec::power(2);
        let p = fit_least_squares(&t, &inputs, &spec).unwrap().predict(&inputs);
        let q = fit_least_squares(&t, &moved, &spec).unwrap().predict(&moved);
        for (x, y) in p.iter().zip(&q) {
            prop_assert!((x - y).abs() <= 1e-8 * (1.0 + x.abs()), "{x} vs {y}");
        }
    }

    #[test]
    fn bspline_rows_sum_to_one(u in 0.0f64..=1.0, k in 0usize..5, degree in 1usize..4) {
        let interior: Vec<f64> = (1..=k).map(|j| j as f64 / (k + 1) as f64).collect();
        let v = bspline_basis(u, &interior, degree);
        prop_assert!((v.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(v.iter().all(|b| *b >= -1e-15));
    }
}
