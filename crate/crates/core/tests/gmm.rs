//! GMM solver: IV oracle, exact recovery, weighting and scale invariance,
//! Jacobians, the sandwich identity and identification failures.
#![allow(clippy::needless_range_loop)]

mod common;

use aipw_gmm::gmm::{self, estimate_G, estimate_V, BetaInit, GmmConfig, JacobianMethod, WeightMode};
use aipw_gmm::linalg;
use aipw_gmm::model::{CustomModel, Dataset, LinearModel, RowMatrix};
use aipw_gmm::moments::{MomentContext, MomentKind};
use aipw_gmm::nuisance::{Assumption, PatternMode};
use aipw_gmm::simulate::{self, FullDraw, SimScenario};
use aipw_gmm::Error;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use std::sync::Arc;

fn draw(n: usize, seed: u64) -> FullDraw {
    simulate::generate_full(&SimScenario { n, seed, ..SimScenario::default() }, 0).unwrap()
}

fn fitted(data: &Dataset, assumption: Assumption) -> MomentContext {
    let s = SimScenario::default();
    MomentContext::fit(data, assumption, &s.mechanism_options(), &s.imputation_options(), Arc::new(LinearModel::new(1)))
        .unwrap()
}

/// (Z'R)⁻¹Z'Y with R = (D, X), computed directly.
fn iv_oracle(f: &FullDraw) -> Vec<f64> {
    let n = f.x.len();
    let z = DMatrix::from_fn(n, 2, |i, j| if j == 0 { f.z[i] } else { f.x[i] });
    let r = DMatrix::from_fn(n, 2, |i, j| if j == 0 { f.d[i] } else { f.x[i] });
    let y = DVector::from_column_slice(&f.y);
    let b = (z.transpose() * &r).lu().solve(&(z.transpose() * y)).unwrap();
    b.iter().cloned().collect()
}

#[test]
fn cc_on_complete_data_matches_iv_closed_form() {
    let f = draw(1000, 3);
    let data = f.unmasked();
    let oracle = iv_oracle(&f);
    let ctx = MomentContext::complete_cases(&data, Arc::new(LinearModel::new(1)), Assumption::Smar).unwrap();
    for w in [WeightMode::Identity, WeightMode::ZzInverse, WeightMode::OptimalTwoStep] {
        let r = gmm::solve(&data, &ctx, &GmmConfig::new(MomentKind::Cc).with_weight(w)).unwrap();
        assert!(r.converged);
        for k in 0..2 {
            assert!((r.beta_hat[k] - oracle[k]).abs() <= 1e-10, "{w:?}: {:?} vs {oracle:?}", r.beta_hat);
        }
    }
}

#[test]
fn aipw_on_complete_data_reduces_to_iv() {
    let f = draw(500, 4);
    let data = f.unmasked();
    let ctx = fitted(&data, Assumption::Smar);
    let r = gmm::solve(&data, &ctx, &GmmConfig::new(MomentKind::Aipw)).unwrap();
    let oracle = iv_oracle(&f);
    for k in 0..2 {
        assert!((r.beta_hat[k] - oracle[k]).abs() <= 1e-10);
    }
}

#[test]
fn zero_noise_recovers_parameters_exactly() {
    let n = 200;
    let zc: Vec<f64> = (0..n).map(|i| ((i * 7) % 11) as f64 / 10.0).collect();
    let xc: Vec<f64> = (0..n).map(|i| ((i * 3) % 13) as f64 / 12.0).collect();
    let d: Vec<Option<f64>> = (0..n).map(|i| Some(zc[i] + 0.3 * xc[i])).collect();
    let y: Vec<Option<f64>> = (0..n).map(|i| Some(0.3 * d[i].unwrap() + 0.5 * xc[i])).collect();
    let data = Dataset::new(
        RowMatrix::from_columns(&[zc, xc.clone()]).unwrap(),
        RowMatrix::from_columns(&[xc]).unwrap(),
        d,
        y,
    )
    .unwrap();
    let ctx = MomentContext::complete_cases(&data, Arc::new(LinearModel::new(1)), Assumption::Mar).unwrap();
    let r = gmm::solve(&data, &ctx, &GmmConfig::new(MomentKind::Cc)).unwrap();
    assert!((r.beta_hat[0] - 0.3).abs() <= 1e-10 && (r.beta_hat[1] - 0.5).abs() <= 1e-10, "{:?}", r.beta_hat);
}

#[test]
fn just_identified_solution_ignores_the_weight() {
    let data = draw(1000, 5).masked();
    let ctx = fitted(&data, Assumption::Smar);
    for kind in [MomentKind::Ipw, MomentKind::Aipw] {
        let a = gmm::solve(&data, &ctx, &GmmConfig::new(kind).with_weight(WeightMode::Identity)).unwrap();
        let b = gmm::solve(&data, &ctx, &GmmConfig::new(kind)).unwrap();
        for k in 0..2 {
            assert!((a.beta_hat[k] - b.beta_hat[k]).abs() <= 1e-8);
        }
    }
}

#[test]
fn sandwich_identity_and_psd_on_design_sized_runs() {
    for seed in 0..3 {
        let data = draw(1000, 100 + seed).masked();
        for assumption in [Assumption::Mar, Assumption::Smar] {
            let ctx = fitted(&data, assumption);
            for kind in [MomentKind::Cc, MomentKind::Ipw, MomentKind::Aipw] {
                let r = gmm::solve(&data, &ctx, &GmmConfig::new(kind)).unwrap();
                let vinv = linalg::spd_inverse(&r.moment_variance_v, 0.0).unwrap();
                let s = gmm::sandwich(&r.jacobian_g, &vinv, &r.moment_variance_v, r.n_used).unwrap();
                let e = gmm::efficient_covariance(&r.jacobian_g, &vinv, r.n_used).unwrap();
                assert!(linalg::max_abs_rel_diff(&s, &e) <= 1e-6, "{kind:?}");
                assert!(linalg::max_abs_rel_diff(&r.covariance, &r.efficient_covariance().unwrap()) <= 1e-6);
                assert!(linalg::is_psd(&r.covariance, 1e-8));
                assert!((r.covariance.clone() - r.covariance.transpose()).abs().max() <= 1e-12);
                for k in 0..2 {
                    assert_eq!(r.std_errors[k], r.covariance[(k, k)].sqrt());
                }
            }
        }
    }
}

/// The design with exp(X) added as a third instrument. A product like Z·X
/// would duplicate a sieve interaction and make the propensity fits
/// collinear.
fn overidentified(f: &FullDraw) -> Dataset {
    let base = f.masked();
    let ex: Vec<f64> = f.x.iter().map(|v| v.exp()).collect();
    let z = RowMatrix::from_columns(&[f.z.clone(), f.x.clone(), ex]).unwrap();
    Dataset::new(z, base.x().clone(), base.d().to_vec(), base.y().to_vec()).unwrap()
}

#[test]
fn sandwich_identity_overidentified() {
    let data = overidentified(&draw(1000, 8));
    let ctx = fitted(&data, Assumption::Smar);
    let r = gmm::solve(&data, &ctx, &GmmConfig::new(MomentKind::Aipw)).unwrap();
    assert!(r.converged);
    let vinv = linalg::spd_inverse(&r.moment_variance_v, 0.0).unwrap();
    let s = gmm::sandwich(&r.jacobian_g, &vinv, &r.moment_variance_v, r.n_used).unwrap();
    let e = gmm::efficient_covariance(&r.jacobian_g, &vinv, r.n_used).unwrap();
    assert!(linalg::max_abs_rel_diff(&s, &e) <= 1e-6);
    assert!(linalg::is_psd(&r.covariance, 1e-8));
}

#[test]
fn scale_equivariance() {
    let data = draw(800, 9).masked();
    for c in [0.01, 3.0, 250.0] {
        let scaled = data.scale_instruments(c);
        for kind in [MomentKind::Cc, MomentKind::Ipw, MomentKind::Aipw] {
            let a = gmm::solve(&data, &fitted(&data, Assumption::Smar), &GmmConfig::new(kind)).unwrap();
            let b = gmm::solve(&scaled, &fitted(&scaled, Assumption::Smar), &GmmConfig::new(kind)).unwrap();
            for k in 0..2 {
                assert!(
                    (a.beta_hat[k] - b.beta_hat[k]).abs() <= 1e-8,
                    "c={c} {kind:?} {:?} {:?}",
                    a.beta_hat,
                    b.beta_hat
                );
            }
        }
    }
    let over = overidentified(&draw(800, 10));
    let a = gmm::solve(&over, &fitted(&over, Assumption::Smar), &GmmConfig::new(MomentKind::Aipw)).unwrap();
    let scaled = over.scale_instruments(7.0);
    let b = gmm::solve(&scaled, &fitted(&scaled, Assumption::Smar), &GmmConfig::new(MomentKind::Aipw)).unwrap();
    for k in 0..2 {
        assert!((a.beta_hat[k] - b.beta_hat[k]).abs() <= 1e-8, "{:?} {:?}", a.beta_hat, b.beta_hat);
    }
}

#[test]
fn linear_jacobian_without_missingness() {
    let f = draw(300, 11);
    let data = f.unmasked();
    let ctx = MomentContext::complete_cases(&data, Arc::new(LinearModel::new(1)), Assumption::Smar).unwrap();
    let g = estimate_G(&data, &ctx, MomentKind::Cc, &[0.1, 0.2], JacobianMethod::Analytic).unwrap();
    let n = f.x.len() as f64;
    let mut oracle = DMatrix::zeros(2, 2);
    for i in 0..f.x.len() {
        let z = [f.z[i], f.x[i]];
        let r = [f.d[i], f.x[i]];
        for a in 0..2 {
            for b in 0..2 {
                oracle[(a, b)] -= z[a] * r[b] / n;
            }
        }
    }
    assert!((g - oracle).abs().max() <= 1e-12);
}

#[test]
fn analytic_and_numeric_jacobians_agree_for_nonlinear_g() {
    let mech = common::smar_mechanism();
    let e = common::enumerate(mech);
    let mut ctx = common::oracle_context(&e.rows, mech, Assumption::Smar, PatternMode::Strict, Default::default());
    let model = CustomModel::new(
        2,
        false,
        Arc::new(|d: f64, x: &[f64], b: &[f64]| (b[0] * d).exp() * (1.0 + x[0]) + b[1] * d * x[0]),
    )
    .with_gradient(Arc::new(|d: f64, x: &[f64], b: &[f64], out: &mut [f64]| {
        out[0] = d * (b[0] * d).exp() * (1.0 + x[0]);
        out[1] = d * x[0];
    }));
    ctx.spec = Arc::new(model);
    for beta in [[0.3, 0.5], [-0.7, 1.2], [0.05, -0.4]] {
        for kind in [MomentKind::Cc, MomentKind::Ipw, MomentKind::Aipw, MomentKind::AipwGeneral] {
            let a = estimate_G(&e.data, &ctx, kind, &beta, JacobianMethod::Analytic).unwrap();
            let n = estimate_G(&e.data, &ctx, kind, &beta, JacobianMethod::CentralDifference).unwrap();
            let scale = a.abs().max().max(1e-12);
            assert!((a - n).abs().max() <= 1e-5 * scale, "{kind:?} at {beta:?}");
        }
    }
}

#[test]
fn nonlinear_model_is_solved_by_gauss_newton() {
    // g = exp(b0·d)·x + b1·d on complete data generated without noise.
    let n = 300;
    let zc: Vec<f64> = (0..n).map(|i| (i % 2) as f64).collect();
    let xc: Vec<f64> = (0..n).map(|i| 0.2 + ((i * 7) % 17) as f64 / 17.0).collect();
    let d: Vec<f64> = (0..n).map(|i| if (i * 5) % 3 == 0 || zc[i] == 1.0 && i % 4 != 0 { 1.0 } else { 0.0 }).collect();
    let truth = [0.4, -0.3];
    let g = |d: f64, x: f64, b: &[f64]| (b[0] * d).exp() * x + b[1] * d;
    let y: Vec<Option<f64>> = (0..n).map(|i| Some(g(d[i], xc[i], &truth))).collect();
    let data = Dataset::new(
        RowMatrix::from_columns(&[zc, xc.clone()]).unwrap(),
        RowMatrix::from_columns(&[xc]).unwrap(),
        d.into_iter().map(Some).collect(),
        y,
    )
    .unwrap();
    let spec = CustomModel::new(2, false, Arc::new(move |d: f64, x: &[f64], b: &[f64]| g(d, x[0], b)));
    let ctx = MomentContext::complete_cases(&data, Arc::new(spec), Assumption::Mar).unwrap();
    // V̂ vanishes at a noiseless solution, so the optimal weight is undefined.
    let cfg = GmmConfig {
        beta_init: BetaInit::Given(vec![0.0, 0.0]),
        ..GmmConfig::new(MomentKind::Cc).with_weight(WeightMode::ZzInverse)
    };
    let r = gmm::solve(&data, &ctx, &cfg).unwrap();
    assert!(r.converged);
    for k in 0..2 {
        assert!((r.beta_hat[k] - truth[k]).abs() <= 1e-7, "{:?}", r.beta_hat);
    }
}

#[test]
fn duplicated_instrument_is_not_identified() {
    let f = draw(300, 12);
    let base = f.unmasked();
    let z = RowMatrix::from_columns(&[f.x.clone(), f.x.clone()]).unwrap();
    let data = Dataset::new(z, base.x().clone(), base.d().to_vec(), base.y().to_vec()).unwrap();
    let ctx = MomentContext::complete_cases(&data, Arc::new(LinearModel::new(1)), Assumption::Mar).unwrap();
    for w in [WeightMode::Identity, WeightMode::OptimalTwoStep] {
        let e = gmm::solve(&data, &ctx, &GmmConfig::new(MomentKind::Cc).with_weight(w)).unwrap_err();
        assert!(matches!(e, Error::Identification(_)), "{e}");
    }
}

#[test]
fn identical_contributions_have_zero_variance() {
    let n = 20;
    let z = RowMatrix::from_columns(&[vec![1.0; n], vec![0.5; n]]).unwrap();
    let x = RowMatrix::from_columns(&[vec![0.5; n]]).unwrap();
    let data = Dataset::new(z, x, vec![Some(1.0); n], vec![Some(2.0); n]).unwrap();
    let ctx = MomentContext::complete_cases(&data, Arc::new(LinearModel::new(1)), Assumption::Mar).unwrap();
    let v = estimate_V(&data, &ctx, MomentKind::Cc, &[0.3, 0.5]).unwrap();
    assert!(v.abs().max() <= 1e-15, "{v}");
}

#[test]
fn config_validation() {
    let data = draw(100, 13).unmasked();
    let ctx = MomentContext::complete_cases(&data, Arc::new(LinearModel::new(1)), Assumption::Mar).unwrap();
    let bad = GmmConfig { tolerance: 0.0, ..GmmConfig::new(MomentKind::Cc) };
    assert!(matches!(gmm::solve(&data, &ctx, &bad), Err(Error::Config(_))));
    let bad = GmmConfig { beta_init: BetaInit::Given(vec![1.0]), ..GmmConfig::new(MomentKind::Cc) };
    assert!(matches!(gmm::solve(&data, &ctx, &bad), Err(Error::Config(_))));
}

fn spd(seed: &[f64], k: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(k, k, |i, j| seed[(i * k + j) % seed.len()]);
    &a * a.transpose() + DMatrix::identity(k, k) * 0.1
}

proptest! {
    #[test]
    fn sandwich_with_inverse_variance_is_efficient(
        gv in prop::collection::vec(-2.0f64..2.0, 6),
        vv in prop::collection::vec(-2.0f64..2.0, 9),
        n in 10usize..10_000,
    ) {
        let g = DMatrix::from_row_slice(3, 2, &gv);
        prop_assume!((g.transpose() * &g).determinant().abs() > 1e-3);
        let v = spd(&vv, 3);
        let vinv = linalg::spd_inverse(&v, 0.0).unwrap();
        let s = gmm::sandwich(&g, &vinv, &v, n).unwrap();
        let e = gmm::efficient_covariance(&g, &vinv, n).unwrap();
        prop_assert!(linalg::max_abs_rel_diff(&s, &e) <= 1e-6);
        prop_assert!(linalg::is_psd(&s, 1e-8));
    }

    #[test]
    fn sandwich_is_psd_for_any_psd_weight(
        gv in prop::collection::vec(-2.0f64..2.0, 6),
        vv in prop::collection::vec(-2.0f64..2.0, 9),
        wv in prop::collection::vec(-2.0f64..2.0, 9),
    ) {
        let g = DMatrix::from_row_slice(3, 2, &gv);
        let w = spd(&wv, 3);
        prop_assume!((g.transpose() * &w * &g).determinant().abs() > 1e-3);
        let s = gmm::sandwich(&g, &w, &spd(&vv, 3), 100).unwrap();
        prop_assert!(linalg::is_psd(&s, 1e-8));
        // The efficient covariance is never larger.
        let v = spd(&vv, 3);
        let e = gmm::efficient_covariance(&g, &linalg::spd_inverse(&v, 0.0).unwrap(), 100).unwrap();
        prop_assert!(linalg::min_eigenvalue(&(&s - &e)) >= -1e-8 * s.abs().max());
    }
}
