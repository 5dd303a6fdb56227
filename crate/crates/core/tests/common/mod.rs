//! Discrete oracle world: Z, X, D, Y each in {0,1} with an explicit joint
//! law and missing mechanism. Expectations are exact sums over the 16 cells
//! times the 4 patterns.
#![allow(dead_code)]

use aipw_gmm::model::{classify_pattern, Dataset, LinearModel, RowMatrix};
use aipw_gmm::moments::MomentContext;
use aipw_gmm::nuisance::{Assumption, MissingMechanism, NuisanceFit, PatternMode, TreatmentImputation};
use std::sync::Arc;

#[derive(Debug, Clone, Copy)]
pub struct Cell {
    pub z: f64,
    pub x: f64,
    pub d: f64,
    pub y: f64,
    pub prob: f64,
}

/// Mechanism as functions of (d, z, x); p_y1 may ignore d (MAR).
#[derive(Clone, Copy)]
pub struct Mechanism {
    pub p_d: fn(f64, f64) -> f64,
    pub p_y1: fn(f64, f64, f64) -> f64,
    pub p_y0: fn(f64, f64) -> f64,
}

pub fn smar_mechanism() -> Mechanism {
    Mechanism {
        p_d: |z, x| 0.5 + 0.2 * z - 0.1 * x,
        p_y1: |d, z, x| 0.4 + 0.3 * d + 0.1 * z + 0.1 * x,
        p_y0: |z, x| 0.6 - 0.2 * z + 0.1 * x,
    }
}

pub fn mar_mechanism() -> Mechanism {
    Mechanism {
        p_d: |z, x| 0.5 + 0.2 * z - 0.1 * x,
        p_y1: |_, z, x| 0.5 + 0.2 * z - 0.15 * x,
        p_y0: |z, x| 0.6 - 0.2 * z + 0.1 * x,
    }
}

/// No (R^D=0, R^Y=1) pattern: the outcome is never seen without the treatment.
pub fn monotone_mechanism() -> Mechanism {
    Mechanism { p_y0: |_, _| 0.0, ..smar_mechanism() }
}

fn p_zx(z: f64, x: f64) -> f64 {
    [[0.3, 0.2], [0.15, 0.35]][z as usize][x as usize]
}

fn p_d1(z: f64, x: f64) -> f64 {
    0.2 + 0.5 * z + 0.15 * x
}

/// Pr[Y=1 | d, z, x] with a triple interaction so no low-order sieve is exact.
fn p_y1_given(d: f64, z: f64, x: f64) -> f64 {
    0.15 + 0.4 * d + 0.1 * z + 0.2 * x - 0.1 * d * z * x
}

pub fn cells() -> Vec<Cell> {
    let mut out = Vec::new();
    for z in [0.0, 1.0] {
        for x in [0.0, 1.0] {
            for d in [0.0, 1.0] {
                for y in [0.0, 1.0] {
                    let pd = if d == 1.0 { p_d1(z, x) } else { 1.0 - p_d1(z, x) };
                    let py = if y == 1.0 { p_y1_given(d, z, x) } else { 1.0 - p_y1_given(d, z, x) };
                    out.push(Cell { z, x, d, y, prob: p_zx(z, x) * pd * py });
                }
            }
        }
    }
    out
}

pub fn e_y_given_dzx(d: f64, z: f64, x: f64) -> f64 {
    p_y1_given(d, z, x)
}

pub fn pr_d1(z: f64, x: f64) -> f64 {
    p_d1(z, x)
}

pub fn e_y_given_zx(z: f64, x: f64) -> f64 {
    let p = p_d1(z, x);
    p * p_y1_given(1.0, z, x) + (1.0 - p) * p_y1_given(0.0, z, x)
}

/// β⁰ = (α, β) solving E[(Z,X)'(Y − αD − βX)] = 0.
pub fn beta0() -> Vec<f64> {
    let (mut a, mut b) = ([[0.0; 2]; 2], [0.0; 2]);
    for c in cells() {
        let inst = [c.z, c.x];
        let reg = [c.d, c.x];
        for i in 0..2 {
            for j in 0..2 {
                a[i][j] += c.prob * inst[i] * reg[j];
            }
            b[i] += c.prob * inst[i] * c.y;
        }
    }
    let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
    vec![(b[0] * a[1][1] - a[0][1] * b[1]) / det, (a[0][0] * b[1] - a[1][0] * b[0]) / det]
}

/// One row per (cell, pattern) with its probability.
pub struct Enumerated {
    pub data: Dataset,
    pub weights: Vec<f64>,
    pub rows: Vec<(Cell, bool, bool)>,
}

pub fn enumerate(mech: Mechanism) -> Enumerated {
    let mut rows = Vec::new();
    let mut weights = Vec::new();
    for c in cells() {
        let pd = (mech.p_d)(c.z, c.x);
        for r_d in [true, false] {
            let py = if r_d { (mech.p_y1)(c.d, c.z, c.x) } else { (mech.p_y0)(c.z, c.x) };
            for r_y in [true, false] {
                let w = c.prob * if r_d { pd } else { 1.0 - pd } * if r_y { py } else { 1.0 - py };
                if w > 0.0 {
                    rows.push((c, r_d, r_y));
                    weights.push(w);
                }
            }
        }
    }
    Enumerated { data: dataset_of(&rows), weights, rows }
}

pub fn dataset_of(rows: &[(Cell, bool, bool)]) -> Dataset {
    let zc: Vec<f64> = rows.iter().map(|r| r.0.z).collect();
    let xc: Vec<f64> = rows.iter().map(|r| r.0.x).collect();
    let z = RowMatrix::from_columns(&[zc, xc.clone()]).unwrap();
    let x = RowMatrix::from_columns(&[xc]).unwrap();
    let d = rows.iter().map(|r| r.1.then_some(r.0.d)).collect();
    let y = rows.iter().map(|r| r.2.then_some(r.0.y)).collect();
    Dataset::new(z, x, d, y).unwrap()
}

/// Perturbations applied to oracle nuisances.
#[derive(Clone, Copy, Default)]
pub struct Corruption {
    pub imputations: bool,
    pub propensities: bool,
    /// Replace p_y1 by a function of (z, x) only.
    pub drop_d_from_py: bool,
}

pub fn oracle_context(
    rows: &[(Cell, bool, bool)],
    mech: Mechanism,
    assumption: Assumption,
    mode: PatternMode,
    corrupt: Corruption,
) -> MomentContext {
    let mut p_d = Vec::new();
    let mut p_y1 = Vec::new();
    let mut p_y0 = Vec::new();
    let (mut ey, mut eyd, mut marg, mut probs) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for &(c, r_d, _) in rows {
        let (z, x) = (c.z, c.x);
        let mut pd = (mech.p_d)(z, x);
        let mut py1 = (mech.p_y1)(c.d, z, x);
        let mut py0 = (mech.p_y0)(z, x);
        if corrupt.propensities {
            pd = 0.6 * pd + 0.3 - 0.1 * z * x;
            py1 = 0.7 * py1 + 0.2 + 0.05 * x;
            if py0 > 0.0 {
                py0 = 0.8 * py0 + 0.15 * z;
            }
        }
        if corrupt.drop_d_from_py {
            py1 = 0.5 * ((mech.p_y1)(0.0, z, x) + (mech.p_y1)(1.0, z, x));
        }
        p_d.push(pd);
        p_y1.push(r_d.then_some(py1));
        p_y0.push(py0);

        let mut pr1 = pr_d1(z, x);
        let mut m0 = e_y_given_dzx(0.0, z, x);
        let mut m1 = e_y_given_dzx(1.0, z, x);
        let mut eyzx = e_y_given_zx(z, x);
        if corrupt.imputations {
            pr1 = 0.5 * pr1 + 0.3 - 0.1 * x;
            m0 = m0 + 0.3 * z - 0.2;
            m1 = 0.5 * m1 + 0.1 * x;
            eyzx = 0.4 + 0.25 * z - 0.3 * x;
        }
        ey.push(eyzx);
        eyd.push(r_d.then_some(if c.d == 1.0 { m1 } else { m0 }));
        marg.push(pr1 * m1 + (1.0 - pr1) * m0);
        probs.push(vec![1.0 - pr1, pr1]);
    }
    let mechanism = MissingMechanism::from_values(assumption, mode, p_d, p_y1, p_y0).unwrap();
    let nuisance =
        NuisanceFit::from_values(ey, eyd, marg, TreatmentImputation::Discrete { support: vec![0.0, 1.0], probs })
            .unwrap();
    MomentContext::new(mechanism, nuisance, Arc::new(LinearModel::new(1)), assumption)
}

/// Σ_rows w·f(row), componentwise.
pub fn expectation(e: &Enumerated, f: impl Fn(usize) -> Vec<f64>) -> Vec<f64> {
    let mut acc = vec![0.0; 2];
    for (i, w) in e.weights.iter().enumerate() {
        for (a, v) in acc.iter_mut().zip(f(i)) {
            *a += w * v;
        }
    }
    acc
}

pub fn pattern_present(e: &Enumerated, r_d: bool, r_y: bool) -> bool {
    e.rows.iter().any(|r| classify_pattern(r.1, r.2) == classify_pattern(r_d, r_y))
}

/// n observations with random values, random patterns, random per-row
/// propensities in [0.05, 0.95] and random imputations; continuous D.
pub fn random_world(n: usize, seed: u64, assumption: Assumption) -> (Dataset, MomentContext) {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut u = |lo: f64, hi: f64| lo + (hi - lo) * rng.random::<f64>();
    let mut zc = Vec::with_capacity(n);
    let mut xc = Vec::with_capacity(n);
    let (mut d, mut y) = (Vec::with_capacity(n), Vec::with_capacity(n));
    let (mut p_d, mut p_y1, mut p_y0) = (Vec::new(), Vec::new(), Vec::new());
    let (mut ey, mut eyd, mut marg, mut ed) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for i in 0..n {
        // Cycle through the patterns so every one is present.
        let (r_d, r_y) = [(true, true), (true, false), (false, true), (false, false)][i % 4];
        zc.push(u(-2.0, 2.0));
        xc.push(u(-1.0, 1.0));
        // Draw every value even when masked so the stream stays aligned.
        let v = u(-1.0, 2.0);
        d.push(r_d.then_some(v));
        let v = u(-3.0, 3.0);
        y.push(r_y.then_some(v));
        p_d.push(u(0.05, 0.95));
        let v = u(0.05, 0.95);
        p_y1.push(r_d.then_some(v));
        p_y0.push(u(0.05, 0.95));
        ey.push(u(-1.0, 1.0));
        let v = u(-1.0, 1.0);
        eyd.push(r_d.then_some(v));
        marg.push(u(-1.0, 1.0));
        ed.push(u(-0.5, 1.5));
    }
    let z = RowMatrix::from_columns(&[zc, xc.clone()]).unwrap();
    let x = RowMatrix::from_columns(&[xc]).unwrap();
    let data = Dataset::new(z, x, d, y).unwrap();
    let mech = MissingMechanism::from_values(assumption, PatternMode::Strict, p_d, p_y1, p_y0).unwrap();
    let nuis = NuisanceFit::from_values(ey, eyd, marg, TreatmentImputation::Mean(ed)).unwrap();
    (data, MomentContext::new(mech, nuis, Arc::new(LinearModel::new(1)), assumption))
}

/// One observation with z = (1, x) and chosen nuisance values.
#[allow(clippy::too_many_arguments)]
pub fn single(
    x: f64,
    d: Option<f64>,
    y: Option<f64>,
    p_d: f64,
    p_y: f64,
    ey: f64,
    eyd: f64,
    ed: f64,
    assumption: Assumption,
) -> (Dataset, MomentContext) {
    let z = RowMatrix::from_rows(&[vec![1.0, x]]).unwrap();
    let xm = RowMatrix::from_rows(&[vec![x]]).unwrap();
    let r_d = d.is_some();
    let data = Dataset::new(z, xm, vec![d], vec![y]).unwrap();
    let mech =
        MissingMechanism::from_values(assumption, PatternMode::Strict, vec![p_d], vec![r_d.then_some(p_y)], vec![p_y])
            .unwrap();
    let nuis =
        NuisanceFit::from_values(vec![ey], vec![r_d.then_some(eyd)], vec![ey], TreatmentImputation::Mean(vec![ed]))
            .unwrap();
    (data, MomentContext::new(mech, nuis, Arc::new(LinearModel::new(1)), assumption))
}
