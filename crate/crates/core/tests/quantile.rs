use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use tailrisk::design::{Design, DesignBuilder};
use tailrisk::pipeline::{prepare, PrepareOptions};
use tailrisk::quantile::{
    check_loss, fit_quantile, pinball_loss, quantile_table, replicate_rows,
    stratified_month_block_bootstrap, write_quantile_csv, QuantileModel, QuantileOptions,
    QuantileSpec, INTERACTION_LABEL, STRESS_LABEL, TREATMENT_LABEL,
};
use tailrisk::regime::{classify_stress, RegimeSeries, StressOptions};
use tailrisk::synth::{generate_panel, DgpSpec};
use tailrisk::Month;

fn loss(y: &[f64], cols: &[Vec<f64>], beta: &[f64], tau: f64) -> f64 {
    (0..y.len())
        .map(|i| {
            let fit: f64 = cols.iter().zip(beta).map(|(c, b)| c[i] * b).sum();
            check_loss(y[i] - fit, tau)
        })
        .sum()
}

fn design(cols: &[Vec<f64>]) -> Design {
    let mut b = DesignBuilder::new(cols[0].len()).intercept();
    for (k, c) in cols.iter().enumerate().skip(1) {
        b = b.column(format!("x{k}"), c.clone());
    }
    b.build()
}

/// Minimum pinball loss over all vertices: coefficient vectors that
/// interpolate three observations exactly (intercept plus two regressors).
fn vertex_oracle(y: &[f64], cols: &[Vec<f64>], tau: f64) -> f64 {
    let n = y.len();
    let mut best = f64::INFINITY;
    for a in 0..n {
        for b in a + 1..n {
            for c in b + 1..n {
                let m = [
                    [1.0, cols[1][a], cols[2][a]],
                    [1.0, cols[1][b], cols[2][b]],
                    [1.0, cols[1][c], cols[2][c]],
                ];
                let det = |m: &[[f64; 3]; 3]| {
                    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
                        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
                        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
                };
                let d = det(&m);
                if d.abs() < 1e-12 {
                    continue;
                }
                let rhs = [y[a], y[b], y[c]];
                // Cramer's rule
                let beta: Vec<f64> = (0..3)
                    .map(|j| {
                        let mut mj = m;
                        for r in 0..3 {
                            mj[r][j] = rhs[r];
                        }
                        det(&mj) / d
                    })
                    .collect();
                best = best.min(loss(y, cols, &beta, tau));
            }
        }
    }
    best
}

/// Minimum over a coefficient lattice of step 0.05 spanning [-3, 3]^3.
fn lattice_oracle(y: &[f64], cols: &[Vec<f64>], tau: f64) -> f64 {
    let grid: Vec<f64> = (-60..=60).map(|k| k as f64 * 0.05).collect();
    let mut best = f64::INFINITY;
    for &a in &grid {
        for &b in &grid {
            for &c in &grid {
                best = best.min(loss(y, cols, &[a, b, c], tau));
            }
        }
    }
    best
}

fn instance(seed: u64, n: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x1: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
    let x2: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let y = (0..n)
        .map(|i| {
            let e: f64 = StandardNormal.sample(&mut rng);
            0.5 + 1.2 * x1[i] - 0.7 * x2[i] + e
        })
        .collect();
    (y, vec![vec![1.0; n], x1, x2])
}

#[test]
fn pinball_arms() {
    assert_eq!(pinball_loss(&[0.0; 5], 0.3), 0.0);
    assert_eq!(check_loss(1.0, 0.25), 0.25);
    assert_eq!(check_loss(-1.0, 0.25), 0.75);
}

#[test]
fn intercept_only_median() {
    let x = DesignBuilder::new(3).intercept().build();
    let f = fit_quantile(&[1.0, 2.0, 9.0], &x, 0.5, &QuantileOptions::default()).unwrap();
    assert_eq!(f.coef[0], 2.0);
    assert!(f.solver.optimal);
}

#[test]
fn intercept_only_low_quantile_matches_scan() {
    let y: Vec<f64> = (0..10).map(|k| (k as f64).powf(1.3) - 2.0).collect();
    let x = DesignBuilder::new(10).intercept().build();
    let f = fit_quantile(&y, &x, 0.2, &QuantileOptions::default()).unwrap();
    let mut scan = f64::INFINITY;
    let (lo, hi) = (y[0], y[9]);
    for k in 0..=200_000 {
        let c = lo + (hi - lo) * k as f64 / 200_000.0;
        scan = scan.min(pinball_loss(&y.iter().map(|v| v - c).collect::<Vec<_>>(), 0.2));
    }
    assert!(f.objective <= scan + 1e-9);
    // n tau = 2 is an integer: every point of [y(2), y(3)] is optimal
    assert!(f.coef[0] >= y[1] - 1e-12 && f.coef[0] <= y[2] + 1e-12);
}

#[test]
fn small_instances_match_vertex_and_lattice_oracles() {
    for seed in 0..20u64 {
        let (y, cols) = instance(seed, 25);
        let tau = [0.1, 0.25, 0.5, 0.75, 0.9][seed as usize % 5];
        let f = fit_quantile(&y, &design(&cols), tau, &QuantileOptions::default()).unwrap();
        let vertex = vertex_oracle(&y, &cols, tau);
        let lattice = lattice_oracle(&y, &cols, tau);
        assert!(f.objective <= vertex * (1.0 + 1e-6), "seed {seed}: {} vs {vertex}", f.objective);
        assert!(f.objective <= lattice * (1.0 + 1e-6));
        assert!((f.objective - loss(&y, &cols, &f.coef, tau)).abs() < 1e-12 * f.objective.max(1.0));
        assert!(f.solver.optimal);
        assert!(f.solver.thin_sample, "25 rows for 3 coefficients is thin");
    }
}

#[test]
fn rank_deficiency_and_bad_tau() {
    let (y, cols) = instance(1, 30);
    let d = design(&[cols[0].clone(), cols[1].clone(), cols[1].iter().map(|v| 2.0 * v).collect()]);
    assert!(matches!(
        fit_quantile(&y, &d, 0.5, &QuantileOptions::default()),
        Err(tailrisk::Error::RankDeficient(_))
    ));
    assert!(fit_quantile(&y, &design(&cols), 1.0, &QuantileOptions::default()).is_err());
}

fn regime_of(months: &[Month], stress: &[bool]) -> RegimeSeries {
    RegimeSeries {
        months: months.to_vec(),
        market_return: stress.iter().map(|&s| if s { -0.1 } else { 0.01 }).collect(),
        stress: stress.to_vec(),
        cutoff: -0.1,
        quantile_level: 0.15,
        convention: Default::default(),
        degenerate: false,
    }
}

fn months(n: usize) -> Vec<Month> {
    (0..n).map(|k| Month::new(2015, 1).unwrap().offset(k as i32)).collect()
}

#[test]
fn bootstrap_preserves_regime_counts_and_rows() {
    let ms = months(30);
    let stress: Vec<bool> = (0..30).map(|k| k % 7 == 0).collect();
    let reg = regime_of(&ms, &stress);
    let set: BTreeSet<Month> = ms.iter().copied().collect();
    let stress_set = reg.stress_months();
    let n_stress = stress_set.len();
    let reps = stratified_month_block_bootstrap(&set, &reg, 200, 17).unwrap();
    let mut month_rows: BTreeMap<Month, Vec<usize>> = BTreeMap::new();
    let mut next = 0;
    for (k, m) in ms.iter().enumerate() {
        let n = 3 + k % 4;
        month_rows.insert(*m, (next..next + n).collect());
        next += n;
    }
    for r in &reps {
        assert_eq!(r.len(), 30);
        assert_eq!(r.iter().filter(|m| stress_set.contains(m)).count(), n_stress);
        let rows = replicate_rows(&month_rows, r);
        let recount: usize = r.iter().map(|m| month_rows[m].len()).sum();
        assert_eq!(rows.len(), recount);
    }
    assert_eq!(reps, stratified_month_block_bootstrap(&set, &reg, 200, 17).unwrap());
    assert_ne!(reps, stratified_month_block_bootstrap(&set, &reg, 200, 18).unwrap());

    let one: Vec<bool> = (0..30).map(|k| k == 4).collect();
    let reg = regime_of(&ms, &one);
    for r in stratified_month_block_bootstrap(&set, &reg, 50, 1).unwrap() {
        assert!(r.contains(&ms[4]));
    }
    let none = regime_of(&ms, &[false; 30]);
    assert!(stratified_month_block_bootstrap(&set, &none, 5, 1).is_err());
}

#[test]
fn quantile_table_bookkeeping_and_determinism() {
    let dgp = DgpSpec {
        n_firms: 50,
        n_months: 60,
        seed: 9,
        ..Default::default()
    };
    let (raw, _) = generate_panel(&dgp).unwrap();
    let prep = prepare(&raw, &PrepareOptions { min_firms: 20, ..Default::default() }).unwrap();
    let spec = QuantileSpec {
        tau_grid: vec![0.05, 0.5],
        n_boot: 100,
        seed: 3,
    };
    let model = QuantileModel::default();
    let a = quantile_table(&prep.panel, &prep.regime, &spec, &model).unwrap();
    let b = quantile_table(&prep.panel, &prep.regime, &spec, &model).unwrap();
    assert_eq!(a, b);
    for (row, fit) in a.rows.iter().zip(&a.points) {
        let beta = fit.coef_of(TREATMENT_LABEL).unwrap();
        let delta = fit.coef_of(INTERACTION_LABEL).unwrap();
        assert_eq!(row.esg_stress_slope.estimate, beta + delta);
        assert_eq!(row.stress.estimate, fit.coef_of(STRESS_LABEL).unwrap());
        for iv in [row.stress, row.esg_non_stress, row.interaction, row.esg_stress_slope] {
            assert!(iv.lower <= iv.upper);
        }
        assert!(row.point_optimal);
    }
    let mut buf = Vec::new();
    write_quantile_csv(&a, &mut buf).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 3);

    let bad = QuantileSpec { n_boot: 99, ..spec };
    assert!(quantile_table(&prep.panel, &prep.regime, &bad, &model).is_err());
}

#[test]
fn regime_from_classification_feeds_bootstrap() {
    let ms = months(40);
    let r: Vec<f64> = (0..40).map(|k| ((k * 37) % 40) as f64 / 100.0).collect();
    let reg = classify_stress(&ms, &r, &StressOptions::default()).unwrap();
    let set: BTreeSet<Month> = ms.iter().copied().collect();
    let reps = stratified_month_block_bootstrap(&set, &reg, 10, 0).unwrap();
    let stress = reg.stress_months();
    for rep in reps {
        assert_eq!(rep.iter().filter(|m| stress.contains(m)).count(), 6);
    }
}

fn fitted(seed: u64, n: usize, tau: f64) -> (Vec<f64>, Vec<Vec<f64>>, Vec<f64>) {
    let (y, cols) = instance(seed, n);
    let f = fit_quantile(&y, &design(&cols), tau, &QuantileOptions::default()).unwrap();
    (y, cols, f.coef)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn check_function_identity(u in -1e3f64..1e3, tau in 0.001f64..0.999) {
        prop_assert!((check_loss(u, tau) + check_loss(-u, tau) - u.abs()).abs() < 1e-9);
        prop_assert!((check_loss(u, tau) - check_loss(-u, 1.0 - tau)).abs() < 1e-9);
        prop_assert!(check_loss(u, tau) >= 0.0);
    }

    #[test]
    fn residual_signs_bracket_tau(seed in any::<u64>(), tau in 0.02f64..0.98) {
        let n = 200;
        let (y, cols, beta) = fitted(seed, n, tau);
        let r: Vec<f64> = (0..n).map(|i| y[i] - cols.iter().zip(&beta).map(|(c, b)| c[i] * b).sum::<f64>()).collect();
        let tol = 1e-9;
        let neg = r.iter().filter(|&&v| v < -tol).count() as f64;
        let nonpos = r.iter().filter(|&&v| v <= tol).count() as f64;
        let basic = r.iter().filter(|&&v| v.abs() <= tol).count();
        prop_assert!(basic <= 3);
        prop_assert!(neg <= tau * n as f64 + 1e-9);
        prop_assert!(nonpos >= tau * n as f64 - 1e-9);
    }

    #[test]
    fn location_and_scale_equivariance(seed in any::<u64>(), kappa in -5.0f64..5.0, lambda in 0.1f64..10.0) {
        let tau = 0.3;
        let (y, cols, beta) = fitted(seed, 60, tau);
        let d = design(&cols);
        let shifted: Vec<f64> = y.iter().map(|v| v + kappa).collect();
        let fs = fit_quantile(&shifted, &d, tau, &QuantileOptions::default()).unwrap();
        prop_assert!((fs.coef[0] - beta[0] - kappa).abs() < 1e-6);
        for j in 1..3 {
            prop_assert!((fs.coef[j] - beta[j]).abs() < 1e-6);
        }
        let scaled: Vec<f64> = y.iter().map(|v| v * lambda).collect();
        let fl = fit_quantile(&scaled, &d, tau, &QuantileOptions::default()).unwrap();
        for j in 0..3 {
            prop_assert!((fl.coef[j] - lambda * beta[j]).abs() < 1e-6 * lambda.max(1.0));
        }
    }
}
