use proptest::prelude::*;
use tailrisk::learners::LearnerSpec;
use tailrisk::pipeline::{prepare, PrepareOptions};
use tailrisk::regime::RegimeSel;
use tailrisk::synth::{
    generate_panel, monte_carlo, stress_overlap, DgpSpec, EstimatorSpec, NoiseKind, TailParams,
};

fn corr(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    sab / (saa * sbb).sqrt()
}

fn small(seed: u64) -> DgpSpec {
    DgpSpec { n_firms: 50, n_months: 60, seed, ..Default::default() }
}

#[test]
fn generation_is_a_pure_function_of_the_spec() {
    let (a, ta) = generate_panel(&small(3)).unwrap();
    let (b, tb) = generate_panel(&small(3)).unwrap();
    assert_eq!(a, b);
    assert_eq!(ta, tb);
    let (c, _) = generate_panel(&small(4)).unwrap();
    assert_ne!(a, c);
    assert_eq!(a.len(), 50 * 61);
    assert_eq!(a.months().len(), 61);
    // the leading month only supplies lags
    let first = a.months()[0];
    assert!(a.rows().iter().filter(|r| r.month == first).all(|r| r.ret.is_none()));
}

#[test]
fn spec_validation_and_toml() {
    let text = "n_firms = 80\nn_months = 72\ntheta_stress = -0.004\nnoise = \"gaussian\"\nseed = 5\n\n[tail]\nstress_prob = 0.05\n";
    let spec = DgpSpec::from_toml(text).unwrap();
    assert_eq!(spec.n_firms, 80);
    assert_eq!(spec.noise, NoiseKind::Gaussian);
    assert_eq!(spec.tail, TailParams { stress_prob: 0.05, ..Default::default() });
    assert_eq!(spec.stress_share, 0.15);

    for bad in [
        "stress_share = 0.5",
        "stress_share = 0.0",
        "n_firms = 49",
        "n_months = 59",
        "noise_scale = 0.0",
        "tail_mode = true\n[tail]\nstress_prob = 1.0",
        "n_firmz = 60",
    ] {
        assert!(DgpSpec::from_toml(bad).is_err(), "{bad}");
    }
    assert!(generate_panel(&DgpSpec { n_firms: 10, ..Default::default() }).is_err());
}

#[test]
fn unconfounded_treatment_is_uncorrelated_with_controls() {
    let spec = DgpSpec { confound_strength: 0.0, ..small(9) };
    let (raw, _) = generate_panel(&spec).unwrap();
    let p = prepare(&raw, &PrepareOptions::default()).unwrap();
    let mut checked = 0;
    for c in p.panel.controls() {
        let mut cols = vec!["esg", c.as_str()];
        cols.dedup();
        let rows = p.panel.complete_rows(&cols).unwrap();
        let esg = p.panel.column("esg").unwrap();
        let ctl = p.panel.column(c).unwrap();
        let a: Vec<f64> = rows.iter().map(|&i| esg[i].unwrap()).collect();
        let b: Vec<f64> = rows.iter().map(|&i| ctl[i].unwrap()).collect();
        let bound = 3.0 / (rows.len() as f64).sqrt();
        assert!(corr(&a, &b).abs() < bound, "{c}: {}", corr(&a, &b));
        checked += 1;
    }
    assert!(checked >= 4);

    let spec = DgpSpec { confound_strength: 1.0, ..small(9) };
    let (raw, _) = generate_panel(&spec).unwrap();
    let p = prepare(&raw, &PrepareOptions::default()).unwrap();
    let rows = p.panel.complete_rows(&["esg", "log_at"]).unwrap();
    let esg = p.panel.column("esg").unwrap();
    let size = p.panel.column("log_at").unwrap();
    let a: Vec<f64> = rows.iter().map(|&i| esg[i].unwrap()).collect();
    let b: Vec<f64> = rows.iter().map(|&i| size[i].unwrap()).collect();
    assert!(corr(&a, &b) > 0.1);
}

#[test]
fn tail_mode_crash_rate_falls_across_treatment_quintiles() {
    let spec = DgpSpec {
        n_firms: 400,
        n_months: 100,
        tail_mode: true,
        theta_stress: -1.0,
        noise_scale: 0.05,
        noise: NoiseKind::Gaussian,
        seed: 21,
        ..Default::default()
    };
    let (raw, truth) = generate_panel(&spec).unwrap();
    assert!(truth.crash_slope_stress < 0.0);
    assert_eq!(truth.crash_slope_normal, 0.0);
    let p = prepare(&raw, &PrepareOptions::default()).unwrap();
    let stress = p.regime.flag_map();
    let rows = p.panel.complete_rows(&["esg_lag1", "crash_020"]).unwrap();
    let d = p.panel.column("esg_lag1").unwrap();
    let crash = p.panel.column("crash_020").unwrap();
    let mut cell: Vec<(f64, f64)> = rows
        .iter()
        .filter(|&&i| stress[&p.panel.rows()[i].month])
        .map(|&i| (d[i].unwrap(), crash[i].unwrap()))
        .collect();
    cell.sort_by(|a, b| a.0.total_cmp(&b.0));
    let q = cell.len() / 5;
    let rates: Vec<f64> = (0..5)
        .map(|k| {
            let part = &cell[k * q..if k == 4 { cell.len() } else { (k + 1) * q }];
            part.iter().map(|c| c.1).sum::<f64>() / part.len() as f64
        })
        .collect();
    assert!(rates.windows(2).all(|w| w[0] > w[1]), "{rates:?}");
}

#[test]
fn null_dgp_estimates_center_on_zero() {
    let dgp = DgpSpec { noise: NoiseKind::Gaussian, ..small(17) };
    let est = EstimatorSpec::Dml {
        outcome: "ret".into(),
        treatment: "esg_lag1".into(),
        learner: LearnerSpec::lasso(),
        regime: RegimeSel::Stress,
        n_folds: 5,
    };
    let r = monte_carlo(&dgp, &PrepareOptions::default(), &est, 100).unwrap();
    assert!(r.null_dgp);
    assert_eq!(r.truth, 0.0);
    assert_eq!(r.estimates.len() + r.n_failed, 100);
    let m = r.estimates.len() as f64;
    let sd = (r.estimates.iter().map(|b| (b - r.mean_estimate).powi(2)).sum::<f64>() / (m - 1.0)).sqrt();
    assert!(r.mean_estimate.abs() < 3.0 * sd / m.sqrt(), "mean {} sd {}", r.mean_estimate, sd);
    assert!((0.0..=1.0).contains(&r.coverage));
    assert!((r.rejection_rate - (1.0 - r.coverage)).abs() < 1e-12);

    let json = serde_json::to_string(&r).unwrap();
    assert!(!json.contains("wall_time"));
    assert_eq!(r, monte_carlo(&dgp, &PrepareOptions::default(), &est, 100).map(|mut s| {
        s.wall_time_per_rep = r.wall_time_per_rep;
        s
    }).unwrap());
}

#[test]
fn harness_guards() {
    let est = EstimatorSpec::NaiveOls { outcome: "ret".into(), treatment: "esg_lag1".into(), regime: RegimeSel::All };
    assert!(monte_carlo(&small(1), &PrepareOptions::default(), &est, 99).is_err());
    let broken = EstimatorSpec::NaiveOls { outcome: "ret".into(), treatment: "nope".into(), regime: RegimeSel::All };
    let err = monte_carlo(&small(1), &PrepareOptions::default(), &broken, 100).unwrap_err();
    assert!(matches!(err, tailrisk::Error::TooManyFailures { failed: 100, .. }), "{err}");
    assert_eq!(est.name(), "naive_ols_all");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn stress_share_matches_spec(seed in any::<u64>(), share in 0.05f64..0.45, months in 60usize..130) {
        let spec = DgpSpec { n_firms: 50, n_months: months, stress_share: share, seed, ..Default::default() };
        let (raw, truth) = generate_panel(&spec).unwrap();
        prop_assert!((truth.stress_share - share).abs() <= 1.0 / months as f64);
        prop_assert!(truth.stress_months.iter().all(|m| raw.months().contains(m)));
        prop_assert_eq!(stress_overlap(&truth, &truth.stress_months.iter().copied().collect()), truth.stress_months.len());
    }
}
