//! Synthetic firm-month panels with known treatment effects, and a Monte
//! Carlo harness that scores estimators against the ground truth.

use std::collections::BTreeSet;
use std::time::Instant;

use rand::Rng;
use rand_distr::{Distribution, Normal, StudentT};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal as NormalDist, StudentsT};

use crate::dml::{final_stage, DmlConfig};
use crate::error::{Error, Result};
use crate::learners::LearnerSpec;
use crate::month::Month;
use crate::panel::{FirmMonthRow, Fundamentals, PanelDataset};
use crate::pipeline::{prepare, PrepareOptions};
use crate::regime::RegimeSel;
use crate::rng::{derive_seed, stream_rng};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    /// Student-t with 5 degrees of freedom, rescaled to unit variance.
    #[default]
    StudentT,
    Gaussian,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pillar {
    E,
    S,
    G,
}

/// Crash-jump channel of the tail mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TailParams {
    /// Jump probability at average treatment in stress months.
    pub stress_prob: f64,
    /// Jump probability at average treatment in normal months.
    pub normal_prob: f64,
    pub jump_mean: f64,
    pub jump_sd: f64,
}

impl Default for TailParams {
    fn default() -> Self {
        TailParams {
            stress_prob: 0.04,
            normal_prob: 0.005,
            jump_mean: -0.35,
            jump_sd: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DgpSpec {
    pub n_firms: usize,
    /// Outcome months; one extra leading month supplies the first lags.
    pub n_months: usize,
    pub n_sectors: usize,
    pub stress_share: f64,
    pub theta_stress: f64,
    pub theta_normal: f64,
    /// Loading of the control index on the treatment.
    pub confound_strength: f64,
    /// Loading of the control index on the outcome, per unit of
    /// `confound_strength`.
    pub outcome_loading: f64,
    /// In tail mode the thetas are logit slopes of the jump probability
    /// instead of mean effects.
    pub tail_mode: bool,
    pub tail: TailParams,
    pub noise_scale: f64,
    pub noise: NoiseKind,
    /// Pillar whose idiosyncratic part carries the effect; `None` uses the
    /// aggregate score.
    pub effect_pillar: Option<Pillar>,
    pub market_mean: f64,
    pub market_sd: f64,
    /// Extra market drop in stress months.
    pub stress_gap: f64,
    pub seed: u64,
}

impl Default for DgpSpec {
    fn default() -> Self {
        DgpSpec {
            n_firms: 200,
            n_months: 100,
            n_sectors: 10,
            stress_share: 0.15,
            theta_stress: 0.0,
            theta_normal: 0.0,
            confound_strength: 1.0,
            outcome_loading: 0.5,
            tail_mode: false,
            tail: TailParams::default(),
            noise_scale: 1.0,
            noise: NoiseKind::StudentT,
            effect_pillar: None,
            market_mean: 0.008,
            market_sd: 0.04,
            stress_gap: 0.03,
            seed: 0,
        }
    }
}

impl DgpSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.stress_share > 0.0 && self.stress_share < 0.5) {
            return Err(Error::invalid("stress_share must lie in (0, 0.5)"));
        }
        if self.n_firms < 50 {
            return Err(Error::invalid("n_firms must be at least 50"));
        }
        if self.n_months < 60 {
            return Err(Error::invalid("n_months must be at least 60"));
        }
        if self.n_sectors == 0 || !(self.noise_scale > 0.0) {
            return Err(Error::invalid("n_sectors and noise_scale must be positive"));
        }
        let t = &self.tail;
        if self.tail_mode
            && !(t.stress_prob > 0.0 && t.stress_prob < 1.0 && t.normal_prob > 0.0 && t.normal_prob < 1.0)
        {
            return Err(Error::invalid("tail probabilities must lie in (0, 1)"));
        }
        Ok(())
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let spec: DgpSpec = toml::from_str(s)?;
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub theta_stress: f64,
    pub theta_normal: f64,
    pub tail_mode: bool,
    pub stress_months: Vec<Month>,
    pub stress_share: f64,
    /// Average derivative of the jump probability with respect to the
    /// treatment, `mean p(1-p) theta`, over stress and normal rows (tail mode).
    pub crash_slope_stress: f64,
    pub crash_slope_normal: f64,
}

impl GroundTruth {
    /// True coefficient a linear estimator of `outcome` on the treatment
    /// targets in `regime`.
    pub fn estimand(&self, outcome_is_crash: bool, regime: RegimeSel) -> f64 {
        let (s, n) = if self.tail_mode {
            if outcome_is_crash {
                (self.crash_slope_stress, self.crash_slope_normal)
            } else {
                (f64::NAN, f64::NAN)
            }
        } else if outcome_is_crash {
            (f64::NAN, f64::NAN)
        } else {
            (self.theta_stress, self.theta_normal)
        };
        match regime {
            RegimeSel::Stress => s,
            RegimeSel::NonStress => n,
            RegimeSel::All if s == n => s,
            RegimeSel::All => f64::NAN,
        }
    }
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Index of the five latent firm characteristics loading on treatment and
/// outcome.
fn index(x: &[f64; 5]) -> f64 {
    (x[0] + x[1] - x[2] + x[3] + x[4]) / 5f64.sqrt()
}

/// Draws the panel. The output is a pure function of the spec.
pub fn generate_panel(spec: &DgpSpec) -> Result<(PanelDataset, GroundTruth)> {
    spec.validate()?;
    let mut rng = stream_rng(spec.seed, 0);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let t5 = StudentT::new(5.0).expect("t5");
    let t5_scale = (5.0f64 / 3.0).sqrt();
    let q_normal = NormalDist::new(0.0, 1.0).expect("unit normal");
    let q_t5 = StudentsT::new(0.0, 1.0, 5.0).expect("t5");
    let months_total = spec.n_months + 1;
    let start = Month::new(2010, 1)?;

    let mut factor: Vec<f64> = (0..months_total)
        .map(|_| spec.market_mean + spec.market_sd * std_normal.sample(&mut rng))
        .collect();
    let n_stress = ((spec.stress_share * spec.n_months as f64) - 1e-9).ceil() as usize;
    let mut order: Vec<usize> = (1..months_total).collect();
    order.sort_by(|&a, &b| factor[a].total_cmp(&factor[b]).then(a.cmp(&b)));
    let mut stress = vec![false; months_total];
    for &t in order.iter().take(n_stress) {
        stress[t] = true;
        factor[t] -= spec.stress_gap;
    }

    let sector_ret: Vec<f64> = (0..spec.n_sectors).map(|_| 0.01 * std_normal.sample(&mut rng)).collect();
    let mut sector_esg: Vec<f64> = (0..spec.n_sectors).map(|_| 0.5 * std_normal.sample(&mut rng)).collect();
    let avg = sector_esg.iter().sum::<f64>() / spec.n_sectors as f64;
    sector_esg.iter_mut().for_each(|v| *v -= avg);

    let noise = |u: f64| match spec.noise {
        NoiseKind::Gaussian => q_normal.inverse_cdf(u),
        NoiseKind::StudentT => q_t5.inverse_cdf(u) / t5_scale,
    };
    let tail = &spec.tail;
    let mut rows = Vec::with_capacity(spec.n_firms * months_total);
    let mut slope_acc = [(0.0, 0usize); 2];
    for i in 0..spec.n_firms {
        let firm = format!("F{:04}", i + 1);
        let sector = i % spec.n_sectors;
        let sector_label = format!("S{:02}", sector + 1);
        // previous month's latent characteristics and effective treatment
        let mut prev: Option<([f64; 5], f64)> = None;
        for t in 0..months_total {
            let mut x = [0.0; 5];
            for v in x.iter_mut() {
                *v = std_normal.sample(&mut rng);
            }
            let base = spec.confound_strength * index(&x) + sector_esg[sector];
            let pillar_noise: [f64; 3] =
                std::array::from_fn(|_| 3f64.sqrt() * std_normal.sample(&mut rng));
            let pillars: [f64; 3] = std::array::from_fn(|k| base + pillar_noise[k]);
            let esg = pillars.iter().sum::<f64>() / 3.0;
            let effective = match spec.effect_pillar {
                None => esg,
                Some(Pillar::E) => pillars[0],
                Some(Pillar::S) => pillars[1],
                Some(Pillar::G) => pillars[2],
            };

            let mut row = FirmMonthRow::new(firm.clone(), start.offset(t as i32));
            row.sector = Some(sector_label.clone());
            row.esg = Some(esg);
            row.e_score = Some(pillars[0]);
            row.s_score = Some(pillars[1]);
            row.g_score = Some(pillars[2]);
            let at = (7.0 + x[0]).exp();
            row.fundamentals = Fundamentals {
                at: Some(at),
                dltt: Some((0.3 + 0.08 * x[1]) * at),
                ib: Some((0.05 + 0.03 * x[2]) * at),
                capx: Some((0.04 + 0.015 * x[3]) * at),
                ppent: Some((0.3 + 0.1 * x[4]) * at),
            };
            row.volume_usd = Some((15.0 + 0.5 * x[0] + 0.5 * std_normal.sample(&mut rng)).exp());
            row.sigma = Some(0.02 * (0.3 * std_normal.sample(&mut rng)).exp());

            if let Some((xp, dp)) = prev {
                let loc = factor[t]
                    + sector_ret[sector]
                    + spec.confound_strength * spec.outcome_loading * index(&xp);
                let s = stress[t];
                let theta = if s { spec.theta_stress } else { spec.theta_normal };
                let ret = if spec.tail_mode {
                    let p0 = if s { tail.stress_prob } else { tail.normal_prob };
                    let p = logistic(logit(p0) + theta * dp);
                    slope_acc[s as usize].0 += p * (1.0 - p) * theta;
                    slope_acc[s as usize].1 += 1;
                    let u: f64 = rng.random();
                    if u < p {
                        loc + tail.jump_mean + tail.jump_sd * std_normal.sample(&mut rng)
                    } else {
                        loc + spec.noise_scale * noise(u)
                    }
                } else {
                    let e = match spec.noise {
                        NoiseKind::Gaussian => std_normal.sample(&mut rng),
                        NoiseKind::StudentT => t5.sample(&mut rng) / t5_scale,
                    };
                    loc + theta * dp + spec.noise_scale * e
                };
                row.ret = Some(ret);
            }
            rows.push(row);
            prev = Some((x, effective));
        }
    }
    let panel = PanelDataset::new(rows)?;
    let stress_months: Vec<Month> = (0..months_total)
        .filter(|&t| stress[t])
        .map(|t| start.offset(t as i32))
        .collect();
    let avg_slope = |k: usize| {
        if slope_acc[k].1 == 0 {
            0.0
        } else {
            slope_acc[k].0 / slope_acc[k].1 as f64
        }
    };
    let truth = GroundTruth {
        theta_stress: spec.theta_stress,
        theta_normal: spec.theta_normal,
        tail_mode: spec.tail_mode,
        stress_share: stress_months.len() as f64 / spec.n_months as f64,
        stress_months,
        crash_slope_stress: avg_slope(1),
        crash_slope_normal: avg_slope(0),
    };
    Ok((panel, truth))
}

/// Estimators the harness can score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "estimator", rename_all = "snake_case")]
pub enum EstimatorSpec {
    /// Cross-fitted partialling-out DML with month-clustered errors.
    Dml {
        outcome: String,
        treatment: String,
        learner: LearnerSpec,
        regime: RegimeSel,
        #[serde(default = "default_folds")]
        n_folds: usize,
    },
    /// OLS of the outcome on the treatment and an intercept, no controls.
    NaiveOls {
        outcome: String,
        treatment: String,
        regime: RegimeSel,
    },
}

fn default_folds() -> usize {
    5
}

impl EstimatorSpec {
    pub fn name(&self) -> String {
        match self {
            EstimatorSpec::Dml { learner, regime, .. } => {
                format!("dml_{}_{}", learner.kind().label(), regime.label())
            }
            EstimatorSpec::NaiveOls { regime, .. } => format!("naive_ols_{}", regime.label()),
        }
    }

    fn parts(&self) -> (&str, &str, RegimeSel) {
        match self {
            EstimatorSpec::Dml {
                outcome,
                treatment,
                regime,
                ..
            }
            | EstimatorSpec::NaiveOls {
                outcome,
                treatment,
                regime,
            } => (outcome, treatment, *regime),
        }
    }

    /// Estimate and standard error on a prepared panel.
    pub fn run(
        &self,
        panel: &PanelDataset,
        regime: &crate::regime::RegimeSeries,
        seed: u64,
    ) -> Result<(f64, f64)> {
        match self {
            EstimatorSpec::Dml {
                outcome,
                treatment,
                learner,
                regime: sel,
                n_folds,
            } => {
                let mut cfg = DmlConfig::new(outcome, treatment, learner.clone(), *sel, seed);
                cfg.n_folds = *n_folds;
                let cell = crate::dml::dml_cell(panel, regime, &cfg)?;
                Ok((cell.estimate.beta, cell.estimate.se))
            }
            EstimatorSpec::NaiveOls {
                outcome,
                treatment,
                regime: sel,
            } => {
                let rows = crate::crash::regime_rows(panel, regime, *sel, &[outcome, treatment])?;
                let yv = panel.column(outcome)?;
                let dv = panel.column(treatment)?;
                let y: Vec<f64> = rows.iter().map(|&i| yv[i].unwrap()).collect();
                let d: Vec<f64> = rows.iter().map(|&i| dv[i].unwrap()).collect();
                let months: Vec<Month> = rows.iter().map(|&i| panel.rows()[i].month).collect();
                let my = crate::stats::mean(&y);
                let md = crate::stats::mean(&d);
                let yc: Vec<f64> = y.iter().map(|v| v - my).collect();
                let dc: Vec<f64> = d.iter().map(|v| v - md).collect();
                let e = final_stage(&yc, &dc, &months)?;
                Ok((e.beta, e.se))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub schema_version: String,
    pub estimator: String,
    pub replications: usize,
    pub n_failed: usize,
    pub truth: f64,
    pub mean_estimate: f64,
    pub mean_bias: f64,
    pub rmse: f64,
    /// Share of 95% intervals containing the truth.
    pub coverage: f64,
    /// Share of replications rejecting a zero effect at 5%; the size of the
    /// test when the truth is zero.
    pub rejection_rate: f64,
    pub null_dgp: bool,
    pub estimates: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub failures: Vec<String>,
    /// Wall-clock seconds per replication. Not part of the deterministic
    /// output.
    #[serde(skip)]
    pub wall_time_per_rep: f64,
}

/// Scores `estimator` on `r` panels drawn from `dgp` with per-replication
/// seeds derived from the spec seed. Failed replications are excluded and
/// counted; more than 5% failures is an error.
pub fn monte_carlo(
    dgp: &DgpSpec,
    prep: &PrepareOptions,
    estimator: &EstimatorSpec,
    r: usize,
) -> Result<SimResult> {
    if r < 100 {
        return Err(Error::invalid(format!("{r} replications; need at least 100")));
    }
    dgp.validate()?;
    let (outcome, _, sel) = estimator.parts();
    let is_crash = outcome.starts_with("crash_");
    let clock = Instant::now();
    let runs: Vec<Result<(f64, f64, f64)>> = (0..r)
        .into_par_iter()
        .map(|k| {
            let mut spec = dgp.clone();
            spec.seed = derive_seed(dgp.seed, &[k as u64]);
            let (raw, truth) = generate_panel(&spec)?;
            let p = prepare(&raw, prep)?;
            let (b, se) = estimator.run(&p.panel, &p.regime, derive_seed(spec.seed, &[1]))?;
            Ok((b, se, truth.estimand(is_crash, sel)))
        })
        .collect();
    let wall = clock.elapsed().as_secs_f64() / r as f64;
    let mut est = Vec::new();
    let mut ses = Vec::new();
    let mut truths = Vec::new();
    let mut failures = Vec::new();
    for (k, run) in runs.into_iter().enumerate() {
        match run {
            Ok((b, se, t)) => {
                est.push(b);
                ses.push(se);
                truths.push(t);
            }
            Err(e) => failures.push(format!("replication {k}: {e}")),
        }
    }
    if failures.len() * 20 > r {
        return Err(Error::TooManyFailures {
            failed: failures.len(),
            total: r,
            context: failures.join("; "),
        });
    }
    if truths.iter().any(|t| !t.is_finite()) {
        return Err(Error::invalid(format!(
            "the DGP defines no estimand for outcome `{outcome}` in the {} regime",
            sel.label()
        )));
    }
    let m = est.len() as f64;
    let truth = truths.iter().sum::<f64>() / m;
    let bias: Vec<f64> = est.iter().zip(&truths).map(|(b, t)| b - t).collect();
    let z = 1.959_963_984_540_054;
    let covered = est
        .iter()
        .zip(&ses)
        .zip(&truths)
        .filter(|((b, s), t)| (*b - z * *s) <= **t && **t <= (*b + z * *s))
        .count();
    let rejected = est.iter().zip(&ses).filter(|(b, s)| (**b / **s).abs() > z).count();
    let null_dgp = truths.iter().all(|&t| t == 0.0);
    Ok(SimResult {
        schema_version: crate::SCHEMA_VERSION.into(),
        estimator: estimator.name(),
        replications: r,
        n_failed: failures.len(),
        truth,
        mean_estimate: est.iter().sum::<f64>() / m,
        mean_bias: bias.iter().sum::<f64>() / m,
        rmse: (bias.iter().map(|b| b * b).sum::<f64>() / m).sqrt(),
        coverage: covered as f64 / m,
        rejection_rate: rejected as f64 / m,
        null_dgp,
        estimates: est,
        std_errors: ses,
        failures,
        wall_time_per_rep: wall,
    })
}

/// Months flagged stress in both the generated truth and `flags`.
pub fn stress_overlap(truth: &GroundTruth, flagged: &BTreeSet<Month>) -> usize {
    truth.stress_months.iter().filter(|m| flagged.contains(m)).count()
}

