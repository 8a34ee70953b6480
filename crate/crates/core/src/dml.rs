//! Cross-fitted partialling-out double machine learning.
//!
//! Rows are split into folds by calendar month. For each fold the outcome
//! and treatment nuisances are tuned and fitted on the other months and
//! predicted on the fold; the treatment effect is the slope of the outcome
//! residual on the treatment residual, with month-clustered errors.

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::crash::{regime_rows, sector_design};
use crate::error::{Error, Result};
use crate::learners::{fit_tuned, fold_labels, Hyper, LearnerSpec};
use crate::linalg::Matrix;
use crate::month::Month;
use crate::panel::{crash_column, lagged_name, PanelDataset, EXCESS_RETURN};
use crate::regime::{RegimeSel, RegimeSeries};
use crate::rng::{derive_seed, key_hash};
use crate::stats::{mean, stars, two_sided_p};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DmlConfig {
    pub outcome: String,
    pub treatment: String,
    pub learner: LearnerSpec,
    pub n_folds: usize,
    /// Folds of the tuning cross-validation inside each training complement.
    pub cv_folds: usize,
    pub regime: RegimeSel,
    pub seed: u64,
    /// Control columns; `None` uses the panel's lagged controls.
    pub controls: Option<Vec<String>>,
    /// Adds pairwise products of the controls to the nuisance features.
    pub interactions: bool,
}

impl DmlConfig {
    pub fn new(outcome: &str, treatment: &str, learner: LearnerSpec, regime: RegimeSel, seed: u64) -> Self {
        DmlConfig {
            outcome: outcome.into(),
            treatment: treatment.into(),
            learner,
            n_folds: 5,
            cv_folds: 5,
            regime,
            seed,
            controls: None,
            interactions: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_folds < 2 {
            return Err(Error::invalid(format!("n_folds must be at least 2, got {}", self.n_folds)));
        }
        if self.cv_folds < 2 {
            return Err(Error::invalid("cv_folds must be at least 2"));
        }
        if self.treatment == self.outcome {
            return Err(Error::invalid("treatment and outcome coincide"));
        }
        if let Some(c) = &self.controls {
            if c.contains(&self.treatment) || c.contains(&self.outcome) {
                return Err(Error::invalid("treatment or outcome listed among controls"));
            }
        }
        self.learner.validate()
    }

    pub fn control_columns(&self, panel: &PanelDataset) -> Vec<String> {
        self.controls
            .clone()
            .unwrap_or_else(|| panel.controls().iter().map(|c| lagged_name(c, 1)).collect())
    }

    /// Seed of this configuration's cell, independent of execution order.
    pub fn cell_seed(&self) -> u64 {
        derive_seed(
            self.seed,
            &[
                key_hash(self.regime.label()),
                key_hash(&self.outcome),
                key_hash(&self.treatment),
                key_hash(self.learner.kind().label()),
            ],
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldDiagnostics {
    pub fold: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub n_months: usize,
    /// Out-of-fold mean squared errors of the two nuisances.
    pub outcome_mse: f64,
    pub treatment_mse: f64,
    pub outcome_hyper: Hyper,
    pub treatment_hyper: Hyper,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossFit {
    pub y_res: Vec<f64>,
    pub d_res: Vec<f64>,
    pub fold: Vec<usize>,
    pub folds: Vec<FoldDiagnostics>,
}

fn degenerate(v: &[f64]) -> bool {
    let (lo, hi) = v
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    !(hi - lo > 1e-12 * (1.0 + lo.abs().max(hi.abs())))
}

/// Out-of-fold residuals `Y - m(W)` and `D - g(W)`. `months` labels each row;
/// all rows of a month fall in the same fold.
pub fn crossfit_residuals(
    y: &[f64],
    d: &[f64],
    w: &Matrix,
    months: &[Month],
    learner: &LearnerSpec,
    n_folds: usize,
    cv_folds: usize,
    seed: u64,
) -> Result<CrossFit> {
    let n = y.len();
    if d.len() != n || w.nrows() != n || months.len() != n {
        return Err(Error::invalid("cross-fit inputs differ in length"));
    }
    if n_folds < 2 {
        return Err(Error::invalid(format!("need at least 2 folds, got {n_folds}")));
    }
    let groups: Vec<i64> = months.iter().map(|m| m.index() as i64).collect();
    let n_months = {
        let mut g = groups.clone();
        g.sort_unstable();
        g.dedup();
        g.len()
    };
    if n_folds > n_months {
        return Err(Error::invalid(format!("{n_folds} folds exceed {n_months} distinct months")));
    }
    let fold = fold_labels(n, n_folds, seed, Some(&groups))?;

    let results: Vec<Result<(Vec<usize>, Vec<f64>, Vec<f64>, FoldDiagnostics)>> = (0..n_folds)
        .into_par_iter()
        .map(|k| {
            let train: Vec<usize> = (0..n).filter(|&i| fold[i] != k).collect();
            let test: Vec<usize> = (0..n).filter(|&i| fold[i] == k).collect();
            let xt = w.select_rows(&train);
            let yt: Vec<f64> = train.iter().map(|&i| y[i]).collect();
            let dt: Vec<f64> = train.iter().map(|&i| d[i]).collect();
            let gt: Vec<i64> = train.iter().map(|&i| groups[i]).collect();
            if degenerate(&yt) {
                return Err(Error::Fold {
                    fold: k,
                    reason: "outcome is constant (single class) in the training complement".into(),
                });
            }
            if degenerate(&dt) {
                return Err(Error::Fold {
                    fold: k,
                    reason: "treatment is constant in the training complement".into(),
                });
            }
            let n_train_months = {
                let mut g = gt.clone();
                g.sort_unstable();
                g.dedup();
                g.len()
            };
            let inner = cv_folds.min(n_train_months);
            let fit_one = |target: &[f64], which: u64| {
                fit_tuned(&xt, target, learner, inner, derive_seed(seed, &[k as u64, which]), Some(&gt))
                    .map_err(|e| Error::Fold {
                        fold: k,
                        reason: e.to_string(),
                    })
            };
            let (my, cy) = fit_one(&yt, 0)?;
            let (md, cd) = fit_one(&dt, 1)?;
            let mut yr = Vec::with_capacity(test.len());
            let mut dr = Vec::with_capacity(test.len());
            for &i in &test {
                yr.push(y[i] - my.predict_row(w.row(i)));
                dr.push(d[i] - md.predict_row(w.row(i)));
            }
            let m = test.len().max(1) as f64;
            let diag = FoldDiagnostics {
                fold: k,
                n_train: train.len(),
                n_test: test.len(),
                n_months: {
                    let mut g: Vec<i64> = test.iter().map(|&i| groups[i]).collect();
                    g.sort_unstable();
                    g.dedup();
                    g.len()
                },
                outcome_mse: yr.iter().map(|v| v * v).sum::<f64>() / m,
                treatment_mse: dr.iter().map(|v| v * v).sum::<f64>() / m,
                outcome_hyper: cy.selected,
                treatment_hyper: cd.selected,
            };
            Ok((test, yr, dr, diag))
        })
        .collect();

    let mut y_res = vec![0.0; n];
    let mut d_res = vec![0.0; n];
    let mut folds = Vec::with_capacity(n_folds);
    for r in results {
        let (test, yr, dr, diag) = r?;
        for (j, &i) in test.iter().enumerate() {
            y_res[i] = yr[j];
            d_res[i] = dr[j];
        }
        folds.push(diag);
    }
    let ss: f64 = d_res.iter().map(|v| v * v).sum();
    if ss < 1e-12 * n as f64 {
        return Err(Error::TreatmentExplained);
    }
    Ok(CrossFit {
        y_res,
        d_res,
        fold,
        folds,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DmlEstimate {
    pub beta: f64,
    pub se: f64,
    pub z: f64,
    pub p: f64,
    pub n_obs: usize,
    pub n_clusters: usize,
    pub mean_d_res: f64,
    pub mean_y_res: f64,
    pub sum_d_res_sq: f64,
}

impl DmlEstimate {
    pub fn ci95(&self) -> (f64, f64) {
        let h = 1.959_963_984_540_054 * self.se;
        (self.beta - h, self.beta + h)
    }
}

/// No-intercept regression of `y_res` on `d_res` with the cluster-robust
/// variance `G/(G-1) * sum_g (sum_{i in g} d_i e_i)^2 / (sum d_i^2)^2`.
pub fn final_stage<C: Ord + Clone>(y_res: &[f64], d_res: &[f64], clusters: &[C]) -> Result<DmlEstimate> {
    let n = y_res.len();
    if d_res.len() != n || clusters.len() != n {
        return Err(Error::invalid("final-stage inputs differ in length"));
    }
    let sdd: f64 = d_res.iter().map(|v| v * v).sum();
    if !(sdd > 0.0) {
        return Err(Error::TreatmentExplained);
    }
    let beta = d_res.iter().zip(y_res).map(|(d, y)| d * y).sum::<f64>() / sdd;
    let mut score: BTreeMap<C, f64> = BTreeMap::new();
    for i in 0..n {
        *score.entry(clusters[i].clone()).or_default() += d_res[i] * (y_res[i] - beta * d_res[i]);
    }
    let g = score.len();
    if g < 2 {
        return Err(Error::Insufficient(format!("{g} cluster(s); need at least 2")));
    }
    let meat: f64 = score.values().map(|s| s * s).sum();
    let var = g as f64 / (g as f64 - 1.0) * meat / (sdd * sdd);
    let se = var.sqrt();
    let z = beta / se;
    Ok(DmlEstimate {
        beta,
        se,
        z,
        p: two_sided_p(z),
        n_obs: n,
        n_clusters: g,
        mean_d_res: mean(d_res),
        mean_y_res: mean(y_res),
        sum_d_res_sq: sdd,
    })
}

/// Nuisance features for `rows`: sector dummies and controls, with optional
/// pairwise control products. The intercept column is left out.
pub fn nuisance_features(
    panel: &PanelDataset,
    rows: &[usize],
    controls: &[String],
    interactions: bool,
) -> Result<(Vec<String>, Matrix)> {
    let cols: Vec<(String, String)> = controls.iter().map(|c| (c.clone(), c.clone())).collect();
    let d = sector_design(panel, rows, &cols)?;
    let mut names = Vec::new();
    let mut columns = Vec::new();
    for (j, name) in d.names.iter().enumerate() {
        if name == "intercept" {
            continue;
        }
        names.push(name.clone());
        columns.push(d.x.column(j));
    }
    if interactions {
        let base: Vec<(String, Vec<f64>)> = controls
            .iter()
            .filter_map(|c| d.position(c).map(|j| (c.clone(), d.x.column(j))))
            .collect();
        for a in 0..base.len() {
            for b in a..base.len() {
                names.push(format!("{}*{}", base[a].0, base[b].0));
                columns.push(base[a].1.iter().zip(&base[b].1).map(|(u, v)| u * v).collect());
            }
        }
    }
    if columns.is_empty() {
        columns.push(vec![0.0; rows.len()]);
        names.push("none".into());
    }
    Ok((names, Matrix::from_columns(&columns)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DmlCell {
    pub regime: RegimeSel,
    pub outcome: String,
    pub treatment: String,
    pub learner: String,
    pub features: Vec<String>,
    pub n_dropped: usize,
    pub estimate: DmlEstimate,
    pub folds: Vec<FoldDiagnostics>,
}

/// One regime x outcome x treatment x learner estimate.
pub fn dml_cell(panel: &PanelDataset, regime: &RegimeSeries, cfg: &DmlConfig) -> Result<DmlCell> {
    cfg.validate()?;
    for c in [&cfg.outcome, &cfg.treatment] {
        if !panel.has_column(c) {
            return Err(Error::UnknownColumn(c.clone()));
        }
    }
    let controls = cfg.control_columns(panel);
    let mut cols: Vec<&str> = vec![cfg.outcome.as_str(), cfg.treatment.as_str()];
    cols.extend(controls.iter().map(String::as_str));
    let in_regime = regime_rows(panel, regime, cfg.regime, &[])?;
    let rows = regime_rows(panel, regime, cfg.regime, &cols)?;
    if rows.is_empty() {
        return Err(Error::Insufficient(format!("no complete rows in the {} regime", cfg.regime.label())));
    }
    let yv = panel.column(&cfg.outcome)?;
    let dv = panel.column(&cfg.treatment)?;
    let y: Vec<f64> = rows.iter().map(|&i| yv[i].unwrap()).collect();
    let d: Vec<f64> = rows.iter().map(|&i| dv[i].unwrap()).collect();
    let months: Vec<Month> = rows.iter().map(|&i| panel.rows()[i].month).collect();
    let (features, w) = nuisance_features(panel, &rows, &controls, cfg.interactions)?;
    let seed = cfg.cell_seed();
    let cf = crossfit_residuals(&y, &d, &w, &months, &cfg.learner, cfg.n_folds, cfg.cv_folds, seed)?;
    let estimate = final_stage(&cf.y_res, &cf.d_res, &months)?;
    Ok(DmlCell {
        regime: cfg.regime,
        outcome: cfg.outcome.clone(),
        treatment: cfg.treatment.clone(),
        learner: cfg.learner.kind().label().into(),
        features,
        n_dropped: in_regime.len() - rows.len(),
        estimate,
        folds: cf.folds,
    })
}

/// A cell's outcome: an estimate or the reason it failed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub regime: RegimeSel,
    pub outcome: String,
    pub treatment: String,
    pub learner: String,
    pub result: std::result::Result<DmlCell, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DmlReport {
    pub schema_version: String,
    pub cells: Vec<CellReport>,
}

impl DmlReport {
    pub fn find(&self, regime: RegimeSel, outcome: &str, treatment: &str, learner: &str) -> Option<&CellReport> {
        self.cells.iter().find(|c| {
            c.regime == regime && c.outcome == outcome && c.treatment == treatment && c.learner == learner
        })
    }

    pub fn failures(&self) -> usize {
        self.cells.iter().filter(|c| c.result.is_err()).count()
    }
}

/// Runs every configuration; a failing cell is reported, not propagated.
pub fn dml_matrix(panel: &PanelDataset, regime: &RegimeSeries, configs: &[DmlConfig]) -> DmlReport {
    let cells = configs
        .par_iter()
        .map(|cfg| CellReport {
            regime: cfg.regime,
            outcome: cfg.outcome.clone(),
            treatment: cfg.treatment.clone(),
            learner: cfg.learner.kind().label().into(),
            result: dml_cell(panel, regime, cfg).map_err(|e| e.to_string()),
        })
        .collect();
    DmlReport {
        schema_version: crate::SCHEMA_VERSION.into(),
        cells,
    }
}

/// Shared settings of a matrix run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DmlPlan {
    pub outcomes: Vec<String>,
    pub treatment: String,
    pub learners: Vec<LearnerSpec>,
    pub regimes: Vec<RegimeSel>,
    pub n_folds: usize,
    pub cv_folds: usize,
    pub seed: u64,
    pub controls: Option<Vec<String>>,
    pub interactions: bool,
}

impl Default for DmlPlan {
    fn default() -> Self {
        DmlPlan {
            outcomes: vec![crash_column(0.20), EXCESS_RETURN.into()],
            treatment: lagged_name("esg", 1),
            learners: vec![LearnerSpec::lasso(), LearnerSpec::random_forest()],
            regimes: vec![RegimeSel::Stress, RegimeSel::NonStress],
            n_folds: 5,
            cv_folds: 5,
            seed: 0,
            controls: None,
            interactions: false,
        }
    }
}

impl DmlPlan {
    fn config(&self, regime: RegimeSel, outcome: &str, treatment: &str, learner: &LearnerSpec) -> DmlConfig {
        DmlConfig {
            outcome: outcome.into(),
            treatment: treatment.into(),
            learner: learner.clone(),
            n_folds: self.n_folds,
            cv_folds: self.cv_folds,
            regime,
            seed: self.seed,
            controls: self.controls.clone(),
            interactions: self.interactions,
        }
    }

    /// Regime x outcome x learner configurations for the aggregate treatment.
    pub fn configs(&self) -> Vec<DmlConfig> {
        let mut out = Vec::new();
        for o in &self.outcomes {
            for &r in &self.regimes {
                for l in &self.learners {
                    out.push(self.config(r, o, &self.treatment, l));
                }
            }
        }
        out
    }
}

/// Treatment label and column of the aggregate score and its pillars.
pub const PILLARS: [(&str, &str); 4] = [
    ("agg", "esg_lag1"),
    ("e", "e_score_lag1"),
    ("s", "s_score_lag1"),
    ("g", "g_score_lag1"),
];

/// Aggregate and pillar treatments under the Lasso specification.
pub fn pillar_matrix(panel: &PanelDataset, regime: &RegimeSeries, plan: &DmlPlan) -> Result<DmlReport> {
    for (_, col) in PILLARS {
        if !panel.has_column(col) {
            return Err(Error::MissingColumn(col.into()));
        }
    }
    let lasso = plan
        .learners
        .iter()
        .find(|l| l.kind() == crate::learners::LearnerKind::Lasso)
        .cloned()
        .unwrap_or_else(LearnerSpec::lasso);
    let mut configs = Vec::new();
    for o in &plan.outcomes {
        for &r in &plan.regimes {
            for (_, col) in PILLARS {
                configs.push(plan.config(r, o, col, &lasso));
            }
        }
    }
    Ok(dml_matrix(panel, regime, &configs))
}

pub fn write_dml_csv<W: Write>(report: &DmlReport, w: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    w.write_record([
        "regime", "outcome", "treatment", "learner", "beta", "se", "z", "p", "stars", "ci_lower",
        "ci_upper", "n_obs", "status",
    ])?;
    for c in &report.cells {
        let mut rec = vec![
            c.regime.label().to_string(),
            c.outcome.clone(),
            c.treatment.clone(),
            c.learner.clone(),
        ];
        match &c.result {
            Ok(cell) => {
                let e = &cell.estimate;
                let (lo, hi) = e.ci95();
                rec.extend([
                    e.beta.to_string(),
                    e.se.to_string(),
                    e.z.to_string(),
                    e.p.to_string(),
                    stars(e.p).to_string(),
                    lo.to_string(),
                    hi.to_string(),
                    e.n_obs.to_string(),
                    "ok".into(),
                ]);
            }
            Err(msg) => {
                rec.extend(std::iter::repeat_n(String::new(), 8));
                rec.push(format!("failed: {msg}"));
            }
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

