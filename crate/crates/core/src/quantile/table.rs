use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::bootstrap::{replicate_rows, MonthBlockBootstrap};
use super::solver::{fit_quantile, fit_quantile_from, QuantileFit, QuantileOptions};
use crate::crash::{regime_rows, sector_design};
use crate::design::Design;
use crate::error::{Error, Result};
use crate::month::Month;
use crate::panel::{lagged_name, PanelDataset, EXCESS_RETURN};
use crate::regime::{RegimeSel, RegimeSeries};
use crate::stats::percentile_ci;

pub const TREATMENT_LABEL: &str = "esg";
pub const STRESS_LABEL: &str = "stress";
pub const INTERACTION_LABEL: &str = "esg_x_stress";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantileSpec {
    pub tau_grid: Vec<f64>,
    pub n_boot: usize,
    pub seed: u64,
}

impl Default for QuantileSpec {
    fn default() -> Self {
        QuantileSpec {
            tau_grid: vec![0.01, 0.02, 0.05, 0.10, 0.20],
            n_boot: 800,
            seed: 0,
        }
    }
}

impl QuantileSpec {
    pub fn validate(&self) -> Result<()> {
        if self.tau_grid.is_empty() || self.tau_grid.iter().any(|&t| !(t > 0.0 && t < 1.0)) {
            return Err(Error::invalid("tau grid must be non-empty with entries in (0, 1)"));
        }
        if self.n_boot < 100 {
            return Err(Error::invalid(format!("n_boot {} below 100", self.n_boot)));
        }
        Ok(())
    }
}

/// Outcome, treatment and control columns of the quantile model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantileModel {
    pub outcome: String,
    pub treatment: String,
    /// `None` uses the panel's lagged controls.
    pub controls: Option<Vec<String>>,
    /// Minimum share of replicates that must fit for each tau.
    pub min_success: f64,
    pub solver: QuantileOptions,
}

impl Default for QuantileModel {
    fn default() -> Self {
        QuantileModel {
            outcome: EXCESS_RETURN.into(),
            treatment: lagged_name("esg", 1),
            controls: None,
            min_success: 0.95,
            solver: QuantileOptions::default(),
        }
    }
}

/// Design `[intercept, sectors, esg, stress, esg x stress, controls]` with
/// its outcome, row indices and month labels.
pub fn quantile_design(
    panel: &PanelDataset,
    regime: &RegimeSeries,
    model: &QuantileModel,
) -> Result<(Design, Vec<f64>, Vec<usize>)> {
    let controls = model
        .controls
        .clone()
        .unwrap_or_else(|| panel.controls().iter().map(|c| lagged_name(c, 1)).collect());
    let mut cols: Vec<&str> = vec![model.outcome.as_str(), model.treatment.as_str()];
    cols.extend(controls.iter().map(String::as_str));
    let rows = regime_rows(panel, regime, RegimeSel::All, &cols)?;
    if rows.is_empty() {
        return Err(Error::Insufficient("no complete rows for the quantile model".into()));
    }
    let flags = regime.flag_map();
    let d = panel.column(&model.treatment)?;
    let stress: Vec<f64> = rows
        .iter()
        .map(|&i| flags[&panel.rows()[i].month] as u8 as f64)
        .collect();
    let esg: Vec<f64> = rows.iter().map(|&i| d[i].unwrap_or(f64::NAN)).collect();
    let base = sector_design(panel, &rows, &[])?;
    let mut names = base.names.clone();
    let mut columns: Vec<Vec<f64>> = (0..base.ncols()).map(|j| base.x.column(j)).collect();
    names.push(TREATMENT_LABEL.into());
    columns.push(esg.clone());
    names.push(STRESS_LABEL.into());
    columns.push(stress.clone());
    names.push(INTERACTION_LABEL.into());
    columns.push(esg.iter().zip(&stress).map(|(a, b)| a * b).collect());
    for c in &controls {
        let v = panel.column(c)?;
        names.push(c.clone());
        columns.push(rows.iter().map(|&i| v[i].unwrap_or(f64::NAN)).collect());
    }
    let yv = panel.column(&model.outcome)?;
    let y = rows.iter().map(|&i| yv[i].unwrap_or(f64::NAN)).collect();
    Ok((
        Design {
            names,
            x: crate::linalg::Matrix::from_columns(&columns),
        },
        y,
        rows,
    ))
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub estimate: f64,
    pub lower: f64,
    pub upper: f64,
}

impl Interval {
    pub fn excludes_zero(&self) -> bool {
        self.lower > 0.0 || self.upper < 0.0
    }

    pub fn star(&self) -> &'static str {
        if self.excludes_zero() { "*" } else { "" }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantileRow {
    pub tau: f64,
    pub stress: Interval,
    pub esg_non_stress: Interval,
    pub interaction: Interval,
    pub esg_stress_slope: Interval,
    pub n_failed: usize,
    pub objective: f64,
    pub point_optimal: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantileTable {
    pub schema_version: String,
    pub n_boot: usize,
    pub seed: u64,
    pub n_obs: usize,
    pub n_stress_months: usize,
    pub n_non_stress_months: usize,
    pub solver: QuantileOptions,
    pub rows: Vec<QuantileRow>,
    pub points: Vec<QuantileFit>,
    /// Failure messages from dropped replicates, at most a handful per tau.
    pub failure_log: Vec<String>,
}

/// The four reported quantities of a fit.
fn reported(fit: &QuantileFit) -> [f64; 4] {
    let b = fit.coef_of(TREATMENT_LABEL).unwrap_or(f64::NAN);
    let d = fit.coef_of(INTERACTION_LABEL).unwrap_or(f64::NAN);
    [fit.coef_of(STRESS_LABEL).unwrap_or(f64::NAN), b, d, b + d]
}

/// Point estimates and bootstrap percentile intervals for each tau.
pub fn quantile_table(
    panel: &PanelDataset,
    regime: &RegimeSeries,
    spec: &QuantileSpec,
    model: &QuantileModel,
) -> Result<QuantileTable> {
    spec.validate()?;
    let (x, y, rows) = quantile_design(panel, regime, model)?;
    let points: Vec<QuantileFit> = spec
        .tau_grid
        .iter()
        .map(|&t| fit_quantile(&y, &x, t, &model.solver))
        .collect::<Result<_>>()?;

    let mut month_rows: BTreeMap<Month, Vec<usize>> = BTreeMap::new();
    for (j, &i) in rows.iter().enumerate() {
        month_rows.entry(panel.rows()[i].month).or_default().push(j);
    }
    let months: BTreeSet<Month> = month_rows.keys().copied().collect();
    let boot = MonthBlockBootstrap::new(&months, regime, spec.seed)?;

    // replicate r -> per tau: reported quantities or the failure message
    let reps: Vec<Vec<std::result::Result<[f64; 4], String>>> = (0..spec.n_boot)
        .into_par_iter()
        .map(|r| {
            let idx = replicate_rows(&month_rows, &boot.replicate(r));
            let xr = x.select_rows(&idx);
            let yr: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
            points
                .iter()
                .map(|pt| {
                    fit_quantile_from(&yr, &xr, pt.tau, Some(&pt.coef), &model.solver)
                        .map(|f| reported(&f))
                        .map_err(|e| format!("replicate {r} tau {}: {e}", pt.tau))
                })
                .collect()
        })
        .collect();

    let mut out_rows = Vec::new();
    let mut failure_log = Vec::new();
    for (k, pt) in points.iter().enumerate() {
        let mut vals: [Vec<f64>; 4] = Default::default();
        let mut failed = 0;
        for rep in &reps {
            match &rep[k] {
                Ok(v) => {
                    for q in 0..4 {
                        vals[q].push(v[q]);
                    }
                }
                Err(e) => {
                    failed += 1;
                    if failed <= 5 {
                        failure_log.push(e.clone());
                    }
                }
            }
        }
        let ok = spec.n_boot - failed;
        if (ok as f64) < model.min_success * spec.n_boot as f64 {
            return Err(Error::TooManyFailures {
                failed,
                total: spec.n_boot,
                context: format!("bootstrap replicates at tau {}: {}", pt.tau, failure_log.join("; ")),
            });
        }
        let est = reported(pt);
        let iv: Vec<Interval> = (0..4)
            .map(|q| {
                let (lower, upper) = percentile_ci(&vals[q], 0.95).expect("replicates present");
                Interval {
                    estimate: est[q],
                    lower,
                    upper,
                }
            })
            .collect();
        out_rows.push(QuantileRow {
            tau: pt.tau,
            stress: iv[0],
            esg_non_stress: iv[1],
            interaction: iv[2],
            esg_stress_slope: iv[3],
            n_failed: failed,
            objective: pt.objective,
            point_optimal: pt.solver.optimal,
        });
    }
    Ok(QuantileTable {
        schema_version: crate::SCHEMA_VERSION.into(),
        n_boot: spec.n_boot,
        seed: spec.seed,
        n_obs: y.len(),
        n_stress_months: boot.n_stress(),
        n_non_stress_months: boot.n_non_stress(),
        solver: model.solver.clone(),
        rows: out_rows,
        points,
        failure_log,
    })
}

pub fn write_quantile_csv<W: Write>(table: &QuantileTable, w: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    let mut header = vec!["tau".to_string()];
    for q in ["stress", "esg_non_stress", "interaction", "esg_stress_slope"] {
        header.push(q.into());
        header.push(format!("{q}_lower"));
        header.push(format!("{q}_upper"));
        header.push(format!("{q}_star"));
    }
    header.push("n_failed".into());
    w.write_record(&header)?;
    for r in &table.rows {
        let mut rec = vec![r.tau.to_string()];
        for iv in [r.stress, r.esg_non_stress, r.interaction, r.esg_stress_slope] {
            rec.push(iv.estimate.to_string());
            rec.push(iv.lower.to_string());
            rec.push(iv.upper.to_string());
            rec.push(iv.star().into());
        }
        rec.push(r.n_failed.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
