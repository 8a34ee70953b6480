//! Crash events, regime-split crash logits with month-clustered inference,
//! odds ratios, quintile gaps and the threshold sweep.

mod logit;
mod quintile;

use std::io::Write;

use serde::{Deserialize, Serialize};

pub use logit::{
    cluster_robust_cov, fit_logit, fit_logit_clustered, loglik, CovKind, LogitFit, LogitOptions,
};
pub use quintile::{quintile_gap, QuintileGap, QuintileRate};

use crate::design::{Design, DesignBuilder};
use crate::error::{Error, Result};
use crate::panel::{crash_column, encode_sectors, lagged_name, PanelDataset};
use crate::regime::{RegimeSel, RegimeSeries};
use crate::stats::stars;

/// Headline crash threshold and the robustness grid.
pub const DEFAULT_THRESHOLD: f64 = 0.20;
pub const THRESHOLD_GRID: [f64; 3] = [0.15, 0.20, 0.25];

/// `1{ret < -c}`; missing returns stay missing.
pub fn crash_indicator(panel: &PanelDataset, c: f64) -> Result<PanelDataset> {
    if !(c > 0.0 && c < 1.0) {
        return Err(Error::invalid(format!("crash threshold {c} outside (0, 1)")));
    }
    let col = panel
        .rows()
        .iter()
        .map(|r| r.ret.map(|v| (v < -c) as u8 as f64))
        .collect();
    let mut out = panel.clone();
    out.set_derived(crash_column(c), col);
    Ok(out)
}

fn ensure_crash(panel: &PanelDataset, c: f64) -> Result<PanelDataset> {
    if panel.has_column(&crash_column(c)) {
        Ok(panel.clone())
    } else {
        crash_indicator(panel, c)
    }
}

/// `exp(k * beta)` for each step size `k`.
pub fn odds_ratios(beta: f64, units: &[f64]) -> Vec<f64> {
    units.iter().map(|k| (k * beta).exp()).collect()
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Spec {
    /// Sector fixed effects and ESG.
    A,
    /// Spec A plus lagged firm controls.
    B,
}

/// Which rows a specification is fit on.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    /// Both specifications use rows complete for Spec B.
    #[default]
    Common,
    /// Each specification uses every row complete for its own columns.
    Max,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrashConfig {
    pub threshold: f64,
    /// Treatment column (lagged ESG by default).
    pub treatment: String,
    /// Control columns for Spec B; `None` uses the panel's lagged controls.
    pub controls: Option<Vec<String>>,
    pub sample: SampleMode,
    pub logit: LogitOptions,
}

impl Default for CrashConfig {
    fn default() -> Self {
        CrashConfig {
            threshold: DEFAULT_THRESHOLD,
            treatment: lagged_name("esg", 1),
            controls: None,
            sample: SampleMode::Common,
            logit: LogitOptions::default(),
        }
    }
}

impl CrashConfig {
    pub fn control_columns(&self, panel: &PanelDataset) -> Vec<String> {
        self.controls.clone().unwrap_or_else(|| {
            panel.controls().iter().map(|c| lagged_name(c, 1)).collect()
        })
    }
}

/// Estimation rows of `panel` in the selected regime, complete for
/// `columns` and with a sector label.
pub(crate) fn regime_rows(
    panel: &PanelDataset,
    regime: &RegimeSeries,
    sel: RegimeSel,
    columns: &[&str],
) -> Result<Vec<usize>> {
    let flags = regime.flag_map();
    let rows = panel.rows();
    Ok(panel
        .complete_rows(columns)?
        .into_iter()
        .filter(|&i| {
            rows[i].sector.is_some()
                && flags.get(&rows[i].month).is_some_and(|&s| sel.includes(s))
        })
        .collect())
}

/// Intercept, sector dummies and the named numeric columns on `rows`.
pub(crate) fn sector_design(
    panel: &PanelDataset,
    rows: &[usize],
    columns: &[(String, String)],
) -> Result<Design> {
    let enc = encode_sectors(panel, Some(rows))?;
    let labels: Vec<&str> = rows
        .iter()
        .map(|&i| panel.rows()[i].sector.as_deref().unwrap_or(""))
        .collect();
    let mut b = DesignBuilder::new(rows.len()).intercept().sectors(&enc, &labels);
    for (col, label) in columns {
        let v = panel.column(col)?;
        b = b.column(label.clone(), rows.iter().map(|&i| v[i].unwrap_or(f64::NAN)).collect());
    }
    let mut d = b.build();
    d.drop_zero_columns();
    Ok(d)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogitCell {
    pub spec: Spec,
    pub regime: RegimeSel,
    pub threshold: f64,
    pub sample: SampleMode,
    pub fit: Option<LogitFit>,
    pub error: Option<String>,
}

impl LogitCell {
    /// Treatment coefficient, its clustered z and p.
    pub fn treatment_stats(&self, treatment_label: &str) -> Option<(f64, f64, f64, f64)> {
        let f = self.fit.as_ref()?;
        let j = f.position(treatment_label)?;
        Some((f.coef[j], f.se[j], f.z[j], f.p[j]))
    }
}

/// Label used for the treatment coefficient in crash designs.
pub const TREATMENT_LABEL: &str = "esg";

fn fit_cell(
    panel: &PanelDataset,
    regime: &RegimeSeries,
    config: &CrashConfig,
    spec: Spec,
    sel: RegimeSel,
) -> Result<LogitFit> {
    let crash = crash_column(config.threshold);
    let controls = config.control_columns(panel);
    let mut sample_cols: Vec<&str> = vec![crash.as_str(), config.treatment.as_str()];
    if spec == Spec::B || config.sample == SampleMode::Common {
        sample_cols.extend(controls.iter().map(String::as_str));
    }
    let rows = regime_rows(panel, regime, sel, &sample_cols)?;
    if rows.is_empty() {
        return Err(Error::Insufficient(format!("no {} rows", sel.label())));
    }
    let mut cols = vec![(config.treatment.clone(), TREATMENT_LABEL.to_string())];
    if spec == Spec::B {
        cols.extend(controls.iter().map(|c| (c.clone(), c.clone())));
    }
    let x = sector_design(panel, &rows, &cols)?;
    let yv = panel.column(&crash)?;
    let y: Vec<f64> = rows.iter().map(|&i| yv[i].unwrap_or(f64::NAN)).collect();
    let clusters: Vec<i64> = rows
        .iter()
        .map(|&i| panel.rows()[i].month.index() as i64)
        .collect();
    fit_logit_clustered(&y, &x, &clusters, &config.logit)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegimeLogits {
    pub threshold: f64,
    pub sample: SampleMode,
    pub cells: Vec<LogitCell>,
}

/// Spec A and Spec B logits in stress and non-stress months. A failing cell
/// is recorded with its error and does not stop the others.
pub fn fit_regime_logits(
    panel: &PanelDataset,
    regime: &RegimeSeries,
    config: &CrashConfig,
) -> Result<RegimeLogits> {
    let panel = ensure_crash(panel, config.threshold)?;
    let mut cells = Vec::new();
    for spec in [Spec::A, Spec::B] {
        for sel in [RegimeSel::Stress, RegimeSel::NonStress] {
            let (fit, error) = match fit_cell(&panel, regime, config, spec, sel) {
                Ok(f) => (Some(f), None),
                Err(e) => (None, Some(e.to_string())),
            };
            cells.push(LogitCell {
                spec,
                regime: sel,
                threshold: config.threshold,
                sample: config.sample,
                fit,
                error,
            });
        }
    }
    Ok(RegimeLogits {
        threshold: config.threshold,
        sample: config.sample,
        cells,
    })
}

/// One line of the regime-logit table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogitRow {
    pub spec: Spec,
    pub regime: RegimeSel,
    pub threshold: f64,
    pub sample: SampleMode,
    pub beta: Option<f64>,
    pub se: Option<f64>,
    pub z: Option<f64>,
    pub p: Option<f64>,
    pub stars: String,
    pub or_1: Option<f64>,
    pub or_5: Option<f64>,
    pub n_obs: Option<usize>,
    pub n_clusters: Option<usize>,
    pub converged: bool,
    pub error: Option<String>,
}

impl RegimeLogits {
    pub fn rows(&self) -> Vec<LogitRow> {
        self.cells
            .iter()
            .map(|c| {
                let st = c.treatment_stats(TREATMENT_LABEL);
                let beta = st.map(|s| s.0);
                let ors = beta.map(|b| odds_ratios(b, &[1.0, 5.0]));
                LogitRow {
                    spec: c.spec,
                    regime: c.regime,
                    threshold: c.threshold,
                    sample: c.sample,
                    beta,
                    se: st.map(|s| s.1),
                    z: st.map(|s| s.2),
                    p: st.map(|s| s.3),
                    stars: st.map_or("", |s| stars(s.3)).to_string(),
                    or_1: ors.as_ref().map(|o| o[0]),
                    or_5: ors.as_ref().map(|o| o[1]),
                    n_obs: c.fit.as_ref().map(|f| f.n_obs),
                    n_clusters: c.fit.as_ref().and_then(|f| f.n_clusters),
                    converged: c.fit.as_ref().is_some_and(|f| f.converged),
                    error: c.error.clone(),
                }
            })
            .collect()
    }

    pub fn cell(&self, spec: Spec, regime: RegimeSel) -> Option<&LogitCell> {
        self.cells.iter().find(|c| c.spec == spec && c.regime == regime)
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Flat CSV of logit rows.
pub fn write_logit_csv<W: Write>(rows: &[LogitRow], w: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    w.write_record([
        "threshold", "sample", "spec", "regime", "beta", "se", "z", "p", "stars", "or_1", "or_5",
        "n_obs", "n_clusters", "converged", "error",
    ])?;
    for r in rows {
        w.write_record([
            r.threshold.to_string(),
            format!("{:?}", r.sample).to_lowercase(),
            format!("{:?}", r.spec),
            r.regime.label().to_string(),
            opt(r.beta),
            opt(r.se),
            opt(r.z),
            opt(r.p),
            r.stars.clone(),
            opt(r.or_1),
            opt(r.or_5),
            r.n_obs.map(|v| v.to_string()).unwrap_or_default(),
            r.n_clusters.map(|v| v.to_string()).unwrap_or_default(),
            r.converged.to_string(),
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Bootstrap settings shared by the descriptive gap and the quantile table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootSettings {
    pub n_boot: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSection {
    pub threshold: f64,
    /// Descriptive crash rates and the Q1-Q5 gap (or the error).
    pub descriptives: Option<QuintileGap>,
    pub descriptives_error: Option<String>,
    pub logits: RegimeLogits,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSweep {
    pub schema_version: String,
    pub sections: Vec<SweepSection>,
}

/// Descriptives and regime logits at each threshold, with the stress
/// classification held fixed.
pub fn threshold_sweep(
    panel: &PanelDataset,
    regime: &RegimeSeries,
    grid: &[f64],
    base: &CrashConfig,
    boot: &BootSettings,
) -> Result<ThresholdSweep> {
    let mut sections = Vec::new();
    for &c in grid {
        let panel = ensure_crash(panel, c)?;
        let config = CrashConfig {
            threshold: c,
            ..base.clone()
        };
        let (descriptives, descriptives_error) = match quintile_gap(&panel, regime, &config, boot) {
            Ok(q) => (Some(q), None),
            Err(e) => (None, Some(e.to_string())),
        };
        sections.push(SweepSection {
            threshold: c,
            descriptives,
            descriptives_error,
            logits: fit_regime_logits(&panel, regime, &config)?,
        });
    }
    Ok(ThresholdSweep {
        schema_version: crate::SCHEMA_VERSION.into(),
        sections,
    })
}

