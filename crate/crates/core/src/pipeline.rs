//! Preprocessing shared by every estimator: control construction, missing-
//! rate screening, standardization, lagging, regime classification, excess
//! returns and crash indicators.

use serde::{Deserialize, Serialize};

use crate::crash::crash_indicator;
use crate::error::Result;
use crate::panel::{
    compute_excess_returns, derive_controls, filter_by_missing_rate, lag_columns,
    standardize_controls, ColumnReport, PanelDataset, StandardizeOptions, StandardizeReport,
};
use crate::regime::{build_regime, MarketSeries, RegimeSeries, StressOptions};

/// Score columns lagged alongside the controls.
pub const SCORE_COLUMNS: [&str; 4] = ["esg", "e_score", "s_score", "g_score"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrepareOptions {
    pub missing_threshold: f64,
    pub standardize: StandardizeOptions,
    pub stress: StressOptions,
    pub min_firms: usize,
    pub crash_thresholds: Vec<f64>,
}

impl Default for PrepareOptions {
    fn default() -> Self {
        PrepareOptions {
            missing_threshold: 0.2,
            standardize: StandardizeOptions::default(),
            stress: StressOptions::default(),
            min_firms: 30,
            crash_thresholds: vec![0.15, 0.20, 0.25],
        }
    }
}

#[derive(Clone, Debug)]
pub struct Prepared {
    /// Restricted to months with a market return.
    pub panel: PanelDataset,
    pub market: MarketSeries,
    pub regime: RegimeSeries,
    pub missing: Vec<ColumnReport>,
    pub standardize: StandardizeReport,
}

pub fn prepare(raw: &PanelDataset, opts: &PrepareOptions) -> Result<Prepared> {
    let panel = derive_controls(raw);
    let (panel, missing) = filter_by_missing_rate(&panel, opts.missing_threshold)?;
    let (panel, standardize) = standardize_controls(&panel, &opts.standardize)?;
    let controls: Vec<String> = panel.controls().to_vec();
    let mut lag: Vec<&str> = SCORE_COLUMNS.to_vec();
    lag.extend(controls.iter().map(String::as_str));
    let panel = lag_columns(&panel, &lag, 1)?;
    let (market, regime) = build_regime(&panel, opts.min_firms, &opts.stress)?;
    let panel = panel.restrict_months(&regime.month_set());
    let mut panel = compute_excess_returns(&panel, &regime)?;
    for &c in &opts.crash_thresholds {
        panel = crash_indicator(&panel, c)?;
    }
    Ok(Prepared {
        panel,
        market,
        regime,
        missing,
        standardize,
    })
}
