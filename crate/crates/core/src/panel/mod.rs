//! Firm-month panel: data model, variable construction, lagging, filtering
//! and standardization.

mod io;
mod returns;

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::month::Month;
use crate::regime::RegimeSeries;
use crate::stats::{self, QuantileConvention};

pub use io::{read_panel_csv, read_panel_path, write_panel_csv};
pub use returns::{compound_monthly_returns, daily_returns_by_month, DailyPrice, MonthlyReturn, RejectedPrice};

/// Raw fundamentals used to build the firm controls.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Fundamentals {
    pub at: Option<f64>,
    pub dltt: Option<f64>,
    pub ib: Option<f64>,
    pub capx: Option<f64>,
    pub ppent: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FirmMonthRow {
    pub firm_id: String,
    pub month: Month,
    pub ret: Option<f64>,
    pub esg: Option<f64>,
    pub e_score: Option<f64>,
    pub s_score: Option<f64>,
    pub g_score: Option<f64>,
    pub volume_usd: Option<f64>,
    /// Realized volatility of daily returns within the month.
    pub sigma: Option<f64>,
    pub fundamentals: Fundamentals,
    pub sector: Option<String>,
}

impl FirmMonthRow {
    pub fn new(firm_id: impl Into<String>, month: Month) -> Self {
        FirmMonthRow {
            firm_id: firm_id.into(),
            month,
            ret: None,
            esg: None,
            e_score: None,
            s_score: None,
            g_score: None,
            volume_usd: None,
            sigma: None,
            fundamentals: Fundamentals::default(),
            sector: None,
        }
    }

    fn base_value(&self, name: &str) -> Option<Option<f64>> {
        let f = &self.fundamentals;
        Some(match name {
            "ret" => self.ret,
            "esg" => self.esg,
            "e_score" => self.e_score,
            "s_score" => self.s_score,
            "g_score" => self.g_score,
            "volume_usd" => self.volume_usd,
            "sigma" => self.sigma,
            "at" => f.at,
            "dltt" => f.dltt,
            "ib" => f.ib,
            "capx" => f.capx,
            "ppent" => f.ppent,
            _ => return None,
        })
    }
}

/// Names of the numeric columns carried on every row.
pub const BASE_COLUMNS: [&str; 12] = [
    "ret", "esg", "e_score", "s_score", "g_score", "volume_usd", "sigma", "at", "dltt", "ib", "capx",
    "ppent",
];

/// Derived control names, in construction order.
pub const CONTROL_NAMES: [&str; 5] = ["log_at", "lev", "prof", "inv", "tang"];

/// Name of the excess-return column.
pub const EXCESS_RETURN: &str = "ret_ex";

/// Name given to `column` lagged by `lag` months.
pub fn lagged_name(column: &str, lag: u32) -> String {
    format!("{column}_lag{lag}")
}

/// Name of the crash indicator column for threshold `c`.
pub fn crash_column(c: f64) -> String {
    format!("crash_{:03}", (c * 100.0).round() as i64)
}

/// Tidy firm-month table plus named derived columns.
#[derive(Clone, Debug, PartialEq)]
pub struct PanelDataset {
    rows: Vec<FirmMonthRow>,
    months: Vec<Month>,
    derived: BTreeMap<String, Vec<Option<f64>>>,
    controls: Vec<String>,
}

impl PanelDataset {
    /// Validates and sorts rows by (firm, month).
    pub fn new(mut rows: Vec<FirmMonthRow>) -> Result<Self> {
        for r in &rows {
            if let Some(v) = r.ret {
                if !v.is_finite() {
                    return Err(Error::invalid(format!(
                        "non-finite return for {} {}",
                        r.firm_id, r.month
                    )));
                }
            }
            if let Some(v) = r.volume_usd {
                if !(v >= 0.0) {
                    return Err(Error::invalid(format!(
                        "negative volume for {} {}",
                        r.firm_id, r.month
                    )));
                }
            }
        }
        rows.sort_by(|a, b| a.firm_id.cmp(&b.firm_id).then(a.month.cmp(&b.month)));
        for w in rows.windows(2) {
            if w[0].firm_id == w[1].firm_id && w[0].month == w[1].month {
                return Err(Error::invalid(format!(
                    "duplicate firm-month {} {}",
                    w[0].firm_id, w[0].month
                )));
            }
        }
        let months: BTreeSet<Month> = rows.iter().map(|r| r.month).collect();
        Ok(PanelDataset {
            rows,
            months: months.into_iter().collect(),
            derived: BTreeMap::new(),
            controls: Vec::new(),
        })
    }

    pub fn rows(&self) -> &[FirmMonthRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn months(&self) -> &[Month] {
        &self.months
    }

    /// Active control columns (derived, possibly standardized).
    pub fn controls(&self) -> &[String] {
        &self.controls
    }

    pub fn derived_names(&self) -> impl Iterator<Item = &str> {
        self.derived.keys().map(String::as_str)
    }

    pub fn has_column(&self, name: &str) -> bool {
        self.derived.contains_key(name) || BASE_COLUMNS.contains(&name)
    }

    /// Values of a base or derived column, one entry per row.
    pub fn column(&self, name: &str) -> Result<Vec<Option<f64>>> {
        if let Some(d) = self.derived.get(name) {
            return Ok(d.clone());
        }
        if BASE_COLUMNS.contains(&name) {
            return Ok(self
                .rows
                .iter()
                .map(|r| r.base_value(name).flatten())
                .collect());
        }
        Err(Error::UnknownColumn(name.to_string()))
    }

    pub fn sectors(&self) -> Vec<Option<&str>> {
        self.rows.iter().map(|r| r.sector.as_deref()).collect()
    }

    /// Adds or replaces a derived column.
    pub fn set_derived(&mut self, name: impl Into<String>, values: Vec<Option<f64>>) {
        assert_eq!(values.len(), self.rows.len(), "derived column length");
        self.derived.insert(name.into(), values);
    }

    pub fn set_controls(&mut self, names: Vec<String>) {
        self.controls = names;
    }

    /// Row indices grouped by firm; each group is in month order.
    pub fn firm_groups(&self) -> Vec<std::ops::Range<usize>> {
        let mut out = Vec::new();
        let mut start = 0;
        for i in 1..=self.rows.len() {
            if i == self.rows.len() || self.rows[i].firm_id != self.rows[start].firm_id {
                out.push(start..i);
                start = i;
            }
        }
        out
    }

    /// Row indices grouped by month.
    pub fn month_groups(&self) -> BTreeMap<Month, Vec<usize>> {
        let mut out: BTreeMap<Month, Vec<usize>> = BTreeMap::new();
        for (i, r) in self.rows.iter().enumerate() {
            out.entry(r.month).or_default().push(i);
        }
        out
    }

    /// Keeps only rows whose month is in `months`.
    pub fn restrict_months(&self, months: &BTreeSet<Month>) -> PanelDataset {
        self.filter_rows(|r| months.contains(&r.month))
    }

    pub fn filter_rows(&self, keep: impl Fn(&FirmMonthRow) -> bool) -> PanelDataset {
        let idx: Vec<usize> = (0..self.rows.len()).filter(|&i| keep(&self.rows[i])).collect();
        self.select_rows(&idx)
    }

    /// Subset by row index (indices must be increasing).
    pub fn select_rows(&self, idx: &[usize]) -> PanelDataset {
        let rows: Vec<FirmMonthRow> = idx.iter().map(|&i| self.rows[i].clone()).collect();
        let derived = self
            .derived
            .iter()
            .map(|(k, v)| (k.clone(), idx.iter().map(|&i| v[i]).collect()))
            .collect();
        let months: BTreeSet<Month> = rows.iter().map(|r| r.month).collect();
        PanelDataset {
            rows,
            months: months.into_iter().collect(),
            derived,
            controls: self.controls.clone(),
        }
    }

    /// Indices of rows where every listed column is present.
    pub fn complete_rows(&self, columns: &[&str]) -> Result<Vec<usize>> {
        let cols: Vec<Vec<Option<f64>>> =
            columns.iter().map(|c| self.column(c)).collect::<Result<_>>()?;
        Ok((0..self.rows.len())
            .filter(|&i| cols.iter().all(|c| c[i].is_some()))
            .collect())
    }
}

/// Appends `log_at`, `lev`, `prof`, `inv`, `tang` and marks them as the
/// active controls. Rows with missing or non-positive `at` get missing
/// controls.
pub fn derive_controls(panel: &PanelDataset) -> PanelDataset {
    let mut out = panel.clone();
    let n = panel.len();
    let mut cols: Vec<Vec<Option<f64>>> = vec![Vec::with_capacity(n); CONTROL_NAMES.len()];
    for r in &panel.rows {
        let f = &r.fundamentals;
        let at = f.at.filter(|&a| a > 0.0);
        let ratio = |num: Option<f64>| at.and_then(|a| num.map(|v| v / a));
        cols[0].push(at.map(f64::ln));
        cols[1].push(ratio(f.dltt));
        cols[2].push(ratio(f.ib));
        cols[3].push(ratio(f.capx));
        cols[4].push(ratio(f.ppent));
    }
    for (name, col) in CONTROL_NAMES.iter().zip(cols) {
        out.set_derived(*name, col);
    }
    out.controls = CONTROL_NAMES.iter().map(|s| s.to_string()).collect();
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnReport {
    pub column: String,
    pub missing_rate: f64,
    pub kept: bool,
}

/// Drops control columns whose panel-wide missing fraction is at least
/// `threshold`. Columns strictly below the threshold are kept.
pub fn filter_by_missing_rate(
    panel: &PanelDataset,
    threshold: f64,
) -> Result<(PanelDataset, Vec<ColumnReport>)> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::invalid(format!(
            "missing-rate threshold {threshold} outside (0, 1]"
        )));
    }
    let mut out = panel.clone();
    let mut report = Vec::new();
    let mut kept = Vec::new();
    for name in &panel.controls {
        let col = panel.column(name)?;
        let missing = col.iter().filter(|v| v.is_none()).count();
        let rate = if col.is_empty() {
            1.0
        } else {
            missing as f64 / col.len() as f64
        };
        let keep = rate < threshold;
        if keep {
            kept.push(name.clone());
        } else {
            out.derived.remove(name);
        }
        report.push(ColumnReport {
            column: name.clone(),
            missing_rate: rate,
            kept: keep,
        });
    }
    out.controls = kept;
    Ok((out, report))
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StandardizeMode {
    /// Winsorize within each month, z-score over the pooled panel.
    #[default]
    PooledZ,
    /// Winsorize and z-score within each month.
    PerMonth,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StandardizeOptions {
    pub lower_pct: f64,
    pub upper_pct: f64,
    pub mode: StandardizeMode,
}

impl Default for StandardizeOptions {
    fn default() -> Self {
        StandardizeOptions {
            lower_pct: 0.01,
            upper_pct: 0.99,
            mode: StandardizeMode::PooledZ,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnTransform {
    pub column: String,
    /// Pooled mean and sd after winsorization (per-month mode records the
    /// pooled values for reference only).
    pub mean: f64,
    pub sd: f64,
    pub n_clamped: usize,
    pub degenerate: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StandardizeReport {
    pub options: StandardizeOptions,
    pub columns: Vec<ColumnTransform>,
}

/// Lower/upper winsorization bounds for one month's values. The bounds are
/// order statistics: the `ceil(p n)`-th smallest and its mirror from the top.
fn winsor_bounds(values: &[f64], lower: f64, upper: f64) -> (f64, f64) {
    let s = stats::sorted(values);
    let n = s.len();
    let lo = stats::quantile_sorted(&s, lower, QuantileConvention::LowerEmpirical);
    let k_hi = stats::lower_rank(1.0 - upper, n);
    let hi = s[n - k_hi];
    (lo, hi)
}

fn zscore_in_place(values: &mut [Option<f64>], idx: &[usize]) -> (f64, f64, bool) {
    let present: Vec<f64> = idx.iter().filter_map(|&i| values[i]).collect();
    if present.is_empty() {
        return (f64::NAN, f64::NAN, true);
    }
    let m = stats::mean(&present);
    let sd = stats::sample_sd(&present);
    let degenerate = !(sd > 1e-12 * m.abs().max(1.0)) || !sd.is_finite();
    let scale = if degenerate { 1.0 } else { sd };
    for &i in idx {
        if let Some(v) = values[i].as_mut() {
            *v = (*v - m) / scale;
        }
    }
    (m, if degenerate { 1.0 } else { sd }, degenerate)
}

/// Winsorizes each control within month and rescales to mean zero and unit
/// sample standard deviation. Zero-variance columns are centered with scale 1
/// and flagged.
pub fn standardize_controls(
    panel: &PanelDataset,
    opts: &StandardizeOptions,
) -> Result<(PanelDataset, StandardizeReport)> {
    if !(0.0..0.5).contains(&opts.lower_pct) || !(0.5..=1.0).contains(&opts.upper_pct) {
        return Err(Error::invalid("winsorization percentiles out of range"));
    }
    let mut out = panel.clone();
    let groups = panel.month_groups();
    let all: Vec<usize> = (0..panel.len()).collect();
    let mut columns = Vec::new();
    for name in &panel.controls {
        let mut col = panel.column(name)?;
        let mut n_clamped = 0;
        for idx in groups.values() {
            let vals: Vec<f64> = idx.iter().filter_map(|&i| col[i]).collect();
            if vals.is_empty() {
                continue;
            }
            let (lo, hi) = winsor_bounds(&vals, opts.lower_pct, opts.upper_pct);
            for &i in idx {
                if let Some(v) = col[i].as_mut() {
                    if *v < lo {
                        *v = lo;
                        n_clamped += 1;
                    } else if *v > hi {
                        *v = hi;
                        n_clamped += 1;
                    }
                }
            }
        }
        let (mean, sd, mut degenerate) = {
            let present: Vec<f64> = col.iter().flatten().copied().collect();
            let m = stats::mean(&present);
            let sd = stats::sample_sd(&present);
            (m, sd, !(sd > 1e-12 * m.abs().max(1.0)))
        };
        match opts.mode {
            StandardizeMode::PooledZ => {
                let (_, _, d) = zscore_in_place(&mut col, &all);
                degenerate = d;
            }
            StandardizeMode::PerMonth => {
                for idx in groups.values() {
                    zscore_in_place(&mut col, idx);
                }
            }
        }
        out.set_derived(name.clone(), col);
        columns.push(ColumnTransform {
            column: name.clone(),
            mean,
            sd: if degenerate { 1.0 } else { sd },
            n_clamped,
            degenerate,
        });
    }
    Ok((
        out,
        StandardizeReport {
            options: opts.clone(),
            columns,
        },
    ))
}

/// Lags each column by `lag` calendar months within firm. The lagged value
/// at month `t` is the firm's value at `t - lag`; gaps in the firm's months
/// yield missing values. Results are stored as `<column>_lag<lag>`.
pub fn lag_columns(panel: &PanelDataset, columns: &[&str], lag: u32) -> Result<PanelDataset> {
    if lag < 1 {
        return Err(Error::invalid("lag must be at least 1"));
    }
    let mut out = panel.clone();
    let groups = panel.firm_groups();
    for &name in columns {
        let col = panel.column(name)?;
        let mut lagged = vec![None; panel.len()];
        for g in &groups {
            let by_month: HashMap<Month, Option<f64>> =
                g.clone().map(|i| (panel.rows[i].month, col[i])).collect();
            for i in g.clone() {
                let target = panel.rows[i].month.offset(-(lag as i32));
                lagged[i] = by_month.get(&target).copied().flatten();
            }
        }
        out.set_derived(lagged_name(name, lag), lagged);
    }
    Ok(out)
}

/// Adds `ret_ex = ret - r_m` using the market return of the row's month.
pub fn compute_excess_returns(panel: &PanelDataset, market: &RegimeSeries) -> Result<PanelDataset> {
    let lookup: HashMap<Month, f64> = market
        .months
        .iter()
        .copied()
        .zip(market.market_return.iter().copied())
        .collect();
    let mut col = Vec::with_capacity(panel.len());
    for r in &panel.rows {
        let rm = lookup.get(&r.month).ok_or_else(|| {
            Error::invalid(format!("month {} absent from market series", r.month))
        })?;
        col.push(r.ret.map(|v| v - rm));
    }
    let mut out = panel.clone();
    out.set_derived(EXCESS_RETURN, col);
    Ok(out)
}

/// One-hot sector encoding with the lexicographically smallest label as
/// the omitted reference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SectorEncoding {
    pub reference: Option<String>,
    /// Non-reference labels; column `j` is the indicator of `levels[j]`.
    pub levels: Vec<String>,
    /// Raised when only one sector is present (no indicator columns).
    pub single_sector: bool,
}

impl SectorEncoding {
    pub fn column_names(&self) -> Vec<String> {
        self.levels.iter().map(|l| format!("sector[{l}]")).collect()
    }

    pub fn indicators(&self, label: &str) -> Vec<f64> {
        self.levels
            .iter()
            .map(|l| if l == label { 1.0 } else { 0.0 })
            .collect()
    }
}

/// Builds the sector encoding over the given rows (all rows when `None`).
pub fn encode_sectors(panel: &PanelDataset, rows: Option<&[usize]>) -> Result<SectorEncoding> {
    let mut labels = BTreeSet::new();
    let mut visit = |i: usize| -> Result<()> {
        let r = &panel.rows[i];
        let s = r.sector.as_ref().ok_or_else(|| {
            Error::invalid(format!("missing sector for {} {}", r.firm_id, r.month))
        })?;
        labels.insert(s.clone());
        Ok(())
    };
    match rows {
        Some(idx) => idx.iter().try_for_each(|&i| visit(i))?,
        None => (0..panel.len()).try_for_each(&mut visit)?,
    }
    let mut it = labels.into_iter();
    let reference = it.next();
    let levels: Vec<String> = it.collect();
    Ok(SectorEncoding {
        single_sector: reference.is_some() && levels.is_empty(),
        reference,
        levels,
    })
}

