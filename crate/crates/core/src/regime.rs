//! Volume/volatility weighted market return and the drawdown-based stress
//! regime.
//!
//! Each firm's weight for month `t` is `V^(1/3) / sigma` measured in month
//! `t - 1`, normalized over the firms with a return in `t` and a weight.
//! Stress months are those whose market return is at or below the
//! empirical lower quantile of the market-return series.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::month::Month;
use crate::panel::PanelDataset;
use crate::stats::{self, QuantileConvention};

pub const MIN_VOL_OBS: usize = 5;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VolFlag {
    TooFewObservations,
    ZeroVariance,
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolEstimate {
    pub sigma: Option<f64>,
    pub flag: Option<VolFlag>,
}

/// Sample standard deviation of one month's daily returns.
pub fn realized_vol(daily_returns: &[f64]) -> VolEstimate {
    if daily_returns.len() < MIN_VOL_OBS {
        return VolEstimate {
            sigma: None,
            flag: Some(VolFlag::TooFewObservations),
        };
    }
    let first = daily_returns[0];
    let sd = stats::sample_sd(daily_returns);
    if daily_returns.iter().all(|&r| r == first) || !(sd > 0.0) {
        return VolEstimate {
            sigma: None,
            flag: Some(VolFlag::ZeroVariance),
        };
    }
    VolEstimate {
        sigma: Some(sd),
        flag: None,
    }
}

/// Raw market weight `V^(1/3) / sigma`.
pub fn firm_weight(volume_usd: f64, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::invalid(format!("volatility must be positive, got {sigma}")));
    }
    if !(volume_usd >= 0.0) {
        return Err(Error::invalid(format!("volume must be non-negative, got {volume_usd}")));
    }
    Ok(volume_usd.cbrt() / sigma)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarketWeight {
    pub firm_id: String,
    /// Month whose return the weight applies to.
    pub month: Month,
    pub volume_usd: f64,
    pub sigma: f64,
    pub raw_weight: f64,
    pub normalized_weight: f64,
    /// Row index of the firm's month-`t` observation in the panel.
    pub row: usize,
}

/// Weights for every firm-month with a return and a valid prior-month
/// volume and volatility. Normalized weights sum to one within each month
/// (months whose raw weights are all zero keep zeros).
pub fn market_weights(panel: &PanelDataset) -> Result<Vec<MarketWeight>> {
    let rows = panel.rows();
    if rows.iter().all(|r| r.sigma.is_none()) {
        return Err(Error::MissingColumn("sigma".into()));
    }
    if rows.iter().all(|r| r.volume_usd.is_none()) {
        return Err(Error::MissingColumn("volume_usd".into()));
    }
    let mut out = Vec::new();
    for g in panel.firm_groups() {
        let by_month: HashMap<Month, usize> = g.clone().map(|i| (rows[i].month, i)).collect();
        for i in g {
            let r = &rows[i];
            if r.ret.is_none() {
                continue;
            }
            let Some(&prev) = by_month.get(&r.month.offset(-1)) else {
                continue;
            };
            let p = &rows[prev];
            let (Some(v), Some(s)) = (p.volume_usd, p.sigma) else {
                continue;
            };
            if !(s > 0.0) {
                continue;
            }
            out.push(MarketWeight {
                firm_id: r.firm_id.clone(),
                month: r.month,
                volume_usd: v,
                sigma: s,
                raw_weight: firm_weight(v, s)?,
                normalized_weight: 0.0,
                row: i,
            });
        }
    }
    let mut totals: BTreeMap<Month, f64> = BTreeMap::new();
    for w in &out {
        *totals.entry(w.month).or_default() += w.raw_weight;
    }
    for w in &mut out {
        let t = totals[&w.month];
        w.normalized_weight = if t > 0.0 { w.raw_weight / t } else { 0.0 };
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExcludedMonth {
    pub month: Month,
    pub n_eligible: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarketSeries {
    pub months: Vec<Month>,
    pub returns: Vec<f64>,
    pub n_firms: Vec<usize>,
    pub excluded: Vec<ExcludedMonth>,
}

/// Weighted market return per month. Months with fewer than `min_firms`
/// eligible firms (or zero total weight) are excluded and reported.
pub fn market_return(
    panel: &PanelDataset,
    weights: &[MarketWeight],
    min_firms: usize,
) -> Result<MarketSeries> {
    let rows = panel.rows();
    let mut acc: BTreeMap<Month, (f64, f64, usize)> = BTreeMap::new();
    for w in weights {
        let r = rows
            .get(w.row)
            .filter(|r| r.firm_id == w.firm_id && r.month == w.month)
            .ok_or_else(|| Error::invalid("weight does not match a panel row"))?;
        let Some(ret) = r.ret else { continue };
        let e = acc.entry(w.month).or_insert((0.0, 0.0, 0));
        e.0 += w.raw_weight * ret;
        e.1 += w.raw_weight;
        e.2 += 1;
    }
    let mut out = MarketSeries {
        months: Vec::new(),
        returns: Vec::new(),
        n_firms: Vec::new(),
        excluded: Vec::new(),
    };
    for &m in panel.months() {
        let (num, den, n) = acc.get(&m).copied().unwrap_or((0.0, 0.0, 0));
        if n < min_firms.max(1) || !(den > 0.0) {
            out.excluded.push(ExcludedMonth {
                month: m,
                n_eligible: n,
            });
            continue;
        }
        out.months.push(m);
        out.returns.push(num / den);
        out.n_firms.push(n);
    }
    if out.months.is_empty() {
        return Err(Error::Insufficient(format!(
            "no month has at least {min_firms} eligible firms"
        )));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StressOptions {
    pub level: f64,
    pub convention: QuantileConvention,
    pub min_months: usize,
}

impl Default for StressOptions {
    fn default() -> Self {
        StressOptions {
            level: 0.15,
            convention: QuantileConvention::LowerEmpirical,
            min_months: 20,
        }
    }
}

/// Per-month market return with the stress flag and the cutoff that
/// produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegimeSeries {
    pub months: Vec<Month>,
    pub market_return: Vec<f64>,
    pub stress: Vec<bool>,
    pub cutoff: f64,
    pub quantile_level: f64,
    pub convention: QuantileConvention,
    /// Raised when every month has the same market return.
    pub degenerate: bool,
}

impl RegimeSeries {
    pub fn n_months(&self) -> usize {
        self.months.len()
    }

    pub fn n_stress(&self) -> usize {
        self.stress.iter().filter(|&&s| s).count()
    }

    /// Flags recomputed from the stored cutoff.
    pub fn recompute_flags(&self) -> Vec<bool> {
        self.market_return.iter().map(|&r| r <= self.cutoff).collect()
    }

    pub fn flag_map(&self) -> HashMap<Month, bool> {
        self.months.iter().copied().zip(self.stress.iter().copied()).collect()
    }

    pub fn stress_months(&self) -> BTreeSet<Month> {
        self.months
            .iter()
            .zip(&self.stress)
            .filter(|(_, &s)| s)
            .map(|(m, _)| *m)
            .collect()
    }

    pub fn month_set(&self) -> BTreeSet<Month> {
        self.months.iter().copied().collect()
    }
}

/// Flags months whose market return is at or below the empirical
/// `level`-quantile of the series. Ties at the cutoff are stress months.
pub fn classify_stress(months: &[Month], returns: &[f64], opts: &StressOptions) -> Result<RegimeSeries> {
    if months.len() != returns.len() {
        return Err(Error::invalid("months and returns differ in length"));
    }
    if !(opts.level > 0.0 && opts.level < 0.5) {
        return Err(Error::invalid(format!("stress level {} outside (0, 0.5)", opts.level)));
    }
    if months.len() < opts.min_months {
        return Err(Error::Insufficient(format!(
            "{} months, need at least {}",
            months.len(),
            opts.min_months
        )));
    }
    if returns.iter().any(|r| !r.is_finite()) {
        return Err(Error::invalid("non-finite market return"));
    }
    let sorted = stats::sorted(returns);
    let cutoff = stats::quantile_sorted(&sorted, opts.level, opts.convention);
    let stress = returns.iter().map(|&r| r <= cutoff).collect();
    Ok(RegimeSeries {
        months: months.to_vec(),
        market_return: returns.to_vec(),
        stress,
        cutoff,
        quantile_level: opts.level,
        convention: opts.convention,
        degenerate: sorted.first() == sorted.last(),
    })
}

/// Weights, market return and stress classification in one step.
pub fn build_regime(
    panel: &PanelDataset,
    min_firms: usize,
    opts: &StressOptions,
) -> Result<(MarketSeries, RegimeSeries)> {
    let w = market_weights(panel)?;
    let market = market_return(panel, &w, min_firms)?;
    let regime = classify_stress(&market.months, &market.returns, opts)?;
    Ok((market, regime))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub stress_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StressMonth {
    pub month: Month,
    pub market_return: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegimeSummary {
    pub schema_version: String,
    pub cutoff: f64,
    pub level: f64,
    pub convention: QuantileConvention,
    pub n_months: usize,
    pub n_stress: usize,
    pub stress_share: f64,
    pub degenerate: bool,
    pub stress_months: Vec<StressMonth>,
    pub histogram: Vec<HistogramBin>,
}

pub fn regime_summary(regime: &RegimeSeries, bins: usize) -> RegimeSummary {
    let bins = bins.max(1);
    let lo = regime.market_return.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = regime.market_return.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut histogram: Vec<HistogramBin> = (0..bins)
        .map(|b| HistogramBin {
            lower: lo + b as f64 * width,
            upper: lo + (b + 1) as f64 * width,
            count: 0,
            stress_count: 0,
        })
        .collect();
    for (&r, &s) in regime.market_return.iter().zip(&regime.stress) {
        let b = (((r - lo) / width) as usize).min(bins - 1);
        histogram[b].count += 1;
        histogram[b].stress_count += s as usize;
    }
    let stress_months = regime
        .months
        .iter()
        .zip(&regime.market_return)
        .zip(&regime.stress)
        .filter(|(_, &s)| s)
        .map(|((&month, &market_return), _)| StressMonth {
            month,
            market_return,
        })
        .collect();
    let n = regime.n_months();
    RegimeSummary {
        schema_version: crate::SCHEMA_VERSION.into(),
        cutoff: regime.cutoff,
        level: regime.quantile_level,
        convention: regime.convention,
        n_months: n,
        n_stress: regime.n_stress(),
        stress_share: if n > 0 { regime.n_stress() as f64 / n as f64 } else { 0.0 },
        degenerate: regime.degenerate,
        stress_months,
        histogram,
    }
}

/// `month,market_return,stress` rows.
pub fn write_regime_csv<W: Write>(regime: &RegimeSeries, w: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    w.write_record(["month", "market_return", "stress"])?;
    for ((m, r), s) in regime.months.iter().zip(&regime.market_return).zip(&regime.stress) {
        w.write_record([m.to_string(), r.to_string(), (*s as u8).to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_histogram_csv<W: Write>(summary: &RegimeSummary, w: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    w.write_record(["lower", "upper", "count", "stress_count"])?;
    for b in &summary.histogram {
        w.write_record([
            b.lower.to_string(),
            b.upper.to_string(),
            b.count.to_string(),
            b.stress_count.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}


/// Which months an estimator uses.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegimeSel {
    Stress,
    NonStress,
    All,
}

impl RegimeSel {
    pub fn includes(self, stress: bool) -> bool {
        match self {
            RegimeSel::Stress => stress,
            RegimeSel::NonStress => !stress,
            RegimeSel::All => true,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            RegimeSel::Stress => "stress",
            RegimeSel::NonStress => "non_stress",
            RegimeSel::All => "all",
        }
    }
}
