use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{regime_rows, BootSettings, CrashConfig};
use crate::error::{Error, Result};
use crate::month::Month;
use crate::panel::{crash_column, PanelDataset};
use crate::quantile::{replicate_rows, MonthBlockBootstrap};
use crate::regime::{RegimeSel, RegimeSeries};
use crate::stats::{self, percentile_ci, QuantileConvention};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuintileRate {
    pub quintile: usize,
    pub n_stress: usize,
    pub stress_rate: Option<f64>,
    pub n_non_stress: usize,
    pub non_stress_rate: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuintileGap {
    pub threshold: f64,
    /// Upper bounds of quintiles 1-4 over the pooled estimation sample.
    pub cutpoints: Vec<f64>,
    pub stress_rate: f64,
    pub non_stress_rate: f64,
    pub quintiles: Vec<QuintileRate>,
    /// Stress-month crash rate of Q1 minus Q5, in percentage points.
    pub gap_pp: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub n_boot: usize,
    pub n_failed: usize,
}

fn quintile_of(v: f64, cuts: &[f64]) -> usize {
    cuts.iter().filter(|&&c| v > c).count()
}

/// Stress-month Q1-Q5 gap from rows `(quintile, crash, stress)`.
fn gap(rows: &[usize], q: &[usize], crash: &[f64], stress: &[bool]) -> Option<f64> {
    let mut n = [0usize; 5];
    let mut k = [0.0f64; 5];
    for &i in rows {
        if stress[i] {
            n[q[i]] += 1;
            k[q[i]] += crash[i];
        }
    }
    (n[0] > 0 && n[4] > 0).then(|| 100.0 * (k[0] / n[0] as f64 - k[4] / n[4] as f64))
}

/// Crash rates by ESG quintile and the stress-month Q1-Q5 gap with a
/// percentile interval from the stratified month-block bootstrap.
/// Quintiles are formed once over the pooled estimation sample.
pub fn quintile_gap(
    panel: &PanelDataset,
    regime: &RegimeSeries,
    config: &CrashConfig,
    boot: &BootSettings,
) -> Result<QuintileGap> {
    let crash_col = crash_column(config.threshold);
    let rows = regime_rows(
        panel,
        regime,
        RegimeSel::All,
        &[crash_col.as_str(), config.treatment.as_str()],
    )?;
    let esg_col = panel.column(&config.treatment)?;
    let crash_all = panel.column(&crash_col)?;
    let esg: Vec<f64> = rows.iter().map(|&i| esg_col[i].unwrap_or(f64::NAN)).collect();
    let distinct: BTreeSet<u64> = esg.iter().map(|v| v.to_bits()).collect();
    if distinct.len() < 5 {
        return Err(Error::Insufficient(format!(
            "{} distinct treatment values; need at least 5",
            distinct.len()
        )));
    }
    let sorted = stats::sorted(&esg);
    let cutpoints: Vec<f64> = (1..5)
        .map(|k| stats::quantile_sorted(&sorted, k as f64 / 5.0, QuantileConvention::LowerEmpirical))
        .collect();
    let flags = regime.flag_map();
    let q: Vec<usize> = esg.iter().map(|&v| quintile_of(v, &cutpoints)).collect();
    let crash: Vec<f64> = rows.iter().map(|&i| crash_all[i].unwrap_or(0.0)).collect();
    let stress: Vec<bool> = rows.iter().map(|&i| flags[&panel.rows()[i].month]).collect();

    let mut quintiles: Vec<QuintileRate> = (0..5)
        .map(|k| QuintileRate {
            quintile: k + 1,
            n_stress: 0,
            stress_rate: None,
            n_non_stress: 0,
            non_stress_rate: None,
        })
        .collect();
    let mut sums = [[0.0f64; 2]; 5];
    for j in 0..rows.len() {
        let e = &mut quintiles[q[j]];
        if stress[j] {
            e.n_stress += 1;
            sums[q[j]][0] += crash[j];
        } else {
            e.n_non_stress += 1;
            sums[q[j]][1] += crash[j];
        }
    }
    for (e, s) in quintiles.iter_mut().zip(&sums) {
        e.stress_rate = (e.n_stress > 0).then(|| s[0] / e.n_stress as f64);
        e.non_stress_rate = (e.n_non_stress > 0).then(|| s[1] / e.n_non_stress as f64);
    }
    let rate = |want: bool| {
        let (k, n) = (0..rows.len())
            .filter(|&j| stress[j] == want)
            .fold((0.0, 0usize), |(k, n), j| (k + crash[j], n + 1));
        if n > 0 { k / n as f64 } else { f64::NAN }
    };
    let local: Vec<usize> = (0..rows.len()).collect();
    let gap_pp = gap(&local, &q, &crash, &stress)
        .ok_or_else(|| Error::Insufficient("Q1 or Q5 has no stress-month rows".into()))?;

    let mut month_rows: BTreeMap<Month, Vec<usize>> = BTreeMap::new();
    for (j, &i) in rows.iter().enumerate() {
        month_rows.entry(panel.rows()[i].month).or_default().push(j);
    }
    let months: BTreeSet<Month> = month_rows.keys().copied().collect();
    let bs = MonthBlockBootstrap::new(&months, regime, boot.seed)?;
    let reps: Vec<Option<f64>> = (0..boot.n_boot)
        .into_par_iter()
        .map(|r| gap(&replicate_rows(&month_rows, &bs.replicate(r)), &q, &crash, &stress))
        .collect();
    let ok: Vec<f64> = reps.iter().flatten().copied().collect();
    let (ci_lower, ci_upper) = percentile_ci(&ok, 0.95).unwrap_or((f64::NAN, f64::NAN));
    Ok(QuintileGap {
        threshold: config.threshold,
        cutpoints,
        stress_rate: rate(true),
        non_stress_rate: rate(false),
        quintiles,
        gap_pp,
        ci_lower,
        ci_upper,
        n_boot: boot.n_boot,
        n_failed: reps.len() - ok.len(),
    })
}
