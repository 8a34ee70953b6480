use std::collections::BTreeMap;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::month::Month;

#[derive(Clone, Debug, PartialEq)]
pub struct DailyPrice {
    pub firm_id: String,
    pub date: NaiveDate,
    /// Close adjusted for corporate actions.
    pub price: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonthlyReturn {
    pub firm_id: String,
    pub month: Month,
    pub ret: Option<f64>,
    pub n_days: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RejectedPrice {
    pub firm_id: String,
    pub date: String,
    pub reason: String,
}

fn month_of(d: NaiveDate) -> Month {
    Month::new(d.year(), d.month()).expect("chrono month in range")
}

/// Daily simple returns of one firm's sorted price series, bucketed by the
/// month of the later observation. The first observation has no return.
pub fn daily_returns_by_month(series: &[(NaiveDate, f64)]) -> BTreeMap<Month, Vec<f64>> {
    let mut out: BTreeMap<Month, Vec<f64>> = BTreeMap::new();
    for w in series.windows(2) {
        out.entry(month_of(w[1].0))
            .or_default()
            .push(w[1].1 / w[0].1 - 1.0);
    }
    out
}

/// Compounds daily returns into monthly returns, per firm. Months with fewer
/// than `min_days` price observations are reported with a missing return.
/// Non-positive prices are dropped and reported.
pub fn compound_monthly_returns(
    prices: &[DailyPrice],
    min_days: usize,
) -> (Vec<MonthlyReturn>, Vec<RejectedPrice>) {
    let mut rejected = Vec::new();
    let mut by_firm: BTreeMap<&str, Vec<(NaiveDate, f64)>> = BTreeMap::new();
    for p in prices {
        if !(p.price > 0.0) || !p.price.is_finite() {
            rejected.push(RejectedPrice {
                firm_id: p.firm_id.clone(),
                date: p.date.to_string(),
                reason: format!("non-positive price {}", p.price),
            });
            continue;
        }
        by_firm.entry(&p.firm_id).or_default().push((p.date, p.price));
    }
    let mut out = Vec::new();
    for (firm, mut series) in by_firm {
        series.sort_by_key(|s| s.0);
        let mut days: BTreeMap<Month, usize> = BTreeMap::new();
        for (d, _) in &series {
            *days.entry(month_of(*d)).or_default() += 1;
        }
        let rets = daily_returns_by_month(&series);
        for (month, n_days) in days {
            let ret = rets.get(&month).and_then(|r| {
                (n_days >= min_days && !r.is_empty())
                    .then(|| r.iter().fold(1.0, |acc, x| acc * (1.0 + x)) - 1.0)
            });
            out.push(MonthlyReturn {
                firm_id: firm.to_string(),
                month,
                ret,
                n_days,
            });
        }
    }
    (out, rejected)
}
