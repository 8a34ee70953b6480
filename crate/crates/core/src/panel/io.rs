use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use chrono::NaiveDate;

use super::returns::{compound_monthly_returns, daily_returns_by_month, DailyPrice};
use super::{FirmMonthRow, Fundamentals, PanelDataset};
use crate::error::{Error, Result};
use crate::month::Month;
use crate::regime::realized_vol;

/// Minimum price observations for a monthly return built from daily prices.
pub const MIN_TRADING_DAYS: usize = 10;

struct Header {
    idx: BTreeMap<String, usize>,
}

impl Header {
    fn get(&self, name: &str) -> Option<usize> {
        self.idx.get(name).copied()
    }

    fn require(&self, name: &str) -> Result<usize> {
        self.get(name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    }
}

fn num(rec: &csv::StringRecord, col: Option<usize>, line: u64, name: &str) -> Result<Option<f64>> {
    let Some(c) = col else { return Ok(None) };
    let s = rec.get(c).unwrap_or("").trim();
    if s.is_empty() {
        return Ok(None);
    }
    let v: f64 = s
        .parse()
        .map_err(|_| Error::invalid(format!("line {line}: column {name}: `{s}` is not a number")))?;
    if !v.is_finite() {
        return Err(Error::invalid(format!("line {line}: column {name}: non-finite value")));
    }
    Ok(Some(v))
}

fn text(rec: &csv::StringRecord, col: Option<usize>) -> Option<String> {
    col.and_then(|c| rec.get(c))
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
}

/// Reads a panel CSV.
///
/// Two layouts are accepted. With a `ret` column every row is a firm-month
/// and `sigma` (within-month realized volatility) must be supplied. With a
/// `price` column instead, rows are daily observations dated `yyyy-mm-dd`;
/// monthly returns are compounded, `sigma` is the realized volatility of
/// the month's daily returns, dollar volume is summed over the month and
/// the remaining fields take the month's last non-missing value.
pub fn read_panel_csv<R: Read>(reader: R) -> Result<PanelDataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = Header {
        idx: rdr
            .headers()?
            .iter()
            .enumerate()
            .map(|(i, h)| (h.to_string(), i))
            .collect(),
    };
    let firm_c = header.require("firm_id")?;
    let date_c = header.require("date")?;
    let daily = header.get("ret").is_none() && header.get("price").is_some();
    if !daily {
        header.require("ret")?;
    }
    header.require("volume_usd")?;
    header.require("esg")?;
    header.require("sector")?;
    if !daily {
        header.require("sigma")?;
    }

    let mut rows = Vec::new();
    let mut prices = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = k as u64 + 2;
        let firm = text(&rec, Some(firm_c))
            .ok_or_else(|| Error::invalid(format!("line {line}: empty firm_id")))?;
        let date_s = rec.get(date_c).unwrap_or("").trim();
        let month = Month::parse(date_s)
            .map_err(|e| Error::invalid(format!("line {line}: {e}")))?;
        let mut row = FirmMonthRow::new(firm.clone(), month);
        let g = |n: &str| num(&rec, header.get(n), line, n);
        row.ret = g("ret")?;
        row.esg = g("esg")?;
        row.e_score = g("e_score")?;
        row.s_score = g("s_score")?;
        row.g_score = g("g_score")?;
        row.volume_usd = g("volume_usd")?;
        row.sigma = g("sigma")?;
        row.fundamentals = Fundamentals {
            at: g("at")?,
            dltt: g("dltt")?,
            ib: g("ib")?,
            capx: g("capx")?,
            ppent: g("ppent")?,
        };
        row.sector = text(&rec, header.get("sector"));
        if daily {
            let date = NaiveDate::parse_from_str(date_s, "%Y-%m-%d").map_err(|_| {
                Error::invalid(format!("line {line}: daily rows need yyyy-mm-dd dates"))
            })?;
            if let Some(p) = g("price")? {
                prices.push(DailyPrice {
                    firm_id: firm,
                    date,
                    price: p,
                });
            }
            rows.push((date, row));
        } else {
            rows.push((NaiveDate::MIN, row));
        }
    }
    if !daily {
        return PanelDataset::new(rows.into_iter().map(|(_, r)| r).collect());
    }
    aggregate_daily(rows, &prices)
}

fn aggregate_daily(mut rows: Vec<(NaiveDate, FirmMonthRow)>, prices: &[DailyPrice]) -> Result<PanelDataset> {
    let (monthly, rejected) = compound_monthly_returns(prices, MIN_TRADING_DAYS);
    if let Some(r) = rejected.first() {
        return Err(Error::invalid(format!(
            "{} rejected price rows; first: {} {} ({})",
            rejected.len(),
            r.firm_id,
            r.date,
            r.reason
        )));
    }
    let rets: BTreeMap<(String, Month), Option<f64>> = monthly
        .into_iter()
        .map(|m| ((m.firm_id, m.month), m.ret))
        .collect();
    let mut vols: BTreeMap<(String, Month), Option<f64>> = BTreeMap::new();
    let mut by_firm: BTreeMap<&str, Vec<(NaiveDate, f64)>> = BTreeMap::new();
    for p in prices {
        by_firm.entry(&p.firm_id).or_default().push((p.date, p.price));
    }
    for (firm, mut series) in by_firm {
        series.sort_by_key(|s| s.0);
        for (m, r) in daily_returns_by_month(&series) {
            vols.insert((firm.to_string(), m), realized_vol(&r).sigma);
        }
    }

    rows.sort_by(|a, b| a.1.firm_id.cmp(&b.1.firm_id).then(a.0.cmp(&b.0)));
    let mut out: Vec<FirmMonthRow> = Vec::new();
    for (_, r) in rows {
        let same = out
            .last()
            .is_some_and(|l| l.firm_id == r.firm_id && l.month == r.month);
        if !same {
            let mut base = FirmMonthRow::new(r.firm_id.clone(), r.month);
            let key = (r.firm_id.clone(), r.month);
            base.ret = rets.get(&key).copied().flatten();
            base.sigma = vols.get(&key).copied().flatten();
            out.push(base);
        }
        let m = out.last_mut().expect("pushed above");
        if let Some(v) = r.volume_usd {
            m.volume_usd = Some(m.volume_usd.unwrap_or(0.0) + v);
        }
        if r.sigma.is_some() {
            m.sigma = r.sigma;
        }
        macro_rules! last {
            ($($f:ident).+) => {
                if r.$($f).+.is_some() {
                    m.$($f).+ = r.$($f).+.clone();
                }
            };
        }
        last!(esg);
        last!(e_score);
        last!(s_score);
        last!(g_score);
        last!(sector);
        last!(fundamentals.at);
        last!(fundamentals.dltt);
        last!(fundamentals.ib);
        last!(fundamentals.capx);
        last!(fundamentals.ppent);
    }
    PanelDataset::new(out)
}

pub fn read_panel_path(path: &Path) -> Result<PanelDataset> {
    let f = std::fs::File::open(path)?;
    read_panel_csv(std::io::BufReader::new(f))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes the monthly layout read by [`read_panel_csv`].
pub fn write_panel_csv<W: Write>(panel: &PanelDataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "firm_id", "date", "ret", "volume_usd", "sigma", "esg", "e_score", "s_score", "g_score",
        "at", "dltt", "ib", "capx", "ppent", "sector",
    ])?;
    for r in panel.rows() {
        let f = &r.fundamentals;
        w.write_record([
            r.firm_id.clone(),
            r.month.to_string(),
            fmt_opt(r.ret),
            fmt_opt(r.volume_usd),
            fmt_opt(r.sigma),
            fmt_opt(r.esg),
            fmt_opt(r.e_score),
            fmt_opt(r.s_score),
            fmt_opt(r.g_score),
            fmt_opt(f.at),
            fmt_opt(f.dltt),
            fmt_opt(f.ib),
            fmt_opt(f.capx),
            fmt_opt(f.ppent),
            r.sector.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
