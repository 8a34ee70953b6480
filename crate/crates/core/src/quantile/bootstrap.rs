//! Stratified month-block bootstrap: whole months are resampled with
//! replacement, separately within stress and non-stress months, so every
//! replicate keeps the regime composition of the original sample.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;

use crate::error::{Error, Result};
use crate::month::Month;
use crate::regime::RegimeSeries;
use crate::rng::stream_rng;

#[derive(Clone, Debug)]
pub struct MonthBlockBootstrap {
    stress: Vec<Month>,
    non_stress: Vec<Month>,
    seed: u64,
}

impl MonthBlockBootstrap {
    /// `months` are the months that carry data; each is assigned to its
    /// regime. Months absent from the regime series are ignored.
    pub fn new(months: &BTreeSet<Month>, regime: &RegimeSeries, seed: u64) -> Result<Self> {
        let flags = regime.flag_map();
        let mut stress = Vec::new();
        let mut non_stress = Vec::new();
        for m in months {
            match flags.get(m) {
                Some(true) => stress.push(*m),
                Some(false) => non_stress.push(*m),
                None => {}
            }
        }
        if stress.is_empty() || non_stress.is_empty() {
            return Err(Error::Insufficient(format!(
                "bootstrap needs both regimes; {} stress and {} non-stress months",
                stress.len(),
                non_stress.len()
            )));
        }
        Ok(MonthBlockBootstrap {
            stress,
            non_stress,
            seed,
        })
    }

    pub fn n_stress(&self) -> usize {
        self.stress.len()
    }

    pub fn n_non_stress(&self) -> usize {
        self.non_stress.len()
    }

    /// Months drawn for replicate `r`: `n_stress` stress draws followed by
    /// `n_non_stress` non-stress draws. Depends only on `(seed, r)`.
    pub fn replicate(&self, r: usize) -> Vec<Month> {
        let mut rng = stream_rng(self.seed, r as u64);
        let mut out = Vec::with_capacity(self.stress.len() + self.non_stress.len());
        for pool in [&self.stress, &self.non_stress] {
            for _ in 0..pool.len() {
                out.push(pool[rng.random_range(0..pool.len())]);
            }
        }
        out
    }
}

/// All `b` replicates as month multisets.
pub fn stratified_month_block_bootstrap(
    months: &BTreeSet<Month>,
    regime: &RegimeSeries,
    b: usize,
    seed: u64,
) -> Result<Vec<Vec<Month>>> {
    let boot = MonthBlockBootstrap::new(months, regime, seed)?;
    Ok((0..b).map(|r| boot.replicate(r)).collect())
}

/// Row indices of a replicate: all rows of each drawn month, repeated as
/// often as the month was drawn.
pub fn replicate_rows(month_rows: &BTreeMap<Month, Vec<usize>>, months: &[Month]) -> Vec<usize> {
    let mut out = Vec::new();
    for m in months {
        if let Some(rows) = month_rows.get(m) {
            out.extend_from_slice(rows);
        }
    }
    out
}
