use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{fit, lasso_path_stats, Hyper, SuffStats};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::{derive_seed, stream_rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub selected: Hyper,
    pub grid: Vec<Hyper>,
    /// Pooled out-of-fold mean squared error per grid point.
    pub losses: Vec<f64>,
    pub folds: usize,
}

/// Fold index per row. With `groups`, every row of a group shares a fold;
/// groups (or rows) are shuffled by `seed` and dealt round-robin.
pub fn fold_labels(n: usize, folds: usize, seed: u64, groups: Option<&[i64]>) -> Result<Vec<usize>> {
    if folds < 2 {
        return Err(Error::invalid(format!("need at least 2 folds, got {folds}")));
    }
    let mut rng = stream_rng(seed, 0);
    match groups {
        None => {
            if n < folds {
                return Err(Error::Insufficient(format!("{n} rows for {folds} folds")));
            }
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            let mut lab = vec![0; n];
            for (k, &i) in order.iter().enumerate() {
                lab[i] = k % folds;
            }
            Ok(lab)
        }
        Some(g) => {
            if g.len() != n {
                return Err(Error::invalid("group labels do not match rows"));
            }
            let mut units: Vec<i64> = g.to_vec();
            units.sort_unstable();
            units.dedup();
            if units.len() < folds {
                return Err(Error::Insufficient(format!(
                    "{} groups for {folds} folds",
                    units.len()
                )));
            }
            units.shuffle(&mut rng);
            let fold_of: BTreeMap<i64, usize> =
                units.iter().enumerate().map(|(k, &u)| (u, k % folds)).collect();
            Ok(g.iter().map(|u| fold_of[u]).collect())
        }
    }
}

/// K-fold cross-validated choice from `grid`. Ties in loss go to the more
/// regularized setting.
pub fn cv_select(
    x: &Matrix,
    y: &[f64],
    grid: &[Hyper],
    folds: usize,
    seed: u64,
    groups: Option<&[i64]>,
) -> Result<CvResult> {
    if grid.is_empty() {
        return Err(Error::invalid("empty hyperparameter grid"));
    }
    for h in grid {
        h.validate()?;
    }
    if grid.len() == 1 {
        return Ok(CvResult {
            selected: grid[0],
            grid: grid.to_vec(),
            losses: vec![f64::NAN],
            folds,
        });
    }
    let lab = fold_labels(y.len(), folds, seed, groups)?;
    let n = y.len() as f64;
    let losses: Vec<f64> = if grid.iter().all(|h| matches!(h, Hyper::Lasso { .. })) {
        let lambdas: Vec<f64> = grid
            .iter()
            .map(|h| match h {
                Hyper::Lasso { lambda } => *lambda,
                _ => unreachable!(),
            })
            .collect();
        let parts = SuffStats::by_group(x, y, &lab, folds);
        let mut total = SuffStats::zeros(x.ncols());
        parts.iter().for_each(|p| total.add(p));
        let mut sse = vec![0.0; grid.len()];
        for part in &parts {
            let mut train = total.clone();
            train.sub(part);
            for (k, f) in lasso_path_stats(&train, &lambdas).iter().enumerate() {
                let super::Model::Linear { intercept, coef } = &f.model else {
                    unreachable!()
                };
                sse[k] += part.sse(*intercept, coef);
            }
        }
        sse.into_iter().map(|s| s / n).collect()
    } else {
        let jobs: Vec<(usize, usize)> = (0..folds)
            .flat_map(|k| (0..grid.len()).map(move |g| (k, g)))
            .collect();
        let sse: Vec<Result<f64>> = jobs
            .par_iter()
            .map(|&(k, g)| {
                let train: Vec<usize> = (0..lab.len()).filter(|&i| lab[i] != k).collect();
                let test: Vec<usize> = (0..lab.len()).filter(|&i| lab[i] == k).collect();
                let xt = x.select_rows(&train);
                let yt: Vec<f64> = train.iter().map(|&i| y[i]).collect();
                let f = fit(&xt, &yt, &grid[g], derive_seed(seed, &[1 + k as u64]))?;
                Ok(test
                    .iter()
                    .map(|&i| (y[i] - f.predict_row(x.row(i))).powi(2))
                    .sum())
            })
            .collect();
        let mut out = vec![0.0; grid.len()];
        for (&(_, g), s) in jobs.iter().zip(sse) {
            out[g] += s?;
        }
        out.into_iter().map(|s| s / n).collect()
    };
    let mut order: Vec<usize> = (0..grid.len()).collect();
    order.sort_by(|&a, &b| {
        grid[a]
            .complexity()
            .partial_cmp(&grid[b].complexity())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let best = losses.iter().copied().fold(f64::INFINITY, f64::min);
    let tol = 1e-12 * best.abs().max(1e-300);
    let pick = order
        .into_iter()
        .find(|&g| losses[g] <= best + tol)
        .ok_or_else(|| Error::invalid("cross-validation losses are not finite"))?;
    Ok(CvResult {
        selected: grid[pick],
        grid: grid.to_vec(),
        losses,
        folds,
    })
}
