//! Maximum-likelihood logit by damped Newton iterations, with a
//! cluster-robust sandwich covariance.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::design::Design;
use crate::error::{Error, Result};
use crate::linalg::{dot, inverse_spd, solve_spd};
use crate::stats::two_sided_p;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LogitOptions {
    pub max_iter: usize,
    pub max_halvings: usize,
    /// Convergence threshold on the max-norm of the score.
    pub score_tol: f64,
    /// A coefficient beyond this magnitude with a still-improving
    /// likelihood is treated as separation.
    pub separation_bound: f64,
}

impl Default for LogitOptions {
    fn default() -> Self {
        LogitOptions {
            max_iter: 100,
            max_halvings: 20,
            score_tol: 1e-8,
            separation_bound: 15.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CovKind {
    /// Inverse observed information.
    Model,
    /// Month-clustered sandwich scaled by `G / (G - 1)`.
    Clustered {
        n_clusters: usize,
        small_sample_factor: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogitFit {
    pub names: Vec<String>,
    pub coef: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
    pub cov_kind: CovKind,
    pub se: Vec<f64>,
    pub z: Vec<f64>,
    pub p: Vec<f64>,
    pub n_obs: usize,
    pub n_clusters: Option<usize>,
    pub converged: bool,
    pub separation: bool,
    pub iterations: usize,
    pub loglik: f64,
    pub max_score: f64,
}

impl LogitFit {
    pub fn position(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn coef_of(&self, name: &str) -> Option<f64> {
        self.position(name).map(|j| self.coef[j])
    }

    fn set_cov(&mut self, cov: &DMatrix<f64>, kind: CovKind) {
        let p = self.coef.len();
        self.cov = (0..p).map(|a| (0..p).map(|b| cov[(a, b)]).collect()).collect();
        self.se = (0..p).map(|j| cov[(j, j)].max(0.0).sqrt()).collect();
        self.z = self.coef.iter().zip(&self.se).map(|(b, s)| b / s).collect();
        self.p = self.z.iter().map(|&z| two_sided_p(z)).collect();
        self.n_clusters = match kind {
            CovKind::Clustered { n_clusters, .. } => Some(n_clusters),
            CovKind::Model => None,
        };
        self.cov_kind = kind;
    }
}

#[inline]
fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// log(1 + exp(t)) without overflow.
#[inline]
fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

/// Log-likelihood of a logit at coefficients `beta`.
pub fn loglik(y: &[f64], x: &Design, beta: &[f64]) -> f64 {
    (0..y.len())
        .map(|i| {
            let eta = dot(x.x.row(i), beta);
            y[i] * eta - softplus(eta)
        })
        .sum()
}

struct Eval {
    ll: f64,
    score: Vec<f64>,
    probs: Vec<f64>,
}

fn evaluate(y: &[f64], x: &Design, beta: &[f64]) -> Eval {
    let mut ll = 0.0;
    let mut resid = Vec::with_capacity(y.len());
    let mut probs = Vec::with_capacity(y.len());
    for (i, &yi) in y.iter().enumerate() {
        let eta = dot(x.x.row(i), beta);
        ll += yi * eta - softplus(eta);
        let p = sigmoid(eta);
        probs.push(p);
        resid.push(yi - p);
    }
    Eval {
        ll,
        score: x.x.t_mul_vec(&resid),
        probs,
    }
}

fn information(x: &Design, probs: &[f64]) -> DMatrix<f64> {
    let w: Vec<f64> = probs.iter().map(|p| p * (1.0 - p)).collect();
    x.x.weighted_gram(Some(&w))
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Fits `P(y = 1) = logistic(x' beta)`.
///
/// Damped Newton: each full step is halved until the log-likelihood does
/// not decrease. The fit has converged when the score max-norm drops below
/// `score_tol`, or when the Newton step is too small to change the
/// coefficients.
pub fn fit_logit(y: &[f64], x: &Design, opts: &LogitOptions) -> Result<LogitFit> {
    let n = y.len();
    if x.nrows() != n {
        return Err(Error::invalid("outcome and design differ in length"));
    }
    if y.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::invalid("logit outcome must be 0/1"));
    }
    let ones = y.iter().filter(|&&v| v == 1.0).count();
    if ones == 0 || ones == n {
        return Err(Error::DegenerateOutcome(format!(
            "{ones} events in {n} observations"
        )));
    }
    x.check_rank()?;

    let p = x.ncols();
    let mut beta = vec![0.0; p];
    let mut ev = evaluate(y, x, &beta);
    let mut converged = false;
    let mut separation = false;
    let mut iterations = 0;
    while iterations < opts.max_iter {
        if max_abs(&ev.score) < opts.score_tol {
            converged = true;
            break;
        }
        let h = information(x, &ev.probs);
        let Some(step) = solve_spd(&h, &ev.score) else {
            break;
        };
        if max_abs(&step) <= 1e-14 * (1.0 + max_abs(&beta)) {
            converged = true;
            break;
        }
        iterations += 1;
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..=opts.max_halvings {
            let cand: Vec<f64> = beta.iter().zip(&step).map(|(b, s)| b + t * s).collect();
            let ll = loglik(y, x, &cand);
            if ll >= ev.ll - 1e-12 * (1.0 + ev.ll.abs()) {
                accepted = Some((cand, ll));
                break;
            }
            t *= 0.5;
        }
        let Some((cand, ll)) = accepted else { break };
        let improving = ll > ev.ll;
        beta = cand;
        ev = evaluate(y, x, &beta);
        if improving && max_abs(&beta) > opts.separation_bound {
            separation = true;
            break;
        }
    }
    if !converged && !separation && max_abs(&ev.score) < opts.score_tol {
        converged = true;
    }

    let h = information(x, &ev.probs);
    let cov = inverse_spd(&h).unwrap_or_else(|| DMatrix::from_element(p, p, f64::NAN));
    let mut fit = LogitFit {
        names: x.names.clone(),
        coef: beta,
        cov: Vec::new(),
        cov_kind: CovKind::Model,
        se: Vec::new(),
        z: Vec::new(),
        p: Vec::new(),
        n_obs: n,
        n_clusters: None,
        converged,
        separation,
        iterations,
        loglik: ev.ll,
        max_score: max_abs(&ev.score),
    };
    fit.set_cov(&cov, CovKind::Model);
    Ok(fit)
}

/// Cluster-robust sandwich `G/(G-1) H^-1 (sum_g s_g s_g') H^-1` where `s_g`
/// is the score summed within cluster `g`.
pub fn cluster_robust_cov(
    fit: &LogitFit,
    y: &[f64],
    x: &Design,
    clusters: &[i64],
) -> Result<DMatrix<f64>> {
    if !fit.converged {
        return Err(Error::invalid("clustered covariance needs a converged fit"));
    }
    if clusters.len() != y.len() {
        return Err(Error::invalid("cluster labels differ in length from outcome"));
    }
    let p = x.ncols();
    let mut sums: BTreeMap<i64, Vec<f64>> = BTreeMap::new();
    let mut probs = Vec::with_capacity(y.len());
    for i in 0..y.len() {
        let pr = sigmoid(dot(x.x.row(i), &fit.coef));
        probs.push(pr);
        let r = y[i] - pr;
        let s = sums.entry(clusters[i]).or_insert_with(|| vec![0.0; p]);
        for (acc, &xv) in s.iter_mut().zip(x.x.row(i)) {
            *acc += xv * r;
        }
    }
    let g = sums.len();
    if g < 2 {
        return Err(Error::Insufficient(format!("{g} cluster(s); need at least 2")));
    }
    let mut meat = DMatrix::zeros(p, p);
    for s in sums.values() {
        let v = DVector::from_column_slice(s);
        meat += &v * v.transpose();
    }
    let bread = inverse_spd(&information(x, &probs))
        .ok_or_else(|| Error::invalid("singular information matrix"))?;
    let factor = g as f64 / (g as f64 - 1.0);
    let mut v = &bread * meat * &bread * factor;
    // symmetrize rounding
    for a in 0..p {
        for b in 0..a {
            let m = 0.5 * (v[(a, b)] + v[(b, a)]);
            v[(a, b)] = m;
            v[(b, a)] = m;
        }
    }
    Ok(v)
}

/// Logit fit whose reported covariance is month-clustered.
pub fn fit_logit_clustered(
    y: &[f64],
    x: &Design,
    clusters: &[i64],
    opts: &LogitOptions,
) -> Result<LogitFit> {
    let mut fit = fit_logit(y, x, opts)?;
    if !fit.converged {
        return Ok(fit);
    }
    let cov = cluster_robust_cov(&fit, y, x, clusters)?;
    let g = clusters.iter().collect::<std::collections::BTreeSet<_>>().len();
    fit.set_cov(
        &cov,
        CovKind::Clustered {
            n_clusters: g,
            small_sample_factor: g as f64 / (g as f64 - 1.0),
        },
    );
    Ok(fit)
}
