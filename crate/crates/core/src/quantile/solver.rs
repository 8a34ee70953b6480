//! Linear quantile regression.
//!
//! The pinball objective is first minimized in a Huber-smoothed form whose
//! smoothing width is annealed toward zero (damped Newton at each width).
//! The smoothed solution then seeds an exact polish: the `p` observations
//! with the smallest residuals form an interpolating basis and simplex-type
//! pivots move along the edges of the piecewise-linear objective, each with
//! an exact line search, until no edge direction descends. That final edge
//! test is the subgradient optimality certificate.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::design::Design;
use crate::error::{Error, Result};
use crate::linalg::{dot, solve_spd, Matrix};

/// Check function `u (tau - 1{u < 0})`.
#[inline]
pub fn check_loss(u: f64, tau: f64) -> f64 {
    if u < 0.0 {
        u * (tau - 1.0)
    } else {
        u * tau
    }
}

/// Total pinball loss of a residual vector.
pub fn pinball_loss(residuals: &[f64], tau: f64) -> f64 {
    residuals.iter().map(|&u| check_loss(u, tau)).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantileOptions {
    /// Number of smoothing widths visited on a cold start.
    pub anneal_stages: usize,
    /// Ratio between consecutive smoothing widths.
    pub anneal_factor: f64,
    /// Newton iterations per smoothing width.
    pub newton_iter: usize,
    pub max_pivots: usize,
    /// Residuals within `zero_tol * scale(y)` of zero count as interpolated.
    pub zero_tol: f64,
    /// Edge directional derivatives above `-opt_tol * scale` count as
    /// non-descending.
    pub opt_tol: f64,
    /// Smoothing widths visited from a warm start, ending at the cold-start
    /// final width.
    pub warm_stages: usize,
    /// Newton iterations per width on a warm start.
    pub warm_newton_iter: usize,
}

impl Default for QuantileOptions {
    fn default() -> Self {
        QuantileOptions {
            anneal_stages: 5,
            anneal_factor: 0.1,
            newton_iter: 30,
            max_pivots: 20_000,
            zero_tol: 1e-11,
            opt_tol: 1e-10,
            warm_stages: 0,
            warm_newton_iter: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverInfo {
    pub newton_iterations: usize,
    pub final_smoothing: f64,
    pub pivots: usize,
    /// Smallest edge directional derivative at the returned vertex
    /// (non-negative up to tolerance when optimal).
    pub min_edge_derivative: f64,
    pub optimal: bool,
    /// Rows fewer than ten per coefficient.
    pub thin_sample: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantileFit {
    pub tau: f64,
    pub names: Vec<String>,
    pub coef: Vec<f64>,
    pub objective: f64,
    pub n_obs: usize,
    pub solver: SolverInfo,
}

impl QuantileFit {
    pub fn coef_of(&self, name: &str) -> Option<f64> {
        self.names.iter().position(|n| n == name).map(|j| self.coef[j])
    }

    /// Treatment slope in stress months: main effect plus interaction.
    pub fn stress_slope(&self, treatment: &str, interaction: &str) -> Option<f64> {
        Some(self.coef_of(treatment)? + self.coef_of(interaction)?)
    }
}

fn residuals(y: &[f64], x: &Matrix, beta: &[f64]) -> Vec<f64> {
    let mut r = x.mul_vec(beta);
    for (ri, yi) in r.iter_mut().zip(y) {
        *ri = yi - *ri;
    }
    r
}

fn y_scale(y: &[f64]) -> f64 {
    let m = y.iter().map(|v| v.abs()).sum::<f64>() / y.len().max(1) as f64;
    if m > 0.0 { m } else { 1.0 }
}

/// Smoothed objective: `sum (tau - 1/2) r + |r|_h / 2` with the Huber
/// absolute value `|u|_h = u^2/(2h) + h/2` inside `[-h, h]`.
fn smoothed(r: &[f64], tau: f64, h: f64) -> f64 {
    r.iter()
        .map(|&u| {
            let a = u.abs();
            let hub = if a <= h { u * u / (2.0 * h) + h / 2.0 } else { a };
            (tau - 0.5) * u + 0.5 * hub
        })
        .sum()
}

fn smooth_stage(y: &[f64], x: &Matrix, tau: f64, h: f64, beta: &mut Vec<f64>, iters: usize) -> usize {
    let p = x.ncols();
    let mut r = residuals(y, x, beta);
    let mut f = smoothed(&r, tau, h);
    let mut used = 0;
    for _ in 0..iters {
        used += 1;
        // gradient of the smoothed objective with respect to beta is -X'psi
        let psi: Vec<f64> = r
            .iter()
            .map(|&u| (tau - 0.5) + 0.5 * (u / h).clamp(-1.0, 1.0))
            .collect();
        let g = x.t_mul_vec(&psi);
        let w: Vec<f64> = r
            .iter()
            .map(|&u| if u.abs() < h { 0.5 / h } else { 0.0 })
            .collect();
        let mut hess = x.weighted_gram(Some(&w));
        let trace: f64 = (0..p).map(|j| hess[(j, j)]).sum::<f64>().max(1e-300);
        let ridge = 1e-8 * trace / p as f64 + 1e-12;
        for j in 0..p {
            hess[(j, j)] += ridge;
        }
        let Some(step) = solve_spd(&hess, &g) else { break };
        let decrement = dot(&step, &g);
        if !(decrement > 1e-14 * (1.0 + f.abs())) {
            break;
        }
        let mut t = 1.0;
        let mut moved = false;
        for _ in 0..40 {
            let cand: Vec<f64> = beta.iter().zip(&step).map(|(b, s)| b + t * s).collect();
            let rc = residuals(y, x, &cand);
            let fc = smoothed(&rc, tau, h);
            if fc <= f - 1e-4 * t * decrement {
                *beta = cand;
                r = rc;
                f = fc;
                moved = true;
                break;
            }
            t *= 0.5;
        }
        if !moved {
            break;
        }
    }
    used
}

/// Picks `p` linearly independent rows, preferring small `|residual|`.
fn initial_basis(x: &Matrix, r: &[f64]) -> Option<Vec<usize>> {
    let p = x.ncols();
    let mut order: Vec<usize> = (0..r.len()).collect();
    order.sort_by(|&a, &b| r[a].abs().total_cmp(&r[b].abs()).then(a.cmp(&b)));
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(p);
    let mut basis = Vec::with_capacity(p);
    for i in order {
        let xi = x.row(i);
        let norm0 = dot(xi, xi).sqrt();
        if norm0 == 0.0 {
            continue;
        }
        let mut v = xi.to_vec();
        for _ in 0..2 {
            for qk in &q {
                let c = dot(&v, qk);
                for (vj, qj) in v.iter_mut().zip(qk) {
                    *vj -= c * qj;
                }
            }
        }
        let nv = dot(&v, &v).sqrt();
        if nv > 1e-8 * norm0 {
            v.iter_mut().for_each(|e| *e /= nv);
            q.push(v);
            basis.push(i);
            if basis.len() == p {
                return Some(basis);
            }
        }
    }
    None
}

fn basis_matrix(x: &Matrix, basis: &[usize]) -> DMatrix<f64> {
    let p = x.ncols();
    DMatrix::from_fn(p, p, |a, b| x.get(basis[a], b))
}

struct Breakpoint {
    t: f64,
    w: f64,
    i: usize,
}

impl PartialEq for Breakpoint {
    fn eq(&self, o: &Self) -> bool {
        self.cmp(o) == Ordering::Equal
    }
}

impl Eq for Breakpoint {}

impl PartialOrd for Breakpoint {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}

impl Ord for Breakpoint {
    fn cmp(&self, o: &Self) -> Ordering {
        self.t.total_cmp(&o.t).then(self.i.cmp(&o.i))
    }
}

struct Polish {
    beta: Vec<f64>,
    pivots: usize,
    min_edge: f64,
    optimal: bool,
}

/// Residuals, the subgradient sum over non-interpolated rows and the list
/// of interpolated rows, computed from scratch.
fn full_state(y: &[f64], x: &Matrix, tau: f64, beta: &[f64], ztol: f64) -> (Vec<f64>, Vec<f64>, Vec<usize>) {
    let p = x.ncols();
    let r = residuals(y, x, beta);
    let mut s = vec![0.0; p];
    let mut zero_rows = Vec::new();
    for (i, &ri) in r.iter().enumerate() {
        if ri.abs() <= ztol {
            zero_rows.push(i);
            continue;
        }
        let psi = if ri > 0.0 { tau } else { tau - 1.0 };
        for (sj, &xj) in s.iter_mut().zip(x.row(i)) {
            *sj += psi * xj;
        }
    }
    (r, s, zero_rows)
}

fn axpy(s: &mut [f64], c: f64, x: &[f64]) {
    for (sj, &xj) in s.iter_mut().zip(x) {
        *sj += c * xj;
    }
}

/// Pivots between full recomputations of the incrementally updated state.
const REFRESH_EVERY: usize = 32;

/// Exact vertex polish starting from the basis closest to `start`.
///
/// Between pivots the residuals and the subgradient sum are updated from
/// the rows the line search stepped over; degenerate steps and every
/// `REFRESH_EVERY` pivots trigger a full recomputation, and optimality is
/// only declared on freshly computed state.
fn polish(y: &[f64], x: &Matrix, tau: f64, start: &[f64], opts: &QuantileOptions) -> Result<Polish> {
    let n = y.len();
    let p = x.ncols();
    let scale = y_scale(y);
    let ztol = opts.zero_tol * scale;
    let r0 = residuals(y, x, start);
    let mut basis = initial_basis(x, &r0)
        .ok_or_else(|| Error::RankDeficient(vec!["<design>".into()]))?;
    let mut pivots = 0;
    let mut a = vec![0.0; n];
    let mut bp: Vec<Reverse<Breakpoint>> = Vec::new();
    let mut r = Vec::new();
    let mut s = Vec::new();
    let mut zero_rows = Vec::new();
    let mut stale = usize::MAX;
    loop {
        let bmat = basis_matrix(x, &basis);
        let binv = bmat
            .lu()
            .try_inverse()
            .ok_or_else(|| Error::RankDeficient(vec!["<basis>".into()]))?;
        let yb: Vec<f64> = basis.iter().map(|&i| y[i]).collect();
        let beta: Vec<f64> = (0..p).map(|j| (0..p).map(|k| binv[(j, k)] * yb[k]).sum()).collect();
        if stale >= REFRESH_EVERY {
            (r, s, zero_rows) = full_state(y, x, tau, &beta, ztol);
            stale = 0;
        }
        let s_norm: f64 = s.iter().map(|v| v.abs()).sum::<f64>() + 1.0;

        // edge directions d = sign * column h of B^-1
        let mut best: Option<(f64, usize, f64)> = None;
        for h in 0..p {
            let col: Vec<f64> = (0..p).map(|j| binv[(j, h)]).collect();
            let za: Vec<f64> = zero_rows.iter().map(|&i| dot(x.row(i), &col)).collect();
            let sd = dot(&s, &col);
            for sign in [1.0, -1.0] {
                let mut g = -sign * sd;
                for &ai in &za {
                    let ai = sign * ai;
                    g += if ai < 0.0 { -tau * ai } else { (1.0 - tau) * ai };
                }
                let dn = col.iter().map(|v| v.abs()).fold(0.0, f64::max);
                let gn = g / dn.max(1e-300);
                if best.is_none_or(|b| gn < b.0) {
                    best = Some((gn, h, sign));
                }
            }
        }
        let (gn, h, sign) = best.expect("p >= 1");
        let dmax = (0..p).map(|j| binv[(j, h)].abs()).fold(0.0, f64::max);
        let g = gn * dmax;
        let optimal = gn >= -opts.opt_tol * s_norm;
        if optimal || pivots >= opts.max_pivots {
            if stale > 0 {
                stale = usize::MAX;
                continue;
            }
            return Ok(Polish {
                beta,
                pivots,
                min_edge: gn,
                optimal,
            });
        }

        let d: Vec<f64> = (0..p).map(|j| sign * binv[(j, h)]).collect();
        bp.clear();
        for i in 0..n {
            a[i] = dot(x.row(i), &d);
            if r[i].abs() > ztol && a[i] != 0.0 {
                let t = r[i] / a[i];
                if t > 0.0 {
                    bp.push(Reverse(Breakpoint { t, w: a[i].abs(), i }));
                }
            }
        }
        // exact line search: walk breakpoints in increasing step length until
        // the directional slope turns non-negative; a heap avoids sorting all
        let mut heap = BinaryHeap::from(std::mem::take(&mut bp));
        let mut slope = g;
        let mut passed = Vec::new();
        let mut entering = None;
        while let Some(Reverse(b)) = heap.pop() {
            slope += b.w;
            if slope >= 0.0 {
                entering = Some(b);
                break;
            }
            passed.push(b);
        }
        let Some(enter) = entering else {
            return Err(Error::invalid("quantile objective unbounded along an edge"));
        };
        let t_star = enter.t;
        let tie = |t: f64| (t - t_star).abs() <= 1e-12 * t_star;
        let degenerate = passed.last().is_some_and(|b| tie(b.t))
            || heap.peek().is_some_and(|Reverse(b)| tie(b.t));
        bp = heap.into_vec();
        basis[h] = enter.i;
        pivots += 1;
        if degenerate {
            stale = usize::MAX;
            continue;
        }
        for b in &passed {
            axpy(&mut s, if r[b.i] > 0.0 { -1.0 } else { 1.0 }, x.row(b.i));
        }
        let psi_in = if r[enter.i] > 0.0 { tau } else { tau - 1.0 };
        axpy(&mut s, -psi_in, x.row(enter.i));
        for (ri, ai) in r.iter_mut().zip(&a) {
            *ri -= t_star * ai;
        }
        for &k in &basis {
            r[k] = 0.0;
        }
        // previously interpolated rows (the leaving row, and duplicates of
        // basis rows in resampled data) either stay on zero or rejoin the sum
        let mut still_zero = Vec::with_capacity(zero_rows.len() + 1);
        for &z in &zero_rows {
            if r[z].abs() <= ztol {
                still_zero.push(z);
            } else {
                axpy(&mut s, if r[z] > 0.0 { tau } else { tau - 1.0 }, x.row(z));
            }
        }
        still_zero.push(enter.i);
        zero_rows = still_zero;
        stale += 1;
    }
}

/// Minimizes the total pinball loss of `y - X beta`.
pub fn fit_quantile(y: &[f64], x: &Design, tau: f64, opts: &QuantileOptions) -> Result<QuantileFit> {
    fit_quantile_from(y, x, tau, None, opts)
}

/// As [`fit_quantile`], optionally warm-started from `start`, in which case
/// only the last `warm_stages` smoothing widths are visited before the
/// vertex polish.
pub fn fit_quantile_from(
    y: &[f64],
    x: &Design,
    tau: f64,
    start: Option<&[f64]>,
    opts: &QuantileOptions,
) -> Result<QuantileFit> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::invalid(format!("tau {tau} outside (0, 1)")));
    }
    let n = y.len();
    let p = x.ncols();
    if x.nrows() != n {
        return Err(Error::invalid("outcome and design differ in length"));
    }
    if p == 0 || n < p {
        return Err(Error::Insufficient(format!("{n} rows for {p} coefficients")));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite outcome"));
    }
    x.check_rank()?;

    let mut newton_iterations = 0;
    let mut h_final = 0.0;
    let mut beta = match start {
        Some(b) => b.to_vec(),
        None => {
            let g = x.x.weighted_gram(None);
            let xty = x.x.t_mul_vec(y);
            solve_spd(&g, &xty).unwrap_or_else(|| vec![0.0; p])
        }
    };
    let (stages, iters) = match start {
        Some(_) => (opts.warm_stages.min(opts.anneal_stages), opts.warm_newton_iter),
        None => (opts.anneal_stages, opts.newton_iter),
    };
    if stages > 0 {
        let r = residuals(y, &x.x, &beta);
        // widths shrink from mean |r| so that a warm start ends at the same
        // final width as a cold one
        let skip = (opts.anneal_stages - stages) as i32;
        let mut h = (r.iter().map(|v| v.abs()).sum::<f64>() / n as f64).max(1e-12 * y_scale(y))
            * opts.anneal_factor.powi(skip);
        for _ in 0..stages {
            newton_iterations += smooth_stage(y, &x.x, tau, h, &mut beta, iters);
            h_final = h;
            h *= opts.anneal_factor;
        }
    }
    let beta0 = beta;
    let pol = polish(y, &x.x, tau, &beta0, opts)?;
    let r = residuals(y, &x.x, &pol.beta);
    Ok(QuantileFit {
        tau,
        names: x.names.clone(),
        objective: pinball_loss(&r, tau),
        coef: pol.beta,
        n_obs: n,
        solver: SolverInfo {
            newton_iterations,
            final_smoothing: h_final,
            pivots: pol.pivots,
            min_edge_derivative: pol.min_edge,
            optimal: pol.optimal,
            thin_sample: n < 10 * p,
        },
    })
}
