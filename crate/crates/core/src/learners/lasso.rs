use nalgebra::DMatrix;

use crate::linalg::{collinear_columns, Matrix};

pub const LASSO_TOL: f64 = 1e-7;
const MAX_SWEEPS: usize = 200_000;
const POLISH_TOL: f64 = 1e-12;

pub fn soft_threshold(z: f64, gamma: f64) -> f64 {
    if z > gamma {
        z - gamma
    } else if z < -gamma {
        z + gamma
    } else {
        0.0
    }
}

/// Additive sufficient statistics of a regression sample. Statistics of
/// disjoint row sets add, so fold complements are cheap to form.
#[derive(Clone, Debug)]
pub struct SuffStats {
    pub n: f64,
    pub sx: Vec<f64>,
    pub sxx: DMatrix<f64>,
    pub sy: f64,
    pub sxy: Vec<f64>,
    pub syy: f64,
}

impl SuffStats {
    pub fn zeros(p: usize) -> Self {
        SuffStats {
            n: 0.0,
            sx: vec![0.0; p],
            sxx: DMatrix::zeros(p, p),
            sy: 0.0,
            sxy: vec![0.0; p],
            syy: 0.0,
        }
    }

    pub fn p(&self) -> usize {
        self.sx.len()
    }

    pub fn push(&mut self, x: &[f64], y: f64) {
        let p = self.p();
        self.n += 1.0;
        self.sy += y;
        self.syy += y * y;
        for j in 0..p {
            self.sx[j] += x[j];
            self.sxy[j] += x[j] * y;
            for k in 0..=j {
                self.sxx[(j, k)] += x[j] * x[k];
            }
        }
    }

    /// Copies the accumulated lower triangle to the upper one.
    fn symmetrize(&mut self) {
        let p = self.p();
        for j in 0..p {
            for k in 0..j {
                self.sxx[(k, j)] = self.sxx[(j, k)];
            }
        }
    }

    pub fn from_rows(x: &Matrix, y: &[f64], rows: impl IntoIterator<Item = usize>) -> Self {
        let mut s = SuffStats::zeros(x.ncols());
        for i in rows {
            s.push(x.row(i), y[i]);
        }
        s.symmetrize();
        s
    }

    /// Statistics for each group label, in the order of `labels`.
    pub fn by_group(x: &Matrix, y: &[f64], groups: &[usize], n_groups: usize) -> Vec<Self> {
        let mut out: Vec<SuffStats> = (0..n_groups).map(|_| SuffStats::zeros(x.ncols())).collect();
        for (i, &g) in groups.iter().enumerate() {
            out[g].push(x.row(i), y[i]);
        }
        out.iter_mut().for_each(SuffStats::symmetrize);
        out
    }

    pub fn add(&mut self, o: &SuffStats) {
        self.n += o.n;
        self.sy += o.sy;
        self.syy += o.syy;
        self.sxx += &o.sxx;
        for j in 0..self.p() {
            self.sx[j] += o.sx[j];
            self.sxy[j] += o.sxy[j];
        }
    }

    pub fn sub(&mut self, o: &SuffStats) {
        self.n -= o.n;
        self.sy -= o.sy;
        self.syy -= o.syy;
        self.sxx -= &o.sxx;
        for j in 0..self.p() {
            self.sx[j] -= o.sx[j];
            self.sxy[j] -= o.sxy[j];
        }
    }

    /// Sum of squared errors of `a + x'b` over the rows behind the statistics.
    pub fn sse(&self, a: f64, b: &[f64]) -> f64 {
        let p = self.p();
        let mut quad = 0.0;
        for j in 0..p {
            let mut row = 0.0;
            for k in 0..p {
                row += self.sxx[(j, k)] * b[k];
            }
            quad += b[j] * row;
        }
        let bx: f64 = (0..p).map(|j| b[j] * self.sx[j]).sum();
        let bxy: f64 = (0..p).map(|j| b[j] * self.sxy[j]).sum();
        (self.syy - 2.0 * a * self.sy - 2.0 * bxy + self.n * a * a + 2.0 * a * bx + quad).max(0.0)
    }
}

/// Lasso problem in standardized coordinates: minimize
/// `b'Gb/2 - c'b + lambda |b|_1` with `G` the correlation-scale Gram matrix.
pub(crate) struct Standardized {
    pub mean_x: Vec<f64>,
    pub scale: Vec<f64>,
    /// Columns with positive variance; the others stay at zero.
    pub active: Vec<bool>,
    pub mean_y: f64,
    pub gram: DMatrix<f64>,
    pub c: Vec<f64>,
}

impl Standardized {
    pub fn new(s: &SuffStats) -> Self {
        let p = s.p();
        let n = s.n;
        let mean_x: Vec<f64> = s.sx.iter().map(|v| v / n).collect();
        let mean_y = s.sy / n;
        let mut scale = vec![1.0; p];
        let mut active = vec![false; p];
        for j in 0..p {
            let var = s.sxx[(j, j)] / n - mean_x[j] * mean_x[j];
            if var > 1e-20 * (1.0 + mean_x[j] * mean_x[j]) {
                scale[j] = var.sqrt();
                active[j] = true;
            }
        }
        let mut gram = DMatrix::zeros(p, p);
        let mut c = vec![0.0; p];
        for j in 0..p {
            if !active[j] {
                continue;
            }
            c[j] = (s.sxy[j] / n - mean_x[j] * mean_y) / scale[j];
            for k in 0..p {
                if active[k] {
                    gram[(j, k)] =
                        (s.sxx[(j, k)] / n - mean_x[j] * mean_x[k]) / (scale[j] * scale[k]);
                }
            }
        }
        Standardized {
            mean_x,
            scale,
            active,
            mean_y,
            gram,
            c,
        }
    }

    /// `max_j |c_j|`: the smallest penalty with an all-zero solution.
    pub fn lambda_max(&self) -> f64 {
        self.c.iter().fold(0.0, |m: f64, v| m.max(v.abs()))
    }

    pub fn rank_deficient(&self) -> bool {
        let idx: Vec<usize> = (0..self.c.len()).filter(|&j| self.active[j]).collect();
        let g = DMatrix::from_fn(idx.len(), idx.len(), |a, b| self.gram[(idx[a], idx[b])]);
        !collinear_columns(&g).is_empty()
    }

    /// Cyclic coordinate descent from `b`, returning the number of sweeps.
    pub fn descend(&self, lambda: f64, b: &mut [f64]) -> (usize, bool) {
        let p = b.len();
        let mut q = vec![0.0; p];
        for j in 0..p {
            for k in 0..p {
                q[j] += self.gram[(j, k)] * b[k];
            }
        }
        let mut reached = None;
        for sweep in 1..=MAX_SWEEPS {
            let mut max_change: f64 = 0.0;
            for j in 0..p {
                if !self.active[j] {
                    continue;
                }
                let gjj = self.gram[(j, j)];
                let z = self.c[j] - q[j] + gjj * b[j];
                let new = soft_threshold(z, lambda) / gjj;
                let delta = new - b[j];
                if delta != 0.0 {
                    for k in 0..p {
                        q[k] += self.gram[(k, j)] * delta;
                    }
                    b[j] = new;
                    max_change = max_change.max(delta.abs());
                }
            }
            if max_change < LASSO_TOL && reached.is_none() {
                reached = Some(sweep);
            }
            // a few cheap extra sweeps tighten the optimality conditions well
            // below the stopping tolerance
            if let Some(first) = reached {
                if max_change < POLISH_TOL || sweep >= 4 * first + 50 {
                    return (sweep, true);
                }
            }
        }
        (MAX_SWEEPS, reached.is_some())
    }

    /// Original-scale intercept and slopes.
    pub fn unscale(&self, b: &[f64]) -> (f64, Vec<f64>) {
        let coef: Vec<f64> = b.iter().zip(&self.scale).map(|(v, s)| v / s).collect();
        let intercept = self.mean_y - coef.iter().zip(&self.mean_x).map(|(c, m)| c * m).sum::<f64>();
        (intercept, coef)
    }
}

/// Log-spaced penalties from `lambda_max` down to `lambda_max * min_ratio`.
pub fn lambda_grid(lambda_max: f64, n: usize, min_ratio: f64) -> Vec<f64> {
    if n == 1 {
        return vec![lambda_max];
    }
    let hi = lambda_max.max(1e-300).ln();
    let lo = (lambda_max * min_ratio).max(1e-300).ln();
    (0..n)
        .map(|i| (hi + (lo - hi) * i as f64 / (n - 1) as f64).exp())
        .collect()
}
