use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::linalg::Matrix;

/// Regression tree stored as flat node arrays. `feature[k] < 0` marks a leaf.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub feature: Vec<i32>,
    pub threshold: Vec<f64>,
    pub left: Vec<u32>,
    pub right: Vec<u32>,
    pub value: Vec<f64>,
}

impl Tree {
    pub fn predict_row(&self, x: &[f64]) -> f64 {
        let mut k = 0;
        loop {
            let f = self.feature[k];
            if f < 0 {
                return self.value[k];
            }
            k = if x[f as usize] <= self.threshold[k] {
                self.left[k]
            } else {
                self.right[k]
            } as usize;
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.feature.len()
    }

    pub fn depth(&self) -> usize {
        fn go(t: &Tree, k: usize) -> usize {
            if t.feature[k] < 0 {
                0
            } else {
                1 + go(t, t.left[k] as usize).max(go(t, t.right[k] as usize))
            }
        }
        go(self, 0)
    }
}

#[derive(Copy, Clone, Debug)]
pub(crate) struct TreeParams {
    pub max_depth: usize,
    pub min_leaf: usize,
    /// Features tried at each split; all of them when `>= p`.
    pub n_features: usize,
}

#[derive(Copy, Clone, Debug, PartialEq)]
pub struct Split {
    pub feature: usize,
    pub threshold: f64,
    pub gain: f64,
}

/// Best variance-reducing split of `rows` on `feature`, scanning every
/// boundary between distinct sorted values with at least `min_leaf` rows on
/// each side. Gain is the reduction in the sum of squared errors.
pub fn best_split_on(
    x: &Matrix,
    y: &[f64],
    rows: &[usize],
    feature: usize,
    min_leaf: usize,
    buf: &mut Vec<(f64, f64)>,
) -> Option<Split> {
    let n = rows.len();
    if n < 2 * min_leaf.max(1) {
        return None;
    }
    buf.clear();
    buf.extend(rows.iter().map(|&i| (x.get(i, feature), y[i])));
    buf.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));
    let total: f64 = buf.iter().map(|v| v.1).sum();
    let base = total * total / n as f64;
    let mut left = 0.0;
    let mut best: Option<Split> = None;
    for k in 0..n - 1 {
        left += buf[k].1;
        let nl = k + 1;
        if nl < min_leaf || n - nl < min_leaf || buf[k].0 == buf[k + 1].0 {
            continue;
        }
        let right = total - left;
        let gain = left * left / nl as f64 + right * right / (n - nl) as f64 - base;
        if best.is_none_or(|b| gain > b.gain) {
            let mid = 0.5 * (buf[k].0 + buf[k + 1].0);
            // the midpoint can round onto the upper value for adjacent floats
            let threshold = if mid < buf[k + 1].0 { mid } else { buf[k].0 };
            best = Some(Split {
                feature,
                threshold,
                gain,
            });
        }
    }
    best
}

pub(crate) fn grow_tree(
    x: &Matrix,
    y: &[f64],
    rows: Vec<usize>,
    params: TreeParams,
    rng: &mut ChaCha8Rng,
) -> Tree {
    let mut t = Tree {
        feature: Vec::new(),
        threshold: Vec::new(),
        left: Vec::new(),
        right: Vec::new(),
        value: Vec::new(),
    };
    let p = x.ncols();
    let mut buf = Vec::with_capacity(rows.len());
    // (node index, rows, depth)
    let mut stack = vec![(0usize, rows, 0usize)];
    t.feature.push(-1);
    t.threshold.push(0.0);
    t.left.push(0);
    t.right.push(0);
    t.value.push(0.0);
    while let Some((node, rows, depth)) = stack.pop() {
        let n = rows.len();
        let mean = rows.iter().map(|&i| y[i]).sum::<f64>() / n.max(1) as f64;
        t.value[node] = mean;
        if depth >= params.max_depth || n < 2 * params.min_leaf.max(1) {
            continue;
        }
        let features: Vec<usize> = if params.n_features >= p {
            (0..p).collect()
        } else {
            let mut f = sample(rng, p, params.n_features).into_vec();
            f.sort_unstable();
            f
        };
        let mut best: Option<Split> = None;
        for &f in &features {
            if let Some(s) = best_split_on(x, y, &rows, f, params.min_leaf, &mut buf) {
                if best.is_none_or(|b| s.gain > b.gain) {
                    best = Some(s);
                }
            }
        }
        let Some(split) = best.filter(|s| s.gain > 1e-12 * (1.0 + mean * mean * n as f64)) else {
            continue;
        };
        let (l, r): (Vec<usize>, Vec<usize>) = rows
            .into_iter()
            .partition(|&i| x.get(i, split.feature) <= split.threshold);
        let li = t.feature.len();
        for _ in 0..2 {
            t.feature.push(-1);
            t.threshold.push(0.0);
            t.left.push(0);
            t.right.push(0);
            t.value.push(0.0);
        }
        t.feature[node] = split.feature as i32;
        t.threshold[node] = split.threshold;
        t.left[node] = li as u32;
        t.right[node] = (li + 1) as u32;
        stack.push((li + 1, r, depth + 1));
        stack.push((li, l, depth + 1));
    }
    t
}

/// Bootstrap sample of `n` row indices, drawn with replacement.
pub(crate) fn bootstrap_rows(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..n)).collect()
}
