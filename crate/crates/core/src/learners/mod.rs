//! Nuisance regression learners: coordinate-descent Lasso, bagged CART
//! forests and least-squares gradient boosting, with K-fold tuning.

mod cv;
mod lasso;
mod tree;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::stream_rng;

pub use cv::{cv_select, fold_labels, CvResult};
pub use lasso::{lambda_grid, soft_threshold, SuffStats, LASSO_TOL};
pub use tree::{best_split_on, Split, Tree};

pub(crate) use lasso::Standardized;
use tree::{bootstrap_rows, grow_tree, TreeParams};

/// Format tag of serialized learners.
pub const LEARNER_FORMAT: u32 = 1;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LearnerKind {
    Lasso,
    RandomForest,
    Gbm,
}

impl LearnerKind {
    pub fn label(self) -> &'static str {
        match self {
            LearnerKind::Lasso => "lasso",
            LearnerKind::RandomForest => "random_forest",
            LearnerKind::Gbm => "gbm",
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForestParams {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    pub feature_fraction: f64,
    /// Draw a bootstrap sample per tree; off grows every tree on all rows.
    pub bootstrap: bool,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams {
            n_trees: 200,
            max_depth: 6,
            min_leaf: 5,
            feature_fraction: 1.0 / 3.0,
            bootstrap: true,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GbmParams {
    pub n_rounds: usize,
    pub learning_rate: f64,
    pub max_depth: usize,
    pub min_leaf: usize,
}

impl Default for GbmParams {
    fn default() -> Self {
        GbmParams {
            n_rounds: 200,
            learning_rate: 0.1,
            max_depth: 2,
            min_leaf: 5,
        }
    }
}

/// One hyperparameter setting.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Hyper {
    Lasso { lambda: f64 },
    RandomForest(ForestParams),
    Gbm(GbmParams),
}

impl Hyper {
    pub fn kind(&self) -> LearnerKind {
        match self {
            Hyper::Lasso { .. } => LearnerKind::Lasso,
            Hyper::RandomForest(_) => LearnerKind::RandomForest,
            Hyper::Gbm(_) => LearnerKind::Gbm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            Hyper::Lasso { lambda } => *lambda >= 0.0 && lambda.is_finite(),
            Hyper::RandomForest(f) => {
                f.n_trees > 0 && f.min_leaf > 0 && f.feature_fraction > 0.0 && f.feature_fraction <= 1.0
            }
            Hyper::Gbm(g) => g.learning_rate > 0.0 && g.learning_rate <= 1.0 && g.min_leaf > 0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid hyperparameters {self:?}")))
        }
    }

    /// Sort key where smaller means more regularized.
    pub(crate) fn complexity(&self) -> Vec<f64> {
        match self {
            Hyper::Lasso { lambda } => vec![-lambda],
            Hyper::RandomForest(f) => vec![
                f.max_depth as f64,
                f.n_trees as f64,
                -(f.min_leaf as f64),
                f.feature_fraction,
            ],
            Hyper::Gbm(g) => vec![
                g.n_rounds as f64,
                g.max_depth as f64,
                g.learning_rate,
                -(g.min_leaf as f64),
            ],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Model {
    Linear { intercept: f64, coef: Vec<f64> },
    /// `base + weight * sum(trees)`.
    Ensemble { base: f64, weight: f64, trees: Vec<Tree> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FittedLearner {
    pub format: u32,
    pub kind: LearnerKind,
    pub n_features: usize,
    pub hyper: Hyper,
    pub model: Model,
    pub in_sample_mse: f64,
    /// Lasso only: unpenalized fit on collinear columns, or coordinate
    /// descent hit its sweep limit.
    pub flagged: bool,
}

impl FittedLearner {
    pub fn predict_row(&self, x: &[f64]) -> f64 {
        match &self.model {
            Model::Linear { intercept, coef } => {
                intercept + coef.iter().zip(x).map(|(c, v)| c * v).sum::<f64>()
            }
            Model::Ensemble { base, weight, trees } => {
                base + weight * trees.iter().map(|t| t.predict_row(x)).sum::<f64>()
            }
        }
    }

    pub fn predict(&self, x: &Matrix) -> Result<Vec<f64>> {
        if x.ncols() != self.n_features {
            return Err(Error::invalid(format!(
                "learner trained on {} features, got {}",
                self.n_features,
                x.ncols()
            )));
        }
        Ok((0..x.nrows()).map(|i| self.predict_row(x.row(i))).collect())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: FittedLearner = serde_json::from_str(s)?;
        if f.format != LEARNER_FORMAT {
            return Err(Error::invalid(format!("unsupported learner format {}", f.format)));
        }
        Ok(f)
    }
}

fn mse(learner: &FittedLearner, x: &Matrix, y: &[f64]) -> f64 {
    let n = y.len().max(1) as f64;
    (0..y.len())
        .map(|i| (y[i] - learner.predict_row(x.row(i))).powi(2))
        .sum::<f64>()
        / n
}

fn check_sample(x: &Matrix, y: &[f64]) -> Result<()> {
    if x.nrows() != y.len() {
        return Err(Error::invalid("design and target lengths differ"));
    }
    if y.is_empty() {
        return Err(Error::Insufficient("empty training sample".into()));
    }
    Ok(())
}

/// Lasso fitted from sufficient statistics along a decreasing penalty path,
/// warm-starting each fit from the previous one.
pub fn lasso_path_stats(stats: &SuffStats, lambdas: &[f64]) -> Vec<FittedLearner> {
    let st = Standardized::new(stats);
    let deficient = st.rank_deficient();
    let mut b = vec![0.0; stats.p()];
    let mut order: Vec<usize> = (0..lambdas.len()).collect();
    order.sort_by(|&a, &c| lambdas[c].total_cmp(&lambdas[a]));
    let mut out: Vec<Option<FittedLearner>> = vec![None; lambdas.len()];
    for k in order {
        let lambda = lambdas[k];
        let (_, converged) = st.descend(lambda, &mut b);
        let (intercept, coef) = st.unscale(&b);
        let sse = stats.sse(intercept, &coef);
        out[k] = Some(FittedLearner {
            format: LEARNER_FORMAT,
            kind: LearnerKind::Lasso,
            n_features: stats.p(),
            hyper: Hyper::Lasso { lambda },
            model: Model::Linear { intercept, coef },
            in_sample_mse: sse / stats.n,
            flagged: !converged || (lambda == 0.0 && deficient),
        });
    }
    out.into_iter().map(Option::unwrap).collect()
}

/// Penalty above which every slope is zero, for standardized columns and a
/// centered target: `max_j |x_j'(y - ybar)| / n`.
pub fn lasso_lambda_max(x: &Matrix, y: &[f64]) -> f64 {
    Standardized::new(&SuffStats::from_rows(x, y, 0..y.len())).lambda_max()
}

/// Lasso with unpenalized intercept on internally standardized columns.
/// Coefficients are returned on the original scale.
pub fn fit_lasso(x: &Matrix, y: &[f64], lambda: f64) -> Result<FittedLearner> {
    check_sample(x, y)?;
    Hyper::Lasso { lambda }.validate()?;
    let stats = SuffStats::from_rows(x, y, 0..y.len());
    Ok(lasso_path_stats(&stats, &[lambda]).remove(0))
}

pub fn fit_forest(x: &Matrix, y: &[f64], params: &ForestParams, seed: u64) -> Result<FittedLearner> {
    check_sample(x, y)?;
    let hyper = Hyper::RandomForest(*params);
    hyper.validate()?;
    let n = y.len();
    if n < 2 * params.min_leaf {
        return Err(Error::Insufficient(format!(
            "{n} rows cannot fill two leaves of {}",
            params.min_leaf
        )));
    }
    let p = x.ncols();
    let tp = TreeParams {
        max_depth: params.max_depth,
        min_leaf: params.min_leaf,
        n_features: ((params.feature_fraction * p as f64 - 1e-9).ceil() as usize).clamp(1, p.max(1)),
    };
    let trees: Vec<Tree> = (0..params.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = stream_rng(seed, t as u64);
            let rows = if params.bootstrap {
                bootstrap_rows(n, &mut rng)
            } else {
                (0..n).collect()
            };
            grow_tree(x, y, rows, tp, &mut rng)
        })
        .collect();
    let mut f = FittedLearner {
        format: LEARNER_FORMAT,
        kind: LearnerKind::RandomForest,
        n_features: p,
        hyper,
        model: Model::Ensemble {
            base: 0.0,
            weight: 1.0 / params.n_trees as f64,
            trees,
        },
        in_sample_mse: 0.0,
        flagged: false,
    };
    f.in_sample_mse = mse(&f, x, y);
    Ok(f)
}

/// Stagewise least-squares boosting. The seed is accepted for interface
/// symmetry; the fit uses every row and feature and is deterministic.
pub fn fit_gbm(x: &Matrix, y: &[f64], params: &GbmParams, _seed: u64) -> Result<FittedLearner> {
    check_sample(x, y)?;
    let hyper = Hyper::Gbm(*params);
    hyper.validate()?;
    let n = y.len();
    let base = y.iter().sum::<f64>() / n as f64;
    let mut pred = vec![base; n];
    let mut resid = vec![0.0; n];
    let tp = TreeParams {
        max_depth: params.max_depth,
        min_leaf: params.min_leaf,
        n_features: x.ncols(),
    };
    // tree growth draws no random numbers when all features are scanned
    let mut rng = stream_rng(0, 0);
    let mut trees = Vec::with_capacity(params.n_rounds);
    for _ in 0..params.n_rounds {
        for i in 0..n {
            resid[i] = y[i] - pred[i];
        }
        let tree = grow_tree(x, &resid, (0..n).collect(), tp, &mut rng);
        for (i, p) in pred.iter_mut().enumerate() {
            *p += params.learning_rate * tree.predict_row(x.row(i));
        }
        trees.push(tree);
    }
    let mse = pred.iter().zip(y).map(|(p, v)| (v - p).powi(2)).sum::<f64>() / n as f64;
    Ok(FittedLearner {
        format: LEARNER_FORMAT,
        kind: LearnerKind::Gbm,
        n_features: x.ncols(),
        hyper,
        model: Model::Ensemble {
            base,
            weight: params.learning_rate,
            trees,
        },
        in_sample_mse: mse,
        flagged: false,
    })
}

pub fn fit(x: &Matrix, y: &[f64], hyper: &Hyper, seed: u64) -> Result<FittedLearner> {
    match hyper {
        Hyper::Lasso { lambda } => fit_lasso(x, y, *lambda),
        Hyper::RandomForest(p) => fit_forest(x, y, p, seed),
        Hyper::Gbm(p) => fit_gbm(x, y, p, seed),
    }
}

/// A learner family with its tuning grid. Lasso grids are relative to the
/// training sample's `lambda_max` unless explicit penalties are given.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LearnerSpec {
    Lasso {
        #[serde(default = "default_n_lambda")]
        n_lambda: usize,
        #[serde(default = "default_min_ratio")]
        min_ratio: f64,
        #[serde(default)]
        lambdas: Option<Vec<f64>>,
    },
    RandomForest {
        #[serde(default = "default_forest_grid")]
        grid: Vec<ForestParams>,
    },
    Gbm {
        #[serde(default = "default_gbm_grid")]
        grid: Vec<GbmParams>,
    },
}

fn default_n_lambda() -> usize {
    30
}

fn default_min_ratio() -> f64 {
    1e-3
}

fn default_forest_grid() -> Vec<ForestParams> {
    vec![ForestParams::default()]
}

fn default_gbm_grid() -> Vec<GbmParams> {
    vec![GbmParams::default()]
}

impl LearnerSpec {
    pub fn lasso() -> Self {
        LearnerSpec::Lasso {
            n_lambda: default_n_lambda(),
            min_ratio: default_min_ratio(),
            lambdas: None,
        }
    }

    pub fn random_forest() -> Self {
        LearnerSpec::RandomForest {
            grid: default_forest_grid(),
        }
    }

    pub fn gbm() -> Self {
        LearnerSpec::Gbm {
            grid: default_gbm_grid(),
        }
    }

    pub fn kind(&self) -> LearnerKind {
        match self {
            LearnerSpec::Lasso { .. } => LearnerKind::Lasso,
            LearnerSpec::RandomForest { .. } => LearnerKind::RandomForest,
            LearnerSpec::Gbm { .. } => LearnerKind::Gbm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            LearnerSpec::Lasso {
                n_lambda,
                min_ratio,
                lambdas,
            } => {
                if let Some(l) = lambdas {
                    if l.is_empty() {
                        return Err(Error::invalid("empty lambda grid"));
                    }
                    for &lambda in l {
                        Hyper::Lasso { lambda }.validate()?;
                    }
                } else if *n_lambda == 0 || !(*min_ratio > 0.0 && *min_ratio <= 1.0) {
                    return Err(Error::invalid("lasso grid needs n_lambda > 0 and min_ratio in (0, 1]"));
                }
            }
            LearnerSpec::RandomForest { grid } => {
                if grid.is_empty() {
                    return Err(Error::invalid("empty forest grid"));
                }
                for g in grid {
                    Hyper::RandomForest(*g).validate()?;
                }
            }
            LearnerSpec::Gbm { grid } => {
                if grid.is_empty() {
                    return Err(Error::invalid("empty gbm grid"));
                }
                for g in grid {
                    Hyper::Gbm(*g).validate()?;
                }
            }
        }
        Ok(())
    }

    /// Concrete grid for a training sample.
    pub fn grid(&self, x: &Matrix, y: &[f64]) -> Vec<Hyper> {
        match self {
            LearnerSpec::Lasso {
                n_lambda,
                min_ratio,
                lambdas,
            } => {
                let l = lambdas
                    .clone()
                    .unwrap_or_else(|| lambda_grid(lasso_lambda_max(x, y), *n_lambda, *min_ratio));
                l.into_iter().map(|lambda| Hyper::Lasso { lambda }).collect()
            }
            LearnerSpec::RandomForest { grid } => grid.iter().map(|g| Hyper::RandomForest(*g)).collect(),
            LearnerSpec::Gbm { grid } => grid.iter().map(|g| Hyper::Gbm(*g)).collect(),
        }
    }
}

/// Tunes `spec` by cross-validation on the sample and refits the selected
/// setting on all of it.
pub fn fit_tuned(
    x: &Matrix,
    y: &[f64],
    spec: &LearnerSpec,
    folds: usize,
    seed: u64,
    groups: Option<&[i64]>,
) -> Result<(FittedLearner, CvResult)> {
    check_sample(x, y)?;
    let grid = spec.grid(x, y);
    let cv = cv_select(x, y, &grid, folds, seed, groups)?;
    let f = fit(x, y, &cv.selected, crate::rng::derive_seed(seed, &[u64::MAX]))?;
    Ok((f, cv))
}

