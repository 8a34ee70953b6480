//! Estimation library for state-dependent tail risk in firm-month equity panels.
//!
//! The crate is organised by pipeline stage:
//!
//! * [`panel`]: firm-month data model, variable construction, lagging and
//!   standardization.
//! * [`regime`]: volume/volatility weighted market return and the
//!   drawdown-based stress flag.
//! * [`crash`]: crash indicators, regime-split logits with month-clustered
//!   inference, odds ratios and quintile gaps.
//! * [`quantile`]: left-tail quantile regression with a stratified
//!   month-block bootstrap.
//! * [`learners`]: Lasso, random forest and gradient boosting nuisance
//!   learners with cross-validated tuning.
//! * [`dml`]: cross-fitted partialling-out double machine learning.
//! * [`synth`]: synthetic panels with known ground truth and a Monte Carlo
//!   harness.
//! * [`pipeline`]: the preprocessing chain shared by every estimator.

pub mod crash;
pub mod design;
pub mod dml;
pub mod error;
pub mod learners;
pub mod linalg;
pub mod month;
pub mod panel;
pub mod pipeline;
pub mod quantile;
pub mod regime;
pub mod rng;
pub mod stats;
pub mod synth;

pub use error::{Error, Result};
pub use month::Month;
pub use panel::{FirmMonthRow, Fundamentals, PanelDataset};
pub use regime::RegimeSeries;

/// Version tag written into every serialized artifact.
pub const SCHEMA_VERSION: &str = "1";
