//! Conditional quantile regression of excess returns on ESG, the stress
//! flag, their interaction and controls, with stratified month-block
//! bootstrap percentile intervals.

mod bootstrap;
mod solver;
mod table;

pub use bootstrap::{replicate_rows, stratified_month_block_bootstrap, MonthBlockBootstrap};
pub use solver::{
    check_loss, fit_quantile, fit_quantile_from, pinball_loss, QuantileFit, QuantileOptions,
    SolverInfo,
};
pub use table::{
    quantile_design, quantile_table, write_quantile_csv, Interval, QuantileModel, QuantileRow,
    QuantileSpec, QuantileTable, INTERACTION_LABEL, STRESS_LABEL, TREATMENT_LABEL,
};

