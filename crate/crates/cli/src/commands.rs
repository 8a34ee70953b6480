use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::Serialize;
use tailrisk::crash::{threshold_sweep, write_logit_csv, BootSettings, QuintileGap, ThresholdSweep};
use tailrisk::dml::{dml_matrix, pillar_matrix, write_dml_csv, DmlReport};
use tailrisk::panel::{read_panel_path, write_panel_csv, ColumnReport, StandardizeReport};
use tailrisk::pipeline::{prepare, Prepared};
use tailrisk::quantile::{quantile_table, write_quantile_csv};
use tailrisk::regime::{regime_summary, write_histogram_csv, write_regime_csv, MarketSeries, RegimeSummary};
use tailrisk::synth::{generate_panel, monte_carlo};

use crate::config::RunConfig;
use crate::output::OutDir;
use crate::CliError;

const HISTOGRAM_BINS: usize = 20;

/// Count of non-fatal problems a stage reported on standard error.
pub type Warnings = usize;

fn warn(stage: &str, msg: &str) {
    eprintln!("warning [{stage}]: {msg}");
}

pub fn load_prepared(cfg: &RunConfig) -> Result<Prepared, CliError> {
    let raw = read_panel_path(cfg.panel_path()?)?;
    Ok(prepare(&raw, &cfg.prepare)?)
}

#[derive(Serialize)]
struct StressReport<'a> {
    schema_version: &'a str,
    summary: RegimeSummary,
    market: &'a MarketSeries,
    missing: &'a [ColumnReport],
    standardize: &'a StandardizeReport,
}

pub fn stress(prep: &Prepared, out: &mut OutDir) -> Result<Warnings, CliError> {
    let summary = regime_summary(&prep.regime, HISTOGRAM_BINS);
    out.write_csv("regime.csv", |w| write_regime_csv(&prep.regime, w))?;
    out.write_csv("regime_histogram.csv", |w| write_histogram_csv(&summary, w))?;
    let mut warnings = 0;
    if summary.degenerate {
        warn("stress", "every month has the same market return; all months are flagged");
        warnings += 1;
    }
    for m in &prep.market.excluded {
        warn("stress", &format!("month {} excluded: {} eligible firms", m.month, m.n_eligible));
        warnings += 1;
    }
    out.write_json(
        "regime_summary.json",
        &StressReport {
            schema_version: tailrisk::SCHEMA_VERSION,
            summary,
            market: &prep.market,
            missing: &prep.missing,
            standardize: &prep.standardize,
        },
    )?;
    Ok(warnings)
}

fn write_quintiles_csv(sweep: &ThresholdSweep, w: &mut Vec<u8>) -> tailrisk::Result<()> {
    let mut w = csv::Writer::from_writer(w);
    w.write_record([
        "threshold", "quintile", "n_stress", "stress_rate", "n_non_stress", "non_stress_rate",
        "gap_pp", "gap_lower", "gap_upper",
    ])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for s in &sweep.sections {
        if let Some(QuintileGap { quintiles, gap_pp, ci_lower, ci_upper, .. }) = &s.descriptives {
            for q in quintiles {
                w.write_record([
                    s.threshold.to_string(),
                    (q.quintile + 1).to_string(),
                    q.n_stress.to_string(),
                    opt(q.stress_rate),
                    q.n_non_stress.to_string(),
                    opt(q.non_stress_rate),
                    gap_pp.to_string(),
                    ci_lower.to_string(),
                    ci_upper.to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn crash(cfg: &RunConfig, prep: &Prepared, out: &mut OutDir) -> Result<Warnings, CliError> {
    let boot = BootSettings {
        n_boot: cfg.crash.n_boot,
        seed: cfg.seed,
    };
    let sweep = threshold_sweep(
        &prep.panel,
        &prep.regime,
        &cfg.prepare.crash_thresholds,
        &cfg.crash.model,
        &boot,
    )?;
    let mut warnings = 0;
    let mut rows = Vec::new();
    for s in &sweep.sections {
        if let Some(e) = &s.descriptives_error {
            warn("crash", &format!("threshold {}: quintile gap failed: {e}", s.threshold));
            warnings += 1;
        }
        for c in &s.logits.cells {
            if let Some(e) = &c.error {
                warn(
                    "crash",
                    &format!("threshold {} spec {:?} {}: {e}", s.threshold, c.spec, c.regime.label()),
                );
                warnings += 1;
            }
        }
        rows.extend(s.logits.rows());
    }
    out.write_csv("crash_logits.csv", |w| write_logit_csv(&rows, w))?;
    out.write_csv("crash_quintiles.csv", |w| write_quintiles_csv(&sweep, w))?;
    out.write_json("crash.json", &sweep)?;
    Ok(warnings)
}

pub fn quantile(cfg: &RunConfig, prep: &Prepared, out: &mut OutDir) -> Result<Warnings, CliError> {
    let table = quantile_table(&prep.panel, &prep.regime, &cfg.quantile.spec, &cfg.quantile.model)?;
    let mut warnings = 0;
    for r in &table.rows {
        if r.n_failed > 0 {
            warn("quantile", &format!("tau {}: {} of {} replicates failed", r.tau, r.n_failed, table.n_boot));
            warnings += 1;
        }
        if !r.point_optimal {
            warn("quantile", &format!("tau {}: point fit did not certify optimality", r.tau));
            warnings += 1;
        }
    }
    out.write_csv("quantile.csv", |w| write_quantile_csv(&table, w))?;
    out.write_json("quantile.json", &table)?;
    Ok(warnings)
}

fn report_failures(report: &DmlReport) -> Warnings {
    for c in &report.cells {
        if let Err(e) = &c.result {
            warn(
                "dml",
                &format!("{} {} {} {}: {e}", c.regime.label(), c.outcome, c.treatment, c.learner),
            );
        }
    }
    report.failures()
}

pub fn dml(cfg: &RunConfig, prep: &Prepared, out: &mut OutDir) -> Result<Warnings, CliError> {
    let plan = &cfg.dml.plan;
    let report = dml_matrix(&prep.panel, &prep.regime, &plan.configs());
    let mut warnings = report_failures(&report);
    out.write_csv("dml.csv", |w| write_dml_csv(&report, w))?;
    out.write_json("dml.json", &report)?;
    if cfg.dml.pillars {
        let pillars = pillar_matrix(&prep.panel, &prep.regime, plan)?;
        warnings += report_failures(&pillars);
        out.write_csv("dml_pillars.csv", |w| write_dml_csv(&pillars, w))?;
        out.write_json("dml_pillars.json", &pillars)?;
    }
    Ok(warnings)
}

/// Writes one generated panel to `panel_out` and, when the config names an
/// estimator, scores it over the configured replications.
pub fn simulate(cfg: &RunConfig, out: &mut OutDir, panel_out: Option<&Path>) -> Result<Warnings, CliError> {
    let dgp = cfg.dgp()?;
    let sim = cfg.simulate.as_ref().expect("dgp() checked the section");
    if let Some(path) = panel_out {
        let (panel, _) = generate_panel(&dgp)?;
        let mut buf = Vec::new();
        write_panel_csv(&panel, &mut buf)?;
        std::fs::write(path, &buf)
            .map_err(|e| CliError::Input(format!("cannot write {}: {e}", path.display())))?;
    }
    let Some(estimator) = &sim.estimator else {
        if panel_out.is_none() {
            return Err(CliError::Input("[simulate] has no estimator and no --panel-out was given".into()));
        }
        return Ok(0);
    };
    let clock = Instant::now();
    let result = monte_carlo(&dgp, &cfg.prepare, estimator, sim.replications)?;
    let _ = writeln!(
        std::io::stderr(),
        "simulate: {} replications in {:.1}s ({:.3}s each)",
        sim.replications,
        clock.elapsed().as_secs_f64(),
        result.wall_time_per_rep
    );
    for f in &result.failures {
        warn("simulate", f);
    }
    out.write_json("simulation.json", &result)?;
    Ok(result.n_failed)
}
