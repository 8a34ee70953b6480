//! Run configuration read from a single TOML file.
//!
//! Relative paths are resolved against the directory holding the config
//! file, so a config and its inputs can be moved together.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tailrisk::crash::CrashConfig;
use tailrisk::dml::DmlPlan;
use tailrisk::pipeline::PrepareOptions;
use tailrisk::quantile::{QuantileModel, QuantileSpec};
use tailrisk::synth::{DgpSpec, EstimatorSpec};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed. Every stage seed is taken from it.
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub input: InputConfig,
    #[serde(default)]
    pub prepare: PrepareOptions,
    #[serde(default)]
    pub crash: CrashSection,
    #[serde(default)]
    pub quantile: QuantileSection,
    #[serde(default)]
    pub dml: DmlSection,
    #[serde(default)]
    pub simulate: Option<SimulateSection>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputConfig {
    pub panel: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrashSection {
    /// Replicates for the quintile-gap interval.
    pub n_boot: usize,
    pub model: CrashConfig,
}

impl Default for CrashSection {
    fn default() -> Self {
        CrashSection {
            n_boot: 800,
            model: CrashConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantileSection {
    pub spec: QuantileSpec,
    pub model: QuantileModel,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DmlSection {
    pub plan: DmlPlan,
    /// Also run the aggregate and pillar treatments under the Lasso.
    pub pillars: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSection {
    /// Path to a DGP spec file; mutually exclusive with `dgp`.
    #[serde(default)]
    pub dgp_file: Option<PathBuf>,
    #[serde(default)]
    pub dgp: Option<DgpSpec>,
    /// Estimator to score; without one, `simulate` only writes a panel.
    #[serde(default)]
    pub estimator: Option<EstimatorSpec>,
    #[serde(default = "default_replications")]
    pub replications: usize,
}

fn default_replications() -> usize {
    200
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Input(format!("config: {e}")))
    }

    /// Reads `path` and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Input(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = cfg.input.panel.as_mut() {
            resolve(p);
        }
        if let Some(p) = cfg.out_dir.as_mut() {
            resolve(p);
        }
        if let Some(p) = cfg.simulate.as_mut().and_then(|s| s.dgp_file.as_mut()) {
            resolve(p);
        }
        Ok(cfg)
    }

    /// Pushes the master seed into every stage.
    pub fn apply_seed(&mut self) {
        self.quantile.spec.seed = self.seed;
        self.dml.plan.seed = self.seed;
    }

    pub fn panel_path(&self) -> Result<&Path, CliError> {
        let p = self
            .input
            .panel
            .as_deref()
            .ok_or_else(|| CliError::Input("config has no [input] panel path".into()))?;
        if !p.is_file() {
            return Err(CliError::Input(format!("input panel {} does not exist", p.display())));
        }
        Ok(p)
    }

    /// The DGP of the `[simulate]` section, from the file or inline table.
    pub fn dgp(&self) -> Result<DgpSpec, CliError> {
        let sim = self
            .simulate
            .as_ref()
            .ok_or_else(|| CliError::Input("config has no [simulate] section".into()))?;
        let mut spec = match (&sim.dgp_file, &sim.dgp) {
            (Some(path), None) => {
                let text = std::fs::read_to_string(path).map_err(|e| {
                    CliError::Input(format!("cannot read DGP spec {}: {e}", path.display()))
                })?;
                DgpSpec::from_toml(&text)?
            }
            (None, Some(d)) => d.clone(),
            _ => {
                return Err(CliError::Input(
                    "[simulate] needs exactly one of dgp_file and dgp".into(),
                ))
            }
        };
        spec.seed = self.seed;
        spec.validate()?;
        Ok(spec)
    }
}
