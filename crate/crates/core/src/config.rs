//! Run configuration: a TOML key tree (dotted keys such as
//! `reaction.chi = 1.0` work at top level) mirroring [`SimParams`] plus
//! output settings. Unknown keys are rejected.

use crate::chemotaxis::ReactionParams;
use crate::driver::{DiagnosticsParams, Flags, InitialSpec, SimParams, TimeParams};
use crate::fluid::ForcingSpec;
use crate::grid::Domain;
use crate::operators::PoissonSolverConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Time between binary snapshots.
    pub snapshot_every: f64,
    /// Time between rewrites of the records file.
    pub record_every: f64,
    /// Time between checkpoints.
    pub checkpoint_every: f64,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
            snapshot_every: 10.0,
            record_every: 1.0,
            checkpoint_every: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudyConfig {
    pub eps_list: Vec<f64>,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            eps_list: vec![1e-1, 1e-2, 1e-3, 1e-4],
        }
    }
}

/// Full run description.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub scenario: String,
    pub sim: SimParams,
    pub output: OutputConfig,
    pub study: StudyConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scenario: "default".into(),
            sim: SimParams::default(),
            output: OutputConfig::default(),
            study: StudyConfig::default(),
        }
    }
}

/// On-disk layout: simulation keys live at top level next to `scenario`,
/// `output` and `study`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default = "default_scenario")]
    scenario: String,
    #[serde(default = "default_domain")]
    domain: Domain,
    #[serde(default)]
    reaction: ReactionParams,
    #[serde(default)]
    forcing: ForcingSpec,
    #[serde(default)]
    initial: InitialSpec,
    #[serde(default)]
    time: TimeParams,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    solver: PoissonSolverConfig,
    #[serde(default)]
    diagnostics: DiagnosticsParams,
    #[serde(default)]
    flags: Flags,
    #[serde(default)]
    output: OutputConfig,
    #[serde(default)]
    study: StudyConfig,
}

fn default_scenario() -> String {
    "default".into()
}

fn default_domain() -> Domain {
    SimParams::default().domain
}

impl From<RawConfig> for RunConfig {
    fn from(r: RawConfig) -> Self {
        Self {
            scenario: r.scenario,
            sim: SimParams {
                domain: r.domain,
                reaction: r.reaction,
                forcing: r.forcing,
                initial: r.initial,
                time: r.time,
                seed: r.seed,
                solver: r.solver,
                diagnostics: r.diagnostics,
                flags: r.flags,
            },
            output: r.output,
            study: r.study,
        }
    }
}

impl From<&RunConfig> for RawConfig {
    fn from(c: &RunConfig) -> Self {
        let s = c.sim.clone();
        Self {
            scenario: c.scenario.clone(),
            domain: s.domain,
            reaction: s.reaction,
            forcing: s.forcing,
            initial: s.initial,
            time: s.time,
            seed: s.seed,
            solver: s.solver,
            diagnostics: s.diagnostics,
            flags: s.flags,
            output: c.output.clone(),
            study: c.study.clone(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.sim.validate().map_err(ConfigError::Invalid)?;
        let o = &self.output;
        for (key, v) in [
            ("output.snapshot_every", o.snapshot_every),
            ("output.record_every", o.record_every),
            ("output.checkpoint_every", o.checkpoint_every),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(ConfigError::Invalid(format!("{key}: must be > 0, got {v}")));
            }
        }
        let eps = &self.study.eps_list;
        if eps.iter().any(|e| !(*e > 0.0)) {
            return Err(ConfigError::Invalid(
                "study.eps_list: entries must be > 0".into(),
            ));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(&RawConfig::from(self)).expect("config is always serializable")
    }
}

/// Parses and fully validates configuration text.
pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
    let cfg = RunConfig::from(raw);
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_config(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diagnostics::b0;

    #[test]
    fn minimal_config_uses_documented_defaults() {
        let cfg = parse_config("").unwrap();
        assert_eq!(cfg.sim.time.cfl_safety, 0.4);
        let r = &cfg.sim.reaction;
        let yp = cfg.sim.y_params().unwrap();
        assert_eq!(yp.b, 2.0 * b0(r.chi, r.kappa, r.mu) + 1.0);
        assert_eq!(cfg.scenario, "default");
    }

    #[test]
    fn dotted_keys_and_tables_parse() {
        let cfg = parse_config(
            r#"
scenario = "demo"
seed = 3
domain = { dim = 2, lengths = [2.0, 1.0], cells = [16, 8] }
reaction.chi = 0.5
reaction.eps = 1e-2
forcing.phi = { kind = "linear", g = [0.0, 0.1] }
forcing.force = { kind = "exponential", amplitude = 0.5, lambda = 1.0 }
initial.n = { kind = "noise", base = 1.0, amplitude = 0.2 }
time.t_end = 2.5
flags.implicit_diffusion = true
[output]
dir = "somewhere"
"#,
        )
        .unwrap();
        assert_eq!(cfg.scenario, "demo");
        assert_eq!(cfg.sim.domain.cells(), &[16, 8]);
        assert_eq!(cfg.sim.reaction.chi, 0.5);
        assert_eq!(cfg.sim.time.t_end, 2.5);
        assert!(cfg.sim.flags.implicit_diffusion);
        assert_eq!(cfg.output.dir, PathBuf::from("somewhere"));
    }

    #[test]
    fn config_round_trips() {
        let mut cfg = parse_config("reaction.kappa = 0.3\ndiagnostics.b = 7.0\n").unwrap();
        cfg.sim.time.dt_max = 0.1 + 0.2;
        let back = parse_config(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn errors_name_the_problem() {
        let e = parse_config("reaction.mu = 0.0").unwrap_err().to_string();
        assert!(e.contains("reaction.mu") && e.contains("mu > 0"), "{e}");
        let e = parse_config("domain = { dim = 2, lengths = [-1.0, 1.0], cells = [8, 8] }")
            .unwrap_err()
            .to_string();
        assert!(e.contains("positive"), "{e}");
        let e = parse_config("reaction.chii = 1.0").unwrap_err().to_string();
        assert!(e.contains("chii"), "{e}");
        let e = parse_config("bogus = 1").unwrap_err().to_string();
        assert!(e.contains("bogus"), "{e}");
        let e = parse_config("output.record_every = 0.0")
            .unwrap_err()
            .to_string();
        assert!(e.contains("output.record_every"), "{e}");
    }
}
