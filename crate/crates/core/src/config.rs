//! Scenario files: one TOML document per run, versioned by
//! `schema_version`, with unknown keys rejected.
//!
//! ```toml
//! schema_version = 1
//! seed = 7
//! output_dir = "out/shear_ramp"   # optional
//! dump_stride = 4                 # 0 dumps only the final state
//!
//! [grid]          # origin, extents, nodes per axis
//! [material]      # wells, exponents p q r s, c, eps_reg, rho?, diss_weights
//! [loading]       # clamped_faces, body_force?, boundary_motion?
//! [time]          # horizon, steps
//! [solver]        # optional overrides of the defaults
//! [certificates]  # ciarlet_necas, voxels_per_cell, hencl_koskela_delta?, injectivity, [certificates.stability]
//! ```

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use thiserror::Error;

use crate::energy::{BodyForce, BoundaryMotion, LoadingProgram, Smoothing};
use crate::evolution::{CertificateOptions, EvolutionSetup, TimeGrid};
use crate::grid::{Face, Grid, GridSpec};
use crate::material::{MaterialError, MaterialParams, MaterialSpec};
use crate::solver::SolverParams;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("invalid scenario:\n  - {}", .0.join("\n  - "))]
    Validation(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadingSection {
    pub clamped_faces: Vec<Face>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub body_force: Option<BodyForce>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boundary_motion: Option<BoundaryMotion>,
}

/// Solver overrides; anything unset takes the value from
/// [`SolverParams::defaults_for`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_iterations: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gradient_tolerance: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage_tolerance_factor: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<Vec<Smoothing>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backtrack_factor: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub armijo: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub memory: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub restart_count: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub restart_amplitude: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub record_iterations: Option<bool>,
}

impl SolverSection {
    pub fn resolve(&self, mat: &MaterialSpec, grid: &Grid) -> SolverParams {
        let mut p = SolverParams::defaults_for(mat, grid);
        macro_rules! take {
            ($($f:ident),*) => { $( if let Some(v) = self.$f.clone() { p.$f = v; } )* };
        }
        take!(
            max_iterations,
            gradient_tolerance,
            stage_tolerance_factor,
            schedule,
            backtrack_factor,
            armijo,
            memory,
            restart_count,
            restart_amplitude,
            record_iterations
        );
        p
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    /// Dump fields every this many steps; 0 dumps only the final state.
    #[serde(default)]
    pub dump_stride: usize,
    pub grid: GridSpec,
    pub material: MaterialParams,
    pub loading: LoadingSection,
    pub time: TimeGrid,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub certificates: CertificateOptions,
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
    (line, column)
}

/// Parse and validate a scenario file.
pub fn parse_config(path: &Path) -> Result<ScenarioConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
    parse_config_str(&text)
}

pub fn parse_config_str(text: &str) -> Result<ScenarioConfig, ConfigError> {
    let cfg: ScenarioConfig = toml::from_str(text).map_err(|e| {
        let (line, column) = e.span().map_or((0, 0), |s| line_col(text, s.start));
        ConfigError::Parse { line, column, message: e.message().to_string() }
    })?;
    let errs = cfg.validate();
    if errs.is_empty() {
        Ok(cfg)
    } else {
        Err(ConfigError::Validation(errs))
    }
}

impl ScenarioConfig {
    /// Every violated constraint, not just the first.
    pub fn validate(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.schema_version != SCHEMA_VERSION {
            v.push(format!("schema_version {} is not supported (expected {SCHEMA_VERSION})", self.schema_version));
        }
        let grid = match Grid::new(self.grid.clone()) {
            Ok(g) => Some(g),
            Err(e) => {
                v.push(format!("grid: {e}"));
                None
            }
        };
        let mat = match MaterialSpec::new(self.material.clone()) {
            Ok(m) => Some(m),
            Err(MaterialError::Invalid(list)) => {
                v.extend(list.into_iter().map(|m| format!("material: {m}")));
                None
            }
            Err(e) => {
                v.push(format!("material: {e}"));
                None
            }
        };
        let c = &self.certificates;
        if let (true, Some(m)) = (c.any_injectivity(), &mat) {
            v.extend(
                m.injectivity_regime_violations()
                    .into_iter()
                    .map(|msg| format!("material: {msg} (required when injectivity certificates are enabled)")),
            );
        }
        if let Some(d) = c.hencl_koskela_delta {
            if !(d > 2.0 && d.is_finite()) {
                v.push(format!("certificates: hencl_koskela_delta = {d} must exceed 2"));
            }
        }
        if !(c.voxels_per_cell >= 1.0 && c.voxels_per_cell.is_finite()) {
            v.push(format!("certificates: voxels_per_cell = {} must be at least 1", c.voxels_per_cell));
        }
        if c.stability.perturbation_amplitudes.iter().any(|a| !(*a > 0.0 && a.is_finite())) {
            v.push("certificates.stability: perturbation amplitudes must be positive".into());
        }
        if !(self.time.horizon > 0.0 && self.time.horizon.is_finite()) {
            v.push(format!("time: horizon {} must be positive", self.time.horizon));
        }
        if self.time.steps == 0 {
            v.push("time: steps must be at least 1".into());
        }
        v.extend(self.loading_program().validate().into_iter().map(|m| format!("loading: {m}")));
        if let (Some(g), Some(m)) = (&grid, &mat) {
            v.extend(self.solver.resolve(m, g).validate().into_iter().map(|m| format!("solver: {m}")));
        }
        v
    }

    pub fn loading_program(&self) -> LoadingProgram {
        LoadingProgram {
            horizon: self.time.horizon,
            clamped_faces: self.loading.clamped_faces.clone(),
            body_force: self.loading.body_force.clone(),
            boundary_motion: self.loading.boundary_motion.clone(),
        }
    }

    /// Assemble the evolution inputs; fails with the full violation list.
    pub fn setup(&self) -> Result<EvolutionSetup, ConfigError> {
        let errs = self.validate();
        if !errs.is_empty() {
            return Err(ConfigError::Validation(errs));
        }
        let grid = Arc::new(Grid::new(self.grid.clone()).expect("validated grid"));
        let material = MaterialSpec::new(self.material.clone()).expect("validated material");
        let solver = self.solver.resolve(&material, &grid);
        Ok(EvolutionSetup {
            grid,
            material,
            loading: self.loading_program(),
            time: self.time,
            solver,
            certificates: self.certificates.clone(),
            seed: self.seed,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("scenario config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
schema_version = 1
seed = 3

[grid]
origin = [0.0, 0.0, 0.0]
extents = [1.0, 1.0, 1.0]
nodes = [4, 4, 4]

[material]
p = 8.0
q = 2.0
r = 2.0
s = 8.5
c = 0.001
eps_reg = 0.001
diss_weights = [0.1, 0.1]

[[material.wells]]
label = "austenite"
u = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
w = 0.0

[[material.wells]]
label = "variant"
u = [[0.96, 0.0, 0.0], [0.0, 0.96, 0.0], [0.0, 0.0, 1.08]]
w = 0.02

[loading]
clamped_faces = ["x-", "x+"]

[time]
horizon = 1.0
steps = 2
"#;

    #[test]
    fn minimal_config_round_trips() {
        let cfg = parse_config_str(MINIMAL).unwrap();
        assert_eq!(cfg.certificates, CertificateOptions::default());
        let again = parse_config_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn unknown_key_reports_line() {
        let text = MINIMAL.replace("seed = 3", "seed = 3\nsede = 4");
        match parse_config_str(&text) {
            Err(ConfigError::Parse { line, message, .. }) => {
                assert_eq!(line, 4, "{message}");
                assert!(message.contains("sede"), "{message}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn collects_every_violation() {
        let text = MINIMAL
            .replace("s = 8.5", "s = 5.0")
            .replace("steps = 2", "steps = 0")
            .replace("[loading]\n", "[certificates]\nciarlet_necas = true\ninjectivity = true\nhencl_koskela_delta = 2.0\n\n[loading]\n");
        match parse_config_str(&text) {
            Err(ConfigError::Validation(v)) => {
                assert!(v.iter().any(|m| m.contains("2p/(p-6) = 8")), "{v:?}");
                assert!(v.iter().any(|m| m.contains("hencl_koskela_delta")), "{v:?}");
                assert!(v.iter().any(|m| m.contains("steps")), "{v:?}");
            }
            other => panic!("expected validation error, got {other:?}"),
        }
    }
}
