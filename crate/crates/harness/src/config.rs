//! Run configuration read from TOML.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use hyflux_core::basis::{Scheme, MAX_DEGREE};

use crate::HarnessError;

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MeshConfig {
    /// Periodic square with a stretched band replacing the central rows.
    Band {
        #[serde(default = "default_band_n")]
        n: usize,
        #[serde(default = "default_band_length")]
        length: f64,
        #[serde(default = "default_band_layers")]
        layers: usize,
        #[serde(default = "default_band_ratio")]
        ratio: f64,
    },
    Uniform {
        nx: usize,
        ny: usize,
        lx: f64,
        ly: f64,
    },
    Annulus {
        n_theta: usize,
        n_radial: usize,
        r_in: f64,
        r_out: f64,
        growth: f64,
    },
    File {
        path: PathBuf,
    },
}

fn default_band_n() -> usize {
    24
}
fn default_band_length() -> f64 {
    20.0
}
fn default_band_layers() -> usize {
    7
}
fn default_band_ratio() -> f64 {
    2.0
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LawConfig {
    Advection { velocity: [f64; 2] },
    Edac { theta: f64, nu: f64 },
}

#[derive(Debug, Clone, Copy, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum SchemeConfig {
    Fr,
    Hfr,
    Efr,
}

impl From<SchemeConfig> for Scheme {
    fn from(s: SchemeConfig) -> Scheme {
        match s {
            SchemeConfig::Fr => Scheme::Fr,
            SchemeConfig::Hfr => Scheme::Hfr,
            SchemeConfig::Efr => Scheme::Efr,
        }
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DiscretizationConfig {
    pub degree: usize,
    #[serde(default = "default_scheme")]
    pub scheme: SchemeConfig,
}

fn default_scheme() -> SchemeConfig {
    SchemeConfig::Hfr
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TimeConfig {
    pub dt: f64,
    pub t_end: f64,
    /// Shipped pair name (`imex32`, `imex53`, `sdirk2`), `rk4`, or a path to a tableau file.
    #[serde(default = "default_tableau")]
    pub tableau: String,
}

fn default_tableau() -> String {
    "imex32".into()
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PartitionConfig {
    /// Elements with stiffness indicator at most `cutoff` are implicit.
    #[serde(default)]
    pub cutoff: f64,
    #[serde(default = "default_bins")]
    pub bins: usize,
}

fn default_bins() -> usize {
    20
}

impl Default for PartitionConfig {
    fn default() -> Self {
        PartitionConfig { cutoff: 0.0, bins: default_bins() }
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub newton_atol: f64,
    pub newton_rtol: f64,
    pub newton_max_iterations: usize,
    pub freeze_steps: usize,
    pub gmres_restart: usize,
    pub gmres_rtol: f64,
    pub gmres_max_iterations: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            newton_atol: 1e-6,
            newton_rtol: 0.0,
            newton_max_iterations: 20,
            freeze_steps: 0,
            gmres_restart: 30,
            gmres_rtol: 1e-8,
            gmres_max_iterations: 500,
        }
    }
}

#[derive(Debug, Clone, Copy, Deserialize, PartialEq, Eq, Default)]
#[serde(rename_all = "snake_case")]
pub enum FilterRegion {
    #[default]
    All,
    Implicit,
    Explicit,
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub enabled: bool,
    pub alpha: f64,
    pub s: f64,
    pub eta_c: usize,
    pub t_ref: f64,
    pub region: FilterRegion,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig { enabled: false, alpha: 100.0, s: 1.0, eta_c: 3, t_ref: 1.0, region: FilterRegion::All }
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialConfig {
    /// `amplitude * exp(-|x - center|^2 / width)`, periodic images by minimum distance.
    Gaussian {
        center: [f64; 2],
        #[serde(default = "default_width")]
        width: f64,
        #[serde(default = "default_amplitude")]
        amplitude: f64,
        /// Sum over `(2k+1)^2` periodic images instead of the minimum image,
        /// which makes the profile smooth across the periodic boundaries.
        #[serde(default)]
        images: usize,
    },
    Constant {
        state: Vec<f64>,
    },
    /// Decaying vortex on a `2 pi` periodic square (EDAC only).
    TaylorGreen {
        #[serde(default = "default_amplitude")]
        amplitude: f64,
    },
}

fn default_width() -> f64 {
    20.0
}
fn default_amplitude() -> f64 {
    1.0
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    /// Field dump cadence in steps (0 writes only the final state).
    pub every: usize,
    pub vtk: bool,
    pub prefix: String,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { every: 0, vtk: true, prefix: "field".into() }
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub mesh: MeshConfig,
    pub law: LawConfig,
    /// Exterior state per boundary tag.
    #[serde(default)]
    pub boundary: HashMap<String, Vec<f64>>,
    pub discretization: DiscretizationConfig,
    pub time: TimeConfig,
    #[serde(default)]
    pub partition: PartitionConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub filter: FilterConfig,
    pub initial: InitialConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Read and validate; relative paths are resolved against the file's directory.
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?;
        let mut cfg: RunConfig = toml::from_str(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let MeshConfig::File { path } = &mut cfg.mesh {
            if path.is_relative() {
                *path = base.join(&*path);
            }
        }
        let t = Path::new(&cfg.time.tableau);
        if t.is_relative() && base.join(t).is_file() {
            cfg.time.tableau = base.join(t).to_string_lossy().into_owned();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if !(self.time.dt > 0.0 && self.time.dt.is_finite()) {
            return bad(format!("time.dt must be positive, got {}", self.time.dt));
        }
        if !(self.time.t_end >= 0.0 && self.time.t_end.is_finite()) {
            return bad(format!("time.t_end must be non-negative, got {}", self.time.t_end));
        }
        if self.discretization.degree > MAX_DEGREE {
            return bad(format!("discretization.degree {} exceeds {MAX_DEGREE}", self.discretization.degree));
        }
        if let MeshConfig::File { path } = &self.mesh {
            if !path.is_file() {
                return bad(format!("mesh file {} does not exist", path.display()));
            }
        }
        let t = &self.time.tableau;
        let named = ["imex32", "imex53", "sdirk2", "rk4"].contains(&t.as_str());
        if !named && !Path::new(t).is_file() {
            return bad(format!("time.tableau `{t}` is neither a shipped pair nor an existing file"));
        }
        if self.partition.cutoff.is_nan() {
            return bad("partition.cutoff is NaN".into());
        }
        let nv = match self.law {
            LawConfig::Advection { .. } => 1,
            LawConfig::Edac { .. } => 3,
        };
        if let InitialConfig::Constant { state } = &self.initial {
            if state.len() != nv {
                return bad(format!("initial.state has {} entries, the law has {nv} variables", state.len()));
            }
        }
        if matches!(self.initial, InitialConfig::TaylorGreen { .. }) && nv != 3 {
            return bad("initial kind taylor_green requires the edac law".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const EXAMPLE: &str = r#"
[mesh]
kind = "band"

[law]
kind = "advection"
velocity = [1.0, 1.0]

[discretization]
degree = 3
scheme = "efr"

[time]
dt = 0.01
t_end = 0.1
tableau = "imex53"

[partition]
cutoff = 0.15

[initial]
kind = "gaussian"
center = [10.0, 10.0]
"#;

    #[test]
    fn parses_with_defaults() {
        let c = RunConfig::from_toml(EXAMPLE).unwrap();
        assert_eq!(c.mesh, MeshConfig::Band { n: 24, length: 20.0, layers: 7, ratio: 2.0 });
        assert_eq!(c.discretization.scheme, SchemeConfig::Efr);
        assert_eq!(c.solver, SolverConfig::default());
        assert!(!c.filter.enabled);
        assert_eq!(c.initial, InitialConfig::Gaussian { center: [10.0, 10.0], width: 20.0, amplitude: 1.0, images: 0 });
    }

    #[test]
    fn rejects_bad_values() {
        let neg = EXAMPLE.replace("dt = 0.01", "dt = -0.01");
        assert!(matches!(RunConfig::from_toml(&neg), Err(HarnessError::Config(_))));
        let deg = EXAMPLE.replace("degree = 3", "degree = 12");
        assert!(RunConfig::from_toml(&deg).is_err());
        let typo = EXAMPLE.replace("cutoff", "cutof");
        assert!(RunConfig::from_toml(&typo).is_err());
        let tab = EXAMPLE.replace("imex53", "no-such-file.txt");
        assert!(RunConfig::from_toml(&tab).is_err());
        let tg = EXAMPLE.replace("kind = \"gaussian\"\ncenter = [10.0, 10.0]", "kind = \"taylor_green\"");
        assert!(RunConfig::from_toml(&tg).is_err());
    }
}
