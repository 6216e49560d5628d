use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use dcem::control::{ControlProblem, DecoderTrainConfig, ExpertConfig};
use dcem::ebm::{InferenceConfig, InnerMethod, TrainConfig};
use dcem::optimizers::DcemConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;
use crate::objectives::ObjectiveKind;

/// Environment variable naming the default output root.
pub const OUT_ROOT_VAR: &str = "DCEM_OUT_DIR";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Name of the run directory below the output root.
    pub experiment: Option<String>,
    pub output_dir: Option<PathBuf>,
    pub optimize: OptimizeConfig,
    pub regress: RegressConfig,
    pub cartpole: CartpoleConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("bad config {}: {e}", path.display())))
    }

    /// `output_dir` if set, else `$DCEM_OUT_DIR/<experiment>` (root
    /// defaults to `runs`).
    pub fn run_dir(&self, default_name: &str) -> PathBuf {
        if let Some(dir) = &self.output_dir {
            return dir.clone();
        }
        let root = std::env::var_os(OUT_ROOT_VAR)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("runs"));
        root.join(self.experiment.as_deref().unwrap_or(default_name))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Cem,
    Dcem,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizeConfig {
    pub objective: ObjectiveKind,
    /// Minimizer of the shifted quadratic family.
    pub theta: f64,
    pub dim: usize,
    pub method: Method,
    pub mu0: f64,
    pub sigma0: f64,
    pub dcem: DcemConfig,
}

impl Default for OptimizeConfig {
    fn default() -> Self {
        Self {
            objective: ObjectiveKind::Quadratic,
            theta: 3.0,
            dim: 1,
            method: Method::Dcem,
            mu0: 0.0,
            sigma0: 5.0,
            dcem: DcemConfig::default(),
        }
    }
}

impl OptimizeConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        self.dcem.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.dim == 0 {
            return Err(CliError::Config("dim must be positive".into()));
        }
        if !(self.sigma0 > 0.0) {
            return Err(CliError::Config("sigma0 must be positive".into()));
        }
        match (self.method, self.dcem.tau) {
            (Method::Cem, t) if t != 0.0 => Err(CliError::Config(format!(
                "method cem needs tau = 0 (got {t}); use --method dcem for tau > 0"
            ))),
            (Method::Dcem, t) if !(t > 0.0) => Err(CliError::Config(format!(
                "method dcem needs tau > 0 (got {t}); use --method cem for tau = 0"
            ))),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurfaceGrid {
    pub x_min: f64,
    pub x_max: f64,
    pub nx: usize,
    pub y_min: f64,
    pub y_max: f64,
    pub ny: usize,
}

impl Default for SurfaceGrid {
    fn default() -> Self {
        Self {
            x_min: 0.0,
            x_max: 2.0 * PI,
            nx: 50,
            y_min: -6.0,
            y_max: 4.0,
            ny: 101,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegressConfig {
    pub methods: Vec<InnerMethod>,
    pub train: TrainConfig,
    /// Shared inner-solver settings; `method` is overridden per run.
    pub inference: InferenceConfig,
    pub surface: SurfaceGrid,
    pub ablation_iterations: Vec<usize>,
    pub probe_delta: f64,
}

impl Default for RegressConfig {
    fn default() -> Self {
        Self {
            methods: vec![InnerMethod::UnrolledGd, InnerMethod::Dcem],
            train: TrainConfig::default(),
            inference: InferenceConfig::default(),
            surface: SurfaceGrid::default(),
            ablation_iterations: vec![1, 10, 20, 30],
            probe_delta: 0.05,
        }
    }
}

impl RegressConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        if self.methods.is_empty() {
            return Err(CliError::Config("no inner methods selected".into()));
        }
        let g = &self.surface;
        if g.nx < 2 || g.ny < 2 || !(g.x_min < g.x_max) || !(g.y_min < g.y_max) {
            return Err(CliError::Config("surface grid needs at least 2x2 increasing points".into()));
        }
        if !(self.probe_delta > 0.0) {
            return Err(CliError::Config("probe_delta must be positive".into()));
        }
        self.train.validate().map_err(|e| CliError::Config(e.to_string()))?;
        for &m in &self.methods {
            self.inference_for(m)
                .validate()
                .map_err(|e| CliError::Config(e.to_string()))?;
        }
        Ok(())
    }

    pub fn inference_for(&self, method: InnerMethod) -> InferenceConfig {
        InferenceConfig {
            method,
            ..self.inference.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub n_zs: Vec<usize>,
    pub taus: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Worker threads for ablation cells; 0 uses every available core.
    pub workers: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            n_zs: vec![2, 4, 16],
            taus: vec![1.0, 0.1, 0.0],
            seeds: vec![0, 1, 2],
            workers: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CartpoleConfig {
    pub problem: ControlProblem,
    pub train: DecoderTrainConfig,
    pub expert: ExpertConfig,
    pub expert_seed: u64,
    pub surface_resolution: usize,
    /// Validation states whose planned trajectories are dumped.
    pub trajectories: usize,
    pub ablation: AblationConfig,
}

impl Default for CartpoleConfig {
    fn default() -> Self {
        Self {
            problem: ControlProblem::default(),
            train: DecoderTrainConfig::default(),
            expert: ExpertConfig::default(),
            expert_seed: 0,
            surface_resolution: 50,
            trajectories: 4,
            ablation: AblationConfig::default(),
        }
    }
}

impl CartpoleConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        self.train.validate().map_err(|e| CliError::Config(e.to_string()))?;
        let e = &self.expert;
        if e.n_elite == 0 || e.n_elite > e.n_samples || e.n_iter == 0 {
            return Err(CliError::Config("expert needs 0 < n_elite <= n_samples and n_iter > 0".into()));
        }
        if self.problem.horizon == 0 {
            return Err(CliError::Config("horizon must be positive".into()));
        }
        if self.surface_resolution == 1 {
            return Err(CliError::Config("surface_resolution must be 0 (off) or at least 2".into()));
        }
        Ok(())
    }
}
