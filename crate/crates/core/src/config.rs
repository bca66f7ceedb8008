//! Experiment configuration, read from TOML.
//!
//! ```toml
//! [model]
//! total_mass = 100.0
//! wheel = { radius = 0.25, mass = 12.0, inertia = 0.375 }
//!
//! [[model.links]]
//! length = 0.55
//! lower = -1.5707963267948966
//! upper = 1.5707963267948966
//! mass = 70.0
//!
//! [experiment]
//! name = "default"
//! seed = 1
//! ```
//!
//! Every section and key is optional; missing ones take the defaults of
//! the seven-link model. Relative file paths resolve against the config
//! file's directory.

use std::path::{Path, PathBuf};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adrc::{BalanceOptions, ControllerConfig};
use crate::error::{Error, Result};
use crate::kinematics::{
    ChainGeometry, LinkSpec, WheelParams, DEFAULT_BASE_LIMIT, DEFAULT_BODY_LIMIT, DEFAULT_LINK_LENGTHS,
};
use crate::learner::LearningConfig;
use crate::mass::{BetaVector, DEFAULT_LINK_MASSES};
use crate::metalearn::{FilterOptions, Termination};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkConfig {
    pub length: f64,
    pub lower: f64,
    pub upper: f64,
    /// True link mass, kg.
    pub mass: f64,
    /// True CoM in the link frame, m. Defaults to mid-link on the link axis.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub com: Option<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Defaults to the sum of the link masses.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub total_mass: Option<f64>,
    pub wheel: WheelParams,
    pub links: Vec<LinkConfig>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let links = DEFAULT_LINK_LENGTHS
            .iter()
            .zip(DEFAULT_LINK_MASSES)
            .enumerate()
            .map(|(i, (&length, mass))| {
                let limit = if i == 0 { DEFAULT_BASE_LIMIT } else { DEFAULT_BODY_LIMIT };
                LinkConfig {
                    length,
                    lower: -limit,
                    upper: limit,
                    mass,
                    com: None,
                }
            })
            .collect();
        Self {
            total_mass: None,
            wheel: WheelParams::default(),
            links,
        }
    }
}

impl ModelConfig {
    pub fn total_mass(&self) -> f64 {
        self.total_mass
            .unwrap_or_else(|| self.links.iter().map(|l| l.mass).sum())
    }

    pub fn geometry(&self) -> Result<ChainGeometry> {
        let links = self
            .links
            .iter()
            .map(|l| LinkSpec {
                length: l.length,
                lower: l.lower,
                upper: l.upper,
            })
            .collect();
        ChainGeometry::new(links, self.total_mass(), self.wheel)
    }

    /// Ground-truth β.
    pub fn truth(&self) -> Result<BetaVector> {
        let mut v = DVector::zeros(4 * self.links.len());
        for (i, link) in self.links.iter().enumerate() {
            if !(link.mass > 0.0) {
                return Err(Error::InvalidParameter(format!("link {} mass must be positive", i + 1)));
            }
            let com = link.com.unwrap_or([link.length / 2.0, 0.0, 0.0]);
            for (k, c) in com.iter().enumerate() {
                v[4 * i + k] = link.mass * c;
            }
            v[4 * i + 3] = link.mass;
        }
        let beta = BetaVector::from_vector(v);
        let total = self.total_mass();
        if (beta.mass_sum() - total).abs() > 1e-9 * total {
            return Err(Error::InvalidParameter(format!(
                "link masses sum to {} kg but total_mass is {total} kg",
                beta.mass_sum()
            )));
        }
        Ok(beta)
    }
}

/// How balanced poses are obtained for learning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// Solve the balance angle under the truth directly.
    #[default]
    Analytic,
    /// Run the ADRC loop with the current estimate and use where it settles.
    Adrc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub n_poses: usize,
    pub n_betas: usize,
    /// Multiplicative noise for a single perturbed estimate.
    pub noise: f64,
    /// Multiplicative noise used while sampling the ensemble.
    pub ensemble_noise: f64,
    /// Lower end of the ensemble's probe-error window, m.
    pub target_error: f64,
    /// Held-out test poses.
    pub n_test: usize,
    /// Test poses used for ADRC runs during evaluation.
    pub adrc_poses: usize,
    pub data_source: DataSource,
    pub out: PathBuf,
    /// Locked pose for `simulate`; the base pitch entry is ignored.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pose: Option<Vec<f64>>,
    /// Separate model file; replaces the `[model]` section.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model_file: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pool_file: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ensemble_file: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub filtered_file: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta_file: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "default".into(),
            seed: 1,
            n_poses: 2000,
            n_betas: 100,
            noise: 0.2,
            ensemble_noise: 0.5,
            target_error: 0.02,
            n_test: 500,
            adrc_poses: 10,
            data_source: DataSource::Analytic,
            out: PathBuf::from("out"),
            pose: None,
            model_file: None,
            pool_file: None,
            ensemble_file: None,
            filtered_file: None,
            beta_file: None,
        }
    }
}

impl ExperimentConfig {
    fn input_files_mut(&mut self) -> [&mut Option<PathBuf>; 5] {
        [
            &mut self.model_file,
            &mut self.pool_file,
            &mut self.ensemble_file,
            &mut self.filtered_file,
            &mut self.beta_file,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterSection {
    pub termination: Termination,
    pub max_iterations: usize,
    /// Random-order baselines to run alongside `filter`, each with its own seed.
    pub baseline_runs: usize,
}

impl Default for FilterSection {
    fn default() -> Self {
        Self {
            termination: Termination::SelectionTime,
            max_iterations: 100_000,
            baseline_runs: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub model: ModelConfig,
    pub controller: ControllerConfig,
    pub balance: BalanceOptions,
    pub learning: LearningConfig,
    pub filter: FilterSection,
    pub experiment: ExperimentConfig,
}

/// Command-line values that replace config keys.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub n_poses: Option<usize>,
    pub n_betas: Option<usize>,
    pub noise: Option<f64>,
    pub eta: Option<f64>,
    pub x_tol: Option<f64>,
}

fn config_error(e: Error) -> Error {
    match e {
        Error::InvalidParameter(msg) => Error::Config(msg),
        Error::DimensionMismatch { what, expected, got } => {
            Error::Config(format!("{what}: expected {expected}, got {got}"))
        }
        other => other,
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: Config = toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        for file in cfg.experiment.input_files_mut() {
            if let Some(p) = file.as_mut() {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        if cfg.experiment.out.is_relative() {
            cfg.experiment.out = base.join(&cfg.experiment.out);
        }
        if let Some(model_path) = &cfg.experiment.model_file {
            let text = std::fs::read_to_string(model_path)
                .map_err(|e| Error::Config(format!("{}: {e}", model_path.display())))?;
            cfg.model = toml::from_str(&text).map_err(|e| Error::Parse {
                path: model_path.display().to_string(),
                msg: e.to_string(),
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        let e = &mut self.experiment;
        if let Some(v) = o.seed {
            e.seed = v;
        }
        if let Some(v) = &o.out {
            e.out = v.clone();
        }
        if let Some(v) = o.n_poses {
            e.n_poses = v;
        }
        if let Some(v) = o.n_betas {
            e.n_betas = v;
        }
        if let Some(v) = o.noise {
            e.noise = v;
        }
        if let Some(v) = o.eta {
            self.learning.eta = v;
        }
        if let Some(v) = o.x_tol {
            self.learning.x_tol = v;
        }
        self.validate()
    }

    /// Checks every field against the ranges its consumer accepts.
    pub fn validate(&self) -> Result<()> {
        let geom = self.model.geometry().map_err(config_error)?;
        self.model.truth().map_err(config_error)?;
        self.controller.validate().map_err(config_error)?;
        self.learning.validate().map_err(config_error)?;
        let e = &self.experiment;
        let bad = |what: &str| Err(Error::Config(what.to_string()));
        if e.n_poses == 0 {
            return bad("n_poses must be at least 1");
        }
        if e.n_betas == 0 {
            return bad("n_betas must be at least 1");
        }
        if e.n_test == 0 {
            return bad("n_test must be at least 1");
        }
        if !(e.noise > 0.0 && e.noise < 1.0) {
            return bad("noise must lie in (0, 1)");
        }
        if !(e.ensemble_noise > 0.0 && e.ensemble_noise < 1.0) {
            return bad("ensemble_noise must lie in (0, 1)");
        }
        if !(e.target_error > 0.0) {
            return bad("target_error must be positive");
        }
        if !(self.balance.duration > self.balance.settle_hold && self.balance.settle_hold > 0.0) {
            return bad("balance duration must exceed settle_hold > 0");
        }
        if !(self.balance.settle_rate > 0.0 && self.balance.balance_tolerance > 0.0) {
            return bad("balance thresholds must be positive");
        }
        if let Some(p) = &e.pose {
            if p.len() != geom.link_count() {
                return bad(&format!(
                    "pose has {} angles, model has {} links",
                    p.len(),
                    geom.link_count()
                ));
            }
        }
        for p in [
            &e.model_file,
            &e.pool_file,
            &e.ensemble_file,
            &e.filtered_file,
            &e.beta_file,
        ]
        .into_iter()
        .flatten()
        {
            if !p.is_file() {
                return bad(&format!("input file {} does not exist", p.display()));
            }
        }
        Ok(())
    }

    pub fn filter_options(&self) -> FilterOptions {
        FilterOptions {
            eta: self.learning.eta,
            x_tol: self.learning.x_tol,
            consecutive: self.learning.consecutive,
            max_iterations: self.filter.max_iterations,
            termination: self.filter.termination,
        }
    }

    /// Digest of everything that determines the outputs: the config with
    /// the output directory blanked and input paths replaced by the
    /// digests of their contents.
    pub fn content_hash(&self) -> Result<String> {
        let mut canonical = self.clone();
        canonical.experiment.out = PathBuf::new();
        for file in canonical.experiment.input_files_mut() {
            if let Some(p) = file.as_mut() {
                let bytes = std::fs::read(&*p)?;
                *p = PathBuf::from(hex::encode(Sha256::digest(&bytes)));
            }
        }
        let json = serde_json::to_string(&canonical).map_err(|e| Error::Config(e.to_string()))?;
        Ok(hex::encode(Sha256::digest(json.as_bytes())))
    }
}
