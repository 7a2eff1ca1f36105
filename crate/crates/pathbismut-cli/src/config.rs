//! Experiment configuration, read from TOML.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    #[serde(rename = "N")]
    pub n: usize,
    pub flavor: String,
    pub model: ModelConfig,
    pub grid: GridConfig,
    pub init: InitConfig,
    pub functional: FunctionalConfig,
    pub direction: DirectionConfig,
    #[serde(default)]
    pub estimator: EstimatorConfig,
    #[serde(default)]
    pub oracles: OracleConfig,
    #[serde(default)]
    pub verify: VerifyConfig,
    /// Rows of a suite summary sharing a group are compared across `lambda`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep_group: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    LinearDelay {
        a: f64,
        b1: f64,
        c: f64,
        #[serde(default = "one")]
        sigma0: f64,
    },
    TanhNoiseDelay {
        a: f64,
        b1: f64,
        c: f64,
        #[serde(default = "one")]
        sigma0: f64,
        sigma1: f64,
    },
    /// Matrices are row-major: `coupling` and `first_c` are `l x m`,
    /// `first_a` is `l x l`, `sigma` is `m x m`, and the second-block
    /// coefficients are `m x (l + m)`.
    HamiltonianLinear {
        l: usize,
        m: usize,
        coupling: Vec<f64>,
        sigma: Vec<f64>,
        first_a: Vec<f64>,
        first_c: Vec<f64>,
        local: Vec<f64>,
        delay: Vec<f64>,
        mean_field: Vec<f64>,
    },
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(rename = "T")]
    pub t_end: f64,
    pub dt: f64,
    pub r0: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitConfig {
    Constant { value: Vec<f64> },
    Gaussian { mean: Vec<f64>, std: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FunctionalConfig {
    Coordinate {
        #[serde(default)]
        component: usize,
    },
    Tanh {
        #[serde(default)]
        component: usize,
    },
    WindowAverage {
        #[serde(default)]
        component: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DirectionConfig {
    ConstantShift { shift: Vec<f64> },
    CoordinateScaled { scale: Vec<f64> },
    Affine { matrix: Vec<f64>, offset: Vec<f64> },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorConfig {
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "yes")]
    pub include_remainder: bool,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            lambda: default_lambda(),
            include_remainder: true,
        }
    }
}

fn default_lambda() -> f64 {
    10.0
}

fn yes() -> bool {
    true
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleConfig {
    #[serde(default)]
    pub fd: bool,
    #[serde(default = "default_fd_eps")]
    pub fd_epsilon: f64,
    #[serde(default = "yes")]
    pub richardson: bool,
    #[serde(default)]
    pub deterministic: bool,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            fd: false,
            fd_epsilon: default_fd_eps(),
            richardson: true,
            deterministic: false,
        }
    }
}

fn default_fd_eps() -> f64 {
    1e-3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyConfig {
    /// Constant `hdot` for the integration-by-parts check.
    #[serde(default = "one")]
    pub ibp_control: f64,
    /// `identity` or `square`.
    #[serde(default = "default_outer")]
    pub chain_outer: String,
    #[serde(default = "default_fd_eps")]
    pub chain_epsilon: f64,
    #[serde(default = "default_decay_lambdas")]
    pub decay_lambdas: Vec<f64>,
    #[serde(default = "default_decay_window")]
    pub decay_window: [f64; 2],
    #[serde(default = "default_picard_lambda")]
    pub picard_lambda: f64,
    #[serde(default = "default_picard_tol")]
    pub picard_tol: f64,
    #[serde(default = "default_picard_iter")]
    pub picard_max_iter: usize,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            ibp_control: 1.0,
            chain_outer: default_outer(),
            chain_epsilon: default_fd_eps(),
            decay_lambdas: default_decay_lambdas(),
            decay_window: default_decay_window(),
            picard_lambda: default_picard_lambda(),
            picard_tol: default_picard_tol(),
            picard_max_iter: default_picard_iter(),
        }
    }
}

fn default_outer() -> String {
    "square".into()
}

fn default_decay_lambdas() -> Vec<f64> {
    vec![2.0, 5.0, 10.0, 20.0]
}

fn default_decay_window() -> [f64; 2] {
    [0.2, 1.0]
}

fn default_picard_lambda() -> f64 {
    20.0
}

fn default_picard_tol() -> f64 {
    1e-6
}

fn default_picard_iter() -> usize {
    10
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let de = toml::Deserializer::parse(text)
            .map_err(|e| CliError::invalid("<document>", e.message()))?;
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let message = e.inner().message().to_string();
            CliError::invalid(&path, &message)
        })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Canonical JSON rendering used for the content hash.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serialises")
    }

    pub fn content_hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_json().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
