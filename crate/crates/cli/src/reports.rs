//! Output files that are not market tables: JSON reports, summary CSVs, and
//! the run manifest. Field order in the JSON is struct order, so re-running
//! a command with the same inputs reproduces these files byte for byte
//! (the manifest's timing block is the one deliberate exception).

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use ridc::model::ChoiceSpec;
use ridc::moments::{stage1_param_names, GmmEstimate, ThetaEstimate};

use crate::CliError;

#[derive(Debug, Serialize, Deserialize)]
pub struct Stage1Report {
    pub weight: String,
    pub objective: f64,
    pub converged: bool,
    pub inversion_failures: usize,
    /// Packed estimates, the order `parameters` names.
    pub point: Vec<f64>,
    pub parameters: Vec<ParamRow>,
    pub starts: Vec<StartRow>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ParamRow {
    pub name: String,
    pub estimate: f64,
    pub std_error: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct StartRow {
    pub index: usize,
    pub objective: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
}

impl Stage1Report {
    pub fn from_estimate(est: &GmmEstimate, spec: &ChoiceSpec) -> Self {
        let names = stage1_param_names(spec);
        Stage1Report {
            weight: format!("{:?}", est.weight).to_lowercase(),
            objective: est.objective,
            converged: est.converged,
            inversion_failures: est.inversion_failures,
            point: est.point.clone(),
            parameters: names
                .into_iter()
                .zip(&est.point)
                .zip(&est.std_errors)
                .map(|((name, &estimate), &std_error)| ParamRow { name, estimate, std_error })
                .collect(),
            starts: est
                .starts
                .iter()
                .map(|s| StartRow {
                    index: s.index,
                    objective: s.objective,
                    iterations: s.iterations,
                    evaluations: s.evaluations,
                    converged: s.converged,
                })
                .collect(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Stage2Report {
    pub theta: Vec<f64>,
    pub objective: f64,
    pub weak_identification: bool,
    /// `[theta, objective]` pairs over the search grid.
    pub profile: Vec<[f64; 2]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bootstrap: Option<BootstrapReport>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct BootstrapReport {
    pub replications: usize,
    pub seed: u64,
    pub std_errors: Vec<f64>,
    pub draws: Vec<Vec<f64>>,
}

impl Stage2Report {
    pub fn from_estimate(est: &ThetaEstimate) -> Self {
        Stage2Report {
            theta: est.theta.clone(),
            objective: est.objective,
            weak_identification: est.weak_identification,
            profile: est.profile.iter().map(|&(t, q)| [t, q]).collect(),
            bootstrap: None,
        }
    }

    pub fn attach_bootstrap(&mut self, draws: Vec<Vec<f64>>, seed: u64) {
        let dim = self.theta.len();
        let n = draws.len();
        let mut std_errors = vec![0.0; dim];
        if n > 1 {
            for c in 0..dim {
                let mean = draws.iter().map(|d| d[c]).sum::<f64>() / n as f64;
                let var =
                    draws.iter().map(|d| (d[c] - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
                std_errors[c] = var.sqrt();
            }
        }
        self.bootstrap = Some(BootstrapReport { replications: n, seed, std_errors, draws });
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// What it takes to reproduce a run: the exact config (by hash), the seed,
/// the tool versions, and the flags that matter. Timings are informational.
#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub tool_version: String,
    pub library_version: String,
    pub config_sha256: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_sha256: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub strict: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weight: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bootstrap: Option<usize>,
    pub outputs: Vec<String>,
    pub timings_ms: BTreeMap<String, u128>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(bytes);
    format!("{:x}", h.finalize())
}
