//! Flat JSON run configuration.

use crate::error::CliError;
use serde::Deserialize;
use skimrnn::cell::{Decision, Policy, TemperatureSchedule};
use skimrnn::training::{AdamConfig, TrainConfig};
use std::path::{Path, PathBuf};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classifier,
    Qa,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Classifier => "classifier",
            TaskKind::Qa => "qa",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellKind {
    Skim,
    Lstm,
}

impl CellKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CellKind::Skim => "skim",
            CellKind::Lstm => "lstm",
        }
    }
}

fn default_policy() -> String {
    "argmax".into()
}

/// Every key a run accepts. Unknown keys are rejected.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: TaskKind,
    pub cell: CellKind,
    pub train_path: PathBuf,
    pub val_path: PathBuf,
    #[serde(default)]
    pub test_path: Option<PathBuf>,
    #[serde(default)]
    pub embeddings_path: Option<PathBuf>,
    #[serde(default)]
    pub freeze_embedding: bool,
    pub d_in: usize,
    pub d: usize,
    #[serde(default)]
    pub d_small: Option<usize>,

    pub lr: f64,
    pub gamma: f64,
    pub batch_size: usize,
    #[serde(default)]
    pub pretrain_steps: u64,
    pub early_stop_patience: u64,
    pub max_steps: u64,
    pub eval_interval: u64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_tau_rate")]
    pub tau_rate: f64,
    #[serde(default = "default_tau_floor")]
    pub tau_floor: f64,
    #[serde(default = "default_beta1")]
    pub adam_beta1: f64,
    #[serde(default = "default_beta2")]
    pub adam_beta2: f64,
    #[serde(default = "default_eps")]
    pub adam_eps: f64,
    /// `null` disables clipping.
    #[serde(default = "default_clip")]
    pub clip_norm: Option<f64>,

    /// `argmax`, `sample`, or `threshold:<θ>`.
    #[serde(default = "default_policy")]
    pub policy: String,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

fn default_tau_rate() -> f64 {
    TemperatureSchedule::default().rate
}
fn default_tau_floor() -> f64 {
    TemperatureSchedule::default().floor
}
fn default_beta1() -> f64 {
    AdamConfig::default().beta1
}
fn default_beta2() -> f64 {
    AdamConfig::default().beta2
}
fn default_eps() -> f64 {
    AdamConfig::default().eps
}
fn default_clip() -> Option<f64> {
    Some(5.0)
}

fn field_error(field: &str, why: impl std::fmt::Display) -> CliError {
    CliError::Usage(format!("config field `{field}`: {why}"))
}

/// Parses `argmax`, `sample`, `read`, or `threshold:<θ>`.
pub fn parse_policy(s: &str) -> Result<Policy, String> {
    let p = match s {
        "argmax" => Policy::Argmax,
        "sample" => Policy::Sample,
        "read" => Policy::Forced(Decision::Read),
        other => {
            let t = other
                .strip_prefix("threshold:")
                .ok_or_else(|| format!("unknown policy {other:?}"))?;
            let t: f64 = t.parse().map_err(|_| format!("bad threshold {t:?}"))?;
            Policy::Threshold(t)
        }
    };
    p.validate().map_err(|e| e.to_string())?;
    Ok(p)
}

fn require_file(field: &str, path: &Path) -> Result<(), CliError> {
    if !path.is_file() {
        return Err(field_error(field, format!("{} is not a readable file", path.display())));
    }
    Ok(())
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            gamma: self.gamma,
            batch_size: self.batch_size,
            pretrain_steps: self.pretrain_steps,
            early_stop_patience: self.early_stop_patience,
            max_steps: self.max_steps,
            eval_interval: self.eval_interval,
            seed: self.seed,
            schedule: TemperatureSchedule {
                rate: self.tau_rate,
                floor: self.tau_floor,
            },
            adam: AdamConfig {
                beta1: self.adam_beta1,
                beta2: self.adam_beta2,
                eps: self.adam_eps,
            },
            clip_norm: self.clip_norm,
        }
    }

    pub fn policy(&self) -> Result<Policy, CliError> {
        parse_policy(&self.policy).map_err(|e| field_error("policy", e))
    }

    /// Checks every field and input path; nothing is written before this.
    pub fn validate(&self) -> Result<(), CliError> {
        if self.d_in == 0 {
            return Err(field_error("d_in", "must be positive"));
        }
        if self.d == 0 {
            return Err(field_error("d", "must be positive"));
        }
        match (self.cell, self.d_small) {
            (CellKind::Skim, None) => return Err(field_error("d_small", "required for a skim cell")),
            (CellKind::Skim, Some(ds)) if ds >= self.d => {
                return Err(field_error("d_small", format!("{ds} must be below d = {}", self.d)))
            }
            (CellKind::Lstm, Some(_)) => return Err(field_error("d_small", "not used by an lstm cell")),
            _ => {}
        }
        self.train_config().validate().map_err(|e| match e {
            skimrnn::Error::Contract(msg) => match msg.split_once(": ") {
                Some((field, why)) => field_error(field, why),
                None => CliError::Usage(msg),
            },
            other => CliError::Usage(other.to_string()),
        })?;
        self.policy()?;
        require_file("train_path", &self.train_path)?;
        require_file("val_path", &self.val_path)?;
        if let Some(p) = &self.test_path {
            require_file("test_path", p)?;
        }
        if let Some(p) = &self.embeddings_path {
            require_file("embeddings_path", p)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn policies_parse() {
        assert_eq!(parse_policy("argmax").unwrap(), Policy::Argmax);
        assert_eq!(parse_policy("threshold:0.25").unwrap(), Policy::Threshold(0.25));
        assert!(parse_policy("threshold:2").is_err());
        assert!(parse_policy("greedy").is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = r#"{"task":"qa","cell":"lstm","train_path":"a","val_path":"b","d_in":2,"d":3,
            "lr":0.1,"gamma":0,"batch_size":1,"early_stop_patience":1,"max_steps":1,"eval_interval":1,"bogus":1}"#;
        let err = serde_json::from_str::<RunConfig>(text).unwrap_err().to_string();
        assert!(err.contains("bogus"), "{err}");
    }
}
