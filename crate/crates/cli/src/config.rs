//! Experiment configuration files.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use gio_core::agent::AgentParams;
use gio_core::mdp::TabularMdp;
use gio_core::solver::SolverConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    GioExact,
    GioAgent,
    SoftPi,
    StandardPi,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::GioExact => "gio-exact",
            Algorithm::GioAgent => "gio-agent",
            Algorithm::SoftPi => "soft-pi",
            Algorithm::StandardPi => "standard-pi",
        }
    }
}

/// Starting policy for the exact algorithms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitPolicy {
    #[default]
    Uniform,
    /// Dirichlet rows mixed half-and-half with uniform, drawn from the seed.
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// An environment spec such as `gridworld(5,0.1)`, or a path to an MDP JSON file.
    pub env: String,
    pub algorithm: Algorithm,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub agent: AgentParams,
    /// Environment steps per seed (agent only).
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default)]
    pub init: InitPolicy,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

fn default_steps() -> usize {
    200_000
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).context("invalid experiment config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_json(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            bail!("seeds must not be empty");
        }
        if self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            bail!("seeds must be distinct");
        }
        match self.algorithm {
            Algorithm::GioAgent => {
                self.agent.validate()?;
                if self.steps == 0 {
                    bail!("steps must be positive");
                }
            }
            Algorithm::GioExact | Algorithm::SoftPi => {
                self.solver.validate()?;
                if self.solver.eta <= 0.0 {
                    bail!("{} needs eta > 0", self.algorithm.name());
                }
            }
            Algorithm::StandardPi => self.solver.validate()?,
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON of everything except `output_dir`.
    ///
    /// Canonical means defaults filled in and object keys sorted, so two
    /// files that differ only in key order or in spelling out defaults hash
    /// the same.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("output_dir");
        }
        let digest = Sha256::digest(canonical_json(&v).as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Compact JSON with object keys in sorted order at every depth.
pub fn canonical_json(v: &serde_json::Value) -> String {
    use serde_json::Value;
    match v {
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            let body: Vec<String> = keys
                .into_iter()
                .map(|k| format!("{}:{}", Value::String(k.clone()), canonical_json(&map[k])))
                .collect();
            format!("{{{}}}", body.join(","))
        }
        Value::Array(xs) => format!("[{}]", xs.iter().map(canonical_json).collect::<Vec<_>>().join(",")),
        other => other.to_string(),
    }
}

/// Resolves an environment argument: a spec like `chain(5)` first, then a file path.
pub fn load_env(arg: &str) -> Result<TabularMdp> {
    match gio_core::envs::make(arg) {
        Ok(m) => Ok(m),
        Err(spec_err) => {
            let path = Path::new(arg);
            if path.exists() {
                TabularMdp::load(path).with_context(|| format!("loading MDP file {arg}"))
            } else {
                bail!("`{arg}` is neither an environment spec ({spec_err}) nor an existing file")
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"{"env": "chain(4)", "algorithm": "gio-exact", "seeds": [0, 1], "output_dir": "out",
        "solver": {"eta": 0.5, "future": "k-step:2"}}"#;

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::from_json(BASE).is_ok());
        let extra = BASE.replace("\"seeds\"", "\"sedes\": 1, \"seeds\"");
        assert!(ExperimentConfig::from_json(&extra).is_err());
        let nested = BASE.replace("\"eta\": 0.5", "\"eta\": 0.5, \"etta\": 1");
        assert!(ExperimentConfig::from_json(&nested).is_err());
    }

    #[test]
    fn hash_ignores_key_order_and_output_dir() {
        let a = ExperimentConfig::from_json(BASE).unwrap();
        let reordered = r#"{"solver": {"future": "k-step:2", "eta": 0.5}, "output_dir": "elsewhere",
            "seeds": [0, 1], "algorithm": "gio-exact", "env": "chain(4)"}"#;
        let b = ExperimentConfig::from_json(reordered).unwrap();
        assert_eq!(a.hash(), b.hash());
        let c = ExperimentConfig::from_json(&BASE.replace("0.5", "0.6")).unwrap();
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(ExperimentConfig::from_json(&BASE.replace("[0, 1]", "[]")).is_err());
        assert!(ExperimentConfig::from_json(&BASE.replace("[0, 1]", "[3, 3]")).is_err());
        assert!(ExperimentConfig::from_json(&BASE.replace("0.5", "-1")).is_err());
        assert!(ExperimentConfig::from_json(&BASE.replace("gio-exact", "q-learning")).is_err());
    }

    #[test]
    fn env_argument_resolution() {
        assert_eq!(load_env("chain(3)").unwrap().n_states(), 3);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        gio_core::envs::chain(5).unwrap().save(&p).unwrap();
        assert_eq!(load_env(p.to_str().unwrap()).unwrap().n_states(), 5);
        assert!(load_env("nowhere.json").is_err());
    }
}
