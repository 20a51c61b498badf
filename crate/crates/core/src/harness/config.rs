//! TOML run configuration.
//!
//! ```toml
//! api_key_env = "OPENAI_API_KEY"
//!
//! [run]
//! seed = 0
//! mode = "full"
//!
//! [[agents]]
//! agent_id = "a1"
//! endpoint = "synthetic"
//! synthetic = { reliability = 0.9 }
//!
//! [coordinator]
//! kind = "synthetic"
//! skill = 0.8
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::agents::{
    build_pool, Agent, AgentProfile, Coordinator, Decoding, EchoCoordinator, HttpAgent, PoolSettings, RetryPolicy,
    SyntheticCoordinator, AGENT_SEED_STRIDE,
};
use crate::calibration::CalibrationConfig;
use crate::coordination::{DecisionMode, GuardrailThresholds};
use crate::disclosure::DisclosurePolicy;

use super::benchmark::{BenchmarkOptions, CalibrationMode};
use super::HarnessError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunSection {
    pub seed: u64,
    pub parallelism: usize,
    pub agent_parallelism: usize,
    pub store_full_text: bool,
    pub mode: DecisionMode,
    pub calibration_mode: CalibrationMode,
    pub distractors: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        let b = BenchmarkOptions::default();
        RunSection {
            seed: 0,
            parallelism: b.parallelism,
            agent_parallelism: b.agent_parallelism,
            store_full_text: b.store_full_text,
            mode: DecisionMode::Full,
            calibration_mode: CalibrationMode::Full,
            distractors: b.distractors,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoordinatorKind {
    #[default]
    Synthetic,
    Echo,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CoordinatorSection {
    pub kind: CoordinatorKind,
    pub id: String,
    /// Synthetic coordinator only.
    pub skill: f64,
    pub endpoint: String,
    pub model_name: String,
    pub decoding: Decoding,
}

impl Default for CoordinatorSection {
    fn default() -> Self {
        CoordinatorSection {
            kind: CoordinatorKind::Synthetic,
            id: "coordinator".into(),
            skill: 0.8,
            endpoint: String::new(),
            model_name: String::new(),
            decoding: Decoding::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Name of the environment variable holding the API key, if any.
    pub api_key_env: Option<String>,
    pub run: RunSection,
    pub retry: RetryPolicy,
    pub agents: Vec<AgentProfile>,
    pub coordinator: CoordinatorSection,
    pub disclosure: DisclosurePolicy,
    pub guardrail: GuardrailThresholds,
    pub calibration: CalibrationConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self, HarnessError> {
        let config: RunConfig = toml::from_str(text).map_err(|e| HarnessError::Config {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })?;
        config.validate().map_err(|message| HarnessError::Config {
            path: origin.to_path_buf(),
            message,
        })?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_toml(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    fn validate(&self) -> Result<(), String> {
        if self.agents.is_empty() {
            return Err("at least one [[agents]] entry is required".into());
        }
        self.disclosure.validate().map_err(|e| e.to_string())?;
        self.guardrail.validate().map_err(|e| e.to_string())?;
        self.calibration.validate().map_err(|e| e.to_string())?;
        if self.coordinator.kind == CoordinatorKind::Http && self.coordinator.endpoint.is_empty() {
            return Err("http coordinator needs an endpoint".into());
        }
        Ok(())
    }

    fn api_key(&self) -> Option<String> {
        self.api_key_env.as_deref().and_then(|name| std::env::var(name).ok())
    }

    pub fn pool_settings(&self) -> PoolSettings {
        PoolSettings {
            base_seed: self.run.seed,
            api_key: self.api_key(),
            retry: self.retry.clone(),
        }
    }

    pub fn build_pool(&self) -> Result<Vec<Box<dyn Agent>>, HarnessError> {
        Ok(build_pool(&self.agents, &self.pool_settings())?)
    }

    /// The coordinator takes the seed slot after the last agent.
    pub fn build_coordinator(&self) -> Result<Box<dyn Coordinator>, HarnessError> {
        let c = &self.coordinator;
        let seed = c
            .decoding
            .seed
            .unwrap_or_else(|| self.run.seed.wrapping_add(AGENT_SEED_STRIDE * self.agents.len() as u64));
        Ok(match c.kind {
            CoordinatorKind::Synthetic => Box::new(SyntheticCoordinator::new(&c.id, c.skill, seed)),
            CoordinatorKind::Echo => Box::new(EchoCoordinator),
            CoordinatorKind::Http => {
                let profile = AgentProfile {
                    agent_id: c.id.clone(),
                    endpoint: c.endpoint.clone(),
                    model_name: c.model_name.clone(),
                    decoding: c.decoding.clone(),
                    synthetic: None,
                };
                Box::new(HttpAgent::new(profile, seed, self.api_key(), self.retry.clone())?)
            }
        })
    }

    pub fn benchmark_options(&self) -> BenchmarkOptions {
        BenchmarkOptions {
            parallelism: self.run.parallelism,
            agent_parallelism: self.run.agent_parallelism,
            store_full_text: self.run.store_full_text,
            distractors: self.run.distractors,
        }
    }
}
