//! Run-record schema: one JSON object per line, one line per example.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agents::AgentResponse;
use crate::belief::BeliefState;
use crate::clustering::ClusterSet;
use crate::coordination::{Decision, DecisionMode, GuardrailThresholds};
use crate::disclosure::DisclosureTier;
use crate::parsing::ParsedObservation;

use super::HarnessError;

pub const RECORD_SCHEMA_VERSION: u32 = 1;

/// Characters of response text kept when full text is not requested.
pub const PREVIEW_CHARS: usize = 240;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponseDigest {
    pub id: String,
    pub sha256: String,
    pub text: String,
    pub truncated: bool,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub latency_ms: u64,
    pub transport_error: Option<String>,
}

impl ResponseDigest {
    pub fn new(id: &str, response: &AgentResponse, full_text: bool) -> Self {
        let sha256 = Sha256::digest(response.raw.as_bytes()).iter().map(|b| format!("{b:02x}")).collect();
        let (text, truncated) = match response.raw.char_indices().nth(PREVIEW_CHARS) {
            Some((i, _)) if !full_text => (response.raw[..i].to_string(), true),
            _ => (response.raw.clone(), false),
        };
        ResponseDigest {
            id: id.to_string(),
            sha256,
            text,
            truncated,
            input_tokens: response.input_tokens,
            output_tokens: response.output_tokens,
            latency_ms: response.latency_ms,
            transport_error: response.transport_error.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Agent,
    Coordinator,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallTokens {
    pub stage: Stage,
    pub id: String,
    pub input: u64,
    pub output: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TokenUsage {
    pub calls: Vec<CallTokens>,
    pub input_total: u64,
    pub output_total: u64,
}

impl TokenUsage {
    pub fn from_calls(calls: Vec<CallTokens>) -> Self {
        TokenUsage {
            input_total: calls.iter().map(|c| c.input).sum(),
            output_total: calls.iter().map(|c| c.output).sum(),
            calls,
        }
    }

    pub fn total(&self) -> u64 {
        self.input_total + self.output_total
    }

    pub fn stage(&self, stage: Stage) -> (u64, u64) {
        self.calls
            .iter()
            .filter(|c| c.stage == stage)
            .fold((0, 0), |(i, o), c| (i + c.input, o + c.output))
    }
}

/// The evidence block exactly as the coordinator saw it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvidenceRecord {
    pub tier: DisclosureTier,
    pub rendered: String,
    pub t_cross: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub schema_version: u32,
    pub example_id: String,
    /// Requested mode; see [`RunRecord::effective_mode`].
    pub mode: DecisionMode,
    pub thresholds: GuardrailThresholds,
    pub agent_responses: Vec<ResponseDigest>,
    pub observations: Vec<ParsedObservation>,
    pub clusters: ClusterSet,
    pub belief: BeliefState,
    pub evidence: Option<EvidenceRecord>,
    pub coordinator_response: Option<ResponseDigest>,
    pub coordinator_observation: Option<ParsedObservation>,
    pub coordinator_unavailable: bool,
    /// `None` when the run abstained.
    pub decision: Option<Decision>,
    pub tokens: TokenUsage,
    pub gold: Option<String>,
    pub correct: Option<bool>,
}

impl RunRecord {
    /// Mode the decision was actually made under: an unreachable coordinator
    /// demotes a run to the no-coordinator path.
    pub fn effective_mode(&self) -> DecisionMode {
        if self.coordinator_unavailable {
            DecisionMode::NoCoordinator
        } else {
            self.mode
        }
    }

    pub fn coordinator_candidate(&self) -> Option<&str> {
        self.coordinator_observation.as_ref().and_then(|o| o.key())
    }

    pub fn top_support(&self) -> usize {
        self.belief.top.as_deref().map_or(0, |z| self.clusters.support_size(z))
    }

    pub fn guardrail_fired(&self) -> bool {
        self.decision.as_ref().is_some_and(|d| d.guardrail_fired)
    }

    pub fn t_cross(&self) -> u64 {
        self.evidence.as_ref().map_or(0, |e| e.t_cross)
    }

    /// Whether some agent produced the gold answer.
    pub fn gold_available(&self) -> Option<bool> {
        let gold = self.gold.as_deref()?;
        Some(self.observations.iter().any(|o| o.key() == Some(gold)))
    }

    pub fn to_json_line(&self) -> String {
        let mut line = serde_json::to_string(self).expect("records serialize");
        line.push('\n');
        line
    }
}

pub fn write_records(path: &Path, records: &[RunRecord]) -> Result<(), HarnessError> {
    let mut file = File::create(path).map_err(|e| HarnessError::io(path, e))?;
    for r in records {
        file.write_all(r.to_json_line().as_bytes()).map_err(|e| HarnessError::io(path, e))?;
    }
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<RunRecord>, HarnessError> {
    let file = File::open(path).map_err(|e| HarnessError::io(path, e))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| HarnessError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: RunRecord = serde_json::from_str(&line).map_err(|e| HarnessError::json(path, i + 1, e))?;
        if record.schema_version != RECORD_SCHEMA_VERSION {
            return Err(HarnessError::Invalid(format!(
                "{}:{}: unsupported record schema version {}",
                path.display(),
                i + 1,
                record.schema_version
            )));
        }
        records.push(record);
    }
    Ok(records)
}
