//! Policy-controlled evidence for the coordinator and its token cost.
//!
//! The rendered block is line oriented. Each tier only appends sections to
//! the one below it, so the rendered text (and its token count) grows
//! monotonically from `belief_summary` to `full_raw_traces`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::belief::BeliefState;
use crate::clustering::{join_pattern, ClusterSet};
use crate::parsing::{reasoning_text, ParsedObservation};

pub const DEFAULT_MAX_RAW_CHARS: usize = 1200;

pub const NO_CANDIDATES_NOTICE: &str =
    "No agent produced a valid candidate. Solve the question independently.";
const CONCENTRATED_GUIDANCE: &str =
    "The belief is concentrated. Verify the leading candidate against the question first.";
const DIFFUSE_GUIDANCE: &str =
    "The belief is diffuse. Do not trust simple agreement; audit each candidate against the question.";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DisclosureError {
    #[error("max_raw_chars must be positive")]
    ZeroRawBound,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DisclosureTier {
    BeliefSummary,
    ReasoningSummary,
    FullRawTraces,
}

impl DisclosureTier {
    pub const ALL: [DisclosureTier; 3] = [
        DisclosureTier::BeliefSummary,
        DisclosureTier::ReasoningSummary,
        DisclosureTier::FullRawTraces,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DisclosureTier::BeliefSummary => "belief_summary",
            DisclosureTier::ReasoningSummary => "reasoning_summary",
            DisclosureTier::FullRawTraces => "full_raw_traces",
        }
    }
}

impl std::str::FromStr for DisclosureTier {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        DisclosureTier::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| format!("unknown disclosure tier {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DisclosurePolicy {
    pub tier: DisclosureTier,
    pub max_raw_chars: usize,
    pub include_uncertainty_guidance: bool,
}

impl Default for DisclosurePolicy {
    fn default() -> Self {
        DisclosurePolicy {
            tier: DisclosureTier::BeliefSummary,
            max_raw_chars: DEFAULT_MAX_RAW_CHARS,
            include_uncertainty_guidance: true,
        }
    }
}

impl DisclosurePolicy {
    pub fn with_tier(tier: DisclosureTier) -> Self {
        DisclosurePolicy {
            tier,
            ..DisclosurePolicy::default()
        }
    }

    pub fn validate(&self) -> Result<(), DisclosureError> {
        if self.max_raw_chars == 0 {
            return Err(DisclosureError::ZeroRawBound);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceCandidate {
    pub candidate: String,
    pub pattern: Vec<String>,
    /// Reported confidence of each supporter, in pattern order.
    pub confidences: Vec<Option<f64>>,
    pub mass: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExposedEvidence {
    pub tier: DisclosureTier,
    pub candidates: Vec<EvidenceCandidate>,
    pub margin: f64,
    pub uncertain: bool,
    pub guidance: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reasoning_summaries: Option<BTreeMap<String, String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub raw_traces: Option<BTreeMap<String, String>>,
}

fn truncate_chars(text: &str, max: usize) -> &str {
    match text.char_indices().nth(max) {
        Some((i, _)) => &text[..i],
        None => text,
    }
}

/// Builds the evidence the policy allows the coordinator to see.
///
/// `raw_responses` maps agent id to the agent's full response text; it is
/// only read at the reasoning and raw-trace tiers.
pub fn build_evidence(
    clusters: &ClusterSet,
    observations: &[ParsedObservation],
    belief: &BeliefState,
    raw_responses: &BTreeMap<String, String>,
    policy: &DisclosurePolicy,
) -> ExposedEvidence {
    let mut candidates: Vec<EvidenceCandidate> = clusters
        .clusters
        .iter()
        .map(|cluster| EvidenceCandidate {
            candidate: cluster.candidate.clone(),
            pattern: cluster.pattern().to_vec(),
            confidences: cluster
                .support
                .iter()
                .map(|id| observations.iter().find(|o| &o.agent_id == id).and_then(|o| o.confidence))
                .collect(),
            mass: belief.mass(&cluster.candidate),
        })
        .collect();
    candidates.sort_by(|a, b| b.mass.total_cmp(&a.mass).then_with(|| a.candidate.cmp(&b.candidate)));

    let guidance = if candidates.is_empty() {
        NO_CANDIDATES_NOTICE.to_string()
    } else if !policy.include_uncertainty_guidance {
        String::new()
    } else if belief.uncertain {
        DIFFUSE_GUIDANCE.to_string()
    } else {
        CONCENTRATED_GUIDANCE.to_string()
    };

    let bound = policy.max_raw_chars;
    let (reasoning_summaries, raw_traces) = match policy.tier {
        DisclosureTier::BeliefSummary => (None, None),
        DisclosureTier::ReasoningSummary => (
            Some(
                raw_responses
                    .iter()
                    .map(|(id, raw)| (id.clone(), truncate_chars(reasoning_text(raw), bound).to_string()))
                    .collect(),
            ),
            None,
        ),
        // A truncated raw trace starts with the reasoning summary, so this
        // tier strictly extends the previous one.
        DisclosureTier::FullRawTraces => (
            None,
            Some(
                raw_responses
                    .iter()
                    .map(|(id, raw)| (id.clone(), truncate_chars(raw.trim_end(), bound).to_string()))
                    .collect(),
            ),
        ),
    };

    ExposedEvidence {
        tier: policy.tier,
        candidates,
        margin: belief.margin,
        uncertain: belief.uncertain || clusters.is_empty(),
        guidance,
        reasoning_summaries,
        raw_traces,
    }
}

fn format_confidence(c: Option<f64>) -> String {
    c.map_or_else(|| "-".to_string(), |c| format!("{c:.2}"))
}

/// The exact text inserted into the coordinator prompt.
pub fn render_evidence(evidence: &ExposedEvidence) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "Candidates: {}", evidence.candidates.len());
    for (i, c) in evidence.candidates.iter().enumerate() {
        let confidences: Vec<String> = c.confidences.iter().map(|c| format_confidence(*c)).collect();
        let pattern = join_pattern(c.pattern.iter().map(String::as_str));
        let _ = writeln!(
            out,
            "{}. answer={} | support={} ({}) | confidence={} | posterior={:.4}",
            i + 1,
            c.candidate,
            pattern,
            c.pattern.len(),
            confidences.join(","),
            c.mass
        );
    }
    let _ = writeln!(out, "Margin: {:.4}", evidence.margin);
    let _ = writeln!(out, "Uncertain: {}", if evidence.uncertain { "yes" } else { "no" });
    if !evidence.guidance.is_empty() {
        let _ = writeln!(out, "Guidance: {}", evidence.guidance);
    }
    if let Some(summaries) = &evidence.reasoning_summaries {
        out.push_str("Reasoning summaries:\n");
        for (id, text) in summaries {
            let _ = writeln!(out, "[{id}] {text}");
        }
    }
    if let Some(traces) = &evidence.raw_traces {
        out.push_str("Raw responses:\n");
        for (id, text) in traces {
            let _ = writeln!(out, "[{id}] {text}");
        }
    }
    out
}

/// Counts tokens in rendered text.
pub trait Tokenizer: Send + Sync {
    fn count(&self, text: &str) -> usize;
}

/// Whitespace-delimited word count.
#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceTokenizer;

impl Tokenizer for WhitespaceTokenizer {
    fn count(&self, text: &str) -> usize {
        text.split_whitespace().count()
    }
}

/// Tokens crossing from the agents to the coordinator.
pub fn disclosure_cost(rendered: &str, tokenizer: &dyn Tokenizer) -> usize {
    tokenizer.count(rendered)
}
