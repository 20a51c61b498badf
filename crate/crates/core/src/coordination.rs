//! The end-to-end decision procedure for one question.
//!
//! Agents answer independently, their answers are parsed, clustered and
//! scored, the coordinator sees the policy-permitted evidence once, and a
//! deterministic guardrail restores a strongly supported top candidate that
//! the coordinator contradicted.

use std::collections::BTreeMap;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{Agent, AgentResponse, Coordinator, CoordinatorRequest, Query};
use crate::belief::{build_belief, BeliefError, BeliefState, CalibrationParams};
use crate::clustering::{cluster_candidates, ClusterError};
use crate::disclosure::{
    build_evidence, disclosure_cost, render_evidence, DisclosurePolicy, ExposedEvidence, Tokenizer, NO_CANDIDATES_NOTICE,
};
use crate::harness::record::{CallTokens, EvidenceRecord, ResponseDigest, RunRecord, Stage, TokenUsage, RECORD_SCHEMA_VERSION};
use crate::parsing::{parse_response, ParsedObservation, TaskKind};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CoordinationError {
    #[error("no valid candidate and no usable coordinator answer")]
    Abstain,
    #[error("agent pool is empty")]
    EmptyPool,
    #[error("mode {0} needs a coordinator")]
    MissingCoordinator(DecisionMode),
    #[error("invalid guardrail thresholds: {0}")]
    InvalidThresholds(String),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Belief(#[from] BeliefError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuardrailThresholds {
    pub k: usize,
    pub tau_p: f64,
    pub tau_m: f64,
}

impl Default for GuardrailThresholds {
    fn default() -> Self {
        let d = crate::belief::Defaults::default();
        GuardrailThresholds {
            k: d.k,
            tau_p: d.tau_p,
            tau_m: d.tau_m,
        }
    }
}

impl GuardrailThresholds {
    pub fn new(k: usize, tau_p: f64, tau_m: f64) -> Result<Self, CoordinationError> {
        let th = GuardrailThresholds { k, tau_p, tau_m };
        th.validate()?;
        Ok(th)
    }

    pub fn from_params(params: &CalibrationParams) -> Self {
        GuardrailThresholds {
            k: params.defaults.k,
            tau_p: params.defaults.tau_p,
            tau_m: params.defaults.tau_m,
        }
    }

    pub fn validate(&self) -> Result<(), CoordinationError> {
        if self.k < 1 {
            return Err(CoordinationError::InvalidThresholds("k must be at least 1".into()));
        }
        for (name, v) in [("tau_p", self.tau_p), ("tau_m", self.tau_m)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(CoordinationError::InvalidThresholds(format!("{name} = {v} not in [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionMode {
    Full,
    NoCoordinator,
    NoGuardrail,
}

impl DecisionMode {
    pub fn name(self) -> &'static str {
        match self {
            DecisionMode::Full => "full",
            DecisionMode::NoCoordinator => "no_coordinator",
            DecisionMode::NoGuardrail => "no_guardrail",
        }
    }

    pub fn uses_coordinator(self) -> bool {
        self != DecisionMode::NoCoordinator
    }
}

impl std::fmt::Display for DecisionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DecisionMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [DecisionMode::Full, DecisionMode::NoCoordinator, DecisionMode::NoGuardrail]
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown mode {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decision {
    pub final_answer: String,
    pub coordinator_candidate: Option<String>,
    pub guardrail_fired: bool,
    pub trusted: bool,
    pub mode: DecisionMode,
}

/// Whether the top cluster is strong enough to override the coordinator.
/// Comparisons are inclusive.
pub fn is_trusted(belief: &BeliefState, support_size: usize, th: &GuardrailThresholds) -> bool {
    belief.top.is_some() && support_size >= th.k && belief.top_mass >= th.tau_p && belief.margin >= th.tau_m
}

pub fn final_decision(
    coordinator_candidate: Option<&str>,
    belief: &BeliefState,
    support_size: usize,
    th: &GuardrailThresholds,
    mode: DecisionMode,
) -> Result<Decision, CoordinationError> {
    let top = belief.top.as_deref();
    let trusted = is_trusted(belief, support_size, th);
    let coord = coordinator_candidate.map(str::to_string);
    let decide = |answer: &str, fired: bool, coord: Option<String>| Decision {
        final_answer: answer.to_string(),
        coordinator_candidate: coord,
        guardrail_fired: fired,
        trusted,
        mode,
    };
    match mode {
        DecisionMode::NoCoordinator => top.map(|z| decide(z, false, None)).ok_or(CoordinationError::Abstain),
        DecisionMode::Full => match (top, coordinator_candidate) {
            (Some(z), c) if trusted && c != Some(z) => Ok(decide(z, true, coord)),
            (_, Some(c)) => Ok(decide(c, false, coord)),
            (Some(z), None) => Ok(decide(z, false, None)),
            (None, None) => Err(CoordinationError::Abstain),
        },
        DecisionMode::NoGuardrail => match (coordinator_candidate, top) {
            (Some(c), _) => Ok(decide(c, false, coord)),
            (None, Some(z)) => Ok(decide(z, false, None)),
            (None, None) => Err(CoordinationError::Abstain),
        },
    }
}

pub fn render_coordinator_prompt(question: &str, kind: &TaskKind, evidence: &ExposedEvidence) -> String {
    let mut prompt = String::new();
    prompt.push_str("Question:\n");
    prompt.push_str(question.trim_end());
    prompt.push('\n');
    if let TaskKind::MultipleChoice { options } = kind {
        prompt.push_str(&format!("Options: {}\n", options.join(", ")));
    }
    prompt.push_str("\nIndependent agents answered this question. Their parsed answers are summarized below.\n");
    if evidence.candidates.is_empty() {
        prompt.push_str(NO_CANDIDATES_NOTICE);
        prompt.push('\n');
    } else {
        prompt.push_str(
            "Treat the posterior as a prior over candidates, not as proof. You may follow the leading \
             candidate, choose another one, or give a corrected answer after checking against the question.\n",
        );
    }
    prompt.push_str("\n--- evidence ---\n");
    prompt.push_str(&render_evidence(evidence));
    prompt.push_str("--- end evidence ---\n\n");
    prompt.push_str(crate::agents::ANSWER_PROTOCOL);
    prompt.push('\n');
    prompt
}

/// Run-time knobs that do not change the decision rule.
#[derive(Clone)]
pub struct RunOptions<'a> {
    /// Upper bound on concurrent agent calls for one question.
    pub agent_parallelism: usize,
    /// Keep full response text in records instead of a truncated preview.
    pub store_full_text: bool,
    pub tokenizer: &'a dyn Tokenizer,
}

impl Default for RunOptions<'_> {
    fn default() -> Self {
        RunOptions {
            agent_parallelism: 4,
            store_full_text: false,
            tokenizer: &crate::disclosure::WhitespaceTokenizer,
        }
    }
}

fn fan_out(pool: &[Box<dyn Agent>], query: &Query, parallelism: usize) -> Vec<AgentResponse> {
    let parallelism = parallelism.max(1);
    if parallelism == 1 || pool.len() == 1 {
        return pool.iter().map(|a| a.respond(query)).collect();
    }
    let mut responses = Vec::with_capacity(pool.len());
    for chunk in pool.chunks(parallelism) {
        std::thread::scope(|scope| {
            let handles: Vec<_> = chunk.iter().map(|agent| scope.spawn(move || agent.respond(query))).collect();
            for h in handles {
                responses.push(h.join().unwrap_or_else(|_| AgentResponse::failed("agent panicked", 0)));
            }
        });
    }
    responses
}

/// Runs the full procedure on one question and records every intermediate
/// artifact.
#[allow(clippy::too_many_arguments)]
pub fn coordinate(
    query: &Query,
    gold: Option<&str>,
    pool: &[Box<dyn Agent>],
    coordinator: Option<&dyn Coordinator>,
    params: &CalibrationParams,
    policy: &DisclosurePolicy,
    th: &GuardrailThresholds,
    mode: DecisionMode,
    options: &RunOptions<'_>,
) -> Result<RunRecord, CoordinationError> {
    if pool.is_empty() {
        return Err(CoordinationError::EmptyPool);
    }
    if mode.uses_coordinator() && coordinator.is_none() {
        return Err(CoordinationError::MissingCoordinator(mode));
    }

    let responses = fan_out(pool, query, options.agent_parallelism);
    let observations: Vec<ParsedObservation> = pool
        .iter()
        .zip(&responses)
        .map(|(agent, r)| match r.transport_error {
            Some(_) => ParsedObservation::invalid(agent.id()),
            None => parse_response(&r.raw, &query.kind, agent.id()),
        })
        .collect();
    let clusters = cluster_candidates(&observations)?;
    let belief = build_belief(&clusters, &observations, params)?;

    let mut calls: Vec<CallTokens> = pool
        .iter()
        .zip(&responses)
        .map(|(agent, r)| CallTokens {
            stage: Stage::Agent,
            id: agent.id().to_string(),
            input: r.input_tokens,
            output: r.output_tokens,
        })
        .collect();

    let mut evidence_record = None;
    let mut coordinator_response = None;
    let mut coordinator_observation = None;
    let mut coordinator_unavailable = false;
    let mut effective_mode = mode;
    if let (true, Some(coord)) = (mode.uses_coordinator(), coordinator) {
        let raw: BTreeMap<String, String> = pool
            .iter()
            .zip(&responses)
            .filter(|(_, r)| r.transport_error.is_none())
            .map(|(a, r)| (a.id().to_string(), r.raw.clone()))
            .collect();
        let evidence = build_evidence(&clusters, &observations, &belief, &raw, policy);
        let rendered = render_evidence(&evidence);
        let t_cross = disclosure_cost(&rendered, options.tokenizer) as u64;
        let prompt = render_coordinator_prompt(&query.question, &query.kind, &evidence);
        let response = coord.respond(&CoordinatorRequest {
            query,
            prompt: &prompt,
            evidence: &evidence,
        });
        calls.push(CallTokens {
            stage: Stage::Coordinator,
            id: coord.id().to_string(),
            input: response.input_tokens,
            output: response.output_tokens,
        });
        if response.transport_error.is_some() {
            coordinator_unavailable = true;
            effective_mode = DecisionMode::NoCoordinator;
        } else {
            coordinator_observation = Some(parse_response(&response.raw, &query.kind, coord.id()));
        }
        coordinator_response = Some(ResponseDigest::new(coord.id(), &response, options.store_full_text));
        evidence_record = Some(EvidenceRecord {
            tier: policy.tier,
            rendered,
            t_cross,
        });
    }

    let coord_candidate = coordinator_observation.as_ref().and_then(|o| o.key());
    let support = belief.top.as_deref().map_or(0, |z| clusters.support_size(z));
    let decision = match final_decision(coord_candidate, &belief, support, th, effective_mode) {
        Ok(d) => Some(d),
        Err(CoordinationError::Abstain) => None,
        Err(e) => return Err(e),
    };
    let correct = gold.map(|g| decision.as_ref().is_some_and(|d| d.final_answer == g));

    Ok(RunRecord {
        schema_version: RECORD_SCHEMA_VERSION,
        example_id: query.example_id.clone(),
        mode,
        thresholds: *th,
        agent_responses: pool
            .iter()
            .zip(&responses)
            .map(|(a, r)| ResponseDigest::new(a.id(), r, options.store_full_text))
            .collect(),
        observations,
        clusters,
        belief,
        evidence: evidence_record,
        coordinator_response,
        coordinator_observation,
        coordinator_unavailable,
        decision,
        tokens: TokenUsage::from_calls(calls),
        gold: gold.map(str::to_string),
        correct,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn belief(top: &str, mass: f64, margin: f64) -> BeliefState {
        let mut b = BeliefState::empty();
        b.top = Some(top.into());
        b.top_mass = mass;
        b.margin = margin;
        b.uncertain = false;
        b
    }

    fn default_grid() -> GuardrailThresholds {
        GuardrailThresholds::new(2, 0.66, 0.25).unwrap()
    }

    #[test]
    fn trusted_conjunction() {
        let th = default_grid();
        assert!(is_trusted(&belief("A", 0.70, 0.40), 2, &th));
        assert!(!is_trusted(&belief("A", 0.65, 0.40), 2, &th));
        assert!(!is_trusted(&belief("A", 0.70, 0.40), 1, &th));
        assert!(!is_trusted(&belief("A", 0.70, 0.20), 2, &th));
        assert!(!is_trusted(&BeliefState::empty(), 3, &th));
        // Inclusive boundaries.
        assert!(is_trusted(&belief("A", 0.66, 0.25), 2, &th));
    }

    #[test]
    fn guardrail_overrides_conflicting_coordinator() {
        let th = default_grid();
        let b = belief("A", 0.8, 0.6);
        let d = final_decision(Some("B"), &b, 2, &th, DecisionMode::Full).unwrap();
        assert_eq!(d.final_answer, "A");
        assert!(d.guardrail_fired && d.trusted);
        let d = final_decision(Some("A"), &b, 2, &th, DecisionMode::Full).unwrap();
        assert_eq!(d.final_answer, "A");
        assert!(!d.guardrail_fired);
        let weak = belief("A", 0.5, 0.1);
        let d = final_decision(Some("B"), &weak, 2, &th, DecisionMode::Full).unwrap();
        assert_eq!(d.final_answer, "B");
        assert!(!d.guardrail_fired && !d.trusted);
    }

    #[test]
    fn coordinator_parse_failure_falls_back() {
        let th = default_grid();
        let d = final_decision(None, &belief("A", 0.5, 0.1), 1, &th, DecisionMode::Full).unwrap();
        assert_eq!(d.final_answer, "A");
        assert!(!d.guardrail_fired);
        let d = final_decision(None, &belief("A", 0.9, 0.9), 3, &th, DecisionMode::Full).unwrap();
        assert!(d.guardrail_fired);
        assert_eq!(
            final_decision(None, &BeliefState::empty(), 0, &th, DecisionMode::Full),
            Err(CoordinationError::Abstain)
        );
        let d = final_decision(Some("Q"), &BeliefState::empty(), 0, &th, DecisionMode::Full).unwrap();
        assert_eq!(d.final_answer, "Q");
    }

    #[test]
    fn ablation_modes() {
        let th = default_grid();
        let b = belief("A", 0.9, 0.9);
        let d = final_decision(Some("B"), &b, 3, &th, DecisionMode::NoGuardrail).unwrap();
        assert_eq!(d.final_answer, "B");
        assert!(!d.guardrail_fired);
        let d = final_decision(Some("B"), &b, 3, &th, DecisionMode::NoCoordinator).unwrap();
        assert_eq!(d.final_answer, "A");
        assert_eq!(d.coordinator_candidate, None);
        assert_eq!(
            final_decision(None, &BeliefState::empty(), 0, &th, DecisionMode::NoCoordinator),
            Err(CoordinationError::Abstain)
        );
    }

    #[test]
    fn threshold_validation() {
        assert!(GuardrailThresholds::new(0, 0.5, 0.5).is_err());
        assert!(GuardrailThresholds::new(1, 1.01, 0.5).is_err());
        assert!(GuardrailThresholds::new(1, 0.5, -0.1).is_err());
    }

    #[test]
    fn mode_names() {
        for m in [DecisionMode::Full, DecisionMode::NoCoordinator, DecisionMode::NoGuardrail] {
            assert_eq!(m.name().parse::<DecisionMode>().unwrap(), m);
        }
    }
}
