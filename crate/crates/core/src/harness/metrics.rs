use serde::{Deserialize, Serialize};

use super::record::RunRecord;
use super::HarnessError;

/// Aggregate metrics over a run. Quality-type fields are `None` when some
/// record lacks gold. Abstentions count as incorrect.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub examples: usize,
    pub quality: Option<f64>,
    pub availability_bound: Option<f64>,
    pub avg_input_tokens: f64,
    pub avg_output_tokens: f64,
    pub avg_total_tokens: f64,
    pub override_rate: f64,
    pub wrong_override_rate: Option<f64>,
    pub abstentions: usize,
    pub coordinator_unavailable: usize,
}

/// Fraction of examples on which at least one agent produced gold.
pub fn availability_upper_bound(records: &[RunRecord]) -> Result<f64, HarnessError> {
    if records.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for r in records {
        match r.gold_available() {
            Some(true) => hits += 1,
            Some(false) => {}
            None => return Err(HarnessError::MissingGold(r.example_id.clone())),
        }
    }
    Ok(hits as f64 / records.len() as f64)
}

pub fn compute_metrics(records: &[RunRecord]) -> Metrics {
    let n = records.len();
    let frac = |count: usize| if n == 0 { 0.0 } else { count as f64 / n as f64 };
    let labeled = records.iter().all(|r| r.gold.is_some());
    let final_of = |r: &RunRecord| r.decision.as_ref().map(|d| d.final_answer.clone());

    let input: u64 = records.iter().map(|r| r.tokens.input_total).sum();
    let output: u64 = records.iter().map(|r| r.tokens.output_total).sum();
    let avg_input_tokens = if n == 0 { 0.0 } else { input as f64 / n as f64 };
    let avg_output_tokens = if n == 0 { 0.0 } else { output as f64 / n as f64 };

    let fired = records.iter().filter(|r| r.guardrail_fired()).count();
    let correct = records
        .iter()
        .filter(|r| r.gold.is_some() && final_of(r) == r.gold)
        .count();
    let wrong_fired = records
        .iter()
        .filter(|r| r.guardrail_fired() && final_of(r) != r.gold)
        .count();

    Metrics {
        examples: n,
        quality: labeled.then(|| frac(correct)),
        availability_bound: if labeled { availability_upper_bound(records).ok() } else { None },
        avg_input_tokens,
        avg_output_tokens,
        avg_total_tokens: avg_input_tokens + avg_output_tokens,
        override_rate: frac(fired),
        wrong_override_rate: labeled.then(|| frac(wrong_fired)),
        abstentions: records.iter().filter(|r| r.decision.is_none()).count(),
        coordinator_unavailable: records.iter().filter(|r| r.coordinator_unavailable).count(),
    }
}
