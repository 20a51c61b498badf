//! Offline estimation of orchestrator parameters from labeled runs.
//!
//! Every estimator is a fold over [`CalibrationRecord`]s. Reliabilities use
//! Laplace smoothing, `(correct + 1) / (n + 2)`, so they stay strictly inside
//! (0, 1); the scalar corrections are clipped into configured bounds.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::belief::{
    pair_key, CalibrationParams, Defaults, Provenance, DEFAULT_ALPHA, DEFAULT_C_MISS, DEFAULT_K, DEFAULT_LAMBDA_MAL,
    DEFAULT_PATTERN_MIN_COUNT, DEFAULT_PATTERN_R, DEFAULT_TAU_DELTA, DEFAULT_TAU_M, DEFAULT_TAU_P, DEFAULT_TAU_U,
    PARAMS_VERSION,
};
use crate::clustering::join_pattern;
use crate::parsing::ParsedObservation;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CalibrationError {
    #[error("calibration needs at least one record")]
    EmptyCalibrationSet,
    #[error("record {example_id:?}: agent {agent_id:?} appears more than once")]
    DuplicateAgent { example_id: String, agent_id: String },
    #[error("invalid calibration config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentOutcome {
    pub observation: ParsedObservation,
    pub correct: bool,
}

/// One labeled example: every agent's observation and the gold key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRecord {
    pub example_id: String,
    pub gold: String,
    pub outcomes: Vec<AgentOutcome>,
}

impl CalibrationRecord {
    pub fn new(example_id: impl Into<String>, gold: impl Into<String>, observations: Vec<ParsedObservation>) -> Self {
        let gold = gold.into();
        let outcomes = observations
            .into_iter()
            .map(|observation| AgentOutcome {
                correct: observation.key() == Some(gold.as_str()),
                observation,
            })
            .collect();
        CalibrationRecord {
            example_id: example_id.into(),
            gold,
            outcomes,
        }
    }

    fn valid(&self) -> impl Iterator<Item = (&AgentOutcome, &str)> {
        self.outcomes.iter().filter_map(|o| o.observation.key().map(|k| (o, k)))
    }

    fn key_of(&self, agent_id: &str) -> Option<&str> {
        self.outcomes
            .iter()
            .find(|o| o.observation.agent_id == agent_id)
            .and_then(|o| o.observation.key())
    }

    /// Valid observations grouped by canonical key.
    fn clusters(&self) -> BTreeMap<&str, Vec<&str>> {
        let mut groups: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        for (o, key) in self.valid() {
            groups.entry(key).or_default().push(o.observation.agent_id.as_str());
        }
        groups
    }
}

pub fn laplace(correct: usize, total: usize) -> f64 {
    (correct as f64 + 1.0) / (total as f64 + 2.0)
}

fn clip(x: f64, lo: f64, hi: f64) -> f64 {
    x.max(lo).min(hi)
}

pub fn estimate_agent_reliability(records: &[CalibrationRecord], agent_id: &str) -> f64 {
    let (mut valid, mut correct) = (0, 0);
    for record in records {
        for (outcome, _) in record.valid().filter(|(o, _)| o.observation.agent_id == agent_id) {
            valid += 1;
            correct += usize::from(outcome.correct);
        }
    }
    laplace(correct, valid)
}

/// Per-pattern `(occurrences, correct)` counts. Each cluster in a record is
/// one occurrence of its exact support pattern.
pub fn pattern_counts(records: &[CalibrationRecord]) -> BTreeMap<String, (usize, usize)> {
    let mut counts: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for record in records {
        for (key, support) in record.clusters() {
            let entry = counts.entry(join_pattern(support.iter().copied())).or_default();
            entry.0 += 1;
            entry.1 += usize::from(key == record.gold);
        }
    }
    counts
}

/// Smoothed reliability of every pattern seen at least `min_count` times.
/// Rarer patterns are left out and resolve to the default at lookup.
pub fn estimate_pattern_reliability(records: &[CalibrationRecord], min_count: u32) -> BTreeMap<String, f64> {
    pattern_counts(records)
        .into_iter()
        .filter(|(_, (n, _))| *n >= min_count as usize)
        .map(|(key, (n, correct))| (key, laplace(correct, n)))
        .collect()
}

pub fn estimate_missing_confidence(records: &[CalibrationRecord], c_min: f64, c_max: f64) -> f64 {
    let (mut n, mut correct) = (0, 0);
    for record in records {
        for (outcome, _) in record.valid().filter(|(o, _)| o.observation.confidence.is_none()) {
            n += 1;
            correct += usize::from(outcome.correct);
        }
    }
    if n == 0 {
        return DEFAULT_C_MISS;
    }
    clip(correct as f64 / n as f64, c_min, c_max)
}

pub fn estimate_malformed_penalty(records: &[CalibrationRecord], lambda_min: f64) -> f64 {
    let mut malformed = (0usize, 0usize);
    let mut well = (0usize, 0usize);
    for record in records {
        for (outcome, _) in record.valid() {
            let bucket = if outcome.observation.quality.malformed {
                &mut malformed
            } else {
                &mut well
            };
            bucket.0 += 1;
            bucket.1 += usize::from(outcome.correct);
        }
    }
    if malformed.0 == 0 || well.0 == 0 || well.1 == 0 {
        return DEFAULT_LAMBDA_MAL;
    }
    let acc_mal = malformed.1 as f64 / malformed.0 as f64;
    let acc_well = well.1 as f64 / well.0 as f64;
    malformed_penalty_from(acc_mal, acc_well, lambda_min)
}

pub fn malformed_penalty_from(acc_mal: f64, acc_well: f64, lambda_min: f64) -> f64 {
    if acc_well <= 0.0 {
        return DEFAULT_LAMBDA_MAL;
    }
    clip(acc_mal / acc_well, lambda_min, 1.0)
}

/// Incremental value of agreement beyond the stronger agent, clipped to
/// `[gamma_min, 1]`.
pub fn independence_discount_from(joint_reliability: f64, alpha_max: f64, gamma_min: f64) -> f64 {
    clip((joint_reliability - alpha_max) / (1.0 - alpha_max), gamma_min, 1.0)
}

/// `(agreements, correct agreements)` of two agents over records where both
/// are valid.
pub fn agreement_counts(records: &[CalibrationRecord], a: &str, b: &str) -> (usize, usize) {
    let (mut agree, mut correct) = (0, 0);
    for record in records {
        if let (Some(za), Some(zb)) = (record.key_of(a), record.key_of(b)) {
            if za == zb {
                agree += 1;
                correct += usize::from(za == record.gold);
            }
        }
    }
    (agree, correct)
}

/// Discount for a suspected-correlated pair, or `None` when they agreed
/// fewer than `min_count` times.
pub fn estimate_independence_discount(
    records: &[CalibrationRecord],
    pair: (&str, &str),
    gamma_min: f64,
    min_count: u32,
) -> Option<f64> {
    let (agree, correct) = agreement_counts(records, pair.0, pair.1);
    if agree < min_count as usize {
        return None;
    }
    let alpha_max = estimate_agent_reliability(records, pair.0).max(estimate_agent_reliability(records, pair.1));
    Some(independence_discount_from(laplace(correct, agree), alpha_max, gamma_min))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationConfig {
    pub c_min: f64,
    pub c_max: f64,
    pub lambda_min: f64,
    pub gamma_min: f64,
    pub pattern_min_count: u32,
    pub pattern_default: f64,
    pub alpha_default: f64,
    /// Suspected-correlated pairs to estimate a discount for.
    pub pairs: Vec<(String, String)>,
    /// Estimate a discount for every pair of agents instead.
    pub all_pairs: bool,
    pub tau_u: f64,
    pub tau_delta: f64,
    pub k: usize,
    pub tau_p: f64,
    pub tau_m: f64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig {
            c_min: 0.2,
            c_max: 0.8,
            lambda_min: 0.25,
            gamma_min: 0.1,
            pattern_min_count: DEFAULT_PATTERN_MIN_COUNT,
            pattern_default: DEFAULT_PATTERN_R,
            alpha_default: DEFAULT_ALPHA,
            pairs: Vec::new(),
            all_pairs: false,
            tau_u: DEFAULT_TAU_U,
            tau_delta: DEFAULT_TAU_DELTA,
            k: DEFAULT_K,
            tau_p: DEFAULT_TAU_P,
            tau_m: DEFAULT_TAU_M,
        }
    }
}

impl CalibrationConfig {
    pub fn validate(&self) -> Result<(), CalibrationError> {
        let bad = |m: &str| Err(CalibrationError::InvalidConfig(m.to_string()));
        if !(0.0 <= self.c_min && self.c_min <= self.c_max && self.c_max <= 1.0) {
            return bad("need 0 <= c_min <= c_max <= 1");
        }
        if !(self.lambda_min > 0.0 && self.lambda_min <= 1.0) {
            return bad("lambda_min must be in (0, 1]");
        }
        if !(self.gamma_min > 0.0 && self.gamma_min <= 1.0) {
            return bad("gamma_min must be in (0, 1]");
        }
        if self.pattern_min_count < 1 {
            return bad("pattern_min_count must be at least 1");
        }
        if self.k < 1 {
            return bad("k must be at least 1");
        }
        for v in [self.tau_u, self.tau_delta, self.tau_p, self.tau_m] {
            if !(0.0..=1.0).contains(&v) {
                return bad("thresholds must be in [0, 1]");
            }
        }
        if !(self.pattern_default > 0.0 && self.pattern_default < 1.0) || !(self.alpha_default > 0.0 && self.alpha_default < 1.0) {
            return bad("pattern_default and alpha_default must be in (0, 1)");
        }
        Ok(())
    }

    /// SHA-256 of the config's JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Runs every estimator and freezes the result. `timestamp` is recorded in
/// the provenance block as given; pass `None` for reproducible files.
pub fn calibrate(
    records: &[CalibrationRecord],
    config: &CalibrationConfig,
    timestamp: Option<u64>,
) -> Result<CalibrationParams, CalibrationError> {
    if records.is_empty() {
        return Err(CalibrationError::EmptyCalibrationSet);
    }
    config.validate()?;
    let mut agents = BTreeSet::new();
    for record in records {
        let mut seen = BTreeSet::new();
        for outcome in &record.outcomes {
            let id = outcome.observation.agent_id.as_str();
            if !seen.insert(id) {
                return Err(CalibrationError::DuplicateAgent {
                    example_id: record.example_id.clone(),
                    agent_id: id.to_string(),
                });
            }
            agents.insert(id);
        }
    }

    let alpha: BTreeMap<String, f64> = agents
        .iter()
        .map(|id| (id.to_string(), estimate_agent_reliability(records, id)))
        .collect();

    let pairs: BTreeSet<(String, String)> = if config.all_pairs {
        let ids: Vec<&str> = agents.iter().copied().collect();
        ids.iter()
            .enumerate()
            .flat_map(|(i, a)| ids[i + 1..].iter().map(move |b| (a.to_string(), b.to_string())))
            .collect()
    } else {
        config
            .pairs
            .iter()
            .filter(|(a, b)| a != b)
            .map(|(a, b)| if a < b { (a.clone(), b.clone()) } else { (b.clone(), a.clone()) })
            .collect()
    };
    let gamma = pairs
        .iter()
        .filter_map(|(a, b)| {
            estimate_independence_discount(records, (a, b), config.gamma_min, config.pattern_min_count)
                .map(|g| (pair_key(a, b), g))
        })
        .collect();

    Ok(CalibrationParams {
        version: PARAMS_VERSION,
        alpha,
        pattern_r: estimate_pattern_reliability(records, config.pattern_min_count),
        pattern_default: config.pattern_default,
        pattern_min_count: config.pattern_min_count,
        c_miss: estimate_missing_confidence(records, config.c_min, config.c_max),
        lambda_mal: estimate_malformed_penalty(records, config.lambda_min),
        gamma,
        defaults: Defaults {
            alpha_default: config.alpha_default,
            tau_u: config.tau_u,
            tau_delta: config.tau_delta,
            k: config.k,
            tau_p: config.tau_p,
            tau_m: config.tau_m,
        },
        provenance: Provenance {
            records: records.len(),
            config_hash: config.hash(),
            timestamp,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parsing::{ExtractionMethod, ParseQuality};
    use approx::assert_abs_diff_eq;

    fn obs(agent: &str, key: Option<&str>, confidence: Option<f64>, malformed: bool) -> ParsedObservation {
        ParsedObservation {
            agent_id: agent.into(),
            raw_candidate: key.unwrap_or("").into(),
            canonical: key.map(Into::into),
            confidence,
            valid: key.is_some(),
            quality: ParseQuality {
                malformed,
                extraction_method: if key.is_some() {
                    ExtractionMethod::Tagged
                } else {
                    ExtractionMethod::None
                },
            },
        }
    }

    /// `answers[i]` is agent `m{i}`'s key for one record with gold "g".
    fn record(id: usize, answers: &[Option<&str>]) -> CalibrationRecord {
        let observations = answers
            .iter()
            .enumerate()
            .map(|(i, a)| obs(&format!("m{i}"), *a, Some(0.5), false))
            .collect();
        CalibrationRecord::new(format!("ex{id}"), "g", observations)
    }

    #[test]
    fn correctness_flag() {
        let r = record(0, &[Some("g"), Some("x"), None]);
        assert_eq!(r.outcomes.iter().map(|o| o.correct).collect::<Vec<_>>(), [true, false, false]);
    }

    #[test]
    fn agent_reliability_laplace() {
        assert_eq!(estimate_agent_reliability(&[], "m0"), 0.5);
        let mut records: Vec<_> = (0..7).map(|i| record(i, &[Some("g")])).collect();
        records.push(record(7, &[Some("x")]));
        assert_abs_diff_eq!(estimate_agent_reliability(&records, "m0"), 0.8, epsilon = 1e-15);
        records[7] = record(7, &[Some("g")]);
        assert_abs_diff_eq!(estimate_agent_reliability(&records, "m0"), 0.9, epsilon = 1e-15);
        // Invalid outputs are not counted.
        records.push(record(8, &[None]));
        assert_abs_diff_eq!(estimate_agent_reliability(&records, "m0"), 0.9, epsilon = 1e-15);
    }

    #[test]
    fn reliability_moves_with_new_evidence() {
        let records: Vec<_> = (0..5).map(|i| record(i, &[if i % 2 == 0 { Some("g") } else { Some("x") }])).collect();
        let base = estimate_agent_reliability(&records, "m0");
        let mut more = records.clone();
        more.push(record(9, &[Some("g")]));
        assert!(estimate_agent_reliability(&more, "m0") > base);
        let mut less = records;
        less.push(record(9, &[Some("x")]));
        assert!(estimate_agent_reliability(&less, "m0") < base);
    }

    #[test]
    fn pattern_reliability() {
        let mut records: Vec<_> = (0..6).map(|i| record(i, &[Some("g"), Some("g")])).collect();
        records.push(record(6, &[Some("x"), Some("x")]));
        records.push(record(7, &[Some("x"), Some("x")]));
        let map = estimate_pattern_reliability(&records, 5);
        assert_abs_diff_eq!(map["m0|m1"], 0.7, epsilon = 1e-15);
        assert!(!map.contains_key("m0"));

        let few: Vec<_> = (0..3).map(|i| record(i, &[Some("g"), Some("y")])).collect();
        let map = estimate_pattern_reliability(&few, 5);
        assert!(map.is_empty());
        let params = CalibrationParams {
            pattern_r: map,
            ..CalibrationParams::default()
        };
        assert_eq!(params.pattern_reliability("m0"), params.pattern_default);
        assert_eq!(params.pattern_reliability("never|seen"), params.pattern_default);
    }

    #[test]
    fn pattern_counts_one_per_cluster() {
        let counts = pattern_counts(&[record(0, &[Some("g"), Some("x"), Some("x")])]);
        assert_eq!(counts["m0"], (1, 1));
        assert_eq!(counts["m1|m2"], (1, 0));
    }

    fn missing_conf_records(correct: usize, total: usize) -> Vec<CalibrationRecord> {
        (0..total)
            .map(|i| {
                let key = if i < correct { "g" } else { "x" };
                CalibrationRecord::new(format!("e{i}"), "g", vec![obs("m0", Some(key), None, false)])
            })
            .collect()
    }

    #[test]
    fn missing_confidence() {
        assert_abs_diff_eq!(estimate_missing_confidence(&missing_conf_records(9, 10), 0.2, 0.8), 0.8);
        assert_abs_diff_eq!(estimate_missing_confidence(&missing_conf_records(5, 10), 0.2, 0.8), 0.5);
        assert_abs_diff_eq!(estimate_missing_confidence(&missing_conf_records(0, 10), 0.2, 0.8), 0.2);
        assert_eq!(estimate_missing_confidence(&[record(0, &[Some("g")])], 0.2, 0.8), 0.5);
    }

    #[test]
    fn malformed_penalty() {
        assert_abs_diff_eq!(malformed_penalty_from(0.4, 0.8, 0.25), 0.5);
        assert_eq!(malformed_penalty_from(0.9, 0.8, 0.25), 1.0);
        assert_eq!(malformed_penalty_from(0.0, 0.8, 0.25), 0.25);
        assert_eq!(malformed_penalty_from(0.5, 0.0, 0.25), 0.8);

        // 2 of 5 malformed correct, 4 of 5 well-formed correct.
        let mut records = Vec::new();
        for i in 0..5 {
            let mal = obs("m0", Some(if i < 2 { "g" } else { "x" }), None, true);
            let well = obs("m1", Some(if i < 4 { "g" } else { "x" }), None, false);
            records.push(CalibrationRecord::new(format!("e{i}"), "g", vec![mal, well]));
        }
        assert_abs_diff_eq!(estimate_malformed_penalty(&records, 0.25), 0.5, epsilon = 1e-15);
        // Without malformed observations the default applies.
        assert_eq!(estimate_malformed_penalty(&[record(0, &[Some("g")])], 0.25), 0.8);
        let wrong_only: Vec<_> = (0..3)
            .map(|i| CalibrationRecord::new(format!("e{i}"), "g", vec![obs("a", Some("x"), None, false), obs("b", Some("g"), None, true)]))
            .collect();
        assert_eq!(estimate_malformed_penalty(&wrong_only, 0.25), 0.8);
    }

    #[test]
    fn independence_discount_formula() {
        assert_abs_diff_eq!(independence_discount_from(0.9, 0.8, 0.1), 0.5, epsilon = 1e-12);
        assert_eq!(independence_discount_from(0.7, 0.8, 0.1), 0.1);
        assert_eq!(independence_discount_from(0.8, 0.8, 0.1), 0.1);
        assert_eq!(independence_discount_from(1.0, 0.8, 0.1), 1.0);
    }

    #[test]
    fn independence_discount_needs_agreements() {
        let records: Vec<_> = (0..4).map(|i| record(i, &[Some("g"), Some("g")])).collect();
        assert_eq!(estimate_independence_discount(&records, ("m0", "m1"), 0.1, 5), None);
        assert!(estimate_independence_discount(&records, ("m0", "m1"), 0.1, 4).is_some());
        // Agreement counts skip records where either side is invalid.
        let mut r = records.clone();
        r.push(record(9, &[Some("g"), None]));
        assert_eq!(agreement_counts(&r, "m0", "m1"), (4, 4));
    }

    #[test]
    fn calibrate_composes_estimators() {
        let records: Vec<_> = (0..100)
            .map(|i| record(i, &[Some("g"), Some(if i % 4 == 0 { "x" } else { "g" }), Some(if i % 3 == 0 { "y" } else { "g" })]))
            .collect();
        let config = CalibrationConfig {
            all_pairs: true,
            ..CalibrationConfig::default()
        };
        let params = calibrate(&records, &config, None).unwrap();
        assert_eq!(params.alpha.len(), 3);
        assert_abs_diff_eq!(params.alpha["m0"], 101.0 / 102.0);
        assert_abs_diff_eq!(params.alpha["m1"], 76.0 / 102.0);
        assert!(!params.pattern_r.is_empty());
        assert_eq!(params.gamma.len(), 3);
        assert_eq!(params.provenance.records, 100);
        params.validate().unwrap();
        // Byte-identical on repeat.
        assert_eq!(calibrate(&records, &config, None).unwrap().to_json(), params.to_json());
    }

    #[test]
    fn always_correct_agents() {
        let records: Vec<_> = (0..20).map(|i| record(i, &[Some("g"), Some("g")])).collect();
        let params = calibrate(&records, &CalibrationConfig::default(), None).unwrap();
        for a in params.alpha.values() {
            assert_abs_diff_eq!(*a, 21.0 / 22.0);
        }
    }

    #[test]
    fn calibrate_guards() {
        assert_eq!(
            calibrate(&[], &CalibrationConfig::default(), None),
            Err(CalibrationError::EmptyCalibrationSet)
        );
        let dup = CalibrationRecord::new("e", "g", vec![obs("a", Some("g"), None, false), obs("a", Some("g"), None, false)]);
        assert!(matches!(
            calibrate(&[dup], &CalibrationConfig::default(), None),
            Err(CalibrationError::DuplicateAgent { .. })
        ));
        let bad = CalibrationConfig {
            c_min: 0.9,
            c_max: 0.1,
            ..CalibrationConfig::default()
        };
        assert!(matches!(calibrate(&[record(0, &[Some("g")])], &bad, None), Err(CalibrationError::InvalidConfig(_))));
    }
}
