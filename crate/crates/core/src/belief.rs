//! Calibrated evidence scores and the normalized belief over clusters.
//!
//! A cluster's score is its pattern reliability times the sum, over its
//! supporters, of agent reliability, parse-quality penalty, independence
//! discount and confidence multiplier. Scores are clipped at zero and
//! normalized into a distribution over candidates.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clustering::{join_pattern, pattern_key, CandidateCluster, ClusterSet};
use crate::parsing::{impute_confidence, ParsedObservation};

pub const PARAMS_VERSION: u32 = 1;

pub const DEFAULT_ALPHA: f64 = 0.5;
pub const DEFAULT_PATTERN_R: f64 = 0.5;
pub const DEFAULT_C_MISS: f64 = 0.5;
pub const DEFAULT_LAMBDA_MAL: f64 = 0.8;
pub const DEFAULT_TAU_U: f64 = 0.5;
pub const DEFAULT_TAU_DELTA: f64 = 0.1;
pub const DEFAULT_K: usize = 2;
pub const DEFAULT_TAU_P: f64 = 0.66;
pub const DEFAULT_TAU_M: f64 = 0.25;
pub const DEFAULT_PATTERN_MIN_COUNT: u32 = 5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BeliefError {
    #[error("confidence {0} is outside [0, 1]")]
    ConfidenceOutOfRange(f64),
    #[error("observation from agent {0:?} is not valid")]
    InvalidObservation(String),
    #[error("no observation for supporting agent {0:?}")]
    MissingObservation(String),
    #[error("invalid calibration parameters: {0}")]
    InvalidParams(String),
    #[error("unsupported parameter file version {0}")]
    UnsupportedVersion(u32),
    #[error("malformed parameter file: {0}")]
    Json(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Defaults {
    pub alpha_default: f64,
    pub tau_u: f64,
    pub tau_delta: f64,
    pub k: usize,
    pub tau_p: f64,
    pub tau_m: f64,
}

impl Default for Defaults {
    fn default() -> Self {
        Defaults {
            alpha_default: DEFAULT_ALPHA,
            tau_u: DEFAULT_TAU_U,
            tau_delta: DEFAULT_TAU_DELTA,
            k: DEFAULT_K,
            tau_p: DEFAULT_TAU_P,
            tau_m: DEFAULT_TAU_M,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub records: usize,
    pub config_hash: String,
    /// Unix seconds, when the producer chose to stamp the file.
    pub timestamp: Option<u64>,
}

/// Frozen orchestrator parameters. `Default` is the uncalibrated setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationParams {
    pub version: u32,
    pub alpha: BTreeMap<String, f64>,
    #[serde(rename = "pattern_R")]
    pub pattern_r: BTreeMap<String, f64>,
    pub pattern_default: f64,
    pub pattern_min_count: u32,
    pub c_miss: f64,
    pub lambda_mal: f64,
    /// Keyed by the sorted pair joined with `|`.
    pub gamma: BTreeMap<String, f64>,
    pub defaults: Defaults,
    pub provenance: Provenance,
}

impl Default for CalibrationParams {
    fn default() -> Self {
        CalibrationParams {
            version: PARAMS_VERSION,
            alpha: BTreeMap::new(),
            pattern_r: BTreeMap::new(),
            pattern_default: DEFAULT_PATTERN_R,
            pattern_min_count: DEFAULT_PATTERN_MIN_COUNT,
            c_miss: DEFAULT_C_MISS,
            lambda_mal: DEFAULT_LAMBDA_MAL,
            gamma: BTreeMap::new(),
            defaults: Defaults::default(),
            provenance: Provenance::default(),
        }
    }
}

pub fn pair_key(a: &str, b: &str) -> String {
    join_pattern([a, b])
}

impl CalibrationParams {
    pub fn alpha(&self, agent_id: &str) -> f64 {
        self.alpha.get(agent_id).copied().unwrap_or(self.defaults.alpha_default)
    }

    pub fn pattern_reliability(&self, key: &str) -> f64 {
        self.pattern_r.get(key).copied().unwrap_or(self.pattern_default)
    }

    pub fn gamma(&self, a: &str, b: &str) -> Option<f64> {
        self.gamma.get(&pair_key(a, b)).copied()
    }

    pub fn validate(&self) -> Result<(), BeliefError> {
        let bad = |msg: String| Err(BeliefError::InvalidParams(msg));
        if self.version != PARAMS_VERSION {
            return Err(BeliefError::UnsupportedVersion(self.version));
        }
        let open_unit = |x: f64| x > 0.0 && x < 1.0;
        for (id, a) in &self.alpha {
            if !open_unit(*a) {
                return bad(format!("alpha[{id}] = {a} not in (0, 1)"));
            }
        }
        for (key, r) in &self.pattern_r {
            if !open_unit(*r) {
                return bad(format!("pattern_R[{key}] = {r} not in (0, 1)"));
            }
        }
        for (key, g) in &self.gamma {
            if !(*g > 0.0 && *g <= 1.0) {
                return bad(format!("gamma[{key}] = {g} not in (0, 1]"));
            }
            if key.split('|').count() != 2 {
                return bad(format!("gamma key {key:?} is not an agent pair"));
            }
        }
        if !open_unit(self.pattern_default) {
            return bad(format!("pattern_default = {} not in (0, 1)", self.pattern_default));
        }
        if !open_unit(self.defaults.alpha_default) {
            return bad(format!("alpha_default = {} not in (0, 1)", self.defaults.alpha_default));
        }
        if !(0.0..=1.0).contains(&self.c_miss) {
            return bad(format!("c_miss = {} not in [0, 1]", self.c_miss));
        }
        if !(self.lambda_mal > 0.0 && self.lambda_mal <= 1.0) {
            return bad(format!("lambda_mal = {} not in (0, 1]", self.lambda_mal));
        }
        let d = &self.defaults;
        for (name, v) in [("tau_u", d.tau_u), ("tau_delta", d.tau_delta), ("tau_p", d.tau_p), ("tau_m", d.tau_m)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} = {v} not in [0, 1]"));
            }
        }
        if d.k < 1 {
            return bad("k must be at least 1".into());
        }
        if self.pattern_min_count < 1 {
            return bad("pattern_min_count must be at least 1".into());
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, BeliefError> {
        let params: CalibrationParams = serde_json::from_str(text).map_err(|e| BeliefError::Json(e.to_string()))?;
        params.validate()?;
        Ok(params)
    }

    /// Pretty JSON with a trailing newline; stable for identical parameters.
    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("parameters serialize");
        text.push('\n');
        text
    }
}

/// Maps confidence in [0, 1] onto a multiplier in [0.5, 1.5].
pub fn confidence_multiplier(c: f64) -> Result<f64, BeliefError> {
    if !(0.0..=1.0).contains(&c) {
        return Err(BeliefError::ConfidenceOutOfRange(c));
    }
    Ok(0.5 + c)
}

pub fn parse_quality_penalty(obs: &ParsedObservation, params: &CalibrationParams) -> Result<f64, BeliefError> {
    if !obs.valid {
        return Err(BeliefError::InvalidObservation(obs.agent_id.clone()));
    }
    Ok(if obs.quality.malformed { params.lambda_mal } else { 1.0 })
}

/// Discount for `agent_id` given the other agents supporting the same
/// candidate.
///
/// Correlation edges are the calibrated pairs in `params.gamma`. Within each
/// connected group of correlated supporters the member with the highest
/// reliability (lowest id on ties) keeps full weight; every other member is
/// discounted by its smallest gamma to a co-supporting partner.
pub fn independence_discount(agent_id: &str, support: &[String], params: &CalibrationParams) -> f64 {
    let partner_gammas: Vec<f64> = support
        .iter()
        .filter(|j| j.as_str() != agent_id)
        .filter_map(|j| params.gamma(agent_id, j))
        .collect();
    if partner_gammas.is_empty() {
        return 1.0;
    }

    let mut group = BTreeSet::from([agent_id]);
    let mut queue = VecDeque::from([agent_id]);
    while let Some(current) = queue.pop_front() {
        for other in support {
            if other != current && !group.contains(other.as_str()) && params.gamma(current, other).is_some() {
                group.insert(other);
                queue.push_back(other);
            }
        }
    }
    let mut leader = agent_id;
    let mut best = f64::NEG_INFINITY;
    for member in &group {
        let a = params.alpha(member);
        if a > best {
            best = a;
            leader = member;
        }
    }
    if leader == agent_id {
        1.0
    } else {
        partner_gammas.into_iter().fold(1.0, f64::min)
    }
}

/// Calibrated evidence score of one cluster. Always non-negative.
pub fn score_cluster(
    cluster: &CandidateCluster,
    observations: &[ParsedObservation],
    params: &CalibrationParams,
) -> Result<f64, BeliefError> {
    let mut sum = 0.0;
    for agent in &cluster.support {
        let obs = observations
            .iter()
            .find(|o| &o.agent_id == agent)
            .ok_or_else(|| BeliefError::MissingObservation(agent.clone()))?;
        let confidence = impute_confidence(obs, params).map_err(|_| BeliefError::InvalidObservation(agent.clone()))?;
        sum += params.alpha(agent)
            * parse_quality_penalty(obs, params)?
            * independence_discount(agent, &cluster.support, params)
            * confidence_multiplier(confidence)?;
    }
    Ok(params.pattern_reliability(&pattern_key(cluster)) * sum)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeliefState {
    pub scores: BTreeMap<String, f64>,
    pub posterior: BTreeMap<String, f64>,
    pub top: Option<String>,
    pub top_mass: f64,
    pub runner_up: Option<String>,
    pub margin: f64,
    pub num_clusters: usize,
    pub disagreement: bool,
    pub uncertain: bool,
}

impl BeliefState {
    pub fn empty() -> Self {
        BeliefState {
            scores: BTreeMap::new(),
            posterior: BTreeMap::new(),
            top: None,
            top_mass: 0.0,
            runner_up: None,
            margin: 0.0,
            num_clusters: 0,
            disagreement: false,
            uncertain: true,
        }
    }

    pub fn mass(&self, candidate: &str) -> f64 {
        self.posterior.get(candidate).copied().unwrap_or(0.0)
    }

    /// Candidates by descending mass, ties by ascending key.
    pub fn ranked(&self) -> Vec<(&str, f64)> {
        let mut ranked: Vec<(&str, f64)> = self.posterior.iter().map(|(k, v)| (k.as_str(), *v)).collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        ranked
    }
}

pub fn build_belief(
    clusters: &ClusterSet,
    observations: &[ParsedObservation],
    params: &CalibrationParams,
) -> Result<BeliefState, BeliefError> {
    if clusters.is_empty() {
        return Ok(BeliefState::empty());
    }
    let mut scores = BTreeMap::new();
    for cluster in &clusters.clusters {
        scores.insert(cluster.candidate.clone(), score_cluster(cluster, observations, params)?);
    }
    let total: f64 = scores.values().map(|s| s.max(0.0)).sum();
    let degenerate = !(total > 0.0);
    let n = scores.len() as f64;
    let posterior: BTreeMap<String, f64> = scores
        .iter()
        .map(|(k, s)| (k.clone(), if degenerate { 1.0 / n } else { s.max(0.0) / total }))
        .collect();

    let mut belief = BeliefState {
        scores,
        posterior,
        top: None,
        top_mass: 0.0,
        runner_up: None,
        margin: 0.0,
        num_clusters: clusters.len(),
        disagreement: clusters.len() > 1,
        uncertain: true,
    };
    let ranked = belief.ranked();
    let (top, top_mass) = ranked[0];
    let (runner_up, runner_mass) = ranked.get(1).map_or((None, 0.0), |(k, m)| (Some(k.to_string()), *m));
    let top = top.to_string();
    belief.margin = top_mass - runner_mass;
    belief.top_mass = top_mass;
    belief.top = Some(top);
    belief.runner_up = runner_up;
    belief.uncertain = degenerate || is_uncertain(&belief, params.defaults.tau_u, params.defaults.tau_delta);
    Ok(belief)
}

/// True when the top mass or the margin is below its threshold, or there is
/// no top candidate.
pub fn is_uncertain(belief: &BeliefState, tau_u: f64, tau_delta: f64) -> bool {
    belief.top.is_none() || belief.top_mass < tau_u || belief.margin < tau_delta
}
