//! Voting baselines over parsed observations.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::belief::{build_belief, CalibrationParams};
use crate::clustering::cluster_candidates;
use crate::parsing::ParsedObservation;

use super::benchmark::CalibrationMode;
use super::record::RunRecord;
use super::HarnessError;

fn tally<'a>(observations: &'a [ParsedObservation], weight: impl Fn(&ParsedObservation) -> f64) -> BTreeMap<&'a str, f64> {
    let mut totals = BTreeMap::new();
    for obs in observations {
        if let Some(key) = obs.key() {
            *totals.entry(key).or_insert(0.0) += weight(obs);
        }
    }
    totals
}

/// Largest cluster wins. Ties are broken uniformly at random with `rng`;
/// tied candidates are ordered by key first so the draw is reproducible.
pub fn majority_vote<R: Rng + ?Sized>(observations: &[ParsedObservation], rng: &mut R) -> Option<String> {
    let counts = tally(observations, |_| 1.0);
    let best = counts.values().cloned().fold(0.0, f64::max);
    let tied: Vec<&str> = counts.iter().filter(|(_, &n)| n == best).map(|(k, _)| *k).collect();
    match tied.len() {
        0 => None,
        1 => Some(tied[0].to_string()),
        n => Some(tied[rng.random_range(0..n)].to_string()),
    }
}

/// Cluster with the largest summed agent reliability. Ties go to the
/// smallest key.
pub fn weighted_vote(observations: &[ParsedObservation], params: &CalibrationParams) -> Option<String> {
    let totals = tally(observations, |o| params.alpha(&o.agent_id));
    let mut best: Option<(&str, f64)> = None;
    for (key, w) in totals {
        if best.is_none_or(|(_, b)| w > b) {
            best = Some((key, w));
        }
    }
    best.map(|(k, _)| k.to_string())
}

/// Top candidate of the belief state built from `observations` under `params`.
pub fn calibrated_selection(
    observations: &[ParsedObservation],
    params: &CalibrationParams,
) -> Result<Option<String>, HarnessError> {
    let clusters = cluster_candidates(observations).map_err(|e| HarnessError::Invalid(e.to_string()))?;
    Ok(build_belief(&clusters, observations, params)?.top)
}

/// Accuracy of each aggregation rule over the same stored observations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodAccuracy {
    pub examples: usize,
    pub majority_vote: f64,
    pub weighted_vote: f64,
    pub uniform_selection: f64,
    pub agent_selection: f64,
    pub full_selection: f64,
}

/// Replays every rule on the agent observations in `records`. Majority ties
/// draw from one generator seeded with `seed`, advanced in record order.
pub fn compare_methods(records: &[RunRecord], params: &CalibrationParams, seed: u64) -> Result<MethodAccuracy, HarnessError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = [0usize; 5];
    let modes = [CalibrationMode::Uniform, CalibrationMode::Agent, CalibrationMode::Full].map(|m| m.apply(params));
    for r in records {
        let gold = r.gold.as_deref().ok_or_else(|| HarnessError::MissingGold(r.example_id.clone()))?;
        let obs = &r.observations;
        let mut picks = vec![majority_vote(obs, &mut rng), weighted_vote(obs, params)];
        for p in &modes {
            picks.push(calibrated_selection(obs, p)?);
        }
        for (h, pick) in hits.iter_mut().zip(&picks) {
            if pick.as_deref() == Some(gold) {
                *h += 1;
            }
        }
    }
    let n = records.len().max(1) as f64;
    Ok(MethodAccuracy {
        examples: records.len(),
        majority_vote: hits[0] as f64 / n,
        weighted_vote: hits[1] as f64 / n,
        uniform_selection: hits[2] as f64 / n,
        agent_selection: hits[3] as f64 / n,
        full_selection: hits[4] as f64 / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parsing::{parse_response, TaskKind};

    fn obs(pairs: &[(&str, &str)]) -> Vec<ParsedObservation> {
        pairs
            .iter()
            .map(|(id, ans)| parse_response(&format!("Final Answer: {ans}\nConfidence: 0.5"), &TaskKind::Label, id))
            .collect()
    }

    #[test]
    fn majority_picks_largest() {
        let o = obs(&[("a", "x"), ("b", "x"), ("c", "y")]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(majority_vote(&o, &mut rng).as_deref(), Some("x"));
    }

    #[test]
    fn majority_ties_are_seeded() {
        let o = obs(&[("a", "x"), ("b", "y")]);
        let pick = |seed| majority_vote(&o, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        assert_eq!(pick(0), pick(0));
        let picks: std::collections::BTreeSet<String> = (0..64).map(pick).collect();
        assert_eq!(picks.len(), 2);
    }

    #[test]
    fn all_invalid_abstains() {
        let o = vec![ParsedObservation::invalid("a"), ParsedObservation::invalid("b")];
        assert_eq!(majority_vote(&o, &mut ChaCha8Rng::seed_from_u64(0)), None);
        assert_eq!(weighted_vote(&o, &CalibrationParams::default()), None);
    }

    #[test]
    fn weighted_vote_uses_alpha() {
        let mut p = CalibrationParams::default();
        p.alpha.insert("a1".into(), 0.9);
        p.alpha.insert("a2".into(), 0.3);
        p.alpha.insert("a3".into(), 0.3);
        let o = obs(&[("a1", "b"), ("a2", "a"), ("a3", "a")]);
        assert_eq!(weighted_vote(&o, &p).as_deref(), Some("b"));
        // Equal weights reduce to the largest cluster.
        let u = CalibrationParams::default();
        assert_eq!(weighted_vote(&o, &u).as_deref(), Some("a"));
        assert_eq!(weighted_vote(&o[..1], &p).as_deref(), Some("b"));
        // Exact ties go to the smaller key.
        assert_eq!(weighted_vote(&obs(&[("a", "y"), ("b", "x")]), &u).as_deref(), Some("x"));
    }
}
