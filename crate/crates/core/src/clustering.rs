//! Grouping valid observations into candidate hypotheses.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::parsing::ParsedObservation;

/// Separator used in support-pattern keys. Agent ids may not contain it.
pub const PATTERN_SEPARATOR: char = '|';

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ClusterError {
    #[error("agent {0:?} contributed more than one observation")]
    DuplicateAgent(String),
}

/// All agents whose canonical answers coincide.
///
/// `support` is kept sorted, so it doubles as the support pattern.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateCluster {
    pub candidate: String,
    pub support: Vec<String>,
}

impl CandidateCluster {
    pub fn new(candidate: impl Into<String>, support: impl IntoIterator<Item = String>) -> Self {
        let support: BTreeSet<String> = support.into_iter().collect();
        CandidateCluster {
            candidate: candidate.into(),
            support: support.into_iter().collect(),
        }
    }

    pub fn size(&self) -> usize {
        self.support.len()
    }

    pub fn pattern(&self) -> &[String] {
        &self.support
    }

    pub fn contains(&self, agent_id: &str) -> bool {
        self.support.binary_search_by(|a| a.as_str().cmp(agent_id)).is_ok()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ClusterSet {
    pub clusters: Vec<CandidateCluster>,
    pub valid_agents: BTreeSet<String>,
}

impl ClusterSet {
    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }

    pub fn len(&self) -> usize {
        self.clusters.len()
    }

    pub fn get(&self, candidate: &str) -> Option<&CandidateCluster> {
        self.clusters.iter().find(|c| c.candidate == candidate)
    }

    /// Support size of `candidate`, 0 when absent.
    pub fn support_size(&self, candidate: &str) -> usize {
        self.get(candidate).map_or(0, CandidateCluster::size)
    }
}

/// Clusters valid observations by canonical key. Clusters are ordered by
/// descending support size, then ascending key.
pub fn cluster_candidates(observations: &[ParsedObservation]) -> Result<ClusterSet, ClusterError> {
    let mut seen = BTreeSet::new();
    let mut groups: BTreeMap<&str, Vec<String>> = BTreeMap::new();
    let mut valid_agents = BTreeSet::new();
    for obs in observations {
        if !seen.insert(obs.agent_id.as_str()) {
            return Err(ClusterError::DuplicateAgent(obs.agent_id.clone()));
        }
        if let Some(key) = obs.key() {
            valid_agents.insert(obs.agent_id.clone());
            groups.entry(key).or_default().push(obs.agent_id.clone());
        }
    }
    let mut clusters: Vec<CandidateCluster> = groups
        .into_iter()
        .map(|(key, support)| CandidateCluster::new(key, support))
        .collect();
    clusters.sort_by(|a, b| b.size().cmp(&a.size()).then_with(|| a.candidate.cmp(&b.candidate)));
    Ok(ClusterSet { clusters, valid_agents })
}

/// Lookup key for the reliability of a support pattern: sorted ids joined by `|`.
pub fn pattern_key(cluster: &CandidateCluster) -> String {
    join_pattern(cluster.pattern().iter().map(String::as_str))
}

pub fn join_pattern<'a>(ids: impl IntoIterator<Item = &'a str>) -> String {
    let mut ids: Vec<&str> = ids.into_iter().collect();
    ids.sort_unstable();
    ids.dedup();
    ids.join(&PATTERN_SEPARATOR.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parsing::{ExtractionMethod, ParseQuality};
    use proptest::prelude::*;

    pub(crate) fn obs(agent: &str, key: Option<&str>) -> ParsedObservation {
        ParsedObservation {
            agent_id: agent.to_string(),
            raw_candidate: key.unwrap_or_default().to_string(),
            canonical: key.map(str::to_string),
            confidence: None,
            valid: key.is_some(),
            quality: ParseQuality {
                malformed: false,
                extraction_method: if key.is_some() {
                    ExtractionMethod::Tagged
                } else {
                    ExtractionMethod::None
                },
            },
        }
    }

    #[test]
    fn groups_by_key() {
        let set = cluster_candidates(&[obs("1", Some("A")), obs("2", Some("A")), obs("3", Some("B"))]).unwrap();
        assert_eq!(
            set.clusters,
            vec![
                CandidateCluster::new("A", ["1".to_string(), "2".to_string()]),
                CandidateCluster::new("B", ["3".to_string()]),
            ]
        );
        assert_eq!(set.valid_agents.len(), 3);
    }

    #[test]
    fn invalid_observations_are_excluded() {
        let set = cluster_candidates(&[obs("1", None), obs("2", Some("A")), obs("3", Some("B"))]).unwrap();
        assert_eq!(set.valid_agents.iter().collect::<Vec<_>>(), ["2", "3"]);
        assert_eq!(set.len(), 2);
        assert!(set.clusters.iter().all(|c| c.size() == 1));
    }

    #[test]
    fn all_distinct_gives_singletons() {
        let set = cluster_candidates(&[obs("a", Some("x")), obs("b", Some("y")), obs("c", Some("z"))]).unwrap();
        assert_eq!(set.len(), 3);
        assert_eq!(set.clusters[0].candidate, "x");
    }

    #[test]
    fn duplicate_agent_rejected() {
        let err = cluster_candidates(&[obs("1", Some("A")), obs("1", Some("B"))]).unwrap_err();
        assert_eq!(err, ClusterError::DuplicateAgent("1".into()));
    }

    #[test]
    fn pattern_keys() {
        let key = |ids: &[&str]| pattern_key(&CandidateCluster::new("z", ids.iter().map(|s| s.to_string())));
        assert_eq!(key(&["m2", "m1"]), "m1|m2");
        assert_eq!(key(&["m1"]), "m1");
        assert_eq!(key(&["m3", "m1", "m2"]), "m1|m2|m3");
    }

    fn arb_observations() -> impl Strategy<Value = Vec<ParsedObservation>> {
        prop::collection::vec(prop::option::of(0u8..4), 0..8).prop_map(|keys| {
            keys.into_iter()
                .enumerate()
                .map(|(i, k)| {
                    let key = k.map(|k| format!("c{k}"));
                    obs(&format!("agent{i}"), key.as_deref())
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn supports_partition_valid_agents(observations in arb_observations()) {
            let set = cluster_candidates(&observations).unwrap();
            let total: usize = set.clusters.iter().map(CandidateCluster::size).sum();
            prop_assert_eq!(total, set.valid_agents.len());
            let mut union = BTreeSet::new();
            for c in &set.clusters {
                for a in &c.support {
                    prop_assert!(union.insert(a.clone()), "agent {} in two clusters", a);
                }
                prop_assert!(!c.support.is_empty());
            }
            prop_assert_eq!(union, set.valid_agents.clone());
            let keys: BTreeSet<_> = set.clusters.iter().map(|c| &c.candidate).collect();
            prop_assert_eq!(keys.len(), set.len());
        }

        #[test]
        fn permutation_invariant(observations in arb_observations(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut shuffled = observations.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(cluster_candidates(&observations).unwrap(), cluster_candidates(&shuffled).unwrap());
        }
    }
}
