//! Pipeline belief state against a brute-force re-evaluation written
//! without any library helpers.

use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use quorum_core::belief::{build_belief, pair_key, CalibrationParams};
use quorum_core::clustering::cluster_candidates;
use quorum_core::parsing::{ExtractionMethod, ParseQuality, ParsedObservation};

#[derive(Debug, Clone)]
struct Agent {
    answer: Option<u8>,
    confidence: Option<f64>,
    malformed: bool,
    alpha: f64,
}

#[derive(Debug, Clone)]
struct Instance {
    agents: Vec<Agent>,
    pattern_r: Vec<(Vec<usize>, f64)>,
    gamma: Vec<(usize, usize, f64)>,
    c_miss: f64,
    lambda: f64,
}

fn id(i: usize) -> String {
    format!("ag{i}")
}

fn answer_key(a: u8) -> String {
    ((b'A' + a) as char).to_string()
}

fn observations(inst: &Instance) -> Vec<ParsedObservation> {
    inst.agents
        .iter()
        .enumerate()
        .map(|(i, a)| match a.answer {
            None => ParsedObservation::invalid(id(i)),
            Some(z) => ParsedObservation {
                agent_id: id(i),
                raw_candidate: answer_key(z),
                canonical: Some(answer_key(z)),
                confidence: a.confidence,
                valid: true,
                quality: ParseQuality {
                    malformed: a.malformed,
                    extraction_method: if a.malformed { ExtractionMethod::Heuristic } else { ExtractionMethod::Tagged },
                },
            },
        })
        .collect()
}

fn params(inst: &Instance) -> CalibrationParams {
    let mut p = CalibrationParams::default();
    for (i, a) in inst.agents.iter().enumerate() {
        p.alpha.insert(id(i), a.alpha);
    }
    for (members, r) in &inst.pattern_r {
        let mut ids: Vec<String> = members.iter().map(|&i| id(i)).collect();
        ids.sort();
        p.pattern_r.insert(ids.join("|"), *r);
    }
    for &(i, j, g) in &inst.gamma {
        p.gamma.insert(pair_key(&id(i), &id(j)), g);
    }
    p.c_miss = inst.c_miss;
    p.lambda_mal = inst.lambda;
    p
}

/// Direct evaluation: per-candidate support, pattern lookup, the
/// leader-exempt discount, and normalization.
fn oracle(inst: &Instance) -> (Option<String>, BTreeMap<String, f64>, f64) {
    let gamma_of = |i: usize, j: usize| {
        inst.gamma
            .iter()
            .find(|&&(a, b, _)| (a, b) == (i, j) || (a, b) == (j, i))
            .map(|t| t.2)
    };
    let mut support: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
    for (i, a) in inst.agents.iter().enumerate() {
        if let Some(z) = a.answer {
            support.entry(z).or_default().push(i);
        }
    }
    let mut scores = BTreeMap::new();
    for (z, members) in &support {
        let mut ids: Vec<String> = members.iter().map(|&i| id(i)).collect();
        ids.sort();
        let key = ids.join("|");
        let r = inst
            .pattern_r
            .iter()
            .find(|(m, _)| {
                let mut mi: Vec<String> = m.iter().map(|&i| id(i)).collect();
                mi.sort();
                mi.join("|") == key
            })
            .map_or(0.5, |t| t.1);
        let mut total = 0.0;
        for &i in members {
            let a = &inst.agents[i];
            let c = a.confidence.unwrap_or(inst.c_miss);
            let rho = if a.malformed { inst.lambda } else { 1.0 };
            // correlated component of i inside this support
            let mut comp = BTreeSet::from([i]);
            loop {
                let before = comp.len();
                for &x in members {
                    if comp.iter().any(|&y| y != x && gamma_of(x, y).is_some()) {
                        comp.insert(x);
                    }
                }
                if comp.len() == before {
                    break;
                }
            }
            let partners: Vec<f64> = members.iter().filter(|&&j| j != i).filter_map(|&j| gamma_of(i, j)).collect();
            let leader = comp
                .iter()
                .copied()
                .max_by(|&x, &y| {
                    inst.agents[x]
                        .alpha
                        .partial_cmp(&inst.agents[y].alpha)
                        .unwrap()
                        .then_with(|| id(y).cmp(&id(x)))
                })
                .unwrap();
            let delta = if partners.is_empty() || leader == i {
                1.0
            } else {
                partners.iter().cloned().fold(1.0, f64::min)
            };
            total += a.alpha * (0.5 + c) * rho * delta;
        }
        scores.insert(answer_key(*z), r * total);
    }
    let sum: f64 = scores.values().sum();
    let posterior: BTreeMap<String, f64> = scores.iter().map(|(k, s)| (k.clone(), s / sum)).collect();
    let mut ranked: Vec<(&String, &f64)> = posterior.iter().collect();
    ranked.sort_by(|a, b| b.1.partial_cmp(a.1).unwrap().then(a.0.cmp(b.0)));
    let top = ranked.first().map(|(k, _)| (*k).clone());
    let margin = match ranked.as_slice() {
        [] => 0.0,
        [(_, p)] => **p,
        [(_, p), (_, q), ..] => **p - **q,
    };
    (top, posterior, margin)
}

fn instance() -> impl Strategy<Value = Instance> {
    let agent = (
        prop::option::weighted(0.9, 0u8..4),
        prop::option::weighted(0.8, 0.0f64..=1.0),
        prop::bool::weighted(0.2),
        0.05f64..0.95,
    )
        .prop_map(|(answer, confidence, malformed, alpha)| Agent {
            answer,
            confidence,
            malformed,
            alpha,
        });
    (prop::collection::vec(agent, 1..=5), 0.0f64..=1.0, 0.25f64..=1.0)
        .prop_flat_map(|(agents, c_miss, lambda)| {
            let n = agents.len();
            let patterns = prop::collection::vec((prop::collection::btree_set(0..n, 1..=n), 0.05f64..0.95), 0..4);
            let gammas = prop::collection::vec((0..n, 0..n, 0.1f64..=1.0), 0..4);
            (Just(agents), patterns, gammas, Just(c_miss), Just(lambda))
        })
        .prop_map(|(agents, patterns, gammas, c_miss, lambda)| {
            let mut seen = BTreeSet::new();
            let pattern_r = patterns
                .into_iter()
                .filter(|(m, _)| seen.insert(m.clone()))
                .map(|(m, r)| (m.into_iter().collect(), r))
                .collect();
            let mut pairs = BTreeSet::new();
            let gamma = gammas
                .into_iter()
                .filter(|&(i, j, _)| i != j && pairs.insert((i.min(j), i.max(j))))
                .collect();
            Instance {
                agents,
                pattern_r,
                gamma,
                c_miss,
                lambda,
            }
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn matches_brute_force(inst in instance()) {
        let obs = observations(&inst);
        let p = params(&inst);
        let clusters = cluster_candidates(&obs).unwrap();
        let belief = build_belief(&clusters, &obs, &p).unwrap();
        let (top, posterior, margin) = oracle(&inst);
        prop_assert_eq!(&belief.top, &top);
        prop_assert_eq!(belief.posterior.len(), posterior.len());
        for (k, v) in &posterior {
            prop_assert!((belief.mass(k) - v).abs() <= 1e-12, "{} {} vs {}", k, belief.mass(k), v);
        }
        prop_assert!((belief.margin - margin).abs() <= 1e-12);
    }
}

#[test]
fn hand_worked_correlated_pair() {
    let inst = Instance {
        agents: vec![
            Agent { answer: Some(0), confidence: Some(0.5), malformed: false, alpha: 0.8 },
            Agent { answer: Some(0), confidence: Some(0.5), malformed: false, alpha: 0.8 },
        ],
        pattern_r: vec![(vec![0, 1], 1.0 - 1e-9)],
        gamma: vec![(0, 1, 0.5)],
        c_miss: 0.5,
        lambda: 0.8,
    };
    let obs = observations(&inst);
    let belief = build_belief(&cluster_candidates(&obs).unwrap(), &obs, &params(&inst)).unwrap();
    // 0.8*1 + 0.8*0.5 with the tie on alpha going to the lower id
    assert!((belief.scores["A"] - (1.0 - 1e-9) * 1.2).abs() < 1e-12);
}
