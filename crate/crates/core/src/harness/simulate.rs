//! Synthetic datasets and the standard three-agent benchmark.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::agents::{AgentProfile, LatentType, SyntheticBehavior};
use crate::parsing::TaskKind;

use super::dataset::DatasetExample;

pub const STANDARD_SEED: u64 = 20_240_601;
pub const STANDARD_QUESTIONS: usize = 2000;
pub const STANDARD_CALIBRATION: usize = 1000;
pub const STANDARD_RELIABILITIES: [f64; 3] = [0.9, 0.6, 0.55];
pub const STANDARD_OPTIONS: [&str; 4] = ["A", "B", "C", "D"];

/// `count` labeled multiple-choice questions with uniformly drawn gold.
pub fn generate_dataset(count: usize, seed: u64, id_prefix: &str) -> Vec<DatasetExample> {
    let options: Vec<String> = STANDARD_OPTIONS.iter().map(|s| s.to_string()).collect();
    let kind = TaskKind::MultipleChoice { options: options.clone() };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| DatasetExample {
            id: format!("{id_prefix}{i:05}"),
            question: format!("Synthetic question {i}: which option is correct?"),
            gold: Some(options[rng.random_range(0..options.len())].clone()),
            kind: kind.clone(),
        })
        .collect()
}

/// Synthetic numeric questions, for exercising canonicalization.
pub fn generate_numeric_dataset(count: usize, seed: u64, id_prefix: &str) -> Vec<DatasetExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let (a, b): (i64, i64) = (rng.random_range(1..100), rng.random_range(1..100));
            DatasetExample {
                id: format!("{id_prefix}{i:05}"),
                question: format!("What is {a} + {b}?"),
                gold: Some((a + b).to_string()),
                kind: TaskKind::Numeric,
            }
        })
        .collect()
}

/// Agents `a1..aN` with the given reliabilities. When `correlated` is set,
/// every agent after the first shares one error group of that strength.
pub fn synthetic_profiles(reliabilities: &[f64], correlated: Option<f64>) -> Vec<AgentProfile> {
    reliabilities
        .iter()
        .enumerate()
        .map(|(i, &r)| {
            let mut latent = LatentType::new(r);
            if let (Some(kappa), true) = (correlated, i > 0) {
                latent = latent.correlated("g1", kappa);
            }
            AgentProfile::synthetic(&format!("a{}", i + 1), SyntheticBehavior::new(latent))
        })
        .collect()
}

/// Profiles of the standard benchmark: the two weaker agents err together
/// half of the time.
pub fn standard_profiles() -> Vec<AgentProfile> {
    synthetic_profiles(&STANDARD_RELIABILITIES, Some(0.5))
}

/// Disjoint calibration and evaluation splits of the standard benchmark.
pub fn standard_splits() -> (Vec<DatasetExample>, Vec<DatasetExample>) {
    (
        generate_dataset(STANDARD_CALIBRATION, STANDARD_SEED ^ 0xca1, "cal-"),
        generate_dataset(STANDARD_QUESTIONS, STANDARD_SEED, "q"),
    )
}
