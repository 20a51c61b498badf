//! Benchmark runs, offline threshold sweeps and token accounting.

use std::collections::BTreeMap;
use std::io::Write;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;

use serde::{Deserialize, Serialize};

use crate::agents::{Agent, Coordinator};
use crate::belief::CalibrationParams;
use crate::calibration::CalibrationRecord;
use crate::coordination::{coordinate, final_decision, Decision, DecisionMode, GuardrailThresholds, RunOptions};
use crate::disclosure::{DisclosurePolicy, WhitespaceTokenizer};

use super::dataset::DatasetExample;
use super::metrics::{compute_metrics, Metrics};
use super::record::{RunRecord, Stage};
use super::HarnessError;

/// Which calibrated quantities the belief state may use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationMode {
    /// Equal agent weights, no pattern or pair information.
    Uniform,
    /// Per-agent reliabilities only.
    Agent,
    #[default]
    Full,
}

impl CalibrationMode {
    pub fn name(self) -> &'static str {
        match self {
            CalibrationMode::Uniform => "uniform",
            CalibrationMode::Agent => "agent",
            CalibrationMode::Full => "full",
        }
    }

    pub fn apply(self, params: &CalibrationParams) -> CalibrationParams {
        let mut p = params.clone();
        match self {
            CalibrationMode::Full => {}
            CalibrationMode::Agent => {
                p.pattern_r.clear();
                p.gamma.clear();
            }
            CalibrationMode::Uniform => {
                p.alpha.clear();
                p.pattern_r.clear();
                p.gamma.clear();
            }
        }
        p
    }
}

impl FromStr for CalibrationMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [CalibrationMode::Uniform, CalibrationMode::Agent, CalibrationMode::Full]
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown calibration mode {s:?}"))
    }
}

#[derive(Debug, Clone)]
pub struct BenchmarkOptions {
    /// Examples processed concurrently.
    pub parallelism: usize,
    pub agent_parallelism: usize,
    pub store_full_text: bool,
    /// Distractor count handed to synthetic agents on non-choice tasks.
    pub distractors: usize,
}

impl Default for BenchmarkOptions {
    fn default() -> Self {
        BenchmarkOptions {
            parallelism: 4,
            agent_parallelism: 1,
            store_full_text: false,
            distractors: 3,
        }
    }
}

/// Runs every example and streams records to `sink` in dataset order.
#[allow(clippy::too_many_arguments)]
pub fn run_benchmark(
    dataset: &[DatasetExample],
    pool: &[Box<dyn Agent>],
    coordinator: Option<&dyn Coordinator>,
    params: &CalibrationParams,
    policy: &DisclosurePolicy,
    th: &GuardrailThresholds,
    mode: DecisionMode,
    options: &BenchmarkOptions,
    mut sink: Option<&mut dyn Write>,
) -> Result<(Vec<RunRecord>, Metrics), HarnessError> {
    if dataset.is_empty() {
        return Err(HarnessError::EmptyDataset);
    }
    params.validate()?;
    policy.validate()?;
    th.validate()?;
    let run_options = RunOptions {
        agent_parallelism: options.agent_parallelism,
        store_full_text: options.store_full_text,
        tokenizer: &WhitespaceTokenizer,
    };
    let run_one = |ex: &DatasetExample| {
        let query = ex.query(options.distractors);
        coordinate(&query, ex.gold.as_deref(), pool, coordinator, params, policy, th, mode, &run_options)
    };

    let workers = options.parallelism.clamp(1, dataset.len());
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel();
    let mut records = Vec::with_capacity(dataset.len());
    let mut first_error = None;
    std::thread::scope(|scope| {
        for _ in 0..workers {
            let tx = tx.clone();
            let next = &next;
            let run_one = &run_one;
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= dataset.len() || tx.send((i, run_one(&dataset[i]))).is_err() {
                    break;
                }
            });
        }
        drop(tx);

        let mut pending = BTreeMap::new();
        for (i, result) in rx {
            pending.insert(i, result);
            while let Some(result) = pending.remove(&records.len()) {
                match result {
                    Ok(record) => {
                        if let Some(out) = sink.as_deref_mut() {
                            if let Err(e) = out.write_all(record.to_json_line().as_bytes()) {
                                first_error.get_or_insert(HarnessError::io(std::path::Path::new("<output>"), e));
                            }
                        }
                        records.push(record);
                    }
                    Err(e) => {
                        first_error.get_or_insert(HarnessError::from(e));
                        // Skip the failed slot so later results keep draining.
                        pending.clear();
                        next.store(dataset.len(), Ordering::Relaxed);
                        break;
                    }
                }
            }
        }
    });
    if let Some(e) = first_error {
        return Err(e);
    }
    if let Some(out) = sink {
        out.flush().map_err(|e| HarnessError::io(std::path::Path::new("<output>"), e))?;
    }
    let metrics = compute_metrics(&records);
    Ok((records, metrics))
}

/// Recomputes a record's decision under other thresholds.
pub fn replay_decision(record: &RunRecord, th: &GuardrailThresholds) -> Option<Decision> {
    final_decision(
        record.coordinator_candidate(),
        &record.belief,
        record.top_support(),
        th,
        record.effective_mode(),
    )
    .ok()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: usize,
    pub tau_p: f64,
    pub tau_m: f64,
    pub quality: Option<f64>,
    pub overrides: usize,
    pub override_rate: f64,
    pub wrong_overrides: Option<usize>,
    pub wrong_override_rate: Option<f64>,
}

pub fn sweep_thresholds(records: &[RunRecord], grid: &[GuardrailThresholds]) -> Result<Vec<SweepRow>, HarnessError> {
    for th in grid {
        th.validate()?;
    }
    let n = records.len();
    let frac = |c: usize| if n == 0 { 0.0 } else { c as f64 / n as f64 };
    let labeled = records.iter().all(|r| r.gold.is_some());
    Ok(grid
        .iter()
        .map(|th| {
            let mut overrides = 0;
            let mut wrong = 0;
            let mut correct = 0;
            for r in records {
                let d = replay_decision(r, th);
                let answer = d.as_ref().map(|d| d.final_answer.as_str());
                let right = r.gold.is_some() && answer == r.gold.as_deref();
                if right {
                    correct += 1;
                }
                if d.as_ref().is_some_and(|d| d.guardrail_fired) {
                    overrides += 1;
                    if !right {
                        wrong += 1;
                    }
                }
            }
            SweepRow {
                k: th.k,
                tau_p: th.tau_p,
                tau_m: th.tau_m,
                quality: labeled.then(|| frac(correct)),
                overrides,
                override_rate: frac(overrides),
                wrong_overrides: labeled.then_some(wrong),
                wrong_override_rate: labeled.then(|| frac(wrong)),
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StageTokens {
    pub input: u64,
    pub output: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CrossStats {
    /// Records that exposed evidence to a coordinator.
    pub count: usize,
    pub total: u64,
    pub mean: f64,
    pub min: u64,
    pub max: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TokenReport {
    pub records: usize,
    pub agent: StageTokens,
    pub coordinator: StageTokens,
    pub total: StageTokens,
    pub t_cross: CrossStats,
}

pub fn token_report(records: &[RunRecord]) -> TokenReport {
    let mut report = TokenReport {
        records: records.len(),
        ..TokenReport::default()
    };
    let mut crosses = Vec::new();
    for r in records {
        let (ai, ao) = r.tokens.stage(Stage::Agent);
        let (ci, co) = r.tokens.stage(Stage::Coordinator);
        report.agent.input += ai;
        report.agent.output += ao;
        report.coordinator.input += ci;
        report.coordinator.output += co;
        report.total.input += r.tokens.input_total;
        report.total.output += r.tokens.output_total;
        if let Some(e) = &r.evidence {
            crosses.push(e.t_cross);
        }
    }
    if !crosses.is_empty() {
        let total: u64 = crosses.iter().sum();
        report.t_cross = CrossStats {
            count: crosses.len(),
            total,
            mean: total as f64 / crosses.len() as f64,
            min: *crosses.iter().min().unwrap(),
            max: *crosses.iter().max().unwrap(),
        };
    }
    report
}

/// Turns labeled run records into calibration records.
pub fn calibration_records(records: &[RunRecord]) -> Result<Vec<CalibrationRecord>, HarnessError> {
    records
        .iter()
        .map(|r| {
            let gold = r.gold.as_deref().ok_or_else(|| HarnessError::MissingGold(r.example_id.clone()))?;
            Ok(CalibrationRecord::new(r.example_id.clone(), gold, r.observations.clone()))
        })
        .collect()
}
