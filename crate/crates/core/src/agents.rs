//! Answer agents and coordinators.
//!
//! Two families implement the same traits: a chat-completions HTTP client for
//! real model endpoints, and synthetic agents whose behavior is driven by a
//! known latent type. Synthetic agents are what the simulator, the tests and
//! the acceptance suite run against.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::disclosure::{ExposedEvidence, Tokenizer, WhitespaceTokenizer};
use crate::parsing::TaskKind;

/// Seed offset between consecutive agents of a pool.
pub const AGENT_SEED_STRIDE: u64 = 100_000;

/// Output protocol every agent and the coordinator is asked to follow.
pub const ANSWER_PROTOCOL: &str = "Think through the problem, then finish with exactly two lines:\n\
Final Answer: <your answer>\n\
Confidence: <a number between 0 and 1>";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AgentError {
    #[error("agent id {0:?} is used more than once in the pool")]
    DuplicateId(String),
    #[error("agent id {0:?} must be non-empty and must not contain '|'")]
    BadId(String),
    #[error("agent {0:?}: {1}")]
    InvalidProfile(String, String),
    #[error("synthetic agent needs at least one distractor distinct from gold")]
    NoDistractors,
    #[error("http client: {0}")]
    Client(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Decoding {
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
    /// Explicit decoding seed. Defaults to `base_seed + 100000 * index`.
    pub seed: Option<u64>,
}

impl Default for Decoding {
    fn default() -> Self {
        Decoding {
            temperature: 0.0,
            top_p: 1.0,
            max_tokens: 1024,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationGroup {
    pub group: String,
    pub strength: f64,
}

/// Hidden type of a synthetic agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentType {
    pub reliability: f64,
    #[serde(default)]
    pub confidence_bias: f64,
    #[serde(default)]
    pub correlation: Option<CorrelationGroup>,
}

impl LatentType {
    pub fn new(reliability: f64) -> Self {
        LatentType {
            reliability,
            confidence_bias: 0.0,
            correlation: None,
        }
    }

    pub fn correlated(mut self, group: &str, strength: f64) -> Self {
        self.correlation = Some(CorrelationGroup {
            group: group.to_string(),
            strength,
        });
        self
    }
}

/// Latent type plus the surface behavior of a synthetic agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticBehavior {
    #[serde(flatten)]
    pub latent: LatentType,
    /// Probability of dropping the answer marker.
    #[serde(default)]
    pub malformed_rate: f64,
    #[serde(default)]
    pub missing_confidence_rate: f64,
    #[serde(default = "default_confidence_noise")]
    pub confidence_noise: f64,
    #[serde(default = "default_reasoning_words")]
    pub reasoning_words: usize,
}

fn default_confidence_noise() -> f64 {
    0.05
}

fn default_reasoning_words() -> usize {
    40
}

impl SyntheticBehavior {
    pub fn new(latent: LatentType) -> Self {
        SyntheticBehavior {
            latent,
            malformed_rate: 0.0,
            missing_confidence_rate: 0.0,
            confidence_noise: default_confidence_noise(),
            reasoning_words: default_reasoning_words(),
        }
    }

    fn validate(&self, id: &str) -> Result<(), AgentError> {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        let l = &self.latent;
        let ok = unit(l.reliability)
            && (-1.0..=1.0).contains(&l.confidence_bias)
            && l.correlation.as_ref().is_none_or(|c| unit(c.strength))
            && unit(self.malformed_rate)
            && unit(self.missing_confidence_rate)
            && self.confidence_noise >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(AgentError::InvalidProfile(id.to_string(), "synthetic parameters out of range".into()))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentProfile {
    pub agent_id: String,
    /// Base URL of an OpenAI-compatible server, or `"synthetic"`.
    pub endpoint: String,
    #[serde(default)]
    pub model_name: String,
    #[serde(default)]
    pub decoding: Decoding,
    #[serde(default)]
    pub synthetic: Option<SyntheticBehavior>,
}

impl AgentProfile {
    pub fn synthetic(agent_id: &str, behavior: SyntheticBehavior) -> Self {
        AgentProfile {
            agent_id: agent_id.to_string(),
            endpoint: "synthetic".to_string(),
            model_name: "synthetic".to_string(),
            decoding: Decoding::default(),
            synthetic: Some(behavior),
        }
    }

    pub fn is_synthetic(&self) -> bool {
        self.endpoint == "synthetic"
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AgentResponse {
    pub raw: String,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub latency_ms: u64,
    pub transport_error: Option<String>,
}

impl AgentResponse {
    pub fn failed(error: impl Into<String>, latency_ms: u64) -> Self {
        AgentResponse {
            latency_ms,
            transport_error: Some(error.into()),
            ..AgentResponse::default()
        }
    }
}

/// Ground truth handed to synthetic agents. Real agents never see it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Truth {
    pub gold: String,
    pub distractors: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Query {
    pub example_id: String,
    pub question: String,
    pub kind: TaskKind,
    pub truth: Option<Truth>,
}

impl Query {
    /// The user message sent to agents.
    pub fn user_message(&self) -> String {
        match &self.kind {
            TaskKind::MultipleChoice { options } => {
                format!("{}\n\nAnswer with one of the options: {}.", self.question, options.join(", "))
            }
            _ => self.question.clone(),
        }
    }
}

pub trait Agent: Send + Sync {
    fn id(&self) -> &str;
    fn respond(&self, query: &Query) -> AgentResponse;
}

pub struct CoordinatorRequest<'a> {
    pub query: &'a Query,
    pub prompt: &'a str,
    pub evidence: &'a ExposedEvidence,
}

pub trait Coordinator: Send + Sync {
    fn id(&self) -> &str;
    fn respond(&self, request: &CoordinatorRequest<'_>) -> AgentResponse;
}

/// Dispatches one query to an agent.
pub fn query_agent(agent: &dyn Agent, query: &Query) -> AgentResponse {
    agent.respond(query)
}

fn fnv1a(text: &str) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.bytes() {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Seed for one (stream, example) pair. Independent of scheduling order.
pub fn derive_seed(stream_seed: u64, example_id: &str) -> u64 {
    // splitmix64 finalizer over the combined inputs
    let mut z = stream_seed ^ fnv1a(example_id).rotate_left(17);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const FILLER: [&str; 24] = [
    "consider", "the", "given", "quantity", "so", "we", "check", "each", "step", "carefully", "then", "compare",
    "against", "constraints", "which", "suggests", "result", "because", "earlier", "term", "cancels", "leaving",
    "value", "hence",
];

/// One synthetic response.
///
/// The agent answers gold with probability `reliability`. An erring agent in
/// a correlation group copies `shared_wrong` with probability equal to the
/// group strength; otherwise it draws a distractor uniformly.
pub fn synthetic_respond(
    behavior: &SyntheticBehavior,
    gold: &str,
    distractors: &[String],
    shared_wrong: Option<&str>,
    rng: &mut impl Rng,
) -> Result<AgentResponse, AgentError> {
    if distractors.is_empty() || distractors.iter().any(|d| d == gold) {
        return Err(AgentError::NoDistractors);
    }
    let latent = &behavior.latent;
    let correct = rng.random_bool(latent.reliability.clamp(0.0, 1.0));
    let wrong_pick = distractors[rng.random_range(0..distractors.len())].as_str();
    let copy_group = match (&latent.correlation, shared_wrong) {
        (Some(c), Some(_)) => rng.random_bool(c.strength.clamp(0.0, 1.0)),
        _ => false,
    };
    let answer = if correct {
        gold
    } else if copy_group {
        shared_wrong.unwrap_or(wrong_pick)
    } else {
        wrong_pick
    };

    let noise = if behavior.confidence_noise > 0.0 {
        Normal::new(0.0, behavior.confidence_noise)
            .expect("finite noise scale")
            .sample(rng)
    } else {
        0.0
    };
    let confidence = (latent.reliability + latent.confidence_bias + noise).clamp(0.0, 1.0);
    let omit_confidence = rng.random_bool(behavior.missing_confidence_rate.clamp(0.0, 1.0));
    let malformed = rng.random_bool(behavior.malformed_rate.clamp(0.0, 1.0));

    let mut words = Vec::with_capacity(behavior.reasoning_words);
    for _ in 0..behavior.reasoning_words {
        words.push(FILLER[rng.random_range(0..FILLER.len())]);
    }
    let mut raw = String::new();
    if !words.is_empty() {
        raw.push_str(&words.join(" "));
        raw.push('\n');
    }
    if malformed {
        raw.push_str(answer);
    } else {
        raw.push_str("Final Answer: ");
        raw.push_str(answer);
    }
    if !omit_confidence {
        raw.push_str(&format!("\nConfidence: {confidence:.2}"));
    }
    let output_tokens = WhitespaceTokenizer.count(&raw) as u64;
    Ok(AgentResponse {
        raw,
        input_tokens: 0,
        output_tokens,
        latency_ms: 0,
        transport_error: None,
    })
}

/// Distractors for a synthetic question: the other options for multiple
/// choice, nearby integers for numeric answers, suffixed variants otherwise.
pub fn default_distractors(kind: &TaskKind, gold: &str, count: usize) -> Vec<String> {
    match kind {
        TaskKind::MultipleChoice { options } => options.iter().filter(|o| *o != gold).cloned().collect(),
        TaskKind::Numeric => {
            let base: i64 = gold.parse().unwrap_or(0);
            (1..=count as i64)
                .map(|d| if d % 2 == 1 { base + d.div_euclid(2) + 1 } else { base - d / 2 })
                .map(|v| v.to_string())
                .filter(|v| v != gold)
                .collect()
        }
        TaskKind::Label | TaskKind::FreeText => (1..=count).map(|i| format!("{gold} alt{i}")).collect(),
    }
}

/// Agent with a known latent type.
#[derive(Debug, Clone)]
pub struct SyntheticAgent {
    id: String,
    behavior: SyntheticBehavior,
    seed: u64,
    group_seed: u64,
}

impl SyntheticAgent {
    pub fn new(id: impl Into<String>, behavior: SyntheticBehavior, seed: u64, base_seed: u64) -> Self {
        SyntheticAgent {
            id: id.into(),
            behavior,
            seed,
            group_seed: base_seed,
        }
    }

    /// The wrong candidate every member of `group` shares on this example.
    fn shared_wrong(&self, group: &str, example_id: &str, distractors: &[String]) -> Option<String> {
        if distractors.is_empty() {
            return None;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.group_seed ^ fnv1a(group), example_id));
        Some(distractors[rng.random_range(0..distractors.len())].clone())
    }
}

impl Agent for SyntheticAgent {
    fn id(&self) -> &str {
        &self.id
    }

    fn respond(&self, query: &Query) -> AgentResponse {
        let Some(truth) = &query.truth else {
            return AgentResponse::failed("synthetic agent needs a labeled example", 0);
        };
        let shared = self
            .behavior
            .latent
            .correlation
            .as_ref()
            .and_then(|c| self.shared_wrong(&c.group, &query.example_id, &truth.distractors));
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &query.example_id));
        match synthetic_respond(&self.behavior, &truth.gold, &truth.distractors, shared.as_deref(), &mut rng) {
            Ok(mut response) => {
                response.input_tokens = WhitespaceTokenizer.count(&format!("{ANSWER_PROTOCOL}\n{}", query.user_message())) as u64;
                response
            }
            Err(e) => AgentResponse::failed(e.to_string(), 0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub backoff_ms: u64,
    pub timeout_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: 2,
            backoff_ms: 250,
            timeout_ms: 120_000,
        }
    }
}

#[derive(Debug, Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Debug, Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<ChatMessage<'a>>,
    temperature: f64,
    top_p: f64,
    max_tokens: u32,
    seed: u64,
}

#[derive(Debug, Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
    #[serde(default)]
    usage: Option<ChatUsage>,
}

#[derive(Debug, Deserialize)]
struct ChatChoice {
    message: ChatChoiceMessage,
}

#[derive(Debug, Deserialize)]
struct ChatChoiceMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Debug, Deserialize)]
struct ChatUsage {
    #[serde(default)]
    prompt_tokens: Option<u64>,
    #[serde(default)]
    completion_tokens: Option<u64>,
}

/// Client for an OpenAI-compatible `/chat/completions` endpoint.
pub struct HttpAgent {
    profile: AgentProfile,
    seed: u64,
    url: String,
    api_key: Option<String>,
    retry: RetryPolicy,
    client: reqwest::blocking::Client,
}

impl HttpAgent {
    pub fn new(profile: AgentProfile, seed: u64, api_key: Option<String>, retry: RetryPolicy) -> Result<Self, AgentError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(retry.timeout_ms))
            .build()
            .map_err(|e| AgentError::Client(e.to_string()))?;
        let base = profile.endpoint.trim_end_matches('/');
        let url = if base.ends_with("/chat/completions") {
            base.to_string()
        } else {
            format!("{base}/chat/completions")
        };
        Ok(HttpAgent {
            profile,
            seed,
            url,
            api_key,
            retry,
            client,
        })
    }

    fn complete(&self, system: &str, user: &str) -> AgentResponse {
        let request = ChatRequest {
            model: &self.profile.model_name,
            messages: vec![
                ChatMessage {
                    role: "system",
                    content: system,
                },
                ChatMessage {
                    role: "user",
                    content: user,
                },
            ],
            temperature: self.profile.decoding.temperature,
            top_p: self.profile.decoding.top_p,
            max_tokens: self.profile.decoding.max_tokens,
            seed: self.seed,
        };
        let started = Instant::now();
        let mut last_error = String::new();
        for attempt in 0..=self.retry.max_retries {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(self.retry.backoff_ms << (attempt - 1)));
            }
            match self.post(&request) {
                Ok(parsed) => {
                    let raw = parsed
                        .choices
                        .into_iter()
                        .next()
                        .and_then(|c| c.message.content)
                        .unwrap_or_default();
                    let usage = parsed.usage.unwrap_or(ChatUsage {
                        prompt_tokens: None,
                        completion_tokens: None,
                    });
                    let tok = WhitespaceTokenizer;
                    return AgentResponse {
                        input_tokens: usage
                            .prompt_tokens
                            .unwrap_or_else(|| (tok.count(system) + tok.count(user)) as u64),
                        output_tokens: usage.completion_tokens.unwrap_or_else(|| tok.count(&raw) as u64),
                        raw,
                        latency_ms: started.elapsed().as_millis() as u64,
                        transport_error: None,
                    };
                }
                Err(e) => last_error = e,
            }
        }
        AgentResponse::failed(
            format!("{} after {} attempts: {last_error}", self.url, self.retry.max_retries + 1),
            started.elapsed().as_millis() as u64,
        )
    }

    fn post(&self, request: &ChatRequest<'_>) -> Result<ChatResponse, String> {
        let mut builder = self.client.post(&self.url).json(request);
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let response = builder.send().map_err(|e| e.to_string())?;
        let status = response.status();
        if !status.is_success() {
            return Err(format!("HTTP {status}"));
        }
        response.json::<ChatResponse>().map_err(|e| format!("bad completion body: {e}"))
    }
}

impl Agent for HttpAgent {
    fn id(&self) -> &str {
        &self.profile.agent_id
    }

    fn respond(&self, query: &Query) -> AgentResponse {
        self.complete(ANSWER_PROTOCOL, &query.user_message())
    }
}

impl Coordinator for HttpAgent {
    fn id(&self) -> &str {
        &self.profile.agent_id
    }

    fn respond(&self, request: &CoordinatorRequest<'_>) -> AgentResponse {
        self.complete(ANSWER_PROTOCOL, request.prompt)
    }
}

/// Answers with the leading evidence candidate.
#[derive(Debug, Clone, Default)]
pub struct EchoCoordinator;

impl Coordinator for EchoCoordinator {
    fn id(&self) -> &str {
        "echo"
    }

    fn respond(&self, request: &CoordinatorRequest<'_>) -> AgentResponse {
        let raw = match request.evidence.candidates.first() {
            Some(c) => format!("Following the leading candidate.\nFinal Answer: {}", c.candidate),
            None => "No candidates to follow.".to_string(),
        };
        token_response(request.prompt, raw)
    }
}

/// Always returns the same text.
#[derive(Debug, Clone)]
pub struct FixedCoordinator(pub String);

impl Coordinator for FixedCoordinator {
    fn id(&self) -> &str {
        "fixed"
    }

    fn respond(&self, request: &CoordinatorRequest<'_>) -> AgentResponse {
        token_response(request.prompt, self.0.clone())
    }
}

/// Always fails at the transport layer.
#[derive(Debug, Clone, Default)]
pub struct UnreachableCoordinator;

impl Coordinator for UnreachableCoordinator {
    fn id(&self) -> &str {
        "unreachable"
    }

    fn respond(&self, _request: &CoordinatorRequest<'_>) -> AgentResponse {
        AgentResponse::failed("coordinator unreachable", 0)
    }
}

fn token_response(prompt: &str, raw: String) -> AgentResponse {
    AgentResponse {
        input_tokens: WhitespaceTokenizer.count(prompt) as u64,
        output_tokens: WhitespaceTokenizer.count(&raw) as u64,
        raw,
        latency_ms: 0,
        transport_error: None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCoordinatorConfig {
    /// Probability of picking gold when some agent proposed it.
    pub skill: f64,
}

/// Coordinator for simulation. With probability `skill` it picks gold if
/// gold is among the exposed candidates (else the leading candidate);
/// otherwise it picks an exposed candidate uniformly at random.
#[derive(Debug, Clone)]
pub struct SyntheticCoordinator {
    id: String,
    skill: f64,
    seed: u64,
}

impl SyntheticCoordinator {
    pub fn new(id: impl Into<String>, skill: f64, seed: u64) -> Self {
        SyntheticCoordinator {
            id: id.into(),
            skill: skill.clamp(0.0, 1.0),
            seed,
        }
    }
}

impl Coordinator for SyntheticCoordinator {
    fn id(&self) -> &str {
        &self.id
    }

    fn respond(&self, request: &CoordinatorRequest<'_>) -> AgentResponse {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &request.query.example_id));
        let candidates: Vec<&str> = request.evidence.candidates.iter().map(|c| c.candidate.as_str()).collect();
        let skilled = rng.random_bool(self.skill);
        let gold = request.query.truth.as_ref().map(|t| t.gold.as_str());
        let pick = if candidates.is_empty() {
            match (&request.query.truth, skilled) {
                (Some(t), true) => Some(t.gold.as_str()),
                (Some(t), false) => t.distractors.first().map(String::as_str),
                (None, _) => None,
            }
        } else if skilled {
            Some(gold.filter(|g| candidates.contains(g)).unwrap_or(candidates[0]))
        } else {
            Some(candidates[rng.random_range(0..candidates.len())])
        };
        let raw = match pick {
            Some(answer) => format!(
                "Checked {} candidate(s) against the question.\nFinal Answer: {answer}\nConfidence: 0.70",
                candidates.len()
            ),
            None => "Unable to decide.".to_string(),
        };
        token_response(request.prompt, raw)
    }
}

/// Pool-level settings shared by every agent.
#[derive(Debug, Clone, Default)]
pub struct PoolSettings {
    pub base_seed: u64,
    pub api_key: Option<String>,
    pub retry: RetryPolicy,
}

pub fn validate_agent_id(id: &str) -> Result<(), AgentError> {
    if id.is_empty() || id.contains('|') {
        return Err(AgentError::BadId(id.to_string()));
    }
    Ok(())
}

/// Builds agents from profiles. Agent `i` gets decoding seed
/// `base_seed + 100000 * i` unless its profile sets one.
pub fn build_pool(profiles: &[AgentProfile], settings: &PoolSettings) -> Result<Vec<Box<dyn Agent>>, AgentError> {
    let mut seen = std::collections::BTreeSet::new();
    let mut pool: Vec<Box<dyn Agent>> = Vec::with_capacity(profiles.len());
    for (index, profile) in profiles.iter().enumerate() {
        validate_agent_id(&profile.agent_id)?;
        if !seen.insert(profile.agent_id.as_str()) {
            return Err(AgentError::DuplicateId(profile.agent_id.clone()));
        }
        if profile.decoding.temperature < 0.0 {
            return Err(AgentError::InvalidProfile(profile.agent_id.clone(), "temperature must be >= 0".into()));
        }
        let seed = profile
            .decoding
            .seed
            .unwrap_or_else(|| settings.base_seed.wrapping_add(AGENT_SEED_STRIDE * index as u64));
        if profile.is_synthetic() {
            let behavior = profile.synthetic.clone().ok_or_else(|| {
                AgentError::InvalidProfile(profile.agent_id.clone(), "synthetic endpoint without synthetic behavior".into())
            })?;
            behavior.validate(&profile.agent_id)?;
            pool.push(Box::new(SyntheticAgent::new(&profile.agent_id, behavior, seed, settings.base_seed)));
        } else {
            pool.push(Box::new(HttpAgent::new(
                profile.clone(),
                seed,
                settings.api_key.clone(),
                settings.retry.clone(),
            )?));
        }
    }
    Ok(pool)
}
