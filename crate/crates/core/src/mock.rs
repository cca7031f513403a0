//! Deterministic stand-in for a chat model.
//!
//! A [`MockModel`] answers from a [`MockSpec`]: an explicit per-fact table,
//! a refusal set, and an optional hash-seeded noise rule that gives every
//! other fact a correctness count. A drift rule and a learned-fact set
//! simulate a fine-tuned model. Responses depend only on the spec, the fact
//! and the prompt-set index, never on timing.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};

use crate::probe::{ChatBackend, ChatRequest, Role, TransportError, QUESTION_PREFIX};
use crate::qa::{Fact, FactId};
use crate::scoring::match_answer;
use crate::text::sha256_hex;

pub const DEFAULT_REFUSAL_TEXT: &str = "I couldn't find any information about that.";
pub const DEFAULT_UNKNOWN_RESPONSE: &str = "I don't know.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockEntry {
    /// Response for prompt set `i` is `responses[i % len]`.
    Responses(Vec<String>),
    /// Correct for prompt sets `0..m`, wrong for the rest.
    CorrectIn(u32),
}

/// Assigns each fact not in the table a correctness count from a hash of
/// `(seed, fact_id)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseRule {
    pub seed: u64,
    #[serde(default = "default_prompt_sets")]
    pub prompt_sets: u32,
    pub unknown_share: f64,
    pub highly_known_share: f64,
    /// Share of wrongly answered facts whose wrong answers are refusals.
    #[serde(default)]
    pub refusal_share: f64,
}

fn default_prompt_sets() -> u32 {
    10
}

impl Default for NoiseRule {
    fn default() -> Self {
        Self {
            seed: 0,
            prompt_sets: 10,
            unknown_share: 0.68,
            highly_known_share: 0.13,
            refusal_share: 0.15,
        }
    }
}

/// Perturbs a share of facts the way fine-tuning might: facts that were
/// answered at least once start answering with one of `answers`, facts
/// that never were become fully correct.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftRule {
    pub seed: u64,
    pub rate: f64,
    pub answers: Vec<String>,
    #[serde(default)]
    pub suppress_refusals: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockSpec {
    #[serde(default)]
    pub table: BTreeMap<FactId, MockEntry>,
    #[serde(default)]
    pub refusals: BTreeSet<FactId>,
    #[serde(default = "default_refusal_text")]
    pub refusal_text: String,
    /// Response for requests whose fact is not known to the mock.
    #[serde(default = "default_unknown_response")]
    pub unknown_response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<NoiseRule>,
    /// Facts always answered correctly.
    #[serde(default)]
    pub learned: BTreeSet<FactId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drift: Option<DriftRule>,
}

fn default_refusal_text() -> String {
    DEFAULT_REFUSAL_TEXT.to_string()
}
fn default_unknown_response() -> String {
    DEFAULT_UNKNOWN_RESPONSE.to_string()
}

impl Default for MockSpec {
    fn default() -> Self {
        Self {
            table: BTreeMap::new(),
            refusals: BTreeSet::new(),
            refusal_text: default_refusal_text(),
            unknown_response: default_unknown_response(),
            noise: None,
            learned: BTreeSet::new(),
            drift: None,
        }
    }
}

/// Uniform value in `[0, 1)` from a hash of the inputs.
fn unit(seed: u64, tag: &str, id: &str) -> f64 {
    let h = sha256_hex(format!("{seed}\u{1f}{tag}\u{1f}{id}").as_bytes());
    let v = u64::from_str_radix(&h[..16], 16).unwrap_or(0);
    (v >> 11) as f64 / (1u64 << 53) as f64
}

fn pick(seed: u64, tag: &str, id: &str, len: usize) -> usize {
    ((unit(seed, tag, id) * len as f64) as usize).min(len.saturating_sub(1))
}

struct Plan {
    correct_in: u32,
    refuses: bool,
    drift_answer: Option<String>,
}

pub struct MockModel {
    spec: MockSpec,
    facts: HashMap<FactId, Fact>,
    by_question: HashMap<String, FactId>,
    decoys: Vec<String>,
    latency: Duration,
    in_flight: AtomicUsize,
    max_in_flight: AtomicUsize,
    calls: AtomicUsize,
}

impl MockModel {
    pub fn new(spec: MockSpec, facts: &[Fact]) -> Self {
        let mut sorted: Vec<&Fact> = facts.iter().collect();
        sorted.sort_by(|a, b| a.fact_id.cmp(&b.fact_id));
        let decoys: Vec<String> = sorted
            .iter()
            .map(|f| f.answer.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        Self {
            spec,
            facts: facts
                .iter()
                .map(|f| (f.fact_id.clone(), f.clone()))
                .collect(),
            by_question: facts
                .iter()
                .map(|f| (f.question.clone(), f.fact_id.clone()))
                .collect(),
            decoys,
            latency: Duration::ZERO,
            in_flight: AtomicUsize::new(0),
            max_in_flight: AtomicUsize::new(0),
            calls: AtomicUsize::new(0),
        }
    }

    /// Adds an artificial delay per request, for concurrency checks.
    pub fn with_latency(mut self, latency: Duration) -> Self {
        self.latency = latency;
        self
    }

    /// Highest number of requests observed in flight at once.
    pub fn max_in_flight(&self) -> usize {
        self.max_in_flight.load(Ordering::SeqCst)
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn spec(&self) -> &MockSpec {
        &self.spec
    }

    fn plan(&self, fact: &Fact) -> Plan {
        let id = fact.fact_id.as_str();
        if self.spec.learned.contains(&fact.fact_id) {
            return Plan {
                correct_in: u32::MAX,
                refuses: false,
                drift_answer: None,
            };
        }
        let (mut correct_in, mut refuses) = match self.spec.table.get(&fact.fact_id) {
            Some(MockEntry::Responses(_)) => (0, false),
            Some(MockEntry::CorrectIn(m)) => (*m, false),
            None if self.spec.refusals.contains(&fact.fact_id) => (0, true),
            None => match &self.spec.noise {
                Some(rule) => {
                    let u = unit(rule.seed, "category", id);
                    let m = if u < rule.unknown_share {
                        0
                    } else if u < rule.unknown_share + rule.highly_known_share {
                        rule.prompt_sets
                    } else {
                        1 + pick(
                            rule.seed,
                            "count",
                            id,
                            rule.prompt_sets.saturating_sub(1).max(1) as usize,
                        ) as u32
                    };
                    let refuses = unit(rule.seed, "refuse", id) < rule.refusal_share;
                    (m, refuses)
                }
                None => (0, false),
            },
        };
        if self.spec.refusals.contains(&fact.fact_id) {
            refuses = true;
        }
        let mut drift_answer = None;
        if let Some(drift) = &self.spec.drift {
            if drift.suppress_refusals {
                refuses = false;
            }
            if unit(drift.seed, "drift", id) < drift.rate {
                if correct_in == 0 {
                    correct_in = u32::MAX;
                } else if !drift.answers.is_empty() {
                    correct_in = 0;
                    refuses = false;
                    let a =
                        &drift.answers[pick(drift.seed, "drift-answer", id, drift.answers.len())];
                    drift_answer = Some(a.clone());
                }
            }
        }
        Plan {
            correct_in,
            refuses,
            drift_answer,
        }
    }

    fn wrong_answer(&self, fact: &Fact, prompt_set_id: u32) -> String {
        if !self.decoys.is_empty() {
            let key = format!("{}:{prompt_set_id}", fact.fact_id);
            let start = pick(0, "decoy", &key, self.decoys.len());
            for k in 0..self.decoys.len().min(16) {
                let candidate = &self.decoys[(start + k) % self.decoys.len()];
                if !match_answer(candidate, fact) {
                    return candidate.clone();
                }
            }
        }
        if !match_answer(&self.spec.unknown_response, fact) {
            self.spec.unknown_response.clone()
        } else {
            self.spec.refusal_text.clone()
        }
    }

    /// The response this mock gives for `fact` under prompt set `prompt_set_id`.
    pub fn respond(&self, fact: &Fact, prompt_set_id: u32) -> String {
        if let Some(MockEntry::Responses(r)) = self.spec.table.get(&fact.fact_id) {
            if !r.is_empty() && !self.spec.learned.contains(&fact.fact_id) {
                return r[prompt_set_id as usize % r.len()].clone();
            }
        }
        let plan = self.plan(fact);
        if prompt_set_id < plan.correct_in {
            fact.answer.clone()
        } else if let Some(a) = plan.drift_answer {
            a
        } else if plan.refuses {
            self.spec.refusal_text.clone()
        } else {
            self.wrong_answer(fact, prompt_set_id)
        }
    }

    fn resolve(&self, request: &ChatRequest) -> Option<&Fact> {
        if let Some(id) = &request.fact_id {
            return self.facts.get(id);
        }
        let question = request
            .messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)?
            .content
            .strip_prefix(QUESTION_PREFIX)?;
        self.facts.get(self.by_question.get(question)?)
    }
}

struct InFlight<'a>(&'a AtomicUsize);

impl Drop for InFlight<'_> {
    fn drop(&mut self) {
        self.0.fetch_sub(1, Ordering::SeqCst);
    }
}

#[async_trait]
impl ChatBackend for MockModel {
    async fn complete(&self, request: &ChatRequest) -> Result<String, TransportError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        let _guard = InFlight(&self.in_flight);
        self.max_in_flight.fetch_max(now, Ordering::SeqCst);
        if !self.latency.is_zero() {
            tokio::time::sleep(self.latency).await;
        }
        Ok(match self.resolve(request) {
            Some(fact) => self.respond(fact, request.prompt_set_id),
            None => self.spec.unknown_response.clone(),
        })
    }
}

const REPHRASINGS: [&str; 12] = [
    "Could you tell me: {q}",
    "I'd like to know: {q}",
    "Quick question: {q}",
    "Do you know the answer to this? {q}",
    "Please answer: {q}",
    "Here is a question for you. {q}",
    "Tell me, {q}",
    "Can you help me with this? {q}",
    "Answer this if you can: {q}",
    "I was wondering: {q}",
    "Try this one: {q}",
    "Let me ask you: {q}",
];

/// Returns numbered rephrasings of the question in the last user turn.
/// Each call (keyed by `prompt_set_id`) yields `per_call` items starting at
/// a different offset.
pub struct MockParaphraser {
    pub per_call: usize,
}

impl MockParaphraser {
    pub fn rephrase(&self, question: &str, call: u32) -> Vec<String> {
        (0..self.per_call)
            .map(|i| {
                let t = REPHRASINGS[(call as usize * self.per_call + i) % REPHRASINGS.len()];
                t.replace("{q}", question)
            })
            .collect()
    }
}

#[async_trait]
impl ChatBackend for MockParaphraser {
    async fn complete(&self, request: &ChatRequest) -> Result<String, TransportError> {
        let question = request
            .messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
            .unwrap_or("");
        Ok(self
            .rephrase(question, request.prompt_set_id)
            .iter()
            .enumerate()
            .map(|(i, p)| format!("{}. {p}", i + 1))
            .collect::<Vec<_>>()
            .join("\n"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qa::FactSource;

    fn facts(n: usize) -> Vec<Fact> {
        (0..n)
            .map(|i| {
                Fact::new(
                    format!("question {i}?"),
                    format!("answer{i}"),
                    [],
                    FactSource::KgTemplate,
                )
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn table_correct_in_is_exact() {
        let fs = facts(20);
        let mut spec = MockSpec::default();
        for (m, f) in fs.iter().enumerate().take(11) {
            spec.table
                .insert(f.fact_id.clone(), MockEntry::CorrectIn(m as u32));
        }
        let mock = MockModel::new(spec, &fs);
        for (m, f) in fs.iter().enumerate().take(11) {
            let hits = (0..10)
                .filter(|&p| match_answer(&mock.respond(f, p), f))
                .count();
            assert_eq!(hits, m);
        }
    }

    #[test]
    fn responses_table_and_refusals() {
        let fs = facts(3);
        let mut spec = MockSpec::default();
        spec.table.insert(
            fs[0].fact_id.clone(),
            MockEntry::Responses(vec!["a".into(), "b".into()]),
        );
        spec.refusals.insert(fs[1].fact_id.clone());
        let mock = MockModel::new(spec, &fs);
        assert_eq!(mock.respond(&fs[0], 0), "a");
        assert_eq!(mock.respond(&fs[0], 3), "b");
        assert_eq!(mock.respond(&fs[1], 0), DEFAULT_REFUSAL_TEXT);
    }

    #[test]
    fn noise_shares_roughly_hold_and_are_deterministic() {
        let fs = facts(2000);
        let spec = MockSpec {
            noise: Some(NoiseRule::default()),
            ..MockSpec::default()
        };
        let mock = MockModel::new(spec.clone(), &fs);
        let again = MockModel::new(spec, &fs);
        let mut uk = 0;
        for f in &fs {
            let r: Vec<String> = (0..10).map(|p| mock.respond(f, p)).collect();
            let r2: Vec<String> = (0..10).map(|p| again.respond(f, p)).collect();
            assert_eq!(r, r2);
            if r.iter().all(|x| !match_answer(x, f)) {
                uk += 1;
            }
        }
        let share = uk as f64 / fs.len() as f64;
        assert!((0.6..0.76).contains(&share), "unknown share {share}");
    }

    #[test]
    fn learned_and_drift() {
        let fs = facts(400);
        let mut spec = MockSpec {
            noise: Some(NoiseRule::default()),
            ..MockSpec::default()
        };
        spec.learned.insert(fs[0].fact_id.clone());
        spec.drift = Some(DriftRule {
            seed: 1,
            rate: 1.0,
            answers: vec!["Alençon".into()],
            suppress_refusals: true,
        });
        let mock = MockModel::new(spec, &fs);
        assert!((0..10).all(|p| match_answer(&mock.respond(&fs[0], p), &fs[0])));
        // with rate 1 every fact flips: never-correct facts become correct,
        // the rest collapse onto the drift answer
        for f in &fs[1..] {
            let r = mock.respond(f, 0);
            assert!(r == f.answer || r == "Alençon", "{r}");
        }
    }

    #[tokio::test]
    async fn resolves_by_question_text() {
        let fs = facts(2);
        let mut spec = MockSpec::default();
        spec.table
            .insert(fs[1].fact_id.clone(), MockEntry::CorrectIn(10));
        let mock = MockModel::new(spec, &fs);
        let req = ChatRequest {
            fact_id: None,
            prompt_set_id: 0,
            model_id: "m".into(),
            messages: crate::probe::build_prompt(
                &fs[1],
                &crate::probe::PromptSet::zero_shot(),
                crate::probe::PromptMode::Evaluation,
            ),
            params: Default::default(),
        };
        assert_eq!(mock.complete(&req).await.unwrap(), "answer1");
        let unknown = ChatRequest {
            fact_id: Some("nope".into()),
            ..req
        };
        assert_eq!(
            mock.complete(&unknown).await.unwrap(),
            DEFAULT_UNKNOWN_RESPONSE
        );
    }
}
