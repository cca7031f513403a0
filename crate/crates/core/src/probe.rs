//! Few-shot prompt construction and probing of a chat-completions endpoint.
//!
//! Requests go through the [`ChatBackend`] trait so the same fan-out drives a
//! real HTTP endpoint ([`HttpBackend`]) or the deterministic
//! [`MockModel`](crate::mock::MockModel). Results are persisted in a
//! [`ProbeStore`]: appended as they arrive, then compacted into a sorted
//! file so a resumed run ends byte-identical to an uninterrupted one.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use async_trait::async_trait;
use futures::stream::{self, StreamExt};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qa::{Fact, FactId};

pub const SYSTEM_PROMPT: &str = "Answer the following question.";
pub const QUESTION_PREFIX: &str = "Question: ";
pub const ANSWER_PREFIX: &str = "Answer: ";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        Self {
            role,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shot {
    pub question: String,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSet {
    pub prompt_set_id: u32,
    pub shots: Vec<Shot>,
    pub system_text: String,
}

impl PromptSet {
    /// A prompt set without demonstrations, as used for training samples.
    pub fn zero_shot() -> Self {
        Self {
            prompt_set_id: 0,
            shots: Vec::new(),
            system_text: SYSTEM_PROMPT.to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptMode {
    /// Ends with the question; the model supplies the answer.
    Evaluation,
    /// Ends with the gold `Answer: ...` assistant turn.
    Training,
}

/// System turn, one user/assistant pair per shot, then the question.
///
/// ```
/// use factprobe::probe::{build_prompt, PromptMode, PromptSet, Role};
/// use factprobe::qa::{Fact, FactSource};
///
/// let fact = Fact::new("Who wrote the novel Evening Class?", "maeve binchy", [], FactSource::Imported).unwrap();
/// let msgs = build_prompt(&fact, &PromptSet::zero_shot(), PromptMode::Training);
/// assert_eq!(msgs.len(), 3);
/// assert_eq!(msgs[0].content, "Answer the following question.");
/// assert_eq!(msgs[1].content, "Question: Who wrote the novel Evening Class?");
/// assert_eq!((msgs[2].role, msgs[2].content.as_str()), (Role::Assistant, "Answer: maeve binchy"));
/// ```
pub fn build_prompt(fact: &Fact, prompt_set: &PromptSet, mode: PromptMode) -> Vec<ChatMessage> {
    let mut msgs = Vec::with_capacity(2 * prompt_set.shots.len() + 3);
    msgs.push(ChatMessage::new(Role::System, &prompt_set.system_text));
    for shot in &prompt_set.shots {
        msgs.push(ChatMessage::new(
            Role::User,
            format!("{QUESTION_PREFIX}{}", shot.question),
        ));
        msgs.push(ChatMessage::new(
            Role::Assistant,
            format!("{ANSWER_PREFIX}{}", shot.answer),
        ));
    }
    msgs.push(ChatMessage::new(
        Role::User,
        format!("{QUESTION_PREFIX}{}", fact.question),
    ));
    if mode == PromptMode::Training {
        msgs.push(ChatMessage::new(
            Role::Assistant,
            format!("{ANSWER_PREFIX}{}", fact.answer),
        ));
    }
    msgs
}

/// Flattens a message list into a single text prompt: the system text, then
/// each question (with its answer on the same line), separated by blank lines.
pub fn render_prompt_text(messages: &[ChatMessage]) -> String {
    let mut blocks: Vec<String> = Vec::new();
    for m in messages {
        match m.role {
            Role::System | Role::User => blocks.push(m.content.clone()),
            Role::Assistant => match blocks.last_mut() {
                Some(last) => {
                    last.push(' ');
                    last.push_str(&m.content);
                }
                None => blocks.push(m.content.clone()),
            },
        }
    }
    blocks.join("\n\n")
}

/// Draws `count` prompt sets of `shots` demonstrations each from `pool`,
/// without replacement across all sets. Returns the sets and the ids of
/// the facts consumed as demonstrations.
pub fn select_prompt_sets(
    pool: &[Fact],
    count: usize,
    shots: usize,
    seed: u64,
) -> Result<(Vec<PromptSet>, BTreeSet<FactId>)> {
    if shots == 0 {
        let sets = (0..count)
            .map(|i| PromptSet {
                prompt_set_id: i as u32,
                ..PromptSet::zero_shot()
            })
            .collect();
        return Ok((sets, BTreeSet::new()));
    }
    let mut sorted: Vec<&Fact> = pool.iter().collect();
    sorted.sort_by(|a, b| a.fact_id.cmp(&b.fact_id));
    sorted.dedup_by(|a, b| a.fact_id == b.fact_id);
    let needed = count * shots;
    if sorted.len() < needed {
        return Err(Error::Supply {
            what: "few-shot pool facts".into(),
            needed,
            available: sorted.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (chosen, _) = sorted.partial_shuffle(&mut rng, needed);
    let used = chosen.iter().map(|f| f.fact_id.clone()).collect();
    let sets = chosen
        .chunks(shots)
        .enumerate()
        .map(|(i, chunk)| PromptSet {
            prompt_set_id: i as u32,
            shots: chunk
                .iter()
                .map(|f| Shot {
                    question: f.question.clone(),
                    answer: f.answer.clone(),
                })
                .collect(),
            system_text: SYSTEM_PROMPT.to_string(),
        })
        .collect();
    Ok((sets, used))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeParams {
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u32>,
}

impl Default for DecodeParams {
    /// Greedy decoding.
    fn default() -> Self {
        Self {
            temperature: 0.0,
            seed: None,
            max_tokens: Some(64),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub fact_id: FactId,
    pub prompt_set_id: u32,
    pub response_text: String,
    pub model_id: String,
    pub decode_params: DecodeParams,
    /// Set when no response could be obtained.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChatRequest {
    /// Routing metadata for in-process backends; never sent over the wire.
    pub fact_id: Option<FactId>,
    pub prompt_set_id: u32,
    pub model_id: String,
    pub messages: Vec<ChatMessage>,
    pub params: DecodeParams,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TransportError {
    /// Worth retrying: connection problems, timeouts, 429 and 5xx.
    #[error("retryable: {0}")]
    Retryable(String),
    /// Credentials rejected; aborts the whole run.
    #[error("auth: {0}")]
    Auth(String),
    /// Request rejected for good; recorded and not retried.
    #[error("fatal: {0}")]
    Fatal(String),
}

#[async_trait]
pub trait ChatBackend: Send + Sync {
    async fn complete(&self, request: &ChatRequest) -> Result<String, TransportError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointConfig {
    pub base_url: String,
    pub model_id: String,
    /// Name of the environment variable holding the bearer token.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auth_env: Option<String>,
    #[serde(default = "default_parallel")]
    pub max_parallel: usize,
    #[serde(default = "default_retry_limit")]
    pub retry_limit: u32,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default = "default_backoff")]
    pub retry_backoff_ms: u64,
    #[serde(default)]
    pub decode: DecodeParams,
}

fn default_parallel() -> usize {
    8
}
fn default_retry_limit() -> u32 {
    3
}
fn default_timeout() -> u64 {
    60
}
fn default_backoff() -> u64 {
    500
}

impl EndpointConfig {
    pub fn new(base_url: impl Into<String>, model_id: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model_id: model_id.into(),
            auth_env: None,
            max_parallel: default_parallel(),
            retry_limit: default_retry_limit(),
            timeout_secs: default_timeout(),
            retry_backoff_ms: default_backoff(),
            decode: DecodeParams::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_parallel == 0 {
            return Err(Error::contract("max_parallel must be at least 1"));
        }
        Ok(())
    }

    pub fn probe_options(&self) -> ProbeOptions {
        ProbeOptions {
            model_id: self.model_id.clone(),
            max_parallel: self.max_parallel,
            retry_limit: self.retry_limit,
            retry_backoff: Duration::from_millis(self.retry_backoff_ms),
            decode: self.decode.clone(),
        }
    }
}

/// Chat-completions client over HTTP.
pub struct HttpBackend {
    client: reqwest::Client,
    url: String,
    token: Option<String>,
}

impl HttpBackend {
    /// Fails with [`Error::Auth`] when the configured token variable is unset.
    pub fn new(config: &EndpointConfig) -> Result<Self> {
        config.validate()?;
        let token = match &config.auth_env {
            Some(var) => Some(
                std::env::var(var)
                    .map_err(|_| Error::Auth(format!("environment variable {var} is not set")))?,
            ),
            None => None,
        };
        let client = reqwest::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| Error::Transport(e.to_string()))?;
        let base = config.base_url.trim_end_matches('/');
        let url = if base.ends_with("/chat/completions") {
            base.to_string()
        } else {
            format!("{base}/chat/completions")
        };
        Ok(Self { client, url, token })
    }
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    max_tokens: Option<u32>,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
}

#[derive(Deserialize)]
struct WireMessage {
    #[serde(default)]
    content: Option<String>,
}

#[async_trait]
impl ChatBackend for HttpBackend {
    async fn complete(&self, request: &ChatRequest) -> Result<String, TransportError> {
        let body = WireRequest {
            model: &request.model_id,
            messages: &request.messages,
            temperature: request.params.temperature,
            seed: request.params.seed,
            max_tokens: request.params.max_tokens,
        };
        let mut req = self.client.post(&self.url).json(&body);
        if let Some(token) = &self.token {
            req = req.bearer_auth(token);
        }
        let resp = req
            .send()
            .await
            .map_err(|e| TransportError::Retryable(e.to_string()))?;
        let status = resp.status();
        if status.as_u16() == 401 || status.as_u16() == 403 {
            return Err(TransportError::Auth(format!("HTTP {status}")));
        }
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(TransportError::Retryable(format!("HTTP {status}")));
        }
        if !status.is_success() {
            let text = resp.text().await.unwrap_or_default();
            return Err(TransportError::Fatal(format!("HTTP {status}: {text}")));
        }
        let parsed: WireResponse = resp
            .json()
            .await
            .map_err(|e| TransportError::Retryable(format!("bad response body: {e}")))?;
        parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content.unwrap_or_default())
            .ok_or_else(|| TransportError::Fatal("response has no choices".into()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeOptions {
    pub model_id: String,
    pub max_parallel: usize,
    pub retry_limit: u32,
    pub retry_backoff: Duration,
    pub decode: DecodeParams,
}

impl ProbeOptions {
    pub fn new(model_id: impl Into<String>) -> Self {
        Self {
            model_id: model_id.into(),
            max_parallel: default_parallel(),
            retry_limit: default_retry_limit(),
            retry_backoff: Duration::ZERO,
            decode: DecodeParams::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunReport {
    pub requested: usize,
    pub skipped_existing: usize,
    pub completed: usize,
    pub errors: usize,
    pub retries: usize,
}

type RecordKey = (FactId, u32);

/// Probe records keyed by `(fact_id, prompt_set_id)`, optionally backed by
/// an append-only JSON-lines file.
#[derive(Debug, Default)]
pub struct ProbeStore {
    path: Option<PathBuf>,
    records: BTreeMap<RecordKey, ProbeRecord>,
}

impl ProbeStore {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens (or creates) a store file, loading any records already in it.
    /// A later line for the same key replaces an earlier one, except that an
    /// error record never replaces a successful one.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut store = Self {
            path: Some(path.clone()),
            records: BTreeMap::new(),
        };
        if path.exists() {
            let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
            for (idx, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(|e| Error::io(&path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<ProbeRecord>(&line) {
                    Ok(r) => store.insert(r),
                    // a torn final line from an interrupted run
                    Err(e) => log::warn!(
                        "{}:{}: skipping unreadable record: {e}",
                        path.display(),
                        idx + 1
                    ),
                }
            }
        }
        Ok(store)
    }

    fn insert(&mut self, r: ProbeRecord) {
        let key = (r.fact_id.clone(), r.prompt_set_id);
        match self.records.get(&key) {
            Some(existing) if existing.error.is_none() && r.error.is_some() => {}
            _ => {
                self.records.insert(key, r);
            }
        }
    }

    pub fn is_complete(&self, fact_id: &FactId, prompt_set_id: u32) -> bool {
        self.records
            .get(&(fact_id.clone(), prompt_set_id))
            .is_some_and(|r| r.error.is_none())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Records in `(fact_id, prompt_set_id)` order.
    pub fn records(&self) -> impl Iterator<Item = &ProbeRecord> {
        self.records.values()
    }

    pub fn into_records(self) -> Vec<ProbeRecord> {
        self.records.into_values().collect()
    }

    /// Rewrites the backing file in key order, one record per line.
    pub fn compact(&self) -> Result<()> {
        let Some(path) = &self.path else {
            return Ok(());
        };
        crate::io::write_atomic(path, |w| {
            for r in self.records.values() {
                serde_json::to_writer(&mut *w, r)?;
                w.write_all(b"\n")?;
            }
            Ok(())
        })
    }
}

/// Reads a probe store file into sorted records.
pub fn read_probe_store(path: impl AsRef<Path>) -> Result<Vec<ProbeRecord>> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "probe store not found"),
        ));
    }
    Ok(ProbeStore::open(path)?.into_records())
}

struct Outcome {
    record: ProbeRecord,
    retries: usize,
}

async fn probe_one(
    backend: &dyn ChatBackend,
    request: ChatRequest,
    opts: &ProbeOptions,
) -> Result<Outcome> {
    let fact_id = request
        .fact_id
        .clone()
        .expect("probe requests carry a fact id");
    let make = |response_text: String, error: Option<String>| ProbeRecord {
        fact_id: fact_id.clone(),
        prompt_set_id: request.prompt_set_id,
        response_text,
        model_id: opts.model_id.clone(),
        decode_params: opts.decode.clone(),
        error,
    };
    let mut last_error = String::new();
    for attempt in 0..=opts.retry_limit {
        if attempt > 0 && !opts.retry_backoff.is_zero() {
            let factor = 1u32 << (attempt - 1).min(6);
            tokio::time::sleep(opts.retry_backoff * factor).await;
        }
        match backend.complete(&request).await {
            Ok(text) => {
                return Ok(Outcome {
                    record: make(text, None),
                    retries: attempt as usize,
                })
            }
            Err(TransportError::Auth(msg)) => return Err(Error::Auth(msg)),
            Err(TransportError::Fatal(msg)) => {
                return Ok(Outcome {
                    record: make(String::new(), Some(msg)),
                    retries: attempt as usize,
                })
            }
            Err(TransportError::Retryable(msg)) => last_error = msg,
        }
    }
    Ok(Outcome {
        record: make(
            String::new(),
            Some(format!(
                "retries exhausted after {} attempts: {last_error}",
                opts.retry_limit + 1
            )),
        ),
        retries: opts.retry_limit as usize,
    })
}

/// Sends every `(fact, prompt set)` pair not already completed in `store`
/// with at most `opts.max_parallel` requests in flight. Results are
/// appended to the store file by this task alone, and the file is compacted
/// at the end. An authentication failure aborts the run.
pub async fn probe_all(
    facts: &[Fact],
    prompt_sets: &[PromptSet],
    backend: &dyn ChatBackend,
    opts: &ProbeOptions,
    store: &mut ProbeStore,
) -> Result<RunReport> {
    if opts.max_parallel == 0 {
        return Err(Error::contract("max_parallel must be at least 1"));
    }
    let mut report = RunReport {
        requested: facts.len() * prompt_sets.len(),
        ..RunReport::default()
    };
    let mut jobs = Vec::new();
    for fact in facts {
        for set in prompt_sets {
            if store.is_complete(&fact.fact_id, set.prompt_set_id) {
                report.skipped_existing += 1;
                continue;
            }
            jobs.push(ChatRequest {
                fact_id: Some(fact.fact_id.clone()),
                prompt_set_id: set.prompt_set_id,
                model_id: opts.model_id.clone(),
                messages: build_prompt(fact, set, PromptMode::Evaluation),
                params: opts.decode.clone(),
            });
        }
    }

    let mut writer = match &store.path {
        Some(path) => {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            let f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| Error::io(path, e))?;
            Some(BufWriter::new(f))
        }
        None => None,
    };

    let mut results = stream::iter(jobs)
        .map(|req| probe_one(backend, req, opts))
        .buffer_unordered(opts.max_parallel);

    while let Some(outcome) = results.next().await {
        let outcome = outcome?;
        report.retries += outcome.retries;
        if outcome.record.error.is_some() {
            report.errors += 1;
        } else {
            report.completed += 1;
        }
        if let Some(w) = writer.as_mut() {
            serde_json::to_writer(&mut *w, &outcome.record)?;
            w.write_all(b"\n")?;
        }
        store.insert(outcome.record);
    }
    if let Some(mut w) = writer {
        w.flush()?;
    }
    store.compact()?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qa::FactSource;

    fn imported(q: &str, a: &str) -> Fact {
        Fact::new(q, a, [], FactSource::Imported).unwrap()
    }

    #[test]
    fn four_shot_layout() {
        let set = PromptSet {
            prompt_set_id: 0,
            shots: vec![
                Shot {
                    question: "Who wrote the novel Evening Class?".into(),
                    answer: "maeve binchy".into(),
                },
                Shot {
                    question: "Which country does the airline Air Pacific come from?".into(),
                    answer: "fidji".into(),
                },
                Shot {
                    question: "In which branch of the arts does Allegra Kent work?".into(),
                    answer: "balletti".into(),
                },
                Shot {
                    question: "Who had a 70s No 1 hit with Billy, Don't Be A Hero?".into(),
                    answer: "bo donaldson and heywoods".into(),
                },
            ],
            system_text: SYSTEM_PROMPT.into(),
        };
        let fact = imported("12th Brigade (Australia) fought in what battle?", "x");
        let msgs = build_prompt(&fact, &set, PromptMode::Evaluation);
        assert_eq!(msgs.len(), 10);
        assert_eq!(msgs[0].role, Role::System);
        assert_eq!(
            msgs[3].content,
            "Question: Which country does the airline Air Pacific come from?"
        );
        assert_eq!(msgs[4].content, "Answer: fidji");
        assert_eq!(msgs.last().unwrap().role, Role::User);

        let expected = "Answer the following question.\n\n\
Question: Who wrote the novel Evening Class? Answer: maeve binchy\n\n\
Question: Which country does the airline Air Pacific come from? Answer: fidji\n\n\
Question: In which branch of the arts does Allegra Kent work? Answer: balletti\n\n\
Question: Who had a 70s No 1 hit with Billy, Don't Be A Hero? Answer: bo donaldson and heywoods\n\n\
Question: 12th Brigade (Australia) fought in what battle?";
        assert_eq!(render_prompt_text(&msgs), expected);
    }

    #[test]
    fn zero_shot_modes() {
        let fact = imported("q?", "a");
        let eval = build_prompt(&fact, &PromptSet::zero_shot(), PromptMode::Evaluation);
        assert_eq!(
            eval.iter().map(|m| m.role).collect::<Vec<_>>(),
            vec![Role::System, Role::User]
        );
        let train = build_prompt(&fact, &PromptSet::zero_shot(), PromptMode::Training);
        assert_eq!(
            train.iter().map(|m| m.role).collect::<Vec<_>>(),
            vec![Role::System, Role::User, Role::Assistant]
        );
    }

    #[test]
    fn prompt_sets_are_disjoint_and_seeded() {
        let pool: Vec<Fact> = (0..60)
            .map(|i| imported(&format!("question {i}?"), &format!("answer {i}")))
            .collect();
        let (sets, used) = select_prompt_sets(&pool, 10, 4, 7).unwrap();
        assert_eq!(sets.len(), 10);
        assert_eq!(used.len(), 40);
        let mut all_q = BTreeSet::new();
        for (i, s) in sets.iter().enumerate() {
            assert_eq!(s.prompt_set_id, i as u32);
            assert_eq!(s.shots.len(), 4);
            for shot in &s.shots {
                assert!(all_q.insert(shot.question.clone()));
            }
        }
        let (again, _) = select_prompt_sets(&pool, 10, 4, 7).unwrap();
        assert_eq!(sets, again);
        let (other, _) = select_prompt_sets(&pool, 10, 4, 8).unwrap();
        assert_ne!(sets, other);
        assert!(matches!(
            select_prompt_sets(&pool[..39], 10, 4, 7),
            Err(Error::Supply {
                needed: 40,
                available: 39,
                ..
            })
        ));
    }

    #[test]
    fn zero_shot_prompt_sets() {
        let (sets, used) = select_prompt_sets(&[], 3, 0, 1).unwrap();
        assert_eq!(sets.len(), 3);
        assert!(used.is_empty());
        assert!(sets.iter().all(|s| s.shots.is_empty()));
    }

    #[test]
    fn store_keeps_success_over_later_error() {
        let mut s = ProbeStore::in_memory();
        let ok = ProbeRecord {
            fact_id: "f".into(),
            prompt_set_id: 0,
            response_text: "x".into(),
            model_id: "m".into(),
            decode_params: DecodeParams::default(),
            error: None,
        };
        let bad = ProbeRecord {
            error: Some("boom".into()),
            ..ok.clone()
        };
        s.insert(ok.clone());
        s.insert(bad);
        assert!(s.is_complete(&"f".into(), 0));
        assert_eq!(s.into_records(), vec![ok]);
    }
}
