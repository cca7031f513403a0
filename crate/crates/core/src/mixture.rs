//! Training mixtures: `n` Unknown facts, each augmented with `k` question
//! paraphrases or `k` HighlyKnown facts, emitted as chat-format samples.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::probe::{
    build_prompt, ChatBackend, ChatMessage, ChatRequest, DecodeParams, PromptMode, PromptSet, Role,
    TransportError, ANSWER_PREFIX,
};
use crate::qa::{Fact, FactId, FactIndex};
use crate::scoring::{Category, ScoredFact};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugMode {
    Paraphrase,
    HighlyKnown,
    None,
}

impl fmt::Display for AugMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AugMode::Paraphrase => "paraphrase",
            AugMode::HighlyKnown => "highly_known",
            AugMode::None => "none",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub n_unknown: usize,
    pub k_aug: usize,
    pub aug_mode: AugMode,
    pub seed: u64,
}

impl MixtureSpec {
    pub fn new(n_unknown: usize, k_aug: usize, aug_mode: AugMode, seed: u64) -> Result<Self> {
        let spec = Self {
            n_unknown,
            k_aug,
            aug_mode,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_unknown == 0 {
            return Err(Error::contract("n_unknown must be positive"));
        }
        if (self.aug_mode == AugMode::None) != (self.k_aug == 0) {
            return Err(Error::contract(format!(
                "aug_mode {} is inconsistent with k_aug {}",
                self.aug_mode, self.k_aug
            )));
        }
        Ok(())
    }

    /// Short label such as `10UK+10HK`, `10UK+1P` or `1UK`.
    pub fn label(&self) -> String {
        match self.aug_mode {
            AugMode::None => format!("{}UK", self.n_unknown),
            AugMode::Paraphrase => format!("{}UK+{}P", self.n_unknown, self.k_aug),
            AugMode::HighlyKnown => format!("{}UK+{}HK", self.n_unknown, self.k_aug),
        }
    }

    pub fn expected_len(&self) -> usize {
        self.n_unknown * (1 + self.k_aug)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleRole {
    UnknownCore,
    ParaphraseAug,
    HighlyKnownAug,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixtureSample {
    pub sample_id: String,
    /// Fact whose answer the sample teaches.
    pub origin_fact_id: FactId,
    /// Unknown core this sample belongs to (itself for core samples).
    pub anchor_fact_id: FactId,
    pub role: SampleRole,
    pub messages: Vec<ChatMessage>,
}

/// Paraphrases keyed by fact id, in generation order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParaphraseStore {
    pub entries: BTreeMap<FactId, Vec<String>>,
}

#[derive(Serialize, Deserialize)]
struct ParaphraseRow {
    fact_id: FactId,
    paraphrases: Vec<String>,
}

impl ParaphraseStore {
    pub fn get(&self, id: &FactId) -> &[String] {
        self.entries.get(id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn insert(&mut self, id: FactId, paraphrases: Vec<String>) {
        self.entries.insert(id, paraphrases);
    }

    pub fn read<R: BufRead>(reader: R) -> Result<Self> {
        let mut store = Self::default();
        for line in reader.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let row: ParaphraseRow = serde_json::from_str(&line)?;
            store
                .entries
                .entry(row.fact_id)
                .or_default()
                .extend(row.paraphrases);
        }
        Ok(store)
    }

    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        for (fact_id, paraphrases) in &self.entries {
            let row = ParaphraseRow {
                fact_id: fact_id.clone(),
                paraphrases: paraphrases.clone(),
            };
            serde_json::to_writer(&mut out, &row)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

fn sorted_pool<'a>(
    scored: &'a [ScoredFact],
    facts: &FactIndex,
    category: Category,
) -> Vec<&'a FactId> {
    let mut pool: Vec<&FactId> = scored
        .iter()
        .filter(|s| s.label.category == category && facts.contains_key(&s.fact_id))
        .map(|s| &s.fact_id)
        .collect();
    pool.sort();
    pool.dedup();
    pool
}

fn sample(fact: &Fact, question: Option<&str>) -> Vec<ChatMessage> {
    match question {
        Some(q) => build_prompt(
            &fact.with_question(q),
            &PromptSet::zero_shot(),
            PromptMode::Training,
        ),
        None => build_prompt(fact, &PromptSet::zero_shot(), PromptMode::Training),
    }
}

/// Builds `n_unknown × (1 + k_aug)` samples. Unknown facts are drawn
/// uniformly without replacement under `spec.seed`; HighlyKnown
/// augmentations are drawn without replacement from the shared pool, so no
/// two cores share one. Paraphrases are taken in store order.
pub fn build_mixture(
    spec: &MixtureSpec,
    scored: &[ScoredFact],
    facts: &FactIndex,
    paraphrases: &ParaphraseStore,
) -> Result<Vec<MixtureSample>> {
    spec.validate()?;
    let unknown = sorted_pool(scored, facts, Category::Unknown);
    if unknown.len() < spec.n_unknown {
        return Err(Error::Supply {
            what: "Unknown facts".into(),
            needed: spec.n_unknown,
            available: unknown.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let cores: Vec<&FactId> = index::sample(&mut rng, unknown.len(), spec.n_unknown)
        .into_iter()
        .map(|i| unknown[i])
        .collect();

    let mut out = Vec::with_capacity(spec.expected_len());
    for id in &cores {
        out.push(MixtureSample {
            sample_id: id.to_string(),
            origin_fact_id: (*id).clone(),
            anchor_fact_id: (*id).clone(),
            role: SampleRole::UnknownCore,
            messages: sample(&facts[*id], None),
        });
    }

    match spec.aug_mode {
        AugMode::None => {}
        AugMode::Paraphrase => {
            let short: Vec<&FactId> = cores
                .iter()
                .copied()
                .filter(|id| paraphrases.get(id).len() < spec.k_aug)
                .collect();
            if let Some(first) = short.first() {
                return Err(Error::Supply {
                    what: format!(
                        "paraphrases ({} of {} Unknown facts short, e.g. {first})",
                        short.len(),
                        cores.len()
                    ),
                    needed: spec.k_aug,
                    available: paraphrases.get(first).len(),
                });
            }
            for id in &cores {
                for (j, p) in paraphrases.get(id).iter().take(spec.k_aug).enumerate() {
                    out.push(MixtureSample {
                        sample_id: format!("{id}/p{j}"),
                        origin_fact_id: (*id).clone(),
                        anchor_fact_id: (*id).clone(),
                        role: SampleRole::ParaphraseAug,
                        messages: sample(&facts[*id], Some(p)),
                    });
                }
            }
        }
        AugMode::HighlyKnown => {
            let known = sorted_pool(scored, facts, Category::HighlyKnown);
            let needed = spec.n_unknown * spec.k_aug;
            if known.len() < needed {
                return Err(Error::Supply {
                    what: "HighlyKnown facts".into(),
                    needed,
                    available: known.len(),
                });
            }
            let picks = index::sample(&mut rng, known.len(), needed).into_vec();
            for (id, chunk) in cores.iter().zip(picks.chunks(spec.k_aug)) {
                for (j, &i) in chunk.iter().enumerate() {
                    let hk = known[i];
                    out.push(MixtureSample {
                        sample_id: format!("{id}/h{j}"),
                        origin_fact_id: hk.clone(),
                        anchor_fact_id: (*id).clone(),
                        role: SampleRole::HighlyKnownAug,
                        messages: sample(&facts[hk], None),
                    });
                }
            }
        }
    }
    sort_samples(&mut out);
    Ok(out)
}

/// Emission order: role, then origin fact, then sample id.
pub fn sort_samples(samples: &mut [MixtureSample]) {
    samples.sort_by(|a, b| {
        (a.role, &a.origin_fact_id, &a.sample_id).cmp(&(b.role, &b.origin_fact_id, &b.sample_id))
    });
}

/// Checks the sample invariants against the source facts.
pub fn validate_samples(samples: &[MixtureSample], facts: &FactIndex) -> Result<()> {
    for s in samples {
        let fact = facts.get(&s.origin_fact_id).ok_or_else(|| {
            Error::contract(format!(
                "sample {} refers to unknown fact {}",
                s.sample_id, s.origin_fact_id
            ))
        })?;
        let roles: Vec<Role> = s.messages.iter().map(|m| m.role).collect();
        if roles != [Role::System, Role::User, Role::Assistant] {
            return Err(Error::contract(format!(
                "sample {} is not a system/user/assistant triple",
                s.sample_id
            )));
        }
        if s.messages[2].content != format!("{ANSWER_PREFIX}{}", fact.answer) {
            return Err(Error::contract(format!(
                "sample {} assistant turn does not carry the canonical answer",
                s.sample_id
            )));
        }
        if s.role == SampleRole::ParaphraseAug && s.origin_fact_id != s.anchor_fact_id {
            return Err(Error::contract(format!(
                "paraphrase sample {} is detached from its core",
                s.sample_id
            )));
        }
    }
    Ok(())
}

/// Writes the training file atomically: one JSON object per sample.
pub fn emit_training_file(samples: &[MixtureSample], path: &Path) -> Result<()> {
    let mut ordered = samples.to_vec();
    sort_samples(&mut ordered);
    crate::io::write_atomic(path, |w| write_samples(&ordered, w))
}

pub fn write_samples<W: Write + ?Sized>(samples: &[MixtureSample], out: &mut W) -> Result<()> {
    for s in samples {
        serde_json::to_writer(&mut *out, s)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_training_file<R: BufRead>(reader: R) -> Result<Vec<MixtureSample>> {
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

/// Instruction used to request paraphrases.
pub const PARAPHRASE_PROMPT: &str = "Please, rephrase the question 200 times differently";

/// Splits a list-style reply into items, dropping numbering and bullets.
pub fn parse_paraphrase_list(text: &str) -> Vec<String> {
    text.lines()
        .map(|line| {
            let t = line.trim();
            let digits = t.len() - t.trim_start_matches(|c: char| c.is_ascii_digit()).len();
            let t = match t[digits..].chars().next() {
                Some('.' | ')' | ':') if digits > 0 => &t[digits + 1..],
                _ => t.trim_start_matches(['-', '*', '•']),
            };
            t.trim().trim_matches('"').trim().to_string()
        })
        .filter(|s| !s.is_empty())
        .collect()
}

/// Asks `backend` for `count` distinct rephrasings of the fact's question,
/// issuing up to `max_calls` requests. Duplicates (case-insensitive) and
/// restatements of the original question are dropped.
pub async fn generate_paraphrases(
    fact: &Fact,
    count: usize,
    backend: &dyn ChatBackend,
    model_id: &str,
    max_calls: u32,
) -> Result<Vec<String>> {
    if count == 0 {
        return Err(Error::contract("paraphrase count must be positive"));
    }
    let mut seen: BTreeSet<String> = BTreeSet::from([fact.question.trim().to_lowercase()]);
    let mut out = Vec::with_capacity(count);
    for call in 0..max_calls.max(1) {
        let request = ChatRequest {
            fact_id: Some(fact.fact_id.clone()),
            prompt_set_id: call,
            model_id: model_id.to_string(),
            messages: vec![
                ChatMessage::new(Role::System, PARAPHRASE_PROMPT),
                ChatMessage::new(Role::User, &fact.question),
            ],
            params: DecodeParams {
                temperature: if call == 0 { 0.0 } else { 0.7 },
                seed: Some(call as u64),
                max_tokens: None,
            },
        };
        let text = match backend.complete(&request).await {
            Ok(t) => t,
            Err(TransportError::Auth(m)) => return Err(Error::Auth(m)),
            Err(e) => {
                log::warn!("paraphrase request for {} failed: {e}", fact.fact_id);
                continue;
            }
        };
        for p in parse_paraphrase_list(&text) {
            if seen.insert(p.to_lowercase()) {
                out.push(p);
                if out.len() == count {
                    return Ok(out);
                }
            }
        }
    }
    Err(Error::Supply {
        what: format!("distinct paraphrases for fact {}", fact.fact_id),
        needed: count,
        available: out.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mock::MockParaphraser;
    use crate::qa::{index_facts, FactSource};
    use crate::scoring::KnowledgeLabel;

    fn corpus(n_uk: usize, n_hk: usize) -> (Vec<Fact>, Vec<ScoredFact>) {
        let mut facts = Vec::new();
        let mut scored = Vec::new();
        for i in 0..n_uk + n_hk {
            let f = Fact::new(
                format!("q{i}?"),
                format!("a{i}"),
                [],
                FactSource::KgTemplate,
            )
            .unwrap();
            let c = if i < n_uk { 0 } else { 10 };
            scored.push(ScoredFact {
                fact_id: f.fact_id.clone(),
                label: KnowledgeLabel::new(c, 10).unwrap(),
                per_prompt_correct: vec![c == 10; 10],
                refusal_count: 0,
            });
            facts.push(f);
        }
        (facts, scored)
    }

    fn paraphrases_for(facts: &[Fact], k: usize) -> ParaphraseStore {
        let mut store = ParaphraseStore::default();
        for f in facts {
            store.insert(
                f.fact_id.clone(),
                (0..k)
                    .map(|j| format!("variant {j} of {}", f.question))
                    .collect(),
            );
        }
        store
    }

    #[test]
    fn spec_validation() {
        assert!(MixtureSpec::new(1, 0, AugMode::None, 0).is_ok());
        assert!(MixtureSpec::new(0, 0, AugMode::None, 0).is_err());
        assert!(MixtureSpec::new(1, 1, AugMode::None, 0).is_err());
        assert!(MixtureSpec::new(1, 0, AugMode::Paraphrase, 0).is_err());
        assert_eq!(
            MixtureSpec::new(10, 10, AugMode::HighlyKnown, 0)
                .unwrap()
                .label(),
            "10UK+10HK"
        );
    }

    #[test]
    fn ten_by_ten_paraphrase_is_110() {
        let (facts, scored) = corpus(30, 0);
        let index = index_facts(&facts);
        let spec = MixtureSpec::new(10, 10, AugMode::Paraphrase, 1).unwrap();
        let samples = build_mixture(&spec, &scored, &index, &paraphrases_for(&facts, 12)).unwrap();
        assert_eq!(samples.len(), 110);
        validate_samples(&samples, &index).unwrap();
        let cores = samples
            .iter()
            .filter(|s| s.role == SampleRole::UnknownCore)
            .count();
        assert_eq!(cores, 10);
        let p = samples
            .iter()
            .find(|s| s.role == SampleRole::ParaphraseAug)
            .unwrap();
        assert!(p.messages[1].content.starts_with("Question: variant "));
    }

    #[test]
    fn ten_by_ten_highly_known_is_110_with_disjoint_augs() {
        let (facts, scored) = corpus(30, 120);
        let index = index_facts(&facts);
        let spec = MixtureSpec::new(10, 10, AugMode::HighlyKnown, 3).unwrap();
        let samples = build_mixture(&spec, &scored, &index, &ParaphraseStore::default()).unwrap();
        assert_eq!(samples.len(), 110);
        let hk: Vec<_> = samples
            .iter()
            .filter(|s| s.role == SampleRole::HighlyKnownAug)
            .collect();
        assert_eq!(hk.len(), 100);
        let distinct: BTreeSet<_> = hk.iter().map(|s| &s.origin_fact_id).collect();
        assert_eq!(distinct.len(), 100);
        validate_samples(&samples, &index).unwrap();
    }

    #[test]
    fn single_unknown() {
        let (facts, scored) = corpus(3, 0);
        let spec = MixtureSpec::new(1, 0, AugMode::None, 0).unwrap();
        let s = build_mixture(
            &spec,
            &scored,
            &index_facts(&facts),
            &ParaphraseStore::default(),
        )
        .unwrap();
        assert_eq!(s.len(), 1);
    }

    #[test]
    fn supply_errors_name_the_shortfall() {
        let (facts, scored) = corpus(5, 5);
        let index = index_facts(&facts);
        let err = build_mixture(
            &MixtureSpec::new(6, 0, AugMode::None, 0).unwrap(),
            &scored,
            &index,
            &ParaphraseStore::default(),
        )
        .unwrap_err();
        assert!(matches!(
            err,
            Error::Supply {
                needed: 6,
                available: 5,
                ..
            }
        ));
        let err = build_mixture(
            &MixtureSpec::new(2, 3, AugMode::HighlyKnown, 0).unwrap(),
            &scored,
            &index,
            &ParaphraseStore::default(),
        )
        .unwrap_err();
        assert!(matches!(
            err,
            Error::Supply {
                needed: 6,
                available: 5,
                ..
            }
        ));
        let err = build_mixture(
            &MixtureSpec::new(2, 3, AugMode::Paraphrase, 0).unwrap(),
            &scored,
            &index,
            &paraphrases_for(&facts, 2),
        )
        .unwrap_err();
        assert!(matches!(
            err,
            Error::Supply {
                needed: 3,
                available: 2,
                ..
            }
        ));
    }

    #[test]
    fn training_file_round_trip_and_system_prompt() {
        let (facts, scored) = corpus(20, 200);
        let index = index_facts(&facts);
        let spec = MixtureSpec::new(10, 10, AugMode::HighlyKnown, 9).unwrap();
        let samples = build_mixture(&spec, &scored, &index, &ParaphraseStore::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.jsonl");
        emit_training_file(&samples, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 110);
        for line in text.lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            assert_eq!(
                v["messages"][0]["content"],
                "Answer the following question."
            );
        }
        let back = read_training_file(text.as_bytes()).unwrap();
        assert_eq!(back, samples);
    }

    #[test]
    fn paraphrase_list_parsing() {
        let text = "1. First way?\n2) Second way?\n\n- Third way?\n* \"Fourth way?\"\n10: Tenth?";
        assert_eq!(
            parse_paraphrase_list(text),
            vec![
                "First way?",
                "Second way?",
                "Third way?",
                "Fourth way?",
                "Tenth?"
            ]
        );
        // a leading number that is part of the text stays
        assert_eq!(
            parse_paraphrase_list("12th Brigade fought where?"),
            vec!["12th Brigade fought where?"]
        );
    }

    #[tokio::test]
    async fn paraphrase_generation_counts() {
        let f = Fact::new(
            "Who wrote the novel Evening Class?",
            "maeve binchy",
            [],
            FactSource::Imported,
        )
        .unwrap();
        let backend = MockParaphraser { per_call: 4 };
        let one = generate_paraphrases(&f, 1, &backend, "m", 3).await.unwrap();
        assert_eq!(one.len(), 1);
        assert_ne!(one[0], f.question);
        let ten = generate_paraphrases(&f, 10, &backend, "m", 3)
            .await
            .unwrap();
        assert_eq!(ten.len(), 10);
        let distinct: BTreeSet<String> = ten.iter().map(|s| s.to_lowercase()).collect();
        assert_eq!(distinct.len(), 10);
        // 12 templates exist in total, so 13 cannot be produced
        let err = generate_paraphrases(&f, 13, &backend, "m", 10)
            .await
            .unwrap_err();
        assert!(matches!(
            err,
            Error::Supply {
                needed: 13,
                available: 12,
                ..
            }
        ));
    }
}
