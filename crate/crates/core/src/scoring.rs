//! Answer matching, refusal detection, knowledge categories and reliability.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::probe::ProbeRecord;
use crate::qa::{Fact, FactId};
use crate::text::normalize;

/// True when any alias of `fact`, normalized, occurs inside the normalized response.
///
/// ```
/// use factprobe::qa::{Fact, FactSource};
/// use factprobe::scoring::match_answer;
///
/// let fact = Fact::new("where is Alfa Romeo MiTo assembled?", "Turin", [], FactSource::KgTemplate).unwrap();
/// assert!(match_answer("The answer is Turin, Italy.", &fact));
/// assert!(!match_answer("Milan", &fact));
/// ```
pub fn match_answer(response: &str, fact: &Fact) -> bool {
    let response = normalize(response);
    fact.aliases.iter().any(|alias| {
        let alias = normalize(alias);
        !alias.is_empty() && response.contains(&alias)
    })
}

/// The two declining phrasings observed from the default model; the
/// trailing ellipsis is a wildcard.
pub const DEFAULT_REFUSAL_PATTERNS: [&str; 2] =
    ["I couldn't find any information…", "I cannot verify the…"];

/// Refusal patterns. `*`, `...` and `…` are wildcards; the remaining pieces
/// must occur in order in the normalized response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct RefusalPatterns {
    raw: Vec<String>,
    compiled: Vec<Vec<String>>,
}

impl RefusalPatterns {
    pub fn new<S: AsRef<str>>(patterns: impl IntoIterator<Item = S>) -> Result<Self> {
        let raw: Vec<String> = patterns
            .into_iter()
            .map(|p| p.as_ref().to_string())
            .collect();
        if raw.is_empty() {
            return Err(Error::contract("refusal pattern list is empty"));
        }
        let mut compiled = Vec::with_capacity(raw.len());
        for p in &raw {
            let pieces: Vec<String> = p
                .replace("...", "*")
                .replace('…', "*")
                .split('*')
                .map(normalize)
                .filter(|s| !s.is_empty())
                .collect();
            if pieces.is_empty() {
                return Err(Error::contract(format!(
                    "refusal pattern {p:?} matches everything"
                )));
            }
            compiled.push(pieces);
        }
        Ok(Self { raw, compiled })
    }

    pub fn patterns(&self) -> &[String] {
        &self.raw
    }

    pub fn is_refusal(&self, response: &str) -> bool {
        let response = normalize(response);
        self.compiled.iter().any(|pieces| {
            let mut rest = response.as_str();
            pieces.iter().all(|piece| match rest.find(piece.as_str()) {
                Some(at) => {
                    rest = &rest[at + piece.len()..];
                    true
                }
                None => false,
            })
        })
    }
}

impl Default for RefusalPatterns {
    fn default() -> Self {
        Self::new(DEFAULT_REFUSAL_PATTERNS).expect("default refusal patterns are valid")
    }
}

impl TryFrom<Vec<String>> for RefusalPatterns {
    type Error = Error;
    fn try_from(v: Vec<String>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<RefusalPatterns> for Vec<String> {
    fn from(p: RefusalPatterns) -> Self {
        p.raw
    }
}

/// ```
/// use factprobe::scoring::{detect_refusal, RefusalPatterns};
/// let p = RefusalPatterns::default();
/// assert!(detect_refusal("I couldn't find any information about that.", &p));
/// assert!(!detect_refusal("London", &p));
/// ```
pub fn detect_refusal(response: &str, patterns: &RefusalPatterns) -> bool {
    patterns.is_refusal(response)
}

/// Knowledge category by the fraction of prompt sets answered correctly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Category {
    Unknown,
    MaybeKnown,
    HighlyKnown,
}

impl Category {
    pub fn abbrev(self) -> &'static str {
        match self {
            Category::Unknown => "UK",
            Category::MaybeKnown => "MK",
            Category::HighlyKnown => "HK",
        }
    }

    /// Category for `correct` hits out of `n` prompts (`n > 0`).
    pub fn from_counts(correct: u32, n: u32) -> Self {
        if correct == 0 {
            Category::Unknown
        } else if correct >= n {
            Category::HighlyKnown
        } else {
            Category::MaybeKnown
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.abbrev())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KnowledgeLabel {
    pub category: Category,
    pub n_correct: u32,
    pub n_prompts: u32,
}

impl KnowledgeLabel {
    pub fn new(n_correct: u32, n_prompts: u32) -> Result<Self> {
        if n_prompts == 0 || n_correct > n_prompts {
            return Err(Error::contract(format!(
                "invalid label counts {n_correct}/{n_prompts}"
            )));
        }
        Ok(Self {
            category: Category::from_counts(n_correct, n_prompts),
            n_correct,
            n_prompts,
        })
    }

    pub fn p_correct(&self) -> Ratio<u64> {
        Ratio::new(self.n_correct as u64, self.n_prompts as u64)
    }

    pub fn p_correct_f64(&self) -> f64 {
        self.n_correct as f64 / self.n_prompts as f64
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScoredFact {
    pub fact_id: FactId,
    pub label: KnowledgeLabel,
    pub per_prompt_correct: Vec<bool>,
    pub refusal_count: u32,
}

/// Scores the probe records of one fact. Records that carry a transport
/// error are not responses and are skipped; match takes precedence over
/// refusal.
pub fn categorize(
    records: &[&ProbeRecord],
    fact: &Fact,
    refusals: &RefusalPatterns,
) -> Result<ScoredFact> {
    let mut usable: Vec<&ProbeRecord> = records
        .iter()
        .copied()
        .filter(|r| r.error.is_none())
        .collect();
    if usable.is_empty() {
        return Err(Error::contract(format!(
            "no usable probe records for fact {}",
            fact.fact_id
        )));
    }
    if let Some(r) = usable.iter().find(|r| r.fact_id != fact.fact_id) {
        return Err(Error::contract(format!(
            "record for {} passed while scoring {}",
            r.fact_id, fact.fact_id
        )));
    }
    usable.sort_by_key(|r| r.prompt_set_id);
    let per_prompt_correct: Vec<bool> = usable
        .iter()
        .map(|r| match_answer(&r.response_text, fact))
        .collect();
    let refusal_count = usable
        .iter()
        .filter(|r| refusals.is_refusal(&r.response_text))
        .count() as u32;
    let n_correct = per_prompt_correct.iter().filter(|&&b| b).count() as u32;
    Ok(ScoredFact {
        fact_id: fact.fact_id.clone(),
        label: KnowledgeLabel::new(n_correct, per_prompt_correct.len() as u32)?,
        per_prompt_correct,
        refusal_count,
    })
}

/// Scores every fact that has records, sorted by fact id. Facts with no
/// usable records are returned separately.
pub fn categorize_all(
    records: &[ProbeRecord],
    facts: &[Fact],
    refusals: &RefusalPatterns,
) -> Result<(Vec<ScoredFact>, Vec<FactId>)> {
    let mut grouped: BTreeMap<&FactId, Vec<&ProbeRecord>> = BTreeMap::new();
    for r in records {
        grouped.entry(&r.fact_id).or_default().push(r);
    }
    let mut sorted: Vec<&Fact> = facts.iter().collect();
    sorted.sort_by(|a, b| a.fact_id.cmp(&b.fact_id));
    let mut scored = Vec::with_capacity(sorted.len());
    let mut missing = Vec::new();
    for fact in sorted {
        let recs = grouped.get(&fact.fact_id).map(Vec::as_slice).unwrap_or(&[]);
        if recs.iter().all(|r| r.error.is_some()) {
            missing.push(fact.fact_id.clone());
            continue;
        }
        scored.push(categorize(recs, fact, refusals)?);
    }
    Ok((scored, missing))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityReport {
    pub n_facts: usize,
    /// Mean of per-fact `p_correct`.
    pub reliability: f64,
    /// Fraction of facts answered correctly under every prompt set.
    pub all_correct_fraction: f64,
}

/// Mean `p_correct` over a set of facts, exact.
pub fn reliability(scored: &[&ScoredFact]) -> Result<Ratio<u64>> {
    if scored.is_empty() {
        return Err(Error::contract("reliability over an empty fact set"));
    }
    let sum = scored.iter().fold(Ratio::from_integer(0u64), |acc, s| {
        acc + s.label.p_correct()
    });
    Ok(sum / Ratio::from_integer(scored.len() as u64))
}

/// Reliability of the facts in `subset`, which must all be scored.
pub fn reliability_report(scored: &[ScoredFact], subset: &[FactId]) -> Result<ReliabilityReport> {
    let by_id: BTreeMap<&FactId, &ScoredFact> = scored.iter().map(|s| (&s.fact_id, s)).collect();
    let mut chosen = Vec::with_capacity(subset.len());
    for id in subset {
        chosen.push(
            *by_id
                .get(id)
                .ok_or_else(|| Error::contract(format!("training fact {id} has no score")))?,
        );
    }
    let r = reliability(&chosen)?;
    let all = chosen
        .iter()
        .filter(|s| s.label.category == Category::HighlyKnown)
        .count();
    Ok(ReliabilityReport {
        n_facts: chosen.len(),
        reliability: ratio_f64(r),
        all_correct_fraction: all as f64 / chosen.len() as f64,
    })
}

pub(crate) fn ratio_f64(r: Ratio<u64>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

/// Category counts in the layout of a knowledge-category table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategorySummary {
    pub unknown: usize,
    pub maybe_known: usize,
    pub highly_known: usize,
    pub total: usize,
}

impl CategorySummary {
    pub fn from_categories(cats: impl IntoIterator<Item = Category>) -> Self {
        let mut s = Self {
            unknown: 0,
            maybe_known: 0,
            highly_known: 0,
            total: 0,
        };
        for c in cats {
            match c {
                Category::Unknown => s.unknown += 1,
                Category::MaybeKnown => s.maybe_known += 1,
                Category::HighlyKnown => s.highly_known += 1,
            }
            s.total += 1;
        }
        s
    }

    pub fn from_scored(scored: &[ScoredFact]) -> Self {
        Self::from_categories(scored.iter().map(|s| s.label.category))
    }

    /// Checks `unknown + maybe_known + highly_known == total == corpus_size`.
    pub fn check_total(&self, corpus_size: usize) -> Result<()> {
        let sum = self.unknown + self.maybe_known + self.highly_known;
        if sum != self.total || sum != corpus_size {
            return Err(Error::contract(format!(
                "category counts {} + {} + {} = {sum} do not match corpus size {corpus_size}",
                self.unknown, self.maybe_known, self.highly_known
            )));
        }
        Ok(())
    }
}

/// On-disk form of a scored fact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ScoredRow {
    fact_id: FactId,
    category: Category,
    p_correct: f64,
    n_correct: u32,
    n_prompts: u32,
    per_prompt: String,
    refusal_count: u32,
}

impl From<&ScoredFact> for ScoredRow {
    fn from(s: &ScoredFact) -> Self {
        Self {
            fact_id: s.fact_id.clone(),
            category: s.label.category,
            p_correct: s.label.p_correct_f64(),
            n_correct: s.label.n_correct,
            n_prompts: s.label.n_prompts,
            per_prompt: s
                .per_prompt_correct
                .iter()
                .map(|&b| if b { '1' } else { '0' })
                .collect(),
            refusal_count: s.refusal_count,
        }
    }
}

impl TryFrom<ScoredRow> for ScoredFact {
    type Error = Error;
    fn try_from(r: ScoredRow) -> Result<Self> {
        let per_prompt_correct: Vec<bool> = r
            .per_prompt
            .chars()
            .map(|c| match c {
                '1' => Ok(true),
                '0' => Ok(false),
                other => Err(Error::contract(format!("bad per-prompt bit {other:?}"))),
            })
            .collect::<Result<_>>()?;
        let label = KnowledgeLabel::new(r.n_correct, r.n_prompts)?;
        let popcount = per_prompt_correct.iter().filter(|&&b| b).count() as u32;
        if label.category != r.category
            || per_prompt_correct.len() as u32 != r.n_prompts
            || popcount != r.n_correct
            || r.refusal_count > r.n_prompts
        {
            return Err(Error::contract(format!(
                "scored fact {} is internally inconsistent",
                r.fact_id
            )));
        }
        Ok(ScoredFact {
            fact_id: r.fact_id,
            label,
            per_prompt_correct,
            refusal_count: r.refusal_count,
        })
    }
}

pub fn write_scored<W: Write>(scored: &[ScoredFact], mut out: W) -> Result<()> {
    for s in scored {
        serde_json::to_writer(&mut out, &ScoredRow::from(s))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_scored<R: BufRead>(reader: R) -> Result<Vec<ScoredFact>> {
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: ScoredRow = serde_json::from_str(&line)?;
        out.push(row.try_into()?);
    }
    Ok(out)
}
