//! Before/after comparison of scored corpora.
//!
//! A fact *shifts* when its category changes after fine-tuning. Upward
//! moves (UK→MK, UK→HK, MK→HK) are positive, downward moves negative.
//! For the two extreme transitions, UK→HK and HK→UK, each shifted fact is
//! checked against five explanations (non-refusal, explosion, target-based,
//! domain shift, and their union) and the shares are reported per kind.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::RelationMetaMap;
use crate::mixture::{MixtureSample, SampleRole};
use crate::qa::{FactId, FactIndex};
use crate::scoring::{match_answer, Category, KnowledgeLabel, RefusalPatterns, ScoredFact};
use crate::text::{extract_prediction, normalize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Positive,
    Negative,
    None,
}

/// Direction of a category transition.
///
/// ```
/// use factprobe::scoring::Category::*;
/// use factprobe::shift::{direction, Direction};
/// assert_eq!(direction(HighlyKnown, Unknown), Direction::Negative);
/// assert_eq!(direction(Unknown, MaybeKnown), Direction::Positive);
/// assert_eq!(direction(Unknown, Unknown), Direction::None);
/// ```
pub fn direction(before: Category, after: Category) -> Direction {
    match before.cmp(&after) {
        std::cmp::Ordering::Less => Direction::Positive,
        std::cmp::Ordering::Greater => Direction::Negative,
        std::cmp::Ordering::Equal => Direction::None,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShiftRecord {
    pub fact_id: FactId,
    pub before: KnowledgeLabel,
    pub after: KnowledgeLabel,
    pub direction: Direction,
}

impl ShiftRecord {
    pub fn transition(&self) -> (Category, Category) {
        (self.before.category, self.after.category)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftSummary {
    pub total: usize,
    pub positive: usize,
    pub negative: usize,
    pub unchanged: usize,
    pub positive_rate: f64,
    pub negative_rate: f64,
    /// Counts per `BEFORE->AFTER` transition, including unchanged ones.
    pub transitions: BTreeMap<String, usize>,
}

/// One shift record per fact, in fact-id order, plus rates over the whole
/// corpus. Both corpora must score exactly the same facts.
pub fn diff_corpora(
    before: &[ScoredFact],
    after: &[ScoredFact],
) -> Result<(Vec<ShiftRecord>, ShiftSummary)> {
    let b: BTreeMap<&FactId, &ScoredFact> = before.iter().map(|s| (&s.fact_id, s)).collect();
    let a: BTreeMap<&FactId, &ScoredFact> = after.iter().map(|s| (&s.fact_id, s)).collect();
    if b.len() != before.len() || a.len() != after.len() {
        return Err(Error::contract("scored corpus contains a fact twice"));
    }
    let only_before: Vec<String> = b
        .keys()
        .filter(|k| !a.contains_key(*k))
        .map(|k| k.to_string())
        .collect();
    let only_after: Vec<String> = a
        .keys()
        .filter(|k| !b.contains_key(*k))
        .map(|k| k.to_string())
        .collect();
    if !only_before.is_empty() || !only_after.is_empty() {
        let sample = only_before
            .iter()
            .chain(&only_after)
            .take(5)
            .cloned()
            .collect();
        return Err(Error::FactSetMismatch {
            only_before,
            only_after,
            sample,
        });
    }
    let mut records = Vec::with_capacity(b.len());
    let mut transitions: BTreeMap<String, usize> = BTreeMap::new();
    let (mut pos, mut neg, mut none) = (0, 0, 0);
    for (id, sb) in &b {
        let sa = a[id];
        let dir = direction(sb.label.category, sa.label.category);
        match dir {
            Direction::Positive => pos += 1,
            Direction::Negative => neg += 1,
            Direction::None => none += 1,
        }
        *transitions
            .entry(format!("{}->{}", sb.label.category, sa.label.category))
            .or_default() += 1;
        records.push(ShiftRecord {
            fact_id: (*id).clone(),
            before: sb.label,
            after: sa.label,
            direction: dir,
        });
    }
    let total = records.len();
    let rate = |n: usize| {
        if total == 0 {
            0.0
        } else {
            n as f64 / total as f64
        }
    };
    Ok((
        records,
        ShiftSummary {
            total,
            positive: pos,
            negative: neg,
            unchanged: none,
            positive_rate: rate(pos),
            negative_rate: rate(neg),
            transitions,
        },
    ))
}

/// Normalized predicted answers of one model, one per question.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerTally {
    pub counts: BTreeMap<String, u64>,
    pub refusals: u64,
    /// Responses with nothing left after normalization.
    pub empty: u64,
}

impl AnswerTally {
    pub fn from_responses<'a>(
        responses: impl IntoIterator<Item = &'a str>,
        refusals: &RefusalPatterns,
    ) -> Self {
        let mut t = Self::default();
        for r in responses {
            if refusals.is_refusal(r) {
                t.refusals += 1;
                continue;
            }
            let p = extract_prediction(r);
            if p.is_empty() {
                t.empty += 1;
            } else {
                *t.counts.entry(p).or_default() += 1;
            }
        }
        t
    }

    pub fn answered(&self) -> u64 {
        self.counts.values().sum()
    }

    pub fn count(&self, answer: &str) -> u64 {
        self.counts.get(answer).copied().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopAnswer {
    pub text: String,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerStats {
    pub answered: u64,
    pub unique_answers: u64,
    /// Mean number of questions per distinct answer.
    pub multiplicity_mean: f64,
    /// Population variance of the per-answer question counts.
    pub multiplicity_variance: f64,
    pub top_answer: Option<TopAnswer>,
    pub refusal_count: u64,
}

impl AnswerStats {
    /// `answered / unique_answers`, exact; zero when nothing was answered.
    pub fn multiplicity_mean_exact(&self) -> Ratio<u64> {
        if self.unique_answers == 0 {
            Ratio::from_integer(0)
        } else {
            Ratio::new(self.answered, self.unique_answers)
        }
    }
}

pub fn stats_from_tally(tally: &AnswerTally) -> AnswerStats {
    let answered = tally.answered();
    let unique = tally.counts.len() as u64;
    let (mean, variance) = if unique == 0 {
        (0.0, 0.0)
    } else {
        let mean = answered as f64 / unique as f64;
        let var = tally
            .counts
            .values()
            .map(|&c| (c as f64 - mean).powi(2))
            .sum::<f64>()
            / unique as f64;
        (mean, var)
    };
    // highest count; ties go to the lexicographically smallest answer
    let top_answer = tally
        .counts
        .iter()
        .max_by(|a, b| a.1.cmp(b.1).then_with(|| b.0.cmp(a.0)))
        .map(|(text, &count)| TopAnswer {
            text: text.clone(),
            count,
        });
    AnswerStats {
        answered,
        unique_answers: unique,
        multiplicity_mean: mean,
        multiplicity_variance: variance,
        top_answer,
        refusal_count: tally.refusals,
    }
}

/// Refusal and diversity statistics over one greedy response per question.
/// Refusals are counted but left out of the uniqueness accounting.
///
/// ```
/// use factprobe::scoring::RefusalPatterns;
/// use factprobe::shift::answer_stats;
/// let s = answer_stats(["X", "x.", "Answer: X", "X"], &RefusalPatterns::default());
/// assert_eq!((s.unique_answers, s.multiplicity_mean, s.multiplicity_variance), (1, 4.0, 0.0));
/// ```
pub fn answer_stats<'a>(
    responses: impl IntoIterator<Item = &'a str>,
    refusals: &RefusalPatterns,
) -> AnswerStats {
    stats_from_tally(&AnswerTally::from_responses(responses, refusals))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExplosionConfig {
    pub ratio: f64,
    pub floor: u64,
}

impl Default for ExplosionConfig {
    fn default() -> Self {
        Self {
            ratio: 5.0,
            floor: 50,
        }
    }
}

impl ExplosionConfig {
    pub fn is_exploded(&self, default_count: u64, trained_count: u64) -> bool {
        trained_count >= self.floor
            && trained_count as f64 >= self.ratio * default_count.max(1) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExplosionCounts {
    pub default_count: u64,
    pub trained_count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplodedSet {
    pub config: ExplosionConfig,
    pub answers: BTreeMap<String, ExplosionCounts>,
}

impl ExplodedSet {
    pub fn contains(&self, normalized_answer: &str) -> bool {
        self.answers.contains_key(normalized_answer)
    }
}

/// Answers the trained model gives far more often than the default model.
pub fn detect_explosions(
    default: &AnswerTally,
    trained: &AnswerTally,
    config: ExplosionConfig,
) -> ExplodedSet {
    let answers = trained
        .counts
        .iter()
        .filter_map(|(answer, &trained_count)| {
            let default_count = default.count(answer);
            config.is_exploded(default_count, trained_count).then(|| {
                (
                    answer.clone(),
                    ExplosionCounts {
                        default_count,
                        trained_count,
                    },
                )
            })
        })
        .collect();
    ExplodedSet { config, answers }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ShiftKind {
    #[serde(rename = "UK->HK")]
    UnknownToHighlyKnown,
    #[serde(rename = "HK->UK")]
    HighlyKnownToUnknown,
}

impl fmt::Display for ShiftKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ShiftKind::UnknownToHighlyKnown => "UK->HK",
            ShiftKind::HighlyKnownToUnknown => "HK->UK",
        })
    }
}

/// `count` of `total`, kept as integers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Share {
    pub count: usize,
    pub total: usize,
}

impl Share {
    pub fn ratio(&self) -> Ratio<u64> {
        if self.total == 0 {
            Ratio::from_integer(0)
        } else {
            Ratio::new(self.count as u64, self.total as u64)
        }
    }

    pub fn fraction(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.count as f64 / self.total as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShiftFlags {
    pub fact_id: FactId,
    pub kind: ShiftKind,
    /// Only defined for UK→HK shifts.
    pub non_refusal: Option<bool>,
    pub explosion: bool,
    pub target_based: bool,
    pub domain_shift: bool,
    /// False when the fact's relation has no domain or range category.
    pub domain_resolved: bool,
}

impl ShiftFlags {
    pub fn explained(&self) -> bool {
        self.non_refusal == Some(true) || self.explosion || self.target_based || self.domain_shift
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasonBreakdown {
    pub shift_kind: ShiftKind,
    pub total: usize,
    pub non_refusal: Option<Share>,
    pub explosion: Share,
    pub target_based: Share,
    pub domain_shift: Share,
    pub shift_explained: Share,
    /// Shifted facts whose relation could not be placed in a category.
    pub domain_unresolved: usize,
}

impl ReasonBreakdown {
    fn from_flags(kind: ShiftKind, flags: &[&ShiftFlags]) -> Self {
        let total = flags.len();
        let share = |pred: &dyn Fn(&ShiftFlags) -> bool| Share {
            count: flags.iter().filter(|f| pred(f)).count(),
            total,
        };
        Self {
            shift_kind: kind,
            total,
            non_refusal: (kind == ShiftKind::UnknownToHighlyKnown)
                .then(|| share(&|f| f.non_refusal == Some(true))),
            explosion: share(&|f| f.explosion),
            target_based: share(&|f| f.target_based),
            domain_shift: share(&|f| f.domain_shift),
            shift_explained: share(&|f| f.explained()),
            domain_unresolved: flags.iter().filter(|f| !f.domain_resolved).count(),
        }
    }

    /// Individual reason shares, in column order.
    pub fn reasons(&self) -> Vec<(&'static str, Share)> {
        let mut out = Vec::with_capacity(4);
        if let Some(s) = self.non_refusal {
            out.push(("non_refusal", s));
        }
        out.push(("explosion", self.explosion));
        out.push(("target_based", self.target_based));
        out.push(("domain_shift", self.domain_shift));
        out
    }
}

/// Everything attribution needs besides the shifts themselves.
pub struct AttributionContext<'a> {
    pub facts: &'a FactIndex,
    pub training: &'a [MixtureSample],
    pub relation_meta: &'a RelationMetaMap,
    pub exploded: &'a ExplodedSet,
    /// Greedy response of the default model per fact.
    pub default_predictions: &'a BTreeMap<FactId, String>,
    /// Greedy response of the trained model per fact.
    pub trained_predictions: &'a BTreeMap<FactId, String>,
    pub refusals: &'a RefusalPatterns,
    /// Compare domains against every training sample, not only Unknown cores.
    pub widen_domain: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attribution {
    pub positive: ReasonBreakdown,
    pub negative: ReasonBreakdown,
    pub flags: Vec<ShiftFlags>,
    pub diagnostics: Vec<String>,
}

impl Attribution {
    pub fn breakdowns(&self) -> [&ReasonBreakdown; 2] {
        [&self.positive, &self.negative]
    }
}

/// Flags every UK→HK and HK→UK shift with the reasons that explain it.
pub fn attribute_shifts(
    shifts: &[ShiftRecord],
    ctx: &AttributionContext<'_>,
) -> Result<Attribution> {
    let mut target_answers: BTreeSet<String> = BTreeSet::new();
    let mut training_categories: BTreeSet<&str> = BTreeSet::new();
    for s in ctx.training {
        let fact = ctx.facts.get(&s.origin_fact_id).ok_or_else(|| {
            Error::contract(format!(
                "training fact {} missing from corpus",
                s.origin_fact_id
            ))
        })?;
        let core = s.role == SampleRole::UnknownCore;
        if core {
            target_answers.extend(
                fact.aliases
                    .iter()
                    .map(|a| normalize(a))
                    .filter(|a| !a.is_empty()),
            );
        }
        if core || ctx.widen_domain {
            if let Some(meta) = fact
                .relation
                .as_ref()
                .and_then(|r| ctx.relation_meta.get(r))
            {
                training_categories.extend(meta.categories());
            }
        }
    }

    let mut flags = Vec::new();
    let mut diagnostics = Vec::new();
    for rec in shifts {
        let kind = match rec.transition() {
            (Category::Unknown, Category::HighlyKnown) => ShiftKind::UnknownToHighlyKnown,
            (Category::HighlyKnown, Category::Unknown) => ShiftKind::HighlyKnownToUnknown,
            _ => continue,
        };
        let fact = ctx.facts.get(&rec.fact_id).ok_or_else(|| {
            Error::contract(format!("shifted fact {} missing from corpus", rec.fact_id))
        })?;
        let trained = ctx.trained_predictions.get(&rec.fact_id).ok_or_else(|| {
            Error::contract(format!(
                "no trained prediction for shifted fact {}",
                rec.fact_id
            ))
        })?;
        let predicted = extract_prediction(trained);

        let non_refusal = match kind {
            ShiftKind::UnknownToHighlyKnown => {
                let default = ctx.default_predictions.get(&rec.fact_id).ok_or_else(|| {
                    Error::contract(format!(
                        "no default prediction for shifted fact {}",
                        rec.fact_id
                    ))
                })?;
                Some(ctx.refusals.is_refusal(default) && match_answer(trained, fact))
            }
            ShiftKind::HighlyKnownToUnknown => None,
        };

        let categories: Vec<&str> = fact
            .relation
            .as_ref()
            .and_then(|r| ctx.relation_meta.get(r))
            .map(|m| m.categories().collect())
            .unwrap_or_default();
        let domain_resolved = !categories.is_empty();
        if !domain_resolved {
            diagnostics.push(format!(
                "fact {}: relation {} has no domain/range category",
                rec.fact_id,
                fact.relation.as_deref().unwrap_or("(none)")
            ));
        }

        flags.push(ShiftFlags {
            fact_id: rec.fact_id.clone(),
            kind,
            non_refusal,
            explosion: !predicted.is_empty() && ctx.exploded.contains(&predicted),
            target_based: !predicted.is_empty() && target_answers.contains(&predicted),
            domain_shift: categories.iter().any(|c| training_categories.contains(c)),
            domain_resolved,
        });
    }

    let of_kind = |k: ShiftKind| flags.iter().filter(|f| f.kind == k).collect::<Vec<_>>();
    Ok(Attribution {
        positive: ReasonBreakdown::from_flags(
            ShiftKind::UnknownToHighlyKnown,
            &of_kind(ShiftKind::UnknownToHighlyKnown),
        ),
        negative: ReasonBreakdown::from_flags(
            ShiftKind::HighlyKnownToUnknown,
            &of_kind(ShiftKind::HighlyKnownToUnknown),
        ),
        flags,
        diagnostics,
    })
}

/// Identifies the run a report row belongs to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportContext {
    pub config: String,
    pub model_id: String,
    pub seed: u64,
    pub explosion: ExplosionConfig,
}

/// Rows `config,model_id,seed,explosion_ratio,explosion_floor,model,refused,unique,mean,variance,top_answer,top_count`.
pub fn write_trends_csv<W: Write>(
    ctx: &ReportContext,
    rows: &[(&str, &AnswerStats)],
    out: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "config",
        "model_id",
        "seed",
        "explosion_ratio",
        "explosion_floor",
        "model",
        "refused",
        "unique",
        "mean",
        "variance",
        "top_answer",
        "top_count",
    ])?;
    for (model, s) in rows {
        let (top, top_count) = s
            .top_answer
            .as_ref()
            .map(|t| (t.text.clone(), t.count.to_string()))
            .unwrap_or_default();
        w.write_record([
            ctx.config.clone(),
            ctx.model_id.clone(),
            ctx.seed.to_string(),
            ctx.explosion.ratio.to_string(),
            ctx.explosion.floor.to_string(),
            model.to_string(),
            s.refusal_count.to_string(),
            s.unique_answers.to_string(),
            format!("{:.4}", s.multiplicity_mean),
            format!("{:.4}", s.multiplicity_variance),
            top,
            top_count,
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// One row per shift kind; `non_refusal` is empty for HK→UK.
pub fn write_attribution_csv<W: Write>(
    ctx: &ReportContext,
    attribution: &Attribution,
    out: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "config",
        "model_id",
        "seed",
        "explosion_ratio",
        "explosion_floor",
        "shift_kind",
        "total",
        "non_refusal",
        "explosion",
        "target_based",
        "domain_shift",
        "shift_explained",
        "domain_unresolved",
    ])?;
    let f = |s: Share| format!("{:.4}", s.fraction());
    for b in attribution.breakdowns() {
        w.write_record([
            ctx.config.clone(),
            ctx.model_id.clone(),
            ctx.seed.to_string(),
            ctx.explosion.ratio.to_string(),
            ctx.explosion.floor.to_string(),
            b.shift_kind.to_string(),
            b.total.to_string(),
            b.non_refusal.map(f).unwrap_or_default(),
            f(b.explosion),
            f(b.target_based),
            f(b.domain_shift),
            f(b.shift_explained),
            b.domain_unresolved.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
