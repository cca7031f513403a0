//! Question-answer facts: templated generation from triples and import of
//! external QA pairs.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Diagnostic, Error, Parsed, Result};
use crate::kg::Triple;
use crate::text::{normalize, sha256_hex};

/// Stable fact identifier derived from the normalized question and answer.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FactId(pub String);

impl FactId {
    /// 128-bit prefix of SHA-256 over `normalize(question) \x1f normalize(answer)`.
    pub fn derive(question: &str, answer: &str) -> Self {
        let key = format!("{}\u{1f}{}", normalize(question), normalize(answer));
        FactId(sha256_hex(key.as_bytes())[..32].to_string())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for FactId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for FactId {
    fn from(s: &str) -> Self {
        FactId(s.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactSource {
    KgTemplate,
    Imported,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fact {
    pub fact_id: FactId,
    pub question: String,
    pub answer: String,
    pub aliases: BTreeSet<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relation: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subject_entity: Option<String>,
    pub source: FactSource,
}

impl Fact {
    /// Builds a fact, adding the canonical answer to the alias set.
    pub fn new(
        question: impl Into<String>,
        answer: impl Into<String>,
        aliases: impl IntoIterator<Item = String>,
        source: FactSource,
    ) -> Result<Self> {
        let question = question.into();
        let answer = answer.into();
        if answer.trim().is_empty() {
            return Err(Error::contract("fact answer is empty"));
        }
        let mut aliases: BTreeSet<String> = aliases
            .into_iter()
            .map(|a| a.trim().to_string())
            .filter(|a| !a.is_empty())
            .collect();
        aliases.insert(answer.clone());
        Ok(Self {
            fact_id: FactId::derive(&question, &answer),
            question,
            answer,
            aliases,
            relation: None,
            subject_entity: None,
            source,
        })
    }

    /// Checks the fact invariants; used when reading facts back from disk.
    pub fn validate(&self) -> Result<()> {
        if self.answer.trim().is_empty() {
            return Err(Error::contract(format!(
                "fact {} has empty answer",
                self.fact_id
            )));
        }
        if !self.aliases.contains(&self.answer) {
            return Err(Error::contract(format!(
                "fact {} alias set lacks canonical answer",
                self.fact_id
            )));
        }
        if self.fact_id != FactId::derive(&self.question, &self.answer) {
            return Err(Error::contract(format!(
                "fact {} id does not match its question/answer",
                self.fact_id
            )));
        }
        Ok(())
    }

    /// The same fact asked with a different question (answers unchanged).
    pub fn with_question(&self, question: impl Into<String>) -> Fact {
        Fact {
            question: question.into(),
            ..self.clone()
        }
    }
}

pub const SUBJECT_PLACEHOLDER: &str = "{subject}";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionTemplate {
    pub relation: String,
    pub pattern: String,
}

impl QuestionTemplate {
    pub fn new(relation: impl Into<String>, pattern: impl Into<String>) -> Result<Self> {
        let pattern = pattern.into();
        let n = pattern.matches(SUBJECT_PLACEHOLDER).count();
        if n != 1 {
            return Err(Error::contract(format!(
                "template pattern must contain exactly one {SUBJECT_PLACEHOLDER}, found {n}: {pattern:?}"
            )));
        }
        Ok(Self {
            relation: relation.into(),
            pattern,
        })
    }

    pub fn render(&self, subject: &str) -> String {
        self.pattern.replace(SUBJECT_PLACEHOLDER, subject)
    }
}

/// Turns one triple into a fact using the template for its relation.
///
/// ```
/// use factprobe::kg::{Term, Triple};
/// use factprobe::qa::{render_fact, QuestionTemplate};
///
/// let template = QuestionTemplate::new("locationCity", "In which city is the location of {subject}?").unwrap();
/// let triple = Triple::new(
///     Term::iri("http://dbpedia.org/resource/General_Motors_Diesel"),
///     Term::iri("http://dbpedia.org/ontology/locationCity"),
///     Term::iri("http://dbpedia.org/resource/London"),
/// );
/// let fact = render_fact(&template, &triple, []).unwrap();
/// assert_eq!(fact.question, "In which city is the location of General Motors Diesel?");
/// assert_eq!(fact.answer, "London");
/// ```
pub fn render_fact(
    template: &QuestionTemplate,
    triple: &Triple,
    aliases: impl IntoIterator<Item = String>,
) -> Result<Fact> {
    let relation = triple.relation_name();
    if template.relation != relation {
        return Err(Error::contract(format!(
            "template for {} applied to triple with relation {}",
            template.relation, relation
        )));
    }
    let question = template.render(&triple.subject.label());
    let mut fact = Fact::new(
        question,
        triple.object.label(),
        aliases,
        FactSource::KgTemplate,
    )?;
    fact.relation = Some(relation);
    fact.subject_entity = Some(triple.subject.key());
    Ok(fact)
}

pub type TemplateMap = BTreeMap<String, QuestionTemplate>;

/// Reads `relation<TAB>pattern` rows, one template per relation.
pub fn load_templates<R: BufRead>(reader: R) -> Result<Parsed<TemplateMap>> {
    let mut items = TemplateMap::new();
    let mut diagnostics = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((relation, pattern)) = line.split_once('\t') else {
            diagnostics.push(Diagnostic::new(lineno, "expected relation<TAB>pattern"));
            continue;
        };
        match QuestionTemplate::new(relation.trim(), pattern.trim()) {
            Ok(t) => {
                if items.insert(t.relation.clone(), t).is_some() {
                    diagnostics.push(Diagnostic::new(
                        lineno,
                        format!("duplicate template for {}; later row wins", relation.trim()),
                    ));
                }
            }
            Err(e) => diagnostics.push(Diagnostic::new(lineno, e.to_string())),
        }
    }
    Ok(Parsed { items, diagnostics })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AliasRow {
    entity: String,
    aliases: Vec<String>,
}

/// Alias lists keyed by entity (full IRI or label, whichever the file uses).
pub type AliasMap = HashMap<String, Vec<String>>;

/// Reads alias JSON-lines `{"entity": ..., "aliases": [...]}`. Repeated
/// entities accumulate.
pub fn load_aliases<R: BufRead>(reader: R) -> Result<Parsed<AliasMap>> {
    let mut items = AliasMap::new();
    let mut diagnostics = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<AliasRow>(&line) {
            Ok(row) => items.entry(row.entity).or_default().extend(row.aliases),
            Err(e) => diagnostics.push(Diagnostic::new(idx + 1, e.to_string())),
        }
    }
    Ok(Parsed { items, diagnostics })
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub generated: usize,
    pub no_template: usize,
    pub duplicates: usize,
    pub invalid: usize,
}

/// Renders every triple whose relation has a template. Facts are
/// deduplicated by id (first occurrence kept) and returned sorted by id.
pub fn generate_facts(
    triples: &[Triple],
    templates: &TemplateMap,
    aliases: &AliasMap,
) -> (Vec<Fact>, GenerationReport) {
    let mut report = GenerationReport::default();
    let mut out: BTreeMap<FactId, Fact> = BTreeMap::new();
    for t in triples {
        let Some(template) = templates.get(&t.relation_name()) else {
            report.no_template += 1;
            continue;
        };
        let alias_list = aliases
            .get(&t.object.key())
            .or_else(|| aliases.get(&t.object.label()))
            .cloned()
            .unwrap_or_default();
        match render_fact(template, t, alias_list) {
            Ok(f) => {
                if out.contains_key(&f.fact_id) {
                    report.duplicates += 1;
                } else {
                    out.insert(f.fact_id.clone(), f);
                }
            }
            Err(_) => report.invalid += 1,
        }
    }
    report.generated = out.len();
    (out.into_values().collect(), report)
}

/// Reads `question<TAB>answer<TAB>alias1|alias2|...` rows as imported facts.
pub fn import_qa<R: BufRead>(reader: R) -> Result<Parsed<Vec<Fact>>> {
    let mut items = Vec::new();
    let mut diagnostics = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut cells = line.split('\t');
        let question = cells.next().unwrap_or("").trim();
        let answer = cells.next().unwrap_or("").trim();
        if question.is_empty() {
            diagnostics.push(Diagnostic::new(lineno, "missing question cell"));
            continue;
        }
        if answer.is_empty() {
            diagnostics.push(Diagnostic::new(lineno, "missing answer cell"));
            continue;
        }
        let aliases = cells
            .next()
            .unwrap_or("")
            .split('|')
            .map(str::to_string)
            .collect::<Vec<_>>();
        items.push(Fact::new(question, answer, aliases, FactSource::Imported)?);
    }
    Ok(Parsed { items, diagnostics })
}

pub fn write_facts<W: Write>(facts: &[Fact], mut out: W) -> Result<()> {
    for f in facts {
        serde_json::to_writer(&mut out, f)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads a fact corpus and re-checks each fact's invariants.
pub fn read_facts<R: BufRead>(reader: R) -> Result<Vec<Fact>> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fact: Fact = serde_json::from_str(&line)
            .map_err(|e| Error::contract(format!("fact corpus line {}: {e}", idx + 1)))?;
        fact.validate()?;
        out.push(fact);
    }
    Ok(out)
}

/// Facts keyed by id.
pub type FactIndex = HashMap<FactId, Fact>;

pub fn index_facts<'a>(facts: impl IntoIterator<Item = &'a Fact>) -> FactIndex {
    facts
        .into_iter()
        .map(|f| (f.fact_id.clone(), f.clone()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::Term;
    use proptest::prelude::*;

    fn dbr(s: &str) -> Term {
        Term::iri(format!("http://dbpedia.org/resource/{s}"))
    }
    fn dbo(s: &str) -> Term {
        Term::iri(format!("http://dbpedia.org/ontology/{s}"))
    }

    #[test]
    fn band_member_question() {
        let t = QuestionTemplate::new("bandMember", "Can you name a band member of {subject}?")
            .unwrap();
        let triple = Triple::new(
            dbr("Ashes_of_Ares"),
            dbo("bandMember"),
            dbr("Matthew_Barlow"),
        );
        let f = render_fact(&t, &triple, []).unwrap();
        assert_eq!(f.question, "Can you name a band member of Ashes of Ares?");
        assert_eq!(f.answer, "Matthew Barlow");
        assert_eq!(f.relation.as_deref(), Some("bandMember"));
        assert_eq!(
            f.subject_entity.as_deref(),
            Some("http://dbpedia.org/resource/Ashes_of_Ares")
        );
        assert_eq!(f.source, FactSource::KgTemplate);
    }

    #[test]
    fn empty_aliases_contain_canonical() {
        let t = QuestionTemplate::new("r", "Q {subject}?").unwrap();
        let f = render_fact(&t, &Triple::new(dbr("A"), dbo("r"), dbr("B")), []).unwrap();
        assert_eq!(f.aliases, BTreeSet::from(["B".to_string()]));
    }

    #[test]
    fn relation_mismatch_is_contract_error() {
        let t = QuestionTemplate::new("r", "Q {subject}?").unwrap();
        let err = render_fact(&t, &Triple::new(dbr("A"), dbo("s"), dbr("B")), []).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn template_needs_one_placeholder() {
        assert!(QuestionTemplate::new("r", "no placeholder").is_err());
        assert!(QuestionTemplate::new("r", "{subject} and {subject}").is_err());
    }

    #[test]
    fn import_trivia_rows() {
        let input = "Who wrote the novel Evening Class?\tmaeve binchy\t\n\
                     Which country does the airline Air Pacific come from?\tfidji\tfiji|republic of fiji|fiji islands\n\
                     No answer here\t\t\n";
        let p = import_qa(input.as_bytes()).unwrap();
        assert_eq!(p.items.len(), 2);
        assert_eq!(p.items[0].answer, "maeve binchy");
        assert_eq!(p.items[0].aliases.len(), 1);
        assert_eq!(p.items[0].source, FactSource::Imported);
        assert!(p.items[0].relation.is_none());
        assert!(p.items[1].aliases.len() >= 4);
        assert_eq!(
            p.diagnostics,
            vec![Diagnostic::new(3, "missing answer cell")]
        );
        assert!(import_qa("".as_bytes()).unwrap().items.is_empty());
    }

    #[test]
    fn templates_and_aliases_files() {
        let t = load_templates("r\tWhat is {subject}?\nbad line\ns\tno placeholder\n".as_bytes())
            .unwrap();
        assert_eq!(t.items.len(), 1);
        assert_eq!(t.diagnostics.len(), 2);

        let a = load_aliases(
            "{\"entity\":\"Thurgau\",\"aliases\":[\"Thurgovia\"]}\nnot json\n".as_bytes(),
        )
        .unwrap();
        assert_eq!(a.items["Thurgau"], vec!["Thurgovia".to_string()]);
        assert_eq!(a.diagnostics.len(), 1);
    }

    #[test]
    fn generate_with_aliases_and_dedup() {
        let templates =
            load_templates("canton\tIn which canton is {subject} located?\n".as_bytes())
                .unwrap()
                .items;
        let mut aliases = AliasMap::new();
        aliases.insert("Thurgau".into(), vec!["Thurgovia".into()]);
        let triples = vec![
            Triple::new(dbr("Gachnang"), dbo("canton"), dbr("Thurgau")),
            Triple::new(dbr("Gachnang"), dbo("canton"), dbr("Thurgau")),
            Triple::new(dbr("Gachnang"), dbo("country"), dbr("Switzerland")),
        ];
        let (facts, report) = generate_facts(&triples, &templates, &aliases);
        assert_eq!(facts.len(), 1);
        assert_eq!(
            report,
            GenerationReport {
                generated: 1,
                no_template: 1,
                duplicates: 1,
                invalid: 0
            }
        );
        assert!(facts[0].aliases.contains("Thurgovia"));
    }

    #[test]
    fn facts_jsonl_round_trip_and_validation() {
        let f = Fact::new("Q?", "A", vec!["a1".into()], FactSource::Imported).unwrap();
        let mut buf = Vec::new();
        write_facts(std::slice::from_ref(&f), &mut buf).unwrap();
        assert_eq!(read_facts(buf.as_slice()).unwrap(), vec![f.clone()]);

        let mut bad = f.clone();
        bad.aliases.remove("A");
        let mut buf = Vec::new();
        write_facts(&[bad], &mut buf).unwrap();
        assert!(read_facts(buf.as_slice()).is_err());
    }

    proptest! {
        #[test]
        fn rendered_facts_satisfy_invariants(
            prefix in "[A-Za-z ,?]{0,20}",
            suffix in "[A-Za-z ,?]{0,20}",
            subj in "[A-Za-z0-9_]{1,15}",
            obj in "[A-Za-z0-9][A-Za-z0-9_]{0,14}",
            aliases in proptest::collection::vec("[a-z ]{0,8}", 0..4),
        ) {
            let t = QuestionTemplate::new("rel", format!("{prefix}{{subject}}{suffix}")).unwrap();
            let triple = Triple::new(dbr(&subj), dbo("rel"), dbr(&obj));
            let f = render_fact(&t, &triple, aliases.clone()).unwrap();
            prop_assert!(f.validate().is_ok());
            prop_assert!(!f.answer.is_empty());
            let again = render_fact(&t, &triple, aliases).unwrap();
            prop_assert_eq!(f.fact_id, again.fact_id);
        }
    }
}
