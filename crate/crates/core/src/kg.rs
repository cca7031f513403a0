//! Knowledge-graph ingestion: N-Triples-style parsing, relation metadata and
//! entity density / popularity buckets.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Diagnostic, Error, Parsed, Result};

/// One node of a triple.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Term {
    Iri {
        iri: String,
    },
    Blank {
        id: String,
    },
    Literal {
        value: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        datatype: Option<String>,
    },
}

impl Term {
    pub fn iri(iri: impl Into<String>) -> Self {
        Term::Iri { iri: iri.into() }
    }

    pub fn literal(value: impl Into<String>) -> Self {
        Term::Literal {
            value: value.into(),
            datatype: None,
        }
    }

    /// Stable identifier: the full IRI, `_:id` for blank nodes, the lexical
    /// value for literals.
    pub fn key(&self) -> String {
        match self {
            Term::Iri { iri } => iri.clone(),
            Term::Blank { id } => format!("_:{id}"),
            Term::Literal { value, .. } => value.clone(),
        }
    }

    /// Human-readable surface name. For IRIs this is the final path segment
    /// with percent-escapes decoded and underscores turned into spaces.
    pub fn label(&self) -> String {
        match self {
            Term::Iri { iri } => iri_label(iri),
            Term::Blank { id } => id.clone(),
            Term::Literal { value, .. } => value.clone(),
        }
    }

    /// Whether this term names an entity (and so counts toward density).
    pub fn is_entity(&self) -> bool {
        !matches!(self, Term::Literal { .. })
    }

    fn is_empty(&self) -> bool {
        match self {
            Term::Iri { iri } => iri.is_empty(),
            Term::Blank { id } => id.is_empty(),
            Term::Literal { value, .. } => value.is_empty(),
        }
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Term::Iri { iri } => write!(f, "<{iri}>"),
            Term::Blank { id } => write!(f, "_:{id}"),
            Term::Literal { value, datatype } => {
                f.write_str("\"")?;
                for c in value.chars() {
                    match c {
                        '"' => f.write_str("\\\"")?,
                        '\\' => f.write_str("\\\\")?,
                        '\n' => f.write_str("\\n")?,
                        '\r' => f.write_str("\\r")?,
                        '\t' => f.write_str("\\t")?,
                        c => write!(f, "{c}")?,
                    }
                }
                f.write_str("\"")?;
                if let Some(dt) = datatype {
                    write!(f, "^^<{dt}>")?;
                }
                Ok(())
            }
        }
    }
}

/// Final path segment of an IRI, decoded for display.
///
/// ```
/// use factprobe::kg::iri_label;
/// assert_eq!(iri_label("http://dbpedia.org/resource/12th_Brigade_(Australia)"), "12th Brigade (Australia)");
/// assert_eq!(iri_label("http://dbpedia.org/ontology/birthPlace"), "birthPlace");
/// assert_eq!(iri_label("http://example.org/ns#Thing"), "Thing");
/// ```
pub fn iri_label(iri: &str) -> String {
    let trimmed = iri.trim_end_matches('/');
    let seg = trimmed
        .rsplit(['/', '#'])
        .next()
        .filter(|s| !s.is_empty())
        .unwrap_or(trimmed);
    percent_decode(seg).replace('_', " ")
}

fn percent_decode(s: &str) -> String {
    let bytes = s.as_bytes();
    let mut out = Vec::with_capacity(bytes.len());
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'%'
            && i + 2 < bytes.len()
            && bytes[i + 1].is_ascii_hexdigit()
            && bytes[i + 2].is_ascii_hexdigit()
        {
            let hex = std::str::from_utf8(&bytes[i + 1..i + 3]).unwrap_or("0");
            out.push(u8::from_str_radix(hex, 16).unwrap_or(b'?'));
            i += 3;
            continue;
        }
        out.push(bytes[i]);
        i += 1;
    }
    String::from_utf8(out).unwrap_or_else(|_| s.to_string())
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Triple {
    pub subject: Term,
    pub relation: Term,
    pub object: Term,
}

impl Triple {
    pub fn new(subject: Term, relation: Term, object: Term) -> Self {
        Self {
            subject,
            relation,
            object,
        }
    }

    /// Relation name used to join with templates and relation metadata.
    pub fn relation_name(&self) -> String {
        self.relation.label()
    }
}

impl fmt::Display for Triple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {} .", self.subject, self.relation, self.object)
    }
}

struct Cursor<'a> {
    s: &'a str,
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn skip_ws(&mut self) {
        while let Some(c) = self.peek() {
            if c == ' ' || c == '\t' {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn peek(&self) -> Option<char> {
        self.s[self.pos..].chars().next()
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.peek()?;
        self.pos += c.len_utf8();
        Some(c)
    }

    fn iri(&mut self) -> Result<String, String> {
        // caller consumed '<'
        let rest = &self.s[self.pos..];
        let end = rest.find('>').ok_or("unterminated IRI")?;
        let iri = &rest[..end];
        if iri
            .chars()
            .any(|c| c.is_whitespace() || c == '<' || c == '"')
        {
            return Err(format!("invalid character in IRI <{iri}>"));
        }
        self.pos += end + 1;
        Ok(iri.to_string())
    }

    fn blank(&mut self) -> Result<String, String> {
        // caller consumed '_'
        if self.bump() != Some(':') {
            return Err("expected ':' after '_' in blank node".into());
        }
        let start = self.pos;
        while let Some(c) = self.peek() {
            if c.is_alphanumeric() || c == '_' || c == '-' || c == '.' && self.pos > start {
                self.pos += c.len_utf8();
            } else {
                break;
            }
        }
        let mut id = &self.s[start..self.pos];
        // a trailing '.' belongs to the statement terminator
        while id.ends_with('.') {
            id = &id[..id.len() - 1];
            self.pos -= 1;
        }
        if id.is_empty() {
            return Err("empty blank node label".into());
        }
        Ok(id.to_string())
    }

    fn literal(&mut self) -> Result<Term, String> {
        // caller consumed '"'
        let mut value = String::new();
        loop {
            match self.bump() {
                None => return Err("unterminated literal".into()),
                Some('"') => break,
                Some('\\') => match self.bump() {
                    Some('"') => value.push('"'),
                    Some('\\') => value.push('\\'),
                    Some('n') => value.push('\n'),
                    Some('r') => value.push('\r'),
                    Some('t') => value.push('\t'),
                    Some('b') => value.push('\u{8}'),
                    Some('f') => value.push('\u{c}'),
                    Some('\'') => value.push('\''),
                    Some(u @ ('u' | 'U')) => {
                        let len = if u == 'u' { 4 } else { 8 };
                        let hex = self
                            .s
                            .get(self.pos..self.pos + len)
                            .ok_or("truncated unicode escape")?;
                        let code =
                            u32::from_str_radix(hex, 16).map_err(|_| "bad unicode escape")?;
                        value.push(char::from_u32(code).ok_or("invalid code point")?);
                        self.pos += len;
                    }
                    other => return Err(format!("unknown escape \\{}", other.unwrap_or(' '))),
                },
                Some(c) => value.push(c),
            }
        }
        let mut datatype = None;
        match self.peek() {
            Some('@') => {
                // language tags are dropped
                self.pos += 1;
                let start = self.pos;
                while let Some(c) = self.peek() {
                    if c.is_ascii_alphanumeric() || c == '-' {
                        self.pos += 1;
                    } else {
                        break;
                    }
                }
                if self.pos == start {
                    return Err("empty language tag".into());
                }
            }
            Some('^') => {
                if !self.s[self.pos..].starts_with("^^<") {
                    return Err("malformed datatype".into());
                }
                self.pos += 3;
                datatype = Some(self.iri()?);
            }
            _ => {}
        }
        Ok(Term::Literal { value, datatype })
    }

    fn term(&mut self, what: &str) -> Result<Term, String> {
        self.skip_ws();
        match self.bump() {
            Some('<') => Ok(Term::Iri { iri: self.iri()? }),
            Some('_') => Ok(Term::Blank { id: self.blank()? }),
            Some('"') => self.literal(),
            Some(c) => Err(format!("unexpected '{c}' at start of {what}")),
            None => Err(format!("missing {what}")),
        }
    }
}

/// Parses one statement. Returns `Ok(None)` for blank and comment lines.
pub fn parse_line(line: &str) -> Result<Option<Triple>, String> {
    let trimmed = line.trim();
    if trimmed.is_empty() || trimmed.starts_with('#') {
        return Ok(None);
    }
    let mut cur = Cursor { s: trimmed, pos: 0 };
    let subject = cur.term("subject")?;
    if matches!(subject, Term::Literal { .. }) {
        return Err("literal in subject position".into());
    }
    let relation = cur.term("relation")?;
    if !matches!(relation, Term::Iri { .. }) {
        return Err("relation must be an IRI".into());
    }
    let object = cur.term("object")?;
    cur.skip_ws();
    if cur.bump() != Some('.') {
        return Err("missing terminating '.'".into());
    }
    cur.skip_ws();
    match cur.peek() {
        None | Some('#') => {}
        Some(c) => return Err(format!("trailing content starting with '{c}'")),
    }
    let triple = Triple::new(subject, relation, object);
    if triple.subject.is_empty() || triple.relation.is_empty() || triple.object.is_empty() {
        return Err("empty field".into());
    }
    Ok(Some(triple))
}

/// Reads N-Triples-style statements. Malformed lines are reported with
/// their 1-based line number; a read failure is fatal.
pub fn parse_triples<R: BufRead>(reader: R) -> Result<Parsed<Vec<Triple>>> {
    let mut items = Vec::new();
    let mut diagnostics = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        match parse_line(&line) {
            Ok(Some(t)) => items.push(t),
            Ok(None) => {}
            Err(msg) => diagnostics.push(Diagnostic::new(idx + 1, msg)),
        }
    }
    Ok(Parsed { items, diagnostics })
}

pub fn serialize_triples<W: Write>(triples: &[Triple], mut out: W) -> std::io::Result<()> {
    for t in triples {
        writeln!(out, "{t}")?;
    }
    Ok(())
}

/// Popularity bucket. Ordered `Tail < Torso < Head`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bucket {
    Tail,
    Torso,
    Head,
}

impl Bucket {
    pub fn as_str(self) -> &'static str {
        match self {
            Bucket::Tail => "tail",
            Bucket::Torso => "torso",
            Bucket::Head => "head",
        }
    }
}

/// `density < torso_min` is tail, `density < head_min` is torso, the rest head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BucketThresholds {
    pub torso_min: u64,
    pub head_min: u64,
}

impl BucketThresholds {
    pub fn new(torso_min: u64, head_min: u64) -> Result<Self> {
        if torso_min > head_min {
            return Err(Error::contract(format!(
                "torso threshold {torso_min} exceeds head threshold {head_min}"
            )));
        }
        Ok(Self {
            torso_min,
            head_min,
        })
    }

    /// Thresholds at the 33rd and 66th nearest-rank percentiles of the
    /// observed densities: entities at or below the first are tail, at or
    /// below the second torso.
    pub fn from_percentiles(densities: &[u64]) -> Self {
        if densities.is_empty() {
            return Self {
                torso_min: 1,
                head_min: 1,
            };
        }
        let mut sorted = densities.to_vec();
        sorted.sort_unstable();
        let p33 = nearest_rank(&sorted, 33);
        let p66 = nearest_rank(&sorted, 66);
        Self {
            torso_min: p33 + 1,
            head_min: p66 + 1,
        }
    }

    pub fn bucket(&self, density: u64) -> Bucket {
        if density < self.torso_min {
            Bucket::Tail
        } else if density < self.head_min {
            Bucket::Torso
        } else {
            Bucket::Head
        }
    }
}

fn nearest_rank(sorted: &[u64], pct: u64) -> u64 {
    let n = sorted.len() as u64;
    let rank = (pct * n).div_ceil(100).max(1);
    sorted[(rank - 1) as usize]
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityStats {
    pub entity: String,
    pub density: u64,
    pub bucket: Bucket,
}

/// Number of triples each entity occurs in (as subject or object; a
/// self-referential triple counts once).
pub fn count_density(triples: &[Triple]) -> BTreeMap<String, u64> {
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    for t in triples {
        let s = t.subject.key();
        *counts.entry(s.clone()).or_default() += 1;
        if t.object.is_entity() {
            let o = t.object.key();
            if o != s {
                *counts.entry(o).or_default() += 1;
            }
        }
    }
    counts
}

/// Density and bucket per entity. With `thresholds` absent, percentile
/// defaults are derived from this corpus.
pub fn compute_density(
    triples: &[Triple],
    thresholds: Option<BucketThresholds>,
) -> BTreeMap<String, EntityStats> {
    let counts = count_density(triples);
    let thresholds = thresholds.unwrap_or_else(|| {
        let d: Vec<u64> = counts.values().copied().collect();
        BucketThresholds::from_percentiles(&d)
    });
    counts
        .into_iter()
        .map(|(entity, density)| {
            let bucket = thresholds.bucket(density);
            (
                entity.clone(),
                EntityStats {
                    entity,
                    density,
                    bucket,
                },
            )
        })
        .collect()
}

/// Writes `entity,density,bucket` rows.
pub fn write_entity_stats<'a, W: Write>(
    stats: impl IntoIterator<Item = &'a EntityStats>,
    out: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["entity", "density", "bucket"])?;
    for s in stats {
        w.write_record([s.entity.as_str(), &s.density.to_string(), s.bucket.as_str()])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationMeta {
    pub relation: String,
    pub domain_category: Option<String>,
    pub range_category: Option<String>,
}

impl RelationMeta {
    /// Domain and range categories that are present.
    pub fn categories(&self) -> impl Iterator<Item = &str> {
        self.domain_category
            .as_deref()
            .into_iter()
            .chain(self.range_category.as_deref())
    }
}

pub type RelationMetaMap = BTreeMap<String, RelationMeta>;

/// Reads `relation<TAB>domain<TAB>range` rows; empty cells are absent
/// categories. A repeated relation replaces the earlier row with a warning.
pub fn load_relation_meta<R: BufRead>(reader: R) -> Result<Parsed<RelationMetaMap>> {
    let mut items = RelationMetaMap::new();
    let mut diagnostics = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut cells = line.split('\t').map(str::trim);
        let relation = cells.next().unwrap_or("");
        if relation.is_empty() {
            diagnostics.push(Diagnostic::new(lineno, "missing relation cell"));
            continue;
        }
        let cell = |c: Option<&str>| c.filter(|s| !s.is_empty()).map(str::to_string);
        let meta = RelationMeta {
            relation: relation.to_string(),
            domain_category: cell(cells.next()),
            range_category: cell(cells.next()),
        };
        if items.insert(relation.to_string(), meta).is_some() {
            diagnostics.push(Diagnostic::new(
                lineno,
                format!("duplicate relation {relation}; later row wins"),
            ));
        }
    }
    Ok(Parsed { items, diagnostics })
}

/// Relations per category, across both domain and range.
pub fn relations_by_category(meta: &RelationMetaMap) -> BTreeMap<String, BTreeSet<String>> {
    let mut out: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for m in meta.values() {
        for c in m.categories() {
            out.entry(c.to_string())
                .or_default()
                .insert(m.relation.clone());
        }
    }
    out
}

/// One diagnostic per distinct relation that has no metadata row.
pub fn flag_unknown_relations(triples: &[Triple], meta: &RelationMetaMap) -> Vec<Diagnostic> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (i, t) in triples.iter().enumerate() {
        let name = t.relation_name();
        if !meta.contains_key(&name) && seen.insert(name.clone()) {
            out.push(Diagnostic::new(i + 1, format!("unknown relation {name}")));
        }
    }
    out
}
