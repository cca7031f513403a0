#![allow(dead_code)]

use std::fmt::Write as _;
use std::path::Path;

use factprobe::pipeline::{InputPaths, MixtureConfig, PipelineConfig};
use factprobe::probe::{DecodeParams, ProbeRecord};
use factprobe::qa::{Fact, FactSource};

/// (relation, template, domain, range, object prefix)
const RELATIONS: [(&str, &str, &str, &str, &str); 6] = [
    (
        "birthPlace",
        "Where was {subject} born?",
        "Person",
        "PopulatedPlace",
        "Town",
    ),
    (
        "locationCity",
        "In which city is the location of {subject}?",
        "Organisation",
        "City",
        "City",
    ),
    ("author", "Who wrote {subject}?", "Work", "Person", "Writer"),
    (
        "country",
        "Which country is {subject} in?",
        "Place",
        "Country",
        "Country",
    ),
    (
        "genre",
        "What genre is {subject}?",
        "Work",
        "Genre",
        "Genre",
    ),
    (
        "network",
        "{subject} is on which channel?",
        "",
        "",
        "Channel",
    ),
];

const OBJECTS_PER_RELATION: usize = 40;

/// Writes a synthetic knowledge graph yielding exactly `n_facts` templated
/// facts, plus its templates and relation metadata. `network` has no
/// metadata row.
pub fn synthetic_kg(dir: &Path, n_facts: usize) -> InputPaths {
    let mut nt = String::new();
    for i in 0..n_facts {
        let (rel, ..) = RELATIONS[i % RELATIONS.len()];
        let prefix = RELATIONS[i % RELATIONS.len()].4;
        let obj = (i * 7 + i / RELATIONS.len()) % OBJECTS_PER_RELATION;
        writeln!(
            nt,
            "<http://example.org/resource/Item_{i:05}> <http://example.org/ontology/{rel}> <http://example.org/resource/{prefix}_{obj:03}> ."
        )
        .unwrap();
    }
    // literal-valued triples without a template
    for i in 0..n_facts.min(50) {
        writeln!(
            nt,
            "<http://example.org/resource/Item_{i:05}> <http://example.org/ontology/year> \"{}\"^^<http://www.w3.org/2001/XMLSchema#gYear> .",
            1900 + i
        )
        .unwrap();
    }
    let mut templates = String::new();
    let mut meta = String::new();
    for (rel, tpl, dom, rng, _) in RELATIONS {
        writeln!(templates, "{rel}\t{tpl}").unwrap();
        if !dom.is_empty() {
            writeln!(meta, "{rel}\t{dom}\t{rng}").unwrap();
        }
    }
    writeln!(meta, "year\tPerson\t").unwrap();
    let triples = dir.join("kg.nt");
    let tpl = dir.join("templates.tsv");
    let rm = dir.join("relation_meta.tsv");
    std::fs::write(&triples, nt).unwrap();
    std::fs::write(&tpl, templates).unwrap();
    std::fs::write(&rm, meta).unwrap();
    InputPaths {
        triples: Some(triples),
        templates: Some(tpl),
        relation_meta: Some(rm),
        ..InputPaths::default()
    }
}

/// Imported QA pairs for few-shot demonstrations.
pub fn few_shot_pool(dir: &Path, n: usize) -> std::path::PathBuf {
    let mut tsv = String::new();
    for i in 0..n {
        writeln!(
            tsv,
            "Which shot question number {i:03} is this?\tshot {i:03}\t"
        )
        .unwrap();
    }
    let p = dir.join("pool.tsv");
    std::fs::write(&p, tsv).unwrap();
    p
}

/// Mock pipeline over `n_facts` synthetic facts.
pub fn mock_config(
    dir: &Path,
    n_facts: usize,
    mixture: MixtureConfig,
    seeds: Vec<u64>,
) -> PipelineConfig {
    let mut inputs = synthetic_kg(dir, n_facts);
    inputs.few_shot_pool = Some(few_shot_pool(dir, 40));
    PipelineConfig {
        inputs,
        mixture,
        seeds,
        ..PipelineConfig::default()
    }
}

pub fn facts(n: usize) -> Vec<Fact> {
    (0..n)
        .map(|i| {
            Fact::new(
                format!("What is the value of item {i:05}?"),
                format!("value {i:05}"),
                [],
                FactSource::Imported,
            )
            .unwrap()
        })
        .collect()
}

pub fn record(fact: &Fact, set: u32, text: &str) -> ProbeRecord {
    ProbeRecord {
        fact_id: fact.fact_id.clone(),
        prompt_set_id: set,
        response_text: text.into(),
        model_id: "mock".into(),
        decode_params: DecodeParams::default(),
        error: None,
    }
}
