//! Stage orchestration over a work directory.
//!
//! Each stage reads artifacts written by earlier stages, writes its own
//! outputs atomically, and appends an entry to `manifest.json`. Entries
//! record the SHA-256 of every input and output and are hash-chained, so a
//! stage refuses to run on an upstream artifact that is missing or has
//! changed since it was recorded, and [`verify_chain`] detects tampering.
//!
//! Work-directory layout:
//!
//! ```text
//! manifest.json
//! ingest/    triples.nt entity_stats.csv relation_meta.json summary.json
//! generate/  facts.jsonl prompt_sets.json summary.json
//! default/   probe.jsonl scored.jsonl summary.json
//! seed-S/    train.jsonl [paraphrases.jsonl] probe.jsonl scored.jsonl
//!            shift_report.json trends.csv attribution.csv analysis.json
//! report/    aggregates.json figure_data.csv
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{file_digest, open_reader, read_json, write_atomic, write_json};
use crate::kg::{self, BucketThresholds, RelationMetaMap, Triple};
use crate::mixture::{
    self, build_mixture, emit_training_file, generate_paraphrases, read_training_file, AugMode,
    MixtureSample, MixtureSpec, ParaphraseStore, SampleRole,
};
use crate::mock::{DriftRule, MockModel, MockParaphraser, MockSpec, NoiseRule};
use crate::probe::{
    probe_all, read_probe_store, select_prompt_sets, ChatBackend, EndpointConfig, HttpBackend,
    ProbeOptions, ProbeRecord, ProbeStore, PromptSet, RunReport,
};
use crate::qa::{self, index_facts, Fact, FactId};
use crate::report::{aggregate_seeds, emit_figure_data, FigurePoint, MetricMap, SeedAggregate};
use crate::scoring::{
    categorize_all, read_scored, reliability_report, write_scored, Category, CategorySummary,
    RefusalPatterns, ScoredFact,
};
use crate::shift::{
    attribute_shifts, detect_explosions, diff_corpora, stats_from_tally, write_attribution_csv,
    write_trends_csv, AnswerStats, AnswerTally, Attribution, AttributionContext, Direction,
    ExplodedSet, ExplosionConfig, ReportContext, ShiftSummary,
};
use crate::text::sha256_hex;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Ingest,
    Generate,
    Probe,
    Categorize,
    Mix,
    TrainHandoff,
    Analyze,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Ingest,
        Stage::Generate,
        Stage::Probe,
        Stage::Categorize,
        Stage::Mix,
        Stage::TrainHandoff,
        Stage::Analyze,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Generate => "generate",
            Stage::Probe => "probe",
            Stage::Categorize => "categorize",
            Stage::Mix => "mix",
            Stage::TrainHandoff => "train-handoff",
            Stage::Analyze => "analyze",
            Stage::Report => "report",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::contract(format!("unknown stage {s:?}")))
    }
}

/// A model to probe: the in-process mock or a chat-completions endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelConfig {
    Mock {
        #[serde(default = "default_mock_id")]
        model_id: String,
        #[serde(default = "default_mock_parallel")]
        max_parallel: usize,
        #[serde(default)]
        spec: MockSpec,
    },
    Endpoint(EndpointConfig),
}

fn default_mock_id() -> String {
    "mock".into()
}
fn default_mock_parallel() -> usize {
    8
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::Mock {
            model_id: default_mock_id(),
            max_parallel: default_mock_parallel(),
            spec: MockSpec {
                noise: Some(NoiseRule::default()),
                ..MockSpec::default()
            },
        }
    }
}

impl ModelConfig {
    pub fn model_id(&self) -> &str {
        match self {
            ModelConfig::Mock { model_id, .. } => model_id,
            ModelConfig::Endpoint(e) => &e.model_id,
        }
    }

    fn for_seed(&self, seed: u64) -> Self {
        let mut out = self.clone();
        match &mut out {
            ModelConfig::Mock { model_id, .. } => {
                *model_id = model_id.replace("{seed}", &seed.to_string())
            }
            ModelConfig::Endpoint(e) => {
                e.model_id = e.model_id.replace("{seed}", &seed.to_string())
            }
        }
        out
    }

    fn options(&self) -> ProbeOptions {
        match self {
            ModelConfig::Mock {
                model_id,
                max_parallel,
                ..
            } => ProbeOptions {
                max_parallel: *max_parallel,
                ..ProbeOptions::new(model_id.clone())
            },
            ModelConfig::Endpoint(e) => e.probe_options(),
        }
    }

    fn backend(&self, facts: &[Fact]) -> Result<Box<dyn ChatBackend>> {
        Ok(match self {
            ModelConfig::Mock { spec, .. } => Box::new(MockModel::new(spec.clone(), facts)),
            ModelConfig::Endpoint(e) => Box::new(HttpBackend::new(e)?),
        })
    }
}

/// External input files. All optional; at least one of `triples` (with
/// `templates`) or `qa` must yield facts.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputPaths {
    pub triples: Option<PathBuf>,
    pub templates: Option<PathBuf>,
    pub aliases: Option<PathBuf>,
    pub relation_meta: Option<PathBuf>,
    pub qa: Option<PathBuf>,
    /// Imported QA pairs used only as few-shot demonstrations.
    pub few_shot_pool: Option<PathBuf>,
    pub paraphrases: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixtureConfig {
    pub n_unknown: usize,
    pub k_aug: usize,
    pub aug_mode: AugMode,
}

impl Default for MixtureConfig {
    fn default() -> Self {
        Self {
            n_unknown: 10,
            k_aug: 0,
            aug_mode: AugMode::None,
        }
    }
}

impl MixtureConfig {
    pub fn spec(&self, seed: u64) -> Result<MixtureSpec> {
        MixtureSpec::new(self.n_unknown, self.k_aug, self.aug_mode, seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub inputs: InputPaths,
    pub density_thresholds: Option<BucketThresholds>,
    pub prompt_sets: usize,
    pub shots: usize,
    pub prompt_seed: u64,
    pub model: ModelConfig,
    /// Post-training model; `{seed}` in its model id is replaced per seed.
    pub trained_model: Option<ModelConfig>,
    /// Post-training probe stores produced elsewhere, per seed.
    pub trained_probe_stores: BTreeMap<u64, PathBuf>,
    /// Drift applied when the trained model is derived from a mock default.
    pub drift: DriftRule,
    pub mixture: MixtureConfig,
    pub seeds: Vec<u64>,
    pub refusal_patterns: RefusalPatterns,
    pub explosion: ExplosionConfig,
    pub widen_domain: bool,
    pub paraphrase_max_calls: u32,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            inputs: InputPaths::default(),
            density_thresholds: None,
            prompt_sets: 10,
            shots: 4,
            prompt_seed: 0,
            model: ModelConfig::default(),
            trained_model: None,
            trained_probe_stores: BTreeMap::new(),
            drift: DriftRule {
                seed: 0,
                rate: 0.02,
                answers: Vec::new(),
                suppress_refusals: true,
            },
            mixture: MixtureConfig::default(),
            seeds: vec![0, 1, 2],
            refusal_patterns: RefusalPatterns::default(),
            explosion: ExplosionConfig::default(),
            widen_domain: false,
            paraphrase_max_calls: 3,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = read_json(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.prompt_sets == 0 {
            return Err(Error::contract("prompt_sets must be positive"));
        }
        if self.seeds.is_empty() {
            return Err(Error::contract("at least one seed is required"));
        }
        let unique: BTreeSet<_> = self.seeds.iter().collect();
        if unique.len() != self.seeds.len() {
            return Err(Error::contract("seeds must be distinct"));
        }
        self.mixture.spec(0)?;
        if let ModelConfig::Endpoint(e) = &self.model {
            e.validate()?;
        }
        Ok(())
    }

    pub fn digest(&self) -> Result<String> {
        Ok(sha256_hex(&serde_json::to_vec(self)?))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub index: usize,
    pub stage: Stage,
    pub config_digest: String,
    pub seeds: Vec<u64>,
    /// Artifact path (or `input:<name>` for external files) to SHA-256.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub prev: Option<String>,
    pub digest: String,
}

impl ManifestEntry {
    pub fn compute_digest(&self) -> Result<String> {
        let mut unsigned = self.clone();
        unsigned.digest.clear();
        Ok(sha256_hex(&serde_json::to_vec(&unsigned)?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub config_digest: String,
    pub config: PipelineConfig,
    pub seeds: Vec<u64>,
    pub entries: Vec<ManifestEntry>,
}

impl RunManifest {
    fn new(config: &PipelineConfig) -> Result<Self> {
        let digest = config.digest()?;
        Ok(Self {
            run_id: format!("run-{}", &digest[..12]),
            config_digest: digest,
            config: config.clone(),
            seeds: config.seeds.clone(),
            entries: Vec::new(),
        })
    }

    /// Digest most recently recorded for an output path.
    pub fn latest_output(&self, rel: &str) -> Option<&str> {
        self.entries
            .iter()
            .rev()
            .find_map(|e| e.outputs.get(rel))
            .map(String::as_str)
    }

    fn append(
        &mut self,
        stage: Stage,
        inputs: BTreeMap<String, String>,
        outputs: BTreeMap<String, String>,
    ) -> Result<()> {
        let mut entry = ManifestEntry {
            index: self.entries.len(),
            stage,
            config_digest: self.config_digest.clone(),
            seeds: self.seeds.clone(),
            inputs,
            outputs,
            prev: self.entries.last().map(|e| e.digest.clone()),
            digest: String::new(),
        };
        entry.digest = entry.compute_digest()?;
        self.entries.push(entry);
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainReport {
    pub entries: usize,
    pub problems: Vec<String>,
}

impl ChainReport {
    pub fn is_ok(&self) -> bool {
        self.problems.is_empty()
    }
}

/// Checks the hash links of every manifest entry and that each recorded
/// output still has its most recently recorded digest on disk.
pub fn verify_chain(work_dir: &Path) -> Result<ChainReport> {
    let manifest: RunManifest = read_json(&work_dir.join(MANIFEST_FILE))?;
    let mut problems = Vec::new();
    let mut prev: Option<&str> = None;
    for (i, e) in manifest.entries.iter().enumerate() {
        if e.index != i {
            problems.push(format!("entry {i}: index field is {}", e.index));
        }
        if e.prev.as_deref() != prev {
            problems.push(format!(
                "entry {i} ({}): broken link to previous entry",
                e.stage
            ));
        }
        if e.compute_digest()? != e.digest {
            problems.push(format!(
                "entry {i} ({}): digest does not match contents",
                e.stage
            ));
        }
        prev = Some(&e.digest);
    }
    let paths: BTreeSet<&String> = manifest
        .entries
        .iter()
        .flat_map(|e| e.outputs.keys())
        .collect();
    for rel in paths {
        let recorded = manifest.latest_output(rel).unwrap_or_default();
        let path = work_dir.join(rel);
        if !path.exists() {
            problems.push(format!("{rel}: missing"));
        } else if file_digest(&path)? != recorded {
            problems.push(format!("{rel}: modified since it was recorded"));
        }
    }
    Ok(ChainReport {
        entries: manifest.entries.len(),
        problems,
    })
}

/// Stage that produces a work-directory artifact.
fn producer(rel: &str) -> Stage {
    let file = rel.rsplit('/').next().unwrap_or(rel);
    if rel.starts_with("ingest/") {
        Stage::Ingest
    } else if rel.starts_with("generate/") {
        Stage::Generate
    } else if rel.starts_with("report/") {
        Stage::Report
    } else if rel.starts_with("default/") {
        if file == "probe.jsonl" {
            Stage::Probe
        } else {
            Stage::Categorize
        }
    } else {
        match file {
            "train.jsonl" | "paraphrases.jsonl" => Stage::Mix,
            "probe.jsonl" | "scored.jsonl" => Stage::TrainHandoff,
            _ => Stage::Analyze,
        }
    }
}

mod paths {
    pub const TRIPLES: &str = "ingest/triples.nt";
    pub const ENTITY_STATS: &str = "ingest/entity_stats.csv";
    pub const RELATION_META: &str = "ingest/relation_meta.json";
    pub const INGEST_SUMMARY: &str = "ingest/summary.json";
    pub const FACTS: &str = "generate/facts.jsonl";
    pub const PROMPT_SETS: &str = "generate/prompt_sets.json";
    pub const GENERATE_SUMMARY: &str = "generate/summary.json";
    pub const DEFAULT_PROBE: &str = "default/probe.jsonl";
    pub const DEFAULT_SCORED: &str = "default/scored.jsonl";
    pub const DEFAULT_SUMMARY: &str = "default/summary.json";
    pub const AGGREGATES: &str = "report/aggregates.json";
    pub const FIGURE_DATA: &str = "report/figure_data.csv";

    pub fn seed(seed: u64, file: &str) -> String {
        format!("seed-{seed}/{file}")
    }
}

pub use paths::seed as seed_path;

/// What a stage run did, for display.
#[derive(Debug, Clone, PartialEq)]
pub struct StageOutcome {
    pub stage: Stage,
    pub outputs: BTreeMap<String, String>,
    pub probe_runs: Vec<RunReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct IngestSummary {
    triples: usize,
    malformed_lines: usize,
    entities: usize,
    thresholds: BucketThresholds,
    buckets: BTreeMap<String, usize>,
    relations_with_metadata: usize,
    relations_without_metadata: usize,
    diagnostics: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct GenerateSummary {
    kg: qa::GenerationReport,
    imported: usize,
    import_diagnostics: Vec<String>,
    duplicates_dropped: usize,
    shot_facts_excluded: usize,
    corpus_size: usize,
    prompt_sets: usize,
    shots: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CategorizeSummary {
    model_id: String,
    categories: CategorySummary,
    unscored: Vec<FactId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ShiftRow {
    fact_id: FactId,
    before: Category,
    after: Category,
    direction: Direction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ShiftReport {
    config: String,
    seed: u64,
    dropped_unscored: usize,
    summary: ShiftSummary,
    shifts: Vec<ShiftRow>,
    default_stats: AnswerStats,
    trained_stats: AnswerStats,
    exploded: ExplodedSet,
    attribution: Attribution,
}

/// Per-seed analysis metrics consumed by the `report` stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedAnalysis {
    pub config: String,
    pub n_unknown: usize,
    pub seed: u64,
    pub metrics: MetricMap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub config: String,
    pub seeds: Vec<u64>,
    pub aggregates: Vec<SeedAggregate>,
}

/// A work directory plus the configuration driving it.
pub struct Pipeline {
    root: PathBuf,
    config: PipelineConfig,
    manifest: RunManifest,
}

struct StageIo {
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
    probe_runs: Vec<RunReport>,
}

impl StageIo {
    fn new() -> Self {
        Self {
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            probe_runs: Vec::new(),
        }
    }
}

fn runtime() -> Result<tokio::runtime::Runtime> {
    Ok(tokio::runtime::Builder::new_current_thread()
        .enable_all()
        .build()?)
}

impl Pipeline {
    /// Opens `root`, loading an existing manifest if there is one.
    pub fn open(root: impl Into<PathBuf>, config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        let root = root.into();
        let manifest_path = root.join(MANIFEST_FILE);
        let mut manifest = if manifest_path.exists() {
            read_json::<RunManifest>(&manifest_path)?
        } else {
            RunManifest::new(&config)?
        };
        let fresh = RunManifest::new(&config)?;
        manifest.run_id = fresh.run_id;
        manifest.config_digest = fresh.config_digest;
        manifest.config = fresh.config;
        manifest.seeds = fresh.seeds;
        Ok(Self {
            root,
            config,
            manifest,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// Digest of an upstream artifact, which must exist and match the
    /// manifest.
    fn require(&self, io: &mut StageIo, rel: &str) -> Result<PathBuf> {
        let path = self.path(rel);
        let hint = format!("run `factprobe {}` first", producer(rel));
        if !path.exists() {
            return Err(Error::StaleUpstream {
                path: rel.into(),
                reason: "missing".into(),
                hint,
            });
        }
        let digest = file_digest(&path)?;
        match self.manifest.latest_output(rel) {
            None => {
                return Err(Error::StaleUpstream {
                    path: rel.into(),
                    reason: "not recorded in the manifest".into(),
                    hint,
                })
            }
            Some(d) if d != digest => {
                return Err(Error::StaleUpstream {
                    path: rel.into(),
                    reason: "modified since it was recorded".into(),
                    hint,
                })
            }
            Some(_) => {}
        }
        io.inputs.insert(rel.to_string(), digest);
        Ok(path)
    }

    fn external(&self, io: &mut StageIo, name: &str, path: &Path) -> Result<()> {
        io.inputs
            .insert(format!("input:{name}"), file_digest(path)?);
        Ok(())
    }

    pub fn run_stage(&mut self, stage: Stage) -> Result<StageOutcome> {
        log::info!("stage {stage}");
        let mut io = StageIo::new();
        match stage {
            Stage::Ingest => self.ingest(&mut io)?,
            Stage::Generate => self.generate(&mut io)?,
            Stage::Probe => self.probe(&mut io)?,
            Stage::Categorize => self.categorize(&mut io)?,
            Stage::Mix => self.mix(&mut io)?,
            Stage::TrainHandoff => self.train_handoff(&mut io)?,
            Stage::Analyze => self.analyze(&mut io)?,
            Stage::Report => self.report(&mut io)?,
        }
        let mut outputs = BTreeMap::new();
        for rel in &io.outputs {
            outputs.insert(rel.clone(), file_digest(&self.path(rel))?);
        }
        self.manifest.append(stage, io.inputs, outputs.clone())?;
        write_json(&self.path(MANIFEST_FILE), &self.manifest)?;
        Ok(StageOutcome {
            stage,
            outputs,
            probe_runs: io.probe_runs,
        })
    }

    /// Runs every stage in order.
    pub fn run_all(&mut self) -> Result<Vec<StageOutcome>> {
        Stage::ALL.into_iter().map(|s| self.run_stage(s)).collect()
    }

    fn ingest(&self, io: &mut StageIo) -> Result<()> {
        let inputs = &self.config.inputs;
        let mut diagnostics = Vec::new();
        let mut malformed = 0;
        let triples: Vec<Triple> = match &inputs.triples {
            Some(p) => {
                self.external(io, "triples", p)?;
                let parsed = kg::parse_triples(open_reader(p)?)?;
                malformed = parsed.diagnostics.len();
                diagnostics.extend(parsed.diagnostics.iter().map(|d| format!("triples: {d}")));
                parsed.items
            }
            None => Vec::new(),
        };
        let meta: RelationMetaMap = match &inputs.relation_meta {
            Some(p) => {
                self.external(io, "relation_meta", p)?;
                let parsed = kg::load_relation_meta(open_reader(p)?)?;
                diagnostics.extend(
                    parsed
                        .diagnostics
                        .iter()
                        .map(|d| format!("relation_meta: {d}")),
                );
                parsed.items
            }
            None => RelationMetaMap::new(),
        };
        let unknown = kg::flag_unknown_relations(&triples, &meta);
        diagnostics.extend(unknown.iter().map(|d| format!("triples: {d}")));
        for d in &diagnostics {
            log::warn!("{d}");
        }

        let stats = kg::compute_density(&triples, self.config.density_thresholds);
        let thresholds = self.config.density_thresholds.unwrap_or_else(|| {
            let d: Vec<u64> = stats.values().map(|s| s.density).collect();
            BucketThresholds::from_percentiles(&d)
        });
        let mut buckets: BTreeMap<String, usize> = BTreeMap::new();
        for s in stats.values() {
            *buckets.entry(s.bucket.as_str().to_string()).or_default() += 1;
        }

        write_atomic(&self.path(paths::TRIPLES), |w| {
            Ok(kg::serialize_triples(&triples, w)?)
        })?;
        write_atomic(&self.path(paths::ENTITY_STATS), |w| {
            kg::write_entity_stats(stats.values(), w)
        })?;
        write_json(&self.path(paths::RELATION_META), &meta)?;
        let relations: BTreeSet<String> = triples.iter().map(Triple::relation_name).collect();
        write_json(
            &self.path(paths::INGEST_SUMMARY),
            &IngestSummary {
                triples: triples.len(),
                malformed_lines: malformed,
                entities: stats.len(),
                thresholds,
                buckets,
                relations_with_metadata: relations.iter().filter(|r| meta.contains_key(*r)).count(),
                relations_without_metadata: unknown.len(),
                diagnostics,
            },
        )?;
        io.outputs.extend(
            [
                paths::TRIPLES,
                paths::ENTITY_STATS,
                paths::RELATION_META,
                paths::INGEST_SUMMARY,
            ]
            .map(String::from),
        );
        Ok(())
    }

    fn generate(&self, io: &mut StageIo) -> Result<()> {
        let inputs = &self.config.inputs;
        let triples = kg::parse_triples(open_reader(&self.require(io, paths::TRIPLES)?)?)?.items;
        let templates = match &inputs.templates {
            Some(p) => {
                self.external(io, "templates", p)?;
                let parsed = qa::load_templates(open_reader(p)?)?;
                for d in &parsed.diagnostics {
                    log::warn!("templates: {d}");
                }
                parsed.items
            }
            None => qa::TemplateMap::new(),
        };
        let aliases = match &inputs.aliases {
            Some(p) => {
                self.external(io, "aliases", p)?;
                let parsed = qa::load_aliases(open_reader(p)?)?;
                for d in &parsed.diagnostics {
                    log::warn!("aliases: {d}");
                }
                parsed.items
            }
            None => qa::AliasMap::new(),
        };
        let (kg_facts, kg_report) = qa::generate_facts(&triples, &templates, &aliases);

        let mut import_diagnostics = Vec::new();
        let imported = match &inputs.qa {
            Some(p) => {
                self.external(io, "qa", p)?;
                let parsed = qa::import_qa(open_reader(p)?)?;
                import_diagnostics.extend(parsed.diagnostics.iter().map(|d| format!("qa: {d}")));
                parsed.items
            }
            None => Vec::new(),
        };
        let n_imported = imported.len();
        let mut corpus: BTreeMap<FactId, Fact> = BTreeMap::new();
        let mut duplicates = 0;
        for f in kg_facts.into_iter().chain(imported) {
            if corpus.contains_key(&f.fact_id) {
                duplicates += 1;
            } else {
                corpus.insert(f.fact_id.clone(), f);
            }
        }

        let pool: Vec<Fact> = match &inputs.few_shot_pool {
            Some(p) => {
                self.external(io, "few_shot_pool", p)?;
                let parsed = qa::import_qa(open_reader(p)?)?;
                import_diagnostics.extend(
                    parsed
                        .diagnostics
                        .iter()
                        .map(|d| format!("few_shot_pool: {d}")),
                );
                parsed.items
            }
            None => corpus.values().cloned().collect(),
        };
        let (sets, used) = select_prompt_sets(
            &pool,
            self.config.prompt_sets,
            self.config.shots,
            self.config.prompt_seed,
        )?;
        let before = corpus.len();
        corpus.retain(|id, _| !used.contains(id));
        let excluded = before - corpus.len();
        if corpus.is_empty() {
            return Err(Error::contract(
                "fact corpus is empty: provide triples with templates, or a qa file",
            ));
        }
        for d in &import_diagnostics {
            log::warn!("{d}");
        }
        let facts: Vec<Fact> = corpus.into_values().collect();
        write_atomic(&self.path(paths::FACTS), |w| qa::write_facts(&facts, w))?;
        write_json(&self.path(paths::PROMPT_SETS), &sets)?;
        write_json(
            &self.path(paths::GENERATE_SUMMARY),
            &GenerateSummary {
                kg: kg_report,
                imported: n_imported,
                import_diagnostics,
                duplicates_dropped: duplicates,
                shot_facts_excluded: excluded,
                corpus_size: facts.len(),
                prompt_sets: sets.len(),
                shots: self.config.shots,
            },
        )?;
        io.outputs
            .extend([paths::FACTS, paths::PROMPT_SETS, paths::GENERATE_SUMMARY].map(String::from));
        Ok(())
    }

    fn load_facts(&self, io: &mut StageIo) -> Result<Vec<Fact>> {
        qa::read_facts(open_reader(&self.require(io, paths::FACTS)?)?)
    }

    fn load_prompt_sets(&self, io: &mut StageIo) -> Result<Vec<PromptSet>> {
        read_json(&self.require(io, paths::PROMPT_SETS)?)
    }

    fn run_probe(
        &self,
        facts: &[Fact],
        sets: &[PromptSet],
        model: &ModelConfig,
        backend: &dyn ChatBackend,
        rel: &str,
    ) -> Result<RunReport> {
        let mut store = ProbeStore::open(self.path(rel))?;
        let report = runtime()?.block_on(probe_all(
            facts,
            sets,
            backend,
            &model.options(),
            &mut store,
        ))?;
        log::info!(
            "{rel}: {} requested, {} already present, {} completed, {} errors, {} retries",
            report.requested,
            report.skipped_existing,
            report.completed,
            report.errors,
            report.retries
        );
        if report.errors > 0 {
            log::warn!(
                "{rel}: {} requests failed and are recorded as errors",
                report.errors
            );
        }
        Ok(report)
    }

    fn probe(&self, io: &mut StageIo) -> Result<()> {
        let facts = self.load_facts(io)?;
        let sets = self.load_prompt_sets(io)?;
        let backend = self.config.model.backend(&facts)?;
        let report = self.run_probe(
            &facts,
            &sets,
            &self.config.model,
            backend.as_ref(),
            paths::DEFAULT_PROBE,
        )?;
        io.probe_runs.push(report);
        io.outputs.push(paths::DEFAULT_PROBE.into());
        Ok(())
    }

    fn score(
        &self,
        facts: &[Fact],
        probe_rel: &str,
        scored_rel: &str,
    ) -> Result<CategorizeSummary> {
        let records = read_probe_store(self.path(probe_rel))?;
        let (scored, missing) = categorize_all(&records, facts, &self.config.refusal_patterns)?;
        let summary = CategorySummary::from_scored(&scored);
        summary.check_total(facts.len() - missing.len())?;
        if !missing.is_empty() {
            log::warn!(
                "{probe_rel}: {} facts have no usable response",
                missing.len()
            );
        }
        write_atomic(&self.path(scored_rel), |w| write_scored(&scored, w))?;
        Ok(CategorizeSummary {
            model_id: records
                .first()
                .map(|r| r.model_id.clone())
                .unwrap_or_default(),
            categories: summary,
            unscored: missing,
        })
    }

    fn categorize(&self, io: &mut StageIo) -> Result<()> {
        let facts = self.load_facts(io)?;
        self.require(io, paths::DEFAULT_PROBE)?;
        let summary = self.score(&facts, paths::DEFAULT_PROBE, paths::DEFAULT_SCORED)?;
        write_json(&self.path(paths::DEFAULT_SUMMARY), &summary)?;
        io.outputs
            .extend([paths::DEFAULT_SCORED, paths::DEFAULT_SUMMARY].map(String::from));
        Ok(())
    }

    fn load_scored(&self, io: &mut StageIo, rel: &str) -> Result<Vec<ScoredFact>> {
        read_scored(open_reader(&self.require(io, rel)?)?)
    }

    fn paraphrase_backend(&self) -> Result<Box<dyn ChatBackend>> {
        Ok(match &self.config.model {
            ModelConfig::Mock { .. } => Box::new(MockParaphraser {
                per_call: self.config.mixture.k_aug.max(1),
            }),
            ModelConfig::Endpoint(e) => Box::new(HttpBackend::new(e)?),
        })
    }

    fn mix(&self, io: &mut StageIo) -> Result<()> {
        let facts = self.load_facts(io)?;
        let index = index_facts(&facts);
        let scored = self.load_scored(io, paths::DEFAULT_SCORED)?;
        let supplied = match &self.config.inputs.paraphrases {
            Some(p) if self.config.mixture.aug_mode == AugMode::Paraphrase => {
                self.external(io, "paraphrases", p)?;
                Some(ParaphraseStore::read(open_reader(p)?)?)
            }
            _ => None,
        };
        for &seed in &self.config.seeds {
            let spec = self.config.mixture.spec(seed)?;
            let paraphrases = match (&supplied, spec.aug_mode) {
                (Some(store), _) => store.clone(),
                (None, AugMode::Paraphrase) => {
                    let store = self.generate_core_paraphrases(&spec, &scored, &index)?;
                    let rel = paths::seed(seed, "paraphrases.jsonl");
                    write_atomic(&self.path(&rel), |w| store.write(w))?;
                    io.outputs.push(rel);
                    store
                }
                (None, _) => ParaphraseStore::default(),
            };
            let samples = build_mixture(&spec, &scored, &index, &paraphrases)?;
            mixture::validate_samples(&samples, &index)?;
            let rel = paths::seed(seed, "train.jsonl");
            emit_training_file(&samples, &self.path(&rel))?;
            log::info!("{rel}: {} samples ({})", samples.len(), spec.label());
            io.outputs.push(rel);
        }
        Ok(())
    }

    /// Paraphrases for exactly the cores `spec` will draw.
    fn generate_core_paraphrases(
        &self,
        spec: &MixtureSpec,
        scored: &[ScoredFact],
        index: &qa::FactIndex,
    ) -> Result<ParaphraseStore> {
        let core_spec = MixtureSpec::new(spec.n_unknown, 0, AugMode::None, spec.seed)?;
        let cores = build_mixture(&core_spec, scored, index, &ParaphraseStore::default())?;
        let backend = self.paraphrase_backend()?;
        let model_id = self.config.model.model_id().to_string();
        let rt = runtime()?;
        let mut store = ParaphraseStore::default();
        for s in &cores {
            let fact = &index[&s.origin_fact_id];
            let list = rt.block_on(generate_paraphrases(
                fact,
                spec.k_aug,
                backend.as_ref(),
                &model_id,
                self.config.paraphrase_max_calls,
            ))?;
            store.insert(fact.fact_id.clone(), list);
        }
        Ok(store)
    }

    fn trained_mock(
        &self,
        base: &MockSpec,
        samples: &[MixtureSample],
        index: &qa::FactIndex,
        seed: u64,
    ) -> MockSpec {
        let mut spec = base.clone();
        spec.learned = samples.iter().map(|s| s.origin_fact_id.clone()).collect();
        let mut drift = self.config.drift.clone();
        drift.seed = drift.seed.wrapping_add(seed);
        if drift.answers.is_empty() {
            drift.answers = samples
                .iter()
                .filter(|s| s.role == SampleRole::UnknownCore)
                .filter_map(|s| index.get(&s.origin_fact_id))
                .map(|f| f.answer.clone())
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect();
        }
        spec.drift = Some(drift);
        spec
    }

    fn train_handoff(&self, io: &mut StageIo) -> Result<()> {
        let facts = self.load_facts(io)?;
        let index = index_facts(&facts);
        let sets = self.load_prompt_sets(io)?;
        for &seed in &self.config.seeds {
            let train_rel = paths::seed(seed, "train.jsonl");
            let samples = read_training_file(open_reader(&self.require(io, &train_rel)?)?)?;
            let probe_rel = paths::seed(seed, "probe.jsonl");
            if let Some(src) = self.config.trained_probe_stores.get(&seed) {
                self.external(io, &format!("trained_probe_store:{seed}"), src)?;
                let records = read_probe_store(src)?;
                write_probe_records(&self.path(&probe_rel), &records)?;
            } else {
                let model = match (&self.config.trained_model, &self.config.model) {
                    (Some(m), _) => m.for_seed(seed),
                    (
                        None,
                        ModelConfig::Mock {
                            model_id,
                            max_parallel,
                            spec,
                        },
                    ) => ModelConfig::Mock {
                        model_id: format!("{model_id}-trained-seed-{seed}"),
                        max_parallel: *max_parallel,
                        spec: self.trained_mock(spec, &samples, &index, seed),
                    },
                    (None, ModelConfig::Endpoint(_)) => {
                        return Err(Error::contract(
                            "no post-training model: set trained_model or trained_probe_stores",
                        ))
                    }
                };
                let backend = model.backend(&facts)?;
                // a fresh store per run, so the output depends on the model alone
                let path = self.path(&probe_rel);
                if path.exists() {
                    std::fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
                }
                io.probe_runs.push(self.run_probe(
                    &facts,
                    &sets,
                    &model,
                    backend.as_ref(),
                    &probe_rel,
                )?);
            }
            let scored_rel = paths::seed(seed, "scored.jsonl");
            let summary = self.score(&facts, &probe_rel, &scored_rel)?;
            log::info!(
                "seed {seed}: UK {} MK {} HK {}",
                summary.categories.unknown,
                summary.categories.maybe_known,
                summary.categories.highly_known
            );
            io.outputs.extend([probe_rel, scored_rel]);
        }
        Ok(())
    }

    fn analyze(&self, io: &mut StageIo) -> Result<()> {
        let facts = self.load_facts(io)?;
        let index = index_facts(&facts);
        let meta: RelationMetaMap = read_json(&self.require(io, paths::RELATION_META)?)?;
        let default_scored = self.load_scored(io, paths::DEFAULT_SCORED)?;
        let default_records = read_probe_store(self.require(io, paths::DEFAULT_PROBE)?)?;
        let default_pred = canonical_predictions(&default_records);
        let refusals = &self.config.refusal_patterns;
        let label = self.config.mixture.spec(0)?.label();

        for &seed in &self.config.seeds {
            let samples = read_training_file(open_reader(
                &self.require(io, &paths::seed(seed, "train.jsonl"))?,
            )?)?;
            let trained_records =
                read_probe_store(self.require(io, &paths::seed(seed, "probe.jsonl"))?)?;
            let trained_scored = self.load_scored(io, &paths::seed(seed, "scored.jsonl"))?;
            let trained_pred = canonical_predictions(&trained_records);

            let both: BTreeSet<&FactId> = trained_scored.iter().map(|s| &s.fact_id).collect();
            let before: Vec<ScoredFact> = default_scored
                .iter()
                .filter(|s| both.contains(&s.fact_id))
                .cloned()
                .collect();
            let kept: BTreeSet<&FactId> = before.iter().map(|s| &s.fact_id).collect();
            let after: Vec<ScoredFact> = trained_scored
                .iter()
                .filter(|s| kept.contains(&s.fact_id))
                .cloned()
                .collect();
            let dropped = facts.len() - kept.len();
            let (shifts, summary) = diff_corpora(&before, &after)?;

            let tally = |pred: &BTreeMap<FactId, String>| {
                AnswerTally::from_responses(
                    kept.iter()
                        .filter_map(|id| pred.get(*id))
                        .map(String::as_str),
                    refusals,
                )
            };
            let default_tally = tally(&default_pred);
            let trained_tally = tally(&trained_pred);
            let exploded = detect_explosions(&default_tally, &trained_tally, self.config.explosion);
            let attribution = attribute_shifts(
                &shifts,
                &AttributionContext {
                    facts: &index,
                    training: &samples,
                    relation_meta: &meta,
                    exploded: &exploded,
                    default_predictions: &default_pred,
                    trained_predictions: &trained_pred,
                    refusals,
                    widen_domain: self.config.widen_domain,
                },
            )?;
            let default_stats = stats_from_tally(&default_tally);
            let trained_stats = stats_from_tally(&trained_tally);
            let cores: Vec<FactId> = samples
                .iter()
                .filter(|s| s.role == SampleRole::UnknownCore)
                .map(|s| s.origin_fact_id.clone())
                .collect();
            let reliability = reliability_report(&trained_scored, &cores)?;

            let ctx = ReportContext {
                config: label.clone(),
                model_id: trained_records
                    .first()
                    .map(|r| r.model_id.clone())
                    .unwrap_or_default(),
                seed,
                explosion: self.config.explosion,
            };
            let trends_rel = paths::seed(seed, "trends.csv");
            write_atomic(&self.path(&trends_rel), |w| {
                write_trends_csv(
                    &ctx,
                    &[("default", &default_stats), ("trained", &trained_stats)],
                    w,
                )
            })?;
            let attribution_rel = paths::seed(seed, "attribution.csv");
            write_atomic(&self.path(&attribution_rel), |w| {
                write_attribution_csv(&ctx, &attribution, w)
            })?;

            let after_summary = CategorySummary::from_scored(&after);
            let mut metrics = MetricMap::new();
            let mut put = |k: &str, v: f64| {
                metrics.insert(k.to_string(), v);
            };
            put("reliability", reliability.reliability);
            put("all_correct_fraction", reliability.all_correct_fraction);
            put("positive_shift_rate", summary.positive_rate);
            put("negative_shift_rate", summary.negative_rate);
            put("uk_to_hk", attribution.positive.total as f64);
            put("hk_to_uk", attribution.negative.total as f64);
            put("unknown_after", after_summary.unknown as f64);
            put("maybe_known_after", after_summary.maybe_known as f64);
            put("highly_known_after", after_summary.highly_known as f64);
            put("default_refusals", default_stats.refusal_count as f64);
            put("trained_refusals", trained_stats.refusal_count as f64);
            put(
                "default_unique_answers",
                default_stats.unique_answers as f64,
            );
            put(
                "trained_unique_answers",
                trained_stats.unique_answers as f64,
            );
            put("exploded_answers", exploded.answers.len() as f64);
            for (prefix, b) in [
                ("uk_to_hk", &attribution.positive),
                ("hk_to_uk", &attribution.negative),
            ] {
                for (reason, share) in b.reasons() {
                    put(&format!("{prefix}.{reason}"), share.fraction());
                }
                put(
                    &format!("{prefix}.shift_explained"),
                    b.shift_explained.fraction(),
                );
            }

            let shift_rows = shifts
                .iter()
                .filter(|s| s.direction != Direction::None)
                .map(|s| ShiftRow {
                    fact_id: s.fact_id.clone(),
                    before: s.before.category,
                    after: s.after.category,
                    direction: s.direction,
                })
                .collect();
            let report_rel = paths::seed(seed, "shift_report.json");
            write_json(
                &self.path(&report_rel),
                &ShiftReport {
                    config: label.clone(),
                    seed,
                    dropped_unscored: dropped,
                    summary,
                    shifts: shift_rows,
                    default_stats,
                    trained_stats,
                    exploded,
                    attribution,
                },
            )?;
            let analysis_rel = paths::seed(seed, "analysis.json");
            write_json(
                &self.path(&analysis_rel),
                &SeedAnalysis {
                    config: label.clone(),
                    n_unknown: self.config.mixture.n_unknown,
                    seed,
                    metrics,
                },
            )?;
            io.outputs
                .extend([report_rel, trends_rel, attribution_rel, analysis_rel]);
        }
        Ok(())
    }

    fn report(&self, io: &mut StageIo) -> Result<()> {
        let mut analyses = Vec::with_capacity(self.config.seeds.len());
        for &seed in &self.config.seeds {
            let a: SeedAnalysis =
                read_json(&self.require(io, &paths::seed(seed, "analysis.json"))?)?;
            analyses.push(a);
        }
        let metrics: Vec<MetricMap> = analyses.iter().map(|a| a.metrics.clone()).collect();
        let aggregates = aggregate_seeds(&metrics)?;
        if aggregates
            .iter()
            .any(|a| a.values.len() != self.config.seeds.len())
        {
            return Err(Error::contract(
                "aggregate seed count differs from the manifest seed list",
            ));
        }
        let config = analyses[0].config.clone();
        let point = FigurePoint {
            config: config.clone(),
            x: analyses[0].n_unknown.to_string(),
            aggregates: aggregates.clone(),
        };
        write_json(
            &self.path(paths::AGGREGATES),
            &AggregateReport {
                config,
                seeds: self.config.seeds.clone(),
                aggregates,
            },
        )?;
        write_atomic(&self.path(paths::FIGURE_DATA), |w| {
            emit_figure_data(&[point], &[], w)
        })?;
        io.outputs
            .extend([paths::AGGREGATES, paths::FIGURE_DATA].map(String::from));
        Ok(())
    }
}

/// Response under the lowest-numbered successful prompt set, per fact.
pub fn canonical_predictions(records: &[ProbeRecord]) -> BTreeMap<FactId, String> {
    let mut best: BTreeMap<FactId, (u32, String)> = BTreeMap::new();
    for r in records.iter().filter(|r| r.error.is_none()) {
        match best.get(&r.fact_id) {
            Some((id, _)) if *id <= r.prompt_set_id => {}
            _ => {
                best.insert(
                    r.fact_id.clone(),
                    (r.prompt_set_id, r.response_text.clone()),
                );
            }
        }
    }
    best.into_iter().map(|(k, (_, v))| (k, v)).collect()
}

/// Writes records sorted by `(fact_id, prompt_set_id)`, atomically.
pub fn write_probe_records(path: &Path, records: &[ProbeRecord]) -> Result<()> {
    let mut sorted: Vec<&ProbeRecord> = records.iter().collect();
    sorted.sort_by(|a, b| (&a.fact_id, a.prompt_set_id).cmp(&(&b.fact_id, b.prompt_set_id)));
    write_atomic(path, |w| {
        for r in sorted {
            serde_json::to_writer(&mut *w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    })
}
