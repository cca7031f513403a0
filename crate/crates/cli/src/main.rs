//! `factprobe`: run the knowledge-probing pipeline stage by stage.
//!
//! Settings come from defaults, then `--config`, then command-line flags.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use factprobe::io::{open_reader, write_atomic};
use factprobe::mixture::{generate_paraphrases, AugMode, ParaphraseStore};
use factprobe::mock::MockParaphraser;
use factprobe::pipeline::{verify_chain, ModelConfig, Pipeline, PipelineConfig, Stage};
use factprobe::probe::{ChatBackend, EndpointConfig, HttpBackend};
use factprobe::scoring::RefusalPatterns;

#[derive(Parser)]
#[command(
    name = "factprobe",
    version,
    about = "Probe, categorize and fine-tuning shift analysis for model knowledge"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse triples, compute entity density and load relation metadata.
    Ingest(StageArgs),
    /// Build the fact corpus and few-shot prompt sets.
    Generate(StageArgs),
    /// Probe the default model over every fact and prompt set.
    Probe(StageArgs),
    /// Score probe responses into knowledge categories.
    Categorize(StageArgs),
    /// Build per-seed training mixtures.
    Mix(StageArgs),
    /// Obtain post-training probe stores and score them.
    TrainHandoff(StageArgs),
    /// Compare default and trained categories and attribute shifts.
    Analyze(StageArgs),
    /// Aggregate per-seed analyses into report files.
    Report(StageArgs),
    /// Run every stage in order.
    Pipeline(StageArgs),
    /// Check the manifest hash chain and recorded artifact digests.
    Verify {
        #[arg(long, default_value = "work")]
        work_dir: PathBuf,
    },
    /// Print the effective configuration as JSON.
    Config(StageArgs),
    /// Generate question paraphrases for a fact corpus.
    Paraphrase(ParaphraseArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum AugArg {
    None,
    Paraphrase,
    HighlyKnown,
}

impl From<AugArg> for AugMode {
    fn from(a: AugArg) -> Self {
        match a {
            AugArg::None => AugMode::None,
            AugArg::Paraphrase => AugMode::Paraphrase,
            AugArg::HighlyKnown => AugMode::HighlyKnown,
        }
    }
}

#[derive(Args, Clone)]
struct StageArgs {
    #[arg(long, default_value = "work")]
    work_dir: PathBuf,
    /// JSON configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    triples: Option<PathBuf>,
    #[arg(long)]
    templates: Option<PathBuf>,
    #[arg(long)]
    aliases: Option<PathBuf>,
    #[arg(long)]
    relation_meta: Option<PathBuf>,
    /// Imported `question<TAB>answer<TAB>aliases` file.
    #[arg(long)]
    qa: Option<PathBuf>,
    #[arg(long)]
    few_shot_pool: Option<PathBuf>,
    #[arg(long)]
    paraphrases: Option<PathBuf>,
    #[arg(long)]
    prompt_sets: Option<usize>,
    #[arg(long)]
    shots: Option<usize>,
    #[arg(long)]
    prompt_seed: Option<u64>,
    /// Comma-separated seed list.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    n_unknown: Option<usize>,
    #[arg(long)]
    k_aug: Option<usize>,
    #[arg(long, value_enum)]
    aug_mode: Option<AugArg>,
    /// Probe a chat-completions endpoint instead of the mock model.
    #[arg(long)]
    base_url: Option<String>,
    #[arg(long)]
    model_id: Option<String>,
    /// Environment variable holding the bearer token.
    #[arg(long)]
    auth_env: Option<String>,
    #[arg(long)]
    max_parallel: Option<usize>,
    /// Endpoint of the fine-tuned model; `{seed}` in --trained-model-id is replaced per seed.
    #[arg(long)]
    trained_base_url: Option<String>,
    #[arg(long)]
    trained_model_id: Option<String>,
    /// Extra refusal pattern; repeatable. Replaces the defaults when given.
    #[arg(long = "refusal-pattern")]
    refusal_patterns: Vec<String>,
    #[arg(long)]
    explosion_ratio: Option<f64>,
    #[arg(long)]
    explosion_floor: Option<u64>,
    /// Compare domains against all training samples, not only Unknown cores.
    #[arg(long)]
    widen_domain: bool,
}

impl StageArgs {
    fn resolve(&self) -> anyhow::Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                PipelineConfig::load(p).with_context(|| format!("loading {}", p.display()))?
            }
            None => PipelineConfig::default(),
        };
        let i = &mut cfg.inputs;
        for (slot, flag) in [
            (&mut i.triples, &self.triples),
            (&mut i.templates, &self.templates),
            (&mut i.aliases, &self.aliases),
            (&mut i.relation_meta, &self.relation_meta),
            (&mut i.qa, &self.qa),
            (&mut i.few_shot_pool, &self.few_shot_pool),
            (&mut i.paraphrases, &self.paraphrases),
        ] {
            if flag.is_some() {
                slot.clone_from(flag);
            }
        }
        if let Some(v) = self.prompt_sets {
            cfg.prompt_sets = v;
        }
        if let Some(v) = self.shots {
            cfg.shots = v;
        }
        if let Some(v) = self.prompt_seed {
            cfg.prompt_seed = v;
        }
        if let Some(v) = &self.seeds {
            cfg.seeds.clone_from(v);
        }
        if let Some(v) = self.n_unknown {
            cfg.mixture.n_unknown = v;
        }
        if let Some(v) = self.k_aug {
            cfg.mixture.k_aug = v;
        }
        if let Some(v) = self.aug_mode {
            cfg.mixture.aug_mode = v.into();
        }
        if let Some(url) = &self.base_url {
            let model_id = self
                .model_id
                .clone()
                .unwrap_or_else(|| cfg.model.model_id().to_string());
            cfg.model = ModelConfig::Endpoint(EndpointConfig::new(url, model_id));
        } else if let Some(id) = &self.model_id {
            match &mut cfg.model {
                ModelConfig::Mock { model_id, .. } => model_id.clone_from(id),
                ModelConfig::Endpoint(e) => e.model_id.clone_from(id),
            }
        }
        if let Some(url) = &self.trained_base_url {
            let id = self
                .trained_model_id
                .clone()
                .context("--trained-base-url needs --trained-model-id")?;
            cfg.trained_model = Some(ModelConfig::Endpoint(EndpointConfig::new(url, id)));
        }
        match &mut cfg.model {
            ModelConfig::Endpoint(e) => {
                if self.auth_env.is_some() {
                    e.auth_env.clone_from(&self.auth_env);
                }
                if let Some(n) = self.max_parallel {
                    e.max_parallel = n;
                }
            }
            ModelConfig::Mock { max_parallel, .. } => {
                if let Some(n) = self.max_parallel {
                    *max_parallel = n;
                }
            }
        }
        if let Some(ModelConfig::Endpoint(e)) = &mut cfg.trained_model {
            if self.auth_env.is_some() {
                e.auth_env.clone_from(&self.auth_env);
            }
        }
        if !self.refusal_patterns.is_empty() {
            cfg.refusal_patterns = RefusalPatterns::new(&self.refusal_patterns)?;
        }
        if let Some(v) = self.explosion_ratio {
            cfg.explosion.ratio = v;
        }
        if let Some(v) = self.explosion_floor {
            cfg.explosion.floor = v;
        }
        if self.widen_domain {
            cfg.widen_domain = true;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct ParaphraseArgs {
    /// Fact corpus (JSON lines), e.g. `generate/facts.jsonl`.
    #[arg(long)]
    facts: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Paraphrases per fact.
    #[arg(long, default_value_t = 10)]
    count: usize,
    /// Only the first N facts of the corpus.
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long, default_value_t = 3)]
    max_calls: u32,
    /// Endpoint to ask; the built-in mock paraphraser is used when absent.
    #[arg(long)]
    base_url: Option<String>,
    #[arg(long, default_value = "mock")]
    model_id: String,
    #[arg(long)]
    auth_env: Option<String>,
}

fn run_stages(args: &StageArgs, stages: &[Stage]) -> anyhow::Result<()> {
    let cfg = args.resolve()?;
    let mut pipeline = Pipeline::open(&args.work_dir, cfg)?;
    for &stage in stages {
        let outcome = pipeline.run_stage(stage)?;
        println!("{stage}: {} outputs", outcome.outputs.len());
        for (path, digest) in &outcome.outputs {
            println!("  {path} {}", &digest[..16]);
        }
        for r in &outcome.probe_runs {
            println!(
                "  probe: {} requested, {} reused, {} completed, {} errors, {} retries",
                r.requested, r.skipped_existing, r.completed, r.errors, r.retries
            );
        }
    }
    Ok(())
}

fn paraphrase(args: &ParaphraseArgs) -> anyhow::Result<()> {
    let facts = factprobe::qa::read_facts(open_reader(&args.facts)?)?;
    let backend: Box<dyn ChatBackend> = match &args.base_url {
        Some(url) => {
            let mut cfg = EndpointConfig::new(url, &args.model_id);
            cfg.auth_env.clone_from(&args.auth_env);
            Box::new(HttpBackend::new(&cfg)?)
        }
        None => Box::new(MockParaphraser {
            per_call: args.count.max(1),
        }),
    };
    let rt = tokio::runtime::Runtime::new()?;
    let mut store = ParaphraseStore::default();
    for fact in facts.iter().take(args.limit.unwrap_or(usize::MAX)) {
        let list = rt.block_on(generate_paraphrases(
            fact,
            args.count,
            backend.as_ref(),
            &args.model_id,
            args.max_calls,
        ))?;
        store.insert(fact.fact_id.clone(), list);
    }
    write_atomic(&args.out, |w| store.write(w))?;
    println!(
        "{} facts paraphrased into {}",
        store.entries.len(),
        args.out.display()
    );
    Ok(())
}

fn verify(work_dir: &Path) -> anyhow::Result<bool> {
    let report = verify_chain(work_dir)?;
    for p in &report.problems {
        println!("{p}");
    }
    println!(
        "{} entries, {}",
        report.entries,
        if report.is_ok() {
            "chain intact"
        } else {
            "chain broken"
        }
    );
    Ok(report.is_ok())
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    let stage = |s: Stage, a: &StageArgs| run_stages(a, &[s]);
    match &cli.command {
        Command::Ingest(a) => stage(Stage::Ingest, a)?,
        Command::Generate(a) => stage(Stage::Generate, a)?,
        Command::Probe(a) => stage(Stage::Probe, a)?,
        Command::Categorize(a) => stage(Stage::Categorize, a)?,
        Command::Mix(a) => stage(Stage::Mix, a)?,
        Command::TrainHandoff(a) => stage(Stage::TrainHandoff, a)?,
        Command::Analyze(a) => stage(Stage::Analyze, a)?,
        Command::Report(a) => stage(Stage::Report, a)?,
        Command::Pipeline(a) => run_stages(a, &Stage::ALL)?,
        Command::Config(a) => println!("{}", serde_json::to_string_pretty(&a.resolve()?)?),
        Command::Paraphrase(a) => paraphrase(a)?,
        Command::Verify { work_dir } => {
            if !verify(work_dir)? {
                return Ok(ExitCode::from(1));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e
                .chain()
                .find_map(|c| c.downcast_ref::<factprobe::Error>())
                .map_or(1, factprobe::Error::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
