//! Command-line front end. Every subcommand writes its artifact to `--out`
//! and a run manifest to `<out>.run.json`.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::alloc::{
    allocate, layer_scores, plan_differences, read_plan, reference, write_plan, AllocationPlan, LayerScores, Rounding,
};
use crate::analysis::{collect_expert_activations, export_heatmap, expert_ap, high_ap_counts, HighApCounts, HIGH_AP_THRESHOLD};
use crate::corpus::{bilingual_specs, gen_corpus, load_corpus, save_corpus, split_corpus, LabeledCorpus, LanguageSpec};
use crate::error::{Error, Result};
use crate::model::{load_checkpoint, save_checkpoint, AnyModel, DenseModel, ModelConfig, MoeModel, Stage};
use crate::profile::{compute_ap_table, select_language_specific, LanguageNeuronSet, DEFAULT_THRESHOLD, TOY_TOP_K};
use crate::trace::{read_trace, record_trace, write_trace};
use crate::train::{
    build_replay_mix, eval_perplexity, stage_token_budget, train_dense, train_stage1, train_stage2, TrainConfig,
    TrainReport, DEFAULT_REPLAY_FRACTION,
};

#[derive(Parser, Debug)]
#[command(name = "neuronmoe", version, about = "Neuron-guided expert allocation and sparse upcycling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON configuration file; flags override its fields
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output artifact path
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a labeled synthetic corpus
    GenCorpus(GenCorpusArgs),
    /// Pretrain a dense model
    TrainDense(TrainDenseArgs),
    /// Record sample-level activations of a model over a corpus
    Trace(TraceArgs),
    /// Score neurons with AP and select language-specific sets
    Profile(ProfileArgs),
    /// Turn neuron sets or raw layer scores into an expert allocation plan
    Allocate(AllocateArgs),
    /// Convert a dense checkpoint into an MoE checkpoint
    Upcycle(UpcycleArgs),
    /// Run MoE training stage 1 (experts) or 2 (routers)
    Train(TrainArgs),
    /// Per-expert high-AP neuron analysis of an MoE checkpoint
    Analyze(AnalyzeArgs),
    /// Render allocation comparisons and analysis tables
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct GenCorpusArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    vocab_size: Option<usize>,
    #[arg(long)]
    samples_per_language: Option<usize>,
    #[arg(long)]
    sample_len: Option<usize>,
    /// Also split: `--out` gets the training part, this path the rest
    #[arg(long, requires = "train_fraction")]
    eval_out: Option<PathBuf>,
    #[arg(long, requires = "eval_out")]
    train_fraction: Option<f64>,
}

#[derive(Args, Debug, Clone)]
struct TrainOverrides {
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Held-out corpus for the report's per-language perplexity
    #[arg(long)]
    eval: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainDenseArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    corpus: PathBuf,
    /// JSON model configuration; toy defaults otherwise
    #[arg(long)]
    model_config: Option<PathBuf>,
    /// Train on this language only, or on a leading fraction of its
    /// samples with `LANG=FRACTION`; repeatable. Default: everything.
    #[arg(long = "include")]
    include: Vec<String>,
    #[command(flatten)]
    overrides: TrainOverrides,
}

#[derive(Args, Debug)]
struct TraceArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
}

#[derive(Args, Debug)]
struct ProfileArgs {
    #[command(flatten)]
    common: Common,
    /// Trace stem (without `.manifest.json` / `.act`)
    #[arg(long)]
    trace: PathBuf,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Args, Debug)]
struct AllocateArgs {
    #[command(flatten)]
    common: Common,
    /// JSON array of per-layer scores, or an object with a `scores` field
    #[arg(long, conflicts_with = "sets")]
    scores: Option<PathBuf>,
    /// Language neuron set files written by `profile`
    #[arg(long, num_args = 1.., requires = "n_layers")]
    sets: Vec<PathBuf>,
    #[arg(long)]
    n_layers: Option<usize>,
    #[arg(long)]
    e_min: Option<usize>,
    #[arg(long)]
    e_max: Option<usize>,
    #[arg(long)]
    rounding: Option<Rounding>,
}

#[derive(Args, Debug)]
struct UpcycleArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    plan: PathBuf,
    #[arg(long)]
    aux_coefficient: Option<f64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    stage: u32,
    #[arg(long)]
    model: PathBuf,
    /// Target-language training corpus
    #[arg(long)]
    corpus: PathBuf,
    /// Source-language corpus to draw stage-2 replay samples from
    #[arg(long)]
    replay: Option<PathBuf>,
    #[arg(long)]
    replay_fraction: Option<f64>,
    /// Stage-1 token count the replay fraction refers to; defaults to the
    /// budget implied by the training config
    #[arg(long)]
    stage1_tokens: Option<usize>,
    #[arg(long)]
    source: Option<String>,
    #[arg(long)]
    target: Option<String>,
    #[command(flatten)]
    overrides: TrainOverrides,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    #[command(flatten)]
    common: Common,
    /// Plan files to compare, in column order
    #[arg(long = "plan")]
    plans: Vec<PathBuf>,
    /// Built-in reference allocations to add as columns
    #[arg(long = "reference", value_parser = clap::builder::PossibleValuesParser::new(reference::FIXTURE_NAMES))]
    references: Vec<String>,
    /// Counts file written by `analyze`
    #[arg(long)]
    analysis: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub config: Value,
    pub config_digest: String,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub seed: Option<u64>,
    pub tool_version: String,
    pub wall_time_seconds: f64,
}

/// Path of the manifest written next to `out`.
pub fn manifest_path(out: &Path) -> PathBuf {
    with_suffix(out, ".run.json")
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn digest(config: &Value) -> String {
    hex::encode(Sha256::digest(config.to_string().as_bytes()))
}

struct Outcome {
    config: Value,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    seed: Option<u64>,
}

/// Parses `args` (including the program name) and runs the subcommand.
/// Returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn run(command: Command) -> Result<()> {
    let start = Instant::now();
    let (name, out, outcome) = match command {
        Command::GenCorpus(a) => ("gen-corpus", a.common.out.clone(), gen_corpus_cmd(a)?),
        Command::TrainDense(a) => ("train-dense", a.common.out.clone(), train_dense_cmd(a)?),
        Command::Trace(a) => ("trace", a.common.out.clone(), trace_cmd(a)?),
        Command::Profile(a) => ("profile", a.common.out.clone(), profile_cmd(a)?),
        Command::Allocate(a) => ("allocate", a.common.out.clone(), allocate_cmd(a)?),
        Command::Upcycle(a) => ("upcycle", a.common.out.clone(), upcycle_cmd(a)?),
        Command::Train(a) => ("train", a.common.out.clone(), train_cmd(a)?),
        Command::Analyze(a) => ("analyze", a.common.out.clone(), analyze_cmd(a)?),
        Command::Report(a) => ("report", a.common.out.clone(), report_cmd(a)?),
    };
    let manifest = RunManifest {
        subcommand: name.to_string(),
        config_digest: digest(&outcome.config),
        config: outcome.config,
        inputs: outcome.inputs,
        outputs: outcome.outputs,
        seed: outcome.seed,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        wall_time_seconds: start.elapsed().as_secs_f64(),
    };
    write_json(&manifest_path(&out), &manifest)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut json = serde_json::to_string_pretty(value)?;
    json.push('\n');
    fs::write(path, json)?;
    Ok(())
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_str(&fs::read_to_string(path)?).map_err(|e| {
        Error::parse(
            format!("{}:{}:{}", path.display(), e.line(), e.column()),
            e.to_string(),
        )
    })
}

/// Config file contents, or the default when no file was given.
fn load_config<T: DeserializeOwned + Default>(path: &Option<PathBuf>) -> Result<T> {
    path.as_deref().map_or_else(|| Ok(T::default()), read_json)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
struct CorpusConfig {
    vocab_size: usize,
    samples_per_language: usize,
    sample_len: usize,
    /// Defaults to the two-language `A`/`B` setup over the vocabulary.
    languages: Option<Vec<LanguageSpec>>,
    train_fraction: Option<f64>,
    seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            vocab_size: 128,
            samples_per_language: 2500,
            sample_len: 32,
            languages: None,
            train_fraction: None,
            seed: 1,
        }
    }
}

fn gen_corpus_cmd(a: GenCorpusArgs) -> Result<Outcome> {
    let mut cfg: CorpusConfig = load_config(&a.common.config)?;
    cfg.vocab_size = a.vocab_size.unwrap_or(cfg.vocab_size);
    cfg.samples_per_language = a.samples_per_language.unwrap_or(cfg.samples_per_language);
    cfg.sample_len = a.sample_len.unwrap_or(cfg.sample_len);
    cfg.seed = a.common.seed.unwrap_or(cfg.seed);
    cfg.train_fraction = a.train_fraction.or(cfg.train_fraction);
    let specs = cfg
        .languages
        .clone()
        .unwrap_or_else(|| bilingual_specs(cfg.vocab_size));
    let corpus = gen_corpus(&specs, cfg.vocab_size, cfg.samples_per_language, cfg.sample_len, cfg.seed)?;
    let mut outputs = vec![a.common.out.clone()];
    match (&a.eval_out, cfg.train_fraction) {
        (Some(eval_out), Some(fraction)) => {
            let (train, eval) = split_corpus(&corpus, fraction, cfg.seed)?;
            save_corpus(&train, &a.common.out)?;
            save_corpus(&eval, eval_out)?;
            outputs.push(eval_out.clone());
        }
        _ => save_corpus(&corpus, &a.common.out)?,
    }
    Ok(Outcome {
        config: serde_json::to_value(&cfg)?,
        inputs: a.common.config.into_iter().collect(),
        outputs,
        seed: Some(cfg.seed),
    })
}

fn apply_overrides(cfg: &mut TrainConfig, o: &TrainOverrides, seed: Option<u64>) -> Result<()> {
    cfg.total_steps = o.steps.unwrap_or(cfg.total_steps);
    cfg.learning_rate = o.lr.unwrap_or(cfg.learning_rate);
    cfg.batch_size = o.batch_size.unwrap_or(cfg.batch_size);
    cfg.seed = seed.unwrap_or(cfg.seed);
    cfg.validate()
}

/// `LANG` keeps every sample of a language; `LANG=F` keeps the leading
/// fraction `F` of them.
fn select_languages(corpus: &LabeledCorpus, include: &[String]) -> Result<LabeledCorpus> {
    if include.is_empty() {
        return Ok(corpus.clone());
    }
    let mut out = LabeledCorpus {
        vocab_size: corpus.vocab_size,
        languages: corpus.languages.clone(),
        samples: Vec::new(),
    };
    for item in include {
        let (lang, fraction) = match item.split_once('=') {
            Some((l, f)) => (
                l,
                f.parse::<f64>()
                    .ok()
                    .filter(|f| (0.0..=1.0).contains(f))
                    .ok_or_else(|| Error::Config(format!("bad fraction in `--include {item}`")))?,
            ),
            None => (item.as_str(), 1.0),
        };
        if !corpus.has_language(lang) {
            return Err(Error::Validation(format!("corpus has no language `{lang}`")));
        }
        let all: Vec<_> = corpus.samples_of(lang).cloned().collect();
        let keep = (fraction * all.len() as f64).round() as usize;
        out.samples.extend(all.into_iter().take(keep));
    }
    out.samples.sort_by_key(|s| s.id);
    out.samples.dedup_by_key(|s| s.id);
    if out.samples.is_empty() {
        return Err(Error::Validation("language selection left no samples".into()));
    }
    Ok(out)
}

fn finish_report(report: &mut TrainReport, model: &AnyModel, eval: &Option<PathBuf>) -> Result<()> {
    if let Some(path) = eval {
        report.eval_perplexity = eval_perplexity(model, &load_corpus(path)?, None)?;
    }
    Ok(())
}

fn train_dense_cmd(a: TrainDenseArgs) -> Result<Outcome> {
    let mut cfg: TrainConfig = load_config(&a.common.config)?;
    apply_overrides(&mut cfg, &a.overrides, a.common.seed)?;
    let model_cfg: ModelConfig = match &a.model_config {
        Some(p) => read_json(p)?,
        None => ModelConfig::toy(),
    };
    let corpus = select_languages(&load_corpus(&a.corpus)?, &a.include)?;
    let mut model = DenseModel::init(&model_cfg, cfg.seed)?;
    let mut report = train_dense(&mut model, &corpus, &cfg)?;
    let model = AnyModel::Dense(model);
    finish_report(&mut report, &model, &a.overrides.eval)?;
    save_checkpoint(&model, &a.common.out)?;
    let report_path = with_suffix(&a.common.out, ".report.json");
    report.write_json(&report_path)?;

    let mut inputs = vec![a.corpus];
    inputs.extend(a.common.config);
    inputs.extend(a.model_config);
    inputs.extend(a.overrides.eval);
    Ok(Outcome {
        config: json!({"model": model_cfg, "train": cfg, "include": a.include}),
        inputs,
        outputs: vec![a.common.out, report_path],
        seed: Some(cfg.seed),
    })
}

fn trace_cmd(a: TraceArgs) -> Result<Outcome> {
    let model = load_checkpoint(&a.model)?;
    let corpus = load_corpus(&a.corpus)?;
    let trace = record_trace(&model, &corpus)?;
    write_trace(&trace, &a.common.out)?;
    let (manifest, payload) = crate::trace::trace_paths(&a.common.out);
    Ok(Outcome {
        config: json!({}),
        inputs: vec![a.model, a.corpus],
        outputs: vec![manifest, payload],
        seed: None,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
struct ProfileConfig {
    k: usize,
    threshold: f64,
}

impl Default for ProfileConfig {
    fn default() -> Self {
        Self {
            k: TOY_TOP_K,
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

/// File name of one language's neuron set inside a `profile` output
/// directory.
pub fn neuron_set_file(language: &str) -> String {
    format!("neurons.{language}.json")
}

fn profile_cmd(a: ProfileArgs) -> Result<Outcome> {
    let mut cfg: ProfileConfig = load_config(&a.common.config)?;
    cfg.k = a.k.unwrap_or(cfg.k);
    cfg.threshold = a.threshold.unwrap_or(cfg.threshold);
    let trace = read_trace(&a.trace)?;
    let table = compute_ap_table(&trace)?;
    let sets = select_language_specific(&table, cfg.k, cfg.threshold)?;
    fs::create_dir_all(&a.common.out)?;
    let table_path = a.common.out.join("ap.csv");
    table.write_csv(&table_path)?;
    let mut outputs = vec![table_path];
    for set in &sets {
        let path = a.common.out.join(neuron_set_file(&set.language));
        set.write_json(&path)?;
        outputs.push(path);
    }
    let (manifest, payload) = crate::trace::trace_paths(&a.trace);
    let mut inputs = vec![manifest, payload];
    inputs.extend(a.common.config);
    Ok(Outcome {
        config: serde_json::to_value(&cfg)?,
        inputs,
        outputs,
        seed: None,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
struct AllocateConfig {
    e_min: usize,
    e_max: usize,
    rounding: Rounding,
}

impl Default for AllocateConfig {
    fn default() -> Self {
        Self {
            e_min: 1,
            e_max: 6,
            rounding: Rounding::Floor,
        }
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ScoresFile {
    Bare(Vec<u64>),
    Wrapped { scores: Vec<u64> },
}

fn allocate_cmd(a: AllocateArgs) -> Result<Outcome> {
    let mut cfg: AllocateConfig = load_config(&a.common.config)?;
    cfg.e_min = a.e_min.unwrap_or(cfg.e_min);
    cfg.e_max = a.e_max.unwrap_or(cfg.e_max);
    cfg.rounding = a.rounding.unwrap_or(cfg.rounding);
    let (scores, mut inputs) = match (&a.scores, a.sets.is_empty()) {
        (Some(path), true) => {
            let scores = match read_json::<ScoresFile>(path)? {
                ScoresFile::Bare(s) | ScoresFile::Wrapped { scores: s } => s,
            };
            (LayerScores(scores), vec![path.clone()])
        }
        (None, false) => {
            let sets = a
                .sets
                .iter()
                .map(|p| LanguageNeuronSet::read_json(p))
                .collect::<Result<Vec<_>>>()?;
            let n_layers = a.n_layers.expect("clap requires --n-layers with --sets");
            (layer_scores(&sets, n_layers)?, a.sets.clone())
        }
        _ => {
            return Err(Error::Config(
                "allocate needs either --scores or --sets with --n-layers".into(),
            ))
        }
    };
    let plan = allocate(&scores, cfg.e_min, cfg.e_max, cfg.rounding)?;
    write_plan(&plan, &a.common.out)?;
    inputs.extend(a.common.config);
    Ok(Outcome {
        config: serde_json::to_value(&cfg)?,
        inputs,
        outputs: vec![a.common.out],
        seed: None,
    })
}

fn upcycle_cmd(a: UpcycleArgs) -> Result<Outcome> {
    let dense = load_checkpoint(&a.model)?.into_dense()?;
    let plan = read_plan(&a.plan)?;
    let mut moe = MoeModel::upcycle(&dense, &plan)?;
    if let Some(alpha) = a.aux_coefficient {
        if !(alpha >= 0.0 && alpha.is_finite()) {
            return Err(Error::Config(format!("aux coefficient {alpha} must be non-negative")));
        }
        moe.aux_coefficient = alpha;
    }
    let aux_coefficient = moe.aux_coefficient;
    save_checkpoint(&AnyModel::Moe(moe), &a.common.out)?;
    Ok(Outcome {
        config: json!({"aux_coefficient": aux_coefficient}),
        inputs: vec![a.model, a.plan],
        outputs: vec![a.common.out],
        seed: None,
    })
}

fn single_language(corpus: &LabeledCorpus) -> Option<String> {
    let langs = corpus.count_by_language();
    (langs.len() == 1).then(|| langs.into_keys().next().expect("one language"))
}

fn train_cmd(a: TrainArgs) -> Result<Outcome> {
    let stage = Stage::from_number(a.stage)?;
    let mut cfg: TrainConfig = load_config(&a.common.config)?;
    apply_overrides(&mut cfg, &a.overrides, a.common.seed)?;
    if a.source.is_some() {
        cfg.source_language = a.source.clone();
    }
    if a.target.is_some() {
        cfg.target_language = a.target.clone();
    }
    let mut moe = load_checkpoint(&a.model)?.into_moe()?;
    let target = load_corpus(&a.corpus)?;
    moe.set_stage(stage);

    let mut inputs = vec![a.model.clone(), a.corpus.clone()];
    let mut outputs = vec![a.common.out.clone()];
    let mut extra = json!({});
    let mut report = match stage {
        Stage::ExpertInit => {
            if cfg.target_language.is_none() {
                cfg.target_language = single_language(&target);
            }
            train_stage1(&mut moe, &target, &cfg)?
        }
        Stage::RouterTraining => {
            let replay_path = a
                .replay
                .as_ref()
                .ok_or_else(|| Error::Config("stage 2 needs --replay <source corpus>".into()))?;
            let source = load_corpus(replay_path)?;
            if cfg.source_language.is_none() {
                cfg.source_language = single_language(&source);
            }
            if cfg.target_language.is_none() {
                cfg.target_language = single_language(&target);
            }
            let fraction = a.replay_fraction.unwrap_or(DEFAULT_REPLAY_FRACTION);
            let seq_len = target.samples.first().map_or(0, |s| s.tokens.len());
            let stage1_tokens = a.stage1_tokens.unwrap_or_else(|| stage_token_budget(&cfg, seq_len));
            let mix = build_replay_mix(&source, &target, stage1_tokens, fraction, cfg.seed)?;
            let mix_path = with_suffix(&a.common.out, ".mix.txt");
            save_corpus(&mix, &mix_path)?;
            inputs.push(replay_path.clone());
            outputs.push(mix_path);
            extra = json!({"replay_fraction": fraction, "stage1_tokens": stage1_tokens});
            train_stage2(&mut moe, &mix, &cfg)?
        }
    };
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    let model = AnyModel::Moe(moe);
    finish_report(&mut report, &model, &a.overrides.eval)?;
    save_checkpoint(&model, &a.common.out)?;
    let report_path = with_suffix(&a.common.out, ".report.json");
    report.write_json(&report_path)?;
    outputs.push(report_path);
    inputs.extend(a.common.config);
    inputs.extend(a.overrides.eval);
    Ok(Outcome {
        config: json!({"stage": a.stage, "train": cfg, "replay": extra}),
        inputs,
        outputs,
        seed: Some(cfg.seed),
    })
}

/// Counts file written by `analyze` next to its heatmap.
pub fn counts_path(out: &Path) -> PathBuf {
    with_suffix(out, ".counts.json")
}

fn analyze_cmd(a: AnalyzeArgs) -> Result<Outcome> {
    let threshold = a.threshold.unwrap_or(HIGH_AP_THRESHOLD);
    let moe = load_checkpoint(&a.model)?.into_moe()?;
    let corpus = load_corpus(&a.corpus)?;
    let report = expert_ap(&collect_expert_activations(&moe, &corpus)?)?;
    let counts = high_ap_counts(&report, threshold);
    export_heatmap(&counts, &a.common.out)?;
    let counts_file = counts_path(&a.common.out);
    write_json(&counts_file, &counts)?;
    Ok(Outcome {
        config: json!({"threshold": threshold}),
        inputs: vec![a.model, a.corpus],
        outputs: vec![a.common.out.clone(), a.common.out.with_extension("txt"), counts_file],
        seed: None,
    })
}

/// Side-by-side table of per-layer expert counts with totals, followed by
/// the layers where the first two columns disagree.
pub fn render_allocation_comparison(columns: &[(String, Vec<usize>)]) -> Result<String> {
    let Some((_, first)) = columns.first() else {
        return Ok(String::new());
    };
    if let Some((name, c)) = columns.iter().find(|(_, c)| c.len() != first.len()) {
        return Err(Error::Validation(format!(
            "`{name}` has {} layers, expected {}",
            c.len(),
            first.len()
        )));
    }
    let width = columns.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(6);
    let mut out = format!("{:<6}", "Layer");
    for (name, _) in columns {
        let _ = write!(out, " {name:>width$}");
    }
    out.push('\n');
    for l in 0..first.len() {
        let _ = write!(out, "{l:<6}");
        for (_, c) in columns {
            let _ = write!(out, " {:>width$}", c[l]);
        }
        out.push('\n');
    }
    let _ = write!(out, "{:<6}", "Total");
    for (_, c) in columns {
        let _ = write!(out, " {:>width$}", c.iter().sum::<usize>());
    }
    out.push('\n');
    if let [(a, left), (b, right), ..] = columns {
        let diffs = plan_differences(left, right);
        if diffs.is_empty() {
            let _ = writeln!(out, "\n{a} and {b} agree at every layer");
        } else {
            let _ = writeln!(out, "\n{a} and {b} differ at {} layer(s):", diffs.len());
            for (l, x, y) in diffs {
                let _ = writeln!(out, "  layer {l}: {x} vs {y}");
            }
        }
    }
    Ok(out)
}

fn report_cmd(a: ReportArgs) -> Result<Outcome> {
    let mut columns: Vec<(String, Vec<usize>)> = Vec::new();
    for path in &a.plans {
        let plan: AllocationPlan = read_plan(path)?;
        let name = path
            .file_stem()
            .map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned());
        columns.push((name, plan.experts_per_layer));
    }
    for name in &a.references {
        let counts = reference::by_name(name).expect("clap restricts reference names");
        columns.push((name.clone(), counts.to_vec()));
    }
    let mut text = render_allocation_comparison(&columns)?;
    if let Some(path) = &a.analysis {
        let counts: HighApCounts = read_json(path)?;
        if !text.is_empty() {
            text.push('\n');
        }
        text.push_str(&counts.render_all());
    }
    if text.is_empty() {
        return Err(Error::Config("report needs at least one --plan, --reference or --analysis".into()));
    }
    fs::write(&a.common.out, &text)?;
    print!("{text}");
    let mut inputs = a.plans.clone();
    inputs.extend(a.analysis.clone());
    Ok(Outcome {
        config: json!({"references": a.references}),
        inputs,
        outputs: vec![a.common.out],
        seed: None,
    })
}
