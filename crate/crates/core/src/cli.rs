//! The `maftprep` command line.
//!
//! Every stage reads declared inputs, writes fixed-name artifacts under the
//! output directory, and prints a JSON summary on stdout. Failures print one
//! JSON object on stderr and exit with a code from [`ExitKind`].

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::container::{ContainerError, ContainerReader};
use crate::corpus::{
    clean_shards, enforce_min_class_size, filter_multilabel, read_labeled_tsv, read_multilabel_tsv,
    stratified_split, write_labeled_tsv, CorpusError, CorpusManifest, GroupMap, ShardInput, SplitRatios,
    DEFAULT_MIN_CLASS_SIZE, DEFAULT_MIN_TOKENS,
};
use crate::fingerprint;
use crate::mlmdata::{emit_manifest, mask_corpus, AdaptConfig, MlmError};
use crate::remap::{Remap, RemapError};
use crate::report::{
    coverage_report, render_metrics, unk_report, write_report, DatasetFormat, HarnessMetrics, NamedPath,
    ReportError, SizeReportBody,
};
use crate::surgery::{prune_checkpoint_file, size_report, SurgeryError, SurgeryPlan, META_EMBEDDING, META_VOCAB_SIZE};
use crate::tokenizer::{TokenizerError, UnigramModel, UnkMode};
use crate::vocabselect::{
    count_frequencies, select_pooled_with_budget, select_strategy, FreqTable, Recipe, SelectError, Strategy,
    TopnBasis, VocabSelection,
};

pub const ENV_OUT_DIR: &str = "MAFTPREP_OUT_DIR";
pub const ENV_THREADS: &str = "MAFTPREP_THREADS";
pub const DEFAULT_COVERAGE_TARGETS: [f64; 2] = [0.996, 0.998];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitKind {
    Usage = 2,
    Validation = 3,
    Io = 4,
    Mismatch = 5,
}

impl ExitKind {
    fn label(self) -> &'static str {
        match self {
            ExitKind::Usage => "usage",
            ExitKind::Validation => "validation",
            ExitKind::Io => "io",
            ExitKind::Mismatch => "artifact-mismatch",
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ExitKind,
    pub message: String,
}

impl CliError {
    fn new(kind: ExitKind, message: impl fmt::Display) -> Self {
        CliError {
            kind,
            message: message.to_string(),
        }
    }

    fn usage(message: impl fmt::Display) -> Self {
        CliError::new(ExitKind::Usage, message)
    }

    fn validation(message: impl fmt::Display) -> Self {
        CliError::new(ExitKind::Validation, message)
    }

    fn mismatch(message: impl fmt::Display) -> Self {
        CliError::new(ExitKind::Mismatch, message)
    }

    fn io(path: &Path, err: impl fmt::Display) -> Self {
        CliError::new(ExitKind::Io, format!("{}: {err}", path.display()))
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        let kind = match e {
            CorpusError::Io { .. } => ExitKind::Io,
            _ => ExitKind::Validation,
        };
        CliError::new(kind, e)
    }
}

impl From<TokenizerError> for CliError {
    fn from(e: TokenizerError) -> Self {
        let kind = match e {
            TokenizerError::Io { .. } => ExitKind::Io,
            _ => ExitKind::Validation,
        };
        CliError::new(kind, e)
    }
}

impl From<RemapError> for CliError {
    fn from(e: RemapError) -> Self {
        CliError::validation(e)
    }
}

impl From<SelectError> for CliError {
    fn from(e: SelectError) -> Self {
        match e {
            SelectError::Tokenizer(e) => e.into(),
            SelectError::FingerprintMismatch { .. } | SelectError::VocabMismatch { .. } => CliError::mismatch(e),
            SelectError::Io { .. } => CliError::new(ExitKind::Io, e),
            _ => CliError::validation(e),
        }
    }
}

impl From<ContainerError> for CliError {
    fn from(e: ContainerError) -> Self {
        let kind = match e {
            ContainerError::Io { .. } => ExitKind::Io,
            _ => ExitKind::Validation,
        };
        CliError::new(kind, e)
    }
}

impl From<SurgeryError> for CliError {
    fn from(e: SurgeryError) -> Self {
        match e {
            SurgeryError::Container(e) => e.into(),
            SurgeryError::KeepOutOfRange { .. } => CliError::mismatch(e),
            _ => CliError::validation(e),
        }
    }
}

impl From<MlmError> for CliError {
    fn from(e: MlmError) -> Self {
        match e {
            MlmError::Container(e) => e.into(),
            MlmError::Io { .. } | MlmError::DanglingReference(_) => CliError::new(ExitKind::Io, e),
            _ => CliError::validation(e),
        }
    }
}

impl From<ReportError> for CliError {
    fn from(e: ReportError) -> Self {
        match e {
            ReportError::Select(e) => e.into(),
            ReportError::Tokenizer(e) => e.into(),
            ReportError::Io { .. } => CliError::new(ExitKind::Io, e),
            ReportError::BoundaryMismatch { .. } => CliError::mismatch(e),
            _ => CliError::validation(e),
        }
    }
}

/// Values a `--config` file may supply. Flags override every field.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub out_dir: Option<PathBuf>,
    pub threads: Option<usize>,
    pub seed: Option<u64>,
    pub corpus_manifest: Option<PathBuf>,
    pub tokenizer: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub group_map: Option<PathBuf>,
    pub min_tokens: Option<usize>,
    pub min_class_size: Option<usize>,
    pub recipe: Option<Recipe>,
    pub preset: Option<String>,
    pub adapt: Option<AdaptConfig>,
    pub coverage_targets: Option<Vec<f64>>,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let config: PipelineConfig =
            serde_json::from_str(&text).map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?;
        // Relative paths in a config file resolve against its directory.
        let base = path.parent().unwrap_or(Path::new(""));
        let rebase = |p: Option<PathBuf>| p.map(|p| if p.is_relative() { base.join(p) } else { p });
        Ok(PipelineConfig {
            out_dir: rebase(config.out_dir),
            corpus_manifest: rebase(config.corpus_manifest),
            tokenizer: rebase(config.tokenizer),
            checkpoint: rebase(config.checkpoint),
            group_map: rebase(config.group_map),
            ..config
        })
    }
}

#[derive(Debug, Parser)]
#[command(name = "maftprep", version, about = "Prepare vocabulary-reduced multilingual models for adaptive fine-tuning")]
pub struct Cli {
    /// JSON config file; flags override its values
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Directory for all outputs [default: .]
    #[arg(long, global = true, env = ENV_OUT_DIR, value_name = "DIR")]
    pub out_dir: Option<PathBuf>,
    /// Worker threads [default: available cores]
    #[arg(long, global = true, env = ENV_THREADS, value_name = "N")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Filter raw monolingual text and write a shard manifest
    Clean(CleanArgs),
    /// Stratified train/dev/test split of a labeled TSV file
    Split(SplitArgs),
    /// Count subword frequencies per script group
    Count(CountArgs),
    /// Choose the reduced vocabulary
    Select(SelectArgs),
    /// Drop unselected pieces from the tokenizer and write the id remap
    PruneTokenizer(PruneTokenizerArgs),
    /// Drop unselected embedding rows from a checkpoint
    PruneModel(PruneModelArgs),
    /// Pack and mask the corpus into training batches
    Mask(MaskArgs),
    /// Bind corpus, tokenizer, checkpoint and config for the training harness
    Manifest(ManifestArgs),
    /// UNK counts of several tokenizers on several datasets
    ReportUnk(ReportUnkArgs),
    /// Per-group coverage of a selection
    ReportCoverage(ReportCoverageArgs),
    /// Parameter and byte counts before and after pruning
    ReportSize(ReportSizeArgs),
    /// Summarize metrics files written by the training harness
    ReportMetrics(ReportMetricsArgs),
}

#[derive(Debug, Args)]
pub struct CleanArgs {
    /// Raw corpus file for a language, repeatable
    #[arg(long = "input", value_name = "LANG=PATH", required = true)]
    pub inputs: Vec<String>,
    /// JSON object mapping language codes to script groups
    #[arg(long)]
    pub groups: Option<PathBuf>,
    /// Minimum whitespace-separated tokens per kept line [default: 6]
    #[arg(long)]
    pub min_tokens: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    /// `label<TAB>text` rows
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Labels are comma-separated; rows with more than one label are dropped
    #[arg(long)]
    pub multilabel: bool,
    /// train,dev,test fractions
    #[arg(long, value_delimiter = ',', num_args = 3, value_name = "F")]
    pub ratios: Option<Vec<f64>>,
    /// Classes with fewer examples are dropped [default: 200]
    #[arg(long)]
    pub min_class_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct CountArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub tokenizer: Option<PathBuf>,
    /// Only these groups [default: every group in the manifest]
    #[arg(long)]
    pub group: Vec<String>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum StrategyArg {
    Pooled,
    PerGroup,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum TopnBasisArg {
    IdOrder,
    Frequency,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    #[arg(long)]
    pub tokenizer: Option<PathBuf>,
    /// Frequency table written by `count`, repeatable
    #[arg(long = "freq", value_name = "TSV")]
    pub freqs: Vec<PathBuf>,
    #[arg(long, value_enum)]
    pub strategy: Option<StrategyArg>,
    /// Per-group budget, repeatable
    #[arg(long = "k", value_name = "GROUP=N")]
    pub k: Vec<String>,
    /// Budget for pooled selection
    #[arg(long)]
    pub pooled_k: Option<usize>,
    /// Pooled selection with the largest k whose keep-set fits N ids
    #[arg(long, conflicts_with = "pooled_k")]
    pub budget: Option<usize>,
    /// Also keep this many pieces of the original tokenizer
    #[arg(long)]
    pub original_topn: Option<usize>,
    #[arg(long, value_enum)]
    pub topn_basis: Option<TopnBasisArg>,
    /// Frequency table ranking the original pieces for `--topn-basis frequency`
    #[arg(long, value_name = "TSV")]
    pub topn_freq: Option<PathBuf>,
    /// Fill a group's budget with unseen pieces
    #[arg(long)]
    pub pad_unseen: bool,
}

#[derive(Debug, Args)]
pub struct PruneTokenizerArgs {
    #[arg(long)]
    pub tokenizer: Option<PathBuf>,
    #[arg(long)]
    pub selection: PathBuf,
}

#[derive(Debug, Args)]
pub struct PruneModelArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Remap written by `prune-tokenizer`
    #[arg(long)]
    pub remap: PathBuf,
    /// Pruned tokenizer; its fingerprint is recorded in the output
    #[arg(long)]
    pub pruned_tokenizer: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AdaptArgs {
    /// Named settings: maft, maft-afriberta, ner, topic, sentiment, sentiment-xlmr
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub max_seq_len: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub mask_rate: Option<f64>,
    #[arg(long)]
    pub epochs: Option<u32>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub gradient_accumulation_steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct MaskArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Tokenizer used to encode the corpus (normally the pruned one)
    #[arg(long)]
    pub tokenizer: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub adapt: AdaptArgs,
}

#[derive(Debug, Args)]
pub struct ManifestArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub tokenizer: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub selection: PathBuf,
    #[command(flatten)]
    pub adapt: AdaptArgs,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum UnkModeArg {
    FuseRuns,
    PerChar,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FormatArg {
    Lines,
    Conll,
}

#[derive(Debug, Args)]
pub struct ReportUnkArgs {
    /// Tokenizer, repeatable; becomes a table row
    #[arg(long = "tokenizer", value_name = "NAME=PATH", required = true)]
    pub tokenizers: Vec<String>,
    /// Dataset, repeatable; becomes a table column
    #[arg(long = "dataset", value_name = "NAME=PATH", required = true)]
    pub datasets: Vec<String>,
    #[arg(long, value_enum, default_value = "lines")]
    pub format: FormatArg,
    #[arg(long, value_enum, default_value = "fuse-runs")]
    pub unk_mode: UnkModeArg,
}

#[derive(Debug, Args)]
pub struct ReportCoverageArgs {
    #[arg(long)]
    pub selection: PathBuf,
    #[arg(long = "freq", value_name = "TSV", required = true)]
    pub freqs: Vec<PathBuf>,
    /// Coverage target to report k for, repeatable [default: 0.996, 0.998]
    #[arg(long = "target")]
    pub targets: Vec<f64>,
}

#[derive(Debug, Args)]
pub struct ReportSizeArgs {
    #[arg(long)]
    pub before: PathBuf,
    #[arg(long)]
    pub after: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportMetricsArgs {
    #[arg(long = "metrics", value_name = "JSON", required = true)]
    pub metrics: Vec<PathBuf>,
}

struct Ctx {
    config: PipelineConfig,
    out_dir: PathBuf,
}

impl Ctx {
    fn out(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }
}

fn require<T>(flag: Option<T>, config: Option<T>, name: &str) -> Result<T, CliError> {
    flag.or(config)
        .ok_or_else(|| CliError::usage(format!("--{name} is required (flag or config file)")))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("artifact serializes");
    text.push('\n');
    crate::atomic_write(path, text.as_bytes()).map_err(|e| CliError::io(path, e))
}

fn file_fingerprint(path: &Path) -> Result<String, CliError> {
    fingerprint::of_file(path).map_err(|e| CliError::io(path, e))
}

fn print_summary(value: serde_json::Value) {
    println!("{}", serde_json::to_string(&value).expect("summary serializes"));
}

/// Parse arguments, run the stage, and return the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { ExitKind::Usage as i32 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            let diag = json!({ "error": e.kind.label(), "exit_code": e.kind as i32, "message": e.message });
            eprintln!("{diag}");
            e.kind as i32
        }
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let config = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    let threads = cli.threads.or(config.threads);
    if let Some(n) = threads {
        if n == 0 {
            return Err(CliError::usage("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::validation(format!("thread pool: {e}")))?;
    }
    let out_dir = cli.out_dir.clone().or(config.out_dir.clone()).unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&out_dir).map_err(|e| CliError::io(&out_dir, e))?;
    log::info!("output directory {}, {} worker threads", out_dir.display(), rayon::current_num_threads());
    let ctx = Ctx { config, out_dir };
    match cli.command {
        Command::Clean(a) => clean(&ctx, a),
        Command::Split(a) => split(&ctx, a),
        Command::Count(a) => count(&ctx, a),
        Command::Select(a) => select(&ctx, a),
        Command::PruneTokenizer(a) => prune_tokenizer(&ctx, a),
        Command::PruneModel(a) => prune_model(&ctx, a),
        Command::Mask(a) => mask(&ctx, a),
        Command::Manifest(a) => manifest(&ctx, a),
        Command::ReportUnk(a) => report_unk(&ctx, a),
        Command::ReportCoverage(a) => report_coverage(&ctx, a),
        Command::ReportSize(a) => report_size(&ctx, a),
        Command::ReportMetrics(a) => report_metrics(&ctx, a),
    }
}

fn parse_pair(arg: &str, flag: &str) -> Result<(String, String), CliError> {
    match arg.split_once('=') {
        Some((k, v)) if !k.is_empty() && !v.is_empty() => Ok((k.to_owned(), v.to_owned())),
        _ => Err(CliError::usage(format!("--{flag} expects KEY=VALUE, got {arg:?}"))),
    }
}

fn clean(ctx: &Ctx, a: CleanArgs) -> Result<(), CliError> {
    let groups_path = require(a.groups, ctx.config.group_map.clone(), "groups")?;
    let groups = GroupMap::load(&groups_path)?;
    let min_tokens = a.min_tokens.or(ctx.config.min_tokens).unwrap_or(DEFAULT_MIN_TOKENS);
    let inputs = a
        .inputs
        .iter()
        .map(|arg| {
            let (language, path) = parse_pair(arg, "input")?;
            Ok(ShardInput {
                path: PathBuf::from(path),
                language,
            })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let corpus_dir = ctx.out("corpus");
    let (manifest, stats) = clean_shards(&inputs, &groups, &corpus_dir, min_tokens)?;
    let manifest_path = corpus_dir.join("manifest.json");
    crate::atomic_write(&manifest_path, manifest.to_json().as_bytes()).map_err(|e| CliError::io(&manifest_path, e))?;
    print_summary(json!({
        "manifest": manifest_path,
        "lines_in": stats.lines_in,
        "lines_kept": stats.lines_kept,
        "bytes_kept": stats.bytes_kept,
    }));
    Ok(())
}

#[derive(Debug, Serialize)]
struct SplitSummary {
    input_fingerprint: String,
    seed: u64,
    ratios: [f64; 3],
    min_class_size: usize,
    dropped_multilabel: usize,
    dropped_classes: Vec<String>,
    sizes: [usize; 3],
    class_counts: BTreeMap<String, [usize; 3]>,
}

fn split(ctx: &Ctx, a: SplitArgs) -> Result<(), CliError> {
    let seed = a
        .seed
        .or(ctx.config.seed)
        .ok_or_else(|| CliError::usage("split is stochastic: --seed is required"))?;
    let ratios = match a.ratios.as_deref() {
        Some(&[train, dev, test]) => SplitRatios::new(train, dev, test)?,
        Some(_) => return Err(CliError::usage("--ratios expects three comma-separated fractions")),
        None => SplitRatios::PAPER_DEFAULT,
    };
    let min_class_size = a.min_class_size.or(ctx.config.min_class_size).unwrap_or(DEFAULT_MIN_CLASS_SIZE);
    let (examples, dropped_multilabel) = if a.multilabel {
        let all = read_multilabel_tsv(&a.input)?;
        let n = all.len();
        let kept = filter_multilabel(all);
        let dropped = n - kept.len();
        (kept, dropped)
    } else {
        (read_labeled_tsv(&a.input)?, 0)
    };
    let (examples, dropped) = enforce_min_class_size(examples, min_class_size);
    let split = stratified_split(examples, ratios, seed)?;
    let [train, dev, test] = split.parts();
    for (name, part) in [("train.tsv", train), ("dev.tsv", dev), ("test.tsv", test)] {
        write_labeled_tsv(&ctx.out(name), part)?;
    }
    let summary = SplitSummary {
        input_fingerprint: file_fingerprint(&a.input)?,
        seed,
        ratios: ratios.as_array(),
        min_class_size,
        dropped_multilabel,
        dropped_classes: dropped.into_iter().collect(),
        sizes: [train.len(), dev.len(), test.len()],
        class_counts: split.class_counts(),
    };
    write_json(&ctx.out("split.json"), &summary)?;
    print_summary(json!({ "sizes": summary.sizes, "dropped_classes": summary.dropped_classes }));
    Ok(())
}

fn load_corpus(path: &Path) -> Result<(CorpusManifest, PathBuf), CliError> {
    let manifest = CorpusManifest::load(path)?;
    let base = path.parent().unwrap_or(Path::new("")).to_path_buf();
    manifest.verify_files(&base)?;
    Ok((manifest, base))
}

fn count(ctx: &Ctx, a: CountArgs) -> Result<(), CliError> {
    let manifest_path = require(a.manifest, ctx.config.corpus_manifest.clone(), "manifest")?;
    let tokenizer_path = require(a.tokenizer, ctx.config.tokenizer.clone(), "tokenizer")?;
    let (manifest, base) = load_corpus(&manifest_path)?;
    let model = UnigramModel::load(&tokenizer_path)?;
    let all: Vec<String> = manifest.groups().into_iter().map(str::to_owned).collect();
    let groups = if a.group.is_empty() { all.clone() } else { a.group };
    if let Some(g) = groups.iter().find(|g| !all.contains(g)) {
        return Err(CliError::validation(format!("group {g:?} has no shards in the manifest")));
    }
    let freq_dir = ctx.out("freq");
    std::fs::create_dir_all(&freq_dir).map_err(|e| CliError::io(&freq_dir, e))?;
    let mut written = BTreeMap::new();
    for group in &groups {
        let shards: Vec<PathBuf> = manifest.shards_in_group(group).map(|s| manifest.resolve(&base, s)).collect();
        log::info!("counting group {group} over {} shards", shards.len());
        let table = count_frequencies(&shards, &model, group)?;
        let path = freq_dir.join(format!("{group}.tsv"));
        crate::atomic_write(&path, table.to_tsv(&model).as_bytes()).map_err(|e| CliError::io(&path, e))?;
        written.insert(group.clone(), json!({ "path": path, "total": table.total(), "unk": table.unk_mass() }));
    }
    print_summary(json!({ "tokenizer_fingerprint": model.fingerprint(), "groups": written }));
    Ok(())
}

fn load_tables(paths: &[PathBuf]) -> Result<BTreeMap<String, FreqTable>, CliError> {
    let mut tables = BTreeMap::new();
    for path in paths {
        let table = FreqTable::load(path)?;
        if tables.insert(table.group().to_owned(), table).is_some() {
            return Err(CliError::validation(format!("{}: group repeats an earlier table", path.display())));
        }
    }
    Ok(tables)
}

fn select(ctx: &Ctx, a: SelectArgs) -> Result<(), CliError> {
    let tokenizer_path = require(a.tokenizer, ctx.config.tokenizer.clone(), "tokenizer")?;
    let model = UnigramModel::load(&tokenizer_path)?;
    if a.freqs.is_empty() {
        return Err(CliError::usage("at least one --freq table is required"));
    }
    let tables = load_tables(&a.freqs)?;
    let topn_freq = a.topn_freq.as_deref().map(FreqTable::load).transpose()?;

    let mut recipe = ctx.config.recipe.clone().unwrap_or_else(|| Recipe::per_group(BTreeMap::new(), 0));
    if let Some(s) = a.strategy {
        recipe.strategy = match s {
            StrategyArg::Pooled => Strategy::Pooled,
            StrategyArg::PerGroup => Strategy::PerGroup,
        };
    }
    if !a.k.is_empty() {
        recipe.k_per_group = a
            .k
            .iter()
            .map(|arg| {
                let (g, n) = parse_pair(arg, "k")?;
                let n = n.parse().map_err(|_| CliError::usage(format!("--k {arg:?}: budget is not an integer")))?;
                Ok((g, n))
            })
            .collect::<Result<_, CliError>>()?;
    }
    if a.pooled_k.is_some() {
        recipe.pooled_k = a.pooled_k;
    }
    if let Some(n) = a.original_topn {
        recipe.original_topn = n;
    }
    if let Some(b) = a.topn_basis {
        recipe.original_topn_basis = match b {
            TopnBasisArg::IdOrder => TopnBasis::IdOrder,
            TopnBasisArg::Frequency => TopnBasis::Frequency,
        };
    }
    recipe.pad_unseen |= a.pad_unseen;

    let selection = match a.budget {
        Some(budget) => {
            if recipe.strategy != Strategy::Pooled {
                return Err(CliError::usage("--budget applies to --strategy pooled"));
            }
            select_pooled_with_budget(&tables, &model, budget, recipe.original_topn, topn_freq.as_ref())?
        }
        None => select_strategy(&tables, &recipe, &model, topn_freq.as_ref())?,
    };
    let path = ctx.out("selection.json");
    crate::atomic_write(&path, selection.to_json().as_bytes()).map_err(|e| CliError::io(&path, e))?;
    print_summary(json!({
        "selection": path,
        "kept": selection.len(),
        "vocab_size": selection.vocab_size,
        "achieved_coverage": selection.achieved_coverage,
    }));
    Ok(())
}

const REMAP_SOURCE: &str = "# source_tokenizer=";
const REMAP_PRUNED: &str = "# pruned_tokenizer=";
const REMAP_OLD_SIZE: &str = "# old_size=";

fn prune_tokenizer(ctx: &Ctx, a: PruneTokenizerArgs) -> Result<(), CliError> {
    let tokenizer_path = require(a.tokenizer, ctx.config.tokenizer.clone(), "tokenizer")?;
    let model = UnigramModel::load(&tokenizer_path)?;
    let selection = VocabSelection::load(&a.selection)?;
    selection.validate()?;
    selection.check_model(&model)?;
    let (pruned, remap) = model.prune(&selection.keep_set())?;
    let tok_path = ctx.out("tokenizer.pruned.json");
    pruned.save(&tok_path)?;
    let remap_text = format!(
        "{REMAP_SOURCE}{}\n{REMAP_PRUNED}{}\n{REMAP_OLD_SIZE}{}\n{}",
        model.fingerprint(),
        pruned.fingerprint(),
        remap.old_size(),
        remap.to_tsv()
    );
    let remap_path = ctx.out("remap.tsv");
    crate::atomic_write(&remap_path, remap_text.as_bytes()).map_err(|e| CliError::io(&remap_path, e))?;
    print_summary(json!({
        "tokenizer": tok_path,
        "remap": remap_path,
        "old_size": remap.old_size(),
        "new_size": remap.new_size(),
        "selection_fingerprint": file_fingerprint(&a.selection)?,
    }));
    Ok(())
}

struct RemapFile {
    remap: Remap,
    source_tokenizer: Option<String>,
    pruned_tokenizer: Option<String>,
}

fn load_remap(path: &Path) -> Result<RemapFile, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let field = |prefix: &str| text.lines().find_map(|l| l.strip_prefix(prefix)).map(str::to_owned);
    let old_size: usize = field(REMAP_OLD_SIZE)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| CliError::validation(format!("{}: missing `{REMAP_OLD_SIZE}` header", path.display())))?;
    Ok(RemapFile {
        remap: Remap::from_tsv(&text, old_size)?,
        source_tokenizer: field(REMAP_SOURCE),
        pruned_tokenizer: field(REMAP_PRUNED),
    })
}

fn prune_model(ctx: &Ctx, a: PruneModelArgs) -> Result<(), CliError> {
    let checkpoint = require(a.checkpoint, ctx.config.checkpoint.clone(), "checkpoint")?;
    let remap_file = load_remap(&a.remap)?;
    let header = ContainerReader::open(&checkpoint)?.header().clone();
    let rows = header
        .metadata
        .get(META_EMBEDDING)
        .and_then(|name| header.get(name))
        .map(|t| t.rows())
        .ok_or_else(|| CliError::validation(format!("{}: no embedding tensor in metadata", checkpoint.display())))?;
    if rows != remap_file.remap.old_size() {
        return Err(CliError::mismatch(format!(
            "remap is for a vocabulary of {} but the checkpoint embedding has {rows} rows",
            remap_file.remap.old_size()
        )));
    }
    if let (Some(expected), Some(found)) = (header.metadata.get("tokenizer_fingerprint"), &remap_file.source_tokenizer) {
        if expected != found {
            return Err(CliError::mismatch(format!(
                "checkpoint was built for tokenizer {expected}, remap comes from {found}"
            )));
        }
    }
    let mut extra = BTreeMap::new();
    if let Some(path) = &a.pruned_tokenizer {
        let pruned = UnigramModel::load(path)?;
        if pruned.len() != remap_file.remap.new_size() {
            return Err(CliError::mismatch(format!(
                "pruned tokenizer has {} pieces, remap keeps {}",
                pruned.len(),
                remap_file.remap.new_size()
            )));
        }
        if let Some(fp) = &remap_file.pruned_tokenizer {
            if *fp != pruned.fingerprint() {
                return Err(CliError::mismatch(format!("remap was written for pruned tokenizer {fp}")));
            }
        }
        extra.insert("tokenizer_fingerprint".to_owned(), pruned.fingerprint());
    } else if let Some(fp) = &remap_file.pruned_tokenizer {
        extra.insert("tokenizer_fingerprint".to_owned(), fp.clone());
    }
    extra.insert("source_fingerprint".to_owned(), file_fingerprint(&checkpoint)?);
    extra.insert("remap_fingerprint".to_owned(), file_fingerprint(&a.remap)?);
    extra.insert(META_VOCAB_SIZE.to_owned(), remap_file.remap.new_size().to_string());
    let plan = SurgeryPlan::from_metadata(&header.metadata, remap_file.remap)?;
    let out = ctx.out("model.pruned.bin");
    log::info!("pruning {} to {} rows", checkpoint.display(), plan.remap.new_size());
    let sizes = prune_checkpoint_file(&checkpoint, &out, &plan, &extra)?;
    print_summary(json!({ "checkpoint": out, "sizes": sizes }));
    Ok(())
}

fn adapt_config(ctx: &Ctx, a: &AdaptArgs) -> Result<AdaptConfig, CliError> {
    let preset = a.preset.clone().or(ctx.config.preset.clone());
    let mut config = match (preset, &ctx.config.adapt) {
        (Some(name), _) => AdaptConfig::preset(&name)?,
        (None, Some(c)) => c.clone(),
        (None, None) => AdaptConfig::default(),
    };
    if let Some(v) = a.max_seq_len {
        config.max_seq_len = v;
    }
    if let Some(v) = a.batch_size {
        config.batch_size = v;
    }
    if let Some(v) = a.mask_rate {
        config.mask_rate = v;
    }
    if let Some(v) = a.epochs {
        config.epochs = v;
    }
    if let Some(v) = a.learning_rate {
        config.learning_rate = v;
    }
    if let Some(v) = a.gradient_accumulation_steps {
        config.gradient_accumulation_steps = v;
    }
    Ok(config)
}

fn mask(ctx: &Ctx, a: MaskArgs) -> Result<(), CliError> {
    let seed = a
        .seed
        .or(ctx.config.seed)
        .ok_or_else(|| CliError::usage("mask is stochastic: --seed is required"))?;
    let manifest_path = require(a.manifest.clone(), ctx.config.corpus_manifest.clone(), "manifest")?;
    let tokenizer_path = require(a.tokenizer.clone(), ctx.config.tokenizer.clone(), "tokenizer")?;
    let config = adapt_config(ctx, &a.adapt)?;
    let (manifest, base) = load_corpus(&manifest_path)?;
    let model = UnigramModel::load(&tokenizer_path)?;
    let batch_dir = ctx.out("batches");
    if batch_dir.exists() {
        // Stale batches from a larger earlier run would otherwise survive.
        std::fs::remove_dir_all(&batch_dir).map_err(|e| CliError::io(&batch_dir, e))?;
    }
    std::fs::create_dir_all(&batch_dir).map_err(|e| CliError::io(&batch_dir, e))?;
    let summary = mask_corpus(&manifest, &base, &model, &config, seed, &batch_dir)?;
    let body = json!({
        "corpus_fingerprint": file_fingerprint(&manifest_path)?,
        "config": config,
        "run": summary,
    });
    write_json(&batch_dir.join("summary.json"), &body)?;
    print_summary(json!({ "batches": summary.batches, "sequences": summary.sequences, "stats": summary.stats }));
    Ok(())
}

fn manifest(ctx: &Ctx, a: ManifestArgs) -> Result<(), CliError> {
    let corpus = require(a.corpus.clone(), ctx.config.corpus_manifest.clone(), "corpus")?;
    let tokenizer = require(a.tokenizer.clone(), ctx.config.tokenizer.clone(), "tokenizer")?;
    let checkpoint = require(a.checkpoint.clone(), ctx.config.checkpoint.clone(), "checkpoint")?;
    let config = adapt_config(ctx, &a.adapt)?;
    let manifest = emit_manifest(&config, &corpus, &tokenizer, &checkpoint, &a.selection)?;
    let header = ContainerReader::open(&checkpoint)?.header().clone();
    let model = UnigramModel::load(&tokenizer)?;
    if let Some(fp) = header.metadata.get("tokenizer_fingerprint") {
        if *fp != model.fingerprint() {
            return Err(CliError::mismatch(format!(
                "checkpoint expects tokenizer {fp}, got {}",
                model.fingerprint()
            )));
        }
    }
    let path = ctx.out("adapt_manifest.json");
    write_json(&path, &manifest)?;
    print_summary(json!({ "manifest": path, "mode": manifest.mode, "languages": manifest.languages }));
    Ok(())
}

fn report_unk(ctx: &Ctx, a: ReportUnkArgs) -> Result<(), CliError> {
    let tokenizers = a
        .tokenizers
        .iter()
        .map(|arg| {
            let np = NamedPath::parse(arg);
            Ok((np.name, UnigramModel::load(&np.path)?))
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let datasets: Vec<NamedPath> = a.datasets.iter().map(|d| NamedPath::parse(d)).collect();
    let format = match a.format {
        FormatArg::Lines => DatasetFormat::Lines,
        FormatArg::Conll => DatasetFormat::Conll,
    };
    let mode = match a.unk_mode {
        UnkModeArg::FuseRuns => UnkMode::FuseRuns,
        UnkModeArg::PerChar => UnkMode::PerChar,
    };
    let report = unk_report(&tokenizers, &datasets, format, mode)?;
    let stem = ctx.out("unk_report");
    write_report(&stem, &report, &report.render())?;
    print_summary(json!({ "report": stem.with_extension("json"), "rows": report.rows.len() }));
    Ok(())
}

fn report_coverage(ctx: &Ctx, a: ReportCoverageArgs) -> Result<(), CliError> {
    let selection = VocabSelection::load(&a.selection)?;
    let tables = load_tables(&a.freqs)?;
    let targets = if a.targets.is_empty() {
        ctx.config.coverage_targets.clone().unwrap_or_else(|| DEFAULT_COVERAGE_TARGETS.to_vec())
    } else {
        a.targets
    };
    if let Some(t) = targets.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(CliError::usage(format!("coverage target {t} is not in [0, 1]")));
    }
    let report = coverage_report(&selection, &tables, &targets)?;
    let stem = ctx.out("coverage_report");
    write_report(&stem, &report, &report.render())?;
    print_summary(json!({ "report": stem.with_extension("json"), "groups": report.groups.len() }));
    Ok(())
}

fn report_size(ctx: &Ctx, a: ReportSizeArgs) -> Result<(), CliError> {
    let before = ContainerReader::open(&a.before)?.header().clone();
    let after = ContainerReader::open(&a.after)?.header().clone();
    let name = |p: &Path| p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let body = SizeReportBody {
        before: name(&a.before),
        after: name(&a.after),
        before_fingerprint: file_fingerprint(&a.before)?,
        after_fingerprint: file_fingerprint(&a.after)?,
        sizes: size_report(&before, &after),
    };
    let stem = ctx.out("size_report");
    write_report(&stem, &body, &body.render())?;
    print_summary(json!({ "report": stem.with_extension("json"), "sizes": body.sizes }));
    Ok(())
}

#[derive(Debug, Serialize)]
struct MetricsReport {
    runs: Vec<HarnessMetrics>,
    generated_from: BTreeMap<String, String>,
}

fn report_metrics(ctx: &Ctx, a: ReportMetricsArgs) -> Result<(), CliError> {
    let mut runs = Vec::new();
    let mut generated_from = BTreeMap::new();
    for path in &a.metrics {
        let m = HarnessMetrics::load(path)?;
        generated_from.insert(m.run_id.clone(), file_fingerprint(path)?);
        runs.push(m);
    }
    let text = render_metrics(&runs);
    let report = MetricsReport { runs, generated_from };
    let stem = ctx.out("metrics_report");
    write_report(&stem, &report, &text)?;
    print_summary(json!({ "report": stem.with_extension("json"), "runs": report.runs.len() }));
    Ok(())
}
