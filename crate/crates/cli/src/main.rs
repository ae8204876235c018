use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};

use t5code_core::abstraction::{
    abstract_method, build_idiom_table, concretize, lex_java, IdMapping, IdiomTable, DEFAULT_IDIOM_CUTOFF,
};
use t5code_core::data::{
    self, build_pretraining_corpus, ingest_dataset, parse_methods, predict, read_predictions, run_pipeline,
    write_predictions, DataError, ModelSection, RunConfig, Split,
};
use t5code_core::metrics::{
    evaluate, measure_inference_time, overlap_metrics, perfect_predictions, DEFAULT_BEAM_SIZES,
};
use t5code_core::model::{Checkpoint, Preset};
use t5code_core::tokenizer::{train_vocabulary, Vocabulary, DEFAULT_NUM_SENTINELS};
use t5code_core::training::{
    resume_pretraining, run_finetuning, run_pretraining, source_ids, MixtureSampler, Schedule, Task,
    TrainOptions, DEFAULT_MASK_RATE,
};

#[derive(Parser)]
#[command(name = "t5code", version, about = "Text-to-text transformer pipeline for code tasks")]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the idiom table from a method file.
    Idioms(IdiomsArgs),
    /// Abstract one Java method per line, writing a mapping file per method.
    Abstract(AbstractArgs),
    /// Map abstracted lines back to raw code.
    Concretize(ConcretizeArgs),
    /// Train the subword vocabulary.
    TokenizerTrain(TokenizerArgs),
    /// Assemble the deduplicated pre-training corpus.
    BuildCorpus(BuildCorpusArgs),
    /// Pre-train a model with span masking.
    Pretrain(PretrainArgs),
    /// Fine-tune on a mixture of task datasets.
    Finetune(FinetuneArgs),
    /// Decode test records and write a prediction file.
    Predict(PredictArgs),
    /// Compute the metrics report for a prediction file.
    Evaluate(EvaluateArgs),
    /// Compare the perfect predictions of two prediction files.
    Overlap(OverlapArgs),
    /// Measure beam-search time per input for several beam sizes.
    BenchInference(BenchArgs),
    /// Run the whole pipeline described by a configuration file.
    Run(RunArgs),
}

#[derive(Args)]
struct IdiomsArgs {
    /// Method records, one JSON object per line.
    #[arg(long)]
    methods: PathBuf,
    #[arg(long, default_value_t = DEFAULT_IDIOM_CUTOFF)]
    cutoff: f64,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct AbstractArgs {
    /// One raw Java method per line.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    idioms: Option<PathBuf>,
    #[arg(long)]
    output: PathBuf,
    /// Receives `<line>.map` for every input line.
    #[arg(long)]
    map_dir: PathBuf,
}

#[derive(Args)]
struct ConcretizeArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    map_dir: PathBuf,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct TokenizerArgs {
    /// Text files, one training line per line.
    #[arg(long, required = true)]
    corpus: Vec<PathBuf>,
    #[arg(long)]
    vocab_size: usize,
    #[arg(long, default_value_t = DEFAULT_NUM_SENTINELS)]
    sentinels: usize,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct BuildCorpusArgs {
    #[arg(long)]
    methods: PathBuf,
    /// Idiom table; built from the methods with the default cutoff when absent.
    #[arg(long)]
    idioms: Option<PathBuf>,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long, default_value = "toy")]
    preset: Preset,
    #[arg(long)]
    num_layers: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    d_ff: Option<usize>,
    #[arg(long)]
    d_kv: Option<usize>,
    #[arg(long)]
    num_heads: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    max_source_len: Option<usize>,
    #[arg(long)]
    max_target_len: Option<usize>,
}

impl ModelArgs {
    fn section(&self) -> ModelSection {
        ModelSection {
            preset: self.preset,
            num_layers: self.num_layers,
            d_model: self.d_model,
            d_ff: self.d_ff,
            d_kv: self.d_kv,
            num_heads: self.num_heads,
            num_rel_buckets: None,
            max_rel_distance: None,
            dropout_rate: self.dropout,
            max_source_len: self.max_source_len,
            max_target_len: self.max_target_len,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    steps: u64,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    /// Family name with optional parameters, e.g. `st` or `constant:rate=0.01`.
    #[arg(long, default_value = "st", value_parser = parse_schedule)]
    schedule: Schedule,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    /// Receives `loss.tsv`, periodic checkpoints and `final.bin`.
    #[arg(long)]
    output_dir: PathBuf,
}

impl TrainArgs {
    fn options(&self) -> TrainOptions {
        let mut opts = TrainOptions::new(self.steps, self.seed);
        opts.batch_size = self.batch_size;
        opts.checkpoint_every = self.checkpoint_every;
        opts.output_dir = Some(self.output_dir.clone());
        opts
    }
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    tokenizer: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    train: TrainArgs,
    #[arg(long, default_value_t = DEFAULT_MASK_RATE)]
    mask_rate: f64,
    /// Continue a pre-training checkpoint instead of initializing.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct FinetuneArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    tokenizer: PathBuf,
    /// Training set as `task=path`; repeat for every task.
    #[arg(long = "train", required = true, value_parser = parse_task_path)]
    datasets: Vec<(Task, PathBuf)>,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    tokenizer: PathBuf,
    /// Test set as `task=path`; repeatable.
    #[arg(long = "data", required = true, value_parser = parse_task_path)]
    datasets: Vec<(Task, PathBuf)>,
    /// Beam size; 1 decodes greedily.
    #[arg(long, default_value_t = 1)]
    k: usize,
    #[arg(long, default_value_t = 128)]
    max_length: usize,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = vec![1, 5])]
    k: Vec<usize>,
    /// JSON report; printed to stdout when absent.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    tsv: Option<PathBuf>,
}

#[derive(Args)]
struct OverlapArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    tokenizer: PathBuf,
    #[arg(long = "data", required = true, value_parser = parse_task_path)]
    datasets: Vec<(Task, PathBuf)>,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_BEAM_SIZES.to_vec())]
    k: Vec<usize>,
    #[arg(long, default_value_t = 128)]
    max_length: usize,
    /// Time at most this many inputs per task.
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
}

fn parse_task_path(s: &str) -> Result<(Task, PathBuf), String> {
    let (task, path) = s
        .split_once('=')
        .ok_or_else(|| format!("expected task=path, got {s:?}"))?;
    Ok((task.parse()?, PathBuf::from(path)))
}

fn parse_schedule(s: &str) -> Result<Schedule, String> {
    let (name, params) = s.split_once(':').unwrap_or((s, ""));
    let base: Schedule = name.parse()?;
    let mut table = toml::Table::new();
    table.insert("kind".into(), base.name().into());
    for pair in params.split(',').filter(|p| !p.is_empty()) {
        let (key, value) = pair
            .split_once('=')
            .ok_or_else(|| format!("expected key=value, got {pair:?}"))?;
        let value = match value.parse::<i64>() {
            Ok(v) if key == "warmup" => toml::Value::Integer(v),
            _ => toml::Value::Float(value.parse().map_err(|_| format!("bad number {value:?}"))?),
        };
        table.insert(key.into(), value);
    }
    let schedule: Schedule = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| e.to_string())?;
    schedule.validate().map_err(|e| e.to_string())?;
    Ok(schedule)
}

enum CliError {
    Validation(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        if e.is_validation() {
            CliError::Validation(e.into())
        } else {
            CliError::Runtime(e.into())
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn invalid<E: Into<anyhow::Error>>(e: E) -> CliError {
    CliError::Validation(e.into())
}

fn read_input(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path)
        .with_context(|| format!("cannot read {}", path.display()))
        .map_err(invalid)
}

fn write_output(path: &Path, text: &str) -> CliResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    std::fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

fn load_vocab(path: &Path) -> CliResult<Vocabulary> {
    Vocabulary::parse_file(&read_input(path)?)
        .with_context(|| format!("invalid tokenizer file {}", path.display()))
        .map_err(invalid)
}

fn load_checkpoint(path: &Path, vocab: &Vocabulary) -> CliResult<Checkpoint> {
    let ckpt = Checkpoint::load(path)
        .with_context(|| format!("cannot load checkpoint {}", path.display()))
        .map_err(invalid)?;
    if ckpt.config().vocab_size != vocab.len() {
        return Err(invalid(anyhow!("checkpoint vocabulary size differs from the tokenizer")));
    }
    ckpt.check_vocab(&vocab.content_hash()).map_err(invalid)?;
    Ok(ckpt)
}

fn load_test_records(datasets: &[(Task, PathBuf)]) -> CliResult<Vec<t5code_core::training::TaskInstance>> {
    let mut records = Vec::new();
    for (task, path) in datasets {
        records.extend(ingest_dataset(path, *task, Split::Test)?.records);
    }
    Ok(records)
}

fn non_empty_lines(text: &str) -> Vec<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect()
}

fn idioms(args: IdiomsArgs) -> CliResult {
    let methods = parse_methods(&read_input(&args.methods)?)?;
    let mut lexed = Vec::with_capacity(methods.len());
    for (i, m) in methods.iter().enumerate() {
        match lex_java(&m.code) {
            Ok(tokens) => lexed.push(tokens),
            Err(e) => log::warn!("method {}: skipped: {e}", i + 1),
        }
    }
    let table = build_idiom_table(&lexed, args.cutoff).map_err(invalid)?;
    write_output(&args.output, &table.to_file())?;
    eprintln!("{} idioms from {} methods", table.len(), lexed.len());
    Ok(())
}

fn load_idioms(path: Option<&Path>) -> CliResult<IdiomTable> {
    match path {
        Some(p) => Ok(IdiomTable::parse_file(&read_input(p)?)),
        None => Ok(IdiomTable::default()),
    }
}

fn abstract_cmd(args: AbstractArgs) -> CliResult {
    let idioms = load_idioms(args.idioms.as_deref())?;
    let text = read_input(&args.input)?;
    let mut out = String::new();
    let mut maps = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let tokens = lex_java(line)
            .with_context(|| format!("line {}", i + 1))
            .map_err(invalid)?;
        let m = abstract_method(&tokens, &idioms);
        out.push_str(&m.to_line());
        out.push('\n');
        maps.push(m.mapping.to_map_file());
    }
    std::fs::create_dir_all(&args.map_dir)
        .with_context(|| format!("cannot create {}", args.map_dir.display()))?;
    for (i, map) in maps.iter().enumerate() {
        write_output(&args.map_dir.join(format!("{}.map", i + 1)), map)?;
    }
    write_output(&args.output, &out)
}

fn concretize_cmd(args: ConcretizeArgs) -> CliResult {
    let text = read_input(&args.input)?;
    let mut out = String::new();
    for (i, line) in text.lines().enumerate() {
        let map_path = args.map_dir.join(format!("{}.map", i + 1));
        let mapping = IdMapping::parse_map_file(&read_input(&map_path)?)
            .with_context(|| format!("{}", map_path.display()))
            .map_err(invalid)?;
        let tokens: Vec<&str> = line.split_whitespace().collect();
        let raw = concretize(&tokens, &mapping)
            .with_context(|| format!("line {}", i + 1))
            .map_err(invalid)?;
        out.push_str(&raw.join(" "));
        out.push('\n');
    }
    write_output(&args.output, &out)
}

fn tokenizer_train(args: TokenizerArgs) -> CliResult {
    let mut lines = Vec::new();
    for path in &args.corpus {
        lines.extend(non_empty_lines(&read_input(path)?));
    }
    let vocab = train_vocabulary(&lines, args.vocab_size, args.sentinels).map_err(invalid)?;
    write_output(&args.output, &vocab.to_file())?;
    eprintln!("vocabulary of {} pieces from {} lines", vocab.len(), lines.len());
    Ok(())
}

fn build_corpus(args: BuildCorpusArgs) -> CliResult {
    let methods = parse_methods(&read_input(&args.methods)?)?;
    let idioms = match &args.idioms {
        Some(p) => load_idioms(Some(p))?,
        None => {
            let lexed: Vec<_> = methods.iter().filter_map(|m| lex_java(&m.code).ok()).collect();
            build_idiom_table(&lexed, DEFAULT_IDIOM_CUTOFF).map_err(invalid)?
        }
    };
    let corpus = build_pretraining_corpus(&methods, &idioms);
    write_output(&args.output, &corpus.to_text())?;
    eprintln!(
        "{} lines: {} raw, {} abstracted, {} comments; {} duplicates removed, {} methods not abstracted",
        corpus.lines.len(),
        corpus.raw,
        corpus.abstracted,
        corpus.comments,
        corpus.duplicates_removed,
        corpus.lexer_failures
    );
    Ok(())
}

fn pretrain(args: PretrainArgs) -> CliResult {
    let vocab = load_vocab(&args.tokenizer)?;
    let corpus = non_empty_lines(&read_input(&args.corpus)?);
    let mut opts = args.train.options();
    opts.mask_rate = args.mask_rate;
    let ckpt = match &args.resume {
        Some(path) => {
            let ckpt = load_checkpoint(path, &vocab)?;
            resume_pretraining(ckpt, &vocab, &corpus, args.train.schedule, &opts)
        }
        None => {
            let config = args.model.section().build(vocab.len());
            config.validate().map_err(invalid)?;
            run_pretraining(&config, &vocab, &corpus, args.train.schedule, &opts)
        }
    }
    .map_err(anyhow::Error::from)?;
    let path = args.train.output_dir.join("final.bin");
    ckpt.save(&path).map_err(anyhow::Error::from)?;
    eprintln!("step {}: saved {}", ckpt.step, path.display());
    Ok(())
}

fn finetune(args: FinetuneArgs) -> CliResult {
    let vocab = load_vocab(&args.tokenizer)?;
    let ckpt = load_checkpoint(&args.checkpoint, &vocab)?;
    let mut sets = Vec::new();
    for (task, path) in &args.datasets {
        sets.push((*task, ingest_dataset(path, *task, Split::Train)?.records));
    }
    let sampler = MixtureSampler::new(sets).map_err(invalid)?;
    let ckpt = run_finetuning(ckpt, &vocab, &sampler, args.train.schedule, &args.train.options())
        .map_err(anyhow::Error::from)?;
    let path = args.train.output_dir.join("final.bin");
    ckpt.save(&path).map_err(anyhow::Error::from)?;
    eprintln!("step {}: saved {}", ckpt.step, path.display());
    Ok(())
}

fn predict_cmd(args: PredictArgs) -> CliResult {
    if args.k == 0 || args.max_length == 0 {
        return Err(invalid(anyhow!("--k and --max-length must be at least 1")));
    }
    let vocab = load_vocab(&args.tokenizer)?;
    let ckpt = load_checkpoint(&args.checkpoint, &vocab)?;
    let records = load_test_records(&args.datasets)?;
    let predictions = predict(&ckpt.params, &vocab, &records, args.k, args.max_length)?;
    write_predictions(&args.output, &predictions)?;
    Ok(())
}

fn evaluate_cmd(args: EvaluateArgs) -> CliResult {
    let records = read_predictions(&args.pred)?;
    let report = evaluate(&records, &args.k).map_err(invalid)?;
    match &args.output {
        Some(path) => write_output(path, &report.to_json())?,
        None => print!("{}", report.to_json()),
    }
    if let Some(path) = &args.tsv {
        write_output(path, &report.to_tsv())?;
    }
    Ok(())
}

fn overlap_cmd(args: OverlapArgs) -> CliResult {
    let a = read_predictions(&args.a)?;
    let b = read_predictions(&args.b)?;
    if a.len() != b.len() {
        return Err(invalid(anyhow!(
            "prediction files differ in length ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    if let Some(i) = a
        .iter()
        .zip(&b)
        .position(|(x, y)| (x.task, &x.input, &x.target) != (y.task, &y.input, &y.target))
    {
        return Err(invalid(anyhow!("records at line {} refer to different instances", i + 1)));
    }
    let overlap = overlap_metrics(&perfect_predictions(&a), &perfect_predictions(&b));
    println!("{}", serde_json::to_string_pretty(&overlap).map_err(anyhow::Error::from)?);
    Ok(())
}

fn bench(args: BenchArgs) -> CliResult {
    if args.k.is_empty() || args.k.contains(&0) || args.max_length == 0 {
        return Err(invalid(anyhow!("beam sizes and --max-length must be at least 1")));
    }
    let vocab = load_vocab(&args.tokenizer)?;
    let ckpt = load_checkpoint(&args.checkpoint, &vocab)?;
    let max_source = ckpt.config().max_source_len;
    let mut inputs = Vec::new();
    for (task, path) in &args.datasets {
        let records = ingest_dataset(path, *task, Split::Test)?.records;
        let take = args.limit.unwrap_or(records.len());
        inputs.extend(
            records
                .iter()
                .take(take)
                .map(|r| (task.to_string(), source_ids(&vocab, &r.prefixed_input(), max_source))),
        );
    }
    let table = measure_inference_time(&ckpt.params, &inputs, &args.k, args.max_length)
        .map_err(anyhow::Error::from)?;
    match &args.output {
        Some(path) => write_output(path, &table.to_tsv()),
        None => {
            print!("{}", table.to_tsv());
            Ok(())
        }
    }
}

fn run_cmd(args: RunArgs) -> CliResult {
    let config = RunConfig::load(&args.config)?;
    let out = run_pipeline(&config)?;
    eprintln!(
        "{} predictions written to {}",
        out.predictions.len(),
        out.predictions_path.display()
    );
    eprintln!(
        "{}: {}",
        data::REPORT_JSON_FILE,
        config.output_dir.join(data::REPORT_JSON_FILE).display()
    );
    Ok(())
}

fn dispatch(command: Command) -> CliResult {
    match command {
        Command::Idioms(a) => idioms(a),
        Command::Abstract(a) => abstract_cmd(a),
        Command::Concretize(a) => concretize_cmd(a),
        Command::TokenizerTrain(a) => tokenizer_train(a),
        Command::BuildCorpus(a) => build_corpus(a),
        Command::Pretrain(a) => pretrain(a),
        Command::Finetune(a) => finetune(a),
        Command::Predict(a) => predict_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Overlap(a) => overlap_cmd(a),
        Command::BenchInference(a) => bench(a),
        Command::Run(a) => run_cmd(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).init();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Validation(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
