//! Command-line interface.
//!
//! Evaluation subcommands accept a `--config` JSON file whose keys are the
//! long flag names (`"window-sizes": [16, 32]`). Flags given on the command
//! line override values from the file. The fully resolved options are echoed
//! into every report manifest under `config.options`, which is itself a valid
//! config file.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::backend::{
    serve_with, BackendInfo, DelayBackend, MarkovBackend, RecordingBackend, RemoteBackend,
    ScoringBackend, ServerOptions, TraceBackend,
};
use crate::corpus::{Corpus, CorpusFormat, Document, PackPolicy, Packing};
use crate::markov::MarkovModel;
use crate::metrics::{DeltaRow, EvalRecord};
use crate::protocol::{
    compare_protocols, length_sweep, window_sweep, Aggregation, CompareSettings, ContextPolicy,
    ProtocolConfig, RunOptions, SkipFirst, StrideRule, Variant, WindowPlan,
};
use crate::report::{self, Report, RunManifest};
use crate::{Error, Result};

#[derive(Debug, Parser)]
#[command(
    name = "lenbench",
    version,
    about = "Length-aware perplexity and accuracy evaluation",
    after_help = "Evaluation options may also come from --config <file.json>; \
                  command-line flags override values from the file.\n\
                  Exit codes: 0 success, 1 configuration error, 2 backend error, 3 data error.\n\
                  Set LENBENCH_LOG=error|warn|info|debug for diagnostics."
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Evaluate one protocol at one or more sequence lengths.
    Score(RunArgs),
    /// Sliding evaluation over several window sizes at a fixed length.
    SweepWindow(RunArgs),
    /// One protocol over several sequence lengths, with plot data.
    SweepLength(RunArgs),
    /// Non-sliding vs. chunked sliding at each length, with a delta table.
    Compare(RunArgs),
    /// Fit a smoothed Markov model on a corpus.
    FitMarkov(FitArgs),
    /// Generate a token corpus by sampling a Markov model.
    Generate(GenerateArgs),
    /// Serve a Markov model over HTTP.
    Serve(ServeArgs),
    /// Run an evaluation while recording a replayable trace.
    RecordTrace(RecordArgs),
}

/// Options shared by the evaluation subcommands. Every field is optional so a
/// config file can supply it.
#[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct RunArgs {
    /// Corpus file.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// jsonl-tokens | raw-text [default: jsonl-tokens]
    #[arg(long)]
    pub corpus_format: Option<String>,
    /// concat-and-chunk | per-doc [default: concat-and-chunk]
    #[arg(long)]
    pub pack: Option<String>,
    /// Token inserted between documents when concatenating.
    #[arg(long)]
    pub separator_id: Option<u32>,
    /// markov:<model.json> | trace:<file> | remote:<url> | delay:<ms>:<inner>
    #[arg(long)]
    pub backend: Option<String>,
    /// non-sliding | sliding [default: non-sliding]
    #[arg(long)]
    pub protocol: Option<String>,
    /// Window size in tokens [default: 1024].
    #[arg(long)]
    pub window: Option<usize>,
    /// Offset between window starts [default: window size].
    #[arg(long)]
    pub stride: Option<usize>,
    /// window-local | full-prefix [default: window-local]
    #[arg(long)]
    pub context: Option<String>,
    /// window-mean | token-mean [default: window-mean]
    #[arg(long)]
    pub aggregation: Option<String>,
    /// auto | on | off [default: auto]
    #[arg(long)]
    pub skip_first_token: Option<String>,
    /// Score the tokens after the last full window in a shorter window.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub include_remainder: Option<bool>,
    /// Comma-separated sequence lengths [default: 1024].
    #[arg(long, value_delimiter = ',')]
    pub lengths: Option<Vec<usize>>,
    /// Comma-separated window sizes (sweep-window).
    #[arg(long, value_delimiter = ',')]
    pub window_sizes: Option<Vec<usize>>,
    #[arg(long)]
    pub out_json: Option<PathBuf>,
    #[arg(long)]
    pub out_csv: Option<PathBuf>,
    /// Long-format plot data (sweeps).
    #[arg(long)]
    pub out_plot: Option<PathBuf>,
    /// Recorded in the manifest [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Maximum concurrent backend calls [default: 1].
    #[arg(long)]
    pub parallelism: Option<usize>,
    /// JSON config file; flags override its values.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

macro_rules! overlay {
    ($flags:expr, $file:expr, $($field:ident),* $(,)?) => {
        RunArgs { $($field: $flags.$field.or($file.$field),)* config: None }
    };
}

impl RunArgs {
    /// Flags over config file.
    pub fn merged(self) -> Result<RunArgs> {
        let Some(path) = self.config.clone() else {
            return Ok(RunArgs {
                config: None,
                ..self
            });
        };
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let file: RunArgs = serde_json::from_str(&text)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        Ok(overlay!(
            self,
            file,
            corpus,
            corpus_format,
            pack,
            separator_id,
            backend,
            protocol,
            window,
            stride,
            context,
            aggregation,
            skip_first_token,
            include_remainder,
            lengths,
            window_sizes,
            out_json,
            out_csv,
            out_plot,
            seed,
            parallelism,
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunKind {
    Score,
    SweepWindow,
    SweepLength,
    Compare,
}

impl RunKind {
    fn name(self) -> &'static str {
        match self {
            RunKind::Score => "score",
            RunKind::SweepWindow => "sweep-window",
            RunKind::SweepLength => "sweep-length",
            RunKind::Compare => "compare",
        }
    }
}

impl std::str::FromStr for RunKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "score" => Ok(RunKind::Score),
            "sweep-window" => Ok(RunKind::SweepWindow),
            "sweep-length" => Ok(RunKind::SweepLength),
            "compare" => Ok(RunKind::Compare),
            other => Err(Error::config(format!("unknown run kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value = "jsonl-tokens")]
    pub corpus_format: String,
    /// Markov order.
    #[arg(long, short = 'k')]
    pub k: usize,
    /// Add-lambda smoothing constant.
    #[arg(long, default_value_t = 0.1)]
    pub lambda: f64,
    /// Vocabulary size [default: the corpus's].
    #[arg(long)]
    pub vocab_size: Option<u32>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Total tokens to sample.
    #[arg(long)]
    pub tokens: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Split the sample into documents of this many tokens [default: one document].
    #[arg(long)]
    pub doc_len: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub bind: String,
    #[arg(long, default_value_t = 4)]
    pub workers: usize,
    #[arg(long)]
    pub model_id: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct RecordArgs {
    /// score | sweep-window | sweep-length | compare
    #[arg(long)]
    pub run: String,
    #[arg(long)]
    pub trace_out: PathBuf,
    #[command(flatten)]
    pub args: RunArgs,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Score(a) => evaluate(RunKind::Score, a, None),
        Command::SweepWindow(a) => evaluate(RunKind::SweepWindow, a, None),
        Command::SweepLength(a) => evaluate(RunKind::SweepLength, a, None),
        Command::Compare(a) => evaluate(RunKind::Compare, a, None),
        Command::RecordTrace(r) => evaluate(r.run.parse()?, r.args, Some(&r.trace_out)),
        Command::FitMarkov(a) => fit_markov(&a),
        Command::Generate(a) => generate(&a),
        Command::Serve(a) => serve(&a),
    }
}

/// Open a backend from its `kind:argument` spec.
pub fn open_backend(spec: &str) -> Result<Box<dyn ScoringBackend>> {
    let (kind, rest) = spec
        .split_once(':')
        .ok_or_else(|| Error::config(format!("backend spec {spec:?} has no kind prefix")))?;
    match kind {
        "markov" => {
            let model = MarkovModel::load(Path::new(rest))?;
            Ok(Box::new(MarkovBackend::new(Arc::new(model))))
        }
        "trace" => Ok(Box::new(TraceBackend::open(Path::new(rest))?)),
        "remote" => {
            let remote = RemoteBackend::connect(rest).map_err(|e| Error::backend(rest, e))?;
            Ok(Box::new(remote))
        }
        "delay" => {
            let (ms, inner) = rest.split_once(':').ok_or_else(|| {
                Error::config(format!(
                    "delay backend needs delay:<ms>:<inner>, got {spec:?}"
                ))
            })?;
            let ms: u64 = ms
                .parse()
                .map_err(|_| Error::config(format!("bad delay {ms:?} in {spec:?}")))?;
            Ok(Box::new(DelayBackend::new(
                open_backend(inner)?,
                Duration::from_millis(ms),
            )))
        }
        other => Err(Error::config(format!("unknown backend kind {other:?}"))),
    }
}

fn parse<T: std::str::FromStr<Err = Error>>(value: &Option<String>, default: &str) -> Result<T> {
    value.as_deref().unwrap_or(default).parse()
}

/// Typed view of a fully resolved [`RunArgs`].
struct Settings {
    corpus: PathBuf,
    corpus_format: CorpusFormat,
    packing: Packing,
    backend: String,
    template: ProtocolConfig,
    skip: SkipFirst,
    lengths: Vec<usize>,
    window_sizes: Vec<usize>,
    options: RunOptions,
}

/// Apply defaults in place and parse. After this every field used by `kind`
/// is `Some`.
fn resolve(kind: RunKind, a: &mut RunArgs) -> Result<Settings> {
    let corpus = a
        .corpus
        .clone()
        .ok_or_else(|| Error::config("--corpus is required"))?;
    let backend = a
        .backend
        .clone()
        .ok_or_else(|| Error::config("--backend is required"))?;
    a.corpus_format.get_or_insert_with(|| "jsonl-tokens".into());
    a.pack.get_or_insert_with(|| "concat-and-chunk".into());
    a.context.get_or_insert_with(|| "window-local".into());
    a.aggregation.get_or_insert_with(|| "window-mean".into());
    a.skip_first_token.get_or_insert_with(|| "auto".into());
    a.include_remainder.get_or_insert(false);
    a.seed.get_or_insert(0);
    let parallelism = *a.parallelism.get_or_insert(1);
    if parallelism == 0 {
        return Err(Error::config("--parallelism must be >= 1"));
    }
    let protocol = match kind {
        RunKind::Score | RunKind::SweepLength => a
            .protocol
            .get_or_insert_with(|| "non-sliding".into())
            .clone(),
        RunKind::SweepWindow => {
            a.protocol = None;
            "sliding".to_string()
        }
        RunKind::Compare => {
            a.protocol = None;
            a.include_remainder = Some(false);
            "sliding".to_string()
        }
    };
    if kind == RunKind::SweepWindow {
        let sizes = a
            .window_sizes
            .as_ref()
            .filter(|s| !s.is_empty())
            .ok_or_else(|| Error::config("sweep-window needs --window-sizes"))?;
        let max = *sizes.iter().max().expect("non-empty");
        a.lengths.get_or_insert_with(|| vec![max]);
        a.window = None;
    } else {
        a.window_sizes = None;
        a.window.get_or_insert(1024);
    }
    if kind == RunKind::Compare {
        let w = a.window.expect("defaulted");
        if a.stride.is_some_and(|s| s != w) {
            return Err(Error::config("compare always uses stride = window"));
        }
        a.stride = Some(w);
    }
    a.lengths.get_or_insert_with(|| vec![1024]);
    let lengths = a.lengths.clone().expect("defaulted");
    if lengths.is_empty() {
        return Err(Error::config("--lengths must not be empty"));
    }
    if kind == RunKind::SweepWindow && lengths.len() != 1 {
        return Err(Error::config(
            "sweep-window takes exactly one sequence length",
        ));
    }

    let sliding = match protocol.as_str() {
        "sliding" => true,
        "non-sliding" | "non_sliding" => false,
        other => return Err(Error::config(format!("unknown protocol {other:?}"))),
    };
    if !sliding {
        a.window = None;
        a.stride = None;
        a.context = None;
        a.include_remainder = None;
    } else if kind != RunKind::SweepWindow {
        let w = a.window.expect("defaulted");
        a.stride.get_or_insert(w);
    }
    let plan = WindowPlan {
        window_size: a.window.unwrap_or(1),
        stride: a.stride.unwrap_or(1),
        context_policy: parse::<ContextPolicy>(&a.context, "window-local")?,
        include_remainder: a.include_remainder.unwrap_or(false),
    };
    if sliding && kind != RunKind::SweepWindow {
        plan.validate()?;
    }
    if matches!(a.stride, Some(0)) {
        return Err(Error::config("--stride must be >= 1"));
    }
    if a.window_sizes.iter().flatten().any(|&w| w == 0) || lengths.contains(&0) {
        return Err(Error::config("window sizes and lengths must be >= 1"));
    }
    let template = ProtocolConfig {
        variant: if sliding {
            Variant::Sliding(plan)
        } else {
            Variant::NonSliding
        },
        aggregation: parse::<Aggregation>(&a.aggregation, "window-mean")?,
        skip_first_token: false,
    };
    Ok(Settings {
        corpus,
        corpus_format: parse(&a.corpus_format, "jsonl-tokens")?,
        packing: Packing {
            policy: parse::<PackPolicy>(&a.pack, "concat-and-chunk")?,
            separator_id: a.separator_id,
        },
        backend,
        template,
        skip: parse(&a.skip_first_token, "auto")?,
        lengths,
        window_sizes: a.window_sizes.clone().unwrap_or_default(),
        options: RunOptions { parallelism },
    })
}

fn check_vocab(corpus: &Corpus, info: &BackendInfo) -> Result<()> {
    let max = corpus
        .documents
        .iter()
        .flat_map(|d| d.tokens.iter().copied())
        .chain(corpus.documents.is_empty().then_some(0))
        .max();
    match max {
        Some(t) if t >= info.vocab_size => Err(Error::config(format!(
            "corpus token id {t} is outside the backend vocabulary ({} ids)",
            info.vocab_size
        ))),
        _ => Ok(()),
    }
}

fn evaluate(kind: RunKind, args: RunArgs, trace_out: Option<&Path>) -> Result<()> {
    let mut args = args.merged()?;
    let settings = resolve(kind, &mut args)?;
    let corpus = Corpus::load(&settings.corpus, settings.corpus_format)?;
    let fingerprint = report::fingerprint_file(&settings.corpus)?;
    let inner = open_backend(&settings.backend)?;
    let backend: Box<dyn ScoringBackend> = match trace_out {
        Some(path) => Box::new(RecordingBackend::create(inner, path)?),
        None => inner,
    };
    let info = backend.info();
    check_vocab(&corpus, &info)?;
    let skip_first_token = settings.skip.resolve(&info);
    let template = ProtocolConfig {
        skip_first_token,
        ..settings.template
    };
    log::info!(
        "{}: {} documents, {} tokens, backend {}",
        kind.name(),
        corpus.documents.len(),
        corpus.total_tokens(),
        info.model_id
    );

    let docs: &[Document] = &corpus.documents;
    let mut deltas: Option<Vec<DeltaRow>> = None;
    let mut plot: Option<(&str, Vec<(usize, EvalRecord)>)> = None;
    let records: Vec<EvalRecord> = match kind {
        RunKind::Score => {
            let out = length_sweep(
                backend.as_ref(),
                docs,
                &settings.lengths,
                &template,
                settings.packing,
                &settings.options,
            )?;
            out.into_iter().map(|(_, r)| r).collect()
        }
        RunKind::SweepLength => {
            let out = length_sweep(
                backend.as_ref(),
                docs,
                &settings.lengths,
                &template,
                settings.packing,
                &settings.options,
            )?;
            let records = out.iter().map(|(_, r)| r.clone()).collect();
            plot = Some(("seq_len", out));
            records
        }
        RunKind::SweepWindow => {
            let seqs = corpus.pack(settings.lengths[0], settings.packing)?;
            let stride = match args.stride {
                Some(s) => StrideRule::Fixed(s),
                None => StrideRule::Chunked,
            };
            let out = window_sweep(
                backend.as_ref(),
                &seqs,
                &settings.window_sizes,
                &template,
                stride,
                &settings.options,
            )?;
            let records = out.iter().map(|(_, r)| r.clone()).collect();
            plot = Some(("window_size", out));
            records
        }
        RunKind::Compare => {
            let plan = template.window_plan().expect("compare is sliding");
            let compare = CompareSettings {
                context_policy: plan.context_policy,
                aggregation: template.aggregation,
                skip_first_token,
                packing: settings.packing,
            };
            let rows = compare_protocols(
                backend.as_ref(),
                docs,
                &settings.lengths,
                plan.window_size,
                &compare,
                &settings.options,
            )?;
            deltas = Some(rows.iter().map(|c| c.delta.clone()).collect());
            rows.into_iter()
                .flat_map(|c| [c.non_sliding, c.sliding])
                .collect()
        }
    };
    drop(backend);

    let mut stdout = std::io::stdout().lock();
    let print_err = |e| Error::io("<stdout>", e);
    for r in &records {
        writeln!(stdout, "{}", report::summary_line(r)).map_err(print_err)?;
    }
    if let Some(rows) = &deltas {
        writeln!(stdout).map_err(print_err)?;
        write!(stdout, "{}", report::emit_delta_table(rows)).map_err(print_err)?;
    }

    let mut options = serde_json::to_value(&args).expect("run args serialize");
    if let Some(obj) = options.as_object_mut() {
        obj.retain(|_, v| !v.is_null());
    }
    let config = serde_json::json!({
        "command": kind.name(),
        "options": options,
        "skip_first_token_resolved": skip_first_token,
    });
    let manifest = RunManifest::new(config, Some(fingerprint), info);
    let report = Report {
        manifest,
        records,
        deltas,
    };
    if let Some(path) = &args.out_json {
        report::emit_json(&report, path)?;
    }
    if let Some(path) = &args.out_csv {
        report::emit_csv(&report.records, path)?;
    }
    if let (Some(path), Some((x_name, sweep))) = (&args.out_plot, &plot) {
        report::emit_plotdata(sweep, x_name, path)?;
    }
    Ok(())
}

fn fit_markov(a: &FitArgs) -> Result<()> {
    let corpus = Corpus::load(&a.corpus, a.corpus_format.parse()?)?;
    let vocab = a.vocab_size.unwrap_or(corpus.vocab_size);
    let model = MarkovModel::fit(corpus.documents, a.k, vocab, a.lambda)?;
    model.save(&a.out)?;
    println!(
        "fitted order-{} model with {} contexts over {} ids -> {}",
        model.order(),
        model.n_contexts(),
        model.vocab_size(),
        a.out.display()
    );
    Ok(())
}

fn generate(a: &GenerateArgs) -> Result<()> {
    let model = MarkovModel::load(&a.model)?;
    if a.tokens == 0 {
        return Err(Error::config("--tokens must be >= 1"));
    }
    let doc_len = a.doc_len.unwrap_or(a.tokens);
    if doc_len == 0 {
        return Err(Error::config("--doc-len must be >= 1"));
    }
    let tokens = model.generate(a.tokens, a.seed);
    let documents = tokens
        .chunks(doc_len)
        .enumerate()
        .map(|(i, c)| Document {
            doc_id: i as u64,
            tokens: c.to_vec(),
        })
        .collect();
    let corpus = Corpus {
        vocab_size: model.vocab_size(),
        documents,
    };
    corpus.write_jsonl(&a.out)?;
    println!("wrote {} tokens -> {}", a.tokens, a.out.display());
    Ok(())
}

fn serve(a: &ServeArgs) -> Result<()> {
    let model = Arc::new(MarkovModel::load(&a.model)?);
    let handle = serve_with(
        model,
        &a.bind,
        ServerOptions {
            workers: a.workers,
            model_id: a.model_id.clone(),
        },
    )?;
    println!("listening on {}", handle.url());
    std::io::stdout()
        .flush()
        .map_err(|e| Error::io("<stdout>", e))?;
    handle.wait();
    Ok(())
}
