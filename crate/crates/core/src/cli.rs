//! The `ragtrace` command line.
//!
//! Exit codes: 0 success, 1 input format error, 2 semantic or coverage
//! error, 64 usage error. Settings resolve as flags > `--config` file >
//! defaults. The config file is flat `key = value` lines; `#` starts a
//! comment and keys are the long flag names with `_` or `-`.

use std::collections::{BTreeMap, HashMap};
use std::ffi::OsString;
use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::embedding::{parse_embeddings, validate_coverage, EmbeddingTable};
use crate::external::ExternalOptions;
use crate::fixtures::{self, FixtureSpec, HypothesisFixtureSpec, Regime};
use crate::hypotheses::{run_hypotheses, HypothesisConfig, Unit};
use crate::internal::DEFAULT_ENTROPY_FLOOR;
use crate::kernels::KernelSpec;
use crate::metrics::{self, evaluate, EvalResult};
use crate::scoring::{
    parse_score_reports, score_corpus, token_hallucination, ScoreReport, ScoringConfig, DEFAULT_LAMBDA,
};
use crate::trace::{parse_traces, Condition, ResponseTrace, DEFAULT_TOP_K};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FORMAT: i32 = 1;
pub const EXIT_SEMANTIC: i32 = 2;
pub const EXIT_USAGE: i32 = 64;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
    /// Machine-readable summary to print on stdout even though the command
    /// failed.
    pub summary: Option<Value>,
}

impl CliError {
    fn new(code: i32, message: impl Into<String>) -> Self {
        CliError {
            code,
            message: message.into(),
            summary: None,
        }
    }

    fn format(message: impl Into<String>) -> Self {
        Self::new(EXIT_FORMAT, message)
    }

    fn semantic(message: impl Into<String>) -> Self {
        Self::new(EXIT_SEMANTIC, message)
    }

    fn usage(message: impl Into<String>) -> Self {
        Self::new(EXIT_USAGE, message)
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(
    name = "ragtrace",
    version,
    about = "Token-level hallucination scoring for RAG traces"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Parse traces and embeddings and check embedding coverage.
    Validate(CommonArgs),
    /// Write one score report per with_docs response (JSONL).
    Score(CommonArgs),
    /// Detection metrics of response scores against labels (JSON).
    Evaluate {
        #[command(flatten)]
        common: CommonArgs,
        /// Precomputed score reports; scored from --traces when absent.
        #[arg(long)]
        scores: Option<PathBuf>,
    },
    /// One-tailed t-tests for the four directional hypotheses (JSON).
    Hypotheses {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_enum, default_value = "token")]
        unit: UnitArg,
        /// Pooled-variance t-test instead of Welch.
        #[arg(long)]
        pooled: bool,
    },
    /// Metric sweeps over lambda, kernel, or noise tag (CSV).
    Ablate {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_enum)]
        sweep: Sweep,
    },
    /// Write a synthetic corpus: traces.jsonl, embeddings.lume, labels.jsonl.
    Fixture(FixtureArgs),
}

#[derive(Args, Debug, Default, Clone)]
struct CommonArgs {
    /// key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Trace JSONL file; repeatable.
    #[arg(long)]
    traces: Vec<PathBuf>,
    /// LUME embedding table.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long, value_enum)]
    kernel: Option<KernelArg>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    entropy_floor: Option<f64>,
    /// Use raw truncated probabilities as MMD weights.
    #[arg(long)]
    no_renormalize: bool,
    /// Z-score external and internal scores over the corpus before combining.
    #[arg(long)]
    normalize_scores: bool,
    /// Use MMD instead of squared MMD as the external score.
    #[arg(long)]
    sqrt_mmd: bool,
    /// Output path; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// `trace` (labels stored in the traces) or a labels JSONL path.
    #[arg(long)]
    labels: Option<String>,
}

#[derive(Args, Debug)]
struct FixtureArgs {
    #[arg(long, value_enum, default_value = "detection")]
    kind: FixtureKind,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Responses (detection) or prompts per task (hypotheses).
    #[arg(long, default_value_t = 200)]
    responses: usize,
    #[arg(long, default_value_t = 16)]
    tokens: usize,
    #[arg(long, value_enum, default_value = "mixed")]
    regime: RegimeArg,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum KernelArg {
    Cosine,
    Rbf,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum UnitArg {
    Token,
    Response,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum Sweep {
    Lambda,
    Kernel,
    NoiseTag,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum FixtureKind {
    Detection,
    Hypotheses,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum RegimeArg {
    Grounded,
    Hallucinated,
    Mixed,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LabelSource {
    Trace,
    File(PathBuf),
}

/// Fully resolved settings.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub traces: Vec<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub lambda: f64,
    pub kernel: KernelSpec,
    pub top_k: usize,
    pub entropy_floor: f64,
    pub renormalize: bool,
    pub normalize_scores: bool,
    pub sqrt_mmd: bool,
    pub out: Option<PathBuf>,
    pub labels: LabelSource,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            traces: Vec::new(),
            embeddings: None,
            lambda: DEFAULT_LAMBDA,
            kernel: KernelSpec::Cosine,
            top_k: DEFAULT_TOP_K,
            entropy_floor: DEFAULT_ENTROPY_FLOOR,
            renormalize: true,
            normalize_scores: false,
            sqrt_mmd: false,
            out: None,
            labels: LabelSource::Trace,
        }
    }
}

impl RunConfig {
    pub fn scoring(&self) -> ScoringConfig {
        ScoringConfig {
            external: self.external(),
            lambda: self.lambda,
            entropy_floor: self.entropy_floor,
            normalize_scores: self.normalize_scores,
        }
    }

    fn external(&self) -> ExternalOptions {
        ExternalOptions {
            kernel: self.kernel,
            renormalize: self.renormalize,
            sqrt: self.sqrt_mmd,
        }
    }
}

fn parse_config_file(path: &Path) -> CliResult<HashMap<String, String>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    let mut map = HashMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::usage(format!("{}:{}: expected key=value", path.display(), i + 1)))?;
        map.insert(k.trim().replace('-', "_"), v.trim().to_string());
    }
    Ok(map)
}

fn parse_value<T: std::str::FromStr>(key: &str, v: &str) -> CliResult<T> {
    v.parse()
        .map_err(|_| CliError::usage(format!("config key `{key}`: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> CliResult<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(CliError::usage(format!(
            "config key `{key}`: expected a boolean, got {v:?}"
        ))),
    }
}

fn resolve(args: &CommonArgs) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::default();
    let mut kernel_kind = KernelArg::Cosine;
    let mut sigma: Option<f64> = None;

    if let Some(path) = &args.config {
        for (key, v) in parse_config_file(path)? {
            match key.as_str() {
                "traces" => cfg.traces = v.split(',').map(|s| PathBuf::from(s.trim())).collect(),
                "embeddings" => cfg.embeddings = Some(PathBuf::from(v)),
                "lambda" => cfg.lambda = parse_value(&key, &v)?,
                "kernel" => {
                    kernel_kind = KernelArg::from_str(&v, true)
                        .map_err(|_| CliError::usage(format!("config key `kernel`: unknown kernel {v:?}")))?
                }
                "sigma" => sigma = Some(parse_value(&key, &v)?),
                "top_k" => cfg.top_k = parse_value(&key, &v)?,
                "entropy_floor" => cfg.entropy_floor = parse_value(&key, &v)?,
                "renormalize" => cfg.renormalize = parse_bool(&key, &v)?,
                "normalize_scores" => cfg.normalize_scores = parse_bool(&key, &v)?,
                "sqrt_mmd" => cfg.sqrt_mmd = parse_bool(&key, &v)?,
                "out" => cfg.out = Some(PathBuf::from(v)),
                "labels" => cfg.labels = label_source(&v),
                _ => return Err(CliError::usage(format!("unknown config key `{key}`"))),
            }
        }
    }

    if !args.traces.is_empty() {
        cfg.traces = args.traces.clone();
    }
    if let Some(p) = &args.embeddings {
        cfg.embeddings = Some(p.clone());
    }
    if let Some(l) = args.lambda {
        cfg.lambda = l;
    }
    if let Some(k) = args.kernel {
        kernel_kind = k;
    }
    if args.sigma.is_some() {
        sigma = args.sigma;
    }
    if let Some(k) = args.top_k {
        cfg.top_k = k;
    }
    if let Some(f) = args.entropy_floor {
        cfg.entropy_floor = f;
    }
    if args.no_renormalize {
        cfg.renormalize = false;
    }
    if args.normalize_scores {
        cfg.normalize_scores = true;
    }
    if args.sqrt_mmd {
        cfg.sqrt_mmd = true;
    }
    if let Some(o) = &args.out {
        cfg.out = Some(o.clone());
    }
    if let Some(l) = &args.labels {
        cfg.labels = label_source(l);
    }

    cfg.kernel = match (kernel_kind, sigma) {
        (KernelArg::Cosine, None) => KernelSpec::Cosine,
        (KernelArg::Cosine, Some(_)) => return Err(CliError::usage("--sigma only applies to the rbf kernel")),
        (KernelArg::Rbf, Some(s)) => KernelSpec::rbf(s).map_err(|e| CliError::usage(e.to_string()))?,
        (KernelArg::Rbf, None) => return Err(CliError::usage("the rbf kernel needs --sigma")),
    };
    if !(0.0..=1.0).contains(&cfg.lambda) {
        return Err(CliError::usage(format!("--lambda {} is outside [0, 1]", cfg.lambda)));
    }
    if cfg.top_k < 1 {
        return Err(CliError::usage("--top-k must be at least 1"));
    }
    if !(cfg.entropy_floor.is_finite() && cfg.entropy_floor > 0.0) {
        return Err(CliError::usage("--entropy-floor must be positive"));
    }
    Ok(cfg)
}

fn label_source(v: &str) -> LabelSource {
    if v == "trace" {
        LabelSource::Trace
    } else {
        LabelSource::File(PathBuf::from(v))
    }
}

struct TraceFile {
    path: PathBuf,
    digest: String,
    responses: Vec<ResponseTrace>,
}

fn load_traces(cfg: &RunConfig) -> CliResult<Vec<TraceFile>> {
    if cfg.traces.is_empty() {
        return Err(CliError::usage("no --traces given"));
    }
    cfg.traces
        .iter()
        .map(|path| {
            let bytes = fs::read(path).map_err(|e| CliError::format(format!("{}: {e}", path.display())))?;
            let responses = parse_traces(&bytes[..], cfg.top_k)
                .map_err(|e| CliError::format(format!("{}: {e}", path.display())))?;
            Ok(TraceFile {
                path: path.clone(),
                digest: hex::encode(Sha256::digest(&bytes)),
                responses,
            })
        })
        .collect()
}

fn load_table(cfg: &RunConfig) -> CliResult<EmbeddingTable> {
    let path = cfg
        .embeddings
        .as_ref()
        .ok_or_else(|| CliError::usage("no --embeddings given"))?;
    let file = fs::File::open(path).map_err(|e| CliError::format(format!("{}: {e}", path.display())))?;
    parse_embeddings(BufReader::new(file)).map_err(|e| CliError::format(format!("{}: {e}", path.display())))
}

fn check_coverage(responses: &[ResponseTrace], table: &EmbeddingTable) -> CliResult<()> {
    let missing = validate_coverage(responses, table);
    if missing.is_empty() {
        return Ok(());
    }
    let mut err = CliError::semantic(format!(
        "{} token ids have no embedding: {:?}",
        missing.len(),
        preview(&missing)
    ));
    err.summary = Some(json!({ "status": "coverage_error", "missing_ids": missing }));
    Err(err)
}

fn preview(ids: &[u32]) -> Vec<u32> {
    ids.iter().take(20).copied().collect()
}

/// Writes to `out` through a temporary file and rename, or to stdout.
fn emit(out: Option<&Path>, bytes: &[u8], stdout: &mut dyn Write) -> CliResult<()> {
    match out {
        None => stdout
            .write_all(bytes)
            .map_err(|e| CliError::format(format!("stdout: {e}"))),
        Some(path) => write_atomic(path, bytes),
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let fail = |e: std::io::Error| CliError::format(format!("{}: {e}", path.display()));
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(fail)?;
    tmp.write_all(bytes).map_err(fail)?;
    tmp.as_file().sync_all().map_err(fail)?;
    tmp.persist(path).map_err(|e| fail(e.error))?;
    Ok(())
}

/// Runs the CLI on `args` (including the program name) and returns the
/// process exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let rendered = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = stdout.write_all(rendered.as_bytes());
                    EXIT_OK
                }
                _ => {
                    let _ = stderr.write_all(rendered.as_bytes());
                    EXIT_USAGE
                }
            };
        }
    };

    let result = match cli.command {
        Command::Validate(args) => resolve(&args).and_then(|cfg| cmd_validate(&cfg, stdout, stderr)),
        Command::Score(args) => resolve(&args).and_then(|cfg| cmd_score(&cfg, stdout, stderr)),
        Command::Evaluate { common, scores } => {
            resolve(&common).and_then(|cfg| cmd_evaluate(&cfg, scores.as_deref(), stdout, stderr))
        }
        Command::Hypotheses { common, unit, pooled } => resolve(&common).and_then(|cfg| {
            let unit = match unit {
                UnitArg::Token => Unit::Token,
                UnitArg::Response => Unit::Response,
            };
            cmd_hypotheses(&cfg, unit, pooled, stdout)
        }),
        Command::Ablate { common, sweep } => resolve(&common).and_then(|cfg| cmd_ablate(&cfg, sweep, stdout, stderr)),
        Command::Fixture(args) => cmd_fixture(&args),
    };

    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(stderr, "error: {}", e.message);
            if let Some(summary) = e.summary {
                let _ = writeln!(stdout, "{summary}");
            }
            e.code
        }
    }
}

fn cmd_validate(cfg: &RunConfig, stdout: &mut dyn Write, stderr: &mut dyn Write) -> CliResult<()> {
    let files = match load_traces(cfg) {
        Ok(f) => f,
        Err(mut e) => {
            if e.code == EXIT_FORMAT {
                e.summary = Some(json!({ "status": "format_error", "error": e.message }));
            }
            return Err(e);
        }
    };
    let responses: Vec<&ResponseTrace> = files.iter().flat_map(|f| &f.responses).collect();
    let tokens: usize = responses.iter().map(|r| r.tokens.len()).sum();
    let without_rand = responses
        .iter()
        .filter(|r| r.condition == Condition::WithDocs)
        .flat_map(|r| &r.tokens)
        .filter(|t| t.dist_rand.is_none())
        .count();
    let mut summary = json!({
        "status": "ok",
        "files": files.iter().map(|f| json!({
            "path": f.path.display().to_string(),
            "sha256": f.digest,
            "responses": f.responses.len(),
        })).collect::<Vec<_>>(),
        "responses": responses.len(),
        "tokens": tokens,
        "with_docs_tokens_without_dist_rand": without_rand,
    });

    if cfg.embeddings.is_some() {
        let table = match load_table(cfg) {
            Ok(t) => t,
            Err(mut e) => {
                summary["status"] = json!("format_error");
                summary["error"] = json!(e.message);
                e.summary = Some(summary);
                return Err(e);
            }
        };
        let all: Vec<ResponseTrace> = responses.iter().map(|&r| r.clone()).collect();
        let missing = validate_coverage(&all, &table);
        summary["embeddings"] = json!(table.len());
        summary["dim"] = json!(table.dim());
        summary["missing_ids"] = json!(missing);
        if !missing.is_empty() {
            summary["status"] = json!("coverage_error");
            let mut e = CliError::semantic(format!(
                "{} token ids have no embedding: {:?}",
                missing.len(),
                preview(&missing)
            ));
            e.summary = Some(summary);
            return Err(e);
        }
    }
    let _ = writeln!(stderr, "ok: {} responses, {} tokens", responses.len(), tokens);
    writeln!(stdout, "{summary}").map_err(|e| CliError::format(e.to_string()))
}

/// The with_docs responses of all files, in input order.
fn scorable(files: &[TraceFile], stderr: &mut dyn Write) -> Vec<ResponseTrace> {
    let all: Vec<&ResponseTrace> = files.iter().flat_map(|f| &f.responses).collect();
    let kept: Vec<ResponseTrace> = all
        .iter()
        .filter(|r| r.condition == Condition::WithDocs)
        .map(|&r| r.clone())
        .collect();
    if kept.len() < all.len() {
        let _ = writeln!(stderr, "note: skipping {} no_docs responses", all.len() - kept.len());
    }
    kept
}

fn score_all(cfg: &RunConfig, responses: &[ResponseTrace], table: &EmbeddingTable) -> CliResult<Vec<ScoreReport>> {
    check_coverage(responses, table)?;
    score_corpus(responses, table, &cfg.scoring()).map_err(|e| CliError::semantic(e.to_string()))
}

fn cmd_score(cfg: &RunConfig, stdout: &mut dyn Write, stderr: &mut dyn Write) -> CliResult<()> {
    let files = load_traces(cfg)?;
    let table = load_table(cfg)?;
    let responses = scorable(&files, stderr);
    let reports = score_all(cfg, &responses, &table)?;
    let mut buf = Vec::new();
    for r in &reports {
        buf.extend_from_slice(r.to_json_line().as_bytes());
        buf.push(b'\n');
    }
    emit(cfg.out.as_deref(), &buf, stdout)
}

fn read_label_file(path: &Path) -> CliResult<HashMap<String, bool>> {
    #[derive(serde::Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Row {
        response_id: String,
        label: bool,
    }
    let text = fs::read_to_string(path).map_err(|e| CliError::format(format!("{}: {e}", path.display())))?;
    let mut out = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: Row = serde_json::from_str(line)
            .map_err(|e| CliError::format(format!("{}: line {}: {e}", path.display(), i + 1)))?;
        if out.insert(row.response_id.clone(), row.label).is_some() {
            return Err(CliError::format(format!(
                "{}: line {}: duplicate response_id {:?}",
                path.display(),
                i + 1,
                row.response_id
            )));
        }
    }
    Ok(out)
}

fn label_map(cfg: &RunConfig, responses: &[ResponseTrace]) -> CliResult<HashMap<String, bool>> {
    match &cfg.labels {
        LabelSource::File(p) => read_label_file(p),
        LabelSource::Trace => Ok(responses
            .iter()
            .filter_map(|r| r.label.map(|l| (r.response_id.clone(), l)))
            .collect()),
    }
}

/// Response scores paired with labels; unlabeled responses are dropped.
fn join_labels(
    reports: &[ScoreReport],
    labels: &HashMap<String, bool>,
    score: impl Fn(&ScoreReport) -> f64,
    stderr: &mut dyn Write,
) -> (Vec<f64>, Vec<bool>) {
    let mut scores = Vec::with_capacity(reports.len());
    let mut ys = Vec::with_capacity(reports.len());
    let mut unlabeled = 0;
    for r in reports {
        match labels.get(&r.response_id) {
            Some(&y) => {
                scores.push(score(r));
                ys.push(y);
            }
            None => unlabeled += 1,
        }
    }
    if unlabeled > 0 {
        let _ = writeln!(stderr, "note: {unlabeled} responses have no label and are excluded");
    }
    (scores, ys)
}

fn opt(x: Result<f64, metrics::MetricError>, name: &str, errors: &mut Vec<String>) -> Value {
    match x {
        Ok(v) => json!(v),
        Err(e) => {
            errors.push(format!("{name}: {e}"));
            Value::Null
        }
    }
}

/// Metrics as JSON, with `null` for any that are undefined on this data.
fn metrics_json(scores: &[f64], labels: &[bool], errors: &mut Vec<String>) -> serde_json::Map<String, Value> {
    let mut m = serde_json::Map::new();
    if let Ok(EvalResult {
        auroc,
        auprc,
        pcc,
        prec_opt,
        recall_opt,
        f1_opt,
        threshold_opt,
        n_pos,
        n_neg,
    }) = evaluate(scores, labels)
    {
        for (k, v) in [
            ("auroc", json!(auroc)),
            ("auprc", json!(auprc)),
            ("pcc", json!(pcc)),
            ("prec_opt", json!(prec_opt)),
            ("recall_opt", json!(recall_opt)),
            ("f1_opt", json!(f1_opt)),
            ("threshold_opt", json!(threshold_opt)),
            ("n_pos", json!(n_pos)),
            ("n_neg", json!(n_neg)),
        ] {
            m.insert(k.into(), v);
        }
        return m;
    }
    m.insert("auroc".into(), opt(metrics::auroc(scores, labels), "auroc", errors));
    m.insert("auprc".into(), opt(metrics::auprc(scores, labels), "auprc", errors));
    m.insert("pcc".into(), opt(metrics::pearson(scores, labels), "pcc", errors));
    match metrics::optimal_f1(scores, labels) {
        Ok(o) => {
            m.insert("prec_opt".into(), json!(o.precision));
            m.insert("recall_opt".into(), json!(o.recall));
            m.insert("f1_opt".into(), json!(o.f1));
            m.insert("threshold_opt".into(), json!(o.threshold));
        }
        Err(e) => {
            errors.push(format!("f1_opt: {e}"));
            for k in ["prec_opt", "recall_opt", "f1_opt", "threshold_opt"] {
                m.insert(k.into(), Value::Null);
            }
        }
    }
    let n_pos = labels.iter().filter(|&&y| y).count();
    m.insert("n_pos".into(), json!(n_pos));
    m.insert("n_neg".into(), json!(labels.len() - n_pos));
    m
}

fn file_digest(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(|e| CliError::format(format!("{}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn cmd_evaluate(
    cfg: &RunConfig,
    scores_path: Option<&Path>,
    stdout: &mut dyn Write,
    stderr: &mut dyn Write,
) -> CliResult<()> {
    let files = if cfg.traces.is_empty() && scores_path.is_some() {
        Vec::new()
    } else {
        load_traces(cfg)?
    };
    let responses = scorable(&files, stderr);
    let reports = match scores_path {
        Some(p) => {
            let f = fs::File::open(p).map_err(|e| CliError::format(format!("{}: {e}", p.display())))?;
            parse_score_reports(BufReader::new(f)).map_err(|e| CliError::format(format!("{}: {e}", p.display())))?
        }
        None => score_all(cfg, &responses, &load_table(cfg)?)?,
    };
    if cfg.labels == LabelSource::Trace && files.is_empty() {
        return Err(CliError::usage("--labels trace needs --traces"));
    }
    let labels = label_map(cfg, &responses)?;
    let (scores, ys) = join_labels(&reports, &labels, |r| r.response_score, stderr);
    if ys.is_empty() {
        return Err(CliError::semantic("no labeled responses to evaluate"));
    }

    let mut errors = Vec::new();
    let mut report = metrics_json(&scores, &ys, &mut errors);

    let mut baseline_errors = Vec::new();
    let (ppl, _) = join_labels(
        &reports,
        &labels,
        |r| r.baseline_perplexity.min(f64::MAX),
        &mut std::io::sink(),
    );
    let (ent, _) = join_labels(&reports, &labels, |r| r.baseline_mean_entropy, &mut std::io::sink());
    let baseline = |s: &[f64], errs: &mut Vec<String>, name: &str| {
        json!({
            "auroc": opt(metrics::auroc(s, &ys), &format!("{name}.auroc"), errs),
            "auprc": opt(metrics::auprc(s, &ys), &format!("{name}.auprc"), errs),
        })
    };
    report.insert(
        "baselines".into(),
        json!({
            "perplexity": baseline(&ppl, &mut baseline_errors, "perplexity"),
            "ln_entropy_proxy": baseline(&ent, &mut baseline_errors, "ln_entropy_proxy"),
        }),
    );

    let mut digests = BTreeMap::new();
    for f in &files {
        digests.insert(f.path.display().to_string(), f.digest.clone());
    }
    report.insert("lambda".into(), json!(cfg.lambda));
    report.insert("kernel".into(), json!(cfg.kernel.to_string()));
    report.insert("renormalize".into(), json!(cfg.renormalize));
    report.insert("normalize_scores".into(), json!(cfg.normalize_scores));
    report.insert("trace_digests".into(), json!(digests));
    if let Some(p) = scores_path {
        report.insert("scores_digest".into(), json!(file_digest(p)?));
    }
    report.insert("errors".into(), json!(errors));

    let mut text = serde_json::to_string_pretty(&Value::Object(report)).expect("serializable");
    text.push('\n');
    emit(cfg.out.as_deref(), text.as_bytes(), stdout)?;
    if errors.is_empty() {
        Ok(())
    } else {
        Err(CliError::semantic(format!(
            "some metrics are undefined: {}",
            errors.join("; ")
        )))
    }
}

fn cmd_hypotheses(cfg: &RunConfig, unit: Unit, pooled: bool, stdout: &mut dyn Write) -> CliResult<()> {
    let files = load_traces(cfg)?;
    let table = load_table(cfg)?;
    let corpus: Vec<ResponseTrace> = files.into_iter().flat_map(|f| f.responses).collect();
    check_coverage(&corpus, &table)?;
    let hcfg = HypothesisConfig {
        external: cfg.external(),
        entropy_floor: cfg.entropy_floor,
        unit,
        pooled,
    };
    let outcomes = run_hypotheses(&corpus, &table, &hcfg).map_err(|e| CliError::semantic(e.to_string()))?;
    let arr: Vec<Value> = outcomes.iter().map(|o| o.to_json()).collect();
    let mut text = serde_json::to_string_pretty(&arr).expect("serializable");
    text.push('\n');
    emit(cfg.out.as_deref(), text.as_bytes(), stdout)
}

fn csv_cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn csv_row(sweep: &str, setting: &str, scores: &[f64], labels: &[bool]) -> String {
    let auroc = metrics::auroc(scores, labels).ok();
    let auprc = metrics::auprc(scores, labels).ok();
    let pcc = metrics::pearson(scores, labels).ok();
    let f1 = metrics::optimal_f1(scores, labels).ok().map(|o| o.f1);
    format!(
        "{sweep},{setting},{},{},{},{},{}\n",
        scores.len(),
        csv_cell(auroc),
        csv_cell(auprc),
        csv_cell(pcc),
        csv_cell(f1)
    )
}

fn cmd_ablate(cfg: &RunConfig, sweep: Sweep, stdout: &mut dyn Write, stderr: &mut dyn Write) -> CliResult<()> {
    let files = load_traces(cfg)?;
    let table = load_table(cfg)?;
    let responses = scorable(&files, stderr);
    let labels = label_map(cfg, &responses)?;
    let mut out = String::from("sweep,setting,n_responses,auroc,auprc,pcc,f1_opt\n");

    match sweep {
        Sweep::Lambda => {
            let reports = score_all(cfg, &responses, &table)?;
            for step in 1..=9 {
                let lambda = step as f64 / 10.0;
                let rescored = |r: &ScoreReport| {
                    let h: Vec<f64> = r
                        .per_token
                        .iter()
                        .map(|t| token_hallucination(t.external, t.internal, lambda).expect("lambda in range"))
                        .collect();
                    h.iter().sum::<f64>() / h.len() as f64
                };
                let (s, y) = join_labels(&reports, &labels, rescored, &mut std::io::sink());
                out.push_str(&csv_row("lambda", &lambda.to_string(), &s, &y));
            }
        }
        Sweep::Kernel => {
            for kernel in KernelSpec::ablation_set() {
                let kcfg = RunConfig { kernel, ..cfg.clone() };
                let reports = score_all(&kcfg, &responses, &table)?;
                let (s, y) = join_labels(&reports, &labels, |r| r.response_score, &mut std::io::sink());
                out.push_str(&csv_row("kernel", &kernel.to_string(), &s, &y));
            }
        }
        Sweep::NoiseTag => {
            let mut groups: Vec<(String, Vec<ResponseTrace>)> = Vec::new();
            for f in &files {
                for r in f.responses.iter().filter(|r| r.condition == Condition::WithDocs) {
                    let tag = r
                        .noise_tag()
                        .map(str::to_string)
                        .unwrap_or_else(|| f.path.display().to_string());
                    match groups.iter_mut().find(|g| g.0 == tag) {
                        Some(g) => g.1.push(r.clone()),
                        None => groups.push((tag, vec![r.clone()])),
                    }
                }
            }
            for (tag, group) in groups {
                let reports = score_all(cfg, &group, &table)?;
                let group_labels = label_map(cfg, &group)?;
                let (s, y) = join_labels(&reports, &group_labels, |r| r.response_score, &mut std::io::sink());
                out.push_str(&csv_row("noise-tag", &tag.replace(',', ";"), &s, &y));
            }
        }
    }
    emit(cfg.out.as_deref(), out.as_bytes(), stdout)
}

fn cmd_fixture(args: &FixtureArgs) -> CliResult<()> {
    let fx = match args.kind {
        FixtureKind::Detection => fixtures::generate_fixture(&FixtureSpec {
            seed: args.seed,
            n_responses: args.responses,
            tokens_per_response: args.tokens,
            regime: match args.regime {
                RegimeArg::Grounded => Regime::Grounded,
                RegimeArg::Hallucinated => Regime::Hallucinated,
                RegimeArg::Mixed => Regime::Mixed,
            },
            ..Default::default()
        }),
        FixtureKind::Hypotheses => fixtures::generate_hypothesis_fixture(&HypothesisFixtureSpec {
            seed: args.seed,
            prompts_per_task: args.responses,
            tokens_per_response: args.tokens,
            ..Default::default()
        }),
    };
    if args.tokens == 0 {
        return Err(CliError::usage("--tokens must be at least 1"));
    }
    fs::create_dir_all(&args.out_dir).map_err(|e| CliError::format(format!("{}: {e}", args.out_dir.display())))?;
    write_atomic(&args.out_dir.join("traces.jsonl"), &fx.traces)?;
    write_atomic(&args.out_dir.join("embeddings.lume"), &fx.embeddings)?;
    let mut labels = String::new();
    for (id, y) in &fx.labels {
        labels.push_str(&json!({ "response_id": id, "label": y }).to_string());
        labels.push('\n');
    }
    write_atomic(&args.out_dir.join("labels.jsonl"), labels.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn common() -> CommonArgs {
        CommonArgs::default()
    }

    #[test]
    fn defaults() {
        let cfg = resolve(&common()).unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.lambda, 0.5);
        assert_eq!(cfg.top_k, 100);
        assert_eq!(cfg.entropy_floor, 1e-6);
        assert!(cfg.renormalize && !cfg.normalize_scores);
    }

    #[test]
    fn flags_override_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        fs::write(
            &path,
            "# comment\nlambda = 0.3\nkernel=rbf\nsigma = 2\ntop-k=50\nrenormalize=false\n",
        )
        .unwrap();
        let mut args = common();
        args.config = Some(path.clone());
        let cfg = resolve(&args).unwrap();
        assert_eq!(cfg.lambda, 0.3);
        assert_eq!(cfg.kernel, KernelSpec::Rbf { sigma: 2.0 });
        assert_eq!(cfg.top_k, 50);
        assert!(!cfg.renormalize);

        args.lambda = Some(0.9);
        args.kernel = Some(KernelArg::Cosine);
        args.sigma = None;
        // sigma from the file still applies and conflicts with cosine.
        assert_eq!(resolve(&args).unwrap_err().code, EXIT_USAGE);
        fs::write(&path, "lambda = 0.3\n").unwrap();
        assert_eq!(resolve(&args).unwrap().lambda, 0.9);
    }

    #[test]
    fn usage_errors() {
        let mut args = common();
        args.kernel = Some(KernelArg::Rbf);
        assert_eq!(resolve(&args).unwrap_err().code, EXIT_USAGE);
        let mut args = common();
        args.lambda = Some(1.5);
        assert_eq!(resolve(&args).unwrap_err().code, EXIT_USAGE);
        let mut args = common();
        args.top_k = Some(0);
        assert_eq!(resolve(&args).unwrap_err().code, EXIT_USAGE);

        let mut out = Vec::new();
        let mut err = Vec::new();
        assert_eq!(
            run(["ragtrace", "ablate", "--sweep", "nope"], &mut out, &mut err),
            EXIT_USAGE
        );
        assert_eq!(run(["ragtrace", "frobnicate"], &mut out, &mut err), EXIT_USAGE);
        assert_eq!(run(["ragtrace", "score"], &mut out, &mut err), EXIT_USAGE);
        assert_eq!(run(["ragtrace", "--help"], &mut out, &mut err), EXIT_OK);
    }
}
