//! Command line surface: score, calibrate, evaluate, ensemble, longform,
//! transform, report.
//!
//! Every subcommand reads line-delimited datasets or score files, writes its
//! report to the path given by `--out`, and stays deterministic for a fixed
//! (config, seed, replay store) triple. Scoring fans out over a worker pool
//! but results are merged back in input order, so parallelism never changes
//! the output bytes.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::backend::{
    collect_trace, Backend, HttpBackend, HttpBackendConfig, MockBackend, PromptAssets,
    ReplayBackend,
};
use crate::ensemble::{
    ensemble_study, fit_combiner, CombinerKind, EnsembleStudyRow, LabeledScores, ModelFile,
    PreprocessorKind,
};
use crate::error::{Error, Result};
use crate::longform::{
    evaluate_claims, label_claims, score_longform, ClaimStrategy, FixtureLabeler, LongformConfig,
    TeacherForcedLns,
};
use crate::metrics::{
    are, auroc, prr, rejection_curve_points, shift_study, threshold_at_recall,
    threshold_at_recall_seeded, RecallTargets, ShiftMethodInput, ShiftStudyRow,
};
use crate::scorers::{Method, ScoreEngine, ScorerConfig};
use crate::trace::{load_dataset, save_dataset, LabeledDataset, SamplingParams};
use crate::transforms::{
    adversarial_search, apply_adversarial, apply_context, apply_typo, select_context_history,
    AdversarialSearchConfig, TransformKind, ADV_PREFIX_CONFIDENT,
};

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub backend: BackendSection,
    pub scoring: ScoringSection,
    pub sampling: SamplingSection,
    pub prompts: PromptsSection,
    pub run: RunSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendSection {
    /// `mock` or `http`.
    pub kind: String,
    /// Seed for the mock backend.
    pub seed: u64,
    /// Record every backend call through to this store.
    pub record: Option<PathBuf>,
    /// Serve every backend call from this store; never touches the network.
    pub replay: Option<PathBuf>,
    pub http: Option<HttpBackendConfig>,
}

impl Default for BackendSection {
    fn default() -> Self {
        BackendSection {
            kind: "mock".into(),
            seed: 0,
            record: None,
            replay: None,
            http: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ScoringSection {
    /// Default method roster when `--methods` is not given.
    pub methods: Option<Vec<String>>,
    #[serde(flatten)]
    pub scorer: ScorerConfig,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingSection {
    pub temperature: f64,
    pub num_samples: usize,
}

impl Default for SamplingSection {
    fn default() -> Self {
        SamplingSection {
            temperature: 1.0,
            num_samples: 5,
        }
    }
}

impl SamplingSection {
    fn params(&self) -> SamplingParams {
        SamplingParams {
            temperature: self.temperature,
            num_samples: self.num_samples,
        }
    }
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct PromptsSection {
    /// Directory of prompt template overrides; compiled-in defaults otherwise.
    pub dir: Option<PathBuf>,
}

impl PromptsSection {
    fn assets(&self) -> Result<PromptAssets> {
        match &self.dir {
            Some(dir) => PromptAssets::from_dir(dir),
            None => Ok(PromptAssets::default()),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub threads: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection { threads: 1 }
    }
}

pub fn load_config(path: Option<&Path>) -> Result<CliConfig> {
    match path {
        None => Ok(CliConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
        }
    }
}

pub fn build_backend(cfg: &BackendSection) -> Result<Box<dyn Backend>> {
    if cfg.record.is_some() && cfg.replay.is_some() {
        return Err(Error::Config(
            "backend.record and backend.replay are mutually exclusive".into(),
        ));
    }
    if let Some(path) = &cfg.replay {
        return Ok(Box::new(ReplayBackend::replay(path)?));
    }
    let inner: Box<dyn Backend> = match cfg.kind.as_str() {
        "mock" => Box::new(MockBackend::new(cfg.seed)),
        "http" => {
            let http = cfg
                .http
                .clone()
                .ok_or_else(|| Error::Config("backend.kind = \"http\" needs [backend.http]".into()))?;
            Box::new(HttpBackend::new(http)?)
        }
        other => return Err(Error::Config(format!("unknown backend kind {other:?}"))),
    };
    match &cfg.record {
        Some(path) => Ok(Box::new(ReplayBackend::record(inner, path)?)),
        None => Ok(inner),
    }
}

/// One line of a score file: per-method uncertainty values for one trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub id: String,
    pub label: u8,
    pub scores: BTreeMap<String, f64>,
}

pub fn read_score_rows(path: &Path) -> Result<Vec<ScoreRow>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rows: Vec<ScoreRow> = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: ScoreRow = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: idx + 1,
            msg: e.to_string(),
        })?;
        if let Some(first) = rows.first() {
            if row.scores.len() != first.scores.len()
                || !row.scores.keys().eq(first.scores.keys())
            {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    line: idx + 1,
                    msg: format!("row `{}` has a different method roster", row.id),
                });
            }
        }
        rows.push(row);
    }
    Ok(rows)
}

fn write_score_rows(rows: &[ScoreRow], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    for row in rows {
        let line = serde_json::to_string(row)
            .map_err(|e| Error::InvalidInput(format!("serialize row `{}`: {e}", row.id)))?;
        buf.extend_from_slice(line.as_bytes());
        buf.push(b'\n');
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

fn score_methods(rows: &[ScoreRow]) -> Vec<String> {
    rows.first()
        .map(|r| r.scores.keys().cloned().collect())
        .unwrap_or_default()
}

fn method_pairs(rows: &[ScoreRow], method: &str) -> Result<Vec<(f64, u8)>> {
    rows.iter()
        .map(|r| {
            r.scores
                .get(method)
                .map(|&v| (v, r.label))
                .ok_or_else(|| {
                    Error::InvalidInput(format!("row `{}` is missing method `{method}`", r.id))
                })
        })
        .collect()
}

fn labeled_scores(rows: &[ScoreRow]) -> Result<LabeledScores> {
    if rows.is_empty() {
        return Err(Error::InvalidInput("empty score file".into()));
    }
    let methods = score_methods(rows);
    let scores = LabeledScores {
        methods: methods.clone(),
        rows: rows
            .iter()
            .map(|r| methods.iter().map(|m| r.scores[m]).collect())
            .collect(),
        labels: rows.iter().map(|r| r.label).collect(),
    };
    scores.validate()?;
    Ok(scores)
}

/// Index-ordered parallel map: work is pulled off a shared counter, results
/// land back in their input slots, so the output order never depends on the
/// worker count.
fn parallel_map<T, R, F>(items: &[T], threads: usize, f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> Result<R> + Sync,
{
    let workers = threads.max(1).min(items.len().max(1));
    if workers <= 1 {
        return items.iter().enumerate().map(|(i, item)| f(i, item)).collect();
    }
    let next = AtomicUsize::new(0);
    let slots = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|_| {
                scope.spawn(|| {
                    let mut local = Vec::new();
                    loop {
                        let i = next.fetch_add(1, Ordering::Relaxed);
                        if i >= items.len() {
                            break;
                        }
                        local.push((i, f(i, &items[i])));
                    }
                    local
                })
            })
            .collect();
        let mut slots: Vec<Option<Result<R>>> = (0..items.len()).map(|_| None).collect();
        for handle in handles {
            for (i, r) in handle.join().expect("worker panicked") {
                slots[i] = Some(r);
            }
        }
        slots
    });
    slots
        .into_iter()
        .map(|slot| slot.expect("every index visited"))
        .collect()
}

#[derive(Parser)]
#[command(
    name = "traceuq",
    version,
    about = "Uncertainty scoring and evaluation for LLM generation traces"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute uncertainty scores for every trace in a dataset.
    Score(ScoreArgs),
    /// Fit recall-targeted thresholds on a calibration score file.
    Calibrate(CalibrateArgs),
    /// Evaluate a score file with auroc, prr, or are.
    Evaluate(EvaluateArgs),
    /// Fit, apply, and compare multi-method combiners.
    Ensemble(EnsembleArgs),
    /// Decompose long-form answers into claims and score each claim.
    Longform(LongformArgs),
    /// Rewrite dataset prompts with a context, typo, or adversarial transform.
    Transform(TransformArgs),
    /// Threshold-transfer study: per-method ARE across calibration sets.
    Report(ReportArgs),
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated method ids; falls back to the config roster, then all.
    #[arg(long)]
    methods: Option<String>,
    /// Regenerate greedy and sampled responses through the backend and
    /// relabel each trace with the correctness judge.
    #[arg(long)]
    regenerate: bool,
    /// Save regenerated traces next to the scores.
    #[arg(long)]
    save_traces: Option<PathBuf>,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated recall targets; a uniform grid when omitted.
    #[arg(long)]
    recalls: Option<String>,
    /// Number of grid intervals between 0 and 1.
    #[arg(long, default_value_t = 1000)]
    grid: usize,
    /// Draw thresholds uniformly from the feasible interval instead of its
    /// midpoint.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// auroc, prr, or are.
    #[arg(long)]
    metric: String,
    #[arg(long)]
    scores: PathBuf,
    /// Calibration score file; required for are.
    #[arg(long)]
    cal: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    grid: usize,
    /// Also write the printed report to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EnsembleArgs {
    #[command(subcommand)]
    action: EnsembleAction,
}

#[derive(Subcommand)]
enum EnsembleAction {
    /// Compare every preprocessor and combiner against the best single method.
    Study {
        #[arg(long)]
        cal: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit one preprocessor plus combiner and save the model file.
    Fit {
        #[arg(long)]
        cal: PathBuf,
        #[arg(long, default_value = "raw")]
        preprocessor: String,
        #[arg(long)]
        combiner: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Apply a saved model to a score file, emitting combined scores.
    Apply {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct LongformArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// naive, qg, or qag.
    #[arg(long, default_value = "qg")]
    strategy: String,
    /// min, max, or mean.
    #[arg(long)]
    aggregate: Option<String>,
    /// Questions generated per claim.
    #[arg(long)]
    questions: Option<usize>,
    /// JSON map of claim text to label; enables claim-level evaluation.
    #[arg(long)]
    labels: Option<PathBuf>,
}

#[derive(Args)]
struct TransformArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// context_similar, context_dissimilar, typo, or adversarial.
    #[arg(long)]
    kind: String,
    /// Typo perturbations per prompt (1 or 2).
    #[arg(long, default_value_t = 1)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// History pairs prepended by the context transforms.
    #[arg(long, default_value_t = 3)]
    pairs: usize,
    /// Adversarial prefix; the stock confident prefix when omitted.
    #[arg(long)]
    text: Option<String>,
    /// Search for an adversarial prefix with the meta-prompt loop before
    /// applying it.
    #[arg(long)]
    search: bool,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    budget: Option<f64>,
    /// Probe methods for the search, comma-separated.
    #[arg(long)]
    probes: Option<String>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    test: PathBuf,
    /// Calibration score files; repeat the flag for several sets.
    #[arg(long = "cal", required = true)]
    cal: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Subsampling replicates per calibration set.
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    #[arg(long, default_value_t = 0.8)]
    subsample: f64,
    #[arg(long, default_value_t = 1000)]
    grid: usize,
    /// Directory for per-method rejection curve points.
    #[arg(long)]
    curves: Option<PathBuf>,
}

pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.exit_code() == 0 { 0 } else { 2 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("traceuq: {e}");
            1
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Score(args) => cmd_score(args),
        Command::Calibrate(args) => cmd_calibrate(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Ensemble(args) => match args.action {
            EnsembleAction::Study { cal, test, out } => cmd_ensemble_study(&cal, &test, &out),
            EnsembleAction::Fit {
                cal,
                preprocessor,
                combiner,
                out,
            } => cmd_ensemble_fit(&cal, &preprocessor, &combiner, &out),
            EnsembleAction::Apply { model, input, out } => cmd_ensemble_apply(&model, &input, &out),
        },
        Command::Longform(args) => cmd_longform(args),
        Command::Transform(args) => cmd_transform(args),
        Command::Report(args) => cmd_report(args),
    }
}

fn resolve_methods(flag: Option<&str>, cfg: &CliConfig) -> Result<Vec<Method>> {
    if let Some(list) = flag {
        return Method::parse_list(list);
    }
    if let Some(roster) = &cfg.scoring.methods {
        return Method::parse_list(&roster.join(","));
    }
    Ok(Method::ALL.to_vec())
}

fn cmd_score(args: ScoreArgs) -> Result<()> {
    let cfg = load_config(args.config.as_deref())?;
    let methods = resolve_methods(args.methods.as_deref(), &cfg)?;
    let dataset = load_dataset(&args.input)?;
    let backend = build_backend(&cfg.backend)?;
    let prompts = cfg.prompts.assets()?;
    let engine = ScoreEngine::with_config(backend.as_ref(), cfg.scoring.scorer.clone(), prompts);
    let sampling = cfg.sampling.params();
    let threads = args.threads.unwrap_or(cfg.run.threads);
    let want_hidden = methods
        .iter()
        .any(|m| matches!(m, Method::Inside | Method::Saplma));
    let want_attention = methods.contains(&Method::AttentionScore);

    let scored = parallel_map(&dataset.entries, threads, |_, (trace, label)| {
        let (trace, label) = if args.regenerate {
            let fresh = collect_trace(
                backend.as_ref(),
                &trace.query,
                &sampling,
                want_hidden,
                want_attention,
            )?;
            let correct = backend.judge_correctness(
                &fresh.query.prompt,
                &fresh.greedy.text,
                &fresh.query.ground_truths,
            )?;
            (fresh, u8::from(!correct))
        } else {
            (trace.clone(), *label)
        };
        let scores = engine.score_trace(&trace, &methods)?;
        let row = ScoreRow {
            id: trace.query.id.clone(),
            label,
            scores: scores.into_iter().map(|s| (s.method, s.value)).collect(),
        };
        Ok((row, trace, label))
    })?;

    let rows: Vec<ScoreRow> = scored.iter().map(|(row, _, _)| row.clone()).collect();
    write_score_rows(&rows, &args.out)?;
    if let Some(path) = &args.save_traces {
        let regenerated = LabeledDataset {
            entries: scored
                .into_iter()
                .map(|(_, trace, label)| (trace, label))
                .collect(),
        };
        save_dataset(&regenerated, path)?;
    }
    Ok(())
}

fn recall_targets(recalls: Option<&str>, grid: usize) -> Result<RecallTargets> {
    match recalls {
        Some(list) => {
            let mut values = list
                .split(',')
                .map(str::trim)
                .filter(|p| !p.is_empty())
                .map(|p| {
                    p.parse::<f64>()
                        .map_err(|e| Error::Config(format!("recall target {p:?}: {e}")))
                })
                .collect::<Result<Vec<f64>>>()?;
            values.sort_by(|a, b| a.partial_cmp(b).unwrap());
            RecallTargets::new(values)
        }
        None => {
            if grid == 0 {
                return Err(Error::Config("grid must be >= 1".into()));
            }
            RecallTargets::new((0..=grid).map(|i| i as f64 / grid as f64).collect())
        }
    }
}

#[derive(Serialize)]
struct ThresholdRow {
    recall: f64,
    threshold: f64,
}

fn cmd_calibrate(args: CalibrateArgs) -> Result<()> {
    let rows = read_score_rows(&args.scores)?;
    let targets = recall_targets(args.recalls.as_deref(), args.grid)?;
    let mut report: BTreeMap<String, Vec<ThresholdRow>> = BTreeMap::new();
    for method in score_methods(&rows) {
        let pairs = method_pairs(&rows, &method)?;
        let thresholds = targets
            .values()
            .iter()
            .map(|&r| {
                let t = match args.seed {
                    Some(seed) => threshold_at_recall_seeded(&pairs, r, seed)?,
                    None => threshold_at_recall(&pairs, r)?,
                };
                Ok(ThresholdRow {
                    recall: r,
                    threshold: t,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        report.insert(method, thresholds);
    }
    let body = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::InvalidInput(format!("serialize thresholds: {e}")))?;
    std::fs::write(&args.out, body + "\n").map_err(|e| Error::io(&args.out, e))
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let rows = read_score_rows(&args.scores)?;
    if rows.is_empty() {
        return Err(Error::InvalidInput("empty score file".into()));
    }
    let metric = args.metric.as_str();
    let cal_rows = match (metric, &args.cal) {
        ("are", None) => return Err(Error::Config("--metric are needs --cal".into())),
        ("are", Some(path)) => Some(read_score_rows(path)?),
        (_, _) => None,
    };
    let targets = recall_targets(None, args.grid)?;
    let mut report = String::new();
    for method in score_methods(&rows) {
        let pairs = method_pairs(&rows, &method)?;
        let value = match metric {
            "auroc" => auroc(&pairs)?,
            "prr" => prr(&pairs)?,
            "are" => {
                let cal_pairs = method_pairs(cal_rows.as_ref().unwrap(), &method)?;
                are(&cal_pairs, &pairs, &targets)?
            }
            other => return Err(Error::Config(format!("unknown metric {other:?}"))),
        };
        report.push_str(&format!("{method},{metric},{value:.4}\n"));
    }
    print!("{report}");
    if let Some(path) = &args.out {
        std::fs::write(path, &report).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn cmd_ensemble_study(cal: &Path, test: &Path, out: &Path) -> Result<()> {
    let cal = labeled_scores(&read_score_rows(cal)?)?;
    let test = labeled_scores(&read_score_rows(test)?)?;
    let rows = ensemble_study(&cal, &test)?;
    let mut body = String::from(EnsembleStudyRow::CSV_HEADER);
    body.push('\n');
    for row in &rows {
        body.push_str(&row.csv_line());
        body.push('\n');
    }
    std::fs::write(out, body).map_err(|e| Error::io(out, e))
}

fn cmd_ensemble_fit(cal: &Path, preprocessor: &str, combiner: &str, out: &Path) -> Result<()> {
    let cal = labeled_scores(&read_score_rows(cal)?)?;
    let pre_kind: PreprocessorKind = preprocessor.parse()?;
    let comb_kind: CombinerKind = combiner.parse()?;
    let pre = pre_kind.fit(&cal.rows, &cal.labels)?;
    let processed = pre.apply_all(&cal.rows)?;
    let model = fit_combiner(comb_kind, &processed, &cal.labels)?;
    ModelFile::new(cal.methods.clone(), pre, model).save(out)
}

fn cmd_ensemble_apply(model: &Path, input: &Path, out: &Path) -> Result<()> {
    let model = ModelFile::load(model)?;
    let rows = read_score_rows(input)?;
    let combined = rows
        .iter()
        .map(|row| {
            let v = model
                .methods
                .iter()
                .map(|m| {
                    row.scores.get(m).copied().ok_or_else(|| {
                        Error::InvalidInput(format!("row `{}` is missing method `{m}`", row.id))
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            Ok(ScoreRow {
                id: row.id.clone(),
                label: row.label,
                scores: BTreeMap::from([("ensemble".to_string(), model.score(&v)?)]),
            })
        })
        .collect::<Result<Vec<ScoreRow>>>()?;
    write_score_rows(&combined, out)
}

fn cmd_longform(args: LongformArgs) -> Result<()> {
    let cfg = load_config(args.config.as_deref())?;
    let strategy: ClaimStrategy = args.strategy.parse()?;
    let mut lf_cfg = LongformConfig::default();
    if let Some(n) = args.questions {
        lf_cfg.num_questions = n;
    }
    if let Some(mode) = &args.aggregate {
        lf_cfg.aggregation = mode.parse()?;
    }
    let dataset = load_dataset(&args.input)?;
    let backend = build_backend(&cfg.backend)?;
    let prompts = cfg.prompts.assets()?;
    let scorer = TeacherForcedLns;
    let mut records = Vec::new();
    for (trace, _) in &dataset.entries {
        records.extend(score_longform(
            &trace.query,
            &trace.greedy.text,
            strategy,
            &scorer,
            backend.as_ref(),
            &prompts,
            &lf_cfg,
        )?);
    }
    if let Some(path) = &args.labels {
        let labeler = FixtureLabeler::from_path(path)?;
        label_claims(&mut records, &labeler)?;
    }
    let mut buf = Vec::new();
    for record in &records {
        let line = serde_json::to_string(record)
            .map_err(|e| Error::InvalidInput(format!("serialize claim record: {e}")))?;
        buf.extend_from_slice(line.as_bytes());
        buf.push(b'\n');
    }
    std::fs::write(&args.out, buf).map_err(|e| Error::io(&args.out, e))?;
    println!("claims,{}", records.len());
    if args.labels.is_some() {
        let value = evaluate_claims(&records)?;
        println!("claim_prr,{value:.4}");
    }
    Ok(())
}

fn cmd_transform(args: TransformArgs) -> Result<()> {
    let kind: TransformKind = args.kind.parse()?;
    let dataset = load_dataset(&args.input)?;
    let traces: Vec<_> = dataset.entries.iter().map(|(t, _)| t.clone()).collect();

    let adversarial_text = match kind {
        TransformKind::Adversarial if args.search => {
            let cfg = load_config(args.config.as_deref())?;
            let backend = build_backend(&cfg.backend)?;
            let prompts = cfg.prompts.assets()?;
            let mut search_cfg = AdversarialSearchConfig {
                scorer: cfg.scoring.scorer.clone(),
                ..AdversarialSearchConfig::default()
            };
            if let Some(text) = &args.text {
                search_cfg.initial_prompt = text.clone();
            }
            if let Some(iterations) = args.iterations {
                search_cfg.iterations = iterations;
            }
            if let Some(budget) = args.budget {
                search_cfg.accuracy_budget = budget;
            }
            if let Some(probes) = &args.probes {
                search_cfg.probe_methods = Method::parse_list(probes)?;
            }
            let outcome =
                adversarial_search(&dataset, backend.as_ref(), &prompts, &search_cfg)?;
            println!("{}", outcome.best_prompt);
            outcome.best_prompt
        }
        _ => args.text.clone().unwrap_or_else(|| ADV_PREFIX_CONFIDENT.to_string()),
    };

    let entries = dataset
        .entries
        .iter()
        .enumerate()
        .map(|(i, (trace, label))| {
            let query = match kind {
                TransformKind::ContextSimilar | TransformKind::ContextDissimilar => {
                    let similar = kind == TransformKind::ContextSimilar;
                    let history =
                        select_context_history(&traces, &trace.query, similar, args.pairs)?;
                    apply_context(&trace.query, &history, kind.tag())?
                }
                TransformKind::Typo => {
                    apply_typo(&trace.query, args.count, args.seed.wrapping_add(i as u64))?
                }
                TransformKind::Adversarial => apply_adversarial(&trace.query, &adversarial_text),
            };
            let mut trace = trace.clone();
            trace.query = query;
            Ok((trace, *label))
        })
        .collect::<Result<Vec<_>>>()?;
    save_dataset(&LabeledDataset { entries }, &args.out)
}

fn cmd_report(args: ReportArgs) -> Result<()> {
    let test_rows = read_score_rows(&args.test)?;
    if test_rows.is_empty() {
        return Err(Error::InvalidInput("empty test score file".into()));
    }
    let mut cal_sets: Vec<(String, Vec<ScoreRow>)> = Vec::new();
    for path in &args.cal {
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        cal_sets.push((name, read_score_rows(path)?));
    }
    let methods = score_methods(&test_rows);
    let inputs = methods
        .iter()
        .map(|method| {
            Ok(ShiftMethodInput {
                method: method.clone(),
                cal_sets: cal_sets
                    .iter()
                    .map(|(name, rows)| Ok((name.clone(), method_pairs(rows, method)?)))
                    .collect::<Result<Vec<_>>>()?,
                test: method_pairs(&test_rows, method)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let targets = recall_targets(None, args.grid)?;
    let seeds: Vec<u64> = (0..args.seeds).collect();
    let rows = shift_study(&inputs, &targets, &seeds, args.subsample)?;
    let mut body = String::from(ShiftStudyRow::CSV_HEADER);
    body.push('\n');
    for row in &rows {
        body.push_str(&row.csv_line());
        body.push('\n');
    }
    std::fs::write(&args.out, body).map_err(|e| Error::io(&args.out, e))?;

    if let Some(dir) = &args.curves {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for method in &methods {
            let pairs = method_pairs(&test_rows, method)?;
            let mut csv = String::from("fraction,precision\n");
            for (fraction, precision) in rejection_curve_points(&pairs)? {
                csv.push_str(&format!("{fraction},{precision}\n"));
            }
            let path = dir.join(format!("{method}.csv"));
            std::fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_and_full_file_parse() {
        let cfg = load_config(None).unwrap();
        assert_eq!(cfg.backend.kind, "mock");
        assert_eq!(cfg.run.threads, 1);
        assert_eq!(cfg.sampling.num_samples, 5);
        assert!(cfg.scoring.methods.is_none());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.toml");
        std::fs::write(
            &path,
            r#"
[backend]
kind = "mock"
seed = 42

[scoring]
methods = ["lns", "degmat"]
kle_temperature = 0.5

[sampling]
temperature = 0.7
num_samples = 3

[run]
threads = 4
"#,
        )
        .unwrap();
        let cfg = load_config(Some(&path)).unwrap();
        assert_eq!(cfg.backend.seed, 42);
        assert_eq!(cfg.scoring.methods.as_deref(), Some(&["lns".to_string(), "degmat".to_string()][..]));
        assert_eq!(cfg.scoring.scorer.kle_temperature, 0.5);
        assert_eq!(cfg.scoring.scorer.inside_alpha, ScorerConfig::default().inside_alpha);
        assert_eq!(cfg.sampling.num_samples, 3);
        assert_eq!(cfg.run.threads, 4);
    }

    #[test]
    fn config_rejects_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.toml");
        std::fs::write(&path, "[backend]\nknid = \"mock\"\n").unwrap();
        assert!(load_config(Some(&path)).is_err());
    }

    #[test]
    fn backend_construction_validates_kind_and_modes() {
        assert!(build_backend(&BackendSection::default()).is_ok());
        let bad = BackendSection {
            kind: "carrier-pigeon".into(),
            ..BackendSection::default()
        };
        assert!(build_backend(&bad).is_err());
        let http_missing = BackendSection {
            kind: "http".into(),
            ..BackendSection::default()
        };
        assert!(build_backend(&http_missing).is_err());
        let conflicting = BackendSection {
            record: Some("a.jsonl".into()),
            replay: Some("b.jsonl".into()),
            ..BackendSection::default()
        };
        assert!(build_backend(&conflicting).is_err());
    }

    #[test]
    fn score_rows_round_trip_and_enforce_one_roster() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scores.jsonl");
        let rows = vec![
            ScoreRow {
                id: "a".into(),
                label: 0,
                scores: BTreeMap::from([("lns".to_string(), 0.25)]),
            },
            ScoreRow {
                id: "b".into(),
                label: 1,
                scores: BTreeMap::from([("lns".to_string(), 1.5)]),
            },
        ];
        write_score_rows(&rows, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(
            text.lines().next().unwrap(),
            r#"{"id":"a","label":0,"scores":{"lns":0.25}}"#
        );
        assert_eq!(read_score_rows(&path).unwrap(), rows);

        std::fs::write(
            &path,
            "{\"id\":\"a\",\"label\":0,\"scores\":{\"lns\":1.0}}\n{\"id\":\"b\",\"label\":0,\"scores\":{\"kle\":1.0}}\n",
        )
        .unwrap();
        assert!(read_score_rows(&path).is_err());
    }

    #[test]
    fn parallel_map_keeps_input_order() {
        let items: Vec<usize> = (0..57).collect();
        let sequential = parallel_map(&items, 1, |i, &x| Ok(i * 1000 + x)).unwrap();
        let parallel = parallel_map(&items, 8, |i, &x| Ok(i * 1000 + x)).unwrap();
        assert_eq!(sequential, parallel);
        assert_eq!(parallel[13], 13 * 1000 + 13);

        let failing = parallel_map(&items, 4, |_, &x| {
            if x == 30 {
                Err(Error::InvalidInput("boom".into()))
            } else {
                Ok(x)
            }
        });
        assert!(failing.is_err());
    }

    #[test]
    fn method_resolution_prefers_flag_over_config() {
        let mut cfg = CliConfig::default();
        cfg.scoring.methods = Some(vec!["kle".into(), "entropy".into()]);
        let from_flag = resolve_methods(Some("lns,degmat"), &cfg).unwrap();
        assert_eq!(from_flag, vec![Method::Lns, Method::DegMat]);
        let from_config = resolve_methods(None, &cfg).unwrap();
        assert_eq!(from_config, vec![Method::Kle, Method::Entropy]);
        let all = resolve_methods(None, &CliConfig::default()).unwrap();
        assert_eq!(all.len(), Method::ALL.len());
        assert!(resolve_methods(Some("warp_drive"), &cfg).is_err());
    }

    #[test]
    fn recall_target_parsing() {
        let grid = recall_targets(None, 4).unwrap();
        assert_eq!(grid.values(), &[0.0, 0.25, 0.5, 0.75, 1.0]);
        let listed = recall_targets(Some("0.9, 0.5"), 1000).unwrap();
        assert_eq!(listed.values(), &[0.5, 0.9]);
        assert!(recall_targets(Some("1.5"), 1000).is_err());
        assert!(recall_targets(None, 0).is_err());
    }

    #[test]
    fn unknown_subcommand_exits_nonzero() {
        assert_eq!(run(["traceuq", "frobnicate"]), 2);
        assert_eq!(run(["traceuq", "--help"]), 0);
    }
}
