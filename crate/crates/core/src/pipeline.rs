//! Dataset-level orchestration: extract → validate → select → evaluate,
//! plus distillation export and single-document resolution.
//!
//! Every stage reads and writes JSONL files in one run directory. Records are
//! always written in dataset order, then by sample index, so runs over the
//! replay backend are byte-for-byte reproducible at any concurrency.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{self, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;
use std::thread;

use rust_decimal::Decimal;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::llm::{build_prompt, select_best, Backend, Candidate, GenerationRequest, LlmError, MeanKind, PromptOptions};
use crate::metrics::{filter_table, score, DocScore, FilterTable, MetricsError, Truth, ROW_NAMES};
use crate::schema::{builtin_transactional_schema, load_schema, SchemaDef};
use crate::validation::{
    domain_validate, extract_json_block, run_cascade, syntactic_validate, CascadeLevel, Diagnostic, FilterLevel,
};
use crate::values::ExplicitDocument;

pub const CANDIDATES_FILE: &str = "candidates.jsonl";
pub const EXTRACT_ERRORS_FILE: &str = "extract_errors.jsonl";
pub const VERDICTS_FILE: &str = "verdicts.jsonl";
pub const SELECTED_FILE: &str = "selected.jsonl";
pub const DISTILL_FILE: &str = "distill.jsonl";
pub const PER_DOCUMENT_FILE: &str = "per_document.jsonl";
pub const REPORT_TXT: &str = "report.txt";
pub const REPORT_CSV: &str = "report.csv";
pub const REPORT_JSON: &str = "report.json";

pub fn survivors_file(level: FilterLevel) -> String {
    format!("survivors_{}.jsonl", level.name())
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error(transparent)]
    Backend(#[from] LlmError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl PipelineError {
    /// Process exit code: 1 usage, 2 data, 3 backend.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Usage(_) => 1,
            PipelineError::Data(_) | PipelineError::Io { .. } => 2,
            PipelineError::Backend(_) => 3,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

// ---------------------------------------------------------------------------
// Configuration and dataset

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub schema: SchemaDef,
    pub rel_tol: Decimal,
    pub temperature: f64,
    pub n_samples: usize,
    pub concurrency: usize,
    pub mean: MeanKind,
    pub include_image: bool,
    pub max_tokens: Option<u32>,
    pub seed: Option<u64>,
    pub out_dir: PathBuf,
}

impl RunConfig {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        RunConfig {
            schema: builtin_transactional_schema(),
            rel_tol: Decimal::new(5, 3),
            temperature: 1.0,
            n_samples: 1,
            concurrency: 4,
            mean: MeanKind::Arithmetic,
            include_image: false,
            max_tokens: None,
            seed: None,
            out_dir: out_dir.into(),
        }
    }

    /// Samples per document; greedy decoding always takes one.
    pub fn samples(&self) -> usize {
        if self.temperature == 0.0 {
            1
        } else {
            self.n_samples.max(1)
        }
    }

    pub fn check(&self) -> Result<(), PipelineError> {
        if self.rel_tol < Decimal::ZERO {
            return Err(PipelineError::Usage("tolerance must be non-negative".into()));
        }
        if self.n_samples == 0 {
            return Err(PipelineError::Usage("samples must be at least 1".into()));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(PipelineError::Usage("temperature must be non-negative".into()));
        }
        Ok(())
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }
}

/// Optional TOML settings file; command-line flags take precedence.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub schema: Option<PathBuf>,
    pub backend: Option<String>,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub fixtures: Option<PathBuf>,
    pub temperature: Option<f64>,
    pub samples: Option<usize>,
    pub tolerance: Option<String>,
    pub concurrency: Option<usize>,
    pub max_tokens: Option<u32>,
    pub seed: Option<u64>,
    pub image: Option<bool>,
    pub mean: Option<MeanKind>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        toml::from_str(&text).map_err(|e| PipelineError::Usage(format!("{}: {e}", path.display())))
    }
}

/// Loads a schema file, or the builtin schema when `path` is `None`.
pub fn load_schema_file(path: Option<&Path>) -> Result<SchemaDef, PipelineError> {
    match path {
        None => Ok(builtin_transactional_schema()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(io_err(p))?;
            load_schema(&text).map_err(|e| PipelineError::Data(format!("{}: {e}", p.display())))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: String,
    pub ocr_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<Value>,
}

pub fn load_dataset(path: &Path) -> Result<Vec<DatasetRecord>, PipelineError> {
    let records: Vec<DatasetRecord> = read_jsonl(path)?;
    let mut seen = HashSet::new();
    for r in &records {
        if !seen.insert(r.id.as_str()) {
            return Err(PipelineError::Data(format!("duplicate document id `{}`", r.id)));
        }
        if r.ocr_text.trim().is_empty() {
            return Err(PipelineError::Data(format!("document `{}` has empty OCR text", r.id)));
        }
    }
    Ok(records)
}

// ---------------------------------------------------------------------------
// JSONL helpers

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, PipelineError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| PipelineError::Data(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

fn jsonl_line<T: Serialize>(item: &T) -> String {
    let mut line = serde_json::to_string(item).expect("records serialise");
    line.push('\n');
    line
}

/// Writes through a temporary file so readers never see a partial file.
fn write_atomic(path: &Path, contents: &str) -> Result<(), PipelineError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), PipelineError> {
    write_atomic(path, &items.iter().map(jsonl_line).collect::<String>())
}

/// Runs `work` on up to `workers` threads and hands results to `sink` on the
/// calling thread in input order.
pub fn for_each_ordered<T, R, W, S>(items: &[T], workers: usize, work: W, mut sink: S)
where
    T: Sync,
    R: Send,
    W: Fn(&T) -> R + Sync,
    S: FnMut(usize, R),
{
    let workers = workers.clamp(1, items.len().max(1));
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel();
    thread::scope(|scope| {
        for _ in 0..workers {
            let tx = tx.clone();
            let (next, work) = (&next, &work);
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() || tx.send((i, work(&items[i]))).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        let mut pending = BTreeMap::new();
        let mut expected = 0;
        for (i, r) in rx {
            pending.insert(i, r);
            while let Some(r) = pending.remove(&expected) {
                sink(expected, r);
                expected += 1;
            }
        }
    });
}

fn dataset_order(dataset: &[DatasetRecord]) -> HashMap<&str, usize> {
    dataset.iter().enumerate().map(|(i, r)| (r.id.as_str(), i)).collect()
}

// ---------------------------------------------------------------------------
// extract

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractError {
    pub doc_id: String,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExtractSummary {
    pub documents: usize,
    pub generated: usize,
    pub skipped: usize,
    pub failed: usize,
}

/// Existing candidates of an interrupted run; unreadable lines are dropped.
fn load_existing(path: &Path, order: &HashMap<&str, usize>, samples: usize) -> BTreeMap<(usize, usize), Candidate> {
    let Ok(text) = fs::read_to_string(path) else {
        return BTreeMap::new();
    };
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        match serde_json::from_str::<Candidate>(line) {
            Ok(c) => match order.get(c.doc_id.as_str()) {
                Some(&d) if c.sample_index < samples => {
                    out.entry((d, c.sample_index)).or_insert(c);
                }
                _ => log::warn!("{}:{}: dropping candidate outside the dataset", path.display(), i + 1),
            },
            Err(e) if !line.trim().is_empty() => log::warn!("{}:{}: dropping unreadable line: {e}", path.display(), i + 1),
            Err(_) => {}
        }
    }
    out
}

fn write_candidates(path: &Path, existing: &BTreeMap<(usize, usize), Candidate>) -> Result<(), PipelineError> {
    write_atomic(path, &existing.values().map(jsonl_line).collect::<String>())
}

/// Generates `samples()` candidates per document. Candidates already present
/// in the run directory are kept and not requested again; backend failures
/// are recorded per document in the errors file.
pub fn cmd_extract(
    dataset: &[DatasetRecord],
    backend: &dyn Backend,
    config: &RunConfig,
) -> Result<ExtractSummary, PipelineError> {
    config.check()?;
    let samples = config.samples();
    let order = dataset_order(dataset);
    let path = config.path(CANDIDATES_FILE);
    let mut existing = load_existing(&path, &order, samples);
    write_candidates(&path, &existing)?;

    let todo: Vec<(usize, &DatasetRecord)> = dataset
        .iter()
        .enumerate()
        .filter(|(d, _)| (0..samples).any(|s| !existing.contains_key(&(*d, s))))
        .collect();
    let mut summary = ExtractSummary {
        documents: dataset.len(),
        skipped: dataset.len() - todo.len(),
        ..Default::default()
    };

    let file = OpenOptions::new().append(true).open(&path).map_err(io_err(&path))?;
    let mut writer = BufWriter::new(file);
    let mut errors = Vec::new();
    let mut write_failure = None;
    for_each_ordered(
        &todo,
        config.concurrency,
        |(_, record)| generate_one(record, backend, config, samples),
        |i, result| {
            let (d, record) = todo[i];
            match result {
                Ok(candidates) => {
                    for c in candidates {
                        let key = (d, c.sample_index);
                        if existing.contains_key(&key) {
                            continue;
                        }
                        if let Err(e) = writer.write_all(jsonl_line(&c).as_bytes()) {
                            write_failure.get_or_insert(e);
                        }
                        existing.insert(key, c);
                        summary.generated += 1;
                    }
                    if let Err(e) = writer.flush() {
                        write_failure.get_or_insert(e);
                    }
                }
                Err(e) => {
                    log::error!("{}: {e}", record.id);
                    summary.failed += 1;
                    errors.push(ExtractError {
                        doc_id: record.id.clone(),
                        message: e.to_string(),
                    });
                }
            }
        },
    );
    drop(writer);
    if let Some(e) = write_failure {
        return Err(io_err(&path)(e));
    }
    write_candidates(&path, &existing)?;
    write_jsonl(&config.path(EXTRACT_ERRORS_FILE), &errors)?;
    log::info!(
        "extract: {} generated, {} documents skipped, {} failed",
        summary.generated,
        summary.skipped,
        summary.failed
    );
    if summary.failed > 0 && summary.failed == todo.len() && existing.is_empty() {
        return Err(PipelineError::Backend(LlmError::Transport {
            endpoint: "backend".into(),
            message: format!("all {} documents failed; see {EXTRACT_ERRORS_FILE}", summary.failed),
        }));
    }
    Ok(summary)
}

fn generate_one(
    record: &DatasetRecord,
    backend: &dyn Backend,
    config: &RunConfig,
    samples: usize,
) -> Result<Vec<Candidate>, LlmError> {
    let opts = PromptOptions {
        guidelines: None,
        image_path: record.image_path.clone(),
        include_image: config.include_image && record.image_path.is_some(),
    };
    let prompt = build_prompt(&config.schema, &record.ocr_text, &opts)?;
    let mut req = GenerationRequest::new(record.id.clone(), prompt, config.temperature, samples);
    req.max_tokens = config.max_tokens;
    req.seed = config.seed;
    let candidates = backend.generate(&req)?;
    let indices: Vec<usize> = candidates.iter().map(|c| c.sample_index).collect();
    if indices != (0..samples).collect::<Vec<_>>() || candidates.iter().any(|c| c.doc_id != record.id) {
        return Err(LlmError::Protocol {
            endpoint: "backend".into(),
            message: format!("expected samples 0..{samples} for `{}`, got {indices:?}", record.id),
        });
    }
    Ok(candidates)
}

// ---------------------------------------------------------------------------
// validate

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictRecord {
    pub doc_id: String,
    pub sample_index: usize,
    pub level_reached: CascadeLevel,
    pub syntactic: bool,
    pub task: bool,
    pub domain: bool,
    pub mean_probability: Option<f64>,
    pub reasons: Vec<Diagnostic>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<Diagnostic>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidateSummary {
    pub documents: usize,
    pub candidates: usize,
    /// Documents with at least one candidate surviving each filter.
    pub surviving: Vec<(FilterLevel, usize)>,
}

fn load_candidates(dataset: &[DatasetRecord], config: &RunConfig) -> Result<Vec<Vec<Candidate>>, PipelineError> {
    let order = dataset_order(dataset);
    let mut grouped = vec![Vec::new(); dataset.len()];
    let path = config.path(CANDIDATES_FILE);
    for c in read_jsonl::<Candidate>(&path)? {
        let d = *order
            .get(c.doc_id.as_str())
            .ok_or_else(|| PipelineError::Data(format!("candidate for unknown document `{}`", c.doc_id)))?;
        grouped[d].push(c);
    }
    for g in &mut grouped {
        g.sort_by_key(|c| c.sample_index);
        g.dedup_by_key(|c| c.sample_index);
    }
    Ok(grouped)
}

/// Runs the cascade on every candidate; writes verdicts and the documents
/// surviving `level`.
pub fn cmd_validate(
    dataset: &[DatasetRecord],
    config: &RunConfig,
    level: FilterLevel,
) -> Result<ValidateSummary, PipelineError> {
    config.check()?;
    let grouped = load_candidates(dataset, config)?;
    let jobs: Vec<(&DatasetRecord, &Candidate)> = dataset
        .iter()
        .zip(&grouped)
        .flat_map(|(r, cs)| cs.iter().map(move |c| (r, c)))
        .collect();
    let mut verdicts = Vec::with_capacity(jobs.len());
    for_each_ordered(
        &jobs,
        config.concurrency,
        |(record, c)| {
            let v = run_cascade(&c.raw_text, &record.ocr_text, &config.schema, config.rel_tol);
            let level = v.level_reached;
            VerdictRecord {
                doc_id: c.doc_id.clone(),
                sample_index: c.sample_index,
                level_reached: level,
                syntactic: level.passes(FilterLevel::Syntactic),
                task: level.passes(FilterLevel::Task),
                domain: level.passes(FilterLevel::Domain),
                mean_probability: c.mean_probability(config.mean),
                reasons: v.reasons,
                warnings: v.warnings,
            }
        },
        |_, v| verdicts.push(v),
    );
    write_jsonl(&config.path(VERDICTS_FILE), &verdicts)?;

    let mut surviving = Vec::new();
    for filter in FilterLevel::ALL {
        let ids: Vec<&str> = dataset
            .iter()
            .filter(|r| verdicts.iter().any(|v| v.doc_id == r.id && v.level_reached.passes(filter)))
            .map(|r| r.id.as_str())
            .collect();
        if filter == level {
            let lines: Vec<Value> = ids.iter().map(|id| json!({ "doc_id": id })).collect();
            write_jsonl(&config.path(&survivors_file(level)), &lines)?;
        }
        surviving.push((filter, ids.len()));
    }
    Ok(ValidateSummary {
        documents: dataset.len(),
        candidates: verdicts.len(),
        surviving,
    })
}

/// Candidates joined with their verdicts, grouped per dataset document.
struct Judged {
    groups: Vec<Vec<(Candidate, CascadeLevel)>>,
}

impl Judged {
    fn load(dataset: &[DatasetRecord], config: &RunConfig) -> Result<Self, PipelineError> {
        let grouped = load_candidates(dataset, config)?;
        let path = config.path(VERDICTS_FILE);
        let verdicts: HashMap<(String, usize), CascadeLevel> = read_jsonl::<VerdictRecord>(&path)?
            .into_iter()
            .map(|v| ((v.doc_id, v.sample_index), v.level_reached))
            .collect();
        let mut groups = Vec::with_capacity(grouped.len());
        for cs in grouped {
            let mut g = Vec::with_capacity(cs.len());
            for c in cs {
                let level = *verdicts.get(&(c.doc_id.clone(), c.sample_index)).ok_or_else(|| {
                    PipelineError::Data(format!(
                        "no verdict for `{}` sample {}; run validate first",
                        c.doc_id, c.sample_index
                    ))
                })?;
                g.push((c, level));
            }
            groups.push(g);
        }
        Ok(Judged { groups })
    }

    /// Best candidate of document `d` among those surviving `filter`
    /// (all candidates when `None`).
    fn best(&self, d: usize, filter: Option<FilterLevel>, mean: MeanKind) -> Option<(&Candidate, CascadeLevel)> {
        let eligible: Vec<Candidate> = self.groups[d]
            .iter()
            .filter(|(_, l)| filter.is_none_or(|f| l.passes(f)))
            .map(|(c, _)| c.clone())
            .collect();
        let best = select_best(&eligible, mean)?;
        self.groups[d]
            .iter()
            .find(|(c, _)| c.sample_index == best.sample_index)
            .map(|(c, l)| (c, *l))
    }
}

// ---------------------------------------------------------------------------
// select

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedRecord {
    pub doc_id: String,
    pub sample_index: usize,
    pub mean_probability: Option<f64>,
    pub raw_text: String,
}

/// Picks one fully valid candidate per document; documents without one are
/// left out.
pub fn cmd_select(dataset: &[DatasetRecord], config: &RunConfig) -> Result<Vec<SelectedRecord>, PipelineError> {
    let judged = Judged::load(dataset, config)?;
    let selected: Vec<SelectedRecord> = (0..dataset.len())
        .filter_map(|d| judged.best(d, Some(FilterLevel::Domain), config.mean))
        .map(|(c, _)| SelectedRecord {
            doc_id: c.doc_id.clone(),
            sample_index: c.sample_index,
            mean_probability: c.mean_probability(config.mean),
            raw_text: c.raw_text.clone(),
        })
        .collect();
    write_jsonl(&config.path(SELECTED_FILE), &selected)?;
    Ok(selected)
}

// ---------------------------------------------------------------------------
// evaluate

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowScore {
    pub sample_index: Option<usize>,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub nted: f64,
    pub exact: bool,
    pub valid: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocumentReport {
    pub doc_id: String,
    /// False when the ground truth itself breaks a domain constraint; such
    /// documents are still scored.
    pub ground_truth_valid: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ground_truth_issues: Vec<String>,
    /// Keyed by lower-case row name; `null` when filtered out.
    pub rows: BTreeMap<String, Option<RowScore>>,
}

fn parse_truth(record: &DatasetRecord, config: &RunConfig) -> Result<(Truth, Vec<String>), PipelineError> {
    let value = record
        .ground_truth
        .as_ref()
        .ok_or_else(|| PipelineError::Data(format!("document `{}` has no ground truth", record.id)))?;
    let doc = ExplicitDocument::from_json(value, &config.schema)
        .map_err(|e| PipelineError::Data(format!("ground truth of `{}`: {e}", record.id)))?;
    let outcome = domain_validate(&doc, &config.schema, config.rel_tol);
    let mut issues: Vec<String> = outcome
        .report
        .violated()
        .map(|e| {
            if e.instance.is_empty() {
                e.equation.clone()
            } else {
                format!("{}@{}", e.equation, e.instance)
            }
        })
        .collect();
    issues.extend(outcome.report.failed_rules().map(|r| r.rule.clone()));
    Ok((Truth::new(&outcome.resolved, &config.schema), issues))
}

fn score_candidate(
    candidate: Option<&Candidate>,
    truth: &Truth,
    doc_id: &str,
    config: &RunConfig,
) -> Result<(DocScore, RowScore), PipelineError> {
    let parsed = candidate.and_then(|c| syntactic_validate(&c.raw_text, &config.schema).ok());
    let outcome = parsed.map(|(doc, _)| domain_validate(&doc, &config.schema, config.rel_tol));
    let s = score(
        outcome.as_ref().map(|o| (&o.resolved, o.report.valid)),
        truth,
        &config.schema,
    )
    .map_err(|e: MetricsError| PipelineError::Data(format!("`{doc_id}`: {e}")))?;
    let f1 = s.f1();
    Ok((
        s,
        RowScore {
            sample_index: candidate.map(|c| c.sample_index),
            precision: f1.precision,
            recall: f1.recall,
            f1: f1.f1,
            nted: s.nted,
            exact: s.exact,
            valid: s.valid,
        },
    ))
}

/// Scores the best candidate surviving each filter against ground truth and
/// writes the filter table and per-document scores.
pub fn cmd_evaluate(dataset: &[DatasetRecord], config: &RunConfig) -> Result<FilterTable, PipelineError> {
    config.check()?;
    let judged = Judged::load(dataset, config)?;
    let filters = [None, Some(FilterLevel::Syntactic), Some(FilterLevel::Task), Some(FilterLevel::Domain)];
    let mut rows = Vec::with_capacity(dataset.len());
    let mut reports = Vec::with_capacity(dataset.len());
    for (d, record) in dataset.iter().enumerate() {
        let (truth, issues) = parse_truth(record, config)?;
        let mut doc_rows: [Option<DocScore>; 4] = [None; 4];
        let mut report_rows = BTreeMap::new();
        for (r, filter) in filters.iter().enumerate() {
            let best = judged.best(d, *filter, config.mean);
            let entry = if best.is_some() || filter.is_none() {
                let (s, row) = score_candidate(best.map(|(c, _)| c), &truth, &record.id, config)?;
                doc_rows[r] = Some(s);
                Some(row)
            } else {
                None
            };
            report_rows.insert(ROW_NAMES[r].to_ascii_lowercase(), entry);
        }
        rows.push(doc_rows);
        reports.push(DocumentReport {
            doc_id: record.id.clone(),
            ground_truth_valid: issues.is_empty(),
            ground_truth_issues: issues,
            rows: report_rows,
        });
    }
    let table = filter_table(&rows);
    write_atomic(&config.path(REPORT_TXT), &table.to_text())?;
    write_atomic(&config.path(REPORT_CSV), &table.to_csv())?;
    let mut json = serde_json::to_string_pretty(&table).expect("table serialises");
    json.push('\n');
    write_atomic(&config.path(REPORT_JSON), &json)?;
    write_jsonl(&config.path(PER_DOCUMENT_FILE), &reports)?;
    Ok(table)
}

// ---------------------------------------------------------------------------
// distill

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    /// Best syntactically valid candidate of every document.
    Base,
    /// Best fully valid candidate of each document that has one.
    Domain,
}

impl std::str::FromStr for Subset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "base" => Ok(Subset::Base),
            "domain" => Ok(Subset::Domain),
            _ => Err(format!("unknown subset `{s}` (expected base or domain)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillRecord {
    pub doc_id: String,
    pub prompt: String,
    pub completion: String,
    pub level_reached: CascadeLevel,
    pub mean_probability: Option<f64>,
}

/// Exports prompt/completion pairs; the completion is the candidate's JSON
/// block.
pub fn cmd_distill(
    dataset: &[DatasetRecord],
    config: &RunConfig,
    subset: Subset,
) -> Result<Vec<DistillRecord>, PipelineError> {
    let judged = Judged::load(dataset, config)?;
    let filter = match subset {
        Subset::Base => FilterLevel::Syntactic,
        Subset::Domain => FilterLevel::Domain,
    };
    let mut records = Vec::new();
    for (d, record) in dataset.iter().enumerate() {
        let Some((c, level)) = judged.best(d, Some(filter), config.mean) else {
            continue;
        };
        let completion = extract_json_block(&c.raw_text)
            .map_err(|e| PipelineError::Data(format!("`{}`: {}", c.doc_id, e.message)))?;
        let opts = PromptOptions {
            guidelines: None,
            image_path: record.image_path.clone(),
            include_image: config.include_image && record.image_path.is_some(),
        };
        let prompt = build_prompt(&config.schema, &record.ocr_text, &opts)?;
        records.push(DistillRecord {
            doc_id: record.id.clone(),
            prompt: prompt.render(),
            completion: completion.to_string(),
            level_reached: level,
            mean_probability: c.mean_probability(config.mean),
        });
    }
    write_jsonl(&config.path(DISTILL_FILE), &records)?;
    Ok(records)
}

// ---------------------------------------------------------------------------
// resolve

/// Resolves one explicit document: the implicit document with provenance,
/// the inference trace and the constraint report.
pub fn cmd_resolve(document: &Value, schema: &SchemaDef, rel_tol: Decimal) -> Result<Value, PipelineError> {
    let doc = ExplicitDocument::from_json(document, schema).map_err(|e| PipelineError::Data(e.to_string()))?;
    let outcome = domain_validate(&doc, schema, rel_tol);
    let mut out = outcome.resolved.to_json(schema);
    out["trace"] = serde_json::to_value(&outcome.trace.steps).expect("trace serialises");
    out["report"] = serde_json::to_value(&outcome.report).expect("report serialises");
    if !outcome.coercion_errors.is_empty() {
        out["coercion_errors"] = serde_json::to_value(&outcome.coercion_errors).expect("errors serialise");
    }
    Ok(out)
}
