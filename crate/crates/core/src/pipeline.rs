//! Resumable scoring runs over a dataset.
//!
//! A run directory holds `manifest.json`, `records.jsonl`, `failures.jsonl`
//! and `timing.csv`. Records are appended and fsync'd one line at a time as
//! workers finish; when the run completes the file is rewritten in response
//! id order, so its bytes do not depend on scheduling.

use std::collections::HashSet;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{mpsc, Arc};
use std::thread;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{AgentError, AgentSettings, Agents, Templates};
use crate::backend::{BackendError, ChatBackend};
use crate::ingest::{compare_ids, Dataset, DatasetSpec};
use crate::model::{Mode, ScoredRecord, StudentResponse, TaskContext};
use crate::schema::ComponentSchema;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const RECORDS_FILE: &str = "records.jsonl";
pub const FAILURES_FILE: &str = "failures.jsonl";
pub const TIMING_FILE: &str = "timing.csv";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: no run manifest")]
    NoManifest { path: PathBuf },
    #[error("manifest mismatch on {field}: run has `{found}`, config has `{expected}`")]
    ManifestMismatch { field: &'static str, expected: String, found: String },
    #[error("{path}:{line_no}: {reason}")]
    Corrupt { path: PathBuf, line_no: usize, reason: String },
    #[error("run interrupted after {persisted} records")]
    Interrupted { persisted: usize },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.to_path_buf(), source }
}

/// Settings for one scoring run. The backend is passed separately.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub mode: Mode,
    pub parallelism: usize,
    pub settings: AgentSettings,
    pub templates: Templates,
    pub run_dir: PathBuf,
    pub cache_path: Option<PathBuf>,
    pub seed: u64,
    /// Log a progress line after this many completed responses; 0 disables.
    pub progress_every: usize,
    /// Workers stop taking new responses once this is set.
    pub cancel: Option<Arc<AtomicBool>>,
}

impl RunConfig {
    pub fn new(mode: Mode, settings: AgentSettings, run_dir: impl Into<PathBuf>) -> Self {
        RunConfig {
            mode,
            parallelism: 1,
            settings,
            templates: Templates::default(),
            run_dir: run_dir.into(),
            cache_path: None,
            seed: 0,
            progress_every: 50,
            cancel: None,
        }
    }

    fn snapshot(&self) -> ConfigSnapshot {
        ConfigSnapshot {
            parallelism: self.parallelism,
            settings: self.settings.clone(),
            templates: self.templates.clone(),
            cache_path: self.cache_path.clone(),
            seed: self.seed,
        }
    }
}

/// The run-independent parts of [`RunConfig`] as stored in a manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigSnapshot {
    pub parallelism: usize,
    pub settings: AgentSettings,
    pub templates: Templates,
    pub cache_path: Option<PathBuf>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub mode: Mode,
    pub model_name: String,
    pub backend_identity: String,
    pub dataset: DatasetSpec,
    pub dataset_digest: String,
    pub dataset_size: usize,
    pub context: TaskContext,
    pub schema: Option<ComponentSchema>,
    pub config: ConfigSnapshot,
    pub started_at: String,
    pub finished_at: Option<String>,
    pub records: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    Extraction,
    Scoring,
    ReplayMiss,
    Unreachable,
    Backend,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub response_id: String,
    pub gold_score: Option<i64>,
    pub kind: FailureKind,
    pub error: String,
    pub retries: u32,
    pub wall_time_ms: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub records: Vec<ScoredRecord>,
    pub failures: Vec<FailureRecord>,
    pub manifest: Manifest,
}

impl RunResult {
    /// Reads a finished or partial run directory.
    pub fn load(run_dir: &Path) -> Result<Self, PipelineError> {
        let manifest = read_manifest(run_dir)?;
        let (mut records, _) = read_jsonl::<ScoredRecord>(&run_dir.join(RECORDS_FILE))?;
        let (mut failures, _) = read_jsonl::<FailureRecord>(&run_dir.join(FAILURES_FILE))?;
        records.sort_by(|a, b| compare_ids(&a.response_id, &b.response_id));
        failures.sort_by(|a, b| compare_ids(&a.response_id, &b.response_id));
        Ok(RunResult { records, failures, manifest })
    }

    pub fn is_complete(&self) -> bool {
        self.manifest.finished_at.is_some()
    }
}

pub fn read_manifest(run_dir: &Path) -> Result<Manifest, PipelineError> {
    let path = run_dir.join(MANIFEST_FILE);
    let text = match fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(PipelineError::NoManifest { path: run_dir.to_path_buf() })
        }
        Err(e) => return Err(io_err(&path)(e)),
    };
    serde_json::from_str(&text).map_err(|e| PipelineError::Corrupt { path, line_no: e.line(), reason: e.to_string() })
}

/// Parses a JSONL file. A final line without a trailing newline is a torn
/// write; it is skipped and the byte length of the valid prefix returned.
fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<(Vec<T>, Option<u64>), PipelineError> {
    let raw = match fs::read(path) {
        Ok(r) => r,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok((Vec::new(), None)),
        Err(e) => return Err(io_err(path)(e)),
    };
    let mut out = Vec::new();
    let mut offset = 0usize;
    for (i, line) in raw.split_inclusive(|b| *b == b'\n').enumerate() {
        let complete = line.ends_with(b"\n");
        let body = line.strip_suffix(b"\n").unwrap_or(line);
        if body.iter().all(u8::is_ascii_whitespace) {
            offset += line.len();
            continue;
        }
        if !complete {
            return Ok((out, Some(offset as u64)));
        }
        match serde_json::from_slice(body) {
            Ok(v) => out.push(v),
            Err(e) => {
                return Err(PipelineError::Corrupt { path: path.to_path_buf(), line_no: i + 1, reason: e.to_string() })
            }
        }
        offset += line.len();
    }
    Ok((out, None))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(bytes).map_err(io_err(&tmp))?;
        f.sync_all().map_err(io_err(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn write_manifest(run_dir: &Path, manifest: &Manifest) -> Result<(), PipelineError> {
    let mut text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    text.push('\n');
    write_atomic(&run_dir.join(MANIFEST_FILE), text.as_bytes())
}

fn jsonl<T: Serialize>(items: &[T]) -> Vec<u8> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, item).expect("record serializes");
        out.push(b'\n');
    }
    out
}

fn timing_csv(records: &[ScoredRecord]) -> Result<Vec<u8>, csv::Error> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["response_id", "wall_time_ms", "retries"])?;
    for r in records {
        w.write_record([r.response_id.clone(), r.wall_time_ms.to_string(), r.retries.to_string()])?;
    }
    w.into_inner().map_err(|e| csv::Error::from(e.into_error()))
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

enum Outcome {
    Scored(Box<ScoredRecord>),
    Failed(FailureRecord),
    Fatal(String),
}

fn failure_from(response: &StudentResponse, err: &AgentError, prior_retries: u32, prior_ms: u64) -> Outcome {
    let kind = match err {
        AgentError::ExtractionFailed { .. } => FailureKind::Extraction,
        AgentError::ScoringFailed { .. } => FailureKind::Scoring,
        AgentError::Backend { source: BackendError::ReplayMiss(_), .. } => FailureKind::ReplayMiss,
        AgentError::Backend { source, .. } if source.is_unreachable() => FailureKind::Unreachable,
        AgentError::Backend { .. } => FailureKind::Backend,
        AgentError::Template(_) | AgentError::Request(_) => return Outcome::Fatal(err.to_string()),
    };
    let attempts = err.attempts().cloned().unwrap_or_default();
    // Attempts counts calls made by the failing agent only.
    let own_retries = if matches!(kind, FailureKind::Extraction | FailureKind::Scoring) {
        attempts.retries()
    } else {
        attempts.transcripts.len() as u32
    };
    Outcome::Failed(FailureRecord {
        response_id: response.response_id.clone(),
        gold_score: response.gold_score,
        kind,
        error: err.to_string(),
        retries: prior_retries + own_retries,
        wall_time_ms: prior_ms + attempts.wall_time_ms,
    })
}

fn score_one(
    agents: &Agents,
    backend: &dyn ChatBackend,
    mode: Mode,
    context: &TaskContext,
    schema: Option<&ComponentSchema>,
    response: &StudentResponse,
) -> Outcome {
    let record = |predicted: i64, representation, transcripts, wall, first, retries| {
        Outcome::Scored(Box::new(ScoredRecord {
            response_id: response.response_id.clone(),
            mode,
            gold_score: response.gold_score,
            predicted_score: predicted,
            representation,
            transcripts,
            wall_time_ms: wall,
            first_attempt_ms: first,
            retries,
            response_text: response.text.clone(),
        }))
    };
    match mode {
        Mode::Baseline => match agents.run_baseline(backend, context, response) {
            Ok(o) => record(o.value.value(), None, o.transcripts, o.wall_time_ms, o.first_attempt_ms, o.retries),
            Err(e) => failure_from(response, &e, 0, 0),
        },
        Mode::Autoscore => {
            let schema = schema.expect("autoscore runs are checked for a schema");
            let extraction = match agents.run_extraction(backend, context, response, schema) {
                Ok(o) => o,
                Err(e) => return failure_from(response, &e, 0, 0),
            };
            match agents.run_scoring(backend, &extraction.value, context, response) {
                Ok(s) => {
                    let mut transcripts = extraction.transcripts;
                    transcripts.extend(s.transcripts);
                    record(
                        s.value.value(),
                        Some(extraction.value),
                        transcripts,
                        extraction.wall_time_ms + s.wall_time_ms,
                        extraction.first_attempt_ms + s.first_attempt_ms,
                        extraction.retries + s.retries,
                    )
                }
                Err(e) => failure_from(response, &e, extraction.retries, extraction.wall_time_ms),
            }
        }
    }
}

fn check_inputs(config: &RunConfig, dataset: &Dataset, context: &TaskContext, schema: Option<&ComponentSchema>) -> Result<(), PipelineError> {
    if config.parallelism == 0 {
        return Err(PipelineError::Config("parallelism must be at least 1".into()));
    }
    context.check().map_err(|e| PipelineError::Config(e.to_string()))?;
    if let Some(r) = dataset.responses.iter().find(|r| r.item_id != context.item_id) {
        return Err(PipelineError::Config(format!(
            "response {} belongs to item `{}`, task context is `{}`",
            r.response_id, r.item_id, context.item_id
        )));
    }
    if dataset.spec.score_range != context.score_range {
        return Err(PipelineError::Config(format!(
            "dataset range {} differs from task range {}",
            dataset.spec.score_range, context.score_range
        )));
    }
    match (config.mode, schema) {
        (Mode::Autoscore, None) => Err(PipelineError::Config(format!("no component schema for item `{}`", context.item_id))),
        (Mode::Autoscore, Some(s)) if s.item_id() != context.item_id => Err(PipelineError::Config(format!(
            "schema is for item `{}`, task context is `{}`",
            s.item_id(),
            context.item_id
        ))),
        _ => Ok(()),
    }
}

/// Scores every response of `dataset` into a fresh run directory.
pub fn score_dataset(
    config: &RunConfig,
    dataset: &Dataset,
    context: &TaskContext,
    schema: Option<&ComponentSchema>,
    backend: &dyn ChatBackend,
) -> Result<RunResult, PipelineError> {
    check_inputs(config, dataset, context, schema)?;
    let dir = &config.run_dir;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for name in [RECORDS_FILE, FAILURES_FILE, TIMING_FILE] {
        let p = dir.join(name);
        if p.exists() {
            fs::remove_file(&p).map_err(io_err(&p))?;
        }
    }
    let manifest = Manifest {
        mode: config.mode,
        model_name: config.settings.model_name.clone(),
        backend_identity: backend.identity(),
        dataset: dataset.spec.clone(),
        dataset_digest: dataset.digest(),
        dataset_size: dataset.len(),
        context: context.clone(),
        schema: if config.mode == Mode::Autoscore { schema.cloned() } else { None },
        config: config.snapshot(),
        started_at: now(),
        finished_at: None,
        records: 0,
        failures: 0,
    };
    write_manifest(dir, &manifest)?;
    execute(config, dataset, context, schema, backend, manifest, Vec::new())
}

/// Continues an interrupted run, skipping responses already persisted.
/// Failed responses are attempted again.
pub fn resume(
    config: &RunConfig,
    dataset: &Dataset,
    context: &TaskContext,
    schema: Option<&ComponentSchema>,
    backend: &dyn ChatBackend,
) -> Result<RunResult, PipelineError> {
    check_inputs(config, dataset, context, schema)?;
    let dir = &config.run_dir;
    let mut manifest = read_manifest(dir)?;
    let expect = |field: &'static str, expected: String, found: &str| {
        if expected == found {
            Ok(())
        } else {
            Err(PipelineError::ManifestMismatch { field, expected, found: found.to_string() })
        }
    };
    expect("mode", config.mode.to_string(), manifest.mode.as_str())?;
    expect("backend", backend.identity(), &manifest.backend_identity)?;
    expect("model_name", config.settings.model_name.clone(), &manifest.model_name)?;
    expect("item_id", context.item_id.clone(), &manifest.context.item_id)?;
    expect("dataset_digest", dataset.digest(), &manifest.dataset_digest)?;

    let records_path = dir.join(RECORDS_FILE);
    let (records, torn_at) = read_jsonl::<ScoredRecord>(&records_path)?;
    if let Some(len) = torn_at {
        log::warn!("{}: dropping torn final line", records_path.display());
        let f = OpenOptions::new().write(true).open(&records_path).map_err(io_err(&records_path))?;
        f.set_len(len).map_err(io_err(&records_path))?;
    }
    let ids: HashSet<&str> = dataset.responses.iter().map(|r| r.response_id.as_str()).collect();
    let mut seen = HashSet::new();
    let mut kept = Vec::with_capacity(records.len());
    for r in records {
        if !ids.contains(r.response_id.as_str()) || r.mode != config.mode {
            return Err(PipelineError::Corrupt {
                path: records_path.clone(),
                line_no: 0,
                reason: format!("record {} does not belong to this run", r.response_id),
            });
        }
        // A crash between the append and the final rewrite can leave duplicates.
        if seen.insert(r.response_id.clone()) {
            kept.push(r);
        }
    }
    manifest.finished_at = None;
    manifest.config = config.snapshot();
    write_manifest(dir, &manifest)?;
    execute(config, dataset, context, schema, backend, manifest, kept)
}

fn execute(
    config: &RunConfig,
    dataset: &Dataset,
    context: &TaskContext,
    schema: Option<&ComponentSchema>,
    backend: &dyn ChatBackend,
    mut manifest: Manifest,
    mut records: Vec<ScoredRecord>,
) -> Result<RunResult, PipelineError> {
    let dir = &config.run_dir;
    let done: HashSet<String> = records.iter().map(|r| r.response_id.clone()).collect();
    let pending: Vec<&StudentResponse> = dataset.responses.iter().filter(|r| !done.contains(&r.response_id)).collect();
    log::info!(
        "{} run on `{}`: {} of {} responses to score",
        config.mode,
        context.item_id,
        pending.len(),
        dataset.len()
    );

    let records_path = dir.join(RECORDS_FILE);
    let mut sink = OpenOptions::new().create(true).append(true).open(&records_path).map_err(io_err(&records_path))?;
    let agents = Agents::new(config.settings.clone(), config.templates.clone());
    let next = AtomicUsize::new(0);
    let stop = AtomicBool::new(false);
    let cancelled = || config.cancel.as_ref().is_some_and(|c| c.load(Ordering::SeqCst));
    let mut failures = Vec::new();
    let mut fatal: Option<PipelineError> = None;

    thread::scope(|s| {
        let (tx, rx) = mpsc::channel::<Outcome>();
        let workers = config.parallelism.min(pending.len()).max(1);
        for _ in 0..workers {
            let tx = tx.clone();
            let (agents, pending, next, stop) = (&agents, &pending, &next, &stop);
            s.spawn(move || loop {
                if stop.load(Ordering::SeqCst) || cancelled() {
                    break;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(response) = pending.get(i) else { break };
                let outcome = score_one(agents, backend, config.mode, context, schema, response);
                if tx.send(outcome).is_err() {
                    break;
                }
            });
        }
        drop(tx);

        let mut completed = 0usize;
        for outcome in rx {
            match outcome {
                Outcome::Scored(record) => {
                    let mut line = serde_json::to_vec(&*record).expect("record serializes");
                    line.push(b'\n');
                    if let Err(e) = sink.write_all(&line).and_then(|_| sink.sync_data()) {
                        fatal.get_or_insert(io_err(&records_path)(e));
                        stop.store(true, Ordering::SeqCst);
                    }
                    records.push(*record);
                }
                Outcome::Failed(f) => {
                    log::warn!("response {} failed: {}", f.response_id, f.error);
                    failures.push(f);
                }
                Outcome::Fatal(msg) => {
                    fatal.get_or_insert(PipelineError::Config(msg));
                    stop.store(true, Ordering::SeqCst);
                }
            }
            completed += 1;
            if config.progress_every > 0 && completed % config.progress_every == 0 {
                log::info!("{completed}/{} responses processed", pending.len());
            }
        }
    });
    drop(sink);

    if let Some(e) = fatal {
        return Err(e);
    }
    if records.len() + failures.len() < dataset.len() {
        return Err(PipelineError::Interrupted { persisted: records.len() });
    }

    records.sort_by(|a, b| compare_ids(&a.response_id, &b.response_id));
    failures.sort_by(|a, b| compare_ids(&a.response_id, &b.response_id));
    write_atomic(&records_path, &jsonl(&records))?;
    write_atomic(&dir.join(FAILURES_FILE), &jsonl(&failures))?;
    let timing_path = dir.join(TIMING_FILE);
    let timing = timing_csv(&records).map_err(|e| io_err(&timing_path)(e.into()))?;
    write_atomic(&timing_path, &timing)?;

    manifest.finished_at = Some(now());
    manifest.records = records.len();
    manifest.failures = failures.len();
    write_manifest(dir, &manifest)?;
    log::info!("run finished: {} records, {} failures", records.len(), failures.len());
    Ok(RunResult { records, failures, manifest })
}
