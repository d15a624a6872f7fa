use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use rubricscore::config::{BackendKind, Config, ConfigError};
use rubricscore::ingest::{self, IngestError};
use rubricscore::metrics::{self, GoldAnnotation, Imputation, MetricError, MetricsReport};
use rubricscore::model::Mode;
use rubricscore::pipeline::{self, FailureKind, PipelineError, RunConfig, RunResult};
use rubricscore::report::{self, ComparisonInput, MetricSummary, ReportError};

use crate::args::{BackendArg, CaseArgs, EvaluateArgs, ImputeArg, ModeArg, ScoreArgs, TradeoffArgs, ValidateArgs};

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_UNREACHABLE: u8 = 4;
const EXIT_OTHER: u8 = 1;

pub struct CliError {
    pub code: u8,
    pub source: anyhow::Error,
}

impl CliError {
    fn new(code: u8, source: impl Into<anyhow::Error>) -> Self {
        CliError { code, source: source.into() }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn config_error(e: ConfigError) -> CliError {
    CliError::new(EXIT_CONFIG, e)
}

fn pipeline_error(e: PipelineError) -> CliError {
    let code = match &e {
        PipelineError::Config(_) | PipelineError::ManifestMismatch { .. } | PipelineError::Io { .. } => EXIT_CONFIG,
        PipelineError::NoManifest { .. } | PipelineError::Corrupt { .. } => EXIT_DATA,
        PipelineError::Interrupted { .. } => EXIT_OTHER,
    };
    CliError::new(code, e)
}

fn metric_error(e: MetricError) -> CliError {
    CliError::new(EXIT_DATA, e)
}

fn io_error(context: String) -> impl FnOnce(std::io::Error) -> CliError {
    move |e| CliError::new(EXIT_OTHER, anyhow::Error::new(e).context(context))
}

fn write_file(path: &Path, contents: &str) -> CliResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_error(format!("creating {}", dir.display())))?;
    }
    fs::write(path, contents).map_err(io_error(format!("writing {}", path.display())))
}

fn load_run(dir: &Path) -> CliResult<RunResult> {
    let run = RunResult::load(dir).map_err(|e| CliError::new(EXIT_DATA, e))?;
    if !run.is_complete() {
        log::warn!("{}: run did not finish; using the records persisted so far", dir.display());
    }
    Ok(run)
}

fn mode_of(m: ModeArg) -> Mode {
    match m {
        ModeArg::Autoscore => Mode::Autoscore,
        ModeArg::Baseline => Mode::Baseline,
    }
}

pub fn score(a: &ScoreArgs) -> CliResult {
    let mut config = Config::load(&a.config).map_err(config_error)?;
    if let Some(model) = &a.model {
        config.backend.model_name = model.clone();
    }
    if let Some(r) = a.max_retries {
        config.run.max_retries = r;
    }
    if let Some(s) = a.seed {
        config.run.seed = s;
    }
    let item = config.item(&a.item).map_err(config_error)?;
    let mode = mode_of(a.mode);

    let mut dataset = ingest::load_dataset(&item.dataset).map_err(|e| CliError::new(EXIT_DATA, e))?;
    if let Some(fraction) = a.sample_fraction {
        dataset = ingest::sample(&dataset, fraction, config.run.seed).map_err(|e| match e {
            IngestError::InvalidFraction(_) => CliError::new(EXIT_CONFIG, e),
            other => CliError::new(EXIT_DATA, other),
        })?;
    }

    let kind = match a.backend {
        Some(BackendArg::Remote) => BackendKind::Remote,
        Some(BackendArg::Replay) => BackendKind::Replay,
        Some(BackendArg::Scripted) => BackendKind::Scripted,
        None => config.backend.kind,
    };
    let backend = config.open_backend(kind).map_err(config_error)?;

    let run_dir = match &a.out {
        Some(p) => p.clone(),
        None => config.resolve(&config.run.out_dir).join(format!("{}-{}", item.id, mode)),
    };
    let mut run = RunConfig::new(mode, config.agent_settings(), &run_dir);
    run.parallelism = a.parallelism.unwrap_or(config.run.parallelism);
    run.templates = item.templates.clone();
    run.cache_path = config.cache_path();
    run.seed = config.run.seed;
    run.progress_every = config.run.progress_every;

    let has_manifest = run_dir.join(pipeline::MANIFEST_FILE).exists();
    let result = if a.resume && has_manifest {
        pipeline::resume(&run, &dataset, &item.context, item.schema.as_ref(), &*backend)
    } else {
        if a.resume {
            log::info!("{}: nothing to resume, starting a new run", run_dir.display());
        }
        pipeline::score_dataset(&run, &dataset, &item.context, item.schema.as_ref(), &*backend)
    }
    .map_err(pipeline_error)?;

    println!("run dir:  {}", run_dir.display());
    println!("records:  {}", result.records.len());
    println!("failures: {}", result.failures.len());
    let mut kinds: Vec<(String, usize)> = Vec::new();
    for f in &result.failures {
        let k = serde_json::to_value(f.kind).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
        match kinds.iter_mut().find(|(name, _)| *name == k) {
            Some((_, n)) => *n += 1,
            None => kinds.push((k, 1)),
        }
    }
    for (k, n) in kinds {
        println!("  {k}: {n}");
    }

    let all_unreachable = !result.failures.is_empty() && result.failures.iter().all(|f| f.kind == FailureKind::Unreachable);
    if result.records.is_empty() && all_unreachable {
        return Err(CliError::new(EXIT_UNREACHABLE, anyhow!("backend unreachable: no response could be scored")));
    }
    Ok(())
}

fn run_label(dir: &Path) -> String {
    dir.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .filter(|n| !n.is_empty())
        .unwrap_or_else(|| "run".to_string())
}

pub fn evaluate(a: &EvaluateArgs) -> CliResult {
    let imputation = match a.impute {
        ImputeArg::Fail => Imputation::Fail,
        ImputeArg::Floor => Imputation::Floor,
    };
    let mut evaluated: Vec<(RunResult, MetricsReport)> = Vec::new();
    let mut labels = HashSet::new();
    for dir in &a.runs {
        let run = load_run(dir)?;
        let mut label = run_label(dir);
        let mut i = 2;
        while !labels.insert(label.clone()) {
            label = format!("{}-{i}", run_label(dir));
            i += 1;
        }
        let report = metrics::evaluate_run_with(&run, &label, imputation)
            .map_err(|e| CliError::new(EXIT_DATA, anyhow::Error::new(e).context(format!("evaluating {}", dir.display()))))?;
        write_file(&a.out.join(format!("{label}.metrics.json")), &(serde_json::to_string_pretty(&report).expect("report serializes") + "\n"))?;
        let text = report.render_text();
        write_file(&a.out.join(format!("{label}.metrics.txt")), &text)?;
        println!("{text}");
        evaluated.push((run, report));
    }

    let pairs = pair_runs(&evaluated)?;
    if !pairs.is_empty() {
        let inputs: Vec<ComparisonInput> = pairs
            .iter()
            .map(|&(b, s)| ComparisonInput {
                dataset: evaluated[b].0.manifest.context.item_id.clone(),
                model: evaluated[b].0.manifest.model_name.clone(),
                baseline: MetricSummary::from(&evaluated[b].1),
                autoscore: MetricSummary::from(&evaluated[s].1),
            })
            .collect();
        let table = report::comparison_table(&inputs);
        let md = table.to_markdown();
        write_file(&a.out.join("comparison.md"), &md)?;
        write_file(&a.out.join("comparison.json"), &table.to_json())?;
        println!("{md}");
    }
    Ok(())
}

/// Indices of (baseline, autoscore) pairs. Two runs of different modes are
/// always a pair; otherwise runs pair up by item and model.
fn pair_runs(evaluated: &[(RunResult, MetricsReport)]) -> CliResult<Vec<(usize, usize)>> {
    let mode = |i: usize| evaluated[i].0.manifest.mode;
    let mut pairs = Vec::new();
    if evaluated.len() == 2 && mode(0) != mode(1) {
        pairs.push(if mode(0) == Mode::Baseline { (0, 1) } else { (1, 0) });
    } else {
        let mut groups: HashMap<(String, String), Vec<usize>> = HashMap::new();
        let mut order = Vec::new();
        for (i, (run, _)) in evaluated.iter().enumerate() {
            let key = (run.manifest.context.item_id.clone(), run.manifest.model_name.clone());
            if !groups.contains_key(&key) {
                order.push(key.clone());
            }
            groups.entry(key).or_default().push(i);
        }
        for key in order {
            let members = &groups[&key];
            let b: Vec<usize> = members.iter().copied().filter(|&i| mode(i) == Mode::Baseline).collect();
            let s: Vec<usize> = members.iter().copied().filter(|&i| mode(i) == Mode::Autoscore).collect();
            match (b.as_slice(), s.as_slice()) {
                ([b], [s]) => pairs.push((*b, *s)),
                ([], _) | (_, []) => {}
                _ => log::warn!("{}/{}: several runs per mode; not compared", key.0, key.1),
            }
        }
    }
    for &(b, s) in &pairs {
        let (mb, ms) = (&evaluated[b].0.manifest, &evaluated[s].0.manifest);
        if mb.dataset_digest != ms.dataset_digest {
            return Err(CliError::new(
                EXIT_DATA,
                anyhow!(
                    "runs {} and {} were scored on different datasets (digest {} vs {})",
                    evaluated[b].1.label,
                    evaluated[s].1.label,
                    &mb.dataset_digest[..12.min(mb.dataset_digest.len())],
                    &ms.dataset_digest[..12.min(ms.dataset_digest.len())]
                ),
            ));
        }
    }
    Ok(pairs)
}

fn load_gold(path: &Path) -> CliResult<Vec<GoldAnnotation>> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::new(EXIT_DATA, anyhow::Error::new(e).context(format!("reading {}", path.display()))))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .with_context(|| format!("{}:{}", path.display(), i + 1))
                .map_err(|e| CliError::new(EXIT_DATA, e))
        })
        .collect()
}

pub fn validate_components(a: &ValidateArgs) -> CliResult {
    let run = load_run(&a.run)?;
    if run.manifest.mode != Mode::Autoscore {
        return Err(CliError::new(EXIT_CONFIG, anyhow!("{} is a {} run; component validation needs an autoscore run", a.run.display(), run.manifest.mode)));
    }
    let schema = run
        .manifest
        .schema
        .clone()
        .ok_or_else(|| CliError::new(EXIT_DATA, anyhow!("{}: manifest has no component schema", a.run.display())))?;
    let mut predicted = metrics::representations(&run).map_err(metric_error)?;
    let mut gold = load_gold(&a.gold)?;

    if let Some(fraction) = a.sample_fraction {
        let ids: Vec<String> = predicted.iter().map(|(id, _)| id.clone()).collect();
        let chosen: HashSet<String> = ingest::sample_ids(&ids, fraction, a.seed)
            .map_err(|e| CliError::new(EXIT_CONFIG, e))?
            .into_iter()
            .collect();
        predicted.retain(|(id, _)| chosen.contains(id));
        gold.retain(|g| chosen.contains(&g.response_id));
        log::info!("evaluating a sample of {} of {} responses", chosen.len(), ids.len());
    }
    let report = metrics::validate_components(&predicted, &gold, &schema).map_err(metric_error)?;
    print!("{}", report.render_text());
    if let Some(out) = &a.out {
        write_file(out, &(serde_json::to_string_pretty(&report).expect("report serializes") + "\n"))?;
    }
    Ok(())
}

pub fn tradeoff(a: &TradeoffArgs) -> CliResult {
    let runs = a.runs.iter().map(|d| load_run(d)).collect::<CliResult<Vec<_>>>()?;
    let csv = report::tradeoff_csv(&report::tradeoff_data(&runs));
    match &a.out {
        Some(path) => write_file(path, &csv),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

pub fn case(a: &CaseArgs) -> CliResult {
    let autoscore = load_run(&a.run_autoscore)?;
    let baseline = load_run(&a.run_baseline)?;
    let record = report::case_record(&autoscore, &baseline, &a.id).map_err(|e| match e {
        ReportError::WrongMode { .. } => CliError::new(EXIT_CONFIG, e),
        other => CliError::new(EXIT_DATA, other),
    })?;
    let md = record.to_markdown();
    match &a.out {
        Some(dir) => {
            let name: String = a.id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect();
            let path: PathBuf = dir.join(format!("case_{name}.md"));
            write_file(&path, &md)?;
            println!("{}", path.display());
            Ok(())
        }
        None => {
            print!("{md}");
            Ok(())
        }
    }
}
