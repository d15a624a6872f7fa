//! Baseline versus autoscore comparison tables, time/quality tradeoff data
//! and single-response audit records.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{self, MetricsReport, PairedScores};
use crate::model::{Mode, ScoredRecord};
use crate::pipeline::RunResult;
use crate::schema::{ComponentValue, StructuredRepresentation};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ReportError {
    #[error("delta undefined for a zero base value")]
    ZeroBase,
    #[error("response `{response_id}` not found in the {run} run")]
    NotFound { response_id: String, run: Mode },
    #[error("expected a {expected} run, got a {found} run")]
    WrongMode { expected: Mode, found: Mode },
}

/// Signed relative change in percent, relative to the magnitude of `base`.
/// Error metrics keep their raw sign, so an improvement there is negative.
pub fn delta_percent(base: f64, new: f64) -> Result<f64, ReportError> {
    if base == 0.0 {
        return Err(ReportError::ZeroBase);
    }
    Ok(100.0 * (new - base) / base.abs())
}

/// Rounds to two decimals, halves away from zero.
pub fn round2(x: f64) -> f64 {
    let r = (x * 100.0).round() / 100.0;
    if r == 0.0 {
        0.0
    } else {
        r
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Qwk,
    Accuracy,
    Pearson,
    Spearman,
    Mae,
    Rmse,
}

impl Metric {
    pub const ALL: [Metric; 6] = [Metric::Qwk, Metric::Accuracy, Metric::Pearson, Metric::Spearman, Metric::Mae, Metric::Rmse];

    pub fn label(self) -> &'static str {
        match self {
            Metric::Qwk => "QWK",
            Metric::Accuracy => "Accuracy",
            Metric::Pearson => "Pearson",
            Metric::Spearman => "Spearman",
            Metric::Mae => "MAE",
            Metric::Rmse => "RMSE",
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            Metric::Qwk => "qwk",
            Metric::Accuracy => "accuracy",
            Metric::Pearson => "pearson",
            Metric::Spearman => "spearman",
            Metric::Mae => "mae",
            Metric::Rmse => "rmse",
        }
    }

    pub fn higher_is_better(self) -> bool {
        !matches!(self, Metric::Mae | Metric::Rmse)
    }
}

/// The six headline values of one table cell group; `None` is an undefined
/// metric.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    #[serde(default)]
    pub n: Option<usize>,
    pub qwk: Option<f64>,
    pub accuracy: Option<f64>,
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
    pub mae: Option<f64>,
    pub rmse: Option<f64>,
}

impl MetricSummary {
    pub fn get(&self, m: Metric) -> Option<f64> {
        match m {
            Metric::Qwk => self.qwk,
            Metric::Accuracy => self.accuracy,
            Metric::Pearson => self.pearson,
            Metric::Spearman => self.spearman,
            Metric::Mae => self.mae,
            Metric::Rmse => self.rmse,
        }
    }
}

impl From<&MetricsReport> for MetricSummary {
    fn from(r: &MetricsReport) -> Self {
        MetricSummary {
            n: Some(r.n),
            qwk: Some(r.qwk),
            accuracy: Some(r.accuracy),
            pearson: r.pearson,
            spearman: r.spearman,
            mae: Some(r.mae),
            rmse: Some(r.rmse),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonInput {
    pub dataset: String,
    pub model: String,
    pub baseline: MetricSummary,
    pub autoscore: MetricSummary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Better {
    Baseline,
    Autoscore,
    Tie,
    Undefined,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricComparison {
    pub metric: Metric,
    pub baseline: Option<f64>,
    pub autoscore: Option<f64>,
    /// Unrounded; `None` when either side is undefined or the base is zero.
    pub delta_percent: Option<f64>,
    pub better: Better,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub dataset: String,
    pub model: String,
    pub baseline_n: Option<usize>,
    pub autoscore_n: Option<usize>,
    pub metrics: Vec<MetricComparison>,
}

impl ComparisonRow {
    pub fn metric(&self, m: Metric) -> &MetricComparison {
        self.metrics.iter().find(|c| c.metric == m).expect("every metric present")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
    pub warnings: Vec<String>,
}

fn compare(m: Metric, base: Option<f64>, new: Option<f64>) -> MetricComparison {
    let (delta, better) = match (base, new) {
        (Some(b), Some(a)) => {
            let better = if a == b {
                Better::Tie
            } else if (a > b) == m.higher_is_better() {
                Better::Autoscore
            } else {
                Better::Baseline
            };
            (delta_percent(b, a).ok(), better)
        }
        _ => (None, Better::Undefined),
    };
    MetricComparison { metric: m, baseline: base, autoscore: new, delta_percent: delta, better }
}

pub fn comparison_table(inputs: &[ComparisonInput]) -> ComparisonTable {
    let mut warnings = Vec::new();
    let rows = inputs
        .iter()
        .map(|input| {
            if let (Some(b), Some(a)) = (input.baseline.n, input.autoscore.n) {
                if a != b {
                    let w = format!(
                        "{} / {}: baseline scored {b} responses, autoscore {a}; metrics cover different sets",
                        input.dataset, input.model
                    );
                    log::warn!("{w}");
                    warnings.push(w);
                }
            }
            ComparisonRow {
                dataset: input.dataset.clone(),
                model: input.model.clone(),
                baseline_n: input.baseline.n,
                autoscore_n: input.autoscore.n,
                metrics: Metric::ALL
                    .iter()
                    .map(|&m| compare(m, input.baseline.get(m), input.autoscore.get(m)))
                    .collect(),
            }
        })
        .collect();
    ComparisonTable { rows, warnings }
}

const NULL_CELL: &str = "—";

fn value_cell(v: Option<f64>, bold: bool) -> String {
    match v {
        None => NULL_CELL.to_string(),
        Some(x) if bold => format!("**{x:.3}**"),
        Some(x) => format!("{x:.3}"),
    }
}

fn delta_cell(d: Option<f64>) -> String {
    match d {
        None => NULL_CELL.to_string(),
        Some(x) => {
            let r = round2(x);
            if r > 0.0 {
                format!("+{r:.2}%")
            } else {
                format!("{r:.2}%")
            }
        }
    }
}

impl ComparisonTable {
    pub fn to_markdown(&self) -> String {
        let mut out = String::from("| Dataset | Model |");
        for m in Metric::ALL {
            let arrow = if m.higher_is_better() { "↑" } else { "↓" };
            let _ = write!(out, " {}{arrow} |", m.label());
        }
        out.push_str("\n|---|---|");
        out.push_str(&"---:|".repeat(Metric::ALL.len()));
        out.push('\n');
        for row in &self.rows {
            let mut base = format!("| {} | {} |", row.dataset, row.model);
            let mut auto = "| | + autoscore |".to_string();
            let mut delta = "| | Δ (%) |".to_string();
            for c in &row.metrics {
                let tie = c.better == Better::Tie;
                let _ = write!(base, " {} |", value_cell(c.baseline, tie || c.better == Better::Baseline));
                let _ = write!(auto, " {} |", value_cell(c.autoscore, tie || c.better == Better::Autoscore));
                let _ = write!(delta, " {} |", delta_cell(c.delta_percent));
            }
            for line in [base, auto, delta] {
                out.push_str(&line);
                out.push('\n');
            }
        }
        if !self.warnings.is_empty() {
            out.push('\n');
            for w in &self.warnings {
                let _ = writeln!(out, "> warning: {w}");
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("table serializes");
        s.push('\n');
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffRow {
    pub model: String,
    pub variant: Mode,
    pub n: usize,
    pub mean_ms: f64,
    pub qwk: Option<f64>,
}

/// One row per (model, variant): mean per-response wall time over scored
/// records, and QWK over the same records. Runs sharing a key are pooled.
pub fn tradeoff_data(runs: &[RunResult]) -> Vec<TradeoffRow> {
    let mut groups: Vec<((String, Mode), Vec<&RunResult>)> = Vec::new();
    for run in runs {
        let key = (run.manifest.model_name.clone(), run.manifest.mode);
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, members)) => members.push(run),
            None => groups.push((key, vec![run])),
        }
    }
    groups
        .into_iter()
        .filter_map(|((model, variant), members)| {
            let records: Vec<&ScoredRecord> = members.iter().flat_map(|r| &r.records).collect();
            if records.is_empty() {
                return None;
            }
            let total: u64 = records.iter().map(|r| r.wall_time_ms).sum();
            let range = members[0].manifest.context.score_range;
            let same_range = members.iter().all(|m| m.manifest.context.score_range == range);
            let qwk = records
                .iter()
                .map(|r| r.gold_score.map(|g| (g, r.predicted_score)))
                .collect::<Option<Vec<_>>>()
                .filter(|_| same_range)
                .and_then(|pairs| {
                    let (gold, pred) = pairs.into_iter().unzip();
                    PairedScores::new(gold, pred, range).ok()
                })
                .map(|p| metrics::qwk(&p));
            Some(TradeoffRow { model, variant, n: records.len(), mean_ms: total as f64 / records.len() as f64, qwk })
        })
        .collect()
}

pub fn tradeoff_csv(rows: &[TradeoffRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["model", "variant", "mean_ms", "qwk"]).expect("in-memory write");
    for r in rows {
        w.write_record([
            r.model.clone(),
            r.variant.to_string(),
            r.mean_ms.to_string(),
            r.qwk.map(|q| q.to_string()).unwrap_or_default(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv output is utf-8")
}

/// Audit view of one response scored by both variants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub response_id: String,
    pub item_id: String,
    pub question: String,
    pub response_text: String,
    pub rubric_excerpt: String,
    pub components: StructuredRepresentation,
    pub gold: Option<i64>,
    pub autoscore: i64,
    pub baseline: i64,
}

const QUESTION_EXCERPT_CHARS: usize = 400;
const RUBRIC_EXCERPT_CHARS: usize = 800;

/// At most `max` characters, cut at a word boundary when possible.
pub fn excerpt(text: &str, max: usize) -> String {
    let text = text.trim();
    if text.chars().count() <= max {
        return text.to_string();
    }
    let cut: String = text.chars().take(max).collect();
    let cut = match cut.rfind(char::is_whitespace) {
        Some(i) if i > max / 2 => &cut[..i],
        _ => cut.as_str(),
    };
    format!("{} ...", cut.trim_end())
}

fn find_record<'a>(run: &'a RunResult, response_id: &str) -> Result<&'a ScoredRecord, ReportError> {
    run.records.iter().find(|r| r.response_id == response_id).ok_or(ReportError::NotFound {
        response_id: response_id.to_string(),
        run: run.manifest.mode,
    })
}

pub fn case_record(autoscore: &RunResult, baseline: &RunResult, response_id: &str) -> Result<CaseRecord, ReportError> {
    for (run, expected) in [(autoscore, Mode::Autoscore), (baseline, Mode::Baseline)] {
        if run.manifest.mode != expected {
            return Err(ReportError::WrongMode { expected, found: run.manifest.mode });
        }
    }
    let a = find_record(autoscore, response_id)?;
    let b = find_record(baseline, response_id)?;
    let ctx = &autoscore.manifest.context;
    let response_text = if a.response_text.is_empty() { b.response_text.clone() } else { a.response_text.clone() };
    Ok(CaseRecord {
        response_id: response_id.to_string(),
        item_id: ctx.item_id.clone(),
        question: excerpt(&ctx.question, QUESTION_EXCERPT_CHARS),
        response_text,
        rubric_excerpt: excerpt(&ctx.rubric_text, RUBRIC_EXCERPT_CHARS),
        components: a.representation.clone().expect("autoscore records carry a representation"),
        gold: a.gold_score.or(b.gold_score),
        autoscore: a.predicted_score,
        baseline: b.predicted_score,
    })
}

fn humanize(field: &str) -> String {
    let words = field.replace('_', " ");
    let mut chars = words.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().chain(chars).collect(),
        None => words,
    }
}

fn quote(out: &mut String, text: &str) {
    for line in text.lines() {
        let _ = writeln!(out, "> {line}");
    }
    out.push('\n');
}

impl CaseRecord {
    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# Case {} ({})\n", self.response_id, self.item_id);
        let gold = self.gold.map_or_else(|| "n/a".to_string(), |g| g.to_string());
        let _ = writeln!(out, "*Human score = {gold}, autoscore = {}, baseline = {}*\n", self.autoscore, self.baseline);
        let _ = writeln!(out, "**Assessment question**\n");
        quote(&mut out, &self.question);
        let _ = writeln!(out, "**Student response**\n");
        quote(&mut out, &self.response_text);
        let _ = writeln!(out, "**Rubric excerpt**\n");
        quote(&mut out, &self.rubric_excerpt);
        let _ = writeln!(out, "**Extracted components**\n");
        for (name, value) in &self.components.values {
            let label = humanize(name);
            match value {
                ComponentValue::TextList(items) if items.is_empty() => {
                    let _ = writeln!(out, "- **{label}:** (none)");
                }
                ComponentValue::TextList(items) => {
                    let _ = writeln!(out, "- **{label}:**");
                    for item in items {
                        let _ = writeln!(out, "  - {item}");
                    }
                }
                ComponentValue::Text(t) => {
                    let _ = writeln!(out, "- **{label}:** {t}");
                }
                ComponentValue::Boolean(b) => {
                    let _ = writeln!(out, "- **{label}:** {}", if *b { "yes" } else { "no" });
                }
                ComponentValue::Count(c) => {
                    let _ = writeln!(out, "- **{label}:** {c}");
                }
            }
        }
        if !self.components.inconsistency_flags.is_empty() {
            let _ = writeln!(out, "\nCounts corrected from their lists: {}", self.components.inconsistency_flags.join(", "));
        }
        let _ = writeln!(out, "\n```json\n{}\n```", self.components.pretty_json());
        out
    }
}
