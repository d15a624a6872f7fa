//! Agreement and error statistics between predicted and human scores, and
//! between extracted and hand-annotated components.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::model::{Mode, ScoreRange};
use crate::pipeline::{FailureRecord, RunResult};
use crate::schema::{ComponentSchema, FieldKind, StructuredRepresentation};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricError {
    #[error("no paired observations")]
    EmptyInput,
    #[error("length mismatch: {0} gold vs {1} predicted")]
    LengthMismatch(usize, usize),
    #[error("value {value} outside range {range}")]
    OutOfRange { value: i64, range: ScoreRange },
    #[error("zero variance: correlation undefined")]
    ZeroVariance,
    #[error("record {0} has no gold score")]
    NoGold(String),
    #[error("alignment error: missing gold for {missing:?}, unexpected gold for {extra:?}")]
    AlignmentError { missing: Vec<String>, extra: Vec<String> },
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
}

/// Gold and predicted scores on one declared scale.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairedScores {
    gold: Vec<i64>,
    pred: Vec<i64>,
    range: ScoreRange,
}

impl PairedScores {
    pub fn new(gold: Vec<i64>, pred: Vec<i64>, range: ScoreRange) -> Result<Self, MetricError> {
        if gold.len() != pred.len() {
            return Err(MetricError::LengthMismatch(gold.len(), pred.len()));
        }
        if gold.is_empty() {
            return Err(MetricError::EmptyInput);
        }
        if let Some(&value) = gold.iter().chain(&pred).find(|v| !range.contains(**v)) {
            return Err(MetricError::OutOfRange { value, range });
        }
        Ok(PairedScores { gold, pred, range })
    }

    pub fn len(&self) -> usize {
        self.gold.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gold.is_empty()
    }

    pub fn gold(&self) -> &[i64] {
        &self.gold
    }

    pub fn pred(&self) -> &[i64] {
        &self.pred
    }

    pub fn range(&self) -> ScoreRange {
        self.range
    }
}

/// Row = gold category, column = predicted category, over the full range.
pub fn confusion(p: &PairedScores) -> Vec<Vec<u64>> {
    let k = p.range.cardinality();
    let mut m = vec![vec![0u64; k]; k];
    for (&g, &y) in p.gold.iter().zip(&p.pred) {
        m[p.range.index_of(g)][p.range.index_of(y)] += 1;
    }
    m
}

pub fn accuracy(p: &PairedScores) -> f64 {
    let hits = p.gold.iter().zip(&p.pred).filter(|(g, y)| g == y).count();
    hits as f64 / p.len() as f64
}

/// Quadratic weighted kappa over the declared range.
///
/// Expected counts come from the outer product of the two marginals scaled
/// to `n`. When the expected disagreement is zero both raters put every
/// observation in one shared category, and the result is 1.
pub fn qwk(p: &PairedScores) -> f64 {
    let k = p.range.cardinality();
    let n = p.len() as f64;
    let observed = confusion(p);
    let mut gold_hist = vec![0.0; k];
    let mut pred_hist = vec![0.0; k];
    for (i, row) in observed.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            gold_hist[i] += c as f64;
            pred_hist[j] += c as f64;
        }
    }
    let scale = ((k - 1) * (k - 1)) as f64;
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..k {
        for j in 0..k {
            let w = ((i as f64 - j as f64).powi(2)) / scale;
            num += w * observed[i][j] as f64;
            den += w * gold_hist[i] * pred_hist[j] / n;
        }
    }
    if den == 0.0 {
        return 1.0;
    }
    1.0 - num / den
}

pub fn mae(p: &PairedScores) -> f64 {
    let total: i64 = p.gold.iter().zip(&p.pred).map(|(g, y)| (g - y).abs()).sum();
    total as f64 / p.len() as f64
}

pub fn rmse(p: &PairedScores) -> f64 {
    let total: i64 = p.gold.iter().zip(&p.pred).map(|(g, y)| (g - y) * (g - y)).sum();
    (total as f64 / p.len() as f64).sqrt()
}

/// Pearson correlation of two equally long real vectors.
pub fn pearson_f64(x: &[f64], y: &[f64]) -> Result<f64, MetricError> {
    if x.len() != y.len() {
        return Err(MetricError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(MetricError::ZeroVariance);
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(MetricError::ZeroVariance);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

fn as_f64(v: &[i64]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

pub fn pearson(p: &PairedScores) -> Result<f64, MetricError> {
    pearson_f64(&as_f64(&p.gold), &as_f64(&p.pred))
}

/// 1-based ranks with ties given their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && v[order[end]] == v[order[start]] {
            end += 1;
        }
        // positions start..end hold ranks start+1..=end
        let avg = (start + end + 1) as f64 / 2.0;
        for &idx in &order[start..end] {
            ranks[idx] = avg;
        }
        start = end;
    }
    ranks
}

pub fn spearman_f64(x: &[f64], y: &[f64]) -> Result<f64, MetricError> {
    pearson_f64(&average_ranks(x), &average_ranks(y))
}

pub fn spearman(p: &PairedScores) -> Result<f64, MetricError> {
    spearman_f64(&as_f64(&p.gold), &as_f64(&p.pred))
}

fn check_binary(gold: &[bool], pred: &[bool]) -> Result<(), MetricError> {
    if gold.len() != pred.len() {
        return Err(MetricError::LengthMismatch(gold.len(), pred.len()));
    }
    if gold.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    Ok(())
}

/// Cohen's kappa for two binary raters; 1 when chance agreement is 1.
pub fn cohen_kappa_binary(gold: &[bool], pred: &[bool]) -> Result<f64, MetricError> {
    check_binary(gold, pred)?;
    let n = gold.len() as f64;
    let observed = gold.iter().zip(pred).filter(|(a, b)| a == b).count() as f64 / n;
    let g_true = gold.iter().filter(|b| **b).count() as f64 / n;
    let p_true = pred.iter().filter(|b| **b).count() as f64 / n;
    let chance = g_true * p_true + (1.0 - g_true) * (1.0 - p_true);
    if (1.0 - chance).abs() < 1e-15 {
        return Ok(1.0);
    }
    Ok((observed - chance) / (1.0 - chance))
}

/// F1 with `true` as the positive class; 1 when neither side has positives.
pub fn f1_binary(gold: &[bool], pred: &[bool]) -> Result<f64, MetricError> {
    check_binary(gold, pred)?;
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    for (&g, &y) in gold.iter().zip(pred) {
        match (g, y) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (true, false) => fn_ += 1,
            (false, false) => {}
        }
    }
    if tp + fp + fn_ == 0 {
        return Ok(1.0);
    }
    if tp == 0 {
        return Ok(0.0);
    }
    let precision = tp as f64 / (tp + fp) as f64;
    let recall = tp as f64 / (tp + fn_) as f64;
    Ok(2.0 * precision * recall / (precision + recall))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountAgreement {
    pub mae: f64,
    pub rmse: f64,
    /// `None` when either side has zero variance.
    pub pearson: Option<f64>,
    pub exact_match_rate: f64,
}

pub fn count_agreement(gold: &[u64], pred: &[u64]) -> Result<CountAgreement, MetricError> {
    if gold.len() != pred.len() {
        return Err(MetricError::LengthMismatch(gold.len(), pred.len()));
    }
    if gold.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    let n = gold.len() as f64;
    let diffs: Vec<f64> = gold.iter().zip(pred).map(|(&g, &y)| g as f64 - y as f64).collect();
    let g: Vec<f64> = gold.iter().map(|&v| v as f64).collect();
    let y: Vec<f64> = pred.iter().map(|&v| v as f64).collect();
    Ok(CountAgreement {
        mae: diffs.iter().map(|d| d.abs()).sum::<f64>() / n,
        rmse: (diffs.iter().map(|d| d * d).sum::<f64>() / n).sqrt(),
        pearson: pearson_f64(&g, &y).ok(),
        exact_match_rate: gold.iter().zip(pred).filter(|(a, b)| a == b).count() as f64 / n,
    })
}

/// One row of a comparison table: the six headline metrics for a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub label: String,
    pub n: usize,
    pub failures: usize,
    pub accuracy: f64,
    pub qwk: f64,
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
    pub mae: f64,
    pub rmse: f64,
    pub range: ScoreRange,
    pub confusion: Vec<Vec<u64>>,
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "null".to_string(), |x| format!("{x:.4}"))
}

impl MetricsReport {
    pub fn from_pairs(label: impl Into<String>, p: &PairedScores, failures: usize) -> Self {
        MetricsReport {
            label: label.into(),
            n: p.len(),
            failures,
            accuracy: accuracy(p),
            qwk: qwk(p),
            pearson: pearson(p).ok(),
            spearman: spearman(p).ok(),
            mae: mae(p),
            rmse: rmse(p),
            range: p.range(),
            confusion: confusion(p),
        }
    }

    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "run       {}", self.label);
        let _ = writeln!(out, "n         {}", self.n);
        let _ = writeln!(out, "failures  {}", self.failures);
        for (name, v) in [
            ("qwk", Some(self.qwk)),
            ("accuracy", Some(self.accuracy)),
            ("pearson", self.pearson),
            ("spearman", self.spearman),
            ("mae", Some(self.mae)),
            ("rmse", Some(self.rmse)),
        ] {
            let _ = writeln!(out, "{name:<9} {}", cell(v));
        }
        let _ = writeln!(out, "\nconfusion (rows = gold, cols = predicted)");
        let labels: Vec<i64> = (self.range.min()..=self.range.max()).collect();
        let width = self
            .confusion
            .iter()
            .flatten()
            .map(|c| c.to_string().len())
            .chain(labels.iter().map(|l| l.to_string().len()))
            .max()
            .unwrap_or(1);
        let _ = write!(out, "{:>w$}", "", w = width);
        for l in &labels {
            let _ = write!(out, " {l:>width$}");
        }
        out.push('\n');
        for (l, row) in labels.iter().zip(&self.confusion) {
            let _ = write!(out, "{l:>width$}");
            for c in row {
                let _ = write!(out, " {c:>width$}");
            }
            out.push('\n');
        }
        out
    }
}

/// How failed responses enter the metrics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Imputation {
    /// Excluded; only counted.
    #[default]
    Fail,
    /// Scored as the range minimum.
    Floor,
}

pub fn evaluate_run(result: &RunResult, label: &str) -> Result<MetricsReport, MetricError> {
    evaluate_run_with(result, label, Imputation::Fail)
}

pub fn evaluate_run_with(result: &RunResult, label: &str, imputation: Imputation) -> Result<MetricsReport, MetricError> {
    let range = result.manifest.context.score_range;
    let mut gold = Vec::with_capacity(result.records.len());
    let mut pred = Vec::with_capacity(result.records.len());
    for r in &result.records {
        gold.push(r.gold_score.ok_or_else(|| MetricError::NoGold(r.response_id.clone()))?);
        pred.push(r.predicted_score);
    }
    if imputation == Imputation::Floor {
        for FailureRecord { response_id, gold_score, .. } in &result.failures {
            gold.push(gold_score.ok_or_else(|| MetricError::NoGold(response_id.clone()))?);
            pred.push(range.min());
        }
    }
    let pairs = PairedScores::new(gold, pred, range)?;
    Ok(MetricsReport::from_pairs(label, &pairs, result.failures.len()))
}

/// Hand-adjudicated component values for one response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldAnnotation {
    pub response_id: String,
    pub values: serde_json::Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BooleanAgreement {
    pub accuracy: f64,
    pub f1: f64,
    pub cohen_kappa: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityReport {
    pub schema_id: String,
    pub n: usize,
    pub boolean_fields: BTreeMap<String, BooleanAgreement>,
    pub count_fields: BTreeMap<String, CountAgreement>,
    /// Share of responses whose every count field matches gold; `None` when
    /// the schema has no count fields.
    pub exact_match_rate: Option<f64>,
}

impl ReliabilityReport {
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "schema {}  n={}", self.schema_id, self.n);
        if !self.boolean_fields.is_empty() {
            let _ = writeln!(out, "\n{:<24} {:>8} {:>8} {:>8}", "boolean field", "accuracy", "f1", "kappa");
            for (name, b) in &self.boolean_fields {
                let _ = writeln!(out, "{name:<24} {:>8.3} {:>8.3} {:>8.3}", b.accuracy, b.f1, b.cohen_kappa);
            }
        }
        if !self.count_fields.is_empty() {
            let _ = writeln!(out, "\n{:<24} {:>8} {:>8} {:>8} {:>8}", "count field", "mae", "rmse", "pearson", "exact");
            for (name, c) in &self.count_fields {
                let pearson = c.pearson.map_or_else(|| "null".to_string(), |p| format!("{p:.3}"));
                let _ = writeln!(
                    out,
                    "{name:<24} {:>8.3} {:>8.3} {:>8} {:>8.3}",
                    c.mae, c.rmse, pearson, c.exact_match_rate
                );
            }
        }
        if let Some(e) = self.exact_match_rate {
            let _ = writeln!(out, "\nall counts exact: {e:.3}");
        }
        out
    }
}

/// Compares extracted components with gold annotations field by field.
pub fn validate_components(
    predicted: &[(String, StructuredRepresentation)],
    gold: &[GoldAnnotation],
    schema: &ComponentSchema,
) -> Result<ReliabilityReport, MetricError> {
    if predicted.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    let gold_by_id: HashMap<&str, &GoldAnnotation> = gold.iter().map(|g| (g.response_id.as_str(), g)).collect();
    let pred_ids: HashSet<&str> = predicted.iter().map(|(id, _)| id.as_str()).collect();
    let mut missing: Vec<String> = pred_ids.iter().filter(|id| !gold_by_id.contains_key(*id)).map(|s| s.to_string()).collect();
    let mut extra: Vec<String> = gold_by_id.keys().filter(|id| !pred_ids.contains(*id)).map(|s| s.to_string()).collect();
    if !missing.is_empty() || !extra.is_empty() {
        missing.sort();
        extra.sort();
        return Err(MetricError::AlignmentError { missing, extra });
    }

    let mut boolean_fields = BTreeMap::new();
    let mut count_fields = BTreeMap::new();
    let mut all_counts_match = vec![true; predicted.len()];
    let mut has_counts = false;

    for field in schema.fields() {
        match field.kind {
            FieldKind::Boolean => {
                let mut g = Vec::new();
                let mut y = Vec::new();
                for (id, rep) in predicted {
                    g.push(gold_by_id[id.as_str()].values.get(&field.name).and_then(Value::as_bool).ok_or_else(|| {
                        MetricError::SchemaMismatch(format!("gold for {id} lacks boolean `{}`", field.name))
                    })?);
                    y.push(rep.get(&field.name).and_then(|v| v.as_bool()).ok_or_else(|| {
                        MetricError::SchemaMismatch(format!("prediction for {id} lacks boolean `{}`", field.name))
                    })?);
                }
                let hits = g.iter().zip(&y).filter(|(a, b)| a == b).count();
                boolean_fields.insert(
                    field.name.clone(),
                    BooleanAgreement {
                        accuracy: hits as f64 / g.len() as f64,
                        f1: f1_binary(&g, &y)?,
                        cohen_kappa: cohen_kappa_binary(&g, &y)?,
                    },
                );
            }
            FieldKind::Count => {
                has_counts = true;
                let mut g = Vec::new();
                let mut y = Vec::new();
                for (i, (id, rep)) in predicted.iter().enumerate() {
                    let gv = gold_by_id[id.as_str()].values.get(&field.name).and_then(Value::as_u64).ok_or_else(|| {
                        MetricError::SchemaMismatch(format!("gold for {id} lacks count `{}`", field.name))
                    })?;
                    let yv = rep.get(&field.name).and_then(|v| v.as_count()).ok_or_else(|| {
                        MetricError::SchemaMismatch(format!("prediction for {id} lacks count `{}`", field.name))
                    })?;
                    all_counts_match[i] &= gv == yv;
                    g.push(gv);
                    y.push(yv);
                }
                count_fields.insert(field.name.clone(), count_agreement(&g, &y)?);
            }
            FieldKind::TextList | FieldKind::Text => {}
        }
    }

    let n = predicted.len();
    Ok(ReliabilityReport {
        schema_id: schema.item_id().to_string(),
        n,
        boolean_fields,
        count_fields,
        exact_match_rate: has_counts.then(|| all_counts_match.iter().filter(|m| **m).count() as f64 / n as f64),
    })
}

/// Ensures `result` came from an autoscore run and pairs each record with
/// its representation.
pub fn representations(result: &RunResult) -> Result<Vec<(String, StructuredRepresentation)>, MetricError> {
    if result.manifest.mode != Mode::Autoscore {
        return Err(MetricError::SchemaMismatch("component validation needs an autoscore run".into()));
    }
    result
        .records
        .iter()
        .map(|r| {
            r.representation
                .clone()
                .map(|rep| (r.response_id.clone(), rep))
                .ok_or_else(|| MetricError::SchemaMismatch(format!("record {} has no representation", r.response_id)))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs(g: &[i64], y: &[i64], min: i64, max: i64) -> PairedScores {
        PairedScores::new(g.to_vec(), y.to_vec(), ScoreRange::new(min, max).unwrap()).unwrap()
    }

    const EPS: f64 = 1e-12;

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&pairs(&[0, 1, 2, 3], &[0, 1, 2, 3], 0, 3)), 1.0);
        assert_eq!(accuracy(&pairs(&[0, 1], &[1, 0], 0, 3)), 0.0);
        assert_eq!(accuracy(&pairs(&[0, 0, 1, 2], &[0, 1, 1, 3], 0, 3)), 0.5);
    }

    #[test]
    fn qwk_examples() {
        assert_eq!(qwk(&pairs(&[2, 0, 3, 1], &[2, 0, 3, 1], 0, 3)), 1.0);
        // sklearn cohen_kappa_score(weights="quadratic", labels=[0..3]) = 13/17
        assert!((qwk(&pairs(&[0, 0, 1, 2], &[0, 1, 1, 3], 0, 3)) - 13.0 / 17.0).abs() < EPS);
        assert_eq!(qwk(&pairs(&[0, 0, 0], &[0, 0, 0], 0, 3)), 1.0);
        // concentrated on different categories: well-defined, not degenerate
        assert!((qwk(&pairs(&[0, 0], &[3, 3], 0, 3)) - 0.0).abs() < EPS);
    }

    #[test]
    fn mae_rmse_examples() {
        let same = pairs(&[1, 2], &[1, 2], 0, 3);
        assert_eq!((mae(&same), rmse(&same)), (0.0, 0.0));
        let p = pairs(&[0, 2], &[1, 0], 0, 3);
        assert_eq!(mae(&p), 1.5);
        assert!((rmse(&p) - 2.5f64.sqrt()).abs() < EPS);
    }

    #[test]
    fn correlation_examples() {
        let p = pairs(&[0, 1, 2, 3], &[0, 1, 2, 3], 0, 3);
        assert!((pearson(&p).unwrap() - 1.0).abs() < EPS);
        assert!((spearman(&p).unwrap() - 1.0).abs() < EPS);
        let rev = pairs(&[0, 1, 2, 3], &[3, 2, 1, 0], 0, 3);
        assert!((pearson(&rev).unwrap() + 1.0).abs() < EPS);
        assert!((spearman(&rev).unwrap() + 1.0).abs() < EPS);
        // scipy.stats.pearsonr / spearmanr
        let t = pairs(&[0, 1, 1, 3], &[0, 2, 1, 3], 0, 3);
        assert!((pearson(&t).unwrap() - 0.9233805168766388).abs() < EPS);
        assert!((spearman(&t).unwrap() - 0.9486832980505139).abs() < EPS);
        assert_eq!(pearson(&pairs(&[1, 1], &[0, 2], 0, 3)), Err(MetricError::ZeroVariance));
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(average_ranks(&[10.0, 20.0, 20.0, 5.0]), vec![2.0, 3.5, 3.5, 1.0]);
    }

    #[test]
    fn kappa_examples() {
        let t = [true, false, true, false];
        assert_eq!(cohen_kappa_binary(&t, &t).unwrap(), 1.0);
        let k = cohen_kappa_binary(&[true, true, false, false], &[true, false, true, false]).unwrap();
        assert!(k.abs() < EPS);
        assert_eq!(cohen_kappa_binary(&[true; 3], &[true; 3]).unwrap(), 1.0);
        assert_eq!(cohen_kappa_binary(&[], &[]), Err(MetricError::EmptyInput));
    }

    #[test]
    fn f1_examples() {
        assert_eq!(f1_binary(&[true, false], &[true, false]).unwrap(), 1.0);
        assert_eq!(f1_binary(&[true, false], &[false, true]).unwrap(), 0.0);
        assert!((f1_binary(&[true, true, false], &[true, false, false]).unwrap() - 2.0 / 3.0).abs() < EPS);
        assert_eq!(f1_binary(&[false, false], &[false, false]).unwrap(), 1.0);
        assert_eq!(f1_binary(&[true, false], &[false, false]).unwrap(), 0.0);
    }

    #[test]
    fn count_agreement_examples() {
        let same = count_agreement(&[1, 2, 3], &[1, 2, 3]).unwrap();
        assert_eq!((same.mae, same.rmse, same.exact_match_rate), (0.0, 0.0, 1.0));
        assert!((same.pearson.unwrap() - 1.0).abs() < EPS);
        let flat = count_agreement(&[1, 1], &[1, 1]).unwrap();
        assert_eq!(flat.pearson, None);

        let c = count_agreement(&[1, 2, 0], &[1, 1, 0]).unwrap();
        assert!((c.mae - 1.0 / 3.0).abs() < EPS);
        assert!((c.exact_match_rate - 2.0 / 3.0).abs() < EPS);
        assert!((c.rmse - (1.0f64 / 3.0).sqrt()).abs() < EPS);
        assert!((c.pearson.unwrap() - 0.8660254037844386).abs() < EPS);
        assert_eq!(count_agreement(&[], &[]), Err(MetricError::EmptyInput));
    }

    #[test]
    fn paired_scores_validation() {
        let r = ScoreRange::new(0, 3).unwrap();
        assert!(PairedScores::new(vec![], vec![], r).is_err());
        assert!(PairedScores::new(vec![1], vec![1, 2], r).is_err());
        assert!(PairedScores::new(vec![4], vec![1], r).is_err());
    }

    #[test]
    fn report_text_has_every_metric() {
        let p = pairs(&[0, 0, 1, 2], &[0, 1, 1, 3], 0, 3);
        let report = MetricsReport::from_pairs("x", &p, 1);
        let text = report.render_text();
        for key in ["qwk", "accuracy", "pearson", "spearman", "mae", "rmse", "failures  1"] {
            assert!(text.contains(key), "{key}");
        }
        let flat = MetricsReport::from_pairs("flat", &pairs(&[1, 1], &[1, 1], 0, 3), 0);
        assert!(flat.render_text().contains("pearson   null"));
        let json = serde_json::to_value(&flat).unwrap();
        assert!(json["pearson"].is_null());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn scored() -> impl Strategy<Value = PairedScores> {
            (1i64..7).prop_flat_map(|width| {
                (1usize..40).prop_flat_map(move |n| {
                    (
                        prop::collection::vec(0..=width, n),
                        prop::collection::vec(0..=width, n),
                    )
                        .prop_map(move |(g, y)| PairedScores::new(g, y, ScoreRange::new(0, width).unwrap()).unwrap())
                })
            })
        }

        proptest! {
            #[test]
            fn report_invariants(p in scored()) {
                let r = MetricsReport::from_pairs("p", &p, 0);
                prop_assert!((0.0..=1.0).contains(&r.accuracy));
                prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&r.qwk));
                prop_assert!(r.mae <= r.rmse + 1e-12);
                let total: u64 = r.confusion.iter().flatten().sum();
                prop_assert_eq!(total as usize, p.len());
                let trace: u64 = (0..r.confusion.len()).map(|i| r.confusion[i][i]).sum();
                prop_assert!((r.accuracy - trace as f64 / p.len() as f64).abs() < 1e-12);
            }

            #[test]
            fn qwk_symmetric(p in scored()) {
                let swapped = PairedScores::new(p.pred().to_vec(), p.gold().to_vec(), p.range()).unwrap();
                prop_assert!((qwk(&p) - qwk(&swapped)).abs() < 1e-12);
            }

            #[test]
            fn qwk_one_iff_identical(p in scored()) {
                let identical = p.gold() == p.pred();
                let k = qwk(&p);
                if identical {
                    prop_assert_eq!(k, 1.0);
                } else {
                    prop_assert!(k < 1.0 - 1e-12);
                }
            }

            #[test]
            fn pearson_affine_invariant(
                x in prop::collection::vec(-50.0f64..50.0, 3..30),
                a in 0.1f64..10.0, b in -20.0f64..20.0,
            ) {
                let y: Vec<f64> = x.iter().enumerate().map(|(i, v)| v * 0.5 + (i % 3) as f64).collect();
                if let (Ok(r1), Ok(r2)) = (pearson_f64(&x, &y), pearson_f64(&x.iter().map(|v| a * v + b).collect::<Vec<_>>(), &y)) {
                    prop_assert!((r1 - r2).abs() < 1e-9);
                }
            }

            #[test]
            fn spearman_monotone_invariant(x in prop::collection::vec(-5i64..5, 3..30), y in prop::collection::vec(-5i64..5, 30)) {
                let x: Vec<f64> = x.iter().map(|&v| v as f64).collect();
                let y: Vec<f64> = y[..x.len()].iter().map(|&v| v as f64).collect();
                let transformed: Vec<f64> = x.iter().map(|v| v.powi(3) + 2.0 * v).collect();
                match (spearman_f64(&x, &y), spearman_f64(&transformed, &y)) {
                    (Ok(a), Ok(b)) => prop_assert!((a - b).abs() < 1e-12),
                    (Err(_), Err(_)) => {}
                    other => prop_assert!(false, "mismatch {:?}", other),
                }
            }
        }
    }
}
