//! ASAP short-answer (SAS) and essay (AES) TSV loaders.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{ModelError, ScoreRange, StudentResponse};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: missing column `{column}`")]
    MissingColumn { path: PathBuf, column: String },
    #[error("{path}:{line_no}: {reason}")]
    MalformedRow { path: PathBuf, line_no: usize, reason: String },
    #[error("{path}: no rows for essay set {essay_set}")]
    EmptySelection { path: PathBuf, essay_set: u32 },
    #[error("gold rule `resolved_column` is not available for {0:?} data")]
    UnsupportedGoldRule(Family),
    #[error("essay_set must be positive")]
    InvalidEssaySet,
    #[error("duplicate response id `{0}`")]
    DuplicateId(String),
    #[error("sample fraction {0} outside (0, 1]")]
    InvalidFraction(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Sas,
    Aes,
}

/// Which human score becomes the gold label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GoldRule {
    #[default]
    FirstRater,
    ResolvedColumn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub family: Family,
    pub tsv_path: PathBuf,
    pub essay_set: u32,
    #[serde(default)]
    pub gold_rule: GoldRule,
    pub item_id: String,
    pub score_range: ScoreRange,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub responses: Vec<StudentResponse>,
}

/// Total order on response ids: all-digit ids first in numeric order, then
/// everything else lexicographically.
pub fn compare_ids(a: &str, b: &str) -> Ordering {
    fn key(s: &str) -> (u8, usize, &str) {
        if !s.is_empty() && s.bytes().all(|c| c.is_ascii_digit()) {
            let t = s.trim_start_matches('0');
            (0, t.len(), t)
        } else {
            (1, 0, s)
        }
    }
    key(a).cmp(&key(b)).then_with(|| a.cmp(b))
}

impl Dataset {
    pub fn new(spec: DatasetSpec, mut responses: Vec<StudentResponse>) -> Result<Self, IngestError> {
        let mut seen = HashSet::new();
        for r in &responses {
            if !seen.insert(r.response_id.as_str()) {
                return Err(IngestError::DuplicateId(r.response_id.clone()));
            }
        }
        responses.sort_by(|a, b| compare_ids(&a.response_id, &b.response_id));
        Ok(Dataset { spec, responses })
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }

    /// SHA-256 over every response id and text, in id order.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for r in &self.responses {
            h.update((r.response_id.len() as u64).to_le_bytes());
            h.update(r.response_id.as_bytes());
            h.update((r.text.len() as u64).to_le_bytes());
            h.update(r.text.as_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Keeps only the given ids, preserving order.
    pub fn restrict(&self, ids: &HashSet<String>) -> Dataset {
        Dataset {
            spec: self.spec.clone(),
            responses: self.responses.iter().filter(|r| ids.contains(&r.response_id)).cloned().collect(),
        }
    }
}

/// Decodes one line as UTF-8, falling back to Latin-1.
fn decode_line(bytes: &[u8]) -> String {
    match std::str::from_utf8(bytes) {
        Ok(s) => s.to_string(),
        Err(_) => bytes.iter().map(|&b| b as char).collect(),
    }
}

struct Table {
    header: Vec<String>,
    rows: Vec<(usize, Vec<String>)>,
}

fn read_tsv(path: &Path) -> Result<Table, IngestError> {
    let raw = std::fs::read(path).map_err(|source| IngestError::Io { path: path.to_path_buf(), source })?;
    let mut lines = raw
        .split(|b| *b == b'\n')
        .map(|l| l.strip_suffix(b"\r").unwrap_or(l))
        .enumerate()
        .filter(|(_, l)| !l.is_empty());
    let header = match lines.next() {
        Some((_, l)) => decode_line(l).split('\t').map(|c| c.trim().to_string()).collect(),
        None => Vec::new(),
    };
    let rows = lines
        .map(|(i, l)| (i + 1, decode_line(l).split('\t').map(str::to_string).collect()))
        .collect();
    Ok(Table { header, rows })
}

impl Table {
    fn column(&self, path: &Path, name: &str) -> Result<usize, IngestError> {
        self.header.iter().position(|h| h == name).ok_or_else(|| IngestError::MissingColumn {
            path: path.to_path_buf(),
            column: name.to_string(),
        })
    }
}

struct Layout {
    id: &'static str,
    set: &'static str,
    text: &'static str,
    first_rater: &'static str,
    others: &'static [&'static str],
    resolved: Option<&'static str>,
}

const SAS_LAYOUT: Layout = Layout {
    id: "Id",
    set: "EssaySet",
    text: "EssayText",
    first_rater: "Score1",
    others: &["Score2"],
    resolved: None,
};

const AES_LAYOUT: Layout = Layout {
    id: "essay_id",
    set: "essay_set",
    text: "essay",
    first_rater: "rater1_domain1",
    others: &["rater2_domain1", "domain1_score"],
    resolved: Some("domain1_score"),
};

fn load(spec: &DatasetSpec, layout: &Layout) -> Result<Dataset, IngestError> {
    if spec.essay_set == 0 {
        return Err(IngestError::InvalidEssaySet);
    }
    let gold_col_name = match spec.gold_rule {
        GoldRule::FirstRater => layout.first_rater,
        GoldRule::ResolvedColumn => layout.resolved.ok_or(IngestError::UnsupportedGoldRule(spec.family))?,
    };
    let path = spec.tsv_path.as_path();
    let table = read_tsv(path)?;
    let id_col = table.column(path, layout.id)?;
    let set_col = table.column(path, layout.set)?;
    let text_col = table.column(path, layout.text)?;
    table.column(path, layout.first_rater)?;
    for other in layout.others {
        table.column(path, other)?;
    }
    let gold_col = table.column(path, gold_col_name)?;
    let needed = [id_col, set_col, text_col, gold_col].into_iter().max().unwrap_or(0);

    let malformed = |line_no: usize, reason: String| IngestError::MalformedRow {
        path: path.to_path_buf(),
        line_no,
        reason,
    };
    let mut responses = Vec::new();
    for (line_no, row) in &table.rows {
        if row.len() <= needed {
            return Err(malformed(*line_no, format!("expected at least {} columns, found {}", needed + 1, row.len())));
        }
        let set: u32 = row[set_col]
            .trim()
            .parse()
            .map_err(|_| malformed(*line_no, format!("bad essay set `{}`", row[set_col])))?;
        if set != spec.essay_set {
            continue;
        }
        let gold: i64 = row[gold_col]
            .trim()
            .parse()
            .map_err(|_| malformed(*line_no, format!("bad {gold_col_name} `{}`", row[gold_col])))?;
        let response = StudentResponse::new(
            row[id_col].trim(),
            spec.item_id.clone(),
            row[text_col].clone(),
            Some(gold),
            spec.score_range,
        )
        .map_err(|e| match e {
            ModelError::OutOfRange { value, range } => {
                malformed(*line_no, format!("{gold_col_name} {value} outside {range}"))
            }
            other => malformed(*line_no, other.to_string()),
        })?;
        responses.push(response);
    }
    if responses.is_empty() {
        return Err(IngestError::EmptySelection { path: path.to_path_buf(), essay_set: spec.essay_set });
    }
    Dataset::new(spec.clone(), responses)
}

/// Loads an ASAP-SAS file (`Id EssaySet Score1 Score2 EssayText`).
pub fn load_sas(spec: &DatasetSpec) -> Result<Dataset, IngestError> {
    load(spec, &SAS_LAYOUT)
}

/// Loads an ASAP-AES file (`essay_id essay_set essay rater1_domain1
/// rater2_domain1 domain1_score ...`).
pub fn load_aes(spec: &DatasetSpec) -> Result<Dataset, IngestError> {
    load(spec, &AES_LAYOUT)
}

pub fn load_dataset(spec: &DatasetSpec) -> Result<Dataset, IngestError> {
    match spec.family {
        Family::Sas => load_sas(spec),
        Family::Aes => load_aes(spec),
    }
}

/// Sample size for `fraction` of `n`, rounding halves up.
pub fn sample_size(fraction: f64, n: usize) -> usize {
    // Snap away representation error (0.2 * 1850 = 370.00000000000006) before
    // rounding so genuine halves still round up.
    let exact = (fraction * n as f64 * 1e6).round() / 1e6;
    ((exact + 0.5).floor().max(0.0) as usize).min(n)
}

/// Draws `round(fraction * n)` response ids, determined by `seed` and the
/// set of ids alone. Returned in id order.
pub fn sample_ids(ids: &[String], fraction: f64, seed: u64) -> Result<Vec<String>, IngestError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(IngestError::InvalidFraction(fraction));
    }
    let mut sorted: Vec<String> = ids.to_vec();
    sorted.sort_by(|a, b| compare_ids(a, b));
    sorted.dedup();
    let k = sample_size(fraction, sorted.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sorted.shuffle(&mut rng);
    let mut chosen: Vec<String> = sorted.into_iter().take(k).collect();
    chosen.sort_by(|a, b| compare_ids(a, b));
    Ok(chosen)
}

pub fn sample(dataset: &Dataset, fraction: f64, seed: u64) -> Result<Dataset, IngestError> {
    let ids: Vec<String> = dataset.responses.iter().map(|r| r.response_id.clone()).collect();
    let chosen: HashSet<String> = sample_ids(&ids, fraction, seed)?.into_iter().collect();
    Ok(dataset.restrict(&chosen))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(family: Family, path: &Path, set: u32, range: (i64, i64)) -> DatasetSpec {
        DatasetSpec {
            family,
            tsv_path: path.to_path_buf(),
            essay_set: set,
            gold_rule: GoldRule::FirstRater,
            item_id: "item".into(),
            score_range: ScoreRange::new(range.0, range.1).unwrap(),
        }
    }

    fn write(dir: &tempfile::TempDir, name: &str, content: &[u8]) -> PathBuf {
        let p = dir.path().join(name);
        std::fs::write(&p, content).unwrap();
        p
    }

    #[test]
    fn sas_filters_by_set() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "sas.tsv", b"Id\tEssaySet\tScore1\tScore2\tEssayText\n1\t1\t2\t1\tMore trials.\n2\t2\t1\t1\tOther item.\n");
        let ds = load_sas(&spec(Family::Sas, &p, 1, (0, 3))).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.responses[0].gold_score, Some(2));
        assert_eq!(ds.responses[0].text, "More trials.");
    }

    #[test]
    fn sas_out_of_range_gold_is_malformed() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "sas.tsv", b"Id\tEssaySet\tScore1\tScore2\tEssayText\n1\t1\t4\t1\tx\n");
        match load_sas(&spec(Family::Sas, &p, 1, (0, 3))) {
            Err(IngestError::MalformedRow { line_no: 2, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn sas_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "sas.tsv", b"Id\tEssaySet\tScore1\tEssayText\n1\t1\t2\tx\n");
        assert!(matches!(load_sas(&spec(Family::Sas, &p, 1, (0, 3))), Err(IngestError::MissingColumn { column, .. }) if column == "Score2"));

        let p = write(&dir, "sas2.tsv", b"Id\tEssaySet\tScore1\tScore2\tEssayText\n1\t1\t2\t2\tx\n");
        assert!(matches!(load_sas(&spec(Family::Sas, &p, 5, (0, 3))), Err(IngestError::EmptySelection { .. })));

        let p = write(&dir, "sas3.tsv", b"Id\tEssaySet\tScore1\tScore2\tEssayText\n1\t1\ttwo\t2\tx\n");
        assert!(matches!(load_sas(&spec(Family::Sas, &p, 1, (0, 3))), Err(IngestError::MalformedRow { .. })));

        let p = write(&dir, "sas4.tsv", b"Id\tEssaySet\tScore1\tScore2\tEssayText\n1\t1\t2\n");
        assert!(matches!(load_sas(&spec(Family::Sas, &p, 1, (0, 3))), Err(IngestError::MalformedRow { .. })));

        let mut resolved = spec(Family::Sas, &p, 1, (0, 3));
        resolved.gold_rule = GoldRule::ResolvedColumn;
        assert!(matches!(load_sas(&resolved), Err(IngestError::UnsupportedGoldRule(Family::Sas))));
    }

    #[test]
    fn text_kept_verbatim_with_latin1_fallback() {
        let dir = tempfile::tempdir().unwrap();
        let mut content = b"Id\tEssaySet\tScore1\tScore2\tEssayText\r\n".to_vec();
        content.extend_from_slice(b"7\t1\t1\t1\t  @CAPS1 caf\xe9 \"quoted\"  \r\n");
        content.extend_from_slice("8\t1\t0\t0\tna\u{ef}ve\r\n".as_bytes());
        let p = write(&dir, "sas.tsv", &content);
        let ds = load_sas(&spec(Family::Sas, &p, 1, (0, 3))).unwrap();
        assert_eq!(ds.responses[0].text, "  @CAPS1 café \"quoted\"  ");
        assert_eq!(ds.responses[1].text, "naïve");
    }

    #[test]
    fn aes_gold_rules() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            "aes.tsv",
            b"essay_id\tessay_set\tessay\trater1_domain1\trater2_domain1\trater3_domain1\tdomain1_score\n\
              1\t1\tDear editor\t4\t4\t\t8\n2\t1\tComputers help\t3\t4\t\t7\n3\t2\tOther\t2\t2\t\t4\n",
        );
        let ds = load_aes(&spec(Family::Aes, &p, 1, (1, 6))).unwrap();
        assert_eq!(ds.responses.iter().map(|r| r.gold_score.unwrap()).collect::<Vec<_>>(), vec![4, 3]);

        let mut resolved = spec(Family::Aes, &p, 1, (2, 12));
        resolved.gold_rule = GoldRule::ResolvedColumn;
        let ds = load_aes(&resolved).unwrap();
        assert_eq!(ds.responses.iter().map(|r| r.gold_score.unwrap()).collect::<Vec<_>>(), vec![8, 7]);

        let p = write(&dir, "aes2.tsv", b"essay_id\tessay_set\trater1_domain1\trater2_domain1\tdomain1_score\n1\t1\t4\t4\t8\n");
        assert!(matches!(load_aes(&spec(Family::Aes, &p, 1, (1, 6))), Err(IngestError::MissingColumn { column, .. }) if column == "essay"));
    }

    #[test]
    fn loading_is_order_stable() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "sas.tsv", b"Id\tEssaySet\tScore1\tScore2\tEssayText\n10\t1\t2\t1\ta\n9\t1\t1\t1\tb\n100\t1\t0\t1\tc\n");
        let s = spec(Family::Sas, &p, 1, (0, 3));
        let a = load_sas(&s).unwrap();
        let b = load_sas(&s).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        let ids: Vec<_> = a.responses.iter().map(|r| r.response_id.as_str()).collect();
        assert_eq!(ids, ["9", "10", "100"]);
        assert_eq!(a.digest(), b.digest());
    }

    #[test]
    fn id_order_is_total() {
        let mut ids = vec!["2", "10", "1a", "b", "01", "1"];
        ids.sort_by(|a, b| compare_ids(a, b));
        assert_eq!(ids, ["01", "1", "2", "10", "1a", "b"]);
    }

    #[test]
    fn sample_sizes() {
        assert_eq!(sample_size(0.2, 1290), 258);
        assert_eq!(sample_size(0.2, 1850), 370);
        assert_eq!(sample_size(1.0, 17), 17);
        assert_eq!(sample_size(0.5, 5), 3);
        assert_eq!(sample_size(0.25, 10), 3);
        assert_eq!(sample_size(0.01, 10), 0);
    }

    #[test]
    fn sample_is_seeded_and_order_independent() {
        let ids: Vec<String> = (0..1290).map(|i| i.to_string()).collect();
        let a = sample_ids(&ids, 0.2, 7).unwrap();
        assert_eq!(a.len(), 258);
        assert_eq!(a, sample_ids(&ids, 0.2, 7).unwrap());
        let mut reversed = ids.clone();
        reversed.reverse();
        assert_eq!(a, sample_ids(&reversed, 0.2, 7).unwrap());
        assert_ne!(a, sample_ids(&ids, 0.2, 8).unwrap());
        assert_eq!(sample_ids(&ids, 1.0, 3).unwrap().len(), 1290);
        assert!(sample_ids(&ids, 0.0, 3).is_err());
        assert!(sample_ids(&ids, 1.5, 3).is_err());
    }
}
