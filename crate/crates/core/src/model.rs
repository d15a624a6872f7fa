//! Domain types shared across the pipeline: score scales, task context,
//! student responses and persisted scoring records.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schema::StructuredRepresentation;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("invalid score range {min}..{max}: need 0 <= min < max")]
    InvalidRange { min: i64, max: i64 },
    #[error("score {value} outside range {range}")]
    OutOfRange { value: i64, range: ScoreRange },
    #[error("{0} must not be empty")]
    Empty(&'static str),
    #[error("record {response_id}: {reason}")]
    InvalidRecord { response_id: String, reason: String },
}

/// Inclusive ordinal score scale fixed by a rubric, e.g. `0..=3`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawRange", into = "RawRange")]
pub struct ScoreRange {
    min: i64,
    max: i64,
}

#[derive(Serialize, Deserialize)]
struct RawRange {
    min: i64,
    max: i64,
}

impl TryFrom<RawRange> for ScoreRange {
    type Error = ModelError;

    fn try_from(raw: RawRange) -> Result<Self, Self::Error> {
        ScoreRange::new(raw.min, raw.max)
    }
}

impl From<ScoreRange> for RawRange {
    fn from(r: ScoreRange) -> Self {
        RawRange { min: r.min, max: r.max }
    }
}

impl ScoreRange {
    pub fn new(min: i64, max: i64) -> Result<Self, ModelError> {
        if min < 0 || max <= min {
            return Err(ModelError::InvalidRange { min, max });
        }
        Ok(ScoreRange { min, max })
    }

    pub fn min(&self) -> i64 {
        self.min
    }

    pub fn max(&self) -> i64 {
        self.max
    }

    /// Number of score points on the scale (K).
    pub fn cardinality(&self) -> usize {
        (self.max - self.min + 1) as usize
    }

    pub fn contains(&self, value: i64) -> bool {
        (self.min..=self.max).contains(&value)
    }

    /// Zero-based category index of an in-range value.
    pub fn index_of(&self, value: i64) -> usize {
        debug_assert!(self.contains(value));
        (value - self.min) as usize
    }

    pub fn validate(&self, value: i64) -> Result<Score, ModelError> {
        validate_score(value, *self)
    }
}

impl fmt::Display for ScoreRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}..{}", self.min, self.max)
    }
}

/// A score point known to lie inside its governing range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Score(i64);

impl Score {
    pub fn value(self) -> i64 {
        self.0
    }
}

impl fmt::Display for Score {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

pub fn validate_score(value: i64, range: ScoreRange) -> Result<Score, ModelError> {
    if range.contains(value) {
        Ok(Score(value))
    } else {
        Err(ModelError::OutOfRange { value, range })
    }
}

/// Everything a rater sees besides the response itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskContext {
    pub item_id: String,
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_material: Option<String>,
    pub rubric_text: String,
    pub score_range: ScoreRange,
}

impl TaskContext {
    pub fn new(
        item_id: impl Into<String>,
        question: impl Into<String>,
        reference_material: Option<String>,
        rubric_text: impl Into<String>,
        score_range: ScoreRange,
    ) -> Result<Self, ModelError> {
        let ctx = TaskContext {
            item_id: item_id.into(),
            question: question.into(),
            reference_material,
            rubric_text: rubric_text.into(),
            score_range,
        };
        ctx.check()?;
        Ok(ctx)
    }

    pub fn check(&self) -> Result<(), ModelError> {
        if self.question.trim().is_empty() {
            return Err(ModelError::Empty("question"));
        }
        if self.rubric_text.trim().is_empty() {
            return Err(ModelError::Empty("rubric_text"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudentResponse {
    pub response_id: String,
    pub item_id: String,
    pub text: String,
    #[serde(default)]
    pub gold_score: Option<i64>,
}

impl StudentResponse {
    pub fn new(
        response_id: impl Into<String>,
        item_id: impl Into<String>,
        text: impl Into<String>,
        gold_score: Option<i64>,
        range: ScoreRange,
    ) -> Result<Self, ModelError> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(ModelError::Empty("response text"));
        }
        if let Some(g) = gold_score {
            validate_score(g, range)?;
        }
        Ok(StudentResponse {
            response_id: response_id.into(),
            item_id: item_id.into(),
            text,
            gold_score,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Autoscore,
    Baseline,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Autoscore => "autoscore",
            Mode::Baseline => "baseline",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "autoscore" => Ok(Mode::Autoscore),
            "baseline" => Ok(Mode::Baseline),
            other => Err(format!("unknown mode `{other}` (expected autoscore|baseline)")),
        }
    }
}

/// One model call: which agent issued it, the digest of the exact request,
/// and the untouched completion text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transcript {
    pub agent_name: String,
    pub prompt_digest: String,
    pub raw_output: String,
}

/// A scored response as persisted in `records.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredRecord {
    pub response_id: String,
    pub mode: Mode,
    pub gold_score: Option<i64>,
    pub predicted_score: i64,
    #[serde(default)]
    pub representation: Option<StructuredRepresentation>,
    pub transcripts: Vec<Transcript>,
    /// Summed model latency over every attempt of every agent call.
    pub wall_time_ms: u64,
    /// Latency of the first attempt of each agent call only.
    #[serde(default)]
    pub first_attempt_ms: u64,
    pub retries: u32,
    #[serde(default)]
    pub response_text: String,
}

impl ScoredRecord {
    pub fn check(&self) -> Result<(), ModelError> {
        let bad = |reason: &str| ModelError::InvalidRecord {
            response_id: self.response_id.clone(),
            reason: reason.to_string(),
        };
        match (self.mode, &self.representation) {
            (Mode::Autoscore, None) => Err(bad("autoscore record without representation")),
            (Mode::Baseline, Some(_)) => Err(bad("baseline record carries a representation")),
            _ if self.first_attempt_ms > self.wall_time_ms => {
                Err(bad("first-attempt latency exceeds total wall time"))
            }
            _ => Ok(()),
        }
    }
}
