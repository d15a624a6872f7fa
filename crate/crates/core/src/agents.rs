//! The extraction agent, the scoring agent and the single-call baseline.
//!
//! All three share one attempt loop: render a prompt, call the backend, parse
//! the reply, and on a parse or validation failure re-prompt with the error
//! appended to the user message. Backend errors are not retried here; the
//! remote backend has its own transport-level retry.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::backend::{BackendError, ChatBackend, ChatMessage, ChatRequest};
use crate::model::{ModelError, Score, ScoreRange, StudentResponse, TaskContext, Transcript};
use crate::schema::{self, ComponentSchema, SchemaError, StructuredRepresentation};

pub const EXTRACTION_AGENT: &str = "extraction";
pub const SCORING_AGENT: &str = "scoring";
pub const BASELINE_AGENT: &str = "baseline";

/// Placeholders a template may use.
pub const PLACEHOLDERS: &[&str] = &[
    "question",
    "reference_material",
    "rubric_text",
    "response",
    "schema_description",
    "schema_skeleton",
    "representation_json",
    "inconsistency_notes",
    "score_min",
    "score_max",
];

/// Placeholders that expose the component schema; the baseline may use none.
const SCHEMA_PLACEHOLDERS: &[&str] = &[
    "schema_description",
    "schema_skeleton",
    "representation_json",
    "inconsistency_notes",
];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TemplateError {
    #[error("template `{template}` uses unknown placeholder {{{name}}}")]
    UnknownPlaceholder { template: String, name: String },
    #[error("template `{template}` left {{{name}}} unbound")]
    Unbound { template: String, name: String },
    #[error("baseline template `{template}` must not reference {{{name}}}")]
    SchemaInBaseline { template: String, name: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ScoreError {
    #[error("no JSON object in reply")]
    NoJsonFound,
    #[error("reply has no \"score\" field")]
    MissingField,
    #[error("score must be a JSON integer, got {0}")]
    NonInteger(String),
    #[error("score {value} outside range {range}")]
    OutOfRange { value: i64, range: ScoreRange },
}

/// Bookkeeping for every attempt made by one agent call.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attempts {
    pub transcripts: Vec<Transcript>,
    pub wall_time_ms: u64,
    pub first_attempt_ms: u64,
}

impl Attempts {
    pub fn retries(&self) -> u32 {
        self.transcripts.len().saturating_sub(1) as u32
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AgentError {
    #[error("extraction failed after {} attempts: {last_error}", attempts.transcripts.len())]
    ExtractionFailed { last_error: String, attempts: Attempts },
    #[error("scoring failed after {} attempts: {last_error}", attempts.transcripts.len())]
    ScoringFailed { last_error: String, attempts: Attempts },
    #[error("backend error: {source}")]
    Backend { source: BackendError, attempts: Attempts },
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("invalid request: {0}")]
    Request(String),
}

impl AgentError {
    pub fn attempts(&self) -> Option<&Attempts> {
        match self {
            AgentError::ExtractionFailed { attempts, .. }
            | AgentError::ScoringFailed { attempts, .. }
            | AgentError::Backend { attempts, .. } => Some(attempts),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentOutcome<T> {
    pub value: T,
    pub raw_attempts: Vec<String>,
    pub retries: u32,
    pub wall_time_ms: u64,
    pub first_attempt_ms: u64,
    pub transcripts: Vec<Transcript>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub name: String,
    pub system_text: String,
    pub user_text: String,
}

enum Piece<'a> {
    Literal(&'a str),
    Placeholder(&'a str),
}

/// Splits template text into literals and `{name}` placeholders. `{{` and
/// `}}` escape literal braces; a `{` not followed by `name}` is literal.
fn pieces(text: &str) -> Vec<Piece<'_>> {
    let mut out = Vec::new();
    let bytes = text.as_bytes();
    let mut lit_start = 0;
    let mut i = 0;
    while i < bytes.len() {
        let b = bytes[i];
        if (b == b'{' || b == b'}') && bytes.get(i + 1) == Some(&b) {
            out.push(Piece::Literal(&text[lit_start..=i]));
            i += 2;
            lit_start = i;
            continue;
        }
        if b == b'{' {
            let name_len = bytes[i + 1..]
                .iter()
                .take_while(|c| c.is_ascii_lowercase() || **c == b'_')
                .count();
            if name_len > 0 && bytes.get(i + 1 + name_len) == Some(&b'}') {
                out.push(Piece::Literal(&text[lit_start..i]));
                out.push(Piece::Placeholder(&text[i + 1..i + 1 + name_len]));
                i += name_len + 2;
                lit_start = i;
                continue;
            }
        }
        i += 1;
    }
    out.push(Piece::Literal(&text[lit_start..]));
    out
}

impl PromptTemplate {
    pub fn new(name: impl Into<String>, system_text: impl Into<String>, user_text: impl Into<String>) -> Result<Self, TemplateError> {
        let t = PromptTemplate {
            name: name.into(),
            system_text: system_text.into(),
            user_text: user_text.into(),
        };
        for p in t.placeholders() {
            if !PLACEHOLDERS.contains(&p.as_str()) {
                return Err(TemplateError::UnknownPlaceholder { template: t.name.clone(), name: p });
            }
        }
        Ok(t)
    }

    pub fn placeholders(&self) -> Vec<String> {
        [&self.system_text, &self.user_text]
            .iter()
            .flat_map(|text| pieces(text))
            .filter_map(|p| match p {
                Piece::Placeholder(name) => Some(name.to_string()),
                Piece::Literal(_) => None,
            })
            .collect()
    }

    fn render_text(&self, text: &str, vars: &BTreeMap<&str, String>) -> Result<String, TemplateError> {
        let mut out = String::with_capacity(text.len());
        for piece in pieces(text) {
            match piece {
                Piece::Literal(s) => out.push_str(s),
                Piece::Placeholder(name) => match vars.get(name) {
                    Some(v) => out.push_str(v),
                    None => {
                        return Err(TemplateError::Unbound { template: self.name.clone(), name: name.into() })
                    }
                },
            }
        }
        Ok(out)
    }

    /// Renders `(system, user)`. Substituted values are never re-scanned.
    pub fn render(&self, vars: &BTreeMap<&str, String>) -> Result<(String, String), TemplateError> {
        Ok((self.render_text(&self.system_text, vars)?, self.render_text(&self.user_text, vars)?))
    }
}

const EXTRACTION_SYSTEM: &str = "You are an experienced assessment rater working from an official scoring rubric. \
Your job in this step is only to find the parts of a student response that the rubric cares about and record them in a fixed JSON structure. \
Do not assign a score. Copy text spans from the student's own words. \
Reply with a single JSON object and nothing else.";

const EXTRACTION_USER: &str = "Assessment question:
{question}

Reference material:
{reference_material}

Scoring rubric:
{rubric_text}

Student response:
\"\"\"
{response}
\"\"\"

Record these rubric components for the student response:
{schema_description}
Reply with exactly one JSON object of this shape:
{schema_skeleton}

Every count must equal the number of entries in the list it counts. Use JSON true/false for flags and [] for lists with no supporting text.";

const SCORING_SYSTEM: &str = "You are an experienced assessment rater working from an official scoring rubric. \
The rubric-relevant components of a student response have already been extracted. \
Assign the final score: align with the rubric guidelines, resolve ambiguities in favor of the rubric definitions, \
and check the components against the original response, correcting for any inconsistency you find. \
Output strictly integer-only JSON of the form {\"score\": <integer>} and nothing else.";

const SCORING_USER: &str = "Assessment question:
{question}

Reference material:
{reference_material}

Scoring rubric:
{rubric_text}

Student response:
\"\"\"
{response}
\"\"\"

Extracted rubric components:
{representation_json}
{inconsistency_notes}
Valid scores are the integers {score_min} to {score_max}.
Reply with exactly {\"score\": <integer>}.";

const BASELINE_SYSTEM: &str = "You are an experienced assessment rater working from an official scoring rubric. \
Score the student response according to the rubric. \
Output strictly integer-only JSON of the form {\"score\": <integer>} and nothing else.";

const BASELINE_USER: &str = "Assessment question:
{question}

Reference material:
{reference_material}

Scoring rubric:
{rubric_text}

Student response:
\"\"\"
{response}
\"\"\"

Valid scores are the integers {score_min} to {score_max}.
Reply with exactly {\"score\": <integer>}.";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Templates {
    pub extraction: PromptTemplate,
    pub scoring: PromptTemplate,
    pub baseline: PromptTemplate,
}

impl Templates {
    pub fn new(extraction: PromptTemplate, scoring: PromptTemplate, baseline: PromptTemplate) -> Result<Self, TemplateError> {
        for name in baseline.placeholders() {
            if SCHEMA_PLACEHOLDERS.contains(&name.as_str()) {
                return Err(TemplateError::SchemaInBaseline { template: baseline.name.clone(), name });
            }
        }
        Ok(Templates { extraction, scoring, baseline })
    }
}

impl Default for Templates {
    fn default() -> Self {
        Templates::new(
            PromptTemplate::new("extraction", EXTRACTION_SYSTEM, EXTRACTION_USER).expect("default template"),
            PromptTemplate::new("scoring", SCORING_SYSTEM, SCORING_USER).expect("default template"),
            PromptTemplate::new("baseline", BASELINE_SYSTEM, BASELINE_USER).expect("default template"),
        )
        .expect("default templates")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSettings {
    pub model_name: String,
    #[serde(default)]
    pub temperature: f64,
    /// Re-prompts allowed after the first attempt.
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_extraction_tokens")]
    pub extraction_max_tokens: u32,
    #[serde(default = "default_scoring_tokens")]
    pub scoring_max_tokens: u32,
}

fn default_max_retries() -> u32 {
    3
}
fn default_extraction_tokens() -> u32 {
    1024
}
fn default_scoring_tokens() -> u32 {
    64
}

impl AgentSettings {
    pub fn new(model_name: impl Into<String>) -> Self {
        AgentSettings {
            model_name: model_name.into(),
            temperature: 0.0,
            max_retries: default_max_retries(),
            extraction_max_tokens: default_extraction_tokens(),
            scoring_max_tokens: default_scoring_tokens(),
        }
    }
}

/// Reads `{"score": <integer>}` from a model reply.
pub fn parse_score(raw_text: &str, range: ScoreRange) -> Result<Score, ScoreError> {
    let block = schema::extract_json_block(raw_text).map_err(|_| ScoreError::NoJsonFound)?;
    let v: Value = serde_json::from_str(block).map_err(|_| ScoreError::NoJsonFound)?;
    let raw = v.get("score").ok_or(ScoreError::MissingField)?;
    let value = raw.as_i64().ok_or_else(|| ScoreError::NonInteger(raw.to_string()))?;
    range.validate(value).map_err(|e| match e {
        ModelError::OutOfRange { value, range } => ScoreError::OutOfRange { value, range },
        other => unreachable!("validate only reports OutOfRange: {other}"),
    })
}

fn clip(s: &str, max_chars: usize) -> String {
    if s.chars().count() <= max_chars {
        s.to_string()
    } else {
        let head: String = s.chars().take(max_chars).collect();
        format!("{head}...")
    }
}

fn context_vars(context: &TaskContext, response: &StudentResponse) -> BTreeMap<&'static str, String> {
    let mut vars = BTreeMap::new();
    vars.insert("question", context.question.clone());
    vars.insert(
        "reference_material",
        context.reference_material.clone().filter(|s| !s.trim().is_empty()).unwrap_or_else(|| "(none)".into()),
    );
    vars.insert("rubric_text", context.rubric_text.clone());
    vars.insert("response", response.text.clone());
    vars.insert("score_min", context.score_range.min().to_string());
    vars.insert("score_max", context.score_range.max().to_string());
    vars
}

fn inconsistency_notes(rep: &StructuredRepresentation) -> String {
    if rep.inconsistency_flags.is_empty() {
        return String::new();
    }
    format!(
        "Note: the extracted counts for {} disagreed with their lists and were recomputed from the list lengths.\n",
        rep.inconsistency_flags.iter().map(|f| format!("\"{f}\"")).collect::<Vec<_>>().join(", ")
    )
}

enum Failure {
    Parse(String),
    Backend(BackendError),
}

/// Drives calls to `backend`, re-prompting on parse failures.
pub struct Agents {
    pub settings: AgentSettings,
    pub templates: Templates,
}

impl Agents {
    pub fn new(settings: AgentSettings, templates: Templates) -> Self {
        Agents { settings, templates }
    }

    fn request(&self, system: &str, user: String, max_tokens: u32) -> Result<ChatRequest, AgentError> {
        ChatRequest::new(
            self.settings.model_name.clone(),
            vec![ChatMessage::system(system), ChatMessage::user(user)],
            max_tokens,
            true,
        )
        .and_then(|r| r.with_temperature(self.settings.temperature))
        .map_err(|e| AgentError::Request(e.to_string()))
    }

    fn attempt_loop<T>(
        &self,
        backend: &dyn ChatBackend,
        agent_name: &str,
        (system, user): (String, String),
        max_tokens: u32,
        reminder: &str,
        parse: impl Fn(&str) -> Result<T, String>,
    ) -> Result<AgentOutcome<T>, (Failure, Attempts)> {
        let mut attempts = Attempts::default();
        let mut raw_attempts = Vec::new();
        let mut prompt = user.clone();
        let mut last_error;
        loop {
            let request = match self.request(&system, prompt.clone(), max_tokens) {
                Ok(r) => r,
                Err(e) => return Err((Failure::Parse(e.to_string()), attempts)),
            };
            let digest = request.digest().to_string();
            let response = match backend.complete(&request) {
                Ok(r) => r,
                Err(e) => return Err((Failure::Backend(e), attempts)),
            };
            if attempts.transcripts.is_empty() {
                attempts.first_attempt_ms = response.latency_ms;
            }
            attempts.wall_time_ms += response.latency_ms;
            attempts.transcripts.push(Transcript {
                agent_name: agent_name.to_string(),
                prompt_digest: digest,
                raw_output: response.text.clone(),
            });
            raw_attempts.push(response.text.clone());
            match parse(&response.text) {
                Ok(value) => {
                    return Ok(AgentOutcome {
                        value,
                        retries: attempts.retries(),
                        raw_attempts,
                        wall_time_ms: attempts.wall_time_ms,
                        first_attempt_ms: attempts.first_attempt_ms,
                        transcripts: attempts.transcripts,
                    })
                }
                Err(e) => last_error = e,
            }
            if attempts.retries() >= self.settings.max_retries {
                return Err((Failure::Parse(last_error), attempts));
            }
            log::debug!("{agent_name}: attempt {} rejected: {last_error}", attempts.transcripts.len());
            prompt = format!(
                "{user}\n\nYour previous reply could not be accepted: {last_error}.\nPrevious reply:\n{}\n{reminder}",
                clip(&response.text, 2000)
            );
        }
    }

    /// Builds the structured representation of `response`.
    pub fn run_extraction(
        &self,
        backend: &dyn ChatBackend,
        context: &TaskContext,
        response: &StudentResponse,
        schema: &ComponentSchema,
    ) -> Result<AgentOutcome<StructuredRepresentation>, AgentError> {
        let mut vars = context_vars(context, response);
        vars.insert("schema_description", schema.describe());
        vars.insert("schema_skeleton", schema.skeleton());
        let rendered = self.templates.extraction.render(&vars)?;
        self.attempt_loop(
            backend,
            EXTRACTION_AGENT,
            rendered,
            self.settings.extraction_max_tokens,
            "Reply again with only the JSON object described above, including every key.",
            |raw| {
                let block = schema::extract_json_block(raw).map_err(|e| e.to_string())?;
                schema::validate_representation(block, schema).map_err(|e: SchemaError| e.to_string())
            },
        )
        .map_err(|(failure, attempts)| match failure {
            Failure::Parse(last_error) => AgentError::ExtractionFailed { last_error, attempts },
            Failure::Backend(source) => AgentError::Backend { source, attempts },
        })
    }

    /// Renders the scoring prompt without calling a backend.
    pub fn scoring_prompt(
        &self,
        representation: &StructuredRepresentation,
        context: &TaskContext,
        response: &StudentResponse,
    ) -> Result<(String, String), TemplateError> {
        let mut vars = context_vars(context, response);
        vars.insert("representation_json", representation.pretty_json());
        vars.insert("inconsistency_notes", inconsistency_notes(representation));
        self.templates.scoring.render(&vars)
    }

    pub fn baseline_prompt(&self, context: &TaskContext, response: &StudentResponse) -> Result<(String, String), TemplateError> {
        self.templates.baseline.render(&context_vars(context, response))
    }

    fn score_loop(
        &self,
        backend: &dyn ChatBackend,
        agent_name: &str,
        rendered: (String, String),
        range: ScoreRange,
    ) -> Result<AgentOutcome<Score>, AgentError> {
        let reminder = format!(
            "The score must be a single integer from {} to {}. Reply again with exactly {{\"score\": <integer>}}.",
            range.min(),
            range.max()
        );
        self.attempt_loop(backend, agent_name, rendered, self.settings.scoring_max_tokens, &reminder, |raw| {
            parse_score(raw, range).map_err(|e| e.to_string())
        })
        .map_err(|(failure, attempts)| match failure {
            Failure::Parse(last_error) => AgentError::ScoringFailed { last_error, attempts },
            Failure::Backend(source) => AgentError::Backend { source, attempts },
        })
    }

    /// Scores from the representation, the task context and the response.
    pub fn run_scoring(
        &self,
        backend: &dyn ChatBackend,
        representation: &StructuredRepresentation,
        context: &TaskContext,
        response: &StudentResponse,
    ) -> Result<AgentOutcome<Score>, AgentError> {
        let rendered = self.scoring_prompt(representation, context, response)?;
        self.score_loop(backend, SCORING_AGENT, rendered, context.score_range)
    }

    /// Single-call scoring from rubric and response only.
    pub fn run_baseline(
        &self,
        backend: &dyn ChatBackend,
        context: &TaskContext,
        response: &StudentResponse,
    ) -> Result<AgentOutcome<Score>, AgentError> {
        let rendered = self.baseline_prompt(context, response)?;
        self.score_loop(backend, BASELINE_AGENT, rendered, context.score_range)
    }
}
