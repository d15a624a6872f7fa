//! TOML run configuration: backend endpoints, run defaults, template
//! overrides and the item registry (dataset, task context and component
//! schema per item). Relative paths resolve against the config file.
//!
//! ```toml
//! [backend]
//! kind = "remote"
//! base_url = "https://api.openai.com/v1"
//! model_name = "gpt-4o"
//! cache_path = "cache/completions.jsonl"
//!
//! [run]
//! parallelism = 4
//!
//! [items.science]
//! family = "sas"
//! tsv_path = "data/train.tsv"
//! essay_set = 1
//! score_min = 0
//! score_max = 3
//! question = "..."
//! rubric_file = "rubrics/science.txt"
//!
//! [[items.science.schema.fields]]
//! name = "valid_conclusion"
//! kind = "boolean"
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{AgentSettings, PromptTemplate, Templates};
use crate::backend::{BackendError, CachedBackend, ChatBackend, RemoteBackend, RemoteConfig, ReplayBackend, ScriptedBackend};
use crate::ingest::{DatasetSpec, Family, GoldRule};
use crate::model::{ScoreRange, TaskContext};
use crate::schema::{compile_schema, ComponentField, ComponentSchema, RawSchemaDefinition};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{0}")]
    Invalid(String),
    #[error("unknown item `{id}` (registered: {known})")]
    UnknownItem { id: String, known: String },
    #[error("backend: {0}")]
    Backend(#[from] BackendError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Remote,
    Replay,
    Scripted,
}

impl FromStr for BackendKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "remote" => Ok(BackendKind::Remote),
            "replay" => Ok(BackendKind::Replay),
            "scripted" => Ok(BackendKind::Scripted),
            other => Err(format!("unknown backend `{other}` (expected remote, replay or scripted)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendSection {
    #[serde(default)]
    pub kind: BackendKind,
    #[serde(default = "default_base_url")]
    pub base_url: String,
    pub model_name: String,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default = "default_max_attempts")]
    pub max_attempts: u32,
    #[serde(default = "default_backoff_ms")]
    pub backoff_base_ms: u64,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
    /// Completion cache wrapped around the remote and scripted backends.
    pub cache_path: Option<PathBuf>,
    /// Fixture file for the replay backend; defaults to `cache_path`.
    pub replay_path: Option<PathBuf>,
    /// Rule file for the scripted backend.
    pub script_path: Option<PathBuf>,
}

fn default_base_url() -> String {
    "https://api.openai.com/v1".into()
}
fn default_timeout() -> u64 {
    120
}
fn default_max_attempts() -> u32 {
    5
}
fn default_backoff_ms() -> u64 {
    1000
}
fn default_max_in_flight() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_extraction_tokens")]
    pub extraction_max_tokens: u32,
    #[serde(default = "default_scoring_tokens")]
    pub scoring_max_tokens: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default = "default_progress")]
    pub progress_every: usize,
}

fn default_parallelism() -> usize {
    4
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
fn default_out_dir() -> PathBuf {
    "runs".into()
}
fn default_progress() -> usize {
    50
}

impl Default for RunSection {
    fn default() -> Self {
        toml::from_str("").expect("all run keys have defaults")
    }
}

/// Replacement text for one prompt template, inline or from files.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplateOverride {
    pub system: Option<String>,
    pub system_file: Option<PathBuf>,
    pub user: Option<String>,
    pub user_file: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplateOverrides {
    pub extraction: Option<TemplateOverride>,
    pub scoring: Option<TemplateOverride>,
    pub baseline: Option<TemplateOverride>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemaSection {
    #[serde(default)]
    pub fields: Vec<ComponentField>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ItemSection {
    pub family: Family,
    pub tsv_path: PathBuf,
    pub essay_set: u32,
    #[serde(default)]
    pub gold_rule: GoldRule,
    pub score_min: i64,
    pub score_max: i64,
    pub question: Option<String>,
    pub question_file: Option<PathBuf>,
    pub rubric_text: Option<String>,
    pub rubric_file: Option<PathBuf>,
    pub reference_material: Option<String>,
    pub reference_file: Option<PathBuf>,
    pub schema: Option<SchemaSection>,
    #[serde(default)]
    pub templates: TemplateOverrides,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    backend: BackendSection,
    #[serde(default)]
    run: RunSection,
    #[serde(default)]
    templates: TemplateOverrides,
    #[serde(default)]
    items: BTreeMap<String, ItemSection>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub path: PathBuf,
    pub backend: BackendSection,
    pub run: RunSection,
    pub templates: TemplateOverrides,
    pub items: BTreeMap<String, ItemSection>,
}

/// Everything needed to score one registered item.
#[derive(Debug, Clone, PartialEq)]
pub struct Item {
    pub id: String,
    pub dataset: DatasetSpec,
    pub context: TaskContext,
    pub schema: Option<ComponentSchema>,
    pub templates: Templates,
}

const SECRET_KEYS: &[&str] = &["api_key", "apikey", "token", "secret", "password"];

fn read_text(path: &Path) -> Result<String, ConfigError> {
    std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })
}

impl Config {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = read_text(path)?;
        Self::parse(&text, path)
    }

    /// Parses `text` as if read from `path`.
    pub fn parse(text: &str, path: &Path) -> Result<Self, ConfigError> {
        let parse_err = |message: String| ConfigError::Parse { path: path.to_path_buf(), message };
        let value: toml::Table = toml::from_str(text).map_err(|e| parse_err(e.to_string()))?;
        if let Some(backend) = value.get("backend").and_then(toml::Value::as_table) {
            if let Some(key) = SECRET_KEYS.iter().find(|k| backend.contains_key(**k)) {
                return Err(parse_err(format!(
                    "`backend.{key}` is not allowed; credentials are read from the {} environment variable",
                    crate::backend::API_KEY_ENV
                )));
            }
        }
        let raw: RawConfig = toml::from_str(text).map_err(|e| parse_err(e.to_string()))?;
        let config = Config {
            path: path.to_path_buf(),
            backend: raw.backend,
            run: raw.run,
            templates: raw.templates,
            items: raw.items,
        };
        if config.run.parallelism == 0 {
            return Err(ConfigError::Invalid("run.parallelism must be at least 1".into()));
        }
        Ok(config)
    }

    pub fn base_dir(&self) -> &Path {
        self.path.parent().unwrap_or(Path::new("."))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir().join(p)
        }
    }

    pub fn agent_settings(&self) -> AgentSettings {
        AgentSettings {
            model_name: self.backend.model_name.clone(),
            temperature: self.run.temperature,
            max_retries: self.run.max_retries,
            extraction_max_tokens: self.run.extraction_max_tokens,
            scoring_max_tokens: self.run.scoring_max_tokens,
        }
    }

    pub fn item_ids(&self) -> Vec<&str> {
        self.items.keys().map(String::as_str).collect()
    }

    fn text_or_file(&self, what: &str, inline: &Option<String>, file: &Option<PathBuf>) -> Result<Option<String>, ConfigError> {
        match (inline, file) {
            (Some(_), Some(_)) => Err(ConfigError::Invalid(format!("{what}: give the text or a file, not both"))),
            (Some(t), None) => Ok(Some(t.clone())),
            (None, Some(f)) => read_text(&self.resolve(f)).map(Some),
            (None, None) => Ok(None),
        }
    }

    fn apply_override(&self, base: &PromptTemplate, o: Option<&TemplateOverride>, scope: &str) -> Result<PromptTemplate, ConfigError> {
        let Some(o) = o else { return Ok(base.clone()) };
        let what = format!("{scope}.{}", base.name);
        let system = self.text_or_file(&format!("{what}.system"), &o.system, &o.system_file)?;
        let user = self.text_or_file(&format!("{what}.user"), &o.user, &o.user_file)?;
        PromptTemplate::new(
            base.name.clone(),
            system.unwrap_or_else(|| base.system_text.clone()),
            user.unwrap_or_else(|| base.user_text.clone()),
        )
        .map_err(|e| ConfigError::Invalid(format!("{what}: {e}")))
    }

    fn templates_for(&self, item: Option<(&str, &TemplateOverrides)>) -> Result<Templates, ConfigError> {
        let defaults = Templates::default();
        let mut t = [defaults.extraction, defaults.scoring, defaults.baseline];
        let mut layers = vec![("templates".to_string(), &self.templates)];
        if let Some((id, o)) = item {
            layers.push((format!("items.{id}.templates"), o));
        }
        for (scope, layer) in layers {
            t[0] = self.apply_override(&t[0], layer.extraction.as_ref(), &scope)?;
            t[1] = self.apply_override(&t[1], layer.scoring.as_ref(), &scope)?;
            t[2] = self.apply_override(&t[2], layer.baseline.as_ref(), &scope)?;
        }
        let [extraction, scoring, baseline] = t;
        Templates::new(extraction, scoring, baseline).map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn item(&self, id: &str) -> Result<Item, ConfigError> {
        let section = self.items.get(id).ok_or_else(|| ConfigError::UnknownItem {
            id: id.to_string(),
            known: self.item_ids().join(", "),
        })?;
        let invalid = |msg: String| ConfigError::Invalid(format!("items.{id}: {msg}"));
        let range = ScoreRange::new(section.score_min, section.score_max).map_err(|e| invalid(e.to_string()))?;
        let question = self
            .text_or_file(&format!("items.{id}.question"), &section.question, &section.question_file)?
            .ok_or_else(|| invalid("question or question_file is required".into()))?;
        let rubric = self
            .text_or_file(&format!("items.{id}.rubric"), &section.rubric_text, &section.rubric_file)?
            .ok_or_else(|| invalid("rubric_text or rubric_file is required".into()))?;
        let reference =
            self.text_or_file(&format!("items.{id}.reference"), &section.reference_material, &section.reference_file)?;
        let context = TaskContext::new(id, question, reference, rubric, range).map_err(|e| invalid(e.to_string()))?;
        let schema = match &section.schema {
            Some(s) => Some(
                compile_schema(&RawSchemaDefinition { item_id: id.to_string(), fields: s.fields.clone() })
                    .map_err(|e| invalid(format!("schema: {e}")))?,
            ),
            None => None,
        };
        if section.essay_set == 0 {
            return Err(invalid("essay_set must be positive".into()));
        }
        Ok(Item {
            id: id.to_string(),
            dataset: DatasetSpec {
                family: section.family,
                tsv_path: self.resolve(&section.tsv_path),
                essay_set: section.essay_set,
                gold_rule: section.gold_rule,
                item_id: id.to_string(),
                score_range: range,
            },
            context,
            schema,
            templates: self.templates_for(Some((id, &section.templates)))?,
        })
    }

    pub fn cache_path(&self) -> Option<PathBuf> {
        self.backend.cache_path.as_deref().map(|p| self.resolve(p))
    }

    /// Builds the completion backend of `kind`, cached when a cache path is
    /// configured and the backend is not replay.
    pub fn open_backend(&self, kind: BackendKind) -> Result<Arc<dyn ChatBackend>, ConfigError> {
        let b = &self.backend;
        let inner: Arc<dyn ChatBackend> = match kind {
            BackendKind::Replay => {
                let path = b
                    .replay_path
                    .as_deref()
                    .or(b.cache_path.as_deref())
                    .ok_or_else(|| ConfigError::Invalid("replay backend needs backend.replay_path or backend.cache_path".into()))?;
                return Ok(Arc::new(ReplayBackend::load(&self.resolve(path))?));
            }
            BackendKind::Scripted => {
                let path = b
                    .script_path
                    .as_deref()
                    .ok_or_else(|| ConfigError::Invalid("scripted backend needs backend.script_path".into()))?;
                Arc::new(ScriptedBackend::load_rules(&self.resolve(path))?)
            }
            BackendKind::Remote => {
                let mut rc = RemoteConfig::new(b.base_url.clone());
                rc.max_attempts = b.max_attempts.max(1);
                rc.backoff_base = Duration::from_millis(b.backoff_base_ms);
                rc.max_in_flight = b.max_in_flight.max(1);
                if rc.api_key.is_none() {
                    log::warn!("{} is not set; sending requests without credentials", crate::backend::API_KEY_ENV);
                }
                Arc::new(RemoteBackend::with_ureq(rc, Duration::from_secs(b.timeout_secs)))
            }
        };
        match self.cache_path() {
            Some(path) => {
                if let Some(dir) = path.parent() {
                    std::fs::create_dir_all(dir).map_err(|source| ConfigError::Io { path: dir.to_path_buf(), source })?;
                }
                Ok(Arc::new(CachedBackend::open(inner, &path)?))
            }
            None => Ok(inner),
        }
    }
}
