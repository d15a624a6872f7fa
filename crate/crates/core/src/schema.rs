//! Rubric component schemas and the structured representation an extraction
//! agent must fill in.
//!
//! A [`ComponentSchema`] lists the rubric-relevant fields of one item. Each
//! field is a boolean flag, a list of verbatim text spans, a count, or a free
//! text value. A count may be *derived* from a list, in which case the count
//! stored in a validated [`StructuredRepresentation`] is always the list's
//! length: the list is the evidence, the number is only a summary of it.

use std::collections::HashSet;
use std::fmt;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SchemaError {
    #[error("schema `{0}` declares no fields")]
    EmptySchema(String),
    #[error("duplicate field `{0}`")]
    DuplicateField(String),
    #[error("count field `{field}` derives from `{target}`, which is not a declared text_list field")]
    DanglingDerivation { field: String, target: String },
    #[error("field `{0}` has derived_from but is not a count")]
    DerivationOnNonCount(String),
    #[error("invalid field name `{0}`")]
    InvalidFieldName(String),
    #[error("no JSON object found in model output")]
    NoJsonFound,
    #[error("model output is not a JSON object")]
    NotAnObject,
    #[error("missing field `{0}`")]
    MissingField(String),
    #[error("field `{name}`: expected {expected}, found {found}")]
    TypeMismatch {
        name: String,
        expected: FieldKind,
        found: String,
    },
    #[error("representation was built for schema `{found}`, expected `{expected}`")]
    WrongSchema { expected: String, found: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldKind {
    Boolean,
    TextList,
    Count,
    Text,
}

impl fmt::Display for FieldKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FieldKind::Boolean => "boolean",
            FieldKind::TextList => "text_list",
            FieldKind::Count => "count",
            FieldKind::Text => "text",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentField {
    pub name: String,
    pub kind: FieldKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub derived_from: Option<String>,
    #[serde(default)]
    pub description: String,
}

/// Field list as written in the item section of a config file, before any
/// invariant has been checked.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawSchemaDefinition {
    pub item_id: String,
    #[serde(default)]
    pub fields: Vec<ComponentField>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentSchema {
    item_id: String,
    fields: Vec<ComponentField>,
}

fn valid_identifier(name: &str) -> bool {
    let mut chars = name.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

pub fn compile_schema(raw: &RawSchemaDefinition) -> Result<ComponentSchema, SchemaError> {
    if raw.fields.is_empty() {
        return Err(SchemaError::EmptySchema(raw.item_id.clone()));
    }
    let mut seen = HashSet::new();
    for field in &raw.fields {
        if !valid_identifier(&field.name) {
            return Err(SchemaError::InvalidFieldName(field.name.clone()));
        }
        if !seen.insert(field.name.as_str()) {
            return Err(SchemaError::DuplicateField(field.name.clone()));
        }
    }
    for field in &raw.fields {
        let Some(target) = &field.derived_from else {
            continue;
        };
        if field.kind != FieldKind::Count {
            return Err(SchemaError::DerivationOnNonCount(field.name.clone()));
        }
        let ok = raw
            .fields
            .iter()
            .any(|f| &f.name == target && f.kind == FieldKind::TextList);
        if !ok {
            return Err(SchemaError::DanglingDerivation {
                field: field.name.clone(),
                target: target.clone(),
            });
        }
    }
    Ok(ComponentSchema {
        item_id: raw.item_id.clone(),
        fields: raw.fields.clone(),
    })
}

impl ComponentSchema {
    pub fn item_id(&self) -> &str {
        &self.item_id
    }

    pub fn fields(&self) -> &[ComponentField] {
        &self.fields
    }

    pub fn field(&self, name: &str) -> Option<&ComponentField> {
        self.fields.iter().find(|f| f.name == name)
    }

    /// Human-readable field listing used inside extraction prompts.
    pub fn describe(&self) -> String {
        let mut out = String::new();
        for f in &self.fields {
            let shape = match f.kind {
                FieldKind::Boolean => "true or false".to_string(),
                FieldKind::TextList => "list of strings quoted from the response".to_string(),
                FieldKind::Count => match &f.derived_from {
                    Some(src) => format!("integer, number of entries in \"{src}\""),
                    None => "non-negative integer".to_string(),
                },
                FieldKind::Text => "string".to_string(),
            };
            out.push_str(&format!("- \"{}\" ({}): {}\n", f.name, shape, f.description));
        }
        out
    }

    /// JSON skeleton of the expected object, e.g. `"flag": true|false`.
    pub fn skeleton(&self) -> String {
        let body: Vec<String> = self
            .fields
            .iter()
            .map(|f| {
                let v = match f.kind {
                    FieldKind::Boolean => "true|false",
                    FieldKind::TextList => "[string, ...]",
                    FieldKind::Count => "integer",
                    FieldKind::Text => "string",
                };
                format!("  \"{}\": {}", f.name, v)
            })
            .collect();
        format!("{{\n{}\n}}", body.join(",\n"))
    }
}

/// Typed value of one component field.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ComponentValue {
    Boolean(bool),
    Count(u64),
    TextList(Vec<String>),
    Text(String),
}

impl ComponentValue {
    pub fn kind(&self) -> FieldKind {
        match self {
            ComponentValue::Boolean(_) => FieldKind::Boolean,
            ComponentValue::Count(_) => FieldKind::Count,
            ComponentValue::TextList(_) => FieldKind::TextList,
            ComponentValue::Text(_) => FieldKind::Text,
        }
    }

    pub fn as_bool(&self) -> Option<bool> {
        match self {
            ComponentValue::Boolean(b) => Some(*b),
            _ => None,
        }
    }

    pub fn as_count(&self) -> Option<u64> {
        match self {
            ComponentValue::Count(c) => Some(*c),
            _ => None,
        }
    }

    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("component values always serialize")
    }
}

/// A validated instance of a [`ComponentSchema`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructuredRepresentation {
    pub schema_id: String,
    pub values: IndexMap<String, ComponentValue>,
    #[serde(default)]
    pub inconsistency_flags: Vec<String>,
}

impl StructuredRepresentation {
    pub fn get(&self, name: &str) -> Option<&ComponentValue> {
        self.values.get(name)
    }

    /// The component object alone, in schema field order.
    pub fn values_json(&self) -> Value {
        Value::Object(
            self.values
                .iter()
                .map(|(k, v)| (k.clone(), v.to_json()))
                .collect(),
        )
    }

    /// Compact canonical text of the component object (schema order).
    pub fn canonical_json(&self) -> String {
        let parts: Vec<String> = self
            .values
            .iter()
            .map(|(k, v)| {
                format!(
                    "{}:{}",
                    serde_json::to_string(k).expect("string keys serialize"),
                    serde_json::to_string(v).expect("component values serialize")
                )
            })
            .collect();
        format!("{{{}}}", parts.join(","))
    }

    pub fn pretty_json(&self) -> String {
        let mut out = String::from("{\n");
        let n = self.values.len();
        for (i, (k, v)) in self.values.iter().enumerate() {
            let key = serde_json::to_string(k).expect("string keys serialize");
            let val = serde_json::to_string_pretty(v).expect("component values serialize");
            let val = val.replace('\n', "\n  ");
            out.push_str(&format!("  {key}: {val}"));
            out.push_str(if i + 1 < n { ",\n" } else { "\n" });
        }
        out.push('}');
        out
    }
}

/// Returns the first balanced JSON object in `raw` that parses.
///
/// Code fences and surrounding prose are ignored. No other repair is
/// attempted.
pub fn extract_json_block(raw: &str) -> Result<&str, SchemaError> {
    let bytes = raw.as_bytes();
    let mut start = 0;
    while let Some(offset) = raw[start..].find('{') {
        let open = start + offset;
        if let Some(close) = balanced_end(bytes, open) {
            let candidate = &raw[open..=close];
            if matches!(serde_json::from_str::<Value>(candidate), Ok(Value::Object(_))) {
                return Ok(candidate);
            }
        }
        start = open + 1;
    }
    Err(SchemaError::NoJsonFound)
}

/// Index of the brace closing the object opened at `open`, honouring string
/// literals and escapes.
fn balanced_end(bytes: &[u8], open: usize) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(open) {
        if in_string {
            if escaped {
                escaped = false;
            } else if b == b'\\' {
                escaped = true;
            } else if b == b'"' {
                in_string = false;
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'{' | b'[' => depth += 1,
            b'}' | b']' => {
                depth = depth.checked_sub(1)?;
                if depth == 0 {
                    return (b == b'}').then_some(i);
                }
            }
            _ => {}
        }
    }
    None
}

fn describe_json(v: &Value) -> String {
    match v {
        Value::Null => "null".into(),
        Value::Bool(_) => "boolean".into(),
        Value::Number(n) if n.is_u64() => "non-negative integer".into(),
        Value::Number(n) if n.is_i64() => "negative integer".into(),
        Value::Number(_) => "non-integer number".into(),
        Value::String(_) => "string".into(),
        Value::Array(_) => "array".into(),
        Value::Object(_) => "object".into(),
    }
}

fn typed_value(field: &ComponentField, v: &Value) -> Result<ComponentValue, SchemaError> {
    let mismatch = || SchemaError::TypeMismatch {
        name: field.name.clone(),
        expected: field.kind,
        found: describe_json(v),
    };
    match field.kind {
        FieldKind::Boolean => v.as_bool().map(ComponentValue::Boolean).ok_or_else(mismatch),
        FieldKind::Count => v.as_u64().map(ComponentValue::Count).ok_or_else(mismatch),
        FieldKind::Text => v
            .as_str()
            .map(|s| ComponentValue::Text(s.to_string()))
            .ok_or_else(mismatch),
        FieldKind::TextList => {
            let items = v.as_array().ok_or_else(mismatch)?;
            items
                .iter()
                .map(|item| {
                    item.as_str().map(str::to_string).ok_or_else(|| SchemaError::TypeMismatch {
                        name: field.name.clone(),
                        expected: field.kind,
                        found: format!("array containing {}", describe_json(item)),
                    })
                })
                .collect::<Result<Vec<_>, _>>()
                .map(ComponentValue::TextList)
        }
    }
}

/// Checks a JSON object against `schema` and normalizes derived counts.
pub fn validate_representation(
    json_text: &str,
    schema: &ComponentSchema,
) -> Result<StructuredRepresentation, SchemaError> {
    let value: Value = serde_json::from_str(json_text).map_err(|_| SchemaError::NoJsonFound)?;
    validate_value(&value, schema)
}

pub fn validate_value(
    value: &Value,
    schema: &ComponentSchema,
) -> Result<StructuredRepresentation, SchemaError> {
    let obj = value.as_object().ok_or(SchemaError::NotAnObject)?;
    let mut values = IndexMap::with_capacity(schema.fields.len());
    for field in &schema.fields {
        let raw = obj
            .get(&field.name)
            .ok_or_else(|| SchemaError::MissingField(field.name.clone()))?;
        values.insert(field.name.clone(), typed_value(field, raw)?);
    }
    for key in obj.keys() {
        if schema.field(key).is_none() {
            log::warn!("dropping unknown key `{key}` for schema `{}`", schema.item_id);
        }
    }

    let mut inconsistency_flags = Vec::new();
    for field in &schema.fields {
        let Some(source) = &field.derived_from else {
            continue;
        };
        let len = match &values[source] {
            ComponentValue::TextList(items) => items.len() as u64,
            _ => unreachable!("compile_schema guarantees derived_from targets a text_list"),
        };
        if values[&field.name] != ComponentValue::Count(len) {
            inconsistency_flags.push(field.name.clone());
            values.insert(field.name.clone(), ComponentValue::Count(len));
        }
    }

    Ok(StructuredRepresentation {
        schema_id: schema.item_id.clone(),
        values,
        inconsistency_flags,
    })
}
