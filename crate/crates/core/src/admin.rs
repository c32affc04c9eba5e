//! Natural-language column descriptions for the linked tables.

use std::collections::BTreeMap;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::linking::LinkedTables;
use crate::llm::{ChatBackend, LlmError, ModelEndpoint};
use crate::prompts::{self, RenderedPrompt};
use crate::schema::{render_schema, DatabaseSchema, SchemaError};

#[derive(Debug, thiserror::Error)]
pub enum AdminError {
    #[error("no linked tables to describe")]
    NothingLinked,
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error(transparent)]
    Llm(#[from] LlmError),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemaDescription {
    /// `"table.column"` (canonical casing) → description.
    pub per_column: BTreeMap<String, String>,
    /// Model reply, verbatim. This is what later prompts consume.
    pub raw_text: String,
    /// The model returned nothing; downstream prompts run without descriptions.
    #[serde(default)]
    pub empty: bool,
}

impl SchemaDescription {
    /// Case-insensitive lookup.
    pub fn get(&self, table: &str, column: &str) -> Option<&str> {
        let key = format!("{table}.{column}");
        self.per_column
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(&key))
            .map(|(_, v)| v.as_str())
    }

    /// Text to hand to generation/debugging, or `None` when there is none.
    pub fn as_prompt_text(&self) -> Option<&str> {
        (!self.empty && !self.raw_text.trim().is_empty()).then_some(self.raw_text.as_str())
    }
}

static DOTTED: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r#"^\s*(?:[-*•]\s*|\d+[.)]\s*)?\**[`"\[]?([^.`"\[\]:()]+?)[`"\]]?\.[`"\[]?([^`"\[\]:]+?)[`"\]]?\**\s*:\s*(.+?)\s*$"#,
    )
    .unwrap()
});
static CALL_STYLE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r#"^\s*(?:[-*•]\s*|\d+[.)]\s*)?\**[`"]?([^.`"():]+?)\(([^()]+)\)[`"]?\**\s*:\s*(.+?)\s*$"#)
        .unwrap()
});

/// Best-effort parse of `table.column: description` (or `table(column): ...`)
/// lines, keeping only columns of the linked tables.
pub fn parse_descriptions(
    text: &str,
    schema: &DatabaseSchema,
    linked: &LinkedTables,
) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    for line in text.lines() {
        let Some(caps) = DOTTED.captures(line).or_else(|| CALL_STYLE.captures(line)) else {
            continue;
        };
        let (table, column, desc) = (caps[1].trim(), caps[2].trim(), caps[3].trim());
        let Some(t) = schema.table(table) else {
            continue;
        };
        if !linked.tables.iter().any(|l| l.eq_ignore_ascii_case(&t.name)) {
            continue;
        }
        let Some(c) = t.column(column) else {
            continue;
        };
        let desc = desc.trim_matches('"');
        if !desc.is_empty() {
            out.insert(format!("{}.{}", t.name, c.name), desc.to_owned());
        }
    }
    out
}

pub fn admin_prompt(
    linked: &LinkedTables,
    schema: &DatabaseSchema,
    question: &str,
) -> Result<RenderedPrompt, AdminError> {
    if linked.tables.is_empty() {
        return Err(AdminError::NothingLinked);
    }
    let text = render_schema(schema, Some(&linked.tables))?;
    Ok(prompts::build_admin_prompt(&text, question))
}

/// One zero-temperature call describing every linked column.
pub fn describe(
    linked: &LinkedTables,
    schema: &DatabaseSchema,
    question: &str,
    backend: &dyn ChatBackend,
    endpoint: &ModelEndpoint,
) -> Result<SchemaDescription, AdminError> {
    let prompt = admin_prompt(linked, schema, question)?;
    let completion = backend.complete(endpoint, &prompt.text)?;
    if completion.text.trim().is_empty() {
        return Ok(SchemaDescription {
            per_column: BTreeMap::new(),
            raw_text: completion.text,
            empty: true,
        });
    }
    Ok(SchemaDescription {
        per_column: parse_descriptions(&completion.text, schema, linked),
        raw_text: completion.text,
        empty: false,
    })
}
