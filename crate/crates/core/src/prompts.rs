//! Prompt texts for the four model calls, plus SQL answer extraction.
//!
//! Every builder is a pure function of its inputs. Each input is inserted
//! verbatim exactly once, under its own `### ...` header, and its byte range
//! is recorded in [`RenderedPrompt::section_spans`].

use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

/// Instruction line after which the linking model emits table names.
pub const LINKING_ANSWER_MARKER: &str = "### Needed schema names";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    Linking,
    Admin,
    Generation,
    Debugging,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Section {
    Exemplars,
    Schema,
    Descriptions,
    ForeignKeys,
    Question,
    PriorSql,
    ErrorMessage,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub kind: PromptKind,
    pub text: String,
    pub section_spans: BTreeMap<Section, Range<usize>>,
}

impl RenderedPrompt {
    pub fn section(&self, s: Section) -> Option<&str> {
        self.section_spans.get(&s).map(|r| &self.text[r.clone()])
    }
}

struct Builder {
    kind: PromptKind,
    text: String,
    spans: BTreeMap<Section, Range<usize>>,
}

impl Builder {
    fn new(kind: PromptKind) -> Self {
        Self {
            kind,
            text: String::new(),
            spans: BTreeMap::new(),
        }
    }

    fn line(&mut self, s: &str) -> &mut Self {
        self.text.push_str(s);
        self.text.push('\n');
        self
    }

    fn raw(&mut self, s: &str) -> &mut Self {
        self.text.push_str(s);
        self
    }

    fn section(&mut self, tag: Section, header: &str, body: &str) -> &mut Self {
        self.line(header);
        let start = self.text.len();
        self.text.push_str(body);
        self.spans.insert(tag, start..self.text.len());
        if !body.is_empty() && !body.ends_with('\n') {
            self.text.push('\n');
        }
        self
    }

    fn finish(&mut self) -> RenderedPrompt {
        RenderedPrompt {
            kind: self.kind,
            text: std::mem::take(&mut self.text),
            section_spans: std::mem::take(&mut self.spans),
        }
    }
}

const LINKING_TASK: &str = "\
### Task
Given the candidate table schemas of a SQLite database, its foreign keys and a user question, \
list the names of the tables needed to write a SQL query that answers the question.
Answer with table names only, separated by commas.
";

fn linking_body(b: &mut Builder, schema_text: &str, fk_text: &str, question: &str) {
    b.section(Section::Schema, "### Candidate schemas", schema_text)
        .line("")
        .section(Section::ForeignKeys, "### Foreign keys", fk_text)
        .line("")
        .section(Section::Question, "### Question", question)
        .line("")
        .raw(LINKING_ANSWER_MARKER);
}

pub fn build_linking_prompt(schema_text: &str, fk_text: &str, question: &str) -> RenderedPrompt {
    let mut b = Builder::new(PromptKind::Linking);
    b.line(LINKING_TASK);
    linking_body(&mut b, schema_text, fk_text, question);
    b.finish()
}

/// One worked example for the few-shot linker.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IclExemplar {
    pub schema_text: String,
    pub fk_text: String,
    pub question: String,
    pub tables: Vec<String>,
}

impl IclExemplar {
    fn render(&self) -> String {
        let mut b = Builder::new(PromptKind::Linking);
        linking_body(&mut b, &self.schema_text, &self.fk_text, &self.question);
        b.raw("\n").raw(&self.tables.join(", ")).raw("\n");
        b.finish().text
    }
}

/// Linking prompt with worked examples ahead of the real case.
pub fn build_icl_linking_prompt(
    exemplars: &[IclExemplar],
    schema_text: &str,
    fk_text: &str,
    question: &str,
) -> RenderedPrompt {
    let mut shots = String::new();
    for (i, ex) in exemplars.iter().enumerate() {
        shots.push_str(&format!("## Example {}\n", i + 1));
        shots.push_str(&ex.render());
        shots.push('\n');
    }
    let mut b = Builder::new(PromptKind::Linking);
    b.line(LINKING_TASK)
        .section(Section::Exemplars, "### Examples", &shots)
        .line("## Now answer for this database")
        .line("");
    linking_body(&mut b, schema_text, fk_text, question);
    b.finish()
}

const ADMIN_ROLE: &str = "\
You are a database expert who knows the meaning of every table and column of the database below \
and how its tables relate to each other.";

const ADMIN_TASK: &str = "\
For every column of the schema, write one line of the form `table.column: description`. \
Explain in plain natural language what the column means, based on its name and sample column values. \
When a column can be used to connect different tables, say how, for example \
\"useful for connecting with the course table\".";

pub fn build_admin_prompt(linked_schema_text: &str, question: &str) -> RenderedPrompt {
    let mut b = Builder::new(PromptKind::Admin);
    b.line(ADMIN_ROLE)
        .line("")
        .line(ADMIN_TASK)
        .line("")
        .section(Section::Schema, "### Database schema", linked_schema_text)
        .line("")
        .section(Section::Question, "### Question the descriptions should help answer", question)
        .line("")
        .raw("### Column descriptions");
    b.finish()
}

const OPTIMIZATION_RULES: &str = "\
### Optimization rules
- Use only the tables and columns defined in the schema above.
- Select only the columns the question asks for.
- Join tables through the foreign keys listed above.
- When the question asks for the single largest or smallest item, use ORDER BY ... LIMIT 1.
- Use DISTINCT when the question asks for different or unique values.
- Match text values with the spelling and casing shown in the column examples.
- Quote identifiers that contain spaces or are reserved words with double quotes.
";

const ANSWER_FORMAT: &str = "Return a single SQLite query in a ```sql fenced code block and nothing else.";

/// `descriptions = None` leaves the column-description section out entirely.
pub fn build_generation_prompt(
    linked_schema_text: &str,
    descriptions: Option<&str>,
    fk_filtered_text: &str,
    question: &str,
) -> RenderedPrompt {
    let mut b = Builder::new(PromptKind::Generation);
    b.line("### Answer the question with a single SQLite query over the database below.")
        .line("")
        .section(Section::Schema, "### Database schema", linked_schema_text)
        .line("");
    if let Some(d) = descriptions {
        b.section(Section::Descriptions, "### Column descriptions", d)
            .line("");
    }
    b.section(Section::ForeignKeys, "### Foreign keys", fk_filtered_text)
        .line("")
        .line(OPTIMIZATION_RULES)
        .section(Section::Question, "### Question", question)
        .line("")
        .raw(ANSWER_FORMAT);
    b.finish()
}

pub fn build_debugging_prompt(
    prior_sql: &str,
    error_message: &str,
    linked_schema_text: &str,
    fk_text: &str,
    descriptions: Option<&str>,
    question: &str,
) -> RenderedPrompt {
    let mut b = Builder::new(PromptKind::Debugging);
    b.line("### The SQLite query below failed with an error. Fix it so that it runs and answers the question.")
        .line("")
        .section(Section::Schema, "### Database schema", linked_schema_text)
        .line("");
    if let Some(d) = descriptions {
        b.section(Section::Descriptions, "### Column descriptions", d)
            .line("");
    }
    b.section(Section::ForeignKeys, "### Foreign keys", fk_text)
        .line("")
        .section(Section::Question, "### Question", question)
        .line("")
        .section(Section::PriorSql, "### Failed SQL", prior_sql)
        .line("")
        .section(Section::ErrorMessage, "### Error message", error_message)
        .line("")
        .raw("Return the corrected single SQLite query in a ```sql fenced code block and nothing else.");
    b.finish()
}

/// Pulls the SQL out of a model reply: the first fenced block if any, else
/// the first line starting with SELECT or WITH up to the next blank line.
pub fn extract_sql(reply: &str) -> Option<String> {
    if let Some(start) = reply.find("```") {
        let after = &reply[start + 3..];
        // Skip the info string (```sql).
        let body_start = after.find('\n').map_or(after.len(), |i| i + 1);
        let body = &after[body_start..];
        let body = body.find("```").map_or(body, |end| &body[..end]);
        let sql = clean(body);
        if !sql.is_empty() {
            return Some(sql);
        }
    }
    let lines: Vec<&str> = reply.lines().collect();
    let first = lines.iter().position(|l| {
        let t = l.trim_start().to_ascii_uppercase();
        t.starts_with("SELECT") || t.starts_with("WITH")
    })?;
    let block: Vec<&str> = lines[first..]
        .iter()
        .take_while(|l| !l.trim().is_empty())
        .copied()
        .collect();
    let sql = clean(&block.join("\n"));
    (!sql.is_empty()).then_some(sql)
}

fn clean(sql: &str) -> String {
    sql.trim().trim_end_matches(';').trim_end().to_owned()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spans_cover_inputs_without_overlap() {
        let p = build_debugging_prompt("SELECT nme FROM t", "no such column: nme", "S", "K", Some("D"), "Q?");
        let mut ranges: Vec<_> = p.section_spans.values().cloned().collect();
        ranges.sort_by_key(|r| r.start);
        for w in ranges.windows(2) {
            assert!(w[0].end <= w[1].start);
        }
        assert_eq!(p.section(Section::ErrorMessage), Some("no such column: nme"));
        assert_eq!(p.section(Section::PriorSql), Some("SELECT nme FROM t"));
        assert_eq!(p.section_spans.len(), 6);
    }

    #[test]
    fn generation_without_descriptions_drops_the_section() {
        let with = build_generation_prompt("S", Some("D-text"), "K", "Q");
        let without = build_generation_prompt("S", None, "K", "Q");
        assert!(with.text.contains("### Column descriptions\nD-text"));
        assert!(!without.text.contains("### Column descriptions"));
        assert!(!without.section_spans.contains_key(&Section::Descriptions));
        assert_eq!(with.text.replace("### Column descriptions\nD-text\n\n", ""), without.text);
    }

    #[test]
    fn extraction_prefers_fenced_block() {
        let r = "Here you go:\n```sql\nSELECT a FROM t;\n```\nSELECT wrong";
        assert_eq!(extract_sql(r).as_deref(), Some("SELECT a FROM t"));
        let r = "The answer is\nselect a\nfrom t\n\nHope this helps";
        assert_eq!(extract_sql(r).as_deref(), Some("select a\nfrom t"));
        assert_eq!(extract_sql("WITH x AS (SELECT 1) SELECT * FROM x").as_deref(), Some("WITH x AS (SELECT 1) SELECT * FROM x"));
        assert_eq!(extract_sql("I cannot answer that."), None);
        assert_eq!(extract_sql("```\n```"), None);
    }
}
