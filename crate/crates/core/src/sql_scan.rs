//! A small SQL tokenizer for the constrained dialect of benchmark gold queries.
//!
//! It is not a grammar. It finds table references after `FROM`/`JOIN` and
//! tells whether a query has a top-level `ORDER BY`.

use std::collections::BTreeSet;

use thiserror::Error;

use crate::schema::DatabaseSchema;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ScanError {
    #[error("unterminated {what} starting at byte {offset}")]
    Unterminated { what: &'static str, offset: usize },
    #[error("query references no known table")]
    NoTables,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Token {
    /// Bare word: keyword or unquoted identifier.
    Word(String),
    /// Quoted identifier (`"x"`, `` `x` ``, `[x]`).
    Quoted(String),
    Str(String),
    Number(String),
    LParen,
    RParen,
    Comma,
    Dot,
    Semicolon,
    Op(String),
}

impl Token {
    fn is_kw(&self, kw: &str) -> bool {
        matches!(self, Token::Word(w) if w.eq_ignore_ascii_case(kw))
    }

    fn ident(&self) -> Option<&str> {
        match self {
            Token::Word(w) | Token::Quoted(w) => Some(w),
            _ => None,
        }
    }
}

pub fn tokenize(sql: &str) -> Result<Vec<Token>, ScanError> {
    let bytes = sql.as_bytes();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        match c {
            b' ' | b'\t' | b'\n' | b'\r' => i += 1,
            b'-' if bytes.get(i + 1) == Some(&b'-') => {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            }
            b'/' if bytes.get(i + 1) == Some(&b'*') => {
                let start = i;
                i += 2;
                loop {
                    if i + 1 >= bytes.len() {
                        return Err(ScanError::Unterminated {
                            what: "comment",
                            offset: start,
                        });
                    }
                    if bytes[i] == b'*' && bytes[i + 1] == b'/' {
                        i += 2;
                        break;
                    }
                    i += 1;
                }
            }
            b'\'' | b'"' | b'`' | b'[' => {
                let close = if c == b'[' { b']' } else { c };
                let start = i;
                i += 1;
                let mut text = Vec::new();
                loop {
                    match bytes.get(i) {
                        None => {
                            return Err(ScanError::Unterminated {
                                what: if c == b'\'' { "string" } else { "identifier" },
                                offset: start,
                            })
                        }
                        Some(&b) if b == close => {
                            // Doubled delimiter is an escaped delimiter.
                            if close != b']' && bytes.get(i + 1) == Some(&close) {
                                text.push(b);
                                i += 2;
                            } else {
                                i += 1;
                                break;
                            }
                        }
                        Some(&b) => {
                            text.push(b);
                            i += 1;
                        }
                    }
                }
                let text = String::from_utf8_lossy(&text).into_owned();
                tokens.push(if c == b'\'' {
                    Token::Str(text)
                } else {
                    Token::Quoted(text)
                });
            }
            b'(' => {
                tokens.push(Token::LParen);
                i += 1;
            }
            b')' => {
                tokens.push(Token::RParen);
                i += 1;
            }
            b',' => {
                tokens.push(Token::Comma);
                i += 1;
            }
            b';' => {
                tokens.push(Token::Semicolon);
                i += 1;
            }
            b'.' if !bytes.get(i + 1).is_some_and(u8::is_ascii_digit) => {
                tokens.push(Token::Dot);
                i += 1;
            }
            b'0'..=b'9' | b'.' => {
                let start = i;
                while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'.') {
                    i += 1;
                }
                tokens.push(Token::Number(sql[start..i].to_owned()));
            }
            _ if c.is_ascii_alphabetic() || c == b'_' || c >= 0x80 => {
                let start = i;
                while i < bytes.len()
                    && (bytes[i].is_ascii_alphanumeric()
                        || bytes[i] == b'_'
                        || bytes[i] == b'$'
                        || bytes[i] >= 0x80)
                {
                    i += 1;
                }
                tokens.push(Token::Word(sql[start..i].to_owned()));
            }
            _ => {
                let start = i;
                i += 1;
                while i < bytes.len() && b"<>=!|".contains(&bytes[i]) && b"<>=!|".contains(&c) {
                    i += 1;
                }
                tokens.push(Token::Op(sql[start..i].to_owned()));
            }
        }
    }
    Ok(tokens)
}

/// Words that can never be a table alias.
const CLAUSE_WORDS: &[&str] = &[
    "where", "group", "order", "having", "limit", "join", "inner", "left", "right", "outer",
    "cross", "natural", "full", "on", "using", "union", "intersect", "except", "offset", "window",
];

/// Collects every identifier used as a table reference after `FROM` or `JOIN`,
/// including comma-separated lists and references inside subqueries.
pub fn referenced_tables(tokens: &[Token]) -> Vec<String> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        if tokens[i].is_kw("from") || tokens[i].is_kw("join") {
            i += 1;
            loop {
                // A parenthesised subquery is scanned by the outer loop.
                let Some(name) = tokens.get(i).and_then(Token::ident) else {
                    break;
                };
                let mut name = name.to_owned();
                i += 1;
                // schema.table: keep the table part.
                if tokens.get(i) == Some(&Token::Dot) {
                    if let Some(t) = tokens.get(i + 1).and_then(Token::ident) {
                        name = t.to_owned();
                        i += 2;
                    }
                }
                out.push(name);
                if tokens.get(i).is_some_and(|t| t.is_kw("as")) {
                    i += 2;
                } else if let Some(Token::Word(w)) | Some(Token::Quoted(w)) = tokens.get(i) {
                    if !CLAUSE_WORDS.contains(&w.to_ascii_lowercase().as_str()) {
                        i += 1;
                    }
                }
                if tokens.get(i) == Some(&Token::Comma) {
                    i += 1;
                    continue;
                }
                break;
            }
        } else {
            i += 1;
        }
    }
    out
}

/// Returns the schema tables a query reads, in canonical casing.
pub fn extract_tables(sql: &str, schema: &DatabaseSchema) -> Result<BTreeSet<String>, ScanError> {
    let tokens = tokenize(sql)?;
    let found: BTreeSet<String> = referenced_tables(&tokens)
        .iter()
        .filter_map(|n| schema.canonical_table_name(n).map(str::to_owned))
        .collect();
    if found.is_empty() {
        return Err(ScanError::NoTables);
    }
    Ok(found)
}

/// True when the outermost query ends with an `ORDER BY` clause.
pub fn has_top_level_order_by(sql: &str) -> bool {
    let Ok(tokens) = tokenize(sql) else {
        return false;
    };
    let mut depth = 0i32;
    for (i, t) in tokens.iter().enumerate() {
        match t {
            Token::LParen => depth += 1,
            Token::RParen => depth -= 1,
            _ if depth == 0 && t.is_kw("order") => {
                if tokens.get(i + 1).is_some_and(|n| n.is_kw("by")) {
                    return true;
                }
            }
            _ => {}
        }
    }
    false
}
