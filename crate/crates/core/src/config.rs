//! Text-proto style key-value grammar shared by constraint configs and the
//! optional CLI config file:
//!
//! ```text
//! # comment
//! key: value
//! block { key: value nested { ... } }
//! ```
//!
//! Values are bare words, numbers or double-quoted strings. Keys may repeat.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Scalar(String),
    Block(Vec<Entry>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub key: String,
    pub value: Value,
    pub line: usize,
    pub column: usize,
}

impl Entry {
    pub fn error(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            line: self.line,
            column: self.column,
            message: message.into(),
        }
    }

    pub fn scalar(&self) -> Result<&str> {
        match &self.value {
            Value::Scalar(s) => Ok(s),
            Value::Block(_) => Err(self.error(format!("'{}' expects a value, found a block", self.key))),
        }
    }

    pub fn block(&self) -> Result<&[Entry]> {
        match &self.value {
            Value::Block(b) => Ok(b),
            Value::Scalar(_) => Err(self.error(format!("'{}' expects a block", self.key))),
        }
    }

    pub fn number(&self) -> Result<f64> {
        let s = self.scalar()?;
        s.parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| self.error(format!("'{}' expects a finite number, got '{s}'", self.key)))
    }

    pub fn integer(&self) -> Result<i64> {
        let s = self.scalar()?;
        s.parse::<i64>()
            .map_err(|_| self.error(format!("'{}' expects an integer, got '{s}'", self.key)))
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Word(String),
    Colon,
    Open,
    Close,
}

fn tokenize(text: &str) -> Result<Vec<(Tok, usize, usize)>> {
    let mut out = Vec::new();
    for (li, line) in text.lines().enumerate() {
        let chars: Vec<char> = line.chars().collect();
        let mut i = 0;
        while i < chars.len() {
            let c = chars[i];
            let (l, col) = (li + 1, i + 1);
            match c {
                '#' => break,
                c if c.is_whitespace() || c == ',' || c == ';' => i += 1,
                ':' => {
                    out.push((Tok::Colon, l, col));
                    i += 1;
                }
                '{' => {
                    out.push((Tok::Open, l, col));
                    i += 1;
                }
                '}' => {
                    out.push((Tok::Close, l, col));
                    i += 1;
                }
                '"' => {
                    let start = i + 1;
                    let end = chars[start..].iter().position(|&c| c == '"').ok_or(Error::Parse {
                        line: l,
                        column: col,
                        message: "unterminated string".into(),
                    })?;
                    out.push((Tok::Word(chars[start..start + end].iter().collect()), l, col));
                    i = start + end + 1;
                }
                _ => {
                    let start = i;
                    while i < chars.len() && !matches!(chars[i], ':' | '{' | '}' | '#' | '"' | ',' | ';') && !chars[i].is_whitespace() {
                        i += 1;
                    }
                    out.push((Tok::Word(chars[start..i].iter().collect()), l, col));
                }
            }
        }
    }
    Ok(out)
}

/// Parses a whole document into its top-level entries.
pub fn parse(text: &str) -> Result<Vec<Entry>> {
    let toks = tokenize(text)?;
    let mut pos = 0;
    let entries = parse_entries(&toks, &mut pos, false)?;
    Ok(entries)
}

fn parse_entries(toks: &[(Tok, usize, usize)], pos: &mut usize, nested: bool) -> Result<Vec<Entry>> {
    let mut out = Vec::new();
    loop {
        let Some((tok, line, column)) = toks.get(*pos).cloned() else {
            if nested {
                let (l, c) = toks.last().map_or((1, 1), |t| (t.1, t.2));
                return Err(Error::Parse {
                    line: l,
                    column: c,
                    message: "missing '}'".into(),
                });
            }
            return Ok(out);
        };
        let err = |m: &str| Error::Parse {
            line,
            column,
            message: m.into(),
        };
        match tok {
            Tok::Close if nested => {
                *pos += 1;
                return Ok(out);
            }
            Tok::Close => return Err(err("unexpected '}'")),
            Tok::Colon | Tok::Open => return Err(err("expected a key")),
            Tok::Word(key) => {
                *pos += 1;
                let mut next = toks.get(*pos).map(|t| t.0.clone());
                if next == Some(Tok::Colon) {
                    *pos += 1;
                    next = toks.get(*pos).map(|t| t.0.clone());
                    if let Some(Tok::Word(v)) = next {
                        *pos += 1;
                        out.push(Entry {
                            key,
                            value: Value::Scalar(v),
                            line,
                            column,
                        });
                        continue;
                    }
                }
                if next == Some(Tok::Open) {
                    *pos += 1;
                    let inner = parse_entries(toks, pos, true)?;
                    out.push(Entry {
                        key,
                        value: Value::Block(inner),
                        line,
                        column,
                    });
                    continue;
                }
                return Err(err(&format!("expected a value or block after '{key}'")));
            }
        }
    }
}

/// Canonical text form, one entry per line with two-space indentation.
pub fn to_text(entries: &[Entry]) -> String {
    let mut out = String::new();
    write_entries(entries, 0, &mut out);
    out
}

fn write_entries(entries: &[Entry], depth: usize, out: &mut String) {
    for e in entries {
        out.push_str(&"  ".repeat(depth));
        match &e.value {
            Value::Scalar(s) => {
                let needs_quotes = s.is_empty() || s.chars().any(|c| c.is_whitespace() || ":{}#\",;".contains(c));
                if needs_quotes {
                    out.push_str(&format!("{}: \"{}\"\n", e.key, s));
                } else {
                    out.push_str(&format!("{}: {}\n", e.key, s));
                }
            }
            Value::Block(b) => {
                out.push_str(&format!("{} {{\n", e.key));
                write_entries(b, depth + 1, out);
                out.push_str(&"  ".repeat(depth));
                out.push_str("}\n");
            }
        }
    }
}

/// Shorthand for building entries programmatically.
pub fn scalar(key: &str, value: impl ToString) -> Entry {
    Entry {
        key: key.into(),
        value: Value::Scalar(value.to_string()),
        line: 0,
        column: 0,
    }
}

pub fn block(key: &str, entries: Vec<Entry>) -> Entry {
    Entry {
        key: key.into(),
        value: Value::Block(entries),
        line: 0,
        column: 0,
    }
}
