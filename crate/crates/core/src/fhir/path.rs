//! FHIRPath subset: field navigation, indexing, `where(field='literal')`
//! filters and the `extension("url")` shorthand, which desugars to
//! `extension.where(url='...')` at parse time.
//!
//! Functions beyond this subset (`first()`, `resolve()`, arithmetic) are
//! rejected by name.

use std::fmt;

/// One evaluation step.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum FhirStep {
    Field(String),
    Index(usize),
    WhereEq { field: String, literal: String },
}

/// A parsed FHIR path. `rooted` is true for `$resource...` paths.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FhirPath {
    pub rooted: bool,
    pub steps: Vec<FhirStep>,
}

/// Path parse failure with the byte offset of the offending character.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("FHIR path error at byte {offset}: {message}")]
pub struct FhirPathError {
    pub offset: usize,
    pub message: String,
}

const ROOT: &str = "$resource";

fn fail(offset: usize, message: impl Into<String>) -> FhirPathError {
    FhirPathError { offset, message: message.into() }
}

/// Parses a FHIR path, absolute (`$resource...`) or relative.
pub fn parse_fhir_path(text: &str) -> Result<FhirPath, FhirPathError> {
    let bytes = text.as_bytes();
    let mut steps = Vec::new();
    let mut i = 0;
    let rooted = if text == ROOT {
        return Ok(FhirPath { rooted: true, steps });
    } else if text.starts_with(ROOT) {
        i = ROOT.len();
        true
    } else if text.starts_with('$') {
        return Err(fail(0, format!("unknown path root; expected {ROOT:?}")));
    } else {
        false
    };

    if rooted {
        if bytes.get(i) != Some(&b'.') && bytes.get(i) != Some(&b'[') {
            return Err(fail(i, "expected '.' or '[' after $resource"));
        }
    } else if text.is_empty() {
        return Err(fail(0, "empty path"));
    }

    let mut expect_field = !rooted;
    while i < bytes.len() {
        if expect_field {
            expect_field = false;
        } else if bytes[i] == b'.' {
            i += 1;
        } else if bytes[i] == b'[' {
            let (n, next) = parse_index(text, i)?;
            steps.push(FhirStep::Index(n));
            i = next;
            continue;
        } else {
            return Err(fail(i, format!("expected '.' or '[', got {:?}", text[i..].chars().next().unwrap())));
        }

        // A field, where(...) or extension(...) follows.
        let start = i;
        while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
            i += 1;
        }
        if i == start {
            return Err(fail(start, "expected a field name"));
        }
        let word = &text[start..i];
        if bytes.get(i) == Some(&b'(') {
            match word {
                "where" => {
                    let (step, next) = parse_where(text, i)?;
                    steps.push(step);
                    i = next;
                }
                "extension" => {
                    let (url, next) = parse_extension(text, i)?;
                    steps.push(FhirStep::Field("extension".into()));
                    steps.push(FhirStep::WhereEq { field: "url".into(), literal: url });
                    i = next;
                }
                other => {
                    return Err(fail(
                        start,
                        format!("unsupported FHIRPath function {other:?}; only where(...) and extension(...) are available"),
                    ))
                }
            }
        } else {
            steps.push(FhirStep::Field(word.to_string()));
        }
    }

    Ok(FhirPath { rooted, steps })
}

fn parse_index(text: &str, open: usize) -> Result<(usize, usize), FhirPathError> {
    let bytes = text.as_bytes();
    let mut i = open + 1;
    let start = i;
    while i < bytes.len() && bytes[i].is_ascii_digit() {
        i += 1;
    }
    if i == start {
        return Err(fail(start, "expected an index"));
    }
    if bytes.get(i) != Some(&b']') {
        return Err(fail(open, "unclosed [ index"));
    }
    let n = text[start..i].parse().map_err(|_| fail(start, "index out of range"))?;
    Ok((n, i + 1))
}

fn parse_where(text: &str, open: usize) -> Result<(FhirStep, usize), FhirPathError> {
    let bytes = text.as_bytes();
    let mut i = open + 1;
    let start = i;
    while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
        i += 1;
    }
    if i == start {
        return Err(fail(start, "where(...) needs a field name"));
    }
    let field = text[start..i].to_string();
    while bytes.get(i) == Some(&b' ') {
        i += 1;
    }
    if bytes.get(i) != Some(&b'=') {
        return Err(fail(i, "where(...) needs field = 'literal'"));
    }
    i += 1;
    while bytes.get(i) == Some(&b' ') {
        i += 1;
    }
    if bytes.get(i) != Some(&b'\'') {
        return Err(fail(i, "where(...) literal must be single-quoted"));
    }
    i += 1;
    let lit_start = i;
    while i < bytes.len() && bytes[i] != b'\'' {
        i += 1;
    }
    if i >= bytes.len() {
        return Err(fail(lit_start - 1, "unterminated literal"));
    }
    let literal = text[lit_start..i].to_string();
    i += 1;
    if bytes.get(i) != Some(&b')') {
        return Err(fail(open, "unclosed where("));
    }
    Ok((FhirStep::WhereEq { field, literal }, i + 1))
}

fn parse_extension(text: &str, open: usize) -> Result<(String, usize), FhirPathError> {
    let bytes = text.as_bytes();
    let mut i = open + 1;
    if bytes.get(i) != Some(&b'"') {
        return Err(fail(i, "extension(...) url must be double-quoted"));
    }
    i += 1;
    let start = i;
    while i < bytes.len() && bytes[i] != b'"' {
        i += 1;
    }
    if i >= bytes.len() {
        return Err(fail(start - 1, "unterminated url"));
    }
    let url = text[start..i].to_string();
    i += 1;
    if bytes.get(i) != Some(&b')') {
        return Err(fail(open, "unclosed extension("));
    }
    Ok((url, i + 1))
}

impl fmt::Display for FhirPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.rooted {
            f.write_str(ROOT)?;
        }
        let mut first = !self.rooted;
        for step in &self.steps {
            match step {
                FhirStep::Field(name) => {
                    if first {
                        first = false;
                        write!(f, "{name}")?;
                    } else {
                        write!(f, ".{name}")?;
                    }
                }
                FhirStep::Index(n) => write!(f, "[{n}]")?,
                FhirStep::WhereEq { field, literal } => {
                    if first {
                        first = false;
                        write!(f, "where({field}='{literal}')")?;
                    } else {
                        write!(f, ".where({field}='{literal}')")?;
                    }
                }
            }
        }
        Ok(())
    }
}
