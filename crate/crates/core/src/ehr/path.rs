//! Archetype path expressions: parsing, printing, matching.
//!
//! Grammar (a subset of openEHR path syntax):
//!
//! ```text
//! path     := "$archetype" ("/" segment)* | segment ("/" segment)*
//! segment  := attribute ("[" predicate ("," SP* "'" name "'")? "]")?
//! ```
//!
//! where `predicate` is an at-code (`at0001`, `at0001.1`) or a full
//! archetype id.

use std::fmt;

/// One step of an archetype path.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct EhrSegment {
    /// RM attribute name, e.g. `data`, `items`, `events`.
    pub attribute: String,
    /// at-code or archetype id filter, from the bracket predicate.
    pub node_predicate: Option<String>,
    /// Name filter, from the quoted part of the predicate.
    pub name_predicate: Option<String>,
}

/// A parsed archetype path. `rooted` is true for `$archetype/...` paths.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct EhrPath {
    pub rooted: bool,
    pub segments: Vec<EhrSegment>,
}

/// Path parse failure with the byte offset of the offending character.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("openEHR path error at byte {offset}: {message}")]
pub struct PathSyntaxError {
    pub offset: usize,
    pub message: String,
}

const ROOT: &str = "$archetype";

/// Parses an archetype path, absolute (`$archetype/...`) or relative.
pub fn parse_ehr_path(text: &str) -> Result<EhrPath, PathSyntaxError> {
    let (rooted, mut rest, mut offset) = if text == ROOT {
        return Ok(EhrPath { rooted: true, segments: Vec::new() });
    } else if let Some(r) = text.strip_prefix("$archetype/") {
        (true, r, ROOT.len() + 1)
    } else if text.starts_with('$') {
        return Err(PathSyntaxError {
            offset: 0,
            message: format!("unknown path root; expected {ROOT:?}"),
        });
    } else {
        (false, text, 0)
    };

    if rest.is_empty() {
        return Err(PathSyntaxError { offset, message: "empty path".into() });
    }

    let mut segments = Vec::new();
    loop {
        let (segment, used) = parse_segment(rest, offset)?;
        segments.push(segment);
        rest = &rest[used..];
        offset += used;
        if rest.is_empty() {
            break;
        }
        match rest.strip_prefix('/') {
            Some(r) if !r.is_empty() => {
                rest = r;
                offset += 1;
            }
            _ => {
                return Err(PathSyntaxError {
                    offset,
                    message: format!("unexpected {:?}", rest.chars().next().unwrap_or('/')),
                })
            }
        }
    }
    Ok(EhrPath { rooted, segments })
}

fn parse_segment(text: &str, base: usize) -> Result<(EhrSegment, usize), PathSyntaxError> {
    let bytes = text.as_bytes();
    let mut i = 0;
    while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
        i += 1;
    }
    if i == 0 {
        return Err(PathSyntaxError {
            offset: base,
            message: "expected an attribute name".into(),
        });
    }
    let attribute = text[..i].to_string();
    if i >= bytes.len() || bytes[i] != b'[' {
        return Ok((
            EhrSegment { attribute, node_predicate: None, name_predicate: None },
            i,
        ));
    }

    let open = i;
    i += 1;
    let pred_start = i;
    while i < bytes.len() && bytes[i] != b']' && bytes[i] != b',' && bytes[i] != b'\'' {
        i += 1;
    }
    let node_predicate = {
        let p = text[pred_start..i].trim();
        if p.is_empty() {
            return Err(PathSyntaxError {
                offset: base + pred_start,
                message: "empty node predicate".into(),
            });
        }
        Some(p.to_string())
    };

    let mut name_predicate = None;
    if i < bytes.len() && bytes[i] == b',' {
        i += 1;
        while i < bytes.len() && bytes[i] == b' ' {
            i += 1;
        }
        if i >= bytes.len() || bytes[i] != b'\'' {
            return Err(PathSyntaxError {
                offset: base + i,
                message: "expected a single-quoted name predicate".into(),
            });
        }
        i += 1;
        let name_start = i;
        while i < bytes.len() && bytes[i] != b'\'' {
            i += 1;
        }
        if i >= bytes.len() {
            return Err(PathSyntaxError {
                offset: base + name_start - 1,
                message: "unterminated name predicate".into(),
            });
        }
        name_predicate = Some(text[name_start..i].to_string());
        i += 1;
    }

    if i >= bytes.len() || bytes[i] != b']' {
        return Err(PathSyntaxError {
            offset: base + open,
            message: "unclosed [ predicate".into(),
        });
    }
    i += 1;
    Ok((EhrSegment { attribute, node_predicate, name_predicate }, i))
}

impl fmt::Display for EhrSegment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.attribute)?;
        match (&self.node_predicate, &self.name_predicate) {
            (Some(p), Some(n)) => write!(f, "[{p}, '{n}']"),
            (Some(p), None) => write!(f, "[{p}]"),
            (None, Some(n)) => write!(f, "[, '{n}']"),
            (None, None) => Ok(()),
        }
    }
}

impl fmt::Display for EhrPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.rooted {
            f.write_str(ROOT)?;
            if self.segments.is_empty() {
                return Ok(());
            }
            f.write_str("/")?;
        }
        let mut first = true;
        for seg in &self.segments {
            if !first {
                f.write_str("/")?;
            }
            first = false;
            write!(f, "{seg}")?;
        }
        Ok(())
    }
}
