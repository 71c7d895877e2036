//! Exact decimal values carried as their literal text.
//!
//! Clinical quantities must survive transformation without drift, so magnitudes
//! are never parsed into floats. A [`Decimal`] holds the original JSON-number
//! lexical form and compares string-exact.

use std::fmt;
use std::str::FromStr;

/// A decimal number kept in its exact lexical form.
///
/// The accepted grammar is the JSON number grammar: optional minus sign,
/// integer part without leading zeros, optional fraction, optional exponent.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Decimal(String);

/// Error produced when a string is not a valid JSON-number literal.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid decimal literal {0:?}")]
pub struct DecimalError(pub String);

impl Decimal {
    /// The literal text, exactly as given.
    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Converts to a JSON number preserving the literal.
    pub fn to_json_number(&self) -> serde_json::Number {
        // Validated at construction, so this cannot fail.
        serde_json::Number::from_str(&self.0).expect("validated decimal literal")
    }
}

impl FromStr for Decimal {
    type Err = DecimalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if is_json_number(s) {
            Ok(Decimal(s.to_string()))
        } else {
            Err(DecimalError(s.to_string()))
        }
    }
}

impl From<i64> for Decimal {
    fn from(n: i64) -> Self {
        Decimal(n.to_string())
    }
}

impl fmt::Display for Decimal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

fn is_json_number(s: &str) -> bool {
    let b = s.as_bytes();
    let mut i = 0;
    if i < b.len() && b[i] == b'-' {
        i += 1;
    }
    // integer part: 0 | [1-9][0-9]*
    match b.get(i) {
        Some(b'0') => i += 1,
        Some(c) if c.is_ascii_digit() => {
            while i < b.len() && b[i].is_ascii_digit() {
                i += 1;
            }
        }
        _ => return false,
    }
    if i < b.len() && b[i] == b'.' {
        i += 1;
        let start = i;
        while i < b.len() && b[i].is_ascii_digit() {
            i += 1;
        }
        if i == start {
            return false;
        }
    }
    if i < b.len() && (b[i] == b'e' || b[i] == b'E') {
        i += 1;
        if i < b.len() && (b[i] == b'+' || b[i] == b'-') {
            i += 1;
        }
        let start = i;
        while i < b.len() && b[i].is_ascii_digit() {
            i += 1;
        }
        if i == start {
            return false;
        }
    }
    i == b.len()
}
