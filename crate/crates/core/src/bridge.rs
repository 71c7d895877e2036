//! Bidirectional conversion between openEHR data values and FHIR data
//! types, plus the terminology-id / system-URI mapping the coded pairs
//! need.
//!
//! The core table covers seven lossless pairs; two documented workarounds
//! sit beside it: a multi-coding CodeableConcept folds into one defining
//! code (warning or error, depending on strictness), and Reference passes
//! through as text.

use std::path::Path;

use indexmap::IndexMap;

use crate::ehr::DataValue;
use crate::fhir::{FhirCoding, FhirValue};
use crate::yaml::{ParseError, ParseErrorKind};

/// One row of the conversion table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BridgeEntry {
    pub openehr_type: &'static str,
    pub fhir_type: &'static str,
    pub lossless: bool,
    pub notes: &'static str,
}

/// The declared conversion table. At most one entry per type pair.
pub const BRIDGE_TABLE: &[BridgeEntry] = &[
    BridgeEntry {
        openehr_type: "CODED_TEXT",
        fhir_type: "CodeableConcept",
        lossless: true,
        notes: "one defining code; extra input codings are dropped with a warning",
    },
    BridgeEntry { openehr_type: "TEXT", fhir_type: "String", lossless: true, notes: "" },
    BridgeEntry { openehr_type: "DATE_TIME", fhir_type: "DateTime", lossless: true, notes: "lexical identity" },
    BridgeEntry { openehr_type: "QUANTITY", fhir_type: "Quantity", lossless: true, notes: "magnitude string-exact" },
    BridgeEntry { openehr_type: "BOOLEAN", fhir_type: "Boolean", lossless: true, notes: "" },
    BridgeEntry { openehr_type: "IDENTIFIER", fhir_type: "Identifier", lossless: true, notes: "" },
    BridgeEntry { openehr_type: "COUNT", fhir_type: "Integer", lossless: true, notes: "" },
    BridgeEntry {
        openehr_type: "CODED_TEXT",
        fhir_type: "Coding",
        lossless: true,
        notes: "coding form for extension values",
    },
    BridgeEntry {
        openehr_type: "TEXT",
        fhir_type: "Reference",
        lossless: true,
        notes: "workaround: reference URI carried as text",
    },
];

/// Looks up the table entry for a pair of variant tags.
pub fn bridge_entry(openehr_type: &str, fhir_type: &str) -> Option<&'static BridgeEntry> {
    BRIDGE_TABLE
        .iter()
        .find(|e| e.openehr_type == openehr_type && e.fhir_type == fhir_type)
}

/// Conversion failure.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BridgeError {
    #[error("no conversion from {from} to {to}")]
    UnsupportedPair { from: String, to: String },
    #[error("terminology id {id:?} has no system URI mapping and passthrough is off")]
    TerminologyUnmapped { id: String },
    #[error("conversion drops data in strict mode: {detail}")]
    LossyWithoutConsent { detail: String },
}

/// Terminology-id to system-URI mapping, user-extensible.
#[derive(Debug, Clone)]
pub struct TerminologyTable {
    forward: IndexMap<String, String>,
    reverse: IndexMap<String, String>,
    /// Forward unknown non-URI ids verbatim instead of erroring.
    pub passthrough_unmapped: bool,
}

impl Default for TerminologyTable {
    fn default() -> Self {
        let mut table = TerminologyTable {
            forward: IndexMap::new(),
            reverse: IndexMap::new(),
            passthrough_unmapped: false,
        };
        for (id, uri) in [
            ("SNOMED-CT", "http://snomed.info/sct"),
            ("LOINC", "http://loinc.org"),
            ("UCUM", "http://unitsofmeasure.org"),
            ("ICD-10-GM", "http://fhir.de/CodeSystem/bfarm/icd-10-gm"),
        ] {
            table.insert(id, uri);
        }
        table
    }
}

impl TerminologyTable {
    pub fn insert(&mut self, openehr_id: &str, system_uri: &str) {
        self.forward.insert(openehr_id.to_string(), system_uri.to_string());
        self.reverse.insert(system_uri.to_string(), openehr_id.to_string());
    }

    /// Maps an openEHR terminology id to a FHIR system URI.
    pub fn to_system_uri(&self, id: &str) -> Result<String, BridgeError> {
        if let Some(uri) = self.forward.get(id) {
            return Ok(uri.clone());
        }
        if looks_like_uri(id) || self.passthrough_unmapped {
            return Ok(id.to_string());
        }
        Err(BridgeError::TerminologyUnmapped { id: id.to_string() })
    }

    /// Maps a FHIR system URI back to a terminology id. Unknown URIs pass
    /// through unchanged, which keeps the pair reversible.
    pub fn to_terminology_id(&self, uri: &str) -> String {
        self.reverse.get(uri).cloned().unwrap_or_else(|| uri.to_string())
    }

    /// Loads extra rows from a YAML file: a list of
    /// `{openehr_terminology_id, fhir_system_uri}` entries, merged over the
    /// defaults.
    pub fn load(path: &Path) -> Result<Self, ParseError> {
        let bytes = std::fs::read(path).map_err(|e| ParseError {
            file: path.display().to_string(),
            line: 1,
            column: 1,
            kind: ParseErrorKind::Syntax,
            message: format!("cannot read terminology table: {e}"),
        })?;
        let mut table = TerminologyTable::default();
        for (id, uri) in parse_terminology_yaml(&bytes, &path.display().to_string())? {
            table.insert(&id, &uri);
        }
        Ok(table)
    }
}

fn looks_like_uri(s: &str) -> bool {
    s.contains("://") || s.starts_with("urn:")
}

fn parse_terminology_yaml(bytes: &[u8], file: &str) -> Result<Vec<(String, String)>, ParseError> {
    // Reuses the mapping-file loader for positioned errors.
    crate::yaml::parse_terminology_entries(bytes, file)
}

/// The conversion engine: a terminology table plus strictness.
#[derive(Debug, Clone, Default)]
pub struct Bridge {
    pub terminology: TerminologyTable,
    /// Error out (instead of warning) when a conversion drops data.
    pub strict_lossy: bool,
}

/// A converted value plus any loss warnings the conversion produced.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Converted<T> {
    pub value: T,
    pub warnings: Vec<String>,
}

impl<T> Converted<T> {
    fn clean(value: T) -> Self {
        Converted { value, warnings: Vec::new() }
    }
}

impl Bridge {
    pub fn new(terminology: TerminologyTable, strict_lossy: bool) -> Self {
        Bridge { terminology, strict_lossy }
    }

    /// openEHR to FHIR. Without a target the default pairing applies.
    pub fn to_fhir(
        &self,
        value: &DataValue,
        target: Option<&str>,
    ) -> Result<Converted<FhirValue>, BridgeError> {
        let target = target.unwrap_or(match value {
            DataValue::CodedText { .. } => "CodeableConcept",
            DataValue::Text { .. } => "String",
            DataValue::DateTime { .. } => "DateTime",
            DataValue::Quantity { .. } => "Quantity",
            DataValue::Boolean { .. } => "Boolean",
            DataValue::Identifier { .. } => "Identifier",
            DataValue::Count { .. } => "Integer",
        });
        let unsupported = || BridgeError::UnsupportedPair {
            from: value.tag().to_string(),
            to: target.to_string(),
        };
        if bridge_entry(value.tag(), target).is_none() {
            return Err(unsupported());
        }
        let out = match (value, target) {
            (DataValue::CodedText { value, code, terminology }, "CodeableConcept") => {
                FhirValue::CodeableConcept {
                    codings: vec![FhirCoding {
                        system: Some(self.terminology.to_system_uri(terminology)?),
                        code: code.clone(),
                        display: Some(value.clone()),
                    }],
                    text: Some(value.clone()),
                }
            }
            (DataValue::CodedText { value, code, terminology }, "Coding") => {
                FhirValue::Coding(FhirCoding {
                    system: Some(self.terminology.to_system_uri(terminology)?),
                    code: code.clone(),
                    display: Some(value.clone()),
                })
            }
            (DataValue::Text { value }, "String") => FhirValue::String { value: value.clone() },
            (DataValue::Text { value }, "Reference") => {
                FhirValue::Reference { reference: value.clone() }
            }
            (DataValue::DateTime { value }, "DateTime") => {
                FhirValue::DateTime { value: value.clone() }
            }
            (DataValue::Quantity { magnitude, unit }, "Quantity") => FhirValue::Quantity {
                value: magnitude.clone(),
                unit: Some(unit.clone()),
                system: Some("http://unitsofmeasure.org".to_string()),
                code: Some(unit.clone()),
            },
            (DataValue::Boolean { value }, "Boolean") => FhirValue::Boolean { value: *value },
            (DataValue::Identifier { id, issuer, id_type }, "Identifier") => {
                FhirValue::Identifier {
                    system: issuer.clone(),
                    value: id.clone(),
                    id_type: id_type.clone(),
                }
            }
            (DataValue::Count { value }, "Integer") => FhirValue::Integer { value: *value },
            _ => return Err(unsupported()),
        };
        Ok(Converted::clean(out))
    }

    /// FHIR to openEHR; the inverse on the lossless subset.
    pub fn to_openehr(
        &self,
        value: &FhirValue,
        target: Option<&str>,
    ) -> Result<Converted<DataValue>, BridgeError> {
        let target = target.unwrap_or(match value {
            FhirValue::CodeableConcept { .. } | FhirValue::Coding(_) => "CODED_TEXT",
            FhirValue::String { .. } => "TEXT",
            FhirValue::DateTime { .. } => "DATE_TIME",
            FhirValue::Quantity { .. } => "QUANTITY",
            FhirValue::Boolean { .. } => "BOOLEAN",
            FhirValue::Integer { .. } => "COUNT",
            FhirValue::Identifier { .. } => "IDENTIFIER",
            FhirValue::Reference { .. } => "TEXT",
        });
        let unsupported = || BridgeError::UnsupportedPair {
            from: value.tag().to_string(),
            to: target.to_string(),
        };
        if bridge_entry(target, value.tag()).is_none() {
            return Err(unsupported());
        }
        let mut warnings = Vec::new();
        let out = match (value, target) {
            (FhirValue::CodeableConcept { codings, text }, "CODED_TEXT") => {
                let Some(first) = codings.first() else {
                    // A text-only concept has no defining code to carry.
                    let text = text.clone().unwrap_or_default();
                    warnings.push("CodeableConcept without codings mapped to text".to_string());
                    return Ok(Converted { value: DataValue::Text { value: text }, warnings });
                };
                if codings.len() > 1 {
                    let detail = format!(
                        "{} additional codings dropped; openEHR coded text holds one defining code",
                        codings.len() - 1
                    );
                    if self.strict_lossy {
                        return Err(BridgeError::LossyWithoutConsent { detail });
                    }
                    warnings.push(detail);
                }
                DataValue::CodedText {
                    value: text
                        .clone()
                        .or_else(|| first.display.clone())
                        .unwrap_or_else(|| first.code.clone()),
                    code: first.code.clone(),
                    terminology: self
                        .terminology
                        .to_terminology_id(first.system.as_deref().unwrap_or("")),
                }
            }
            (FhirValue::Coding(c), "CODED_TEXT") => DataValue::CodedText {
                value: c.display.clone().unwrap_or_else(|| c.code.clone()),
                code: c.code.clone(),
                terminology: self.terminology.to_terminology_id(c.system.as_deref().unwrap_or("")),
            },
            (FhirValue::String { value }, "TEXT") => DataValue::Text { value: value.clone() },
            (FhirValue::Reference { reference }, "TEXT") => {
                DataValue::Text { value: reference.clone() }
            }
            (FhirValue::DateTime { value }, "DATE_TIME") => {
                DataValue::DateTime { value: value.clone() }
            }
            (FhirValue::Quantity { value, unit, code, .. }, "QUANTITY") => {
                // UCUM "1" is the unity unit for quantities arriving bare.
                let unit = code
                    .clone()
                    .or_else(|| unit.clone())
                    .unwrap_or_else(|| "1".to_string());
                DataValue::Quantity { magnitude: value.clone(), unit }
            }
            (FhirValue::Boolean { value }, "BOOLEAN") => DataValue::Boolean { value: *value },
            (FhirValue::Integer { value }, "COUNT") => DataValue::Count { value: *value },
            (FhirValue::Identifier { system, value, id_type }, "IDENTIFIER") => {
                DataValue::Identifier {
                    id: value.clone(),
                    issuer: system.clone(),
                    id_type: id_type.clone(),
                }
            }
            _ => return Err(unsupported()),
        };
        Ok(Converted { value: out, warnings })
    }
}
