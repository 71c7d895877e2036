//! FHIRconnect YAML deserialization and canonical serialization.
//!
//! Parsing is strict: unknown keys, missing keys, a bad grammar line or a
//! bad `type:` are reported with the 1-based line/column of the offending
//! node. The schema layer works on raw scalar text, so values like `R4`,
//! `1.4.1` or `0.0.1-alpha` never suffer YAML implicit typing.

mod emit;
mod loader;

pub use emit::serialize_mapping;

use std::fmt;

use crate::model::{
    Cardinality, ConditionClause, ConditionOperator, ConditionSide, ContextDocument,
    ContextHeader, ExtensionDocument, GrammarVersion, MappingDocument, MappingHeader,
    MappingKind, MappingRule, ModelDocument, TypeHint,
};
use loader::{YamlData, YamlNode};

/// What went wrong while parsing a mapping file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParseErrorKind {
    Syntax,
    UnknownKey,
    MissingKey,
    BadGrammarVersion,
    BadKind,
    TypeMismatch,
}

impl fmt::Display for ParseErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ParseErrorKind::Syntax => "Syntax",
            ParseErrorKind::UnknownKey => "UnknownKey",
            ParseErrorKind::MissingKey => "MissingKey",
            ParseErrorKind::BadGrammarVersion => "BadGrammarVersion",
            ParseErrorKind::BadKind => "BadKind",
            ParseErrorKind::TypeMismatch => "TypeMismatch",
        };
        f.write_str(s)
    }
}

/// A positioned parse failure; line and column are 1-based.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{file}:{line}:{column} {kind} {message}")]
pub struct ParseError {
    pub file: String,
    pub line: usize,
    pub column: usize,
    pub kind: ParseErrorKind,
    pub message: String,
}

type Result<T> = std::result::Result<T, ParseError>;

struct Cx<'a> {
    file: &'a str,
}

impl<'a> Cx<'a> {
    fn err(&self, node: &YamlNode, kind: ParseErrorKind, message: impl Into<String>) -> ParseError {
        ParseError {
            file: self.file.to_string(),
            line: node.line,
            column: node.col,
            kind,
            message: message.into(),
        }
    }
}

/// A strict map reader: every key must be consumed exactly once.
struct MapReader<'a> {
    node: &'a YamlNode,
    entries: &'a [(YamlNode, YamlNode)],
    consumed: Vec<bool>,
}

impl<'a> MapReader<'a> {
    fn new(cx: &Cx, node: &'a YamlNode, what: &str) -> Result<Self> {
        match &node.data {
            YamlData::Map(entries) => Ok(MapReader {
                node,
                entries,
                consumed: vec![false; entries.len()],
            }),
            _ => Err(cx.err(node, ParseErrorKind::TypeMismatch, format!("{what} must be a mapping"))),
        }
    }

    fn take(&mut self, key: &str) -> Option<&'a YamlNode> {
        for (i, (k, v)) in self.entries.iter().enumerate() {
            if self.consumed[i] {
                continue;
            }
            if let YamlData::Scalar { text, .. } = &k.data {
                if text == key {
                    self.consumed[i] = true;
                    return Some(v);
                }
            }
        }
        None
    }

    fn require(&mut self, cx: &Cx, key: &str) -> Result<&'a YamlNode> {
        self.take(key).ok_or_else(|| {
            cx.err(
                self.node,
                ParseErrorKind::MissingKey,
                format!("required key {key:?} is missing"),
            )
        })
    }

    /// Errors on the first unconsumed key. Call after all takes.
    fn finish(self, cx: &Cx) -> Result<()> {
        for (i, (k, _)) in self.entries.iter().enumerate() {
            if !self.consumed[i] {
                let shown = match &k.data {
                    YamlData::Scalar { text, .. } => text.clone(),
                    _ => "<non-scalar key>".to_string(),
                };
                return Err(cx.err(k, ParseErrorKind::UnknownKey, format!("unknown key {shown:?}")));
            }
        }
        Ok(())
    }
}

fn scalar<'a>(cx: &Cx, node: &'a YamlNode, what: &str) -> Result<&'a str> {
    match &node.data {
        YamlData::Scalar { text, .. } => Ok(text),
        _ => Err(cx.err(node, ParseErrorKind::TypeMismatch, format!("{what} must be a scalar"))),
    }
}

fn seq<'a>(cx: &Cx, node: &'a YamlNode, what: &str) -> Result<&'a [YamlNode]> {
    match &node.data {
        YamlData::Seq(items) => Ok(items),
        _ => Err(cx.err(node, ParseErrorKind::TypeMismatch, format!("{what} must be a list"))),
    }
}

/// Sequence of scalars; an empty list is fine.
fn string_list(cx: &Cx, node: &YamlNode, what: &str) -> Result<Vec<String>> {
    let items = seq(cx, node, what)?;
    items
        .iter()
        .map(|n| scalar(cx, n, "list entry").map(str::to_string))
        .collect()
}

/// Parses one FHIRconnect YAML file into its document model.
///
/// The returned kind matches the file's `type:` key. Paths inside `with:`
/// clauses are kept verbatim; path syntax is checked by the evaluators.
pub fn parse_mapping_file(bytes: &[u8], filename: &str) -> Result<MappingDocument> {
    let cx = Cx { file: filename };
    let source = std::str::from_utf8(bytes).map_err(|e| ParseError {
        file: filename.to_string(),
        line: 1,
        column: 1,
        kind: ParseErrorKind::Syntax,
        message: format!("file is not valid UTF-8: {e}"),
    })?;
    let root = loader::load(source).map_err(|e| ParseError {
        file: filename.to_string(),
        line: e.line,
        column: e.col,
        kind: ParseErrorKind::Syntax,
        message: e.message,
    })?;

    let mut top = MapReader::new(&cx, &root, "mapping file")?;

    let grammar_node = top.take("grammar").ok_or_else(|| {
        cx.err(
            &root,
            ParseErrorKind::BadGrammarVersion,
            "missing grammar line; expected grammar: FHIRConnect/v<semver>",
        )
    })?;
    let grammar_text = scalar(&cx, grammar_node, "grammar")?;
    let grammar = GrammarVersion::parse(grammar_text)
        .map_err(|m| cx.err(grammar_node, ParseErrorKind::BadGrammarVersion, m))?;
    if grammar.major != 1 {
        return Err(cx.err(
            grammar_node,
            ParseErrorKind::BadGrammarVersion,
            format!("only FHIRConnect/1.x is supported, got {grammar}"),
        ));
    }

    let kind_node = top.require(&cx, "type")?;
    let kind = match scalar(&cx, kind_node, "type")? {
        "model" => MappingKind::Model,
        "extension" => MappingKind::Extension,
        "context" => MappingKind::Context,
        other => {
            return Err(cx.err(
                kind_node,
                ParseErrorKind::BadKind,
                format!("type must be one of model, extension, context; got {other:?}"),
            ))
        }
    };

    let mut metadata = MapReader::new(&cx, top.require(&cx, "metadata")?, "metadata")?;
    let name = scalar(&cx, metadata.require(&cx, "name")?, "metadata.name")?.to_string();
    let version = scalar(&cx, metadata.require(&cx, "version")?, "metadata.version")?.to_string();
    metadata.finish(&cx)?;

    let spec_node = top.require(&cx, "spec")?;
    let mut spec = MapReader::new(&cx, spec_node, "spec")?;
    let fhir_system = scalar(&cx, spec.require(&cx, "system")?, "spec.system")?.to_string();
    let fhir_version = scalar(&cx, spec.require(&cx, "version")?, "spec.version")?.to_string();

    let doc = match kind {
        MappingKind::Model => {
            let (archetype_id, archetype_revision) = openehr_config(&cx, &mut spec)?;
            let structure_definition_url = fhir_config_sd(&cx, &mut spec)?;
            spec.finish(&cx)?;
            let rules = rule_list(&cx, top.require(&cx, "mappings")?, "mappings")?;
            top.finish(&cx)?;
            MappingDocument::Model(ModelDocument {
                header: MappingHeader {
                    grammar,
                    kind,
                    name,
                    version,
                    fhir_system,
                    fhir_version,
                    archetype_id,
                    archetype_revision,
                    structure_definition_url,
                },
                rules,
            })
        }
        MappingKind::Extension => {
            let extends = scalar(&cx, spec.require(&cx, "extends")?, "spec.extends")?.to_string();
            let (archetype_id, archetype_revision) = openehr_config(&cx, &mut spec)?;
            let structure_definition_url = fhir_config_sd(&cx, &mut spec)?;
            spec.finish(&cx)?;
            let appended_rules = match top.take("appendMappings") {
                Some(n) => rule_list(&cx, n, "appendMappings")?,
                None => Vec::new(),
            };
            let overridden_rules = match top.take("overrideMappings") {
                Some(n) => rule_list(&cx, n, "overrideMappings")?,
                None => Vec::new(),
            };
            top.finish(&cx)?;
            MappingDocument::Extension(ExtensionDocument {
                header: MappingHeader {
                    grammar,
                    kind,
                    name,
                    version,
                    fhir_system,
                    fhir_version,
                    archetype_id,
                    archetype_revision,
                    structure_definition_url,
                },
                extends,
                appended_rules,
                overridden_rules,
            })
        }
        MappingKind::Context => {
            let mut oec = MapReader::new(&cx, spec.require(&cx, "openEhrConfig")?, "spec.openEhrConfig")?;
            let template_id =
                scalar(&cx, oec.require(&cx, "templateId")?, "templateId")?.to_string();
            let start_archetype =
                scalar(&cx, oec.require(&cx, "startArchetype")?, "startArchetype")?.to_string();
            oec.finish(&cx)?;
            let mut fc = MapReader::new(&cx, spec.require(&cx, "fhirConfig")?, "spec.fhirConfig")?;
            let profile_urls = string_list(&cx, fc.require(&cx, "profiles")?, "profiles")?;
            fc.finish(&cx)?;
            spec.finish(&cx)?;
            let mut inc = MapReader::new(&cx, top.require(&cx, "context")?, "context")?;
            let imported_models = string_list(&cx, inc.require(&cx, "model")?, "context.model")?;
            let imported_extensions = match inc.take("extension") {
                Some(n) => string_list(&cx, n, "context.extension")?,
                None => Vec::new(),
            };
            inc.finish(&cx)?;
            top.finish(&cx)?;
            MappingDocument::Context(ContextDocument {
                header: ContextHeader { grammar, name, version, fhir_system, fhir_version },
                template_id,
                start_archetype,
                profile_urls,
                imported_models,
                imported_extensions,
            })
        }
    };
    Ok(doc)
}

/// Parses a terminology table file: a top-level list of
/// `{openehr_terminology_id, fhir_system_uri}` entries.
pub(crate) fn parse_terminology_entries(
    bytes: &[u8],
    filename: &str,
) -> Result<Vec<(String, String)>> {
    let cx = Cx { file: filename };
    let source = std::str::from_utf8(bytes).map_err(|e| ParseError {
        file: filename.to_string(),
        line: 1,
        column: 1,
        kind: ParseErrorKind::Syntax,
        message: format!("file is not valid UTF-8: {e}"),
    })?;
    let root = loader::load(source).map_err(|e| ParseError {
        file: filename.to_string(),
        line: e.line,
        column: e.col,
        kind: ParseErrorKind::Syntax,
        message: e.message,
    })?;
    let items = seq(&cx, &root, "terminology table")?;
    let mut out = Vec::with_capacity(items.len());
    for item in items {
        let mut map = MapReader::new(&cx, item, "terminology entry")?;
        let id = scalar(&cx, map.require(&cx, "openehr_terminology_id")?, "openehr_terminology_id")?
            .to_string();
        let uri =
            scalar(&cx, map.require(&cx, "fhir_system_uri")?, "fhir_system_uri")?.to_string();
        map.finish(&cx)?;
        out.push((id, uri));
    }
    Ok(out)
}

fn openehr_config(cx: &Cx, spec: &mut MapReader) -> Result<(String, String)> {
    let mut oec = MapReader::new(cx, spec.require(cx, "openEhrConfig")?, "spec.openEhrConfig")?;
    let archetype = scalar(cx, oec.require(cx, "archetype")?, "archetype")?.to_string();
    let revision = scalar(cx, oec.require(cx, "revision")?, "revision")?.to_string();
    oec.finish(cx)?;
    Ok((archetype, revision))
}

fn fhir_config_sd(cx: &Cx, spec: &mut MapReader) -> Result<String> {
    let mut fc = MapReader::new(cx, spec.require(cx, "fhirConfig")?, "spec.fhirConfig")?;
    let sd = scalar(cx, fc.require(cx, "structureDefinition")?, "structureDefinition")?.to_string();
    fc.finish(cx)?;
    Ok(sd)
}

fn rule_list(cx: &Cx, node: &YamlNode, what: &str) -> Result<Vec<MappingRule>> {
    let items = seq(cx, node, what)?;
    items.iter().map(|n| rule(cx, n)).collect()
}

fn rule(cx: &Cx, node: &YamlNode) -> Result<MappingRule> {
    let mut map = MapReader::new(cx, node, "mapping rule")?;
    let name = scalar(cx, map.require(cx, "name")?, "rule name")?.to_string();

    let (fhir_path, openehr_path) = match map.take("with") {
        Some(with_node) => {
            let mut with = MapReader::new(cx, with_node, "with")?;
            let fhir = scalar(cx, with.require(cx, "fhir")?, "with.fhir")?.to_string();
            let openehr = scalar(cx, with.require(cx, "openehr")?, "with.openehr")?.to_string();
            with.finish(cx)?;
            (fhir, openehr)
        }
        None => (String::new(), String::new()),
    };

    let type_hint = match map.take("dataType") {
        Some(n) => {
            let text = scalar(cx, n, "dataType")?;
            Some(TypeHint::parse(text).ok_or_else(|| {
                cx.err(
                    n,
                    ParseErrorKind::TypeMismatch,
                    format!("unknown dataType {text:?}"),
                )
            })?)
        }
        None => None,
    };

    let cardinality = match map.take("cardinality") {
        Some(n) => match scalar(cx, n, "cardinality")? {
            "one" => Cardinality::One,
            "many" => Cardinality::Many,
            other => {
                return Err(cx.err(
                    n,
                    ParseErrorKind::TypeMismatch,
                    format!("cardinality must be one or many, got {other:?}"),
                ))
            }
        },
        None => Cardinality::Many,
    };

    let slot_archetype = match map.take("slotArchetype") {
        Some(n) => Some(scalar(cx, n, "slotArchetype")?.to_string()),
        None => None,
    };

    let condition = match map.take("condition") {
        Some(n) => Some(condition(cx, n)?),
        None => None,
    };

    let children = match map.take("followedBy") {
        Some(n) => {
            let mut fb = MapReader::new(cx, n, "followedBy")?;
            let rules = rule_list(cx, fb.require(cx, "mappings")?, "followedBy.mappings")?;
            fb.finish(cx)?;
            rules
        }
        None => Vec::new(),
    };

    map.finish(cx)?;
    Ok(MappingRule {
        name,
        fhir_path,
        openehr_path,
        type_hint,
        condition,
        children,
        slot_archetype,
        cardinality,
    })
}

fn condition(cx: &Cx, node: &YamlNode) -> Result<ConditionClause> {
    let mut map = MapReader::new(cx, node, "condition")?;
    let root_node = map.require(cx, "targetRoot")?;
    let side = match scalar(cx, root_node, "targetRoot")? {
        "$resource" => ConditionSide::Fhir,
        "$archetype" => ConditionSide::OpenEhr,
        other => {
            return Err(cx.err(
                root_node,
                ParseErrorKind::TypeMismatch,
                format!("targetRoot must be $resource or $archetype, got {other:?}"),
            ))
        }
    };
    let target_path =
        scalar(cx, map.require(cx, "targetAttribute")?, "targetAttribute")?.to_string();
    let op_node = map.require(cx, "operator")?;
    let op_text = scalar(cx, op_node, "operator")?;
    let operator = ConditionOperator::parse(op_text).ok_or_else(|| {
        cx.err(
            op_node,
            ParseErrorKind::TypeMismatch,
            format!("operator must be one of equals, not-equals, exists, not-exists, one-of; got {op_text:?}"),
        )
    })?;
    let operands = match map.take("criteria") {
        Some(n) => string_list(cx, n, "criteria")?,
        None => Vec::new(),
    };
    map.finish(cx)?;
    Ok(ConditionClause { side, target_path, operator, operands })
}
