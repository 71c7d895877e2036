//! JSON object-tree model of FHIR R4 resources and the path evaluator for
//! the `$resource...` side of every rule.
//!
//! Choice-typed elements (`onset[x]`, `value[x]`, ...) are addressed by their
//! unsuffixed name; reads probe the suffixed JSON keys and report the
//! concrete variant, writes append the variant suffix.

mod path;

pub use path::{parse_fhir_path, FhirPath, FhirPathError, FhirStep};

use std::sync::LazyLock;

use regex::Regex;
use serde_json::{Map, Value};

use crate::decimal::Decimal;

/// A FHIR R4 resource as a JSON object tree.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FhirDocument {
    pub resource_type: String,
    pub root: Value,
}

/// Failure while building a document from JSON.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid FHIR resource: {0}")]
pub struct FhirDocError(pub String);

impl FhirDocument {
    /// An empty resource of the given type.
    pub fn new(resource_type: impl Into<String>) -> Self {
        let resource_type = resource_type.into();
        let mut obj = Map::new();
        obj.insert("resourceType".into(), Value::String(resource_type.clone()));
        FhirDocument { resource_type, root: Value::Object(obj) }
    }

    /// Wraps parsed JSON; the object must carry a string `resourceType`.
    pub fn from_json(root: Value) -> Result<Self, FhirDocError> {
        let resource_type = root
            .as_object()
            .and_then(|o| o.get("resourceType"))
            .and_then(Value::as_str)
            .ok_or_else(|| FhirDocError("missing resourceType".into()))?
            .to_string();
        Ok(FhirDocument { resource_type, root })
    }

    pub fn to_json(&self) -> Value {
        self.root.clone()
    }

    /// Declared profiles, from `meta.profile`.
    pub fn profiles(&self) -> Vec<&str> {
        self.root["meta"]["profile"]
            .as_array()
            .map(|a| a.iter().filter_map(Value::as_str).collect())
            .unwrap_or_default()
    }
}

/// Code with optional system and display.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FhirCoding {
    pub system: Option<String>,
    pub code: String,
    pub display: Option<String>,
}

/// Typed leaf value on the FHIR side.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FhirValue {
    CodeableConcept { codings: Vec<FhirCoding>, text: Option<String> },
    Coding(FhirCoding),
    String { value: String },
    DateTime { value: String },
    Quantity { value: Decimal, unit: Option<String>, system: Option<String>, code: Option<String> },
    Boolean { value: bool },
    Integer { value: i64 },
    Identifier { system: Option<String>, value: String, id_type: Option<String> },
    Reference { reference: String },
}

impl FhirValue {
    pub fn tag(&self) -> &'static str {
        match self {
            FhirValue::CodeableConcept { .. } => "CodeableConcept",
            FhirValue::Coding(_) => "Coding",
            FhirValue::String { .. } => "String",
            FhirValue::DateTime { .. } => "DateTime",
            FhirValue::Quantity { .. } => "Quantity",
            FhirValue::Boolean { .. } => "Boolean",
            FhirValue::Integer { .. } => "Integer",
            FhirValue::Identifier { .. } => "Identifier",
            FhirValue::Reference { .. } => "Reference",
        }
    }

    /// Canonical string form used by condition predicates.
    pub fn canonical_string(&self) -> String {
        match self {
            FhirValue::CodeableConcept { codings, text } => codings
                .first()
                .map(|c| c.code.clone())
                .or_else(|| text.clone())
                .unwrap_or_default(),
            FhirValue::Coding(c) => c.code.clone(),
            FhirValue::String { value } => value.clone(),
            FhirValue::DateTime { value } => value.clone(),
            FhirValue::Quantity { value, .. } => value.to_string(),
            FhirValue::Boolean { value } => value.to_string(),
            FhirValue::Integer { value } => value.to_string(),
            FhirValue::Identifier { value, .. } => value.clone(),
            FhirValue::Reference { reference } => reference.clone(),
        }
    }
}

/// Choice-typed element names this engine resolves, shared by reads and
/// writes. FHIR R4 core fields of the shape `name[x]`.
const CHOICE_FIELDS: &[&str] = &[
    "value",
    "onset",
    "abatement",
    "effective",
    "performed",
    "occurrence",
    "deceased",
    "multipleBirth",
    "medication",
];

/// (suffix, tag) probe order for choice reads; fixed for determinism.
const CHOICE_SUFFIXES: &[&str] = &[
    "CodeableConcept",
    "Coding",
    "Quantity",
    "DateTime",
    "String",
    "Boolean",
    "Integer",
    "Identifier",
    "Reference",
];

pub(crate) fn is_choice_field(name: &str) -> bool {
    CHOICE_FIELDS.contains(&name)
}

static FHIR_DATETIME: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"^[0-9]{4}(-[0-9]{2}(-[0-9]{2}(T[0-9]{2}:[0-9]{2}(:[0-9]{2}(\.[0-9]+)?)?(Z|[+-][0-9]{2}:[0-9]{2})?)?)?)?$",
    )
    .expect("static regex")
});

/// Whether a string matches the FHIR dateTime lexical form.
pub fn is_fhir_datetime(s: &str) -> bool {
    FHIR_DATETIME.is_match(s)
}

#[derive(Debug, Clone)]
pub(crate) struct EvalHit<'a> {
    pub value: &'a Value,
    /// Variant implied by the suffixed key the hit came through, if any.
    pub suffix_tag: Option<&'static str>,
    /// Dotted trail with indices, e.g. `code.coding[0].system`.
    pub trail: String,
}

fn push_flattened<'a>(
    out: &mut Vec<EvalHit<'a>>,
    value: &'a Value,
    tag: Option<&'static str>,
    trail: String,
) {
    match value {
        Value::Array(items) => {
            for (i, item) in items.iter().enumerate() {
                out.push(EvalHit { value: item, suffix_tag: tag, trail: format!("{trail}[{i}]") });
            }
        }
        _ => out.push(EvalHit { value, suffix_tag: tag, trail }),
    }
}

pub(crate) fn eval<'a>(root: &'a Value, steps: &[FhirStep]) -> Vec<EvalHit<'a>> {
    let mut current = vec![EvalHit { value: root, suffix_tag: None, trail: String::new() }];
    for step in steps {
        let mut next = Vec::new();
        for hit in &current {
            match step {
                FhirStep::Field(f) => {
                    let Some(obj) = hit.value.as_object() else { continue };
                    let base = if hit.trail.is_empty() {
                        f.to_string()
                    } else {
                        format!("{}.{f}", hit.trail)
                    };
                    if let Some(v) = obj.get(f.as_str()) {
                        push_flattened(&mut next, v, None, base);
                    } else {
                        // Choice probe: onset -> onsetDateTime etc.
                        for suffix in CHOICE_SUFFIXES {
                            let key = format!("{f}{suffix}");
                            if let Some(v) = obj.get(&key) {
                                let trail = if hit.trail.is_empty() {
                                    key.clone()
                                } else {
                                    format!("{}.{key}", hit.trail)
                                };
                                push_flattened(&mut next, v, Some(suffix), trail);
                            }
                        }
                    }
                }
                FhirStep::Index(n) => match hit.value {
                    Value::Array(items) => {
                        if let Some(v) = items.get(*n) {
                            next.push(EvalHit {
                                value: v,
                                suffix_tag: None,
                                trail: format!("{}[{n}]", hit.trail),
                            });
                        }
                    }
                    other if *n == 0 => {
                        next.push(EvalHit { value: other, suffix_tag: hit.suffix_tag, trail: hit.trail.clone() });
                    }
                    _ => {}
                },
                FhirStep::WhereEq { field, literal } => {
                    if where_matches(hit.value, field, literal) {
                        next.push(hit.clone());
                    }
                }
            }
        }
        current = next;
    }
    current
}

fn where_matches(value: &Value, field: &str, literal: &str) -> bool {
    match value.get(field) {
        Some(Value::String(s)) => s == literal,
        Some(Value::Bool(b)) => b.to_string() == literal,
        Some(Value::Number(n)) => n.to_string() == literal,
        _ => false,
    }
}

/// All values the path addresses, in document order.
///
/// Choice reads through an unsuffixed field report the concrete variant of
/// the suffixed key found. JSON shapes outside the supported value set are
/// skipped, never errors.
pub fn get_values(doc: &FhirDocument, path: &FhirPath) -> Vec<FhirValue> {
    eval(&doc.root, &path.steps)
        .into_iter()
        .filter_map(|hit| classify(hit.value, hit.suffix_tag))
        .collect()
}

/// Interprets a JSON node as a typed value. With a suffix tag the variant is
/// forced; otherwise the JSON shape decides.
pub(crate) fn classify(value: &Value, suffix_tag: Option<&str>) -> Option<FhirValue> {
    if let Some(tag) = suffix_tag {
        return classify_as(value, tag);
    }
    match value {
        Value::Bool(b) => Some(FhirValue::Boolean { value: *b }),
        Value::Number(n) => match n.as_i64() {
            Some(i) => Some(FhirValue::Integer { value: i }),
            // Bare non-integer numbers have no variant of their own; keep
            // the literal as a string.
            None => Some(FhirValue::String { value: n.to_string() }),
        },
        Value::String(s) => {
            if is_fhir_datetime(s) {
                Some(FhirValue::DateTime { value: s.clone() })
            } else {
                Some(FhirValue::String { value: s.clone() })
            }
        }
        Value::Object(obj) => {
            if obj.contains_key("coding") || (obj.contains_key("text") && obj.len() == 1) {
                return classify_as(value, "CodeableConcept");
            }
            if obj.contains_key("reference") {
                return classify_as(value, "Reference");
            }
            if let Some(v) = obj.get("value") {
                if v.is_number() {
                    return classify_as(value, "Quantity");
                }
                if v.is_string() {
                    return classify_as(value, "Identifier");
                }
            }
            if obj.contains_key("code") {
                return classify_as(value, "Coding");
            }
            // Unwrap a whole extension entry: {url, value[x]}.
            if obj.contains_key("url") {
                for suffix in CHOICE_SUFFIXES {
                    if let Some(inner) = obj.get(&format!("value{suffix}")) {
                        return classify_as(inner, suffix);
                    }
                }
            }
            None
        }
        _ => None,
    }
}

fn classify_as(value: &Value, tag: &str) -> Option<FhirValue> {
    match tag {
        "CodeableConcept" => {
            let obj = value.as_object()?;
            let codings = obj
                .get("coding")
                .and_then(Value::as_array)
                .map(|a| a.iter().filter_map(coding_from_json).collect())
                .unwrap_or_default();
            let text = obj.get("text").and_then(Value::as_str).map(str::to_string);
            Some(FhirValue::CodeableConcept { codings, text })
        }
        "Coding" => coding_from_json(value).map(FhirValue::Coding),
        "String" => value.as_str().map(|s| FhirValue::String { value: s.to_string() }),
        "DateTime" => value.as_str().map(|s| FhirValue::DateTime { value: s.to_string() }),
        "Quantity" => {
            let obj = value.as_object()?;
            let magnitude: Decimal = obj.get("value")?.as_number()?.to_string().parse().ok()?;
            Some(FhirValue::Quantity {
                value: magnitude,
                unit: obj.get("unit").and_then(Value::as_str).map(str::to_string),
                system: obj.get("system").and_then(Value::as_str).map(str::to_string),
                code: obj.get("code").and_then(Value::as_str).map(str::to_string),
            })
        }
        "Boolean" => value.as_bool().map(|b| FhirValue::Boolean { value: b }),
        "Integer" => value.as_i64().map(|i| FhirValue::Integer { value: i }),
        "Identifier" => {
            let obj = value.as_object()?;
            Some(FhirValue::Identifier {
                system: obj.get("system").and_then(Value::as_str).map(str::to_string),
                value: obj.get("value")?.as_str()?.to_string(),
                id_type: obj
                    .get("type")
                    .and_then(|t| t.get("text"))
                    .and_then(Value::as_str)
                    .map(str::to_string),
            })
        }
        "Reference" => {
            let obj = value.as_object()?;
            Some(FhirValue::Reference {
                reference: obj.get("reference")?.as_str()?.to_string(),
            })
        }
        _ => None,
    }
}

fn coding_from_json(value: &Value) -> Option<FhirCoding> {
    let obj = value.as_object()?;
    Some(FhirCoding {
        system: obj.get("system").and_then(Value::as_str).map(str::to_string),
        code: obj.get("code")?.as_str()?.to_string(),
        display: obj.get("display").and_then(Value::as_str).map(str::to_string),
    })
}

/// Renders a typed value into its FHIR JSON form.
pub fn value_to_json(value: &FhirValue) -> Value {
    match value {
        FhirValue::CodeableConcept { codings, text } => {
            let mut obj = Map::new();
            if !codings.is_empty() {
                obj.insert(
                    "coding".into(),
                    Value::Array(codings.iter().map(coding_to_json).collect()),
                );
            }
            if let Some(text) = text {
                obj.insert("text".into(), Value::String(text.clone()));
            }
            Value::Object(obj)
        }
        FhirValue::Coding(c) => coding_to_json(c),
        FhirValue::String { value } => Value::String(value.clone()),
        FhirValue::DateTime { value } => Value::String(value.clone()),
        FhirValue::Quantity { value, unit, system, code } => {
            let mut obj = Map::new();
            obj.insert("value".into(), Value::Number(value.to_json_number()));
            if let Some(unit) = unit {
                obj.insert("unit".into(), Value::String(unit.clone()));
            }
            if let Some(system) = system {
                obj.insert("system".into(), Value::String(system.clone()));
            }
            if let Some(code) = code {
                obj.insert("code".into(), Value::String(code.clone()));
            }
            Value::Object(obj)
        }
        FhirValue::Boolean { value } => Value::Bool(*value),
        FhirValue::Integer { value } => Value::Number((*value).into()),
        FhirValue::Identifier { system, value, id_type } => {
            let mut obj = Map::new();
            if let Some(system) = system {
                obj.insert("system".into(), Value::String(system.clone()));
            }
            obj.insert("value".into(), Value::String(value.clone()));
            if let Some(t) = id_type {
                obj.insert("type".into(), serde_json::json!({ "text": t }));
            }
            Value::Object(obj)
        }
        FhirValue::Reference { reference } => {
            serde_json::json!({ "reference": reference })
        }
    }
}

fn coding_to_json(c: &FhirCoding) -> Value {
    let mut obj = Map::new();
    if let Some(system) = &c.system {
        obj.insert("system".into(), Value::String(system.clone()));
    }
    obj.insert("code".into(), Value::String(c.code.clone()));
    if let Some(display) = &c.display {
        obj.insert("display".into(), Value::String(display.clone()));
    }
    Value::Object(obj)
}

/// Failures of the construction side.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("cannot write at {at}: {message}")]
pub struct FhirWriteError {
    pub at: String,
    pub message: String,
}

fn clash(at: &str, message: impl Into<String>) -> FhirWriteError {
    FhirWriteError { at: at.to_string(), message: message.into() }
}

/// Returns a new document with `value` written at the path, creating
/// intermediate objects and arrays. `occurrence` selects the Nth sibling
/// slot of the final field; writes beyond the first turn the key into an
/// array.
pub fn set_value(
    doc: &FhirDocument,
    path: &FhirPath,
    value: &FhirValue,
    occurrence: usize,
) -> Result<FhirDocument, FhirWriteError> {
    let mut root = doc.root.clone();
    write_steps(&mut root, &path.steps, value, occurrence, true, "$resource")?;
    Ok(FhirDocument { resource_type: doc.resource_type.clone(), root })
}

pub(crate) fn write_steps(
    node: &mut Value,
    steps: &[FhirStep],
    value: &FhirValue,
    occurrence: usize,
    at_root: bool,
    at: &str,
) -> Result<(), FhirWriteError> {
    let Some((head, rest)) = steps.split_first() else {
        // Bare-root writes never occur through rules; refuse quietly.
        return Err(clash(at, "a path must name at least a field"));
    };
    let is_last = rest.is_empty();

    match head {
        FhirStep::Field(f) => {
            if node.is_null() {
                *node = Value::Object(Map::new());
            }
            let Some(obj) = node.as_object_mut() else {
                return Err(clash(at, format!("expected an object to hold {f:?}")));
            };
            if at_root && f == "resourceType" {
                return Err(clash(at, "resourceType is reserved"));
            }
            let at = format!("{at}.{f}");
            if is_last {
                let key = choice_key(obj, f, value);
                write_terminal_field(obj, &key, value, occurrence);
                Ok(())
            } else {
                let key = existing_choice_key(obj, f);
                let slot = obj.entry(key).or_insert(Value::Null);
                write_steps(slot, rest, value, occurrence, false, &at)
            }
        }
        FhirStep::Index(n) => {
            if node.is_null() {
                *node = Value::Array(Vec::new());
            }
            let Some(arr) = node.as_array_mut() else {
                return Err(clash(at, "expected an array to index into"));
            };
            while arr.len() <= *n {
                arr.push(Value::Null);
            }
            let at = format!("{at}[{n}]");
            if is_last {
                arr[*n] = value_to_json(value);
                Ok(())
            } else {
                write_steps(&mut arr[*n], rest, value, occurrence, false, &at)
            }
        }
        FhirStep::WhereEq { field, literal } => {
            if node.is_null() {
                *node = Value::Array(Vec::new());
            }
            let Some(arr) = node.as_array_mut() else {
                return Err(clash(at, "expected an array to filter"));
            };
            let pos = arr.iter().position(|e| where_matches(e, field, literal));
            let index = match pos {
                Some(i) => i,
                None => {
                    let mut entry = Map::new();
                    entry.insert(field.clone(), Value::String(literal.clone()));
                    arr.push(Value::Object(entry));
                    arr.len() - 1
                }
            };
            let at = format!("{at}.where({field}='{literal}')");
            if is_last {
                // Merge into the matched element so the filter key survives.
                let Value::Object(rendered) = value_to_json(value) else {
                    return Err(clash(&at, "only object values can target a filtered element"));
                };
                let Some(elem) = arr[index].as_object_mut() else {
                    return Err(clash(&at, "filtered element is not an object"));
                };
                for (k, v) in rendered {
                    elem.insert(k, v);
                }
                Ok(())
            } else {
                write_steps(&mut arr[index], rest, value, occurrence, false, &at)
            }
        }
    }
}

/// Key a terminal write lands on: choice fields gain the variant suffix.
fn choice_key(obj: &mut Map<String, Value>, field: &str, value: &FhirValue) -> String {
    if is_choice_field(field) {
        // A choice element holds exactly one variant; drop the others.
        let stale: Vec<String> = CHOICE_SUFFIXES
            .iter()
            .map(|s| format!("{field}{s}"))
            .filter(|k| obj.contains_key(k))
            .collect();
        for k in stale {
            obj.remove(&k);
        }
        format!("{field}{}", value.tag())
    } else {
        field.to_string()
    }
}

/// Key an intermediate descent uses: an already-present suffixed key wins.
fn existing_choice_key(obj: &Map<String, Value>, field: &str) -> String {
    if !obj.contains_key(field) && is_choice_field(field) {
        for suffix in CHOICE_SUFFIXES {
            let key = format!("{field}{suffix}");
            if obj.contains_key(&key) {
                return key;
            }
        }
    }
    field.to_string()
}

fn write_terminal_field(
    obj: &mut Map<String, Value>,
    key: &str,
    value: &FhirValue,
    occurrence: usize,
) {
    let rendered = value_to_json(value);
    match obj.get_mut(key) {
        None => {
            if occurrence == 0 {
                obj.insert(key.to_string(), rendered);
            } else {
                let mut arr = vec![Value::Null; occurrence];
                arr.push(rendered);
                obj.insert(key.to_string(), Value::Array(arr));
            }
        }
        Some(existing) => {
            if occurrence == 0 {
                match existing {
                    Value::Array(arr) => {
                        if arr.is_empty() {
                            arr.push(rendered);
                        } else {
                            arr[0] = rendered;
                        }
                    }
                    _ => *existing = rendered,
                }
            } else {
                // Sibling writes promote the key to an array.
                if !existing.is_array() {
                    let first = existing.take();
                    *existing = Value::Array(vec![first]);
                }
                let arr = existing.as_array_mut().expect("promoted to array");
                while arr.len() <= occurrence {
                    arr.push(Value::Null);
                }
                arr[occurrence] = rendered;
            }
        }
    }
}

/// Dotted paths of every primitive leaf, for loss accounting.
/// `resourceType` and allocator bookkeeping are not clinical content.
pub(crate) fn collect_fhir_leaves(root: &Value) -> Vec<String> {
    fn walk(value: &Value, trail: &str, out: &mut Vec<String>) {
        match value {
            Value::Object(obj) => {
                for (k, v) in obj {
                    if trail.is_empty() && (k == "resourceType" || k == "meta") {
                        continue;
                    }
                    let child = if trail.is_empty() { k.clone() } else { format!("{trail}.{k}") };
                    walk(v, &child, out);
                }
            }
            Value::Array(items) => {
                for (i, v) in items.iter().enumerate() {
                    walk(v, &format!("{trail}[{i}]"), out);
                }
            }
            Value::Null => {}
            _ => out.push(trail.to_string()),
        }
    }
    let mut out = Vec::new();
    walk(root, "", &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn condition_with_onset() -> FhirDocument {
        FhirDocument::from_json(serde_json::json!({
            "resourceType": "Condition",
            "onsetDateTime": "2020-01-01",
        }))
        .unwrap()
    }

    #[test]
    fn choice_read_reports_concrete_variant() {
        let doc = condition_with_onset();
        let path = parse_fhir_path("$resource.onset").unwrap();
        let values = get_values(&doc, &path);
        assert_eq!(values, vec![FhirValue::DateTime { value: "2020-01-01".into() }]);
    }

    #[test]
    fn missing_field_yields_empty() {
        let doc = FhirDocument::new("Condition");
        let path = parse_fhir_path("$resource.code").unwrap();
        assert!(get_values(&doc, &path).is_empty());
    }

    #[test]
    fn extension_url_filter_selects_exactly_one() {
        // Oracle: a linear filter over the extension array.
        let doc = FhirDocument::from_json(serde_json::json!({
            "resourceType": "Condition",
            "extension": [
                { "url": "http://a", "valueString": "left" },
                { "url": "http://b", "valueCoding": { "system": "s", "code": "L" } },
                { "url": "http://c", "valueBoolean": true },
            ],
        }))
        .unwrap();
        let arr = doc.root["extension"].as_array().unwrap();
        let oracle: Vec<&Value> =
            arr.iter().filter(|e| e["url"] == "http://b").collect();
        assert_eq!(oracle.len(), 1);

        let path = parse_fhir_path("$resource.extension(\"http://b\").valueCoding").unwrap();
        let values = get_values(&doc, &path);
        assert_eq!(
            values,
            vec![FhirValue::Coding(FhirCoding {
                system: Some("s".into()),
                code: "L".into(),
                display: None,
            })]
        );
    }

    #[test]
    fn choice_write_produces_suffixed_key() {
        let doc = FhirDocument::new("Condition");
        let path = parse_fhir_path("$resource.onset").unwrap();
        let out = set_value(
            &doc,
            &path,
            &FhirValue::DateTime { value: "2020-01-01".into() },
            0,
        )
        .unwrap();
        assert_eq!(out.root["onsetDateTime"], "2020-01-01");
        assert!(out.root.get("onset").is_none());
    }

    #[test]
    fn quantity_choice_write_on_observation() {
        // Oracle: the FHIR R4 choice-suffix rule valueQuantity for a
        // Quantity written through value[x].
        let doc = FhirDocument::new("Observation");
        let path = parse_fhir_path("$resource.value").unwrap();
        let q = FhirValue::Quantity {
            value: "7.30".parse().unwrap(),
            unit: Some("mmol/l".into()),
            system: Some("http://unitsofmeasure.org".into()),
            code: Some("mmol/l".into()),
        };
        let out = set_value(&doc, &path, &q, 0).unwrap();
        let obj = out.root["valueQuantity"].as_object().unwrap();
        assert_eq!(serde_json::to_string(&obj["value"]).unwrap(), "7.30");
        assert_eq!(obj["unit"], "mmol/l");
        let read = get_values(&out, &path);
        assert_eq!(read, vec![q]);
    }

    #[test]
    fn resource_type_is_reserved() {
        let doc = FhirDocument::new("Condition");
        let path = parse_fhir_path("$resource.resourceType").unwrap();
        let err =
            set_value(&doc, &path, &FhirValue::String { value: "Patient".into() }, 0).unwrap_err();
        assert!(err.message.contains("reserved"));
    }

    #[test]
    fn writes_create_extension_entries() {
        let doc = FhirDocument::new("Condition");
        let path = parse_fhir_path("$resource.extension(\"http://a\").valueString").unwrap();
        let out =
            set_value(&doc, &path, &FhirValue::String { value: "links".into() }, 0).unwrap();
        assert_eq!(out.root["extension"][0]["url"], "http://a");
        assert_eq!(out.root["extension"][0]["valueString"], "links");
        // Writing a second url appends rather than clobbers.
        let path2 = parse_fhir_path("$resource.extension(\"http://b\").valueString").unwrap();
        let out2 =
            set_value(&out, &path2, &FhirValue::String { value: "x".into() }, 0).unwrap();
        assert_eq!(out2.root["extension"].as_array().unwrap().len(), 2);
    }

    #[test]
    fn occurrence_writes_are_index_aligned() {
        let doc = FhirDocument::new("Observation");
        let path = parse_fhir_path("$resource.category").unwrap();
        let a = FhirValue::String { value: "a".into() };
        let b = FhirValue::String { value: "b".into() };
        let out = set_value(&doc, &path, &a, 0).unwrap();
        let out = set_value(&out, &path, &b, 1).unwrap();
        assert_eq!(out.root["category"], serde_json::json!(["a", "b"]));
    }

    #[test]
    fn unrelated_keys_survive_writes_byte_for_byte() {
        let doc = FhirDocument::from_json(serde_json::json!({
            "resourceType": "Condition",
            "meta": { "profile": ["http://x"] },
            "subject": { "reference": "Patient/1", "display": "P" },
        }))
        .unwrap();
        let before = serde_json::to_string(&doc.root).unwrap();
        let path = parse_fhir_path("$resource.onset").unwrap();
        let out =
            set_value(&doc, &path, &FhirValue::DateTime { value: "2020-01-01".into() }, 0)
                .unwrap();
        let mut after = out.root.clone();
        after.as_object_mut().unwrap().remove("onsetDateTime");
        assert_eq!(serde_json::to_string(&after).unwrap(), before);
    }

    #[test]
    fn type_clash_on_scalar_in_the_way() {
        let doc = FhirDocument::from_json(serde_json::json!({
            "resourceType": "Condition",
            "code": "oops-a-string",
        }))
        .unwrap();
        let path = parse_fhir_path("$resource.code.text").unwrap();
        let err =
            set_value(&doc, &path, &FhirValue::String { value: "x".into() }, 0).unwrap_err();
        assert!(err.at.contains("code"));
    }

    #[test]
    fn classification_covers_shapes() {
        let cc = serde_json::json!({ "coding": [{ "system": "s", "code": "c" }], "text": "t" });
        assert!(matches!(
            classify(&cc, None),
            Some(FhirValue::CodeableConcept { .. })
        ));
        let q = serde_json::json!({ "value": 1.5, "unit": "mg" });
        assert!(matches!(classify(&q, None), Some(FhirValue::Quantity { .. })));
        let ident = serde_json::json!({ "system": "urn:x", "value": "123" });
        assert!(matches!(classify(&ident, None), Some(FhirValue::Identifier { .. })));
        let reference = serde_json::json!({ "reference": "Patient/1" });
        assert!(matches!(classify(&reference, None), Some(FhirValue::Reference { .. })));
        assert!(matches!(
            classify(&serde_json::json!("2020-01-01T00:00:00Z"), None),
            Some(FhirValue::DateTime { .. })
        ));
        assert!(matches!(
            classify(&serde_json::json!("final"), None),
            Some(FhirValue::String { .. })
        ));
        assert!(matches!(
            classify(&serde_json::json!(3), None),
            Some(FhirValue::Integer { value: 3 })
        ));
    }

    #[test]
    fn leaf_trails_skip_resource_type() {
        let doc = condition_with_onset();
        let leaves = collect_fhir_leaves(&doc.root);
        assert_eq!(leaves, vec!["onsetDateTime"]);
    }
}
