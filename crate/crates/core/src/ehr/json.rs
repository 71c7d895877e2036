//! openEHR canonical JSON reading and writing.
//!
//! The canonical convention: every object carries `_type`, locatables carry
//! `archetype_node_id` and a `name` object, multi-valued attributes are
//! arrays. Data values use their RM `DV_*` types.

use serde_json::{Map, Value};

use super::{DataValue, EhrNode};

/// Attributes serialized as arrays even with a single child.
const MULTI_VALUED: &[&str] = &[
    "content",
    "items",
    "events",
    "activities",
    "participations",
    "other_participations",
    "links",
];

/// RM types standing in for bare scalar attributes, so foreign header
/// fields survive a read/write cycle.
const PRIMITIVE: &str = "PRIMITIVE";
const PRIMITIVE_NUMBER: &str = "PRIMITIVE_NUMBER";

/// Failure while reading a canonical JSON composition.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("canonical JSON error at {at}: {message}")]
pub struct EhrJsonError {
    /// Slash-separated location inside the document.
    pub at: String,
    pub message: String,
}

fn err(at: &str, message: impl Into<String>) -> EhrJsonError {
    EhrJsonError { at: if at.is_empty() { "<root>".into() } else { at.into() }, message: message.into() }
}

/// Reads a composition (or any canonical subtree) into an [`EhrNode`].
pub fn composition_from_json(value: &Value) -> Result<EhrNode, EhrJsonError> {
    node_from_json(value, "")
}

fn node_from_json(value: &Value, at: &str) -> Result<EhrNode, EhrJsonError> {
    let obj = value
        .as_object()
        .ok_or_else(|| err(at, "expected a JSON object"))?;
    let rm_type = obj
        .get("_type")
        .and_then(Value::as_str)
        .ok_or_else(|| err(at, "missing _type"))?
        .to_string();

    if rm_type.starts_with("DV_") {
        return Err(err(at, "data value found where a node was expected"));
    }

    let mut node = EhrNode::new(rm_type);
    for (key, val) in obj {
        let child_at = if at.is_empty() { key.clone() } else { format!("{at}/{key}") };
        match key.as_str() {
            "_type" => {}
            "archetype_node_id" => {
                node.archetype_node_id = Some(
                    val.as_str()
                        .ok_or_else(|| err(&child_at, "archetype_node_id must be a string"))?
                        .to_string(),
                );
            }
            "name" => {
                node.name = Some(name_from_json(val, &child_at)?);
            }
            "value" => {
                node.value = Some(data_value_from_json(val, &child_at)?);
            }
            _ => match val {
                Value::Array(items) => {
                    for (i, item) in items.iter().enumerate() {
                        let at_i = format!("{child_at}[{i}]");
                        node.push_child(key.clone(), node_from_json(item, &at_i)?);
                    }
                }
                Value::Object(_) => {
                    node.push_child(key.clone(), node_from_json(val, &child_at)?);
                }
                Value::String(s) => {
                    node.push_child(
                        key.clone(),
                        EhrNode::new(PRIMITIVE).with_value(DataValue::Text { value: s.clone() }),
                    );
                }
                Value::Number(n) => {
                    let child = if let Some(i) = n.as_i64() {
                        EhrNode::new(PRIMITIVE).with_value(DataValue::Count { value: i })
                    } else {
                        EhrNode::new(PRIMITIVE_NUMBER)
                            .with_value(DataValue::Text { value: n.to_string() })
                    };
                    node.push_child(key.clone(), child);
                }
                Value::Bool(b) => {
                    node.push_child(
                        key.clone(),
                        EhrNode::new(PRIMITIVE).with_value(DataValue::Boolean { value: *b }),
                    );
                }
                Value::Null => {}
            },
        }
    }
    Ok(node)
}

fn name_from_json(value: &Value, at: &str) -> Result<String, EhrJsonError> {
    match value {
        Value::String(s) => Ok(s.clone()),
        Value::Object(obj) => obj
            .get("value")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| err(at, "name object needs a string value")),
        _ => Err(err(at, "name must be a string or DV_TEXT object")),
    }
}

fn data_value_from_json(value: &Value, at: &str) -> Result<DataValue, EhrJsonError> {
    let obj = value
        .as_object()
        .ok_or_else(|| err(at, "data value must be a JSON object"))?;
    let dv_type = obj
        .get("_type")
        .and_then(Value::as_str)
        .ok_or_else(|| err(at, "data value missing _type"))?;
    let text = |key: &str| -> Result<String, EhrJsonError> {
        obj.get(key)
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| err(at, format!("{dv_type} needs string {key:?}")))
    };
    match dv_type {
        "DV_CODED_TEXT" => {
            let code_obj = obj
                .get("defining_code")
                .and_then(Value::as_object)
                .ok_or_else(|| err(at, "DV_CODED_TEXT needs defining_code"))?;
            let code = code_obj
                .get("code_string")
                .and_then(Value::as_str)
                .ok_or_else(|| err(at, "defining_code needs code_string"))?;
            let terminology = match code_obj.get("terminology_id") {
                Some(Value::String(s)) => s.clone(),
                Some(Value::Object(t)) => t
                    .get("value")
                    .and_then(Value::as_str)
                    .ok_or_else(|| err(at, "terminology_id needs a value"))?
                    .to_string(),
                _ => return Err(err(at, "defining_code needs terminology_id")),
            };
            Ok(DataValue::CodedText { value: text("value")?, code: code.to_string(), terminology })
        }
        "DV_TEXT" => Ok(DataValue::Text { value: text("value")? }),
        "DV_DATE_TIME" => Ok(DataValue::DateTime { value: text("value")? }),
        "DV_QUANTITY" => {
            let magnitude = obj
                .get("magnitude")
                .and_then(Value::as_number)
                .ok_or_else(|| err(at, "DV_QUANTITY needs numeric magnitude"))?;
            let magnitude = magnitude
                .to_string()
                .parse()
                .map_err(|e| err(at, format!("bad magnitude: {e}")))?;
            Ok(DataValue::Quantity { magnitude, unit: text("units")? })
        }
        "DV_BOOLEAN" => {
            let b = obj
                .get("value")
                .and_then(Value::as_bool)
                .ok_or_else(|| err(at, "DV_BOOLEAN needs boolean value"))?;
            Ok(DataValue::Boolean { value: b })
        }
        "DV_IDENTIFIER" => Ok(DataValue::Identifier {
            id: text("id")?,
            issuer: obj.get("issuer").and_then(Value::as_str).map(str::to_string),
            id_type: obj.get("type").and_then(Value::as_str).map(str::to_string),
        }),
        "DV_COUNT" => {
            let n = obj
                .get("magnitude")
                .and_then(Value::as_i64)
                .ok_or_else(|| err(at, "DV_COUNT needs integer magnitude"))?;
            Ok(DataValue::Count { value: n })
        }
        other => Err(err(at, format!("unsupported data value type {other:?}"))),
    }
}

/// Writes a node tree back to canonical JSON.
pub fn composition_to_json(node: &EhrNode) -> Value {
    node_to_json(node)
}

fn node_to_json(node: &EhrNode) -> Value {
    // Primitive pseudo-nodes re-emit as bare scalars.
    if node.rm_type == PRIMITIVE || node.rm_type == PRIMITIVE_NUMBER {
        return match &node.value {
            Some(DataValue::Text { value }) if node.rm_type == PRIMITIVE_NUMBER => {
                match value.parse::<crate::decimal::Decimal>() {
                    Ok(d) => Value::Number(d.to_json_number()),
                    Err(_) => Value::String(value.clone()),
                }
            }
            Some(DataValue::Text { value }) => Value::String(value.clone()),
            Some(DataValue::Count { value }) => Value::Number((*value).into()),
            Some(DataValue::Boolean { value }) => Value::Bool(*value),
            Some(other) => data_value_to_json(other),
            None => Value::Null,
        };
    }

    let mut obj = Map::new();
    obj.insert("_type".into(), Value::String(node.rm_type.clone()));
    if let Some(name) = &node.name {
        obj.insert(
            "name".into(),
            serde_json::json!({ "_type": "DV_TEXT", "value": name }),
        );
    }
    if let Some(id) = &node.archetype_node_id {
        obj.insert("archetype_node_id".into(), Value::String(id.clone()));
    }
    if let Some(value) = &node.value {
        obj.insert("value".into(), data_value_to_json(value));
    }
    for (attribute, children) in &node.attributes {
        let rendered: Vec<Value> = children.iter().map(node_to_json).collect();
        let as_array = MULTI_VALUED.contains(&attribute.as_str()) || rendered.len() > 1;
        let value = if as_array {
            Value::Array(rendered)
        } else {
            rendered.into_iter().next().unwrap_or(Value::Null)
        };
        obj.insert(attribute.clone(), value);
    }
    Value::Object(obj)
}

fn data_value_to_json(value: &DataValue) -> Value {
    match value {
        DataValue::CodedText { value, code, terminology } => serde_json::json!({
            "_type": "DV_CODED_TEXT",
            "value": value,
            "defining_code": {
                "_type": "CODE_PHRASE",
                "terminology_id": { "_type": "TERMINOLOGY_ID", "value": terminology },
                "code_string": code,
            },
        }),
        DataValue::Text { value } => serde_json::json!({ "_type": "DV_TEXT", "value": value }),
        DataValue::DateTime { value } => {
            serde_json::json!({ "_type": "DV_DATE_TIME", "value": value })
        }
        DataValue::Quantity { magnitude, unit } => {
            let mut obj = Map::new();
            obj.insert("_type".into(), Value::String("DV_QUANTITY".into()));
            obj.insert("magnitude".into(), Value::Number(magnitude.to_json_number()));
            obj.insert("units".into(), Value::String(unit.clone()));
            Value::Object(obj)
        }
        DataValue::Boolean { value } => {
            serde_json::json!({ "_type": "DV_BOOLEAN", "value": value })
        }
        DataValue::Identifier { id, issuer, id_type } => {
            let mut obj = Map::new();
            obj.insert("_type".into(), Value::String("DV_IDENTIFIER".into()));
            obj.insert("id".into(), Value::String(id.clone()));
            if let Some(issuer) = issuer {
                obj.insert("issuer".into(), Value::String(issuer.clone()));
            }
            if let Some(t) = id_type {
                obj.insert("type".into(), Value::String(t.clone()));
            }
            Value::Object(obj)
        }
        DataValue::Count { value } => {
            serde_json::json!({ "_type": "DV_COUNT", "magnitude": value })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ehr::tests::diagnosis_entry;

    #[test]
    fn round_trips_the_diagnosis_entry() {
        let node = diagnosis_entry();
        let json = composition_to_json(&node);
        let back = composition_from_json(&json).unwrap();
        assert_eq!(node, back);
    }

    #[test]
    fn items_are_always_arrays() {
        let json = composition_to_json(&diagnosis_entry());
        assert!(json["data"]["items"].is_array());
        assert!(json["data"].is_object());
    }

    #[test]
    fn reads_single_object_where_array_is_allowed() {
        let json = serde_json::json!({
            "_type": "EVALUATION",
            "archetype_node_id": "openEHR-EHR-EVALUATION.problem_diagnosis.v1",
            "data": {
                "_type": "ITEM_TREE",
                "archetype_node_id": "at0001",
                "items": {
                    "_type": "ELEMENT",
                    "archetype_node_id": "at0002",
                    "value": { "_type": "DV_TEXT", "value": "x" },
                },
            },
        });
        let node = composition_from_json(&json).unwrap();
        assert_eq!(node.attributes["data"][0].attributes["items"].len(), 1);
    }

    #[test]
    fn quantity_magnitude_survives_exactly() {
        let node = EhrNode::new("ELEMENT").with_value(DataValue::Quantity {
            magnitude: "2.50".parse().unwrap(),
            unit: "mg".into(),
        });
        let json = composition_to_json(&node);
        assert_eq!(serde_json::to_string(&json["value"]["magnitude"]).unwrap(), "2.50");
        let back = composition_from_json(&json).unwrap();
        assert_eq!(node, back);
    }

    #[test]
    fn scalar_header_attributes_round_trip() {
        let json = serde_json::json!({
            "_type": "COMPOSITION",
            "name": { "_type": "DV_TEXT", "value": "report" },
            "archetype_details": {
                "_type": "ARCHETYPED",
                "rm_version": "1.0.4",
            },
        });
        let node = composition_from_json(&json).unwrap();
        let out = composition_to_json(&node);
        assert_eq!(out["archetype_details"]["rm_version"], "1.0.4");
    }

    #[test]
    fn missing_type_is_an_error_with_location() {
        let json = serde_json::json!({
            "_type": "COMPOSITION",
            "content": [{ "archetype_node_id": "at0001" }],
        });
        let e = composition_from_json(&json).unwrap_err();
        assert!(e.at.contains("content[0]"));
    }

    #[test]
    fn unknown_data_value_type_is_rejected() {
        let json = serde_json::json!({
            "_type": "ELEMENT",
            "value": { "_type": "DV_PROPORTION", "numerator": 1, "denominator": 2 },
        });
        assert!(composition_from_json(&json).is_err());
    }
}
