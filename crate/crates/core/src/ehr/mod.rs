//! Tree model of openEHR compositions and archetype-path evaluation.
//!
//! Nodes form a neutral tree: RM type, optional archetype node id, named
//! attributes holding child lists, and an optional leaf value. Documents are
//! values; [`set_value`] returns a new document.

mod json;
mod path;

pub use json::{composition_from_json, composition_to_json, EhrJsonError};
pub use path::{parse_ehr_path, EhrPath, EhrSegment, PathSyntaxError};

use indexmap::IndexMap;

use crate::decimal::Decimal;
use crate::model::archetype_rm_class;

/// Typed leaf value of an ELEMENT node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DataValue {
    CodedText { value: String, code: String, terminology: String },
    Text { value: String },
    /// ISO 8601 date/time kept in its lexical form.
    DateTime { value: String },
    Quantity { magnitude: Decimal, unit: String },
    Boolean { value: bool },
    Identifier { id: String, issuer: Option<String>, id_type: Option<String> },
    Count { value: i64 },
}

impl DataValue {
    /// Stable variant tag, used in clash reporting and bridge dispatch.
    pub fn tag(&self) -> &'static str {
        match self {
            DataValue::CodedText { .. } => "CODED_TEXT",
            DataValue::Text { .. } => "TEXT",
            DataValue::DateTime { .. } => "DATE_TIME",
            DataValue::Quantity { .. } => "QUANTITY",
            DataValue::Boolean { .. } => "BOOLEAN",
            DataValue::Identifier { .. } => "IDENTIFIER",
            DataValue::Count { .. } => "COUNT",
        }
    }

    /// Canonical string form used by condition predicates.
    pub fn canonical_string(&self) -> String {
        match self {
            DataValue::CodedText { code, .. } => code.clone(),
            DataValue::Text { value } => value.clone(),
            DataValue::DateTime { value } => value.clone(),
            DataValue::Quantity { magnitude, .. } => magnitude.to_string(),
            DataValue::Boolean { value } => value.to_string(),
            DataValue::Identifier { id, .. } => id.clone(),
            DataValue::Count { value } => value.to_string(),
        }
    }
}

/// One node of a composition tree.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct EhrNode {
    /// RM type, e.g. `ELEMENT`, `CLUSTER`, `EVALUATION`.
    pub rm_type: String,
    /// at-code, or an archetype id at archetype roots.
    pub archetype_node_id: Option<String>,
    pub name: Option<String>,
    /// Attribute name to ordered children. Order is document order.
    pub attributes: IndexMap<String, Vec<EhrNode>>,
    pub value: Option<DataValue>,
}

impl EhrNode {
    pub fn new(rm_type: impl Into<String>) -> Self {
        EhrNode { rm_type: rm_type.into(), ..Default::default() }
    }

    pub fn with_node_id(mut self, id: impl Into<String>) -> Self {
        self.archetype_node_id = Some(id.into());
        self
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = Some(name.into());
        self
    }

    pub fn with_value(mut self, value: DataValue) -> Self {
        self.value = Some(value);
        self
    }

    pub fn push_child(&mut self, attribute: impl Into<String>, child: EhrNode) {
        self.attributes.entry(attribute.into()).or_default().push(child);
    }

    pub fn with_child(mut self, attribute: impl Into<String>, child: EhrNode) -> Self {
        self.push_child(attribute, child);
        self
    }
}

fn segment_matches(seg: &EhrSegment, node: &EhrNode) -> bool {
    if let Some(pred) = &seg.node_predicate {
        if node.archetype_node_id.as_deref() != Some(pred.as_str()) {
            return false;
        }
    }
    if let Some(name) = &seg.name_predicate {
        if node.name.as_deref() != Some(name.as_str()) {
            return false;
        }
    }
    true
}

fn matching_nodes<'a>(doc: &'a EhrNode, path: &EhrPath) -> Vec<&'a EhrNode> {
    let mut current: Vec<&EhrNode> = vec![doc];
    for seg in &path.segments {
        let mut next = Vec::new();
        for node in current {
            if let Some(children) = node.attributes.get(&seg.attribute) {
                next.extend(children.iter().filter(|c| segment_matches(seg, c)));
            }
        }
        current = next;
    }
    current
}

/// All nodes the path addresses, in document order, valued or not.
pub fn get_nodes<'a>(doc: &'a EhrNode, path: &EhrPath) -> Vec<&'a EhrNode> {
    matching_nodes(doc, path)
}

/// All value-bearing matches of the path, in document order.
///
/// A path matching nothing yields an empty list, never an error.
pub fn get_values<'a>(doc: &'a EhrNode, path: &EhrPath) -> Vec<(&'a EhrNode, DataValue)> {
    matching_nodes(doc, path)
        .into_iter()
        .filter_map(|n| n.value.clone().map(|v| (n, v)))
        .collect()
}

/// Failures of the construction side.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EhrWriteError {
    #[error("path segment {segment:?} is ambiguous: {count} siblings match and no predicate is given")]
    PathAmbiguous { segment: String, count: usize },
    #[error("node already holds a {existing} value, refusing to write {incoming}")]
    TypeClash { existing: String, incoming: String },
}

/// A path segment paired with the sibling occurrence it addresses.
#[derive(Debug, Clone)]
pub(crate) struct WriteSeg {
    pub segment: EhrSegment,
    pub occurrence: usize,
}

/// RM type for nodes created on demand, keyed by the attribute they live
/// under. Archetype-id predicates take their class instead.
fn infer_rm_type(seg: &EhrSegment, is_leaf: bool) -> String {
    if let Some(pred) = &seg.node_predicate {
        if pred.starts_with("openEHR-") {
            if let Some(class) = archetype_rm_class(pred) {
                return class.to_string();
            }
        }
    }
    if is_leaf {
        return "ELEMENT".to_string();
    }
    match seg.attribute.as_str() {
        "data" | "state" | "protocol" | "description" => "ITEM_TREE",
        "events" => "POINT_EVENT",
        "activities" => "ACTIVITY",
        "context" => "EVENT_CONTEXT",
        _ => "CLUSTER",
    }
    .to_string()
}

/// Walks to (creating as needed) the node addressed by explicit per-segment
/// occurrences.
pub(crate) fn ensure_node<'a>(
    root: &'a mut EhrNode,
    segs: &[WriteSeg],
) -> Result<&'a mut EhrNode, EhrWriteError> {
    let Some((head, rest)) = segs.split_first() else {
        return Ok(root);
    };

    let children = root.attributes.entry(head.segment.attribute.clone()).or_default();
    let match_positions: Vec<usize> = children
        .iter()
        .enumerate()
        .filter(|(_, c)| segment_matches(&head.segment, c))
        .map(|(i, _)| i)
        .collect();

    if head.segment.node_predicate.is_none() && match_positions.len() > 1 {
        return Err(EhrWriteError::PathAmbiguous {
            segment: head.segment.to_string(),
            count: match_positions.len(),
        });
    }

    let index = if head.occurrence < match_positions.len() {
        match_positions[head.occurrence]
    } else {
        // Create siblings until the requested occurrence exists.
        for _ in match_positions.len()..=head.occurrence {
            let node = EhrNode {
                rm_type: infer_rm_type(&head.segment, rest.is_empty()),
                archetype_node_id: head.segment.node_predicate.clone(),
                name: head.segment.name_predicate.clone(),
                attributes: IndexMap::new(),
                value: None,
            };
            children.push(node);
        }
        children.len() - 1
    };
    ensure_node(&mut children[index], rest)
}

/// Writes `value` at the node addressed by explicit per-segment occurrences,
/// creating missing intermediates.
pub(crate) fn set_value_at(
    root: &mut EhrNode,
    segs: &[WriteSeg],
    value: DataValue,
) -> Result<(), EhrWriteError> {
    let node = ensure_node(root, segs)?;
    if let Some(existing) = &node.value {
        if existing.tag() != value.tag() {
            return Err(EhrWriteError::TypeClash {
                existing: existing.tag().to_string(),
                incoming: value.tag().to_string(),
            });
        }
    }
    node.value = Some(value);
    Ok(())
}

/// Returns a new document where the addressed node exists and carries
/// `value`. `occurrence` selects or creates the Nth sibling match of the
/// final segment; intermediate segments address their first match.
pub fn set_value(
    doc: &EhrNode,
    path: &EhrPath,
    value: DataValue,
    occurrence: usize,
) -> Result<EhrNode, EhrWriteError> {
    let mut out = doc.clone();
    let segs: Vec<WriteSeg> = path
        .segments
        .iter()
        .enumerate()
        .map(|(i, s)| WriteSeg {
            segment: s.clone(),
            occurrence: if i + 1 == path.segments.len() { occurrence } else { 0 },
        })
        .collect();
    set_value_at(&mut out, &segs, value)?;
    Ok(out)
}

/// A populated leaf of a composition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Leaf {
    /// Identity path including per-sibling occurrence markers, for set
    /// comparison: `data[at0001]:0/items[at0002]:1`.
    pub keyed_path: String,
    /// Human-facing path without occurrence markers.
    pub display_path: String,
    pub value: DataValue,
}

/// All populated leaves of the tree, in document order.
pub fn collect_leaves(root: &EhrNode) -> Vec<Leaf> {
    collect_leaves_with_ids(root).into_iter().map(|(_, leaf)| leaf).collect()
}

/// Leaves paired with their node addresses, for consumed-leaf tracking.
pub(crate) fn collect_leaves_with_ids(root: &EhrNode) -> Vec<(*const EhrNode, Leaf)> {
    fn seg_strings(attribute: &str, node: &EhrNode, occurrence: usize) -> (String, String) {
        let display = match &node.archetype_node_id {
            Some(id) => format!("{attribute}[{id}]"),
            None => attribute.to_string(),
        };
        (format!("{display}:{occurrence}"), display)
    }
    fn walk(
        node: &EhrNode,
        keyed: &str,
        display: &str,
        out: &mut Vec<(*const EhrNode, Leaf)>,
    ) {
        if let Some(value) = &node.value {
            out.push((
                node as *const EhrNode,
                Leaf {
                    keyed_path: keyed.to_string(),
                    display_path: display.to_string(),
                    value: value.clone(),
                },
            ));
        }
        for (attribute, children) in &node.attributes {
            // Occurrence counts are per (attribute, node id) key.
            let mut counts: IndexMap<Option<&str>, usize> = IndexMap::new();
            for child in children {
                let slot = counts.entry(child.archetype_node_id.as_deref()).or_insert(0);
                let occurrence = *slot;
                *slot += 1;
                let (k, d) = seg_strings(attribute, child, occurrence);
                let keyed_child = if keyed.is_empty() { k.clone() } else { format!("{keyed}/{k}") };
                let display_child =
                    if display.is_empty() { d.clone() } else { format!("{display}/{d}") };
                walk(child, &keyed_child, &display_child, out);
            }
        }
    }
    let mut out = Vec::new();
    walk(root, "", "", &mut out);
    out
}
