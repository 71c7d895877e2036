//! Position-preserving YAML tree built from parser events.
//!
//! Every node remembers the 1-based line/column it started at so schema
//! errors can point into the offending file. Anchors, aliases and
//! multi-document streams are rejected up front.

use yaml_rust2::parser::{Event, MarkedEventReceiver, Parser};
use yaml_rust2::scanner::{Marker, TScalarStyle};

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum YamlData {
    /// Scalar with its raw text; typing is decided by the schema layer.
    Scalar { text: String, style: TScalarStyle },
    Seq(Vec<YamlNode>),
    /// Keys kept in file order; keys must be scalars.
    Map(Vec<(YamlNode, YamlNode)>),
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct YamlNode {
    pub data: YamlData,
    pub line: usize,
    pub col: usize,
}

#[derive(Debug)]
pub(crate) struct LoadError {
    pub line: usize,
    pub col: usize,
    pub message: String,
}

#[derive(Default)]
struct TreeBuilder {
    // (container, key slot for maps)
    stack: Vec<(YamlNode, Option<YamlNode>)>,
    root: Option<YamlNode>,
    documents: usize,
    error: Option<LoadError>,
}

impl TreeBuilder {
    fn push_value(&mut self, node: YamlNode) {
        match self.stack.last_mut() {
            Some((container, pending_key)) => match &mut container.data {
                YamlData::Seq(items) => items.push(node),
                YamlData::Map(entries) => {
                    if let Some(key) = pending_key.take() {
                        entries.push((key, node));
                    } else {
                        *pending_key = Some(node);
                    }
                }
                YamlData::Scalar { .. } => unreachable!("scalars are never containers"),
            },
            None => self.root = Some(node),
        }
    }

    fn fail(&mut self, mark: Marker, message: impl Into<String>) {
        if self.error.is_none() {
            self.error = Some(LoadError {
                line: mark.line(),
                col: mark.col() + 1,
                message: message.into(),
            });
        }
    }
}

impl MarkedEventReceiver for TreeBuilder {
    fn on_event(&mut self, ev: Event, mark: Marker) {
        if self.error.is_some() {
            return;
        }
        let at = |data| YamlNode { data, line: mark.line(), col: mark.col() + 1 };
        match ev {
            Event::StreamStart | Event::StreamEnd | Event::Nothing => {}
            Event::DocumentStart => {
                self.documents += 1;
                if self.documents > 1 {
                    self.fail(mark, "multi-document YAML streams are not supported");
                }
            }
            Event::DocumentEnd => {}
            Event::Alias(_) => {
                self.fail(mark, "YAML aliases are not supported in mapping files");
            }
            Event::Scalar(text, style, aid, _) => {
                if aid != 0 {
                    self.fail(mark, "YAML anchors are not supported in mapping files");
                    return;
                }
                self.push_value(at(YamlData::Scalar { text, style }));
            }
            Event::SequenceStart(aid, _) => {
                if aid != 0 {
                    self.fail(mark, "YAML anchors are not supported in mapping files");
                    return;
                }
                self.stack.push((at(YamlData::Seq(Vec::new())), None));
            }
            Event::SequenceEnd | Event::MappingEnd => {
                let (node, _) = self.stack.pop().expect("balanced events");
                self.push_value(node);
            }
            Event::MappingStart(aid, _) => {
                if aid != 0 {
                    self.fail(mark, "YAML anchors are not supported in mapping files");
                    return;
                }
                self.stack.push((at(YamlData::Map(Vec::new())), None));
            }
        }
    }
}

/// Loads one YAML document into a positioned tree.
pub(crate) fn load(source: &str) -> Result<YamlNode, LoadError> {
    let mut builder = TreeBuilder::default();
    let mut parser = Parser::new_from_str(source);
    if let Err(scan) = parser.load(&mut builder, true) {
        let mark = *scan.marker();
        return Err(LoadError {
            line: mark.line(),
            col: mark.col() + 1,
            message: scan.info().to_string(),
        });
    }
    if let Some(err) = builder.error {
        return Err(err);
    }
    builder.root.ok_or(LoadError {
        line: 1,
        col: 1,
        message: "empty YAML document".into(),
    })
}
