//! Declarative, bidirectional transformation between openEHR compositions
//! and FHIR R4 resources, driven by three layers of YAML mapping files:
//! model-mappings (archetype to resource), extension-mappings (profiles and
//! template nesting) and context-mappings (inclusion only).

pub mod bridge;
pub mod decimal;
pub mod ehr;
pub mod engine;
pub mod fhir;
pub mod model;
pub mod repository;
pub mod yaml;

pub use decimal::Decimal;
pub use model::{
    Cardinality, ConditionClause, ConditionOperator, ConditionSide, ContextDocument,
    ContextHeader, ExtensionDocument, GrammarVersion, MappingDocument, MappingHeader, MappingKind,
    MappingRule, ModelDocument, TypeHint, ValidationReport, Violation, ViolationKind,
};
pub use yaml::{parse_mapping_file, serialize_mapping, ParseError, ParseErrorKind};
