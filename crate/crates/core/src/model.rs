//! In-memory representation of FHIRconnect mapping files.
//!
//! Headers, rules, conditions and hierarchy are modelled independently of
//! their YAML serialization. All types are immutable values after
//! construction and freely shareable across threads.

use std::fmt;
use std::sync::LazyLock;

use regex::Regex;

/// Grammar line of every mapping file, e.g. `FHIRConnect/v1.0.0`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrammarVersion {
    pub major: u32,
    pub minor: u32,
    pub patch: u32,
}

impl GrammarVersion {
    /// The fixed language tag. Case-sensitive.
    pub const LANGUAGE_TAG: &'static str = "FHIRConnect";

    /// Parses `FHIRConnect/v1.0.0` (the `v` is optional on input).
    pub fn parse(text: &str) -> Result<Self, String> {
        let (tag, rest) = text
            .split_once('/')
            .ok_or_else(|| format!("expected \"{}/<semver>\", got {text:?}", Self::LANGUAGE_TAG))?;
        if tag != Self::LANGUAGE_TAG {
            return Err(format!(
                "language tag must be {:?} (case-sensitive), got {tag:?}",
                Self::LANGUAGE_TAG
            ));
        }
        let semver = rest.strip_prefix('v').unwrap_or(rest);
        let parts: Vec<&str> = semver.split('.').collect();
        if parts.len() != 3 {
            return Err(format!("semver must be MAJOR.MINOR.PATCH, got {rest:?}"));
        }
        let nums: Result<Vec<u32>, _> = parts.iter().map(|p| p.parse::<u32>()).collect();
        let nums = nums.map_err(|_| format!("semver must be MAJOR.MINOR.PATCH, got {rest:?}"))?;
        Ok(GrammarVersion {
            major: nums[0],
            minor: nums[1],
            patch: nums[2],
        })
    }
}

impl fmt::Display for GrammarVersion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}/v{}.{}.{}",
            Self::LANGUAGE_TAG,
            self.major,
            self.minor,
            self.patch
        )
    }
}

/// The three mapping file layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MappingKind {
    Model,
    Extension,
    Context,
}

impl MappingKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            MappingKind::Model => "model",
            MappingKind::Extension => "extension",
            MappingKind::Context => "context",
        }
    }
}

impl fmt::Display for MappingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Common header of model and extension mapping files.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MappingHeader {
    pub grammar: GrammarVersion,
    pub kind: MappingKind,
    /// `metadata.name`, unique within a repository per kind.
    pub name: String,
    /// `metadata.version`, treated as an opaque string.
    pub version: String,
    /// `spec.system`, must be "FHIR".
    pub fhir_system: String,
    /// `spec.version`, must be "R4".
    pub fhir_version: String,
    /// `spec.openEhrConfig.archetype`.
    pub archetype_id: String,
    /// `spec.openEhrConfig.revision`, opaque.
    pub archetype_revision: String,
    /// `spec.fhirConfig.structureDefinition` canonical URL.
    pub structure_definition_url: String,
}

/// Header of a context mapping file. Archetype fields are replaced by the
/// template the context transforms.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextHeader {
    pub grammar: GrammarVersion,
    pub name: String,
    pub version: String,
    pub fhir_system: String,
    pub fhir_version: String,
}

/// Semantic type of a bridged value pair, named after the openEHR side.
///
/// Forward transforms use the hint to pick the FHIR target variant, reverse
/// transforms the openEHR target variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TypeHint {
    CodedText,
    Text,
    DateTime,
    Quantity,
    Boolean,
    Identifier,
    Count,
    Reference,
}

impl TypeHint {
    pub fn as_str(&self) -> &'static str {
        match self {
            TypeHint::CodedText => "CODED_TEXT",
            TypeHint::Text => "TEXT",
            TypeHint::DateTime => "DATE_TIME",
            TypeHint::Quantity => "QUANTITY",
            TypeHint::Boolean => "BOOLEAN",
            TypeHint::Identifier => "IDENTIFIER",
            TypeHint::Count => "COUNT",
            TypeHint::Reference => "REFERENCE",
        }
    }

    pub fn parse(text: &str) -> Option<Self> {
        Some(match text {
            "CODED_TEXT" => TypeHint::CodedText,
            "TEXT" => TypeHint::Text,
            "DATE_TIME" => TypeHint::DateTime,
            "QUANTITY" => TypeHint::Quantity,
            "BOOLEAN" => TypeHint::Boolean,
            "IDENTIFIER" => TypeHint::Identifier,
            "COUNT" => TypeHint::Count,
            "REFERENCE" => TypeHint::Reference,
            _ => return None,
        })
    }
}

/// Iteration behaviour over repeated path matches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Cardinality {
    /// Only the first source match is transformed.
    One,
    /// Every source match is transformed, index-aligned.
    #[default]
    Many,
}

impl Cardinality {
    pub fn as_str(&self) -> &'static str {
        match self {
            Cardinality::One => "one",
            Cardinality::Many => "many",
        }
    }
}

/// Which document a condition predicate reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConditionSide {
    Fhir,
    OpenEhr,
}

impl ConditionSide {
    /// The path root the side is addressed by in YAML.
    pub fn root(&self) -> &'static str {
        match self {
            ConditionSide::Fhir => "$resource",
            ConditionSide::OpenEhr => "$archetype",
        }
    }
}

/// Condition predicate operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConditionOperator {
    Equals,
    NotEquals,
    Exists,
    NotExists,
    OneOf,
}

impl ConditionOperator {
    pub fn as_str(&self) -> &'static str {
        match self {
            ConditionOperator::Equals => "equals",
            ConditionOperator::NotEquals => "not-equals",
            ConditionOperator::Exists => "exists",
            ConditionOperator::NotExists => "not-exists",
            ConditionOperator::OneOf => "one-of",
        }
    }

    pub fn parse(text: &str) -> Option<Self> {
        Some(match text {
            "equals" => ConditionOperator::Equals,
            "not-equals" => ConditionOperator::NotEquals,
            "exists" => ConditionOperator::Exists,
            "not-exists" => ConditionOperator::NotExists,
            "one-of" => ConditionOperator::OneOf,
            _ => return None,
        })
    }

    /// Whether the operator takes at least one operand.
    pub fn wants_operands(&self) -> bool {
        !matches!(self, ConditionOperator::Exists | ConditionOperator::NotExists)
    }
}

/// A guard attached to a rule; the rule fires only when the predicate holds
/// on the source document.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConditionClause {
    pub side: ConditionSide,
    /// Path relative to the rule's anchor on `side`.
    pub target_path: String,
    pub operator: ConditionOperator,
    pub operands: Vec<String>,
}

/// One named path-to-path mapping.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MappingRule {
    /// Unique within the whole document; extension overrides address by name.
    pub name: String,
    /// Expression rooted at `$resource` or relative to the parent's FHIR anchor.
    pub fhir_path: String,
    /// Expression rooted at `$archetype` or relative to the parent's anchor.
    pub openehr_path: String,
    pub type_hint: Option<TypeHint>,
    pub condition: Option<ConditionClause>,
    /// Hierarchical child mappings, interpreted relative to this rule's paths.
    pub children: Vec<MappingRule>,
    /// Delegates the addressed subtree to another archetype's model-mapping.
    pub slot_archetype: Option<String>,
    pub cardinality: Cardinality,
}

impl MappingRule {
    /// A plain path-to-path rule without extras.
    pub fn simple(name: impl Into<String>, fhir: impl Into<String>, openehr: impl Into<String>) -> Self {
        MappingRule {
            name: name.into(),
            fhir_path: fhir.into(),
            openehr_path: openehr.into(),
            type_hint: None,
            condition: None,
            children: Vec::new(),
            slot_archetype: None,
            cardinality: Cardinality::Many,
        }
    }

    pub fn has_paths(&self) -> bool {
        !self.fhir_path.is_empty() && !self.openehr_path.is_empty()
    }
}

/// A model-mapping: the base archetype-to-resource layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelDocument {
    pub header: MappingHeader,
    pub rules: Vec<MappingRule>,
}

/// An extension-mapping: appends to or overrides a model-mapping for a
/// profile or template nesting.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExtensionDocument {
    pub header: MappingHeader,
    /// `metadata.name` of the base model-mapping.
    pub extends: String,
    pub appended_rules: Vec<MappingRule>,
    /// Matched to base rules by name.
    pub overridden_rules: Vec<MappingRule>,
}

/// A context-mapping: selects mappings for one template/profile set.
/// Contexts carry no rules of their own.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextDocument {
    pub header: ContextHeader,
    /// Required for the FHIR-to-openEHR direction.
    pub template_id: String,
    /// Root archetype of the template.
    pub start_archetype: String,
    pub profile_urls: Vec<String>,
    pub imported_models: Vec<String>,
    pub imported_extensions: Vec<String>,
}

/// Any parsed mapping file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MappingDocument {
    Model(ModelDocument),
    Extension(ExtensionDocument),
    Context(ContextDocument),
}

impl MappingDocument {
    pub fn kind(&self) -> MappingKind {
        match self {
            MappingDocument::Model(_) => MappingKind::Model,
            MappingDocument::Extension(_) => MappingKind::Extension,
            MappingDocument::Context(_) => MappingKind::Context,
        }
    }

    pub fn name(&self) -> &str {
        match self {
            MappingDocument::Model(d) => &d.header.name,
            MappingDocument::Extension(d) => &d.header.name,
            MappingDocument::Context(d) => &d.header.name,
        }
    }
}

static ARCHETYPE_ID: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"^openEHR-EHR-[A-Z_]+\.[A-Za-z0-9_\-]+\.v[0-9]+$").expect("static regex")
});

/// Whether `id` matches `openEHR-EHR-<CLASS>.<concept>.v<N>`.
pub fn is_archetype_id(id: &str) -> bool {
    ARCHETYPE_ID.is_match(id)
}

/// The RM class segment of an archetype id, e.g. `EVALUATION`.
pub fn archetype_rm_class(id: &str) -> Option<&str> {
    id.strip_prefix("openEHR-EHR-")?.split('.').next()
}

/// Category of a single validation violation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViolationKind {
    DuplicateRuleName,
    EmptyPaths,
    BadArchetypeId,
    ConditionArity,
    EmptyName,
    UnsupportedFhirSystem,
    UnsupportedFhirVersion,
    BadStructureDefinitionUrl,
    MissingTemplateId,
    OverrideAppendOverlap,
    EmptyExtends,
}

impl fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ViolationKind::DuplicateRuleName => "DuplicateRuleName",
            ViolationKind::EmptyPaths => "EmptyPaths",
            ViolationKind::BadArchetypeId => "BadArchetypeId",
            ViolationKind::ConditionArity => "ConditionArity",
            ViolationKind::EmptyName => "EmptyName",
            ViolationKind::UnsupportedFhirSystem => "UnsupportedFhirSystem",
            ViolationKind::UnsupportedFhirVersion => "UnsupportedFhirVersion",
            ViolationKind::BadStructureDefinitionUrl => "BadStructureDefinitionUrl",
            ViolationKind::MissingTemplateId => "MissingTemplateId",
            ViolationKind::OverrideAppendOverlap => "OverrideAppendOverlap",
            ViolationKind::EmptyExtends => "EmptyExtends",
        };
        f.write_str(s)
    }
}

/// One invariant violation found by [`validate_document`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub kind: ViolationKind,
    /// Name of the offending rule, when the violation is rule-scoped.
    pub rule: Option<String>,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.kind, self.message)
    }
}

/// Result of validating one document. Violations are data, not failures.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks every model-layer invariant of a parsed document.
///
/// Deterministic and pure: the same input yields an identical report.
pub fn validate_document(doc: &MappingDocument) -> ValidationReport {
    let mut report = ValidationReport::default();
    match doc {
        MappingDocument::Model(d) => {
            validate_header(&d.header, &mut report);
            validate_rule_tree(&d.rules, &mut report);
        }
        MappingDocument::Extension(d) => {
            validate_header(&d.header, &mut report);
            if d.extends.is_empty() {
                report.violations.push(Violation {
                    kind: ViolationKind::EmptyExtends,
                    rule: None,
                    message: "extension does not name the model-mapping it extends".into(),
                });
            }
            let mut all: Vec<MappingRule> = d.overridden_rules.clone();
            all.extend(d.appended_rules.iter().cloned());
            validate_rule_tree(&all, &mut report);
            // A name may not be both overridden and appended.
            for a in &d.appended_rules {
                if d.overridden_rules.iter().any(|o| o.name == a.name) {
                    report.violations.push(Violation {
                        kind: ViolationKind::OverrideAppendOverlap,
                        rule: Some(a.name.clone()),
                        message: format!("rule {:?} is both overridden and appended", a.name),
                    });
                }
            }
        }
        MappingDocument::Context(d) => {
            if d.header.name.is_empty() {
                report.violations.push(Violation {
                    kind: ViolationKind::EmptyName,
                    rule: None,
                    message: "metadata.name must be non-empty".into(),
                });
            }
            check_fhir_spec(&d.header.fhir_system, &d.header.fhir_version, &mut report);
            if d.template_id.is_empty() {
                report.violations.push(Violation {
                    kind: ViolationKind::MissingTemplateId,
                    rule: None,
                    message: "context requires a templateId for the FHIR-to-openEHR direction"
                        .into(),
                });
            }
        }
    }
    report
}

fn validate_header(h: &MappingHeader, report: &mut ValidationReport) {
    if h.name.is_empty() {
        report.violations.push(Violation {
            kind: ViolationKind::EmptyName,
            rule: None,
            message: "metadata.name must be non-empty".into(),
        });
    }
    check_fhir_spec(&h.fhir_system, &h.fhir_version, report);
    if !is_archetype_id(&h.archetype_id) {
        report.violations.push(Violation {
            kind: ViolationKind::BadArchetypeId,
            rule: None,
            message: format!(
                "archetype id {:?} does not match openEHR-EHR-<CLASS>.<concept>.v<N>",
                h.archetype_id
            ),
        });
    }
    if !is_absolute_uri(&h.structure_definition_url) {
        report.violations.push(Violation {
            kind: ViolationKind::BadStructureDefinitionUrl,
            rule: None,
            message: format!(
                "structureDefinition {:?} is not an absolute URI",
                h.structure_definition_url
            ),
        });
    }
}

fn check_fhir_spec(system: &str, version: &str, report: &mut ValidationReport) {
    if system != "FHIR" {
        report.violations.push(Violation {
            kind: ViolationKind::UnsupportedFhirSystem,
            rule: None,
            message: format!("spec.system must be \"FHIR\", got {system:?}"),
        });
    }
    if version != "R4" {
        report.violations.push(Violation {
            kind: ViolationKind::UnsupportedFhirVersion,
            rule: None,
            message: format!("unsupported FHIR version {version:?}; this engine supports R4"),
        });
    }
}

fn is_absolute_uri(s: &str) -> bool {
    // scheme ":" — enough to distinguish canonical URLs from relative paths.
    match s.split_once(':') {
        Some((scheme, rest)) => {
            !scheme.is_empty()
                && scheme.chars().all(|c| c.is_ascii_alphanumeric() || "+.-".contains(c))
                && scheme.chars().next().is_some_and(|c| c.is_ascii_alphabetic())
                && !rest.is_empty()
        }
        None => false,
    }
}

/// Validates a rule forest: document-wide unique names, path/slot presence,
/// condition arity.
fn validate_rule_tree(rules: &[MappingRule], report: &mut ValidationReport) {
    let mut seen: Vec<&str> = Vec::new();
    fn walk<'a>(
        rules: &'a [MappingRule],
        seen: &mut Vec<&'a str>,
        report: &mut ValidationReport,
    ) {
        for rule in rules {
            if rule.name.is_empty() {
                report.violations.push(Violation {
                    kind: ViolationKind::EmptyName,
                    rule: None,
                    message: "rule name must be non-empty".into(),
                });
            } else if seen.contains(&rule.name.as_str()) {
                report.violations.push(Violation {
                    kind: ViolationKind::DuplicateRuleName,
                    rule: Some(rule.name.clone()),
                    message: format!("rule name {:?} is used more than once", rule.name),
                });
            } else {
                seen.push(&rule.name);
            }
            if !rule.has_paths() && rule.slot_archetype.is_none() {
                report.violations.push(Violation {
                    kind: ViolationKind::EmptyPaths,
                    rule: Some(rule.name.clone()),
                    message: format!(
                        "rule {:?} needs both a fhir and an openehr path, or a slotArchetype",
                        rule.name
                    ),
                });
            }
            if let Some(slot) = &rule.slot_archetype {
                if !is_archetype_id(slot) {
                    report.violations.push(Violation {
                        kind: ViolationKind::BadArchetypeId,
                        rule: Some(rule.name.clone()),
                        message: format!("slotArchetype {slot:?} is not a valid archetype id"),
                    });
                }
            }
            if let Some(cond) = &rule.condition {
                let arity_ok = if cond.operator.wants_operands() {
                    !cond.operands.is_empty()
                } else {
                    cond.operands.is_empty()
                };
                if !arity_ok {
                    report.violations.push(Violation {
                        kind: ViolationKind::ConditionArity,
                        rule: Some(rule.name.clone()),
                        message: format!(
                            "operator {:?} {} operands",
                            cond.operator.as_str(),
                            if cond.operator.wants_operands() {
                                "requires at least one"
                            } else {
                                "takes no"
                            }
                        ),
                    });
                }
            }
            walk(&rule.children, seen, report);
        }
    }
    walk(rules, &mut seen, report);
}

/// Finds the top-level rule with the given name, if any.
pub fn rule_lookup<'a>(doc: &'a ModelDocument, name: &str) -> Option<&'a MappingRule> {
    doc.rules.iter().find(|r| r.name == name)
}
