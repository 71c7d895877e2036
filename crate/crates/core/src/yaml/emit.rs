//! Canonical YAML serialization of mapping documents.
//!
//! Key order is fixed (grammar, type, metadata, spec, mappings), indentation
//! is two spaces, and rule names, paths and criteria are double-quoted.
//! Comments are not preserved; the canonical form is a tooling output.

use crate::model::{
    ConditionClause, ContextDocument, ExtensionDocument, MappingDocument, MappingHeader,
    MappingRule, ModelDocument,
};

/// Emits the canonical YAML form of a document.
///
/// Re-parsing the output yields a structurally equal model.
pub fn serialize_mapping(doc: &MappingDocument) -> Vec<u8> {
    let mut out = String::new();
    match doc {
        MappingDocument::Model(d) => emit_model(&mut out, d),
        MappingDocument::Extension(d) => emit_extension(&mut out, d),
        MappingDocument::Context(d) => emit_context(&mut out, d),
    }
    out.into_bytes()
}

fn emit_model(out: &mut String, d: &ModelDocument) {
    emit_header_start(out, d.header.grammar.to_string().as_str(), "model", &d.header.name, &d.header.version);
    out.push_str("spec:\n");
    push_kv(out, 1, "system", &d.header.fhir_system);
    push_kv(out, 1, "version", &d.header.fhir_version);
    emit_openehr_config(out, &d.header);
    emit_fhir_config(out, &d.header);
    emit_rule_block(out, "mappings", &d.rules);
}

fn emit_extension(out: &mut String, d: &ExtensionDocument) {
    emit_header_start(out, d.header.grammar.to_string().as_str(), "extension", &d.header.name, &d.header.version);
    out.push_str("spec:\n");
    push_kv(out, 1, "system", &d.header.fhir_system);
    push_kv(out, 1, "version", &d.header.fhir_version);
    push_kv(out, 1, "extends", &d.extends);
    emit_openehr_config(out, &d.header);
    emit_fhir_config(out, &d.header);
    emit_rule_block(out, "appendMappings", &d.appended_rules);
    emit_rule_block(out, "overrideMappings", &d.overridden_rules);
}

fn emit_context(out: &mut String, d: &ContextDocument) {
    emit_header_start(out, d.header.grammar.to_string().as_str(), "context", &d.header.name, &d.header.version);
    out.push_str("spec:\n");
    push_kv(out, 1, "system", &d.header.fhir_system);
    push_kv(out, 1, "version", &d.header.fhir_version);
    out.push_str("  openEhrConfig:\n");
    push_kv(out, 2, "templateId", &d.template_id);
    push_kv(out, 2, "startArchetype", &d.start_archetype);
    out.push_str("  fhirConfig:\n");
    if d.profile_urls.is_empty() {
        out.push_str("    profiles: []\n");
    } else {
        out.push_str("    profiles:\n");
        for url in &d.profile_urls {
            push_line(out, 3, &format!("- {}", plain(url)));
        }
    }
    out.push_str("context:\n");
    if d.imported_models.is_empty() {
        out.push_str("  model: []\n");
    } else {
        out.push_str("  model:\n");
        for name in &d.imported_models {
            push_line(out, 2, &format!("- {}", plain(name)));
        }
    }
    if d.imported_extensions.is_empty() {
        out.push_str("  extension: []\n");
    } else {
        out.push_str("  extension:\n");
        for name in &d.imported_extensions {
            push_line(out, 2, &format!("- {}", plain(name)));
        }
    }
}

fn emit_header_start(out: &mut String, grammar: &str, kind: &str, name: &str, version: &str) {
    push_kv(out, 0, "grammar", grammar);
    push_kv(out, 0, "type", kind);
    out.push_str("metadata:\n");
    push_kv(out, 1, "name", name);
    push_kv(out, 1, "version", version);
}

fn emit_openehr_config(out: &mut String, h: &MappingHeader) {
    out.push_str("  openEhrConfig:\n");
    push_kv(out, 2, "archetype", &h.archetype_id);
    push_kv(out, 2, "revision", &h.archetype_revision);
}

fn emit_fhir_config(out: &mut String, h: &MappingHeader) {
    out.push_str("  fhirConfig:\n");
    push_kv(out, 2, "structureDefinition", &h.structure_definition_url);
}

fn emit_rule_block(out: &mut String, key: &str, rules: &[MappingRule]) {
    if rules.is_empty() {
        push_line(out, 0, &format!("{key}: []"));
        return;
    }
    push_line(out, 0, &format!("{key}:"));
    for rule in rules {
        emit_rule(out, 1, rule);
    }
}

fn emit_rule(out: &mut String, indent: usize, rule: &MappingRule) {
    push_line(out, indent, &format!("- name: {}", quoted(&rule.name)));
    let body = indent + 1;
    if !rule.fhir_path.is_empty() || !rule.openehr_path.is_empty() {
        push_line(out, body, "with:");
        push_line(out, body + 1, &format!("fhir: {}", quoted(&rule.fhir_path)));
        push_line(out, body + 1, &format!("openehr: {}", quoted(&rule.openehr_path)));
    }
    if let Some(hint) = rule.type_hint {
        push_line(out, body, &format!("dataType: {}", hint.as_str()));
    }
    if rule.cardinality == crate::model::Cardinality::One {
        push_line(out, body, "cardinality: one");
    }
    if let Some(slot) = &rule.slot_archetype {
        push_line(out, body, &format!("slotArchetype: {}", plain(slot)));
    }
    if let Some(cond) = &rule.condition {
        emit_condition(out, body, cond);
    }
    if !rule.children.is_empty() {
        push_line(out, body, "followedBy:");
        push_line(out, body + 1, "mappings:");
        for child in &rule.children {
            emit_rule(out, body + 2, child);
        }
    }
}

fn emit_condition(out: &mut String, indent: usize, cond: &ConditionClause) {
    push_line(out, indent, "condition:");
    push_line(out, indent + 1, &format!("targetRoot: {}", quoted(cond.side.root())));
    push_line(out, indent + 1, &format!("targetAttribute: {}", quoted(&cond.target_path)));
    push_line(out, indent + 1, &format!("operator: {}", cond.operator.as_str()));
    if !cond.operands.is_empty() {
        let items: Vec<String> = cond.operands.iter().map(|s| quoted(s)).collect();
        push_line(out, indent + 1, &format!("criteria: [{}]", items.join(", ")));
    }
}

fn push_kv(out: &mut String, indent: usize, key: &str, value: &str) {
    push_line(out, indent, &format!("{key}: {}", plain(value)));
}

fn push_line(out: &mut String, indent: usize, text: &str) {
    for _ in 0..indent {
        out.push_str("  ");
    }
    out.push_str(text);
    out.push('\n');
}

/// Header values stay plain when safe, mirroring the reference listings.
fn plain(value: &str) -> String {
    let safe = !value.is_empty()
        && value
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || "._-/:+".contains(c))
        && !value.starts_with(|c: char| "-?:!&*,[]{}#|>%@`\"'".contains(c))
        && !value.contains(": ");
    if safe {
        value.to_string()
    } else {
        quoted(value)
    }
}

fn quoted(value: &str) -> String {
    let mut s = String::with_capacity(value.len() + 2);
    s.push('"');
    for c in value.chars() {
        match c {
            '"' => s.push_str("\\\""),
            '\\' => s.push_str("\\\\"),
            '\n' => s.push_str("\\n"),
            '\t' => s.push_str("\\t"),
            _ => s.push(c),
        }
    }
    s.push('"');
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{
        Cardinality, ConditionOperator, ConditionSide, GrammarVersion, MappingKind, TypeHint,
    };
    use crate::yaml::parse_mapping_file;

    fn model_doc() -> MappingDocument {
        parse_mapping_file(crate::yaml::tests::PROBLEM_DIAGNOSIS_YAML.as_bytes(), "pd.yml")
            .unwrap()
    }

    #[test]
    fn parse_then_serialize_round_trips() {
        let doc = model_doc();
        let bytes = serialize_mapping(&doc);
        let reparsed = parse_mapping_file(&bytes, "canon.yml").unwrap();
        assert_eq!(doc, reparsed);
    }

    #[test]
    fn canonical_key_order_is_fixed() {
        let bytes = serialize_mapping(&model_doc());
        let text = String::from_utf8(bytes).unwrap();
        let order = ["grammar:", "type:", "metadata:", "spec:", "mappings:"];
        let mut last = 0;
        for key in order {
            let pos = text.find(key).unwrap_or_else(|| panic!("{key} missing"));
            assert!(pos >= last, "{key} out of order");
            last = pos;
        }
        assert!(text.contains("fhir: \"$resource.code\""));
    }

    #[test]
    fn empty_rules_serialize_as_flow_list() {
        let MappingDocument::Model(mut model) = model_doc() else { panic!() };
        model.rules.clear();
        let text =
            String::from_utf8(serialize_mapping(&MappingDocument::Model(model))).unwrap();
        assert!(text.ends_with("mappings: []\n"));
    }

    #[test]
    fn condition_round_trips_through_yaml() {
        let MappingDocument::Model(mut model) = model_doc() else { panic!() };
        model.rules[0].condition = Some(ConditionClause {
            side: ConditionSide::Fhir,
            target_path: "verificationStatus.coding.code".into(),
            operator: ConditionOperator::OneOf,
            operands: vec!["confirmed".into(), "provisional".into()],
        });
        model.rules[0].type_hint = Some(TypeHint::CodedText);
        model.rules[0].cardinality = Cardinality::One;
        let doc = MappingDocument::Model(model);
        let bytes = serialize_mapping(&doc);
        let text = std::str::from_utf8(&bytes).unwrap();
        assert!(text.contains("condition:"), "{text}");
        assert!(text.contains("operator: one-of"), "{text}");
        let reparsed = parse_mapping_file(&bytes, "cond.yml").unwrap();
        assert_eq!(doc, reparsed);
    }

    #[test]
    fn extension_and_context_round_trip() {
        let ext = MappingDocument::Extension(crate::model::ExtensionDocument {
            header: crate::model::MappingHeader {
                grammar: GrammarVersion { major: 1, minor: 0, patch: 0 },
                kind: MappingKind::Extension,
                name: "problem_diagnosis.cds".into(),
                version: "0.1.0".into(),
                fhir_system: "FHIR".into(),
                fhir_version: "R4".into(),
                archetype_id: "openEHR-EHR-EVALUATION.problem_diagnosis.v1".into(),
                archetype_revision: "1.4.1".into(),
                structure_definition_url:
                    "https://example.org/fhir/StructureDefinition/Diagnose".into(),
            },
            extends: "EVALUATION.problem_diagnosis.v1".into(),
            appended_rules: vec![crate::model::MappingRule::simple(
                "seite",
                "$resource.extension(\"https://example.org/fhir/Seitenlokalisation\").valueCoding",
                "$archetype/data[at0001]/items[at0009]",
            )],
            overridden_rules: vec![],
        });
        let reparsed = parse_mapping_file(&serialize_mapping(&ext), "e.yml").unwrap();
        assert_eq!(ext, reparsed);

        let ctx = MappingDocument::Context(crate::model::ContextDocument {
            header: crate::model::ContextHeader {
                grammar: GrammarVersion { major: 1, minor: 0, patch: 0 },
                name: "diagnose.demo".into(),
                version: "0.1.0".into(),
                fhir_system: "FHIR".into(),
                fhir_version: "R4".into(),
            },
            template_id: "diagnose.demo.v0".into(),
            start_archetype: "openEHR-EHR-EVALUATION.problem_diagnosis.v1".into(),
            profile_urls: vec![],
            imported_models: vec!["EVALUATION.problem_diagnosis.v1".into()],
            imported_extensions: vec![],
        });
        let reparsed = parse_mapping_file(&serialize_mapping(&ctx), "c.yml").unwrap();
        assert_eq!(ctx, reparsed);
    }
}
