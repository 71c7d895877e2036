//! Loading, indexing and resolving mapping libraries.
//!
//! [`load_directory`] parses and validates every mapping file under a
//! directory (fail-fast). [`resolve_context`] turns one context-mapping
//! into a flat, executable rule set by applying extension-merge semantics;
//! the context itself only selects, it never rewrites a rule.

use std::path::{Path, PathBuf};

use indexmap::IndexMap;

use crate::model::{
    validate_document, ContextDocument, ExtensionDocument, MappingDocument, MappingRule,
    ModelDocument, Violation,
};
use crate::yaml::{parse_mapping_file, ParseError};

/// Failure while loading a mapping directory.
#[derive(Debug, thiserror::Error)]
pub enum LoadError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("{file}: {}", .violations[0])]
    Validation { file: String, violations: Vec<Violation> },
    #[error("DuplicateMapping archetype {archetype_id} with {structure_definition_url} is mapped by both {first_file} and {second_file}")]
    DuplicateMapping {
        archetype_id: String,
        structure_definition_url: String,
        first_file: String,
        second_file: String,
    },
    #[error("DuplicateName {kind} mapping {name:?} is defined by both {first_file} and {second_file}")]
    DuplicateName { kind: &'static str, name: String, first_file: String, second_file: String },
}

/// Failure while merging an extension onto its base model-mapping.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MergeError {
    #[error("UnknownBase extension extends {expected:?} but was applied to {actual:?}")]
    UnknownBase { expected: String, actual: String },
    #[error("OverrideTargetMissing rule {name:?} does not exist in the base mapping")]
    OverrideTargetMissing { name: String },
    #[error("AppendCollision rule {name:?} already exists in the base mapping")]
    AppendCollision { name: String },
}

/// Failure while resolving a context into an executable set.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ResolveError {
    #[error("UnknownContext {name:?}")]
    UnknownContext { name: String },
    #[error("UnknownImport {what} {name:?} is not available")]
    UnknownImport { what: &'static str, name: String },
    #[error("UnresolvedSlot {archetype_id} {detail}")]
    UnresolvedSlot { archetype_id: String, detail: String },
    #[error("ExtensionOrderConflict rule {rule:?} of {base:?} is overridden by both {first_extension:?} and {second_extension:?}")]
    ExtensionOrderConflict {
        rule: String,
        base: String,
        first_extension: String,
        second_extension: String,
    },
    #[error(transparent)]
    Merge(#[from] MergeError),
}

/// An indexed, immutable mapping library.
#[derive(Debug, Clone, Default)]
pub struct MappingRepository {
    pub models: IndexMap<String, ModelDocument>,
    pub extensions: IndexMap<String, ExtensionDocument>,
    pub contexts: IndexMap<String, ContextDocument>,
    /// archetype id to the names of model-mappings covering it.
    pub by_archetype: IndexMap<String, Vec<String>>,
    /// StructureDefinition URL to the names of model/extension mappings
    /// targeting it.
    pub by_profile: IndexMap<String, Vec<String>>,
    /// Qualified name (`model/NAME`, `extension/NAME`, `context/NAME`) to
    /// the file the document came from.
    pub sources: IndexMap<String, String>,
}

impl MappingRepository {
    pub fn is_empty(&self) -> bool {
        self.models.is_empty() && self.extensions.is_empty() && self.contexts.is_empty()
    }

    fn source_of(&self, kind: &str, name: &str) -> String {
        self.sources
            .get(&format!("{kind}/{name}"))
            .cloned()
            .unwrap_or_else(|| "<memory>".to_string())
    }

    /// Indexes a parsed, validated document. Exposed for building
    /// repositories in memory; [`load_directory`] is the file-system front.
    pub fn insert(&mut self, doc: MappingDocument, file: &str) -> Result<(), LoadError> {
        match doc {
            MappingDocument::Model(model) => {
                let name = model.header.name.clone();
                if self.models.contains_key(&name) {
                    return Err(LoadError::DuplicateName {
                        kind: "model",
                        name: name.clone(),
                        first_file: self.source_of("model", &name),
                        second_file: file.to_string(),
                    });
                }
                let archetype = model.header.archetype_id.clone();
                let sd = model.header.structure_definition_url.clone();
                for other_name in self.by_archetype.get(&archetype).into_iter().flatten() {
                    let other = &self.models[other_name];
                    if other.header.structure_definition_url == sd {
                        return Err(LoadError::DuplicateMapping {
                            archetype_id: archetype,
                            structure_definition_url: sd,
                            first_file: self.source_of("model", other_name),
                            second_file: file.to_string(),
                        });
                    }
                }
                self.by_archetype.entry(archetype).or_default().push(name.clone());
                self.by_profile.entry(sd).or_default().push(name.clone());
                self.sources.insert(format!("model/{name}"), file.to_string());
                self.models.insert(name, model);
            }
            MappingDocument::Extension(ext) => {
                let name = ext.header.name.clone();
                if self.extensions.contains_key(&name) {
                    return Err(LoadError::DuplicateName {
                        kind: "extension",
                        name: name.clone(),
                        first_file: self.source_of("extension", &name),
                        second_file: file.to_string(),
                    });
                }
                self.by_profile
                    .entry(ext.header.structure_definition_url.clone())
                    .or_default()
                    .push(name.clone());
                self.sources.insert(format!("extension/{name}"), file.to_string());
                self.extensions.insert(name, ext);
            }
            MappingDocument::Context(ctx) => {
                let name = ctx.header.name.clone();
                if self.contexts.contains_key(&name) {
                    return Err(LoadError::DuplicateName {
                        kind: "context",
                        name: name.clone(),
                        first_file: self.source_of("context", &name),
                        second_file: file.to_string(),
                    });
                }
                self.sources.insert(format!("context/{name}"), file.to_string());
                self.contexts.insert(name, ctx);
            }
        }
        Ok(())
    }
}

/// Loads every `.yml`/`.yaml` under `path` (the `models/`, `extensions/`,
/// `contexts/` convention or a flat directory; kind comes from file
/// content). The first parse or validation failure aborts the load.
pub fn load_directory(path: &Path) -> Result<MappingRepository, LoadError> {
    let mut files: Vec<PathBuf> = Vec::new();
    for entry in walkdir::WalkDir::new(path).sort_by_file_name() {
        let entry = entry.map_err(|e| LoadError::Io {
            path: e.path().map(Path::to_path_buf).unwrap_or_else(|| path.to_path_buf()),
            source: e.into_io_error().unwrap_or_else(|| std::io::Error::other("walk failed")),
        })?;
        if !entry.file_type().is_file() {
            continue;
        }
        match entry.path().extension().and_then(|e| e.to_str()) {
            Some("yml") | Some("yaml") => files.push(entry.into_path()),
            _ => {}
        }
    }

    let mut repo = MappingRepository::default();
    for file in files {
        let display = file.display().to_string();
        let bytes = std::fs::read(&file).map_err(|e| LoadError::Io { path: file.clone(), source: e })?;
        let doc = parse_mapping_file(&bytes, &display)?;
        let report = validate_document(&doc);
        if !report.is_ok() {
            return Err(LoadError::Validation { file: display, violations: report.violations });
        }
        repo.insert(doc, &display)?;
    }
    Ok(repo)
}

/// Replaces the rule named `name` wherever it sits in the forest.
fn replace_rule(rules: &mut [MappingRule], name: &str, replacement: &MappingRule) -> bool {
    for rule in rules.iter_mut() {
        if rule.name == name {
            *rule = replacement.clone();
            return true;
        }
        if replace_rule(&mut rule.children, name, replacement) {
            return true;
        }
    }
    false
}

fn rule_names<'a>(rules: &'a [MappingRule], out: &mut Vec<&'a str>) {
    for rule in rules {
        out.push(&rule.name);
        rule_names(&rule.children, out);
    }
}

/// Applies one extension to its base model-mapping, returning a new
/// document. Overridden rules are replaced in place (position preserved),
/// appended rules follow the base rules in file order, and the header takes
/// the extension's profile URL.
pub fn apply_extension(
    base: &ModelDocument,
    ext: &ExtensionDocument,
) -> Result<ModelDocument, MergeError> {
    if ext.extends != base.header.name {
        return Err(MergeError::UnknownBase {
            expected: ext.extends.clone(),
            actual: base.header.name.clone(),
        });
    }
    let mut merged = base.clone();
    for rule in &ext.overridden_rules {
        if !replace_rule(&mut merged.rules, &rule.name, rule) {
            return Err(MergeError::OverrideTargetMissing { name: rule.name.clone() });
        }
    }
    for rule in &ext.appended_rules {
        let mut names = Vec::new();
        rule_names(&merged.rules, &mut names);
        if names.contains(&rule.name.as_str()) {
            return Err(MergeError::AppendCollision { name: rule.name.clone() });
        }
        merged.rules.push(rule.clone());
    }
    merged.header.structure_definition_url = ext.header.structure_definition_url.clone();
    Ok(merged)
}

/// Where a resolved rule came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    FromModel,
    FromExtensionAdded,
    FromExtensionOverridden,
}

impl Provenance {
    pub fn as_str(&self) -> &'static str {
        match self {
            Provenance::FromModel => "FromModel",
            Provenance::FromExtensionAdded => "FromExtensionAdded",
            Provenance::FromExtensionOverridden => "FromExtensionOverridden",
        }
    }
}

/// The merged rule set for one archetype inside a resolved context.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResolvedArchetype {
    pub archetype_id: String,
    /// FHIR resource type, from the last segment of the base model's
    /// StructureDefinition URL.
    pub resource_type: String,
    /// Profile URL when an extension re-targeted the mapping.
    pub profile_url: Option<String>,
    pub rules: Vec<MappingRule>,
    /// Rule name to provenance, covering nested rules too.
    pub provenance: IndexMap<String, Provenance>,
    /// Directly imported by the context (allocates resources) rather than
    /// pulled in through a slot.
    pub entry: bool,
}

/// A context resolved into executable per-archetype rule lists.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResolvedMappingSet {
    pub context_name: String,
    pub template_id: String,
    pub entry_archetype: String,
    pub per_archetype: IndexMap<String, ResolvedArchetype>,
    /// Cross-context references noticed during resolution; surfaced as
    /// diagnostics, never followed.
    pub diagnostics: Vec<String>,
}

impl ResolvedMappingSet {
    /// An empty inclusion set parses but cannot drive a transform.
    pub fn is_executable(&self) -> bool {
        !self.per_archetype.is_empty()
    }

    pub fn provenance_of(&self, archetype_id: &str, rule_name: &str) -> Option<Provenance> {
        self.per_archetype.get(archetype_id)?.provenance.get(rule_name).copied()
    }
}

fn mark_all(rules: &[MappingRule], tag: Provenance, out: &mut IndexMap<String, Provenance>) {
    for rule in rules {
        out.insert(rule.name.clone(), tag);
        mark_all(&rule.children, tag, out);
    }
}

fn slot_archetypes<'a>(rules: &'a [MappingRule], out: &mut Vec<&'a str>) {
    for rule in rules {
        if let Some(slot) = &rule.slot_archetype {
            out.push(slot);
        }
        slot_archetypes(&rule.children, out);
    }
}

fn resource_type_of(structure_definition_url: &str) -> String {
    structure_definition_url
        .rsplit('/')
        .next()
        .unwrap_or(structure_definition_url)
        .to_string()
}

/// Resolves one archetype's merged mapping: its model plus every imported
/// extension that extends it, in import-list order.
fn merge_for_model(
    repo: &MappingRepository,
    model: &ModelDocument,
    imported_extensions: &[String],
) -> Result<ResolvedArchetype, ResolveError> {
    let resource_type = resource_type_of(&model.header.structure_definition_url);
    let mut provenance = IndexMap::new();
    mark_all(&model.rules, Provenance::FromModel, &mut provenance);

    let mut merged = model.clone();
    let mut touched = false;
    let mut override_owner: IndexMap<String, String> = IndexMap::new();
    for ext_name in imported_extensions {
        let ext = &repo.extensions[ext_name.as_str()];
        if ext.extends != model.header.name {
            continue;
        }
        for rule in &ext.overridden_rules {
            if let Some(first) = override_owner.get(&rule.name) {
                return Err(ResolveError::ExtensionOrderConflict {
                    rule: rule.name.clone(),
                    base: model.header.name.clone(),
                    first_extension: first.clone(),
                    second_extension: ext_name.clone(),
                });
            }
            override_owner.insert(rule.name.clone(), ext_name.clone());
        }
        merged = apply_extension(&merged, ext)?;
        touched = true;
        for rule in &ext.overridden_rules {
            provenance.insert(rule.name.clone(), Provenance::FromExtensionOverridden);
            mark_all(&rule.children, Provenance::FromExtensionOverridden, &mut provenance);
        }
        for rule in &ext.appended_rules {
            provenance.insert(rule.name.clone(), Provenance::FromExtensionAdded);
            mark_all(&rule.children, Provenance::FromExtensionAdded, &mut provenance);
        }
    }

    Ok(ResolvedArchetype {
        archetype_id: model.header.archetype_id.clone(),
        resource_type,
        profile_url: touched.then(|| merged.header.structure_definition_url.clone()),
        rules: merged.rules,
        provenance,
        entry: false,
    })
}

/// Resolves a context into per-archetype rule lists, transitively across
/// `slotArchetype` references. Ambiguous or missing slot targets are
/// errors; conflicting overrides from two extensions are errors rather
/// than order-dependent.
pub fn resolve_context(
    repo: &MappingRepository,
    context_name: &str,
) -> Result<ResolvedMappingSet, ResolveError> {
    let context = repo
        .contexts
        .get(context_name)
        .ok_or_else(|| ResolveError::UnknownContext { name: context_name.to_string() })?;

    for ext_name in &context.imported_extensions {
        let ext = repo.extensions.get(ext_name).ok_or_else(|| ResolveError::UnknownImport {
            what: "extension",
            name: ext_name.clone(),
        })?;
        if !context.imported_models.contains(&ext.extends) {
            return Err(ResolveError::UnknownImport { what: "model", name: ext.extends.clone() });
        }
    }

    let mut set = ResolvedMappingSet {
        context_name: context_name.to_string(),
        template_id: context.template_id.clone(),
        entry_archetype: context.start_archetype.clone(),
        per_archetype: IndexMap::new(),
        diagnostics: Vec::new(),
    };

    for model_name in &context.imported_models {
        let model = repo.models.get(model_name).ok_or_else(|| ResolveError::UnknownImport {
            what: "model",
            name: model_name.clone(),
        })?;
        let mut resolved = merge_for_model(repo, model, &context.imported_extensions)?;
        resolved.entry = true;
        set.per_archetype.insert(resolved.archetype_id.clone(), resolved);
    }

    // Transitive slot resolution, eager so bad libraries fail before any
    // patient data is touched.
    let mut queue: Vec<String> = set
        .per_archetype
        .values()
        .flat_map(|r| {
            let mut slots = Vec::new();
            slot_archetypes(&r.rules, &mut slots);
            slots.into_iter().map(str::to_string).collect::<Vec<_>>()
        })
        .collect();
    while let Some(slot) = queue.pop() {
        if set.per_archetype.contains_key(&slot) {
            continue;
        }
        let candidates = repo.by_archetype.get(&slot).cloned().unwrap_or_default();
        let model_name = match candidates.as_slice() {
            [] => {
                return Err(ResolveError::UnresolvedSlot {
                    archetype_id: slot,
                    detail: "no model-mapping covers this archetype".into(),
                })
            }
            [one] => one.clone(),
            many => {
                return Err(ResolveError::UnresolvedSlot {
                    archetype_id: slot,
                    detail: format!("ambiguous: {} model-mappings cover it ({})", many.len(), many.join(", ")),
                })
            }
        };
        let model = &repo.models[model_name.as_str()];
        let resolved = merge_for_model(repo, model, &context.imported_extensions)?;
        let mut slots = Vec::new();
        slot_archetypes(&resolved.rules, &mut slots);
        queue.extend(slots.into_iter().map(str::to_string));
        set.per_archetype.insert(resolved.archetype_id.clone(), resolved);
    }

    if !context.profile_urls.is_empty() {
        for url in &context.profile_urls {
            if !repo.by_profile.contains_key(url) {
                set.diagnostics.push(format!(
                    "profile {url} is declared by the context but no imported mapping targets it"
                ));
            }
        }
    }

    Ok(set)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::model::{GrammarVersion, MappingHeader, MappingKind};

    fn grammar() -> GrammarVersion {
        GrammarVersion { major: 1, minor: 0, patch: 0 }
    }

    pub(crate) fn fig3_model() -> ModelDocument {
        ModelDocument {
            header: MappingHeader {
                grammar: grammar(),
                kind: MappingKind::Model,
                name: "EVALUATION.problem_diagnosis.v1".into(),
                version: "0.0.1-alpha".into(),
                fhir_system: "FHIR".into(),
                fhir_version: "R4".into(),
                archetype_id: "openEHR-EHR-EVALUATION.problem_diagnosis.v1".into(),
                archetype_revision: "1.4.1".into(),
                structure_definition_url: "http://hl7.org/fhir/StructureDefinition/Condition"
                    .into(),
            },
            rules: vec![
                MappingRule::simple(
                    "problemDiagnose",
                    "$resource.code",
                    "$archetype/data[at0001]/items[at0002]",
                ),
                MappingRule::simple(
                    "dateTime",
                    "$resource.onset",
                    "$archetype/data[at0001]/items[at0077]",
                ),
            ],
        }
    }

    pub(crate) fn cds_extension() -> ExtensionDocument {
        ExtensionDocument {
            header: MappingHeader {
                grammar: grammar(),
                kind: MappingKind::Extension,
                name: "problem_diagnosis.cds".into(),
                version: "0.1.0".into(),
                fhir_system: "FHIR".into(),
                fhir_version: "R4".into(),
                archetype_id: "openEHR-EHR-EVALUATION.problem_diagnosis.v1".into(),
                archetype_revision: "1.4.1".into(),
                structure_definition_url: "https://example.org/fhir/StructureDefinition/Diagnose"
                    .into(),
            },
            extends: "EVALUATION.problem_diagnosis.v1".into(),
            appended_rules: vec![MappingRule::simple(
                "feststellungsdatum",
                "$resource.extension(\"https://example.org/fhir/Feststellungsdatum\").valueDateTime",
                "$archetype/data[at0001]/items[at0003]",
            )],
            overridden_rules: vec![MappingRule::simple(
                "dateTime",
                "$resource.onsetDateTime",
                "$archetype/data[at0001]/items[at0077]",
            )],
        }
    }

    fn context_doc(name: &str, models: Vec<&str>, extensions: Vec<&str>) -> ContextDocument {
        ContextDocument {
            header: crate::model::ContextHeader {
                grammar: grammar(),
                name: name.into(),
                version: "0.1.0".into(),
                fhir_system: "FHIR".into(),
                fhir_version: "R4".into(),
            },
            template_id: "diagnose.demo.v0".into(),
            start_archetype: "openEHR-EHR-EVALUATION.problem_diagnosis.v1".into(),
            profile_urls: vec![],
            imported_models: models.into_iter().map(str::to_string).collect(),
            imported_extensions: extensions.into_iter().map(str::to_string).collect(),
        }
    }

    pub(crate) fn demo_repo() -> MappingRepository {
        let mut repo = MappingRepository::default();
        repo.insert(MappingDocument::Model(fig3_model()), "models/problem_diagnosis.yml").unwrap();
        repo.insert(MappingDocument::Extension(cds_extension()), "extensions/cds.yml").unwrap();
        repo.insert(
            MappingDocument::Context(context_doc(
                "diagnose.base",
                vec!["EVALUATION.problem_diagnosis.v1"],
                vec![],
            )),
            "contexts/base.yml",
        )
        .unwrap();
        repo.insert(
            MappingDocument::Context(context_doc(
                "diagnose.cds",
                vec!["EVALUATION.problem_diagnosis.v1"],
                vec!["problem_diagnosis.cds"],
            )),
            "contexts/cds.yml",
        )
        .unwrap();
        repo
    }

    #[test]
    fn apply_extension_overrides_in_place_and_appends() {
        // Oracle: a manual splice of the two documents.
        let base = fig3_model();
        let ext = cds_extension();
        let merged = apply_extension(&base, &ext).unwrap();
        assert_eq!(merged.rules.len(), 3);
        assert_eq!(merged.rules[0], base.rules[0], "rule 1 untouched");
        assert_eq!(merged.rules[1].name, "dateTime");
        assert_eq!(merged.rules[1].fhir_path, "$resource.onsetDateTime");
        assert_eq!(merged.rules[2].name, "feststellungsdatum");
        assert_eq!(merged.header.structure_definition_url, ext.header.structure_definition_url);
        // The base is untouched.
        assert_eq!(base.rules[1].fhir_path, "$resource.onset");
    }

    #[test]
    fn identity_merge_only_swaps_the_profile_url() {
        let base = fig3_model();
        let mut ext = cds_extension();
        ext.appended_rules.clear();
        ext.overridden_rules.clear();
        let merged = apply_extension(&base, &ext).unwrap();
        assert_eq!(merged.rules, base.rules);
        assert_eq!(merged.header.structure_definition_url, ext.header.structure_definition_url);
    }

    #[test]
    fn append_collision_is_detected() {
        // Oracle: name-set intersection between base and appended rules.
        let base = fig3_model();
        let mut ext = cds_extension();
        ext.overridden_rules.clear();
        ext.appended_rules = vec![MappingRule::simple("problemDiagnose", "$resource.x", "$archetype/data[at0001]")];
        let err = apply_extension(&base, &ext).unwrap_err();
        assert_eq!(err, MergeError::AppendCollision { name: "problemDiagnose".into() });
    }

    #[test]
    fn override_target_must_exist() {
        let base = fig3_model();
        let mut ext = cds_extension();
        ext.overridden_rules = vec![MappingRule::simple("ghost", "$resource.x", "$archetype/data[at0001]")];
        ext.appended_rules.clear();
        let err = apply_extension(&base, &ext).unwrap_err();
        assert_eq!(err, MergeError::OverrideTargetMissing { name: "ghost".into() });
    }

    #[test]
    fn unknown_base_is_rejected() {
        let mut other = fig3_model();
        other.header.name = "EVALUATION.other.v1".into();
        let err = apply_extension(&other, &cds_extension()).unwrap_err();
        assert!(matches!(err, MergeError::UnknownBase { .. }));
    }

    #[test]
    fn rule_lookup_after_merge_returns_the_override() {
        // Oracle: a last-writer-wins map built by hand over base-then-
        // extension rules.
        let base = fig3_model();
        let ext = cds_extension();
        let mut wins: IndexMap<&str, &MappingRule> = IndexMap::new();
        for r in &base.rules {
            wins.insert(r.name.as_str(), r);
        }
        for r in &ext.overridden_rules {
            wins.insert(r.name.as_str(), r);
        }
        let merged = apply_extension(&base, &ext).unwrap();
        let hit = crate::model::rule_lookup(&merged, "dateTime").unwrap();
        assert_eq!(hit, wins["dateTime"]);
        assert_eq!(hit.fhir_path, "$resource.onsetDateTime");
    }

    #[test]
    fn resolve_base_context_marks_everything_from_model() {
        let repo = demo_repo();
        let set = resolve_context(&repo, "diagnose.base").unwrap();
        assert_eq!(set.per_archetype.len(), 1);
        let resolved = &set.per_archetype["openEHR-EHR-EVALUATION.problem_diagnosis.v1"];
        assert_eq!(resolved.rules.len(), 2);
        assert_eq!(resolved.resource_type, "Condition");
        assert!(resolved.profile_url.is_none());
        assert!(resolved.provenance.values().all(|p| *p == Provenance::FromModel));
    }

    #[test]
    fn resolve_with_extension_tracks_provenance() {
        // Oracle: compare the resolved rules field-by-field with a direct
        // apply_extension result.
        let repo = demo_repo();
        let set = resolve_context(&repo, "diagnose.cds").unwrap();
        let resolved = &set.per_archetype["openEHR-EHR-EVALUATION.problem_diagnosis.v1"];
        let direct = apply_extension(&repo.models["EVALUATION.problem_diagnosis.v1"], &repo.extensions["problem_diagnosis.cds"]).unwrap();
        assert_eq!(resolved.rules, direct.rules);
        assert_eq!(
            set.provenance_of("openEHR-EHR-EVALUATION.problem_diagnosis.v1", "dateTime"),
            Some(Provenance::FromExtensionOverridden)
        );
        assert_eq!(
            set.provenance_of("openEHR-EHR-EVALUATION.problem_diagnosis.v1", "feststellungsdatum"),
            Some(Provenance::FromExtensionAdded)
        );
        assert_eq!(
            set.provenance_of("openEHR-EHR-EVALUATION.problem_diagnosis.v1", "problemDiagnose"),
            Some(Provenance::FromModel)
        );
        assert_eq!(resolved.profile_url.as_deref(), Some("https://example.org/fhir/StructureDefinition/Diagnose"));
    }

    #[test]
    fn empty_inclusion_resolves_but_is_not_executable() {
        let mut repo = demo_repo();
        repo.insert(
            MappingDocument::Context(context_doc("empty.ctx", vec![], vec![])),
            "contexts/empty.yml",
        )
        .unwrap();
        let set = resolve_context(&repo, "empty.ctx").unwrap();
        assert!(!set.is_executable());
    }

    #[test]
    fn unknown_context_and_import_errors() {
        let repo = demo_repo();
        assert!(matches!(
            resolve_context(&repo, "nope"),
            Err(ResolveError::UnknownContext { .. })
        ));
        let mut repo2 = demo_repo();
        repo2
            .insert(
                MappingDocument::Context(context_doc("bad.ctx", vec!["MISSING.model.v1"], vec![])),
                "contexts/bad.yml",
            )
            .unwrap();
        assert!(matches!(
            resolve_context(&repo2, "bad.ctx"),
            Err(ResolveError::UnknownImport { .. })
        ));
    }

    #[test]
    fn conflicting_overrides_are_a_hard_error() {
        let mut repo = demo_repo();
        let mut second = cds_extension();
        second.header.name = "problem_diagnosis.other".into();
        second.header.structure_definition_url =
            "https://example.org/fhir/StructureDefinition/Other".into();
        second.appended_rules.clear();
        repo.insert(MappingDocument::Extension(second), "extensions/other.yml").unwrap();
        repo.insert(
            MappingDocument::Context(context_doc(
                "conflict.ctx",
                vec!["EVALUATION.problem_diagnosis.v1"],
                vec!["problem_diagnosis.cds", "problem_diagnosis.other"],
            )),
            "contexts/conflict.yml",
        )
        .unwrap();
        let err = resolve_context(&repo, "conflict.ctx").unwrap_err();
        match err {
            ResolveError::ExtensionOrderConflict { rule, first_extension, second_extension, .. } => {
                assert_eq!(rule, "dateTime");
                assert_eq!(first_extension, "problem_diagnosis.cds");
                assert_eq!(second_extension, "problem_diagnosis.other");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn disjoint_extensions_commute() {
        let base = fig3_model();
        let mut ext_a = cds_extension();
        ext_a.overridden_rules.clear(); // appends feststellungsdatum only
        let mut ext_b = cds_extension();
        ext_b.header.name = "problem_diagnosis.b".into();
        ext_b.appended_rules = vec![MappingRule::simple(
            "verification",
            "$resource.verificationStatus",
            "$archetype/data[at0001]/items[at0073]",
        )];
        ext_b.overridden_rules.clear();
        let ab = apply_extension(&apply_extension(&base, &ext_a).unwrap(), &ext_b).unwrap();
        let ba = apply_extension(&apply_extension(&base, &ext_b).unwrap(), &ext_a).unwrap();
        // Appended order differs by application order; rule sets must match.
        let mut ab_names: Vec<&str> = ab.rules.iter().map(|r| r.name.as_str()).collect();
        let mut ba_names: Vec<&str> = ba.rules.iter().map(|r| r.name.as_str()).collect();
        ab_names.sort_unstable();
        ba_names.sort_unstable();
        assert_eq!(ab_names, ba_names);
        for rule in &ab.rules {
            assert_eq!(Some(rule), ba.rules.iter().find(|r| r.name == rule.name).as_deref());
        }
    }

    #[test]
    fn slot_references_pull_in_their_models() {
        let mut repo = demo_repo();
        let mut anatomical = fig3_model();
        anatomical.header.name = "CLUSTER.anatomical_location.v1".into();
        anatomical.header.archetype_id = "openEHR-EHR-CLUSTER.anatomical_location.v1".into();
        anatomical.header.structure_definition_url =
            "http://hl7.org/fhir/StructureDefinition/BodyStructure".into();
        anatomical.rules = vec![MappingRule::simple(
            "bodySiteName",
            "$resource.location",
            "$archetype/items[at0001]",
        )];
        repo.insert(MappingDocument::Model(anatomical), "models/anatomical.yml").unwrap();

        let mut slotted = fig3_model();
        slotted.header.name = "EVALUATION.problem_diagnosis.slotted".into();
        slotted.header.structure_definition_url =
            "http://hl7.org/fhir/StructureDefinition/Condition-slotted".into();
        let mut slot_rule = MappingRule::simple(
            "anatomicalLocation",
            "$resource.bodySite",
            "$archetype/data[at0001]/items[at0039]",
        );
        slot_rule.slot_archetype = Some("openEHR-EHR-CLUSTER.anatomical_location.v1".into());
        slotted.rules.push(slot_rule);
        repo.insert(MappingDocument::Model(slotted), "models/slotted.yml").unwrap();
        repo.insert(
            MappingDocument::Context(context_doc(
                "slotted.ctx",
                vec!["EVALUATION.problem_diagnosis.slotted"],
                vec![],
            )),
            "contexts/slotted.yml",
        )
        .unwrap();

        let set = resolve_context(&repo, "slotted.ctx").unwrap();
        assert_eq!(set.per_archetype.len(), 2);
        let pulled = &set.per_archetype["openEHR-EHR-CLUSTER.anatomical_location.v1"];
        assert!(!pulled.entry);

        // A dangling slot is an eager error.
        let mut dangling = fig3_model();
        dangling.header.name = "EVALUATION.dangling.v1".into();
        dangling.header.structure_definition_url =
            "http://hl7.org/fhir/StructureDefinition/Condition-dangling".into();
        let mut bad_rule = MappingRule::simple("ghostSlot", "$resource.x", "$archetype/data[at0001]");
        bad_rule.slot_archetype = Some("openEHR-EHR-CLUSTER.ghost.v1".into());
        dangling.rules.push(bad_rule);
        repo.insert(MappingDocument::Model(dangling), "models/dangling.yml").unwrap();
        repo.insert(
            MappingDocument::Context(context_doc(
                "dangling.ctx",
                vec!["EVALUATION.dangling.v1"],
                vec![],
            )),
            "contexts/dangling.yml",
        )
        .unwrap();
        let err = resolve_context(&repo, "dangling.ctx").unwrap_err();
        assert!(matches!(err, ResolveError::UnresolvedSlot { .. }));
    }

    #[test]
    fn duplicate_archetype_and_profile_pair_is_rejected() {
        // Oracle: pairwise index collision scan over loaded models.
        let mut repo = MappingRepository::default();
        repo.insert(MappingDocument::Model(fig3_model()), "a.yml").unwrap();
        let mut copy = fig3_model();
        copy.header.name = "EVALUATION.problem_diagnosis.copy".into();
        let err = repo.insert(MappingDocument::Model(copy), "b.yml").unwrap_err();
        match err {
            LoadError::DuplicateMapping { first_file, second_file, .. } => {
                assert_eq!(first_file, "a.yml");
                assert_eq!(second_file, "b.yml");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn same_model_resolved_through_two_contexts_is_identical() {
        let repo = demo_repo();
        let a = resolve_context(&repo, "diagnose.base").unwrap();
        // A second context importing the same model.
        let mut repo2 = demo_repo();
        repo2
            .insert(
                MappingDocument::Context(context_doc(
                    "diagnose.second",
                    vec!["EVALUATION.problem_diagnosis.v1"],
                    vec![],
                )),
                "contexts/second.yml",
            )
            .unwrap();
        let b = resolve_context(&repo2, "diagnose.second").unwrap();
        assert_eq!(
            a.per_archetype["openEHR-EHR-EVALUATION.problem_diagnosis.v1"].rules,
            b.per_archetype["openEHR-EHR-EVALUATION.problem_diagnosis.v1"].rules
        );
    }
}
