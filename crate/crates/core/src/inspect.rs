//! Dataset inspection: scan a raw dataset tree, extract per-file metadata,
//! register ROOT artifacts, the `data_inventory.csv` table and a summary.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use regex::Regex;
use serde::Serialize;
use serde_json::Value as Json;
use walkdir::WalkDir;

use crate::artifact::{Artifact, ArtifactId, ContractViolation, Scope};
use crate::digest::Digest;
use crate::registry::{Registry, RegistryError, RegistryState};
use crate::store::ContentStore;
use crate::value::{flatten_json, AttributeValue, Attributes};

pub const SIDECAR_SUFFIX: &str = ".meta.json";
pub const INVENTORY_FILE: &str = "data_inventory.csv";
pub const INVENTORY_TYPE: &str = "inventory";
pub const SUMMARY_TYPE: &str = "inspection_summary";

/// Fixed column order of `data_inventory.csv`.
pub const INVENTORY_COLUMNS: [&str; 10] =
    ["path", "subject", "session", "type", "modality", "manufacturer", "slice_thickness_mm", "voxel_spacing_mm", "status", "content_hash"];

/// Attribute names the built-in extractor chain can populate.
pub const EXTRACTOR_SCHEMA: &[&str] = &[
    "format",
    "extraction_status",
    "size_bytes",
    "modality",
    "manufacturer",
    "slice_thickness_mm",
    "voxel_spacing_mm",
    "body_part",
    "kernel",
    "series_description",
];

/// Types whose presence counts as prior processing in the summary.
pub const PROCESSED_TYPES: &[&str] = &["nifti_image", "qa_report", "seg_mask", "curated_nifti", "registration"];

#[derive(Debug, thiserror::Error)]
pub enum InspectError {
    #[error("dataset root {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Contract(#[from] ContractViolation),
    #[error("inventory table: {0}")]
    Csv(#[from] csv::Error),
    #[error("invalid scope pattern: {0}")]
    Pattern(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ExtractionStatus {
    Ok,
    Partial,
    Corrupt,
}

impl ExtractionStatus {
    pub fn name(self) -> &'static str {
        match self {
            ExtractionStatus::Ok => "OK",
            ExtractionStatus::Partial => "PARTIAL",
            ExtractionStatus::Corrupt => "CORRUPT",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FileRecord {
    /// `/`-separated, relative to the dataset root.
    pub path: String,
    pub scope: Scope,
    pub size_bytes: u64,
    pub content_hash: Digest,
    pub artifact_type: String,
    pub attributes: Attributes,
    pub status: ExtractionStatus,
}

/// How relative paths map to (subject, session).
#[derive(Clone, Debug)]
pub enum ScopeMapping {
    /// Directory levels; level 0 is the first component under the root.
    Levels { subject: usize, session: Option<usize> },
    /// Regex over the relative path with named groups `subject` and
    /// optionally `session`. Non-matching files are dataset-level.
    Pattern(Regex),
}

impl Default for ScopeMapping {
    fn default() -> Self {
        ScopeMapping::Levels { subject: 0, session: Some(1) }
    }
}

impl ScopeMapping {
    pub fn pattern(re: &str) -> Result<Self, InspectError> {
        let re = Regex::new(re).map_err(|e| InspectError::Pattern(e.to_string()))?;
        if !re.capture_names().any(|n| n == Some("subject")) {
            return Err(InspectError::Pattern("pattern needs a (?P<subject>..) group".into()));
        }
        Ok(ScopeMapping::Pattern(re))
    }

    pub fn scope_of(&self, rel: &str) -> Scope {
        match self {
            ScopeMapping::Levels { subject, session } => {
                let dirs: Vec<&str> = rel.split('/').collect();
                let dirs = &dirs[..dirs.len().saturating_sub(1)];
                match dirs.get(*subject) {
                    None => Scope::dataset(),
                    Some(s) => match session.and_then(|i| dirs.get(i)) {
                        Some(ses) => Scope::session(*s, *ses),
                        None => Scope::subject(*s),
                    },
                }
            }
            ScopeMapping::Pattern(re) => match re.captures(rel) {
                None => Scope::dataset(),
                Some(c) => match (c.name("subject"), c.name("session")) {
                    (Some(s), Some(ses)) => Scope::session(s.as_str(), ses.as_str()),
                    (Some(s), None) => Scope::subject(s.as_str()),
                    _ => Scope::dataset(),
                },
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Extraction {
    pub attributes: Attributes,
    pub status: ExtractionStatus,
}

/// One link of the extractor chain. `None` passes to the next link.
pub trait MetadataExtractor: Send + Sync {
    fn extract(&self, file: &Path) -> Option<Extraction>;
}

/// Reads `<file>.meta.json`: a flat key to scalar map (nested objects are
/// flattened to dotted keys).
#[derive(Debug, Default, Clone, Copy)]
pub struct SidecarExtractor;

impl MetadataExtractor for SidecarExtractor {
    fn extract(&self, file: &Path) -> Option<Extraction> {
        let mut name = file.file_name()?.to_os_string();
        name.push(SIDECAR_SUFFIX);
        let text = match fs::read(file.with_file_name(name)) {
            Ok(bytes) => bytes,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return None,
            Err(_) => return Some(Extraction { attributes: Attributes::new(), status: ExtractionStatus::Corrupt }),
        };
        Some(parse_sidecar(&text))
    }
}

/// Strict parse first; on failure, keep the recoverable prefix.
pub fn parse_sidecar(bytes: &[u8]) -> Extraction {
    match serde_json::from_slice::<Json>(bytes) {
        Ok(json @ Json::Object(_)) => {
            let (attributes, _) = flatten_json(&json);
            Extraction { attributes, status: ExtractionStatus::Ok }
        }
        Ok(_) => Extraction { attributes: Attributes::new(), status: ExtractionStatus::Corrupt },
        Err(_) => {
            let text = String::from_utf8_lossy(bytes);
            Extraction { attributes: recover_prefix(&text), status: ExtractionStatus::Corrupt }
        }
    }
}

/// Key/value pairs of a damaged JSON object that are complete and followed
/// by `,` or `}`. Scanning stops at the first damaged pair.
pub fn recover_prefix(text: &str) -> Attributes {
    let mut out = Attributes::new();
    let s = text.trim_start();
    let Some(mut rest) = s.strip_prefix('{') else { return out };
    loop {
        rest = rest.trim_start();
        if !rest.starts_with('"') {
            return out;
        }
        let mut keys = serde_json::Deserializer::from_str(rest).into_iter::<String>();
        let Some(Ok(key)) = keys.next() else { return out };
        rest = rest[keys.byte_offset()..].trim_start();
        let Some(after_colon) = rest.strip_prefix(':') else { return out };
        let after_colon = after_colon.trim_start();
        let mut values = serde_json::Deserializer::from_str(after_colon).into_iter::<Json>();
        let Some(Ok(value)) = values.next() else { return out };
        rest = after_colon[values.byte_offset()..].trim_start();
        let terminator = rest.chars().next();
        if !matches!(terminator, Some(',') | Some('}')) {
            return out;
        }
        match &value {
            Json::Object(_) | Json::Array(_) => {
                let (flat, _) = flatten_json(&value);
                for (k, v) in flat {
                    out.insert(format!("{key}.{k}"), v);
                }
            }
            scalar => {
                if let Ok(v) = AttributeValue::from_json(scalar) {
                    out.insert(key, v);
                }
            }
        }
        if terminator == Some('}') {
            return out;
        }
        rest = &rest[1..];
    }
}

/// Format tag from the file name alone.
pub fn format_of(name: &str) -> &'static str {
    let lower = name.to_ascii_lowercase();
    if lower.ends_with(".nii.gz") || lower.ends_with(".nii") {
        "nifti"
    } else if lower.ends_with(".dcm") || lower.ends_with(".ima") {
        "dicom"
    } else if [".zip", ".tar", ".tar.gz", ".tgz", ".7z"].iter().any(|e| lower.ends_with(e)) {
        "archive"
    } else if lower.ends_with(".csv") || lower.ends_with(".tsv") {
        "table"
    } else if lower.ends_with(".json") {
        "json"
    } else {
        "unknown"
    }
}

/// Default artifact type for a format tag.
pub fn type_of_format(format: &str) -> &'static str {
    match format {
        "nifti" => "nifti_image",
        "dicom" => "dicom_series",
        "archive" => "archive",
        "table" => "table",
        _ => "raw_file",
    }
}

pub struct Inspector {
    pub mapping: ScopeMapping,
    pub extractors: Vec<Box<dyn MetadataExtractor>>,
}

impl Default for Inspector {
    fn default() -> Self {
        Inspector { mapping: ScopeMapping::default(), extractors: vec![Box::new(SidecarExtractor)] }
    }
}

impl Inspector {
    pub fn with_mapping(mapping: ScopeMapping) -> Self {
        Inspector { mapping, ..Default::default() }
    }

    /// Metadata for one file via the extractor chain. With no extractor
    /// answering, the record is PARTIAL and carries only the format tag.
    pub fn extract_metadata(&self, file: &Path) -> Extraction {
        let name = file.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        let mut ex = self
            .extractors
            .iter()
            .find_map(|e| e.extract(file))
            .unwrap_or(Extraction { attributes: Attributes::new(), status: ExtractionStatus::Partial });
        ex.attributes.entry("format".into()).or_insert_with(|| AttributeValue::Text(format_of(name).into()));
        ex
    }

    /// Every regular file under `root` except sidecars, sorted by relative
    /// path. Archives are listed, never expanded.
    pub fn scan(&self, root: &Path) -> Result<Vec<FileRecord>, InspectError> {
        let io = |source| InspectError::Io { path: root.display().to_string(), source };
        let meta = fs::metadata(root).map_err(io)?;
        if !meta.is_dir() {
            return Err(io(std::io::Error::new(std::io::ErrorKind::NotADirectory, "not a directory")));
        }
        let mut files: Vec<(String, PathBuf)> = Vec::new();
        for entry in WalkDir::new(root).follow_links(false).sort_by_file_name() {
            let entry = match entry {
                Ok(e) => e,
                Err(e) if e.depth() == 0 => return Err(io(e.into())),
                Err(e) => {
                    log::warn!("skipping unreadable entry: {e}");
                    continue;
                }
            };
            if !entry.file_type().is_file() {
                continue;
            }
            let name = entry.file_name().to_string_lossy();
            if name.ends_with(SIDECAR_SUFFIX) {
                continue;
            }
            let rel = entry.path().strip_prefix(root).unwrap_or(entry.path());
            let rel: Vec<String> = rel.components().map(|c| c.as_os_str().to_string_lossy().into_owned()).collect();
            files.push((rel.join("/"), entry.into_path()));
        }
        files.sort_by(|a, b| a.0.cmp(&b.0));
        Ok(files.par_iter().map(|(rel, path)| self.record(rel, path)).collect())
    }

    fn record(&self, rel: &str, path: &Path) -> FileRecord {
        let scope = self.mapping.scope_of(rel);
        let (hash, size, readable) = match Digest::of_file(path) {
            Ok(h) => (h, fs::metadata(path).map(|m| m.len()).unwrap_or(0), true),
            Err(_) => (Digest::of(b""), 0, false),
        };
        let mut ex = if readable {
            self.extract_metadata(path)
        } else {
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            let mut attributes = Attributes::new();
            attributes.insert("format".into(), AttributeValue::Text(format_of(name).into()));
            Extraction { attributes, status: ExtractionStatus::Corrupt }
        };
        let artifact_type = match ex.attributes.remove("type") {
            Some(AttributeValue::Text(t)) if !t.is_empty() => t,
            _ => type_of_format(ex.attributes["format"].as_text().unwrap_or_default()).to_owned(),
        };
        ex.attributes.insert("extraction_status".into(), AttributeValue::Text(ex.status.name().into()));
        ex.attributes.insert("size_bytes".into(), AttributeValue::Int(size as i64));
        FileRecord {
            path: rel.to_owned(),
            scope,
            size_bytes: size,
            content_hash: hash,
            artifact_type,
            attributes: ex.attributes,
            status: ex.status,
        }
    }
}

impl FileRecord {
    pub fn to_artifact(&self) -> Result<Artifact, ContractViolation> {
        let name = self.path.rsplit('/').next().unwrap_or(&self.path);
        Artifact::root(
            self.artifact_type.clone(),
            name,
            self.scope.clone(),
            self.attributes.clone(),
            self.content_hash.clone(),
            self.path.clone(),
        )
    }
}

/// Renders the inventory table with the fixed column order.
pub fn inventory_csv(records: &[FileRecord]) -> Result<Vec<u8>, csv::Error> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(INVENTORY_COLUMNS)?;
    for r in records {
        let attr = |k: &str| r.attributes.get(k).map(AttributeValue::render_plain).unwrap_or_default();
        w.write_record([
            r.path.clone(),
            r.scope.subject.clone(),
            r.scope.session.clone().unwrap_or_default(),
            r.artifact_type.clone(),
            attr("modality"),
            attr("manufacturer"),
            attr("slice_thickness_mm"),
            attr("voxel_spacing_mm"),
            r.status.name().to_owned(),
            r.content_hash.to_string(),
        ])?;
    }
    w.into_inner().map_err(|e| csv::Error::from(e.into_error()))
}

#[derive(Clone, Debug)]
pub struct InventoryOutcome {
    /// ROOT ids in record order.
    pub file_ids: Vec<ArtifactId>,
    pub inventory_id: ArtifactId,
    /// Ids that were not registered before this call.
    pub new_ids: Vec<ArtifactId>,
}

/// Registers one ROOT artifact per record plus the dataset-level inventory
/// artifact. The CSV goes into the store and to `<workspace>/data_inventory.csv`.
pub fn build_inventory(
    registry: &Registry,
    records: &[FileRecord],
    store: &ContentStore,
    workspace: &Path,
) -> Result<InventoryOutcome, InspectError> {
    let before = registry.snapshot();
    let mut file_ids = Vec::with_capacity(records.len());
    let mut new_ids = Vec::new();
    for r in records {
        let id = registry.register(r.to_artifact()?)?;
        if !before.contains(&id) {
            new_ids.push(id.clone());
        }
        file_ids.push(id);
    }
    let bytes = inventory_csv(records)?;
    let io = |source| InspectError::Io { path: workspace.display().to_string(), source };
    let (hash, logical) = store.put_bytes(&bytes).map_err(io)?;
    crate::store::write_atomic(&workspace.join(INVENTORY_FILE), &bytes).map_err(io)?;
    let mut attrs = Attributes::new();
    attrs.insert("rows".into(), AttributeValue::Int(records.len() as i64));
    attrs.insert("format".into(), AttributeValue::Text("csv".into()));
    let inv = Artifact::root(INVENTORY_TYPE, INVENTORY_FILE, Scope::dataset(), attrs, hash, logical)?;
    let inventory_id = registry.register(inv)?;
    if !before.contains(&inventory_id) {
        new_ids.push(inventory_id.clone());
    }
    Ok(InventoryOutcome { file_ids, inventory_id, new_ids })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InspectionSummary {
    pub files: usize,
    pub subjects: usize,
    pub sessions: usize,
    pub modality_counts: BTreeMap<String, usize>,
    pub type_counts: BTreeMap<String, usize>,
    pub organization: String,
    pub prior_processing: BTreeMap<String, bool>,
    pub manufacturers: Vec<String>,
    pub slice_thickness_range: Option<(f64, f64)>,
    pub voxel_spacing_range: Option<(f64, f64)>,
    pub status_counts: BTreeMap<String, usize>,
}

impl InspectionSummary {
    pub fn to_attributes(&self) -> Attributes {
        let mut a = Attributes::new();
        let int = |n: usize| AttributeValue::Int(n as i64);
        a.insert("files".into(), int(self.files));
        a.insert("subjects".into(), int(self.subjects));
        a.insert("sessions".into(), int(self.sessions));
        for (m, n) in &self.modality_counts {
            a.insert(format!("modality.{m}"), int(*n));
        }
        for (t, n) in &self.type_counts {
            a.insert(format!("count.{t}"), int(*n));
        }
        a.insert("organization".into(), AttributeValue::Text(self.organization.clone()));
        for (t, b) in &self.prior_processing {
            a.insert(format!("prior.{t}"), AttributeValue::Bool(*b));
        }
        a.insert("manufacturers".into(), AttributeValue::Text(self.manufacturers.join(",")));
        a.insert("manufacturer_count".into(), int(self.manufacturers.len()));
        if let Some((lo, hi)) = self.slice_thickness_range {
            a.insert("slice_thickness_mm.min".into(), AttributeValue::Float(lo));
            a.insert("slice_thickness_mm.max".into(), AttributeValue::Float(hi));
        }
        if let Some((lo, hi)) = self.voxel_spacing_range {
            a.insert("voxel_spacing_mm.min".into(), AttributeValue::Float(lo));
            a.insert("voxel_spacing_mm.max".into(), AttributeValue::Float(hi));
        }
        for (s, n) in &self.status_counts {
            a.insert(format!("status.{}", s.to_ascii_lowercase()), int(*n));
        }
        a
    }
}

fn is_dataset_file(a: &Artifact) -> bool {
    a.is_root() && !a.payload_path.is_empty() && !a.payload_path.starts_with("store/")
}

fn range(values: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    values.fold(None, |acc, x| match acc {
        None => Some((x, x)),
        Some((lo, hi)) => Some((lo.min(x), hi.max(x))),
    })
}

/// Summary computed from live registry records only.
pub fn compute_summary(reg: &RegistryState) -> InspectionSummary {
    let live = reg.live_records();
    let files: Vec<&Artifact> = live.iter().map(|a| a.as_ref()).filter(|a| is_dataset_file(a)).collect();
    let mut modality_counts = BTreeMap::new();
    let mut type_counts = BTreeMap::new();
    let mut status_counts = BTreeMap::new();
    let mut subjects = BTreeSet::new();
    let mut sessions = BTreeSet::new();
    let mut layouts = BTreeSet::new();
    let mut manufacturers = BTreeSet::new();
    for a in &files {
        if let Some(m) = a.attribute("modality").and_then(AttributeValue::as_text) {
            *modality_counts.entry(m.to_owned()).or_insert(0) += 1;
        }
        if let Some(m) = a.attribute("manufacturer").and_then(AttributeValue::as_text) {
            manufacturers.insert(m.to_owned());
        }
        if let Some(s) = a.attribute("extraction_status").and_then(AttributeValue::as_text) {
            *status_counts.entry(s.to_owned()).or_insert(0) += 1;
        }
        *type_counts.entry(a.artifact_type.clone()).or_insert(0) += 1;
        if !a.scope.is_dataset() {
            subjects.insert(a.scope.subject.clone());
        }
        if a.scope.session.is_some() {
            sessions.insert(a.scope.clone());
        }
        layouts.insert(match (a.scope.is_dataset(), &a.scope.session) {
            (true, _) => "flat",
            (false, None) => "subject-nested",
            (false, Some(_)) => "subject-session-nested",
        });
    }
    let organization = match layouts.len() {
        0 => "flat".to_owned(),
        1 => layouts.into_iter().next().unwrap_or("flat").to_owned(),
        _ => "mixed".to_owned(),
    };
    let mut prior: BTreeMap<String, bool> = PROCESSED_TYPES.iter().map(|t| (t.to_string(), false)).collect();
    for a in &live {
        if !a.is_root() || (prior.contains_key(&a.artifact_type) && is_dataset_file(a)) {
            prior.insert(a.artifact_type.clone(), true);
        }
    }
    let num = |k: &'static str| files.iter().filter_map(move |a| a.attribute(k).and_then(AttributeValue::as_f64));
    InspectionSummary {
        files: files.len(),
        subjects: subjects.len(),
        sessions: sessions.len(),
        modality_counts,
        type_counts,
        organization,
        prior_processing: prior,
        manufacturers: manufacturers.into_iter().collect(),
        slice_thickness_range: range(num("slice_thickness_mm")),
        voxel_spacing_range: range(num("voxel_spacing_mm")),
        status_counts,
    }
}

/// Computes the summary and registers it as a dataset-level record.
pub fn summarize(registry: &Registry) -> Result<(InspectionSummary, ArtifactId), InspectError> {
    let summary = compute_summary(&registry.snapshot());
    let artifact = Artifact::record_only(SUMMARY_TYPE, SUMMARY_TYPE, Scope::dataset(), summary.to_attributes())?;
    let id = registry.register(artifact)?;
    Ok((summary, id))
}

#[derive(Clone, Debug)]
pub struct InspectReport {
    pub records: Vec<FileRecord>,
    pub inventory: InventoryOutcome,
    pub summary: InspectionSummary,
    pub summary_id: ArtifactId,
}

/// scan + build_inventory + summarize.
pub fn inspect_dataset(
    inspector: &Inspector,
    root: &Path,
    registry: &Registry,
    store: &ContentStore,
    workspace: &Path,
) -> Result<InspectReport, InspectError> {
    let records = inspector.scan(root)?;
    let inventory = build_inventory(registry, &records, store, workspace)?;
    let (summary, summary_id) = summarize(registry)?;
    Ok(InspectReport { records, inventory, summary, summary_id })
}
