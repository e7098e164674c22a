//! On-disk formats. Every JSON document carries a `schema` id and a `version`;
//! JSON Lines files carry both in their first record. Unknown versions are
//! rejected. Writes go to a temporary file in the target directory and are
//! renamed into place.

mod dataset;
mod outputs;

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::appearance::FeatureMatrix;
use crate::error::{Error, Result};

pub use dataset::{
    load_annotations, load_label_map, load_pose, load_proposals, write_annotations, write_label_map, write_pose,
    write_proposals, AnnotationBox, Dataset, ImageEntry, ImageGroundTruth, LabelMapFile, Manifest, PoseFile, Split,
};
pub use outputs::{
    read_appearance_models, read_detections, read_metrics, read_patches, read_priors, write_appearance_models,
    write_curves_csv, write_detections, write_metrics, write_patches, write_priors, write_proposal_stats,
    AppearanceModelFile, ClassMetrics, DetectionsHeader, MetricsReport, PatchManifest, PriorModelFile,
    ProposalStatsReport, METRICS_SCHEMA_JSON,
};

pub const FORMAT_VERSION: u64 = 1;

pub mod schema {
    pub const MANIFEST: &str = "posedet.manifest";
    pub const POSE: &str = "posedet.pose";
    pub const ANNOTATIONS: &str = "posedet.annotations";
    pub const LABEL_MAP: &str = "posedet.labelmap";
    pub const PROPOSALS: &str = "posedet.proposals";
    pub const FEATURE_INDEX: &str = "posedet.feature_index";
    pub const PATCHES: &str = "posedet.patches";
    pub const PRIORS: &str = "posedet.priors";
    pub const APPEARANCE: &str = "posedet.appearance";
    pub const DETECTIONS: &str = "posedet.detections";
    pub const METRICS: &str = "posedet.metrics";
    pub const PROPOSAL_STATS: &str = "posedet.proposal_stats";
    pub const SYNTH: &str = "posedet.synth";
}

/// Writes `bytes` to `path` through a temporary sibling file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct EnvelopeOut<'a, T> {
    schema: &'a str,
    version: u64,
    #[serde(flatten)]
    body: &'a T,
}

fn to_json_line<T: Serialize>(value: &T, path: &Path) -> Result<String> {
    serde_json::to_string(value).map_err(|e| Error::format(path, e.to_string()))
}

/// Pretty JSON with a trailing newline, wrapped in the schema envelope.
pub fn write_versioned<T: Serialize>(path: &Path, schema: &str, body: &T) -> Result<()> {
    let env = EnvelopeOut { schema, version: FORMAT_VERSION, body };
    let mut text = serde_json::to_string_pretty(&env).map_err(|e| Error::format(path, e.to_string()))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn check_envelope(value: &mut Value, schema: &str, path: &Path) -> Result<()> {
    let obj = value.as_object_mut().ok_or_else(|| Error::format(path, "expected a JSON object"))?;
    let found_schema = obj.remove("schema");
    match found_schema.as_ref().and_then(Value::as_str) {
        Some(s) if s == schema => {}
        Some(s) => return Err(Error::format(path, format!("expected schema `{schema}`, found `{s}`"))),
        None => return Err(Error::format(path, format!("missing `schema` field (expected `{schema}`)"))),
    }
    let version = obj.remove("version").ok_or_else(|| Error::format(path, "missing `version` field"))?;
    let found = version.as_u64().ok_or_else(|| Error::format(path, "`version` must be a non-negative integer"))?;
    if found != FORMAT_VERSION {
        return Err(Error::Version { path: path.to_path_buf(), schema: schema.to_string(), found, expected: FORMAT_VERSION });
    }
    Ok(())
}

fn from_value<T: DeserializeOwned>(value: Value, path: &Path) -> Result<T> {
    serde_json::from_value(value).map_err(|e| Error::format(path, e.to_string()))
}

pub fn parse_versioned<T: DeserializeOwned>(text: &str, schema: &str, path: &Path) -> Result<T> {
    let mut value: Value = serde_json::from_str(text).map_err(|e| Error::format(path, e.to_string()))?;
    check_envelope(&mut value, schema, path)?;
    from_value(value, path)
}

pub fn read_versioned<T: DeserializeOwned>(path: &Path, schema: &str) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_versioned(&text, schema, path)
}

/// JSON Lines: a header record with the schema envelope, then one record per line.
pub fn write_jsonl<H: Serialize, R: Serialize>(path: &Path, schema: &str, header: &H, records: &[R]) -> Result<()> {
    let mut out = to_json_line(&EnvelopeOut { schema, version: FORMAT_VERSION, body: header }, path)?;
    out.push('\n');
    for r in records {
        out.push_str(&to_json_line(r, path)?);
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

pub fn read_jsonl<H: DeserializeOwned, R: DeserializeOwned>(path: &Path, schema: &str) -> Result<(H, Vec<R>)> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines().enumerate();
    let header = loop {
        match lines.next() {
            None => return Err(Error::format(path, "empty file: missing header record")),
            Some((_, line)) => {
                let line = line.map_err(|e| Error::io(path, e))?;
                if !line.trim().is_empty() {
                    break line;
                }
            }
        }
    };
    let header: H = parse_versioned(&header, schema, path)?;
    let mut records = Vec::new();
    for (i, line) in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))?;
        records.push(rec);
    }
    Ok((header, records))
}

/// Sidecar row index of a feature file: which box each row belongs to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureRow {
    pub image_id: String,
    pub box_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureIndex {
    pub rows: Vec<FeatureRow>,
}

pub fn feature_index_path(features: &Path) -> PathBuf {
    let mut name = features.as_os_str().to_owned();
    name.push(".index.json");
    PathBuf::from(name)
}

/// Reads a feature matrix and its sidecar index, checking they agree.
pub fn read_features(path: &Path) -> Result<(FeatureMatrix, FeatureIndex)> {
    let matrix = FeatureMatrix::from_bytes(&read_bytes(path)?, path)?;
    let index_path = feature_index_path(path);
    let index: FeatureIndex = read_versioned(&index_path, schema::FEATURE_INDEX)?;
    if index.rows.len() != matrix.rows() {
        return Err(Error::format(
            &index_path,
            format!("index lists {} rows but the feature file has {}", index.rows.len(), matrix.rows()),
        ));
    }
    Ok((matrix, index))
}

pub fn write_features(path: &Path, matrix: &FeatureMatrix, index: &FeatureIndex) -> Result<()> {
    if index.rows.len() != matrix.rows() {
        return Err(Error::validation(format!(
            "feature index has {} rows but the matrix has {}",
            index.rows.len(),
            matrix.rows()
        )));
    }
    write_atomic(path, &matrix.to_bytes())?;
    write_versioned(&feature_index_path(path), schema::FEATURE_INDEX, index)
}

pub fn read_config(path: &Path) -> Result<crate::config::PipelineConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let cfg: crate::config::PipelineConfig = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}
