//! Row-per-object meta-tables.
//!
//! One table type covers every stage: the training table built from labels
//! (`synthetic` rows), its style-translated copy (`translated` rows), the
//! inference table built from detector output (`real_inference` rows), and
//! merges of these. Tables are persisted as JSON Lines; crops live next to
//! the table as PNG files under `crops/<image_id>/<entry_id>.png`, referenced
//! by a path relative to the table's directory.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::{parse_record, AnnotationError, DatasetManifest, Frame, LabelRow};
use crate::backends::{translate, Translator};
use crate::classmodel::{group_of, ClassProbs, ObjectClass, VehicleGroup};
use crate::geometry::{rank_cmp, to_pixel_rect, BoundingBox, Detection};
use crate::imaging;

#[derive(Debug, Error)]
pub enum TableError {
    #[error("duplicate entry_id {0:?}")]
    DuplicateEntryId(String),
    #[error("entry {entry_id:?}: invalid `{field}`: {message}")]
    InvalidEntry {
        entry_id: String,
        field: &'static str,
        message: String,
    },
    #[error("{path}: row {row}: schema violation in field `{field}`: {message}")]
    SchemaViolation {
        path: String,
        row: usize,
        field: String,
        message: String,
    },
    #[error("entry {0:?} is not a synthetic row")]
    NotSynthetic(String),
    #[error("frame {image_id:?}: manifest says {expected:?} but image is {actual:?}")]
    FrameSizeMismatch {
        image_id: String,
        expected: (u32, u32),
        actual: (u32, u32),
    },
    #[error("image error: {0}")]
    Image(String),
    #[error(transparent)]
    Label(#[from] AnnotationError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl TableError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        TableError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceTag {
    Synthetic,
    Translated,
    RealInference,
}

impl SourceTag {
    /// Prefix of every entry_id carrying this tag.
    pub fn prefix(self) -> &'static str {
        match self {
            SourceTag::Synthetic => "syn",
            SourceTag::Translated => "cut",
            SourceTag::RealInference => "inf",
        }
    }
}

pub fn entry_id(source: SourceTag, image_id: &str, ordinal: usize) -> String {
    format!("{}-{}-{:05}", source.prefix(), image_id, ordinal)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetaEntry {
    pub entry_id: String,
    pub image_id: String,
    pub crop_ref: String,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub class_org: Option<ObjectClass>,
    pub group: VehicleGroup,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detector_score: Option<f64>,
    pub source: SourceTag,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub predicted_class: Option<ObjectClass>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub predicted_probs: Option<ClassProbs>,
}

impl MetaEntry {
    /// The entry_id without its source prefix. A translated row shares this
    /// key with the synthetic row it was produced from.
    pub fn lineage_key(&self) -> &str {
        self.entry_id
            .split_once('-')
            .map(|(_, rest)| rest)
            .unwrap_or(&self.entry_id)
    }

    pub fn validate(&self) -> Result<(), TableError> {
        let invalid = |field: &'static str, message: String| TableError::InvalidEntry {
            entry_id: self.entry_id.clone(),
            field,
            message,
        };
        if !self
            .entry_id
            .starts_with(&format!("{}-", self.source.prefix()))
        {
            return Err(invalid(
                "entry_id",
                format!("must start with `{}-`", self.source.prefix()),
            ));
        }
        match self.source {
            SourceTag::Synthetic | SourceTag::Translated => {
                let class = self
                    .class_org
                    .ok_or_else(|| invalid("class_org", "required for training rows".into()))?;
                if self.group != group_of(class) {
                    return Err(invalid(
                        "group",
                        format!("{} does not match class {class}", self.group),
                    ));
                }
            }
            SourceTag::RealInference => {
                if self.class_org.is_some() {
                    return Err(invalid(
                        "class_org",
                        "must be absent for inference rows".into(),
                    ));
                }
                if self.detector_score.is_none() {
                    return Err(invalid(
                        "detector_score",
                        "required for inference rows".into(),
                    ));
                }
            }
        }
        if let Some(s) = self.detector_score {
            if !(0.0..=1.0).contains(&s) {
                return Err(invalid("detector_score", format!("{s} outside [0,1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEntry {
    entry_id: Option<String>,
    image_id: Option<String>,
    crop_ref: Option<String>,
    #[serde(rename = "box")]
    bbox: Option<BoundingBox>,
    class_org: Option<ObjectClass>,
    group: Option<VehicleGroup>,
    detector_score: Option<f64>,
    source: Option<SourceTag>,
    predicted_class: Option<ObjectClass>,
    predicted_probs: Option<ClassProbs>,
}

/// An ordered, id-unique collection of entries plus free-text lineage notes.
///
/// Entries are always kept in `(image_id, entry_id)` order, so two equal
/// tables serialize to identical bytes.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetaTable {
    entries: Vec<MetaEntry>,
    pub provenance: Vec<String>,
}

impl MetaTable {
    pub fn new(mut entries: Vec<MetaEntry>, provenance: Vec<String>) -> Result<Self, TableError> {
        for e in &entries {
            e.validate()?;
        }
        entries.sort_by(|a, b| {
            a.image_id
                .cmp(&b.image_id)
                .then_with(|| a.entry_id.cmp(&b.entry_id))
        });
        let mut seen = BTreeSet::new();
        for e in &entries {
            if !seen.insert(e.entry_id.as_str()) {
                return Err(TableError::DuplicateEntryId(e.entry_id.clone()));
            }
        }
        Ok(Self {
            entries,
            provenance,
        })
    }

    pub fn entries(&self) -> &[MetaEntry] {
        &self.entries
    }

    pub fn into_entries(self) -> Vec<MetaEntry> {
        self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, entry_id: &str) -> Option<&MetaEntry> {
        self.entries.iter().find(|e| e.entry_id == entry_id)
    }

    pub fn by_lineage(&self) -> BTreeMap<&str, Vec<&MetaEntry>> {
        let mut out: BTreeMap<&str, Vec<&MetaEntry>> = BTreeMap::new();
        for e in &self.entries {
            out.entry(e.lineage_key()).or_default().push(e);
        }
        out
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("entry serializes"));
            out.push('\n');
        }
        out
    }
}

/// A row skipped during a table build, written to the rejection report.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    /// Label line number, when the row came from a label file.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub row: Option<usize>,
    pub image_id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub entry_id: Option<String>,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableBuild {
    pub table: MetaTable,
    pub rejections: Vec<Rejection>,
}

pub fn rejections_to_jsonl(rejections: &[Rejection]) -> String {
    rejections
        .iter()
        .map(|r| serde_json::to_string(r).expect("rejection serializes") + "\n")
        .collect()
}

fn crop_ref_for(image_id: &str, entry_id: &str) -> String {
    format!("crops/{image_id}/{entry_id}.png")
}

fn load_frame(frame: &Frame) -> Result<image::RgbImage, TableError> {
    let img = imaging::load_rgb(&frame.path).map_err(TableError::Image)?;
    if img.dimensions() != (frame.width, frame.height) {
        return Err(TableError::FrameSizeMismatch {
            image_id: frame.image_id.clone(),
            expected: (frame.width, frame.height),
            actual: img.dimensions(),
        });
    }
    Ok(img)
}

struct PendingCrop {
    image_id: String,
    entry: MetaEntry,
    row: Option<usize>,
}

/// Crops every pending entry out of its frame, frames in parallel. Entries
/// whose box collapses to nothing are turned into rejections.
type CropRows = (Vec<MetaEntry>, Vec<Rejection>);

fn write_crops(
    manifest: &DatasetManifest,
    pending: Vec<PendingCrop>,
    out_dir: &Path,
) -> Result<CropRows, TableError> {
    let mut by_frame: BTreeMap<String, Vec<PendingCrop>> = BTreeMap::new();
    for p in pending {
        by_frame.entry(p.image_id.clone()).or_default().push(p);
    }
    let frames = manifest.index();
    let results: Vec<Result<CropRows, TableError>> = by_frame
        .into_par_iter()
        .map(|(image_id, items)| {
            let frame = frames[image_id.as_str()];
            let img = load_frame(frame)?;
            let mut entries = Vec::new();
            let mut rejections = Vec::new();
            for item in items {
                match to_pixel_rect(&item.entry.bbox, frame.width, frame.height) {
                    Ok(rect) => {
                        let crop = imaging::crop(&img, &rect);
                        imaging::save_png(&crop, &out_dir.join(&item.entry.crop_ref))
                            .map_err(TableError::Image)?;
                        entries.push(item.entry);
                    }
                    Err(e) => rejections.push(Rejection {
                        row: item.row,
                        image_id: image_id.clone(),
                        entry_id: Some(item.entry.entry_id),
                        reason: format!("DegenerateBox: {e}"),
                    }),
                }
            }
            Ok((entries, rejections))
        })
        .collect();

    let mut entries = Vec::new();
    let mut rejections = Vec::new();
    for r in results {
        let (e, rj) = r?;
        entries.extend(e);
        rejections.extend(rj);
    }
    Ok((entries, rejections))
}

fn sort_rejections(r: &mut [Rejection]) {
    r.sort_by(|a, b| {
        (a.image_id.as_str(), a.row, a.entry_id.as_deref()).cmp(&(
            b.image_id.as_str(),
            b.row,
            b.entry_id.as_deref(),
        ))
    });
}

/// Builds the training table: one `synthetic` row per valid label line, with
/// the object cropped out of its frame into `out_dir`.
///
/// `labels` holds the per-line parse results of each image's label file.
/// Malformed lines, labels for frames missing from the manifest and boxes
/// that collapse to zero pixels are reported as rejections.
pub fn build_training_table(
    manifest: &DatasetManifest,
    labels: &BTreeMap<String, Vec<Result<LabelRow, AnnotationError>>>,
    out_dir: &Path,
) -> Result<TableBuild, TableError> {
    let frames = manifest.index();
    let mut pending = Vec::new();
    let mut rejections = Vec::new();

    for (image_id, rows) in labels {
        let has_frame = frames.contains_key(image_id.as_str());
        for row in rows {
            let row = match row {
                Ok(row) => row,
                Err(AnnotationError::NamedClassWithoutMap { path, line, name }) => {
                    return Err(TableError::Label(AnnotationError::NamedClassWithoutMap {
                        path: path.clone(),
                        line: *line,
                        name: name.clone(),
                    }));
                }
                Err(e) => {
                    rejections.push(Rejection {
                        row: e.line(),
                        image_id: image_id.clone(),
                        entry_id: None,
                        reason: e.to_string(),
                    });
                    continue;
                }
            };
            if !has_frame {
                rejections.push(Rejection {
                    row: Some(row.line),
                    image_id: image_id.clone(),
                    entry_id: None,
                    reason: format!("MissingFrame: no manifest frame {image_id:?}"),
                });
                continue;
            }
            let id = entry_id(SourceTag::Synthetic, image_id, row.line);
            pending.push(PendingCrop {
                image_id: image_id.clone(),
                row: Some(row.line),
                entry: MetaEntry {
                    crop_ref: crop_ref_for(image_id, &id),
                    entry_id: id,
                    image_id: image_id.clone(),
                    bbox: row.bbox,
                    class_org: Some(row.class),
                    group: group_of(row.class),
                    detector_score: None,
                    source: SourceTag::Synthetic,
                    predicted_class: None,
                    predicted_probs: None,
                },
            });
        }
    }

    let (entries, crop_rejections) = write_crops(manifest, pending, out_dir)?;
    rejections.extend(crop_rejections);
    sort_rejections(&mut rejections);
    let table = MetaTable::new(
        entries,
        vec![format!(
            "training table from {} frames",
            manifest.frames.len()
        )],
    )?;
    Ok(TableBuild { table, rejections })
}

/// Builds the inference table from merged detector output: one
/// `real_inference` row per detection, carrying only the detector group.
pub fn build_inference_table(
    manifest: &DatasetManifest,
    detections: &[Detection],
    out_dir: &Path,
) -> Result<TableBuild, TableError> {
    let frames = manifest.index();
    let mut per_image: BTreeMap<&str, Vec<&Detection>> = BTreeMap::new();
    for d in detections {
        per_image.entry(d.image_id.as_str()).or_default().push(d);
    }

    let mut pending = Vec::new();
    let mut rejections = Vec::new();
    for (image_id, mut dets) in per_image {
        if !frames.contains_key(image_id) {
            rejections.extend(dets.iter().map(|_| Rejection {
                row: None,
                image_id: image_id.to_owned(),
                entry_id: None,
                reason: format!("MissingFrame: no manifest frame {image_id:?}"),
            }));
            continue;
        }
        dets.sort_by(|a, b| a.group.cmp(&b.group).then_with(|| rank_cmp(a, b)));
        for (ordinal, d) in dets.into_iter().enumerate() {
            let id = entry_id(SourceTag::RealInference, image_id, ordinal);
            pending.push(PendingCrop {
                image_id: image_id.to_owned(),
                row: None,
                entry: MetaEntry {
                    crop_ref: crop_ref_for(image_id, &id),
                    entry_id: id,
                    image_id: image_id.to_owned(),
                    bbox: d.bbox,
                    class_org: None,
                    group: d.group,
                    detector_score: Some(d.score),
                    source: SourceTag::RealInference,
                    predicted_class: None,
                    predicted_probs: None,
                },
            });
        }
    }

    let (entries, crop_rejections) = write_crops(manifest, pending, out_dir)?;
    rejections.extend(crop_rejections);
    sort_rejections(&mut rejections);
    let table = MetaTable::new(
        entries,
        vec![format!(
            "inference table from {} detections",
            detections.len()
        )],
    )?;
    Ok(TableBuild { table, rejections })
}

/// Runs every crop of a synthetic table through `translator`, producing the
/// `translated` table. Class, group and box are copied from the source row;
/// only the crop changes. Rows whose translation fails are reported and left
/// out.
pub fn build_translated_table(
    table: &MetaTable,
    table_dir: &Path,
    translator: &mut dyn Translator,
    out_dir: &Path,
) -> Result<TableBuild, TableError> {
    if let Some(e) = table
        .entries()
        .iter()
        .find(|e| e.source != SourceTag::Synthetic)
    {
        return Err(TableError::NotSynthetic(e.entry_id.clone()));
    }
    let mut entries = Vec::with_capacity(table.len());
    let mut rejections = Vec::new();
    for src in table.entries() {
        let id = format!("{}-{}", SourceTag::Translated.prefix(), src.lineage_key());
        let crop_ref = crop_ref_for(&src.image_id, &id);
        let input = table_dir.join(&src.crop_ref);
        let output = out_dir.join(&crop_ref);
        if let Some(parent) = output.parent() {
            fs::create_dir_all(parent).map_err(|e| TableError::io(parent, e))?;
        }
        match translate(translator, &input, &output) {
            Ok(()) => entries.push(MetaEntry {
                entry_id: id,
                crop_ref,
                source: SourceTag::Translated,
                ..src.clone()
            }),
            Err(e) => rejections.push(Rejection {
                row: None,
                image_id: src.image_id.clone(),
                entry_id: Some(src.entry_id.clone()),
                reason: e.to_string(),
            }),
        }
    }
    let mut provenance = table.provenance.clone();
    provenance.push(format!(
        "translated by {} ({} of {} rows)",
        translator.descriptor().name,
        entries.len(),
        table.len()
    ));
    Ok(TableBuild {
        table: MetaTable::new(entries, provenance)?,
        rejections,
    })
}

/// Union of two tables with disjoint entry ids. Provenance notes are merged
/// as a sorted set so the result does not depend on argument order.
pub fn merge_tables(a: &MetaTable, b: &MetaTable) -> Result<MetaTable, TableError> {
    let entries = a.entries.iter().chain(&b.entries).cloned().collect();
    let provenance: BTreeSet<String> = a.provenance.iter().chain(&b.provenance).cloned().collect();
    MetaTable::new(entries, provenance.into_iter().collect())
}

pub fn provenance_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".provenance");
    PathBuf::from(s)
}

/// Writes the table as JSON Lines plus a `<path>.provenance` sidecar.
pub fn save_table(table: &MetaTable, path: &Path) -> Result<(), TableError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| TableError::io(parent, e))?;
    }
    fs::write(path, table.to_jsonl()).map_err(|e| TableError::io(path, e))?;
    let prov_path = provenance_path(path);
    let mut f = fs::File::create(&prov_path).map_err(|e| TableError::io(&prov_path, e))?;
    for note in &table.provenance {
        writeln!(f, "{}", note.replace('\n', " ")).map_err(|e| TableError::io(&prov_path, e))?;
    }
    Ok(())
}

pub fn load_table(path: &Path) -> Result<MetaTable, TableError> {
    let file = fs::File::open(path).map_err(|e| TableError::io(path, e))?;
    let path_str = path.display().to_string();
    let mut entries = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| TableError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let violation = |field: &str, message: String| TableError::SchemaViolation {
            path: path_str.clone(),
            row: i + 1,
            field: field.to_owned(),
            message,
        };
        let raw: RawEntry =
            parse_record(&line).map_err(|(field, message)| violation(&field, message))?;
        let missing = |field: &str| violation(field, "missing required field".into());
        let entry = MetaEntry {
            entry_id: raw.entry_id.ok_or_else(|| missing("entry_id"))?,
            image_id: raw.image_id.ok_or_else(|| missing("image_id"))?,
            crop_ref: raw.crop_ref.ok_or_else(|| missing("crop_ref"))?,
            bbox: raw.bbox.ok_or_else(|| missing("box"))?,
            class_org: raw.class_org,
            group: raw.group.ok_or_else(|| missing("group"))?,
            detector_score: raw.detector_score,
            source: raw.source.ok_or_else(|| missing("source"))?,
            predicted_class: raw.predicted_class,
            predicted_probs: raw.predicted_probs,
        };
        entry.validate().map_err(|e| match e {
            TableError::InvalidEntry { field, message, .. } => violation(field, message),
            other => other,
        })?;
        entries.push(entry);
    }

    let prov_path = provenance_path(path);
    let provenance = match fs::read_to_string(&prov_path) {
        Ok(text) => text.lines().map(str::to_owned).collect(),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
        Err(e) => return Err(TableError::io(&prov_path, e)),
    };
    MetaTable::new(entries, provenance)
}
