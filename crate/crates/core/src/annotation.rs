//! Dataset ingest and detection output formats.
//!
//! * label files: one object per line, `<class> <cx> <cy> <w> <h>`
//! * class maps: `<index> <class_name>` per line, `#` comments allowed
//! * manifests: CSV with header `image_id,path,width,height,split`
//! * detections: JSONL `{image_id, class, score, box}`
//! * histograms: CSV `class,count`

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classmodel::{parse_class_name, ObjectClass, VehicleGroup, NUM_CLASSES};
use crate::geometry::{rank_cmp, BoundingBox, Detection};

#[derive(Debug, Error)]
pub enum AnnotationError {
    #[error("{path}: line {line}, column {column}: {message}")]
    Parse {
        path: String,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{path}: line {line}: coordinate {field}={value} out of range")]
    OutOfRangeCoordinate {
        path: String,
        line: usize,
        field: &'static str,
        value: f64,
    },
    #[error("{path}: line {line}: class index {index} not in class map")]
    UnknownClassIndex {
        path: String,
        line: usize,
        index: u32,
    },
    #[error("{path}: line {line}: unknown class name {name:?}")]
    UnknownClassName {
        path: String,
        line: usize,
        name: String,
    },
    #[error("{path}: line {line}: named class {name:?} requires an explicit class map")]
    NamedClassWithoutMap {
        path: String,
        line: usize,
        name: String,
    },
    #[error("invalid class map {path}: {message}")]
    ClassMap { path: String, message: String },
    #[error("invalid manifest {path}: {message}")]
    Manifest { path: String, message: String },
    #[error("{path}: row {row}: schema violation in field `{field}`: {message}")]
    SchemaViolation {
        path: String,
        row: usize,
        field: String,
        message: String,
    },
    #[error("detection for image {image_id:?} has no resolved class")]
    UnresolvedClass { image_id: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl AnnotationError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        AnnotationError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// Line-level problems that a batch build reports and skips.
    pub fn is_row_level(&self) -> bool {
        matches!(
            self,
            AnnotationError::Parse { .. }
                | AnnotationError::OutOfRangeCoordinate { .. }
                | AnnotationError::UnknownClassIndex { .. }
                | AnnotationError::UnknownClassName { .. }
        )
    }

    pub fn line(&self) -> Option<usize> {
        match self {
            AnnotationError::Parse { line, .. }
            | AnnotationError::OutOfRangeCoordinate { line, .. }
            | AnnotationError::UnknownClassIndex { line, .. }
            | AnnotationError::UnknownClassName { line, .. }
            | AnnotationError::NamedClassWithoutMap { line, .. } => Some(*line),
            _ => None,
        }
    }
}

/// How a label line referred to its class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ClassRef {
    Index(u32),
    Name(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelRow {
    /// 1-based line number in the source file.
    pub line: usize,
    pub class_ref: ClassRef,
    pub class: ObjectClass,
    pub bbox: BoundingBox,
}

/// Maps a dataset's integer class ids onto the internal taxonomy.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassMap {
    by_index: BTreeMap<u32, ObjectClass>,
    accepts_names: bool,
}

impl Default for ClassMap {
    /// Identity mapping onto the internal index; class names are not accepted.
    fn default() -> Self {
        Self {
            by_index: ObjectClass::all().map(|c| (c.index() as u32, c)).collect(),
            accepts_names: false,
        }
    }
}

impl ClassMap {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (u32, ObjectClass)>) -> Result<Self, String> {
        let mut by_index = BTreeMap::new();
        let mut seen = BTreeSet::new();
        for (idx, class) in pairs {
            if by_index.insert(idx, class).is_some() {
                return Err(format!("index {idx} listed twice"));
            }
            if !seen.insert(class) {
                return Err(format!("class {class} listed twice"));
            }
        }
        if by_index.len() != NUM_CLASSES {
            return Err(format!(
                "expected {NUM_CLASSES} classes, found {}",
                by_index.len()
            ));
        }
        Ok(Self {
            by_index,
            accepts_names: true,
        })
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self, AnnotationError> {
        let err = |message: String| AnnotationError::ClassMap {
            path: path.display().to_string(),
            message,
        };
        let mut pairs = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut tokens = line.split_whitespace();
            let (Some(idx), Some(name), None) = (tokens.next(), tokens.next(), tokens.next())
            else {
                return Err(err(format!(
                    "line {}: expected `<index> <class_name>`",
                    n + 1
                )));
            };
            let idx: u32 = idx
                .parse()
                .map_err(|_| err(format!("line {}: bad index {idx:?}", n + 1)))?;
            let class = parse_class_name(name).map_err(|e| err(format!("line {}: {e}", n + 1)))?;
            pairs.push((idx, class));
        }
        Self::from_pairs(pairs).map_err(err)
    }

    pub fn load(path: &Path) -> Result<Self, AnnotationError> {
        let text = fs::read_to_string(path).map_err(|e| AnnotationError::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn class_for_index(&self, idx: u32) -> Option<ObjectClass> {
        self.by_index.get(&idx).copied()
    }

    pub fn index_for_class(&self, class: ObjectClass) -> u32 {
        self.by_index
            .iter()
            .find(|(_, c)| **c == class)
            .map(|(i, _)| *i)
            .expect("class map covers all classes")
    }

    pub fn accepts_names(&self) -> bool {
        self.accepts_names
    }
}

/// Parses label text line by line, keeping per-line errors so callers can
/// report them without losing track of which lines were bad.
pub fn parse_label_lines(
    text: &str,
    path: &Path,
    class_map: &ClassMap,
) -> Vec<Result<LabelRow, AnnotationError>> {
    let path_str = path.display().to_string();
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_label_line(l, i + 1, &path_str, class_map))
        .collect()
}

fn parse_label_line(
    line_text: &str,
    line: usize,
    path: &str,
    class_map: &ClassMap,
) -> Result<LabelRow, AnnotationError> {
    let parse_err = |column: usize, message: String| AnnotationError::Parse {
        path: path.to_owned(),
        line,
        column,
        message,
    };
    let tokens: Vec<&str> = line_text.split_whitespace().collect();
    if tokens.len() != 5 {
        return Err(parse_err(
            tokens.len().min(5) + 1,
            format!("expected 5 fields, found {}", tokens.len()),
        ));
    }

    let (class_ref, class) = match tokens[0].parse::<u32>() {
        Ok(index) => {
            let class = class_map.class_for_index(index).ok_or_else(|| {
                AnnotationError::UnknownClassIndex {
                    path: path.to_owned(),
                    line,
                    index,
                }
            })?;
            (ClassRef::Index(index), class)
        }
        Err(_) => {
            let name = tokens[0].to_owned();
            if !class_map.accepts_names() {
                return Err(AnnotationError::NamedClassWithoutMap {
                    path: path.to_owned(),
                    line,
                    name,
                });
            }
            let class = parse_class_name(&name).map_err(|_| AnnotationError::UnknownClassName {
                path: path.to_owned(),
                line,
                name: name.clone(),
            })?;
            (ClassRef::Name(name), class)
        }
    };

    const FIELDS: [&str; 4] = ["cx", "cy", "w", "h"];
    let mut coords = [0.0f64; 4];
    for (k, tok) in tokens[1..].iter().enumerate() {
        let v: f64 = tok
            .parse()
            .map_err(|_| parse_err(k + 2, format!("not a number: {tok:?}")))?;
        let ok = if k < 2 {
            (0.0..=1.0).contains(&v)
        } else {
            v > 0.0 && v <= 1.0
        };
        if !ok {
            return Err(AnnotationError::OutOfRangeCoordinate {
                path: path.to_owned(),
                line,
                field: FIELDS[k],
                value: v,
            });
        }
        coords[k] = v;
    }
    let bbox = BoundingBox::new(coords[0], coords[1], coords[2], coords[3])
        .expect("coordinates validated above");
    Ok(LabelRow {
        line,
        class_ref,
        class,
        bbox,
    })
}

/// Strict parse: the first malformed line fails the whole file.
pub fn parse_label_file(
    path: &Path,
    class_map: &ClassMap,
) -> Result<Vec<LabelRow>, AnnotationError> {
    let text = fs::read_to_string(path).map_err(|e| AnnotationError::io(path, e))?;
    parse_label_lines(&text, path, class_map)
        .into_iter()
        .collect()
}

/// Label files in a directory, keyed by image id (file stem), `*.txt` only.
pub fn label_files(dir: &Path) -> Result<BTreeMap<String, PathBuf>, AnnotationError> {
    let mut out = BTreeMap::new();
    let entries = fs::read_dir(dir).map_err(|e| AnnotationError::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| AnnotationError::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("txt") {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.insert(stem.to_owned(), path);
        }
    }
    Ok(out)
}

/// Strictly parses every label file in `dir`.
pub fn load_label_dir(
    dir: &Path,
    class_map: &ClassMap,
) -> Result<BTreeMap<String, Vec<LabelRow>>, AnnotationError> {
    label_files(dir)?
        .into_iter()
        .map(|(id, path)| Ok((id, parse_label_file(&path, class_map)?)))
        .collect()
}

/// Parses every label file in `dir`, keeping per-line errors.
pub fn load_label_dir_lenient(
    dir: &Path,
    class_map: &ClassMap,
) -> Result<BTreeMap<String, Vec<Result<LabelRow, AnnotationError>>>, AnnotationError> {
    label_files(dir)?
        .into_iter()
        .map(|(id, path)| {
            let text = fs::read_to_string(&path).map_err(|e| AnnotationError::io(&path, e))?;
            Ok((id, parse_label_lines(&text, &path, class_map)))
        })
        .collect()
}

pub fn write_label_file(
    path: &Path,
    rows: &[(ObjectClass, BoundingBox)],
    class_map: &ClassMap,
) -> std::io::Result<()> {
    let mut text = String::new();
    for (class, b) in rows {
        let _ = writeln!(
            text,
            "{} {} {} {} {}",
            class_map.index_for_class(*class),
            b.cx,
            b.cy,
            b.w,
            b.h
        );
    }
    fs::write(path, text)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Frame {
    pub image_id: String,
    /// Resolved against the manifest's directory when loaded from disk.
    pub path: PathBuf,
    pub width: u32,
    pub height: u32,
    pub split: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DatasetManifest {
    pub frames: Vec<Frame>,
}

impl DatasetManifest {
    pub fn new(frames: Vec<Frame>) -> Result<Self, String> {
        let mut ids = BTreeSet::new();
        for f in &frames {
            if !ids.insert(f.image_id.as_str()) {
                return Err(format!("duplicate image_id {:?}", f.image_id));
            }
            if f.width == 0 || f.height == 0 {
                return Err(format!("frame {:?} has zero dimension", f.image_id));
            }
            if f.image_id.is_empty() || f.image_id.contains(['/', '\\']) {
                return Err(format!(
                    "image_id {:?} is not a valid file stem",
                    f.image_id
                ));
            }
        }
        Ok(Self { frames })
    }

    pub fn load(path: &Path) -> Result<Self, AnnotationError> {
        let err = |message: String| AnnotationError::Manifest {
            path: path.display().to_string(),
            message,
        };
        let base = path.parent().unwrap_or(Path::new("."));
        let file = fs::File::open(path).map_err(|e| AnnotationError::io(path, e))?;
        let mut reader = csv::Reader::from_reader(file);
        let mut frames = Vec::new();
        for rec in reader.deserialize::<Frame>() {
            let mut frame = rec.map_err(|e| err(e.to_string()))?;
            if frame.path.is_relative() {
                frame.path = base.join(&frame.path);
            }
            frames.push(frame);
        }
        Self::new(frames).map_err(err)
    }

    /// Writes the manifest with paths made relative to `path`'s directory
    /// where possible.
    pub fn save(&self, path: &Path) -> Result<(), AnnotationError> {
        let base = path.parent().unwrap_or(Path::new("."));
        let mut w = csv::Writer::from_path(path).map_err(|e| AnnotationError::Manifest {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        for f in &self.frames {
            let mut f = f.clone();
            if let Ok(rel) = f.path.strip_prefix(base) {
                f.path = rel.to_path_buf();
            }
            w.serialize(&f).map_err(|e| AnnotationError::Manifest {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
        }
        w.flush().map_err(|e| AnnotationError::io(path, e))
    }

    pub fn frame(&self, image_id: &str) -> Option<&Frame> {
        self.frames.iter().find(|f| f.image_id == image_id)
    }

    pub fn index(&self) -> BTreeMap<&str, &Frame> {
        self.frames
            .iter()
            .map(|f| (f.image_id.as_str(), f))
            .collect()
    }

    pub fn splits(&self) -> BTreeSet<&str> {
        self.frames.iter().map(|f| f.split.as_str()).collect()
    }
}

/// Per-class annotation counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ClassHistogram {
    pub counts: [u64; NUM_CLASSES],
}

impl ClassHistogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn count(&self, class: ObjectClass) -> u64 {
        self.counts[class.index()]
    }

    pub fn group_totals(&self) -> BTreeMap<VehicleGroup, u64> {
        VehicleGroup::ALL
            .into_iter()
            .map(|g| (g, g.members().map(|c| self.count(c)).sum()))
            .collect()
    }

    /// Largest count over smallest non-zero count; `None` without any counts.
    pub fn imbalance_ratio(&self) -> Option<f64> {
        let nonzero = self.counts.iter().copied().filter(|&c| c > 0);
        let max = nonzero.clone().max()?;
        let min = nonzero.min()?;
        Some(max as f64 / min as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,count\n");
        for c in ObjectClass::all() {
            let _ = writeln!(out, "{},{}", c, self.count(c));
        }
        out
    }

    pub fn groups_to_csv(&self) -> String {
        let mut out = String::from("group,count\n");
        for (g, n) in self.group_totals() {
            let _ = writeln!(out, "{g},{n}");
        }
        out
    }
}

pub fn class_histogram<'a>(labels: impl IntoIterator<Item = &'a LabelRow>) -> ClassHistogram {
    let mut h = ClassHistogram::default();
    for row in labels {
        h.counts[row.class.index()] += 1;
    }
    h
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DetectionRecord {
    image_id: String,
    class: ObjectClass,
    score: f64,
    #[serde(rename = "box")]
    bbox: BoundingBox,
}

/// Canonical output order: image id, then score descending, then box.
pub fn sort_detections(dets: &mut [Detection]) {
    dets.sort_by(|a, b| {
        a.image_id
            .cmp(&b.image_id)
            .then_with(|| rank_cmp(a, b))
            .then_with(|| a.object_class.cmp(&b.object_class))
    });
}

pub fn detections_to_jsonl(dets: &[Detection]) -> Result<String, AnnotationError> {
    let mut sorted = dets.to_vec();
    sort_detections(&mut sorted);
    let mut out = String::new();
    for d in &sorted {
        let class = d
            .object_class
            .ok_or_else(|| AnnotationError::UnresolvedClass {
                image_id: d.image_id.clone(),
            })?;
        let rec = DetectionRecord {
            image_id: d.image_id.clone(),
            class,
            score: d.score,
            bbox: d.bbox,
        };
        out.push_str(&serde_json::to_string(&rec).expect("detection serializes"));
        out.push('\n');
    }
    Ok(out)
}

pub fn write_detections(dets: &[Detection], path: &Path) -> Result<(), AnnotationError> {
    let text = detections_to_jsonl(dets)?;
    let file = fs::File::create(path).map_err(|e| AnnotationError::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(text.as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| AnnotationError::io(path, e))
}

pub fn read_detections(path: &Path) -> Result<Vec<Detection>, AnnotationError> {
    let file = fs::File::open(path).map_err(|e| AnnotationError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| AnnotationError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let violation = |field: &str, message: String| AnnotationError::SchemaViolation {
            path: path.display().to_string(),
            row: i + 1,
            field: field.to_owned(),
            message,
        };
        let rec: DetectionRecord =
            parse_record(&line).map_err(|(field, message)| violation(&field, message))?;
        let det = Detection::new(rec.image_id, rec.bbox, rec.score, rec.class.group())
            .map_err(|e| violation("score", e.to_string()))?
            .with_class(rec.class);
        out.push(det);
    }
    Ok(out)
}

/// Deserializes one JSON Lines record. On failure returns the offending
/// field (`<row>` when the line is not an object at all) and the message.
pub(crate) fn parse_record<T: serde::de::DeserializeOwned>(
    line: &str,
) -> Result<T, (String, String)> {
    let mut de = serde_json::Deserializer::from_str(line);
    serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let path = e.path().to_string();
        let message = e.inner().to_string();
        let field = match path.as_str() {
            "." => missing_field(&message).unwrap_or("<row>").to_owned(),
            p => p.split(['.', '[']).next().unwrap_or(p).to_owned(),
        };
        (field, message)
    })
}

fn missing_field(message: &str) -> Option<&str> {
    let rest = message.strip_prefix("missing field `")?;
    rest.split('`').next()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classmodel::{Orientation, VehicleType};

    fn parse(text: &str) -> Result<Vec<LabelRow>, AnnotationError> {
        parse_label_lines(text, Path::new("t.txt"), &ClassMap::default())
            .into_iter()
            .collect()
    }

    #[test]
    fn label_line_examples() {
        let rows = parse("0 0.5 0.5 0.2 0.1\n").unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].class_ref, ClassRef::Index(0));
        assert_eq!(rows[0].class, ObjectClass::from_index(0).unwrap());
        assert_eq!(rows[0].bbox, BoundingBox::new(0.5, 0.5, 0.2, 0.1).unwrap());

        assert!(parse("").unwrap().is_empty());
        assert!(parse("\n  \n").unwrap().is_empty());

        let err = parse("0 1.5 0.5 0.2 0.1").unwrap_err();
        assert!(matches!(
            err,
            AnnotationError::OutOfRangeCoordinate {
                line: 1,
                field: "cx",
                ..
            }
        ));
    }

    #[test]
    fn label_errors_carry_positions() {
        let err = parse("0 0.5 0.5 0.2 0.1\n\n3 0.5 abc 0.2 0.1").unwrap_err();
        assert!(matches!(
            err,
            AnnotationError::Parse {
                line: 3,
                column: 3,
                ..
            }
        ));
        let err = parse("0 0.5 0.5 0.2").unwrap_err();
        assert!(matches!(err, AnnotationError::Parse { line: 1, .. }));
        let err = parse("12 0.5 0.5 0.2 0.1").unwrap_err();
        assert!(matches!(
            err,
            AnnotationError::UnknownClassIndex { index: 12, .. }
        ));
        let err = parse("car_back 0.5 0.5 0.2 0.1").unwrap_err();
        assert!(matches!(err, AnnotationError::NamedClassWithoutMap { .. }));
    }

    #[test]
    fn lenient_parse_keeps_every_line() {
        let text = "0 0.5 0.5 0.2 0.1\nbogus\n1 0.5 0.5 0.2 2.0\n2 0.1 0.1 0.1 0.1\n";
        let rows = parse_label_lines(text, Path::new("t"), &ClassMap::default());
        assert_eq!(rows.len(), 4);
        assert_eq!(rows.iter().filter(|r| r.is_ok()).count(), 2);
        assert_eq!(rows[1].as_ref().unwrap_err().line(), Some(2));
        assert_eq!(rows[2].as_ref().unwrap_err().line(), Some(3));
    }

    #[test]
    fn class_map_remaps_and_accepts_names() {
        let mut text = String::from("# reversed numbering\n");
        for c in ObjectClass::all() {
            text.push_str(&format!("{} {}\n", 11 - c.index(), c));
        }
        let map = ClassMap::parse(&text, Path::new("m")).unwrap();
        assert_eq!(map.class_for_index(11), ObjectClass::from_index(0).ok());
        let rows: Vec<_> = parse_label_lines(
            "0 0.5 0.5 0.1 0.1\ntruck_side 0.5 0.5 0.1 0.1",
            Path::new("t"),
            &map,
        )
        .into_iter()
        .collect::<Result<_, _>>()
        .unwrap();
        assert_eq!(rows[0].class.index(), 11);
        assert_eq!(
            rows[1].class,
            ObjectClass::new(VehicleType::Truck, Orientation::Side)
        );

        assert!(ClassMap::parse("0 car_back\n", Path::new("m")).is_err());
        assert!(ClassMap::parse("0 car_back\n0 car_side\n", Path::new("m")).is_err());
    }

    #[test]
    fn histogram_examples() {
        let h = class_histogram(&[]);
        assert_eq!(h.counts, [0; NUM_CLASSES]);
        assert_eq!(h.imbalance_ratio(), None);

        let rows =
            parse("0 0.5 0.5 0.1 0.1\n0 0.5 0.5 0.1 0.1\n0 0.5 0.5 0.1 0.1\n11 0.5 0.5 0.1 0.1")
                .unwrap();
        let h = class_histogram(&rows);
        assert_eq!(h.count(ObjectClass::from_index(0).unwrap()), 3);
        assert_eq!(h.count(ObjectClass::from_index(11).unwrap()), 1);
        assert_eq!(h.total(), 4);
        let groups = h.group_totals();
        assert_eq!(groups[&VehicleGroup::Car], 3);
        assert_eq!(groups[&VehicleGroup::Motorbike], 1);
        assert_eq!(h.imbalance_ratio(), Some(3.0));

        let csv = h.to_csv();
        assert!(csv.starts_with("class,count\ncar_back,3\ncar_front,0\n"));
        assert!(csv.ends_with("cycle_side,1\n"));
        assert_eq!(csv.lines().count(), 13);
    }

    #[test]
    fn imbalance_ratio_division() {
        let mut h = ClassHistogram::default();
        h.counts[0] = 30;
        h.counts[5] = 3;
        assert_eq!(h.imbalance_ratio(), Some(10.0));
    }

    fn classed(image: &str, score: f64, cx: f64, class: usize) -> Detection {
        let c = ObjectClass::from_index(class).unwrap();
        Detection::new(
            image,
            BoundingBox::new(cx, 0.5, 0.1, 0.1).unwrap(),
            score,
            c.group(),
        )
        .unwrap()
        .with_class(c)
    }

    #[test]
    fn detections_round_trip_sorted() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");

        write_detections(&[], &path).unwrap();
        assert!(read_detections(&path).unwrap().is_empty());

        let dets = vec![
            classed("b", 0.5, 0.3, 1),
            classed("a", 0.1 + 0.2, 0.3, 7),
            classed("a", 0.9, 0.6, 3),
        ];
        write_detections(&dets, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let ids: Vec<_> = text
            .lines()
            .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap())
            .map(|v| {
                (
                    v["image_id"].as_str().unwrap().to_owned(),
                    v["score"].as_f64().unwrap(),
                )
            })
            .collect();
        assert_eq!(
            ids,
            vec![
                ("a".into(), 0.9),
                ("a".into(), 0.1 + 0.2),
                ("b".into(), 0.5)
            ]
        );
        let back = read_detections(&path).unwrap();
        let mut expected = dets.clone();
        sort_detections(&mut expected);
        assert_eq!(back, expected);
        assert_eq!(back[1].score, 0.30000000000000004);
    }

    #[test]
    fn detections_require_class() {
        let d = Detection::new(
            "a",
            BoundingBox::new(0.5, 0.5, 0.1, 0.1).unwrap(),
            0.5,
            VehicleGroup::Car,
        )
        .unwrap();
        assert!(matches!(
            detections_to_jsonl(&[d]),
            Err(AnnotationError::UnresolvedClass { .. })
        ));
    }

    #[test]
    fn read_detections_reports_schema_violations() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        fs::write(
            &path,
            "{\"image_id\":\"a\",\"class\":\"car_back\",\"score\":0.5,\"box\":{\"cx\":0.5,\"cy\":0.5,\"w\":0.1,\"h\":0.1}}\n{\"image_id\":\"a\",\"score\":0.5,\"box\":{\"cx\":0.5,\"cy\":0.5,\"w\":0.1,\"h\":0.1}}\n",
        )
        .unwrap();
        match read_detections(&path).unwrap_err() {
            AnnotationError::SchemaViolation { row, field, .. } => {
                assert_eq!(row, 2);
                assert_eq!(field, "class");
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn manifest_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.csv");
        fs::write(
            &path,
            "image_id,path,width,height,split\nf0,frames/f0.png,1920,1080,v1\nf1,/abs/f1.png,1280,720,v2\n",
        )
        .unwrap();
        let m = DatasetManifest::load(&path).unwrap();
        assert_eq!(m.frames.len(), 2);
        assert_eq!(m.frames[0].path, dir.path().join("frames/f0.png"));
        assert_eq!(m.frames[1].path, PathBuf::from("/abs/f1.png"));
        assert_eq!(m.splits().into_iter().collect::<Vec<_>>(), vec!["v1", "v2"]);

        let out = dir.path().join("copy.csv");
        m.save(&out).unwrap();
        assert_eq!(DatasetManifest::load(&out).unwrap(), m);

        fs::write(
            &path,
            "image_id,path,width,height,split\nf0,a.png,10,10,v1\nf0,b.png,10,10,v1\n",
        )
        .unwrap();
        assert!(matches!(
            DatasetManifest::load(&path),
            Err(AnnotationError::Manifest { .. })
        ));
        fs::write(
            &path,
            "image_id,path,width,height,split\nf0,a.png,0,10,v1\n",
        )
        .unwrap();
        assert!(DatasetManifest::load(&path).is_err());
    }
}
