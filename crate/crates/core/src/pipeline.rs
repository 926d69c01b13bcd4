//! End-to-end orchestration: table build, translation, per-group detection,
//! crop classification by an ensemble, and emission of final detections.
//!
//! Backends are called one request at a time. Everything that reaches an
//! output file is canonically sorted, so a rerun over the same inputs with
//! the same seed writes the same bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::annotation::{sort_detections, AnnotationError, DatasetManifest, Frame, LabelRow};
use crate::backends::{
    classify, detect, BackendError, Classifier, Detector, DetectorRequest, Translator,
};
use crate::classmodel::{ClassProbs, ObjectClass, VehicleGroup, NUM_CLASSES};
use crate::geometry::{nms, Detection};
use crate::metatable::{
    build_inference_table, build_training_table, build_translated_table, merge_tables, MetaTable,
    Rejection, TableError,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid pipeline config: {0}")]
    Config(String),
    #[error("ensemble mismatch: config expects {expected} classifiers, got {actual}")]
    EnsembleMismatch { expected: usize, actual: usize },
    #[error("row {0:?} has no predicted class")]
    UnclassifiedRow(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Table(#[from] TableError),
    #[error(transparent)]
    Annotation(#[from] AnnotationError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinalScoreRule {
    /// Max of the ensemble's mean probabilities.
    ClassifierProb,
    /// Detector score times max mean probability.
    DetectorTimesClassifier,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub nms_iou: f64,
    pub detector_score_floor: f64,
    pub ensemble_size: usize,
    pub final_score_rule: FinalScoreRule,
    pub seed: u64,
    /// Let boxes of one group suppress boxes of the other.
    pub cross_group_nms: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            nms_iou: crate::geometry::DEFAULT_NMS_IOU,
            detector_score_floor: crate::backends::DEFAULT_SCORE_FLOOR,
            ensemble_size: 5,
            final_score_rule: FinalScoreRule::DetectorTimesClassifier,
            seed: 0,
            cross_group_nms: false,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        for (name, v) in [
            ("nms_iou", self.nms_iou),
            ("detector_score_floor", self.detector_score_floor),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(PipelineError::Config(format!("{name} = {v} outside [0,1]")));
            }
        }
        if self.ensemble_size == 0 {
            return Err(PipelineError::Config(
                "ensemble_size must be at least 1".into(),
            ));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Hex sha256 of a value's compact JSON.
pub fn content_hash(value: &impl Serialize) -> String {
    let json = serde_json::to_vec(value).expect("value serializes");
    hex::encode(Sha256::digest(&json))
}

pub fn config_hash(cfg: &PipelineConfig) -> String {
    content_hash(cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnsembleResult {
    pub mean_probs: ClassProbs,
    pub predicted: ObjectClass,
    pub member_count: usize,
}

/// Arithmetic mean of the members' distributions; argmax breaks ties toward
/// the lowest class index.
///
/// Each class's values are summed in sorted order, so the result is
/// bit-identical under any reordering of `members`.
pub fn ensemble_mean(members: &[ClassProbs]) -> Result<EnsembleResult, PipelineError> {
    if members.is_empty() {
        return Err(PipelineError::EnsembleMismatch {
            expected: 1,
            actual: 0,
        });
    }
    let n = members.len() as f64;
    let mut mean = [0.0; NUM_CLASSES];
    let mut column = Vec::with_capacity(members.len());
    for (k, slot) in mean.iter_mut().enumerate() {
        column.clear();
        column.extend(members.iter().map(|m| m.as_slice()[k]));
        column.sort_by(f64::total_cmp);
        *slot = column.iter().sum::<f64>() / n;
    }
    let mean_probs = ClassProbs::new(&mean)
        .map_err(|e| PipelineError::Backend(BackendError::Failure(e.to_string())))?;
    Ok(EnsembleResult {
        predicted: mean_probs.argmax(),
        mean_probs,
        member_count: members.len(),
    })
}

/// A per-frame or per-row problem that did not stop the run.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Failure {
    pub stage: String,
    pub image_id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub entry_id: Option<String>,
    pub reason: String,
}

impl Failure {
    fn from_rejection(stage: &str, r: &Rejection) -> Self {
        Self {
            stage: stage.to_owned(),
            image_id: r.image_id.clone(),
            entry_id: r.entry_id.clone(),
            reason: r.reason.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionStage {
    /// Merged detections, sorted by image then rank.
    pub detections: Vec<Detection>,
    pub raw_count: usize,
    pub failures: Vec<Failure>,
}

fn check_serves(det: &dyn Detector, group: VehicleGroup) -> Result<(), PipelineError> {
    match det.descriptor().group()? {
        Some(g) if g != group => Err(PipelineError::Config(format!(
            "detector {:?} serves {g} but is wired as the {group} detector",
            det.descriptor().name
        ))),
        _ => Ok(()),
    }
}

fn detect_group(
    det: &mut dyn Detector,
    frame: &Frame,
    group: VehicleGroup,
    cfg: &PipelineConfig,
    stage: &mut DetectionStage,
) -> Vec<Detection> {
    let request = DetectorRequest {
        image_id: frame.image_id.clone(),
        image_path: frame.path.clone(),
        group,
    };
    let boxes = match detect(det, &request) {
        Ok(b) => b,
        Err(e) => {
            stage.failures.push(Failure {
                stage: "detect".into(),
                image_id: frame.image_id.clone(),
                entry_id: None,
                reason: format!("{group}: {e}"),
            });
            return Vec::new();
        }
    };
    stage.raw_count += boxes.len();
    let floored: Vec<Detection> = boxes
        .into_iter()
        .filter(|b| b.score >= cfg.detector_score_floor)
        .map(|b| {
            Detection::new(&frame.image_id, b.bbox, b.score, group)
                .expect("score checked by detect")
        })
        .collect();
    if cfg.cross_group_nms {
        floored
    } else {
        nms(&floored, cfg.nms_iou)
    }
}

/// Runs both group detectors over every frame and merges their output: score
/// floor first, then NMS within each group (or across groups when
/// `cross_group_nms` is set).
pub fn run_group_detectors(
    manifest: &DatasetManifest,
    det_car: &mut dyn Detector,
    det_moto: &mut dyn Detector,
    cfg: &PipelineConfig,
) -> Result<DetectionStage, PipelineError> {
    cfg.validate()?;
    check_serves(det_car, VehicleGroup::Car)?;
    check_serves(det_moto, VehicleGroup::Motorbike)?;

    let mut stage = DetectionStage {
        detections: Vec::new(),
        raw_count: 0,
        failures: Vec::new(),
    };
    for frame in &manifest.frames {
        let mut kept = detect_group(det_car, frame, VehicleGroup::Car, cfg, &mut stage);
        kept.extend(detect_group(
            det_moto,
            frame,
            VehicleGroup::Motorbike,
            cfg,
            &mut stage,
        ));
        if cfg.cross_group_nms {
            kept = nms(&kept, cfg.nms_iou);
        }
        stage.detections.extend(kept);
    }
    sort_detections(&mut stage.detections);
    stage.failures.sort();
    Ok(stage)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifyStage {
    pub table: MetaTable,
    pub failures: Vec<Failure>,
}

/// Classifies every row's crop with each ensemble member and stores the mean
/// distribution and its argmax. A row where any member fails stays
/// unclassified and is reported.
pub fn classify_table(
    table: &MetaTable,
    table_dir: &Path,
    classifiers: &mut [Box<dyn Classifier + Send>],
    cfg: &PipelineConfig,
) -> Result<ClassifyStage, PipelineError> {
    cfg.validate()?;
    if classifiers.len() != cfg.ensemble_size {
        return Err(PipelineError::EnsembleMismatch {
            expected: cfg.ensemble_size,
            actual: classifiers.len(),
        });
    }
    let mut entries = Vec::with_capacity(table.len());
    let mut failures = Vec::new();
    for entry in table.entries() {
        let crop = table_dir.join(&entry.crop_ref);
        let members: Result<Vec<ClassProbs>, BackendError> = classifiers
            .iter_mut()
            .map(|c| classify(c.as_mut(), &crop))
            .collect();
        let mut entry = entry.clone();
        match members
            .map_err(PipelineError::from)
            .and_then(|m| ensemble_mean(&m))
        {
            Ok(res) => {
                entry.predicted_class = Some(res.predicted);
                entry.predicted_probs = Some(res.mean_probs);
            }
            Err(e) => failures.push(Failure {
                stage: "classify".into(),
                image_id: entry.image_id.clone(),
                entry_id: Some(entry.entry_id.clone()),
                reason: e.to_string(),
            }),
        }
        entries.push(entry);
    }
    let mut provenance = table.provenance.clone();
    provenance.push(format!(
        "classified by a {}-member ensemble",
        classifiers.len()
    ));
    Ok(ClassifyStage {
        table: MetaTable::new(entries, provenance)?,
        failures,
    })
}

/// One detection per classified row, classed by the prediction and grouped
/// by the predicted class. Rows without a detector score count as 1.0.
pub fn emit_detections(
    table: &MetaTable,
    cfg: &PipelineConfig,
) -> Result<Vec<Detection>, PipelineError> {
    let mut out = Vec::with_capacity(table.len());
    for e in table.entries() {
        let (Some(class), Some(probs)) = (e.predicted_class, e.predicted_probs.as_ref()) else {
            return Err(PipelineError::UnclassifiedRow(e.entry_id.clone()));
        };
        let score = match cfg.final_score_rule {
            FinalScoreRule::ClassifierProb => probs.max(),
            FinalScoreRule::DetectorTimesClassifier => {
                e.detector_score.unwrap_or(1.0) * probs.max()
            }
        };
        let det = Detection::new(&e.image_id, e.bbox, score.clamp(0.0, 1.0), class.group())
            .expect("score clamped")
            .with_class(class);
        out.push(det);
    }
    sort_detections(&mut out);
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct StageCounts {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub training_rows: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub translated_rows: Option<usize>,
    pub frames: usize,
    pub raw_detections: usize,
    pub post_nms: usize,
    pub table_rows: usize,
    pub classified: usize,
    pub emitted: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub seed: u64,
    pub config_hash: String,
    pub config: PipelineConfig,
    pub counts: StageCounts,
    pub failures: Vec<Failure>,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

pub struct Backends {
    pub det_car: Box<dyn Detector + Send>,
    pub det_moto: Box<dyn Detector + Send>,
    pub classifiers: Vec<Box<dyn Classifier + Send>>,
    pub translator: Option<Box<dyn Translator + Send>>,
}

/// Labelled frames for the table-building half of the run.
pub struct TrainingInput<'a> {
    pub manifest: &'a DatasetManifest,
    pub labels: &'a BTreeMap<String, Vec<Result<LabelRow, AnnotationError>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    /// Synthetic rows merged with their translations, when training input
    /// was given.
    pub training_table: Option<MetaTable>,
    pub inference_table: MetaTable,
    pub detections: Vec<Detection>,
    pub report: RunReport,
}

/// Runs all four steps. Tables and crops are written below `work_dir`
/// (`training/`, `translated/`, `inference/`). Per-row problems end up in the
/// report; only configuration errors abort.
pub fn run_end_to_end(
    inference: &DatasetManifest,
    training: Option<TrainingInput<'_>>,
    backends: &mut Backends,
    cfg: &PipelineConfig,
    work_dir: &Path,
) -> Result<RunOutput, PipelineError> {
    cfg.validate()?;
    if backends.classifiers.len() != cfg.ensemble_size {
        return Err(PipelineError::EnsembleMismatch {
            expected: cfg.ensemble_size,
            actual: backends.classifiers.len(),
        });
    }
    let mut counts = StageCounts::default();
    let mut failures = Vec::new();

    let training_table = match training {
        None => None,
        Some(t) => {
            let built = build_training_table(t.manifest, t.labels, &work_dir.join("training"))?;
            failures.extend(
                built
                    .rejections
                    .iter()
                    .map(|r| Failure::from_rejection("build_table", r)),
            );
            counts.training_rows = Some(built.table.len());
            let mut table = built.table;
            if let Some(tr) = backends.translator.as_deref_mut() {
                let cut = build_translated_table(
                    &table,
                    &work_dir.join("training"),
                    tr,
                    &work_dir.join("translated"),
                )?;
                failures.extend(
                    cut.rejections
                        .iter()
                        .map(|r| Failure::from_rejection("translate", r)),
                );
                counts.translated_rows = Some(cut.table.len());
                table = merge_tables(&table, &cut.table)?;
            }
            Some(table)
        }
    };

    counts.frames = inference.frames.len();
    let detected = run_group_detectors(
        inference,
        backends.det_car.as_mut(),
        backends.det_moto.as_mut(),
        cfg,
    )?;
    counts.raw_detections = detected.raw_count;
    counts.post_nms = detected.detections.len();
    failures.extend(detected.failures);

    let inf_dir = work_dir.join("inference");
    let built = build_inference_table(inference, &detected.detections, &inf_dir)?;
    failures.extend(
        built
            .rejections
            .iter()
            .map(|r| Failure::from_rejection("crop", r)),
    );
    counts.table_rows = built.table.len();

    let classified = classify_table(&built.table, &inf_dir, &mut backends.classifiers, cfg)?;
    failures.extend(classified.failures);
    counts.classified = classified
        .table
        .entries()
        .iter()
        .filter(|e| e.predicted_class.is_some())
        .count();

    let ready: Vec<_> = classified
        .table
        .entries()
        .iter()
        .filter(|e| e.predicted_class.is_some())
        .cloned()
        .collect();
    let detections = emit_detections(&MetaTable::new(ready, Vec::new())?, cfg)?;
    counts.emitted = detections.len();

    failures.sort();
    Ok(RunOutput {
        training_table,
        inference_table: classified.table,
        detections,
        report: RunReport {
            seed: cfg.seed,
            config_hash: config_hash(cfg),
            config: cfg.clone(),
            counts,
            failures,
        },
    })
}
