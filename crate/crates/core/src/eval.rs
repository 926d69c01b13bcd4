//! Challenge metric: IoU matching, per-class AP, weighted mAP over the 12
//! classes, and the two-split combined score.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::{DatasetManifest, LabelRow};
use crate::classmodel::{ObjectClass, NUM_CLASSES};
use crate::geometry::{BoundingBox, Detection};

pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("class weights sum to {sum}, expected 1 (tolerance {WEIGHT_SUM_TOLERANCE})")]
    WeightSumViolation { sum: f64 },
    #[error("invalid eval config: {0}")]
    Config(String),
    #[error("split {0:?} has no frames in the manifest")]
    MissingSplit(String),
    #[error("detection on {image_id:?} has no class")]
    UnclassifiedDetection { image_id: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    /// Area under the precision envelope at every recall step.
    AllPoint,
    /// Mean envelope precision at recall 0, 0.1, ..., 1.
    ElevenPoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub weights: [f64; NUM_CLASSES],
    pub iou_threshold: f64,
    pub split_weights: [f64; 2],
    pub split_tags: [String; 2],
    pub interpolation: Interpolation,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            weights: [1.0 / NUM_CLASSES as f64; NUM_CLASSES],
            iou_threshold: 0.5,
            split_weights: [0.45, 0.55],
            split_tags: ["v1".into(), "v2".into()],
            interpolation: Interpolation::AllPoint,
        }
    }
}

fn check_weights(weights: &[f64]) -> Result<(), EvalError> {
    if let Some(w) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
        return Err(EvalError::Config(format!(
            "weight {w} is not a non-negative number"
        )));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
        return Err(EvalError::WeightSumViolation { sum });
    }
    Ok(())
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        check_weights(&self.weights)?;
        check_weights(&self.split_weights)
            .map_err(|e| EvalError::Config(format!("split_weights: {e}")))?;
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return Err(EvalError::Config(format!(
                "iou_threshold {} outside (0,1]",
                self.iou_threshold
            )));
        }
        if self.split_tags[0] == self.split_tags[1] {
            return Err(EvalError::Config("split_tags must differ".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, EvalError> {
        let text = fs::read_to_string(path)
            .map_err(|e| EvalError::Config(format!("{}: {e}", path.display())))?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| EvalError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub image_id: String,
    pub class: ObjectClass,
    pub bbox: BoundingBox,
}

pub fn ground_truth_from_labels(labels: &BTreeMap<String, Vec<LabelRow>>) -> Vec<GroundTruth> {
    labels
        .iter()
        .flat_map(|(id, rows)| {
            rows.iter().map(|r| GroundTruth {
                image_id: id.clone(),
                class: r.class,
                bbox: r.bbox,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchedDetection {
    pub image_id: String,
    pub bbox: BoundingBox,
    pub score: f64,
    pub tp: bool,
    /// Index into the canonically sorted ground truth of this class.
    pub gt: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ClassMatches {
    /// In ranking order.
    pub detections: Vec<MatchedDetection>,
    pub n_gt: usize,
}

impl ClassMatches {
    pub fn scored_flags(&self) -> Vec<(f64, bool)> {
        self.detections.iter().map(|d| (d.score, d.tp)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub per_class: Vec<ClassMatches>,
}

fn rank(a: &Detection, b: &Detection) -> std::cmp::Ordering {
    crate::geometry::rank_cmp(a, b).then_with(|| a.image_id.cmp(&b.image_id))
}

/// Greedy matching, separately per class and image. Detections are visited
/// by score (ties by box, then image id); each takes the unmatched ground
/// truth box with the highest IoU at or above `iou_threshold`, else it is a
/// false positive.
pub fn match_detections(
    dets: &[Detection],
    gts: &[GroundTruth],
    iou_threshold: f64,
) -> Result<MatchResult, EvalError> {
    let mut per_class = vec![ClassMatches::default(); NUM_CLASSES];

    let mut gt_sorted: Vec<&GroundTruth> = gts.iter().collect();
    gt_sorted.sort_by(|a, b| {
        a.class
            .cmp(&b.class)
            .then_with(|| a.image_id.cmp(&b.image_id))
            .then_with(|| a.bbox.canonical_cmp(&b.bbox))
    });
    // (class, image) -> [(gt index within class, box)]
    let mut pool: BTreeMap<(usize, &str), Vec<(usize, BoundingBox)>> = BTreeMap::new();
    for g in gt_sorted {
        let k = g.class.index();
        let id = per_class[k].n_gt;
        per_class[k].n_gt += 1;
        pool.entry((k, g.image_id.as_str()))
            .or_default()
            .push((id, g.bbox));
    }

    let mut by_class: Vec<Vec<&Detection>> = vec![Vec::new(); NUM_CLASSES];
    for d in dets {
        let class = d
            .object_class
            .ok_or_else(|| EvalError::UnclassifiedDetection {
                image_id: d.image_id.clone(),
            })?;
        by_class[class.index()].push(d);
    }

    for (k, mut ds) in by_class.into_iter().enumerate() {
        ds.sort_by(|a, b| rank(a, b));
        let mut taken = BTreeSet::new();
        for d in ds {
            let mut best: Option<(usize, f64)> = None;
            for (id, g) in pool.get(&(k, d.image_id.as_str())).into_iter().flatten() {
                if taken.contains(id) {
                    continue;
                }
                let iou = d.bbox.iou(g);
                if iou >= iou_threshold && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((*id, iou));
                }
            }
            if let Some((id, _)) = best {
                taken.insert(id);
            }
            per_class[k].detections.push(MatchedDetection {
                image_id: d.image_id.clone(),
                bbox: d.bbox,
                score: d.score,
                tp: best.is_some(),
                gt: best.map(|(id, _)| id),
            });
        }
    }
    Ok(MatchResult { per_class })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrPoint {
    /// Cumulative true positives at this cutoff.
    pub tp: usize,
    pub fp: usize,
    pub recall: f64,
    pub precision: f64,
}

/// Precision and recall after each distinct score cutoff, highest first.
/// Detections sharing a score enter together.
pub fn pr_curve(dets: &[(f64, bool)], n_gt: usize) -> Vec<PrPoint> {
    let mut sorted = dets.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut out = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    for (i, &(score, hit)) in sorted.iter().enumerate() {
        if hit {
            tp += 1;
        } else {
            fp += 1;
        }
        if sorted.get(i + 1).is_none_or(|next| next.0 != score) {
            out.push(PrPoint {
                tp,
                fp,
                recall: if n_gt == 0 {
                    0.0
                } else {
                    tp as f64 / n_gt as f64
                },
                precision: tp as f64 / (tp + fp) as f64,
            });
        }
    }
    out
}

/// AP of one class from scored TP/FP flags. Zero when `n_gt` is zero.
pub fn average_precision(dets: &[(f64, bool)], n_gt: usize, interpolation: Interpolation) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let curve = pr_curve(dets, n_gt);
    match interpolation {
        Interpolation::AllPoint => {
            let mut envelope = vec![0.0; curve.len()];
            let mut running: f64 = 0.0;
            for (j, p) in curve.iter().enumerate().rev() {
                running = running.max(p.precision);
                envelope[j] = running;
            }
            let mut sum = 0.0;
            let mut prev_tp = 0;
            for (p, env) in curve.iter().zip(&envelope) {
                sum += (p.tp - prev_tp) as f64 * env;
                prev_tp = p.tp;
            }
            sum / n_gt as f64
        }
        Interpolation::ElevenPoint => {
            let mut sum = 0.0;
            for t in 0..=10 {
                let threshold = t as f64 / 10.0;
                sum += curve
                    .iter()
                    .filter(|p| p.recall >= threshold)
                    .map(|p| p.precision)
                    .fold(0.0, f64::max);
            }
            sum / 11.0
        }
    }
}

/// All-point AP computed the slow way: for every distinct score, count TP and
/// FP among detections at or above it, then take the precision envelope by
/// scanning all lower cutoffs.
pub fn brute_force_ap(dets: &[(f64, bool)], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut cutoffs: Vec<f64> = dets.iter().map(|d| d.0).collect();
    cutoffs.sort_by(|a, b| b.total_cmp(a));
    cutoffs.dedup_by(|a, b| a == b);

    let counts: Vec<(usize, usize)> = cutoffs
        .iter()
        .map(|&s| {
            let tp = dets.iter().filter(|d| d.0 >= s && d.1).count();
            let fp = dets.iter().filter(|d| d.0 >= s && !d.1).count();
            (tp, fp)
        })
        .collect();
    let precision = |(tp, fp): (usize, usize)| tp as f64 / (tp + fp) as f64;

    let mut sum = 0.0;
    let mut prev_tp = 0;
    for j in 0..counts.len() {
        let mut env: f64 = 0.0;
        for &c in &counts[j..] {
            env = env.max(precision(c));
        }
        sum += (counts[j].0 - prev_tp) as f64 * env;
        prev_tp = counts[j].0;
    }
    sum / n_gt as f64
}

/// Weighted mean of per-class APs.
pub fn wmap(
    per_class_ap: &[f64; NUM_CLASSES],
    weights: &[f64; NUM_CLASSES],
) -> Result<f64, EvalError> {
    check_weights(weights)?;
    Ok(per_class_ap.iter().zip(weights).map(|(ap, w)| ap * w).sum())
}

pub fn combined_score(wmap_v1: f64, wmap_v2: f64, split_weights: [f64; 2]) -> f64 {
    split_weights[0] * wmap_v1 + split_weights[1] * wmap_v2
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassReport {
    pub class: ObjectClass,
    pub weight: f64,
    pub n_gt: usize,
    pub n_det: usize,
    pub ap: f64,
    /// No ground truth in this split; AP is reported as 0.
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplitReport {
    pub tag: String,
    pub weight: f64,
    pub frames: usize,
    pub wmap: f64,
    pub classes: Vec<ClassReport>,
    #[serde(skip)]
    pub pr_curves: Vec<Vec<PrPoint>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub iou_threshold: f64,
    pub interpolation: Interpolation,
    pub splits: Vec<SplitReport>,
    pub combined_score: f64,
    /// Detections on frames that belong to neither split.
    pub ignored_detections: usize,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// Per-class AP table followed by the weighted scores.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        let _ = write!(out, "{:<18}", "class");
        for s in &self.splits {
            let _ = write!(out, "{:>10}", format!("AP({})", s.tag));
        }
        out.push('\n');
        for k in 0..NUM_CLASSES {
            let _ = write!(out, "{:<18}", self.splits[0].classes[k].class.name());
            for s in &self.splits {
                let c = &s.classes[k];
                let cell = if c.flagged {
                    format!("{:.3}*", c.ap)
                } else {
                    format!("{:.3}", c.ap)
                };
                let _ = write!(out, "{cell:>10}");
            }
            out.push('\n');
        }
        for s in &self.splits {
            let _ = writeln!(out, "WmAP({}) = {:.3}", s.tag, s.wmap);
        }
        if self
            .splits
            .iter()
            .any(|s| s.classes.iter().any(|c| c.flagged))
        {
            out.push_str("* no ground truth in split, AP reported as 0\n");
        }
        let _ = writeln!(out, "score = {:.3}", self.combined_score);
        out
    }
}

pub fn pr_curve_csv(curve: &[PrPoint]) -> String {
    let mut out = String::from("recall,precision\n");
    for p in curve {
        let _ = writeln!(out, "{},{}", p.recall, p.precision);
    }
    out
}

type SplitScores = (Vec<ClassReport>, Vec<Vec<PrPoint>>, f64);

fn evaluate_split(
    dets: &[Detection],
    gts: &[GroundTruth],
    cfg: &EvalConfig,
) -> Result<SplitScores, EvalError> {
    let matched = match_detections(dets, gts, cfg.iou_threshold)?;
    let mut aps = [0.0; NUM_CLASSES];
    let mut classes = Vec::with_capacity(NUM_CLASSES);
    let mut curves = Vec::with_capacity(NUM_CLASSES);
    for (k, m) in matched.per_class.iter().enumerate() {
        let flags = m.scored_flags();
        aps[k] = average_precision(&flags, m.n_gt, cfg.interpolation);
        curves.push(pr_curve(&flags, m.n_gt));
        classes.push(ClassReport {
            class: ObjectClass::from_index(k).expect("index in range"),
            weight: cfg.weights[k],
            n_gt: m.n_gt,
            n_det: m.detections.len(),
            ap: aps[k],
            flagged: m.n_gt == 0,
        });
    }
    Ok((classes, curves, wmap(&aps, &cfg.weights)?))
}

/// Scores detections against ground truth for both splits of `manifest`.
pub fn evaluate(
    dets: &[Detection],
    gts: &[GroundTruth],
    manifest: &DatasetManifest,
    cfg: &EvalConfig,
) -> Result<EvalReport, EvalError> {
    cfg.validate()?;
    let split_of: BTreeMap<&str, &str> = manifest
        .frames
        .iter()
        .map(|f| (f.image_id.as_str(), f.split.as_str()))
        .collect();

    let mut splits = Vec::with_capacity(2);
    for (tag, weight) in cfg.split_tags.iter().zip(cfg.split_weights) {
        let frames = split_of.values().filter(|s| **s == tag).count();
        if frames == 0 {
            return Err(EvalError::MissingSplit(tag.clone()));
        }
        let in_split = |id: &str| split_of.get(id) == Some(&tag.as_str());
        let d: Vec<Detection> = dets
            .iter()
            .filter(|d| in_split(&d.image_id))
            .cloned()
            .collect();
        let g: Vec<GroundTruth> = gts
            .iter()
            .filter(|g| in_split(&g.image_id))
            .cloned()
            .collect();
        let (classes, pr_curves, wmap) = evaluate_split(&d, &g, cfg)?;
        splits.push(SplitReport {
            tag: tag.clone(),
            weight,
            frames,
            wmap,
            classes,
            pr_curves,
        });
    }
    let ignored_detections = dets
        .iter()
        .filter(|d| {
            !cfg.split_tags
                .iter()
                .any(|t| split_of.get(d.image_id.as_str()) == Some(&t.as_str()))
        })
        .count();
    Ok(EvalReport {
        iou_threshold: cfg.iou_threshold,
        interpolation: cfg.interpolation,
        combined_score: combined_score(splits[0].wmap, splits[1].wmap, cfg.split_weights),
        splits,
        ignored_detections,
    })
}
