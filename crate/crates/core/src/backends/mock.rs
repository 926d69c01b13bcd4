//! Deterministic in-process backends.
//!
//! Selected with `"transport": "in_process_mock"` and a `mock` config key:
//!
//! | kind       | mock        | behaviour                                              |
//! |------------|-------------|--------------------------------------------------------|
//! | detector   | `oracle`    | ground-truth boxes of its group, score `score` (1.0)   |
//! | detector   | `noisy`     | oracle plus one planted false positive per frame        |
//! | classifier | `oracle`    | one-hot at the crop's palette class, optional `noise`   |
//! | classifier | `uniform`   | 1/12 everywhere                                        |
//! | classifier | `constant`  | one-hot at the configured `class`                      |
//! | translator | `identity`  | byte copy                                              |
//! | translator | `watermark` | copy with a marked corner                              |
//!
//! Detector oracles read ground truth from a `labels` directory (and an
//! optional `class_map`). A `drop` list of `"<image_id>:<line>"` strings
//! removes individual ground-truth objects. Translators fail any crop whose
//! path contains `fail_matching`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use image::Rgb;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    stable_seed, AnyBackend, BackendDescriptor, BackendError, BackendKind, Classifier, Detector,
    DetectorRequest, RawBox, Translator,
};
use crate::annotation::{load_label_dir, ClassMap};
use crate::classmodel::{parse_class_name, ClassProbs, ObjectClass, VehicleGroup, NUM_CLASSES};
use crate::geometry::BoundingBox;
use crate::{fixture, imaging};

pub const DEFAULT_FP_SCORE: f64 = 0.3;

pub(super) fn open_mock(
    d: &BackendDescriptor,
    default_seed: u64,
) -> Result<AnyBackend, BackendError> {
    let mock = d.config_str("mock")?.unwrap_or("oracle");
    let seed = match d.config.get("seed") {
        None => default_seed,
        Some(v) => v.as_u64().ok_or_else(|| {
            BackendError::Config(format!("{}: seed must be an unsigned integer", d.name))
        })?,
    };
    let unknown = || BackendError::Config(format!("{}: unknown {} mock {mock:?}", d.name, d.kind));
    Ok(match d.kind {
        BackendKind::Detector => {
            let mut det = OracleDetector::from_descriptor(d)?;
            match mock {
                "oracle" => {}
                "noisy" => {
                    let score = d.config_f64("fp_score")?.unwrap_or(DEFAULT_FP_SCORE);
                    det = det.with_false_positive(score, seed);
                }
                _ => return Err(unknown()),
            }
            AnyBackend::Detector(Box::new(det))
        }
        BackendKind::Classifier => AnyBackend::Classifier(match mock {
            "oracle" => {
                let noise = d.config_f64("noise")?.unwrap_or(0.0);
                Box::new(OracleClassifier::new(d.clone(), noise, seed)?)
            }
            "uniform" => Box::new(FixedClassifier::new(d.clone(), ClassProbs::uniform())),
            "constant" => {
                let name = d.config_str("class")?.ok_or_else(|| {
                    BackendError::Config(format!("{}: constant mock needs `class`", d.name))
                })?;
                let class =
                    parse_class_name(name).map_err(|e| BackendError::Config(e.to_string()))?;
                Box::new(FixedClassifier::new(d.clone(), ClassProbs::one_hot(class)))
            }
            _ => return Err(unknown()),
        }),
        BackendKind::Translator => {
            let style = match mock {
                "identity" | "oracle" => TranslatorStyle::Identity,
                "watermark" => TranslatorStyle::Watermark,
                _ => return Err(unknown()),
            };
            let mut t = MockTranslator::new(d.clone(), style);
            t.fail_matching = d.config_str("fail_matching")?.map(str::to_owned);
            AnyBackend::Translator(Box::new(t))
        }
    })
}

/// Ground-truth object as the oracle detector sees it.
#[derive(Debug, Clone, PartialEq)]
pub struct GtObject {
    /// Label line, used to address the object in a `drop` list.
    pub line: usize,
    pub class: ObjectClass,
    pub bbox: BoundingBox,
}

/// Returns the ground truth of its group for each frame, optionally minus
/// some dropped objects and plus one planted false positive per frame.
pub struct OracleDetector {
    descriptor: BackendDescriptor,
    group: VehicleGroup,
    gt: BTreeMap<String, Vec<GtObject>>,
    score: f64,
    dropped: BTreeSet<(String, usize)>,
    false_positive: Option<(f64, u64)>,
}

impl OracleDetector {
    pub fn new(
        descriptor: BackendDescriptor,
        group: VehicleGroup,
        gt: BTreeMap<String, Vec<GtObject>>,
    ) -> Self {
        Self {
            descriptor,
            group,
            gt,
            score: 1.0,
            dropped: BTreeSet::new(),
            false_positive: None,
        }
    }

    pub fn from_descriptor(d: &BackendDescriptor) -> Result<Self, BackendError> {
        let cfg = |m: String| BackendError::Config(format!("{}: {m}", d.name));
        let group = d
            .group()?
            .ok_or_else(|| cfg("detector mock needs `group`".into()))?;
        let labels = d
            .config_path("labels")?
            .ok_or_else(|| cfg("detector mock needs `labels`".into()))?;
        let class_map = match d.config_path("class_map")? {
            Some(p) => ClassMap::load(&p).map_err(|e| cfg(e.to_string()))?,
            None => ClassMap::default(),
        };
        let gt = load_label_dir(&labels, &class_map)
            .map_err(|e| cfg(e.to_string()))?
            .into_iter()
            .map(|(id, rows)| {
                let objs = rows
                    .into_iter()
                    .map(|r| GtObject {
                        line: r.line,
                        class: r.class,
                        bbox: r.bbox,
                    })
                    .collect();
                (id, objs)
            })
            .collect();
        let mut det = Self::new(d.clone(), group, gt);
        if let Some(s) = d.config_f64("score")? {
            if !(0.0..=1.0).contains(&s) {
                return Err(cfg(format!("score {s} outside [0,1]")));
            }
            det.score = s;
        }
        match d.config.get("drop") {
            None => {}
            Some(serde_json::Value::Array(items)) => {
                for item in items {
                    let parsed = item
                        .as_str()
                        .and_then(|s| s.rsplit_once(':'))
                        .and_then(|(id, line)| Some((id.to_owned(), line.parse().ok()?)));
                    let entry = parsed.ok_or_else(|| cfg(format!("bad drop entry {item}")))?;
                    det.dropped.insert(entry);
                }
            }
            Some(v) => return Err(cfg(format!("drop must be a list, got {v}"))),
        }
        Ok(det)
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = score;
        self
    }

    pub fn without(mut self, image_id: &str, line: usize) -> Self {
        self.dropped.insert((image_id.to_owned(), line));
        self
    }

    /// Adds one false positive per frame at a position drawn from
    /// `(seed, image_id)`.
    pub fn with_false_positive(mut self, score: f64, seed: u64) -> Self {
        self.false_positive = Some((score, seed));
        self
    }
}

impl Detector for OracleDetector {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn detect_raw(&mut self, request: &DetectorRequest) -> Result<Vec<RawBox>, BackendError> {
        if request.group != self.group {
            return Err(BackendError::Failure(format!(
                "oracle serves {}, asked for {}",
                self.group, request.group
            )));
        }
        let mut out: Vec<RawBox> = self
            .gt
            .get(&request.image_id)
            .into_iter()
            .flatten()
            .filter(|o| o.class.group() == self.group)
            .filter(|o| !self.dropped.contains(&(request.image_id.clone(), o.line)))
            .map(|o| RawBox {
                cx: o.bbox.cx,
                cy: o.bbox.cy,
                w: o.bbox.w,
                h: o.bbox.h,
                score: self.score,
            })
            .collect();
        if let Some((score, seed)) = self.false_positive {
            let mut rng = ChaCha8Rng::seed_from_u64(stable_seed(seed, request.image_id.as_bytes()));
            out.push(RawBox {
                cx: rng.gen_range(0.1..0.9),
                cy: rng.gen_range(0.1..0.9),
                w: rng.gen_range(0.05..0.15),
                h: rng.gen_range(0.05..0.15),
                score,
            });
        }
        Ok(out)
    }
}

/// Reads the class off the crop's palette colour (see [`crate::fixture`]).
///
/// With `noise = e > 0` the one-hot vector is blended with a random
/// distribution drawn from the crop's pixels and the seed:
/// `(1 - e) * onehot + e * r`. For `e < 1/2` the argmax cannot move.
pub struct OracleClassifier {
    descriptor: BackendDescriptor,
    noise: f64,
    seed: u64,
}

impl OracleClassifier {
    pub fn new(descriptor: BackendDescriptor, noise: f64, seed: u64) -> Result<Self, BackendError> {
        if !(0.0..1.0).contains(&noise) {
            return Err(BackendError::Config(format!("noise {noise} outside [0,1)")));
        }
        Ok(Self {
            descriptor,
            noise,
            seed,
        })
    }
}

impl Classifier for OracleClassifier {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn classify_raw(&mut self, crop: &Path) -> Result<Vec<f64>, BackendError> {
        let img = imaging::load_rgb(crop).map_err(BackendError::Failure)?;
        let class = fixture::dominant_class(&img).ok_or_else(|| {
            BackendError::Failure(format!("{}: no class colour in crop", crop.display()))
        })?;
        let mut probs = ClassProbs::one_hot(class).as_slice().to_vec();
        if self.noise > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(stable_seed(self.seed, img.as_raw()));
            let r: Vec<f64> = (0..NUM_CLASSES).map(|_| rng.gen_range(0.0..1.0)).collect();
            let total: f64 = r.iter().sum();
            for (p, x) in probs.iter_mut().zip(&r) {
                *p = (1.0 - self.noise) * *p + self.noise * x / total;
            }
        }
        Ok(probs)
    }
}

/// Returns the same distribution for every crop.
pub struct FixedClassifier {
    descriptor: BackendDescriptor,
    probs: ClassProbs,
}

impl FixedClassifier {
    pub fn new(descriptor: BackendDescriptor, probs: ClassProbs) -> Self {
        Self { descriptor, probs }
    }
}

impl Classifier for FixedClassifier {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn classify_raw(&mut self, _crop: &Path) -> Result<Vec<f64>, BackendError> {
        Ok(self.probs.as_slice().to_vec())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TranslatorStyle {
    Identity,
    /// Inverts the top-left pixel, so output always differs from input.
    Watermark,
}

pub struct MockTranslator {
    descriptor: BackendDescriptor,
    style: TranslatorStyle,
    pub fail_matching: Option<String>,
}

impl MockTranslator {
    pub fn new(descriptor: BackendDescriptor, style: TranslatorStyle) -> Self {
        Self {
            descriptor,
            style,
            fail_matching: None,
        }
    }
}

impl Translator for MockTranslator {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn translate_raw(&mut self, input: &Path, output: &Path) -> Result<(), BackendError> {
        if let Some(pat) = &self.fail_matching {
            if input.to_string_lossy().contains(pat.as_str()) {
                return Err(BackendError::Failure(format!(
                    "induced failure on {}",
                    input.display()
                )));
            }
        }
        match self.style {
            TranslatorStyle::Identity => fs::copy(input, output)
                .map(|_| ())
                .map_err(|e| BackendError::Failure(format!("{}: {e}", input.display()))),
            TranslatorStyle::Watermark => {
                let mut img = imaging::load_rgb(input).map_err(BackendError::Failure)?;
                let Rgb([r, g, b]) = *img.get_pixel(0, 0);
                img.put_pixel(0, 0, Rgb([255 - r, 255 - g, 255 - b]));
                imaging::save_png(&img, output).map_err(BackendError::Failure)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{classify, detect, translate, translate_batch, Transport};
    use crate::fixture::{class_color, generate, FixtureSpec};
    use image::RgbImage;
    use std::path::PathBuf;

    fn detector_descriptor(labels: &Path, group: &str, mock: &str) -> BackendDescriptor {
        BackendDescriptor::new(BackendKind::Detector, "det", Transport::InProcessMock)
            .with_config("mock", mock)
            .with_config("group", group)
            .with_config("labels", labels.display().to_string())
    }

    fn request(fx: &fixture::Fixture, i: usize, group: VehicleGroup) -> DetectorRequest {
        let f = &fx.manifest.frames[i];
        DetectorRequest {
            image_id: f.image_id.clone(),
            image_path: f.path.clone(),
            group,
        }
    }

    #[test]
    fn oracle_detector_returns_group_ground_truth() {
        let dir = tempfile::tempdir().unwrap();
        let fx = generate(dir.path(), &FixtureSpec::default()).unwrap();
        let d = detector_descriptor(&fx.labels_dir, "car_group", "oracle");
        let AnyBackend::Detector(mut det) = open_mock(&d, 0).unwrap() else {
            panic!()
        };
        for (i, frame) in fx.manifest.frames.iter().enumerate() {
            let got = detect(det.as_mut(), &request(&fx, i, VehicleGroup::Car)).unwrap();
            let want: Vec<_> = fx.objects[&frame.image_id]
                .iter()
                .filter(|(c, _)| c.group() == VehicleGroup::Car)
                .map(|(_, b)| *b)
                .collect();
            assert_eq!(got.iter().map(|s| s.bbox).collect::<Vec<_>>(), want);
            assert!(got.iter().all(|s| s.score == 1.0));
        }
        // wrong group is refused
        assert!(detect(det.as_mut(), &request(&fx, 0, VehicleGroup::Motorbike)).is_err());
    }

    #[test]
    fn oracle_detector_empty_frame() {
        let dir = tempfile::tempdir().unwrap();
        let labels = dir.path().join("labels");
        fs::create_dir_all(&labels).unwrap();
        // only car-group objects in this frame
        fs::write(labels.join("f.txt"), "0 0.5 0.5 0.2 0.2\n").unwrap();
        let d = detector_descriptor(&labels, "motorbike_group", "oracle");
        let mut det = OracleDetector::from_descriptor(&d).unwrap();
        let req = DetectorRequest {
            image_id: "f".into(),
            image_path: "f.png".into(),
            group: VehicleGroup::Motorbike,
        };
        assert!(detect(&mut det, &req).unwrap().is_empty());
        let req = DetectorRequest {
            image_id: "nothing".into(),
            ..req
        };
        assert!(detect(&mut det, &req).unwrap().is_empty());
    }

    #[test]
    fn noisy_detector_plants_one_low_score_box() {
        let dir = tempfile::tempdir().unwrap();
        let fx = generate(dir.path(), &FixtureSpec::default()).unwrap();
        let d =
            detector_descriptor(&fx.labels_dir, "motorbike_group", "noisy").with_config("seed", 7);
        let AnyBackend::Detector(mut det) = open_mock(&d, 0).unwrap() else {
            panic!()
        };
        let AnyBackend::Detector(mut again) = open_mock(&d, 0).unwrap() else {
            panic!()
        };
        for (i, frame) in fx.manifest.frames.iter().enumerate() {
            let n_gt = fx.objects[&frame.image_id]
                .iter()
                .filter(|(c, _)| c.group() == VehicleGroup::Motorbike)
                .count();
            let got = detect(det.as_mut(), &request(&fx, i, VehicleGroup::Motorbike)).unwrap();
            assert_eq!(got.len(), n_gt + 1);
            assert_eq!(
                got.iter().filter(|s| s.score == DEFAULT_FP_SCORE).count(),
                1
            );
            assert_eq!(
                got,
                detect(again.as_mut(), &request(&fx, i, VehicleGroup::Motorbike)).unwrap()
            );
        }
    }

    #[test]
    fn dropped_objects_are_missing() {
        let dir = tempfile::tempdir().unwrap();
        let fx = generate(dir.path(), &FixtureSpec::default()).unwrap();
        let frame = &fx.manifest.frames[0];
        let (first_class, _) = fx.objects[&frame.image_id][0];
        let group = first_class.group();
        let d = detector_descriptor(&fx.labels_dir, group.name(), "oracle")
            .with_config("drop", serde_json::json!([format!("{}:1", frame.image_id)]));
        let AnyBackend::Detector(mut det) = open_mock(&d, 0).unwrap() else {
            panic!()
        };
        let full = fx.objects[&frame.image_id]
            .iter()
            .filter(|(c, _)| c.group() == group)
            .count();
        assert_eq!(
            detect(det.as_mut(), &request(&fx, 0, group)).unwrap().len(),
            full - 1
        );
    }

    fn crop_of(dir: &Path, class: ObjectClass) -> PathBuf {
        let path = dir.join(format!("{class}.png"));
        imaging::save_png(&RgbImage::from_pixel(9, 7, class_color(class)), &path).unwrap();
        path
    }

    #[test]
    fn oracle_classifier_is_one_hot() {
        let dir = tempfile::tempdir().unwrap();
        let d = BackendDescriptor::new(BackendKind::Classifier, "cls", Transport::InProcessMock);
        let mut c = OracleClassifier::new(d, 0.0, 0).unwrap();
        for class in ObjectClass::all() {
            let p = classify(&mut c, &crop_of(dir.path(), class)).unwrap();
            assert_eq!(p, ClassProbs::one_hot(class));
        }
        let blank = dir.path().join("blank.png");
        imaging::save_png(&RgbImage::from_pixel(4, 4, fixture::BACKGROUND), &blank).unwrap();
        assert!(classify(&mut c, &blank).is_err());
    }

    #[test]
    fn noised_oracle_keeps_argmax_below_half() {
        let dir = tempfile::tempdir().unwrap();
        for (seed, noise) in [(1u64, 0.1), (2, 0.3), (3, 0.49)] {
            let d =
                BackendDescriptor::new(BackendKind::Classifier, "cls", Transport::InProcessMock);
            let mut c = OracleClassifier::new(d, noise, seed).unwrap();
            for class in ObjectClass::all() {
                let crop = crop_of(dir.path(), class);
                let p = classify(&mut c, &crop).unwrap();
                assert_eq!(p.argmax(), class);
                assert!(p.max() < 1.0);
                assert_eq!(p, classify(&mut c, &crop).unwrap());
            }
        }
        let d = BackendDescriptor::new(BackendKind::Classifier, "cls", Transport::InProcessMock);
        assert!(OracleClassifier::new(d, 1.0, 0).is_err());
    }

    #[test]
    fn uniform_and_constant_classifiers() {
        let d = BackendDescriptor::new(BackendKind::Classifier, "u", Transport::InProcessMock)
            .with_config("mock", "uniform");
        let AnyBackend::Classifier(mut u) = open_mock(&d, 0).unwrap() else {
            panic!()
        };
        let p = classify(u.as_mut(), Path::new("unused.png")).unwrap();
        assert!(p.as_slice().iter().all(|&x| x == 1.0 / 12.0));

        let d = BackendDescriptor::new(BackendKind::Classifier, "k", Transport::InProcessMock)
            .with_config("mock", "constant")
            .with_config("class", "truck_front");
        let AnyBackend::Classifier(mut k) = open_mock(&d, 0).unwrap() else {
            panic!()
        };
        assert_eq!(
            classify(k.as_mut(), Path::new("x"))
                .unwrap()
                .argmax()
                .index(),
            4
        );
    }

    #[test]
    fn translators() {
        let dir = tempfile::tempdir().unwrap();
        let src = crop_of(dir.path(), ObjectClass::from_index(3).unwrap());
        let d = BackendDescriptor::new(BackendKind::Translator, "t", Transport::InProcessMock);

        let mut id = MockTranslator::new(d.clone(), TranslatorStyle::Identity);
        let out = dir.path().join("id.png");
        translate(&mut id, &src, &out).unwrap();
        assert_eq!(fs::read(&src).unwrap(), fs::read(&out).unwrap());

        let mut wm = MockTranslator::new(d.clone(), TranslatorStyle::Watermark);
        let out = dir.path().join("wm.png");
        translate(&mut wm, &src, &out).unwrap();
        let (a, b) = (
            imaging::load_rgb(&src).unwrap(),
            imaging::load_rgb(&out).unwrap(),
        );
        assert_eq!(a.dimensions(), b.dimensions());
        assert_ne!(a, b);

        let jobs: Vec<_> = (0..4)
            .map(|i| (src.clone(), dir.path().join(format!("b{i}.png"))))
            .collect();
        let results = translate_batch(&mut id, &jobs);
        assert_eq!(results.len(), 4);
        assert!(results.iter().all(Result::is_ok));
        assert!(jobs.iter().all(|(_, o)| o.exists()));

        let mut failing = MockTranslator::new(d, TranslatorStyle::Identity);
        failing.fail_matching = Some("truck".into());
        assert!(translate(&mut failing, &src, &dir.path().join("f.png")).is_err());
    }

    #[test]
    fn unknown_mock_is_config_error() {
        let d = BackendDescriptor::new(BackendKind::Classifier, "x", Transport::InProcessMock)
            .with_config("mock", "psychic");
        assert!(matches!(open_mock(&d, 0), Err(BackendError::Config(_))));
    }
}
