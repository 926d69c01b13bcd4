//! Pluggable model backends.
//!
//! The pipeline talks to three kinds of model: per-group detectors, 12-way
//! crop classifiers and crop translators. Each is reached through a trait;
//! implementations are either deterministic in-process mocks (used for tests
//! and desk-scale runs) or an external process speaking the JSON Lines
//! protocol in [`protocol`].
//!
//! Outputs are validated at this boundary by [`detect`], [`classify`] and
//! [`translate`]; a malformed response is turned into an error and never
//! reaches the pipeline.

pub mod conformance;
pub mod mock;
pub mod protocol;
pub mod subprocess;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::classmodel::{ClassProbs, VehicleGroup};
use crate::geometry::BoundingBox;

pub use protocol::{ProtocolRequest, ProtocolResponse, RawBox, RequestKind};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(60);
pub const DEFAULT_SCORE_FLOOR: f64 = 0.25;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("backend failure: {0}")]
    Failure(String),
    #[error("backend timed out after {0:?}")]
    Timeout(Duration),
    #[error("protocol violation at response line {line}: {message}")]
    ProtocolViolation { line: usize, message: String },
    #[error("backend process exited with status {0:?}")]
    NonzeroExit(Option<i32>),
    #[error("backend configuration error: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Detector,
    Classifier,
    Translator,
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackendKind::Detector => "detector",
            BackendKind::Classifier => "classifier",
            BackendKind::Translator => "translator",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transport {
    InProcessMock,
    SubprocessStream,
}

/// Backend description, usually loaded from a JSON file.
///
/// `config` is free-form metadata; keys must be unique. Mocks read their
/// parameters from it, and it is also the place to record model settings
/// such as input resolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendDescriptor {
    pub kind: BackendKind,
    pub name: String,
    pub transport: Transport,
    #[serde(default, deserialize_with = "unique_keys")]
    pub config: BTreeMap<String, serde_json::Value>,
    /// Program and arguments for `subprocess_stream` backends.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub command: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timeout_secs: Option<f64>,
    /// Directory relative paths in `config` and `command` resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn unique_keys<'de, D: Deserializer<'de>>(
    deserializer: D,
) -> Result<BTreeMap<String, serde_json::Value>, D::Error> {
    struct UniqueMap;

    impl<'de> Visitor<'de> for UniqueMap {
        type Value = BTreeMap<String, serde_json::Value>;

        fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
            f.write_str("an object with unique keys")
        }

        fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<Self::Value, A::Error> {
            let mut out = BTreeMap::new();
            while let Some((k, v)) = map.next_entry::<String, serde_json::Value>()? {
                if out.contains_key(&k) {
                    return Err(serde::de::Error::custom(format!(
                        "duplicate config key {k:?}"
                    )));
                }
                out.insert(k, v);
            }
            Ok(out)
        }
    }

    deserializer.deserialize_map(UniqueMap)
}

impl BackendDescriptor {
    pub fn new(kind: BackendKind, name: impl Into<String>, transport: Transport) -> Self {
        Self {
            kind,
            name: name.into(),
            transport,
            config: BTreeMap::new(),
            command: None,
            timeout_secs: None,
            base_dir: PathBuf::from("."),
        }
    }

    pub fn with_config(mut self, key: &str, value: impl Into<serde_json::Value>) -> Self {
        self.config.insert(key.to_owned(), value.into());
        self
    }

    pub fn with_command<S: Into<String>>(mut self, command: impl IntoIterator<Item = S>) -> Self {
        self.command = Some(command.into_iter().map(Into::into).collect());
        self
    }

    pub fn load(path: &Path) -> Result<Self, BackendError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BackendError::Config(format!("{}: {e}", path.display())))?;
        let mut d: BackendDescriptor = serde_json::from_str(&text)
            .map_err(|e| BackendError::Config(format!("{}: {e}", path.display())))?;
        d.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(d)
    }

    pub fn timeout(&self) -> Duration {
        self.timeout_secs
            .filter(|s| s.is_finite() && *s > 0.0)
            .map(Duration::from_secs_f64)
            .unwrap_or(DEFAULT_TIMEOUT)
    }

    pub fn config_str(&self, key: &str) -> Result<Option<&str>, BackendError> {
        match self.config.get(key) {
            None => Ok(None),
            Some(serde_json::Value::String(s)) => Ok(Some(s)),
            Some(v) => Err(BackendError::Config(format!(
                "{}: config {key:?} must be a string, got {v}",
                self.name
            ))),
        }
    }

    pub fn config_f64(&self, key: &str) -> Result<Option<f64>, BackendError> {
        match self.config.get(key) {
            None => Ok(None),
            Some(v) => v.as_f64().map(Some).ok_or_else(|| {
                BackendError::Config(format!(
                    "{}: config {key:?} must be a number, got {v}",
                    self.name
                ))
            }),
        }
    }

    pub fn config_path(&self, key: &str) -> Result<Option<PathBuf>, BackendError> {
        Ok(self.config_str(key)?.map(|p| self.base_dir.join(p)))
    }

    /// The group a detector descriptor declares it serves, if any.
    pub fn group(&self) -> Result<Option<VehicleGroup>, BackendError> {
        self.config_str("group")?
            .map(|g| {
                g.parse()
                    .map_err(|e| BackendError::Config(format!("{}: {e}", self.name)))
            })
            .transpose()
    }

    /// Detector confidence cutoff applied before merging.
    pub fn score_floor(&self) -> Result<Option<f64>, BackendError> {
        self.config_f64("score_floor")
    }

    fn expect_kind(&self, kind: BackendKind) -> Result<(), BackendError> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(BackendError::Config(format!(
                "backend {:?} is a {}, expected a {kind}",
                self.name, self.kind
            )))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorRequest {
    pub image_id: String,
    pub image_path: PathBuf,
    pub group: VehicleGroup,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredBox {
    pub bbox: BoundingBox,
    pub score: f64,
}

pub trait Detector {
    fn descriptor(&self) -> &BackendDescriptor;
    fn detect_raw(&mut self, request: &DetectorRequest) -> Result<Vec<RawBox>, BackendError>;
}

pub trait Classifier {
    fn descriptor(&self) -> &BackendDescriptor;
    fn classify_raw(&mut self, crop: &Path) -> Result<Vec<f64>, BackendError>;
}

pub trait Translator {
    fn descriptor(&self) -> &BackendDescriptor;
    /// Writes the translated version of `input` to `output`.
    fn translate_raw(&mut self, input: &Path, output: &Path) -> Result<(), BackendError>;
}

/// Runs a detector and validates what comes back.
pub fn detect(
    backend: &mut dyn Detector,
    request: &DetectorRequest,
) -> Result<Vec<ScoredBox>, BackendError> {
    let d = backend.descriptor();
    d.expect_kind(BackendKind::Detector)?;
    if let Some(g) = d.group()? {
        if g != request.group {
            return Err(BackendError::Failure(format!(
                "detector {:?} serves {g}, asked for {}",
                d.name, request.group
            )));
        }
    }
    backend
        .detect_raw(request)?
        .into_iter()
        .map(|r| {
            let bbox = BoundingBox::new(r.cx, r.cy, r.w, r.h)
                .map_err(|e| BackendError::Failure(format!("detector returned {e}")))?;
            if !(0.0..=1.0).contains(&r.score) {
                return Err(BackendError::Failure(format!(
                    "detector returned score {} outside [0,1]",
                    r.score
                )));
            }
            Ok(ScoredBox {
                bbox,
                score: r.score,
            })
        })
        .collect()
}

/// Runs a classifier; the response must be a valid 12-way distribution.
pub fn classify(backend: &mut dyn Classifier, crop: &Path) -> Result<ClassProbs, BackendError> {
    backend.descriptor().expect_kind(BackendKind::Classifier)?;
    let raw = backend.classify_raw(crop)?;
    ClassProbs::new(&raw).map_err(|e| BackendError::Failure(format!("classifier returned {e}")))
}

/// Runs a translator; the output image must have the input's dimensions.
pub fn translate(
    backend: &mut dyn Translator,
    input: &Path,
    output: &Path,
) -> Result<(), BackendError> {
    backend.descriptor().expect_kind(BackendKind::Translator)?;
    let before = crate::imaging::image_dims(input).map_err(BackendError::Failure)?;
    backend.translate_raw(input, output)?;
    let after = crate::imaging::image_dims(output).map_err(BackendError::Failure)?;
    if before != after {
        return Err(BackendError::Failure(format!(
            "translator changed dimensions from {before:?} to {after:?}"
        )));
    }
    Ok(())
}

/// Translates a batch of crops in order; one result per input.
pub fn translate_batch(
    backend: &mut dyn Translator,
    jobs: &[(PathBuf, PathBuf)],
) -> Vec<Result<(), BackendError>> {
    jobs.iter().map(|(i, o)| translate(backend, i, o)).collect()
}

/// Derives a per-item seed from a base seed and some identifying bytes, so
/// mock output depends only on content and never on call order.
pub fn stable_seed(seed: u64, key: &[u8]) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(key);
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

/// A backend of any kind, as produced by [`open_backend`].
pub enum AnyBackend {
    Detector(Box<dyn Detector + Send>),
    Classifier(Box<dyn Classifier + Send>),
    Translator(Box<dyn Translator + Send>),
}

/// Instantiates the backend a descriptor describes. `default_seed` seeds
/// mocks whose descriptor has no `seed` of its own.
pub fn open_backend(
    descriptor: &BackendDescriptor,
    default_seed: u64,
) -> Result<AnyBackend, BackendError> {
    match descriptor.transport {
        Transport::InProcessMock => mock::open_mock(descriptor, default_seed),
        Transport::SubprocessStream => {
            let client = subprocess::SubprocessBackend::new(descriptor.clone())?;
            Ok(match descriptor.kind {
                BackendKind::Detector => AnyBackend::Detector(Box::new(client)),
                BackendKind::Classifier => AnyBackend::Classifier(Box::new(client)),
                BackendKind::Translator => AnyBackend::Translator(Box::new(client)),
            })
        }
    }
}

pub fn open_detector(
    d: &BackendDescriptor,
    default_seed: u64,
) -> Result<Box<dyn Detector + Send>, BackendError> {
    d.expect_kind(BackendKind::Detector)?;
    match open_backend(d, default_seed)? {
        AnyBackend::Detector(b) => Ok(b),
        _ => unreachable!("kind checked above"),
    }
}

pub fn open_classifier(
    d: &BackendDescriptor,
    default_seed: u64,
) -> Result<Box<dyn Classifier + Send>, BackendError> {
    d.expect_kind(BackendKind::Classifier)?;
    match open_backend(d, default_seed)? {
        AnyBackend::Classifier(b) => Ok(b),
        _ => unreachable!("kind checked above"),
    }
}

pub fn open_translator(
    d: &BackendDescriptor,
    default_seed: u64,
) -> Result<Box<dyn Translator + Send>, BackendError> {
    d.expect_kind(BackendKind::Translator)?;
    match open_backend(d, default_seed)? {
        AnyBackend::Translator(b) => Ok(b),
        _ => unreachable!("kind checked above"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Canned {
        d: BackendDescriptor,
        boxes: Vec<RawBox>,
        probs: Vec<f64>,
    }

    impl Detector for Canned {
        fn descriptor(&self) -> &BackendDescriptor {
            &self.d
        }
        fn detect_raw(&mut self, _: &DetectorRequest) -> Result<Vec<RawBox>, BackendError> {
            Ok(self.boxes.clone())
        }
    }

    impl Classifier for Canned {
        fn descriptor(&self) -> &BackendDescriptor {
            &self.d
        }
        fn classify_raw(&mut self, _: &Path) -> Result<Vec<f64>, BackendError> {
            Ok(self.probs.clone())
        }
    }

    fn request(group: VehicleGroup) -> DetectorRequest {
        DetectorRequest {
            image_id: "f".into(),
            image_path: "f.png".into(),
            group,
        }
    }

    fn raw(cx: f64, score: f64) -> RawBox {
        RawBox {
            cx,
            cy: 0.5,
            w: 0.1,
            h: 0.1,
            score,
        }
    }

    #[test]
    fn detect_validates_boxes_scores_and_group() {
        let d = BackendDescriptor::new(BackendKind::Detector, "c", Transport::InProcessMock)
            .with_config("group", "car_group");
        let mut ok = Canned {
            d: d.clone(),
            boxes: vec![raw(0.5, 0.7)],
            probs: vec![],
        };
        assert_eq!(
            detect(&mut ok, &request(VehicleGroup::Car)).unwrap().len(),
            1
        );
        assert!(detect(&mut ok, &request(VehicleGroup::Motorbike)).is_err());

        let mut bad_box = Canned {
            d: d.clone(),
            boxes: vec![raw(1.5, 0.7)],
            probs: vec![],
        };
        assert!(detect(&mut bad_box, &request(VehicleGroup::Car)).is_err());
        let mut bad_score = Canned {
            d,
            boxes: vec![raw(0.5, 1.2)],
            probs: vec![],
        };
        assert!(detect(&mut bad_score, &request(VehicleGroup::Car)).is_err());
    }

    #[test]
    fn classify_rejects_invalid_distributions() {
        let d = BackendDescriptor::new(BackendKind::Classifier, "k", Transport::InProcessMock);
        let mut c = Canned {
            d,
            boxes: vec![],
            probs: vec![0.1; 12],
        };
        assert!(matches!(
            classify(&mut c, Path::new("x")),
            Err(BackendError::Failure(_))
        ));
        c.probs = vec![1.0 / 12.0; 12];
        assert!(classify(&mut c, Path::new("x")).is_ok());
    }

    #[test]
    fn descriptor_parsing() {
        let json = r#"{"kind":"detector","name":"yolo-car","transport":"subprocess_stream",
            "config":{"group":"car_group","input_size":"640x482","score_floor":0.3},
            "command":["python3","bridge.py"],"timeout_secs":5}"#;
        let d: BackendDescriptor = serde_json::from_str(json).unwrap();
        assert_eq!(d.group().unwrap(), Some(VehicleGroup::Car));
        assert_eq!(d.score_floor().unwrap(), Some(0.3));
        assert_eq!(d.timeout(), Duration::from_secs(5));
        assert_eq!(d.command.as_deref().unwrap()[1], "bridge.py");

        let dup = r#"{"kind":"detector","name":"x","transport":"in_process_mock",
            "config":{"group":"car_group","group":"motorbike_group"}}"#;
        let err = serde_json::from_str::<BackendDescriptor>(dup).unwrap_err();
        assert!(err.to_string().contains("duplicate config key"));

        let d = BackendDescriptor::new(BackendKind::Classifier, "x", Transport::InProcessMock);
        assert_eq!(d.timeout(), DEFAULT_TIMEOUT);
    }

    #[test]
    fn stable_seed_depends_on_inputs() {
        assert_eq!(stable_seed(1, b"a"), stable_seed(1, b"a"));
        assert_ne!(stable_seed(1, b"a"), stable_seed(2, b"a"));
        assert_ne!(stable_seed(1, b"a"), stable_seed(1, b"b"));
    }
}
