//! Conformance harness for external backends.
//!
//! Drives a `subprocess_stream` backend through a fixed request stream and
//! checks request/response pairing, payload validity for the backend's kind
//! (normalized boxes, 12-way distributions, dimension-preserving
//! translation), and that bad requests produce error objects instead of
//! killing the process.

use std::fmt;
use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::Serialize;

use super::protocol::{ProtocolResponse, RequestKind};
use super::subprocess::SubprocessBackend;
use super::{BackendDescriptor, BackendError, BackendKind};
use crate::classmodel::{ClassProbs, ObjectClass, VehicleGroup};
use crate::geometry::BoundingBox;
use crate::{fixture, imaging};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConformanceCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConformanceReport {
    pub backend: String,
    pub kind: BackendKind,
    pub checks: Vec<ConformanceCheck>,
}

impl ConformanceReport {
    pub fn passed(&self) -> bool {
        !self.checks.is_empty() && self.checks.iter().all(|c| c.passed)
    }
}

impl fmt::Display for ConformanceReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(
                f,
                "{} {}: {}",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.detail
            )?;
        }
        write!(
            f,
            "{} ({}): {}",
            self.backend,
            self.kind,
            if self.passed() {
                "conformant"
            } else {
                "NOT conformant"
            }
        )
    }
}

struct Harness {
    backend: SubprocessBackend,
    checks: Vec<ConformanceCheck>,
}

impl Harness {
    fn record(&mut self, name: &str, result: Result<String, String>) -> bool {
        let passed = result.is_ok();
        self.checks.push(ConformanceCheck {
            name: name.to_owned(),
            passed,
            detail: result.unwrap_or_else(|e| e),
        });
        passed
    }

    fn request(
        &mut self,
        kind: RequestKind,
        image: &Path,
        group: Option<VehicleGroup>,
        out: Option<&Path>,
    ) -> Result<ProtocolResponse, String> {
        let resp = self
            .backend
            .call(kind, image, group, out)
            .map_err(|e: BackendError| e.to_string())?;
        if let Some(k) = resp.kind {
            if k != kind {
                return Err(format!("response kind {k:?} for a {kind:?} request"));
            }
        }
        Ok(resp)
    }
}

fn check_payload(
    kind: BackendKind,
    resp: &ProtocolResponse,
    input: &Path,
    out: Option<&Path>,
) -> Result<String, String> {
    if let Some(e) = &resp.error {
        return Err(format!("error object for a valid request: {e}"));
    }
    match kind {
        BackendKind::Detector => {
            let boxes = resp.boxes.as_ref().ok_or("missing `boxes`")?;
            for b in boxes {
                BoundingBox::new(b.cx, b.cy, b.w, b.h)
                    .map_err(|e| format!("box not normalized: {e}"))?;
                if !(0.0..=1.0).contains(&b.score) {
                    return Err(format!("score {} outside [0,1]", b.score));
                }
            }
            Ok(format!("{} normalized boxes", boxes.len()))
        }
        BackendKind::Classifier => {
            let probs = resp.probs.as_ref().ok_or("missing `probs`")?;
            ClassProbs::new(probs).map_err(|e| e.to_string())?;
            Ok("valid 12-way distribution".into())
        }
        BackendKind::Translator => {
            let out = out.expect("translate requests carry an output path");
            resp.out_path.as_ref().ok_or("missing `out_path`")?;
            let before = imaging::image_dims(input)?;
            let after = imaging::image_dims(out)?;
            if before != after {
                return Err(format!("dimensions changed from {before:?} to {after:?}"));
            }
            Ok(format!("output {}x{} matches input", after.0, after.1))
        }
    }
}

/// Runs the harness against `descriptor`, using `work_dir` for test images.
pub fn run_conformance(
    descriptor: &BackendDescriptor,
    work_dir: &Path,
) -> Result<ConformanceReport, BackendError> {
    std::fs::create_dir_all(work_dir)
        .map_err(|e| BackendError::Config(format!("{}: {e}", work_dir.display())))?;
    let image = work_dir.join("conformance_frame.png");
    let mut img = RgbImage::from_pixel(64, 48, fixture::BACKGROUND);
    let class = ObjectClass::from_index(0).expect("index 0");
    for y in 10..38 {
        for x in 12..52 {
            img.put_pixel(x, y, fixture::class_color(class));
        }
    }
    imaging::save_png(&img, &image).map_err(BackendError::Config)?;

    let kind = descriptor.kind;
    let group = descriptor.group()?.unwrap_or(VehicleGroup::Car);
    let mut h = Harness {
        backend: SubprocessBackend::new(descriptor.clone())?,
        checks: Vec::new(),
    };
    let req_kind = match kind {
        BackendKind::Detector => RequestKind::Detect,
        BackendKind::Classifier => RequestKind::Classify,
        BackendKind::Translator => RequestKind::Translate,
    };
    let out_path = |i: usize| -> Option<PathBuf> {
        (kind == BackendKind::Translator).then(|| work_dir.join(format!("conformance_out_{i}.png")))
    };
    let group_arg = (kind == BackendKind::Detector).then_some(group);

    // valid requests, checked for pairing and payload
    let mut all_valid = true;
    for i in 0..3 {
        let out = out_path(i);
        let result = h
            .request(req_kind, &image, group_arg, out.as_deref())
            .and_then(|r| check_payload(kind, &r, &image, out.as_deref()));
        all_valid &= h.record(&format!("valid-request-{}", i + 1), result);
        if !all_valid {
            break;
        }
    }

    // unreadable input must produce an error object, not a dead process
    let missing = work_dir.join("does_not_exist.png");
    let out = out_path(9);
    let result = match h.request(req_kind, &missing, group_arg, out.as_deref()) {
        Ok(r) if r.error.is_some() => Ok("error object returned".into()),
        Ok(_) => Err("missing image accepted without error".into()),
        Err(e) => Err(e),
    };
    h.record("error-object-on-missing-image", result);

    if kind == BackendKind::Detector {
        let other = match group {
            VehicleGroup::Car => VehicleGroup::Motorbike,
            VehicleGroup::Motorbike => VehicleGroup::Car,
        };
        let result = match h.request(RequestKind::Detect, &image, Some(other), None) {
            Ok(r) if r.error.is_some() => Ok(format!("{other} request refused")),
            Ok(_) => Err(format!("detector for {group} answered a {other} request")),
            Err(e) => Err(e),
        };
        h.record("error-object-on-wrong-group", result);
    }

    let out = out_path(10);
    let result = h
        .request(req_kind, &image, group_arg, out.as_deref())
        .and_then(|r| check_payload(kind, &r, &image, out.as_deref()))
        .map(|_| "process still serving after error objects".to_owned());
    h.record("alive-after-errors", result);

    Ok(ConformanceReport {
        backend: descriptor.name.clone(),
        kind,
        checks: h.checks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::Transport;

    #[test]
    fn non_conformant_adapter_fails() {
        // answers every request with probabilities that do not sum to one
        let script = r#"while IFS= read -r line; do
  id=$(printf '%s' "$line" | sed -E 's/.*"request_id":([0-9]+).*/\1/')
  printf '{"request_id":%s,"kind":"classify","probs":[0.5,0.5,0.5,0,0,0,0,0,0,0,0,0]}\n' "$id"
done"#;
        let d = BackendDescriptor::new(BackendKind::Classifier, "bad", Transport::SubprocessStream)
            .with_command(["sh", "-c", script]);
        let dir = tempfile::tempdir().unwrap();
        let report = run_conformance(&d, dir.path()).unwrap();
        assert!(!report.passed());
        assert!(!report.checks[0].passed);
        assert!(report.to_string().contains("NOT conformant"));
    }
}
