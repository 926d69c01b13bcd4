//! JSON Lines protocol spoken by external backend processes.
//!
//! The parent writes one request object per line to the child's stdin and
//! reads exactly one response line per request from its stdout, in order.
//! Images travel by file path.
//!
//! ```text
//! -> {"request_id":1,"kind":"detect","image_path":"/d/f.png","group":"car_group"}
//! <- {"request_id":1,"kind":"detect","boxes":[{"cx":0.5,"cy":0.5,"w":0.1,"h":0.2,"score":0.9}]}
//! -> {"request_id":2,"kind":"classify","image_path":"/d/crop.png"}
//! <- {"request_id":2,"kind":"classify","probs":[0.0, ..., 1.0]}
//! -> {"request_id":3,"kind":"translate","image_path":"/d/crop.png","out_path":"/d/cut.png"}
//! <- {"request_id":3,"kind":"translate","out_path":"/d/cut.png"}
//! <- {"request_id":4,"kind":"detect","error":"model serves car_group only"}
//! ```
//!
//! Boxes are normalized center format. Request ids start at 1 and increase
//! by one per request.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{AnyBackend, BackendError, DetectorRequest};
use crate::classmodel::VehicleGroup;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestKind {
    Detect,
    Classify,
    Translate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolRequest {
    pub request_id: u64,
    pub kind: RequestKind,
    pub image_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<VehicleGroup>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_path: Option<String>,
}

/// A detector box as it crosses the wire, before validation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolResponse {
    pub request_id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<RequestKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boxes: Option<Vec<RawBox>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probs: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl ProtocolResponse {
    pub fn error(request_id: u64, kind: Option<RequestKind>, message: impl Into<String>) -> Self {
        Self {
            request_id,
            kind,
            boxes: None,
            probs: None,
            out_path: None,
            error: Some(message.into()),
        }
    }

    fn ok(request_id: u64, kind: RequestKind) -> Self {
        Self {
            request_id,
            kind: Some(kind),
            boxes: None,
            probs: None,
            out_path: None,
            error: None,
        }
    }
}

/// Answers one request with a local backend. Requests naming an image that
/// does not exist are refused before the backend sees them.
pub fn handle_request(backend: &mut AnyBackend, req: &ProtocolRequest) -> ProtocolResponse {
    let fail =
        |e: BackendError| ProtocolResponse::error(req.request_id, Some(req.kind), e.to_string());
    let image = PathBuf::from(&req.image_path);
    if !image.is_file() {
        return ProtocolResponse::error(
            req.request_id,
            Some(req.kind),
            format!("no image at {}", req.image_path),
        );
    }
    match (backend, req.kind) {
        (AnyBackend::Detector(d), RequestKind::Detect) => {
            let Some(group) = req.group else {
                return ProtocolResponse::error(
                    req.request_id,
                    Some(req.kind),
                    "detect request needs `group`",
                );
            };
            let image_id = image
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or_default()
                .to_owned();
            let dreq = DetectorRequest {
                image_id,
                image_path: image,
                group,
            };
            match super::detect(d.as_mut(), &dreq) {
                Ok(boxes) => ProtocolResponse {
                    boxes: Some(
                        boxes
                            .into_iter()
                            .map(|b| RawBox {
                                cx: b.bbox.cx,
                                cy: b.bbox.cy,
                                w: b.bbox.w,
                                h: b.bbox.h,
                                score: b.score,
                            })
                            .collect(),
                    ),
                    ..ProtocolResponse::ok(req.request_id, req.kind)
                },
                Err(e) => fail(e),
            }
        }
        (AnyBackend::Classifier(c), RequestKind::Classify) => {
            match super::classify(c.as_mut(), &image) {
                Ok(p) => ProtocolResponse {
                    probs: Some(p.as_slice().to_vec()),
                    ..ProtocolResponse::ok(req.request_id, req.kind)
                },
                Err(e) => fail(e),
            }
        }
        (AnyBackend::Translator(t), RequestKind::Translate) => {
            let Some(out) = req.out_path.as_deref() else {
                return ProtocolResponse::error(
                    req.request_id,
                    Some(req.kind),
                    "translate request needs `out_path`",
                );
            };
            match super::translate(t.as_mut(), &image, Path::new(out)) {
                Ok(()) => ProtocolResponse {
                    out_path: Some(out.to_owned()),
                    ..ProtocolResponse::ok(req.request_id, req.kind)
                },
                Err(e) => fail(e),
            }
        }
        (_, kind) => ProtocolResponse::error(
            req.request_id,
            Some(kind),
            "request kind not served by this backend",
        ),
    }
}

/// Serves requests from `input` until end of stream, one response line per
/// request line. Malformed requests get an error object, never a crash.
pub fn serve(
    backend: &mut AnyBackend,
    input: impl BufRead,
    mut output: impl Write,
) -> std::io::Result<()> {
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let response = match serde_json::from_str::<ProtocolRequest>(&line) {
            Ok(req) => handle_request(backend, &req),
            Err(e) => {
                let id = serde_json::from_str::<serde_json::Value>(&line)
                    .ok()
                    .and_then(|v| v.get("request_id").and_then(|i| i.as_u64()))
                    .unwrap_or(0);
                ProtocolResponse::error(id, None, format!("malformed request: {e}"))
            }
        };
        serde_json::to_writer(&mut output, &response)?;
        output.write_all(b"\n")?;
        output.flush()?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wire_format_field_names() {
        let req = ProtocolRequest {
            request_id: 7,
            kind: RequestKind::Detect,
            image_path: "/x/f.png".into(),
            group: Some(VehicleGroup::Motorbike),
            out_path: None,
        };
        assert_eq!(
            serde_json::to_string(&req).unwrap(),
            r#"{"request_id":7,"kind":"detect","image_path":"/x/f.png","group":"motorbike_group"}"#
        );
        let resp: ProtocolResponse = serde_json::from_str(
            r#"{"request_id":2,"kind":"classify","probs":[1,0,0,0,0,0,0,0,0,0,0,0]}"#,
        )
        .unwrap();
        assert_eq!(resp.probs.unwrap()[0], 1.0);
        assert!(
            serde_json::from_str::<ProtocolResponse>(r#"{"request_id":2,"result":1}"#).is_err()
        );
    }
}
