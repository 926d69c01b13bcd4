//! Client side of the JSON Lines protocol: a child process per backend.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::{Duration, Instant};

use super::protocol::{ProtocolRequest, ProtocolResponse, RawBox, RequestKind};
use super::{
    BackendDescriptor, BackendError, Classifier, Detector, DetectorRequest, Translator, Transport,
};

struct Session {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<std::io::Result<String>>,
}

/// A backend served by an external process. The process is spawned lazily
/// and respawned after a timeout or crash; calls are strictly sequential.
pub struct SubprocessBackend {
    descriptor: BackendDescriptor,
    session: Option<Session>,
    next_id: u64,
    lines_read: usize,
}

impl SubprocessBackend {
    pub fn new(descriptor: BackendDescriptor) -> Result<Self, BackendError> {
        if descriptor.transport != Transport::SubprocessStream {
            return Err(BackendError::Config(format!(
                "backend {:?} is not a subprocess_stream backend",
                descriptor.name
            )));
        }
        match descriptor.command.as_deref() {
            Some([_, ..]) => {}
            _ => {
                return Err(BackendError::Config(format!(
                    "backend {:?} has no command",
                    descriptor.name
                )))
            }
        }
        Ok(Self {
            descriptor,
            session: None,
            next_id: 1,
            lines_read: 0,
        })
    }

    pub fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn spawn(&self) -> Result<Session, BackendError> {
        let command = self.descriptor.command.as_deref().expect("checked in new");
        let program = resolve_program(&self.descriptor.base_dir, &command[0]);
        let mut child = Command::new(&program)
            .args(&command[1..])
            .current_dir(if self.descriptor.base_dir.as_os_str().is_empty() {
                Path::new(".")
            } else {
                &self.descriptor.base_dir
            })
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| BackendError::Failure(format!("spawning {}: {e}", program.display())))?;
        let stdin = child.stdin.take().expect("stdin piped");
        let stdout = child.stdout.take().expect("stdout piped");
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Ok(Session {
            child,
            stdin,
            lines: rx,
        })
    }

    fn kill_session(&mut self) {
        if let Some(mut s) = self.session.take() {
            let _ = s.child.kill();
            let _ = s.child.wait();
        }
    }

    /// Sends one request and waits for its response.
    pub fn call(
        &mut self,
        kind: RequestKind,
        image_path: &Path,
        group: Option<crate::classmodel::VehicleGroup>,
        out_path: Option<&Path>,
    ) -> Result<ProtocolResponse, BackendError> {
        let request = ProtocolRequest {
            request_id: self.next_id,
            kind,
            image_path: absolute(image_path).display().to_string(),
            group,
            out_path: out_path.map(|p| absolute(p).display().to_string()),
        };
        self.next_id += 1;
        self.send(&request)
    }

    /// Sends a prepared request. The request id must be the next one in
    /// sequence; use [`SubprocessBackend::call`] unless replaying a stream.
    pub fn send(&mut self, request: &ProtocolRequest) -> Result<ProtocolResponse, BackendError> {
        if self.session.is_none() {
            self.session = Some(self.spawn()?);
        }
        let timeout = self.descriptor.timeout();
        let session = self.session.as_mut().expect("session just created");

        let mut line = serde_json::to_string(request).expect("request serializes");
        line.push('\n');
        if let Err(e) = session
            .stdin
            .write_all(line.as_bytes())
            .and_then(|_| session.stdin.flush())
        {
            let status = wait_briefly(&mut session.child, Duration::from_secs(5));
            self.session = None;
            return Err(if status.is_some_and(|c| c != 0) {
                BackendError::NonzeroExit(status)
            } else {
                BackendError::Failure(format!("writing request: {e}"))
            });
        }

        let deadline = Instant::now() + timeout;
        let received = loop {
            let left = deadline.saturating_duration_since(Instant::now());
            match session.lines.recv_timeout(left) {
                Ok(Ok(l)) if l.trim().is_empty() => continue,
                other => break other,
            }
        };
        let text = match received {
            Ok(Ok(text)) => text,
            Ok(Err(e)) => {
                self.kill_session();
                return Err(BackendError::Failure(format!("reading response: {e}")));
            }
            Err(RecvTimeoutError::Timeout) => {
                self.kill_session();
                return Err(BackendError::Timeout(timeout));
            }
            Err(RecvTimeoutError::Disconnected) => {
                let mut s = self.session.take().expect("session present");
                let status = wait_briefly(&mut s.child, Duration::from_secs(5));
                return Err(match status {
                    Some(0) => BackendError::Failure("backend closed its output".into()),
                    code => BackendError::NonzeroExit(code),
                });
            }
        };
        self.lines_read += 1;
        let line_no = self.lines_read;

        let response: ProtocolResponse = match serde_json::from_str(&text) {
            Ok(r) => r,
            Err(e) => {
                self.kill_session();
                return Err(BackendError::ProtocolViolation {
                    line: line_no,
                    message: format!("malformed response: {e}"),
                });
            }
        };
        if response.request_id != request.request_id {
            self.kill_session();
            return Err(BackendError::ProtocolViolation {
                line: line_no,
                message: format!(
                    "response id {} does not match request id {}",
                    response.request_id, request.request_id
                ),
            });
        }
        Ok(response)
    }

    fn expect_payload<T>(
        &self,
        response: ProtocolResponse,
        pick: impl FnOnce(ProtocolResponse) -> Option<T>,
        what: &str,
    ) -> Result<T, BackendError> {
        if let Some(err) = response.error {
            return Err(BackendError::Failure(format!(
                "{}: {err}",
                self.descriptor.name
            )));
        }
        pick(response).ok_or_else(|| BackendError::ProtocolViolation {
            line: self.lines_read,
            message: format!("response has neither `{what}` nor `error`"),
        })
    }
}

impl Drop for SubprocessBackend {
    fn drop(&mut self) {
        if let Some(mut s) = self.session.take() {
            drop(s.stdin);
            if wait_briefly(&mut s.child, Duration::from_secs(2)).is_none() {
                let _ = s.child.kill();
                let _ = s.child.wait();
            }
        }
    }
}

fn wait_briefly(child: &mut Child, limit: Duration) -> Option<i32> {
    let deadline = Instant::now() + limit;
    loop {
        match child.try_wait() {
            Ok(Some(status)) => return status.code(),
            Ok(None) if Instant::now() < deadline => thread::sleep(Duration::from_millis(10)),
            _ => {
                let _ = child.kill();
                return child.wait().ok().and_then(|s| s.code());
            }
        }
    }
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

/// Programs given as relative paths with a directory part resolve against
/// the descriptor's directory; bare names go through `PATH`.
fn resolve_program(base: &Path, program: &str) -> PathBuf {
    let p = Path::new(program);
    if p.is_relative() && p.components().count() > 1 {
        absolute(&base.join(p))
    } else {
        p.to_path_buf()
    }
}

impl Detector for SubprocessBackend {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn detect_raw(&mut self, request: &DetectorRequest) -> Result<Vec<RawBox>, BackendError> {
        let resp = self.call(
            RequestKind::Detect,
            &request.image_path,
            Some(request.group),
            None,
        )?;
        self.expect_payload(resp, |r| r.boxes, "boxes")
    }
}

impl Classifier for SubprocessBackend {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn classify_raw(&mut self, crop: &Path) -> Result<Vec<f64>, BackendError> {
        let resp = self.call(RequestKind::Classify, crop, None, None)?;
        self.expect_payload(resp, |r| r.probs, "probs")
    }
}

impl Translator for SubprocessBackend {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn translate_raw(&mut self, input: &Path, output: &Path) -> Result<(), BackendError> {
        let resp = self.call(RequestKind::Translate, input, None, Some(output))?;
        self.expect_payload(resp, |r| r.out_path, "out_path")
            .map(|_| ())
    }
}

/// Runs a whole request stream through a fresh process and returns the
/// responses in order. Stops at the first transport-level error.
pub fn run_subprocess_backend(
    descriptor: &BackendDescriptor,
    requests: &[ProtocolRequest],
) -> Result<Vec<ProtocolResponse>, BackendError> {
    let mut backend = SubprocessBackend::new(descriptor.clone())?;
    requests.iter().map(|r| backend.send(r)).collect()
}
