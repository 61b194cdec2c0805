//! Model-runner protocol: bundle export and top-k inference over files
//! exchanged with a subprocess.

pub mod stub;

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::numfmt;
use crate::tensor_store::{read_bundle, TensorBundle};
use crate::{Error, Result};

pub const TOPK: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClassTarget {
    Top1,
    Index(usize),
}

impl std::fmt::Display for ClassTarget {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ClassTarget::Top1 => f.write_str("top1"),
            ClassTarget::Index(i) => write!(f, "{i}"),
        }
    }
}

impl std::str::FromStr for ClassTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "top1" {
            return Ok(ClassTarget::Top1);
        }
        s.parse()
            .map(ClassTarget::Index)
            .map_err(|_| Error::invalid(format!("class {s:?}: expected top1 or an index")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExportRequest {
    pub image: PathBuf,
    pub model: String,
    pub layer: String,
    pub class: ClassTarget,
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestImage {
    pub id: String,
    pub path: String,
}

/// `requests.json`. `classes` lists class indices whose scores every
/// result must report under `score_for_class`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InferRequest {
    pub images: Vec<RequestImage>,
    pub topk: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub classes: Vec<usize>,
}

impl InferRequest {
    pub fn new(images: Vec<RequestImage>, classes: Vec<usize>) -> Self {
        Self {
            images,
            topk: TOPK,
            classes,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferResult {
    pub id: String,
    pub topk_indices: Vec<usize>,
    pub topk_scores: Vec<f64>,
    pub score_for_class: BTreeMap<String, f64>,
    /// Set instead of the prediction when this image failed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl InferResult {
    pub fn top1(&self) -> usize {
        self.topk_indices[0]
    }

    pub fn score(&self, class: usize) -> Option<f64> {
        self.score_for_class.get(&class.to_string()).copied()
    }
}

/// `responses.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferResponse {
    pub results: Vec<InferResult>,
}

impl InferResponse {
    /// Checks the response against its request: one result per image,
    /// top-k lists of the requested length, every score in `[0, 1]` and
    /// every requested class reported.
    pub fn validate(&self, request: &InferRequest) -> Result<()> {
        let wanted: BTreeSet<&str> = request.images.iter().map(|i| i.id.as_str()).collect();
        let got: BTreeSet<&str> = self.results.iter().map(|r| r.id.as_str()).collect();
        if wanted != got || self.results.len() != request.images.len() {
            return Err(Error::Runner(format!(
                "response ids {got:?} do not match request ids {wanted:?}"
            )));
        }
        for r in &self.results {
            if let Some(e) = &r.error {
                return Err(Error::Runner(format!("image {}: {e}", r.id)));
            }
            if r.topk_indices.len() != request.topk || r.topk_scores.len() != request.topk {
                return Err(Error::Runner(format!(
                    "image {}: top-{} lists have {} indices and {} scores",
                    r.id,
                    request.topk,
                    r.topk_indices.len(),
                    r.topk_scores.len()
                )));
            }
            let scores = r.topk_scores.iter().chain(r.score_for_class.values());
            if let Some(bad) = scores.copied().find(|s| !(0.0..=1.0).contains(s)) {
                return Err(Error::Runner(format!("image {}: score {bad} outside [0, 1]", r.id)));
            }
            for c in &request.classes {
                if r.score(*c).is_none() {
                    return Err(Error::Runner(format!("image {}: no score for class {c}", r.id)));
                }
            }
        }
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&InferResult> {
        self.results.iter().find(|r| r.id == id)
    }
}

pub trait ModelRunner: Sync {
    /// Writes a bundle to `request.out` and returns it read back.
    fn export(&self, request: &ExportRequest) -> Result<TensorBundle>;
    /// Returns a validated response.
    fn infer(&self, request: &InferRequest) -> Result<InferResponse>;
}

/// How to launch an external runner.
#[derive(Clone, Debug, PartialEq)]
pub struct RunnerHandle {
    pub command: Vec<String>,
    pub workdir: PathBuf,
    /// Images per `infer` call.
    pub capacity: usize,
    pub timeout: Duration,
}

impl RunnerHandle {
    /// `command` is split with shell quoting rules.
    pub fn new(command: &str, workdir: impl Into<PathBuf>, capacity: usize, timeout: Duration) -> Result<Self> {
        let command = shlex::split(command)
            .filter(|c| !c.is_empty())
            .ok_or_else(|| Error::invalid(format!("runner command {command:?} is empty or badly quoted")))?;
        let handle = Self {
            command,
            workdir: workdir.into(),
            capacity,
            timeout,
        };
        handle.validate()?;
        Ok(handle)
    }

    pub fn validate(&self) -> Result<()> {
        if self.command.is_empty() {
            return Err(Error::invalid("runner command is empty"));
        }
        if self.capacity == 0 {
            return Err(Error::invalid("runner capacity must be at least 1"));
        }
        if self.timeout.is_zero() {
            return Err(Error::invalid("runner timeout must be positive"));
        }
        Ok(())
    }
}

/// A runner reached through subprocess calls. Calls through one instance
/// are serialised.
pub struct SubprocessRunner {
    handle: RunnerHandle,
    lock: Mutex<()>,
}

impl SubprocessRunner {
    pub fn new(handle: RunnerHandle) -> Result<Self> {
        handle.validate()?;
        Ok(Self {
            handle,
            lock: Mutex::new(()),
        })
    }

    pub fn handle(&self) -> &RunnerHandle {
        &self.handle
    }

    fn scratch(&self) -> Result<tempfile::TempDir> {
        fs::create_dir_all(&self.handle.workdir).map_err(|e| Error::io(&self.handle.workdir, e))?;
        tempfile::Builder::new()
            .prefix("advise-runner")
            .tempdir_in(&self.handle.workdir)
            .map_err(|e| Error::io(&self.handle.workdir, e))
    }

    fn run(&self, args: &[String], scratch: &Path) -> Result<()> {
        let _guard = self.lock.lock().unwrap_or_else(|p| p.into_inner());
        let log_path = scratch.join("stderr.log");
        let log = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
        let (program, base) = self.handle.command.split_first().expect("validated command");
        log::debug!("runner: {} {}", self.handle.command.join(" "), args.join(" "));
        let mut child = Command::new(program)
            .args(base)
            .args(args)
            .current_dir(&self.handle.workdir)
            .stdin(Stdio::null())
            .stdout(Stdio::null())
            .stderr(log)
            .spawn()
            .map_err(|e| Error::Runner(format!("cannot start {program:?}: {e}")))?;
        let start = Instant::now();
        let status = loop {
            match child.try_wait() {
                Ok(Some(status)) => break status,
                Ok(None) if start.elapsed() >= self.handle.timeout => {
                    let _ = child.kill();
                    let _ = child.wait();
                    return Err(Error::RunnerTimeout {
                        seconds: self.handle.timeout.as_secs_f64(),
                    });
                }
                Ok(None) => std::thread::sleep(Duration::from_millis(5)),
                Err(e) => return Err(Error::Runner(format!("waiting for runner: {e}"))),
            }
        };
        if !status.success() {
            let stderr = fs::read_to_string(&log_path).unwrap_or_default();
            let tail: Vec<&str> = stderr.lines().rev().take(5).collect();
            let tail: Vec<&str> = tail.into_iter().rev().collect();
            return Err(Error::Runner(format!("runner exited with {status}: {}", tail.join(" | "))));
        }
        Ok(())
    }
}

fn path_arg(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

impl ModelRunner for SubprocessRunner {
    fn export(&self, request: &ExportRequest) -> Result<TensorBundle> {
        let scratch = self.scratch()?;
        let args = vec![
            "export".into(),
            "--image".into(),
            path_arg(&absolute(&request.image)?),
            "--model".into(),
            request.model.clone(),
            "--layer".into(),
            request.layer.clone(),
            "--class".into(),
            request.class.to_string(),
            "--out".into(),
            path_arg(&absolute(&request.out)?),
        ];
        self.run(&args, scratch.path())?;
        read_bundle(&request.out)
    }

    fn infer(&self, request: &InferRequest) -> Result<InferResponse> {
        let mut results = Vec::with_capacity(request.images.len());
        for chunk in request.images.chunks(self.handle.capacity) {
            let part = InferRequest {
                images: chunk
                    .iter()
                    .map(|i| {
                        Ok(RequestImage {
                            id: i.id.clone(),
                            path: path_arg(&absolute(Path::new(&i.path))?),
                        })
                    })
                    .collect::<Result<_>>()?,
                topk: request.topk,
                classes: request.classes.clone(),
            };
            let scratch = self.scratch()?;
            let manifest = scratch.path().join("requests.json");
            let out = scratch.path().join("responses.json");
            numfmt::write_json(&manifest, &part)?;
            self.run(
                &[
                    "infer".into(),
                    "--manifest".into(),
                    path_arg(&manifest),
                    "--out".into(),
                    path_arg(&out),
                ],
                scratch.path(),
            )?;
            let response: InferResponse = numfmt::read_json(&out)?;
            response.validate(&part)?;
            // keep request order regardless of the order the runner wrote
            for img in &part.images {
                results.push(response.get(&img.id).expect("validated").clone());
            }
        }
        Ok(InferResponse { results })
    }
}

fn absolute(p: &Path) -> Result<PathBuf> {
    std::path::absolute(p).map_err(|e| Error::io(p, e))
}
