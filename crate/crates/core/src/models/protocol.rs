//! Line-delimited JSON protocol for out-of-process model adapters.
//!
//! Each request is one line on the adapter's stdin:
//!
//! ```json
//! {"op": "vqa", "input": "p1.img", "params": {"prompt": "Question: ..."}}
//! ```
//!
//! and each response one line on its stdout:
//!
//! ```json
//! {"ok": true, "result": "red", "error": null}
//! ```
//!
//! | op            | input       | params        | result                            |
//! |---------------|-------------|---------------|-----------------------------------|
//! | `encode_text` | text        |               | array of floats                   |
//! | `encode_image`| image ref   |               | array of floats                   |
//! | `caption`     | image ref   |               | string                            |
//! | `vqa`         | image ref   | `prompt`      | raw answer string                 |
//! | `ocr`         | image ref   | `tau_c`       | `[{"text", "confidence"}]`, unfiltered |
//!
//! Failed responses carry `"error": "<code>: <message>"` where code is one of
//! `image_unreadable`, `input_too_long`, `invalid_input` or `unavailable`.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::PathBuf;
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use super::{
    check_tau_c, threshold_tokens, AdapterConfig, AdapterError, CaptionModel, DetectedText, DualEncoder,
    ImageRef, OcrEngine, OcrToken,
};
use crate::digest;
use crate::embedding::EmbeddingVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Op {
    EncodeText,
    EncodeImage,
    Caption,
    Vqa,
    Ocr,
}

impl Op {
    pub fn as_str(self) -> &'static str {
        match self {
            Op::EncodeText => "encode_text",
            Op::EncodeImage => "encode_image",
            Op::Caption => "caption",
            Op::Vqa => "vqa",
            Op::Ocr => "ocr",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub op: Op,
    pub input: Value,
    #[serde(default)]
    pub params: Map<String, Value>,
}

impl Request {
    pub fn new(op: Op, input: impl Into<Value>) -> Self {
        Self {
            op,
            input: input.into(),
            params: Map::new(),
        }
    }

    pub fn param(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.params.insert(key.to_string(), value.into());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub ok: bool,
    #[serde(default)]
    pub result: Value,
    #[serde(default)]
    pub error: Option<String>,
}

impl Response {
    pub fn success(result: Value) -> Self {
        Self {
            ok: true,
            result,
            error: None,
        }
    }

    pub fn failure(error: &AdapterError) -> Self {
        Self {
            ok: false,
            result: Value::Null,
            error: Some(encode_error(error)),
        }
    }

    fn into_result(self) -> Result<Value, AdapterError> {
        if self.ok {
            Ok(self.result)
        } else {
            Err(decode_error(self.error.as_deref().unwrap_or("unavailable: no error message")))
        }
    }
}

fn encode_error(error: &AdapterError) -> String {
    match error {
        AdapterError::ImageUnreadable { image, reason } => format!("image_unreadable: {image}: {reason}"),
        AdapterError::InputTooLong { len, limit } => format!("input_too_long: {len} > {limit}"),
        AdapterError::InvalidInput(m) => format!("invalid_input: {m}"),
        AdapterError::Unavailable(m) => format!("unavailable: {m}"),
    }
}

fn decode_error(text: &str) -> AdapterError {
    let (code, message) = text.split_once(": ").unwrap_or(("unavailable", text));
    match code {
        "image_unreadable" => {
            let (image, reason) = message.split_once(": ").unwrap_or((message, ""));
            AdapterError::ImageUnreadable {
                image: image.to_string(),
                reason: reason.to_string(),
            }
        }
        "input_too_long" => {
            let parsed = message
                .split_once(" > ")
                .and_then(|(l, r)| Some((l.trim().parse().ok()?, r.trim().parse().ok()?)));
            match parsed {
                Some((len, limit)) => AdapterError::InputTooLong { len, limit },
                None => AdapterError::Unavailable(text.to_string()),
            }
        }
        "invalid_input" => AdapterError::InvalidInput(message.to_string()),
        "unavailable" => AdapterError::Unavailable(message.to_string()),
        _ => AdapterError::Unavailable(text.to_string()),
    }
}

/// Carries one request to an adapter and brings back its response.
pub trait Transport: Send + Sync {
    fn call(&self, request: &Request) -> Result<Response, AdapterError>;
}

/// Answer one request with in-process models.
pub fn dispatch<M>(models: &M, request: &Request) -> Response
where
    M: DualEncoder + CaptionModel + OcrEngine + ?Sized,
{
    let outcome = (|| -> Result<Value, AdapterError> {
        let input = request
            .input
            .as_str()
            .ok_or_else(|| AdapterError::InvalidInput("input must be a string".into()))?;
        let image = ImageRef::new(input);
        Ok(match request.op {
            Op::EncodeText => json!(models.encode_text(input)?.into_vec()),
            Op::EncodeImage => json!(models.encode_image(&image)?.into_vec()),
            Op::Caption => json!(models.caption(&image)?),
            Op::Vqa => {
                let prompt = request
                    .params
                    .get("prompt")
                    .and_then(Value::as_str)
                    .ok_or_else(|| AdapterError::InvalidInput("vqa needs a prompt param".into()))?;
                json!(models.generate(&image, Some(prompt))?)
            }
            Op::Ocr => json!(models.detect(&image)?),
        })
    })();
    match outcome {
        Ok(result) => Response::success(result),
        Err(e) => Response::failure(&e),
    }
}

/// Serve requests line by line until `input` closes. Malformed request lines
/// get an `invalid_input` response rather than ending the session.
pub fn serve<M>(models: &M, input: impl BufRead, mut output: impl Write) -> std::io::Result<()>
where
    M: DualEncoder + CaptionModel + OcrEngine + ?Sized,
{
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let response = match serde_json::from_str::<Request>(&line) {
            Ok(request) => dispatch(models, &request),
            Err(e) => Response::failure(&AdapterError::InvalidInput(e.to_string())),
        };
        serde_json::to_writer(&mut output, &response)?;
        output.write_all(b"\n")?;
        output.flush()?;
    }
    Ok(())
}

/// Transport backed by in-process models; mostly useful for tests.
pub struct LocalTransport<M>(pub M);

impl<M> Transport for LocalTransport<M>
where
    M: DualEncoder + CaptionModel + OcrEngine,
{
    fn call(&self, request: &Request) -> Result<Response, AdapterError> {
        Ok(dispatch(&self.0, request))
    }
}

struct ProcessIo {
    child: Child,
    stdin: Option<ChildStdin>,
    stdout: BufReader<ChildStdout>,
}

/// A long-running adapter process spoken to over its stdin and stdout.
/// Requests are serialized through a mutex.
pub struct ProcessTransport {
    command: Vec<String>,
    io: Mutex<ProcessIo>,
}

impl ProcessTransport {
    pub fn spawn(command: &[String]) -> Result<Self, AdapterError> {
        let (program, args) = command
            .split_first()
            .ok_or_else(|| AdapterError::Unavailable("empty adapter command".into()))?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| AdapterError::Unavailable(format!("cannot start {program:?}: {e}")))?;
        let stdin = child.stdin.take();
        let stdout = BufReader::new(child.stdout.take().expect("stdout is piped"));
        Ok(Self {
            command: command.to_vec(),
            io: Mutex::new(ProcessIo { child, stdin, stdout }),
        })
    }
}

impl Transport for ProcessTransport {
    fn call(&self, request: &Request) -> Result<Response, AdapterError> {
        let broken = |e: &dyn std::fmt::Display| {
            AdapterError::Unavailable(format!("adapter {:?}: {e}", self.command))
        };
        let mut io = self.io.lock().map_err(|e| broken(&e))?;
        let mut line = serde_json::to_string(request).map_err(|e| broken(&e))?;
        line.push('\n');
        let stdin = io.stdin.as_mut().ok_or_else(|| broken(&"stdin closed"))?;
        stdin.write_all(line.as_bytes()).map_err(|e| broken(&e))?;
        stdin.flush().map_err(|e| broken(&e))?;
        let mut reply = String::new();
        if io.stdout.read_line(&mut reply).map_err(|e| broken(&e))? == 0 {
            return Err(broken(&"process closed its output"));
        }
        serde_json::from_str(&reply).map_err(|e| broken(&format!("bad response {reply:?}: {e}")))
    }
}

impl Drop for ProcessTransport {
    fn drop(&mut self) {
        if let Ok(io) = self.io.get_mut() {
            // Closing stdin is the shutdown signal.
            io.stdin.take();
            let _ = io.child.wait();
        }
    }
}

/// Caches successful responses on disk, one file per request digest.
///
/// The digest covers the id of the model serving the op, the op, the input
/// and the params. Each file holds the canonical JSON response.
pub struct CachedTransport<T> {
    inner: T,
    dir: PathBuf,
    config: AdapterConfig,
    locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

impl<T: Transport> CachedTransport<T> {
    pub fn new(inner: T, dir: impl Into<PathBuf>, config: AdapterConfig) -> std::io::Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        Ok(Self {
            inner,
            dir,
            config,
            locks: Mutex::new(HashMap::new()),
        })
    }

    pub fn key(&self, request: &Request) -> String {
        let model_id = match request.op {
            Op::EncodeText | Op::EncodeImage => &self.config.dual_encoder_id,
            Op::Caption | Op::Vqa => &self.config.caption_model_id,
            Op::Ocr => &self.config.ocr_engine_id,
        };
        let input = serde_json::to_string(&request.input).expect("json value serializes");
        let params = serde_json::to_string(&request.params).expect("json map serializes");
        digest::sha256_hex(&[
            model_id.as_bytes(),
            request.op.as_str().as_bytes(),
            input.as_bytes(),
            params.as_bytes(),
        ])
    }

    pub fn path_for(&self, request: &Request) -> PathBuf {
        self.dir.join(format!("{}.json", self.key(request)))
    }

    fn lock_for(&self, key: &str) -> Arc<Mutex<()>> {
        let mut locks = self.locks.lock().unwrap_or_else(|e| e.into_inner());
        locks.entry(key.to_string()).or_default().clone()
    }
}

impl<T: Transport> Transport for CachedTransport<T> {
    fn call(&self, request: &Request) -> Result<Response, AdapterError> {
        let key = self.key(request);
        let path = self.dir.join(format!("{key}.json"));
        let lock = self.lock_for(&key);
        let _guard = lock.lock().unwrap_or_else(|e| e.into_inner());
        if let Ok(text) = std::fs::read_to_string(&path) {
            if let Ok(response) = serde_json::from_str::<Response>(&text) {
                return Ok(response);
            }
            log::warn!("ignoring corrupt cache entry {}", path.display());
        }
        let response = self.inner.call(request)?;
        if response.ok {
            let text = serde_json::to_string(&response).expect("response serializes");
            let tmp = self.dir.join(format!("{key}.json.tmp"));
            let written = std::fs::write(&tmp, text).and_then(|_| std::fs::rename(&tmp, &path));
            if let Err(e) = written {
                log::warn!("cannot write cache entry {}: {e}", path.display());
            }
        }
        Ok(response)
    }
}

impl<T: Transport + ?Sized> Transport for Box<T> {
    fn call(&self, request: &Request) -> Result<Response, AdapterError> {
        (**self).call(request)
    }
}

/// Frozen models reached through a [`Transport`].
pub struct RemoteModels<T> {
    transport: T,
    config: AdapterConfig,
}

impl<T: Transport> RemoteModels<T> {
    pub fn new(transport: T, config: AdapterConfig) -> Self {
        Self { transport, config }
    }

    fn request(&self, request: Request) -> Result<Value, AdapterError> {
        self.transport.call(&request)?.into_result()
    }

    fn vector(&self, request: Request) -> Result<EmbeddingVector, AdapterError> {
        let values: Vec<f32> = serde_json::from_value(self.request(request)?)
            .map_err(|e| AdapterError::Unavailable(format!("bad vector: {e}")))?;
        let vector = EmbeddingVector::new(values).map_err(|e| AdapterError::Unavailable(e.to_string()))?;
        if vector.dim() != self.config.embedding_dim {
            return Err(AdapterError::Unavailable(format!(
                "adapter returned dim {}, configured {}",
                vector.dim(),
                self.config.embedding_dim
            )));
        }
        Ok(vector)
    }

    fn string(&self, request: Request) -> Result<String, AdapterError> {
        match self.request(request)? {
            Value::String(s) => Ok(s),
            other => Err(AdapterError::Unavailable(format!("expected a string, got {other}"))),
        }
    }
}

impl<T: Transport> DualEncoder for RemoteModels<T> {
    fn model_id(&self) -> &str {
        &self.config.dual_encoder_id
    }

    fn dim(&self) -> usize {
        self.config.embedding_dim
    }

    fn encode_text(&self, text: &str) -> Result<EmbeddingVector, AdapterError> {
        if text.trim().is_empty() {
            return Err(AdapterError::InvalidInput("empty text".into()));
        }
        self.vector(Request::new(Op::EncodeText, text))
    }

    fn encode_image(&self, image: &ImageRef) -> Result<EmbeddingVector, AdapterError> {
        self.vector(Request::new(Op::EncodeImage, image.as_str()))
    }
}

impl<T: Transport> CaptionModel for RemoteModels<T> {
    fn model_id(&self) -> &str {
        &self.config.caption_model_id
    }

    fn generate(&self, image: &ImageRef, prompt: Option<&str>) -> Result<String, AdapterError> {
        match prompt {
            None => self.string(Request::new(Op::Caption, image.as_str())),
            Some(prompt) => self.string(Request::new(Op::Vqa, image.as_str()).param("prompt", prompt)),
        }
    }
}

impl<T: Transport> OcrEngine for RemoteModels<T> {
    fn model_id(&self) -> &str {
        &self.config.ocr_engine_id
    }

    fn detect(&self, image: &ImageRef) -> Result<Vec<DetectedText>, AdapterError> {
        let value = self.request(Request::new(Op::Ocr, image.as_str()))?;
        serde_json::from_value(value).map_err(|e| AdapterError::Unavailable(format!("bad ocr result: {e}")))
    }

    fn ocr_tokens(&self, image: &ImageRef, tau_c: f64) -> Result<Vec<OcrToken>, AdapterError> {
        check_tau_c(tau_c)?;
        // The threshold travels along so adapters may prune early; the
        // filtering below is what the pipeline relies on.
        let value = self.request(Request::new(Op::Ocr, image.as_str()).param("tau_c", tau_c))?;
        let detected = serde_json::from_value(value)
            .map_err(|e| AdapterError::Unavailable(format!("bad ocr result: {e}")))?;
        Ok(threshold_tokens(detected, tau_c))
    }
}
