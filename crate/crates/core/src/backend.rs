//! Pluggable model backends: the STR predictor, the language model and the
//! image embedder, each with a remote (HTTP) and an offline implementation.
//!
//! Cassette layout for replay and recording:
//!
//! ```text
//! <cassette>/str/<key>.png    next-STR predictions
//! <cassette>/llm/<key>.json   {"text": "..."} language-model responses
//! ```

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::{ActionInstruction, GuiImage};
use crate::prompts::PromptKind;

/// One language-model call: a prompt with ordered image attachments.
#[derive(Debug, Clone)]
pub struct LlmRequest {
    /// Which template produced the prompt. Not sent over the wire.
    pub kind: PromptKind,
    pub prompt: String,
    pub images_png: Vec<Vec<u8>>,
    pub deterministic: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct LlmWireRequest {
    prompt: String,
    images_png_b64: Vec<String>,
    deterministic: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct LlmWireResponse {
    text: String,
}

impl LlmRequest {
    pub fn new(kind: PromptKind, prompt: impl Into<String>, images: &[&GuiImage]) -> Self {
        LlmRequest {
            kind,
            prompt: prompt.into(),
            images_png: images.iter().map(|i| i.encode_png()).collect(),
            deterministic: true,
        }
    }

    fn wire(&self) -> LlmWireRequest {
        LlmWireRequest {
            prompt: self.prompt.clone(),
            images_png_b64: self.images_png.iter().map(|b| B64.encode(b)).collect(),
            deterministic: self.deterministic,
        }
    }

    pub fn wire_body(&self) -> Vec<u8> {
        serde_json::to_vec(&self.wire()).expect("request serializes")
    }

    /// Lowercase hex SHA-256 of the wire body.
    pub fn cassette_key(&self) -> String {
        hex::encode(Sha256::digest(self.wire_body()))
    }
}

pub trait LlmBackend: Send + Sync {
    fn complete(&self, req: &LlmRequest) -> Result<String>;
}

impl<T: LlmBackend + ?Sized> LlmBackend for Arc<T> {
    fn complete(&self, req: &LlmRequest) -> Result<String> {
        (**self).complete(req)
    }
}

impl<T: LlmBackend + ?Sized> LlmBackend for &T {
    fn complete(&self, req: &LlmRequest) -> Result<String> {
        (**self).complete(req)
    }
}

/// A backend answering from a closure; used for scripted runs and tests.
pub struct FnLlm<F>(pub F);

impl<F> LlmBackend for FnLlm<F>
where
    F: Fn(&LlmRequest) -> Result<String> + Send + Sync,
{
    fn complete(&self, req: &LlmRequest) -> Result<String> {
        (self.0)(req)
    }
}

/// Next-STR generator: same dimensions in, same dimensions out.
pub trait StrPredictor: Send + Sync {
    fn predict(&self, str_image: &GuiImage, action: &ActionInstruction) -> Result<GuiImage>;
}

impl<T: StrPredictor + ?Sized> StrPredictor for Arc<T> {
    fn predict(&self, str_image: &GuiImage, action: &ActionInstruction) -> Result<GuiImage> {
        (**self).predict(str_image, action)
    }
}

pub struct FnStrPredictor<F>(pub F);

impl<F> StrPredictor for FnStrPredictor<F>
where
    F: Fn(&GuiImage, &ActionInstruction) -> Result<GuiImage> + Send + Sync,
{
    fn predict(&self, str_image: &GuiImage, action: &ActionInstruction) -> Result<GuiImage> {
        (self.0)(str_image, action)
    }
}

/// Replay key of a STR prediction: lowercase hex SHA-256 over the input PNG
/// length (u64 little-endian), the PNG bytes and the UTF-8 action text.
pub fn str_cassette_key(png: &[u8], action: &ActionInstruction) -> String {
    let mut h = Sha256::new();
    h.update((png.len() as u64).to_le_bytes());
    h.update(png);
    h.update(action.as_str().as_bytes());
    hex::encode(h.finalize())
}

/// Maps a screen to a unit-norm feature vector.
pub trait EmbeddingBackend: Send + Sync {
    fn embed(&self, img: &GuiImage) -> Result<Vec<f64>>;
}

impl<T: EmbeddingBackend + ?Sized> EmbeddingBackend for Arc<T> {
    fn embed(&self, img: &GuiImage) -> Result<Vec<f64>> {
        (**self).embed(img)
    }
}

pub fn l2_normalize(mut v: Vec<f64>) -> Result<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !norm.is_finite() || norm == 0.0 {
        return Err(Error::Backend("embedding has zero or non-finite norm".into()));
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Ok(v)
}

/// Offline embedder: per-channel 8-bin histograms, each normalized to sum 1,
/// concatenated and scaled to unit L2 norm.
///
/// This exists so evaluation runs without a served visual encoder; its
/// similarities are not comparable with a learned encoder's.
#[derive(Debug, Clone, Copy, Default)]
pub struct HistogramEmbedder;

impl HistogramEmbedder {
    pub const BINS: usize = 8;
}

impl EmbeddingBackend for HistogramEmbedder {
    fn embed(&self, img: &GuiImage) -> Result<Vec<f64>> {
        let mut counts = [[0u64; Self::BINS]; 3];
        for px in img.as_raw().chunks_exact(3) {
            for (ch, &v) in px.iter().enumerate() {
                counts[ch][v as usize * Self::BINS / 256] += 1;
            }
        }
        let n = (img.width() as u64 * img.height() as u64) as f64;
        let v = counts
            .iter()
            .flat_map(|c| c.iter().map(move |&k| k as f64 / n))
            .collect();
        l2_normalize(v)
    }
}

/// HTTP settings shared by the remote backends.
#[derive(Debug, Clone)]
pub struct RemoteSettings {
    pub endpoint: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
    /// Extra attempts after the first; waits double from `backoff_base`.
    pub retries: u32,
    pub backoff_base: Duration,
}

impl RemoteSettings {
    pub fn new(endpoint: impl Into<String>) -> Self {
        RemoteSettings {
            endpoint: endpoint.into(),
            api_key: None,
            timeout: Duration::from_secs(300),
            retries: 3,
            backoff_base: Duration::from_millis(500),
        }
    }
}

struct HttpClient {
    settings: RemoteSettings,
    client: reqwest::blocking::Client,
}

#[derive(Deserialize)]
struct WireError {
    error: String,
}

impl HttpClient {
    fn new(settings: RemoteSettings) -> Result<Self> {
        url::Url::parse(&settings.endpoint)
            .map_err(|e| Error::InvalidInput(format!("bad endpoint {}: {e}", settings.endpoint)))?;
        let client = reqwest::blocking::Client::builder()
            .timeout(settings.timeout)
            .build()
            .map_err(|e| Error::Backend(e.to_string()))?;
        Ok(HttpClient { settings, client })
    }

    fn post_json(&self, url: &str, body: Vec<u8>) -> Result<Vec<u8>> {
        let mut attempt = 0;
        loop {
            let mut req = self
                .client
                .post(url)
                .header("content-type", "application/json")
                .body(body.clone());
            if let Some(key) = &self.settings.api_key {
                req = req.bearer_auth(key);
            }
            let outcome = match req.send() {
                Ok(resp) => {
                    let status = resp.status();
                    let bytes = resp.bytes().map_err(|e| Error::Backend(e.to_string()))?;
                    if status.is_success() {
                        return Ok(bytes.to_vec());
                    }
                    let msg = serde_json::from_slice::<WireError>(&bytes)
                        .map(|e| e.error)
                        .unwrap_or_else(|_| String::from_utf8_lossy(&bytes).into_owned());
                    let retryable = status.is_server_error() || status.as_u16() == 429;
                    (retryable, format!("{url} returned {status}: {msg}"))
                }
                Err(e) => (true, format!("{url}: {e}")),
            };
            let (retryable, msg) = outcome;
            if !retryable || attempt >= self.settings.retries {
                return Err(Error::Backend(msg));
            }
            let wait = self.settings.backoff_base * 2u32.saturating_pow(attempt);
            log::warn!("backend call failed ({msg}); retrying in {wait:?}");
            thread::sleep(wait);
            attempt += 1;
        }
    }
}

/// Language model served behind `POST <endpoint>`
/// `{"prompt","images_png_b64","deterministic"}` -> `{"text"}`.
pub struct RemoteLlm {
    http: HttpClient,
}

impl RemoteLlm {
    pub fn new(settings: RemoteSettings) -> Result<Self> {
        Ok(RemoteLlm {
            http: HttpClient::new(settings)?,
        })
    }
}

impl LlmBackend for RemoteLlm {
    fn complete(&self, req: &LlmRequest) -> Result<String> {
        let bytes = self.http.post_json(&self.http.settings.endpoint, req.wire_body())?;
        let resp: LlmWireResponse = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Backend(format!("malformed LLM response: {e}")))?;
        Ok(resp.text)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct StrWireRequest {
    image_png_b64: String,
    action: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct StrWireResponse {
    image_png_b64: String,
}

/// STR predictor served at `POST <endpoint>/v1/str-predict`.
pub struct RemoteStrPredictor {
    http: HttpClient,
    url: String,
}

impl RemoteStrPredictor {
    pub fn new(settings: RemoteSettings) -> Result<Self> {
        let url = format!("{}/v1/str-predict", settings.endpoint.trim_end_matches('/'));
        Ok(RemoteStrPredictor {
            http: HttpClient::new(settings)?,
            url,
        })
    }
}

impl StrPredictor for RemoteStrPredictor {
    fn predict(&self, str_image: &GuiImage, action: &ActionInstruction) -> Result<GuiImage> {
        let body = serde_json::to_vec(&StrWireRequest {
            image_png_b64: B64.encode(str_image.encode_png()),
            action: action.as_str().to_string(),
        })?;
        let bytes = self.http.post_json(&self.url, body)?;
        let resp: StrWireResponse = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Backend(format!("malformed STR response: {e}")))?;
        let png = B64
            .decode(resp.image_png_b64.as_bytes())
            .map_err(|e| Error::Backend(format!("STR response is not base64: {e}")))?;
        let out = GuiImage::decode_png(&png)
            .map_err(|e| Error::Backend(format!("STR response is not a PNG: {e}")))?;
        if out.dims() != str_image.dims() {
            return Err(Error::Backend(format!(
                "STR predictor returned {:?}, expected {:?}",
                out.dims(),
                str_image.dims()
            )));
        }
        Ok(out)
    }
}

/// Embedder served at `POST <endpoint>` `{"image_png_b64"}` -> `{"embedding":[...]}`.
pub struct RemoteEmbedder {
    http: HttpClient,
}

impl RemoteEmbedder {
    pub fn new(settings: RemoteSettings) -> Result<Self> {
        Ok(RemoteEmbedder {
            http: HttpClient::new(settings)?,
        })
    }
}

#[derive(Deserialize)]
struct EmbedWireResponse {
    embedding: Vec<f64>,
}

impl EmbeddingBackend for RemoteEmbedder {
    fn embed(&self, img: &GuiImage) -> Result<Vec<f64>> {
        let body = serde_json::to_vec(&serde_json::json!({ "image_png_b64": B64.encode(img.encode_png()) }))?;
        let bytes = self.http.post_json(&self.http.settings.endpoint, body)?;
        let resp: EmbedWireResponse = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Backend(format!("malformed embedding response: {e}")))?;
        l2_normalize(resp.embedding)
    }
}

fn llm_path(dir: &Path, key: &str) -> PathBuf {
    dir.join("llm").join(format!("{key}.json"))
}

fn str_path(dir: &Path, key: &str) -> PathBuf {
    dir.join("str").join(format!("{key}.png"))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Answers language-model calls from a cassette directory.
pub struct ReplayLlm {
    dir: PathBuf,
}

impl ReplayLlm {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        ReplayLlm { dir: dir.into() }
    }
}

impl LlmBackend for ReplayLlm {
    fn complete(&self, req: &LlmRequest) -> Result<String> {
        let key = req.cassette_key();
        let path = llm_path(&self.dir, &key);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(Error::ReplayMiss { key })
            }
            Err(e) => return Err(Error::io(path, e)),
        };
        let resp: LlmWireResponse = serde_json::from_slice(&bytes)?;
        Ok(resp.text)
    }
}

/// Forwards to another backend and stores every response in a cassette.
pub struct RecordingLlm<B> {
    inner: B,
    dir: PathBuf,
}

impl<B> RecordingLlm<B> {
    pub fn new(inner: B, dir: impl Into<PathBuf>) -> Self {
        RecordingLlm {
            inner,
            dir: dir.into(),
        }
    }
}

impl<B: LlmBackend> LlmBackend for RecordingLlm<B> {
    fn complete(&self, req: &LlmRequest) -> Result<String> {
        let text = self.inner.complete(req)?;
        let body = serde_json::to_vec_pretty(&LlmWireResponse { text: text.clone() })?;
        write_file(&llm_path(&self.dir, &req.cassette_key()), &body)?;
        Ok(text)
    }
}

/// Answers STR predictions from a cassette directory.
pub struct ReplayStrPredictor {
    dir: PathBuf,
}

impl ReplayStrPredictor {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        ReplayStrPredictor { dir: dir.into() }
    }
}

impl StrPredictor for ReplayStrPredictor {
    fn predict(&self, str_image: &GuiImage, action: &ActionInstruction) -> Result<GuiImage> {
        let key = str_cassette_key(&str_image.encode_png(), action);
        let path = str_path(&self.dir, &key);
        if !path.exists() {
            return Err(Error::ReplayMiss { key });
        }
        let out = GuiImage::load(&path)?;
        if out.dims() != str_image.dims() {
            return Err(Error::Backend(format!(
                "cassette entry {key} is {:?}, expected {:?}",
                out.dims(),
                str_image.dims()
            )));
        }
        Ok(out)
    }
}

pub struct RecordingStrPredictor<P> {
    inner: P,
    dir: PathBuf,
}

impl<P> RecordingStrPredictor<P> {
    pub fn new(inner: P, dir: impl Into<PathBuf>) -> Self {
        RecordingStrPredictor {
            inner,
            dir: dir.into(),
        }
    }
}

impl<P: StrPredictor> StrPredictor for RecordingStrPredictor<P> {
    fn predict(&self, str_image: &GuiImage, action: &ActionInstruction) -> Result<GuiImage> {
        let out = self.inner.predict(str_image, action)?;
        let key = str_cassette_key(&str_image.encode_png(), action);
        write_file(&str_path(&self.dir, &key), &out.encode_png())?;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Rgb;

    #[test]
    fn histogram_embedder_is_unit_norm_and_orthogonal_for_black_white() {
        let black = GuiImage::new(4, 4, Rgb::BLACK).unwrap();
        let white = GuiImage::new(4, 4, Rgb::WHITE).unwrap();
        let e = HistogramEmbedder;
        let b = e.embed(&black).unwrap();
        let w = e.embed(&white).unwrap();
        assert_eq!(b.len(), 24);
        let norm: f64 = b.iter().map(|x| x * x).sum();
        assert!((norm - 1.0).abs() < 1e-12);
        let dot: f64 = b.iter().zip(&w).map(|(x, y)| x * y).sum();
        assert_eq!(dot, 0.0);
        // hand-computed: one bin per channel holds everything -> 1/sqrt(3)
        assert!((b[0] - 1.0 / 3f64.sqrt()).abs() < 1e-12);
        assert!((w[7] - 1.0 / 3f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn replay_miss_names_key_and_recording_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let img = GuiImage::new(3, 2, Rgb([9, 9, 9])).unwrap();
        let action = ActionInstruction::new("click send").unwrap();
        let replay = ReplayStrPredictor::new(dir.path());
        let key = str_cassette_key(&img.encode_png(), &action);
        match replay.predict(&img, &action) {
            Err(Error::ReplayMiss { key: k }) => assert_eq!(k, key),
            other => panic!("expected miss, got {other:?}"),
        }
        let target = GuiImage::new(3, 2, Rgb([1, 2, 3])).unwrap();
        let t2 = target.clone();
        let rec = RecordingStrPredictor::new(FnStrPredictor(move |_: &GuiImage, _: &ActionInstruction| Ok(t2.clone())), dir.path());
        rec.predict(&img, &action).unwrap();
        assert_eq!(replay.predict(&img, &action).unwrap(), target);

        let req = LlmRequest::new(PromptKind::UnchangedSymbols, "p", &[&img]);
        let llm = ReplayLlm::new(dir.path());
        assert!(matches!(llm.complete(&req), Err(Error::ReplayMiss { .. })));
        let rec = RecordingLlm::new(FnLlm(|_: &LlmRequest| Ok("[\"0\"]".to_string())), dir.path());
        rec.complete(&req).unwrap();
        assert_eq!(llm.complete(&req).unwrap(), "[\"0\"]");
    }

    #[test]
    fn cassette_keys_are_lowercase_hex_and_input_sensitive() {
        let img = GuiImage::new(2, 2, Rgb::WHITE).unwrap();
        let png = img.encode_png();
        let a = ActionInstruction::new("scroll down").unwrap();
        let b = ActionInstruction::new("scroll up").unwrap();
        let k = str_cassette_key(&png, &a);
        assert_eq!(k.len(), 64);
        assert!(k.chars().all(|c| c.is_ascii_digit() || ('a'..='f').contains(&c)));
        assert_ne!(k, str_cassette_key(&png, &b));
        assert_eq!(k, str_cassette_key(&png, &a));
    }
}
