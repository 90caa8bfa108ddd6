//! Sources of multimodal token features and descriptive prompts.
//!
//! Three provider modes are supported:
//!
//! * `file-store`: features are read from a directory of tensor files, one
//!   per `(prompt, image_id)` key; descriptive prompts come from the manifest.
//! * `deterministic`: features are seeded pseudo-embeddings and descriptive
//!   prompts are fixture strings. Fully offline.
//! * `remote`: descriptive prompts are requested from an HTTP endpoint and
//!   cached on disk. Feature encoding is never remote.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::seeding::{fnv1a64, Lcg64};
use crate::tensor::Tensor;
use crate::tensor_file::{read_tensor, write_tensor};

pub const DEFAULT_DIRECTIVE: &str = "Describe this image in detail: its main subjects, their \
     attributes and arrangement, the setting, the artistic style, and its overall aesthetic quality.";

/// Token features `[N x D]` for one (prompt, image) pair.
#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalFeatures {
    pub tokens: Tensor,
}

impl MultimodalFeatures {
    pub fn new(tokens: Tensor) -> Result<Self> {
        if tokens.rank() != 2 {
            return Err(Error::Shape(format!(
                "features must be [N x D], got {:?}",
                tokens.dims()
            )));
        }
        if !tokens.is_finite() {
            return Err(Error::InvalidArgument("features contain non-finite values".into()));
        }
        Ok(MultimodalFeatures { tokens })
    }

    pub fn n_tokens(&self) -> usize {
        self.tokens.dims()[0]
    }

    pub fn dim(&self) -> usize {
        self.tokens.dims()[1]
    }

    /// Same shape, all zeros.
    pub fn zeroed(&self) -> Self {
        MultimodalFeatures {
            tokens: Tensor::zeros(self.tokens.dims()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DescriptiveDirective {
    pub text: String,
}

impl DescriptiveDirective {
    pub fn new(text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(Error::InvalidArgument("directive must be non-empty".into()));
        }
        Ok(DescriptiveDirective { text })
    }
}

impl Default for DescriptiveDirective {
    fn default() -> Self {
        DescriptiveDirective {
            text: DEFAULT_DIRECTIVE.to_string(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProviderMode {
    FileStore,
    Deterministic,
    Remote,
}

impl std::str::FromStr for ProviderMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "file-store" => Ok(ProviderMode::FileStore),
            "deterministic" => Ok(ProviderMode::Deterministic),
            "remote" => Ok(ProviderMode::Remote),
            other => Err(Error::Config(format!(
                "unknown provider mode {other:?} (file-store, deterministic, remote)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProviderConfig {
    pub mode: ProviderMode,
    pub store_path: Option<PathBuf>,
    pub endpoint_url: Option<String>,
    pub cache_dir: PathBuf,
    pub model_name: String,
    pub n_tokens: usize,
    pub timeout_secs: u64,
    pub retries: u32,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        ProviderConfig {
            mode: ProviderMode::Deterministic,
            store_path: None,
            endpoint_url: None,
            cache_dir: PathBuf::from(".agiqa-cache"),
            model_name: "mllm".into(),
            n_tokens: 32,
            timeout_secs: 60,
            retries: 2,
        }
    }
}

impl ProviderConfig {
    pub fn validate(&self) -> Result<()> {
        match self.mode {
            ProviderMode::FileStore if self.store_path.is_none() => {
                Err(Error::Config("file-store mode requires store_path".into()))
            }
            ProviderMode::Remote if self.endpoint_url.is_none() => {
                Err(Error::Config("remote mode requires endpoint_url".into()))
            }
            _ if self.n_tokens == 0 => Err(Error::Config("n_tokens must be positive".into())),
            _ => Ok(()),
        }
    }
}

/// Hex store key: FNV-1a of the prompt (big-endian) followed by the raw
/// image id bytes.
pub fn embedding_key(prompt: &str, image_id: &str) -> String {
    let mut key = format!("{:016x}", fnv1a64(prompt.as_bytes()));
    for b in image_id.as_bytes() {
        key.push_str(&format!("{b:02x}"));
    }
    key
}

/// Seeded pseudo-embedding with unit-norm tokens. The seed folds in the
/// image id so that the same prompt differs across images.
pub fn deterministic_embedding(prompt: &str, image_id: &str, n_tokens: usize, dim: usize) -> MultimodalFeatures {
    let mut key = prompt.as_bytes().to_vec();
    key.push(0);
    key.extend_from_slice(image_id.as_bytes());
    let mut lcg = Lcg64::new(fnv1a64(&key));
    let mut data = Vec::with_capacity(n_tokens * dim);
    for _ in 0..n_tokens {
        let mut tok: Vec<f64> = (0..dim).map(|_| lcg.next_signed_unit()).collect();
        let norm = tok.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            tok.iter_mut().for_each(|v| *v /= norm);
        } else {
            tok[0] = 1.0;
        }
        data.extend(tok);
    }
    MultimodalFeatures {
        tokens: Tensor::from_vec(&[n_tokens, dim], data).expect("embedding shape"),
    }
}

/// Writes features into a file store under their key.
pub fn store_embedding(store: &Path, prompt: &str, image_id: &str, f: &MultimodalFeatures) -> Result<PathBuf> {
    fs::create_dir_all(store).map_err(|e| Error::io(store, e))?;
    let path = store.join(embedding_key(prompt, image_id));
    write_tensor(&path, &f.tokens)?;
    Ok(path)
}

/// Fixture description for offline runs, stable per image id.
pub fn fixture_description(image_id: &str) -> String {
    const SUBJECTS: [&str; 6] = [
        "a still life",
        "a landscape",
        "a portrait",
        "an interior",
        "a street scene",
        "an abstract pattern",
    ];
    const LIGHT: [&str; 4] = ["soft", "harsh", "warm", "cool"];
    const STYLE: [&str; 4] = ["photographic", "painterly", "flat illustrated", "cinematic"];
    let h = fnv1a64(image_id.as_bytes());
    format!(
        "{} in a {} style with {} lighting (image {image_id})",
        SUBJECTS[(h % 6) as usize],
        STYLE[((h >> 8) % 4) as usize],
        LIGHT[((h >> 16) % 4) as usize],
    )
}

#[derive(Serialize)]
struct DescribeRequest<'a> {
    directive: &'a str,
    image_b64: String,
    model: &'a str,
}

#[derive(Deserialize)]
struct DescribeResponse {
    description: String,
}

pub struct Provider {
    cfg: ProviderConfig,
    dim: usize,
    remote_calls: AtomicU64,
}

impl Provider {
    /// `dim` is the model dimension every feature tensor must have.
    pub fn new(cfg: ProviderConfig, dim: usize) -> Result<Self> {
        cfg.validate()?;
        Ok(Provider {
            cfg,
            dim,
            remote_calls: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &ProviderConfig {
        &self.cfg
    }

    /// HTTP requests issued so far.
    pub fn remote_calls(&self) -> u64 {
        self.remote_calls.load(Ordering::Relaxed)
    }

    pub fn encode_pair(&self, prompt: &str, image_id: &str) -> Result<MultimodalFeatures> {
        if prompt.is_empty() {
            return Err(Error::InvalidArgument("cannot encode an empty prompt".into()));
        }
        let f = match self.cfg.mode {
            ProviderMode::Deterministic => deterministic_embedding(prompt, image_id, self.cfg.n_tokens, self.dim),
            ProviderMode::FileStore => {
                let store = self.cfg.store_path.as_ref().expect("validated");
                let key = embedding_key(prompt, image_id);
                let path = store.join(&key);
                if !path.exists() {
                    return Err(Error::MissingEmbedding {
                        key,
                        prompt: prompt.to_string(),
                        image_id: image_id.to_string(),
                    });
                }
                MultimodalFeatures::new(read_tensor(&path)?)?
            }
            ProviderMode::Remote => {
                return Err(Error::Provider(
                    "feature encoding is local only; use file-store or deterministic mode".into(),
                ))
            }
        };
        if f.dim() != self.dim {
            return Err(Error::Shape(format!(
                "features for {image_id:?} have dimension {}, model expects {}",
                f.dim(),
                self.dim
            )));
        }
        Ok(f)
    }

    /// Cache file for an image and directive.
    pub fn cache_path(&self, image_bytes: &[u8], directive: &DescriptiveDirective) -> PathBuf {
        let mut h = Sha256::new();
        h.update(image_bytes);
        h.update(directive.text.as_bytes());
        let digest = h.finalize();
        let name: String = digest.iter().map(|b| format!("{b:02x}")).collect();
        self.cfg.cache_dir.join(format!("{name}.txt"))
    }

    pub fn generate_descriptive_prompt(
        &self,
        image_path: &Path,
        image_id: &str,
        manifest_value: Option<&str>,
        directive: &DescriptiveDirective,
    ) -> Result<String> {
        match self.cfg.mode {
            ProviderMode::Deterministic => Ok(fixture_description(image_id)),
            ProviderMode::FileStore => manifest_value.map(str::to_string).ok_or_else(|| {
                Error::Provider(format!(
                    "file-store mode reads p_d from the manifest, but {image_id:?} has none"
                ))
            }),
            ProviderMode::Remote => {
                let bytes = fs::read(image_path).map_err(|e| Error::io(image_path, e))?;
                let cache = self.cache_path(&bytes, directive);
                if let Ok(hit) = fs::read_to_string(&cache) {
                    return Ok(hit);
                }
                let text = self.request_with_retries(&bytes, directive)?;
                write_atomic(&cache, text.as_bytes())?;
                Ok(text)
            }
        }
    }

    fn request_with_retries(&self, image: &[u8], directive: &DescriptiveDirective) -> Result<String> {
        let mut attempt = 0;
        loop {
            match self.request(image, directive) {
                Err(e) if e.is_retriable() && attempt < self.cfg.retries => {
                    attempt += 1;
                    std::thread::sleep(Duration::from_millis(200 * attempt as u64));
                }
                other => return other,
            }
        }
    }

    fn request(&self, image: &[u8], directive: &DescriptiveDirective) -> Result<String> {
        let endpoint = self.cfg.endpoint_url.as_deref().expect("validated");
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(self.cfg.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        let body = DescribeRequest {
            directive: &directive.text,
            image_b64: base64::engine::general_purpose::STANDARD.encode(image),
            model: &self.cfg.model_name,
        };
        self.remote_calls.fetch_add(1, Ordering::Relaxed);
        let http_err = |status: Option<u16>, msg: String| Error::ProviderHttp {
            endpoint: endpoint.to_string(),
            status,
            msg,
        };
        let mut resp = agent
            .post(endpoint)
            .send_json(&body)
            .map_err(|e| http_err(None, e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| http_err(Some(status), e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(http_err(Some(status), text.chars().take(200).collect()));
        }
        let parsed: DescribeResponse =
            serde_json::from_str(&text).map_err(|e| Error::ProviderResponse(e.to_string()))?;
        Ok(parsed.description)
    }
}

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

/// Write-then-rename so concurrent writers of one key leave a whole file.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tmp = dir.join(format!(
        ".{}.{}.{}.tmp",
        path.file_name().map(|n| n.to_string_lossy()).unwrap_or_default(),
        std::process::id(),
        TMP_COUNTER.fetch_add(1, Ordering::Relaxed)
    ));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
