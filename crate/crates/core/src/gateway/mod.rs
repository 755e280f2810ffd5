//! Access to the three model capabilities: text-to-image, captioning and
//! embedding. A [`Gateway`] wraps any [`Backend`] (the HTTP client or the
//! offline stub), enforces the in-flight limit and checks every response
//! against the request contract.

mod http;
mod stub;
pub mod wire;

use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use image::RgbImage;
use thiserror::Error;

use crate::prompt::{Caption, CaptionSource};
use crate::rng::derive_seed;

pub use http::HttpBackend;
pub use stub::{color_name, StubBackend, STUB_EMBED_DIM};

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("backend returned HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed backend response: {0}")]
    Malformed(String),
    #[error("backend returned {got} {what} for a request of {expected}")]
    CountMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("backend returned a {got_w}x{got_h} image, expected {want_w}x{want_h}")]
    SizeMismatch {
        want_w: u32,
        want_h: u32,
        got_w: u32,
        got_h: u32,
    },
    #[error("embedding dimension {got} does not match declared {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("embedding request needs at least one input")]
    EmptyInput,
    #[error("embedding vector has zero or non-finite norm")]
    DegenerateVector,
}

/// Unit-norm embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    /// Normalize `values` to unit length.
    pub fn new(values: Vec<f64>) -> Result<Self, GatewayError> {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() || norm == 0.0 {
            return Err(GatewayError::DegenerateVector);
        }
        Ok(Self(values.into_iter().map(|v| v / norm).collect()))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// A generated image and where it came from.
#[derive(Clone, Debug)]
pub struct ImageHandle {
    pub pixels: RgbImage,
    pub prompt: Caption,
    pub gen_seed: u64,
    pub backend_id: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackendInfo {
    pub backend_id: String,
    pub embed_dim: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbedResponse {
    pub dim: usize,
    pub vectors: Vec<Vec<f64>>,
}

/// A model server. Implementations return raw results; [`Gateway`] does the
/// contract checks.
pub trait Backend: Send + Sync {
    fn info(&self) -> Result<BackendInfo, GatewayError>;

    /// Image `i` must be generated from [`image_seed`]`(seed, i)`.
    fn txt2img(&self, prompt: &str, n: u32, seed: u64, width: u32, height: u32) -> Result<Vec<RgbImage>, GatewayError>;

    fn caption(&self, image: &RgbImage, k: u32) -> Result<Vec<String>, GatewayError>;

    fn embed(&self, texts: &[String], images: &[&RgbImage]) -> Result<EmbedResponse, GatewayError>;
}

/// Seed of image `index` within a txt2img request seeded with `seed`.
pub fn image_seed(seed: u64, index: u32) -> u64 {
    derive_seed(seed, "txt2img", index as u64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackendEndpoint {
    pub base_url: String,
    pub timeout: Duration,
    /// Retries after the first attempt.
    pub max_retries: u32,
    pub max_in_flight: usize,
    /// First backoff delay; doubles on every retry.
    pub backoff: Duration,
}

impl BackendEndpoint {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            timeout: Duration::from_secs(120),
            max_retries: 2,
            max_in_flight: 4,
            backoff: Duration::from_millis(200),
        }
    }
}

/// Counting semaphore bounding concurrent backend calls.
struct Permits {
    free: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Permits);

impl Permits {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().unwrap();
        while *free == 0 {
            free = self.cv.wait(free).unwrap();
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap() += 1;
        self.0.cv.notify_one();
    }
}

/// Embedding requests are split into batches of this many inputs.
pub const EMBED_BATCH: usize = 64;

pub struct Gateway {
    backend: Arc<dyn Backend>,
    info: BackendInfo,
    image_size: (u32, u32),
    permits: Permits,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway")
            .field("info", &self.info)
            .field("image_size", &self.image_size)
            .finish()
    }
}

impl Gateway {
    /// Performs the `info` handshake.
    pub fn new(backend: Arc<dyn Backend>, image_size: (u32, u32), max_in_flight: usize) -> Result<Self, GatewayError> {
        let info = backend.info()?;
        if info.embed_dim == 0 {
            return Err(GatewayError::Malformed("backend declares embed_dim 0".into()));
        }
        Ok(Self {
            backend,
            info,
            image_size,
            permits: Permits::new(max_in_flight),
        })
    }

    pub fn http(endpoint: BackendEndpoint, image_size: (u32, u32)) -> Result<Self, GatewayError> {
        let in_flight = endpoint.max_in_flight;
        Self::new(Arc::new(HttpBackend::new(endpoint)), image_size, in_flight)
    }

    pub fn stub(stub: StubBackend, image_size: (u32, u32), max_in_flight: usize) -> Self {
        Self::new(Arc::new(stub), image_size, max_in_flight).expect("stub handshake is infallible")
    }

    pub fn info(&self) -> &BackendInfo {
        &self.info
    }

    pub fn image_size(&self) -> (u32, u32) {
        self.image_size
    }

    pub fn generate_images(&self, prompt: &Caption, n: u32, seed: u64) -> Result<Vec<ImageHandle>, GatewayError> {
        if n == 0 {
            return Ok(Vec::new());
        }
        let (w, h) = self.image_size;
        let images = {
            let _permit = self.permits.acquire();
            self.backend.txt2img(&prompt.text, n, seed, w, h)?
        };
        if images.len() != n as usize {
            return Err(GatewayError::CountMismatch {
                what: "images",
                expected: n as usize,
                got: images.len(),
            });
        }
        images
            .into_iter()
            .enumerate()
            .map(|(i, pixels)| {
                if pixels.dimensions() != (w, h) {
                    return Err(GatewayError::SizeMismatch {
                        want_w: w,
                        want_h: h,
                        got_w: pixels.width(),
                        got_h: pixels.height(),
                    });
                }
                Ok(ImageHandle {
                    pixels,
                    prompt: prompt.clone(),
                    gen_seed: image_seed(seed, i as u32),
                    backend_id: self.info.backend_id.clone(),
                })
            })
            .collect()
    }

    pub fn caption_image(&self, image: &RgbImage, k: u32, provenance: &str) -> Result<Vec<Caption>, GatewayError> {
        if k == 0 {
            return Ok(Vec::new());
        }
        let texts = {
            let _permit = self.permits.acquire();
            self.backend.caption(image, k)?
        };
        if texts.len() != k as usize {
            return Err(GatewayError::CountMismatch {
                what: "captions",
                expected: k as usize,
                got: texts.len(),
            });
        }
        Ok(texts
            .into_iter()
            .map(|t| Caption::new(t, CaptionSource::CdiCaption, provenance))
            .collect())
    }

    /// One vector per input, texts first then images. Large inputs are sent
    /// in batches of [`EMBED_BATCH`].
    pub fn embed(&self, texts: &[String], images: &[&RgbImage]) -> Result<Vec<EmbeddingVector>, GatewayError> {
        if texts.is_empty() && images.is_empty() {
            return Err(GatewayError::EmptyInput);
        }
        let mut out = Vec::with_capacity(texts.len() + images.len());
        for chunk in texts.chunks(EMBED_BATCH) {
            out.extend(self.embed_batch(chunk, &[])?);
        }
        for chunk in images.chunks(EMBED_BATCH) {
            out.extend(self.embed_batch(&[], chunk)?);
        }
        Ok(out)
    }

    pub fn embed_text(&self, text: &str) -> Result<EmbeddingVector, GatewayError> {
        Ok(self.embed(&[text.to_string()], &[])?.remove(0))
    }

    fn embed_batch(&self, texts: &[String], images: &[&RgbImage]) -> Result<Vec<EmbeddingVector>, GatewayError> {
        let resp = {
            let _permit = self.permits.acquire();
            self.backend.embed(texts, images)?
        };
        let expected = texts.len() + images.len();
        if resp.vectors.len() != expected {
            return Err(GatewayError::CountMismatch {
                what: "vectors",
                expected,
                got: resp.vectors.len(),
            });
        }
        if resp.dim != self.info.embed_dim {
            return Err(GatewayError::DimensionMismatch {
                expected: self.info.embed_dim,
                got: resp.dim,
            });
        }
        resp.vectors
            .into_iter()
            .map(|v| {
                if v.len() != resp.dim {
                    return Err(GatewayError::DimensionMismatch {
                        expected: resp.dim,
                        got: v.len(),
                    });
                }
                EmbeddingVector::new(v)
            })
            .collect()
    }
}
