//! Blocking HTTP client for the wire protocol, with exponential backoff.

use std::time::Duration;

use image::RgbImage;
use serde::de::DeserializeOwned;
use serde::Serialize;

use super::wire::{
    decode_png_b64, encode_png_b64, CaptionRequest, CaptionResponse, EmbedRequest, EmbedResponseBody, InfoResponse,
    Txt2ImgRequest, Txt2ImgResponse,
};
use super::{Backend, BackendEndpoint, BackendInfo, EmbedResponse, GatewayError};

pub struct HttpBackend {
    endpoint: BackendEndpoint,
    agent: ureq::Agent,
}

enum Attempt {
    Retry(String),
    Fatal(GatewayError),
}

impl HttpBackend {
    pub fn new(endpoint: BackendEndpoint) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(endpoint.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self { endpoint, agent }
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.endpoint.base_url.trim_end_matches('/'))
    }

    fn once<T: DeserializeOwned>(&self, path: &str, body: Option<&[u8]>) -> Result<T, Attempt> {
        let url = self.url(path);
        let result = match body {
            Some(b) => self.agent.post(&url).header("content-type", "application/json").send(b),
            None => self.agent.get(&url).call(),
        };
        let mut resp = result.map_err(|e| Attempt::Retry(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .with_config()
            .limit(1 << 30)
            .read_to_string()
            .map_err(|e| Attempt::Retry(e.to_string()))?;
        if status >= 500 {
            return Err(Attempt::Retry(format!("HTTP {status}: {text}")));
        }
        if status >= 400 {
            return Err(Attempt::Fatal(GatewayError::Status { status, body: text }));
        }
        serde_json::from_str(&text).map_err(|e| Attempt::Fatal(GatewayError::Malformed(e.to_string())))
    }

    /// Retries transport failures and 5xx responses only. Requests are
    /// deterministic, so a retried request yields the same payload.
    fn request<T: DeserializeOwned>(&self, path: &str, body: Option<&impl Serialize>) -> Result<T, GatewayError> {
        let bytes = body.map(|b| serde_json::to_vec(b).expect("request serializes"));
        let attempts = self.endpoint.max_retries + 1;
        let mut delay = self.endpoint.backoff;
        let mut last = String::new();
        for attempt in 1..=attempts {
            match self.once(path, bytes.as_deref()) {
                Ok(v) => return Ok(v),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retry(msg)) => {
                    log::warn!("{path}: attempt {attempt}/{attempts} failed: {msg}");
                    last = msg;
                    if attempt < attempts {
                        std::thread::sleep(delay);
                        delay = delay.saturating_mul(2).min(Duration::from_secs(30));
                    }
                }
            }
        }
        Err(GatewayError::Transport {
            attempts,
            message: last,
        })
    }
}

impl Backend for HttpBackend {
    fn info(&self) -> Result<BackendInfo, GatewayError> {
        let r: InfoResponse = self.request("/v1/info", None::<&()>)?;
        Ok(BackendInfo {
            backend_id: r.backend_id,
            embed_dim: r.embed_dim,
        })
    }

    fn txt2img(&self, prompt: &str, n: u32, seed: u64, width: u32, height: u32) -> Result<Vec<RgbImage>, GatewayError> {
        let req = Txt2ImgRequest {
            prompt: prompt.to_string(),
            n,
            seed,
            width,
            height,
        };
        let r: Txt2ImgResponse = self.request("/v1/txt2img", Some(&req))?;
        r.images.iter().map(|s| decode_png_b64(s)).collect()
    }

    fn caption(&self, image: &RgbImage, k: u32) -> Result<Vec<String>, GatewayError> {
        let req = CaptionRequest {
            image: encode_png_b64(image),
            k,
        };
        let r: CaptionResponse = self.request("/v1/caption", Some(&req))?;
        Ok(r.captions)
    }

    fn embed(&self, texts: &[String], images: &[&RgbImage]) -> Result<EmbedResponse, GatewayError> {
        let req = EmbedRequest {
            texts: texts.to_vec(),
            images: images.iter().map(|i| encode_png_b64(i)).collect(),
        };
        let r: EmbedResponseBody = self.request("/v1/embed", Some(&req))?;
        Ok(EmbedResponse {
            dim: r.dim,
            vectors: r.vectors,
        })
    }
}
