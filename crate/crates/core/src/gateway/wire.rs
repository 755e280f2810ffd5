//! JSON wire protocol spoken by model servers.
//!
//! ```text
//! GET  /v1/info     -> {"backend_id": str, "embed_dim": int}
//! POST /v1/txt2img  {"prompt", "n", "seed", "width", "height"} -> {"images": [base64 png]}
//! POST /v1/caption  {"image": base64 png, "k"} -> {"captions": [str]}
//! POST /v1/embed    {"texts": [str], "images": [base64 png]} -> {"dim", "vectors": [[f64]]}
//! ```
//!
//! Image `i` of a txt2img response must be generated from
//! [`super::image_seed`]`(seed, i)`.

use std::io::Cursor;

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use image::{ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};

use super::{Backend, GatewayError};

#[derive(Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct InfoResponse {
    pub backend_id: String,
    pub embed_dim: usize,
}

#[derive(Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct Txt2ImgRequest {
    pub prompt: String,
    pub n: u32,
    pub seed: u64,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Txt2ImgResponse {
    pub images: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CaptionRequest {
    pub image: String,
    pub k: u32,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CaptionResponse {
    pub captions: Vec<String>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
pub struct EmbedRequest {
    #[serde(default)]
    pub texts: Vec<String>,
    #[serde(default)]
    pub images: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EmbedResponseBody {
    pub dim: usize,
    pub vectors: Vec<Vec<f64>>,
}

pub fn encode_png_b64(image: &RgbImage) -> String {
    let mut buf = Cursor::new(Vec::new());
    image
        .write_to(&mut buf, ImageFormat::Png)
        .expect("PNG encoding into memory cannot fail");
    STANDARD.encode(buf.into_inner())
}

pub fn decode_png_b64(data: &str) -> Result<RgbImage, GatewayError> {
    let bytes = STANDARD
        .decode(data.trim())
        .map_err(|e| GatewayError::Malformed(format!("bad base64: {e}")))?;
    let img = image::load_from_memory_with_format(&bytes, ImageFormat::Png)
        .map_err(|e| GatewayError::Malformed(format!("bad PNG: {e}")))?;
    Ok(img.to_rgb8())
}

fn json<T: Serialize>(status: u16, body: &T) -> (u16, Vec<u8>) {
    (status, serde_json::to_vec(body).expect("response serializes"))
}

fn error(status: u16, message: impl Into<String>) -> (u16, Vec<u8>) {
    json(status, &serde_json::json!({ "error": message.into() }))
}

/// Serve one protocol request from any [`Backend`]. Returns the HTTP status
/// and JSON body; transports wrap this to expose a backend over HTTP.
pub fn dispatch(backend: &dyn Backend, method: &str, path: &str, body: &[u8]) -> (u16, Vec<u8>) {
    fn parse<'a, T: Deserialize<'a>>(body: &'a [u8]) -> Result<T, (u16, Vec<u8>)> {
        serde_json::from_slice(body).map_err(|e| error(400, format!("bad request body: {e}")))
    }
    let result = match (method, path) {
        ("GET", "/v1/info") => backend.info().map(|i| {
            json(
                200,
                &InfoResponse {
                    backend_id: i.backend_id,
                    embed_dim: i.embed_dim,
                },
            )
        }),
        ("POST", "/v1/txt2img") => {
            let req: Txt2ImgRequest = match parse(body) {
                Ok(r) => r,
                Err(resp) => return resp,
            };
            backend
                .txt2img(&req.prompt, req.n, req.seed, req.width, req.height)
                .map(|imgs| {
                    json(
                        200,
                        &Txt2ImgResponse {
                            images: imgs.iter().map(encode_png_b64).collect(),
                        },
                    )
                })
        }
        ("POST", "/v1/caption") => {
            let req: CaptionRequest = match parse(body) {
                Ok(r) => r,
                Err(resp) => return resp,
            };
            let image = match decode_png_b64(&req.image) {
                Ok(i) => i,
                Err(e) => return error(400, e.to_string()),
            };
            backend
                .caption(&image, req.k)
                .map(|captions| json(200, &CaptionResponse { captions }))
        }
        ("POST", "/v1/embed") => {
            let req: EmbedRequest = match parse(body) {
                Ok(r) => r,
                Err(resp) => return resp,
            };
            let images: Result<Vec<RgbImage>, _> = req.images.iter().map(|s| decode_png_b64(s)).collect();
            let images = match images {
                Ok(i) => i,
                Err(e) => return error(400, e.to_string()),
            };
            let refs: Vec<&RgbImage> = images.iter().collect();
            backend.embed(&req.texts, &refs).map(|r| {
                json(
                    200,
                    &EmbedResponseBody {
                        dim: r.dim,
                        vectors: r.vectors,
                    },
                )
            })
        }
        _ => return error(404, format!("no route for {method} {path}")),
    };
    result.unwrap_or_else(|e| error(500, e.to_string()))
}
