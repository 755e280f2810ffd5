//! Deterministic procedural backend for offline runs and tests.
//!
//! * txt2img: prompts matching a foreground template get one convex polygon
//!   on a near-uniform light background; anything else is a textured canvas
//!   whose base colour is hashed from the prompt tokens.
//! * caption: `a photo of <border colour> background with <centre colour> <shape word>`.
//! * embed: 64-dimensional hashed bag of words. Images are embedded through
//!   their stub caption words plus a small pixel-hash component.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use image::{Rgb, RgbImage};
use rand::Rng;
use sha2::{Digest, Sha256};

use super::{image_seed, Backend, BackendInfo, EmbedResponse, GatewayError};
use crate::config::DEFAULT_FG_TEMPLATES;
use crate::foreground::dominant_color;
use crate::mask::InstanceMask;
use crate::prompt::{tokenize, PromptTemplate};
use crate::rng::derive_rng;

pub const STUB_EMBED_DIM: usize = 64;
const PIXEL_HASH_WEIGHT: f64 = 0.3;

const STOPWORDS: &[&str] = &[
    "a",
    "an",
    "the",
    "of",
    "in",
    "on",
    "with",
    "and",
    "at",
    "to",
    "for",
    "photo",
    "image",
    "picture",
    "real",
    "realistic",
    "background",
];

const SHAPE_WORDS: &[&str] = &["shape", "blob", "object", "form", "figure", "pattern"];

const PALETTE: &[(&str, [u8; 3])] = &[
    ("white", [255, 255, 255]),
    ("black", [0, 0, 0]),
    ("gray", [128, 128, 128]),
    ("red", [220, 30, 30]),
    ("green", [40, 170, 60]),
    ("blue", [40, 70, 200]),
    ("yellow", [235, 220, 50]),
    ("orange", [240, 140, 30]),
    ("purple", [130, 50, 160]),
    ("brown", [130, 80, 40]),
    ("pink", [240, 150, 190]),
    ("cyan", [40, 200, 210]),
];

/// Nearest palette colour name.
pub fn color_name(c: [u8; 3]) -> &'static str {
    let d = |p: [u8; 3]| -> i32 { (0..3).map(|i| (c[i] as i32 - p[i] as i32).pow(2)).sum() };
    PALETTE.iter().min_by_key(|(_, p)| d(*p)).map(|(n, _)| *n).unwrap()
}

/// Shared counters for observing the stub from tests.
#[derive(Debug, Default)]
pub struct StubProbe {
    in_flight: AtomicUsize,
    max_in_flight: AtomicUsize,
    calls: AtomicUsize,
}

impl StubProbe {
    pub fn max_in_flight(&self) -> usize {
        self.max_in_flight.load(Ordering::SeqCst)
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

struct InFlight<'a>(&'a StubProbe);

impl<'a> InFlight<'a> {
    fn enter(p: &'a StubProbe) -> Self {
        p.calls.fetch_add(1, Ordering::SeqCst);
        let now = p.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        p.max_in_flight.fetch_max(now, Ordering::SeqCst);
        Self(p)
    }
}

impl Drop for InFlight<'_> {
    fn drop(&mut self) {
        self.0.in_flight.fetch_sub(1, Ordering::SeqCst);
    }
}

#[derive(Clone)]
pub struct StubBackend {
    fg_templates: Vec<PromptTemplate>,
    latency: Option<Duration>,
    probe: Arc<StubProbe>,
}

impl Default for StubBackend {
    fn default() -> Self {
        Self::new(DEFAULT_FG_TEMPLATES.iter().map(|s| s.to_string()))
    }
}

/// Parameters of the single polygon drawn for a foreground prompt.
#[derive(Clone, Debug)]
struct PolygonScene {
    background: [u8; 3],
    object: [u8; 3],
    vertices: Vec<(f64, f64)>,
}

fn hash64(parts: &[&[u8]]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}

/// Caption vocabulary (palette names, then shape words) owns the leading
/// dimensions; every other token hashes into the rest, so stub captions
/// never overlap class labels.
fn token_bin(tok: &str) -> usize {
    let reserved = PALETTE.iter().map(|(n, _)| *n).chain(SHAPE_WORDS.iter().copied());
    if let Some(i) = reserved.clone().position(|w| w == tok) {
        return i;
    }
    let r = PALETTE.len() + SHAPE_WORDS.len();
    r + hash64(&[b"tok", tok.as_bytes()]) as usize % (STUB_EMBED_DIM - r)
}

fn prompt_key(prompt: &str) -> u64 {
    hash64(&[tokenize(prompt).join(" ").as_bytes()])
}

fn inside_convex(poly: &[(f64, f64)], x: f64, y: f64) -> bool {
    let n = poly.len();
    let mut sign = 0i8;
    for i in 0..n {
        let (x0, y0) = poly[i];
        let (x1, y1) = poly[(i + 1) % n];
        let cross = (x1 - x0) * (y - y0) - (y1 - y0) * (x - x0);
        let s = if cross > 0.0 {
            1
        } else if cross < 0.0 {
            -1
        } else {
            0
        };
        if s != 0 {
            if sign != 0 && s != sign {
                return false;
            }
            sign = s;
        }
    }
    true
}

impl StubBackend {
    pub fn new(fg_templates: impl IntoIterator<Item = String>) -> Self {
        Self {
            fg_templates: fg_templates
                .into_iter()
                .filter_map(|t| PromptTemplate::parse(&t).ok())
                .collect(),
            latency: None,
            probe: Arc::default(),
        }
    }

    /// Sleep this long inside every call (for concurrency tests).
    pub fn with_latency(mut self, latency: Duration) -> Self {
        self.latency = Some(latency);
        self
    }

    pub fn probe(&self) -> Arc<StubProbe> {
        Arc::clone(&self.probe)
    }

    pub fn is_foreground_prompt(&self, prompt: &str) -> bool {
        self.fg_templates.iter().any(|t| t.matches(prompt).is_some())
    }

    fn polygon_scene(&self, prompt: &str, gen_seed: u64, w: u32, h: u32) -> PolygonScene {
        let mut rng = derive_rng(gen_seed, "stub-polygon", prompt_key(prompt));
        let background = [
            rng.random_range(200..=255u8),
            rng.random_range(200..=255u8),
            rng.random_range(200..=255u8),
        ];
        let object = [
            rng.random_range(0..=150u8),
            rng.random_range(0..=150u8),
            rng.random_range(0..=150u8),
        ];
        let n = rng.random_range(3..=8usize);
        let side = w.min(h) as f64;
        let radius = side * rng.random_range(0.22..0.36);
        let cx = w as f64 / 2.0 + side * rng.random_range(-0.05..0.05);
        let cy = h as f64 / 2.0 + side * rng.random_range(-0.05..0.05);
        let step = std::f64::consts::TAU / n as f64;
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let vertices = (0..n)
            .map(|i| {
                let a = phase + i as f64 * step + rng.random_range(-0.3..0.3) * step;
                (cx + radius * a.cos(), cy + radius * a.sin())
            })
            .collect();
        PolygonScene {
            background,
            object,
            vertices,
        }
    }

    /// Ground-truth object raster of the image the stub renders for
    /// `(prompt, gen_seed)`, or `None` for non-foreground prompts.
    pub fn ground_truth(&self, prompt: &str, gen_seed: u64, w: u32, h: u32) -> Option<InstanceMask> {
        if !self.is_foreground_prompt(prompt) {
            return None;
        }
        let scene = self.polygon_scene(prompt, gen_seed, w, h);
        Some(InstanceMask::from_fn(w, h, |x, y| {
            inside_convex(&scene.vertices, x as f64 + 0.5, y as f64 + 0.5)
        }))
    }

    /// Render the image for one generation seed.
    pub fn render(&self, prompt: &str, gen_seed: u64, w: u32, h: u32) -> RgbImage {
        if self.is_foreground_prompt(prompt) {
            let scene = self.polygon_scene(prompt, gen_seed, w, h);
            let mut noise = derive_rng(gen_seed, "stub-noise", 0);
            RgbImage::from_fn(w, h, |x, y| {
                let base = if inside_convex(&scene.vertices, x as f64 + 0.5, y as f64 + 0.5) {
                    scene.object
                } else {
                    scene.background
                };
                let jitter = noise.random_range(-2i16..=2);
                Rgb(base.map(|c| (c as i16 + jitter).clamp(0, 255) as u8))
            })
        } else {
            let key = prompt_key(prompt);
            let base = [(key >> 8) as u8, (key >> 16) as u8, (key >> 24) as u8];
            let mut rng = derive_rng(gen_seed, "stub-texture", key);
            let (fx, fy) = (rng.random_range(1..7u32), rng.random_range(1..7u32));
            let phase = rng.random_range(0..64u32);
            let amp = rng.random_range(8..24i16);
            RgbImage::from_fn(w, h, |x, y| {
                let t = ((x * fx + y * fy + phase) % 64) as i16;
                let wave = (t - 32).abs() * amp / 32 - amp / 2;
                Rgb(base.map(|c| (c as i16 + wave).clamp(0, 255) as u8))
            })
        }
    }

    /// Stub captions for an image.
    pub fn describe(&self, image: &RgbImage, k: u32) -> Vec<String> {
        let (w, h) = image.dimensions();
        let border = color_name(dominant_color(image, |x, y| x < 2 || y < 2 || x + 2 >= w || y + 2 >= h));
        let center = color_name(dominant_color(image, |x, y| {
            x >= w / 4 && x < w - w / 4 && y >= h / 4 && y < h - h / 4
        }));
        let key = hash64(&[image.as_raw()]);
        (0..k)
            .map(|j| {
                let shape = SHAPE_WORDS[((key as usize) + j as usize) % SHAPE_WORDS.len()];
                format!("a photo of {border} background with {center} {shape}")
            })
            .collect()
    }

    fn bag_of_words(text: &str) -> Vec<f64> {
        let mut v = vec![0.0; STUB_EMBED_DIM];
        let mut any = false;
        for tok in tokenize(text) {
            if STOPWORDS.contains(&tok.as_str()) {
                continue;
            }
            v[token_bin(&tok)] += 1.0;
            any = true;
        }
        if !any {
            v[0] = 1.0;
        }
        v
    }

    fn normalize(mut v: Vec<f64>) -> Vec<f64> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= n);
        v
    }

    pub fn embed_text(text: &str) -> Vec<f64> {
        Self::normalize(Self::bag_of_words(text))
    }

    pub fn embed_image(&self, image: &RgbImage) -> Vec<f64> {
        let caption = self.describe(image, 1).remove(0);
        let words = Self::normalize(Self::bag_of_words(&caption));
        let mut rng = derive_rng(hash64(&[image.as_raw()]), "stub-embed", 0);
        let noise: Vec<f64> = Self::normalize((0..STUB_EMBED_DIM).map(|_| rng.random_range(-1.0..1.0)).collect());
        Self::normalize(
            words
                .iter()
                .zip(&noise)
                .map(|(w, n)| w + PIXEL_HASH_WEIGHT * n)
                .collect(),
        )
    }

    fn pause(&self) {
        if let Some(d) = self.latency {
            std::thread::sleep(d);
        }
    }
}

impl Backend for StubBackend {
    fn info(&self) -> Result<BackendInfo, GatewayError> {
        Ok(BackendInfo {
            backend_id: "stub-procedural-v1".into(),
            embed_dim: STUB_EMBED_DIM,
        })
    }

    fn txt2img(&self, prompt: &str, n: u32, seed: u64, w: u32, h: u32) -> Result<Vec<RgbImage>, GatewayError> {
        let _g = InFlight::enter(&self.probe);
        self.pause();
        Ok((0..n).map(|i| self.render(prompt, image_seed(seed, i), w, h)).collect())
    }

    fn caption(&self, image: &RgbImage, k: u32) -> Result<Vec<String>, GatewayError> {
        let _g = InFlight::enter(&self.probe);
        self.pause();
        Ok(self.describe(image, k))
    }

    fn embed(&self, texts: &[String], images: &[&RgbImage]) -> Result<EmbedResponse, GatewayError> {
        let _g = InFlight::enter(&self.probe);
        self.pause();
        let vectors = texts
            .iter()
            .map(|t| Self::embed_text(t))
            .chain(images.iter().map(|im| self.embed_image(im)))
            .collect();
        Ok(EmbedResponse {
            dim: STUB_EMBED_DIM,
            vectors,
        })
    }
}
