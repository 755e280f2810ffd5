//! Foreground cutouts from generated object images.
//!
//! Generated object images show one subject on a near-uniform backdrop, so a
//! chroma key against the estimated backdrop colour isolates candidate
//! segments; the embedder then picks the segment that looks most like the
//! class label.

mod store;

use std::collections::{BTreeMap, VecDeque};

use image::{Rgb, RgbImage, Rgba, RgbaImage};
use log::{debug, info};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::PipelineConfig;
use crate::filter::{select_top_foregrounds, FilterError, FilterLogEntry};
use crate::gateway::{EmbeddingVector, Gateway, GatewayError, ImageHandle};
use crate::mask::InstanceMask;
use crate::prompt::{fill_template, Caption, PromptTemplate, Slot};
use crate::rng::derive_seed;
use crate::vocab::{Category, ClassVocabulary};

pub use store::{AssetStore, StoreError};

/// Images requested per txt2img call.
pub const GENERATION_CHUNK: u32 = 16;
/// Backdrop used when embedding a candidate crop.
pub const NEUTRAL_GRAY: [u8; 3] = [128, 128, 128];

#[derive(Debug, Error)]
pub enum ForegroundError {
    #[error("category {category}, template {template}: {source}")]
    Gateway {
        category: u32,
        template: usize,
        #[source]
        source: GatewayError,
    },
    #[error("template {0}: {1}")]
    Template(usize, String),
    #[error(transparent)]
    Filter(#[from] FilterError),
}

/// Mode of the pixels selected by `pred` after quantizing each channel to 16
/// buckets, returned as the mean colour of that bucket's members. Ties go to
/// the lowest bucket index; no selected pixels yields black.
pub fn dominant_color(image: &RgbImage, pred: impl Fn(u32, u32) -> bool) -> [u8; 3] {
    let mut counts = vec![0u64; 4096];
    let mut sums = vec![[0u64; 3]; 4096];
    for (x, y, p) in image.enumerate_pixels() {
        if !pred(x, y) {
            continue;
        }
        let b = (p[0] as usize >> 4) << 8 | (p[1] as usize >> 4) << 4 | (p[2] as usize >> 4);
        counts[b] += 1;
        for c in 0..3 {
            sums[b][c] += p[c] as u64;
        }
    }
    let mut best = 0;
    for b in 1..4096 {
        if counts[b] > counts[best] {
            best = b;
        }
    }
    if counts[best] == 0 {
        return [0, 0, 0];
    }
    let n = counts[best];
    sums[best].map(|s| ((s + n / 2) / n) as u8)
}

/// Dominant colour of the 2-pixel border ring.
pub fn estimate_background_color(image: &RgbImage) -> [u8; 3] {
    let (w, h) = image.dimensions();
    dominant_color(image, |x, y| x < 2 || y < 2 || x + 2 >= w || y + 2 >= h)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SegmentParams {
    /// Euclidean RGB distance (0..=441) above which a pixel is foreground.
    pub color_threshold: f64,
    /// Components smaller than this fraction of the image are discarded.
    pub min_area_fraction: f64,
}

impl SegmentParams {
    pub fn from_config(config: &PipelineConfig) -> Self {
        Self {
            color_threshold: config.color_threshold,
            min_area_fraction: config.min_segment_fraction,
        }
    }
}

fn color_distance(p: &Rgb<u8>, c: [u8; 3]) -> f64 {
    (0..3).map(|i| (p[i] as f64 - c[i] as f64).powi(2)).sum::<f64>().sqrt()
}

/// Closing with a 3x3 element, OR'd with the input, then hole filling.
/// `grid` is a padded local window whose outer ring is never set.
fn clean_component(grid: &[bool], gw: usize, gh: usize) -> Vec<bool> {
    let at = |g: &[bool], x: isize, y: isize| -> bool {
        x >= 0 && y >= 0 && (x as usize) < gw && (y as usize) < gh && g[y as usize * gw + x as usize]
    };
    let neighbourhood = |g: &[bool], x: usize, y: usize, all: bool| -> bool {
        let mut acc = all;
        for dy in -1..=1isize {
            for dx in -1..=1isize {
                let v = at(g, x as isize + dx, y as isize + dy);
                if all {
                    acc &= v;
                } else {
                    acc |= v;
                }
            }
        }
        acc
    };
    let dilated: Vec<bool> = (0..gw * gh)
        .map(|i| neighbourhood(grid, i % gw, i / gw, false))
        .collect();
    let mut out: Vec<bool> = (0..gw * gh)
        .map(|i| grid[i] || neighbourhood(&dilated, i % gw, i / gw, true))
        .collect();
    // pixels unreachable from the window border through unset pixels are holes
    let mut outside = vec![false; gw * gh];
    let mut queue = VecDeque::new();
    for i in 0..gw * gh {
        let (x, y) = (i % gw, i / gw);
        if (x == 0 || y == 0 || x + 1 == gw || y + 1 == gh) && !out[i] {
            outside[i] = true;
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        let (x, y) = ((i % gw) as isize, (i / gw) as isize);
        for (dx, dy) in [(1, 0), (-1, 0), (0, 1), (0, -1)] {
            let (nx, ny) = (x + dx, y + dy);
            if nx < 0 || ny < 0 || nx as usize >= gw || ny as usize >= gh {
                continue;
            }
            let j = ny as usize * gw + nx as usize;
            if !out[j] && !outside[j] {
                outside[j] = true;
                queue.push_back(j);
            }
        }
    }
    for i in 0..gw * gh {
        if !outside[i] {
            out[i] = true;
        }
    }
    out
}

/// Chroma-key segmentation: pixels farther than the threshold from
/// `bg_color`, split into 4-connected components, each closed and
/// hole-filled. Sorted by area descending, ties in raster order of discovery.
pub fn segment_candidates(image: &RgbImage, bg_color: [u8; 3], params: SegmentParams) -> Vec<InstanceMask> {
    let (w, h) = image.dimensions();
    let (wu, hu) = (w as usize, h as usize);
    let field: Vec<bool> = image
        .pixels()
        .map(|p| color_distance(p, bg_color) > params.color_threshold)
        .collect();
    let mut label = vec![u32::MAX; wu * hu];
    let mut components: Vec<Vec<usize>> = Vec::new();
    for start in 0..wu * hu {
        if !field[start] || label[start] != u32::MAX {
            continue;
        }
        let id = components.len() as u32;
        let mut members = vec![start];
        label[start] = id;
        let mut head = 0;
        while head < members.len() {
            let i = members[head];
            head += 1;
            let (x, y) = (i % wu, i / wu);
            let mut visit = |j: usize| {
                if field[j] && label[j] == u32::MAX {
                    label[j] = id;
                    members.push(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < wu {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - wu);
            }
            if y + 1 < hu {
                visit(i + wu);
            }
        }
        components.push(members);
    }
    let min_area = params.min_area_fraction * (wu * hu) as f64;
    let mut out: Vec<InstanceMask> = components
        .into_iter()
        .filter_map(|members| {
            let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
            for &i in &members {
                x0 = x0.min(i % wu);
                x1 = x1.max(i % wu);
                y0 = y0.min(i / wu);
                y1 = y1.max(i / wu);
            }
            // window with a 2-pixel margin in local coordinates
            let (gw, gh) = (x1 - x0 + 5, y1 - y0 + 5);
            let mut grid = vec![false; gw * gh];
            for &i in &members {
                grid[(i / wu - y0 + 2) * gw + (i % wu - x0 + 2)] = true;
            }
            let cleaned = clean_component(&grid, gw, gh);
            let mask = InstanceMask::from_fn(w, h, |x, y| {
                let (lx, ly) = (x as isize - x0 as isize + 2, y as isize - y0 as isize + 2);
                lx >= 0
                    && ly >= 0
                    && (lx as usize) < gw
                    && (ly as usize) < gh
                    && cleaned[ly as usize * gw + lx as usize]
            });
            (mask.area() as f64 >= min_area && !mask.is_empty()).then_some(mask)
        })
        .collect();
    out.sort_by_key(|m| std::cmp::Reverse(m.area()));
    out
}

/// The chosen segment of one image.
#[derive(Clone, Debug)]
pub struct Selection {
    pub mask: InstanceMask,
    pub score: f64,
    pub area_fraction: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    NoCandidate,
    AreaOutOfBounds,
}

/// Crop of `image` to the mask's bounding box with unmasked pixels on neutral gray.
pub fn crop_on_gray(image: &RgbImage, mask: &InstanceMask) -> Option<RgbImage> {
    let (x0, y0, w, h) = mask.bbox()?;
    Some(RgbImage::from_fn(w, h, |x, y| {
        if mask.get(x0 + x, y0 + y) {
            *image.get_pixel(x0 + x, y0 + y)
        } else {
            Rgb(NEUTRAL_GRAY)
        }
    }))
}

/// Pick the candidate whose gray-backed crop is most similar to the label
/// embedding (ties to the earlier candidate), rejecting when there is none or
/// its area fraction lies outside `area_bounds`.
pub fn select_segment(
    candidates: &[InstanceMask],
    image: &RgbImage,
    label_emb: &EmbeddingVector,
    gateway: &Gateway,
    area_bounds: (f64, f64),
) -> Result<Result<Selection, RejectReason>, GatewayError> {
    let crops: Vec<RgbImage> = candidates.iter().filter_map(|m| crop_on_gray(image, m)).collect();
    if crops.is_empty() {
        return Ok(Err(RejectReason::NoCandidate));
    }
    let refs: Vec<&RgbImage> = crops.iter().collect();
    let embs = gateway.embed(&[], &refs)?;
    let mut best: Option<(usize, f64)> = None;
    for (i, e) in embs.iter().enumerate() {
        let s = crate::filter::cosine(e, label_emb).map_err(|e| GatewayError::Malformed(e.to_string()))?;
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    let (i, score) = best.expect("at least one crop");
    let mask = &candidates[i];
    let area_fraction = mask.fill_fraction();
    if area_fraction < area_bounds.0 || area_fraction > area_bounds.1 {
        return Ok(Err(RejectReason::AreaOutOfBounds));
    }
    Ok(Ok(Selection {
        mask: mask.clone(),
        score,
        area_fraction,
    }))
}

/// An object cutout. `rgba` and `mask` are cropped to the tight bounding box
/// of the selected segment; alpha is 255 exactly where the mask is set.
#[derive(Clone, Debug, PartialEq)]
pub struct ForegroundAsset {
    pub category_id: u32,
    pub rgba: RgbaImage,
    pub mask: InstanceMask,
    pub prompt: String,
    pub selection_score: f64,
    /// Mask area relative to the source image.
    pub area_fraction: f64,
    pub digest: String,
}

impl ForegroundAsset {
    pub fn from_selection(category_id: u32, image: &RgbImage, selection: &Selection, prompt: &str) -> Self {
        let bbox = selection.mask.bbox().expect("selected mask is nonempty");
        let mask = selection.mask.crop(bbox);
        let rgba = RgbaImage::from_fn(bbox.2, bbox.3, |x, y| {
            if mask.get(x, y) {
                let p = image.get_pixel(bbox.0 + x, bbox.1 + y);
                Rgba([p[0], p[1], p[2], 255])
            } else {
                Rgba([0, 0, 0, 0])
            }
        });
        Self::from_rgba(
            category_id,
            rgba,
            prompt.to_string(),
            selection.score,
            selection.area_fraction,
        )
    }

    pub fn from_rgba(
        category_id: u32,
        rgba: RgbaImage,
        prompt: String,
        selection_score: f64,
        area_fraction: f64,
    ) -> Self {
        let (w, h) = rgba.dimensions();
        let mask = InstanceMask::from_fn(w, h, |x, y| rgba.get_pixel(x, y)[3] > 0);
        let digest = asset_digest(&rgba);
        Self {
            category_id,
            rgba,
            mask,
            prompt,
            selection_score,
            area_fraction,
            digest,
        }
    }
}

/// SHA-256 over dimensions and raw RGBA bytes.
pub fn asset_digest(rgba: &RgbaImage) -> String {
    let mut bytes = Vec::with_capacity(8 + rgba.as_raw().len());
    bytes.extend_from_slice(&rgba.width().to_le_bytes());
    bytes.extend_from_slice(&rgba.height().to_le_bytes());
    bytes.extend_from_slice(rgba.as_raw());
    crate::manifest::sha256_hex(&bytes)
}

/// Run estimation, segmentation and selection on one image.
pub fn extract_foreground(
    handle: &ImageHandle,
    category_id: u32,
    label_emb: &EmbeddingVector,
    gateway: &Gateway,
    config: &PipelineConfig,
) -> Result<Result<ForegroundAsset, RejectReason>, GatewayError> {
    let bg = estimate_background_color(&handle.pixels);
    let candidates = segment_candidates(&handle.pixels, bg, SegmentParams::from_config(config));
    Ok(
        select_segment(&candidates, &handle.pixels, label_emb, gateway, config.area_bounds)?
            .map(|sel| ForegroundAsset::from_selection(category_id, &handle.pixels, &sel, &handle.prompt.text)),
    )
}

/// Per-run foreground counts.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForegroundReport {
    pub generated: u64,
    pub kept_by_filter: u64,
    pub extracted: u64,
    pub rejected_no_candidate: u64,
    pub rejected_area: u64,
    pub duplicates: u64,
}

/// Class label prompt used for similarity scoring.
pub fn class_prompt(config: &PipelineConfig, category: &Category) -> String {
    PromptTemplate::parse(&config.class_prompt_template)
        .and_then(|t| fill_template(&t, &object_slot(&category.label)))
        .map(|c| c.text)
        .unwrap_or_else(|_| category.label.clone())
}

fn object_slot(label: &str) -> BTreeMap<Slot, String> {
    BTreeMap::from([(Slot::Object, label.to_string())])
}

/// Generate in fixed-size chunks; chunk `c` of a job uses seed
/// `derive_seed(job_seed, "chunk", c)`.
pub fn generate_chunked(
    gateway: &Gateway,
    prompt: &Caption,
    n: u32,
    job_seed: u64,
) -> Result<Vec<ImageHandle>, GatewayError> {
    let chunks: Vec<u32> = (0..n.div_ceil(GENERATION_CHUNK)).collect();
    let parts = chunks
        .par_iter()
        .map(|&c| {
            let len = GENERATION_CHUNK.min(n - c * GENERATION_CHUNK);
            gateway.generate_images(prompt, len, derive_seed(job_seed, "chunk", c as u64))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(parts.into_iter().flatten().collect())
}

/// For every category and foreground template: generate, keep the images
/// most similar to the class label, extract one cutout per kept image and
/// insert it into a digest-deduplicated store.
pub fn build_foreground_assets(
    vocab: &ClassVocabulary,
    config: &PipelineConfig,
    gateway: &Gateway,
) -> Result<(AssetStore, ForegroundReport, Vec<FilterLogEntry>), ForegroundError> {
    let templates = config
        .fg_templates
        .iter()
        .enumerate()
        .map(|(i, t)| PromptTemplate::parse(t).map_err(|e| ForegroundError::Template(i, e.to_string())))
        .collect::<Result<Vec<_>, _>>()?;
    let mut store = AssetStore::default();
    let mut report = ForegroundReport::default();
    let mut log = Vec::new();
    for category in vocab.categories() {
        let label_text = class_prompt(config, category);
        let wrap = |t: usize| {
            move |source| ForegroundError::Gateway {
                category: category.id,
                template: t,
                source,
            }
        };
        let label_emb = gateway.embed_text(&label_text).map_err(wrap(0))?;
        for (t, template) in templates.iter().enumerate() {
            let mut prompt = fill_template(template, &object_slot(&category.label))
                .map_err(|e| ForegroundError::Template(t, e.to_string()))?;
            prompt.provenance = format!("fg-template-{t}");
            let job = (category.id as u64 - 1) * templates.len() as u64 + t as u64;
            let job_seed = derive_seed(config.master_seed, "fg", job);
            let images =
                generate_chunked(gateway, &prompt, config.fg_images_per_template, job_seed).map_err(wrap(t))?;
            report.generated += images.len() as u64;
            if images.is_empty() {
                continue;
            }
            let refs: Vec<&RgbImage> = images.iter().map(|h| &h.pixels).collect();
            let embs = gateway.embed(&[], &refs).map_err(wrap(t))?;
            let decisions = select_top_foregrounds(&embs, &label_emb, config.fg_keep_per_template as usize)?;
            let kept: Vec<&ImageHandle> = decisions.iter().filter(|d| d.kept).map(|d| &images[d.index]).collect();
            report.kept_by_filter += kept.len() as u64;
            log.extend(decisions.into_iter().map(|d| FilterLogEntry {
                stage: "foreground".into(),
                group: format!("{}/{t}", category.label),
                decision: d,
            }));
            let outcomes = kept
                .par_iter()
                .map(|h| extract_foreground(h, category.id, &label_emb, gateway, config))
                .collect::<Result<Vec<_>, _>>()
                .map_err(wrap(t))?;
            for outcome in outcomes {
                match outcome {
                    Ok(asset) => {
                        if store.insert(asset) {
                            report.extracted += 1;
                        } else {
                            report.duplicates += 1;
                        }
                    }
                    Err(RejectReason::NoCandidate) => report.rejected_no_candidate += 1,
                    Err(RejectReason::AreaOutOfBounds) => report.rejected_area += 1,
                }
            }
            debug!("foreground {}/{t}: store now {}", category.label, store.len());
        }
    }
    info!(
        "foregrounds: {} generated, {} kept, {} extracted",
        report.generated, report.kept_by_filter, report.extracted
    );
    Ok((store, report, log))
}

#[cfg(test)]
mod tests;
