//! Cut-and-paste composition: augment foreground cutouts, paste them at
//! random locations with feathered edges, resolve occlusion and label what
//! stays visible.

mod blend;
mod transform;

use std::collections::BTreeMap;

use image::RgbImage;
use log::{debug, info};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use blend::{alpha_field, blend, gaussian_kernel, kernel_radius, ALPHA_SNAP};
pub use transform::{place, sample_augmentation, transform_asset, visible_area, AugParams, Transformed, PLACE_TRIES};

use crate::background::{pixel_digest, BackgroundAsset};
use crate::config::PipelineConfig;
use crate::foreground::{AssetStore, ForegroundAsset};
use crate::mask::{BBox, InstanceMask};
use crate::rng::derive_rng;

/// Consecutive failed pastes after which a sample is emitted short.
pub const MAX_CONSECUTIVE_SKIPS: u32 = 10;
/// Samples composed per parallel batch.
const CHUNK: u64 = 32;

pub type SinkError = Box<dyn std::error::Error + Send + Sync>;

#[derive(Debug, Error)]
pub enum ComposeError {
    #[error("derive_annotation on an empty mask")]
    EmptyMask,
    #[error("no foreground assets to paste")]
    NoForegrounds,
    #[error("no background images")]
    NoBackgrounds,
    #[error("worker pool: {0}")]
    Pool(String),
    #[error(transparent)]
    Sink(SinkError),
}

/// One labelled instance; `mask` has the background's size.
#[derive(Clone, Debug, PartialEq)]
pub struct Annotation {
    pub category_id: u32,
    pub bbox: BBox,
    pub mask: InstanceMask,
    pub area: u64,
    /// Position of the instance in the sample's paste order.
    pub paste_index: usize,
}

/// Bounding box and popcount of a visible mask.
pub fn derive_annotation(mask: InstanceMask, category_id: u32) -> Result<Annotation, ComposeError> {
    let bbox = mask.bbox().ok_or(ComposeError::EmptyMask)?;
    Ok(Annotation {
        category_id,
        bbox,
        area: mask.area(),
        mask,
        paste_index: 0,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PasteRecord {
    pub asset_digest: String,
    pub category_id: u32,
    pub rotation: f64,
    pub scale: f64,
    pub offset: (i64, i64),
    /// Drawn from the pool after the scheduled asset failed.
    pub replacement: bool,
    /// Annotated in the final sample.
    pub kept: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComposedSample {
    pub index: u64,
    pub image: RgbImage,
    pub annotations: Vec<Annotation>,
    pub background_digest: String,
    pub background_prompt: String,
    pub stream_key: u64,
    pub pastes: Vec<PasteRecord>,
    /// Attempts that produced no paste.
    pub skips: u32,
}

impl ComposedSample {
    pub fn digest(&self) -> String {
        pixel_digest(&self.image)
    }
}

struct Instance {
    category_id: u32,
    visible: InstanceMask,
    pasted_area: u64,
    record: usize,
}

/// Paste `assets` in order onto a copy of `background`. A failed paste (empty
/// transform or no valid placement) is retried with an asset drawn uniformly
/// from `pool`; after [`MAX_CONSECUTIVE_SKIPS`] consecutive failures the
/// remaining pastes are abandoned. Each paste hides what it covers of
/// earlier instances; an instance left with less than
/// `occlusion_drop_fraction` of its pasted area loses its annotation.
pub fn compose_sample(
    background: &BackgroundAsset,
    assets: &[&ForegroundAsset],
    pool: &[&ForegroundAsset],
    rng: &mut impl Rng,
    config: &PipelineConfig,
) -> ComposedSample {
    let mut image = background.image.clone();
    let (bw, bh) = image.dimensions();
    let mut instances: Vec<Instance> = Vec::new();
    let mut pastes = Vec::new();
    let mut skips = 0;
    let mut consecutive = 0;
    'slots: for &scheduled in assets {
        let mut asset = scheduled;
        let mut replacement = false;
        loop {
            let aug = sample_augmentation(rng, config.rotation_range, config.scale_range);
            let placed = transform_asset(asset, aug)
                .and_then(|t| place(&t.mask, (bw, bh), rng, config.min_visible_fraction).map(|o| (t, o)));
            let Some((t, offset)) = placed else {
                skips += 1;
                consecutive += 1;
                if consecutive >= MAX_CONSECUTIVE_SKIPS || pool.is_empty() {
                    debug!("sample gave up after {consecutive} consecutive skips");
                    break 'slots;
                }
                asset = pool[rng.random_range(0..pool.len())];
                replacement = true;
                continue;
            };
            consecutive = 0;
            blend(&mut image, &t.rgba, &t.mask, offset, config.blur_sigma);
            let pasted = InstanceMask::from_fn(bw, bh, |x, y| {
                t.mask.get_signed(x as i64 - offset.0, y as i64 - offset.1)
            });
            for earlier in &mut instances {
                earlier.visible.subtract(&pasted).expect("same canvas");
            }
            pastes.push(PasteRecord {
                asset_digest: asset.digest.clone(),
                category_id: asset.category_id,
                rotation: aug.rotation,
                scale: aug.scale,
                offset,
                replacement,
                kept: false,
            });
            instances.push(Instance {
                category_id: asset.category_id,
                pasted_area: pasted.area(),
                visible: pasted,
                record: pastes.len() - 1,
            });
            break;
        }
    }
    let mut annotations = Vec::new();
    for (paste_index, inst) in instances.into_iter().enumerate() {
        let enough = inst.visible.area() as f64 >= config.occlusion_drop_fraction * inst.pasted_area as f64;
        if !enough || inst.visible.is_empty() {
            continue;
        }
        pastes[inst.record].kept = true;
        let mut ann = derive_annotation(inst.visible, inst.category_id).expect("nonempty visible mask");
        ann.paste_index = paste_index;
        annotations.push(ann);
    }
    ComposedSample {
        index: 0,
        image,
        annotations,
        background_digest: background.digest.clone(),
        background_prompt: background.prompt.clone(),
        stream_key: 0,
        pastes,
        skips,
    }
}

/// Foreground order for the whole run: epoch `e` is a permutation of the
/// asset indices shuffled by stream ("fg-epoch", e); slot `k` belongs to
/// epoch `k / n`.
#[derive(Clone, Debug)]
pub struct PasteSchedule {
    n: usize,
    master_seed: u64,
    epochs: BTreeMap<u64, Vec<usize>>,
}

impl PasteSchedule {
    pub fn new(n_assets: usize, master_seed: u64) -> Self {
        assert!(n_assets > 0, "schedule needs at least one asset");
        Self {
            n: n_assets,
            master_seed,
            epochs: BTreeMap::new(),
        }
    }

    fn epoch(&mut self, e: u64) -> &[usize] {
        let (n, seed) = (self.n, self.master_seed);
        self.epochs.entry(e).or_insert_with(|| {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut derive_rng(seed, "fg-epoch", e));
            perm
        })
    }

    pub fn slot(&mut self, k: u64) -> usize {
        let n = self.n as u64;
        self.epoch(k / n)[(k % n) as usize]
    }

    /// Asset indices for sample `i` with `g` pastes per image.
    pub fn sample(&mut self, i: u64, g: u32) -> Vec<usize> {
        (0..g as u64).map(|j| self.slot(i * g as u64 + j)).collect()
    }

    /// Drop epochs entirely before slot `k`.
    pub fn forget_before(&mut self, k: u64) {
        let keep = k / self.n as u64;
        self.epochs = self.epochs.split_off(&keep);
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComposeReport {
    pub samples: u64,
    pub paste_attempts: u64,
    pub pasted: u64,
    pub replacements: u64,
    pub annotations: u64,
    pub dropped_by_occlusion: u64,
    pub short_samples: u64,
}

/// Compose `target_dataset_size` samples and hand them to `sink` in index
/// order. Sample `i` draws its background first and then everything else
/// from stream ("compose", i), so output does not depend on `workers`.
pub fn build_dataset(
    fg: &AssetStore,
    bg: &[BackgroundAsset],
    config: &PipelineConfig,
    workers: usize,
    mut sink: impl FnMut(ComposedSample) -> Result<(), SinkError>,
) -> Result<ComposeReport, ComposeError> {
    if fg.is_empty() {
        return Err(ComposeError::NoForegrounds);
    }
    if bg.is_empty() {
        return Err(ComposeError::NoBackgrounds);
    }
    let assets = fg.assets();
    let g = config.pastes_per_image;
    let target = config.target_dataset_size;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| ComposeError::Pool(e.to_string()))?;
    let mut schedule = PasteSchedule::new(assets.len(), config.master_seed);
    let mut report = ComposeReport::default();
    let mut start = 0;
    while start < target {
        let end = (start + CHUNK).min(target);
        let jobs: Vec<(u64, Vec<&ForegroundAsset>)> = (start..end)
            .map(|i| (i, schedule.sample(i, g).into_iter().map(|a| assets[a]).collect()))
            .collect();
        schedule.forget_before(end * g as u64);
        let samples: Vec<ComposedSample> = pool.install(|| {
            jobs.par_iter()
                .map(|(i, scheduled)| {
                    let mut rng = derive_rng(config.master_seed, "compose", *i);
                    let background = &bg[rng.random_range(0..bg.len())];
                    let mut s = compose_sample(background, scheduled, &assets, &mut rng, config);
                    s.index = *i;
                    s.stream_key = rng.key();
                    s
                })
                .collect()
        });
        for s in samples {
            report.samples += 1;
            report.paste_attempts += g as u64;
            report.pasted += s.pastes.len() as u64;
            report.replacements += s.pastes.iter().filter(|p| p.replacement).count() as u64;
            report.annotations += s.annotations.len() as u64;
            report.dropped_by_occlusion += s.pastes.iter().filter(|p| !p.kept).count() as u64;
            report.short_samples += (s.pastes.len() < g as usize) as u64;
            sink(s).map_err(ComposeError::Sink)?;
        }
        start = end;
    }
    info!(
        "composed {} samples: {} pastes, {} annotations",
        report.samples, report.pasted, report.annotations
    );
    Ok(report)
}
