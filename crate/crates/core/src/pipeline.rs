//! Stage orchestration over an output directory.
//!
//! ```text
//! out/
//!   manifest.json        written after every stage
//!   captions.tsv         CDI captions (`id<TAB>text`)
//!   filter_log.jsonl
//!   assets/fg/<category_id>/<digest>.{png,json}
//!   assets/bg/<digest>.png, assets/bg/index.json
//!   images/NNNNNN.png, annotations.json, contact_sheet.png
//! ```

use std::io::Write;
use std::path::{Path, PathBuf};

use image::RgbImage;
use log::{info, warn};
use serde::Serialize;
use thiserror::Error;

use crate::background::{
    build_context_backgrounds, build_zero_shot_backgrounds, caption_cdis, load_backgrounds, save_backgrounds,
    BackgroundAsset, BackgroundError,
};
use crate::compose::{build_dataset, ComposeError};
use crate::config::PipelineConfig;
use crate::dataset::{contact_sheet, record_write, validate_dataset, CocoWriter, ValidationReport};
use crate::filter::FilterLogEntry;
use crate::foreground::{build_foreground_assets, AssetStore, ForegroundError};
use crate::gateway::Gateway;
use crate::manifest::{sha256_hex, RunManifest};
use crate::prompt::{intervene, Caption, CaptionSource, Intervention, Lexicon};
use crate::vocab::ClassVocabulary;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CAPTIONS_FILE: &str = "captions.tsv";
pub const FILTER_LOG_FILE: &str = "filter_log.jsonl";
pub const CONTACT_SHEET_FILE: &str = "contact_sheet.png";
pub const FG_DIR: &str = "assets/fg";
pub const BG_DIR: &str = "assets/bg";

/// Process exit statuses.
pub mod exit {
    pub const OK: u8 = 0;
    pub const DIRTY: u8 = 1;
    pub const INPUT: u8 = 2;
    pub const BACKEND: u8 = 3;
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{stage}: {message}")]
    Input { stage: String, message: String },
    #[error("{stage}: backend failure: {message}")]
    Backend { stage: String, message: String },
}

impl PipelineError {
    pub fn input(stage: &str, message: impl std::fmt::Display) -> Self {
        Self::Input {
            stage: stage.into(),
            message: message.to_string(),
        }
    }

    pub fn backend(stage: &str, message: impl std::fmt::Display) -> Self {
        Self::Backend {
            stage: stage.into(),
            message: message.to_string(),
        }
    }

    pub fn stage(&self) -> &str {
        match self {
            Self::Input { stage, .. } | Self::Backend { stage, .. } => stage,
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Input { .. } => exit::INPUT,
            Self::Backend { .. } => exit::BACKEND,
        }
    }
}

fn from_background(stage: &str, e: BackgroundError) -> PipelineError {
    match e {
        BackgroundError::Gateway { .. } => PipelineError::backend(stage, e),
        other => PipelineError::input(stage, other),
    }
}

fn from_foreground(stage: &str, e: ForegroundError) -> PipelineError {
    match e {
        ForegroundError::Gateway { .. } => PipelineError::backend(stage, e),
        other => PipelineError::input(stage, other),
    }
}

/// Image files of a flat directory in file-name order.
pub fn list_images(dir: &Path) -> std::io::Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        })
        .collect();
    files.sort();
    Ok(files)
}

/// `id<TAB>text` lines; a line without a tab is all text with its line
/// number as id. Blank lines are skipped.
pub fn parse_captions(text: &str) -> Vec<Caption> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| match l.split_once('\t') {
            Some((id, t)) => Caption::new(t.trim(), CaptionSource::CdiCaption, id.trim()),
            None => Caption::new(l.trim(), CaptionSource::CdiCaption, format!("line-{}", i + 1)),
        })
        .collect()
}

pub fn format_captions(captions: &[Caption]) -> String {
    captions
        .iter()
        .map(|c| format!("{}\t{}\n", c.provenance, c.text))
        .collect()
}

/// Apply every edit, in order, to every caption. Returns the rewritten
/// captions and one `before -> after` line per caption.
pub fn apply_interventions(captions: &[Caption], edits: &[Intervention]) -> (Vec<Caption>, Vec<String>) {
    let mut log = Vec::with_capacity(captions.len());
    let out = captions
        .iter()
        .map(|c| {
            let after = edits.iter().fold(c.clone(), |acc, e| intervene(&acc, e));
            log.push(format!("{}\t{}\t->\t{}", c.provenance, c.text, after.text));
            after
        })
        .collect();
    (out, log)
}

fn digest_of<T: Serialize>(value: &T) -> String {
    sha256_hex(&serde_json::to_vec(value).expect("serializable"))
}

pub struct Pipeline {
    pub config: PipelineConfig,
    pub vocab: ClassVocabulary,
    pub lexicon: Lexicon,
    pub out: PathBuf,
    pub workers: usize,
    pub manifest: RunManifest,
    pool: rayon::ThreadPool,
}

impl Pipeline {
    /// Continues an existing manifest in `out` when it describes the same
    /// config and vocabulary; starts a fresh one otherwise.
    pub fn new(
        config: PipelineConfig,
        vocab: ClassVocabulary,
        lexicon: Lexicon,
        out: &Path,
        workers: usize,
    ) -> Result<Self, PipelineError> {
        std::fs::create_dir_all(out).map_err(|e| PipelineError::input("setup", format!("{}: {e}", out.display())))?;
        let fresh = RunManifest::new(&config, &vocab);
        let manifest = match RunManifest::load(&out.join(MANIFEST_FILE)) {
            Ok(m) if m.config_digest == fresh.config_digest => m,
            _ => fresh,
        };
        let workers = workers.max(1);
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| PipelineError::input("setup", e))?;
        Ok(Self {
            config,
            vocab,
            lexicon,
            out: out.to_path_buf(),
            workers,
            manifest,
            pool,
        })
    }

    pub fn save_manifest(&self) -> Result<(), PipelineError> {
        let p = self.out.join(MANIFEST_FILE);
        self.manifest
            .save(&p)
            .map_err(|e| PipelineError::input("manifest", format!("{}: {e}", p.display())))
    }

    /// Run `f` as stage `name`: on failure the stage is marked failed in the
    /// manifest, which is saved either way.
    fn stage<T>(
        &mut self,
        name: &str,
        f: impl FnOnce(&mut Self) -> Result<T, PipelineError>,
    ) -> Result<T, PipelineError> {
        info!("stage {name}");
        let out = f(self);
        if let Err(e) = &out {
            self.manifest.record_failure(name, &e.to_string());
        }
        self.save_manifest()?;
        out
    }

    fn write_filter_log(&self, stage: &str, entries: &[FilterLogEntry]) -> Result<(), PipelineError> {
        let path = self.out.join(FILTER_LOG_FILE);
        let err = |e: std::io::Error| PipelineError::input(stage, format!("{}: {e}", path.display()));
        let mut kept: Vec<String> = match std::fs::read_to_string(&path) {
            Ok(t) => t
                .lines()
                .filter(|l| {
                    serde_json::from_str::<FilterLogEntry>(l)
                        .map_or(true, |e| e.stage != entries.first().map_or("", |f| f.stage.as_str()))
                })
                .map(str::to_string)
                .collect(),
            Err(_) => Vec::new(),
        };
        kept.extend(
            entries
                .iter()
                .map(|e| serde_json::to_string(e).expect("log entry serializes")),
        );
        let mut f = std::io::BufWriter::new(std::fs::File::create(&path).map_err(err)?);
        for l in kept {
            writeln!(f, "{l}").map_err(err)?;
        }
        f.flush().map_err(err)
    }

    /// K captions for each of the first N x |classes| images of `cdi_dir`.
    pub fn caption_cdis(&mut self, gateway: &Gateway, cdi_dir: &Path) -> Result<Vec<Caption>, PipelineError> {
        self.stage("caption_cdis", |p| {
            let files = list_images(cdi_dir)
                .map_err(|e| PipelineError::input("caption_cdis", format!("{}: {e}", cdi_dir.display())))?;
            let want = p.config.num_cdis_per_class as usize * p.vocab.len();
            if files.len() < want {
                warn!(
                    "{} CDIs requested but {} found in {}",
                    want,
                    files.len(),
                    cdi_dir.display()
                );
            }
            let cdis = files
                .iter()
                .take(want)
                .map(|f| {
                    let img: RgbImage = image::open(f)
                        .map_err(|e| PipelineError::input("caption_cdis", format!("{}: {e}", f.display())))?
                        .to_rgb8();
                    let id = f
                        .file_name()
                        .map(|n| n.to_string_lossy().into_owned())
                        .unwrap_or_default();
                    Ok((id, img))
                })
                .collect::<Result<Vec<_>, PipelineError>>()?;
            let captions = caption_cdis(&cdis, p.config.captions_per_cdi, gateway)
                .map_err(|e| from_background("caption_cdis", e))?;
            let text = format_captions(&captions);
            let path = p.out.join(CAPTIONS_FILE);
            std::fs::write(&path, &text)
                .map_err(|e| PipelineError::input("caption_cdis", format!("{}: {e}", path.display())))?;
            p.manifest.record(
                "caption_cdis",
                [("cdis", cdis.len() as u64), ("captions", captions.len() as u64)],
                sha256_hex(text.as_bytes()),
            );
            Ok(captions)
        })
    }

    /// Context backgrounds from captions, or zero-shot backgrounds when
    /// `captions` is `None`.
    pub fn gen_backgrounds(
        &mut self,
        gateway: &Gateway,
        captions: Option<&[Caption]>,
    ) -> Result<Vec<BackgroundAsset>, PipelineError> {
        self.stage("backgrounds", |p| {
            let (assets, report, log) = p
                .pool
                .install(|| match captions {
                    Some(c) => build_context_backgrounds(c, &p.vocab, &p.lexicon, &p.config, gateway),
                    None => build_zero_shot_backgrounds(&p.vocab, &p.config, gateway),
                })
                .map_err(|e| from_background("backgrounds", e))?;
            let dir = p.out.join(BG_DIR);
            if dir.exists() {
                std::fs::remove_dir_all(&dir)
                    .map_err(|e| PipelineError::input("backgrounds", format!("{}: {e}", dir.display())))?;
            }
            save_backgrounds(&assets, &dir).map_err(|e| from_background("backgrounds", e))?;
            p.write_filter_log("background", &log)?;
            let digests: Vec<&str> = assets.iter().map(|a| a.digest.as_str()).collect();
            p.manifest.record(
                "backgrounds",
                [
                    ("caption_sets", report.caption_sets),
                    ("generated", report.generated),
                    ("kept", report.kept),
                    ("rejected_by_class", report.rejected_by_class),
                    ("duplicates", report.duplicates),
                    ("stored", assets.len() as u64),
                ],
                digest_of(&digests),
            );
            Ok(assets)
        })
    }

    pub fn gen_foregrounds(&mut self, gateway: &Gateway) -> Result<AssetStore, PipelineError> {
        self.stage("foregrounds", |p| {
            let (store, report, log) = p
                .pool
                .install(|| build_foreground_assets(&p.vocab, &p.config, gateway))
                .map_err(|e| from_foreground("foregrounds", e))?;
            let dir = p.out.join(FG_DIR);
            if dir.exists() {
                std::fs::remove_dir_all(&dir)
                    .map_err(|e| PipelineError::input("foregrounds", format!("{}: {e}", dir.display())))?;
            }
            std::fs::create_dir_all(&dir)
                .map_err(|e| PipelineError::input("foregrounds", format!("{}: {e}", dir.display())))?;
            store.save(&dir).map_err(|e| PipelineError::input("foregrounds", e))?;
            p.write_filter_log("foreground", &log)?;
            let digests: Vec<&str> = store.iter().map(|a| a.digest.as_str()).collect();
            p.manifest.record(
                "foregrounds",
                [
                    ("generated", report.generated),
                    ("kept_by_filter", report.kept_by_filter),
                    ("extracted", report.extracted),
                    ("rejected_no_candidate", report.rejected_no_candidate),
                    ("rejected_area", report.rejected_area),
                    ("duplicates", report.duplicates),
                ],
                digest_of(&digests),
            );
            Ok(store)
        })
    }

    /// Compose and write the dataset from the stores under `out/assets`.
    pub fn compose(&mut self) -> Result<(), PipelineError> {
        self.stage("compose", |p| {
            let fg = AssetStore::load(&p.out.join(FG_DIR)).map_err(|e| PipelineError::input("compose", e))?;
            let bg = load_backgrounds(&p.out.join(BG_DIR)).map_err(|e| from_background("compose", e))?;
            for stale in ["images", "annotations.json"] {
                let path = p.out.join(stale);
                if path.is_dir() {
                    std::fs::remove_dir_all(&path).map_err(|e| PipelineError::input("compose", e))?;
                }
            }
            let mut writer = CocoWriter::new(&p.out, &p.vocab).map_err(|e| PipelineError::input("compose", e))?;
            let report = build_dataset(&fg, &bg, &p.config, p.workers, |s| writer.add(&s).map_err(|e| e.into()))
                .map_err(|e| match e {
                    ComposeError::Sink(inner) => PipelineError::input("compose", inner),
                    other => PipelineError::input("compose", other),
                })?;
            let summary = writer.finish().map_err(|e| PipelineError::input("compose", e))?;
            p.manifest.record(
                "compose",
                [
                    ("samples", report.samples),
                    ("paste_attempts", report.paste_attempts),
                    ("pasted", report.pasted),
                    ("replacements", report.replacements),
                    ("annotations", report.annotations),
                    ("dropped_by_occlusion", report.dropped_by_occlusion),
                    ("short_samples", report.short_samples),
                ],
                summary.annotations_digest.clone(),
            );
            record_write(&mut p.manifest, &summary);
            Ok(())
        })
    }

    /// Validate the written dataset and render a contact sheet of the first
    /// images.
    pub fn validate(&mut self) -> Result<ValidationReport, PipelineError> {
        self.stage("validate", |p| {
            let report = validate_dataset(&p.out).map_err(|e| PipelineError::input("validate", e))?;
            if report.images > 0 {
                let side = (report.images as f64).sqrt().ceil().min(4.0) as u32;
                if let Err(e) = contact_sheet(&p.out, side, side, &p.out.join(CONTACT_SHEET_FILE)) {
                    warn!("contact sheet: {e}");
                }
            }
            p.manifest.record(
                "validate",
                [
                    ("images", report.images),
                    ("annotations", report.annotations),
                    ("violations", report.violations.len() as u64),
                ],
                digest_of(&report.violations),
            );
            Ok(report)
        })
    }

    /// Every stage in order. `cdi_dir = None` selects the zero-shot setting.
    pub fn run_all(
        &mut self,
        gateway: &Gateway,
        cdi_dir: Option<&Path>,
        edits: &[Intervention],
    ) -> Result<ValidationReport, PipelineError> {
        let captions = match cdi_dir {
            Some(dir) => {
                let caps = self.caption_cdis(gateway, dir)?;
                Some(if edits.is_empty() {
                    caps
                } else {
                    apply_interventions(&caps, edits).0
                })
            }
            None => None,
        };
        self.gen_backgrounds(gateway, captions.as_deref())?;
        self.gen_foregrounds(gateway)?;
        self.compose()?;
        self.validate()
    }
}
