//! Context background generation: CDI captions (or zero-shot prompts) to
//! prompts, prompts to images, images through the semantic filter.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use image::RgbImage;
use log::{info, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::PipelineConfig;
use crate::filter::{filter_background_set, prune_fraction, FilterError, FilterLogEntry};
use crate::foreground::{class_prompt, generate_chunked};
use crate::gateway::{EmbeddingVector, Gateway, GatewayError, ImageHandle};
use crate::manifest::sha256_hex;
use crate::prompt::{
    expand_context_words, extract_context_words, synthesize_context_sentences, Caption, CaptionSource, Lexicon,
    PromptTemplate,
};
use crate::rng::derive_seed;
use crate::vocab::ClassVocabulary;

#[derive(Debug, Error)]
pub enum BackgroundError {
    #[error("{context}: {source}")]
    Gateway {
        context: String,
        #[source]
        source: GatewayError,
    },
    #[error("context template {0}: {1}")]
    Template(usize, String),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error("{path}: {message}")]
    Store { path: PathBuf, message: String },
}

/// A kept background image and the prompt that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct BackgroundAsset {
    pub image: RgbImage,
    pub prompt: String,
    /// Caption set (or zero-shot template) the image belongs to.
    pub group: String,
    pub digest: String,
}

impl BackgroundAsset {
    pub fn new(image: RgbImage, prompt: String, group: String) -> Self {
        let digest = pixel_digest(&image);
        Self {
            image,
            prompt,
            group,
            digest,
        }
    }
}

/// SHA-256 over dimensions and raw RGB bytes.
pub fn pixel_digest(image: &RgbImage) -> String {
    let mut bytes = Vec::with_capacity(8 + image.as_raw().len());
    bytes.extend_from_slice(&image.width().to_le_bytes());
    bytes.extend_from_slice(&image.height().to_le_bytes());
    bytes.extend_from_slice(image.as_raw());
    sha256_hex(&bytes)
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackgroundReport {
    pub caption_sets: u64,
    pub generated: u64,
    pub kept: u64,
    pub rejected_by_class: u64,
    pub duplicates: u64,
}

/// K captions per CDI, in CDI order. Provenance is the CDI id.
pub fn caption_cdis(cdis: &[(String, RgbImage)], k: u32, gateway: &Gateway) -> Result<Vec<Caption>, BackgroundError> {
    let mut out = Vec::new();
    for (id, image) in cdis {
        let caps = gateway
            .caption_image(image, k, id)
            .map_err(|source| BackgroundError::Gateway {
                context: format!("captioning CDI {id}"),
                source,
            })?;
        out.extend(caps);
    }
    Ok(out)
}

/// Context sentences for one CDI caption. Falls back to the caption itself
/// when no context word survives extraction.
pub fn context_prompts(
    caption: &Caption,
    vocab: &ClassVocabulary,
    lexicon: &Lexicon,
    templates: &[PromptTemplate],
) -> Vec<Caption> {
    let words = extract_context_words(caption, vocab, lexicon);
    let expanded = expand_context_words(&words, lexicon);
    let sentences = synthesize_context_sentences(&expanded, templates);
    if sentences.is_empty() {
        warn!(
            "no context words in caption `{}`; generating from the caption itself",
            caption.text
        );
        return vec![Caption::new(
            caption.text.clone(),
            CaptionSource::Synthesized,
            caption.provenance.clone(),
        )];
    }
    sentences
}

/// Image `j` of a caption set uses prompt `j mod S`.
pub fn images_per_prompt(m: u32, prompts: usize) -> Vec<u32> {
    let s = prompts as u32;
    (0..s).map(|i| (m + s - 1 - i) / s).collect()
}

fn class_embeddings(
    vocab: &ClassVocabulary,
    config: &PipelineConfig,
    gateway: &Gateway,
) -> Result<Vec<EmbeddingVector>, BackgroundError> {
    let texts: Vec<String> = vocab.categories().iter().map(|c| class_prompt(config, c)).collect();
    if texts.is_empty() {
        return Ok(Vec::new());
    }
    gateway.embed(&texts, &[]).map_err(|source| BackgroundError::Gateway {
        context: "embedding class labels".into(),
        source,
    })
}

fn parse_templates(texts: &[String]) -> Result<Vec<PromptTemplate>, BackgroundError> {
    texts
        .iter()
        .enumerate()
        .map(|(i, t)| PromptTemplate::parse(t).map_err(|e| BackgroundError::Template(i, e.to_string())))
        .collect()
}

fn push_unique(
    out: &mut Vec<BackgroundAsset>,
    seen: &mut BTreeSet<String>,
    asset: BackgroundAsset,
    report: &mut BackgroundReport,
) {
    if seen.insert(asset.digest.clone()) {
        out.push(asset);
    } else {
        report.duplicates += 1;
    }
}

/// Caption sets to filtered backgrounds: M images per caption spread over
/// its context sentences, then the two-rule filter keeps `keep_per_caption`.
pub fn build_context_backgrounds(
    captions: &[Caption],
    vocab: &ClassVocabulary,
    lexicon: &Lexicon,
    config: &PipelineConfig,
    gateway: &Gateway,
) -> Result<(Vec<BackgroundAsset>, BackgroundReport, Vec<FilterLogEntry>), BackgroundError> {
    let templates = parse_templates(&config.context_templates)?;
    let class_embs = class_embeddings(vocab, config, gateway)?;
    let mut report = BackgroundReport::default();
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    let mut log = Vec::new();
    for (ci, caption) in captions.iter().enumerate() {
        let group = format!("caption-{ci}");
        let wrap = |source| BackgroundError::Gateway {
            context: format!("caption set {ci} (`{}`)", caption.text),
            source,
        };
        let prompts = context_prompts(caption, vocab, lexicon, &templates);
        let job_seed = derive_seed(config.master_seed, "bg-caption", ci as u64);
        let mut images: Vec<ImageHandle> = Vec::new();
        let mut prompt_of: Vec<usize> = Vec::new();
        for (s, n) in images_per_prompt(config.images_per_caption, prompts.len())
            .into_iter()
            .enumerate()
        {
            let batch =
                generate_chunked(gateway, &prompts[s], n, derive_seed(job_seed, "prompt", s as u64)).map_err(wrap)?;
            prompt_of.extend(std::iter::repeat_n(s, batch.len()));
            images.extend(batch);
        }
        report.caption_sets += 1;
        report.generated += images.len() as u64;
        if images.is_empty() {
            continue;
        }
        let prompt_texts: Vec<String> = prompts.iter().map(|p| p.text.clone()).collect();
        let prompt_embs = gateway.embed(&prompt_texts, &[]).map_err(wrap)?;
        let refs: Vec<&RgbImage> = images.iter().map(|h| &h.pixels).collect();
        let image_embs = gateway.embed(&[], &refs).map_err(wrap)?;
        let caption_embs: Vec<EmbeddingVector> = prompt_of.iter().map(|s| prompt_embs[*s].clone()).collect();
        let decisions = filter_background_set(
            &image_embs,
            &caption_embs,
            &class_embs,
            config.keep_per_caption as usize,
            config.filter_mode,
            config.reject_threshold,
            config.class_weight,
        )?;
        report.rejected_by_class += decisions
            .iter()
            .filter(|d| d.max_class_similarity > config.reject_threshold)
            .count() as u64;
        let mut kept: Vec<_> = decisions.iter().filter(|d| d.kept).collect();
        kept.sort_by_key(|d| d.rank);
        for d in kept {
            let h = &images[d.index];
            report.kept += 1;
            push_unique(
                &mut out,
                &mut seen,
                BackgroundAsset::new(h.pixels.clone(), h.prompt.text.clone(), group.clone()),
                &mut report,
            );
        }
        log.extend(decisions.into_iter().map(|decision| FilterLogEntry {
            stage: "background".into(),
            group: group.clone(),
            decision,
        }));
    }
    info!("backgrounds: {} generated, {} kept", report.generated, report.kept);
    Ok((out, report, log))
}

/// Zero-shot backgrounds: each of the first `zero_shot_templates` prompts
/// generates its images and loses the fraction most similar to any class.
pub fn build_zero_shot_backgrounds(
    vocab: &ClassVocabulary,
    config: &PipelineConfig,
    gateway: &Gateway,
) -> Result<(Vec<BackgroundAsset>, BackgroundReport, Vec<FilterLogEntry>), BackgroundError> {
    let class_embs = class_embeddings(vocab, config, gateway)?;
    let mut report = BackgroundReport::default();
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    let prompts = &config.zero_shot_prompts[..config.zero_shot_templates as usize];
    for (t, text) in prompts.iter().enumerate() {
        let wrap = |source| BackgroundError::Gateway {
            context: format!("zero-shot template {t} (`{text}`)"),
            source,
        };
        let prompt = Caption::new(text.clone(), CaptionSource::Synthesized, format!("zero-shot-{t}"));
        let seed = derive_seed(config.master_seed, "bg-zero-shot", t as u64);
        let images = generate_chunked(gateway, &prompt, config.images_per_zero_shot_template, seed).map_err(wrap)?;
        report.caption_sets += 1;
        report.generated += images.len() as u64;
        if images.is_empty() {
            continue;
        }
        let refs: Vec<&RgbImage> = images.iter().map(|h| &h.pixels).collect();
        let embs = gateway.embed(&[], &refs).map_err(wrap)?;
        let survivors = prune_fraction(&embs, &class_embs, config.zero_shot_prune_fraction)?;
        report.rejected_by_class += (images.len() - survivors.len()) as u64;
        report.kept += survivors.len() as u64;
        for i in survivors {
            push_unique(
                &mut out,
                &mut seen,
                BackgroundAsset::new(images[i].pixels.clone(), text.clone(), format!("zero-shot-{t}")),
                &mut report,
            );
        }
    }
    info!(
        "zero-shot backgrounds: {} generated, {} kept",
        report.generated, report.kept
    );
    Ok((out, report, Vec::new()))
}

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    digest: String,
    prompt: String,
    group: String,
}

/// Writes `<dir>/<digest>.png` for every asset and `<dir>/index.json`
/// preserving list order.
pub fn save_backgrounds(assets: &[BackgroundAsset], dir: &Path) -> Result<(), BackgroundError> {
    let store_err = |path: &Path, e: &dyn std::fmt::Display| BackgroundError::Store {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    std::fs::create_dir_all(dir).map_err(|e| store_err(dir, &e))?;
    let mut index = Vec::with_capacity(assets.len());
    for a in assets {
        let p = dir.join(format!("{}.png", a.digest));
        a.image.save(&p).map_err(|e| store_err(&p, &e))?;
        index.push(IndexEntry {
            digest: a.digest.clone(),
            prompt: a.prompt.clone(),
            group: a.group.clone(),
        });
    }
    let p = dir.join("index.json");
    let text = serde_json::to_string_pretty(&index).expect("index serializes");
    std::fs::write(&p, text).map_err(|e| store_err(&p, &e))
}

pub fn load_backgrounds(dir: &Path) -> Result<Vec<BackgroundAsset>, BackgroundError> {
    let store_err = |path: &Path, e: &dyn std::fmt::Display| BackgroundError::Store {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let p = dir.join("index.json");
    let text = std::fs::read_to_string(&p).map_err(|e| store_err(&p, &e))?;
    let index: Vec<IndexEntry> = serde_json::from_str(&text).map_err(|e| store_err(&p, &e))?;
    index
        .into_iter()
        .map(|e| {
            let p = dir.join(format!("{}.png", e.digest));
            let image = image::open(&p).map_err(|err| store_err(&p, &err))?.to_rgb8();
            let asset = BackgroundAsset::new(image, e.prompt, e.group);
            if asset.digest != e.digest {
                return Err(store_err(&p, &"pixels do not match digest"));
            }
            Ok(asset)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::StubBackend;

    fn one_class() -> ClassVocabulary {
        ClassVocabulary::new([("dog", Vec::<String>::new())]).unwrap()
    }

    fn small(config: PipelineConfig) -> PipelineConfig {
        PipelineConfig {
            image_size: (32, 32),
            ..config
        }
    }

    #[test]
    fn round_robin_split() {
        assert_eq!(images_per_prompt(80, 8), vec![10; 8]);
        assert_eq!(images_per_prompt(10, 4), vec![3, 3, 2, 2]);
        assert_eq!(images_per_prompt(2, 4), vec![1, 1, 0, 0]);
        assert_eq!(images_per_prompt(80, 12).iter().sum::<u32>(), 80);
    }

    #[test]
    fn context_prompts_exclude_class_words() {
        let lex = Lexicon::bundled();
        let vocab = ClassVocabulary::voc();
        let templates = parse_templates(&PipelineConfig::default().context_templates).unwrap();
        let cap = Caption::new("a dog running on a grass field", CaptionSource::CdiCaption, "cdi-0");
        let prompts = context_prompts(&cap, &vocab, &lex, &templates);
        assert!(!prompts.is_empty());
        assert!(prompts.iter().all(|p| !p.text.contains("dog")));
        assert!(prompts.iter().any(|p| p.text.contains("grass field")));
        let bare = Caption::new("a dog", CaptionSource::CdiCaption, "cdi-1");
        assert_eq!(context_prompts(&bare, &vocab, &lex, &templates)[0].text, "a dog");
    }

    #[test]
    fn caption_set_counts() {
        let config = small(PipelineConfig::default());
        let gw = Gateway::stub(StubBackend::default(), config.image_size, 4);
        let caps = vec![
            Caption::new("a dog on a grass field", CaptionSource::CdiCaption, "a"),
            Caption::new("a cat in a kitchen", CaptionSource::CdiCaption, "a"),
        ];
        let (assets, report, log) =
            build_context_backgrounds(&caps, &ClassVocabulary::voc(), &Lexicon::bundled(), &config, &gw).unwrap();
        assert_eq!(report.generated, 160);
        assert_eq!(report.kept, 60);
        assert_eq!(log.len(), 160);
        assert_eq!(assets.len() as u64 + report.duplicates, 60);
    }

    #[test]
    fn zero_shot_prunes_per_template() {
        let config = small(PipelineConfig {
            zero_shot_templates: 2,
            zero_shot_prompts: PipelineConfig::default().zero_shot_prompts[..2].to_vec(),
            images_per_zero_shot_template: 40,
            ..PipelineConfig::default()
        });
        let gw = Gateway::stub(StubBackend::default(), config.image_size, 4);
        let (assets, report, _) = build_zero_shot_backgrounds(&one_class(), &config, &gw).unwrap();
        assert_eq!(report.generated, 80);
        assert_eq!(report.kept, 76);
        assert_eq!(assets.len(), 76);
    }

    #[test]
    fn save_load_round_trip() {
        let a = BackgroundAsset::new(
            RgbImage::from_pixel(4, 3, image::Rgb([1, 2, 3])),
            "p".into(),
            "g".into(),
        );
        let b = BackgroundAsset::new(
            RgbImage::from_pixel(4, 3, image::Rgb([9, 2, 3])),
            "q".into(),
            "g".into(),
        );
        let dir = tempfile::tempdir().unwrap();
        save_backgrounds(&[b.clone(), a.clone()], dir.path()).unwrap();
        assert_eq!(load_backgrounds(dir.path()).unwrap(), vec![b, a]);
    }
}
