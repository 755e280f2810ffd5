//! Count planning: how many items each stage generates and keeps.

use serde::Serialize;

use crate::config::PipelineConfig;
use crate::vocab::ClassVocabulary;

/// Number of items removed when pruning `fraction` of `n`.
///
/// Rounds up, with a small tolerance so that e.g. `0.05 * 600` (which is
/// `30.000000000000004` in binary floating point) removes exactly 30.
pub fn prune_count(n: u64, fraction: f64) -> u64 {
    if n == 0 || fraction <= 0.0 {
        return 0;
    }
    let raw = fraction * n as f64;
    let drop = (raw - 1e-9).ceil().max(0.0) as u64;
    drop.min(n)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CountPlan {
    pub classes: u64,
    /// Images generated for one caption (M).
    pub generated_per_caption: u64,
    /// Images kept for one caption after filtering.
    pub kept_per_caption: u64,
    /// K * M.
    pub generated_per_cdi: u64,
    pub kept_per_cdi: u64,
    pub contexts_generated: u64,
    pub contexts_kept: u64,
    pub zero_shot_generated: u64,
    pub zero_shot_kept: u64,
    pub fg_generated: u64,
    pub fg_kept: u64,
    pub samples: u64,
    pub paste_attempts: u64,
}

pub fn expected_counts(config: &PipelineConfig, vocab: &ClassVocabulary) -> CountPlan {
    let classes = vocab.len() as u64;
    let n = config.num_cdis_per_class as u64;
    let k = config.captions_per_cdi as u64;
    let m = config.images_per_caption as u64;
    let keep = config.keep_per_caption as u64;
    let templates = config.zero_shot_templates as u64;
    let per_template = config.images_per_zero_shot_template as u64;
    let fg_templates = config.fg_templates.len() as u64;
    CountPlan {
        classes,
        generated_per_caption: m,
        kept_per_caption: keep,
        generated_per_cdi: k * m,
        kept_per_cdi: k * keep,
        contexts_generated: classes * n * k * m,
        contexts_kept: classes * n * k * keep,
        zero_shot_generated: templates * per_template,
        zero_shot_kept: templates * (per_template - prune_count(per_template, config.zero_shot_prune_fraction)),
        fg_generated: classes * fg_templates * config.fg_images_per_template as u64,
        fg_kept: classes * fg_templates * config.fg_keep_per_template as u64,
        samples: config.target_dataset_size,
        paste_attempts: config.target_dataset_size * config.pastes_per_image as u64,
    }
}
