//! Embedding-based quality gates for generated images.
//!
//! Backgrounds pass two rules: no similarity to an interest class above the
//! reject threshold, then the highest similarity to the generating caption.
//! Foregrounds are ranked by similarity to their class label. Every ranking
//! breaks ties by the lower candidate index.

use std::cmp::Ordering;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::FilterMode;
use crate::gateway::EmbeddingVector;
use crate::plan::prune_count;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FilterError {
    #[error("embedding dimensions differ: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("{0} caption embeddings for {1} candidates")]
    CaptionCount(usize, usize),
}

pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, FilterError> {
    if a.dim() != b.dim() {
        return Err(FilterError::DimensionMismatch(a.dim(), b.dim()));
    }
    let dot: f64 = a.values().iter().zip(b.values()).map(|(x, y)| x * y).sum();
    Ok(dot.clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterDecision {
    pub index: usize,
    pub caption_similarity: f64,
    pub max_class_similarity: f64,
    pub kept: bool,
    /// 1-based rank among kept candidates.
    pub rank: Option<usize>,
}

fn max_class_similarity(c: &EmbeddingVector, class_embs: &[EmbeddingVector]) -> Result<f64, FilterError> {
    let mut best = f64::NEG_INFINITY;
    for e in class_embs {
        best = best.max(cosine(c, e)?);
    }
    Ok(if class_embs.is_empty() { -1.0 } else { best })
}

fn by_score_then_index(scores: &[f64]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |a, b| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b))
}

fn decide(
    caption_sims: Vec<f64>,
    class_sims: Vec<f64>,
    eligible: impl Fn(usize) -> bool,
    score: impl Fn(usize) -> f64,
    keep: usize,
) -> Vec<FilterDecision> {
    let n = caption_sims.len();
    let scores: Vec<f64> = (0..n).map(&score).collect();
    let mut order: Vec<usize> = (0..n).filter(|i| eligible(*i)).collect();
    order.sort_by(by_score_then_index(&scores));
    let mut rank = vec![None; n];
    for (r, i) in order.iter().take(keep).enumerate() {
        rank[*i] = Some(r + 1);
    }
    (0..n)
        .map(|i| FilterDecision {
            index: i,
            caption_similarity: caption_sims[i],
            max_class_similarity: class_sims[i],
            kept: rank[i].is_some(),
            rank: rank[i],
        })
        .collect()
}

/// Rule 2 (reject any candidate whose best class similarity exceeds
/// `reject_threshold`) followed by rule 1 (keep the `keep` survivors most
/// similar to the caption). Returns one decision per candidate, in index order.
pub fn filter_backgrounds(
    candidates: &[EmbeddingVector],
    caption_emb: &EmbeddingVector,
    class_embs: &[EmbeddingVector],
    keep: usize,
    reject_threshold: f64,
) -> Result<Vec<FilterDecision>, FilterError> {
    let captions = vec![caption_emb.clone(); candidates.len()];
    filter_background_set(
        candidates,
        &captions,
        class_embs,
        keep,
        FilterMode::RejectThenRank,
        reject_threshold,
        0.0,
    )
}

/// Like [`filter_backgrounds`] but with a caption embedding per candidate
/// (images of one caption set may come from different context sentences),
/// and a selectable rule combination.
pub fn filter_background_set(
    candidates: &[EmbeddingVector],
    caption_embs: &[EmbeddingVector],
    class_embs: &[EmbeddingVector],
    keep: usize,
    mode: FilterMode,
    reject_threshold: f64,
    class_weight: f64,
) -> Result<Vec<FilterDecision>, FilterError> {
    if caption_embs.len() != candidates.len() {
        return Err(FilterError::CaptionCount(caption_embs.len(), candidates.len()));
    }
    let caption_sims = candidates
        .iter()
        .zip(caption_embs)
        .map(|(c, e)| cosine(c, e))
        .collect::<Result<Vec<_>, _>>()?;
    let class_sims = candidates
        .iter()
        .map(|c| max_class_similarity(c, class_embs))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(match mode {
        FilterMode::RejectThenRank => {
            let cs = caption_sims.clone();
            let ks = class_sims.clone();
            decide(caption_sims, class_sims, |i| ks[i] <= reject_threshold, |i| cs[i], keep)
        }
        FilterMode::Weighted => {
            let cs = caption_sims.clone();
            let ks = class_sims.clone();
            decide(
                caption_sims,
                class_sims,
                |_| true,
                |i| cs[i] - class_weight * ks[i].max(0.0),
                keep,
            )
        }
    })
}

/// Rank by similarity to the class label and keep the top `keep`.
/// `caption_similarity` and `max_class_similarity` both hold the label similarity.
pub fn select_top_foregrounds(
    candidates: &[EmbeddingVector],
    class_label_emb: &EmbeddingVector,
    keep: usize,
) -> Result<Vec<FilterDecision>, FilterError> {
    let sims = candidates
        .iter()
        .map(|c| cosine(c, class_label_emb))
        .collect::<Result<Vec<_>, _>>()?;
    let s = sims.clone();
    Ok(decide(sims.clone(), sims, |_| true, |i| s[i], keep))
}

/// Drop the `ceil(fraction * n)` candidates most similar to any class and
/// return the surviving indices in their original order.
pub fn prune_fraction(
    candidates: &[EmbeddingVector],
    class_embs: &[EmbeddingVector],
    fraction: f64,
) -> Result<Vec<usize>, FilterError> {
    let sims = candidates
        .iter()
        .map(|c| max_class_similarity(c, class_embs))
        .collect::<Result<Vec<_>, _>>()?;
    let drop = prune_count(candidates.len() as u64, fraction) as usize;
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(by_score_then_index(&sims));
    let mut dropped = vec![false; candidates.len()];
    for i in order.into_iter().take(drop) {
        dropped[i] = true;
    }
    Ok((0..candidates.len()).filter(|i| !dropped[*i]).collect())
}

/// One line of `filter_log.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterLogEntry {
    pub stage: String,
    pub group: String,
    #[serde(flatten)]
    pub decision: FilterDecision,
}

pub fn write_filter_log(path: &Path, entries: &[FilterLogEntry]) -> std::io::Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for e in entries {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}
