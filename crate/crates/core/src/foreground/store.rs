//! Digest-keyed foreground asset store and its on-disk layout:
//! `<root>/<category_id>/<digest>.png` plus `<digest>.json`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::ForegroundAsset;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Corrupt { path: PathBuf, message: String },
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    category_id: u32,
    prompt: String,
    score: f64,
    area: u64,
    area_fraction: f64,
    digest: String,
}

/// Assets grouped by category; iteration order is (category_id, digest).
#[derive(Clone, Debug, Default)]
pub struct AssetStore {
    by_category: BTreeMap<u32, BTreeMap<String, ForegroundAsset>>,
    digests: BTreeSet<String>,
}

impl AssetStore {
    /// Returns false, leaving the store unchanged, when the digest is present.
    pub fn insert(&mut self, asset: ForegroundAsset) -> bool {
        if !self.digests.insert(asset.digest.clone()) {
            return false;
        }
        self.by_category
            .entry(asset.category_id)
            .or_default()
            .insert(asset.digest.clone(), asset);
        true
    }

    pub fn len(&self) -> usize {
        self.digests.len()
    }

    pub fn is_empty(&self) -> bool {
        self.digests.is_empty()
    }

    pub fn count(&self, category_id: u32) -> usize {
        self.by_category.get(&category_id).map_or(0, BTreeMap::len)
    }

    pub fn counts(&self) -> BTreeMap<u32, usize> {
        self.by_category.iter().map(|(k, v)| (*k, v.len())).collect()
    }

    pub fn contains(&self, digest: &str) -> bool {
        self.digests.contains(digest)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ForegroundAsset> {
        self.by_category.values().flat_map(BTreeMap::values)
    }

    pub fn assets(&self) -> Vec<&ForegroundAsset> {
        self.iter().collect()
    }

    pub fn save(&self, root: &Path) -> Result<(), StoreError> {
        for asset in self.iter() {
            let dir = root.join(asset.category_id.to_string());
            std::fs::create_dir_all(&dir).map_err(io(&dir))?;
            let png = dir.join(format!("{}.png", asset.digest));
            asset.rgba.save(&png).map_err(|e| StoreError::Corrupt {
                path: png.clone(),
                message: e.to_string(),
            })?;
            let sidecar = Sidecar {
                category_id: asset.category_id,
                prompt: asset.prompt.clone(),
                score: asset.selection_score,
                area: asset.mask.area(),
                area_fraction: asset.area_fraction,
                digest: asset.digest.clone(),
            };
            let json = dir.join(format!("{}.json", asset.digest));
            let text = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
            std::fs::write(&json, text).map_err(io(&json))?;
        }
        Ok(())
    }

    pub fn load(root: &Path) -> Result<Self, StoreError> {
        let mut store = Self::default();
        let mut sidecars: Vec<PathBuf> = Vec::new();
        for entry in std::fs::read_dir(root).map_err(io(root))? {
            let dir = entry.map_err(io(root))?.path();
            if !dir.is_dir() {
                continue;
            }
            for f in std::fs::read_dir(&dir).map_err(io(&dir))? {
                let p = f.map_err(io(&dir))?.path();
                if p.extension().is_some_and(|e| e == "json") {
                    sidecars.push(p);
                }
            }
        }
        sidecars.sort();
        for json in sidecars {
            let corrupt = |message: String| StoreError::Corrupt {
                path: json.clone(),
                message,
            };
            let text = std::fs::read_to_string(&json).map_err(io(&json))?;
            let meta: Sidecar = serde_json::from_str(&text).map_err(|e| corrupt(e.to_string()))?;
            let png = json.with_extension("png");
            let rgba = image::open(&png).map_err(|e| corrupt(e.to_string()))?.to_rgba8();
            let asset = ForegroundAsset::from_rgba(meta.category_id, rgba, meta.prompt, meta.score, meta.area_fraction);
            if asset.digest != meta.digest {
                return Err(corrupt(format!("digest {} does not match pixels", meta.digest)));
            }
            store.insert(asset);
        }
        Ok(store)
    }
}
