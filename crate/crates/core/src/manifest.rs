//! Run manifest: the reproducibility record written as `manifest.json`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::PipelineConfig;
use crate::rng::{derive_rng, RngStream};
use crate::vocab::ClassVocabulary;

pub const TOOL_VERSION: &str = concat!("synthcomp ", env!("CARGO_PKG_VERSION"));

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Ok,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub status: StageStatus,
    pub counts: BTreeMap<String, u64>,
    pub digest: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config_digest: String,
    pub master_seed: u64,
    pub stages: Vec<StageRecord>,
}

impl RunManifest {
    pub fn new(config: &PipelineConfig, vocab: &ClassVocabulary) -> Self {
        Self {
            tool_version: TOOL_VERSION.to_string(),
            config_digest: config_digest(config, vocab),
            master_seed: config.master_seed,
            stages: Vec::new(),
        }
    }

    /// Random stream for item `index` of `stage`.
    pub fn rng(&self, stage: &str, index: u64) -> RngStream {
        derive_rng(self.master_seed, stage, index)
    }

    pub fn record(&mut self, name: &str, counts: impl IntoIterator<Item = (&'static str, u64)>, digest: String) {
        self.stages.push(StageRecord {
            name: name.to_string(),
            status: StageStatus::Ok,
            counts: counts.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
            digest,
            error: None,
        });
    }

    pub fn record_failure(&mut self, name: &str, error: &str) {
        self.stages.push(StageRecord {
            name: name.to_string(),
            status: StageStatus::Failed,
            counts: BTreeMap::new(),
            digest: String::new(),
            error: Some(error.to_string()),
        });
    }

    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().rev().find(|s| s.name == name)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    /// Write via a temporary file so a crash never leaves a torn manifest.
    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, self.to_json())?;
        std::fs::rename(tmp, path)
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(std::io::Error::other)
    }
}

/// Digest over the logical content of config and vocabulary. The config is
/// serialized canonically first, so key order and whitespace in the source
/// file do not matter.
pub fn config_digest(config: &PipelineConfig, vocab: &ClassVocabulary) -> String {
    let mut text = config.to_config_string();
    text.push_str("--\n");
    text.push_str(&vocab.to_canonical_string());
    sha256_hex(text.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn digest_ignores_key_order_and_whitespace() {
        let a = PipelineConfig::parse("blur_sigma = 1.5\nmaster_seed = 3\n").unwrap();
        let b = PipelineConfig::parse("# reordered\n   master_seed=3\n\nblur_sigma   =   1.5").unwrap();
        let v = ClassVocabulary::voc();
        assert_eq!(config_digest(&a, &v), config_digest(&b, &v));
        let c = PipelineConfig::parse("blur_sigma = 1.0\nmaster_seed = 3\n").unwrap();
        assert_ne!(config_digest(&a, &v), config_digest(&c, &v));
    }

    #[test]
    fn manifest_json_round_trips() {
        let cfg = PipelineConfig::default();
        let mut m = RunManifest::new(&cfg, &ClassVocabulary::voc());
        m.record("foregrounds", [("generated", 10), ("kept", 5)], "abc".into());
        m.record_failure("compose", "boom");
        let back: RunManifest = serde_json::from_str(&m.to_json()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.stage("compose").unwrap().status, StageStatus::Failed);
    }

    #[test]
    fn manifest_rng_uses_master_seed() {
        let cfg = PipelineConfig {
            master_seed: 11,
            ..PipelineConfig::default()
        };
        let m = RunManifest::new(&cfg, &ClassVocabulary::voc());
        assert_eq!(m.rng("compose", 2).next_u64(), derive_rng(11, "compose", 2).next_u64());
    }
}
