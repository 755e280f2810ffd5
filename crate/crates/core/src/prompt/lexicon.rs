use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::Deserialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LexiconError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}:{line}: {message}")]
    Format { file: String, line: usize, message: String },
    #[error("relation fetch failed: {0}")]
    Fetch(String),
}

/// Noun list, class synonym map and word relation table.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Lexicon {
    pub noun_set: BTreeSet<String>,
    pub class_synonym_map: BTreeMap<String, BTreeSet<String>>,
    /// Related context words in file order.
    pub relation_table: BTreeMap<String, Vec<String>>,
}

const BUNDLED_NOUNS: &str = include_str!("../../data/nouns.txt");
const BUNDLED_RELATIONS: &str = include_str!("../../data/relations.tsv");
const BUNDLED_VOC_SYNONYMS: &str = include_str!("../../data/voc_synonyms.tsv");

fn norm(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

fn parse_tsv_map(text: &str, file: &str) -> Result<Vec<(String, Vec<String>)>, LexiconError> {
    let mut rows = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() || raw.trim_start().starts_with('#') {
            continue;
        }
        let (key, values) = raw.split_once('\t').ok_or_else(|| LexiconError::Format {
            file: file.to_string(),
            line: idx + 1,
            message: "expected `word<TAB>v1,v2,...`".into(),
        })?;
        let key = norm(key);
        let values: Vec<String> = values.split(',').map(norm).filter(|v| !v.is_empty()).collect();
        if key.is_empty() || values.is_empty() {
            return Err(LexiconError::Format {
                file: file.to_string(),
                line: idx + 1,
                message: "empty key or value list".into(),
            });
        }
        rows.push((key, values));
    }
    Ok(rows)
}

impl Lexicon {
    pub fn parse_nouns(text: &str) -> BTreeSet<String> {
        text.lines()
            .map(norm)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .collect()
    }

    pub fn from_parts(nouns: &str, class_synonyms: &str, relations: &str) -> Result<Self, LexiconError> {
        let mut lex = Lexicon {
            noun_set: Self::parse_nouns(nouns),
            ..Default::default()
        };
        for (label, syns) in parse_tsv_map(class_synonyms, "class_synonyms.tsv")? {
            lex.class_synonym_map.entry(label).or_default().extend(syns);
        }
        for (word, related) in parse_tsv_map(relations, "relations.tsv")? {
            let entry = lex.relation_table.entry(word).or_default();
            for r in related {
                if !entry.contains(&r) {
                    entry.push(r);
                }
            }
        }
        Ok(lex)
    }

    /// Lexicon shipped with the crate (VOC class synonyms).
    pub fn bundled() -> Self {
        Self::from_parts(BUNDLED_NOUNS, BUNDLED_VOC_SYNONYMS, BUNDLED_RELATIONS).expect("bundled lexicon parses")
    }

    /// Load `nouns.txt`, `class_synonyms.tsv` and `relations.tsv` from `dir`.
    /// The two TSV files are optional.
    pub fn load_dir(dir: &Path) -> Result<Self, LexiconError> {
        let read = |name: &str, required: bool| -> Result<String, LexiconError> {
            let path = dir.join(name);
            match std::fs::read_to_string(&path) {
                Ok(s) => Ok(s),
                Err(e) if !required && e.kind() == std::io::ErrorKind::NotFound => Ok(String::new()),
                Err(source) => Err(LexiconError::Io {
                    path: path.display().to_string(),
                    source,
                }),
            }
        };
        Self::from_parts(
            &read("nouns.txt", true)?,
            &read("class_synonyms.tsv", false)?,
            &read("relations.tsv", false)?,
        )
    }

    /// Every class label and synonym known to the lexicon.
    pub fn class_terms(&self) -> BTreeSet<String> {
        self.class_synonym_map
            .iter()
            .flat_map(|(k, v)| std::iter::once(k.clone()).chain(v.iter().cloned()))
            .collect()
    }

    pub fn relations_tsv(&self) -> String {
        self.relation_table
            .iter()
            .map(|(k, v)| format!("{k}\t{}\n", v.join(",")))
            .collect()
    }

    /// Populate `relation_table` entries for `words` from a ConceptNet-style
    /// HTTP endpoint (`GET {base}/query?node=/c/en/<word>&rel=/r/AtLocation`).
    /// Words that already have relations are left alone.
    pub fn fetch_relations(&mut self, base_url: &str, words: &[String], limit: usize) -> Result<usize, LexiconError> {
        let mut added = 0;
        for word in words {
            if self.relation_table.contains_key(word) {
                continue;
            }
            let node = format!("/c/en/{}", word.replace(' ', "_"));
            let url = format!("{}/query", base_url.trim_end_matches('/'));
            let body: ConceptNetResponse = ureq::get(&url)
                .query("node", &node)
                .query("rel", "/r/AtLocation")
                .query("limit", limit.to_string())
                .call()
                .map_err(|e| LexiconError::Fetch(format!("{word}: {e}")))?
                .body_mut()
                .read_json()
                .map_err(|e| LexiconError::Fetch(format!("{word}: {e}")))?;
            let related = related_from_edges(&body, &node);
            if !related.is_empty() {
                added += 1;
                self.relation_table.insert(word.clone(), related);
            }
        }
        Ok(added)
    }
}

#[derive(Debug, Deserialize)]
struct ConceptNetResponse {
    #[serde(default)]
    edges: Vec<ConceptNetEdge>,
}

#[derive(Debug, Deserialize)]
struct ConceptNetEdge {
    start: ConceptNetNode,
    end: ConceptNetNode,
}

#[derive(Debug, Deserialize)]
struct ConceptNetNode {
    #[serde(rename = "@id")]
    id: String,
    #[serde(default)]
    label: String,
    #[serde(default)]
    language: Option<String>,
}

fn related_from_edges(resp: &ConceptNetResponse, node: &str) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for edge in &resp.edges {
        let other = if edge.start.id.starts_with(node) {
            &edge.end
        } else {
            &edge.start
        };
        if other.language.as_deref().is_some_and(|l| l != "en") {
            continue;
        }
        let label = norm(&other.label);
        if !label.is_empty() && !out.contains(&label) {
            out.push(label);
        }
    }
    out
}
