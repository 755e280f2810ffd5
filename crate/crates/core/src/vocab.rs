//! Class vocabulary: the interest classes a dataset is synthesized for.

use std::collections::HashSet;
use std::path::Path;

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("cannot read vocabulary {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Invalid { line: usize, message: String },
    #[error("vocabulary is empty")]
    Empty,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Category {
    pub id: u32,
    pub label: String,
    pub synonyms: Vec<String>,
}

/// Ordered categories with ids `1..=n`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ClassVocabulary {
    categories: Vec<Category>,
}

const VOC_CLASSES: [(&str, &[&str]); 20] = [
    ("aeroplane", &["airplane", "plane", "aircraft", "jet"]),
    ("bicycle", &["bike", "cycle"]),
    ("bird", &["birds", "parrot", "pigeon"]),
    ("boat", &["ship", "sailboat", "boats"]),
    ("bottle", &["bottles", "flask"]),
    ("bus", &["buses", "coach"]),
    ("car", &["cars", "automobile", "vehicle"]),
    ("cat", &["cats", "kitten", "kitty"]),
    ("chair", &["chairs", "seat"]),
    ("cow", &["cows", "cattle", "calf"]),
    ("diningtable", &["dining table", "table", "tables"]),
    ("dog", &["dogs", "puppy", "hound"]),
    ("horse", &["horses", "pony"]),
    ("motorbike", &["motorcycle", "motorbikes", "scooter"]),
    (
        "person",
        &[
            "people", "man", "woman", "men", "women", "child", "boy", "girl", "human",
        ],
    ),
    ("pottedplant", &["potted plant", "houseplant", "plant"]),
    ("sheep", &["lamb", "lambs"]),
    ("sofa", &["couch", "sofas"]),
    ("train", &["trains", "locomotive"]),
    ("tvmonitor", &["tv monitor", "television", "tv", "monitor", "screen"]),
];

impl ClassVocabulary {
    /// Build from `(label, synonyms)` pairs; ids are assigned in order.
    pub fn new<L, S>(entries: impl IntoIterator<Item = (L, Vec<S>)>) -> Result<Self, VocabError>
    where
        L: Into<String>,
        S: Into<String>,
    {
        let mut categories = Vec::new();
        let mut seen = HashSet::new();
        for (i, (label, syns)) in entries.into_iter().enumerate() {
            let label = label.into().trim().to_string();
            if label.is_empty() {
                return Err(VocabError::Invalid {
                    line: i + 1,
                    message: "empty label".into(),
                });
            }
            if !seen.insert(label.to_lowercase()) {
                return Err(VocabError::Invalid {
                    line: i + 1,
                    message: format!("duplicate label `{label}`"),
                });
            }
            let synonyms = syns
                .into_iter()
                .map(|s| s.into().trim().to_lowercase())
                .filter(|s| !s.is_empty())
                .collect();
            categories.push(Category {
                id: i as u32 + 1,
                label,
                synonyms,
            });
        }
        if categories.is_empty() {
            return Err(VocabError::Empty);
        }
        Ok(Self { categories })
    }

    /// The 20 PASCAL VOC classes.
    pub fn voc() -> Self {
        Self::new(VOC_CLASSES.iter().map(|(l, s)| (*l, s.to_vec()))).expect("static vocabulary")
    }

    /// Parse `label[<TAB>syn1,syn2,...]` lines; `#` starts a comment line.
    pub fn parse(text: &str) -> Result<Self, VocabError> {
        let mut entries = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim_end();
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let (label, syns) = match line.split_once('\t') {
                Some((l, s)) => (l, s.split(',').map(str::to_string).collect()),
                None => (line, Vec::new()),
            };
            if label.trim().is_empty() {
                return Err(VocabError::Invalid {
                    line: idx + 1,
                    message: "empty label".into(),
                });
            }
            entries.push((idx + 1, label.trim().to_string(), syns));
        }
        // re-map positional errors to file line numbers
        let lines: Vec<usize> = entries.iter().map(|e| e.0).collect();
        Self::new(entries.into_iter().map(|(_, l, s)| (l, s))).map_err(|e| match e {
            VocabError::Invalid { line, message } => VocabError::Invalid {
                line: lines[line - 1],
                message,
            },
            other => other,
        })
    }

    pub fn load(path: &Path) -> Result<Self, VocabError> {
        let text = std::fs::read_to_string(path).map_err(|source| VocabError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn categories(&self) -> &[Category] {
        &self.categories
    }

    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    pub fn get(&self, id: u32) -> Option<&Category> {
        id.checked_sub(1).and_then(|i| self.categories.get(i as usize))
    }

    /// Lowercased labels and synonyms of every class.
    pub fn class_terms(&self) -> HashSet<String> {
        self.categories
            .iter()
            .flat_map(|c| std::iter::once(c.label.to_lowercase()).chain(c.synonyms.iter().cloned()))
            .collect()
    }

    /// Canonical text form, used for digests.
    pub fn to_canonical_string(&self) -> String {
        self.categories
            .iter()
            .map(|c| format!("{}\t{}\n", c.label, c.synonyms.join(",")))
            .collect()
    }
}
