use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::{fill_template, Caption, CaptionSource, Lexicon, PromptTemplate, Slot};
use crate::vocab::ClassVocabulary;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WordOrigin {
    Extracted,
    Expanded,
}

/// A background noun phrase such as "grass field".
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextWord {
    surface: String,
    pub origin: WordOrigin,
}

impl ContextWord {
    /// Lowercases and trims; `None` for an empty surface.
    pub fn new(surface: &str, origin: WordOrigin) -> Option<Self> {
        let surface = surface.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
        (!surface.is_empty()).then_some(Self { surface, origin })
    }

    pub fn surface(&self) -> &str {
        &self.surface
    }
}

/// Lowercase and split on anything that is not alphanumeric.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn singular(word: &str) -> Option<&str> {
    if word.len() > 3 && word.ends_with("es") {
        Some(&word[..word.len() - 2])
    } else if word.len() > 2 && word.ends_with('s') && !word.ends_with("ss") {
        Some(&word[..word.len() - 1])
    } else {
        None
    }
}

fn is_class_term(surface: &str, terms: &HashSet<String>) -> bool {
    if terms.contains(surface) {
        return true;
    }
    if !surface.contains(' ') {
        let trimmed = surface.strip_suffix("es").filter(|_| surface.len() > 3);
        let plain = singular(surface);
        return trimmed.into_iter().chain(plain).any(|s| terms.contains(s));
    }
    false
}

fn class_terms(vocab: Option<&ClassVocabulary>, lexicon: &Lexicon) -> HashSet<String> {
    let mut terms: HashSet<String> = lexicon.class_terms().into_iter().collect();
    if let Some(v) = vocab {
        terms.extend(v.class_terms());
    }
    terms
}

/// Nouns of the caption that describe the scene rather than an interest
/// class. Bigrams found in the noun set win over their unigrams.
pub fn extract_context_words(caption: &Caption, vocab: &ClassVocabulary, lexicon: &Lexicon) -> Vec<ContextWord> {
    let tokens = tokenize(&caption.text);
    let terms = class_terms(Some(vocab), lexicon);
    let mut found: Vec<String> = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        if i + 1 < tokens.len() {
            let bigram = format!("{} {}", tokens[i], tokens[i + 1]);
            if lexicon.noun_set.contains(&bigram) {
                found.push(bigram);
                i += 2;
                continue;
            }
        }
        if lexicon.noun_set.contains(&tokens[i]) {
            found.push(tokens[i].clone());
        }
        i += 1;
    }
    let mut seen = HashSet::new();
    found
        .into_iter()
        .filter(|w| !is_class_term(w, &terms))
        .filter(|w| seen.insert(w.clone()))
        .filter_map(|w| ContextWord::new(&w, WordOrigin::Extracted))
        .collect()
}

/// Add related words from the relation table after the input words.
pub fn expand_context_words(words: &[ContextWord], lexicon: &Lexicon) -> Vec<ContextWord> {
    let terms = class_terms(None, lexicon);
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for w in words {
        if !is_class_term(w.surface(), &terms) && seen.insert(w.surface().to_string()) {
            out.push(w.clone());
        }
    }
    for w in words {
        let Some(related) = lexicon.relation_table.get(w.surface()) else {
            continue;
        };
        for r in related {
            let Some(cw) = ContextWord::new(r, WordOrigin::Expanded) else {
                continue;
            };
            if !is_class_term(cw.surface(), &terms) && seen.insert(cw.surface().to_string()) {
                out.push(cw);
            }
        }
    }
    out
}

/// Cross product of words and templates, word-major.
pub fn synthesize_context_sentences(words: &[ContextWord], templates: &[PromptTemplate]) -> Vec<Caption> {
    let mut out = Vec::with_capacity(words.len() * templates.len());
    for w in words {
        let slots = [(Slot::Context, w.surface().to_string())].into_iter().collect();
        for (ti, t) in templates.iter().enumerate() {
            match fill_template(t, &slots) {
                Ok(mut c) => {
                    c.source = CaptionSource::Synthesized;
                    c.provenance = format!("context-template:{ti}");
                    out.push(c);
                }
                Err(e) => log::warn!("skipping template `{t}`: {e}"),
            }
        }
    }
    out
}
