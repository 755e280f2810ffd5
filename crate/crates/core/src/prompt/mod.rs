//! Linguistic side of the pipeline: templates, context words and caption edits.

mod context;
mod intervene;
mod lexicon;
mod template;

use serde::{Deserialize, Serialize};

pub use context::{
    expand_context_words, extract_context_words, synthesize_context_sentences, tokenize, ContextWord, WordOrigin,
};
pub use intervene::{count_occurrences, intervene, parse_edits, EditParseError, Intervention, Position};
pub use lexicon::{Lexicon, LexiconError};
pub use template::{fill_template, unused_slots, PromptTemplate, Slot, TemplateError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaptionSource {
    CdiCaption,
    Synthesized,
    Intervened,
}

/// A sentence fed to (or produced by) a model backend.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Caption {
    pub text: String,
    pub source: CaptionSource,
    /// Originating CDI id or template id.
    pub provenance: String,
}

impl Caption {
    pub fn new(text: impl Into<String>, source: CaptionSource, provenance: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            source,
            provenance: provenance.into(),
        }
    }
}
