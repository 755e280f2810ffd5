use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use super::{Caption, CaptionSource};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TemplateError {
    #[error("malformed slot marker at byte {0}")]
    Malformed(usize),
    #[error("unknown slot `<{name}>` at byte {pos}")]
    UnknownSlot { name: String, pos: usize },
    #[error("no value for slot <{0}>")]
    MissingSlot(Slot),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Slot {
    Object,
    Context,
}

impl Slot {
    pub fn name(self) -> &'static str {
        match self {
            Slot::Object => "object",
            Slot::Context => "context",
        }
    }
}

impl fmt::Display for Slot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Segment {
    Text(String),
    Slot(Slot),
}

/// Prompt text with `<object>` / `<context>` markers. Whitespace inside a
/// marker is tolerated (`<object >`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptTemplate {
    text: String,
    segments: Vec<Segment>,
}

impl PromptTemplate {
    pub fn parse(text: &str) -> Result<Self, TemplateError> {
        let mut segments = Vec::new();
        let mut rest = text;
        let mut offset = 0;
        while let Some(open) = rest.find('<') {
            let after = &rest[open + 1..];
            let close = after.find('>').ok_or(TemplateError::Malformed(offset + open))?;
            let inner = &after[..close];
            if inner.contains('<') {
                return Err(TemplateError::Malformed(offset + open));
            }
            let slot = match inner.trim() {
                "object" => Slot::Object,
                "context" => Slot::Context,
                other => {
                    return Err(TemplateError::UnknownSlot {
                        name: other.to_string(),
                        pos: offset + open,
                    })
                }
            };
            if open > 0 {
                segments.push(Segment::Text(rest[..open].to_string()));
            }
            segments.push(Segment::Slot(slot));
            let consumed = open + 1 + close + 1;
            offset += consumed;
            rest = &rest[consumed..];
        }
        if rest.contains('>') {
            return Err(TemplateError::Malformed(offset + rest.find('>').unwrap()));
        }
        if !rest.is_empty() {
            segments.push(Segment::Text(rest.to_string()));
        }
        Ok(Self {
            text: text.to_string(),
            segments,
        })
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn slots(&self) -> impl Iterator<Item = Slot> + '_ {
        self.segments.iter().filter_map(|s| match s {
            Segment::Slot(slot) => Some(*slot),
            Segment::Text(_) => None,
        })
    }

    pub fn has_slot(&self, slot: Slot) -> bool {
        self.slots().any(|s| s == slot)
    }

    /// Match `text` against this template, returning the slot values when it
    /// fits. Comparison is case-insensitive and whitespace-normalized.
    pub fn matches(&self, text: &str) -> Option<BTreeMap<Slot, String>> {
        let norm = |s: &str| s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
        let hay = norm(text);
        let mut out = BTreeMap::new();
        match_segments(&self.segments, &hay, &mut out, &norm).then_some(out)
    }
}

fn match_segments(
    segs: &[Segment],
    hay: &str,
    out: &mut BTreeMap<Slot, String>,
    norm: &dyn Fn(&str) -> String,
) -> bool {
    match segs.split_first() {
        None => hay.is_empty(),
        Some((Segment::Text(t), rest)) => {
            let t = norm(t);
            let hay = hay.trim_start();
            if t.is_empty() {
                return match_segments(rest, hay, out, norm);
            }
            hay.strip_prefix(t.as_str())
                .is_some_and(|h| match_segments(rest, h.trim_start(), out, norm))
        }
        Some((Segment::Slot(slot), rest)) => {
            // slot values are non-empty; try every split point
            let boundaries: Vec<usize> = hay
                .char_indices()
                .map(|(i, _)| i)
                .skip(1)
                .chain(std::iter::once(hay.len()))
                .collect();
            for end in boundaries {
                let value = hay[..end].trim();
                if value.is_empty() {
                    continue;
                }
                if match_segments(rest, &hay[end..], out, norm) {
                    out.insert(*slot, value.to_string());
                    return true;
                }
            }
            false
        }
    }
}

impl fmt::Display for PromptTemplate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}

fn starts_with_punct(s: &str) -> bool {
    s.chars()
        .next()
        .is_some_and(|c| matches!(c, ',' | '.' | ';' | ':' | '!' | '?'))
}

/// Replace every marker with its slot value. Whitespace around a marker is
/// normalized to a single space; text away from markers is left untouched.
pub fn fill_template(template: &PromptTemplate, slots: &BTreeMap<Slot, String>) -> Result<Caption, TemplateError> {
    let mut out = String::new();
    let mut after_slot = false;
    for seg in &template.segments {
        match seg {
            Segment::Text(t) => {
                if after_slot {
                    let t = t.trim_start();
                    if !t.is_empty() && !out.is_empty() && !starts_with_punct(t) {
                        out.push(' ');
                    }
                    out.push_str(t);
                } else {
                    out.push_str(t);
                }
                after_slot = false;
            }
            Segment::Slot(slot) => {
                let value = slots.get(slot).ok_or(TemplateError::MissingSlot(*slot))?.trim();
                let kept = out.trim_end().len();
                out.truncate(kept);
                if !out.is_empty() && !value.is_empty() {
                    out.push(' ');
                }
                out.push_str(value);
                after_slot = true;
            }
        }
    }
    for unused in unused_slots(template, slots) {
        log::warn!("slot <{unused}> has a value but template `{template}` does not use it");
    }
    Ok(Caption::new(out, CaptionSource::Synthesized, template.text.clone()))
}

pub fn unused_slots(template: &PromptTemplate, slots: &BTreeMap<Slot, String>) -> Vec<Slot> {
    slots.keys().filter(|s| !template.has_slot(**s)).copied().collect()
}
