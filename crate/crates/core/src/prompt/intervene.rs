//! Caption edits: remove a distractor phrase, add a phrase, change a style word.

use thiserror::Error;

use super::{Caption, CaptionSource};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Position {
    Append,
    Prepend,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Intervention {
    Remove { target: String },
    Add { target: String, position: Position },
    StyleChange { target: String, replacement: String },
}

impl Intervention {
    pub fn remove(target: &str) -> Option<Self> {
        let target = target.trim();
        (!target.is_empty()).then(|| Self::Remove {
            target: target.to_string(),
        })
    }

    pub fn add(target: &str, position: Position) -> Option<Self> {
        let target = target.trim();
        (!target.is_empty()).then(|| Self::Add {
            target: target.to_string(),
            position,
        })
    }

    pub fn style_change(target: &str, replacement: &str) -> Option<Self> {
        let (target, replacement) = (target.trim(), replacement.trim());
        (!target.is_empty() && !replacement.is_empty()).then(|| Self::StyleChange {
            target: target.to_string(),
            replacement: replacement.to_string(),
        })
    }

    pub fn target(&self) -> &str {
        match self {
            Self::Remove { target } | Self::Add { target, .. } | Self::StyleChange { target, .. } => target,
        }
    }
}

const ARTICLES: &[&str] = &["a", "an", "the"];
const CONNECTIVES: &[&str] = &[
    "and", "with", "in", "on", "at", "near", "by", "of", "beside", "behind", "under", "over", "inside", "next",
];

fn norm(tok: &str) -> String {
    tok.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase()
}

fn is_bare(tok: &str, set: &[&str]) -> bool {
    tok.chars().all(|c| c.is_alphanumeric()) && set.contains(&tok.to_lowercase().as_str())
}

fn trailing_punct(tok: &str) -> &str {
    let keep = tok.trim_end_matches(|c: char| !c.is_alphanumeric()).len();
    &tok[keep..]
}

fn find_phrase(tokens: &[String], phrase: &[String], from: usize) -> Option<usize> {
    if phrase.is_empty() || tokens.len() < phrase.len() {
        return None;
    }
    (from..=tokens.len() - phrase.len()).find(|&i| phrase.iter().enumerate().all(|(j, p)| norm(&tokens[i + j]) == *p))
}

fn phrase_tokens(target: &str) -> Vec<String> {
    target.split_whitespace().map(norm).filter(|t| !t.is_empty()).collect()
}

/// Number of whole-phrase, case-insensitive occurrences of `target`.
pub fn count_occurrences(text: &str, target: &str) -> usize {
    let tokens: Vec<String> = text.split_whitespace().map(str::to_string).collect();
    let phrase = phrase_tokens(target);
    let mut count = 0;
    let mut from = 0;
    while let Some(i) = find_phrase(&tokens, &phrase, from) {
        count += 1;
        from = i + phrase.len();
    }
    count
}

fn remove_phrase(text: &str, target: &str) -> String {
    let mut tokens: Vec<String> = text.split_whitespace().map(str::to_string).collect();
    let phrase = phrase_tokens(target);
    while let Some(s) = find_phrase(&tokens, &phrase, 0) {
        let e = s + phrase.len();
        let last_removed = tokens[e - 1].clone();
        let list_item = last_removed.ends_with(',') || (s > 0 && tokens[s - 1].ends_with(','));
        tokens.drain(s..e);
        let mut s = s;
        if list_item {
            // ", <target>" suffix form: drop the comma left dangling at the end
            if !last_removed.ends_with(',') && s == tokens.len() && s > 0 {
                let prev = &mut tokens[s - 1];
                prev.truncate(prev.trim_end_matches(',').len());
            }
            continue;
        }
        if s > 0 && is_bare(&tokens[s - 1], ARTICLES) {
            tokens.remove(s - 1);
            s -= 1;
        }
        let left_conn = s > 0 && is_bare(&tokens[s - 1], CONNECTIVES);
        let right_conn = s < tokens.len() && is_bare(&tokens[s], CONNECTIVES);
        if s == 0 && right_conn {
            tokens.remove(0);
        } else if s == tokens.len() && left_conn {
            tokens.remove(s - 1);
            s -= 1;
        } else if left_conn && right_conn {
            tokens.remove(s);
        }
        if s == tokens.len() && s > 0 {
            let prev = &mut tokens[s - 1];
            prev.truncate(prev.trim_end_matches(',').len());
        }
        // keep sentence-final punctuation of a removed tail
        let tail = trailing_punct(&last_removed);
        if s == tokens.len() && s > 0 && matches!(tail, "." | "!" | "?") {
            tokens[s - 1].push_str(tail);
        }
    }
    tokens.join(" ")
}

fn replace_phrase(text: &str, target: &str, replacement: &str) -> String {
    let tokens: Vec<String> = text.split_whitespace().map(str::to_string).collect();
    let phrase = phrase_tokens(target);
    let mut out: Vec<String> = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        if find_phrase(&tokens[i..], &phrase, 0) == Some(0) {
            let last = &tokens[i + phrase.len() - 1];
            out.push(format!("{replacement}{}", trailing_punct(last)));
            i += phrase.len();
        } else {
            out.push(tokens[i].clone());
            i += 1;
        }
    }
    out.join(" ")
}

/// Apply one edit. Editing an absent target returns the caption unchanged
/// (apart from its source tag).
pub fn intervene(caption: &Caption, edit: &Intervention) -> Caption {
    let text = match edit {
        Intervention::Remove { target } => {
            let out = remove_phrase(&caption.text, target);
            if out.is_empty() {
                log::warn!("removing `{target}` would empty `{}`; left unchanged", caption.text);
                caption.text.clone()
            } else {
                out
            }
        }
        Intervention::Add { target, position } => match position {
            Position::Append => format!("{}, {target}", caption.text),
            Position::Prepend => format!("{target}, {}", caption.text),
        },
        Intervention::StyleChange { target, replacement } => replace_phrase(&caption.text, target, replacement),
    };
    Caption {
        text,
        source: CaptionSource::Intervened,
        provenance: caption.provenance.clone(),
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("edits line {line}: {message}")]
pub struct EditParseError {
    pub line: usize,
    pub message: String,
}

/// Parse an edits file: one edit per line, tab-separated.
///
/// ```text
/// remove        <TAB> man and a woman
/// add           <TAB> people <TAB> append|prepend
/// style_change  <TAB> cartoon <TAB> real
/// ```
pub fn parse_edits(text: &str) -> Result<Vec<Intervention>, EditParseError> {
    let mut edits = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() || raw.trim_start().starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = raw.split('\t').map(str::trim).collect();
        let err = |m: &str| EditParseError {
            line,
            message: m.to_string(),
        };
        let edit = match fields.as_slice() {
            ["remove", target] => Intervention::remove(target),
            ["add", target] => Intervention::add(target, Position::Append),
            ["add", target, pos] => {
                let position = match *pos {
                    "append" => Position::Append,
                    "prepend" => Position::Prepend,
                    _ => return Err(err("position must be `append` or `prepend`")),
                };
                Intervention::add(target, position)
            }
            ["style_change", target, replacement] => Intervention::style_change(target, replacement),
            [kind, ..] if !["remove", "add", "style_change"].contains(kind) => {
                return Err(err(&format!("unknown edit kind `{kind}`")))
            }
            _ => return Err(err("wrong number of tab-separated fields")),
        };
        edits.push(edit.ok_or_else(|| err("empty target or replacement"))?);
    }
    Ok(edits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cap(text: &str) -> Caption {
        Caption::new(text, CaptionSource::CdiCaption, "cdi:3")
    }

    fn apply(text: &str, edit: Intervention) -> String {
        intervene(&cap(text), &edit).text
    }

    #[test]
    fn removes_distractor_people() {
        let out = apply(
            "a man and a woman in a kitchen with a table",
            Intervention::remove("man and a woman").unwrap(),
        );
        assert_eq!(out, "a kitchen with a table");
    }

    #[test]
    fn style_change_cartoon_to_real() {
        let out = apply(
            "a cartoon kitchen with a stove",
            Intervention::style_change("cartoon", "real").unwrap(),
        );
        assert_eq!(out, "a real kitchen with a stove");
        let out = apply(
            "Cartoon stove, cartoon sink.",
            Intervention::style_change("cartoon", "real").unwrap(),
        );
        assert_eq!(out, "real stove, real sink.");
    }

    #[test]
    fn absent_target_leaves_text() {
        let c = cap("a kitchen with a stove");
        let out = intervene(&c, &Intervention::remove("people").unwrap());
        assert_eq!(out.text, c.text);
        assert_eq!(out.source, CaptionSource::Intervened);
        assert_eq!(out.provenance, "cdi:3");
    }

    #[test]
    fn remove_cleans_connectives() {
        let rm = |t: &str, w: &str| apply(t, Intervention::remove(w).unwrap());
        assert_eq!(rm("a kitchen with a dog and a cat", "dog"), "a kitchen with a cat");
        assert_eq!(rm("a dog and a cat", "dog"), "a cat");
        assert_eq!(rm("a kitchen with a dog", "dog"), "a kitchen");
        assert_eq!(rm("a kitchen with a dog.", "dog"), "a kitchen.");
        assert_eq!(rm("A Dog in a park, a dog", "dog"), "a park");
        assert_eq!(rm("sunny beach, people", "people"), "sunny beach");
        assert_eq!(rm("people, sunny beach", "people"), "sunny beach");
        assert_eq!(rm("dog", "dog"), "dog");
    }

    #[test]
    fn whole_words_only() {
        assert_eq!(
            apply("a doghouse in a yard", Intervention::remove("dog").unwrap()),
            "a doghouse in a yard"
        );
        assert_eq!(count_occurrences("cartoon cartoons Cartoon, cartoon", "cartoon"), 3);
    }

    #[test]
    fn add_positions() {
        assert_eq!(
            apply("a kitchen", Intervention::add("bright", Position::Append).unwrap()),
            "a kitchen, bright"
        );
        assert_eq!(
            apply("a kitchen", Intervention::add("bright", Position::Prepend).unwrap()),
            "bright, a kitchen"
        );
    }

    #[test]
    fn constructors_enforce_nonempty() {
        assert!(Intervention::remove("  ").is_none());
        assert!(Intervention::style_change("x", "").is_none());
    }

    #[test]
    fn parse_edits_file() {
        let edits =
            parse_edits("# edits\nremove\tman and a woman\nstyle_change\tcartoon\treal\nadd\tsunlight\tprepend\n")
                .unwrap();
        assert_eq!(edits.len(), 3);
        assert_eq!(edits[0], Intervention::remove("man and a woman").unwrap());
        assert_eq!(edits[2], Intervention::add("sunlight", Position::Prepend).unwrap());
        assert_eq!(parse_edits("remove\tx\nrename\ta\tb\n").unwrap_err().line, 2);
        assert_eq!(parse_edits("style_change\tx\n").unwrap_err().line, 1);
        assert!(parse_edits("").unwrap().is_empty());
    }

    const WORDS: &[&str] = &[
        "a", "the", "kitchen", "with", "and", "in", "table", "stove", "on", "of", "red", "big", "room", "sink", "near",
        "an", "old", "floor",
    ];
    const TARGETS: &[&str] = &["sunlight", "wooden chairs", "people", "morning light"];

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(500))]
        #[test]
        fn add_then_remove_is_identity(
            idx in proptest::collection::vec(0..WORDS.len(), 1..12),
            t in 0..TARGETS.len(),
            prepend in any::<bool>(),
        ) {
            let text = idx.iter().map(|i| WORDS[*i]).collect::<Vec<_>>().join(" ");
            let pos = if prepend { Position::Prepend } else { Position::Append };
            let added = intervene(&cap(&text), &Intervention::add(TARGETS[t], pos).unwrap());
            let back = intervene(&added, &Intervention::remove(TARGETS[t]).unwrap());
            prop_assert_eq!(back.text, text);
        }
    }
}
