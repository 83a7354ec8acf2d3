//! Drug lexicon and mention extraction.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::GenerationError;

#[derive(Debug, Clone, Deserialize)]
struct RawEntry {
    canonical: String,
    #[serde(default)]
    classes: Vec<String>,
}

/// Surface forms mapped to canonical drug ids, plus class tags per id.
/// Lookup is case-insensitive; surface forms are stored lowercase.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DrugLexicon {
    entries: BTreeMap<String, String>,
    classes: BTreeMap<String, BTreeSet<String>>,
    /// Longest surface first, then lexicographic.
    scan_order: Vec<String>,
}

impl DrugLexicon {
    pub fn from_entries<I, S, C, K>(entries: I) -> Result<Self, GenerationError>
    where
        I: IntoIterator<Item = (S, C, Vec<K>)>,
        S: AsRef<str>,
        C: Into<String>,
        K: Into<String>,
    {
        let mut lex = DrugLexicon::default();
        for (surface, canonical, classes) in entries {
            let surface = surface.as_ref().trim().to_lowercase();
            let canonical: String = canonical.into();
            if surface.is_empty() || canonical.is_empty() {
                return Err(GenerationError::Lexicon("empty surface form or canonical id".into()));
            }
            if let Some(prev) = lex.entries.get(&surface) {
                if *prev != canonical {
                    return Err(GenerationError::Lexicon(format!(
                        "surface form {surface:?} maps to both {prev} and {canonical}"
                    )));
                }
            }
            lex.classes
                .entry(canonical.clone())
                .or_default()
                .extend(classes.into_iter().map(Into::into));
            lex.entries.insert(surface, canonical);
        }
        lex.scan_order = lex.entries.keys().cloned().collect();
        lex.scan_order
            .sort_by(|a, b| b.len().cmp(&a.len()).then_with(|| a.cmp(b)));
        Ok(lex)
    }

    /// JSON object: `{"surface": {"canonical": id, "classes": [..]}}`.
    pub fn load(path: &Path) -> Result<Self, GenerationError> {
        let text = std::fs::read_to_string(path).map_err(|source| GenerationError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self, GenerationError> {
        let raw: BTreeMap<String, RawEntry> =
            serde_json::from_str(text).map_err(|e| GenerationError::Lexicon(e.to_string()))?;
        Self::from_entries(raw.into_iter().map(|(s, e)| (s, e.canonical, e.classes)))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn canonical(&self, surface: &str) -> Option<&str> {
        self.entries.get(&surface.to_lowercase()).map(String::as_str)
    }

    pub fn contains_id(&self, canonical: &str) -> bool {
        self.classes.contains_key(canonical)
    }

    pub fn classes_of(&self, canonical: &str) -> impl Iterator<Item = &str> {
        self.classes
            .get(canonical)
            .into_iter()
            .flat_map(|c| c.iter().map(String::as_str))
    }

    pub fn has_class(&self, canonical: &str, class: &str) -> bool {
        self.classes.get(canonical).is_some_and(|c| c.contains(class))
    }

    pub fn canonical_ids(&self) -> impl Iterator<Item = &str> {
        self.classes.keys().map(String::as_str)
    }

    /// Surface form used when writing a drug into text: the id itself (hyphens
    /// as spaces) if that is a surface form, else the shortest surface form.
    pub fn display_name(&self, canonical: &str) -> Option<String> {
        let spaced = canonical.replace('-', " ");
        for cand in [&spaced, &canonical.to_string()] {
            if self.entries.get(cand).is_some_and(|c| c == canonical) {
                return Some(cand.clone());
            }
        }
        self.entries
            .iter()
            .filter(|(_, c)| *c == canonical)
            .map(|(s, _)| s)
            .min_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)))
            .cloned()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DrugMention {
    pub canonical: String,
    /// Byte range into the plan text.
    pub start: usize,
    pub end: usize,
}

impl DrugMention {
    pub fn surface<'a>(&self, text: &'a str) -> &'a str {
        &text[self.start..self.end]
    }
}

fn is_word_byte(b: u8) -> bool {
    b.is_ascii_alphanumeric()
}

/// Prefixes of the safety annotations written into plan text. Their bodies
/// hold rule ids, which may contain drug names, and are never scanned.
pub const ANNOTATION_PREFIXES: [&str; 2] = ["[REMOVED: ", "[SUBSTITUTED: "];

fn annotation_end(text: &str, i: usize) -> Option<usize> {
    let rest = &text[i..];
    ANNOTATION_PREFIXES
        .iter()
        .any(|p| rest.starts_with(p))
        .then(|| rest.find(']').map_or(text.len(), |j| i + j + 1))
}

/// Every lexicon hit in `text`, in order: case-insensitive, longest match
/// first, bounded by non-alphanumeric bytes. Safety annotations are skipped.
pub fn scan_mentions(text: &str, lexicon: &DrugLexicon) -> Vec<DrugMention> {
    let lower = text.to_ascii_lowercase();
    let bytes = lower.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'[' {
            if let Some(end) = annotation_end(text, i) {
                i = end;
                continue;
            }
        }
        let at_word_start = is_word_byte(bytes[i]) && (i == 0 || !is_word_byte(bytes[i - 1]));
        if !at_word_start {
            i += 1;
            continue;
        }
        let hit = lexicon.scan_order.iter().find(|s| {
            let end = i + s.len();
            end <= bytes.len()
                && &bytes[i..end] == s.as_bytes()
                && (end == bytes.len() || !is_word_byte(bytes[end]))
        });
        match hit {
            Some(surface) => {
                let end = i + surface.len();
                out.push(DrugMention {
                    canonical: lexicon.entries[surface].clone(),
                    start: i,
                    end,
                });
                i = end;
            }
            None => i += 1,
        }
    }
    out
}

/// [`scan_mentions`] deduplicated by canonical id, keeping first spans.
pub fn extract_drug_mentions(text: &str, lexicon: &DrugLexicon) -> Vec<DrugMention> {
    let mut out: Vec<DrugMention> = Vec::new();
    for m in scan_mentions(text, lexicon) {
        if !out.iter().any(|o| o.canonical == m.canonical) {
            out.push(m);
        }
    }
    out
}
