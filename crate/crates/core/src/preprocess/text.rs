//! Tokenization, light suffix-stripping lemmatization, negation scope marking and
//! synonym canonicalization.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::PreprocessError;

pub const NEGATION_CUES: [&str; 5] = ["no", "not", "without", "denies", "never"];
pub const SCOPE_TERMINATORS: [&str; 3] = ["but", "and", "however"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub tokens: Vec<String>,
    pub negated_mask: Vec<bool>,
    /// `true` at `i` when sentence punctuation (. ! ? ;) follows token `i`.
    pub boundary_after: Vec<bool>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Tokens with negated entries prefixed `NEG_`.
    pub fn marked_tokens(&self) -> impl Iterator<Item = std::borrow::Cow<'_, str>> {
        self.tokens.iter().zip(&self.negated_mask).map(|(t, &neg)| {
            if neg {
                std::borrow::Cow::Owned(format!("NEG_{t}"))
            } else {
                std::borrow::Cow::Borrowed(t.as_str())
            }
        })
    }
}

fn is_protected(token: &str) -> bool {
    NEGATION_CUES.contains(&token) || SCOPE_TERMINATORS.contains(&token)
}

/// Strips one inflectional suffix, keeping a stem of at least three characters.
pub fn lemmatize(token: &str) -> String {
    if is_protected(token) || !token.is_ascii() {
        return token.to_string();
    }
    let n = token.len();
    let stem_ok = |suffix_len: usize| n >= suffix_len + 3;
    if token.ends_with("ing") && stem_ok(3) {
        return token[..n - 3].to_string();
    }
    if token.ends_with("ed") && stem_ok(2) {
        return token[..n - 2].to_string();
    }
    if token.ends_with("es") && stem_ok(2) {
        let stem = &token[..n - 2];
        if ["s", "x", "z", "ch", "sh"].iter().any(|s| stem.ends_with(s)) {
            return stem.to_string();
        }
    }
    if token.ends_with('s')
        && !["ss", "us", "is"].iter().any(|s| token.ends_with(s))
        && stem_ok(1)
    {
        return token[..n - 1].to_string();
    }
    token.to_string()
}

/// Lowercases, splits on non-alphanumerics and lemmatizes. Apostrophes are
/// dropped inside words and a `.` between digits stays part of the number.
pub fn tokenize_and_lemmatize(text: &str) -> TokenSequence {
    let mut tokens = Vec::new();
    let mut boundary_after = Vec::new();
    let mut current = String::new();
    let chars: Vec<char> = text.chars().collect();

    let flush = |current: &mut String, tokens: &mut Vec<String>, boundary: &mut Vec<bool>| {
        if !current.is_empty() {
            tokens.push(lemmatize(current));
            boundary.push(false);
            current.clear();
        }
    };

    for (i, &c) in chars.iter().enumerate() {
        if c.is_alphanumeric() {
            current.extend(c.to_lowercase());
            continue;
        }
        let prev = i.checked_sub(1).map(|j| chars[j]);
        let next = chars.get(i + 1).copied();
        match c {
            '\'' | '\u{2019}' if prev.is_some_and(char::is_alphanumeric) => {}
            '.' if prev.is_some_and(|p| p.is_ascii_digit())
                && next.is_some_and(|n| n.is_ascii_digit()) =>
            {
                current.push('.')
            }
            '.' | '!' | '?' | ';' => {
                flush(&mut current, &mut tokens, &mut boundary_after);
                if let Some(last) = boundary_after.last_mut() {
                    *last = true;
                }
            }
            _ => flush(&mut current, &mut tokens, &mut boundary_after),
        }
    }
    flush(&mut current, &mut tokens, &mut boundary_after);
    let negated_mask = vec![false; tokens.len()];
    TokenSequence {
        tokens,
        negated_mask,
        boundary_after,
    }
}

/// Marks up to `window` tokens after each negation cue. Scope stops before a
/// conjunction terminator and after a token followed by sentence punctuation.
pub fn detect_negations(seq: &TokenSequence, window: usize) -> TokenSequence {
    let mut out = seq.clone();
    for (i, tok) in seq.tokens.iter().enumerate() {
        if !NEGATION_CUES.contains(&tok.as_str()) || seq.boundary_after[i] {
            continue;
        }
        for j in (i + 1)..seq.len().min(i + 1 + window) {
            let t = seq.tokens[j].as_str();
            if SCOPE_TERMINATORS.contains(&t) {
                break;
            }
            if !NEGATION_CUES.contains(&t) {
                out.negated_mask[j] = true;
            }
            if seq.boundary_after[j] {
                break;
            }
        }
    }
    out
}

/// Maps surface phrases onto canonical forms before hashing. Stands in for a
/// concept-normalization service.
#[derive(Debug, Clone, Default)]
pub struct SynonymDictionary {
    // surface tokens -> canonical tokens, longest surface first
    entries: Vec<(Vec<String>, Vec<String>)>,
}

impl SynonymDictionary {
    pub fn from_pairs<I, A, B>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (A, B)>,
        A: AsRef<str>,
        B: AsRef<str>,
    {
        let mut map: HashMap<Vec<String>, Vec<String>> = HashMap::new();
        for (surface, canonical) in pairs {
            let s = tokenize_and_lemmatize(surface.as_ref()).tokens;
            let c = tokenize_and_lemmatize(canonical.as_ref()).tokens;
            if !s.is_empty() && !c.is_empty() {
                map.insert(s, c);
            }
        }
        let mut entries: Vec<_> = map.into_iter().collect();
        entries.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then_with(|| a.0.cmp(&b.0)));
        Self { entries }
    }

    /// Reads `surface<TAB>canonical` lines; blank lines and `#` comments are skipped.
    pub fn load(path: &Path) -> Result<Self, PreprocessError> {
        let text = std::fs::read_to_string(path).map_err(|e| PreprocessError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let mut pairs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (surface, canonical) = line.split_once('\t').ok_or_else(|| {
                PreprocessError::Synonyms(format!("line {}: expected surface<TAB>canonical", i + 1))
            })?;
            pairs.push((surface.to_string(), canonical.to_string()));
        }
        Ok(Self::from_pairs(pairs))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Replaces matched phrases; the replacement inherits the negation flag of
    /// the phrase's first token and the boundary flag of its last.
    pub fn apply(&self, seq: &TokenSequence) -> TokenSequence {
        if self.entries.is_empty() {
            return seq.clone();
        }
        let mut out = TokenSequence {
            tokens: Vec::with_capacity(seq.len()),
            negated_mask: Vec::with_capacity(seq.len()),
            boundary_after: Vec::with_capacity(seq.len()),
        };
        let mut i = 0;
        'outer: while i < seq.len() {
            for (surface, canonical) in &self.entries {
                let end = i + surface.len();
                if end <= seq.len() && seq.tokens[i..end] == surface[..] {
                    let neg = seq.negated_mask[i];
                    for (k, tok) in canonical.iter().enumerate() {
                        out.tokens.push(tok.clone());
                        out.negated_mask.push(neg);
                        out.boundary_after
                            .push(k + 1 == canonical.len() && seq.boundary_after[end - 1]);
                    }
                    i = end;
                    continue 'outer;
                }
            }
            out.tokens.push(seq.tokens[i].clone());
            out.negated_mask.push(seq.negated_mask[i]);
            out.boundary_after.push(seq.boundary_after[i]);
            i += 1;
        }
        out
    }
}
