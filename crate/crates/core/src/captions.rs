//! Vocabulary, captions, tokenization, and score-word stripping.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub type TokenId = usize;

pub const EOS: &str = "<eos>";
pub const DEFAULT_MAX_CAPTION_LEN: usize = 12;

const QUALITY_WORDS: [&str; 8] = [
    "blurry", "sharp", "focus", "composition", "noisy", "clean", "bright", "dark",
];
const SCORE_WORDS: [&str; 5] = ["good", "moderate", "average", "poor", "decent"];
const FILLER_WORDS: [&str; 50] = [
    "a", "the", "photo", "image", "with", "and", "is", "very", "slightly", "quite", "of", "in",
    "shot", "scene", "detail", "light", "color", "contrast", "exposure", "grain", "soft", "crisp",
    "balanced", "framed", "subject", "background", "edges", "texture", "overall", "looks",
    "appears", "somewhat", "visible", "strong", "weak", "fine", "low", "high", "motion", "shadow",
    "highlights", "tone", "view", "object", "center", "frame", "wide", "close", "outdoor", "indoor",
];

#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    eos: TokenId,
    score_word_ids: Vec<TokenId>,
    max_caption_len: usize,
}

impl Default for Vocabulary {
    /// 64 tokens: EOS, eight quality words, the five score words and fillers.
    fn default() -> Self {
        let tokens: Vec<String> = std::iter::once(EOS)
            .chain(QUALITY_WORDS)
            .chain(SCORE_WORDS)
            .chain(FILLER_WORDS)
            .map(String::from)
            .collect();
        let scores: Vec<String> = SCORE_WORDS.iter().map(|s| s.to_string()).collect();
        Vocabulary::new(tokens, &scores, DEFAULT_MAX_CAPTION_LEN).expect("default vocabulary is valid")
    }
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>, score_words: &[String], max_caption_len: usize) -> Result<Self> {
        if max_caption_len == 0 {
            return Err(Error::invalid("max caption length must be at least 1"));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::invalid(format!("token {t:?} is empty or contains whitespace")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate token {t:?}")));
            }
        }
        let eos = *index
            .get(EOS)
            .ok_or_else(|| Error::invalid(format!("vocabulary lacks {EOS}")))?;
        let mut score_word_ids = Vec::with_capacity(score_words.len());
        for w in score_words {
            let id = *index.get(w).ok_or_else(|| Error::UnknownWord(w.clone()))?;
            if id == eos {
                return Err(Error::invalid("EOS cannot be a score word"));
            }
            if !score_word_ids.contains(&id) {
                score_word_ids.push(id);
            }
        }
        Ok(Vocabulary {
            tokens,
            index,
            eos,
            score_word_ids,
            max_caption_len,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn eos(&self) -> TokenId {
        self.eos
    }

    pub fn max_caption_len(&self) -> usize {
        self.max_caption_len
    }

    pub fn score_word_ids(&self) -> &[TokenId] {
        &self.score_word_ids
    }

    pub fn is_score_word(&self, id: TokenId) -> bool {
        self.score_word_ids.contains(&id)
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn id(&self, word: &str) -> Option<TokenId> {
        self.index.get(word).copied()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Vocabulary file text: one token per line, score words tagged with a tab and `SCORE`.
    pub fn to_file_string(&self) -> String {
        let mut out = String::from("# qflow vocabulary\n");
        for (i, t) in self.tokens.iter().enumerate() {
            if self.is_score_word(i) {
                let _ = writeln!(out, "{t}\tSCORE");
            } else {
                let _ = writeln!(out, "{t}");
            }
        }
        out
    }

    pub fn parse(text: &str, max_caption_len: usize) -> Result<Self> {
        let mut tokens = Vec::new();
        let mut scores = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let (word, tag) = match line.split_once('\t') {
                Some((w, t)) => (w.trim(), Some(t.trim())),
                None => (line.trim(), None),
            };
            match tag {
                None => {}
                Some("SCORE") => scores.push(word.to_string()),
                Some(other) => return Err(Error::parse(i + 1, format!("unknown tag {other:?}"))),
            }
            if word.is_empty() || word.chars().any(char::is_whitespace) {
                return Err(Error::parse(i + 1, format!("invalid token {word:?}")));
            }
            tokens.push(word.to_string());
        }
        Vocabulary::new(tokens, &scores, max_caption_len)
    }

    pub fn load(path: impl AsRef<Path>, max_caption_len: usize) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Vocabulary::parse(&text, max_caption_len)
    }
}

/// A token sequence. Complete captions end with the single EOS token;
/// captions that hit the length cap without EOS are truncated.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Caption {
    pub tokens: Vec<TokenId>,
    /// Per-token log-probabilities recorded at sampling time.
    pub logprobs: Option<Vec<f64>>,
}

impl Caption {
    pub fn new(tokens: Vec<TokenId>) -> Self {
        Caption { tokens, logprobs: None }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn is_complete(&self, vocab: &Vocabulary) -> bool {
        self.tokens.last() == Some(&vocab.eos())
    }

    pub fn total_logprob(&self) -> Option<f64> {
        self.logprobs.as_ref().map(|lp| lp.iter().sum())
    }

    pub fn validate(&self, vocab: &Vocabulary) -> Result<()> {
        if self.tokens.len() > vocab.max_caption_len() {
            return Err(Error::invalid(format!(
                "caption length {} exceeds {}",
                self.tokens.len(),
                vocab.max_caption_len()
            )));
        }
        if let Some(&bad) = self.tokens.iter().find(|&&t| t >= vocab.len()) {
            return Err(Error::invalid(format!("token id {bad} out of range")));
        }
        if let Some(pos) = self.tokens.iter().position(|&t| t == vocab.eos()) {
            if pos + 1 != self.tokens.len() {
                return Err(Error::invalid("EOS must be the final token"));
            }
        }
        if let Some(lp) = &self.logprobs {
            if lp.len() != self.tokens.len() {
                return Err(Error::invalid("logprobs length differs from token count"));
            }
            if lp.iter().any(|v| !v.is_finite() || *v > 0.0) {
                return Err(Error::invalid("logprobs must be finite and non-positive"));
            }
        }
        Ok(())
    }
}

/// Deletes every score word, keeping order and EOS. Recorded log-probabilities
/// are dropped since they no longer describe the sequence.
pub fn strip_score_words(caption: &Caption, vocab: &Vocabulary) -> Caption {
    Caption::new(
        caption
            .tokens
            .iter()
            .copied()
            .filter(|&t| !vocab.is_score_word(t))
            .collect(),
    )
}

/// Space-joined words; EOS is implicit and never printed.
pub fn detokenize(caption: &Caption, vocab: &Vocabulary) -> String {
    caption
        .tokens
        .iter()
        .filter(|&&t| t != vocab.eos())
        .map(|&t| vocab.token(t).unwrap_or("<?>"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Inverse of [`detokenize`]. A caption with fewer than the maximum number of
/// words gets a trailing EOS; exactly the maximum means it was truncated.
pub fn tokenize(text: &str, vocab: &Vocabulary) -> Result<Caption> {
    let mut tokens = text
        .split_whitespace()
        .map(|w| match vocab.id(w) {
            Some(id) if id != vocab.eos() => Ok(id),
            _ => Err(Error::UnknownWord(w.to_string())),
        })
        .collect::<Result<Vec<_>>>()?;
    match tokens.len().cmp(&vocab.max_caption_len()) {
        std::cmp::Ordering::Less => tokens.push(vocab.eos()),
        std::cmp::Ordering::Equal => {}
        std::cmp::Ordering::Greater => {
            return Err(Error::invalid(format!(
                "{} words exceed the caption limit {}",
                tokens.len(),
                vocab.max_caption_len()
            )))
        }
    }
    Ok(Caption::new(tokens))
}
