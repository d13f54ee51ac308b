//! Word-level tokenizer over a vocabulary built from the dataset.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const UNK: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
const SPECIALS: [&str; 3] = ["<unk>", "<bos>", "<eos>"];

/// Lowercased alphanumeric runs with their byte spans.
pub fn words(text: &str) -> impl Iterator<Item = (usize, usize, String)> + '_ {
    let mut iter = text.char_indices().peekable();
    std::iter::from_fn(move || {
        while let Some(&(_, c)) = iter.peek() {
            if c.is_alphanumeric() {
                break;
            }
            iter.next();
        }
        let (start, _) = *iter.peek()?;
        let mut end = start;
        while let Some(&(i, c)) = iter.peek() {
            if !c.is_alphanumeric() {
                break;
            }
            end = i + c.len_utf8();
            iter.next();
        }
        Some((start, end, text[start..end].to_lowercase()))
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl From<Vec<String>> for Vocab {
    fn from(words: Vec<String>) -> Self {
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        Vocab { words, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.words
    }
}

impl Vocab {
    /// Specials followed by every distinct lowercased word, sorted.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut set = BTreeSet::new();
        for t in texts {
            for (_, _, w) in words(t) {
                set.insert(w);
            }
        }
        let mut list: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        list.extend(set);
        Vocab::from(list)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }
}

/// Token ids plus the map from caption byte offsets to token positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenization {
    pub ids: Vec<u32>,
    /// For every byte of the source text, the position in `ids` of the word
    /// covering it; `None` for separators and for truncated words.
    pub char_to_token: Vec<Option<usize>>,
    pub truncated: bool,
}

impl Tokenization {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// `[<bos>, w₁, …, wₖ, <eos>]` with at most `max_len` ids in total.
pub fn tokenize(text: &str, vocab: &Vocab, max_len: usize) -> Result<Tokenization> {
    if max_len < 3 {
        return Err(Error::Config(format!("max_len {max_len} leaves no room for words")));
    }
    let all: Vec<_> = words(text).collect();
    if all.is_empty() {
        return Err(Error::InvalidInput("text has no words".into()));
    }
    let room = max_len - 2;
    let truncated = all.len() > room;
    let mut ids = Vec::with_capacity(all.len().min(room) + 2);
    let mut char_to_token = vec![None; text.len()];
    ids.push(BOS);
    for (start, end, w) in all.into_iter().take(room) {
        let pos = ids.len();
        ids.push(vocab.id(&w));
        for slot in &mut char_to_token[start..end] {
            *slot = Some(pos);
        }
    }
    ids.push(EOS);
    Ok(Tokenization {
        ids,
        char_to_token,
        truncated,
    })
}
