//! Frequency-built subword vocabulary with greedy longest-match encoding.
//!
//! Continuation pieces carry a `##` prefix, WordPiece style. Ids 0..5 are
//! reserved for the special tokens and are never produced by [`Vocab::encode`].

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::ops::Deref;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;
pub const MASK: u32 = 4;
pub const NUM_RESERVED: u32 = 5;

const RESERVED: [&str; NUM_RESERVED as usize] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];
const CONT: &str = "##";

/// Encoded text without any special tokens.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct TokenSequence(pub Vec<u32>);

impl Deref for TokenSequence {
    type Target = [u32];
    fn deref(&self) -> &[u32] {
        &self.0
    }
}

impl From<Vec<u32>> for TokenSequence {
    fn from(v: Vec<u32>) -> Self {
        Self(v)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
    lowercase: bool,
}

impl Vocab {
    /// Builds a vocabulary of at most `target_size` entries.
    ///
    /// Selection order after the reserved tokens: every character in both
    /// word-initial and continuation form (most frequent first), then whole
    /// words by frequency. Ties break lexicographically.
    pub fn build<'a, I>(corpus: I, target_size: usize, lowercase: bool) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        if target_size <= NUM_RESERVED as usize {
            return Err(Error::Config(format!(
                "vocabulary size {target_size} leaves no room beyond the reserved tokens"
            )));
        }
        let mut words: HashMap<String, u64> = HashMap::new();
        for line in corpus {
            for w in line.split_whitespace() {
                let w = if lowercase {
                    w.to_lowercase()
                } else {
                    w.to_string()
                };
                *words.entry(w).or_default() += 1;
            }
        }
        if words.is_empty() {
            return Err(Error::Data("cannot build a vocabulary from an empty corpus".into()));
        }

        let mut chars: BTreeMap<String, u64> = BTreeMap::new();
        for (w, &n) in &words {
            for (i, c) in w.chars().enumerate() {
                let piece = if i == 0 {
                    c.to_string()
                } else {
                    format!("{CONT}{c}")
                };
                *chars.entry(piece).or_default() += n;
            }
        }
        let by_freq = |m: Vec<(String, u64)>| {
            let mut v = m;
            v.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
            v.into_iter().map(|(s, _)| s)
        };

        let mut vocab = Self {
            tokens: Vec::new(),
            ids: HashMap::new(),
            lowercase,
        };
        for r in RESERVED {
            vocab.insert(r.to_string());
        }
        let candidates = by_freq(chars.into_iter().collect())
            .chain(by_freq(words.into_iter().collect()));
        for piece in candidates {
            if vocab.tokens.len() >= target_size {
                break;
            }
            if !vocab.ids.contains_key(&piece) {
                vocab.insert(piece);
            }
        }
        Ok(vocab)
    }

    fn insert(&mut self, token: String) {
        let id = self.tokens.len() as u32;
        self.ids.insert(token.clone(), id);
        self.tokens.push(token);
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn lowercase(&self) -> bool {
        self.lowercase
    }

    pub fn set_lowercase(&mut self, on: bool) {
        self.lowercase = on;
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Id of a non-reserved token.
    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied().filter(|&i| i >= NUM_RESERVED)
    }

    pub fn encode(&self, text: &str) -> TokenSequence {
        let mut out = Vec::new();
        for w in text.split_whitespace() {
            if self.lowercase {
                self.encode_word(&w.to_lowercase(), &mut out);
            } else {
                self.encode_word(w, &mut out);
            }
        }
        TokenSequence(out)
    }

    fn encode_word(&self, word: &str, out: &mut Vec<u32>) {
        if let Some(id) = self.id(word) {
            out.push(id);
            return;
        }
        let bounds: Vec<usize> = word
            .char_indices()
            .map(|(i, _)| i)
            .chain(std::iter::once(word.len()))
            .collect();
        let mut pieces = Vec::new();
        let mut start = 0;
        let mut key = String::new();
        while start + 1 < bounds.len() {
            let mut found = None;
            for end in (start + 1..bounds.len()).rev() {
                key.clear();
                if start > 0 {
                    key.push_str(CONT);
                }
                key.push_str(&word[bounds[start]..bounds[end]]);
                if let Some(id) = self.id(&key) {
                    found = Some((id, end));
                    break;
                }
            }
            match found {
                Some((id, end)) => {
                    pieces.push(id);
                    start = end;
                }
                None => {
                    out.push(UNK);
                    return;
                }
            }
        }
        out.extend(pieces);
    }

    /// Inverse of [`encode`](Self::encode) for whitespace-normalized text.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut s = String::new();
        for &id in ids {
            let tok = self.token(id).unwrap_or("[UNK]");
            if let Some(rest) = tok.strip_prefix(CONT).filter(|_| id >= NUM_RESERVED) {
                s.push_str(rest);
            } else {
                if !s.is_empty() {
                    s.push(' ');
                }
                s.push_str(tok);
            }
        }
        s
    }

    /// One token per line; the line number is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut vocab = Self {
            tokens: Vec::new(),
            ids: HashMap::new(),
            lowercase: false,
        };
        for (i, line) in text.lines().enumerate() {
            if i < RESERVED.len() && line != RESERVED[i] {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: format!("expected reserved token {}", RESERVED[i]),
                });
            }
            if line.is_empty() || vocab.ids.contains_key(line) {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: format!("empty or duplicate token {line:?}"),
                });
            }
            vocab.insert(line.to_string());
        }
        if vocab.tokens.len() <= RESERVED.len() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: vocab.tokens.len(),
                msg: "vocabulary has no regular tokens".into(),
            });
        }
        Ok(vocab)
    }
}
