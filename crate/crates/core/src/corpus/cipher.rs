//! Synthetic bilingual corpus: a toy grammar for "language A" and a cipher
//! "language B" obtained by bijective word substitution plus local swaps.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum WordClass {
    Det,
    Noun,
    Verb,
    Adj,
    Adv,
    Prep,
}

const CLASSES: [WordClass; 6] = [
    WordClass::Det,
    WordClass::Noun,
    WordClass::Verb,
    WordClass::Adj,
    WordClass::Adv,
    WordClass::Prep,
];

/// Share of the word inventory given to each class, in `CLASSES` order.
const CLASS_SHARE: [f64; 6] = [0.05, 0.40, 0.25, 0.15, 0.075, 0.075];

/// Number of noun topics used by the labeled task generator.
pub const NUM_TOPICS: usize = 3;

/// Probability of swapping an adjacent word pair when translating.
pub const SWAP_PROB: f64 = 0.3;

impl WordClass {
    fn index(self) -> usize {
        CLASSES.iter().position(|&c| c == self).unwrap()
    }

    /// Successor distribution of the sentence random walk.
    fn next(self) -> &'static [(WordClass, f64)] {
        use WordClass::*;
        match self {
            Det => &[(Adj, 0.35), (Noun, 0.65)],
            Adj => &[(Adj, 0.15), (Noun, 0.85)],
            Noun => &[(Verb, 0.45), (Prep, 0.25), (Det, 0.15), (Adv, 0.15)],
            Verb => &[(Det, 0.5), (Adv, 0.2), (Prep, 0.3)],
            Adv => &[(Verb, 0.4), (Det, 0.6)],
            Prep => &[(Det, 0.8), (Noun, 0.2)],
        }
    }
}

/// Word inventory of both languages. `words_b[i]` translates `words_a[i]`.
#[derive(Clone, Debug)]
pub struct CipherLanguage {
    words_a: Vec<String>,
    words_b: Vec<String>,
    class_of: Vec<WordClass>,
    by_class: Vec<Vec<usize>>,
    weights: Vec<WeightedIndex<f64>>,
}

fn make_words<R: Rng>(
    n: usize,
    consonants: &[u8],
    vowels: &[u8],
    taken: &mut HashSet<String>,
    rng: &mut R,
) -> Vec<String> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let syllables = rng.gen_range(2..=3);
        let mut w = String::new();
        for _ in 0..syllables {
            w.push(*consonants.choose(rng).unwrap() as char);
            w.push(*vowels.choose(rng).unwrap() as char);
        }
        if taken.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

impl CipherLanguage {
    /// `vocab_words` words per language, split across word classes.
    pub fn new(vocab_words: usize, seed: u64) -> Result<Self> {
        if vocab_words < 4 * CLASSES.len() {
            return Err(Error::Config(format!(
                "cipher language needs at least {} words, got {vocab_words}",
                4 * CLASSES.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut counts: Vec<usize> = CLASS_SHARE
            .iter()
            .map(|s| ((s * vocab_words as f64).floor() as usize).max(2))
            .collect();
        let assigned: usize = counts.iter().sum();
        counts[WordClass::Noun.index()] += vocab_words.saturating_sub(assigned);
        let total: usize = counts.iter().sum();

        let mut taken = HashSet::new();
        let words_a = make_words(total, b"bdfgklmnprstvz", b"aeiou", &mut taken, &mut rng);
        let mut words_b = make_words(total, b"BDFGHJKLMNPRSTVWXZ", b"AEIOUY", &mut taken, &mut rng);
        words_b.shuffle(&mut rng);

        let mut class_of = Vec::with_capacity(total);
        let mut by_class = vec![Vec::new(); CLASSES.len()];
        for (c, &n) in counts.iter().enumerate() {
            for _ in 0..n {
                by_class[c].push(class_of.len());
                class_of.push(CLASSES[c]);
            }
        }
        let weights = by_class
            .iter()
            .map(|ws| {
                WeightedIndex::new((0..ws.len()).map(|r| 1.0 / ((r + 1) as f64).powf(0.5)))
                    .expect("non-empty class")
            })
            .collect();
        Ok(Self {
            words_a,
            words_b,
            class_of,
            by_class,
            weights,
        })
    }

    pub fn num_words(&self) -> usize {
        self.words_a.len()
    }

    pub fn word_a(&self, i: usize) -> &str {
        &self.words_a[i]
    }

    pub fn word_b(&self, i: usize) -> &str {
        &self.words_b[i]
    }

    pub fn class_of(&self, i: usize) -> WordClass {
        self.class_of[i]
    }

    /// Topic of a noun, `None` for other classes.
    pub fn topic_of(&self, i: usize) -> Option<usize> {
        let nouns = &self.by_class[WordClass::Noun.index()];
        nouns.iter().position(|&n| n == i).map(|r| r % NUM_TOPICS)
    }

    pub fn word_map(&self) -> impl Iterator<Item = (&str, &str)> {
        self.words_a
            .iter()
            .map(String::as_str)
            .zip(self.words_b.iter().map(String::as_str))
    }

    fn pick<R: Rng>(&self, class: WordClass, topic: Option<usize>, rng: &mut R) -> usize {
        let c = class.index();
        loop {
            let r = self.weights[c].sample(rng);
            if class != WordClass::Noun || topic.map_or(true, |t| r % NUM_TOPICS == t) {
                return self.by_class[c][r];
            }
        }
    }

    /// Random walk of exactly `len` words over the class grammar. With a
    /// topic, every noun is drawn from that topic.
    pub fn sentence<R: Rng>(&self, len: usize, topic: Option<usize>, rng: &mut R) -> Vec<usize> {
        let mut class = WordClass::Det;
        let mut out = Vec::with_capacity(len);
        for _ in 0..len {
            out.push(self.pick(class, topic, rng));
            let next = class.next();
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            class = next[next.len() - 1].0;
            for &(c, p) in next {
                acc += p;
                if u < acc {
                    class = c;
                    break;
                }
            }
        }
        out
    }

    pub fn render_a(&self, words: &[usize]) -> String {
        words
            .iter()
            .map(|&w| self.words_a[w].as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Word-for-word substitution followed by swapping adjacent pairs, left
    /// to right, each with probability [`SWAP_PROB`].
    pub fn translate<R: Rng>(&self, words: &[usize], rng: &mut R) -> String {
        let mut order: Vec<usize> = words.to_vec();
        let mut i = 0;
        while i + 1 < order.len() {
            if rng.gen_bool(SWAP_PROB) {
                order.swap(i, i + 1);
                i += 2;
            } else {
                i += 1;
            }
        }
        order
            .iter()
            .map(|&w| self.words_b[w].as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[derive(Clone, Debug)]
pub struct CipherConfig {
    pub n_pairs: usize,
    pub vocab_words: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl CipherConfig {
    pub fn new(n_pairs: usize, vocab_words: usize, seed: u64) -> Self {
        Self {
            n_pairs,
            vocab_words,
            min_len: 10,
            max_len: 40,
            seed,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CipherCorpus {
    pub language: CipherLanguage,
    /// (language A sentence, language B translation).
    pub pairs: Vec<(String, String)>,
    /// Word indices of each A sentence.
    pub words: Vec<Vec<usize>>,
}

/// Each sentence takes its nouns from one randomly chosen topic, so words of a
/// topic co-occur as they would in running text.
pub fn generate_cipher_corpus(cfg: &CipherConfig) -> Result<CipherCorpus> {
    if cfg.n_pairs == 0 {
        return Err(Error::Config("n_pairs must be at least 1".into()));
    }
    if cfg.min_len == 0 || cfg.min_len > cfg.max_len {
        return Err(Error::Config(format!(
            "invalid sentence length range [{}, {}]",
            cfg.min_len, cfg.max_len
        )));
    }
    let language = CipherLanguage::new(cfg.vocab_words, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_c0de);
    let mut pairs = Vec::with_capacity(cfg.n_pairs);
    let mut words = Vec::with_capacity(cfg.n_pairs);
    for _ in 0..cfg.n_pairs {
        let len = rng.gen_range(cfg.min_len..=cfg.max_len);
        let topic = rng.gen_range(0..NUM_TOPICS);
        let s = language.sentence(len, Some(topic), &mut rng);
        pairs.push((language.render_a(&s), language.translate(&s, &mut rng)));
        words.push(s);
    }
    Ok(CipherCorpus {
        language,
        pairs,
        words,
    })
}

impl CipherCorpus {
    /// Writes `<stem>.parallel.tsv` and `<stem>.wordmap.tsv`.
    pub fn write(&self, stem: &Path) -> Result<(PathBuf, PathBuf)> {
        let with_suffix = |suffix: &str| {
            let mut s = stem.as_os_str().to_owned();
            s.push(suffix);
            PathBuf::from(s)
        };
        let parallel = with_suffix(".parallel.tsv");
        let wordmap = with_suffix(".wordmap.tsv");
        let mut text = String::new();
        for (a, b) in &self.pairs {
            text.push_str(a);
            text.push('\t');
            text.push_str(b);
            text.push('\n');
        }
        fs::write(&parallel, text).map_err(|e| Error::io(&parallel, e))?;
        let mut text = String::new();
        for (a, b) in self.language.word_map() {
            text.push_str(a);
            text.push('\t');
            text.push_str(b);
            text.push('\n');
        }
        fs::write(&wordmap, text).map_err(|e| Error::io(&wordmap, e))?;
        Ok((parallel, wordmap))
    }
}
