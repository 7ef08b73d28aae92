//! Synthetic downstream tasks over the cipher languages.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{BilingualExample, CipherLanguage, LabeledPairExample, NUM_TOPICS};
use crate::tokenizer::{TokenSequence, Vocab};

pub const CLASSIFICATION_CLASSES: usize = NUM_TOPICS;

/// One classification item in both languages.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskText {
    pub a_src: String,
    pub b_src: String,
    pub a_tgt: String,
    pub b_tgt: String,
    pub label: usize,
}

/// Three-way topic task: both texts draw their nouns from one topic, which is
/// the label. Target-language versions come from the cipher translation of
/// the same word sequences.
pub fn generate_classification_task(lang: &CipherLanguage, n: usize, seed: u64) -> Vec<TaskText> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let label = rng.gen_range(0..NUM_TOPICS);
            let a = lang.sentence(rng.gen_range(6..=12), Some(label), &mut rng);
            let b = lang.sentence(rng.gen_range(6..=12), Some(label), &mut rng);
            TaskText {
                a_src: lang.render_a(&a),
                b_src: lang.render_a(&b),
                a_tgt: lang.translate(&a, &mut rng),
                b_tgt: lang.translate(&b, &mut rng),
                label,
            }
        })
        .collect()
}

/// Tokenized source examples with their translations attached.
pub fn encode_task(texts: &[TaskText], vocab: &Vocab, src_lang: &str, tgt_lang: &str) -> Vec<BilingualExample> {
    texts
        .iter()
        .enumerate()
        .map(|(id, t)| BilingualExample {
            id,
            source: LabeledPairExample {
                text_a: vocab.encode(&t.a_src),
                text_b: vocab.encode(&t.b_src),
                label: t.label,
                language: src_lang.to_string(),
                cobatch: None,
            },
            translation: Some(LabeledPairExample {
                text_a: vocab.encode(&t.a_tgt),
                text_b: vocab.encode(&t.b_tgt),
                label: t.label,
                language: tgt_lang.to_string(),
                cobatch: None,
            }),
        })
        .collect()
}

/// Extractive QA item. `start..=end` index context tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QaExample {
    pub id: usize,
    pub question: TokenSequence,
    pub context: TokenSequence,
    pub start: usize,
    pub end: usize,
}

/// Copy task: the question is one context word that occurs exactly once,
/// and the answer is that word's token span in the context. With `target`
/// set, everything is rendered in the cipher language.
pub fn generate_span_task(lang: &CipherLanguage, vocab: &Vocab, n: usize, target: bool, seed: u64) -> Vec<QaExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let words = lang.sentence(rng.gen_range(10..=20), None, &mut rng);
        let rendered: Vec<String> = if target {
            lang.translate(&words, &mut rng)
                .split(' ')
                .map(str::to_string)
                .collect()
        } else {
            words.iter().map(|&w| lang.word_a(w).to_string()).collect()
        };
        let unique: Vec<usize> = (0..rendered.len())
            .filter(|&i| rendered.iter().filter(|w| **w == rendered[i]).count() == 1)
            .collect();
        if unique.is_empty() {
            continue;
        }
        let pick = unique[rng.gen_range(0..unique.len())];
        let mut context = Vec::new();
        let (mut start, mut end) = (0, 0);
        for (i, w) in rendered.iter().enumerate() {
            if i == pick {
                start = context.len();
            }
            context.extend(vocab.encode(w).0);
            if i == pick {
                end = context.len() - 1;
            }
        }
        out.push(QaExample {
            id: out.len(),
            question: vocab.encode(&rendered[pick]),
            context: TokenSequence(context),
            start,
            end,
        });
    }
    out
}
