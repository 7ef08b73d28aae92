//! Parallel and labeled data: loading, length filtering, alignment batches
//! with random side assignment, and code-switch augmentation.

mod cipher;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use cipher::{
    generate_cipher_corpus, CipherConfig, CipherCorpus, CipherLanguage, WordClass, NUM_TOPICS,
    SWAP_PROB,
};

use crate::error::{Error, Result};
use crate::tokenizer::{TokenSequence, Vocab, CLS};

/// Pairs with a side shorter than this many tokens are dropped.
pub const MIN_SIDE_TOKENS: usize = 10;

/// `[CLS]` plus two `[SEP]` in the concatenated input.
pub const SPECIAL_TOKENS: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParallelPair {
    pub src: TokenSequence,
    pub tgt: TokenSequence,
    pub pair_id: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FilterStats {
    pub kept: usize,
    pub dropped_short: usize,
    pub dropped_long: usize,
}

pub fn passes_length_filter(src_len: usize, tgt_len: usize, max_seq_len: usize) -> bool {
    src_len.min(tgt_len) >= MIN_SIDE_TOKENS && src_len + tgt_len + SPECIAL_TOKENS <= max_seq_len
}

/// Keeps pairs passing the length filter, in input order.
pub fn filter_pairs(pairs: Vec<ParallelPair>, max_seq_len: usize) -> (Vec<ParallelPair>, FilterStats) {
    let mut stats = FilterStats::default();
    let mut kept = Vec::with_capacity(pairs.len());
    for p in pairs {
        if p.src.len().min(p.tgt.len()) < MIN_SIDE_TOKENS {
            stats.dropped_short += 1;
        } else if !passes_length_filter(p.src.len(), p.tgt.len(), max_seq_len) {
            stats.dropped_long += 1;
        } else {
            stats.kept += 1;
            kept.push(p);
        }
    }
    (kept, stats)
}

fn split_tsv<'a>(path: &Path, line_no: usize, line: &'a str, fields: usize) -> Result<Vec<&'a str>> {
    let parts: Vec<&str> = line.split('\t').collect();
    if parts.len() != fields {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            msg: format!("expected {fields} tab-separated fields, found {}", parts.len()),
        });
    }
    Ok(parts)
}

/// Reads `src\ttgt` lines. Blank lines are skipped.
pub fn read_parallel_text(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f = split_tsv(path, i + 1, line, 2)?;
        out.push((f[0].to_string(), f[1].to_string()));
    }
    Ok(out)
}

/// Encodes text pairs and applies the length filter. `pair_id` is the
/// position in `texts`.
pub fn encode_pairs(
    texts: &[(String, String)],
    vocab: &Vocab,
    max_seq_len: usize,
) -> (Vec<ParallelPair>, FilterStats) {
    let pairs = texts
        .iter()
        .enumerate()
        .map(|(i, (s, t))| ParallelPair {
            src: vocab.encode(s),
            tgt: vocab.encode(t),
            pair_id: i,
        })
        .collect();
    filter_pairs(pairs, max_seq_len)
}

pub fn load_parallel(
    path: &Path,
    vocab: &Vocab,
    max_seq_len: usize,
) -> Result<(Vec<ParallelPair>, FilterStats)> {
    Ok(encode_pairs(&read_parallel_text(path)?, vocab, max_seq_len))
}

fn with_cls(ids: &[u32]) -> Vec<u32> {
    let mut v = Vec::with_capacity(ids.len() + 1);
    v.push(CLS);
    v.extend_from_slice(ids);
    v
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AlignmentBatch {
    /// `[CLS]` followed by the side fed to the query encoder.
    pub query_inputs: Vec<Vec<u32>>,
    pub key_inputs: Vec<Vec<u32>>,
    /// True when the translation side went to the query encoder.
    pub shuffle_flags: Vec<bool>,
    pub pair_ids: Vec<usize>,
    /// Position of each pair in the slice the batches were built from.
    pub indices: Vec<usize>,
}

impl AlignmentBatch {
    pub fn len(&self) -> usize {
        self.pair_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pair_ids.is_empty()
    }
}

/// One epoch of alignment batches. The final batch may be partial.
pub struct AlignmentBatches<'a> {
    pairs: &'a [ParallelPair],
    order: Vec<usize>,
    flags: Vec<bool>,
    batch_size: usize,
    next: usize,
}

pub fn make_alignment_batches(
    pairs: &[ParallelPair],
    batch_size: usize,
    seed: u64,
) -> Result<AlignmentBatches<'_>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut rng);
    let flags = (0..pairs.len()).map(|_| rng.gen_bool(0.5)).collect();
    Ok(AlignmentBatches {
        pairs,
        order,
        flags,
        batch_size,
        next: 0,
    })
}

impl AlignmentBatches<'_> {
    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }
}

impl Iterator for AlignmentBatches<'_> {
    type Item = AlignmentBatch;

    fn next(&mut self) -> Option<AlignmentBatch> {
        if self.next >= self.order.len() {
            return None;
        }
        let end = (self.next + self.batch_size).min(self.order.len());
        let mut b = AlignmentBatch {
            query_inputs: Vec::with_capacity(end - self.next),
            key_inputs: Vec::with_capacity(end - self.next),
            shuffle_flags: Vec::with_capacity(end - self.next),
            pair_ids: Vec::with_capacity(end - self.next),
            indices: Vec::with_capacity(end - self.next),
        };
        for pos in self.next..end {
            let idx = self.order[pos];
            let p = &self.pairs[idx];
            let flip = self.flags[pos];
            let (q, k) = if flip { (&p.tgt, &p.src) } else { (&p.src, &p.tgt) };
            b.query_inputs.push(with_cls(q));
            b.key_inputs.push(with_cls(k));
            b.shuffle_flags.push(flip);
            b.pair_ids.push(p.pair_id);
            b.indices.push(idx);
        }
        self.next = end;
        Some(b)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledPairExample {
    pub text_a: TokenSequence,
    pub text_b: TokenSequence,
    pub label: usize,
    pub language: String,
    /// Examples sharing a tag are always placed in the same batch.
    pub cobatch: Option<usize>,
}

/// Reads `text_a\ttext_b\tlabel\tlanguage` lines.
pub fn load_labeled(path: &Path, vocab: &Vocab, num_classes: usize) -> Result<Vec<LabeledPairExample>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f = split_tsv(path, i + 1, line, 4)?;
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let label: usize = f[2]
            .trim()
            .parse()
            .map_err(|_| parse_err(format!("label {:?} is not a class id", f[2])))?;
        if label >= num_classes {
            return Err(parse_err(format!("label {label} >= {num_classes} classes")));
        }
        out.push(LabeledPairExample {
            text_a: vocab.encode(f[0]),
            text_b: vocab.encode(f[1]),
            label,
            language: f[3].trim().to_string(),
            cobatch: None,
        });
    }
    Ok(out)
}

/// A source-language example and, when available, its translation.
#[derive(Clone, Debug)]
pub struct BilingualExample {
    pub id: usize,
    pub source: LabeledPairExample,
    pub translation: Option<LabeledPairExample>,
}

/// Emits `(a_tgt, b_src)` and `(a_src, b_tgt)` for every example, tagged
/// for co-batching with the example id. The all-target pair is not used.
pub fn code_switch_augment(examples: &[BilingualExample]) -> Result<Vec<LabeledPairExample>> {
    let mut out = Vec::with_capacity(2 * examples.len());
    for ex in examples {
        let tr = ex.translation.as_ref().ok_or_else(|| {
            Error::Data(format!("example {} has no translation to code-switch with", ex.id))
        })?;
        if tr.label != ex.source.label {
            return Err(Error::Data(format!(
                "example {}: translation label {} differs from source label {}",
                ex.id, tr.label, ex.source.label
            )));
        }
        let src = &ex.source;
        out.push(LabeledPairExample {
            text_a: tr.text_a.clone(),
            text_b: src.text_b.clone(),
            label: src.label,
            language: format!("{}+{}", tr.language, src.language),
            cobatch: Some(ex.id),
        });
        out.push(LabeledPairExample {
            text_a: src.text_a.clone(),
            text_b: tr.text_b.clone(),
            label: src.label,
            language: format!("{}+{}", src.language, tr.language),
            cobatch: Some(ex.id),
        });
    }
    Ok(out)
}

/// Shuffled batches of example indices. Examples with the same co-batch tag
/// form one unit that is never split; a batch is closed before a unit that
/// would overflow it, so a unit larger than `batch_size` gets its own batch.
pub fn make_labeled_batches(
    examples: &[LabeledPairExample],
    batch_size: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let mut tagged: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let mut units: Vec<Vec<usize>> = Vec::new();
    for (i, ex) in examples.iter().enumerate() {
        match ex.cobatch {
            Some(t) => tagged.entry(t).or_default().push(i),
            None => units.push(vec![i]),
        }
    }
    units.extend(tagged.into_values());
    units.sort_by_key(|u| u[0]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    units.shuffle(&mut rng);

    let mut batches = Vec::new();
    let mut cur: Vec<usize> = Vec::new();
    for u in units {
        if !cur.is_empty() && cur.len() + u.len() > batch_size {
            batches.push(std::mem::take(&mut cur));
        }
        cur.extend(u);
    }
    if !cur.is_empty() {
        batches.push(cur);
    }
    Ok(batches)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(id: usize, ls: usize, lt: usize) -> ParallelPair {
        ParallelPair {
            src: TokenSequence((0..ls as u32).map(|i| 5 + i).collect()),
            tgt: TokenSequence((0..lt as u32).map(|i| 100 + i).collect()),
            pair_id: id,
        }
    }

    #[test]
    fn length_filter_boundaries() {
        let (kept, stats) = filter_pairs(
            vec![pair(0, 9, 20), pair(1, 10, 10), pair(2, 60, 66), pair(3, 60, 65)],
            128,
        );
        assert_eq!(
            stats,
            FilterStats {
                kept: 2,
                dropped_short: 1,
                dropped_long: 1
            }
        );
        assert_eq!(kept.iter().map(|p| p.pair_id).collect::<Vec<_>>(), vec![1, 3]);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.tsv");
        fs::write(&p, "a b\tc d\nonly one field\n").unwrap();
        match read_parallel_text(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn batch_sizes_keep_partial_tail() {
        let pairs: Vec<_> = (0..300).map(|i| pair(i, 10, 10)).collect();
        let sizes: Vec<usize> = make_alignment_batches(&pairs, 128, 1)
            .unwrap()
            .map(|b| b.len())
            .collect();
        assert_eq!(sizes, vec![128, 128, 44]);
        assert!(make_alignment_batches(&pairs, 0, 1).is_err());
    }

    #[test]
    fn batches_reunite_to_original_pairs() {
        let pairs: Vec<_> = (0..50).map(|i| pair(i, 10 + i % 3, 12)).collect();
        for b in make_alignment_batches(&pairs, 7, 3).unwrap() {
            for i in 0..b.len() {
                let p = &pairs[b.indices[i]];
                assert_eq!(p.pair_id, b.pair_ids[i]);
                let (q, k) = (&b.query_inputs[i][1..], &b.key_inputs[i][1..]);
                assert_eq!(b.query_inputs[i][0], CLS);
                if b.shuffle_flags[i] {
                    assert_eq!((q, k), (&p.tgt[..], &p.src[..]));
                } else {
                    assert_eq!((q, k), (&p.src[..], &p.tgt[..]));
                }
            }
        }
    }

    fn labeled(lang: &str, a: u32, label: usize) -> LabeledPairExample {
        LabeledPairExample {
            text_a: TokenSequence(vec![a]),
            text_b: TokenSequence(vec![a + 1]),
            label,
            language: lang.into(),
            cobatch: None,
        }
    }

    #[test]
    fn code_switch_emits_two_mixed_examples() {
        let ex = BilingualExample {
            id: 0,
            source: labeled("en", 10, 2),
            translation: Some(labeled("xx", 20, 2)),
        };
        let out = code_switch_augment(&[ex]).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].text_a.0, vec![20]);
        assert_eq!(out[0].text_b.0, vec![11]);
        assert_eq!(out[1].text_a.0, vec![10]);
        assert_eq!(out[1].text_b.0, vec![21]);
        assert!(out.iter().all(|e| e.label == 2 && e.cobatch == Some(0)));
        assert!(!out.iter().any(|e| e.text_a.0 == vec![20] && e.text_b.0 == vec![21]));
        assert!(code_switch_augment(&[]).unwrap().is_empty());
    }

    #[test]
    fn missing_translation_names_example() {
        let ex = BilingualExample {
            id: 17,
            source: labeled("en", 10, 0),
            translation: None,
        };
        let err = code_switch_augment(&[ex]).unwrap_err();
        assert!(err.to_string().contains("17"));
    }
}
