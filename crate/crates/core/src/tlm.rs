//! Translation language modeling: masked-token prediction over a bilingual
//! pair concatenated into one sequence, plus the monolingual MLM variant.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::ParallelPair;
use crate::encoder::{EncoderParams, PackedBatch};
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamGrads, Var};
use crate::tokenizer::{CLS, MASK, NUM_RESERVED, PAD, SEP};

pub const SELECT_PROB: f64 = 0.15;
pub const MASK_TOKEN_PROB: f64 = 0.8;
pub const RANDOM_TOKEN_PROB: f64 = 0.1;

/// Token ids with segment ids, before masking.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TlmInput {
    pub ids: Vec<u32>,
    pub segments: Vec<u8>,
}

/// `[CLS] first [SEP] second [SEP]`; the translation comes first when
/// `shuffle_flag` is set. The first segment (with [CLS] and the middle
/// [SEP]) has segment id 0, the rest 1. Positions are not reset.
pub fn build_tlm_input(pair: &ParallelPair, shuffle_flag: bool, max_seq_len: usize) -> Result<TlmInput> {
    let (a, b) = if shuffle_flag {
        (&pair.tgt, &pair.src)
    } else {
        (&pair.src, &pair.tgt)
    };
    let len = a.len() + b.len() + 3;
    if len > max_seq_len {
        return Err(Error::Data(format!(
            "pair {} needs {len} positions, limit is {max_seq_len}",
            pair.pair_id
        )));
    }
    let mut ids = Vec::with_capacity(len);
    ids.push(CLS);
    ids.extend_from_slice(a);
    ids.push(SEP);
    ids.extend_from_slice(b);
    ids.push(SEP);
    let mut segments = vec![0u8; a.len() + 2];
    segments.resize(len, 1);
    Ok(TlmInput { ids, segments })
}

/// `[CLS] text [SEP]`, all in segment 0.
pub fn build_mlm_input(text: &[u32], max_seq_len: usize) -> Result<TlmInput> {
    let len = text.len() + 2;
    if len > max_seq_len {
        return Err(Error::Data(format!(
            "sequence needs {len} positions, limit is {max_seq_len}"
        )));
    }
    let mut ids = Vec::with_capacity(len);
    ids.push(CLS);
    ids.extend_from_slice(text);
    ids.push(SEP);
    Ok(TlmInput {
        ids,
        segments: vec![0; len],
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedSequence {
    pub input_ids: Vec<u32>,
    /// Original token at each masked position, `None` elsewhere.
    pub label_ids: Vec<Option<u32>>,
    pub mask_positions: Vec<usize>,
    pub segment_ids: Vec<u8>,
}

/// What happened to a selected position.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Corruption {
    Mask,
    Random,
    Keep,
}

pub fn is_maskable(id: u32) -> bool {
    !matches!(id, PAD | CLS | SEP | MASK)
}

/// Per-position Bernoulli selection followed by the 80/10/10 corruption.
pub fn apply_masking_with<R: Rng>(input: &TlmInput, vocab_size: usize, rng: &mut R) -> MaskedSequence {
    let mut out = MaskedSequence {
        input_ids: input.ids.clone(),
        label_ids: vec![None; input.ids.len()],
        mask_positions: Vec::new(),
        segment_ids: input.segments.clone(),
    };
    for (i, &id) in input.ids.iter().enumerate() {
        if !is_maskable(id) || !rng.gen_bool(SELECT_PROB) {
            continue;
        }
        out.mask_positions.push(i);
        out.label_ids[i] = Some(id);
        let u: f64 = rng.gen();
        if u < MASK_TOKEN_PROB {
            out.input_ids[i] = MASK;
        } else if u < MASK_TOKEN_PROB + RANDOM_TOKEN_PROB {
            out.input_ids[i] = rng.gen_range(NUM_RESERVED..vocab_size as u32);
        }
    }
    out
}

pub fn apply_masking(input: &TlmInput, vocab_size: usize, seed: u64) -> MaskedSequence {
    apply_masking_with(input, vocab_size, &mut ChaCha8Rng::seed_from_u64(seed))
}

impl MaskedSequence {
    /// Sequence with every masked position restored to its label.
    pub fn reconstruct(&self) -> Vec<u32> {
        self.input_ids
            .iter()
            .zip(&self.label_ids)
            .map(|(&i, l)| l.unwrap_or(i))
            .collect()
    }
}

/// Each side as its own `[CLS] side [SEP]` sequence, masked independently.
pub fn mlm_variant_with<R: Rng>(
    pair: &ParallelPair,
    vocab_size: usize,
    max_seq_len: usize,
    rng: &mut R,
) -> Result<[MaskedSequence; 2]> {
    let a = build_mlm_input(&pair.src, max_seq_len)?;
    let b = build_mlm_input(&pair.tgt, max_seq_len)?;
    Ok([
        apply_masking_with(&a, vocab_size, rng),
        apply_masking_with(&b, vocab_size, rng),
    ])
}

pub fn mlm_variant(pair: &ParallelPair, vocab_size: usize, max_seq_len: usize, seed: u64) -> Result<[MaskedSequence; 2]> {
    mlm_variant_with(pair, vocab_size, max_seq_len, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Mean cross-entropy over all masked positions of `seqs`, through the
/// tied output layer. `None` when nothing is masked.
pub fn tlm_loss_on_tape(
    g: &mut Graph,
    params: &EncoderParams,
    vars: &[Var],
    seqs: &[MaskedSequence],
) -> Result<Option<Var>> {
    let mut packed = PackedBatch::new();
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for s in seqs {
        let offset = packed.num_tokens();
        for &p in &s.mask_positions {
            let label = s.label_ids[p].ok_or_else(|| {
                Error::Data(format!("masked position {p} has no label"))
            })?;
            rows.push(offset + p);
            targets.push(label as usize);
        }
        packed.push(&s.input_ids, Some(&s.segment_ids), params.config.max_positions)?;
    }
    if rows.is_empty() {
        return Ok(None);
    }
    let hidden = params.forward(g, vars, &packed)?;
    let picked = g.gather_rows(hidden, &rows)?;
    let logits = params.mlm_logits(g, vars, picked)?;
    Ok(Some(g.cross_entropy(logits, &targets)?))
}

/// Loss value and gradients; zero loss with no gradients when nothing is
/// masked.
pub fn tlm_loss(params: &EncoderParams, seqs: &[MaskedSequence]) -> Result<(f64, ParamGrads)> {
    let mut g = Graph::new();
    let vars = params.bind(&mut g, true);
    match tlm_loss_on_tape(&mut g, params, &vars, seqs)? {
        None => Ok((0.0, ParamGrads::zeros_like(&params.params))),
        Some(loss) => {
            let mut grads = g.backward(loss)?;
            Ok((g.scalar_f64(loss), params.params.collect_grads(&vars, &mut grads)))
        }
    }
}
