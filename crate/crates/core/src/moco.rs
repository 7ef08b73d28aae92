//! Momentum contrast: query/key encoders, the FIFO negative queue, the
//! exponential moving average of key weights, and the InfoNCE loss.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::AlignmentBatch;
use crate::encoder::{EncoderConfig, EncoderParams, PackedBatch};
use crate::error::{Error, Result};
use crate::seed::{derive_seed, Stream};
use crate::numerics::{standard_normal, Graph, ParamGrads, ParamStore, Tensor, Var};

/// Ring buffer of K unit vectors. `cursor` indexes the oldest entry, which
/// is also the next slot to be overwritten.
#[derive(Clone, Debug, PartialEq)]
pub struct NegativeQueue {
    dim: usize,
    data: Vec<f32>,
    cursor: usize,
}

impl NegativeQueue {
    /// K Gaussian directions, each normalized to unit length.
    pub fn random(k: usize, dim: usize, seed: u64) -> Result<Self> {
        if k == 0 || dim == 0 {
            return Err(Error::Config(format!("queue needs K>0 and dim>0, got {k}x{dim}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::with_capacity(k * dim);
        for _ in 0..k {
            let mut v: Vec<f32> = (0..dim).map(|_| standard_normal(&mut rng)).collect();
            let n = v.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt() as f32;
            v.iter_mut().for_each(|x| *x /= n);
            data.extend(v);
        }
        Ok(Self { dim, data, cursor: 0 })
    }

    pub fn from_parts(dim: usize, data: Vec<f32>, cursor: usize) -> Result<Self> {
        if dim == 0 || data.is_empty() || data.len() % dim != 0 {
            return Err(Error::Checkpoint(format!(
                "queue of {} floats does not split into rows of {dim}",
                data.len()
            )));
        }
        if cursor >= data.len() / dim {
            return Err(Error::Checkpoint(format!("queue cursor {cursor} out of range")));
        }
        Ok(Self { dim, data, cursor })
    }

    /// Number of stored keys, K.
    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    /// Raw storage, slot order.
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn slot(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Entries from oldest to newest.
    pub fn ordered(&self) -> impl Iterator<Item = &[f32]> {
        let k = self.len();
        (0..k).map(move |i| self.slot((self.cursor + i) % k))
    }

    /// Slot-order `[K, dim]` tensor. The loss is invariant to slot order.
    pub fn as_tensor(&self) -> Tensor {
        Tensor::new(vec![self.len(), self.dim], self.data.clone()).expect("queue shape")
    }

    /// Appends `keys` (rows of `dim`) in order, evicting the oldest entries.
    pub fn enqueue(&mut self, keys: &[f32]) -> Result<()> {
        if keys.len() % self.dim != 0 {
            return Err(Error::Shape {
                op: "enqueue",
                left: vec![keys.len()],
                right: vec![self.dim],
            });
        }
        let k = self.len();
        for row in keys.chunks(self.dim) {
            let c = self.cursor;
            self.data[c * self.dim..(c + 1) * self.dim].copy_from_slice(row);
            self.cursor = (c + 1) % k;
        }
        Ok(())
    }
}

/// `key ← m·key + (1−m)·query`, element-wise.
pub fn momentum_update(key: &mut ParamStore, query: &ParamStore, m: f32) -> Result<()> {
    key.check_same_layout(query)?;
    for (kt, (_, qt)) in key.tensors_mut().zip(query.iter()) {
        for (k, &q) in kt.data_mut().iter_mut().zip(qt.data()) {
            *k = m * *k + (1.0 - m) * q;
        }
    }
    Ok(())
}

/// InfoNCE for one query: cross-entropy over the K+1 logits
/// `[z_q·z_pos, z_q·queue_0, …] / τ` with target 0. `queue` holds K rows of
/// the same width as `z_q`. Accumulates in `f64`.
pub fn info_nce(z_q: &[f32], z_pos: &[f32], queue: &[f32], tau: f32) -> Result<f64> {
    let d = z_q.len();
    if d == 0 || z_pos.len() != d || queue.len() % d != 0 {
        return Err(Error::Shape {
            op: "info_nce",
            left: vec![z_q.len(), z_pos.len()],
            right: vec![queue.len()],
        });
    }
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    let t = f64::from(tau);
    let dot = |b: &[f32]| -> f64 {
        z_q.iter().zip(b).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum::<f64>() / t
    };
    let logits: Vec<f64> = std::iter::once(dot(z_pos))
        .chain(queue.chunks(d).map(dot))
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    Ok(lse - logits[0])
}

/// Batch-mean InfoNCE on the tape. `z_q`, `z_k` are `[B, d]`; `queue` is
/// `[K, d]`.
pub fn contrastive_loss(g: &mut Graph, z_q: Var, z_k: Var, queue: Var, tau: f32) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    let pos = g.row_dot(z_q, z_k)?;
    let neg = g.matmul_bt(z_q, queue)?;
    let logits = g.concat_cols(pos, neg)?;
    let logits = g.scale(logits, 1.0 / tau);
    let b = g.value(z_q).rows();
    g.cross_entropy(logits, &vec![0; b])
}

#[derive(Clone, Debug, PartialEq)]
pub struct MoCoState {
    pub query: EncoderParams,
    pub key: EncoderParams,
    pub queue: NegativeQueue,
    pub momentum: f32,
    pub temperature: f32,
}

/// Loss and gradients of one contrastive step, before any update.
pub struct AlignmentOutput {
    pub loss: f64,
    pub grads: ParamGrads,
    /// Key embeddings `[B, d_k]` to enqueue.
    pub keys: Tensor,
}

impl MoCoState {
    pub fn init(
        config: &EncoderConfig,
        k: usize,
        momentum: f32,
        temperature: f32,
        batch_size: usize,
        seed: u64,
    ) -> Result<Self> {
        Self::from_encoder(EncoderParams::init(config, seed)?, k, momentum, temperature, batch_size, seed)
    }

    /// Wraps an existing query encoder; the key encoder starts as its copy.
    pub fn from_encoder(
        query: EncoderParams,
        k: usize,
        momentum: f32,
        temperature: f32,
        batch_size: usize,
        seed: u64,
    ) -> Result<Self> {
        if k < batch_size {
            return Err(Error::Config(format!(
                "queue size {k} is smaller than the batch size {batch_size}"
            )));
        }
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum {momentum} outside [0, 1]")));
        }
        if !(temperature > 0.0) {
            return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
        }
        let queue = NegativeQueue::random(k, query.config.proj_dim, derive_seed(seed, Stream::Queue, 0))?;
        Ok(Self {
            key: query.clone(),
            query,
            queue,
            momentum,
            temperature,
        })
    }

    pub fn momentum_update(&mut self) -> Result<()> {
        momentum_update(&mut self.key.params, &self.query.params, self.momentum)
    }

    /// Key-side embeddings, computed off the tape.
    pub fn encode_keys(&self, batch: &AlignmentBatch) -> Result<Tensor> {
        let packed = PackedBatch::from_sequences(&batch.key_inputs, self.key.config.max_positions)?;
        let mut g = Graph::new();
        let vars = self.key.bind(&mut g, false);
        let hidden = self.key.forward(&mut g, &vars, &packed)?;
        let h = self.key.pool(&mut g, hidden, &packed)?;
        let z = self.key.project(&mut g, &vars, h)?;
        Ok(g.value(z).clone())
    }

    /// Builds the contrastive loss on `g` against the current queue, with
    /// query parameters bound as `query_vars`. Returns the loss and the keys.
    pub fn loss_on_tape(
        &self,
        g: &mut Graph,
        query_vars: &[Var],
        batch: &AlignmentBatch,
    ) -> Result<(Var, Tensor)> {
        let keys = self.encode_keys(batch)?;
        let packed = PackedBatch::from_sequences(&batch.query_inputs, self.query.config.max_positions)?;
        let hidden = self.query.forward(g, query_vars, &packed)?;
        let h = self.query.pool(g, hidden, &packed)?;
        let z_q = self.query.project(g, query_vars, h)?;
        let z_k = g.constant(keys.clone());
        let queue = g.constant(self.queue.as_tensor());
        let loss = contrastive_loss(g, z_q, z_k, queue, self.temperature)?;
        Ok((loss, keys))
    }

    /// Loss and query gradients for `batch`; no state is modified.
    pub fn alignment_loss(&self, batch: &AlignmentBatch) -> Result<AlignmentOutput> {
        let mut g = Graph::new();
        let vars = self.query.bind(&mut g, true);
        let (loss, keys) = self.loss_on_tape(&mut g, &vars, batch)?;
        let mut grads = g.backward(loss)?;
        Ok(AlignmentOutput {
            loss: g.scalar_f64(loss),
            grads: self.query.params.collect_grads(&vars, &mut grads),
            keys,
        })
    }

    /// Enqueues this step's keys, then moves the key encoder toward the
    /// query encoder.
    pub fn finish_step(&mut self, keys: &Tensor) -> Result<()> {
        self.queue.enqueue(keys.data())?;
        self.momentum_update()
    }

    /// Loss against the pre-step queue, then enqueue and momentum update.
    /// Parameter updates to the query encoder are the caller's business.
    pub fn alignment_step(&mut self, batch: &AlignmentBatch) -> Result<AlignmentOutput> {
        let out = self.alignment_loss(batch)?;
        self.finish_step(&out.keys)?;
        Ok(out)
    }
}
