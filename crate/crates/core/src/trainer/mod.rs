//! The multi-task alignment loop: contrastive loss plus (translation) masked
//! language modeling, AdamW with a linear schedule, checkpoints and a
//! metrics stream.

mod checkpoint;
mod config;
mod metrics;
mod optim;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use checkpoint::CHECKPOINT_FORMAT;
pub use config::{linear_schedule, lr_at, TrainConfig};
pub use metrics::{metrics_csv_line, read_metrics_csv, MetricsWriter, METRICS_HEADER};
pub use optim::{clip_grad_norm, AdamW, ADAM_EPS, BETA1, BETA2};

use crate::corpus::{make_alignment_batches, AlignmentBatch, ParallelPair};
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::finetune::evaluate_retrieval;
use crate::moco::MoCoState;
use crate::numerics::Graph;
use crate::seed::{derive_seed, Stream};
use crate::tlm::{apply_masking_with, build_mlm_input, build_tlm_input, mlm_variant_with, tlm_loss_on_tape};
use crate::tokenizer::TokenSequence;

#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    /// `None` when the objective is disabled.
    pub l_moco: Option<f64>,
    pub l_tlm: Option<f64>,
    pub l_total: f64,
    pub lr: f32,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainMetrics {
    pub steps: Vec<StepMetrics>,
    /// Held-out retrieval accuracy after each epoch.
    pub epoch_retrieval: Vec<f64>,
}

/// Training state that advances one optimizer step at a time.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub state: MoCoState,
    pub opt: AdamW,
    /// Optimizer steps completed.
    pub step: usize,
    pub num_pairs: usize,
    pub total_steps: usize,
    epoch_cache: Option<(usize, Vec<AlignmentBatch>)>,
}

impl Trainer {
    pub fn new(state: MoCoState, cfg: TrainConfig, num_pairs: usize) -> Result<Self> {
        cfg.validate()?;
        if num_pairs == 0 {
            return Err(Error::Data("alignment corpus is empty".into()));
        }
        if cfg.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        let opt = AdamW::new(&state.query.params);
        let total_steps = cfg.epochs * num_pairs.div_ceil(cfg.batch_size);
        Ok(Self {
            cfg,
            state,
            opt,
            step: 0,
            num_pairs,
            total_steps,
            epoch_cache: None,
        })
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.num_pairs.div_ceil(self.cfg.batch_size)
    }

    pub fn is_finished(&self) -> bool {
        self.step >= self.total_steps
    }

    fn batch_for_step(&mut self, pairs: &[ParallelPair]) -> Result<AlignmentBatch> {
        let per_epoch = self.steps_per_epoch();
        let epoch = self.step / per_epoch;
        if self.epoch_cache.as_ref().map(|c| c.0) != Some(epoch) {
            let seed = derive_seed(self.cfg.seed, Stream::EpochOrder, epoch as u64);
            let batches = make_alignment_batches(pairs, self.cfg.batch_size, seed)?.collect();
            self.epoch_cache = Some((epoch, batches));
        }
        Ok(self.epoch_cache.as_ref().unwrap().1[self.step % per_epoch].clone())
    }

    /// One optimizer step on the next batch.
    pub fn train_step(&mut self, pairs: &[ParallelPair]) -> Result<StepMetrics> {
        if pairs.len() != self.num_pairs {
            return Err(Error::Data(format!(
                "trainer was set up for {} pairs, got {}",
                self.num_pairs,
                pairs.len()
            )));
        }
        if self.is_finished() {
            return Err(Error::Config("training already finished".into()));
        }
        let batch = self.batch_for_step(pairs)?;
        let cfg = &self.cfg;
        let query = &self.state.query;

        let mut g = Graph::new();
        let vars = query.bind(&mut g, true);
        let mut terms = Vec::new();
        let mut keys = None;
        let mut l_moco = None;
        if cfg.use_moco {
            let (loss, k) = self.state.loss_on_tape(&mut g, &vars, &batch)?;
            l_moco = Some(g.scalar_f64(loss));
            terms.push(loss);
            keys = Some(k);
        }
        let mut l_tlm = None;
        if cfg.use_tlm || cfg.use_mlm {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, Stream::Masking, self.step as u64));
            let vocab = query.config.vocab_size;
            let mut seqs = Vec::with_capacity(2 * batch.len());
            for (&idx, &flag) in batch.indices.iter().zip(&batch.shuffle_flags) {
                let pair = &pairs[idx];
                if cfg.use_tlm {
                    let input = build_tlm_input(pair, flag, cfg.max_seq_len)?;
                    seqs.push(apply_masking_with(&input, vocab, &mut rng));
                } else {
                    seqs.extend(mlm_variant_with(pair, vocab, cfg.max_seq_len, &mut rng)?);
                }
            }
            l_tlm = Some(match tlm_loss_on_tape(&mut g, query, &vars, &seqs)? {
                Some(loss) => {
                    terms.push(loss);
                    g.scalar_f64(loss)
                }
                None => 0.0,
            });
        }

        let l_total = l_moco.unwrap_or(0.0) + l_tlm.unwrap_or(0.0);
        let lr = lr_at(self.step, self.total_steps, cfg);
        if let Some((&first, rest)) = terms.split_first() {
            let mut total = first;
            for &t in rest {
                total = g.add(total, t)?;
            }
            let mut grads = g.backward(total)?;
            let mut pg = query.params.collect_grads(&vars, &mut grads);
            drop(g);
            clip_grad_norm(&mut pg, cfg.clip_norm);
            self.opt
                .update(&mut self.state.query.params, &pg, lr, cfg.weight_decay)?;
        }
        if let Some(keys) = keys {
            self.state.finish_step(&keys)?;
        }
        let m = StepMetrics {
            step: self.step,
            l_moco,
            l_tlm,
            l_total,
            lr,
        };
        self.step += 1;
        Ok(m)
    }

    /// Trains until `stop` steps are complete (or the end of training),
    /// handing every step's metrics to `on_step`.
    pub fn run_until(
        &mut self,
        pairs: &[ParallelPair],
        stop: usize,
        mut on_step: impl FnMut(&StepMetrics),
    ) -> Result<Vec<StepMetrics>> {
        let mut out = Vec::new();
        while self.step < stop.min(self.total_steps) {
            let m = self.train_step(pairs)?;
            on_step(&m);
            out.push(m);
        }
        Ok(out)
    }
}

/// Full alignment training. With `heldout`, retrieval accuracy of the query
/// encoder is measured after every epoch.
pub fn train_ppa(
    state: MoCoState,
    pairs: &[ParallelPair],
    cfg: &TrainConfig,
    heldout: Option<&[ParallelPair]>,
    mut on_step: impl FnMut(&StepMetrics),
) -> Result<(MoCoState, TrainMetrics)> {
    let mut t = Trainer::new(state, cfg.clone(), pairs.len())?;
    let mut metrics = TrainMetrics::default();
    for epoch in 0..cfg.epochs {
        let stop = (epoch + 1) * t.steps_per_epoch();
        metrics.steps.extend(t.run_until(pairs, stop, &mut on_step)?);
        if let Some(h) = heldout {
            metrics.epoch_retrieval.push(evaluate_retrieval(&t.state.query, h)?);
        }
    }
    Ok((t.state, metrics))
}

/// Masked language modeling on single sentences, used to give the encoder
/// a language-model starting point before alignment. Each step draws
/// `cfg.batch_size` sentences at random. Returns the per-step losses.
pub fn mlm_warmup(encoder: &mut EncoderParams, texts: &[TokenSequence], cfg: &TrainConfig) -> Result<Vec<f64>> {
    let steps = cfg.mlm_warmup_steps;
    if steps == 0 {
        return Ok(Vec::new());
    }
    if texts.is_empty() {
        return Err(Error::Data("warm-up corpus is empty".into()));
    }
    let keep = cfg.max_seq_len.min(encoder.config.max_positions).saturating_sub(2);
    if keep == 0 {
        return Err(Error::Config("max_seq_len leaves no room for tokens".into()));
    }
    let mut opt = AdamW::new(&encoder.params);
    let warm = (0.1 * steps as f64).round() as usize;
    let mut losses = Vec::with_capacity(steps);
    for s in 0..steps {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, Stream::Warmup, s as u64));
        let mut seqs = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let t = &texts[rng.gen_range(0..texts.len())];
            let input = build_mlm_input(&t[..t.len().min(keep)], cfg.max_seq_len)?;
            seqs.push(apply_masking_with(&input, encoder.config.vocab_size, &mut rng));
        }
        let mut g = Graph::new();
        let vars = encoder.bind(&mut g, true);
        let Some(loss) = tlm_loss_on_tape(&mut g, encoder, &vars, &seqs)? else {
            losses.push(0.0);
            continue;
        };
        losses.push(g.scalar_f64(loss));
        let mut grads = g.backward(loss)?;
        let mut pg = encoder.params.collect_grads(&vars, &mut grads);
        drop(g);
        clip_grad_norm(&mut pg, cfg.clip_norm);
        let lr = linear_schedule(s, steps, warm, cfg.mlm_warmup_lr);
        opt.update(&mut encoder.params, &pg, lr, cfg.weight_decay)?;
    }
    Ok(losses)
}
