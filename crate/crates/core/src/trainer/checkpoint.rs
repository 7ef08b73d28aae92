//! Checkpoint directory layout:
//!
//! - `checkpoint.txt`: format tag, step counters, queue cursor
//! - `train.cfg`, `encoder.cfg`: configurations
//! - `tensors.manifest` / `tensors.bin`: `query/*`, `key/*`, `adam.m/*`,
//!   `adam.v/*` and `queue`
//!
//! Generators are re-derived from the run seed and the step counter, so no
//! generator state needs storing.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::{AdamW, TrainConfig, Trainer};
use crate::encoder::{EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::kv::{self, KvMap};
use crate::moco::{MoCoState, NegativeQueue};
use crate::numerics::{read_tensors, write_tensors, Tensor};

pub const CHECKPOINT_FORMAT: &str = "ppa-checkpoint-1";

fn ck(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Trainer {
    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta = kv::render([
            ("format", CHECKPOINT_FORMAT.to_string()),
            ("step", self.step.to_string()),
            ("num_pairs", self.num_pairs.to_string()),
            ("total_steps", self.total_steps.to_string()),
            ("adam_step", self.opt.step.to_string()),
            ("queue_cursor", self.state.queue.cursor().to_string()),
            ("queue_dim", self.state.queue.dim().to_string()),
        ]);
        let write = |name: &str, text: String| {
            let p = dir.join(name);
            fs::write(&p, text).map_err(|e| Error::io(&p, e))
        };
        write("train.cfg", self.cfg.to_kv())?;
        write("encoder.cfg", self.state.query.config.to_kv())?;

        let mut tensors: Vec<(String, Tensor)> = Vec::new();
        for (name, t) in self.state.query.params.iter() {
            tensors.push((format!("query/{name}"), t.clone()));
        }
        for (name, t) in self.state.key.params.iter() {
            tensors.push((format!("key/{name}"), t.clone()));
        }
        tensors.extend(self.opt.named_moments(&self.state.query.params));
        tensors.push(("queue".into(), self.state.queue.as_tensor()));
        write_tensors(&dir.join("tensors"), tensors.iter().map(|(n, t)| (n.as_str(), t)))?;
        // Written last: a directory without it is an incomplete checkpoint.
        write("checkpoint.txt", meta)
    }

    /// Loads a checkpoint, validating every file before building any state.
    pub fn restore(dir: &Path) -> Result<Self> {
        let meta = KvMap::load(&dir.join("checkpoint.txt"))?;
        match meta.get::<String>("format")? {
            Some(f) if f == CHECKPOINT_FORMAT => {}
            other => return Err(ck(format!("unsupported checkpoint format {other:?}"))),
        }
        let need = |k: &str| -> Result<usize> {
            meta.get::<usize>(k)?
                .ok_or_else(|| ck(format!("checkpoint.txt lacks {k}")))
        };
        let step = need("step")?;
        let num_pairs = need("num_pairs")?;
        let total_steps = need("total_steps")?;
        let adam_step = need("adam_step")?;
        let cursor = need("queue_cursor")?;
        let qdim = need("queue_dim")?;

        let tm = KvMap::load(&dir.join("train.cfg"))?;
        tm.check_known(&TrainConfig::KEYS)?;
        let cfg = TrainConfig::from_kv(&tm)?;
        cfg.validate()?;
        let enc_cfg = EncoderConfig::from_kv(&KvMap::load(&dir.join("encoder.cfg"))?)?;
        if qdim != enc_cfg.proj_dim {
            return Err(ck(format!(
                "queue width {qdim} does not match projection size {}",
                enc_cfg.proj_dim
            )));
        }
        let expected_total = cfg.epochs * num_pairs.div_ceil(cfg.batch_size);
        if total_steps != expected_total || step > total_steps {
            return Err(ck(format!(
                "step counters {step}/{total_steps} inconsistent with configuration ({expected_total} steps)"
            )));
        }

        let mut by_name: HashMap<String, Tensor> = HashMap::new();
        for (name, t) in read_tensors(&dir.join("tensors"))? {
            if by_name.insert(name.clone(), t).is_some() {
                return Err(ck(format!("duplicate tensor {name}")));
            }
        }
        let shapes = enc_cfg.param_shapes();
        let mut take = |name: String, shape: &[usize]| -> Result<Tensor> {
            let t = by_name
                .remove(&name)
                .ok_or_else(|| ck(format!("missing tensor {name}")))?;
            if t.shape() != shape {
                return Err(ck(format!(
                    "tensor {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            Ok(t)
        };
        let mut query = Vec::new();
        let mut key = Vec::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for (name, shape) in &shapes {
            query.push((name.clone(), take(format!("query/{name}"), shape)?));
            key.push((name.clone(), take(format!("key/{name}"), shape)?));
            m.push(take(format!("adam.m/{name}"), shape)?.into_data());
            v.push(take(format!("adam.v/{name}"), shape)?.into_data());
        }
        let qt = by_name
            .remove("queue")
            .ok_or_else(|| ck("missing tensor queue"))?;
        if qt.shape() != [cfg.queue_size, qdim] {
            return Err(ck(format!(
                "queue has shape {:?}, expected [{}, {qdim}]",
                qt.shape(),
                cfg.queue_size
            )));
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(ck(format!("unexpected tensor {extra}")));
        }
        let queue = NegativeQueue::from_parts(qdim, qt.into_data(), cursor)?;

        let mut q = EncoderParams::init(&enc_cfg, 0)?;
        q.load_tensors(query)?;
        let mut k = EncoderParams::init(&enc_cfg, 0)?;
        k.load_tensors(key)?;
        let state = MoCoState {
            query: q,
            key: k,
            queue,
            momentum: cfg.momentum,
            temperature: cfg.temperature,
        };
        let mut t = Trainer::new(state, cfg, num_pairs)?;
        t.step = step;
        t.opt = AdamW {
            step: adam_step as u64,
            m,
            v,
        };
        Ok(t)
    }
}
