use crate::error::{Error, Result};
use crate::kv::{self, KvMap};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_seq_len: usize,
    pub peak_lr: f32,
    /// Share of total steps spent ramping up. Ignored when `warmup_steps`
    /// is set.
    pub warmup_fraction: f64,
    pub warmup_steps: Option<usize>,
    pub weight_decay: f32,
    pub epochs: usize,
    pub queue_size: usize,
    pub momentum: f32,
    pub temperature: f32,
    pub seed: u64,
    pub use_moco: bool,
    pub use_tlm: bool,
    /// Plain MLM on each side separately in place of TLM.
    pub use_mlm: bool,
    pub clip_norm: f32,
    /// Monolingual MLM steps run before alignment, standing in for a
    /// pretrained starting point.
    pub mlm_warmup_steps: usize,
    pub mlm_warmup_lr: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl TrainConfig {
    /// Desk-scale defaults for the toy encoder.
    pub fn toy() -> Self {
        Self {
            batch_size: 128,
            max_seq_len: 128,
            peak_lr: 5e-4,
            warmup_fraction: 0.1,
            warmup_steps: None,
            weight_decay: 0.01,
            epochs: 3,
            queue_size: 256,
            momentum: 0.99,
            temperature: 0.05,
            seed: 0,
            use_moco: true,
            use_tlm: true,
            use_mlm: false,
            clip_norm: 1.0,
            mlm_warmup_steps: 400,
            mlm_warmup_lr: 1e-3,
        }
    }

    /// Hyperparameters of the published alignment runs.
    pub fn paper() -> Self {
        Self {
            batch_size: 128,
            max_seq_len: 128,
            peak_lr: 3e-5,
            warmup_fraction: 0.1,
            warmup_steps: None,
            weight_decay: 0.01,
            epochs: 10,
            queue_size: 32_000,
            momentum: 0.999,
            temperature: 0.05,
            seed: 0,
            use_moco: true,
            use_tlm: true,
            use_mlm: false,
            clip_norm: 1.0,
            mlm_warmup_steps: 0,
            mlm_warmup_lr: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_seq_len == 0 {
            return Err(Error::Config("batch_size and max_seq_len must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config(format!(
                "warmup_fraction {} outside [0, 1]",
                self.warmup_fraction
            )));
        }
        if self.use_tlm && self.use_mlm {
            return Err(Error::Config("use_tlm and use_mlm are mutually exclusive".into()));
        }
        if !self.use_moco && !self.use_tlm && !self.use_mlm {
            return Err(Error::Config("every training objective is disabled".into()));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1]", self.momentum)));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if self.queue_size < self.batch_size {
            return Err(Error::Config(format!(
                "queue_size {} is smaller than batch_size {}",
                self.queue_size, self.batch_size
            )));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        Ok(())
    }

    pub const KEYS: [&'static str; 18] = [
        "batch_size",
        "max_seq_len",
        "peak_lr",
        "warmup_fraction",
        "warmup_steps",
        "weight_decay",
        "epochs",
        "queue_size",
        "momentum",
        "temperature",
        "seed",
        "use_moco",
        "use_tlm",
        "use_mlm",
        "clip_norm",
        "mlm_warmup_steps",
        "mlm_warmup_lr",
        "preset",
    ];

    /// Every field as `key=value` lines; floats use the shortest exact
    /// representation so the text round-trips bit-for-bit.
    pub fn to_kv(&self) -> String {
        kv::render([
            ("batch_size", self.batch_size.to_string()),
            ("max_seq_len", self.max_seq_len.to_string()),
            ("peak_lr", self.peak_lr.to_string()),
            ("warmup_fraction", self.warmup_fraction.to_string()),
            (
                "warmup_steps",
                self.warmup_steps.map_or("none".into(), |s| s.to_string()),
            ),
            ("weight_decay", self.weight_decay.to_string()),
            ("epochs", self.epochs.to_string()),
            ("queue_size", self.queue_size.to_string()),
            ("momentum", self.momentum.to_string()),
            ("temperature", self.temperature.to_string()),
            ("seed", self.seed.to_string()),
            ("use_moco", self.use_moco.to_string()),
            ("use_tlm", self.use_tlm.to_string()),
            ("use_mlm", self.use_mlm.to_string()),
            ("clip_norm", self.clip_norm.to_string()),
            ("mlm_warmup_steps", self.mlm_warmup_steps.to_string()),
            ("mlm_warmup_lr", self.mlm_warmup_lr.to_string()),
        ])
    }

    /// Starts from the preset named by `preset` (`toy` or `paper`, default
    /// `toy`) and applies every other key present.
    pub fn from_kv(m: &KvMap) -> Result<Self> {
        let mut c = match m.get::<String>("preset")?.as_deref() {
            None | Some("toy") => Self::toy(),
            Some("paper") => Self::paper(),
            Some(other) => return Err(Error::Config(format!("unknown preset {other:?}"))),
        };
        c.apply_kv(m)?;
        Ok(c)
    }

    pub fn apply_kv(&mut self, m: &KvMap) -> Result<()> {
        m.set("batch_size", &mut self.batch_size)?;
        m.set("max_seq_len", &mut self.max_seq_len)?;
        m.set("peak_lr", &mut self.peak_lr)?;
        m.set("warmup_fraction", &mut self.warmup_fraction)?;
        if let Some(s) = m.get::<String>("warmup_steps")? {
            self.warmup_steps = if s == "none" {
                None
            } else {
                Some(s.parse().map_err(|_| {
                    Error::Config(format!("warmup_steps {s:?} is neither a count nor none"))
                })?)
            };
        }
        m.set("weight_decay", &mut self.weight_decay)?;
        m.set("epochs", &mut self.epochs)?;
        m.set("queue_size", &mut self.queue_size)?;
        m.set("momentum", &mut self.momentum)?;
        m.set("temperature", &mut self.temperature)?;
        m.set("seed", &mut self.seed)?;
        m.set("use_moco", &mut self.use_moco)?;
        m.set("use_tlm", &mut self.use_tlm)?;
        m.set("use_mlm", &mut self.use_mlm)?;
        m.set("clip_norm", &mut self.clip_norm)?;
        m.set("mlm_warmup_steps", &mut self.mlm_warmup_steps)?;
        m.set("mlm_warmup_lr", &mut self.mlm_warmup_lr)?;
        Ok(())
    }

    /// Number of warm-up steps out of `total_steps`.
    pub fn warmup_for(&self, total_steps: usize) -> usize {
        match self.warmup_steps {
            Some(s) => s.min(total_steps),
            None => (self.warmup_fraction * total_steps as f64).round() as usize,
        }
    }
}

/// Linear ramp from 0 to `peak` over `warmup` steps, then linear decay to 0
/// at `total_steps`.
pub fn linear_schedule(step: usize, total_steps: usize, warmup: usize, peak: f32) -> f32 {
    let step = step.min(total_steps);
    if step < warmup {
        peak * step as f32 / warmup as f32
    } else if total_steps == warmup {
        peak
    } else {
        peak * (total_steps - step) as f32 / (total_steps - warmup) as f32
    }
}

pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> f32 {
    linear_schedule(step, total_steps, cfg.warmup_for(total_steps), cfg.peak_lr)
}
