//! Run configuration: one flat key=value file with `data.`, `encoder.`,
//! `train.` and `finetune.` sections, a top-level `seed`, and optional
//! `input.` overrides for stage inputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ppa_core::encoder::EncoderConfig;
use ppa_core::finetune::FinetuneConfig;
use ppa_core::kv::{self, KvMap};
use ppa_core::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    /// Training pairs generated in addition to the held-out ones.
    pub pairs: usize,
    pub heldout: usize,
    /// Words per cipher language.
    pub vocab_words: usize,
    /// Subword vocabulary budget.
    pub vocab_size: usize,
    pub task_train: usize,
    pub task_test: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            pairs: 20_000,
            heldout: 200,
            vocab_words: 200,
            vocab_size: 512,
            task_train: 600,
            task_test: 300,
        }
    }
}

impl DataConfig {
    const KEYS: [&'static str; 6] = ["pairs", "heldout", "vocab_words", "vocab_size", "task_train", "task_test"];

    fn apply(&mut self, m: &KvMap) -> Result<()> {
        m.check_known(&Self::KEYS)?;
        m.set("pairs", &mut self.pairs)?;
        m.set("heldout", &mut self.heldout)?;
        m.set("vocab_words", &mut self.vocab_words)?;
        m.set("vocab_size", &mut self.vocab_size)?;
        m.set("task_train", &mut self.task_train)?;
        m.set("task_test", &mut self.task_test)?;
        Ok(())
    }

    fn render(&self) -> String {
        kv::render([
            ("pairs", self.pairs),
            ("heldout", self.heldout),
            ("vocab_words", self.vocab_words),
            ("vocab_size", self.vocab_size),
            ("task_train", self.task_train),
            ("task_test", self.task_test),
        ])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub paper_mode: bool,
    pub code_switch: bool,
    pub data: DataConfig,
    /// `vocab_size` is filled in from the vocabulary at training time.
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub finetune: FinetuneConfig,
    /// Explicit stage inputs by name, with optional expected hashes.
    pub inputs: BTreeMap<String, PathBuf>,
    pub input_hashes: BTreeMap<String, String>,
    /// Command recorded in a manifest, if the file is one.
    pub command: Option<String>,
}

const TOP_KEYS: [&str; 4] = ["seed", "paper_mode", "code_switch", "command"];

fn without_seed(text: String) -> String {
    text.lines()
        .filter(|l| !l.starts_with("seed="))
        .map(|l| format!("{l}\n"))
        .collect()
}

fn prefixed(prefix: &str, body: &str) -> String {
    body.lines().map(|l| format!("{prefix}{l}\n")).collect()
}

impl RunConfig {
    /// Toy runs pool by averaging: the small encoder's `[CLS]` state does
    /// not pick up alignment when trained from scratch.
    pub fn toy() -> Self {
        Self {
            seed: 0,
            paper_mode: false,
            code_switch: true,
            data: DataConfig::default(),
            encoder: EncoderConfig {
                mean_pooling: true,
                ..EncoderConfig::toy(0)
            },
            train: TrainConfig::toy(),
            finetune: FinetuneConfig::toy(),
            inputs: BTreeMap::new(),
            input_hashes: BTreeMap::new(),
            command: None,
        }
    }

    pub fn paper() -> Self {
        Self {
            paper_mode: true,
            encoder: EncoderConfig::mbert(),
            train: TrainConfig::paper(),
            finetune: FinetuneConfig::xnli(),
            ..Self::toy()
        }
    }

    pub fn load(path: &Path, paper_mode: bool) -> Result<Self> {
        let m = KvMap::load(path)?;
        Self::from_kv(&m, paper_mode).with_context(|| format!("in configuration {}", path.display()))
    }

    /// Presets come from `paper_mode` (flag or key); every key present
    /// overrides them.
    pub fn from_kv(m: &KvMap, paper_flag: bool) -> Result<Self> {
        let paper = paper_flag || m.get::<bool>("paper_mode")?.unwrap_or(false);
        let mut c = if paper { Self::paper() } else { Self::toy() };
        let rest = m.without(&["data.", "encoder.", "train.", "finetune.", "input."]);
        rest.check_known(&TOP_KEYS)?;
        rest.set("seed", &mut c.seed)?;
        rest.set("code_switch", &mut c.code_switch)?;
        c.command = rest.get("command")?;

        c.data.apply(&m.section("data."))?;

        let enc = m.section("encoder.");
        let enc_keys: Vec<&str> = EncoderConfig::KEYS.iter().copied().filter(|k| *k != "vocab_size").collect();
        enc.check_known(&enc_keys)?;
        c.encoder.apply_kv(&enc)?;

        let tr = m.section("train.");
        let tr_keys: Vec<&str> = TrainConfig::KEYS.iter().copied().filter(|k| !matches!(*k, "seed" | "preset")).collect();
        tr.check_known(&tr_keys)?;
        c.train.apply_kv(&tr)?;

        let ft = m.section("finetune.");
        let ft_keys: Vec<&str> = FinetuneConfig::KEYS.iter().copied().filter(|k| !matches!(*k, "seed" | "preset")).collect();
        ft.check_known(&ft_keys)?;
        c.finetune.apply_kv(&ft)?;

        let inputs = m.section("input.");
        for key in inputs.keys() {
            let value = inputs.raw(key).unwrap_or_default().to_string();
            match key.strip_suffix(".sha256") {
                Some(name) => {
                    c.input_hashes.insert(name.to_string(), value);
                }
                None => {
                    c.inputs.insert(key.to_string(), PathBuf::from(value));
                }
            }
        }
        c.apply_seed();
        Ok(c)
    }

    /// Propagates the run seed into the sections that consume one.
    pub fn apply_seed(&mut self) {
        self.train.seed = self.seed;
        self.finetune.seed = self.seed;
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.apply_seed();
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.data.pairs == 0 {
            bail!("data.pairs must be at least 1");
        }
        Ok(())
    }

    /// Every resolved setting, in a form `from_kv` reads back unchanged.
    pub fn render(&self) -> String {
        let enc: String = self
            .encoder
            .to_kv()
            .lines()
            .filter(|l| !l.starts_with("vocab_size="))
            .map(|l| format!("{l}\n"))
            .collect();
        let mut s = kv::render([
            ("seed", self.seed.to_string()),
            ("paper_mode", self.paper_mode.to_string()),
            ("code_switch", self.code_switch.to_string()),
        ]);
        s.push_str(&prefixed("data.", &self.data.render()));
        s.push_str(&prefixed("encoder.", &enc));
        s.push_str(&prefixed("train.", &without_seed(self.train.to_kv())));
        s.push_str(&prefixed("finetune.", &without_seed(self.finetune.to_kv())));
        s
    }
}
