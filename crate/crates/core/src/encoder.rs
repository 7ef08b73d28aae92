//! BERT-style post-LN transformer encoder with a [CLS] projection head and a
//! tied masked-token output layer.
//!
//! Sequences are packed row-wise into one matrix; attention is restricted to
//! each sequence's span, so no padding is ever materialized.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kv::{self, KvMap};
use crate::numerics::{read_tensors, write_tensors, Graph, ParamStore, Span, Tensor, Var, LAYER_NORM_EPS};
use crate::tokenizer::CLS;

pub const INIT_STD: f32 = 0.02;
pub const NUM_SEGMENTS: usize = 2;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub hidden: usize,
    pub ff_size: usize,
    pub heads: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub proj_dim: usize,
    /// Pool by averaging all token states instead of taking [CLS].
    pub mean_pooling: bool,
}

impl EncoderConfig {
    pub fn toy(vocab_size: usize) -> Self {
        Self {
            num_layers: 2,
            hidden: 64,
            ff_size: 256,
            heads: 4,
            vocab_size,
            max_positions: 128,
            proj_dim: 32,
            mean_pooling: false,
        }
    }

    /// Multilingual BERT-base dimensions with a 110k vocabulary.
    pub fn mbert() -> Self {
        Self {
            num_layers: 12,
            hidden: 768,
            ff_size: 3072,
            heads: 12,
            vocab_size: 110_000,
            max_positions: 512,
            proj_dim: 300,
            mean_pooling: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_layers", self.num_layers),
            ("hidden", self.hidden),
            ("ff_size", self.ff_size),
            ("heads", self.heads),
            ("vocab_size", self.vocab_size),
            ("max_positions", self.max_positions),
            ("proj_dim", self.proj_dim),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("encoder {k} must be positive")));
            }
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden size {} is not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        Ok(())
    }

    /// Name and shape of every parameter, in storage order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, f) = (self.hidden, self.ff_size);
        let mut s: Vec<(String, Vec<usize>)> = vec![
            ("emb.token".into(), vec![self.vocab_size, d]),
            ("emb.position".into(), vec![self.max_positions, d]),
            ("emb.segment".into(), vec![NUM_SEGMENTS, d]),
            ("emb.ln.gain".into(), vec![d]),
            ("emb.ln.bias".into(), vec![d]),
        ];
        for l in 0..self.num_layers {
            for w in ["q", "k", "v", "o"] {
                s.push((format!("layer{l}.attn.{w}.weight"), vec![d, d]));
                s.push((format!("layer{l}.attn.{w}.bias"), vec![d]));
            }
            s.push((format!("layer{l}.attn.ln.gain"), vec![d]));
            s.push((format!("layer{l}.attn.ln.bias"), vec![d]));
            s.push((format!("layer{l}.ffn.in.weight"), vec![f, d]));
            s.push((format!("layer{l}.ffn.in.bias"), vec![f]));
            s.push((format!("layer{l}.ffn.out.weight"), vec![d, f]));
            s.push((format!("layer{l}.ffn.out.bias"), vec![d]));
            s.push((format!("layer{l}.ffn.ln.gain"), vec![d]));
            s.push((format!("layer{l}.ffn.ln.bias"), vec![d]));
        }
        s.push(("proj.w1".into(), vec![d, d]));
        s.push(("proj.w2".into(), vec![self.proj_dim, d]));
        s.push(("mlm.bias".into(), vec![self.vocab_size]));
        s
    }

    /// Closed-form size of the transformer body (embeddings and layers).
    pub fn backbone_param_count(&self) -> usize {
        let (d, f) = (self.hidden, self.ff_size);
        let emb = (self.vocab_size + self.max_positions + NUM_SEGMENTS) * d + 2 * d;
        let layer = 4 * (d * d + d) + 2 * d + 2 * d * f + f + d + 2 * d;
        emb + self.num_layers * layer
    }

    /// Closed-form size including the projection head and output bias.
    pub fn param_count(&self) -> usize {
        let d = self.hidden;
        self.backbone_param_count() + d * d + self.proj_dim * d + self.vocab_size
    }

    pub fn to_kv(&self) -> String {
        kv::render([
            ("num_layers", self.num_layers.to_string()),
            ("hidden", self.hidden.to_string()),
            ("ff_size", self.ff_size.to_string()),
            ("heads", self.heads.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
            ("max_positions", self.max_positions.to_string()),
            ("proj_dim", self.proj_dim.to_string()),
            ("mean_pooling", self.mean_pooling.to_string()),
        ])
    }

    pub const KEYS: [&'static str; 8] = [
        "num_layers",
        "hidden",
        "ff_size",
        "heads",
        "vocab_size",
        "max_positions",
        "proj_dim",
        "mean_pooling",
    ];

    /// Applies any encoder keys present in `m` on top of `self`.
    pub fn apply_kv(&mut self, m: &KvMap) -> Result<()> {
        m.set("num_layers", &mut self.num_layers)?;
        m.set("hidden", &mut self.hidden)?;
        m.set("ff_size", &mut self.ff_size)?;
        m.set("heads", &mut self.heads)?;
        m.set("vocab_size", &mut self.vocab_size)?;
        m.set("max_positions", &mut self.max_positions)?;
        m.set("proj_dim", &mut self.proj_dim)?;
        m.set("mean_pooling", &mut self.mean_pooling)?;
        Ok(())
    }

    pub fn from_kv(m: &KvMap) -> Result<Self> {
        for k in Self::KEYS {
            if !m.contains(k) {
                return Err(Error::Config(format!("encoder config is missing {k}")));
            }
        }
        let mut c = Self::toy(1);
        c.apply_kv(m)?;
        c.validate()?;
        Ok(c)
    }
}

/// Token rows of several sequences stacked into one matrix.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PackedBatch {
    pub ids: Vec<usize>,
    pub positions: Vec<usize>,
    pub segments: Vec<usize>,
    pub spans: Vec<Span>,
}

impl PackedBatch {
    pub fn new() -> Self {
        Self::default()
    }

    /// Sequences with every token in segment 0.
    pub fn from_sequences(seqs: &[Vec<u32>], max_positions: usize) -> Result<Self> {
        let mut b = Self::new();
        for s in seqs {
            b.push(s, None, max_positions)?;
        }
        Ok(b)
    }

    /// Appends one sequence. It must start with [CLS]. Positions restart at
    /// zero for each sequence and run across any [SEP] boundaries.
    pub fn push(&mut self, ids: &[u32], segments: Option<&[u8]>, max_positions: usize) -> Result<()> {
        if ids.first() != Some(&CLS) {
            return Err(Error::Data("encoder input must start with [CLS]".into()));
        }
        if ids.len() > max_positions {
            return Err(Error::Data(format!(
                "input of {} tokens exceeds {max_positions} positions",
                ids.len()
            )));
        }
        if let Some(seg) = segments {
            if seg.len() != ids.len() {
                return Err(Error::Shape {
                    op: "segment ids",
                    left: vec![ids.len()],
                    right: vec![seg.len()],
                });
            }
            if let Some(&s) = seg.iter().find(|&&s| s as usize >= NUM_SEGMENTS) {
                return Err(Error::Index {
                    what: "segment id",
                    index: s as usize,
                    len: NUM_SEGMENTS,
                });
            }
        }
        self.spans.push(Span {
            start: self.ids.len(),
            len: ids.len(),
        });
        self.ids.extend(ids.iter().map(|&i| i as usize));
        self.positions.extend(0..ids.len());
        match segments {
            Some(seg) => self.segments.extend(seg.iter().map(|&s| s as usize)),
            None => self.segments.extend(std::iter::repeat(0).take(ids.len())),
        }
        Ok(())
    }

    pub fn num_sequences(&self) -> usize {
        self.spans.len()
    }

    pub fn num_tokens(&self) -> usize {
        self.ids.len()
    }

    /// Row of each sequence's [CLS] token.
    pub fn cls_rows(&self) -> Vec<usize> {
        self.spans.iter().map(|s| s.start).collect()
    }
}

/// One encoder instance: configuration plus named parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub params: ParamStore,
}

impl EncoderParams {
    /// Truncated-normal weights, zero biases, unit layer-norm gains.
    pub fn init(config: &EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, shape) in config.param_shapes() {
            let t = if name.ends_with(".gain") {
                Tensor::filled(&shape, 1.0)
            } else if name.ends_with("bias") {
                Tensor::zeros(&shape)
            } else {
                Tensor::truncated_normal(&shape, INIT_STD, &mut rng)
            };
            params.push(name, t);
        }
        Ok(Self {
            config: config.clone(),
            params,
        })
    }

    pub fn num_params(&self) -> usize {
        self.params.num_elements()
    }

    /// Puts every parameter on the tape.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.params.bind(g, trainable)
    }

    fn var(&self, vars: &[Var], name: &str) -> Var {
        let i = self
            .params
            .index_of(name)
            .unwrap_or_else(|| panic!("encoder parameter {name} missing"));
        vars[i]
    }

    /// Final hidden state of every packed token, `[tokens, hidden]`.
    pub fn forward(&self, g: &mut Graph, vars: &[Var], batch: &PackedBatch) -> Result<Var> {
        let c = &self.config;
        if batch.ids.is_empty() {
            return Err(Error::Data("empty encoder batch".into()));
        }
        let p = |n: &str| self.var(vars, n);
        let tok = g.gather_rows(p("emb.token"), &batch.ids)?;
        let pos = g.gather_rows(p("emb.position"), &batch.positions)?;
        let seg = g.gather_rows(p("emb.segment"), &batch.segments)?;
        let x = g.add(tok, pos)?;
        let x = g.add(x, seg)?;
        let mut x = g.layer_norm(x, p("emb.ln.gain"), p("emb.ln.bias"), LAYER_NORM_EPS)?;
        for l in 0..c.num_layers {
            let lin = |g: &mut Graph, x: Var, w: &str| -> Result<Var> {
                let y = g.matmul_bt(x, p(&format!("layer{l}.{w}.weight")))?;
                g.add_row(y, p(&format!("layer{l}.{w}.bias")))
            };
            let q = lin(g, x, "attn.q")?;
            let k = lin(g, x, "attn.k")?;
            let v = lin(g, x, "attn.v")?;
            let a = g.attention(q, k, v, &batch.spans, c.heads)?;
            let o = lin(g, a, "attn.o")?;
            let r = g.add(x, o)?;
            x = g.layer_norm(
                r,
                p(&format!("layer{l}.attn.ln.gain")),
                p(&format!("layer{l}.attn.ln.bias")),
                LAYER_NORM_EPS,
            )?;
            let h = lin(g, x, "ffn.in")?;
            let h = g.gelu(h);
            let o = lin(g, h, "ffn.out")?;
            let r = g.add(x, o)?;
            x = g.layer_norm(
                r,
                p(&format!("layer{l}.ffn.ln.gain")),
                p(&format!("layer{l}.ffn.ln.bias")),
                LAYER_NORM_EPS,
            )?;
        }
        Ok(x)
    }

    /// Sentence representation h per sequence: the [CLS] state, or the mean
    /// of all token states when mean pooling is configured.
    pub fn pool(&self, g: &mut Graph, hidden: Var, batch: &PackedBatch) -> Result<Var> {
        if self.config.mean_pooling {
            g.segment_mean(hidden, &batch.spans)
        } else {
            g.gather_rows(hidden, &batch.cls_rows())
        }
    }

    /// `z = l2norm(W2 · ReLU(W1 · l2norm(h)))` row-wise.
    pub fn project(&self, g: &mut Graph, vars: &[Var], h: Var) -> Result<Var> {
        let hn = g.l2_normalize(h)?;
        let a = g.matmul_bt(hn, self.var(vars, "proj.w1"))?;
        let a = g.relu(a);
        let z = g.matmul_bt(a, self.var(vars, "proj.w2"))?;
        g.l2_normalize(z)
    }

    /// Vocabulary logits for hidden rows through the tied token embeddings.
    pub fn mlm_logits(&self, g: &mut Graph, vars: &[Var], rows: Var) -> Result<Var> {
        let logits = g.matmul_bt(rows, self.var(vars, "emb.token"))?;
        g.add_row(logits, self.var(vars, "mlm.bias"))
    }

    /// Hidden states of one sequence, `[len, hidden]`; row 0 is h.
    pub fn hidden_states(&self, ids: &[u32], segments: Option<&[u8]>) -> Result<Tensor> {
        let mut b = PackedBatch::new();
        b.push(ids, segments, self.config.max_positions)?;
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let h = self.forward(&mut g, &vars, &b)?;
        Ok(g.value(h).clone())
    }

    /// Applies the projection head to raw sentence vectors.
    pub fn project_rows(&self, h: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let hv = g.constant(h.clone());
        let z = self.project(&mut g, &vars, hv)?;
        Ok(g.value(z).clone())
    }

    /// Unit-norm embeddings z for sequences given without [CLS].
    pub fn embed(&self, texts: &[&[u32]]) -> Result<Vec<Vec<f32>>> {
        const CHUNK: usize = 256;
        let mut out = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(CHUNK) {
            let mut b = PackedBatch::new();
            for t in chunk {
                let mut ids = Vec::with_capacity(t.len() + 1);
                ids.push(CLS);
                ids.extend_from_slice(t);
                b.push(&ids, None, self.config.max_positions)?;
            }
            let mut g = Graph::new();
            let vars = self.bind(&mut g, false);
            let hidden = self.forward(&mut g, &vars, &b)?;
            let h = self.pool(&mut g, hidden, &b)?;
            let z = self.project(&mut g, &vars, h)?;
            let zt = g.value(z);
            out.extend((0..zt.rows()).map(|r| zt.row(r).to_vec()));
        }
        Ok(out)
    }

    pub fn sentence_embed(&self, text: &[u32]) -> Result<Vec<f32>> {
        Ok(self.embed(&[text])?.remove(0))
    }

    fn cfg_path(stem: &Path) -> PathBuf {
        stem.with_extension("cfg")
    }

    /// Writes `<stem>.cfg`, `<stem>.manifest` and `<stem>.bin`.
    pub fn save(&self, stem: &Path) -> Result<()> {
        let cp = Self::cfg_path(stem);
        fs::write(&cp, self.config.to_kv()).map_err(|e| Error::io(&cp, e))?;
        write_tensors(stem, self.params.iter())
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let config = EncoderConfig::from_kv(&KvMap::load(&Self::cfg_path(stem))?)?;
        let mut enc = Self::init(&config, 0)?;
        enc.load_tensors(read_tensors(stem)?)?;
        Ok(enc)
    }

    /// Replaces all parameters from named tensors, validating every name and
    /// shape before anything is overwritten.
    pub fn load_tensors(&mut self, tensors: Vec<(String, Tensor)>) -> Result<()> {
        let mut incoming = ParamStore::new();
        for (name, t) in tensors {
            if incoming.index_of(&name).is_some() {
                return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
            }
            incoming.push(name, t);
        }
        self.params
            .check_same_layout(&incoming)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        self.params = incoming;
        Ok(())
    }
}

/// Cosine similarity of two vectors.
pub fn cosine(a: &[f32], b: &[f32]) -> f32 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum();
    let na: f64 = a.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
    (dot / (na * nb)) as f32
}
