//! Downstream heads (pair classification, extractive span selection), their
//! training loops, and the evaluation metrics used to measure transfer.

mod tasks;

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use tasks::{
    encode_task, generate_classification_task, generate_span_task, QaExample, TaskText,
    CLASSIFICATION_CLASSES,
};

use crate::corpus::{make_labeled_batches, LabeledPairExample, ParallelPair};
use crate::encoder::{cosine, EncoderParams, PackedBatch};
use crate::error::{Error, Result};
use crate::kv::{self, KvMap};
use crate::numerics::{Graph, ParamGrads, ParamStore, Tensor, Var};
use crate::seed::{derive_seed, Stream};
use crate::tokenizer::{CLS, SEP};
use crate::trainer::{linear_schedule, AdamW};

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneConfig {
    pub batch_size: usize,
    pub max_seq_len: usize,
    pub lr: f32,
    pub warmup: Warmup,
    pub epochs: usize,
    pub weight_decay: f32,
    pub clip_norm: f32,
    pub seed: u64,
    /// Train the head only; the encoder receives no updates.
    pub freeze_encoder: bool,
    pub max_answer_len: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Warmup {
    Steps(usize),
    Fraction(f64),
}

impl Warmup {
    pub fn steps(self, total: usize) -> usize {
        match self {
            Warmup::Steps(s) => s.min(total),
            Warmup::Fraction(f) => (f * total as f64).round() as usize,
        }
    }
}

impl FinetuneConfig {
    /// Sentence-pair classification settings of the published runs.
    pub fn xnli() -> Self {
        Self {
            batch_size: 32,
            max_seq_len: 128,
            lr: 5e-5,
            warmup: Warmup::Steps(1000),
            epochs: 2,
            weight_decay: 0.01,
            clip_norm: 1.0,
            seed: 0,
            freeze_encoder: false,
            max_answer_len: 30,
        }
    }

    /// Span-extraction settings of the published runs.
    pub fn mlqa() -> Self {
        Self {
            max_seq_len: 386,
            lr: 3e-5,
            warmup: Warmup::Fraction(0.1),
            ..Self::xnli()
        }
    }

    /// Settings for the toy encoder: a linear probe on the frozen encoder.
    /// Finetuning a small from-scratch encoder end to end on one language
    /// moves only that language's token representations, and zero-shot
    /// transfer is lost.
    pub fn toy() -> Self {
        Self {
            batch_size: 32,
            max_seq_len: 128,
            lr: 1e-2,
            warmup: Warmup::Fraction(0.1),
            epochs: 20,
            weight_decay: 0.01,
            clip_norm: 1.0,
            seed: 0,
            freeze_encoder: true,
            max_answer_len: 8,
        }
    }

    pub const KEYS: [&'static str; 11] = [
        "batch_size",
        "max_seq_len",
        "lr",
        "warmup",
        "epochs",
        "weight_decay",
        "clip_norm",
        "seed",
        "freeze_encoder",
        "max_answer_len",
        "preset",
    ];

    /// `warmup` renders as a step count or as a fraction such as `0.1`.
    pub fn to_kv(&self) -> String {
        let warmup = match self.warmup {
            Warmup::Steps(s) => s.to_string(),
            Warmup::Fraction(f) => format!("{f:?}"),
        };
        kv::render([
            ("batch_size", self.batch_size.to_string()),
            ("max_seq_len", self.max_seq_len.to_string()),
            ("lr", self.lr.to_string()),
            ("warmup", warmup),
            ("epochs", self.epochs.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("clip_norm", self.clip_norm.to_string()),
            ("seed", self.seed.to_string()),
            ("freeze_encoder", self.freeze_encoder.to_string()),
            ("max_answer_len", self.max_answer_len.to_string()),
        ])
    }

    /// Starts from `preset` (`toy`, `xnli` or `mlqa`; default `toy`).
    pub fn from_kv(m: &KvMap) -> Result<Self> {
        let mut c = match m.get::<String>("preset")?.as_deref() {
            None | Some("toy") => Self::toy(),
            Some("xnli") => Self::xnli(),
            Some("mlqa") => Self::mlqa(),
            Some(other) => return Err(Error::Config(format!("unknown finetune preset {other:?}"))),
        };
        c.apply_kv(m)?;
        Ok(c)
    }

    pub fn apply_kv(&mut self, m: &KvMap) -> Result<()> {
        m.set("batch_size", &mut self.batch_size)?;
        m.set("max_seq_len", &mut self.max_seq_len)?;
        m.set("lr", &mut self.lr)?;
        if let Some(w) = m.get::<String>("warmup")? {
            self.warmup = if w.contains('.') {
                let f: f64 = w
                    .parse()
                    .map_err(|_| Error::Config(format!("warmup {w:?} is not a fraction")))?;
                if !(0.0..=1.0).contains(&f) {
                    return Err(Error::Config(format!("warmup fraction {f} outside [0, 1]")));
                }
                Warmup::Fraction(f)
            } else {
                Warmup::Steps(
                    w.parse()
                        .map_err(|_| Error::Config(format!("warmup {w:?} is not a step count")))?,
                )
            };
        }
        m.set("epochs", &mut self.epochs)?;
        m.set("weight_decay", &mut self.weight_decay)?;
        m.set("clip_norm", &mut self.clip_norm)?;
        m.set("seed", &mut self.seed)?;
        m.set("freeze_encoder", &mut self.freeze_encoder)?;
        m.set("max_answer_len", &mut self.max_answer_len)?;
        Ok(())
    }

    fn validate(&self, encoder: &EncoderParams) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        if self.max_seq_len > encoder.config.max_positions {
            return Err(Error::Config(format!(
                "max_seq_len {} exceeds the encoder's {} positions",
                self.max_seq_len, encoder.config.max_positions
            )));
        }
        Ok(())
    }
}

/// `[CLS] a [SEP] b [SEP]` with segments 0/1, trimming the longer side
/// first until it fits.
pub fn pair_input(a: &[u32], b: &[u32], max_seq_len: usize) -> (Vec<u32>, Vec<u8>, usize) {
    let (mut la, mut lb) = (a.len(), b.len());
    while la + lb + 3 > max_seq_len && la + lb > 0 {
        if la >= lb {
            la -= 1;
        } else {
            lb -= 1;
        }
    }
    let mut ids = Vec::with_capacity(la + lb + 3);
    ids.push(CLS);
    ids.extend_from_slice(&a[..la]);
    ids.push(SEP);
    let second = ids.len();
    ids.extend_from_slice(&b[..lb]);
    ids.push(SEP);
    let mut seg = vec![0u8; second];
    seg.resize(ids.len(), 1);
    (ids, seg, second)
}

/// Softmax classifier over the final [CLS] state.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHead {
    pub params: ParamStore,
    pub num_classes: usize,
}

impl ClassifierHead {
    pub fn new(hidden: usize, num_classes: usize, seed: u64) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Config("a classifier needs at least 2 classes".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        params.push("cls.weight", Tensor::truncated_normal(&[num_classes, hidden], 0.02, &mut rng));
        params.push("cls.bias", Tensor::zeros(&[num_classes]));
        Ok(Self { params, num_classes })
    }

    fn logits(&self, g: &mut Graph, vars: &[Var], h: Var) -> Result<Var> {
        let y = g.matmul_bt(h, vars[0])?;
        g.add_row(y, vars[1])
    }
}

/// Start/end scorers applied to every context token.
#[derive(Clone, Debug, PartialEq)]
pub struct SpanHead {
    pub params: ParamStore,
}

impl SpanHead {
    pub fn new(hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        params.push("span.weight", Tensor::truncated_normal(&[2, hidden], 0.02, &mut rng));
        params.push("span.bias", Tensor::zeros(&[2]));
        Self { params }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierModel {
    pub encoder: EncoderParams,
    pub head: ClassifierHead,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpanModel {
    pub encoder: EncoderParams,
    pub head: SpanHead,
}

/// Encoder and head optimized together, or the head alone when frozen.
struct JointOptimizer {
    enc: Option<AdamW>,
    head: AdamW,
    total: usize,
    warm: usize,
    step: usize,
}

impl JointOptimizer {
    fn new(encoder: &EncoderParams, head: &ParamStore, cfg: &FinetuneConfig, total: usize) -> Self {
        Self {
            enc: (!cfg.freeze_encoder).then(|| AdamW::new(&encoder.params)),
            head: AdamW::new(head),
            total,
            warm: cfg.warmup.steps(total),
            step: 0,
        }
    }

    fn apply(
        &mut self,
        encoder: &mut EncoderParams,
        head: &mut ParamStore,
        mut enc_grads: ParamGrads,
        mut head_grads: ParamGrads,
        cfg: &FinetuneConfig,
    ) -> Result<()> {
        let norm = (enc_grads.sq_norm() + head_grads.sq_norm()).sqrt();
        if norm > f64::from(cfg.clip_norm) {
            let s = (f64::from(cfg.clip_norm) / norm) as f32;
            enc_grads.scale(s);
            head_grads.scale(s);
        }
        let lr = linear_schedule(self.step, self.total, self.warm, cfg.lr);
        if let Some(opt) = &mut self.enc {
            opt.update(&mut encoder.params, &enc_grads, lr, cfg.weight_decay)?;
        }
        self.head.update(head, &head_grads, lr, cfg.weight_decay)?;
        self.step += 1;
        Ok(())
    }
}

fn classifier_logits(
    model: &ClassifierModel,
    g: &mut Graph,
    enc_vars: &[Var],
    head_vars: &[Var],
    examples: &[&LabeledPairExample],
    max_seq_len: usize,
) -> Result<Var> {
    let mut packed = PackedBatch::new();
    for ex in examples {
        let (ids, seg, _) = pair_input(&ex.text_a, &ex.text_b, max_seq_len);
        packed.push(&ids, Some(&seg), model.encoder.config.max_positions)?;
    }
    let hidden = model.encoder.forward(g, enc_vars, &packed)?;
    let h = model.encoder.pool(g, hidden, &packed)?;
    model.head.logits(g, head_vars, h)
}

/// Gradients of one classification batch: `(loss, encoder, head)`.
pub fn classifier_batch_grads(
    model: &ClassifierModel,
    examples: &[&LabeledPairExample],
    cfg: &FinetuneConfig,
) -> Result<(f64, ParamGrads, ParamGrads)> {
    let mut g = Graph::new();
    let enc_vars = model.encoder.bind(&mut g, !cfg.freeze_encoder);
    let head_vars = model.head.params.bind(&mut g, true);
    let logits = classifier_logits(model, &mut g, &enc_vars, &head_vars, examples, cfg.max_seq_len)?;
    let labels: Vec<usize> = examples.iter().map(|e| e.label).collect();
    let loss = g.cross_entropy(logits, &labels)?;
    let mut grads = g.backward(loss)?;
    Ok((
        g.scalar_f64(loss),
        model.encoder.params.collect_grads(&enc_vars, &mut grads),
        model.head.params.collect_grads(&head_vars, &mut grads),
    ))
}

/// Cross-entropy training of a classification head on `[CLS] a [SEP] b
/// [SEP]`. Examples sharing a co-batch tag are always in the same batch.
pub fn finetune_classifier(
    encoder: &EncoderParams,
    train: &[LabeledPairExample],
    num_classes: usize,
    cfg: &FinetuneConfig,
) -> Result<(ClassifierModel, Vec<f64>)> {
    cfg.validate(encoder)?;
    if train.is_empty() {
        return Err(Error::Data("classification training set is empty".into()));
    }
    if let Some(e) = train.iter().find(|e| e.label >= num_classes) {
        return Err(Error::Data(format!("label {} >= {num_classes} classes", e.label)));
    }
    let mut model = ClassifierModel {
        encoder: encoder.clone(),
        head: ClassifierHead::new(encoder.config.hidden, num_classes, derive_seed(cfg.seed, Stream::Init, 1))?,
    };
    let epochs: Vec<Vec<Vec<usize>>> = (0..cfg.epochs)
        .map(|e| make_labeled_batches(train, cfg.batch_size, derive_seed(cfg.seed, Stream::Finetune, e as u64)))
        .collect::<Result<_>>()?;
    let total = epochs.iter().map(Vec::len).sum();
    let mut opt = JointOptimizer::new(&model.encoder, &model.head.params, cfg, total);
    let mut losses = Vec::with_capacity(total);
    for batches in &epochs {
        for b in batches {
            let exs: Vec<&LabeledPairExample> = b.iter().map(|&i| &train[i]).collect();
            let (loss, eg, hg) = classifier_batch_grads(&model, &exs, cfg)?;
            losses.push(loss);
            opt.apply(&mut model.encoder, &mut model.head.params, eg, hg, cfg)?;
        }
    }
    Ok((model, losses))
}

pub fn predict_classes(model: &ClassifierModel, examples: &[LabeledPairExample], max_seq_len: usize) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(128) {
        let refs: Vec<&LabeledPairExample> = chunk.iter().collect();
        let mut g = Graph::new();
        let ev = model.encoder.bind(&mut g, false);
        let hv = model.head.params.bind(&mut g, false);
        let logits = classifier_logits(model, &mut g, &ev, &hv, &refs, max_seq_len)?;
        let t = g.value(logits);
        for r in 0..t.rows() {
            out.push(argmax(t.row(r)));
        }
    }
    Ok(out)
}

fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn classification_accuracy(model: &ClassifierModel, examples: &[LabeledPairExample], max_seq_len: usize) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Data("no examples to evaluate".into()));
    }
    let pred = predict_classes(model, examples, max_seq_len)?;
    let hits = pred.iter().zip(examples).filter(|(p, e)| **p == e.label).count();
    Ok(hits as f64 / examples.len() as f64)
}

/// Accuracy of a model trained on one language applied unchanged to a test
/// set in another. Only a trained model and labeled test data go in.
pub fn evaluate_zero_shot(model: &ClassifierModel, test: &[LabeledPairExample], max_seq_len: usize) -> Result<f64> {
    classification_accuracy(model, test, max_seq_len)
}

/// Start and end logits of each example over its context tokens.
fn span_logits(
    model: &SpanModel,
    g: &mut Graph,
    enc_vars: &[Var],
    head_vars: &[Var],
    examples: &[&QaExample],
    max_seq_len: usize,
) -> Result<Vec<Var>> {
    let mut packed = PackedBatch::new();
    let mut ctx_rows = Vec::with_capacity(examples.len());
    for ex in examples {
        let (ids, seg, ctx_start) = pair_input(&ex.question, &ex.context, max_seq_len);
        if ids.len() - ctx_start - 1 != ex.context.len() {
            return Err(Error::Data(format!(
                "example {}: question and context exceed {max_seq_len} tokens",
                ex.id
            )));
        }
        let base = packed.num_tokens() + ctx_start;
        ctx_rows.push((base..base + ex.context.len()).collect::<Vec<_>>());
        packed.push(&ids, Some(&seg), model.encoder.config.max_positions)?;
    }
    let hidden = model.encoder.forward(g, enc_vars, &packed)?;
    let scores = g.matmul_bt(hidden, head_vars[0])?;
    let scores = g.add_row(scores, head_vars[1])?;
    let mut out = Vec::with_capacity(examples.len());
    for rows in ctx_rows {
        let s = g.gather_rows(scores, &rows)?;
        out.push(g.transpose(s));
    }
    Ok(out)
}

fn check_span(ex: &QaExample) -> Result<()> {
    if ex.context.is_empty() || ex.start > ex.end || ex.end >= ex.context.len() {
        return Err(Error::Data(format!(
            "example {}: answer span {}..={} is outside the {}-token context",
            ex.id,
            ex.start,
            ex.end,
            ex.context.len()
        )));
    }
    Ok(())
}

/// Mean over examples of the average of start and end cross-entropies, the
/// softmax running over context positions only.
pub fn span_batch_grads(
    model: &SpanModel,
    examples: &[&QaExample],
    cfg: &FinetuneConfig,
) -> Result<(f64, ParamGrads, ParamGrads)> {
    let mut g = Graph::new();
    let enc_vars = model.encoder.bind(&mut g, !cfg.freeze_encoder);
    let head_vars = model.head.params.bind(&mut g, true);
    let per = span_logits(model, &mut g, &enc_vars, &head_vars, examples, cfg.max_seq_len)?;
    let mut total: Option<Var> = None;
    for (ex, logits) in examples.iter().zip(per) {
        let l = g.cross_entropy(logits, &[ex.start, ex.end])?;
        total = Some(match total {
            None => l,
            Some(t) => g.add(t, l)?,
        });
    }
    let total = total.ok_or_else(|| Error::Data("empty span batch".into()))?;
    let loss = g.scale(total, 1.0 / examples.len() as f32);
    let mut grads = g.backward(loss)?;
    Ok((
        g.scalar_f64(loss),
        model.encoder.params.collect_grads(&enc_vars, &mut grads),
        model.head.params.collect_grads(&head_vars, &mut grads),
    ))
}

pub fn finetune_span(encoder: &EncoderParams, train: &[QaExample], cfg: &FinetuneConfig) -> Result<(SpanModel, Vec<f64>)> {
    cfg.validate(encoder)?;
    if train.is_empty() {
        return Err(Error::Data("span training set is empty".into()));
    }
    for ex in train {
        check_span(ex)?;
    }
    let mut model = SpanModel {
        encoder: encoder.clone(),
        head: SpanHead::new(encoder.config.hidden, derive_seed(cfg.seed, Stream::Init, 2)),
    };
    let untagged: Vec<LabeledPairExample> = train
        .iter()
        .map(|_| LabeledPairExample {
            text_a: Default::default(),
            text_b: Default::default(),
            label: 0,
            language: String::new(),
            cobatch: None,
        })
        .collect();
    let epochs: Vec<Vec<Vec<usize>>> = (0..cfg.epochs)
        .map(|e| make_labeled_batches(&untagged, cfg.batch_size, derive_seed(cfg.seed, Stream::Finetune, e as u64)))
        .collect::<Result<_>>()?;
    let total = epochs.iter().map(Vec::len).sum();
    let mut opt = JointOptimizer::new(&model.encoder, &model.head.params, cfg, total);
    let mut losses = Vec::with_capacity(total);
    for batches in &epochs {
        for b in batches {
            let exs: Vec<&QaExample> = b.iter().map(|&i| &train[i]).collect();
            let (loss, eg, hg) = span_batch_grads(&model, &exs, cfg)?;
            losses.push(loss);
            opt.apply(&mut model.encoder, &mut model.head.params, eg, hg, cfg)?;
        }
    }
    Ok((model, losses))
}

/// Highest `start + end` score over spans of at most `max_len` tokens.
/// Ties go to the earliest start, then the shortest span.
pub fn decode_span(start: &[f32], end: &[f32], max_len: usize) -> Option<(usize, usize)> {
    let mut best: Option<(f32, usize, usize)> = None;
    for s in 0..start.len() {
        for e in s..end.len().min(s + max_len) {
            let score = start[s] + end[e];
            if best.map_or(true, |(b, _, _)| score > b) {
                best = Some((score, s, e));
            }
        }
    }
    best.map(|(_, s, e)| (s, e))
}

/// Predicted `(start, end)` context-token indices per example.
pub fn predict_spans(model: &SpanModel, examples: &[QaExample], cfg: &FinetuneConfig) -> Result<Vec<(usize, usize)>> {
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(128) {
        let refs: Vec<&QaExample> = chunk.iter().collect();
        let mut g = Graph::new();
        let ev = model.encoder.bind(&mut g, false);
        let hv = model.head.params.bind(&mut g, false);
        for v in span_logits(model, &mut g, &ev, &hv, &refs, cfg.max_seq_len)? {
            let t = g.value(v);
            let span = decode_span(t.row(0), t.row(1), cfg.max_answer_len)
                .ok_or_else(|| Error::Data("empty context".into()))?;
            out.push(span);
        }
    }
    Ok(out)
}

pub fn exact_match(model: &SpanModel, examples: &[QaExample], cfg: &FinetuneConfig) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Data("no examples to evaluate".into()));
    }
    let pred = predict_spans(model, examples, cfg)?;
    let hits = pred
        .iter()
        .zip(examples)
        .filter(|(p, e)| **p == (e.start, e.end))
        .count();
    Ok(hits as f64 / examples.len() as f64)
}

/// Token-overlap F1 between predicted and gold spans, averaged.
pub fn span_f1(model: &SpanModel, examples: &[QaExample], cfg: &FinetuneConfig) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Data("no examples to evaluate".into()));
    }
    let pred = predict_spans(model, examples, cfg)?;
    let mut total = 0.0;
    for (&(ps, pe), e) in pred.iter().zip(examples) {
        let overlap = (pe.min(e.end) + 1).saturating_sub(ps.max(e.start));
        if overlap > 0 {
            let p = overlap as f64 / (pe - ps + 1) as f64;
            let r = overlap as f64 / (e.end - e.start + 1) as f64;
            total += 2.0 * p * r / (p + r);
        }
    }
    Ok(total / examples.len() as f64)
}

/// Fraction of source sentences whose translation is the nearest target by
/// cosine of sentence embeddings. Ties resolve to the lower index.
pub fn evaluate_retrieval(encoder: &EncoderParams, pairs: &[ParallelPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Data("retrieval needs at least one pair".into()));
    }
    let src: Vec<&[u32]> = pairs.iter().map(|p| &p.src[..]).collect();
    let tgt: Vec<&[u32]> = pairs.iter().map(|p| &p.tgt[..]).collect();
    let zs = encoder.embed(&src)?;
    let zt = encoder.embed(&tgt)?;
    let mut hits = 0;
    for (i, a) in zs.iter().enumerate() {
        let sims: Vec<f32> = zt.iter().map(|b| cosine(a, b)).collect();
        if argmax(&sims) == i {
            hits += 1;
        }
    }
    Ok(hits as f64 / pairs.len() as f64)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub task: String,
    /// (language, metric name, value in [0, 1]).
    pub rows: Vec<(String, String, f64)>,
}

impl EvalReport {
    pub fn new(task: impl Into<String>) -> Self {
        Self {
            task: task.into(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, language: impl Into<String>, metric: impl Into<String>, value: f64) {
        self.rows.push((language.into(), metric.into(), value));
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("task,language,metric,value\n");
        for (l, m, v) in &self.rows {
            s.push_str(&format!("{},{l},{m},{v}\n", self.task));
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// `example_id\tprediction` lines.
pub fn write_predictions<D: std::fmt::Display>(path: &Path, rows: &[(usize, D)]) -> Result<()> {
    let mut s = String::from("example_id\tprediction\n");
    for (id, p) in rows {
        s.push_str(&format!("{id}\t{p}\n"));
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}
