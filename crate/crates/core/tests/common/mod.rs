//! Straight-loop `f64` re-implementation of the encoder and both loss heads,
//! used as the forward model in finite-difference checks.

#![allow(dead_code)]

pub mod gradsuite;

use ppa_core::encoder::{EncoderConfig, EncoderParams, PackedBatch};
use ppa_core::numerics::reference::Mat;
use ppa_core::numerics::Tensor;
use ppa_core::tlm::MaskedSequence;

pub fn tiny_config(vocab: usize) -> EncoderConfig {
    EncoderConfig {
        num_layers: 2,
        hidden: 8,
        ff_size: 12,
        heads: 2,
        vocab_size: vocab,
        max_positions: 12,
        proj_dim: 4,
        mean_pooling: false,
    }
}

/// Encoder with weights large enough that every path carries signal.
pub fn lively_encoder(cfg: &EncoderConfig, seed: u64) -> EncoderParams {
    let mut e = EncoderParams::init(cfg, seed).unwrap();
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed ^ 0xabc);
    for t in e.params.tensors_mut() {
        let fresh = Tensor::uniform(t.shape(), -0.5, 0.5, &mut rng);
        for (w, r) in t.data_mut().iter_mut().zip(fresh.data()) {
            *w += r;
        }
    }
    e
}

pub fn param_tensors(e: &EncoderParams) -> Vec<Tensor> {
    e.params.iter().map(|(_, t)| t.clone()).collect()
}

/// Named view of flat parameter vectors in `param_shapes` order.
pub struct RefParams<'a> {
    cfg: &'a EncoderConfig,
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    data: &'a [Vec<f64>],
}

impl<'a> RefParams<'a> {
    pub fn new(cfg: &'a EncoderConfig, data: &'a [Vec<f64>]) -> Self {
        let (names, shapes) = cfg.param_shapes().into_iter().unzip();
        Self {
            cfg,
            names,
            shapes,
            data,
        }
    }

    fn idx(&self, name: &str) -> usize {
        self.names.iter().position(|n| n == name).unwrap()
    }

    pub fn vec(&self, name: &str) -> &[f64] {
        &self.data[self.idx(name)]
    }

    pub fn mat(&self, name: &str) -> Mat {
        let i = self.idx(name);
        let s = &self.shapes[i];
        Mat::new(s[0], s[1], self.data[i].clone())
    }
}

pub fn ref_hidden(p: &RefParams, batch: &PackedBatch) -> Mat {
    let c = p.cfg;
    let tok = p.mat("emb.token").gather_rows(&batch.ids);
    let pos = p.mat("emb.position").gather_rows(&batch.positions);
    let seg = p.mat("emb.segment").gather_rows(&batch.segments);
    let mut x = tok
        .add(&pos)
        .add(&seg)
        .layer_norm(p.vec("emb.ln.gain"), p.vec("emb.ln.bias"), 1e-12);
    let spans: Vec<(usize, usize)> = batch.spans.iter().map(|s| (s.start, s.len)).collect();
    for l in 0..c.num_layers {
        let lin = |x: &Mat, w: &str| {
            x.matmul_bt(&p.mat(&format!("layer{l}.{w}.weight")))
                .add_row(p.vec(&format!("layer{l}.{w}.bias")))
        };
        let a = Mat::attention(
            &lin(&x, "attn.q"),
            &lin(&x, "attn.k"),
            &lin(&x, "attn.v"),
            &spans,
            c.heads,
        );
        x = x.add(&lin(&a, "attn.o")).layer_norm(
            p.vec(&format!("layer{l}.attn.ln.gain")),
            p.vec(&format!("layer{l}.attn.ln.bias")),
            1e-12,
        );
        let h = lin(&x, "ffn.in").gelu();
        x = x.add(&lin(&h, "ffn.out")).layer_norm(
            p.vec(&format!("layer{l}.ffn.ln.gain")),
            p.vec(&format!("layer{l}.ffn.ln.bias")),
            1e-12,
        );
    }
    x
}

pub fn ref_pool(p: &RefParams, hidden: &Mat, batch: &PackedBatch) -> Mat {
    if p.cfg.mean_pooling {
        let mut out = Mat::zeros(batch.spans.len(), hidden.cols);
        for (i, s) in batch.spans.iter().enumerate() {
            for r in s.start..s.start + s.len {
                for c in 0..hidden.cols {
                    out.data[i * hidden.cols + c] += hidden.at(r, c) / s.len as f64;
                }
            }
        }
        out
    } else {
        hidden.gather_rows(&batch.cls_rows())
    }
}

pub fn ref_project(p: &RefParams, h: &Mat) -> Mat {
    h.l2_normalize_rows()
        .matmul_bt(&p.mat("proj.w1"))
        .relu()
        .matmul_bt(&p.mat("proj.w2"))
        .l2_normalize_rows()
}

/// Mean InfoNCE with the positive at logit 0.
pub fn ref_info_nce(z_q: &Mat, z_k: &Mat, queue: &Mat, tau: f64) -> f64 {
    let pos = Mat::new(
        z_q.rows,
        1,
        (0..z_q.rows)
            .map(|r| z_q.row(r).iter().zip(z_k.row(r)).map(|(a, b)| a * b).sum())
            .collect(),
    );
    let logits = pos.concat_cols(&z_q.matmul_bt(queue)).scale(1.0 / tau);
    logits.cross_entropy(&vec![0; z_q.rows])
}

pub fn ref_tlm(p: &RefParams, seqs: &[MaskedSequence]) -> f64 {
    let mut batch = PackedBatch::new();
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for s in seqs {
        let off = batch.num_tokens();
        for &m in &s.mask_positions {
            rows.push(off + m);
            targets.push(s.label_ids[m].unwrap() as usize);
        }
        batch
            .push(&s.input_ids, Some(&s.segment_ids), p.cfg.max_positions)
            .unwrap();
    }
    let hidden = ref_hidden(p, &batch);
    hidden
        .gather_rows(&rows)
        .matmul_bt(&p.mat("emb.token"))
        .add_row(p.vec("mlm.bias"))
        .cross_entropy(&targets)
}

pub fn to_mat(t: &Tensor) -> Mat {
    Mat::from_f32(t.rows(), t.cols(), t.data())
}
