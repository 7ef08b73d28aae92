//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion
//! and exits non-zero when any fails. `ACCEPTANCE_ONLY=2,5` runs a subset.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::collections::VecDeque;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ppa_core::corpus::{
    code_switch_augment, load_labeled, make_labeled_batches, BilingualExample, ParallelPair,
};
use ppa_core::encoder::{EncoderConfig, EncoderParams};
use ppa_core::finetune::{finetune_classifier, FinetuneConfig, CLASSIFICATION_CLASSES};
use ppa_core::kv::KvMap;
use ppa_core::moco::{info_nce, momentum_update, MoCoState, NegativeQueue};
use ppa_core::numerics::{ParamStore, Tensor};
use ppa_core::seed::{derive_seed, Stream};
use ppa_core::tlm::{apply_masking_with, is_maskable, TlmInput};
use ppa_core::tokenizer::{TokenSequence, Vocab, MASK, NUM_RESERVED};
use ppa_core::trainer::{TrainConfig, Trainer};

use common::gradsuite::{head_cases, op_cases, run_case, SEEDS, TOLERANCE};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn ppa(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_ppa")).args(args).output().unwrap();
    assert!(
        out.status.success(),
        "ppa {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_csv(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn grad_suite() -> Outcome {
    let start = Instant::now();
    let mut failures = Vec::new();
    let mut worst = 0.0f64;
    let cases: Vec<_> = op_cases().into_iter().chain(head_cases()).collect();
    for (name, case) in &cases {
        let (err, seed, ok) = run_case(*case);
        worst = worst.max(err);
        if !ok {
            failures.push(format!("{name} ({err:.2e} at seed {seed})"));
        }
    }
    let took = start.elapsed();
    let pass = failures.is_empty() && took < Duration::from_secs(120);
    outcome(
        pass,
        format!(
            "{} cases x {SEEDS} seeds, worst relative error {worst:.2e} (limit {TOLERANCE:.0e}), {:.1}s{}",
            cases.len(),
            took.as_secs_f64(),
            if failures.is_empty() { String::new() } else { format!("; failed: {}", failures.join(", ")) }
        ),
    )
}

fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(n * d);
    for _ in 0..n {
        let v: Vec<f32> = (0..d).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        out.extend(v.iter().map(|x| x / norm));
    }
    out
}

/// Softmax over `[pos, queue...]` written out directly, then the negative
/// log-probability of the positive.
fn brute_force_info_nce(q: &[f32], pos: &[f32], queue: &[f32], tau: f64) -> f64 {
    let d = q.len();
    let score = |k: &[f32]| (0..d).map(|i| q[i] as f64 * k[i] as f64).sum::<f64>() / tau;
    let mut exps = vec![score(pos).exp()];
    for k in queue.chunks(d) {
        exps.push(score(k).exp());
    }
    let total: f64 = exps.iter().sum();
    -(exps[0] / total).ln()
}

fn info_nce_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let d = rng.gen_range(2..=32);
        let k = rng.gen_range(1..=128);
        let tau = rng.gen_range(0.05..=1.0);
        let q = unit_rows(&mut rng, 1, d);
        let pos = unit_rows(&mut rng, 1, d);
        let queue = unit_rows(&mut rng, k, d);
        let got = info_nce(&q, &pos, &queue, tau as f32).unwrap();
        let want = brute_force_info_nce(&q, &pos, &queue, tau as f32 as f64);
        worst = worst.max((got - want).abs());
    }
    outcome(worst <= 1e-6, format!("1000 instances, max |difference| {worst:.2e}"))
}

fn random_store(rng: &mut ChaCha8Rng) -> ParamStore {
    let mut p = ParamStore::new();
    for (i, shape) in [vec![7, 5], vec![11], vec![3, 4]].into_iter().enumerate() {
        p.push(format!("p{i}"), Tensor::uniform(&shape, -2.0, 2.0, rng));
    }
    p
}

fn ema() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    let mut edges_exact = true;
    for _ in 0..200 {
        let query = random_store(&mut rng);
        let key0 = random_store(&mut rng);
        let m: f32 = rng.gen();
        let mut key = key0.clone();
        momentum_update(&mut key, &query, m).unwrap();
        // Relative error per tensor: element-wise ratios blow up where the
        // two terms cancel, which says nothing about the update itself.
        for ((_, k), ((_, k0), (_, q))) in key.iter().zip(key0.iter().zip(query.iter())) {
            let (mut diff, mut norm) = (0.0f64, 0.0f64);
            for ((&got, &a), &b) in k.data().iter().zip(k0.data()).zip(q.data()) {
                let want = m as f64 * a as f64 + (1.0 - m as f64) * b as f64;
                diff += (got as f64 - want).powi(2);
                norm += want * want;
            }
            worst = worst.max((diff / norm).sqrt());
        }
        let mut zero = key0.clone();
        momentum_update(&mut zero, &query, 0.0).unwrap();
        let mut one = key0.clone();
        momentum_update(&mut one, &query, 1.0).unwrap();
        edges_exact &= zero == query && one == key0;
    }
    outcome(
        worst <= 1e-6 && edges_exact,
        format!("max relative error {worst:.2e}; m=0 copies the query, m=1 keeps the key: {edges_exact}"),
    )
}

fn queue_fifo() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (k, d) = (37, 3);
    let mut queue = NegativeQueue::random(k, d, 9).unwrap();
    let mut reference: VecDeque<Vec<f32>> = queue.ordered().map(<[f32]>::to_vec).collect();
    for step in 0..10_000 {
        let b = rng.gen_range(0..=2 * k);
        let keys: Vec<f32> = (0..b * d).map(|_| rng.gen()).collect();
        queue.enqueue(&keys).unwrap();
        for row in keys.chunks(d) {
            reference.pop_front();
            reference.push_back(row.to_vec());
        }
        if !queue.ordered().eq(reference.iter().map(Vec::as_slice)) {
            return outcome(false, format!("diverged from the reference ring at step {step}"));
        }
    }
    outcome(true, format!("10000 steps, batches of 0..={} keys, K={k}", 2 * k))
}

fn masking_stats() -> Outcome {
    let vocab = 30_000u32;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut maskable, mut selected, mut masked, mut random, mut kept) = (0usize, 0, 0, 0, 0);
    while maskable < 120_000 {
        let len = rng.gen_range(10..60);
        let ids: Vec<u32> = (0..len).map(|_| rng.gen_range(NUM_RESERVED..vocab)).collect();
        let input = TlmInput {
            segments: vec![0; ids.len()],
            ids,
        };
        let out = apply_masking_with(&input, vocab as usize, &mut rng);
        maskable += input.ids.iter().filter(|&&id| is_maskable(id)).count();
        for &p in &out.mask_positions {
            selected += 1;
            let now = out.input_ids[p];
            if now == MASK {
                masked += 1;
            } else if now != input.ids[p] {
                random += 1;
            } else {
                // Includes random draws that hit the original token, about
                // 1 in 30000 of the random branch.
                kept += 1;
            }
        }
    }
    let rate = selected as f64 / maskable as f64;
    let split = [masked, random, kept].map(|c| c as f64 / selected as f64);
    let pass = (rate - 0.15).abs() <= 0.01
        && (split[0] - 0.8).abs() <= 0.02
        && (split[1] - 0.1).abs() <= 0.02
        && (split[2] - 0.1).abs() <= 0.02;
    outcome(
        pass,
        format!(
            "{maskable} tokens, selected {rate:.4}; mask/random/keep {:.4}/{:.4}/{:.4}",
            split[0], split[1], split[2]
        ),
    )
}

fn toy_alignment() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let start = Instant::now();
    for cmd in ["gen-data", "preprocess", "train-align"] {
        ppa(&[cmd, "--out", s(out)]);
    }
    let took = start.elapsed();
    let stats = KvMap::load(&out.join("preprocess.stats")).unwrap();
    let train_pairs: usize = stats.get("train_pairs").unwrap().unwrap();
    let held: usize = stats.get("heldout_pairs").unwrap().unwrap();
    let retrieval: Vec<f64> = read_csv(&out.join("retrieval.csv"))
        .iter()
        .map(|r| r[1].parse().unwrap())
        .collect();
    let (base, last) = (retrieval[0], *retrieval.last().unwrap());
    let pass = last >= 0.80 && base <= 0.15 && held == 200 && took <= Duration::from_secs(15 * 60);
    outcome(
        pass,
        format!(
            "{train_pairs} training pairs, {held} held out; retrieval by epoch {retrieval:?} \
             (need >= 0.80 after, <= 0.15 before); {:.0}s end to end",
            took.as_secs_f64()
        ),
    )
}

/// Shared configuration of the multi-seed runs behind criteria 7 and 8.
/// Default toy settings; the classifier sees source-language data only.
const SEED_RUN_CONFIG: &str = "code_switch=false\n";
const RUN_SEEDS: [u64; 3] = [1, 2, 3];

struct AblationRow {
    retrieval: f64,
    accuracy: f64,
}

/// One `ppa ablate` per seed, run once and shared.
fn seed_runs() -> &'static Vec<std::collections::BTreeMap<String, AblationRow>> {
    static RUNS: OnceLock<Vec<std::collections::BTreeMap<String, AblationRow>>> = OnceLock::new();
    RUNS.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("seeds.cfg");
        fs::write(&cfg, SEED_RUN_CONFIG).unwrap();
        RUN_SEEDS
            .iter()
            .map(|seed| {
                let out = dir.path().join(format!("seed{seed}"));
                ppa(&["ablate", "--config", s(&cfg), "--out", s(&out), "--seed", &seed.to_string()]);
                read_csv(&out.join("ablation.csv"))
                    .into_iter()
                    .map(|r| {
                        (
                            r[0].clone(),
                            AblationRow {
                                retrieval: r[5].parse().unwrap(),
                                accuracy: r[6].parse().unwrap(),
                            },
                        )
                    })
                    .collect()
            })
            .collect()
    })
}

fn per_seed(variant: &str, f: impl Fn(&AblationRow) -> f64) -> Vec<f64> {
    seed_runs().iter().map(|run| f(&run[variant])).collect()
}

fn zero_shot_direction() -> Outcome {
    let aligned = per_seed("full", |r| r.accuracy);
    let warm = per_seed("warm-up only", |r| r.accuracy);
    let gain = 100.0 * (mean(&aligned) - mean(&warm));
    outcome(
        gain >= 10.0,
        format!(
            "target-language accuracy aligned {aligned:.3?} vs warm-up only {warm:.3?}; mean gain {gain:.1} points (need >= 10)"
        ),
    )
}

fn ablation_direction() -> Outcome {
    let full = per_seed("full", |r| r.retrieval);
    let no_tlm = per_seed("-TLM", |r| r.retrieval);
    let no_moco = per_seed("-MoCo", |r| r.retrieval);
    let mlm = per_seed("repl TLM w/ MLM", |r| r.retrieval);
    let (f, t, m) = (mean(&full), mean(&no_tlm), mean(&no_moco));
    outcome(
        f >= t && f >= m && mlm.iter().all(|v| v.is_finite()),
        format!("mean retrieval full {f:.3}, -TLM {t:.3}, -MoCo {m:.3}, repl TLM w/ MLM {:.3}", mean(&mlm)),
    )
}

const SMALL_PIPELINE: &str = "seed=11
data.pairs=500
data.heldout=40
data.task_train=90
data.task_test=45
train.batch_size=16
train.queue_size=32
train.epochs=1
train.mlm_warmup_steps=10
finetune.epochs=2
";

fn small_pipeline(out: &Path) -> PathBuf {
    fs::create_dir_all(out).unwrap();
    let cfg = out.join("small.cfg");
    fs::write(&cfg, SMALL_PIPELINE).unwrap();
    for cmd in ["gen-data", "preprocess", "train-align"] {
        ppa(&[cmd, "--config", s(&cfg), "--out", s(out)]);
    }
    cfg
}

fn code_switching() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let cfg = small_pipeline(out);
    let vocab = Vocab::load(&out.join("vocab.txt")).unwrap();
    let load = |f: &str| load_labeled(&out.join(f), &vocab, CLASSIFICATION_CLASSES).unwrap();
    let (src, tgt) = (load("task.train.tsv"), load("task.train.tgt.tsv"));
    let bilingual: Vec<BilingualExample> = src
        .iter()
        .zip(&tgt)
        .enumerate()
        .map(|(id, (s, t))| BilingualExample {
            id,
            source: s.clone(),
            translation: Some(t.clone()),
        })
        .collect();
    let aug = code_switch_augment(&bilingual).unwrap();
    let doubled = aug.len() == 2 * src.len();
    let mixed = aug.iter().all(|e| {
        let (s, t) = (&src[e.cobatch.unwrap()], &tgt[e.cobatch.unwrap()]);
        let one = e.text_a == s.text_a && e.text_b == t.text_b;
        let other = e.text_a == t.text_a && e.text_b == s.text_b;
        (one || other) && !(e.text_a == t.text_a && e.text_b == t.text_b)
    });
    let batches = make_labeled_batches(&aug, 32, 7).unwrap();
    let mut home = vec![usize::MAX; src.len()];
    let mut together = true;
    for (b, batch) in batches.iter().enumerate() {
        for &i in batch {
            let id = aug[i].cobatch.unwrap();
            together &= home[id] == usize::MAX || home[id] == b;
            home[id] = b;
        }
    }

    // `--no-cs` against a direct finetune on the unaugmented examples.
    ppa(&["finetune", "--config", s(&cfg), "--out", s(out), "--no-cs"]);
    let encoder = EncoderParams::load(&out.join("encoder")).unwrap();
    let ft = FinetuneConfig {
        seed: 11,
        epochs: 2,
        ..FinetuneConfig::toy()
    };
    let (_, losses) = finetune_classifier(&encoder, &src, CLASSIFICATION_CLASSES, &ft).unwrap();
    let direct: Vec<String> = losses.iter().map(f64::to_string).collect();
    let cli: Vec<String> = read_csv(&out.join("finetune.csv")).into_iter().map(|r| r[1].clone()).collect();
    let identical = direct == cli;

    ppa(&["finetune", "--config", s(&cfg), "--out", s(out)]);
    let with_cs = read_csv(&out.join("finetune.csv")).len();
    let expected: usize = (0..ft.epochs as u64)
        .map(|e| make_labeled_batches(&aug, ft.batch_size, derive_seed(11, Stream::Finetune, e)).unwrap().len())
        .sum();
    let examples: usize = (0..ft.epochs as u64)
        .flat_map(|e| make_labeled_batches(&aug, ft.batch_size, derive_seed(11, Stream::Finetune, e)).unwrap())
        .map(|b| b.len())
        .sum();
    let cs_steps = with_cs == expected && examples == ft.epochs * 2 * src.len();

    outcome(
        doubled && mixed && together && identical && cs_steps,
        format!(
            "{} -> {} examples; one side from each language: {mixed}; variants share a batch: {together}; \
             -CS matches the unaugmented run bit for bit: {identical} ({} steps); code-switched run steps: {with_cs}",
            src.len(),
            aug.len(),
            cli.len()
        ),
    )
}

fn resume_matches() -> bool {
    let cfg = TrainConfig {
        batch_size: 8,
        max_seq_len: 40,
        queue_size: 16,
        epochs: 3,
        mlm_warmup_steps: 0,
        seed: 21,
        ..TrainConfig::toy()
    };
    let enc = EncoderConfig {
        num_layers: 1,
        hidden: 16,
        ff_size: 32,
        heads: 2,
        vocab_size: 40,
        max_positions: 40,
        proj_dim: 8,
        mean_pooling: true,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut side = || TokenSequence((0..rng.gen_range(10..=14)).map(|_| rng.gen_range(NUM_RESERVED..40)).collect());
    let pairs: Vec<ParallelPair> = (0..32)
        .map(|pair_id| ParallelPair {
            src: side(),
            tgt: side(),
            pair_id,
        })
        .collect();
    let fresh = || {
        let state = MoCoState::init(&enc, cfg.queue_size, cfg.momentum, cfg.temperature, cfg.batch_size, cfg.seed)
            .unwrap();
        Trainer::new(state, cfg.clone(), pairs.len()).unwrap()
    };
    let total = 3 * fresh().steps_per_epoch();
    let mut straight = fresh();
    let a = straight.run_until(&pairs, total, |_| {}).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let mut first = fresh();
    let mut b = first.run_until(&pairs, total / 2 + 1, |_| {}).unwrap();
    first.save_checkpoint(dir.path()).unwrap();
    drop(first);
    let mut second = Trainer::restore(dir.path()).unwrap();
    b.extend(second.run_until(&pairs, total, |_| {}).unwrap());
    a == b && straight.state.query == second.state.query && straight.state.queue == second.state.queue
}

fn reproducibility() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("first");
    small_pipeline(&first);
    let again = dir.path().join("again");
    for cmd in ["gen-data", "preprocess", "train-align"] {
        let manifest = first.join(format!("{cmd}.manifest"));
        ppa(&[cmd, "--config", s(&manifest), "--out", s(&again)]);
    }
    let same = |f: &str| fs::read(first.join(f)).unwrap() == fs::read(again.join(f)).unwrap();
    let metrics = same("metrics.csv");
    let retrieval = same("retrieval.csv");
    let resume = resume_matches();
    outcome(
        metrics && retrieval && resume,
        format!(
            "rerun from manifests: metrics.csv identical {metrics}, retrieval.csv identical {retrieval}; \
             checkpoint resume matches uninterrupted training: {resume}"
        ),
    )
}

fn parameter_count() -> Outcome {
    let cfg = EncoderConfig::mbert();
    let n = cfg.backbone_param_count();
    let from_shapes: usize = cfg
        .param_shapes()
        .iter()
        .filter(|(name, _)| !name.starts_with("proj.") && !name.starts_with("mlm."))
        .map(|(_, shape)| shape.iter().product::<usize>())
        .sum();
    let rel = (n as f64 - 172e6).abs() / 172e6;
    outcome(
        rel <= 0.02 && n == from_shapes,
        format!(
            "{:.1}M parameters ({:+.2}% from 172M); shape table agrees: {}",
            n as f64 / 1e6,
            100.0 * (n as f64 / 172e6 - 1.0),
            n == from_shapes
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("gradient suite", grad_suite),
        ("InfoNCE oracle", info_nce_oracle),
        ("EMA correctness", ema),
        ("queue FIFO", queue_fifo),
        ("masking statistics", masking_stats),
        ("toy alignment experiment", toy_alignment),
        ("zero-shot transfer direction", zero_shot_direction),
        ("ablation direction", ablation_direction),
        ("code-switching mechanics", code_switching),
        ("reproducibility", reproducibility),
        ("parameter accounting", parameter_count),
    ];
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let start = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        failed += usize::from(!result.pass);
        println!(
            "{} {n:>2}. {name}: {} [{:.1}s]",
            if result.pass { "PASS" } else { "FAIL" },
            result.detail,
            start.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
