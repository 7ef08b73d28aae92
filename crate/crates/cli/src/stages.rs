use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ppa_core::corpus::{
    code_switch_augment, encode_pairs, generate_cipher_corpus, load_labeled, load_parallel, read_parallel_text,
    BilingualExample, CipherConfig, LabeledPairExample, ParallelPair,
};
use ppa_core::encoder::EncoderParams;
use ppa_core::finetune::{
    evaluate_retrieval, evaluate_zero_shot, finetune_classifier, generate_classification_task, predict_classes,
    write_predictions, ClassifierHead, ClassifierModel, EvalReport, TaskText, CLASSIFICATION_CLASSES,
};
use ppa_core::kv;
use ppa_core::moco::MoCoState;
use ppa_core::numerics::{read_tensors, write_tensors, ParamStore};
use ppa_core::seed::{derive_seed, Stream};
use ppa_core::tokenizer::{TokenSequence, Vocab, UNK};
use ppa_core::trainer::{mlm_warmup, MetricsWriter, Trainer};

use crate::config::RunConfig;
use crate::manifest::{InputKind, Run};

pub const SRC_LANG: &str = "A";
pub const TGT_LANG: &str = "B";

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn task_tsv(items: &[TaskText], target: bool) -> String {
    let mut s = String::new();
    for t in items {
        let (a, b, lang) = if target {
            (&t.a_tgt, &t.b_tgt, TGT_LANG)
        } else {
            (&t.a_src, &t.b_src, SRC_LANG)
        };
        s.push_str(&format!("{a}\t{b}\t{}\t{lang}\n", t.label));
    }
    s
}

/// Parallel corpus plus the classification task in both languages.
pub fn gen_data(run: &mut Run) -> Result<()> {
    run.write_manifest()?;
    let c = &run.config;
    let corpus = generate_cipher_corpus(&CipherConfig::new(
        c.data.pairs + c.data.heldout,
        c.data.vocab_words,
        derive_seed(c.seed, Stream::Data, 0),
    ))?;
    corpus.write(&run.path("corpus"))?;
    let train = generate_classification_task(&corpus.language, c.data.task_train, derive_seed(c.seed, Stream::Data, 1));
    let test = generate_classification_task(&corpus.language, c.data.task_test, derive_seed(c.seed, Stream::Data, 2));
    write_text(&run.path("task.train.tsv"), &task_tsv(&train, false))?;
    write_text(&run.path("task.train.tgt.tsv"), &task_tsv(&train, true))?;
    write_text(&run.path("task.test.tsv"), &task_tsv(&test, true))?;
    write_text(&run.path("task.test.src.tsv"), &task_tsv(&test, false))?;
    println!(
        "generated {} parallel pairs, {} + {} task examples in {}",
        corpus.pairs.len(),
        train.len(),
        test.len(),
        run.out.display()
    );
    Ok(())
}

fn pairs_tsv(texts: &[(String, String)], pairs: &[ParallelPair]) -> String {
    let mut s = String::new();
    for p in pairs {
        let (a, b) = &texts[p.pair_id];
        s.push_str(&format!("{a}\t{b}\n"));
    }
    s
}

/// Vocabulary, length filtering, and the train / held-out split.
pub fn preprocess(run: &mut Run) -> Result<()> {
    let corpus = run.input("corpus", "corpus.parallel.tsv", InputKind::File)?;
    run.write_manifest()?;
    let c = &run.config;
    let texts = read_parallel_text(&corpus)?;
    let vocab = Vocab::build(
        texts.iter().flat_map(|(a, b)| [a.as_str(), b.as_str()]),
        c.data.vocab_size,
        false,
    )?;
    vocab.save(&run.path("vocab.txt"))?;
    let (pairs, stats) = encode_pairs(&texts, &vocab, c.train.max_seq_len);
    if pairs.len() <= c.data.heldout {
        bail!(
            "only {} pairs survive filtering; {} are needed for the held-out set alone",
            pairs.len(),
            c.data.heldout
        );
    }
    let (train, held) = pairs.split_at(pairs.len() - c.data.heldout);
    write_text(&run.path("train.tsv"), &pairs_tsv(&texts, train))?;
    write_text(&run.path("heldout.tsv"), &pairs_tsv(&texts, held))?;

    let (mut unk, mut total) = (0usize, 0usize);
    for p in &pairs {
        for &id in p.src.iter().chain(p.tgt.iter()) {
            total += 1;
            unk += usize::from(id == UNK);
        }
    }
    let unk_rate = unk as f64 / total.max(1) as f64;
    write_text(
        &run.path("preprocess.stats"),
        &kv::render([
            ("vocab_size", vocab.len().to_string()),
            ("kept", stats.kept.to_string()),
            ("dropped_short", stats.dropped_short.to_string()),
            ("dropped_long", stats.dropped_long.to_string()),
            ("train_pairs", train.len().to_string()),
            ("heldout_pairs", held.len().to_string()),
            ("unk_rate", unk_rate.to_string()),
        ]),
    )?;
    println!(
        "vocabulary {} tokens; kept {} pairs (short {}, long {}); unk rate {:.4}",
        vocab.len(),
        stats.kept,
        stats.dropped_short,
        stats.dropped_long,
        unk_rate
    );
    Ok(())
}

fn csv_rows<T: std::fmt::Display>(header: &str, rows: impl IntoIterator<Item = (usize, T)>) -> String {
    let mut s = format!("{header}\n");
    for (i, v) in rows {
        s.push_str(&format!("{i},{v}\n"));
    }
    s
}

/// Warm-up followed by alignment training. With an `init` input the
/// warm-up is skipped and that encoder is the starting point.
pub fn train_align(run: &mut Run) -> Result<()> {
    let vocab_p = run.input("vocab", "vocab.txt", InputKind::File)?;
    let train_p = run.input("train", "train.tsv", InputKind::File)?;
    let held_p = run.input("heldout", "heldout.tsv", InputKind::File)?;
    let init_p = match run.config.inputs.contains_key("init") {
        true => Some(run.input("init", "encoder-warmup", InputKind::EncoderStem)?),
        false => None,
    };
    run.write_manifest()?;
    let c = run.config.clone();
    let vocab = Vocab::load(&vocab_p)?;
    let (pairs, _) = load_parallel(&train_p, &vocab, c.train.max_seq_len)?;
    let (held, _) = load_parallel(&held_p, &vocab, c.train.max_seq_len)?;
    if pairs.is_empty() || held.is_empty() {
        bail!("training and held-out sets must both be non-empty after filtering");
    }

    let encoder = match init_p {
        Some(p) => {
            let e = EncoderParams::load(&p)?;
            if e.config.vocab_size != vocab.len() {
                bail!(
                    "initial encoder has {} token embeddings, vocabulary has {}",
                    e.config.vocab_size,
                    vocab.len()
                );
            }
            e
        }
        None => {
            let mut cfg = c.encoder.clone();
            cfg.vocab_size = vocab.len();
            let mut e = EncoderParams::init(&cfg, derive_seed(c.seed, Stream::Init, 0))?;
            let texts: Vec<TokenSequence> = pairs.iter().flat_map(|p| [p.src.clone(), p.tgt.clone()]).collect();
            let losses = mlm_warmup(&mut e, &texts, &c.train)?;
            write_text(&run.path("warmup.csv"), &csv_rows("step,loss", losses.into_iter().enumerate()))?;
            e.save(&run.path("encoder-warmup"))?;
            e
        }
    };
    let baseline = evaluate_retrieval(&encoder, &held)?;
    println!("epoch 0 (before alignment): retrieval {baseline:.4}");

    let t = &c.train;
    let state = MoCoState::from_encoder(encoder, t.queue_size, t.momentum, t.temperature, t.batch_size, c.seed)?;
    let mut trainer = Trainer::new(state, t.clone(), pairs.len())?;
    let writer = MetricsWriter::create(&run.path("metrics.csv"))?;
    let mut retrieval = vec![(0, baseline)];
    for epoch in 1..=t.epochs {
        let steps = trainer.run_until(&pairs, epoch * trainer.steps_per_epoch(), |m| writer.send(m))?;
        let acc = evaluate_retrieval(&trainer.state.query, &held)?;
        let last = steps.last().map_or(f64::NAN, |m| m.l_total);
        println!("epoch {epoch}: loss {last:.4}, retrieval {acc:.4}");
        retrieval.push((epoch, acc));
    }
    writer.finish()?;
    trainer.save_checkpoint(&run.path("checkpoint"))?;
    trainer.state.query.save(&run.path("encoder"))?;
    write_text(&run.path("retrieval.csv"), &csv_rows("epoch,retrieval", retrieval))?;
    Ok(())
}

fn load_classifier(encoder: &Path, head: &Path) -> Result<ClassifierModel> {
    let encoder = EncoderParams::load(encoder)?;
    let mut params = ParamStore::new();
    for (name, t) in read_tensors(head)? {
        params.push(name, t);
    }
    let fresh = ClassifierHead::new(encoder.config.hidden, CLASSIFICATION_CLASSES, 0)?;
    fresh
        .params
        .check_same_layout(&params)
        .context("classifier head does not match the encoder")?;
    Ok(ClassifierModel {
        encoder,
        head: ClassifierHead {
            params,
            num_classes: CLASSIFICATION_CLASSES,
        },
    })
}

/// The classification training set: the source-language examples, or,
/// when translations are supplied, the two code-switched variants of each
/// example in their place.
pub fn classification_train_set(
    base: &[LabeledPairExample],
    translations: Option<&[LabeledPairExample]>,
) -> Result<Vec<LabeledPairExample>> {
    let Some(tr) = translations else {
        return Ok(base.to_vec());
    };
    if tr.len() != base.len() {
        bail!("{} training examples but {} translations", base.len(), tr.len());
    }
    let bilingual: Vec<BilingualExample> = base
        .iter()
        .zip(tr)
        .enumerate()
        .map(|(id, (s, t))| BilingualExample {
            id,
            source: s.clone(),
            translation: Some(t.clone()),
        })
        .collect();
    Ok(code_switch_augment(&bilingual)?)
}

/// Classifier finetuning on language A, evaluated on both languages.
pub fn finetune(run: &mut Run) -> Result<()> {
    let vocab_p = run.input("vocab", "vocab.txt", InputKind::File)?;
    let enc_p = run.input("encoder", "encoder", InputKind::EncoderStem)?;
    let train_p = run.input("task_train", "task.train.tsv", InputKind::File)?;
    let tgt_p = match run.config.code_switch {
        true => Some(run.input("task_train_tgt", "task.train.tgt.tsv", InputKind::File)?),
        false => None,
    };
    let test_p = run.input("task_test", "task.test.tsv", InputKind::File)?;
    let test_src_p = run.input("task_test_src", "task.test.src.tsv", InputKind::File)?;
    run.write_manifest()?;
    let c = run.config.clone();

    let vocab = Vocab::load(&vocab_p)?;
    let encoder = EncoderParams::load(&enc_p)?;
    let base = load_labeled(&train_p, &vocab, CLASSIFICATION_CLASSES)?;
    let translations = tgt_p
        .map(|p| load_labeled(&p, &vocab, CLASSIFICATION_CLASSES))
        .transpose()?;
    let train = classification_train_set(&base, translations.as_deref())?;
    let (model, losses) = finetune_classifier(&encoder, &train, CLASSIFICATION_CLASSES, &c.finetune)?;
    write_text(&run.path("finetune.csv"), &csv_rows("step,loss", losses.into_iter().enumerate()))?;
    model.encoder.save(&run.path("classifier-encoder"))?;
    write_tensors(&run.path("classifier-head"), model.head.params.iter())?;

    let test = load_labeled(&test_p, &vocab, CLASSIFICATION_CLASSES)?;
    let test_src = load_labeled(&test_src_p, &vocab, CLASSIFICATION_CLASSES)?;
    let len = c.finetune.max_seq_len;
    let acc_src = evaluate_zero_shot(&model, &test_src, len)?;
    let acc_tgt = evaluate_zero_shot(&model, &test, len)?;
    let preds = predict_classes(&model, &test, len)?;
    write_predictions(&run.path("predictions.tsv"), &preds.into_iter().enumerate().collect::<Vec<_>>())?;
    let mut report = EvalReport::new("classification");
    report.push(SRC_LANG, "accuracy", acc_src);
    report.push(TGT_LANG, "accuracy", acc_tgt);
    report.write(&run.path("finetune.report.csv"))?;
    println!(
        "trained on {} examples ({}); accuracy {SRC_LANG} {acc_src:.4}, {TGT_LANG} {acc_tgt:.4}",
        train.len(),
        if c.code_switch { "with code-switching" } else { "source language only" }
    );
    Ok(())
}

/// Held-out retrieval and/or classifier accuracy on a labeled file.
pub fn eval(run: &mut Run, retrieval: Option<PathBuf>, zero_shot: Option<PathBuf>) -> Result<()> {
    if let Some(p) = retrieval {
        run.config.inputs.insert("retrieval".into(), p);
    }
    if let Some(p) = zero_shot {
        run.config.inputs.insert("zero_shot".into(), p);
    }
    let want_retrieval = run.config.inputs.contains_key("retrieval");
    let want_zero_shot = run.config.inputs.contains_key("zero_shot");
    let vocab_p = run.input("vocab", "vocab.txt", InputKind::File)?;
    let mut jobs = Vec::new();
    if want_retrieval {
        let data = run.input("retrieval", "", InputKind::File)?;
        let enc = run.input("encoder", "encoder", InputKind::EncoderStem)?;
        jobs.push(("retrieval", data, enc, None));
    }
    if want_zero_shot {
        let data = run.input("zero_shot", "", InputKind::File)?;
        let enc = run.input("classifier_encoder", "classifier-encoder", InputKind::EncoderStem)?;
        let head = run.input("classifier_head", "classifier-head", InputKind::TensorStem)?;
        jobs.push(("zero_shot", data, enc, Some(head)));
    }
    run.write_manifest()?;
    let vocab = Vocab::load(&vocab_p)?;
    let mut report = EvalReport::new("eval");
    for (what, data, enc, head) in jobs {
        match head {
            None => {
                let encoder = EncoderParams::load(&enc)?;
                let (pairs, stats) = load_parallel(&data, &vocab, run.config.train.max_seq_len)?;
                if pairs.is_empty() {
                    bail!("{} has no pairs within the length limits", data.display());
                }
                let acc = evaluate_retrieval(&encoder, &pairs)?;
                println!(
                    "retrieval top-1: {acc:.4} over {} pairs ({} filtered out)",
                    pairs.len(),
                    stats.dropped_short + stats.dropped_long
                );
                report.push(what, "top1", acc);
            }
            Some(head) => {
                let model = load_classifier(&enc, &head)?;
                let test = load_labeled(&data, &vocab, CLASSIFICATION_CLASSES)?;
                let acc = evaluate_zero_shot(&model, &test, run.config.finetune.max_seq_len)?;
                println!("zero-shot accuracy: {acc:.4} over {} examples", test.len());
                report.push(what, "accuracy", acc);
            }
        }
    }
    report.write(&run.path("eval.report.csv"))?;
    Ok(())
}

/// Retrieval after `epoch` (0 is before alignment) from `retrieval.csv`.
fn read_retrieval(dir: &Path, epoch: Option<usize>) -> Result<f64> {
    let p = dir.join("retrieval.csv");
    let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
    let rows: Vec<&str> = text.lines().skip(1).collect();
    let row = match epoch {
        Some(e) => rows.get(e),
        None => rows.last(),
    };
    row.and_then(|l| l.split(',').nth(1))
        .and_then(|v| v.parse().ok())
        .with_context(|| format!("malformed {}", p.display()))
}

fn read_target_accuracy(dir: &Path) -> Result<f64> {
    let p = dir.join("finetune.report.csv");
    let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
    text.lines()
        .find_map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f.len() == 4 && f[1] == TGT_LANG).then(|| f[3].parse().ok()).flatten()
        })
        .with_context(|| format!("no {TGT_LANG} accuracy in {}", p.display()))
}

/// One row of the ablation table.
pub struct Variant {
    pub name: &'static str,
    pub dir: &'static str,
    pub use_moco: bool,
    pub use_tlm: bool,
    pub use_mlm: bool,
}

pub const VARIANTS: [Variant; 4] = [
    Variant { name: "full", dir: "full", use_moco: true, use_tlm: true, use_mlm: false },
    Variant { name: "-MoCo", dir: "no-moco", use_moco: false, use_tlm: true, use_mlm: false },
    Variant { name: "-TLM", dir: "no-tlm", use_moco: true, use_tlm: false, use_mlm: false },
    Variant { name: "repl TLM w/ MLM", dir: "mlm", use_moco: true, use_tlm: false, use_mlm: true },
];

/// The full pipeline once per ablation setting, each in its own
/// subdirectory with its own manifests, then one comparison table.
pub fn ablate(run: &mut Run) -> Result<()> {
    run.write_manifest()?;
    let base = run.config.clone();
    let sub = |dir: &Path, command: &'static str, cfg: RunConfig| Run::new(command, dir, cfg);

    let data = run.path("data");
    gen_data(&mut sub(&data, "gen-data", base.clone())?)?;
    preprocess(&mut sub(&data, "preprocess", base.clone())?)?;
    let with_data = |mut cfg: RunConfig| {
        for (name, file) in [
            ("vocab", "vocab.txt"),
            ("train", "train.tsv"),
            ("heldout", "heldout.tsv"),
            ("task_train", "task.train.tsv"),
            ("task_train_tgt", "task.train.tgt.tsv"),
            ("task_test", "task.test.tsv"),
            ("task_test_src", "task.test.src.tsv"),
        ] {
            cfg.inputs.insert(name.into(), data.join(file));
        }
        cfg
    };

    struct Row {
        name: &'static str,
        flags: [bool; 4],
        retrieval: f64,
        accuracy: f64,
    }
    let mut rows = Vec::new();
    let full = run.path(VARIANTS[0].dir);
    for (i, v) in VARIANTS.iter().enumerate() {
        println!("== {} ==", v.name);
        let dir = run.path(v.dir);
        let mut cfg = with_data(base.clone());
        cfg.train.use_moco = v.use_moco;
        cfg.train.use_tlm = v.use_tlm;
        cfg.train.use_mlm = v.use_mlm;
        if i > 0 {
            // Every variant starts from the same warmed-up encoder.
            cfg.inputs.insert("init".into(), full.join("encoder-warmup"));
        }
        train_align(&mut sub(&dir, "train-align", cfg.clone())?)?;
        cfg.inputs.insert("encoder".into(), dir.join("encoder"));
        finetune(&mut sub(&dir, "finetune", cfg)?)?;
        rows.push(Row {
            name: v.name,
            flags: [v.use_moco, v.use_tlm, v.use_mlm, base.code_switch],
            retrieval: read_retrieval(&dir, None)?,
            accuracy: read_target_accuracy(&dir)?,
        });
    }

    let mut extra = vec![("warm-up only", "warmup", full.join("encoder-warmup"), base.code_switch)];
    if base.code_switch {
        extra.push(("-CS", "no-cs", full.join("encoder"), false));
    }
    for (name, sub_dir, encoder, cs) in extra {
        println!("== {name} ==");
        let dir = run.path(sub_dir);
        let mut cfg = with_data(base.clone());
        cfg.code_switch = cs;
        cfg.inputs.insert("encoder".into(), encoder);
        finetune(&mut sub(&dir, "finetune", cfg)?)?;
        let aligned = name == "-CS";
        rows.push(Row {
            name,
            flags: [aligned, aligned, false, cs],
            retrieval: read_retrieval(&full, (!aligned).then_some(0))?,
            accuracy: read_target_accuracy(&dir)?,
        });
    }

    let mut csv = String::from("variant,use_moco,use_tlm,use_mlm,code_switch,retrieval,target_accuracy\n");
    for r in &rows {
        let [moco, tlm, mlm, cs] = r.flags;
        csv.push_str(&format!("{},{moco},{tlm},{mlm},{cs},{},{}\n", r.name, r.retrieval, r.accuracy));
    }
    write_text(&run.path("ablation.csv"), &csv)?;
    println!("{csv}");
    Ok(())
}
