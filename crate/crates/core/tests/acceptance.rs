//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

mod common;

use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use entangler_core::encoder::EncoderOutput;
use entangler_core::heads::{classification_loss, classify_logits, labeling_loss, word_logits};
use entangler_core::pipeline::data::write_conll;
use entangler_core::pipeline::{pretrain_on, train, train_on, RunConfig, Task, TaskData, TaskModel};
use entangler_core::pretrain::{mask_tokens, matching_loss, pretrain_losses, MatchingScale, PretrainHeads};
use entangler_core::tensor::{GradCheckReport, Graph, ParamStore, Tensor};
use entangler_core::tokenize::{build_vocabs, tokenize_pair};
use entangler_core::{
    char_word_labels, pe_indices, ClassificationHead, CoAttentionConfig, CoAttentionStack, EntanglementModel,
    LabelingHead, ModelConfig, PairBatch, PeStrategy, Side, TokenizedPair, Vocab,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(start: Instant, limit: Duration, what: &str) -> Result<(), String> {
    let t = start.elapsed();
    ensure(t < limit, || format!("{what} took {t:.1?}, limit {limit:?}"))
}

// 1 ------------------------------------------------------------------------

fn tiny_config() -> ModelConfig {
    ModelConfig {
        hidden_size: 16,
        num_layers: 1,
        num_heads: 2,
        ffn_size: 32,
        num_coattention: 1,
        pe_strategy: PeStrategy::C,
        dropout: 0.0,
        max_subwords: 16,
        max_chars: 32,
        init_std: 0.3,
    }
}

fn gradient_suite() -> Outcome {
    const SAMPLES: usize = 200;
    const EPS: f64 = 1e-5;
    const TOL: f64 = 1e-4;
    let start = Instant::now();
    let ws = words("abc cab");
    let (sub, chr) = build_vocabs(&[words("abc cab ab ca")], 2).unwrap();
    let pair = tokenize_pair(&ws, &sub, &chr).unwrap();
    let mc = tiny_config();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = ParamStore::new();
    let model = EntanglementModel::new(&mut store, mc, sub.len(), chr.len(), &mut rng).unwrap();
    let lab = LabelingHead::new(&mut store, 16, 3, 0.3, &mut rng).unwrap();
    let cls = ClassificationHead::new(&mut store, 16, 2, 0.3, &mut rng).unwrap();
    let heads = PretrainHeads::new(&mut store, 16, sub.len(), chr.len(), 0.3, &mut rng);
    let batch = PairBatch::new(vec![&pair]);
    let mut mask_rng = ChaCha8Rng::seed_from_u64(5);
    let (sm, cm) = loop {
        let sm = mask_tokens(&batch.subwords, 0.5, &mut mask_rng);
        let cm = mask_tokens(&batch.chars, 0.5, &mut mask_rng);
        if sm.num_masked() > 0 && cm.num_masked() > 0 {
            break (sm, cm);
        }
    };

    let mut lines = Vec::new();
    let mut check_rng = ChaCha8Rng::seed_from_u64(99);
    for name in ["labeling", "classification", "matching", "subword_mlm", "char_mlm"] {
        let report = GradCheckReport::run(&mut store, SAMPLES, EPS, &mut check_rng, |s, g| match name {
            "labeling" => {
                let out = model.forward(g, s, &batch, None)?;
                let logits = word_logits(g, s, &out.states, Side::Subword, &batch.pairs, &lab)?;
                Ok(labeling_loss(g, logits, &[Some(2), Some(0)]))
            }
            "classification" => {
                let out = model.forward(g, s, &batch, None)?;
                let logits = classify_logits(g, s, &out.states, Side::Char, &cls);
                Ok(classification_loss(g, logits, &[Some(1)]))
            }
            _ => {
                let l = pretrain_losses(g, s, &model, &heads, &batch, &sm, &cm, None)?;
                Ok(match name {
                    "matching" => l.matching,
                    "subword_mlm" => l.subword_mlm,
                    _ => l.char_mlm,
                })
            }
        })
        .map_err(|e| e.to_string())?;
        let nonzero = report.samples.iter().filter(|s| s.analytic != 0.0).count();
        let worst = report.worst().unwrap();
        ensure(report.passes(TOL), || {
            format!(
                "{name}: max rel err {:.2e} at {}[{}] (analytic {:e}, numeric {:e})",
                worst.rel_error, worst.param, worst.index, worst.analytic, worst.numeric
            )
        })?;
        lines.push(format!("{name} {:.1e} ({nonzero} nonzero)", report.max_rel_error()));
    }
    within(start, Duration::from_secs(60), "gradient suite")?;
    Ok(format!("{SAMPLES} samples each, max rel err: {}", lines.join(", ")))
}

// 2 ------------------------------------------------------------------------

fn appendix_a() -> Outcome {
    let (sub, chr) = build_vocabs(&[words("A dog sat dog sat")], 4).unwrap();
    let pair = tokenize_pair(&words("A dog sat"), &sub, &chr).unwrap();
    ensure(pair.num_subwords() == 5 && pair.num_chars() == 9, || {
        "unexpected segmentation".into()
    })?;
    let expect: [(PeStrategy, [f64; 3], [f64; 7]); 3] = [
        (PeStrategy::A, [1.0, 2.0, 3.0], [1.0, 2.0, 2.0, 2.0, 3.0, 3.0, 3.0]),
        (PeStrategy::B, [1.0, 2.0, 5.0], [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]),
        (PeStrategy::C, [1.0, 3.0, 6.0], [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]),
    ];
    for (strategy, s_row, c_row) in expect {
        let (s, c) = pe_indices(&pair, strategy).unwrap();
        ensure(s[1..4] == s_row && c[1..8] == c_row, || {
            format!("strategy {strategy}: subword {:?} char {:?}", &s[1..4], &c[1..8])
        })?;
    }
    Ok("strategies A, B, C match exactly".into())
}

// 3 ------------------------------------------------------------------------

type Mat = Vec<Vec<f64>>;

struct Naive<'a> {
    store: &'a ParamStore,
    heads: usize,
}

impl Naive<'_> {
    fn p(&self, name: &str) -> &Tensor {
        self.store.by_name(name).unwrap()
    }

    fn linear(&self, x: &Mat, name: &str) -> Mat {
        let w = self.p(&format!("{name}.w"));
        let b = self.p(&format!("{name}.b"));
        let (din, dout) = (w.shape()[0], w.shape()[1]);
        x.iter()
            .map(|row| {
                (0..dout)
                    .map(|o| b.data()[o] + (0..din).map(|i| row[i] * w.data()[i * dout + o]).sum::<f64>())
                    .collect()
            })
            .collect()
    }

    fn attention(&self, xq: &Mat, xkv: &Mat, name: &str) -> Mat {
        let q = self.linear(xq, &format!("{name}.q"));
        let k = self.linear(xkv, &format!("{name}.k"));
        let v = self.linear(xkv, &format!("{name}.v"));
        let d = q[0].len();
        let dh = d / self.heads;
        let mut out = vec![vec![0.0; d]; q.len()];
        for h in 0..self.heads {
            let cols = h * dh..(h + 1) * dh;
            for i in 0..q.len() {
                let scores: Vec<f64> = (0..k.len())
                    .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                for c in cols.clone() {
                    out[i][c] = (0..k.len()).map(|j| e[j] / z * v[j][c]).sum();
                }
            }
        }
        self.linear(&out, &format!("{name}.o"))
    }

    fn layer_norm(&self, x: &Mat, name: &str) -> Mat {
        let g = self.p(&format!("{name}.gamma")).data();
        let b = self.p(&format!("{name}.beta")).data();
        x.iter()
            .map(|row| {
                let n = row.len() as f64;
                let mean = row.iter().sum::<f64>() / n;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                row.iter()
                    .enumerate()
                    .map(|(i, v)| g[i] * (v - mean) / (var + 1e-5).sqrt() + b[i])
                    .collect()
            })
            .collect()
    }

    fn add(a: &Mat, b: &Mat) -> Mat {
        a.iter()
            .zip(b)
            .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
            .collect()
    }

    fn gelu(x: &Mat) -> Mat {
        let c = (2.0 / std::f64::consts::PI).sqrt();
        x.iter()
            .map(|r| {
                r.iter()
                    .map(|&v| 0.5 * v * (1.0 + (c * (v + 0.044715 * v.powi(3))).tanh()))
                    .collect()
            })
            .collect()
    }

    /// Post-norm block; `xkv` is the key/value source.
    fn block(&self, x: &Mat, xkv: &Mat, name: &str) -> Mat {
        let a = self.attention(x, xkv, &format!("{name}.attn"));
        let h = self.layer_norm(&Self::add(x, &a), &format!("{name}.ln1"));
        let f = self.linear(
            &Self::gelu(&self.linear(&h, &format!("{name}.ffn.ff1"))),
            &format!("{name}.ffn.ff2"),
        );
        self.layer_norm(&Self::add(&h, &f), &format!("{name}.ln2"))
    }

    /// C^s = CO(H^s, H^c), C^c = CO(H^c, H^s), both from layer i; then
    /// H^s = TRM(C^s), H^c = TRM(C^c).
    fn entangle(&self, mut hs: Mat, mut hc: Mat, m: usize) -> (Mat, Mat) {
        for i in 0..m {
            let cs = self.block(&hs, &hc, &format!("coattn.sub.{i}.cotrm"));
            let cc = self.block(&hc, &hs, &format!("coattn.char.{i}.cotrm"));
            hs = self.block(&cs, &cs, &format!("coattn.sub.{i}.trm"));
            hc = self.block(&cc, &cc, &format!("coattn.char.{i}.trm"));
        }
        (hs, hc)
    }
}

fn random_mat(rng: &mut ChaCha8Rng, rows: usize, d: usize) -> Mat {
    (0..rows)
        .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect()
}

/// Packs unpadded sequences into a padded `(B, L, d)` tensor and key mask.
fn pack(seqs: &[Mat], d: usize) -> (Tensor, Vec<bool>, usize) {
    let len = seqs.iter().map(Vec::len).max().unwrap();
    let mut data = vec![0.0; seqs.len() * len * d];
    let mut mask = vec![false; seqs.len() * len];
    for (b, s) in seqs.iter().enumerate() {
        for (t, row) in s.iter().enumerate() {
            data[(b * len + t) * d..(b * len + t + 1) * d].copy_from_slice(row);
            mask[b * len + t] = true;
        }
    }
    (Tensor::new(vec![seqs.len(), len, d], data).unwrap(), mask, len)
}

fn coattention_equations() -> Outcome {
    let d = 16;
    let mut worst: f64 = 0.0;
    for m in 1..=4 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + m as u64);
        let cfg = CoAttentionConfig {
            num_modules: m,
            hidden_size: d,
            num_heads: 2,
            ffn_size: 24,
            dropout: 0.0,
            pe_strategy: PeStrategy::None,
            init_std: 0.3,
        };
        let mut store = ParamStore::new();
        let stack = CoAttentionStack::new(&mut store, "coattn", cfg, &mut rng).unwrap();
        // Two examples of different lengths exercise key masking as well.
        let hs: Vec<Mat> = vec![random_mat(&mut rng, 4, d), random_mat(&mut rng, 6, d)];
        let hc: Vec<Mat> = vec![random_mat(&mut rng, 11, d), random_mat(&mut rng, 8, d)];
        let (ts, ms, ls) = pack(&hs, d);
        let (tc, mc, lc) = pack(&hc, d);
        let mut g = Graph::new();
        let out_s = EncoderOutput {
            hidden: g.constant(ts),
            pad_mask: ms,
            batch: 2,
            len: ls,
        };
        let out_c = EncoderOutput {
            hidden: g.constant(tc),
            pad_mask: mc,
            batch: 2,
            len: lc,
        };
        let st = stack
            .forward(&mut g, &store, &out_s, &out_c, None, None)
            .map_err(|e| e.to_string())?;
        let naive = Naive {
            store: &store,
            heads: 2,
        };
        for b in 0..2 {
            let (ns, nc) = naive.entangle(hs[b].clone(), hc[b].clone(), m);
            for (got, want, len) in [(st.subword, &ns, ls), (st.char, &nc, lc)] {
                let data = g.value(got).data();
                for (t, row) in want.iter().enumerate() {
                    for (c, &v) in row.iter().enumerate() {
                        worst = worst.max((data[(b * len + t) * d + c] - v).abs());
                    }
                }
            }
        }
        ensure(worst <= 1e-5, || format!("m={m}: max abs diff {worst:e}"))?;
    }
    Ok(format!("m=1..4, max abs diff {worst:.1e}"))
}

// 4 ------------------------------------------------------------------------

fn overfit_config(task: Task, side: Side, steps: usize, batch: usize, dir: &Path) -> RunConfig {
    RunConfig {
        task,
        side,
        hidden_size: 32,
        num_layers: 1,
        num_heads: 2,
        ffn_size: 64,
        num_coattention: 1,
        dropout: 0.0,
        init_std: 0.1,
        lr: 3e-3,
        max_steps: Some(steps),
        warmup_steps: 0,
        batch_size: batch,
        seed: 7,
        num_merges: 40,
        checkpoint_dir: dir.to_path_buf(),
        ..RunConfig::default()
    }
}

fn overfit() -> Outcome {
    let start = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let bio = TaskData::Tagged(common::bio_sentences(16, 3));
    let cls = TaskData::Classified(common::sentiment_examples(32, 4));
    let runs = [
        (Task::Ner, Side::Subword, 300, 16, &bio),
        (Task::Ner, Side::Char, 500, 16, &bio),
        (Task::Classify, Side::Subword, 300, 32, &cls),
        (Task::Classify, Side::Char, 300, 32, &cls),
    ];
    let mut notes = Vec::new();
    for (i, (task, side, steps, bs, data)) in runs.into_iter().enumerate() {
        let cfg = overfit_config(task, side, steps, bs, &tmp.path().join(i.to_string()));
        let (_, report) = train_on(&cfg, data, data, None).map_err(|e| e.to_string())?;
        let metric = if task == Task::Ner { "f1" } else { "accuracy" };
        let reached = report
            .epochs
            .iter()
            .find(|e| e.dev.get(metric).is_some_and(|&v| v >= 1.0))
            .map(|e| e.steps);
        match reached {
            Some(s) if s <= steps => notes.push(format!("{task}/{side} {metric}=1 at step {s}")),
            _ => {
                return Err(format!(
                    "{task}/{side}: {metric} never reached 1.0 in {steps} steps (best {:.3})",
                    report.best_dev
                ))
            }
        }
    }
    within(start, Duration::from_secs(300), "overfit runs")?;
    Ok(format!("{} in {:.0?}", notes.join(", "), start.elapsed()))
}

// 5 ------------------------------------------------------------------------

fn small_model(pe: PeStrategy, seed: u64) -> (ParamStore, EntanglementModel, Vocab, Vocab) {
    let corpus = common::toy_corpus(20, 1);
    let (sub, chr) = build_vocabs(&corpus, 30).unwrap();
    let mc = ModelConfig {
        pe_strategy: pe,
        max_subwords: 64,
        max_chars: 64,
        ..tiny_config()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let model = EntanglementModel::new(&mut store, mc, sub.len(), chr.len(), &mut rng).unwrap();
    (store, model, sub, chr)
}

fn cross_modal_flow() -> Outcome {
    let (mut store, model, sub, chr) = small_model(PeStrategy::B, 21);
    let pair = tokenize_pair(&words("alice visited rome"), &sub, &chr).unwrap();
    let batch = PairBatch::new(vec![&pair]);
    let run = |store: &ParamStore| {
        let mut g = Graph::new();
        let out = model.forward(&mut g, store, &batch, None).unwrap();
        (
            g.value(out.subword_backbone.hidden).data().to_vec(),
            g.value(out.states.subword).data().to_vec(),
        )
    };
    let (hs0_a, hs_a) = run(&store);
    let id = store.id("encoder.char.embed").unwrap();
    let ch = pair.char_ids[3];
    let d = store.value(id).last_dim();
    store.value_mut(id).data_mut()[ch * d] += 0.5;
    let (hs0_b, hs_b) = run(&store);
    let same_backbone = hs0_a.iter().zip(&hs0_b).all(|(a, b)| a.to_bits() == b.to_bits());
    ensure(same_backbone, || "H^s_0 changed".into())?;
    let delta = hs_a.iter().zip(&hs_b).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    ensure(delta > 1e-6, || format!("H^s_* changed by only {delta:e}"))?;
    Ok(format!("H^s_0 bitwise equal, ||dH^s_*|| = {delta:.3e}"))
}

// 6 ------------------------------------------------------------------------

fn pretraining_sanity() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = common::toy_corpus(50, 8);
    let cfg = RunConfig {
        task: Task::Pretrain,
        hidden_size: 32,
        num_layers: 1,
        num_heads: 2,
        ffn_size: 64,
        num_coattention: 1,
        dropout: 0.0,
        init_std: 0.1,
        lr: 2e-3,
        max_steps: Some(200),
        batch_size: 10,
        seed: 3,
        num_merges: 60,
        checkpoint_dir: tmp.path().to_path_buf(),
        ..RunConfig::default()
    };
    let report = pretrain_on(&cfg, &corpus).map_err(|e| e.to_string())?;
    ensure(report.steps.len() == 200, || {
        format!("{} steps ran", report.steps.len())
    })?;
    let first = report.steps[0];
    let last = *report.steps.last().unwrap();
    ensure(last.total < first.total, || {
        format!("total loss {:.4} -> {:.4}", first.total, last.total)
    })?;
    ensure(last.matching < report.uniform_matching, || {
        format!(
            "matching {:.4} not below uniform {:.4}",
            last.matching, report.uniform_matching
        )
    })?;
    Ok(format!(
        "total {:.3} -> {:.3}; matching {:.3} -> {:.3} (uniform {:.3})",
        first.total, last.total, first.matching, last.matching, report.uniform_matching
    ))
}

// 7 ------------------------------------------------------------------------

fn padding_invariance() -> Outcome {
    let (store, model, sub, chr) = small_model(PeStrategy::C, 31);
    let short = tokenize_pair(&words("bob met carol"), &sub, &chr).unwrap();
    let long = tokenize_pair(&words("the trip to new york with dave was really good"), &sub, &chr).unwrap();
    let run = |pairs: Vec<&TokenizedPair>| {
        let batch = PairBatch::new(pairs);
        let mut g = Graph::new();
        let out = model.forward(&mut g, &store, &batch, None).unwrap();
        let s = &out.states;
        (
            g.value(s.subword).clone(),
            s.subword_len,
            g.value(s.char).clone(),
            s.char_len,
        )
    };
    let (s1, _, c1, _) = run(vec![&short]);
    let (s2, ls2, c2, lc2) = run(vec![&long, &short]);
    let d = s1.last_dim();
    let mut worst: f64 = 0.0;
    for (one, two, n, len) in [
        (&s1, &s2, short.num_subwords(), ls2),
        (&c1, &c2, short.num_chars(), lc2),
    ] {
        for t in 0..n * d {
            worst = worst.max((one.data()[t] - two.data()[len * d + t]).abs());
        }
    }
    ensure(worst <= 1e-6, || format!("padded vs unpadded differ by {worst:e}"))?;

    let tmp = tempfile::tempdir().unwrap();
    let data = common::bio_sentences(12, 5);
    let labels = TaskData::Tagged(data.clone()).label_set();
    let cfg = RunConfig {
        hidden_size: 16,
        num_layers: 1,
        num_heads: 2,
        ffn_size: 32,
        init_std: 0.3,
        checkpoint_dir: tmp.path().to_path_buf(),
        ..RunConfig::default()
    };
    let tm = TaskModel::new(cfg, sub, chr, labels).unwrap();
    let pairs: Vec<TokenizedPair> = data.iter().map(|(w, _)| tm.tokenize(w).unwrap()).collect();
    let refs: Vec<&TokenizedPair> = pairs.iter().collect();
    let base = tm.predict(&refs, 1).unwrap();
    for bs in [2, 5, 12] {
        ensure(tm.predict(&refs, bs).unwrap() == base, || {
            format!("batch size {bs} changes predictions")
        })?;
    }
    Ok(format!(
        "max diff {worst:.1e}; predictions equal for batch sizes 1, 2, 5, 12"
    ))
}

// 8 ------------------------------------------------------------------------

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let data = common::bio_sentences(12, 9);
    let train_path = tmp.path().join("train.conll");
    let dev_path = tmp.path().join("dev.conll");
    write_conll(&train_path, &data[..8]).unwrap();
    write_conll(&dev_path, &data[8..]).unwrap();
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let cfg = RunConfig {
            hidden_size: 16,
            num_layers: 1,
            num_heads: 2,
            ffn_size: 32,
            dropout: 0.1,
            lr: 1e-3,
            epochs: Some(3),
            batch_size: 4,
            seed: 1234,
            num_merges: 20,
            train_file: Some(train_path.clone()),
            dev_file: Some(dev_path.clone()),
            test_file: Some(dev_path.clone()),
            checkpoint_dir: tmp.path().join(run),
            ..RunConfig::default()
        };
        train(&cfg).map_err(|e| e.to_string())?;
        let dir = &cfg.checkpoint_dir;
        outputs.push([
            fs::read(dir.join("report.toml")).unwrap(),
            fs::read(dir.join("best/weights.bin")).unwrap(),
            fs::read(dir.join("best/manifest.txt")).unwrap(),
        ]);
    }
    ensure(outputs[0] == outputs[1], || "runs differ".into())?;
    Ok(format!(
        "report and checkpoint bit-identical ({} weight bytes)",
        outputs[0][1].len()
    ))
}

// 9 ------------------------------------------------------------------------

fn matching_closed_form() -> Outcome {
    // Two words, "ab" merged into one subword: 2 real subwords, 3 chars.
    // Subword states e1, e2; chars a, b point along e1 and c along e2.
    let (sub, chr) = build_vocabs(&[words("ab ab c")], 1).unwrap();
    let pair = tokenize_pair(&words("ab c"), &sub, &chr).unwrap();
    ensure(pair.num_subwords() == 4 && pair.num_chars() == 5, || {
        "unexpected segmentation".into()
    })?;
    let labels = char_word_labels(&pair);
    let mut store = ParamStore::new();
    let scale = MatchingScale::new(&mut store, 1.0);
    let mut g = Graph::new();
    let sub_states = Tensor::new(vec![1, 4, 2], vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
    let char_states = Tensor::new(vec![1, 5, 2], vec![0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
    let states = entangler_core::EntangledStates {
        subword: g.constant(sub_states),
        char: g.constant(char_states),
        subword_mask: vec![true; 4],
        char_mask: vec![true; 5],
        batch: 1,
        subword_len: 4,
        char_len: 5,
    };
    let valid: Vec<bool> = pair.subword_to_word.iter().map(Option::is_some).collect();
    let loss = matching_loss(&mut g, &store, &states, &[labels], &[valid], &scale);
    let got = g.value(loss).item();
    let want = (1.0 + (-1f64).exp()).ln();
    ensure((got - want).abs() <= 1e-6, || format!("loss {got} vs {want}"))?;
    Ok(format!("loss {got:.6} = ln(1+e^-1) = {want:.6}"))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("gradient check", gradient_suite),
        ("positional index table", appendix_a),
        ("co-attention vs naive loops", coattention_equations),
        ("overfit tiny tasks", overfit),
        ("character to subword flow", cross_modal_flow),
        ("pretraining sanity", pretraining_sanity),
        ("padding and batching invariance", padding_invariance),
        ("training determinism", determinism),
        ("matching loss closed form", matching_closed_form),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|x| name.contains(x.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into()))
        });
        let t = start.elapsed();
        match outcome {
            Ok(msg) => println!("PASS {}. {name}: {msg} [{t:.1?}]", i + 1),
            Err(msg) => {
                failed += 1;
                println!("FAIL {}. {name}: {msg} [{t:.1?}]", i + 1);
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
