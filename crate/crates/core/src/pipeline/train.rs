//! Fine-tuning, evaluation and prediction.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{RunConfig, Task};
use super::data::{load_classification, load_conll, TaggedSentence};
use super::metrics::{accuracy, macro_f1, span_f1};
use super::task::{Example, LabelSet, Prediction, Target, TaskModel, CHAR_VOCAB_FILE, SUBWORD_VOCAB_FILE};
use crate::error::{Error, Result};
use crate::heads::Side;
use crate::tensor::{load_checkpoint, Adam, AdamConfig, Graph, LinearSchedule, ParamStore};
use crate::tokenize::{build_vocabs, Vocab};

pub type Metrics = BTreeMap<String, f64>;

pub const BEST_DIR: &str = "best";
pub const REPORT_FILE: &str = "report.toml";
pub const NAN_DUMP_FILE: &str = "nan_dump.txt";

/// A loaded dataset, shaped by task.
#[derive(Debug, Clone, PartialEq)]
pub enum TaskData {
    Tagged(Vec<TaggedSentence>),
    Classified(Vec<(Vec<String>, String)>),
}

impl TaskData {
    pub fn load(task: Task, path: &Path) -> Result<Self> {
        match task {
            Task::Ner | Task::Pos => Ok(TaskData::Tagged(load_conll(path)?)),
            Task::Classify => Ok(TaskData::Classified(load_classification(path)?)),
            Task::Pretrain => Err(Error::Config("pretrain data is a plain corpus".into())),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TaskData::Tagged(d) => d.len(),
            TaskData::Classified(d) => d.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sentences(&self) -> Vec<Vec<String>> {
        match self {
            TaskData::Tagged(d) => d.iter().map(|(w, _)| w.clone()).collect(),
            TaskData::Classified(d) => d.iter().map(|(w, _)| w.clone()).collect(),
        }
    }

    fn labels(&self) -> Vec<&String> {
        match self {
            TaskData::Tagged(d) => d.iter().flat_map(|(_, t)| t).collect(),
            TaskData::Classified(d) => d.iter().map(|(_, l)| l).collect(),
        }
    }

    pub fn label_set(&self) -> LabelSet {
        LabelSet::from_labels(self.labels())
    }

    fn check_task(&self, task: Task) -> Result<()> {
        match (self, task.is_labeling()) {
            (TaskData::Tagged(_), true) | (TaskData::Classified(_), false) => Ok(()),
            _ => Err(Error::Config(format!("data does not fit task {task}"))),
        }
    }
}

/// Tokenizes a dataset into training examples. Labeling sentences longer
/// than the caps are split into several examples; classification inputs are
/// truncated.
pub fn encode_examples(model: &TaskModel, data: &TaskData) -> Result<Vec<Example>> {
    model.labels.check(data.labels(), "training data")?;
    let mut out = Vec::new();
    match data {
        TaskData::Tagged(d) => {
            for (words, tags) in d {
                let mut at = 0;
                for pair in model.tokenize_chunks(words)? {
                    let n = pair.num_words();
                    let target = tags[at..at + n].iter().map(|t| model.labels.id(t).unwrap()).collect();
                    at += n;
                    out.push(Example {
                        pair,
                        target: Target::Words(target),
                    });
                }
            }
        }
        TaskData::Classified(d) => {
            for (words, label) in d {
                out.push(Example {
                    pair: model.tokenize(words)?,
                    target: Target::Class(model.labels.id(label).unwrap()),
                });
            }
        }
    }
    Ok(out)
}

/// Predicted label names for each sentence; long sentences are predicted
/// chunk by chunk and stitched back together.
pub fn predict_sentences(model: &TaskModel, sentences: &[Vec<String>]) -> Result<Vec<Vec<String>>> {
    let mut pairs = Vec::new();
    let mut owner = Vec::new();
    for (i, words) in sentences.iter().enumerate() {
        if model.config.task.is_labeling() {
            for p in model.tokenize_chunks(words)? {
                pairs.push(p);
                owner.push(i);
            }
        } else {
            pairs.push(model.tokenize(words)?);
            owner.push(i);
        }
    }
    let refs: Vec<_> = pairs.iter().collect();
    let preds = model.predict(&refs, model.config.batch_size)?;
    let mut out = vec![Vec::new(); sentences.len()];
    for (i, p) in owner.into_iter().zip(preds) {
        match p {
            Prediction::Words(ids) => out[i].extend(ids.into_iter().map(|k| model.labels.name(k).to_string())),
            Prediction::Class(k) => out[i].push(model.labels.name(k).to_string()),
        }
    }
    Ok(out)
}

/// Task metrics of `model` on `data`. Gold labels unknown to the model are a
/// [`Error::LabelMismatch`].
pub fn evaluate(model: &TaskModel, data: &TaskData) -> Result<Metrics> {
    data.check_task(model.config.task)?;
    model.labels.check(data.labels(), "evaluation data")?;
    let pred = predict_sentences(model, &data.sentences())?;
    let mut m = Metrics::new();
    match data {
        TaskData::Tagged(d) => {
            let gold: Vec<Vec<String>> = d.iter().map(|(_, t)| t.clone()).collect();
            let flat_p: Vec<&String> = pred.iter().flatten().collect();
            let flat_g: Vec<&String> = gold.iter().flatten().collect();
            m.insert("accuracy".into(), accuracy(&flat_p, &flat_g));
            if model.config.task == Task::Ner {
                let prf = span_f1(&pred, &gold);
                m.insert("precision".into(), prf.precision);
                m.insert("recall".into(), prf.recall);
                m.insert("f1".into(), prf.f1);
            }
        }
        TaskData::Classified(d) => {
            let gold: Vec<&String> = d.iter().map(|(_, l)| l).collect();
            let p: Vec<&String> = pred.iter().map(|v| &v[0]).collect();
            m.insert("accuracy".into(), accuracy(&p, &gold));
            m.insert("macro_f1".into(), macro_f1(&p, &gold));
        }
    }
    Ok(m)
}

/// Formats predictions for raw text, one input sentence per line. Labeling
/// tasks print `token<TAB>label` lines with a blank line after each
/// sentence; classification prints one label per line.
pub fn predict_text(model: &TaskModel, input: &str) -> Result<String> {
    let sentences: Vec<Vec<String>> = input
        .lines()
        .map(|l| l.split_whitespace().map(String::from).collect())
        .collect();
    let nonempty: Vec<Vec<String>> = sentences.iter().filter(|s| !s.is_empty()).cloned().collect();
    let mut preds = predict_sentences(model, &nonempty)?.into_iter();
    let mut out = String::new();
    for words in &sentences {
        if words.is_empty() {
            if model.config.task.is_labeling() {
                out.push('\n');
            }
            continue;
        }
        let labels = preds.next().expect("one prediction per sentence");
        if model.config.task.is_labeling() {
            for (w, l) in words.iter().zip(&labels) {
                let _ = writeln!(out, "{w}\t{l}");
            }
            out.push('\n');
        } else {
            let _ = writeln!(out, "{}", labels[0]);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Optimizer steps completed at the end of the epoch.
    pub steps: usize,
    pub train_loss: f64,
    pub dev: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub task: Task,
    pub side: Side,
    pub seed: u64,
    pub total_steps: usize,
    pub best_epoch: usize,
    pub best_dev: f64,
    pub test: Option<Metrics>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainReport {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("report serializes")
    }

    /// First step count at which the dev primary metric reached `target`.
    pub fn steps_to_reach(&self, target: f64) -> Option<usize> {
        let key = self.task.primary_metric();
        self.epochs
            .iter()
            .find(|e| e.dev.get(key).is_some_and(|&v| v >= target))
            .map(|e| e.steps)
    }
}

pub fn global_grad_norm(store: &ParamStore) -> f64 {
    store
        .iter()
        .filter(|(_, p)| p.requires_grad)
        .flat_map(|(_, p)| p.grad.data().iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients so their global norm is at most `max_norm`.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = global_grad_norm(store);
    if norm > max_norm && norm > 0.0 {
        let c = max_norm / norm;
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            store.get_mut(id).grad.data_mut().iter_mut().for_each(|g| *g *= c);
        }
    }
    norm
}

/// Writes parameter and gradient norms next to the offending loss, for
/// post-mortem inspection.
pub(crate) fn dump_non_finite(dir: &Path, step: usize, loss: f64, store: &ParamStore) -> PathBuf {
    let mut text = format!("step={step} loss={loss}\n");
    for (_, p) in store.iter() {
        let vn = p.value.norm();
        let gn = p.grad.norm();
        let _ = writeln!(text, "{} value_norm={vn} grad_norm={gn}", p.name);
    }
    let path = dir.join(NAN_DUMP_FILE);
    if fs::create_dir_all(dir).is_ok() && fs::write(&path, text).is_ok() {
        log::error!("non-finite loss at step {step}; state written to {}", path.display());
    }
    path
}

/// Vocabularies from explicit files, else from the init checkpoint, else
/// built from `sentences`.
pub fn resolve_vocabs(cfg: &RunConfig, sentences: &[Vec<String>]) -> Result<(Vocab, Vocab)> {
    match (&cfg.subword_vocab, &cfg.char_vocab) {
        (Some(s), Some(c)) => return Ok((Vocab::load(s)?, Vocab::load(c)?)),
        (None, None) => {}
        _ => {
            return Err(Error::Config(
                "set both subword_vocab and char_vocab, or neither".into(),
            ))
        }
    }
    if let Some(dir) = &cfg.init_checkpoint {
        let (s, c) = (dir.join(SUBWORD_VOCAB_FILE), dir.join(CHAR_VOCAB_FILE));
        if s.exists() && c.exists() {
            return Ok((Vocab::load(&s)?, Vocab::load(&c)?));
        }
    }
    build_vocabs(sentences, cfg.num_merges)
}

fn primary(m: &Metrics, task: Task) -> f64 {
    m.get(task.primary_metric()).copied().unwrap_or(0.0)
}

/// Fine-tunes on `train`, selects the epoch with the best dev score, and
/// scores `test` with that checkpoint reloaded from disk. Writes
/// `<checkpoint_dir>/best/` and `<checkpoint_dir>/report.toml`.
pub fn train_on(
    cfg: &RunConfig,
    train: &TaskData,
    dev: &TaskData,
    test: Option<&TaskData>,
) -> Result<(TaskModel, TrainReport)> {
    cfg.validate()?;
    log::info!("effective config:\n{}", cfg.to_toml());
    train.check_task(cfg.task)?;
    if train.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    let labels = train.label_set();
    labels.check(dev.labels(), "dev data")?;
    if let Some(t) = test {
        labels.check(t.labels(), "test data")?;
    }
    let (sub, chr) = resolve_vocabs(cfg, &train.sentences())?;
    let mut model = TaskModel::new(cfg.clone(), sub, chr, labels)?;
    if let Some(dir) = &cfg.init_checkpoint {
        let ck = load_checkpoint(dir)?;
        let n = model.store.load_matching(&ck.params);
        log::info!(
            "initialized {n} of {} tensors from {}",
            model.store.len(),
            dir.display()
        );
    }
    let examples = encode_examples(&model, train)?;

    let bs = cfg.batch_size;
    let per_epoch = examples.len().div_ceil(bs);
    let total = cfg.max_steps.unwrap_or(cfg.epochs() * per_epoch);
    let schedule = LinearSchedule::new(cfg.lr, cfg.warmup_steps, total)?;
    let mut adam = Adam::new(&model.store, AdamConfig::default(), schedule);
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut drop_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
    let best_dir = cfg.checkpoint_dir.join(BEST_DIR);

    let mut records = Vec::new();
    let mut best: Option<(usize, f64)> = None;
    let mut step = 0;
    let mut epoch = 0;
    let mut order: Vec<usize> = (0..examples.len()).collect();
    while step < total {
        epoch += 1;
        order.shuffle(&mut order_rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for idx in order.chunks(bs) {
            if step >= total {
                break;
            }
            let batch: Vec<&Example> = idx.iter().map(|&i| &examples[i]).collect();
            let mut g = Graph::new();
            let loss = model.batch_loss(&mut g, &batch, Some(&mut drop_rng))?;
            let value = g.value(loss).item();
            model.store.zero_grad();
            g.backward(loss, &mut model.store)?;
            if !value.is_finite() || !global_grad_norm(&model.store).is_finite() {
                let path = dump_non_finite(&cfg.checkpoint_dir, step, value, &model.store);
                return Err(Error::NonFiniteLoss {
                    step,
                    detail: format!("loss={value}, dump at {}", path.display()),
                });
            }
            if let Some(max) = cfg.max_grad_norm {
                clip_grad_norm(&mut model.store, max);
            }
            adam.step(&mut model.store);
            step += 1;
            loss_sum += value;
            batches += 1;
        }
        let dev_m = evaluate(&model, dev)?;
        let score = primary(&dev_m, cfg.task);
        log::info!(
            "epoch {epoch} step {step} loss {:.5} dev {} {score:.4}",
            loss_sum / batches.max(1) as f64,
            cfg.task.primary_metric()
        );
        if best.is_none_or(|(_, b)| score > b) {
            best = Some((epoch, score));
            model.save(&best_dir, Some(&adam))?;
        }
        records.push(EpochRecord {
            epoch,
            steps: step,
            train_loss: loss_sum / batches.max(1) as f64,
            dev: dev_m,
        });
    }
    if best.is_none() {
        model.save(&best_dir, Some(&adam))?;
    }
    let (best_epoch, best_dev) = best.unwrap_or((0, 0.0));
    let best_model = TaskModel::load(&best_dir)?;
    let test_m = test.map(|t| evaluate(&best_model, t)).transpose()?;
    let report = TrainReport {
        task: cfg.task,
        side: cfg.side,
        seed: cfg.seed,
        total_steps: step,
        best_epoch,
        best_dev,
        test: test_m,
        epochs: records,
    };
    let rpath = cfg.checkpoint_dir.join(REPORT_FILE);
    fs::write(&rpath, report.to_toml()).map_err(|e| Error::io(&rpath, e))?;
    Ok((best_model, report))
}

/// [`train_on`] with datasets read from the configured files. Without a dev
/// file the training set doubles as dev data.
pub fn train(cfg: &RunConfig) -> Result<TrainReport> {
    let train_path = cfg
        .train_file
        .as_ref()
        .ok_or_else(|| Error::Config("train_file is not set".into()))?;
    let train = TaskData::load(cfg.task, train_path)?;
    let dev = match &cfg.dev_file {
        Some(p) => TaskData::load(cfg.task, p)?,
        None => {
            log::warn!("no dev_file; selecting checkpoints on the training set");
            train.clone()
        }
    };
    let test = cfg
        .test_file
        .as_ref()
        .map(|p| TaskData::load(cfg.task, p))
        .transpose()?;
    Ok(train_on(cfg, &train, &dev, test.as_ref())?.1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

/// Per-seed reports and the mean and sample standard deviation of every
/// final metric (test when available, else best dev).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seeds: Vec<u64>,
    pub metrics: BTreeMap<String, MeanStd>,
}

pub fn mean_std(xs: &[f64]) -> MeanStd {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = if xs.len() < 2 {
        0.0
    } else {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    MeanStd { mean, std }
}

/// Trains `n` times with seeds `seed, seed+1, ...`, each into
/// `<checkpoint_dir>/seed-<s>/`.
pub fn train_seeds(cfg: &RunConfig, n: usize) -> Result<(Vec<TrainReport>, SeedSummary)> {
    if n == 0 {
        return Err(Error::Usage("--seeds must be at least 1".into()));
    }
    let mut reports = Vec::new();
    for k in 0..n as u64 {
        let mut c = cfg.clone();
        c.seed = cfg.seed.wrapping_add(k);
        if n > 1 {
            c.checkpoint_dir = cfg.checkpoint_dir.join(format!("seed-{}", c.seed));
        }
        reports.push(train(&c)?);
    }
    let mut values: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in &reports {
        match &r.test {
            Some(t) => t
                .iter()
                .for_each(|(k, v)| values.entry(k.clone()).or_default().push(*v)),
            None => values
                .entry(format!("dev_{}", r.task.primary_metric()))
                .or_default()
                .push(r.best_dev),
        }
    }
    let summary = SeedSummary {
        seeds: reports.iter().map(|r| r.seed).collect(),
        metrics: values.into_iter().map(|(k, v)| (k, mean_std(&v))).collect(),
    };
    Ok((reports, summary))
}
