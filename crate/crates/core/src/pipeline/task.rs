//! A trainable model for one downstream task, with its vocabularies, label
//! set and checkpoint layout.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{RunConfig, Task};
use crate::error::{Error, Result};
use crate::heads::{
    classification_loss, classify_logits, labeling_loss, predict_labels, word_logits, ClassificationHead, LabelingHead,
};
use crate::layers::TrainRng;
use crate::model::{EntanglementModel, PairBatch};
use crate::tensor::{load_checkpoint, save_checkpoint, Adam, Graph, ParamStore, Var};
use crate::tokenize::{tokenize_pair_capped, TokenizedPair, Vocab};

pub const CONFIG_FILE: &str = "config.toml";
pub const SUBWORD_VOCAB_FILE: &str = "subword.vocab";
pub const CHAR_VOCAB_FILE: &str = "char.vocab";
pub const LABELS_FILE: &str = "labels.txt";

/// Ordered label names; the id is the position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSet {
    labels: Vec<String>,
}

impl LabelSet {
    /// Sorted, deduplicated.
    pub fn from_labels<'a>(labels: impl IntoIterator<Item = &'a String>) -> Self {
        let mut v: Vec<String> = labels.into_iter().cloned().collect();
        v.sort();
        v.dedup();
        Self { labels: v }
    }

    pub fn from_vec(labels: Vec<String>) -> Self {
        Self { labels }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn id(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn name(&self, id: usize) -> &str {
        &self.labels[id]
    }

    pub fn names(&self) -> &[String] {
        &self.labels
    }

    /// Errors with [`Error::LabelMismatch`] on any label outside the set.
    pub fn check<'a>(&self, labels: impl IntoIterator<Item = &'a String>, what: &str) -> Result<()> {
        for l in labels {
            if self.id(l).is_none() {
                return Err(Error::LabelMismatch(format!(
                    "{what} uses label {l:?}, not among {:?}",
                    self.labels
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.labels.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            labels: text.lines().filter(|l| !l.is_empty()).map(String::from).collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Target {
    Words(Vec<usize>),
    Class(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub pair: TokenizedPair,
    pub target: Target,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Prediction {
    Words(Vec<usize>),
    Class(usize),
}

#[derive(Debug, Clone)]
pub enum TaskHead {
    Labeling(LabelingHead),
    Classification(ClassificationHead),
}

#[derive(Debug, Clone)]
pub struct TaskModel {
    pub config: RunConfig,
    pub store: ParamStore,
    pub model: EntanglementModel,
    pub head: TaskHead,
    pub labels: LabelSet,
    pub subword_vocab: Vocab,
    pub char_vocab: Vocab,
}

impl TaskModel {
    /// Fresh parameters, seeded from `config.seed`.
    pub fn new(config: RunConfig, subword_vocab: Vocab, char_vocab: Vocab, labels: LabelSet) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let mc = config.model();
        let model = EntanglementModel::new(&mut store, mc, subword_vocab.len(), char_vocab.len(), &mut rng)?;
        let head = match config.task {
            Task::Ner | Task::Pos => TaskHead::Labeling(LabelingHead::new(
                &mut store,
                mc.hidden_size,
                labels.len(),
                mc.init_std,
                &mut rng,
            )?),
            Task::Classify => TaskHead::Classification(ClassificationHead::new(
                &mut store,
                mc.hidden_size,
                labels.len(),
                mc.init_std,
                &mut rng,
            )?),
            Task::Pretrain => {
                return Err(Error::Config(
                    "pretraining has no task head; use the pretrain command".into(),
                ))
            }
        };
        Ok(Self {
            config,
            store,
            model,
            head,
            labels,
            subword_vocab,
            char_vocab,
        })
    }

    pub fn tokenize(&self, words: &[String]) -> Result<TokenizedPair> {
        tokenize_pair_capped(words, &self.subword_vocab, &self.char_vocab, self.config.model().caps())
    }

    /// Splits an arbitrarily long sentence into consecutive pieces that each
    /// fit the length caps.
    pub fn tokenize_chunks(&self, words: &[String]) -> Result<Vec<TokenizedPair>> {
        let mut out = Vec::new();
        let mut rest = words;
        while !rest.is_empty() {
            let p = self.tokenize(rest)?;
            rest = &rest[p.num_words()..];
            out.push(p);
        }
        Ok(out)
    }

    /// Mean loss over a batch.
    pub fn batch_loss(&self, g: &mut Graph, examples: &[&Example], rng: TrainRng<'_>) -> Result<Var> {
        let batch = PairBatch::new(examples.iter().map(|e| &e.pair).collect());
        let out = self.model.forward(g, &self.store, &batch, rng)?;
        match &self.head {
            TaskHead::Labeling(h) => {
                let logits = word_logits(g, &self.store, &out.states, self.config.side, &batch.pairs, h)?;
                let mut labels = Vec::new();
                for e in examples {
                    match &e.target {
                        Target::Words(w) => labels.extend(w.iter().map(|&l| Some(l))),
                        Target::Class(_) => return Err(Error::Usage("class target for a labeling head".into())),
                    }
                }
                Ok(labeling_loss(g, logits, &labels))
            }
            TaskHead::Classification(h) => {
                let logits = classify_logits(g, &self.store, &out.states, self.config.side, h);
                let labels = examples
                    .iter()
                    .map(|e| match e.target {
                        Target::Class(c) => Ok(Some(c)),
                        Target::Words(_) => Err(Error::Usage("word targets for a classification head".into())),
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(classification_loss(g, logits, &labels))
            }
        }
    }

    /// Inference with dropout off, in batches of `batch_size`.
    pub fn predict(&self, pairs: &[&TokenizedPair], batch_size: usize) -> Result<Vec<Prediction>> {
        let mut out = Vec::with_capacity(pairs.len());
        for chunk in pairs.chunks(batch_size.max(1)) {
            let mut g = Graph::new();
            let batch = PairBatch::new(chunk.to_vec());
            let fwd = self.model.forward(&mut g, &self.store, &batch, None)?;
            match &self.head {
                TaskHead::Labeling(h) => {
                    let logits = word_logits(&mut g, &self.store, &fwd.states, self.config.side, &batch.pairs, h)?;
                    let probs = g.softmax(logits);
                    let flat = predict_labels(g.value(probs));
                    let mut at = 0;
                    for p in chunk {
                        out.push(Prediction::Words(flat[at..at + p.num_words()].to_vec()));
                        at += p.num_words();
                    }
                }
                TaskHead::Classification(h) => {
                    let logits = classify_logits(&mut g, &self.store, &fwd.states, self.config.side, h);
                    let probs = g.softmax(logits);
                    out.extend(predict_labels(g.value(probs)).into_iter().map(Prediction::Class));
                }
            }
        }
        Ok(out)
    }

    /// Writes config, vocabularies, labels and tensors into `dir`.
    pub fn save(&self, dir: &Path, adam: Option<&Adam>) -> Result<()> {
        save_checkpoint(dir, &self.store, adam)?;
        let cpath = dir.join(CONFIG_FILE);
        fs::write(&cpath, self.config.to_toml()).map_err(|e| Error::io(&cpath, e))?;
        self.subword_vocab.save(&dir.join(SUBWORD_VOCAB_FILE))?;
        self.char_vocab.save(&dir.join(CHAR_VOCAB_FILE))?;
        self.labels.save(&dir.join(LABELS_FILE))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let cpath = dir.join(CONFIG_FILE);
        let text = fs::read_to_string(&cpath).map_err(|e| Error::io(&cpath, e))?;
        let config = RunConfig::from_toml_with_overrides(&text, &[])?;
        let sub = Vocab::load(&dir.join(SUBWORD_VOCAB_FILE))?;
        let chr = Vocab::load(&dir.join(CHAR_VOCAB_FILE))?;
        let labels = LabelSet::load(&dir.join(LABELS_FILE))?;
        let mut m = Self::new(config, sub, chr, labels)?;
        load_checkpoint(dir)?.restore(&mut m.store)?;
        Ok(m)
    }
}
