//! Word-level sequence labeling and CLS-based classification heads.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::entangle::EntangledStates;
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::tokenize::TokenizedPair;

/// Which entangled stream feeds a head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Side {
    #[default]
    #[serde(rename = "subw")]
    Subword,
    #[serde(rename = "char")]
    Char,
}

impl FromStr for Side {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "subw" | "subword" => Ok(Side::Subword),
            "char" | "character" => Ok(Side::Char),
            other => Err(Error::Config(format!("unknown side {other:?}"))),
        }
    }
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Side::Subword => "subw",
            Side::Char => "char",
        })
    }
}

impl EntangledStates {
    /// Hidden states and padded length of one side.
    pub fn side(&self, side: Side) -> (Var, usize) {
        match side {
            Side::Subword => (self.subword, self.subword_len),
            Side::Char => (self.char, self.char_len),
        }
    }
}

/// `(d, K)` projection from token states to label logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LabelingHead {
    pub weight: ParamId,
    pub num_labels: usize,
}

impl LabelingHead {
    pub fn new<R: Rng>(store: &mut ParamStore, d: usize, num_labels: usize, std: f64, rng: &mut R) -> Result<Self> {
        if num_labels < 2 {
            return Err(Error::Config(format!("need at least 2 labels, got {num_labels}")));
        }
        Ok(Self {
            weight: store.add_trunc_normal("head.labeling.w", &[d, num_labels], std, rng),
            num_labels,
        })
    }
}

/// Flat row index of every word's first token on `side`, over the batch.
pub fn first_token_rows(pairs: &[&TokenizedPair], side: Side, padded_len: usize) -> Vec<usize> {
    pairs
        .iter()
        .enumerate()
        .flat_map(|(b, p)| {
            let firsts = match side {
                Side::Subword => &p.first_subword_of_word,
                Side::Char => &p.first_char_of_word,
            };
            firsts.iter().map(move |&i| b * padded_len + i)
        })
        .collect()
}

/// Word-level logits `(total words, K)`: each word's first-token state on
/// `side`, projected by the head. Row-wise softmax of this equals gathering
/// the softmaxed token-level scores at the first tokens.
pub fn word_logits(
    g: &mut Graph,
    s: &ParamStore,
    states: &EntangledStates,
    side: Side,
    pairs: &[&TokenizedPair],
    head: &LabelingHead,
) -> Result<Var> {
    if pairs.len() != states.batch {
        return Err(Error::Usage(format!(
            "{} alignments for a batch of {}",
            pairs.len(),
            states.batch
        )));
    }
    let (h, len) = states.side(side);
    let rows = first_token_rows(pairs, side, len);
    let picked = g.gather_rows(h, &rows);
    let w = g.param(s, head.weight);
    Ok(g.matmul(picked, w))
}

/// Word-level probabilities `(total words, K)`.
pub fn word_probs(
    g: &mut Graph,
    s: &ParamStore,
    states: &EntangledStates,
    side: Side,
    pairs: &[&TokenizedPair],
    head: &LabelingHead,
) -> Result<Var> {
    let logits = word_logits(g, s, states, side, pairs, head)?;
    Ok(g.softmax(logits))
}

/// Mean NLL over words whose label is `Some`. Computed from logits through a
/// fused log-softmax; with every word masked the loss is 0.
pub fn labeling_loss(g: &mut Graph, word_logits: Var, labels: &[Option<usize>]) -> Var {
    g.cross_entropy(word_logits, labels)
}

/// Mean NLL of `labels` under an already normalized `(N, K)` probability
/// table. Masked rows (`None`) are skipped; all-masked gives 0.
pub fn nll_from_probs(probs: &Tensor, labels: &[Option<usize>]) -> f64 {
    let (sum, n) = labels
        .iter()
        .enumerate()
        .filter_map(|(r, l)| l.map(|l| -probs.row(r)[l].ln()))
        .fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Row-wise argmax; ties go to the lowest class index.
pub fn predict_labels(probs: &Tensor) -> Vec<usize> {
    (0..probs.rows())
        .map(|r| {
            let row = probs.row(r);
            let mut best = 0;
            for (k, &p) in row.iter().enumerate() {
                if p > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// Pooler `(d, d)` with tanh, then a `(d, K)` classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClassificationHead {
    pub pooler: ParamId,
    pub classifier: ParamId,
    pub num_labels: usize,
}

impl ClassificationHead {
    pub fn new<R: Rng>(store: &mut ParamStore, d: usize, num_labels: usize, std: f64, rng: &mut R) -> Result<Self> {
        if num_labels < 2 {
            return Err(Error::Config(format!("need at least 2 labels, got {num_labels}")));
        }
        Ok(Self {
            pooler: store.add_trunc_normal("head.cls.pooler", &[d, d], std, rng),
            classifier: store.add_trunc_normal("head.cls.classifier", &[d, num_labels], std, rng),
            num_labels,
        })
    }
}

/// Class logits `(batch, K)` from each example's CLS state (position 0).
pub fn classify_logits(
    g: &mut Graph,
    s: &ParamStore,
    states: &EntangledStates,
    side: Side,
    head: &ClassificationHead,
) -> Var {
    let (h, len) = states.side(side);
    let rows: Vec<usize> = (0..states.batch).map(|b| b * len).collect();
    let cls = g.gather_rows(h, &rows);
    let wp = g.param(s, head.pooler);
    let pooled = g.matmul(cls, wp);
    let pooled = g.tanh(pooled);
    let wc = g.param(s, head.classifier);
    g.matmul(pooled, wc)
}

pub fn classify(g: &mut Graph, s: &ParamStore, states: &EntangledStates, side: Side, head: &ClassificationHead) -> Var {
    let logits = classify_logits(g, s, states, side, head);
    g.softmax(logits)
}

/// Mean NLL over the batch; identical contract to [`labeling_loss`].
pub fn classification_loss(g: &mut Graph, logits: Var, labels: &[Option<usize>]) -> Var {
    g.cross_entropy(logits, labels)
}
