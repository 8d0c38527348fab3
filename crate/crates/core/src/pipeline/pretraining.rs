//! The joint pretraining loop.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::data::load_corpus;
use super::task::{CHAR_VOCAB_FILE, CONFIG_FILE, SUBWORD_VOCAB_FILE};
use super::train::{clip_grad_norm, dump_non_finite, global_grad_norm, resolve_vocabs, REPORT_FILE};
use crate::error::{Error, Result};
use crate::model::{EntanglementModel, PairBatch};
use crate::pretrain::{pretrain_step, PretrainHeads};
use crate::tensor::{save_checkpoint, Adam, AdamConfig, Graph, LinearSchedule, ParamStore};
use crate::tokenize::{tokenize_pair_capped, TokenizedPair};

pub const PRETRAINED_DIR: &str = "pretrained";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub step: usize,
    pub total: f64,
    pub matching: f64,
    pub subword_mlm: f64,
    pub char_mlm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub seed: u64,
    /// Matching loss of a model that spreads each character uniformly over
    /// its sentence's real subwords, averaged over characters.
    pub uniform_matching: f64,
    pub steps: Vec<StepLosses>,
}

impl PretrainReport {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("report serializes")
    }
}

/// Mean over word characters of `ln(n)`, where `n` counts the non-special
/// subwords of the character's sentence.
pub fn uniform_matching_loss(pairs: &[TokenizedPair]) -> f64 {
    let (mut sum, mut count) = (0.0, 0usize);
    for p in pairs {
        let ns = p.subword_to_word.iter().filter(|w| w.is_some()).count();
        let nc = p.char_to_word.iter().filter(|w| w.is_some()).count();
        sum += nc as f64 * (ns as f64).ln();
        count += nc;
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Pretrains a fresh model on `corpus` and writes
/// `<checkpoint_dir>/pretrained/` plus a loss report.
pub fn pretrain_on(cfg: &RunConfig, corpus: &[Vec<String>]) -> Result<PretrainReport> {
    cfg.validate()?;
    log::info!("effective config:\n{}", cfg.to_toml());
    if corpus.is_empty() {
        return Err(Error::Input("pretraining corpus is empty".into()));
    }
    let (sub, chr) = resolve_vocabs(cfg, corpus)?;
    let mc = cfg.model();
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::new();
    let model = EntanglementModel::new(&mut store, mc, sub.len(), chr.len(), &mut init_rng)?;
    let heads = PretrainHeads::new(
        &mut store,
        mc.hidden_size,
        sub.len(),
        chr.len(),
        mc.init_std,
        &mut init_rng,
    );
    let pairs = corpus
        .iter()
        .map(|w| tokenize_pair_capped(w, &sub, &chr, mc.caps()))
        .collect::<Result<Vec<_>>>()?;

    let bs = cfg.batch_size;
    let total = cfg.max_steps.unwrap_or(cfg.epochs() * pairs.len().div_ceil(bs));
    let mut adam = Adam::new(
        &store,
        AdamConfig::default(),
        LinearSchedule::new(cfg.lr, cfg.warmup_steps, total)?,
    );
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut drop_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
    let mut mask_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(3));

    let mut steps = Vec::with_capacity(total);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    'outer: loop {
        order.shuffle(&mut order_rng);
        for idx in order.chunks(bs) {
            if steps.len() >= total {
                break 'outer;
            }
            let batch = PairBatch::new(idx.iter().map(|&i| &pairs[i]).collect());
            let mut g = Graph::new();
            let l = pretrain_step(
                &mut g,
                &store,
                &model,
                &heads,
                &batch,
                cfg.mask_rate,
                &mut mask_rng,
                Some(&mut drop_rng),
            )?;
            let rec = StepLosses {
                step: steps.len(),
                total: g.value(l.total).item(),
                matching: g.value(l.matching).item(),
                subword_mlm: g.value(l.subword_mlm).item(),
                char_mlm: g.value(l.char_mlm).item(),
            };
            store.zero_grad();
            g.backward(l.total, &mut store)?;
            if !rec.total.is_finite() || !global_grad_norm(&store).is_finite() {
                let path = dump_non_finite(&cfg.checkpoint_dir, rec.step, rec.total, &store);
                return Err(Error::NonFiniteLoss {
                    step: rec.step,
                    detail: format!("loss={}, dump at {}", rec.total, path.display()),
                });
            }
            if let Some(max) = cfg.max_grad_norm {
                clip_grad_norm(&mut store, max);
            }
            adam.step(&mut store);
            if rec.step.is_multiple_of(50) {
                log::info!(
                    "step {} total {:.4} match {:.4} mlm {:.4}/{:.4}",
                    rec.step,
                    rec.total,
                    rec.matching,
                    rec.subword_mlm,
                    rec.char_mlm
                );
            }
            steps.push(rec);
        }
    }

    let dir = cfg.checkpoint_dir.join(PRETRAINED_DIR);
    save_checkpoint(&dir, &store, Some(&adam))?;
    write(&dir.join(CONFIG_FILE), &cfg.to_toml())?;
    sub.save(&dir.join(SUBWORD_VOCAB_FILE))?;
    chr.save(&dir.join(CHAR_VOCAB_FILE))?;
    let report = PretrainReport {
        seed: cfg.seed,
        uniform_matching: uniform_matching_loss(&pairs),
        steps,
    };
    write(&cfg.checkpoint_dir.join(REPORT_FILE), &report.to_toml())?;
    Ok(report)
}

pub fn pretrain(cfg: &RunConfig) -> Result<PretrainReport> {
    let path = cfg
        .train_file
        .as_ref()
        .ok_or_else(|| Error::Config("train_file is not set".into()))?;
    pretrain_on(cfg, &load_corpus(path)?)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
