//! Backbone encoders: token embedding plus learned absolute positions,
//! followed by a stack of post-norm self-attention blocks.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{BlockDims, TrainRng, TransformerBlock};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::tokenize::SpecialIds;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub hidden_size: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_size: usize,
    pub dropout: f64,
    pub max_len: usize,
    pub init_std: f64,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || !self.hidden_size.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "hidden size {} not divisible by {} heads",
                self.hidden_size, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.vocab_size == 0 || self.max_len == 0 {
            return Err(Error::Config("vocab size and max length must be positive".into()));
        }
        Ok(())
    }

    pub(crate) fn block_dims(&self) -> BlockDims {
        BlockDims {
            hidden: self.hidden_size,
            heads: self.num_heads,
            ffn: self.ffn_size,
            dropout: self.dropout,
            init_std: self.init_std,
        }
    }
}

/// `PE[p, 2i] = sin(p / 10000^(2i/d))`, `PE[p, 2i+1] = cos(...)`.
///
/// Positions may be fractional. Returns `(positions.len(), d)`.
pub fn sinusoidal_pe(positions: &[f64], d: usize) -> Result<Tensor> {
    if !d.is_multiple_of(2) {
        return Err(Error::Config(format!("sinusoidal PE needs an even width, got {d}")));
    }
    let mut data = Vec::with_capacity(positions.len() * d);
    for &p in positions {
        for i in 0..d / 2 {
            let angle = p / 10000f64.powf(2.0 * i as f64 / d as f64);
            data.push(angle.sin());
            data.push(angle.cos());
        }
    }
    Tensor::new(vec![positions.len(), d], data)
}

/// Row-major `(batch, len)` ids with a validity mask (false = padding).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PaddedIds {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
    pub batch: usize,
    pub len: usize,
}

impl PaddedIds {
    /// Right-pads every sequence with PAD to the longest length.
    pub fn from_sequences(seqs: &[&[usize]]) -> Self {
        let len = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(seqs.len() * len);
        let mut mask = Vec::with_capacity(seqs.len() * len);
        for s in seqs {
            ids.extend_from_slice(s);
            mask.extend(std::iter::repeat_n(true, s.len()));
            ids.extend(std::iter::repeat_n(SpecialIds::FIXED.pad, len - s.len()));
            mask.extend(std::iter::repeat_n(false, len - s.len()));
        }
        Self {
            ids,
            mask,
            batch: seqs.len(),
            len,
        }
    }
}

/// `hidden` is `(batch, len, d)` on the graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderOutput {
    pub hidden: Var,
    pub pad_mask: Vec<bool>,
    pub batch: usize,
    pub len: usize,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub token_embedding: ParamId,
    pub position_embedding: ParamId,
    pub blocks: Vec<TransformerBlock>,
}

impl Encoder {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, config: EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.hidden_size;
        let token_embedding =
            store.add_trunc_normal(format!("{name}.embed"), &[config.vocab_size, d], config.init_std, rng);
        let position_embedding =
            store.add_trunc_normal(format!("{name}.pos"), &[config.max_len, d], config.init_std, rng);
        let blocks = (0..config.num_layers)
            .map(|l| TransformerBlock::new(store, &format!("{name}.layer{l}"), config.block_dims(), rng))
            .collect();
        Ok(Self {
            config,
            token_embedding,
            position_embedding,
            blocks,
        })
    }

    pub fn encode(
        &self,
        g: &mut Graph,
        s: &ParamStore,
        input: &PaddedIds,
        mut rng: TrainRng<'_>,
    ) -> Result<EncoderOutput> {
        if input.len > self.config.max_len {
            return Err(Error::Input(format!(
                "sequence length {} exceeds encoder max_len {}",
                input.len, self.config.max_len
            )));
        }
        if let Some(&bad) = input.ids.iter().find(|&&i| i >= self.config.vocab_size) {
            return Err(Error::Input(format!(
                "id {bad} outside vocabulary of size {}",
                self.config.vocab_size
            )));
        }
        let shape = [input.batch, input.len];
        let table = g.param(s, self.token_embedding);
        let tok = g.embedding(table, &input.ids, &shape);
        let positions: Vec<usize> = (0..input.batch).flat_map(|_| 0..input.len).collect();
        let ptable = g.param(s, self.position_embedding);
        let pos = g.embedding(ptable, &positions, &shape);
        let mut h = g.add(tok, pos);
        for block in &self.blocks {
            h = block.forward(g, s, h, None, &input.mask, &mut rng);
        }
        Ok(EncoderOutput {
            hidden: h,
            pad_mask: input.mask.clone(),
            batch: input.batch,
            len: input.len,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = vec![self.token_embedding, self.position_embedding];
        for b in &self.blocks {
            p.extend(b.params());
        }
        p
    }
}
