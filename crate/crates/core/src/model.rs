//! The full entanglement model: two backbones feeding the co-attention
//! stacks.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{Encoder, EncoderConfig, EncoderOutput, PaddedIds};
use crate::entangle::{CoAttentionConfig, CoAttentionStack, EntangledStates, PeStrategy};
use crate::error::{Error, Result};
use crate::layers::TrainRng;
use crate::tensor::{Graph, ParamStore};
use crate::tokenize::{LengthCaps, TokenizedPair};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub hidden_size: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_size: usize,
    pub num_coattention: usize,
    pub pe_strategy: PeStrategy,
    pub dropout: f64,
    pub max_subwords: usize,
    pub max_chars: usize,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_size: 64,
            num_layers: 2,
            num_heads: 4,
            ffn_size: 256,
            num_coattention: 1,
            pe_strategy: PeStrategy::None,
            dropout: 0.1,
            max_subwords: 128,
            max_chars: 512,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn encoder(&self, vocab_size: usize, max_len: usize) -> EncoderConfig {
        EncoderConfig {
            vocab_size,
            hidden_size: self.hidden_size,
            num_layers: self.num_layers,
            num_heads: self.num_heads,
            ffn_size: self.ffn_size,
            dropout: self.dropout,
            max_len,
            init_std: self.init_std,
        }
    }

    pub fn coattention(&self) -> CoAttentionConfig {
        CoAttentionConfig {
            num_modules: self.num_coattention,
            hidden_size: self.hidden_size,
            num_heads: self.num_heads,
            ffn_size: self.ffn_size,
            dropout: self.dropout,
            pe_strategy: self.pe_strategy,
            init_std: self.init_std,
        }
    }

    pub fn caps(&self) -> LengthCaps {
        LengthCaps {
            max_subwords: self.max_subwords,
            max_chars: self.max_chars,
        }
    }
}

/// Padded ids for both granularities plus the alignments behind them.
#[derive(Debug, Clone)]
pub struct PairBatch<'a> {
    pub pairs: Vec<&'a TokenizedPair>,
    pub subwords: PaddedIds,
    pub chars: PaddedIds,
}

impl<'a> PairBatch<'a> {
    pub fn new(pairs: Vec<&'a TokenizedPair>) -> Self {
        let sub: Vec<&[usize]> = pairs.iter().map(|p| p.subword_ids.as_slice()).collect();
        let chr: Vec<&[usize]> = pairs.iter().map(|p| p.char_ids.as_slice()).collect();
        Self {
            subwords: PaddedIds::from_sequences(&sub),
            chars: PaddedIds::from_sequences(&chr),
            pairs,
        }
    }

    /// Same alignment, different input ids (e.g. after masking).
    pub fn with_inputs(&self, subwords: PaddedIds, chars: PaddedIds) -> Self {
        Self {
            pairs: self.pairs.clone(),
            subwords,
            chars,
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Backbone outputs alongside the entangled states.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub subword_backbone: EncoderOutput,
    pub char_backbone: EncoderOutput,
    pub states: EntangledStates,
}

#[derive(Debug, Clone)]
pub struct EntanglementModel {
    pub config: ModelConfig,
    pub subword_encoder: Encoder,
    pub char_encoder: Encoder,
    pub coattention: CoAttentionStack,
}

impl EntanglementModel {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        config: ModelConfig,
        subword_vocab: usize,
        char_vocab: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if config.hidden_size == 0 {
            return Err(Error::Config("hidden_size must be positive".into()));
        }
        let subword_encoder = Encoder::new(
            store,
            "encoder.sub",
            config.encoder(subword_vocab, config.max_subwords),
            rng,
        )?;
        let char_encoder = Encoder::new(store, "encoder.char", config.encoder(char_vocab, config.max_chars), rng)?;
        let coattention = CoAttentionStack::new(store, "coattn", config.coattention(), rng)?;
        Ok(Self {
            config,
            subword_encoder,
            char_encoder,
            coattention,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        s: &ParamStore,
        batch: &PairBatch<'_>,
        mut rng: TrainRng<'_>,
    ) -> Result<ForwardOutput> {
        let hs0 = self.subword_encoder.encode(g, s, &batch.subwords, rng.as_deref_mut())?;
        let hc0 = self.char_encoder.encode(g, s, &batch.chars, rng.as_deref_mut())?;
        let states = self.coattention.forward(g, s, &hs0, &hc0, Some(&batch.pairs), rng)?;
        Ok(ForwardOutput {
            subword_backbone: hs0,
            char_backbone: hc0,
            states,
        })
    }
}
