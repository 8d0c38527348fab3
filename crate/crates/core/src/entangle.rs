//! Co-attention stacks that entangle subword and character states.
//!
//! Each side owns `m` modules of (CO-TRM, TRM). Module `i` on the subword
//! side queries the character states of layer `i` and vice versa; both
//! sides read the same layer-`i` inputs, so the update is simultaneous.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{sinusoidal_pe, EncoderOutput};
use crate::error::{Error, Result};
use crate::layers::{BlockDims, TrainRng, TransformerBlock};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::tokenize::TokenizedPair;

/// How positions are translated between granularities before sinusoidal
/// PEs are added to the backbone outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PeStrategy {
    #[default]
    None,
    /// Characters inherit the position of their subword.
    A,
    /// Subwords inherit the position of their first character.
    B,
    /// Subwords take the mean position of their characters.
    C,
}

impl FromStr for PeStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(Self::None),
            "a" => Ok(Self::A),
            "b" => Ok(Self::B),
            "c" => Ok(Self::C),
            other => Err(Error::Config(format!("unknown pe_strategy {other:?}"))),
        }
    }
}

impl fmt::Display for PeStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::A => "a",
            Self::B => "b",
            Self::C => "c",
        })
    }
}

/// Positions for every subword and character, specials included.
///
/// CLS sits at 0 and real tokens count from 1, matching the usual 1-based
/// presentation of the alignment tables. Returns `None` for
/// [`PeStrategy::None`].
pub fn pe_indices(pair: &TokenizedPair, strategy: PeStrategy) -> Option<(Vec<f64>, Vec<f64>)> {
    let ns = pair.num_subwords();
    let nc = pair.num_chars();
    match strategy {
        PeStrategy::None => None,
        PeStrategy::A => {
            let sub: Vec<f64> = (0..ns).map(|i| i as f64).collect();
            let chars = pair.char_to_subword.iter().map(|&s| sub[s]).collect();
            Some((sub, chars))
        }
        PeStrategy::B => {
            let chars: Vec<f64> = (0..nc).map(|j| j as f64).collect();
            let sub = pair.subword_char_span.iter().map(|&(a, _)| chars[a]).collect();
            Some((sub, chars))
        }
        PeStrategy::C => {
            let chars: Vec<f64> = (0..nc).map(|j| j as f64).collect();
            let sub = pair
                .subword_char_span
                .iter()
                .map(|&(a, b)| chars[a..b].iter().sum::<f64>() / (b - a) as f64)
                .collect();
            Some((sub, chars))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoAttentionConfig {
    pub num_modules: usize,
    pub hidden_size: usize,
    pub num_heads: usize,
    pub ffn_size: usize,
    pub dropout: f64,
    pub pe_strategy: PeStrategy,
    pub init_std: f64,
}

impl CoAttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_modules == 0 {
            return Err(Error::Config("num_coattention must be at least 1".into()));
        }
        if self.num_heads == 0 || !self.hidden_size.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "hidden size {} not divisible by {} heads",
                self.hidden_size, self.num_heads
            )));
        }
        if self.pe_strategy != PeStrategy::None && !self.hidden_size.is_multiple_of(2) {
            return Err(Error::Config("sinusoidal PEs need an even hidden size".into()));
        }
        Ok(())
    }
}

/// One CO-TRM block followed by one TRM block.
#[derive(Debug, Clone)]
pub struct CoAttentionModule {
    pub co_trm: TransformerBlock,
    pub trm: TransformerBlock,
}

impl CoAttentionModule {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, dims: BlockDims, rng: &mut R) -> Self {
        Self {
            co_trm: TransformerBlock::new(store, &format!("{name}.cotrm"), dims, rng),
            trm: TransformerBlock::new(store, &format!("{name}.trm"), dims, rng),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.co_trm.params();
        p.extend(self.trm.params());
        p
    }
}

/// Cross-attention block: queries from `hq`, keys and values from `hkv`.
/// Output has the shape of `hq`.
#[allow(clippy::too_many_arguments)]
pub fn co_trm(
    block: &TransformerBlock,
    g: &mut Graph,
    s: &ParamStore,
    hq: Var,
    q_mask: &[bool],
    hkv: Var,
    kv_mask: &[bool],
    rng: &mut TrainRng<'_>,
) -> Result<Var> {
    let dq = *g.shape(hq).last().unwrap_or(&0);
    let dk = *g.shape(hkv).last().unwrap_or(&0);
    if dq != dk {
        return Err(Error::Config(format!(
            "co-attention width mismatch: queries {dq}, keys {dk}"
        )));
    }
    Ok(block.forward(g, s, hq, Some((hkv, kv_mask)), q_mask, rng))
}

/// The pair `(H^s_*, H^c_*)` plus masks, both `(batch, len, d)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntangledStates {
    pub subword: Var,
    pub char: Var,
    pub subword_mask: Vec<bool>,
    pub char_mask: Vec<bool>,
    pub batch: usize,
    pub subword_len: usize,
    pub char_len: usize,
}

#[derive(Debug, Clone)]
pub struct CoAttentionStack {
    pub config: CoAttentionConfig,
    pub subword_side: Vec<CoAttentionModule>,
    pub char_side: Vec<CoAttentionModule>,
}

impl CoAttentionStack {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, config: CoAttentionConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let dims = BlockDims {
            hidden: config.hidden_size,
            heads: config.num_heads,
            ffn: config.ffn_size,
            dropout: config.dropout,
            init_std: config.init_std,
        };
        let subword_side = (0..config.num_modules)
            .map(|i| CoAttentionModule::new(store, &format!("{name}.sub.{i}"), dims, rng))
            .collect();
        let char_side = (0..config.num_modules)
            .map(|i| CoAttentionModule::new(store, &format!("{name}.char.{i}"), dims, rng))
            .collect();
        Ok(Self {
            config,
            subword_side,
            char_side,
        })
    }

    pub fn subword_params(&self) -> Vec<ParamId> {
        self.subword_side.iter().flat_map(CoAttentionModule::params).collect()
    }

    pub fn char_params(&self) -> Vec<ParamId> {
        self.char_side.iter().flat_map(CoAttentionModule::params).collect()
    }

    /// Runs the `m` modules on raw `(B, L, d)` states, without PEs.
    #[allow(clippy::too_many_arguments)]
    pub fn run_modules(
        &self,
        g: &mut Graph,
        s: &ParamStore,
        hs0: Var,
        sub_mask: &[bool],
        hc0: Var,
        char_mask: &[bool],
        mut rng: TrainRng<'_>,
    ) -> Result<(Var, Var)> {
        let (mut hs, mut hc) = (hs0, hc0);
        for (sm, cm) in self.subword_side.iter().zip(&self.char_side) {
            let cs = co_trm(&sm.co_trm, g, s, hs, sub_mask, hc, char_mask, &mut rng)?;
            let cc = co_trm(&cm.co_trm, g, s, hc, char_mask, hs, sub_mask, &mut rng)?;
            hs = sm.trm.forward(g, s, cs, None, sub_mask, &mut rng);
            hc = cm.trm.forward(g, s, cc, None, char_mask, &mut rng);
        }
        Ok((hs, hc))
    }

    /// Adds the configured sinusoidal PEs to the backbone outputs once, then
    /// runs every module. `pairs` supplies the alignment for each batch row
    /// and is required whenever a PE strategy is selected.
    pub fn forward(
        &self,
        g: &mut Graph,
        s: &ParamStore,
        hs0: &EncoderOutput,
        hc0: &EncoderOutput,
        pairs: Option<&[&TokenizedPair]>,
        rng: TrainRng<'_>,
    ) -> Result<EntangledStates> {
        if hs0.batch != hc0.batch {
            return Err(Error::Usage("subword and character batches differ".into()));
        }
        let d = self.config.hidden_size;
        for out in [hs0, hc0] {
            if g.shape(out.hidden).last() != Some(&d) {
                return Err(Error::Config(format!(
                    "backbone width {:?} does not match co-attention width {d}",
                    g.shape(out.hidden)
                )));
            }
        }
        let (mut hs, mut hc) = (hs0.hidden, hc0.hidden);
        if self.config.pe_strategy != PeStrategy::None {
            let pairs = pairs.ok_or_else(|| {
                Error::Config(format!("pe_strategy {} needs alignment maps", self.config.pe_strategy))
            })?;
            if pairs.len() != hs0.batch {
                return Err(Error::Config("one alignment per batch row required".into()));
            }
            let (sub_pe, char_pe) = self.pe_tensors(pairs, hs0.len, hc0.len)?;
            let sp = g.constant(sub_pe);
            let cp = g.constant(char_pe);
            hs = g.add(hs, sp);
            hc = g.add(hc, cp);
        }
        let (hs, hc) = self.run_modules(g, s, hs, &hs0.pad_mask, hc, &hc0.pad_mask, rng)?;
        Ok(EntangledStates {
            subword: hs,
            char: hc,
            subword_mask: hs0.pad_mask.clone(),
            char_mask: hc0.pad_mask.clone(),
            batch: hs0.batch,
            subword_len: hs0.len,
            char_len: hc0.len,
        })
    }

    /// Padded `(B, L, d)` PE tensors for both sides; pad rows are zero.
    fn pe_tensors(&self, pairs: &[&TokenizedPair], sub_len: usize, char_len: usize) -> Result<(Tensor, Tensor)> {
        let d = self.config.hidden_size;
        let mut sub = Tensor::zeros(&[pairs.len(), sub_len, d]);
        let mut chars = Tensor::zeros(&[pairs.len(), char_len, d]);
        for (b, pair) in pairs.iter().enumerate() {
            let (sp, cp) = pe_indices(pair, self.config.pe_strategy).expect("strategy set");
            if sp.len() > sub_len || cp.len() > char_len {
                return Err(Error::Config("alignment longer than the padded batch".into()));
            }
            let spe = sinusoidal_pe(&sp, d)?;
            let cpe = sinusoidal_pe(&cp, d)?;
            sub.data_mut()[b * sub_len * d..b * sub_len * d + spe.len()].copy_from_slice(spe.data());
            chars.data_mut()[b * char_len * d..b * char_len * d + cpe.len()].copy_from_slice(cpe.data());
        }
        Ok((sub, chars))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenize::{build_vocabs, tokenize_pair};

    fn pair(text: &str, merges: usize) -> TokenizedPair {
        let words: Vec<String> = text.split_whitespace().map(String::from).collect();
        let (sub, ch) = build_vocabs(std::slice::from_ref(&words), merges).unwrap();
        tokenize_pair(&words, &sub, &ch).unwrap()
    }

    #[test]
    fn a_dog_sat_positions() {
        // Four merges turn "dog" and "sat" into single subwords.
        let words: Vec<String> = ["A", "dog", "sat"].map(String::from).to_vec();
        let corpus: Vec<String> = "A dog sat dog sat".split(' ').map(String::from).collect();
        let (sub, ch) = build_vocabs(&[corpus], 4).unwrap();
        let p = tokenize_pair(&words, &sub, &ch).unwrap();
        assert_eq!(p.num_subwords(), 5);
        let (sa, ca) = pe_indices(&p, PeStrategy::A).unwrap();
        assert_eq!(sa[1..4], [1.0, 2.0, 3.0]);
        assert_eq!(ca[1..8], [1.0, 2.0, 2.0, 2.0, 3.0, 3.0, 3.0]);
        let (sb, cb) = pe_indices(&p, PeStrategy::B).unwrap();
        assert_eq!(sb[1..4], [1.0, 2.0, 5.0]);
        assert_eq!(cb[1..8], [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]);
        let (sc, cc) = pe_indices(&p, PeStrategy::C).unwrap();
        assert_eq!(sc[1..4], [1.0, (2.0 + 3.0 + 4.0) / 3.0, (5.0 + 6.0 + 7.0) / 3.0]);
        assert_eq!(cc, cb);
        // specials
        assert_eq!((sa[0], sa[4], ca[8]), (0.0, 4.0, 4.0));
        assert_eq!((sb[4], sc[4]), (8.0, 8.0));
    }

    #[test]
    fn single_char_words_b_equals_c() {
        let p = pair("a b c", 0);
        assert_eq!(
            pe_indices(&p, PeStrategy::B).unwrap().0,
            pe_indices(&p, PeStrategy::C).unwrap().0
        );
    }

    #[test]
    fn none_has_no_positions() {
        assert!(pe_indices(&pair("a", 0), PeStrategy::None).is_none());
    }

    #[test]
    fn parse_strategy() {
        assert_eq!("C".parse::<PeStrategy>().unwrap(), PeStrategy::C);
        assert_eq!("none".parse::<PeStrategy>().unwrap(), PeStrategy::None);
        assert!("d".parse::<PeStrategy>().is_err());
    }

    #[test]
    fn zero_modules_rejected() {
        let c = CoAttentionConfig {
            num_modules: 0,
            hidden_size: 8,
            num_heads: 2,
            ffn_size: 8,
            dropout: 0.0,
            pe_strategy: PeStrategy::None,
            init_std: 0.02,
        };
        assert!(c.validate().is_err());
    }
}
