//! Transformer building blocks shared by the backbones and the co-attention
//! stacks. Every block is post-norm: `LN(x + sublayer(x))`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Graph, ParamId, ParamStore, Var};

/// Dropout state for one forward pass. `None` disables dropout.
pub type TrainRng<'a> = Option<&'a mut ChaCha8Rng>;

fn drop(g: &mut Graph, x: Var, rate: f64, rng: &mut TrainRng<'_>) -> Var {
    match rng {
        Some(r) if rate > 0.0 => g.dropout(x, rate, *r),
        _ => x,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            weight: store.add_trunc_normal(format!("{name}.w"), &[fan_in, fan_out], std, rng),
            bias: store.add_full(format!("{name}.b"), &[fan_out], 0.0),
        }
    }

    pub fn forward(&self, g: &mut Graph, s: &ParamStore, x: Var) -> Var {
        let w = g.param(s, self.weight);
        let b = g.param(s, self.bias);
        g.linear(x, w, b)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.weight, self.bias]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gamma: store.add_full(format!("{name}.gamma"), &[d], 1.0),
            beta: store.add_full(format!("{name}.beta"), &[d], 0.0),
        }
    }

    pub fn forward(&self, g: &mut Graph, s: &ParamStore, x: Var) -> Var {
        let gm = g.param(s, self.gamma);
        let bt = g.param(s, self.beta);
        g.layer_norm(x, gm, bt)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.gamma, self.beta]
    }
}

/// Multi-head attention with separate query and key/value sources.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d: usize, heads: usize, std: f64, rng: &mut R) -> Self {
        Self {
            query: Linear::new(store, &format!("{name}.q"), d, d, std, rng),
            key: Linear::new(store, &format!("{name}.k"), d, d, std, rng),
            value: Linear::new(store, &format!("{name}.v"), d, d, std, rng),
            output: Linear::new(store, &format!("{name}.o"), d, d, std, rng),
            heads,
        }
    }

    /// `xq` is `(B, Lq, d)`, `xkv` is `(B, Lk, d)`, `kv_mask` is `(B, Lk)`.
    pub fn forward(&self, g: &mut Graph, s: &ParamStore, xq: Var, xkv: Var, kv_mask: &[bool]) -> Var {
        let q = self.query.forward(g, s, xq);
        let k = self.key.forward(g, s, xkv);
        let v = self.value.forward(g, s, xkv);
        let a = g.attention(q, k, v, kv_mask, self.heads);
        self.output.forward(g, s, a)
    }

    pub fn params(&self) -> Vec<ParamId> {
        [&self.query, &self.key, &self.value, &self.output]
            .iter()
            .flat_map(|l| l.params())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d: usize, ffn: usize, std: f64, rng: &mut R) -> Self {
        Self {
            inner: Linear::new(store, &format!("{name}.ff1"), d, ffn, std, rng),
            outer: Linear::new(store, &format!("{name}.ff2"), ffn, d, std, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, s: &ParamStore, x: Var) -> Var {
        let h = self.inner.forward(g, s, x);
        let h = g.gelu(h);
        self.outer.forward(g, s, h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.inner.params();
        p.extend(self.outer.params());
        p
    }
}

/// Post-norm transformer block. With a separate key/value source it is a
/// cross-attention block (CO-TRM); otherwise plain self-attention (TRM).
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerBlock {
    pub attention: MultiHeadAttention,
    pub attn_norm: LayerNorm,
    pub ffn: FeedForward,
    pub ffn_norm: LayerNorm,
    pub dropout: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockDims {
    pub hidden: usize,
    pub heads: usize,
    pub ffn: usize,
    pub dropout: f64,
    pub init_std: f64,
}

impl TransformerBlock {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dims: BlockDims, rng: &mut R) -> Self {
        let BlockDims {
            hidden,
            heads,
            ffn,
            dropout,
            init_std,
        } = dims;
        Self {
            attention: MultiHeadAttention::new(store, &format!("{name}.attn"), hidden, heads, init_std, rng),
            attn_norm: LayerNorm::new(store, &format!("{name}.ln1"), hidden),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), hidden, ffn, init_std, rng),
            ffn_norm: LayerNorm::new(store, &format!("{name}.ln2"), hidden),
            dropout,
        }
    }

    /// Self-attention when `kv` is `None`.
    pub fn forward(
        &self,
        g: &mut Graph,
        s: &ParamStore,
        x: Var,
        kv: Option<(Var, &[bool])>,
        self_mask: &[bool],
        rng: &mut TrainRng<'_>,
    ) -> Var {
        let (src, mask) = kv.unwrap_or((x, self_mask));
        let a = self.attention.forward(g, s, x, src, mask);
        let a = drop(g, a, self.dropout, rng);
        let h = g.add(x, a);
        let h = self.attn_norm.forward(g, s, h);
        let f = self.ffn.forward(g, s, h);
        let f = drop(g, f, self.dropout, rng);
        let o = g.add(h, f);
        self.ffn_norm.forward(g, s, o)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.attention.params();
        p.extend(self.attn_norm.params());
        p.extend(self.ffn.params());
        p.extend(self.ffn_norm.params());
        p
    }
}
