//! Fixtures shared by the benchmarks.

use entangler_core::{build_vocabs, tokenize_pair, EntanglementModel, ModelConfig, ParamStore, TokenizedPair, Vocab};
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const WORDS: [&str; 16] = [
    "the",
    "model",
    "reads",
    "characters",
    "and",
    "subwords",
    "together",
    "while",
    "attention",
    "flows",
    "between",
    "both",
    "streams",
    "of",
    "tokens",
    "quickly",
];

/// `n` pseudo-random sentences of `len` words.
pub fn sentences(n: usize, len: usize, seed: u64) -> Vec<Vec<String>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| (0..len).map(|_| WORDS.choose(&mut rng).unwrap().to_string()).collect())
        .collect()
}

pub struct Fixture {
    pub store: ParamStore,
    pub model: EntanglementModel,
    pub sub: Vocab,
    pub chr: Vocab,
    pub pairs: Vec<TokenizedPair>,
}

pub fn fixture(config: ModelConfig, batch: usize, len: usize) -> Fixture {
    let corpus = sentences(64, len, 1);
    let (sub, chr) = build_vocabs(&corpus, 100).unwrap();
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let model = EntanglementModel::new(&mut store, config, sub.len(), chr.len(), &mut rng).unwrap();
    let pairs = corpus[..batch]
        .iter()
        .map(|w| tokenize_pair(w, &sub, &chr).unwrap())
        .collect();
    Fixture {
        store,
        model,
        sub,
        chr,
        pairs,
    }
}
