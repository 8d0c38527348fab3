//! Character/subword entanglement model.
//!
//! Two backbone encoders (subword and character) feed `m` paired
//! co-attention modules whose outputs drive sequence-labeling,
//! classification and pretraining heads. Everything trains from scratch on a
//! small tape-based autodiff core.

pub mod encoder;
pub mod entangle;
pub mod error;
pub mod heads;
pub mod layers;
pub mod model;
pub mod pipeline;
pub mod pretrain;
pub mod tensor;
pub mod tokenize;

pub use encoder::{sinusoidal_pe, Encoder, EncoderConfig, EncoderOutput, PaddedIds};
pub use entangle::{pe_indices, CoAttentionConfig, CoAttentionStack, EntangledStates, PeStrategy};
pub use error::{Error, Result};
pub use heads::{ClassificationHead, LabelingHead, Side};
pub use model::{EntanglementModel, ModelConfig, PairBatch};
pub use pipeline::{RunConfig, Task, TaskModel};
pub use tensor::{Graph, ParamStore, Tensor, Var};
pub use tokenize::{build_vocabs, char_word_labels, tokenize_pair, CharWordLabels, TokenizedPair, Vocab};
