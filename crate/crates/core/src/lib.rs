//! Multimodal neural machine translation with conditional-GRU decoders.
//!
//! Two decoder variants share one bidirectional GRU encoder:
//!
//! * [`Variant::Baseline`]: a conditional GRU (GRU, attention, GRU) whose
//!   attention context is multiplied by a projection of a pooled image vector.
//! * [`Variant::DeepGru`]: the same two blocks over text only, plus a third GRU
//!   that encodes the image with its surrounding context, gated-tanh
//!   activations, and separate textual and visual output projections.
//!
//! Everything runs on a small define-by-run autodiff [`Tape`] in `f64`.
//! Around the models sit BPE preprocessing, an ADAM trainer with early
//! stopping, beam search with ensembling, and corpus BLEU.

pub mod bpe;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod search;
pub mod tape;
pub mod tensor;
pub mod toy;
pub mod trainer;
pub mod vocab;

pub use error::{Error, Result};
pub use model::{Batch, DropoutRates, Model, ModelConfig, ModelParams, Variant};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

/// The single pseudo-random stream of a run. Draw order within a run is
/// parameter initialisation, then batch shuffles interleaved with dropout.
pub type Prng = rand_chacha::ChaCha8Rng;

pub fn seeded(seed: u64) -> Prng {
    use rand::SeedableRng;
    Prng::seed_from_u64(seed)
}
