//! Training losses: contrastive (generic), plus the model-based matching,
//! grounded generation and generative objectives.

mod contrastive;
mod generation;
mod matching;

pub use contrastive::*;
pub use generation::*;
pub use matching::*;

use crate::Tensor;

/// One image-text pair as seen by the model-based losses.
#[derive(Clone, Copy, Debug)]
pub struct PairRef<'a> {
    /// Frozen image features `[num_patches × enc_dim]`.
    pub image: &'a Tensor,
    pub concepts: &'a [usize],
    pub caption: &'a [usize],
}
