//! Dense tensors, reverse-mode differentiation, optimization and the
//! finite-difference oracle everything else is checked against.

pub mod checkpoint;
pub mod gradcheck;
pub(crate) mod linalg;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use checkpoint::Container;
pub use gradcheck::{grad_check, grad_check_params, GradCheckReport};
pub use linalg::{cosine_sim, dot, norm, normalize};
pub use optim::{clip_grad_norm, validate_groups, AdamW, ParamGroup};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{ParamId, ParamStore, Tensor};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The crate-wide deterministic generator.
pub type Rng64 = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> Rng64 {
    ChaCha8Rng::seed_from_u64(seed)
}
