//! Dense tensors, a reverse-mode tape, gradient checking, Adam and checkpoints.

mod adam;
mod checkpoint;
mod gradcheck;
pub mod kernels;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest, ParamEntry, CHECKPOINT_VERSION};
pub use gradcheck::{grad_check, grad_check_params};
pub use tape::{Grads, OpKind, Tape, Var};
pub use tensor::Tensor;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// The one RNG type used across the crate. Always owned by the caller.
pub type Rng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Mixes a base seed with a stream label into an independent seed (splitmix64).
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Splits off a child generator whose stream is independent of the parent's future output.
pub fn split_rng(rng: &mut Rng) -> Rng {
    ChaCha8Rng::seed_from_u64(rng.next_u64())
}

/// Sample from N(0, 1).
pub fn randn<R: rand::Rng + ?Sized>(rng: &mut R) -> f64 {
    use rand_distr::Distribution;
    rand_distr::StandardNormal.sample(rng)
}
