//! Numerical substrate: dense linear algebra, MLP and GRU layers with
//! hand-written backward passes, and the Adam optimizer.

mod adam;
mod gru;
mod matrix;
mod mlp;
mod params;

pub use adam::{adam_step, AdamState};
pub use gru::{Gate, Gru, GruCache, GruGrads};
pub use matrix::{
    all_finite, cholesky_solve, dot, l2_norm, log_softmax, mix_seed, normalize_in_place, sigmoid,
    softmax, stable_hash, Matrix,
};
pub use mlp::{Activation, Dense, Mlp, MlpCache, MlpGrads};
pub use params::Parameterized;
