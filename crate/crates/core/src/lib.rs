//! Compatibility families for asymmetric item-to-item compatibility.
//!
//! Each item maps to an embedding `E_0(x)` plus `K` prototypes
//! `E_1(x) .. E_K(x)` in one latent space. The projected compatibility
//! distance from `x` to `y` is the squared distance between a softmin-weighted
//! combination of `x`'s prototypes and `y`'s embedding, which makes the
//! relation directional. The crate covers data synthesis, the model and its
//! loss, training, evaluation and retrieval, and a metric-regularized
//! conditional GAN that generates compatible items.

pub mod compat;
pub mod data;
pub mod error;
pub mod eval;
pub mod gan;
pub mod io;
pub mod nn;
pub mod train;

pub use cfam_autodiff as autodiff;
pub use cfam_autodiff::Scalar;
pub use error::{Error, Result};

pub type CompatModel64 = compat::CompatModel<f64>;
pub type CompatModel32 = compat::CompatModel<f32>;
pub type FamilyEmbedding64 = compat::FamilyEmbedding<f64>;
pub type FamilyEmbedding32 = compat::FamilyEmbedding<f32>;
pub type GanModel64 = gan::GanModel<f64>;
pub type GanModel32 = gan::GanModel<f32>;
pub type AdamState64 = train::AdamState<f64>;
pub type AdamState32 = train::AdamState<f32>;

/// Decorrelates sub-seeds drawn from one user seed (splitmix64 finalizer).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
