//! Numerical laboratory for the spectra of discretised stable trees.
//!
//! The crate samples critical Galton-Watson trees conditioned on their size,
//! turns them into measured metric trees, computes Neumann and Dirichlet
//! eigenvalue counting functions exactly by tree-ordered LDL^T inertia, and
//! checks the closed-form Poisson-Dirichlet and renewal constants that govern
//! the leading spectral asymptotics.

pub mod decomp;
pub mod lab;
pub mod pdlaw;
pub mod quad;
pub mod renewal;
pub mod spectra;
pub mod stats;
pub mod treegen;

pub use pdlaw::{PdParams, PdWeights, StableParams};
pub use treegen::MetricTree;

/// SplitMix64 step, used to derive independent per-task seeds from a master
/// seed without coupling adjacent streams.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut z = master ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
