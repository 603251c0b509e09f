//! Dense linear algebra used by the monitors and the theory checks.

mod matrix;
mod power;
mod svd;

pub use matrix::{dot, norm2, normalize, random_unit_vector, Matrix};
pub use power::{
    canonicalize_sign, first_order_spectral_change, first_order_spectral_change_with, power_iteration, stable_rank,
    top_singular, PowerConfig, SpectralTriple, DEFAULT_INIT_SEED,
};
pub use svd::{reconstruct, svd_small_oracle, SingularTriple, ORACLE_MAX_DIM};
