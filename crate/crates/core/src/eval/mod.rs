//! Identifiability and generation-quality metrics.

mod interpolate;
mod mcc;
mod report;
mod score;

pub use interpolate::{edit_latents, interpolate_latent, EditScope, Interpolation, MOVEMENT_THRESHOLD};
pub use mcc::{abs_correlation_matrix, compute_mcc, Correlation, MccResult};
pub use report::{compute_mcc_per_layer, evaluate_latents, evaluate_model, generation_score, EvalReport};
pub use score::{correlational_score, pooled_correlation};
