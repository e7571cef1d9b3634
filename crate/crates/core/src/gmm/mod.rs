//! Gaussian components, activations, and mixture evaluation.
//!
//! A component's covariance is parameterized by a lower-triangular factor
//! `V = L Lᵀ` with exponential diagonal and `2·sigmoid − 1` off-diagonal
//! activations. Densities are evaluated with a forward substitution against
//! `L`; `V⁻¹` is never formed.

mod activation;
mod condition;
mod eval;
mod factor;
mod params;

pub use activation::{
    activate_cholesky, activate_color, cholesky_activation_derivative, deactivate_cholesky,
    logit, sigmoid, AmpMode, DEGENERATE_DIAGONAL, OFFDIAG_LIMIT,
};
pub use condition::{condition_gaussian, Conditioned};
pub use eval::{compose_child, eval_gaussian, eval_mixture, Evaluator, Term, TermKind};
pub use factor::{covariance_from_factor, packed_entries, packed_index, packed_len, LowerTriangular};
pub use params::{ChildParams, GaussianParams, Mixture, ParamBlock, ParamCoord, ParamLayout};

pub(crate) use eval::activate_child_factor;
