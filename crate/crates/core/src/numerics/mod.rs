//! Small dense numerics with hand-written pullbacks, generic over `f32`
//! (default evaluation) and `f64` (verification).

mod gradcheck;
mod matrix;
mod ops;
mod params;

pub use gradcheck::{grad_check, grad_check_stencil, grad_check_value, Stencil};
pub use matrix::{Matrix, Real};
pub use ops::{
    attention, attention_forward, attention_pullback, avg_pool_rows, avg_pool_rows_pullback,
    linear, linear_pullback, matmul, matmul_nt, matmul_pullback, matmul_tn, max_pool_rows,
    max_pool_rows_pullback, relu, relu_pullback, softmax_rows, softmax_rows_pullback,
    AttentionCache, LinearParams, LogitScale,
};
pub use params::{flatten, unflatten, ParamSet};

/// Alias used in signatures that carry feature rows (queries, keys, values,
/// proxy tokens, cluster features).
pub type FeatureMatrix<T> = Matrix<T>;
