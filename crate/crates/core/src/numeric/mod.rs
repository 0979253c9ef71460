//! Deterministic dense-matrix substrate shared by every other module.

mod eig;
mod matrix;
mod norm;

pub use eig::{eig_sym_psd, Spectrum};
pub use matrix::{dot, frobenius_norm, Matrix};
pub use norm::{
    layer_norm, layer_norm_backward, row_stats, softmax_rows, softmax_rows_backward, RowStats,
};
