//! Dense real linear algebra used by the adapters and the projection analysis.

mod matrix;
mod qr;
mod svd;

pub use matrix::{matmul, Matrix, Vector};
pub use qr::{lq_decompose, qr_decompose, LqFactors, QrFactors};
pub use svd::{numerical_rank, singular_values};

pub(crate) use matrix::{mul_vec_into, mul_vec_transposed_acc, rank_one_acc};
