//! Dense numeric core.

mod activation;
mod adam;
mod half;
mod matrix;
mod mlp;

pub use activation::{linear_log, linear_log_grad, relu, sigmoid, softmax2_positive};
pub use adam::{Adam, AdamConfig};
pub use half::{from_half, quantize, quantize_slice, to_half, Half};
pub use matrix::{dot, matmul, Matrix, PrecisionMode};
pub use mlp::{affine, Dense, DenseGrads, Mlp, MlpGrads, MlpTape};

#[allow(unused_imports)]
pub(crate) use matrix::{gemm_a_bt, gemm_acc, gemm_at_b_acc};
