//! Minimal dense numeric core.
//!
//! Matrix multiply, batched matrix multiply, broadcast element-wise multiply,
//! axis reduction, activations and a seedable RNG. All kernels are pure
//! functions over immutable inputs with fixed summation order.

mod ops;
mod rng;
mod tensor;

pub use ops::{
    activation, bmm, ewise_add, ewise_mul, ewise_sub, matmul, reduce, transpose2, Activation,
    Reduction,
};
pub use rng::SeedRng;
pub use tensor::{Dtype, Scalar, Tensor};
