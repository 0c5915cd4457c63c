//! Forward and backward kernels over flat NCHW slices. The autograd graph
//! owns shapes and buffers; these functions only do arithmetic.

pub mod conv;
pub mod elementwise;
pub mod interp;
pub mod pool;
pub mod softmax;
