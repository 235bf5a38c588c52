//! Dense `f64` tensors, a reverse-mode autodiff tape and parameter storage.

pub mod gradcheck;
pub mod kernels;
mod params;
mod tape;
mod tensor;

pub use params::{decode_tensor, encode_tensor, truncated_normal, Bound, ParamStore, INIT_STD};
pub use tape::{erase_add, interleave, Gradients, Tape, Var};
pub use tensor::Tensor;


#[cfg(test)]
mod tests;
