//! Dense tensors, matricization, mode products and the Tucker model.

mod dense;
pub mod io;
mod mask;
mod tucker;

pub use dense::{kron, kron_composite, DenseTensor, RealMatrix};
pub use mask::ObservationMask;
pub use tucker::{hosvd, tucker_reconstruct, TuckerModel};
