//! Tensors, deterministic randomness and reverse-mode differentiation.

pub mod gradcheck;
mod params;
pub mod rng;
mod tape;
mod tensor;

pub use gradcheck::{finite_difference_check, finite_difference_check_params, OpCheck, ParamCheck};
pub use params::{Gradients, ParamId, ParamStore};
pub use rng::Rng;
pub use tape::{sigmoid, Tape, Var, NLL_FLOOR};
pub use tensor::{Init, Tensor};
