// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense tensors with reverse-mode automatic differentiation.

mod adam;
mod gradcheck;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use gradcheck::{gradcheck, GradCheckOptions, GradCheckReport};
pub(crate) use tape::sigmoid;
pub use tape::{Tape, Var};
pub use tensor::{Element, Tensor};
