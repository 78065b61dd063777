//! Dense arrays, a reverse-mode tape, the finite-difference oracle and optimizers.

pub mod array;
pub mod gradcheck;
pub mod optim;
pub mod params;
pub mod tape;

pub use array::Array;
pub use gradcheck::{grad_check, GradCheckReport};
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind};
pub use params::{Bound, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
