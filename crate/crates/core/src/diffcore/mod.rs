//! Differentiable numeric primitives, optimizers, schedules and gradient verification.

mod array;
pub mod gradcheck;
pub mod kernels;
pub mod optim;
mod params;
pub mod schedule;
pub mod tape;

pub use array::Array;
pub use gradcheck::{finite_diff_check, finite_diff_check_sampled, finite_diff_check_with, FdMethod, FdOptions, FdReport, Kinks};
pub use kernels::{
    conv2d_forward, deconv2d_forward, dense_forward, normalize, ConvGeom, NormKind, NORM_EPS,
};
pub use optim::{clip_global_norm, optimizer_step, Algorithm, OptimState};
pub use params::{Param, ParamSet};
pub use schedule::LrSchedule;
pub use tape::{sigmoid, value_and_grad, Bound, Tape, Var};
