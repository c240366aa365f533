//! Tensor math: flat tensors, a reverse-mode tape, optimizer, LR schedule,
//! and a finite-difference gradient checker.

pub mod gradcheck;
pub mod kernels;
pub mod ops;
pub mod optim;
pub mod scalar;
pub mod schedule;
pub mod tape;
pub mod tensor;

pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use optim::AdamW;
pub use scalar::Scalar;
pub use schedule::LrSchedule;
pub use tape::{Gradients, Tape, VarId};
pub use tensor::Tensor;
