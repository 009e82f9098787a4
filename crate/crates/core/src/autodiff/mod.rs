//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every primitive executed during a forward pass. A
//! single call to [`Tape::backward`] replays the adjoints in reverse order,
//! hands back the gradients of all leaves that require them, and clears the
//! tape. Parameters are copied onto the tape as leaves, so one tape is
//! confined to one worker while the parameters themselves stay shareable.

mod gradcheck;
mod kernels;
mod ops;
mod tape;


pub use gradcheck::{grad_check, GradCheckEntry, GradCheckReport};
pub use kernels::{avg_pool2d_forward, conv2d_forward};
pub use ops::BatchNormMode;
pub use tape::{Gradients, Tape, Var};
