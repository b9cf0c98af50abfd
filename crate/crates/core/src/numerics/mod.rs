//! Minimal numeric stack for training the forecasters.
//!
//! Everything the models need is covered by a dense 2-D [`Tensor`] of f32, a
//! reverse-mode [`Tape`] over a fixed operation set, a named [`ParamStore`]
//! with an AdamW update rule, and a finite-difference gradient checker. The
//! op set is closed on purpose: every op has a hand-written backward pass and
//! its own derivative test, which keeps the whole stack auditable.
//!
//! Reductions that cross the node axis (segment sums, means, softmax
//! denominators) accumulate in f64 and visit their inputs in a
//! value-canonical order, so relabeling nodes cannot change results even at
//! the last bit. Row-internal reductions keep their natural order; they are
//! untouched by node relabeling.

mod gradcheck;
mod optim;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use optim::{AdamW, ParamId, ParamStore};
pub use tape::{NodeId, Segments, Tape};
pub use tensor::{gemm, matmul, Tensor};
