// SPDX-License-Identifier: Apache-2.0

//! Dense `f64` tensors, a define-by-run differentiation tape, Adam, and a
//! finite-difference gradient checker.

mod adam;
mod gradcheck;
mod param;
mod tape;
mod tensor;

pub use adam::Adam;
pub use gradcheck::{grad_check, roundoff_floor, GradCheckConfig, GradCheckEntry, GradCheckReport, ParamSummary};
pub use param::{ParamId, ParamStore, Parameter};
pub use tape::{logsumexp_slice, CustomOp, Tape, Var};
pub use tensor::Tensor;
