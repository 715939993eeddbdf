//! Deterministic simulator for user-customizable shared-control teleoperation
//! on a buzz-wire task.
//!
//! The stack, bottom up: [`geometry`] (poses, twists, wrenches), [`course`]
//! (wire, loop handle, contact), [`apf`] (assistive wrench), [`arbitration`]
//! (factors and blending), [`admittance`] (the control tick), [`adaptation`]
//! (between-trial θ updates), [`operator`] (scripted subjects), [`session`]
//! (trials, logs, metrics) and [`experiment`] (configs and batches).

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adaptation;
pub mod admittance;
pub mod apf;
pub mod arbitration;
pub mod course;
pub mod exec;
pub mod experiment;
pub mod geometry;
pub mod operator;
pub mod session;

pub use arbitration::{EditDirection, FactorId, FactorSet, Theta};
pub use course::{builtin_course, resolve_course, WireCourse};
pub use exec::Exec;
pub use geometry::{Pose, Twist, Wrench};
pub use session::{Mode, Outcome};
