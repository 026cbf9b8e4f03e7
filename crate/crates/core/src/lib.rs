//! Fixup initialization for residual networks, plus the numerical
//! machinery to check what it promises: gradient-norm lower bounds at
//! initialization, variance growth with depth, and depth-independent
//! update scale under SGD.

// Comparisons like `!(x <= tol)` are written so that NaN fails them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod init;
pub mod net;
pub mod probe;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{FixupError, Result};
pub use init::{apply_fixup, apply_he, apply_lsuv, apply_xavier, fixup_scale, InitKind, InitScheme};
pub use net::{Mode, Network, NetworkSpec, ParamId, ParamKind};
pub use rng::Rng;
pub use tensor::Tensor;
