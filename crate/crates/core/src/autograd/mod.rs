//! A small reverse-mode autodiff engine over [`Tensor`](crate::tensor::Tensor)s.
//!
//! A fresh [`Tape`] is built for every forward pass; parameters enter as
//! leaves and [`Tape::backward`] returns gradients for every leaf created
//! with [`Tape::param`].

pub mod gradcheck;
pub mod kernels;
mod tape;

pub use tape::{clamp_prob, norm_coord, sigmoid, BatchStats, Gradients, Tape, Var, PROB_CLAMP};
