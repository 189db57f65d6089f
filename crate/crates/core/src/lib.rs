//! Joint discrete/continuous speech emotion recognition.
//!
//! A shared per-frame encoder feeds one or two decoder branches
//! (self-attentive pooling followed by an MLP). Five wirings are provided:
//! continuous-only, discrete-only, multi-task, and the two hierarchical
//! variants where one branch's embedding is fed into the other branch's head.

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod numerics;
pub mod optim;
pub mod trainer;

pub use error::{Error, Result};
pub use numerics::{Matrix, Real, Rng};
