//! Minimal dense-network numerical core.
//!
//! Everything the slate models need and nothing more: a row-major tensor, a
//! fixed-shape reverse-mode graph, Adam with decoupled weight decay, diagonal
//! Gaussian primitives, finite-difference gradient checking, and the
//! parameter checkpoint container. No GPU, no general autodiff.
//!
//! All randomness enters through caller-owned seeded generators; nothing in
//! this module touches a global RNG.

mod adam;
mod checkpoint;
mod func;
mod gaussian;
mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use adam::{adam_step, AdamState};
pub use checkpoint::{load_optimizer, load_params, save_optimizer, save_params};
pub use func::{affine_apply, argmax_tie_low, logsumexp, relu, sampled_softmax_ce, sigmoid, softplus};
pub use gaussian::{gaussian_kl, reparameterize, GaussianParams, LOGVAR_MAX, LOGVAR_MIN};
pub use gradcheck::grad_check;
pub use graph::{Graph, NodeId};
pub use params::{Gradients, ParamSet};
pub use tensor::Tensor2;
