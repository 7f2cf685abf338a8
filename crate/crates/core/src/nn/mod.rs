//! Dense linear algebra, reverse-mode autodiff, layers, and Adam.

pub mod autodiff;
pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod tensor;

pub use autodiff::{cross_entropy_probs, kl_div_probs, Tape, Var};
pub use layers::{Activation, LayerNorm, LinearLayer, Mlp};
pub use optim::{AdamConfig, AdamState};
pub use tensor::{SparseRows, Tensor};
