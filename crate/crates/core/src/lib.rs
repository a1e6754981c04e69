//! Behavior regularized actor critic (BRAC) for offline reinforcement learning.

mod binio;
pub mod checks;
pub mod critics;
pub mod data;
pub mod divergences;
pub mod envs;
pub mod error;
pub mod harness;
pub mod nn;
pub mod optim;
pub mod policies;
pub mod pretrain;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{BracError, Result};
pub use nn::{Mlp, MlpVars};
pub use optim::{soft_update, Adam, AdamConfig};
pub use rng::BracRng;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
