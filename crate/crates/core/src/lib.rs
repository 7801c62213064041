//! Spiking neural networks with Hebbian key-value memory.
//!
//! The crate contains a small reverse-mode differentiation engine for
//! unrolled spiking simulations, LIF/IF layers, the plastic associative
//! memory, an end-to-end model trained with surrogate-gradient BPTT, the
//! synthetic association benchmark, the Concentration card game with PPO,
//! and threshold-balancing conversion of dense ReLU nets.

pub mod autodiff;
pub mod checkpoint;
pub mod concentration;
pub mod conversion;
pub mod error;
pub mod hebbian;
pub mod model;
pub mod optim;
pub mod ppo;
pub mod snn;
pub mod tasks;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
