//! Mixture-of-domain low-rank experts (MoDE) for continual test-time adaptation.
//!
//! The crate is `no_std` with `alloc`. It contains a small reverse-mode
//! autodiff engine, the MoDE layer with per-domain noisy top-k routers, the
//! domain-expert synergy objective, a domain discriminator, the two-phase
//! adaptation engine, synthetic domain-shift scenario generators and
//! continual-learning metrics. File formats and the CLI live in `mode-cli`.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod autodiff;
pub mod discriminator;
pub mod engine;
pub mod error;
pub mod gradcheck;
pub mod layer;
pub mod math;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod rng;
pub mod scenario;
pub mod synergy;
pub mod tensor;

pub use autodiff::{Graph, Session, Var};
pub use error::{Error, Result};
pub use params::{ParamId, ParamStore};
pub use rng::CounterRng;
pub use tensor::Tensor;
