//! Text-guided slice attention over volumetric images.
//!
//! The crate implements a small, CPU-only, fully deterministic pipeline:
//! a frozen 3D patch encoder and a trainable 2D slice encoder feed a
//! text-conditioned scorer that distributes attention over slices, the
//! attended 2D features are fused with the 3D features, and a tiny causal
//! decoder maps the fused tokens plus an instruction to an answer.
//! Everything runs in f64 internally; files store f32.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod decoder;
pub mod encoders;
pub mod export;
pub mod fusion;
pub mod ioutil;
pub mod metrics;
pub mod rng;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod volume;

pub use rng::Rng;
pub use tape::{NodeId, Tape};
pub use tensor::{Tensor, TensorError};
