//! Cross-modal fusion kernels for two-stream trackers.
//!
//! * [`attention`]: dual-stream attention with a shared LoRA bypass on the key
//!   and value projections and adaptive mutual guidance between the two
//!   streams' pre-softmax maps.
//! * [`hmoe`]: the hierarchical mixture-of-experts token mixer.
//! * [`encoder`]: a small two-stream ViT encoder wiring both modules in every
//!   few layers.
//! * [`verification`]: loop oracles, finite-difference gradient checks and
//!   attention alignment metrics.
//! * [`bench`]: parameter/MAC audits, fusion comparators and timing harness.
//!
//! Everything is generic over `f32`/`f64`; verification runs in `f64`.

pub mod archive;
pub mod attention;
pub mod bench;
pub mod encoder;
pub mod error;
pub mod hmoe;
pub mod rng;
pub mod tensor;
pub mod verification;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::{Scalar, Tensor};
