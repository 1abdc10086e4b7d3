//! Engine for comparing per-example adapter strategies in batched transformer
//! inference.
//!
//! Three adapter families target the same base projection: additive low-rank
//! factors served through batched matmul, multiplicative low-rank factors
//! that ride along one shared matmul as elementwise scalings, and learned
//! activation rescaling. Around them sit a calibrated cost model with a
//! crossover-rank predictor, a continuous-batching serving simulator, a
//! binary persistence format, and a small training path whose gradients are
//! verified against finite differences.

pub mod adapters;
pub mod costmodel;
pub mod error;
pub mod model;
pub mod numkit;
pub mod registry;
pub mod scheduler;
pub mod trainer;

pub use error::{Error, Result};
