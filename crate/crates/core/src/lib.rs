//! Battery cell equivalent-circuit models: simulation, identification, and
//! evaluation tooling.

pub mod cli;
pub mod error;
pub mod evalkit;
pub mod linalg;
pub mod presets;
pub mod randles;
pub mod signals;
pub mod sre;
pub mod thevenin;
pub mod warburg;

pub use error::{Error, Result};
