//! Pair data: persistence, filtering, mining and synthesis.

pub mod generator;
pub mod pairs;
pub mod synth;

pub use generator::{FnGenerator, GeneratorClient, MockGenerator};
#[cfg(feature = "remote")]
pub use generator::RemoteGenerator;
pub use pairs::*;
pub use synth::*;
