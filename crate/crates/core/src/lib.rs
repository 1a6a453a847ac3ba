pub mod alignment;
pub mod isc;
pub mod landmark_io;
pub mod signal;
pub mod dataset;
pub mod model;
pub mod evaluation;
pub mod synth;
pub mod pipeline;

pub use pipeline::Error;
