pub mod geometry;
pub mod learn;
pub mod pipeline;
pub mod protocol;
pub mod rng;
pub mod scenario;
pub mod study;
pub mod synth;
