pub mod autodiff;
pub mod bpe;
pub mod config;
pub mod corpus;
pub mod harness;
pub mod decoding;
pub mod error;
pub mod metrics;
pub mod model;
pub mod plot;
pub mod rng;
pub mod synth;
pub mod training;
