//! Learned relative-phase estimation and maximum-ratio combining for a
//! two-antenna receiver, plus the simulation pipeline around it: modem,
//! channel, dataset generation, training, and BER/relay experiments.

pub mod beamform;
pub mod channel;
pub mod dataset;
pub mod error;
pub mod estimator;
pub mod harness;
pub mod modem;
pub mod nn;
pub mod phasecore;
pub mod seed;

pub use error::{Error, Result};
pub use phasecore::{ComplexSample, SampleChunk};
