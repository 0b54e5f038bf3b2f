pub mod checkpoint;
pub mod cli;
pub mod dataset;
pub mod dsp;
pub mod error;
pub mod losses;
pub mod model;
pub mod optim;
pub mod rng;
pub mod scoring;
pub mod tensor;
pub mod trainer;

#[cfg(test)]
pub(crate) mod testutil;
