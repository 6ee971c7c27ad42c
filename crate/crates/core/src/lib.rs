pub mod baselines;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod nn;
pub mod parallel;
pub mod rng;
pub mod ssd;
pub mod tape;
pub mod tensor;
pub mod train;
