pub mod augment;
pub mod check;
pub mod config;
pub mod datagen;
pub mod dataio;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod metrics;
pub mod model;
pub mod params;
pub mod rng;
pub mod sample;
pub mod tensor;
pub mod trainer;
