pub mod error;
pub mod ingest;
pub mod label;
pub mod nn;
pub mod prep;
pub mod video;
pub mod model;
pub mod trainer;
pub mod evaluator;
pub mod predictor;
pub mod synthetic;
