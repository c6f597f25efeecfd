pub mod config;
pub mod error;
pub mod experiments;
pub mod linalg;
pub mod models;
pub mod rng;
pub mod stats;
pub mod gnh;
pub mod operator;
pub mod spectral;
pub mod lissa;
pub mod pbrf;
pub mod influence;
pub mod tfidf;
