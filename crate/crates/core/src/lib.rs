//! Desk-scale federated learning for image classification.

pub mod cli;
pub mod dataio;
pub mod federation;
pub mod imaging;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod stats;
pub mod synthdata;
pub mod tta;
