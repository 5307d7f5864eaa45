pub mod config;
pub mod crop;
pub mod detectability;
pub mod estimators;
pub mod harness;
pub mod linalg;
pub mod model;
pub mod noise;
pub mod solver;
pub mod transform;
