//! Cascade hashing feature matcher.
pub mod config;
pub mod feature_io;
pub mod geometry;
pub mod hashing;
pub mod matcher;
pub mod pipeline;
pub mod scheduler;
pub mod sink;
pub mod synth;
