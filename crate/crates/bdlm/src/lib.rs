//! Std companion to `bdlm-core`: file formats, configuration, training
//! orchestration and the oracle suite.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod grammar;
pub mod metrics;
pub mod pipeline;
pub mod verify;
