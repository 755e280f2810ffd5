//! Synthetic detection data by cut-and-paste of generated foregrounds onto
//! generated backgrounds.

pub mod background;
pub mod cli;
pub mod compose;
pub mod config;
pub mod dataset;
pub mod filter;
pub mod foreground;
pub mod gateway;
pub mod manifest;
pub mod mask;
pub mod pipeline;
pub mod plan;
pub mod prompt;
pub mod rng;
pub mod vocab;
