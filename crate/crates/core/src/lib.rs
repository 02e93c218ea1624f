pub mod cli;
pub mod config;
pub mod dataset;
pub mod eval;
pub mod experiments;
pub mod filter;
pub mod losses;
pub mod mask;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod synth;
pub mod viz;
