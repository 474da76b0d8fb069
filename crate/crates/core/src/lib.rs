//! Out-of-distribution augmentation for graph learning by structural
//! splicing and masked feature extrapolation.

pub mod bridge;
pub mod dataset;
pub mod extract;
pub mod graph;
pub mod nn;
pub mod synth;
pub mod featx;
pub mod harness;
pub mod splice;
