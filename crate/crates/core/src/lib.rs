pub mod config;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod road_graph;
pub mod parallel;
pub mod pipeline;
pub mod rne;
pub mod rng;
pub mod sampler;
pub mod synth_world;
pub mod token_model;
