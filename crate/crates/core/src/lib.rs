//! Continuous motion-latent toolkit.

pub mod diff;
pub mod motion;
pub mod synth;
pub mod metrics;
pub mod nn;
pub mod vae;
pub mod corpus;
pub mod backbone;
pub mod flow;
pub mod generator;
pub mod lra;
pub mod features;
pub mod pipeline;
