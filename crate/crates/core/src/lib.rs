//! Probabilistic object pose and shape estimation from a single view.
//!
//! A first diffusion model samples object-frame coordinate maps ("NORF maps")
//! from an observation; a second samples triplane SDF latents conditioned on
//! the orthographic projection of such a map. Sampled maps are registered to
//! metric depth with a RANSAC similarity fit, which also ranks hypotheses.

pub mod binio;
pub mod conditioning;
pub mod diffusion;
pub mod geometry;
pub mod metrics;
pub mod nn;
pub mod registration;
pub mod sim3;
pub mod surface;
pub mod triplane;
