//! Planar rigid-body systems, learned latent Lagrangian dynamics with a
//! coordinate-aware VAE, and energy-shaping control synthesized from the
//! learned potential energy.
//!
//! The crate is organized around the pipeline stages:
//!
//! - [`dynamics`]: analytic ground-truth systems (pendulum, cart-pole,
//!   acrobot) in the angle-aware state form.
//! - [`integrators`]: fixed-step Euler/RK4 usable both for plain simulation
//!   and for differentiable rollouts through the [`tape`].
//! - [`distributions`], [`geometry`], [`nn`], [`tape`]: the building blocks
//!   of the coordinate-aware VAE and the latent dynamics networks.
//! - [`latent`], [`cavae`]: the learned model itself.
//! - [`dataset`], [`training`], [`control`]: data generation and on-disk
//!   formats, the training objective and loop, and controller synthesis.

pub mod config;
pub mod state;
pub mod control;
pub mod cavae;
pub mod dataset;
pub mod distributions;
pub mod dynamics;
pub mod error;
pub mod geometry;
pub mod integrators;
pub mod latent;
pub mod linalg;
pub mod nn;
pub mod params;
pub mod rng;
pub mod tape;
pub mod training;

pub use error::{Error, Result};
