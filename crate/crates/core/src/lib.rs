//! Guided offline reinforcement learning.
//!
//! A small guiding network maps each sample's constraint loss to a
//! constraint degree in `(0, 1)`, trading off policy improvement against
//! staying close to the data. It is meta-trained so that one virtual policy
//! step on the offline batch lowers the behavior-cloning loss on a handful
//! of expert transitions.

pub mod error;
pub mod numeric;

pub use error::{Error, Result};
pub mod digest;
pub mod datasets;
pub mod envs;
pub mod agents;
pub mod guidance;
pub mod stats;
pub mod trainer;
pub mod theory;
