//! Closed-loop "imagine and align" navigation on procedural navigation graphs.
//!
//! The agent runs a per-step cycle: an adaptive scheduler picks an imagination
//! mode from trajectory uncertainty and visual similarity, a scene hypothesis
//! is generated for the current goal entity, a perceptual alignment filter
//! grounds that hypothesis against the observed panorama as a soft attention
//! map, and a three-stage structured reasoner turns the evidence into an
//! action. An evaluation harness computes SR/SPL/NE/TL and runs the ablation
//! matrix (full loop vs. each component removed).

pub mod agent;
pub mod backend;
pub mod config;
pub mod error;
pub mod eval;
pub mod grid;
pub mod imagination;
pub mod paf;
pub mod reasoner;
pub mod rng;
pub mod scheduler;
pub mod world;

pub use error::{Error, Result};
