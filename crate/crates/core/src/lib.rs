//! Herdcast: an end-to-end pipeline around a two-herder / four-target
//! containment game.
//!
//! The library covers the full loop: a deterministic simulator with scripted
//! expert and novice herder policies ([`sim`]), a line-oriented trial
//! recording format with a heuristic auto-labeler ([`ingest`]), extraction of
//! the 48 state variables describing the scene from one herder's point of
//! view ([`features`]), windowed sample assembly with sub-class balancing
//! ([`dataset`]), an LSTM sequence classifier trained from scratch with
//! backpropagation through time ([`nn`], [`train`]), classification metrics
//! and a cross-expertise evaluation harness ([`eval`]), Shapley-value
//! attributions with rank-agreement statistics ([`explain`]), and behavioral
//! analytics over recorded trials ([`analysis`]).
//!
//! Everything downstream of a seed is deterministic: repeated runs with the
//! same inputs produce byte-identical artifacts regardless of thread count.

pub mod analysis;
pub mod dataset;
pub mod eval;
pub mod explain;
pub mod features;
pub mod geom;
pub mod ingest;
pub mod nn;
pub mod rng;
pub mod sim;
pub mod train;

pub use geom::Vec2;
pub use ingest::{Expertise, Frame, Trial};
