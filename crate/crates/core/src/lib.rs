//! Geometry-aware audio anti-spoofing detector.
//!
//! An utterance arrives as a sequence of frame embeddings. A small
//! temporal conv encoder pools it into one vector, a sigmoid gate decides
//! how much trust to place in each of two curved views of that vector
//! (a hyperbolic point for hierarchical structure, a spherical direction
//! for energy-invariant shape), and the two views are fused on a
//! negatively curved ball whose curvature is itself trained. A linear
//! head reads the fused tangent and scores the utterance as bonafide or
//! spoof.
//!
//! The crate is organized as:
//!
//! * [`manifold`]: the ball and sphere maps with their exact reverse-mode
//!   pullbacks, including derivatives with respect to curvature.
//! * [`network`]: the forward pipeline, trace, and hand-written backward
//!   pass over a flat parameter store.
//! * [`training`]: loss, Adam, the deterministic training loop, k-fold
//!   splits, and a finite-difference gradient checker.
//! * [`data`]: embedding and checkpoint file formats, JSONL manifests,
//!   corpus protocol selection, and a synthetic archive generator.
//! * [`metrics`]: EER, ROC points, calibration, and report emission.
//!
//! Determinism is a design requirement end to end: every random choice is
//! seeded, parallel reductions happen in fixed order, and all writers
//! produce byte-identical files for identical inputs.

pub mod data;
pub mod error;
pub mod manifold;
pub mod metrics;
pub mod network;
pub mod training;

pub use error::{Result, RhymeError};
