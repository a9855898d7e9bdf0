//! Dynamical-decoupling noise spectroscopy.
//!
//! Simulates the coherence of a qubit driven by Carr-Purcell sequences under a
//! Gaussian noise spectral density, and recovers the spectrum parameters from
//! coherence curves either with a multilayer perceptron or with a
//! harmonics-spectroscopy least-squares baseline.

pub mod dataset;
pub mod eval;
pub mod hs;
pub mod mlp;
pub mod physics;

pub use dataset::{Dataset, GridSpec, ParamRanges, Sample};
pub use physics::{CoherenceCurve, NsdParams, PhysicsError, PulseSequence};
