//! Multi-pair temporal sentence grounding.
//!
//! Co-trains batches of video-query pairs through four relationship-mining
//! modules (cross-sentence mining, adaptive video-query matching,
//! object-phrase prototype matching, activity-sentence alignment), fuses
//! modalities with co-attention, and predicts start/end segment boundaries.
//! Ships with a synthetic planted-alignment corpus generator, an R@n,IoU=m
//! evaluation suite, a throughput benchmark, and a finite-difference
//! gradient checker for every parameter.

pub mod config;
pub mod error;
pub mod apa;
pub mod avm;
pub mod csm;
pub mod encoders;
pub mod fusion;
pub mod feature_io;
pub mod harness;
pub mod model;
pub mod nn;
pub mod opm;
pub mod rng;
pub mod tape;
