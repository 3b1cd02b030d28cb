//! Toolkit for building and auditing large crowdsourced video quality
//! datasets: holistic feature extraction, histogram-matched sampling,
//! space-time patch geometry, session screening, rating cleaning, and
//! consistency statistics, plus a synthetic-study simulator.

pub mod analysis;
pub mod cleaning;
pub mod cli;
pub mod config;
pub mod features;
pub mod media_io;
pub mod patchgen;
pub mod sampler;
pub mod screening;
pub mod simulate;
pub mod stats;
