//! Simulation of a wideband multi-user THz uplink with a two-stage hybrid
//! transceiver: frequency-flat hybrid beamforming, true-time-delay beam-split
//! compensation, and a Bussgang model of low-resolution ADCs.

pub mod beamformer;
pub mod channel;
pub mod config;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod numerics;
pub mod quantization;
pub mod stage1;
pub mod stage2;

pub use beamformer::{HybridCombiner, HybridPrecoder, PerBin, TransceiverDesign};
pub use config::{default_paper_config, AdcBits, PulseShape, SystemConfig};
pub use error::{Error, Result};
