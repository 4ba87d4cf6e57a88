#![allow(dead_code)]

use thz_hybrid::{default_paper_config, AdcBits, PulseShape, SystemConfig};

/// Small scenario (12 antennas, 16 bins) used by the equivalence checks.
/// `variant` cycles through stream counts, pulse shapes and user counts.
pub fn small_config(variant: usize) -> SystemConfig {
    let mut c = default_paper_config();
    c.num_users = 1 + variant % 2;
    c.tx_antennas_per_user = 4;
    c.tx_rf_chains_per_user = 2;
    c.streams_per_user = 1 + (variant / 2) % 2;
    c.bs_antennas = 12;
    c.bs_rf_chains = if c.num_users * c.streams_per_user > 3 { 6 } else { 3 };
    c.ttd_per_chain = 2;
    c.data_block_len = 13;
    c.channel_taps = 4;
    c.num_bins = 16;
    c.tx_grid_size = 8;
    c.rx_grid_size_per_subarray = 8;
    c.pulse_shape = if variant % 3 == 0 { PulseShape::Rect } else { PulseShape::Rrc };
    c.adc_bits = AdcBits::Ideal;
    c.noise_variance = 0.2;
    c.validate().expect("small config is valid")
}
