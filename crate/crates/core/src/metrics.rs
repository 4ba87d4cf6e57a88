//! Spectral efficiency of a quantized hybrid receiver and array-gain sweeps.

use serde::Serialize;

use crate::beamformer::TransceiverDesign;
use crate::channel::{bin_frequency, sine_response, ChannelRealization};
use crate::config::SystemConfig;
use crate::error::{Error, Result};
use crate::numerics::{blkdiag, log2_det_hpd, real, CMat, CVec};
use crate::quantization::QuantizationModel;
use crate::stage1::per_bin_optimal_precoder;
use crate::stage2::TtdNetwork;

/// Aggregated spectral efficiency at one sweep point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RatePoint {
    pub scheme: String,
    pub pulse_shape: String,
    pub bandwidth_hz: f64,
    pub snr_db: f64,
    pub adc_bits: String,
    /// bits/s/Hz
    pub spectral_efficiency: f64,
    pub se_std: f64,
    /// bits/s, `spectral_efficiency * bandwidth_hz`
    pub rate_bps: f64,
    pub trials: usize,
}

impl RatePoint {
    /// Mean and sample standard deviation of per-trial values.
    pub fn from_samples(
        scheme: &str,
        pulse_shape: &str,
        bandwidth_hz: f64,
        snr_db: f64,
        adc_bits: &str,
        samples: &[f64],
    ) -> Self {
        let n = samples.len();
        let mean = if n == 0 { 0.0 } else { samples.iter().sum::<f64>() / n as f64 };
        let std = if n < 2 {
            0.0
        } else {
            (samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Self {
            scheme: scheme.to_string(),
            pulse_shape: pulse_shape.to_string(),
            bandwidth_hz,
            snr_db,
            adc_bits: adc_bits.to_string(),
            spectral_efficiency: mean,
            se_std: std,
            rate_bps: mean * bandwidth_hz,
            trials: n,
        }
    }
}

/// `W_BB^H C W_BB`.
pub fn effective_noise_cov_per_bin(w_bb: &CMat, c: &CMat) -> Result<CMat> {
    if c.nrows() != w_bb.nrows() || !c.is_square() {
        return Err(Error::ShapeMismatch(format!(
            "W_BB {:?} against C {:?}",
            w_bb.shape(),
            c.shape()
        )));
    }
    Ok(w_bb.adjoint() * c * w_bb)
}

/// `log2 det(I + C^-1 S / N_s)` evaluated as `log2 det(C + S/N_s) - log2 det(C)`.
pub fn log_det_ratio(c_tilde: &CMat, s: &CMat, n_s: usize, bin: usize) -> Result<f64> {
    let num = c_tilde + s / real(n_s as f64);
    let den = log2_det_hpd(c_tilde).map_err(|_| Error::SingularNoise(bin))?;
    let total = log2_det_hpd(&num).map_err(|_| Error::SingularNoise(bin))?;
    Ok((total - den).max(0.0))
}

/// Spectral efficiency of one bin.
pub fn bin_spectral_efficiency(
    channel: &ChannelRealization,
    design: &TransceiverDesign,
    qmodel: &QuantizationModel,
    cfg: &SystemConfig,
    k: usize,
) -> Result<f64> {
    let w_bb = &design.combiner.baseband[k];
    let w = design.combiner.rf.at(k) * w_bb * real(qmodel.xi);
    let g = w.adjoint() * &channel.mu[k] * design.compound_precoder(k);
    let s = &g * g.adjoint() * real(cfg.symbol_variance);
    let c_tilde = effective_noise_cov_per_bin(w_bb, qmodel.c.at(k))?;
    log_det_ratio(&c_tilde, &s, w_bb.ncols(), k)
}

/// Bin-averaged sum spectral efficiency (bits/s/Hz).
pub fn sum_spectral_efficiency(
    channel: &ChannelRealization,
    design: &TransceiverDesign,
    qmodel: &QuantizationModel,
    cfg: &SystemConfig,
) -> Result<f64> {
    let k_bins = channel.num_bins();
    let mut acc = 0.0;
    for k in 0..k_bins {
        acc += bin_spectral_efficiency(channel, design, qmodel, cfg, k)?;
    }
    Ok(acc / k_bins as f64)
}

/// Fully digital, unquantized reference: every user sends its dominant
/// right-singular directions at each bin and the receiver sees all antennas.
pub fn digital_reference_se(channel: &ChannelRealization, cfg: &SystemConfig) -> Result<f64> {
    let k_bins = channel.num_bins();
    let n_s = cfg.total_streams();
    let scale = cfg.symbol_variance / (n_s as f64 * cfg.noise_variance);
    let mut acc = 0.0;
    for k in 0..k_bins {
        let blocks = channel
            .freq
            .iter()
            .map(|f| per_bin_optimal_precoder(&f[k], cfg.streams_per_user))
            .collect::<Result<Vec<_>>>()?;
        let hf = &channel.mu[k] * blkdiag(&blocks);
        let m = CMat::identity(n_s, n_s) + hf.adjoint() * hf * real(scale);
        acc += log2_det_hpd(&m).map_err(|_| Error::SingularNoise(k))?;
    }
    Ok(acc / k_bins as f64)
}

/// Steering parameters `sin(theta)` uniformly spanning `[-1, 1]`.
pub fn direction_grid(points: usize) -> Vec<f64> {
    if points == 1 {
        return vec![0.0];
    }
    (0..points).map(|i| -1.0 + 2.0 * i as f64 / (points - 1) as f64).collect()
}

/// `|a(direction, f_k)^H beam|` with the direction given as `sin(theta)`.
pub fn gain_at(beam: &CVec, direction: f64, f_k: f64, f_c: f64) -> f64 {
    sine_response(beam.len(), direction, f_k, f_c).dotc(beam).norm()
}

/// Direction of maximum gain: coarse grid search, then golden-section
/// refinement within one grid step of the best point.
pub fn peak_direction(beam: &CVec, f_k: f64, f_c: f64, grid: &[f64]) -> f64 {
    let (mut best, mut best_gain) = (0usize, f64::NEG_INFINITY);
    for (i, &d) in grid.iter().enumerate() {
        let g = gain_at(beam, d, f_k, f_c);
        if g > best_gain {
            best = i;
            best_gain = g;
        }
    }
    let step = if grid.len() > 1 { grid[1] - grid[0] } else { 0.0 };
    let (mut lo, mut hi) = ((grid[best] - step).max(-1.0), (grid[best] + step).min(1.0));
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..80 {
        let a = hi - ratio * (hi - lo);
        let b = lo + ratio * (hi - lo);
        if gain_at(beam, a, f_k, f_c) >= gain_at(beam, b, f_k, f_c) {
            hi = b;
        } else {
            lo = a;
        }
    }
    (lo + hi) / 2.0
}

/// One row of a beam-split sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NagRow {
    /// `flat` (phase shifters only) or `ttd` (with delay lines).
    pub beam: &'static str,
    pub subarray: usize,
    pub bin: usize,
    pub freq_hz: f64,
    pub direction_sine: f64,
    pub nag: f64,
}

/// Array gain of one subarray beam, with and without its delay network, over
/// `directions` (as `sin(theta)`) at the listed bins.
pub fn nag_sweep(
    subarray: usize,
    steer: &CVec,
    network: &TtdNetwork,
    directions: &[f64],
    bins: &[usize],
    cfg: &SystemConfig,
) -> Result<Vec<NagRow>> {
    let f_c = cfg.carrier_frequency_hz;
    let mut rows = Vec::with_capacity(2 * directions.len() * bins.len());
    for &bin in bins {
        if bin >= cfg.num_bins {
            return Err(Error::Index {
                index: bin,
                max: cfg.num_bins,
            });
        }
        let f_k = bin_frequency(bin, cfg);
        let compensated = network.apply(steer, f_k)?;
        for (beam, vec) in [("flat", steer), ("ttd", &compensated)] {
            for &d in directions {
                rows.push(NagRow {
                    beam,
                    subarray,
                    bin,
                    freq_hz: f_k,
                    direction_sine: d,
                    nag: gain_at(vec, d, f_k, f_c),
                });
            }
        }
    }
    Ok(rows)
}

/// Per-bin summary of one subarray beam at its own steering direction.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BeamSplitSummary {
    pub subarray: usize,
    pub bin: usize,
    pub freq_hz: f64,
    pub steering_sine: f64,
    pub nag_flat: f64,
    pub nag_ttd: f64,
    pub peak_flat: f64,
    pub peak_ttd: f64,
}

pub fn beam_split_summary(
    subarray: usize,
    steer: &CVec,
    network: &TtdNetwork,
    grid: &[f64],
    cfg: &SystemConfig,
) -> Result<Vec<BeamSplitSummary>> {
    let f_c = cfg.carrier_frequency_hz;
    let d = network.direction;
    (0..cfg.num_bins)
        .map(|bin| {
            let f_k = bin_frequency(bin, cfg);
            let comp = network.apply(steer, f_k)?;
            Ok(BeamSplitSummary {
                subarray,
                bin,
                freq_hz: f_k,
                steering_sine: d,
                nag_flat: gain_at(steer, d, f_k, f_c),
                nag_ttd: gain_at(&comp, d, f_k, f_c),
                peak_flat: peak_direction(steer, f_k, f_c, grid),
                peak_ttd: peak_direction(&comp, f_k, f_c, grid),
            })
        })
        .collect()
}
