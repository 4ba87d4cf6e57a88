//! True-time-delay beam-split compensation.
//!
//! Every RF chain drives `M` delay lines, each feeding `P` phase shifters.
//! The frequency-flat steering column from the first stage is split into
//! `M` sub-vectors; sub-vector `m` gets a fixed phase `e^{j pi (m-1) P theta}`
//! and the delay `t_m`, so at subcarrier `f_k` the column follows the
//! frequency-scaled array response towards the physical direction `theta`.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::Serialize;

use crate::beamformer::{HybridCombiner, HybridPrecoder, PerBin, TransceiverDesign};
use crate::channel::{bin_frequency, ChannelRealization};
use crate::config::{AdcBits, SystemConfig};
use crate::error::{Error, Result};
use crate::numerics::{cis, frobenius_sq, real, CMat, CVec};
use crate::quantization::bussgang_gain;
use crate::stage1::{combiner_baseband, mmse_targets, per_bin_optimal_precoder};

/// `(f_k / f_c - 1) P theta`, the per-delay-line steering correction.
pub fn rotation_factor(f_k: f64, f_c: f64, p: usize, theta: f64) -> f64 {
    (f_k / f_c - 1.0) * p as f64 * theta
}

/// Non-negative delays `t_1..t_M` (seconds) for sine-direction `theta`.
pub fn ttd_delays(theta: f64, p: usize, m_count: usize, t_c: f64) -> Vec<f64> {
    let step = p as f64 * theta / 2.0 * t_c;
    let offset = if theta < 0.0 {
        (m_count as f64 - 1.0) * step.abs()
    } else {
        0.0
    };
    (0..m_count).map(|m| offset + m as f64 * step).collect()
}

/// Delay network of one RF chain.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TtdNetwork {
    /// `sin` of the steering angle.
    pub direction: f64,
    pub delays_s: Vec<f64>,
    pub carrier_period_s: f64,
    pub elements_per_delay: usize,
}

impl TtdNetwork {
    pub fn new(direction: f64, column_len: usize, m_count: usize, f_c: f64) -> Result<Self> {
        if m_count == 0 || column_len % m_count != 0 {
            return Err(Error::Divisibility(format!(
                "{column_len} phase shifters cannot be split over {m_count} delay lines"
            )));
        }
        let p = column_len / m_count;
        let t_c = 1.0 / f_c;
        Ok(Self {
            direction,
            delays_s: ttd_delays(direction, p, m_count, t_c),
            carrier_period_s: t_c,
            elements_per_delay: p,
        })
    }

    /// Per-delay-line factor `e^{j pi (m-1) P theta} e^{-j 2 pi f_k t_m}`.
    pub fn line_factors(&self, f_k: f64) -> Vec<num_complex::Complex64> {
        let pt = self.elements_per_delay as f64 * self.direction;
        self.delays_s
            .iter()
            .enumerate()
            .map(|(m, &t)| cis(PI * m as f64 * pt - 2.0 * PI * f_k * t))
            .collect()
    }

    /// Frequency-dependent version of a frequency-flat column.
    pub fn apply(&self, column: &CVec, f_k: f64) -> Result<CVec> {
        let p = self.elements_per_delay;
        let factors = self.line_factors(f_k);
        if column.len() != p * factors.len() {
            return Err(Error::ShapeMismatch(format!(
                "column of length {} for a {}x{} delay network",
                column.len(),
                factors.len(),
                p
            )));
        }
        Ok(CVec::from_iterator(
            column.len(),
            column.iter().enumerate().map(|(i, z)| z * factors[i / p]),
        ))
    }
}

/// Applies the delay network for sine-direction `theta` to `column` at `f_k`,
/// with `m_count` delay lines.
pub fn apply_ttd(column: &CVec, theta: f64, f_k: f64, m_count: usize, f_c: f64) -> Result<CVec> {
    TtdNetwork::new(theta, column.len(), m_count, f_c)?.apply(column, f_k)
}

/// Delay networks of every receive subarray.
pub fn receive_networks(combiner: &HybridCombiner, cfg: &SystemConfig) -> Result<Vec<TtdNetwork>> {
    combiner
        .selected_angles
        .iter()
        .map(|a| TtdNetwork::new(a.sin(), cfg.subarray_antennas(), cfg.ttd_per_chain, cfg.carrier_frequency_hz))
        .collect()
}

/// Per-bin precoder: TTD-augmented RF columns and the dominant right-singular
/// vectors of the effective channel as baseband, renormalized per bin.
pub fn ttd_precoder_per_bin(freq: &[CMat], precoder: &HybridPrecoder, cfg: &SystemConfig) -> Result<HybridPrecoder> {
    let flat_rf = match &precoder.rf {
        PerBin::Flat(m) => m,
        PerBin::Varying(_) => return Err(Error::Value("precoder already frequency dependent".into())),
    };
    if precoder.selected_angles.len() != flat_rf.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "{} angles for {} RF chains",
            precoder.selected_angles.len(),
            flat_rf.ncols()
        )));
    }
    let networks = precoder
        .selected_angles
        .iter()
        .map(|a| TtdNetwork::new(a.sin(), flat_rf.nrows(), cfg.ttd_per_chain, cfg.carrier_frequency_hz))
        .collect::<Result<Vec<_>>>()?;
    let n_su = cfg.streams_per_user;
    let per_bin = freq
        .par_iter()
        .enumerate()
        .map(|(k, h)| {
            let f_k = bin_frequency(k, cfg);
            let mut rf = flat_rf.clone();
            for (l, net) in networks.iter().enumerate() {
                let col = net.apply(&flat_rf.column(l).into_owned(), f_k)?;
                rf.set_column(l, &col);
            }
            let mut bb = per_bin_optimal_precoder(&(h * &rf), n_su)?;
            let power = frobenius_sq(&(&rf * &bb));
            if power > 0.0 {
                bb *= real((n_su as f64 / power).sqrt());
            }
            Ok((rf, bb))
        })
        .collect::<Result<Vec<_>>>()?;
    let (rf, bb): (Vec<CMat>, Vec<CMat>) = per_bin.into_iter().unzip();
    Ok(HybridPrecoder {
        rf: PerBin::Varying(rf),
        baseband: PerBin::Varying(bb),
        selected_angles: precoder.selected_angles.clone(),
    })
}

/// TTD-augmented analog combiner at every bin (block-diagonal preserved).
pub fn ttd_combiner_rf(combiner: &HybridCombiner, k_bins: usize, cfg: &SystemConfig) -> Result<Vec<CMat>> {
    let flat = match &combiner.rf {
        PerBin::Flat(m) => m,
        PerBin::Varying(_) => return Err(Error::Value("combiner already frequency dependent".into())),
    };
    let per_sub = cfg.subarray_antennas();
    let networks = receive_networks(combiner, cfg)?;
    (0..k_bins)
        .map(|k| {
            let f_k = bin_frequency(k, cfg);
            let mut w = flat.clone();
            for (s, net) in networks.iter().enumerate() {
                let block = flat.view((s * per_sub, s), (per_sub, 1)).column(0).into_owned();
                let shifted = net.apply(&block, f_k)?;
                w.view_mut((s * per_sub, s), (per_sub, 1)).set_column(0, &shifted);
            }
            Ok(w)
        })
        .collect()
}

/// Receive analogue of the precoder design: TTD-augmented subarray columns
/// and per-bin baseband re-fitted to the MMSE targets for the new precoders.
pub fn ttd_combiner_per_bin(
    combiner: &HybridCombiner,
    channel: &ChannelRealization,
    precoders: &[HybridPrecoder],
    xi: f64,
    cfg: &SystemConfig,
) -> Result<HybridCombiner> {
    let rf = ttd_combiner_rf(combiner, channel.num_bins(), cfg)?;
    let target = mmse_targets(channel, precoders, cfg)?;
    let baseband = rf
        .par_iter()
        .zip(target.par_iter())
        .map(|(w, t)| combiner_baseband(w, t, xi))
        .collect::<Result<Vec<_>>>()?;
    Ok(HybridCombiner {
        rf: PerBin::Varying(rf),
        baseband,
        selected_angles: combiner.selected_angles.clone(),
        target,
    })
}

/// Converts a frequency-flat design into the TTD-compensated one.
pub fn design(
    channel: &ChannelRealization,
    stage1: &TransceiverDesign,
    cfg: &SystemConfig,
    bits: AdcBits,
) -> Result<TransceiverDesign> {
    let precoders = stage1
        .precoders
        .iter()
        .enumerate()
        .map(|(u, p)| ttd_precoder_per_bin(&channel.freq[u], p, cfg).map_err(|e| e.context(format!("TTD precoder of user {u}"))))
        .collect::<Result<Vec<_>>>()?;
    let combiner = ttd_combiner_per_bin(&stage1.combiner, channel, &precoders, bussgang_gain(bits)?, cfg)?;
    Ok(TransceiverDesign { precoders, combiner })
}
