//! Hybrid precoder and combiner containers shared by both design stages.

use crate::numerics::{blkdiag, CMat};

/// A matrix that is either frequency-flat or given per FFT bin.
#[derive(Debug, Clone, PartialEq)]
pub enum PerBin {
    Flat(CMat),
    Varying(Vec<CMat>),
}

impl PerBin {
    pub fn at(&self, k: usize) -> &CMat {
        match self {
            PerBin::Flat(m) => m,
            PerBin::Varying(ms) => &ms[k],
        }
    }

    pub fn is_flat(&self) -> bool {
        matches!(self, PerBin::Flat(_))
    }

    pub fn shape(&self) -> (usize, usize) {
        self.at(0).shape()
    }
}

/// Per-user hybrid precoder `F_RF F_BB`.
#[derive(Debug, Clone)]
pub struct HybridPrecoder {
    /// `N_T,u x N_RF,u` analog precoder, entries of modulus `1/sqrt(N_T,u)`.
    pub rf: PerBin,
    /// `N_RF,u x N_s,u` digital precoder.
    pub baseband: PerBin,
    /// Steering angle (radians) of each RF chain.
    pub selected_angles: Vec<f64>,
}

impl HybridPrecoder {
    pub fn product(&self, k: usize) -> CMat {
        self.rf.at(k) * self.baseband.at(k)
    }

    pub fn is_flat(&self) -> bool {
        self.rf.is_flat() && self.baseband.is_flat()
    }
}

/// Partially connected hybrid combiner at the base station.
#[derive(Debug, Clone)]
pub struct HybridCombiner {
    /// `N_BS x N_RF` block-diagonal analog combiner.
    pub rf: PerBin,
    /// `N_RF x N_s` digital combiner per bin.
    pub baseband: Vec<CMat>,
    /// Steering angle (radians) of each subarray.
    pub selected_angles: Vec<f64>,
    /// Unconstrained per-bin MMSE target `W_opt[k]`.
    pub target: Vec<CMat>,
}

/// Everything needed to evaluate one transceiver scheme on one channel.
#[derive(Debug, Clone)]
pub struct TransceiverDesign {
    pub precoders: Vec<HybridPrecoder>,
    pub combiner: HybridCombiner,
}

impl TransceiverDesign {
    /// Compound precoder `F[k] = blkdiag(F_RF,u[k]) blkdiag(F_BB,u[k])`.
    pub fn compound_precoder(&self, k: usize) -> CMat {
        compound_precoder(&self.precoders, k)
    }

    /// Re-targets a design made for Bussgang gain `from_xi` to `to_xi`. The
    /// digital combiner carries the only dependence on the ADC resolution, as
    /// a `1/xi` factor.
    pub fn retarget_adc(&self, from_xi: f64, to_xi: f64) -> Self {
        let factor = num_complex::Complex64::new(from_xi / to_xi, 0.0);
        let mut out = self.clone();
        for w in &mut out.combiner.baseband {
            *w *= factor;
        }
        out
    }
}

pub fn compound_precoder(precoders: &[HybridPrecoder], k: usize) -> CMat {
    let blocks: Vec<CMat> = precoders.iter().map(|p| p.product(k)).collect();
    blkdiag(&blocks)
}
