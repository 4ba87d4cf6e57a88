//! Low-resolution ADC model: Lloyd-Max scalar quantizers for Gaussian inputs
//! and the Bussgang-linearized covariance algebra at the RF-chain outputs.

use std::sync::OnceLock;

use log::warn;
use nalgebra::DVector;
use num_complex::Complex64;
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::erf::erfc;

use crate::beamformer::{HybridPrecoder, PerBin, TransceiverDesign};
use crate::channel::ChannelRealization;
use crate::config::{AdcBits, SystemConfig};
use crate::error::{Error, Result};
use crate::numerics::{hermitian_part, real, CMat, CVec};

pub const MAX_BITS: u32 = 12;
const LLOYD_TOL: f64 = 1e-12;
const LLOYD_MAX_ITER: usize = 2_000_000;

/// Symmetric Lloyd-Max quantizer for a unit-variance Gaussian.
#[derive(Debug, Clone)]
pub struct Codebook {
    pub bits: u32,
    /// `levels.len() + 1` cell edges, the outer two infinite.
    pub boundaries: Vec<f64>,
    pub levels: Vec<f64>,
    /// Mean-square error for unit-variance input.
    pub distortion: f64,
    pub iterations: usize,
}

fn pdf(x: f64) -> f64 {
    if x.is_infinite() {
        0.0
    } else {
        (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
    }
}

/// Upper tail probability `P(X > x)`.
fn tail(x: f64) -> f64 {
    if x == f64::INFINITY {
        0.0
    } else {
        0.5 * erfc(x / std::f64::consts::SQRT_2)
    }
}

fn x_pdf(x: f64) -> f64 {
    if x.is_infinite() {
        0.0
    } else {
        x * pdf(x)
    }
}

/// `E[X | a < X <= b]` for `0 <= a < b`.
fn centroid(a: f64, b: f64) -> f64 {
    let mass = tail(a) - tail(b);
    if mass <= 0.0 {
        // deep tail: the conditional mean tends to the lower edge
        return a;
    }
    (pdf(a) - pdf(b)) / mass
}

/// `int_a^b (x - y)^2 phi(x) dx`.
fn cell_mse(a: f64, b: f64, y: f64) -> f64 {
    (1.0 + y * y) * (tail(a) - tail(b)) - 2.0 * y * (pdf(a) - pdf(b)) + (x_pdf(a) - x_pdf(b))
}

fn design_codebook(bits: u32) -> Codebook {
    let n = 1usize << bits;
    let half = n / 2;
    let normal = Normal::standard();
    // positive half: levels[i] for cell i, edges[i]..edges[i+1], edges[0] = 0
    let mut levels: Vec<f64> = (0..half)
        .map(|i| normal.inverse_cdf(0.5 + (i as f64 + 0.5) / n as f64))
        .collect();
    let mut edges = vec![0.0; half + 1];
    edges[half] = f64::INFINITY;
    let mut iterations = 0;
    loop {
        for i in 1..half {
            edges[i] = 0.5 * (levels[i - 1] + levels[i]);
        }
        let mut delta: f64 = 0.0;
        for i in 0..half {
            let y = centroid(edges[i], edges[i + 1]);
            delta = delta.max((y - levels[i]).abs());
            levels[i] = y;
        }
        iterations += 1;
        if delta < LLOYD_TOL {
            break;
        }
        if iterations >= LLOYD_MAX_ITER {
            warn!("Lloyd-Max for {bits} bits stopped at {iterations} iterations, last change {delta:e}");
            break;
        }
    }
    for i in 1..half {
        edges[i] = 0.5 * (levels[i - 1] + levels[i]);
    }
    let half_mse: f64 = (0..half).map(|i| cell_mse(edges[i], edges[i + 1], levels[i])).sum();
    let mut full_levels: Vec<f64> = levels.iter().rev().map(|y| -y).collect();
    full_levels.extend_from_slice(&levels);
    let mut boundaries: Vec<f64> = edges.iter().rev().map(|e| -e).collect();
    boundaries.extend_from_slice(&edges[1..]);
    Codebook {
        bits,
        boundaries,
        levels: full_levels,
        distortion: 2.0 * half_mse,
        iterations,
    }
}

/// Cached Lloyd-Max codebook for `bits` in `1..=MAX_BITS`.
pub fn codebook(bits: u32) -> Result<&'static Codebook> {
    static TABLES: [OnceLock<Codebook>; MAX_BITS as usize] = [const { OnceLock::new() }; MAX_BITS as usize];
    if bits == 0 || bits > MAX_BITS {
        return Err(Error::UnsupportedResolution(bits));
    }
    Ok(TABLES[bits as usize - 1].get_or_init(|| design_codebook(bits)))
}

impl Codebook {
    /// Quantizes one real sample of unit-variance scale.
    pub fn quantize_scalar(&self, x: f64) -> f64 {
        // interior boundaries are sorted; count how many lie at or below x
        let interior = &self.boundaries[1..self.boundaries.len() - 1];
        let idx = interior.partition_point(|&b| b <= x);
        self.levels[idx]
    }
}

/// Noise-to-signal ratio of the optimal `b`-bit quantizer (0 when ideal).
pub fn distortion_factor(bits: AdcBits) -> Result<f64> {
    match bits {
        AdcBits::Ideal => Ok(0.0),
        AdcBits::Bits(b) => Ok(codebook(b)?.distortion),
    }
}

/// Bussgang gain `xi = 1 - rho`.
pub fn bussgang_gain(bits: AdcBits) -> Result<f64> {
    Ok(1.0 - distortion_factor(bits)?)
}

/// Output of [`quantize`].
#[derive(Debug, Clone, PartialEq)]
pub struct Quantized {
    pub values: CVec,
    /// Set when the input was all zeros and could not be gain-normalized.
    pub zero_input: bool,
}

/// Quantizes real and imaginary parts independently after scaling the
/// vector to unit per-component variance; the scaling is undone on output.
pub fn quantize(x: &CVec, bits: AdcBits) -> Result<Quantized> {
    let power = x.norm_squared() / x.len().max(1) as f64;
    quantize_with_power(x, bits, power)
}

/// Like [`quantize`], but with the gain control set for a known average
/// complex power instead of the vector's own.
pub fn quantize_with_power(x: &CVec, bits: AdcBits, power: f64) -> Result<Quantized> {
    let b = match bits {
        AdcBits::Ideal => {
            return Ok(Quantized {
                values: x.clone(),
                zero_input: false,
            })
        }
        AdcBits::Bits(b) => b,
    };
    let cb = codebook(b)?;
    if !(power.is_finite() && power >= 0.0) {
        return Err(Error::Value(format!("ADC input power must be finite and nonnegative, got {power}")));
    }
    if power == 0.0 {
        return Ok(Quantized {
            values: CVec::zeros(x.len()),
            zero_input: true,
        });
    }
    let scale = (power / 2.0).sqrt();
    let values = x.map(|z| {
        Complex64::new(
            cb.quantize_scalar(z.re / scale) * scale,
            cb.quantize_scalar(z.im / scale) * scale,
        )
    });
    Ok(Quantized {
        values,
        zero_input: false,
    })
}

/// `sum_u sum_n H_u(n) R_uu H_u(n)^H` with
/// `R_uu = sigma_b^2 F_RF,u F_BB,u F_BB,u^H F_RF,u^H` (frequency-flat precoders).
pub fn signal_covariance_qtilde(
    channel: &ChannelRealization,
    precoders: &[HybridPrecoder],
    cfg: &SystemConfig,
) -> Result<CMat> {
    if precoders.len() != channel.num_users() {
        return Err(Error::ShapeMismatch(format!(
            "{} precoders for {} users",
            precoders.len(),
            channel.num_users()
        )));
    }
    let n_bs = channel.mu[0].nrows();
    let mut q = CMat::zeros(n_bs, n_bs);
    for (taps, p) in channel.taps.iter().zip(precoders) {
        if !p.is_flat() {
            return Err(Error::ShapeMismatch("Q-tilde needs frequency-flat precoders".into()));
        }
        let f = p.product(0);
        if f.nrows() != taps[0].ncols() {
            return Err(Error::ShapeMismatch(format!(
                "precoder {:?} against taps {:?}",
                f.shape(),
                taps[0].shape()
            )));
        }
        // H R_uu H^H = sigma_b^2 (H F)(H F)^H
        for h in taps {
            let g = h * &f;
            q += &g * g.adjoint() * real(cfg.symbol_variance);
        }
    }
    Ok(hermitian_part(&q))
}

fn diag_only(m: &CMat) -> CMat {
    CMat::from_diagonal(&DVector::from_iterator(
        m.nrows(),
        (0..m.nrows()).map(|i| real(m[(i, i)].re)),
    ))
}

/// `R = xi (1 - xi) diag(W^H Q W + sigma^2 W^H W)` and `C = xi^2 sigma^2 W^H W + R`.
pub fn noise_covariances(w_rf: &CMat, qtilde: &CMat, xi: f64, sigma2: f64) -> Result<(CMat, CMat)> {
    if qtilde.nrows() != w_rf.nrows() || !qtilde.is_square() {
        return Err(Error::ShapeMismatch(format!(
            "W_RF {:?} against Q-tilde {:?}",
            w_rf.shape(),
            qtilde.shape()
        )));
    }
    let gram = w_rf.adjoint() * w_rf;
    let combined = w_rf.adjoint() * qtilde * w_rf + &gram * real(sigma2);
    let r = diag_only(&combined) * real(xi * (1.0 - xi));
    let c = &gram * real(xi * xi * sigma2) + &r;
    Ok((r, c))
}

/// Linearized ADC model for one design on one channel.
#[derive(Debug, Clone)]
pub struct QuantizationModel {
    pub bits: AdcBits,
    pub xi: f64,
    /// Diagonal quantization-noise covariance.
    pub r: CMat,
    /// Effective-noise covariance per bin (flat unless the analog combiner is).
    pub c: PerBin,
}

impl QuantizationModel {
    pub fn build(
        channel: &ChannelRealization,
        design: &TransceiverDesign,
        bits: AdcBits,
        cfg: &SystemConfig,
    ) -> Result<Self> {
        let power = chain_power(channel, design, cfg)?;
        Self::from_chain_power(&power, &design.combiner.rf, bits, cfg.noise_variance)
    }

    /// Builds the model from a precomputed [`chain_power`] matrix, which does
    /// not depend on the ADC resolution.
    pub fn from_chain_power(power: &CMat, w_rf: &PerBin, bits: AdcBits, sigma2: f64) -> Result<Self> {
        let xi = bussgang_gain(bits)?;
        if power.nrows() != w_rf.shape().1 || !power.is_square() {
            return Err(Error::ShapeMismatch(format!(
                "chain power {:?} against W_RF {:?}",
                power.shape(),
                w_rf.shape()
            )));
        }
        let r = diag_only(power) * real(xi * (1.0 - xi));
        let c = match w_rf {
            PerBin::Flat(w) => PerBin::Flat(w.adjoint() * w * real(xi * xi * sigma2) + &r),
            PerBin::Varying(ws) => PerBin::Varying(
                ws.iter()
                    .map(|w| w.adjoint() * w * real(xi * xi * sigma2) + &r)
                    .collect(),
            ),
        };
        Ok(Self { bits, xi, r, c })
    }
}

/// Pre-ADC covariance of the RF chains, `W^H (Q-tilde + sigma^2 I) W`.
pub fn chain_power(channel: &ChannelRealization, design: &TransceiverDesign, cfg: &SystemConfig) -> Result<CMat> {
    if design.precoders.len() != channel.num_users() {
        return Err(Error::ShapeMismatch(format!(
            "{} precoders for {} users",
            design.precoders.len(),
            channel.num_users()
        )));
    }
    let sigma2 = cfg.noise_variance;
    let flat = design.combiner.rf.is_flat() && design.precoders.iter().all(|p| p.is_flat());
    let power = if flat {
        // taps folded into W^H H(n) F
        let w = design.combiner.rf.at(0);
        let wh = w.adjoint();
        let mut power = &wh * w * real(sigma2);
        for (taps, p) in channel.taps.iter().zip(&design.precoders) {
            let f = p.product(0);
            for h in taps {
                let g = &wh * (h * &f);
                power += &g * g.adjoint() * real(cfg.symbol_variance);
            }
        }
        power
    } else {
        // Frequency-dependent beamformers: average each chain's pre-ADC
        // power over the bins, which reduces to the flat formula by Parseval.
        let k_bins = channel.num_bins();
        let n_rf = design.combiner.rf.shape().1;
        let mut power = CMat::zeros(n_rf, n_rf);
        for k in 0..k_bins {
            let w = design.combiner.rf.at(k);
            let wh = w.adjoint();
            for (u, p) in design.precoders.iter().enumerate() {
                let g = &wh * (&channel.freq[u][k] * p.product(k));
                power += &g * g.adjoint() * real(cfg.symbol_variance);
            }
            power += &wh * w * real(sigma2);
        }
        power / real(k_bins as f64)
    };
    Ok(hermitian_part(&power))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{complex_gaussian_vec, stream_rng};
    use rand::Rng;
    use rand_distr::StandardNormal;

    /// Independent Lloyd iteration on a dense numeric grid (trapezoid
    /// quadrature of the Gaussian density), used only to check the
    /// closed-form implementation.
    fn lloyd_by_quadrature(n_levels: usize) -> f64 {
        let (lo, hi, steps) = (-9.0f64, 9.0f64, 40_000usize);
        let dx = (hi - lo) / steps as f64;
        let xs: Vec<f64> = (0..=steps).map(|i| lo + i as f64 * dx).collect();
        let w: Vec<f64> = xs
            .iter()
            .enumerate()
            .map(|(i, x)| {
                let t = if i == 0 || i == steps { 0.5 } else { 1.0 };
                t * dx * (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
            })
            .collect();
        let mut levels: Vec<f64> = (0..n_levels)
            .map(|i| -2.0 + 4.0 * (i as f64 + 0.5) / n_levels as f64)
            .collect();
        // nearest level for each grid point, via a sorted sweep
        let assign = |levels: &[f64]| -> Vec<usize> {
            let mut j = 0;
            xs.iter()
                .map(|x| {
                    while j + 1 < levels.len() && (levels[j + 1] - x).abs() <= (levels[j] - x).abs() {
                        j += 1;
                    }
                    j
                })
                .collect()
        };
        for _ in 0..20_000 {
            let idx = assign(&levels);
            let mut num = vec![0.0; n_levels];
            let mut den = vec![0.0; n_levels];
            for ((x, wi), &j) in xs.iter().zip(&w).zip(&idx) {
                num[j] += x * wi;
                den[j] += wi;
            }
            let next: Vec<f64> = num.iter().zip(&den).map(|(a, b)| a / b).collect();
            let d = next.iter().zip(&levels).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            levels = next;
            if d < 1e-11 {
                break;
            }
        }
        let idx = assign(&levels);
        xs.iter()
            .zip(&w)
            .zip(&idx)
            .map(|((x, wi), &j)| (levels[j] - x).powi(2) * wi)
            .sum()
    }

    #[test]
    fn ideal_has_no_distortion() {
        assert_eq!(distortion_factor(AdcBits::Ideal).unwrap(), 0.0);
        assert_eq!(bussgang_gain(AdcBits::Ideal).unwrap(), 1.0);
    }

    #[test]
    fn one_bit_distortion_is_analytic() {
        let rho = distortion_factor(AdcBits::Bits(1)).unwrap();
        assert!((rho - (1.0 - 2.0 / std::f64::consts::PI)).abs() < 1e-12);
        let cb = codebook(1).unwrap();
        assert!((cb.levels[1] - (2.0 / std::f64::consts::PI).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn three_bit_distortion_matches_quadrature_oracle() {
        let oracle = lloyd_by_quadrature(8);
        assert!((oracle - 0.03454).abs() < 5e-5, "oracle {oracle}");
        let rho = distortion_factor(AdcBits::Bits(3)).unwrap();
        assert!((rho - oracle).abs() < 1e-6, "{rho} vs {oracle}");
    }

    #[test]
    fn distortion_decreases_with_bits() {
        let rhos: Vec<f64> = (1..=8).map(|b| distortion_factor(AdcBits::Bits(b)).unwrap()).collect();
        assert!(rhos.windows(2).all(|w| w[1] < w[0]), "{rhos:?}");
        // classic table values
        for (b, v) in [(2, 0.1175), (4, 0.009497)] {
            assert!((rhos[b - 1] - v).abs() < 2e-4, "b={b} {}", rhos[b - 1]);
        }
    }

    #[test]
    fn too_many_bits_rejected() {
        assert_eq!(
            distortion_factor(AdcBits::Bits(13)).unwrap_err(),
            Error::UnsupportedResolution(13)
        );
        assert!(distortion_factor(AdcBits::Bits(0)).is_err());
    }

    #[test]
    fn one_bit_quantizer_on_half_variance_input() {
        // per-component variance 0.5 for this vector: mean |x|^2 = 1
        let x = CVec::from_vec(vec![
            Complex64::new(0.6, 0.8),
            Complex64::new(-0.8, -0.6),
            Complex64::new(0.8, -0.6),
            Complex64::new(-0.6, 0.8),
        ]);
        assert!((x.norm_squared() / 4.0 - 1.0).abs() < 1e-12);
        let q = quantize(&x, AdcBits::Bits(1)).unwrap();
        let v = (1.0 / std::f64::consts::PI).sqrt();
        assert!((q.values[0] - Complex64::new(v, v)).norm() < 1e-12);
        assert!((q.values[1] - Complex64::new(-v, -v)).norm() < 1e-12);
        assert!(!q.zero_input);
    }

    #[test]
    fn ideal_quantizer_is_identity_and_zero_is_flagged() {
        let x = complex_gaussian_vec(&mut stream_rng(1, 1), 10, 1.0);
        assert_eq!(quantize(&x, AdcBits::Ideal).unwrap().values, x);
        let q = quantize(&CVec::zeros(4), AdcBits::Bits(3)).unwrap();
        assert!(q.zero_input);
        assert_eq!(q.values, CVec::zeros(4));
    }

    #[test]
    fn empirical_distortion_and_bussgang_orthogonality() {
        let mut rng = stream_rng(99, 0);
        for b in 1..=4u32 {
            let cb = codebook(b).unwrap();
            let xi = 1.0 - cb.distortion;
            let n = 1_000_000;
            let (mut err, mut sig, mut cross, mut res) = (0.0, 0.0, 0.0, 0.0);
            for _ in 0..n {
                let x: f64 = rng.sample(StandardNormal);
                let q = cb.quantize_scalar(x);
                err += (x - q).powi(2);
                sig += x * x;
                let e = q - xi * x;
                cross += x * e;
                res += e * e;
            }
            let rho = err / sig;
            assert!((rho / cb.distortion - 1.0).abs() < 0.02, "b={b}");
            let corr = cross / (sig * res).sqrt();
            assert!(corr.abs() < 0.01, "b={b} corr={corr}");
        }
    }

    #[test]
    fn noise_covariances_collapse_without_quantization() {
        let mut rng = stream_rng(4, 0);
        let w = CMat::from_iterator(6, 2, complex_gaussian_vec(&mut rng, 12, 1.0).iter().copied());
        let g = CMat::from_iterator(6, 6, complex_gaussian_vec(&mut rng, 36, 1.0).iter().copied());
        let q = &g * g.adjoint();
        let (r, c) = noise_covariances(&w, &q, 1.0, 0.3).unwrap();
        assert!(r.norm() == 0.0);
        assert!((c - w.adjoint() * &w * real(0.3)).norm() < 1e-12);
    }

    #[test]
    fn noise_covariances_with_orthonormal_blocks() {
        let w = crate::numerics::blkdiag(&[
            CMat::from_element(3, 1, real(1.0 / 3f64.sqrt())),
            CMat::from_element(3, 1, real(1.0 / 3f64.sqrt())),
        ]);
        let xi = 0.9;
        let (r, c) = noise_covariances(&w, &CMat::zeros(6, 6), xi, 0.5).unwrap();
        let i2 = CMat::identity(2, 2);
        assert!((&r - &i2 * real(xi * (1.0 - xi) * 0.5)).norm() < 1e-14);
        assert!((&c - &i2 * real(xi * 0.5)).norm() < 1e-14);
        assert!(noise_covariances(&w, &CMat::zeros(5, 5), xi, 0.5).is_err());
    }

    use crate::beamformer::HybridCombiner;

    fn rand_mat(rng: &mut crate::numerics::SimRng, r: usize, c: usize) -> CMat {
        CMat::from_iterator(r, c, complex_gaussian_vec(rng, r * c, 1.0).iter().copied())
    }

    fn hand_channel(taps: Vec<Vec<CMat>>) -> ChannelRealization {
        let k = taps[0].len();
        let freq: Vec<Vec<CMat>> = taps
            .iter()
            .map(|t| crate::numerics::dft_matrix_sequence(t, k).unwrap())
            .collect();
        let mu = (0..k)
            .map(|b| crate::numerics::hcat(&freq.iter().map(|f| f[b].clone()).collect::<Vec<_>>()))
            .collect();
        ChannelRealization {
            paths: vec![vec![]; taps.len()],
            freq,
            taps,
            mu,
        }
    }

    fn flat_precoder(f: CMat) -> HybridPrecoder {
        let n = f.ncols();
        HybridPrecoder {
            rf: PerBin::Flat(f),
            baseband: PerBin::Flat(CMat::identity(n, n)),
            selected_angles: vec![0.0; n],
        }
    }

    fn small_cfg() -> SystemConfig {
        let mut c = crate::config::default_paper_config();
        c.symbol_variance = 1.7;
        c.noise_variance = 0.3;
        c
    }

    #[test]
    fn qtilde_single_tap_identity_is_projector() {
        let mut rng = stream_rng(40, 0);
        let f = crate::numerics::svd(&rand_mat(&mut rng, 4, 4)).unwrap().u.columns(0, 2).into_owned();
        let ch = hand_channel(vec![vec![CMat::identity(4, 4), CMat::zeros(4, 4)]]);
        let cfg = small_cfg();
        let q = signal_covariance_qtilde(&ch, &[flat_precoder(f.clone())], &cfg).unwrap();
        assert!((q - &f * f.adjoint() * real(1.7)).norm() < 1e-12);
        let zero = signal_covariance_qtilde(&ch, &[flat_precoder(CMat::zeros(4, 2))], &cfg).unwrap();
        assert_eq!(zero, CMat::zeros(4, 4));
    }

    #[test]
    fn qtilde_matches_term_by_term_sum() {
        let mut rng = stream_rng(41, 0);
        let taps: Vec<Vec<CMat>> = (0..2).map(|_| (0..2).map(|_| rand_mat(&mut rng, 4, 3)).collect()).collect();
        let fs: Vec<CMat> = (0..2).map(|_| rand_mat(&mut rng, 3, 2)).collect();
        let ch = hand_channel(taps.clone());
        let cfg = small_cfg();
        let pre: Vec<HybridPrecoder> = fs.iter().cloned().map(flat_precoder).collect();
        let q = signal_covariance_qtilde(&ch, &pre, &cfg).unwrap();
        let mut oracle = CMat::zeros(4, 4);
        for u in 0..2 {
            let r_uu = &fs[u] * fs[u].adjoint() * real(1.7);
            for n in 0..2 {
                for a in 0..4 {
                    for b in 0..4 {
                        let mut acc = Complex64::new(0.0, 0.0);
                        for i in 0..3 {
                            for j in 0..3 {
                                acc += taps[u][n][(a, i)] * r_uu[(i, j)] * taps[u][n][(b, j)].conj();
                            }
                        }
                        oracle[(a, b)] += acc;
                    }
                }
            }
        }
        assert!((q - oracle).norm() < 1e-12);
    }

    #[test]
    fn model_matches_covariance_formulas_flat_and_per_bin() {
        let mut rng = stream_rng(42, 0);
        let taps: Vec<Vec<CMat>> = (0..2).map(|_| (0..4).map(|_| rand_mat(&mut rng, 6, 3)).collect()).collect();
        let ch = hand_channel(taps);
        let cfg = small_cfg();
        let pre: Vec<HybridPrecoder> = (0..2).map(|_| flat_precoder(rand_mat(&mut rng, 3, 2))).collect();
        let w = crate::numerics::blkdiag(&[
            CMat::from_element(3, 1, real(1.0 / 3f64.sqrt())),
            CMat::from_element(3, 1, Complex64::new(0.0, 1.0 / 3f64.sqrt())),
        ]);
        let combiner = HybridCombiner {
            rf: PerBin::Flat(w.clone()),
            baseband: vec![CMat::identity(2, 2); 4],
            selected_angles: vec![0.0; 2],
            target: vec![],
        };
        let design = TransceiverDesign {
            precoders: pre.clone(),
            combiner: combiner.clone(),
        };
        let qt = signal_covariance_qtilde(&ch, &pre, &cfg).unwrap();
        let xi = bussgang_gain(AdcBits::Bits(2)).unwrap();
        let (r, c) = noise_covariances(&w, &qt, xi, 0.3).unwrap();
        let m = QuantizationModel::build(&ch, &design, AdcBits::Bits(2), &cfg).unwrap();
        assert!((&m.r - &r).norm() < 1e-12 * r.norm());
        assert!((m.c.at(0) - &c).norm() < 1e-12 * c.norm());
        // the same beamformers written out per bin give the same covariances
        let varying = TransceiverDesign {
            precoders: pre
                .iter()
                .map(|p| HybridPrecoder {
                    rf: PerBin::Varying(vec![p.rf.at(0).clone(); 4]),
                    baseband: p.baseband.clone(),
                    selected_angles: p.selected_angles.clone(),
                })
                .collect(),
            combiner: HybridCombiner {
                rf: PerBin::Varying(vec![w.clone(); 4]),
                ..combiner
            },
        };
        let mv = QuantizationModel::build(&ch, &varying, AdcBits::Bits(2), &cfg).unwrap();
        assert!((&mv.r - &r).norm() < 1e-10 * r.norm());
        for k in 0..4 {
            assert!((mv.c.at(k) - &c).norm() < 1e-10 * c.norm());
        }
        // C - xi^2 sigma^2 W^H W is diagonal and nonnegative
        let d = m.c.at(0) - w.adjoint() * &w * real(xi * xi * 0.3);
        for i in 0..2 {
            for j in 0..2 {
                if i == j {
                    assert!(d[(i, i)].re >= 0.0);
                } else {
                    assert_eq!(d[(i, j)], Complex64::new(0.0, 0.0));
                }
            }
        }
    }
}
