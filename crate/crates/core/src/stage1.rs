//! Frequency-flat hybrid beamformer design.
//!
//! Transmit side: the dominant right-singular vectors of every bin's channel
//! are phase-aligned, averaged over the band and approximated by SOMP over a
//! steering dictionary. Receive side: a per-bin MMSE target is approximated
//! by a partially connected combiner that picks exactly one steering atom
//! per subarray.

use log::warn;
use num_complex::Complex64;
use rayon::prelude::*;

use crate::beamformer::{compound_precoder, HybridCombiner, HybridPrecoder, PerBin, TransceiverDesign};
use crate::channel::{sine_response, ChannelRealization};
use crate::config::{AdcBits, SystemConfig};
use crate::error::{Error, Result};
use crate::numerics::{frobenius_sq, hcat, hermitian_solve, real, svd, CMat};
use crate::quantization::bussgang_gain;

/// Rotates a column so its largest-magnitude entry is real and positive.
fn align_phase(col: &mut nalgebra::DVectorViewMut<'_, Complex64>) {
    if let Some(peak) = col.iter().copied().max_by(|a, b| a.norm().total_cmp(&b.norm())) {
        if peak.norm() > 0.0 {
            let rot = peak.conj() / peak.norm();
            for z in col.iter_mut() {
                *z *= rot;
            }
        }
    }
}

/// The `n_streams` dominant right-singular vectors of `h`, phase-aligned.
pub fn per_bin_optimal_precoder(h: &CMat, n_streams: usize) -> Result<CMat> {
    let n = h.ncols();
    if n_streams > n {
        return Err(Error::RankDeficient(format!(
            "{n_streams} streams requested from {n} transmit antennas"
        )));
    }
    // zero rows leave V unchanged and give a complete right basis
    let padded;
    let h = if h.nrows() < n {
        padded = h.clone().resize_vertically(n, Complex64::new(0.0, 0.0));
        &padded
    } else {
        h
    };
    let s = svd(h)?;
    let tol = s.singular_values.first().copied().unwrap_or(0.0) * 1e-12;
    let rank = s.singular_values.iter().filter(|&&x| x > tol).count();
    if rank < n_streams {
        warn!("channel rank {rank} below {n_streams} streams; padding with null-space directions");
    }
    let mut v = s.v.columns(0, n_streams).into_owned();
    for mut col in v.column_iter_mut() {
        align_phase(&mut col);
    }
    Ok(v)
}

/// Arithmetic mean over bins.
pub fn average_precoder(per_bin: &[CMat]) -> Result<CMat> {
    let first = per_bin
        .first()
        .ok_or_else(|| Error::Value("cannot average an empty sequence".into()))?;
    let mut acc = CMat::zeros(first.nrows(), first.ncols());
    for m in per_bin {
        if m.shape() != first.shape() {
            return Err(Error::ShapeMismatch("per-bin precoders differ in shape".into()));
        }
        acc += m;
    }
    Ok(acc / real(per_bin.len() as f64))
}

/// Steering dictionary at the carrier frequency.
#[derive(Debug, Clone)]
pub struct Dictionary {
    /// `N x G` unit-norm atoms.
    pub atoms: CMat,
    /// `sin(theta_g)`, strictly increasing over `[-1, 1]`.
    pub grid_sines: Vec<f64>,
    pub grid_angles: Vec<f64>,
}

impl Dictionary {
    pub fn len(&self) -> usize {
        self.grid_sines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid_sines.is_empty()
    }
}

/// `G` atoms whose steering parameter `sin(theta)` spans `[-1, 1]`
/// uniformly, both endpoints included (`G = 1` steers broadside).
pub fn build_dictionary(n: usize, g: usize, f_c: f64) -> Dictionary {
    let grid_sines: Vec<f64> = if g == 1 {
        vec![0.0]
    } else {
        (0..g).map(|i| 2.0 * i as f64 / (g - 1) as f64 - 1.0).collect()
    };
    let cols: Vec<CMat> = grid_sines
        .iter()
        .map(|&s| CMat::from_column_slice(n, 1, sine_response(n, s, f_c, f_c).as_slice()))
        .collect();
    Dictionary {
        atoms: hcat(&cols),
        grid_angles: grid_sines.iter().map(|s| s.asin()).collect(),
        grid_sines,
    }
}

fn least_squares(basis: &CMat, target: &CMat) -> Result<CMat> {
    let gram = basis.adjoint() * basis;
    hermitian_solve(&gram, &(basis.adjoint() * target))
}

/// Index of the largest row energy of `phi`, lowest index on ties.
///
/// The steering grid contains both `sin(theta) = -1` and `+1`, which are the
/// same atom; energies within a relative `1e-10` count as ties so that the
/// choice does not depend on rounding.
fn argmax_row_energy(phi: &CMat, exclude: &[usize]) -> usize {
    let mut best = (usize::MAX, f64::NEG_INFINITY);
    for (i, row) in phi.row_iter().enumerate() {
        if exclude.contains(&i) {
            continue;
        }
        let e: f64 = row.iter().map(|z| z.norm_sqr()).sum();
        if best.0 == usize::MAX || e > best.1 * (1.0 + 1e-10) + 1e-300 {
            best = (i, e);
        }
    }
    best.0
}

/// Simultaneous orthogonal matching pursuit of `f_opt` over `dict`.
///
/// The baseband is rescaled so `||F_RF F_BB||_F^2` equals the number of
/// columns of `f_opt`.
pub fn somp_precoder(f_opt: &CMat, dict: &Dictionary, n_rf: usize) -> Result<HybridPrecoder> {
    if dict.atoms.nrows() != f_opt.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "dictionary atoms of length {} against target with {} rows",
            dict.atoms.nrows(),
            f_opt.nrows()
        )));
    }
    if dict.len() < n_rf {
        return Err(Error::GridTooSmall {
            grid: dict.len(),
            needed: n_rf,
        });
    }
    let mut residual = f_opt.clone();
    let mut chosen: Vec<usize> = Vec::with_capacity(n_rf);
    let mut rf = CMat::zeros(f_opt.nrows(), 0);
    let mut bb = CMat::zeros(0, f_opt.ncols());
    for _ in 0..n_rf {
        let phi = dict.atoms.adjoint() * &residual;
        let idx = argmax_row_energy(&phi, &chosen);
        chosen.push(idx);
        rf = hcat(&[rf, dict.atoms.columns(idx, 1).into_owned()]);
        bb = least_squares(&rf, f_opt).or_else(|_| pinv_solve(&rf, f_opt))?;
        let r = f_opt - &rf * &bb;
        let norm = r.norm();
        residual = if norm > 0.0 { r / real(norm) } else { r };
    }
    let power = frobenius_sq(&(&rf * &bb));
    if power > 0.0 {
        bb *= real((f_opt.ncols() as f64 / power).sqrt());
    }
    Ok(HybridPrecoder {
        rf: PerBin::Flat(rf),
        baseband: PerBin::Flat(bb),
        selected_angles: chosen.iter().map(|&i| dict.grid_angles[i]).collect(),
    })
}

fn pinv_solve(basis: &CMat, target: &CMat) -> Result<CMat> {
    let pinv = basis
        .clone()
        .pseudo_inverse(1e-12)
        .map_err(|e| Error::Value(e.to_string()))?;
    Ok(pinv * target)
}

/// `W_opt = H_eq (H_eq^H H_eq + sigma^2 N_s I)^-1`.
pub fn mmse_combiner_per_bin(h_eq: &CMat, sigma2: f64, n_s: usize) -> Result<CMat> {
    let n = h_eq.ncols();
    let a = h_eq.adjoint() * h_eq + CMat::identity(n, n) * real(sigma2 * n_s as f64);
    // (A^H)^-1 = A^-1 for Hermitian A, so W^H = A^-1 H_eq^H
    Ok(hermitian_solve(&a, &h_eq.adjoint())?.adjoint())
}

/// Per-subarray dictionaries forming the block-diagonal receive dictionary.
#[derive(Debug, Clone)]
pub struct BlockDictionary {
    pub blocks: Vec<Dictionary>,
}

impl BlockDictionary {
    pub fn uniform(subarrays: usize, per_sub: usize, grid: usize, f_c: f64) -> Self {
        Self {
            blocks: vec![build_dictionary(per_sub, grid, f_c); subarrays],
        }
    }

    /// Full block-diagonal matrix `blkdiag(A^1, ..., A^S)`.
    pub fn concat(&self) -> CMat {
        let blocks: Vec<CMat> = self.blocks.iter().map(|d| d.atoms.clone()).collect();
        crate::numerics::blkdiag(&blocks)
    }
}

/// Result of the spatially sparse receive search.
#[derive(Debug, Clone)]
pub struct SparseCombinerTrace {
    pub rf: CMat,
    pub selected: Vec<usize>,
    pub selected_angles: Vec<f64>,
    /// `||W_opt - W_RF W_BB||_F` after each subarray.
    pub residual_norms: Vec<f64>,
}

/// One steering column per subarray, chosen greedily against the
/// concatenated per-bin MMSE target `w_opt_concat` (`N_BS x K N_s`).
///
/// The analog combiner is block-diagonal with unit-norm blocks, so its Gram
/// matrix is the identity: the least-squares baseband is `W_RF^H W_opt` and
/// each selection only changes the residual on its own subarray's rows. The
/// residual is kept unnormalized; a positive scale does not move the argmax.
pub fn spatially_sparse_search(w_opt_concat: &CMat, dict: &BlockDictionary) -> Result<SparseCombinerTrace> {
    let rows: usize = dict.blocks.iter().map(|b| b.atoms.nrows()).sum();
    if rows != w_opt_concat.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "dictionary rows {rows} against target rows {}",
            w_opt_concat.nrows()
        )));
    }
    let mut residual = w_opt_concat.clone();
    let mut rf = CMat::zeros(rows, dict.blocks.len());
    let mut selected = Vec::with_capacity(dict.blocks.len());
    let mut angles = Vec::with_capacity(dict.blocks.len());
    let mut norms = Vec::with_capacity(dict.blocks.len());
    let mut row0 = 0;
    for (s, block) in dict.blocks.iter().enumerate() {
        let n = block.atoms.nrows();
        let target = w_opt_concat.rows(row0, n);
        let phi = block.atoms.adjoint() * residual.rows(row0, n);
        let i = argmax_row_energy(&phi, &[]);
        let w = block.atoms.column(i);
        let w_norm = w.norm();
        if (w_norm - 1.0).abs() > 1e-9 {
            return Err(Error::RankDeficient(format!("subarray {s} atom has norm {w_norm}")));
        }
        rf.view_mut((row0, s), (n, 1)).copy_from(&w);
        let coeff = w.adjoint() * &target;
        let projected = &target - w * coeff;
        residual.rows_mut(row0, n).copy_from(&projected);
        norms.push(residual.norm());
        selected.push(i);
        angles.push(block.grid_angles[i]);
        row0 += n;
    }
    Ok(SparseCombinerTrace {
        rf,
        selected,
        selected_angles: angles,
        residual_norms: norms,
    })
}

/// `A^-1 (W^H W)^-1 W^H W_opt[k]` for every bin, with `A = xi I`.
pub fn combiner_baseband(w_rf: &CMat, w_opt: &CMat, xi: f64) -> Result<CMat> {
    let gram = w_rf.adjoint() * w_rf;
    Ok(hermitian_solve(&gram, &(w_rf.adjoint() * w_opt))? / real(xi))
}

/// Algorithm-style partially connected combiner for per-bin targets.
pub fn spatially_sparse_combiner(
    w_opt: &[CMat],
    dict: &BlockDictionary,
    xi: f64,
) -> Result<HybridCombiner> {
    let concat = hcat(w_opt);
    let trace = spatially_sparse_search(&concat, dict)?;
    let gram = trace.rf.adjoint() * &trace.rf;
    debug_assert!((gram - CMat::identity(trace.rf.ncols(), trace.rf.ncols())).norm() < 1e-9);
    let baseband = w_opt
        .iter()
        .map(|w| combiner_baseband(&trace.rf, w, xi))
        .collect::<Result<Vec<_>>>()?;
    Ok(HybridCombiner {
        rf: PerBin::Flat(trace.rf),
        baseband,
        selected_angles: trace.selected_angles,
        target: w_opt.to_vec(),
    })
}

/// SOMP precoder of one user from its per-bin responses.
pub fn user_precoder(freq: &[CMat], cfg: &SystemConfig) -> Result<HybridPrecoder> {
    let per_bin = freq
        .iter()
        .map(|h| per_bin_optimal_precoder(h, cfg.streams_per_user))
        .collect::<Result<Vec<_>>>()?;
    let f_opt = average_precoder(&per_bin)?;
    let dict = build_dictionary(cfg.tx_antennas_per_user, cfg.tx_grid_size, cfg.carrier_frequency_hz);
    somp_precoder(&f_opt, &dict, cfg.tx_rf_chains_per_user)
}

/// Per-bin MMSE targets for a given set of precoders.
pub fn mmse_targets(channel: &ChannelRealization, precoders: &[HybridPrecoder], cfg: &SystemConfig) -> Result<Vec<CMat>> {
    (0..channel.num_bins())
        .into_par_iter()
        .map(|k| {
            let h_eq = &channel.mu[k] * compound_precoder(precoders, k);
            mmse_combiner_per_bin(&h_eq, cfg.noise_variance, cfg.total_streams())
                .map_err(|e| e.context(format!("MMSE combiner at bin {k}")))
        })
        .collect()
}

pub fn receive_dictionary(cfg: &SystemConfig) -> BlockDictionary {
    BlockDictionary::uniform(
        cfg.bs_rf_chains,
        cfg.subarray_antennas(),
        cfg.rx_grid_size_per_subarray,
        cfg.carrier_frequency_hz,
    )
}

/// Complete frequency-flat design.
pub fn design(channel: &ChannelRealization, cfg: &SystemConfig, bits: AdcBits) -> Result<TransceiverDesign> {
    let precoders = channel
        .freq
        .par_iter()
        .enumerate()
        .map(|(u, f)| user_precoder(f, cfg).map_err(|e| e.context(format!("precoder of user {u}"))))
        .collect::<Result<Vec<_>>>()?;
    let targets = mmse_targets(channel, &precoders, cfg)?;
    let combiner = spatially_sparse_combiner(&targets, &receive_dictionary(cfg), bussgang_gain(bits)?)?;
    Ok(TransceiverDesign { precoders, combiner })
}
