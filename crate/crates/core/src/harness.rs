//! Experiment orchestration: sweep plans, Monte-Carlo evaluation, the
//! time-domain reference chain, and CSV/binary persistence.
//!
//! Every trial draws its channel from `stream_rng(seed, trial)`, so all sweep
//! points (SNR, resolution, bandwidth, pulse shape) of one trial see the same
//! path geometry. Results do not depend on thread count or execution order.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::beamformer::{PerBin, TransceiverDesign};
use crate::channel::{generate_channel, ChannelRealization};
use crate::config::{default_paper_config, AdcBits, PulseShape, SystemConfig};
use crate::error::{Error, Result};
use crate::metrics::{
    beam_split_summary, digital_reference_se, direction_grid, log_det_ratio, nag_sweep, sum_spectral_efficiency,
    BeamSplitSummary, RatePoint,
};
use crate::numerics::{
    circular_convolve, complex_gaussian_vec, dft_sequence, idft_sequence, real, stream_rng, CMat, CVec,
};
use crate::quantization::{chain_power, codebook, quantize_with_power, QuantizationModel};
use crate::stage2::{receive_networks, TtdNetwork};
use crate::{stage1, stage2};

pub const VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

/// Transceiver variant evaluated at a sweep point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    /// Flat first stage followed by delay-line compensation, quantized.
    ProposedTtd,
    /// Frequency-flat first stage only, quantized.
    Stage1Only,
    /// Proposed design with unquantized ADCs.
    IdealAdc,
    /// Fully digital, unquantized per-bin SVD transceiver.
    DigitalReference,
}

impl Scheme {
    pub fn tag(self) -> &'static str {
        match self {
            Scheme::ProposedTtd => "proposed-ttd",
            Scheme::Stage1Only => "stage1-only",
            Scheme::IdealAdc => "ideal-adc",
            Scheme::DigitalReference => "digital-reference",
        }
    }

    fn uses_adc_sweep(self) -> bool {
        matches!(self, Scheme::ProposedTtd | Scheme::Stage1Only)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlanKind {
    /// Spectral efficiency over SNR / resolution / pulse / bandwidth.
    #[default]
    Rate,
    /// Normalized array gain against direction for one realization.
    Nag,
}

fn default_trials() -> usize {
    100
}

fn default_directions() -> usize {
    1024
}

/// JSON experiment description. Empty sweep lists fall back to the single
/// value held by the base configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentPlan {
    pub name: String,
    #[serde(default)]
    pub kind: PlanKind,
    /// Base configuration; the built-in default when absent.
    #[serde(default)]
    pub config: Option<SystemConfig>,
    /// `key=value` assignments applied on top of `config`.
    #[serde(default)]
    pub overrides: Vec<String>,
    #[serde(default)]
    pub snr_db: Vec<f64>,
    #[serde(default)]
    pub adc_bits: Vec<AdcBits>,
    #[serde(default)]
    pub pulse_shapes: Vec<PulseShape>,
    #[serde(default)]
    pub bandwidths_hz: Vec<f64>,
    #[serde(default)]
    pub schemes: Vec<Scheme>,
    #[serde(default = "default_trials")]
    pub trials: usize,
    /// Falls back to the configuration's `rng_seed`.
    #[serde(default)]
    pub seed: Option<u64>,
    /// Direction-grid size of NAG plans.
    #[serde(default = "default_directions")]
    pub nag_directions: usize,
    /// Bins of NAG plans; first, centre and last bin when empty.
    #[serde(default)]
    pub nag_bins: Vec<usize>,
}

impl ExperimentPlan {
    pub fn new(name: &str, kind: PlanKind) -> Self {
        Self {
            name: name.to_string(),
            kind,
            config: None,
            overrides: Vec::new(),
            snr_db: Vec::new(),
            adc_bits: Vec::new(),
            pulse_shapes: Vec::new(),
            bandwidths_hz: Vec::new(),
            schemes: Vec::new(),
            trials: default_trials(),
            seed: None,
            nag_directions: default_directions(),
            nag_bins: Vec::new(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| e.context(format!("plan {}", path.display())))
    }

    /// Base configuration with the overrides applied, validated.
    pub fn base_config(&self) -> Result<SystemConfig> {
        let mut cfg = self.config.clone().unwrap_or_else(default_paper_config);
        for o in &self.overrides {
            cfg = cfg.apply_override(o)?;
        }
        cfg.validate()
    }

    pub fn seed(&self, cfg: &SystemConfig) -> u64 {
        self.seed.unwrap_or(cfg.rng_seed)
    }

    /// Resolves defaults and checks the plan; the result has nonempty sweeps.
    pub fn resolved(&self) -> Result<ResolvedPlan> {
        let cfg = self.base_config()?;
        let or = |v: &Vec<f64>, d: f64| if v.is_empty() { vec![d] } else { v.clone() };
        let snr_db = or(&self.snr_db, cfg.snr_db());
        let bandwidths_hz = or(&self.bandwidths_hz, cfg.bandwidth_hz);
        let adc_bits = if self.adc_bits.is_empty() { vec![cfg.adc_bits] } else { self.adc_bits.clone() };
        let pulse_shapes = if self.pulse_shapes.is_empty() {
            vec![cfg.pulse_shape]
        } else {
            self.pulse_shapes.clone()
        };
        let schemes = if self.schemes.is_empty() {
            vec![Scheme::ProposedTtd]
        } else {
            self.schemes.clone()
        };
        if self.trials == 0 {
            return Err(Error::Value("plan needs at least one trial".into()));
        }
        if let Some(x) = snr_db.iter().find(|x| !x.is_finite()) {
            return Err(Error::Value(format!("non-finite SNR {x}")));
        }
        if let Some(b) = bandwidths_hz.iter().find(|b| !(b.is_finite() && **b > 0.0)) {
            return Err(Error::Value(format!("bandwidth must be positive, got {b}")));
        }
        for b in &adc_bits {
            crate::quantization::bussgang_gain(*b)?;
        }
        if self.kind == PlanKind::Nag && self.nag_directions < 2 {
            return Err(Error::Value("NAG plans need at least two directions".into()));
        }
        let k = cfg.num_bins;
        let nag_bins = if self.nag_bins.is_empty() {
            vec![0, k / 2, k - 1]
        } else {
            self.nag_bins.clone()
        };
        if let Some(&b) = nag_bins.iter().find(|&&b| b >= k) {
            return Err(Error::Index { index: b, max: k });
        }
        // every sweep point must yield a valid configuration
        let mut points = Vec::new();
        for &bw in &bandwidths_hz {
            for &pulse in &pulse_shapes {
                let mut c = cfg.clone();
                c.bandwidth_hz = bw;
                c.pulse_shape = pulse;
                points.push(c.validate()?);
            }
        }
        Ok(ResolvedPlan {
            name: self.name.clone(),
            kind: self.kind,
            seed: self.seed(&cfg),
            config_hash: cfg.hash_hex(),
            base: cfg,
            points,
            snr_db,
            adc_bits,
            schemes,
            trials: self.trials,
            nag_directions: self.nag_directions,
            nag_bins,
        })
    }
}

/// Plan with every default filled in.
#[derive(Debug, Clone)]
pub struct ResolvedPlan {
    pub name: String,
    pub kind: PlanKind,
    pub base: SystemConfig,
    pub config_hash: String,
    pub seed: u64,
    /// One configuration per (bandwidth, pulse shape).
    pub points: Vec<SystemConfig>,
    pub snr_db: Vec<f64>,
    pub adc_bits: Vec<AdcBits>,
    pub schemes: Vec<Scheme>,
    pub trials: usize,
    pub nag_directions: usize,
    pub nag_bins: Vec<usize>,
}

/// One aggregated row of a rate sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateRow {
    pub scheme: String,
    pub pulse_shape: String,
    pub bandwidth_hz: f64,
    #[serde(rename = "snr_dB")]
    pub snr_db: f64,
    pub bits: String,
    pub se_mean: f64,
    pub se_std: f64,
    pub rate_gbps: f64,
    pub trials: usize,
    pub seed: u64,
    pub config_hash: String,
}

impl RateRow {
    fn from_point(p: RatePoint, seed: u64, config_hash: &str) -> Self {
        Self {
            scheme: p.scheme,
            pulse_shape: p.pulse_shape,
            bandwidth_hz: p.bandwidth_hz,
            snr_db: p.snr_db,
            bits: p.adc_bits,
            se_mean: p.spectral_efficiency,
            se_std: p.se_std,
            rate_gbps: p.rate_bps / 1e9,
            trials: p.trials,
            seed,
            config_hash: config_hash.to_string(),
        }
    }
}

/// One row of a NAG sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NagCsvRow {
    pub beam: String,
    pub subarray: usize,
    pub bin: usize,
    pub freq_hz: f64,
    pub direction_sine: f64,
    pub nag: f64,
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Provenance {
    pub plan: String,
    pub config_hash: String,
    pub seed: u64,
    pub trials: usize,
    pub version: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ExperimentRows {
    Rate(Vec<RateRow>),
    Nag(Vec<NagCsvRow>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub provenance: Provenance,
    pub rows: ExperimentRows,
}

impl ExperimentResult {
    pub fn len(&self) -> usize {
        match &self.rows {
            ExperimentRows::Rate(r) => r.len(),
            ExperimentRows::Nag(r) => r.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn rate_rows(&self) -> Option<&[RateRow]> {
        match &self.rows {
            ExperimentRows::Rate(r) => Some(r),
            ExperimentRows::Nag(_) => None,
        }
    }

    pub fn nag_rows(&self) -> Option<&[NagCsvRow]> {
        match &self.rows {
            ExperimentRows::Nag(r) => Some(r),
            ExperimentRows::Rate(_) => None,
        }
    }

    /// Writes the CSV atomically, plus a `<path>.meta.json` provenance sidecar.
    pub fn write(&self, path: &Path) -> Result<()> {
        match &self.rows {
            ExperimentRows::Rate(r) => write_csv(path, r)?,
            ExperimentRows::Nag(r) => write_csv(path, r)?,
        }
        let meta = serde_json::to_string_pretty(&self.provenance)?;
        write_atomic(&sidecar_path(path), meta.as_bytes())
    }
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Io(format!("{}: {e}", path.display()))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| io_err(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

/// Serializes rows to CSV (header row, RFC-4180 quoting) and writes the file
/// only once complete.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| io_err(path, e))?;
    }
    let bytes = w.into_inner().map_err(|e| io_err(path, e))?;
    write_atomic(path, &bytes)
}

// ---------------------------------------------------------------------------
// Monte-Carlo rate sweeps

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct SampleKey {
    snr: usize,
    scheme: Scheme,
    /// Index into the resolution list; `None` for resolution-free schemes.
    bits: Option<usize>,
}

/// Spectral efficiencies of every scheme at every SNR and resolution for the
/// channel of one trial.
fn trial_samples(plan: &ResolvedPlan, cfg: &SystemConfig, trial: usize) -> Result<Vec<(SampleKey, f64)>> {
    let mut rng = stream_rng(plan.seed, trial as u64);
    let channel = generate_channel(cfg, &mut rng)?;
    let has = |s: Scheme| plan.schemes.contains(&s);
    let mut out = Vec::new();
    for (si, &snr) in plan.snr_db.iter().enumerate() {
        let c = cfg.clone().with_snr_db(snr);
        let sigma2 = c.noise_variance;
        let needs_ttd = has(Scheme::ProposedTtd) || has(Scheme::IdealAdc);
        let stage1_design = if has(Scheme::Stage1Only) || needs_ttd {
            Some(stage1::design(&channel, &c, AdcBits::Ideal)?)
        } else {
            None
        };
        let ttd_design = match (&stage1_design, needs_ttd) {
            (Some(d1), true) => Some(stage2::design(&channel, d1, &c, AdcBits::Ideal)?),
            _ => None,
        };
        // Designs are made for ideal ADCs; the resolution only rescales the
        // digital combiner and the noise model.
        let sweep = |scheme: Scheme, design: &TransceiverDesign, out: &mut Vec<(SampleKey, f64)>| -> Result<()> {
            let power = chain_power(&channel, design, &c)?;
            let targets: Vec<(Option<usize>, AdcBits)> = if scheme.uses_adc_sweep() {
                plan.adc_bits.iter().copied().enumerate().map(|(i, b)| (Some(i), b)).collect()
            } else {
                vec![(None, AdcBits::Ideal)]
            };
            for (bi, bits) in targets {
                let q = QuantizationModel::from_chain_power(&power, &design.combiner.rf, bits, sigma2)?;
                let d = design.retarget_adc(1.0, q.xi);
                let se = sum_spectral_efficiency(&channel, &d, &q, &c)?;
                out.push((SampleKey { snr: si, scheme, bits: bi }, se));
            }
            Ok(())
        };
        for &scheme in &plan.schemes {
            match scheme {
                Scheme::Stage1Only => sweep(scheme, stage1_design.as_ref().expect("designed"), &mut out)?,
                Scheme::ProposedTtd | Scheme::IdealAdc => {
                    sweep(scheme, ttd_design.as_ref().expect("designed"), &mut out)?
                }
                Scheme::DigitalReference => {
                    let se = digital_reference_se(&channel, &c)?;
                    out.push((SampleKey { snr: si, scheme, bits: None }, se));
                }
            }
        }
    }
    Ok(out)
}

fn run_rate(plan: &ResolvedPlan) -> Result<Vec<RateRow>> {
    let jobs: Vec<(usize, usize)> = (0..plan.points.len())
        .flat_map(|p| (0..plan.trials).map(move |t| (p, t)))
        .collect();
    let per_job = jobs
        .par_iter()
        .map(|&(p, t)| {
            let cfg = &plan.points[p];
            trial_samples(plan, cfg, t).map_err(|e| {
                e.context(format!(
                    "sweep point (bandwidth {} Hz, pulse {}), trial {t}",
                    cfg.bandwidth_hz, cfg.pulse_shape
                ))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    // gathered in (point, trial) order, independent of scheduling
    let mut samples: BTreeMap<(usize, SampleKey), Vec<f64>> = BTreeMap::new();
    for (&(p, _), job) in jobs.iter().zip(per_job) {
        for (key, se) in job {
            samples.entry((p, key)).or_default().push(se);
        }
    }
    let mut rows = Vec::new();
    for (p, cfg) in plan.points.iter().enumerate() {
        for &scheme in &plan.schemes {
            let bits: Vec<Option<usize>> = if scheme.uses_adc_sweep() {
                (0..plan.adc_bits.len()).map(Some).collect()
            } else {
                vec![None]
            };
            for bi in bits {
                let label = bi.map_or_else(|| "ideal".to_string(), |i| plan.adc_bits[i].to_string());
                for (si, &snr) in plan.snr_db.iter().enumerate() {
                    let key = SampleKey { snr: si, scheme, bits: bi };
                    let s = samples.get(&(p, key)).map(Vec::as_slice).unwrap_or(&[]);
                    let point = RatePoint::from_samples(
                        scheme.tag(),
                        &cfg.pulse_shape.to_string(),
                        cfg.bandwidth_hz,
                        snr,
                        &label,
                        s,
                    );
                    rows.push(RateRow::from_point(point, plan.seed, &plan.config_hash));
                }
            }
        }
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Beam-split sweeps

/// First-stage design on the seeded realization plus the delay network of
/// every receive subarray.
pub fn seeded_receive_beams(cfg: &SystemConfig, seed: u64) -> Result<(TransceiverDesign, Vec<CVec>, Vec<TtdNetwork>)> {
    let cfg = cfg.clone().validate()?;
    let channel = generate_channel(&cfg, &mut stream_rng(seed, 0))?;
    let design = stage1::design(&channel, &cfg, cfg.adc_bits)?;
    let networks = receive_networks(&design.combiner, &cfg)?;
    let per_sub = cfg.subarray_antennas();
    let w = design.combiner.rf.at(0);
    let steer = (0..cfg.bs_rf_chains)
        .map(|s| w.view((s * per_sub, s), (per_sub, 1)).column(0).into_owned())
        .collect();
    Ok((design, steer, networks))
}

/// Per-bin array gain of every receive subarray at its own direction, with
/// and without delay compensation.
pub fn beam_split_study(cfg: &SystemConfig, seed: u64, grid_points: usize) -> Result<Vec<Vec<BeamSplitSummary>>> {
    let cfg = cfg.clone().validate()?;
    let (_, steer, networks) = seeded_receive_beams(&cfg, seed)?;
    let grid = direction_grid(grid_points);
    steer
        .par_iter()
        .zip(networks.par_iter())
        .enumerate()
        .map(|(s, (v, net))| beam_split_summary(s, v, net, &grid, &cfg))
        .collect()
}

fn run_nag(plan: &ResolvedPlan) -> Result<Vec<NagCsvRow>> {
    let cfg = &plan.base;
    let (_, steer, networks) = seeded_receive_beams(cfg, plan.seed)?;
    let grid = direction_grid(plan.nag_directions);
    let mut rows = Vec::new();
    for (s, (v, net)) in steer.iter().zip(&networks).enumerate() {
        for r in nag_sweep(s, v, net, &grid, &plan.nag_bins, cfg)? {
            rows.push(NagCsvRow {
                beam: r.beam.to_string(),
                subarray: r.subarray,
                bin: r.bin,
                freq_hz: r.freq_hz,
                direction_sine: r.direction_sine,
                nag: r.nag,
                seed: plan.seed,
                config_hash: plan.config_hash.clone(),
            });
        }
    }
    Ok(rows)
}

/// Runs a plan to completion.
pub fn run_plan(plan: &ExperimentPlan) -> Result<ExperimentResult> {
    let resolved = plan.resolved()?;
    let rows = match resolved.kind {
        PlanKind::Rate => ExperimentRows::Rate(run_rate(&resolved)?),
        PlanKind::Nag => ExperimentRows::Nag(run_nag(&resolved)?),
    };
    Ok(ExperimentResult {
        provenance: Provenance {
            plan: resolved.name.clone(),
            config_hash: resolved.config_hash.clone(),
            seed: resolved.seed,
            trials: match resolved.kind {
                PlanKind::Rate => resolved.trials,
                PlanKind::Nag => 1,
            },
            version: VERSION.to_string(),
        },
        rows,
    })
}

/// SNR grid shared by the built-in rate plans.
pub fn default_snr_grid() -> Vec<f64> {
    (0..=6).map(|i| -10.0 + 5.0 * i as f64).collect()
}

pub const CANNED_PLANS: [&str; 4] = ["fig2a", "fig2b", "fig2c", "fig2d"];

/// Built-in plans: `fig2a` (beam split), `fig2b` (scheme comparison),
/// `fig2c` (pulse shapes), `fig2d` (ADC resolution).
pub fn canned_plan(name: &str, base: Option<SystemConfig>) -> Result<ExperimentPlan> {
    let mut plan = match name {
        "fig2a" => {
            let mut p = ExperimentPlan::new(name, PlanKind::Nag);
            p.seed = Some(7);
            p.trials = 1;
            p
        }
        "fig2b" => {
            let mut p = ExperimentPlan::new(name, PlanKind::Rate);
            p.schemes = vec![
                Scheme::ProposedTtd,
                Scheme::Stage1Only,
                Scheme::IdealAdc,
                Scheme::DigitalReference,
            ];
            p.adc_bits = vec![AdcBits::Bits(3)];
            p
        }
        "fig2c" => {
            let mut p = ExperimentPlan::new(name, PlanKind::Rate);
            p.schemes = vec![Scheme::ProposedTtd, Scheme::Stage1Only];
            p.pulse_shapes = vec![PulseShape::Rrc, PulseShape::Rect];
            p.adc_bits = vec![AdcBits::Bits(3)];
            p
        }
        "fig2d" => {
            let mut p = ExperimentPlan::new(name, PlanKind::Rate);
            p.schemes = vec![Scheme::ProposedTtd];
            p.adc_bits = vec![
                AdcBits::Bits(1),
                AdcBits::Bits(2),
                AdcBits::Bits(3),
                AdcBits::Bits(4),
                AdcBits::Ideal,
            ];
            p
        }
        other => {
            return Err(Error::Value(format!(
                "unknown plan {other:?}; expected one of {}",
                CANNED_PLANS.join(", ")
            )))
        }
    };
    if plan.kind == PlanKind::Rate {
        plan.snr_db = default_snr_grid();
    }
    plan.config = base;
    Ok(plan)
}

// ---------------------------------------------------------------------------
// Time-domain reference chain

/// Output of [`time_domain_oracle`].
#[derive(Debug, Clone)]
pub struct OracleOutput {
    /// `y[k]`, length `N_s`, per bin.
    pub y: Vec<CVec>,
    /// Analog-combined samples per time index, before the ADCs.
    pub pre_adc: Vec<CVec>,
    /// The same samples after the ADCs.
    pub post_adc: Vec<CVec>,
}

fn check_block(block: &[CVec], k: usize, len: usize, what: &str) -> Result<()> {
    if block.len() != k {
        return Err(Error::LengthMismatch { expected: k, actual: block.len() });
    }
    if let Some(v) = block.iter().find(|v| v.len() != len) {
        return Err(Error::ShapeMismatch(format!("{what} sample of length {} (expected {len})", v.len())));
    }
    Ok(())
}

/// Applies a per-bin matrix to a time-domain block through the DFT.
fn per_bin_filter(mats: &[CMat], x: &[CVec], k: usize, adjoint: bool) -> Result<Vec<CVec>> {
    let xf = dft_sequence(x, k)?;
    let yf: Vec<CVec> = xf
        .iter()
        .zip(mats)
        .map(|(v, m)| if adjoint { m.adjoint() * v } else { m * v })
        .collect();
    idft_sequence(&yf, k)
}

/// Simulates one zero-padded block through the complete receive chain: user
/// precoding, circular convolution with the channel taps, AWGN, analog
/// combining, per-chain ADCs, K-point FFT and digital combining.
///
/// `symbols[u][n]` holds user `u`'s stream vector at time `n` (zeros in the
/// padding); `noise[n]` is the antenna noise. `adc_power` fixes each chain's
/// gain control; when `None`, every chain normalizes to its own block power.
/// Frequency-dependent beamformers act through the DFT of the block.
pub fn time_domain_oracle(
    channel: &ChannelRealization,
    design: &TransceiverDesign,
    bits: AdcBits,
    symbols: &[Vec<CVec>],
    noise: Option<&[CVec]>,
    adc_power: Option<&[f64]>,
) -> Result<OracleOutput> {
    let k = channel.num_bins();
    let n_bs = channel.mu[0].nrows();
    let w_rf = &design.combiner.rf;
    let n_rf = w_rf.shape().1;
    if symbols.len() != channel.num_users() || design.precoders.len() != channel.num_users() {
        return Err(Error::ShapeMismatch(format!(
            "{} symbol streams and {} precoders for {} users",
            symbols.len(),
            design.precoders.len(),
            channel.num_users()
        )));
    }
    if let Some(p) = adc_power {
        if p.len() != n_rf {
            return Err(Error::LengthMismatch { expected: n_rf, actual: p.len() });
        }
    }
    let mut pre = vec![CVec::zeros(n_rf); k];
    let all_flat = w_rf.is_flat() && design.precoders.iter().all(|p| p.is_flat());
    if all_flat {
        // combine the taps first: W^H H(n) F, then convolve the symbols
        let wh = w_rf.at(0).adjoint();
        for ((taps, p), b) in channel.taps.iter().zip(&design.precoders).zip(symbols) {
            let f = p.product(0);
            check_block(b, k, f.ncols(), "symbol")?;
            let eff: Vec<CMat> = taps.iter().map(|h| &wh * h * &f).collect();
            for (acc, v) in pre.iter_mut().zip(circular_convolve(&eff, b, k)?) {
                *acc += v;
            }
        }
        if let Some(n) = noise {
            check_block(n, k, n_bs, "noise")?;
            for (acc, v) in pre.iter_mut().zip(n) {
                *acc += &wh * v;
            }
        }
    } else {
        let mut r = vec![CVec::zeros(n_bs); k];
        for ((taps, p), b) in channel.taps.iter().zip(&design.precoders).zip(symbols) {
            check_block(b, k, p.baseband.shape().1, "symbol")?;
            let x = match (&p.rf, &p.baseband) {
                (PerBin::Flat(_), PerBin::Flat(_)) => {
                    let f = p.product(0);
                    b.iter().map(|v| &f * v).collect()
                }
                _ => {
                    let f: Vec<CMat> = (0..k).map(|i| p.product(i)).collect();
                    per_bin_filter(&f, b, k, false)?
                }
            };
            for (acc, v) in r.iter_mut().zip(circular_convolve(taps, &x, k)?) {
                *acc += v;
            }
        }
        if let Some(n) = noise {
            check_block(n, k, n_bs, "noise")?;
            for (acc, v) in r.iter_mut().zip(n) {
                *acc += v;
            }
        }
        pre = match w_rf {
            PerBin::Flat(w) => r.iter().map(|v| w.adjoint() * v).collect(),
            PerBin::Varying(ws) => per_bin_filter(ws, &r, k, true)?,
        };
    }
    // one ADC per chain, fed the chain's K samples of this block
    let mut post = vec![CVec::zeros(n_rf); k];
    for chain in 0..n_rf {
        let x = CVec::from_iterator(k, pre.iter().map(|v| v[chain]));
        let power = match adc_power {
            Some(p) => p[chain],
            None => x.norm_squared() / k as f64,
        };
        let q = quantize_with_power(&x, bits, power)?;
        for (n, v) in post.iter_mut().enumerate() {
            v[chain] = q.values[n];
        }
    }
    let yf = dft_sequence(&post, k)?;
    let y = yf
        .iter()
        .zip(&design.combiner.baseband)
        .map(|(v, w)| w.adjoint() * v)
        .collect();
    Ok(OracleOutput { y, pre_adc: pre, post_adc: post })
}

/// Zero-padded symbol block per user: `N_d` Gaussian samples of variance
/// `sigma_b^2` followed by `K - N_d` zeros.
pub fn draw_symbol_block<R: Rng + ?Sized>(cfg: &SystemConfig, rng: &mut R) -> Vec<Vec<CVec>> {
    (0..cfg.num_users)
        .map(|_| {
            (0..cfg.num_bins)
                .map(|n| {
                    if n < cfg.data_block_len {
                        complex_gaussian_vec(rng, cfg.streams_per_user, cfg.symbol_variance)
                    } else {
                        CVec::zeros(cfg.streams_per_user)
                    }
                })
                .collect()
        })
        .collect()
}

pub fn draw_noise_block<R: Rng + ?Sized>(cfg: &SystemConfig, rng: &mut R) -> Vec<CVec> {
    (0..cfg.num_bins)
        .map(|_| complex_gaussian_vec(rng, cfg.bs_antennas, cfg.noise_variance))
        .collect()
}

/// Draws a block and its noise from `rng` and runs [`time_domain_oracle`].
pub fn simulate_block<R: Rng + ?Sized>(
    channel: &ChannelRealization,
    design: &TransceiverDesign,
    bits: AdcBits,
    cfg: &SystemConfig,
    rng: &mut R,
    adc_power: Option<&[f64]>,
) -> Result<OracleOutput> {
    let symbols = draw_symbol_block(cfg, rng);
    let noise = draw_noise_block(cfg, rng);
    time_domain_oracle(channel, design, bits, &symbols, Some(&noise), adc_power)
}

/// Frequency-domain prediction `W_BB^H W_RF^H H_MU[k] F[k] b[k]` for an
/// unquantized, noiseless block.
pub fn frequency_domain_model(
    channel: &ChannelRealization,
    design: &TransceiverDesign,
    symbols: &[Vec<CVec>],
) -> Result<Vec<CVec>> {
    let k = channel.num_bins();
    let per_user = symbols.iter().map(|b| dft_sequence(b, k)).collect::<Result<Vec<_>>>()?;
    (0..k)
        .map(|i| {
            let stacked: Vec<CVec> = per_user.iter().map(|b| b[i].clone()).collect();
            let b = CVec::from_iterator(
                stacked.iter().map(|v| v.len()).sum(),
                stacked.iter().flat_map(|v| v.iter().copied()),
            );
            let g = design.combiner.baseband[i].adjoint()
                * design.combiner.rf.at(i).adjoint()
                * &channel.mu[i]
                * design.compound_precoder(i);
            if g.ncols() != b.len() {
                return Err(Error::ShapeMismatch(format!("{} streams against {:?}", b.len(), g.shape())));
            }
            Ok(g * b)
        })
        .collect()
}

/// Spectral efficiency measured by probing the unquantized time-domain chain:
/// unit impulses on each stream give the per-bin end-to-end gains, unit
/// impulses on each antenna give the combined noise covariance.
pub fn probed_spectral_efficiency(
    channel: &ChannelRealization,
    design: &TransceiverDesign,
    cfg: &SystemConfig,
) -> Result<f64> {
    let k = channel.num_bins();
    let n_bs = channel.mu[0].nrows();
    let users = channel.num_users();
    let n_su: Vec<usize> = design.precoders.iter().map(|p| p.baseband.shape().1).collect();
    let n_s: usize = n_su.iter().sum();
    let zeros = || -> Vec<Vec<CVec>> { n_su.iter().map(|&n| vec![CVec::zeros(n); k]).collect() };
    let n_out = design.combiner.baseband[0].ncols();
    let mut gains = vec![CMat::zeros(n_out, n_s); k];
    let mut col = 0;
    for u in 0..users {
        for i in 0..n_su[u] {
            let mut b = zeros();
            b[u][0][i] = real(1.0);
            let out = time_domain_oracle(channel, design, AdcBits::Ideal, &b, None, None)?;
            for (g, y) in gains.iter_mut().zip(&out.y) {
                g.set_column(col, y);
            }
            col += 1;
        }
    }
    let mut noise_cov = vec![CMat::zeros(n_out, n_out); k];
    for a in 0..n_bs {
        let mut n = vec![CVec::zeros(n_bs); k];
        n[0][a] = real(1.0);
        let out = time_domain_oracle(channel, design, AdcBits::Ideal, &zeros(), Some(&n), None)?;
        for (c, y) in noise_cov.iter_mut().zip(&out.y) {
            *c += y * y.adjoint() * real(cfg.noise_variance);
        }
    }
    let mut acc = 0.0;
    for i in 0..k {
        let s = &gains[i] * gains[i].adjoint() * real(cfg.symbol_variance);
        acc += log_det_ratio(&noise_cov[i], &s, n_out, i)?;
    }
    Ok(acc / k as f64)
}

// ---------------------------------------------------------------------------
// Dumps

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PathCsvRow {
    user: usize,
    path: usize,
    is_los: bool,
    cluster: usize,
    ray: usize,
    aoa_rad: f64,
    aod_rad: f64,
    delay_s: f64,
    phase_rad: f64,
    length_m: f64,
}

const CHANNEL_MAGIC: &[u8; 8] = b"THZCHAN1";

/// Writes `<stem>.paths.csv` (path geometry) and `<stem>.freq.bin` (per-bin
/// responses). The binary file is the 8-byte magic `THZCHAN1`, then users,
/// bins, rows and columns as little-endian `u64`, then `(re, im)` pairs of
/// little-endian `f64` ordered by user, bin, row, column.
pub fn dump_channel(channel: &ChannelRealization, stem: &Path) -> Result<(PathBuf, PathBuf)> {
    let csv_path = with_suffix(stem, ".paths.csv");
    let bin_path = with_suffix(stem, ".freq.bin");
    let rows: Vec<PathCsvRow> = channel
        .paths
        .iter()
        .enumerate()
        .flat_map(|(u, ps)| {
            ps.iter().enumerate().map(move |(i, p)| PathCsvRow {
                user: u,
                path: i,
                is_los: p.is_los,
                cluster: p.cluster,
                ray: p.ray,
                aoa_rad: p.aoa_rad,
                aod_rad: p.aod_rad,
                delay_s: p.delay_s,
                phase_rad: p.phase_rad,
                length_m: p.length_m,
            })
        })
        .collect();
    write_csv(&csv_path, &rows)?;
    let (rows_n, cols_n) = channel.freq[0][0].shape();
    let mut bytes = Vec::new();
    bytes.extend_from_slice(CHANNEL_MAGIC);
    for d in [channel.num_users(), channel.num_bins(), rows_n, cols_n] {
        bytes.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for user in &channel.freq {
        for h in user {
            for r in 0..rows_n {
                for c in 0..cols_n {
                    bytes.extend_from_slice(&h[(r, c)].re.to_le_bytes());
                    bytes.extend_from_slice(&h[(r, c)].im.to_le_bytes());
                }
            }
        }
    }
    write_atomic(&bin_path, &bytes)?;
    Ok((csv_path, bin_path))
}

/// Reads the per-bin responses written by [`dump_channel`] as `freq[u][k]`.
pub fn read_channel_responses(path: &Path) -> Result<Vec<Vec<CMat>>> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| io_err(path, e))?;
    if bytes.len() < 40 || &bytes[..8] != CHANNEL_MAGIC {
        return Err(Error::Value(format!("{} is not a channel dump", path.display())));
    }
    let dim = |i: usize| u64::from_le_bytes(bytes[8 + 8 * i..16 + 8 * i].try_into().expect("8 bytes")) as usize;
    let (users, bins, rows, cols) = (dim(0), dim(1), dim(2), dim(3));
    let expected = users
        .checked_mul(bins)
        .and_then(|x| x.checked_mul(rows))
        .and_then(|x| x.checked_mul(cols))
        .and_then(|x| x.checked_mul(16))
        .and_then(|x| x.checked_add(40));
    if expected != Some(bytes.len()) {
        return Err(Error::Value(format!("{}: truncated or oversized channel dump", path.display())));
    }
    let mut vals = bytes[40..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let mut next = || num_complex::Complex64::new(vals.next().unwrap_or(0.0), vals.next().unwrap_or(0.0));
    Ok((0..users)
        .map(|_| {
            (0..bins)
                .map(|_| {
                    let mut m = CMat::zeros(rows, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            m[(r, c)] = next();
                        }
                    }
                    m
                })
                .collect()
        })
        .collect())
}

fn with_suffix(stem: &Path, suffix: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// One delay line of one RF chain.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DelayRow {
    /// `rx` (base-station subarray) or `tx` (user RF chain).
    pub side: String,
    /// User index on the transmit side; empty on the receive side.
    pub user: Option<usize>,
    /// Subarray or RF-chain index.
    pub chain: usize,
    /// Delay-line index within the chain.
    pub line: usize,
    pub direction_sine: f64,
    pub delay_s: f64,
}

/// Delay tables of the first-stage design on the seeded realization.
pub fn delay_table(cfg: &SystemConfig, seed: u64) -> Result<Vec<DelayRow>> {
    let cfg = cfg.clone().validate()?;
    let (design, _, networks) = seeded_receive_beams(&cfg, seed)?;
    let mut rows = Vec::new();
    let mut push = |side: &str, user: Option<usize>, chain: usize, net: &TtdNetwork| {
        for (line, &d) in net.delays_s.iter().enumerate() {
            rows.push(DelayRow {
                side: side.to_string(),
                user,
                chain,
                line,
                direction_sine: net.direction,
                delay_s: d,
            });
        }
    };
    for (s, net) in networks.iter().enumerate() {
        push("rx", None, s, net);
    }
    for (u, p) in design.precoders.iter().enumerate() {
        for (l, a) in p.selected_angles.iter().enumerate() {
            let net = TtdNetwork::new(a.sin(), cfg.tx_antennas_per_user, cfg.ttd_per_chain, cfg.carrier_frequency_hz)?;
            push("tx", Some(u), l, &net);
        }
    }
    Ok(rows)
}

/// One cell of a Lloyd-Max codebook, normalized to unit input variance.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CodebookRow {
    pub bits: u32,
    pub index: usize,
    pub level: f64,
    /// Lower decision threshold; `-inf` for the first cell.
    pub lower: f64,
    /// Upper decision threshold; `inf` for the last cell.
    pub upper: f64,
    pub distortion: f64,
}

pub fn codebook_table(bits: u32) -> Result<Vec<CodebookRow>> {
    let cb = codebook(bits)?;
    let n = cb.levels.len();
    Ok((0..n)
        .map(|i| CodebookRow {
            bits,
            index: i,
            level: cb.levels[i],
            lower: cb.boundaries[i],
            upper: cb.boundaries[i + 1],
            distortion: cb.distortion,
        })
        .collect())
}

/// Writes a UTF-8 text file atomically (used for JSON side outputs).
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut buf = Vec::new();
    buf.write_all(text.as_bytes()).map_err(|e| io_err(path, e))?;
    write_atomic(path, &buf)
}
