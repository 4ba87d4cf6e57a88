//! Simulation configuration and its on-disk JSON form.
//!
//! The JSON file is a flat object using SI units. `pulse_shape` is `"rrc"` or
//! `"rect"`, and `adc_bits` is either a positive integer or the string
//! `"ideal"`. Derived quantities (subarray size, phase shifters per delay
//! line, total streams) are exposed as methods; `num_bins` may be given as `0`
//! and is filled in by [`SystemConfig::validate`].

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;

use crate::error::{Error, Result};

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// ADC resolution at the base station.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AdcBits {
    Bits(u32),
    Ideal,
}

impl AdcBits {
    pub fn is_ideal(self) -> bool {
        matches!(self, AdcBits::Ideal)
    }
}

impl fmt::Display for AdcBits {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AdcBits::Bits(b) => write!(f, "{b}"),
            AdcBits::Ideal => f.write_str("ideal"),
        }
    }
}

impl std::str::FromStr for AdcBits {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().trim_matches('"');
        if s.eq_ignore_ascii_case("ideal") {
            return Ok(AdcBits::Ideal);
        }
        s.parse::<u32>()
            .map(AdcBits::Bits)
            .map_err(|_| Error::Value(format!("adc_bits must be a positive integer or \"ideal\", got {s:?}")))
    }
}

impl Serialize for AdcBits {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            AdcBits::Bits(b) => s.serialize_u32(*b),
            AdcBits::Ideal => s.serialize_str("ideal"),
        }
    }
}

impl<'de> Deserialize<'de> for AdcBits {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        match Value::deserialize(d)? {
            Value::Number(n) => n
                .as_u64()
                .and_then(|b| u32::try_from(b).ok())
                .map(AdcBits::Bits)
                .ok_or_else(|| serde::de::Error::custom("adc_bits must be a nonnegative integer")),
            Value::String(s) => s.parse().map_err(serde::de::Error::custom),
            other => Err(serde::de::Error::custom(format!("invalid adc_bits {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum PulseShape {
    Rrc,
    Rect,
}

impl fmt::Display for PulseShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PulseShape::Rrc => "rrc",
            PulseShape::Rect => "rect",
        })
    }
}

impl std::str::FromStr for PulseShape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().trim_matches('"').to_ascii_lowercase().as_str() {
            "rrc" => Ok(PulseShape::Rrc),
            "rect" => Ok(PulseShape::Rect),
            other => Err(Error::Value(format!("unknown pulse shape {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    pub num_users: usize,
    pub tx_antennas_per_user: usize,
    pub tx_rf_chains_per_user: usize,
    pub streams_per_user: usize,
    pub bs_antennas: usize,
    /// Also the number of subarrays.
    pub bs_rf_chains: usize,
    pub ttd_per_chain: usize,
    pub carrier_frequency_hz: f64,
    pub bandwidth_hz: f64,
    /// Must equal `data_block_len + channel_taps - 1`; `0` means "derive".
    pub num_bins: usize,
    pub data_block_len: usize,
    pub channel_taps: usize,
    pub tx_grid_size: usize,
    pub rx_grid_size_per_subarray: usize,
    /// Transmit antenna gain summed over all users.
    pub tx_gain_total_dbi: f64,
    pub rx_gain_dbi: f64,
    pub distance_m: f64,
    pub num_nlos_clusters: usize,
    pub rays_per_cluster: usize,
    pub adc_bits: AdcBits,
    pub noise_variance: f64,
    pub symbol_variance: f64,
    pub pulse_shape: PulseShape,
    pub rrc_rolloff: f64,
    /// Molecular absorption coefficient in 1/m, held constant over the band.
    pub absorption_coeff_per_m: f64,
    /// NLoS reflection loss in dB (applied as an amplitude factor).
    pub reflection_loss_db: f64,
    /// Scale all path gains so the LoS path at the carrier has unit amplitude
    /// including antenna gains. SNR then reads as `1 / noise_variance`.
    pub normalize_large_scale: bool,
    pub rng_seed: u64,
}

impl Default for SystemConfig {
    fn default() -> Self {
        default_paper_config()
    }
}

/// Four-user, 96-antenna, 1 THz / 10 GHz scenario with 3-bit ADCs.
pub fn default_paper_config() -> SystemConfig {
    SystemConfig {
        num_users: 4,
        tx_antennas_per_user: 4,
        tx_rf_chains_per_user: 2,
        streams_per_user: 2,
        bs_antennas: 96,
        bs_rf_chains: 16,
        ttd_per_chain: 2,
        carrier_frequency_hz: 1e12,
        bandwidth_hz: 1e10,
        num_bins: 128,
        data_block_len: 125,
        channel_taps: 4,
        tx_grid_size: 8,
        rx_grid_size_per_subarray: 12,
        tx_gain_total_dbi: 28.0,
        rx_gain_dbi: 28.0,
        distance_m: 15.0,
        num_nlos_clusters: 3,
        rays_per_cluster: 1,
        adc_bits: AdcBits::Bits(3),
        noise_variance: 0.1,
        symbol_variance: 1.0,
        pulse_shape: PulseShape::Rrc,
        rrc_rolloff: 0.3,
        absorption_coeff_per_m: 0.0033,
        reflection_loss_db: 10.0,
        normalize_large_scale: true,
        rng_seed: 7,
    }
}

fn positive(name: &str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(Error::Value(format!("{name} must be positive")));
    }
    Ok(())
}

fn positive_f(name: &str, v: f64) -> Result<()> {
    if !(v > 0.0) || !v.is_finite() {
        return Err(Error::Value(format!("{name} must be positive and finite, got {v}")));
    }
    Ok(())
}

impl SystemConfig {
    /// Checks every dimensional relation and fills `num_bins` when it is `0`.
    pub fn validate(mut self) -> Result<SystemConfig> {
        for (name, v) in [
            ("num_users", self.num_users),
            ("tx_antennas_per_user", self.tx_antennas_per_user),
            ("tx_rf_chains_per_user", self.tx_rf_chains_per_user),
            ("streams_per_user", self.streams_per_user),
            ("bs_antennas", self.bs_antennas),
            ("bs_rf_chains", self.bs_rf_chains),
            ("ttd_per_chain", self.ttd_per_chain),
            ("data_block_len", self.data_block_len),
            ("channel_taps", self.channel_taps),
            ("tx_grid_size", self.tx_grid_size),
            ("rx_grid_size_per_subarray", self.rx_grid_size_per_subarray),
        ] {
            positive(name, v)?;
        }
        positive_f("carrier_frequency_hz", self.carrier_frequency_hz)?;
        positive_f("bandwidth_hz", self.bandwidth_hz)?;
        positive_f("distance_m", self.distance_m)?;
        positive_f("symbol_variance", self.symbol_variance)?;
        if !(self.noise_variance >= 0.0) || !self.noise_variance.is_finite() {
            return Err(Error::Value("noise_variance must be nonnegative".into()));
        }
        if self.bandwidth_hz >= 2.0 * self.carrier_frequency_hz {
            return Err(Error::Value(format!(
                "bandwidth {} Hz must be below twice the carrier {} Hz",
                self.bandwidth_hz, self.carrier_frequency_hz
            )));
        }
        if !(0.0..=1.0).contains(&self.rrc_rolloff) {
            return Err(Error::Value("rrc_rolloff must lie in [0, 1]".into()));
        }
        if !(self.absorption_coeff_per_m >= 0.0) {
            return Err(Error::Value("absorption_coeff_per_m must be nonnegative".into()));
        }
        if !self.reflection_loss_db.is_finite() || !self.tx_gain_total_dbi.is_finite() || !self.rx_gain_dbi.is_finite() {
            return Err(Error::Value("gains and losses must be finite".into()));
        }
        if self.num_nlos_clusters > 0 && self.rays_per_cluster == 0 {
            return Err(Error::Value("rays_per_cluster must be positive when NLoS clusters exist".into()));
        }
        if let AdcBits::Bits(0) = self.adc_bits {
            return Err(Error::Value("adc_bits must be positive".into()));
        }
        if self.bs_antennas % self.bs_rf_chains != 0 {
            return Err(Error::Divisibility(format!(
                "bs_antennas {} is not a multiple of bs_rf_chains {}",
                self.bs_antennas, self.bs_rf_chains
            )));
        }
        let per_sub = self.bs_antennas / self.bs_rf_chains;
        if per_sub % self.ttd_per_chain != 0 {
            return Err(Error::Divisibility(format!(
                "subarray size {} is not a multiple of ttd_per_chain {}",
                per_sub, self.ttd_per_chain
            )));
        }
        if self.streams_per_user > self.tx_rf_chains_per_user {
            return Err(Error::Dimension(format!(
                "streams_per_user {} exceeds tx_rf_chains_per_user {}",
                self.streams_per_user, self.tx_rf_chains_per_user
            )));
        }
        if self.tx_rf_chains_per_user > self.tx_antennas_per_user {
            return Err(Error::Dimension(format!(
                "tx_rf_chains_per_user {} exceeds tx_antennas_per_user {}",
                self.tx_rf_chains_per_user, self.tx_antennas_per_user
            )));
        }
        if self.total_streams() > self.bs_rf_chains {
            return Err(Error::Dimension(format!(
                "total streams {} exceed bs_rf_chains {}",
                self.total_streams(),
                self.bs_rf_chains
            )));
        }
        let k = self.data_block_len + self.channel_taps - 1;
        if self.num_bins == 0 {
            self.num_bins = k;
        } else if self.num_bins != k {
            return Err(Error::Dimension(format!(
                "num_bins {} must equal data_block_len + channel_taps - 1 = {}",
                self.num_bins, k
            )));
        }
        Ok(self)
    }

    pub fn subarray_antennas(&self) -> usize {
        self.bs_antennas / self.bs_rf_chains
    }

    pub fn phase_shifters_per_ttd(&self) -> usize {
        self.subarray_antennas() / self.ttd_per_chain
    }

    pub fn total_streams(&self) -> usize {
        self.num_users * self.streams_per_user
    }

    pub fn total_tx_antennas(&self) -> usize {
        self.num_users * self.tx_antennas_per_user
    }

    pub fn total_tx_rf_chains(&self) -> usize {
        self.num_users * self.tx_rf_chains_per_user
    }

    pub fn sampling_interval_s(&self) -> f64 {
        1.0 / self.bandwidth_hz
    }

    pub fn carrier_period_s(&self) -> f64 {
        1.0 / self.carrier_frequency_hz
    }

    /// Per-user transmit gain in dBi: the total is split evenly in linear power.
    pub fn tx_gain_per_user_dbi(&self) -> f64 {
        self.tx_gain_total_dbi - 10.0 * (self.num_users as f64).log10()
    }

    pub fn snr_db(&self) -> f64 {
        -10.0 * self.noise_variance.log10()
    }

    pub fn with_snr_db(mut self, snr_db: f64) -> Self {
        self.noise_variance = 10f64.powf(-snr_db / 10.0);
        self
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Applies a `key=value` override. The value is parsed as JSON when
    /// possible and as a bare string otherwise.
    pub fn apply_override(self, assignment: &str) -> Result<Self> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Value(format!("override {assignment:?} is not key=value")))?;
        let key = key.trim();
        let mut obj = serde_json::to_value(&self)?;
        let map = obj.as_object_mut().expect("config serializes to an object");
        if !map.contains_key(key) {
            return Err(Error::Value(format!("unknown config key {key:?}")));
        }
        let value = serde_json::from_str::<Value>(raw.trim())
            .unwrap_or_else(|_| Value::String(raw.trim().to_string()));
        map.insert(key.to_string(), value);
        Ok(serde_json::from_value(obj)?)
    }

    /// Short stable hash of the canonical JSON form.
    pub fn hash_hex(&self) -> String {
        use sha2::{Digest, Sha256};
        let canonical = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}
