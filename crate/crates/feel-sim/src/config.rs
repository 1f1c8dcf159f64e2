//! Run configuration: TOML sections, validation, and a stable hash for
//! reproducibility checks.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, SimError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    TcsH,
    TcsD,
    TopK,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::TcsH => "tcs_h",
            Algorithm::TcsD => "tcs_d",
            Algorithm::TopK => "top_k",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub algorithm: Algorithm,
    pub seed: u64,
    /// Total uplink slot budget C.
    pub slot_budget: u64,
    pub max_rounds: u64,
    /// Optional early stop once test accuracy reaches this level.
    #[serde(default)]
    pub target_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FleetSection {
    pub n_devices: usize,
    /// Local SGD iterations per round.
    pub h_steps: usize,
    pub batch_size: usize,
    pub eta: f64,
    /// Scheduled-set size for the digital baselines (tcs_d, top_k).
    pub digital_schedule_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompressionSection {
    pub q_bits: u8,
    /// Global mask size, either as a count or as a fraction of d.
    #[serde(default)]
    pub k_global: Option<usize>,
    #[serde(default)]
    pub phi_global: Option<f64>,
    /// Local mask size, either as a count or as a fraction of d.
    #[serde(default)]
    pub k_local: Option<usize>,
    #[serde(default)]
    pub phi_local: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelSection {
    pub m_subchannels: usize,
    /// Receiver noise variance (mW).
    pub noise_var: f64,
    /// Analog-phase power scalar.
    pub sigma_t: f64,
    /// Per-device average power cap (mW).
    pub p_bar_mw: f64,
    /// Scheduling-gate aggressiveness; 1 is the myopic policy.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
}

fn default_alpha() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// Hidden layer widths; input and output come from the data.
    pub hidden_layers: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionKind {
    Iid,
    LabelSkew,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub source: DataSource,
    pub partition: PartitionKind,
    #[serde(default)]
    pub classes_per_device: Option<usize>,
    // Synthetic generator settings.
    #[serde(default)]
    pub classes: Option<usize>,
    #[serde(default)]
    pub train_samples: Option<usize>,
    #[serde(default)]
    pub test_samples: Option<usize>,
    #[serde(default)]
    pub feature_dim: Option<usize>,
    #[serde(default)]
    pub separation: Option<f64>,
    // CSV ingestion paths.
    #[serde(default)]
    pub train_csv: Option<String>,
    #[serde(default)]
    pub test_csv: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub fleet: FleetSection,
    pub compression: CompressionSection,
    pub channel: ChannelSection,
    pub model: ModelSection,
    pub data: DataSection,
}

impl RunConfig {
    pub fn parse_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| SimError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse_path<P: AsRef<std::path::Path>>(path: P) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Stable hex digest of the canonical serialized form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Structural checks that need no file access. Data-dependent
    /// checks (mask sizes against d, shard sizes) happen when the
    /// runner is built.
    pub fn validate(&self) -> Result<()> {
        let fail = |key: &str, msg: String| Err(SimError::InvalidArgument(format!("{key}: {msg}")));

        if self.run.slot_budget == 0 {
            return fail("run.slot_budget", "must be positive".into());
        }
        if self.run.max_rounds == 0 {
            return fail("run.max_rounds", "must be positive".into());
        }
        if let Some(acc) = self.run.target_accuracy {
            if !(0.0..=1.0).contains(&acc) {
                return fail("run.target_accuracy", format!("{acc} outside [0, 1]"));
            }
        }
        if self.fleet.n_devices == 0 {
            return fail("fleet.n_devices", "must be positive".into());
        }
        if self.fleet.h_steps == 0 {
            return fail("fleet.h_steps", "must be positive".into());
        }
        if self.fleet.batch_size == 0 {
            return fail("fleet.batch_size", "must be positive".into());
        }
        if !(self.fleet.eta >= 0.0) {
            return fail("fleet.eta", format!("bad learning rate {}", self.fleet.eta));
        }
        if self.fleet.digital_schedule_size == 0 {
            return fail("fleet.digital_schedule_size", "must be positive".into());
        }
        if self.fleet.digital_schedule_size > self.fleet.n_devices {
            return fail(
                "fleet.digital_schedule_size",
                format!("exceeds n_devices = {}", self.fleet.n_devices),
            );
        }

        let q = self.compression.q_bits;
        if !(2..=53).contains(&q) {
            return fail("compression.q_bits", format!("must be in 2..=53, got {q}"));
        }
        match (self.compression.k_global, self.compression.phi_global) {
            (Some(_), Some(_)) => {
                return fail(
                    "compression.k_global",
                    "give either k_global or phi_global, not both".into(),
                )
            }
            (None, None) => {
                return fail(
                    "compression.k_global",
                    "one of k_global or phi_global is required".into(),
                )
            }
            (None, Some(phi)) if !(0.0..=1.0).contains(&phi) => {
                return fail("compression.phi_global", format!("{phi} outside [0, 1]"))
            }
            _ => {}
        }
        match (self.compression.k_local, self.compression.phi_local) {
            (Some(_), Some(_)) => {
                return fail(
                    "compression.k_local",
                    "give either k_local or phi_local, not both".into(),
                )
            }
            (None, None) => {
                return fail(
                    "compression.k_local",
                    "one of k_local or phi_local is required".into(),
                )
            }
            (None, Some(phi)) if !(0.0..=1.0).contains(&phi) => {
                return fail("compression.phi_local", format!("{phi} outside [0, 1]"))
            }
            _ => {}
        }
        if let Some(k_local) = self.compression.k_local {
            if 2 * u32::from(q) - 2 < 128 && (k_local as u128) >= (1u128 << (2 * q - 2)) {
                return fail(
                    "compression.k_local",
                    format!(
                        "must be below 2^(2q-2) = {} for q_bits = {q}",
                        1u128 << (2 * q - 2)
                    ),
                );
            }
        }

        if self.channel.m_subchannels == 0 {
            return fail("channel.m_subchannels", "must be positive".into());
        }
        if self.channel.m_subchannels < self.fleet.n_devices {
            return fail(
                "channel.m_subchannels",
                format!("must be at least n_devices = {}", self.fleet.n_devices),
            );
        }
        if !(self.channel.noise_var >= 0.0) {
            return fail(
                "channel.noise_var",
                format!("bad variance {}", self.channel.noise_var),
            );
        }
        if !(self.channel.sigma_t > 0.0) {
            return fail(
                "channel.sigma_t",
                format!("must be positive, got {}", self.channel.sigma_t),
            );
        }
        if !(self.channel.p_bar_mw > 0.0) {
            return fail(
                "channel.p_bar_mw",
                format!("must be positive, got {}", self.channel.p_bar_mw),
            );
        }
        if !(self.channel.alpha > 0.0) {
            return fail(
                "channel.alpha",
                format!("must be positive, got {}", self.channel.alpha),
            );
        }

        if self.model.hidden_layers.contains(&0) {
            return fail("model.hidden_layers", "zero-width layer".into());
        }

        match self.data.source {
            DataSource::Synthetic => {
                for (key, value) in [
                    ("data.classes", self.data.classes),
                    ("data.train_samples", self.data.train_samples),
                    ("data.test_samples", self.data.test_samples),
                    ("data.feature_dim", self.data.feature_dim),
                ] {
                    match value {
                        None => return fail(key, "required for synthetic data".into()),
                        Some(0) => return fail(key, "must be positive".into()),
                        Some(_) => {}
                    }
                }
                if self.data.separation.is_none() {
                    return fail("data.separation", "required for synthetic data".into());
                }
            }
            DataSource::Csv => {
                if self.data.train_csv.is_none() {
                    return fail("data.train_csv", "required for csv data".into());
                }
                if self.data.test_csv.is_none() {
                    return fail("data.test_csv", "required for csv data".into());
                }
            }
        }
        if self.data.partition == PartitionKind::LabelSkew && self.data.classes_per_device.is_none()
        {
            return fail(
                "data.classes_per_device",
                "required for label_skew partitioning".into(),
            );
        }
        Ok(())
    }

    /// Resolve a mask size against the model dimension: counts pass
    /// through, fractions round to the nearest count.
    pub fn resolve_k(count: Option<usize>, phi: Option<f64>, d: usize) -> usize {
        match (count, phi) {
            (Some(k), _) => k,
            (None, Some(phi)) => (phi * d as f64).round() as usize,
            (None, None) => unreachable!("validated"),
        }
    }
}
