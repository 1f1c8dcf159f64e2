//! Wireless uplink model: Rayleigh block fading, analog (over-the-air)
//! aggregation of the globally-masked updates, and digital link rates.
//!
//! Devices pre-invert their own channel gain, so the base station
//! receives the plain sum of the transmitted segments scaled by the
//! power scalar, plus Gaussian noise; gains only show up in transmit
//! power. Amplitudes are real: phase is assumed perfectly
//! pre-compensated.

use rand::distr::Open01;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::compression::SparseUpdate;
use crate::error::{Result, SimError};
use crate::math::{ParamVector, RngStream};

/// One round's channel state: positive gain amplitudes per
/// (device, sub-channel), constant within the round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelRealization {
    gains: Vec<Vec<f64>>,
    noise_var: f64,
}

impl ChannelRealization {
    pub fn new(gains: Vec<Vec<f64>>, noise_var: f64) -> Result<Self> {
        if gains.is_empty() || gains[0].is_empty() {
            return Err(SimError::InvalidArgument("empty gain matrix".into()));
        }
        let m = gains[0].len();
        if gains.iter().any(|row| row.len() != m) {
            return Err(SimError::InvalidArgument("ragged gain matrix".into()));
        }
        if gains
            .iter()
            .flatten()
            .any(|&h| !(h > 0.0) || !h.is_finite())
        {
            return Err(SimError::InvalidArgument("gains must be positive".into()));
        }
        if !(noise_var >= 0.0) {
            return Err(SimError::InvalidArgument(format!(
                "bad noise variance {noise_var}"
            )));
        }
        Ok(ChannelRealization { gains, noise_var })
    }

    pub fn n_devices(&self) -> usize {
        self.gains.len()
    }

    pub fn m_subchannels(&self) -> usize {
        self.gains[0].len()
    }

    pub fn noise_var(&self) -> f64 {
        self.noise_var
    }

    pub fn gain(&self, device: usize, subchannel: usize) -> f64 {
        self.gains[device][subchannel]
    }

    pub fn gains_of(&self, device: usize) -> &[f64] {
        &self.gains[device]
    }

    /// Achievable bits per slot for `device` over its assigned
    /// sub-channels with the given (dense, length M) power split:
    /// sum of log2(1 + P h^2 / noise). Zero noise means an infinite
    /// rate on any powered channel.
    pub fn digital_rate(&self, device: usize, assigned: &[usize], powers: &[f64]) -> f64 {
        assert_eq!(
            powers.len(),
            self.m_subchannels(),
            "powers must be dense over sub-channels"
        );
        let mut rate = 0.0;
        for &m in assigned {
            let p = powers[m];
            debug_assert!(p >= 0.0);
            if p > 0.0 {
                let h = self.gains[device][m];
                rate += (1.0 + p * h * h / self.noise_var).log2();
            }
        }
        rate
    }
}

/// Fresh Rayleigh(scale 1) fading draw for one round.
pub fn draw_channel(
    n_devices: usize,
    m_subchannels: usize,
    noise_var: f64,
    stream: RngStream,
) -> Result<ChannelRealization> {
    if n_devices == 0 || m_subchannels == 0 {
        return Err(SimError::InvalidArgument(
            "need at least one device and sub-channel".into(),
        ));
    }
    let mut rng = stream.rng();
    let gains = (0..n_devices)
        .map(|_| {
            (0..m_subchannels)
                .map(|_| {
                    // Inverse CDF on (0,1): strictly positive amplitude.
                    let u: f64 = rng.sample(Open01);
                    (-2.0 * u.ln()).sqrt()
                })
                .collect()
        })
        .collect();
    ChannelRealization::new(gains, noise_var)
}

/// Analog-aggregation settings for one round.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OacConfig {
    /// Power scalar applied by every transmitting device.
    pub sigma_t: f64,
    /// Number of orthogonal sub-channels.
    pub m_subchannels: usize,
    /// Number of globally-masked elements sent over the air.
    pub k_global: usize,
}

impl OacConfig {
    pub fn new(sigma_t: f64, m_subchannels: usize, k_global: usize) -> Result<Self> {
        if !(sigma_t > 0.0) {
            return Err(SimError::InvalidArgument(format!(
                "sigma_t must be positive, got {sigma_t}"
            )));
        }
        if m_subchannels == 0 {
            return Err(SimError::InvalidArgument(
                "need at least one sub-channel".into(),
            ));
        }
        Ok(OacConfig {
            sigma_t,
            m_subchannels,
            k_global,
        })
    }

    /// Slots occupied by the analog phase: ceil(K_g / M).
    pub fn u_global_slots(&self) -> u64 {
        (self.k_global as u64).div_ceil(self.m_subchannels as u64)
    }
}

/// Sizes of the M segments a K-element payload splits into: the first
/// K mod M segments take ceil(K/M) elements, the rest floor(K/M).
pub fn segment_sizes(k: usize, m: usize) -> Vec<usize> {
    assert!(m > 0);
    let base = k / m;
    let extra = k % m;
    (0..m).map(|i| base + usize::from(i < extra)).collect()
}

/// Split `values` (ordered by ascending mask position) into M segments;
/// concatenating the segments in order reproduces the input.
pub fn segment(values: &[f64], m: usize) -> Vec<&[f64]> {
    let mut out = Vec::with_capacity(m);
    let mut rest = values;
    for size in segment_sizes(values.len(), m) {
        let (head, tail) = rest.split_at(size);
        out.push(head);
        rest = tail;
    }
    out
}

/// Total transmit energy device `device` spends on the analog phase:
/// sum over sub-channels of || sigma_t * segment / h ||^2.
pub fn oac_transmit_power(
    u: &SparseUpdate,
    ch: &ChannelRealization,
    device: usize,
    cfg: &OacConfig,
) -> Result<f64> {
    if u.values.len() != cfg.k_global {
        return Err(SimError::ContractViolation(format!(
            "global part holds {} values, expected {}",
            u.values.len(),
            cfg.k_global
        )));
    }
    let sigma_sq = cfg.sigma_t * cfg.sigma_t;
    let mut total = 0.0;
    for (m, seg) in segment(&u.values, cfg.m_subchannels).iter().enumerate() {
        let h = ch.gain(device, m);
        let seg_energy: f64 = seg.iter().map(|v| v * v).sum();
        total += sigma_sq * seg_energy / (h * h);
    }
    Ok(total)
}

/// Superimposed reception of the scheduled devices' global parts.
///
/// Per sub-channel and slot the received sample is
/// sigma_t * sum of segment values + Gaussian(0, noise_var); samples
/// map back through the shared mask into a dense vector supported on
/// it. The noise stream is keyed by sub-channel so evaluation order
/// cannot change the draw.
pub fn oac_aggregate(
    updates: &[SparseUpdate],
    ch: &ChannelRealization,
    cfg: &OacConfig,
    stream: RngStream,
) -> Result<ParamVector> {
    let first = updates
        .first()
        .ok_or_else(|| SimError::InvalidArgument("no scheduled devices".into()))?;
    if updates.iter().any(|u| u.mask != first.mask) {
        return Err(SimError::ContractViolation(
            "global masks differ across scheduled devices".into(),
        ));
    }
    if first.values.len() != cfg.k_global {
        return Err(SimError::ContractViolation(format!(
            "global part holds {} values, expected {}",
            first.values.len(),
            cfg.k_global
        )));
    }
    let positions = first.mask.positions();
    let mut y = ParamVector::zeros(first.mask.dim());
    let sizes = segment_sizes(cfg.k_global, cfg.m_subchannels);
    let noise_std = ch.noise_var().sqrt();
    let mut offset = 0;
    for (m, &size) in sizes.iter().enumerate() {
        let mut rng = stream.child(m as u64).rng();
        for slot in 0..size {
            let i = offset + slot;
            let mut sum = 0.0;
            for u in updates {
                sum += u.values[i];
            }
            let noise: f64 = rng.sample(StandardNormal);
            y.as_mut_slice()[positions[i]] = cfg.sigma_t * sum + noise_std * noise;
        }
        offset += size;
    }
    Ok(y)
}
