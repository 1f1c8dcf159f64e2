//! Time-correlated sparsification with error feedback.
//!
//! Each round a device splits its error-compensated model difference
//! into two sparse parts: a *global* part on a mask all devices share
//! (computed from last round's aggregated difference, which is what
//! makes analog aggregation possible), and a *local* part on the top
//! coordinates of the remainder, stochastically quantized for digital
//! transmission.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::math::{self, MaskVector, ParamVector, RngStream};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Sparsity and quantizer settings for one run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompressionSpec {
    /// Size of the shared global mask.
    pub k_global: usize,
    /// Size of each device's local mask.
    pub k_local: usize,
    /// Bits per quantized value (1 sign bit + q-1 level bits).
    pub q: u8,
    /// Model dimension.
    pub d: usize,
}

impl CompressionSpec {
    pub fn new(k_global: usize, k_local: usize, q: u8, d: usize) -> Result<Self> {
        // Levels up to 2^52 stay exactly representable in f64.
        if !(2..=53).contains(&q) {
            return Err(SimError::InvalidArgument(format!(
                "q must be in 2..=53, got {q}"
            )));
        }
        if k_global + k_local > d {
            return Err(SimError::InvalidArgument(format!(
                "k_global + k_local = {} exceeds dimension {d}",
                k_global + k_local
            )));
        }
        // gamma must land in (0, 1]: something has to be transmitted.
        if k_global + k_local == 0 {
            return Err(SimError::InvalidArgument(
                "k_global and k_local cannot both be zero".into(),
            ));
        }
        // The compression-error bound needs k_local < 2^(2q-2).
        if 2 * u32::from(q) - 2 < 128 && (k_local as u128) >= (1u128 << (2 * q - 2)) {
            return Err(SimError::InvalidArgument(format!(
                "k_local = {k_local} must be below 2^(2q-2) = {}",
                1u128 << (2 * q - 2)
            )));
        }
        Ok(CompressionSpec {
            k_global,
            k_local,
            q,
            d,
        })
    }

    /// Number of quantizer levels s = 2^(q-1).
    pub fn levels(&self) -> u64 {
        1u64 << (self.q - 1)
    }

    /// Compression quality constant
    /// (1 - K_l / 2^(2q-2)) * (K_g + K_l) / d, in (0, 1].
    ///
    /// The expected squared compression error of one round is at most
    /// (1 - gamma) times the input energy.
    pub fn gamma(&self) -> f64 {
        let quant = 1.0 - self.k_local as f64 / 2f64.powi(2 * i32::from(self.q) - 2);
        quant * (self.k_global + self.k_local) as f64 / self.d as f64
    }
}

// ---------------------------------------------------------------------------
// Sparse and quantized updates
// ---------------------------------------------------------------------------

/// A mask plus the values at its positions; the unit of communication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseUpdate {
    pub mask: MaskVector,
    /// One value per mask position, in mask-position order.
    pub values: Vec<f64>,
}

impl SparseUpdate {
    /// Extract the masked values of `x`.
    pub fn from_dense(x: &ParamVector, mask: MaskVector) -> Result<Self> {
        if mask.dim() != x.dim() {
            return Err(SimError::DimensionMismatch {
                expected: mask.dim(),
                got: x.dim(),
            });
        }
        let values = mask.positions().iter().map(|&p| x.as_slice()[p]).collect();
        Ok(SparseUpdate { mask, values })
    }

    /// Expand back to a dense vector, zero off the mask.
    pub fn densify(&self) -> ParamVector {
        let mut out = ParamVector::zeros(self.mask.dim());
        for (&p, &v) in self.mask.positions().iter().zip(&self.values) {
            out.as_mut_slice()[p] = v;
        }
        out
    }

    pub fn norm_sq(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }
}

/// Stochastically quantized sparse update.
///
/// Dequantizes to `scale * sign * level / s` per mask position, with
/// s = 2^(q-1). `scale` is the l2 norm of the original values, so
/// every level lies in [0, s]; scale 0 forces all levels to 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedUpdate {
    pub mask: MaskVector,
    pub scale: f64,
    pub signs: Vec<i8>,
    pub levels: Vec<u64>,
    pub q: u8,
}

/// Unbiased stochastic quantization to s = 2^(q-1) levels.
///
/// Each |v| / scale * s rounds up with probability equal to its
/// fractional part, so the dequantized expectation equals v.
pub fn quantize(u: &SparseUpdate, q: u8, stream: RngStream) -> Result<QuantizedUpdate> {
    if !(2..=53).contains(&q) {
        return Err(SimError::InvalidArgument(format!(
            "q must be in 2..=53, got {q}"
        )));
    }
    let s = 1u64 << (q - 1);
    let scale = u.norm_sq().sqrt();
    let mut signs = Vec::with_capacity(u.values.len());
    let mut levels = Vec::with_capacity(u.values.len());
    let mut rng = stream.rng();
    for &v in &u.values {
        signs.push(if v < 0.0 { -1 } else { 1 });
        if scale == 0.0 {
            levels.push(0);
            continue;
        }
        let r = v.abs() / scale * s as f64;
        let base = r.floor();
        let frac = r - base;
        let up = rng.random::<f64>() < frac;
        // |v| <= scale, so r <= s up to rounding; clamp for safety.
        levels.push((base as u64 + u64::from(up)).min(s));
    }
    Ok(QuantizedUpdate {
        mask: u.mask.clone(),
        scale,
        signs,
        levels,
        q,
    })
}

/// Inverse of `quantize` up to the stochastic rounding.
pub fn dequantize(qu: &QuantizedUpdate) -> SparseUpdate {
    let s = (1u64 << (qu.q - 1)) as f64;
    let values = qu
        .signs
        .iter()
        .zip(&qu.levels)
        .map(|(&sign, &level)| qu.scale * f64::from(sign) * level as f64 / s)
        .collect();
    SparseUpdate {
        mask: qu.mask.clone(),
        values,
    }
}

// ---------------------------------------------------------------------------
// Mask construction
// ---------------------------------------------------------------------------

/// Shared sparsification pattern: top K_g magnitudes of last round's
/// aggregated model difference. Identical on every device given the
/// same input vector.
pub fn global_mask(g_hat_prev: &ParamVector, spec: &CompressionSpec) -> Result<MaskVector> {
    math::top_k_mask(g_hat_prev, spec.k_global)
}

/// Per-device pattern: top K_l magnitudes of `g_ec` restricted to the
/// complement of the global mask, so the two masks never intersect.
/// Zero-padding stays inside the complement as well.
pub fn local_mask(
    g_ec: &ParamVector,
    m_global: &MaskVector,
    spec: &CompressionSpec,
) -> Result<MaskVector> {
    if m_global.dim() != g_ec.dim() {
        return Err(SimError::DimensionMismatch {
            expected: m_global.dim(),
            got: g_ec.dim(),
        });
    }
    if spec.k_global + spec.k_local > g_ec.dim() {
        return Err(SimError::InvalidArgument(format!(
            "k_global + k_local = {} exceeds dimension {}",
            spec.k_global + spec.k_local,
            g_ec.dim()
        )));
    }
    let candidates = m_global.complement().positions().to_vec();
    let positions = math::top_k_in(g_ec.as_slice(), candidates, spec.k_local);
    MaskVector::new(positions, g_ec.dim())
}

// ---------------------------------------------------------------------------
// Round-level compression and error feedback
// ---------------------------------------------------------------------------

/// One device's compression step for a round: the full-precision global
/// part (destined for analog aggregation) and the quantized local part
/// (destined for digital transmission).
pub fn compress_round(
    g_ec: &ParamVector,
    g_hat_prev: &ParamVector,
    spec: &CompressionSpec,
    stream: RngStream,
) -> Result<(SparseUpdate, QuantizedUpdate)> {
    let m_g = global_mask(g_hat_prev, spec)?;
    let m_l = local_mask(g_ec, &m_g, spec)?;
    let g_tilde_global = SparseUpdate::from_dense(g_ec, m_g)?;
    let local_sparse = SparseUpdate::from_dense(g_ec, m_l)?;
    let g_tilde_local = quantize(&local_sparse, spec.q, stream)?;
    Ok((g_tilde_global, g_tilde_local))
}

/// Error accumulator update after a round.
///
/// A scheduled device keeps whatever it could not transmit:
/// g_ec minus both transmitted parts. An unscheduled device keeps its
/// prior error verbatim (that round's local progress is discarded).
pub fn error_update(
    prior: &ParamVector,
    g_ec: &ParamVector,
    transmitted: Option<(&SparseUpdate, &QuantizedUpdate)>,
) -> ParamVector {
    match transmitted {
        None => prior.clone(),
        Some((global_part, local_part)) => {
            let mut e = g_ec.clone();
            e.sub_assign(&global_part.densify());
            e.sub_assign(&dequantize(local_part).densify());
            e
        }
    }
}

// ---------------------------------------------------------------------------
// Payload accounting and wire format
// ---------------------------------------------------------------------------

/// Bits needed to address a position in [0, d).
pub fn index_bits(d: usize) -> u32 {
    if d <= 1 {
        0
    } else {
        usize::BITS - (d - 1).leading_zeros()
    }
}

/// Digital payload of one local part: K_l position fields plus K_l
/// q-bit value fields. The quantizer scale rides separately as one f64
/// and is excluded from this count.
pub fn local_payload_bits(d: usize, q: u8, k_local: usize) -> u64 {
    (u64::from(index_bits(d)) + u64::from(q)) * k_local as u64
}

/// Bit-packed wire form of a quantized update: positions first, then
/// per-value fields of 1 sign bit + (q-1) level bits. Level s = 2^(q-1)
/// cannot be represented in q-1 bits (2s+1 symbols exceed the 2^q code
/// points), so it saturates to s-1 on the wire; the in-memory update is
/// what aggregation consumes, and the byte accounting is fixed-width
/// regardless.
pub fn encode_payload(qu: &QuantizedUpdate) -> Vec<u8> {
    let d = qu.mask.dim();
    let pos_bits = index_bits(d);
    let level_bits = u32::from(qu.q) - 1;
    let max_level = (1u64 << level_bits) - 1;
    let mut w = BitWriter::new();
    for &p in qu.mask.positions() {
        w.push(p as u64, pos_bits);
    }
    for (&sign, &level) in qu.signs.iter().zip(&qu.levels) {
        w.push(u64::from(sign < 0), 1);
        w.push(level.min(max_level), level_bits);
    }
    w.into_bytes()
}

/// Decode a payload produced by `encode_payload`. The element count,
/// dimension, quantizer width and scale are side information.
pub fn decode_payload(
    bytes: &[u8],
    k: usize,
    d: usize,
    q: u8,
    scale: f64,
) -> Result<QuantizedUpdate> {
    let pos_bits = index_bits(d);
    let level_bits = u32::from(q) - 1;
    let total_bits = local_payload_bits(d, q, k);
    if (bytes.len() as u64) < total_bits.div_ceil(8) {
        return Err(SimError::Parse(format!(
            "payload too short: {} bytes for {} bits",
            bytes.len(),
            total_bits
        )));
    }
    let mut r = BitReader::new(bytes);
    let mut positions = Vec::with_capacity(k);
    for _ in 0..k {
        positions.push(r.pull(pos_bits) as usize);
    }
    let mask = MaskVector::new(positions, d)?;
    let mut signs = Vec::with_capacity(k);
    let mut levels = Vec::with_capacity(k);
    for _ in 0..k {
        signs.push(if r.pull(1) == 1 { -1 } else { 1 });
        levels.push(r.pull(level_bits));
    }
    Ok(QuantizedUpdate {
        mask,
        scale,
        signs,
        levels,
        q,
    })
}

struct BitWriter {
    bytes: Vec<u8>,
    bit: u32,
}

impl BitWriter {
    fn new() -> Self {
        BitWriter {
            bytes: Vec::new(),
            bit: 0,
        }
    }

    // MSB-first within each field and each byte.
    fn push(&mut self, value: u64, bits: u32) {
        debug_assert!(bits == 64 || value < (1u64 << bits));
        for i in (0..bits).rev() {
            if self.bit.is_multiple_of(8) {
                self.bytes.push(0);
            }
            let b = ((value >> i) & 1) as u8;
            let byte = self.bytes.last_mut().expect("pushed above");
            *byte |= b << (7 - (self.bit % 8));
            self.bit += 1;
        }
    }

    fn into_bytes(self) -> Vec<u8> {
        self.bytes
    }
}

struct BitReader<'a> {
    bytes: &'a [u8],
    bit: u64,
}

impl<'a> BitReader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        BitReader { bytes, bit: 0 }
    }

    fn pull(&mut self, bits: u32) -> u64 {
        let mut out = 0u64;
        for _ in 0..bits {
            let byte = self.bytes[(self.bit / 8) as usize];
            let b = (byte >> (7 - (self.bit % 8))) & 1;
            out = (out << 1) | u64::from(b);
            self.bit += 1;
        }
        out
    }
}
