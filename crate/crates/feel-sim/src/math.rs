//! Dense vector arithmetic, top-k selection, and context-keyed random
//! streams shared by every other module.
//!
//! All real arithmetic is f64: the aggregation noise floor (variance
//! 1e-6) sits too close to f32 epsilon effects to risk single precision.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};

// ---------------------------------------------------------------------------
// ParamVector
// ---------------------------------------------------------------------------

/// Flat model-space vector of fixed dimension.
///
/// Holds model weights, model differences, and error accumulators.
/// Every public operation keeps all elements finite; binary operations
/// panic on dimension mismatch (that is a programming error, not input).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn zeros(dim: usize) -> Self {
        ParamVector(vec![0.0; dim])
    }

    /// Build from raw values, rejecting NaN/Inf.
    pub fn from_vec(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(SimError::InvalidArgument(format!(
                "non-finite element at index {i}"
            )));
        }
        Ok(ParamVector(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    fn check_dim(&self, other: &Self) {
        assert_eq!(
            self.dim(),
            other.dim(),
            "ParamVector dimension mismatch: {} vs {}",
            self.dim(),
            other.dim()
        );
    }

    pub fn add(&self, other: &Self) -> Self {
        self.check_dim(other);
        let out: Vec<f64> = self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect();
        let out = ParamVector(out);
        out.debug_check_finite();
        out
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.check_dim(other);
        let out: Vec<f64> = self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect();
        let out = ParamVector(out);
        out.debug_check_finite();
        out
    }

    pub fn add_assign(&mut self, other: &Self) {
        self.check_dim(other);
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += b;
        }
        self.debug_check_finite();
    }

    pub fn sub_assign(&mut self, other: &Self) {
        self.check_dim(other);
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a -= b;
        }
        self.debug_check_finite();
    }

    /// self += a * x
    pub fn axpy(&mut self, a: f64, x: &Self) {
        self.check_dim(x);
        for (s, v) in self.0.iter_mut().zip(&x.0) {
            *s += a * v;
        }
        self.debug_check_finite();
    }

    pub fn scale(&self, a: f64) -> Self {
        let out = ParamVector(self.0.iter().map(|v| a * v).collect());
        out.debug_check_finite();
        out
    }

    pub fn norm_sq(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    fn debug_check_finite(&self) {
        debug_assert!(
            self.0.iter().all(|v| v.is_finite()),
            "ParamVector contains non-finite elements"
        );
    }
}

// ---------------------------------------------------------------------------
// MaskVector
// ---------------------------------------------------------------------------

/// Sparsity pattern over a d-dimensional vector: a strictly increasing
/// list of retained positions. Equivalent to a 0/1 vector with ones at
/// `positions`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskVector {
    positions: Vec<usize>,
    dim: usize,
}

impl MaskVector {
    /// Build from positions that must be strictly increasing and < dim.
    pub fn new(positions: Vec<usize>, dim: usize) -> Result<Self> {
        for w in positions.windows(2) {
            if w[0] >= w[1] {
                return Err(SimError::InvalidArgument(format!(
                    "mask positions not strictly increasing at {}..{}",
                    w[0], w[1]
                )));
            }
        }
        if let Some(&last) = positions.last() {
            if last >= dim {
                return Err(SimError::InvalidArgument(format!(
                    "mask position {last} out of range for dim {dim}"
                )));
            }
        }
        Ok(MaskVector { positions, dim })
    }

    pub fn empty(dim: usize) -> Self {
        MaskVector {
            positions: Vec::new(),
            dim,
        }
    }

    pub fn full(dim: usize) -> Self {
        MaskVector {
            positions: (0..dim).collect(),
            dim,
        }
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn contains(&self, index: usize) -> bool {
        self.positions.binary_search(&index).is_ok()
    }

    /// Positions of the complement: [0, d) minus this mask.
    pub fn complement(&self) -> MaskVector {
        let mut out = Vec::with_capacity(self.dim - self.positions.len());
        let mut it = self.positions.iter().peekable();
        for i in 0..self.dim {
            if it.peek() == Some(&&i) {
                it.next();
            } else {
                out.push(i);
            }
        }
        MaskVector {
            positions: out,
            dim: self.dim,
        }
    }

    pub fn intersects(&self, other: &MaskVector) -> bool {
        self.positions.iter().any(|&p| other.contains(p))
    }
}

// ---------------------------------------------------------------------------
// Top-k selection and masking
// ---------------------------------------------------------------------------

/// Keep the `k` candidates with largest `|values[p]|`, ties toward the
/// lower index. Returns sorted positions. O(len + k log k).
pub(crate) fn top_k_in(values: &[f64], mut candidates: Vec<usize>, k: usize) -> Vec<usize> {
    debug_assert!(k <= candidates.len());
    // Total order: larger |value| first, lower index first among ties.
    let cmp = |&a: &usize, &b: &usize| {
        values[b]
            .abs()
            .partial_cmp(&values[a].abs())
            .expect("finite values")
            .then(a.cmp(&b))
    };
    if k == 0 {
        return Vec::new();
    }
    if k < candidates.len() {
        candidates.select_nth_unstable_by(k - 1, cmp);
        candidates.truncate(k);
    }
    candidates.sort_unstable();
    candidates
}

/// Positions of the K largest-magnitude elements of `x`.
///
/// Ties break toward the lower index, and when `x` has fewer than K
/// non-zero elements the mask is padded with zero-valued positions
/// (lowest indices first) so it always holds exactly K positions; this
/// keeps per-round payload sizes constant.
pub fn top_k_mask(x: &ParamVector, k: usize) -> Result<MaskVector> {
    let d = x.dim();
    if k > d {
        return Err(SimError::InvalidArgument(format!(
            "top-k count {k} exceeds dimension {d}"
        )));
    }
    let positions = top_k_in(x.as_slice(), (0..d).collect(), k);
    Ok(MaskVector { positions, dim: d })
}

/// Element-wise product with the mask: keeps masked positions, zeroes
/// the rest.
pub fn apply_mask(x: &ParamVector, mask: &MaskVector) -> Result<ParamVector> {
    if mask.dim() != x.dim() {
        return Err(SimError::DimensionMismatch {
            expected: mask.dim(),
            got: x.dim(),
        });
    }
    let mut out = vec![0.0; x.dim()];
    let values = x.as_slice();
    for &p in mask.positions() {
        out[p] = values[p];
    }
    Ok(ParamVector(out))
}

// ---------------------------------------------------------------------------
// RngStream
// ---------------------------------------------------------------------------

/// Labels for independent random streams.
///
/// Each (master seed, label chain) pair names one stream; derivation is
/// pure, so per-device work can run in parallel without contending on a
/// shared generator and without depending on execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    InitWeights,
    DatasetTrain,
    DatasetTest,
    Partition,
    LocalSgd,
    Quantize,
    ChannelGains,
    OacNoise,
    Schedule,
    Verify,
}

impl Purpose {
    fn tag(self) -> u64 {
        match self {
            Purpose::InitWeights => 1,
            Purpose::DatasetTrain => 2,
            Purpose::DatasetTest => 3,
            Purpose::Partition => 4,
            Purpose::LocalSgd => 5,
            Purpose::Quantize => 6,
            Purpose::ChannelGains => 7,
            Purpose::OacNoise => 8,
            Purpose::Schedule => 9,
            Purpose::Verify => 10,
        }
    }
}

/// Deterministic, context-keyed stream of randomness.
///
/// The same (master seed, context) always yields the same samples no
/// matter where or when it is drawn. Contexts are built by chaining
/// `child` / `purpose` calls, e.g. round -> device -> purpose.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngStream(u64);

// splitmix64 finalizer; good 64-bit avalanche for seed derivation.
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(master_seed: u64) -> Self {
        RngStream(mix(master_seed ^ 0x9e37_79b9_7f4a_7c15))
    }

    /// Derive an independent sub-stream keyed by `label`.
    pub fn child(self, label: u64) -> Self {
        RngStream(mix(self.0 ^ mix(label.wrapping_add(0x9e37_79b9_7f4a_7c15))))
    }

    pub fn purpose(self, p: Purpose) -> Self {
        self.child(p.tag())
    }

    /// Materialize the stream as a generator.
    pub fn rng(self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn pv(values: &[f64]) -> ParamVector {
        ParamVector::from_vec(values.to_vec()).unwrap()
    }

    #[test]
    fn top_k_picks_largest_magnitudes() {
        let m = top_k_mask(&pv(&[3.0, -5.0, 2.0, 0.0]), 2).unwrap();
        assert_eq!(m.positions(), &[0, 1]);
    }

    #[test]
    fn top_k_ties_break_low_index() {
        let m = top_k_mask(&pv(&[1.0, 1.0, 1.0]), 2).unwrap();
        assert_eq!(m.positions(), &[0, 1]);
    }

    #[test]
    fn top_k_pads_with_zero_positions() {
        let m = top_k_mask(&pv(&[0.0, 0.0, 0.0, 7.0]), 2).unwrap();
        assert_eq!(m.positions(), &[0, 3]);
    }

    #[test]
    fn top_k_rejects_oversized_k() {
        assert!(top_k_mask(&pv(&[1.0]), 2).is_err());
    }

    #[test]
    fn top_k_zero_vector_uses_low_indices() {
        let m = top_k_mask(&ParamVector::zeros(5), 3).unwrap();
        assert_eq!(m.positions(), &[0, 1, 2]);
    }

    #[test]
    fn apply_mask_keeps_only_masked() {
        let x = pv(&[5.0, 6.0, 7.0]);
        let m = MaskVector::new(vec![1], 3).unwrap();
        assert_eq!(apply_mask(&x, &m).unwrap().as_slice(), &[0.0, 6.0, 0.0]);
    }

    #[test]
    fn apply_full_mask_is_identity() {
        let x = pv(&[1.5, -2.5, 3.5]);
        assert_eq!(apply_mask(&x, &MaskVector::full(3)).unwrap(), x);
    }

    #[test]
    fn apply_empty_mask_is_zero() {
        let x = pv(&[1.0, 2.0]);
        assert_eq!(
            apply_mask(&x, &MaskVector::empty(2)).unwrap(),
            ParamVector::zeros(2)
        );
    }

    #[test]
    fn apply_mask_rejects_dim_mismatch() {
        let x = pv(&[1.0, 2.0]);
        let m = MaskVector::empty(3);
        assert!(apply_mask(&x, &m).is_err());
    }

    #[test]
    fn complement_basic() {
        let m = MaskVector::new(vec![0, 2], 4).unwrap();
        assert_eq!(m.complement().positions(), &[1, 3]);
        let e = MaskVector::empty(3);
        assert_eq!(e.complement().positions(), &[0, 1, 2]);
    }

    #[test]
    fn mask_rejects_unsorted_and_out_of_range() {
        assert!(MaskVector::new(vec![2, 1], 4).is_err());
        assert!(MaskVector::new(vec![1, 1], 4).is_err());
        assert!(MaskVector::new(vec![4], 4).is_err());
    }

    #[test]
    fn rng_streams_are_deterministic_and_distinct() {
        let a = RngStream::new(42).child(3).purpose(Purpose::Quantize);
        let b = RngStream::new(42).child(3).purpose(Purpose::Quantize);
        let mut ra = a.rng();
        let mut rb = b.rng();
        let xs: Vec<f64> = (0..10).map(|_| ra.random()).collect();
        let ys: Vec<f64> = (0..10).map(|_| rb.random()).collect();
        assert_eq!(xs, ys);

        let mut rc = RngStream::new(42).child(4).purpose(Purpose::Quantize).rng();
        let zs: Vec<f64> = (0..10).map(|_| rc.random()).collect();
        assert_ne!(xs, zs);
    }

    #[test]
    fn from_vec_rejects_non_finite() {
        assert!(ParamVector::from_vec(vec![1.0, f64::NAN]).is_err());
        assert!(ParamVector::from_vec(vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn vector_arithmetic() {
        let mut a = pv(&[1.0, 2.0]);
        let b = pv(&[0.5, -1.0]);
        assert_eq!(a.add(&b).as_slice(), &[1.5, 1.0]);
        assert_eq!(a.sub(&b).as_slice(), &[0.5, 3.0]);
        a.axpy(2.0, &b);
        assert_eq!(a.as_slice(), &[2.0, 0.0]);
        assert_eq!(a.norm_sq(), 4.0);
    }
}
