//! Multilayer perceptron over a flat parameter vector.
//!
//! Hidden layers use the rectifier; the head is softmax with
//! cross-entropy. Parameters are laid out layer by layer, weights
//! (row-major, input x output) then biases, so the whole model lives in
//! one `ParamVector` and communicates like any other vector.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::learning::Dataset;
use crate::math::{ParamVector, RngStream};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    layer_sizes: Vec<usize>,
}

impl ModelSpec {
    /// `layer_sizes` runs input -> hidden... -> num_classes.
    pub fn new(layer_sizes: Vec<usize>) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(SimError::InvalidArgument(
                "model needs at least input and output layers".into(),
            ));
        }
        if layer_sizes.contains(&0) {
            return Err(SimError::InvalidArgument("zero-width layer".into()));
        }
        Ok(ModelSpec { layer_sizes })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_sizes.last().expect("validated")
    }

    /// Total parameter count d, fixed by the layer sizes.
    pub fn param_count(&self) -> usize {
        self.layer_sizes
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    /// Seeded uniform init in +/- sqrt(6 / (fan_in + fan_out)); biases
    /// start at zero.
    pub fn init_params(&self, stream: RngStream) -> ParamVector {
        let mut rng = stream.rng();
        let mut v = Vec::with_capacity(self.param_count());
        for w in self.layer_sizes.windows(2) {
            let (n_in, n_out) = (w[0], w[1]);
            let bound = (6.0 / (n_in + n_out) as f64).sqrt();
            for _ in 0..n_in * n_out {
                v.push(rng.random_range(-bound..bound));
            }
            v.extend(std::iter::repeat_n(0.0, n_out));
        }
        ParamVector::from_vec(v).expect("finite init")
    }

    /// Activations per layer: index 0 is the input, the last entry is
    /// the logits, everything between is post-rectifier.
    fn forward(&self, w: &[f64], x: &[f64]) -> Vec<Vec<f64>> {
        assert_eq!(x.len(), self.input_dim(), "feature dimension mismatch");
        let n_layers = self.layer_sizes.len() - 1;
        let mut acts = Vec::with_capacity(n_layers + 1);
        acts.push(x.to_vec());
        let mut off = 0;
        for (l, sizes) in self.layer_sizes.windows(2).enumerate() {
            let (n_in, n_out) = (sizes[0], sizes[1]);
            let weights = &w[off..off + n_in * n_out];
            let bias = &w[off + n_in * n_out..off + n_in * n_out + n_out];
            let prev = acts.last().expect("seeded with input");
            let mut z = bias.to_vec();
            for (i, &a) in prev.iter().enumerate() {
                if a != 0.0 {
                    let row = &weights[i * n_out..(i + 1) * n_out];
                    for (zj, &wij) in z.iter_mut().zip(row) {
                        *zj += a * wij;
                    }
                }
            }
            if l + 1 < n_layers {
                for zj in z.iter_mut() {
                    *zj = zj.max(0.0);
                }
            }
            acts.push(z);
            off += n_in * n_out + n_out;
        }
        acts
    }

    pub fn logits(&self, params: &ParamVector, x: &[f64]) -> Vec<f64> {
        self.forward(params.as_slice(), x)
            .pop()
            .expect("non-empty activations")
    }

    /// Cross-entropy of one sample plus its gradient accumulated into
    /// `grad` (unscaled; callers divide by the batch size).
    fn accumulate_sample(&self, w: &[f64], x: &[f64], y: usize, grad: &mut [f64]) -> f64 {
        let acts = self.forward(w, x);
        let logits = acts.last().expect("non-empty");
        let (loss, mut delta) = softmax_cross_entropy(logits, y);

        let n_layers = self.layer_sizes.len() - 1;
        let mut offsets = Vec::with_capacity(n_layers);
        let mut off = 0;
        for sizes in self.layer_sizes.windows(2) {
            offsets.push(off);
            off += sizes[0] * sizes[1] + sizes[1];
        }

        for l in (0..n_layers).rev() {
            let (n_in, n_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
            let off = offsets[l];
            let prev = &acts[l];
            for (i, &a) in prev.iter().enumerate() {
                if a != 0.0 {
                    let g_row = &mut grad[off + i * n_out..off + (i + 1) * n_out];
                    for (gj, &dj) in g_row.iter_mut().zip(&delta) {
                        *gj += a * dj;
                    }
                }
            }
            let g_bias = &mut grad[off + n_in * n_out..off + n_in * n_out + n_out];
            for (gj, &dj) in g_bias.iter_mut().zip(&delta) {
                *gj += dj;
            }
            if l > 0 {
                let weights = &w[off..off + n_in * n_out];
                let mut next = vec![0.0; n_in];
                for (i, slot) in next.iter_mut().enumerate() {
                    // Rectifier gate: activation zero means gradient zero.
                    if prev[i] > 0.0 {
                        let row = &weights[i * n_out..(i + 1) * n_out];
                        *slot = row.iter().zip(&delta).map(|(wij, dj)| wij * dj).sum();
                    }
                }
                delta = next;
            }
        }
        loss
    }

    /// Mean loss and gradient over the given sample indices.
    pub fn loss_and_grad(
        &self,
        params: &ParamVector,
        data: &Dataset,
        indices: &[usize],
    ) -> (f64, ParamVector) {
        assert!(!indices.is_empty(), "empty batch");
        let w = params.as_slice();
        let mut grad = vec![0.0; self.param_count()];
        let mut loss = 0.0;
        for &i in indices {
            loss += self.accumulate_sample(w, data.feature(i), data.label(i), &mut grad);
        }
        let inv = 1.0 / indices.len() as f64;
        for g in grad.iter_mut() {
            *g *= inv;
        }
        (
            loss * inv,
            ParamVector::from_vec(grad).expect("finite gradient"),
        )
    }

    /// Mean cross-entropy and top-1 accuracy over `data`. Argmax ties
    /// resolve to the lowest class index.
    pub fn evaluate(&self, params: &ParamVector, data: &Dataset) -> (f64, f64) {
        assert!(!data.is_empty(), "empty evaluation set");
        let per_sample = crate::par::map_indexed(data.len(), |i| {
            let logits = self.logits(params, data.feature(i));
            let (loss, _) = softmax_cross_entropy(&logits, data.label(i));
            let mut best = 0;
            for (j, &z) in logits.iter().enumerate() {
                if z > logits[best] {
                    best = j;
                }
            }
            (loss, u64::from(best == data.label(i)))
        });
        let n = data.len() as f64;
        let loss: f64 = per_sample.iter().map(|p| p.0).sum::<f64>() / n;
        let correct: u64 = per_sample.iter().map(|p| p.1).sum();
        (loss, correct as f64 / n)
    }
}

/// Numerically stable softmax cross-entropy; returns the loss and
/// d loss / d logits.
fn softmax_cross_entropy(logits: &[f64], y: usize) -> (f64, Vec<f64>) {
    debug_assert!(y < logits.len(), "label out of range");
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum_exp: f64 = logits.iter().map(|&z| (z - max).exp()).sum();
    let lse = max + sum_exp.ln();
    let loss = lse - logits[y];
    let mut grad: Vec<f64> = logits.iter().map(|&z| (z - lse).exp()).collect();
    grad[y] -= 1.0;
    (loss, grad)
}

/// H steps of mini-batch SGD from `w_start`, returning the model
/// difference w_H - w_start.
///
/// Each step samples a fresh size-B batch uniformly without
/// replacement; batch indices are accumulated in sorted order so a
/// full-size batch reproduces the full-batch gradient bit-exactly.
pub fn local_sgd(
    spec: &ModelSpec,
    w_start: &ParamVector,
    shard: &Dataset,
    h_steps: usize,
    batch_size: usize,
    eta: f64,
    stream: RngStream,
) -> Result<ParamVector> {
    if shard.is_empty() {
        return Err(SimError::InvalidArgument("empty shard".into()));
    }
    if batch_size == 0 || batch_size > shard.len() {
        return Err(SimError::InvalidArgument(format!(
            "batch size {batch_size} outside 1..={}",
            shard.len()
        )));
    }
    if h_steps == 0 {
        return Err(SimError::InvalidArgument("h_steps must be positive".into()));
    }
    if !(eta >= 0.0) {
        return Err(SimError::InvalidArgument(format!(
            "bad learning rate {eta}"
        )));
    }
    let mut rng = stream.rng();
    let mut w = w_start.clone();
    for _ in 0..h_steps {
        let mut batch = sample(&mut rng, shard.len(), batch_size).into_vec();
        batch.sort_unstable();
        let (_, grad) = spec.loss_and_grad(&w, shard, &batch);
        w.axpy(-eta, &grad);
    }
    Ok(w.sub(w_start))
}
