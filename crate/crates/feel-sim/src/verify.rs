//! Self-contained verification suites: each checks one numerical
//! subsystem against an independent oracle (Monte Carlo bound,
//! exhaustive search, random-search optimality, finite differences).
//! The CLI exposes them as `verify <suite>`; the acceptance tests run
//! them at pinned scales.

use itertools::Itertools;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use serde_json::json;

use crate::allocation::water_fill;
use crate::channel::{draw_channel, oac_aggregate, OacConfig};
use crate::compression::SparseUpdate;
use crate::compression::{compress_round, dequantize, CompressionSpec};
use crate::error::{Result, SimError};
use crate::learning::{synthesize_dataset, ModelSpec};
use crate::math::{MaskVector, ParamVector, Purpose, RngStream};
use crate::par::map_indexed;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VerifySuite {
    Lemma1,
    Matching,
    Waterfill,
    Oac,
    Gradcheck,
}

impl std::str::FromStr for VerifySuite {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lemma1" => Ok(VerifySuite::Lemma1),
            "matching" => Ok(VerifySuite::Matching),
            "waterfill" => Ok(VerifySuite::Waterfill),
            "oac" => Ok(VerifySuite::Oac),
            "gradcheck" => Ok(VerifySuite::Gradcheck),
            other => Err(SimError::InvalidArgument(format!(
                "unknown suite {other:?}; expected lemma1 | matching | waterfill | oac | gradcheck"
            ))),
        }
    }
}

/// One property checked within a suite.
#[derive(Debug, Clone, Serialize)]
pub struct CheckLine {
    pub name: String,
    pub passed: bool,
    pub details: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub counterexample: Option<serde_json::Value>,
}

impl CheckLine {
    fn pass(name: &str, details: String) -> Self {
        CheckLine {
            name: name.into(),
            passed: true,
            details,
            counterexample: None,
        }
    }

    fn fail(name: &str, details: String, counterexample: serde_json::Value) -> Self {
        CheckLine {
            name: name.into(),
            passed: false,
            details,
            counterexample: Some(counterexample),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub suite: String,
    pub passed: bool,
    pub checks: Vec<CheckLine>,
}

impl SuiteReport {
    fn new(suite: &str, checks: Vec<CheckLine>) -> Self {
        SuiteReport {
            suite: suite.into(),
            passed: checks.iter().all(|c| c.passed),
            checks,
        }
    }
}

/// Run one suite with its default scale, or `trials` iterations.
pub fn run_suite(suite: VerifySuite, seed: u64, trials: Option<u64>) -> SuiteReport {
    match suite {
        VerifySuite::Lemma1 => lemma1(seed, trials.unwrap_or(10_000)),
        VerifySuite::Matching => matching(seed, trials.unwrap_or(100)),
        VerifySuite::Waterfill => waterfill(seed, trials.unwrap_or(100), 100_000),
        VerifySuite::Oac => oac(seed, trials.unwrap_or(10_000)),
        VerifySuite::Gradcheck => gradcheck(seed, trials.unwrap_or(10)),
    }
}

/// Monte Carlo check of the one-round compression error bound at the
/// pinned scale d=1000, K_g=200, K_l=50, q=16: for Gaussian x with
/// masks built from x itself, the mean of
/// ||x - x on the global mask - Q(x on the local mask)||^2 / ||x||^2
/// must stay below (1 - gamma) plus three standard errors.
pub fn lemma1(seed: u64, trials: u64) -> SuiteReport {
    let spec = CompressionSpec::new(200, 50, 16, 1000).expect("valid spec");
    let gamma = spec.gamma();
    let root = RngStream::new(seed).purpose(Purpose::Verify);

    let ratios = map_indexed(trials as usize, |t| {
        let draw = root.child(t as u64);
        let mut rng = draw.child(0).rng();
        let x = ParamVector::from_vec(
            (0..spec.d)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect(),
        )
        .expect("finite gaussian");
        let (global_part, local_q) =
            compress_round(&x, &x, &spec, draw.child(1)).expect("compress");
        let mut resid = x.clone();
        resid.sub_assign(&global_part.densify());
        resid.sub_assign(&dequantize(&local_q).densify());
        resid.norm_sq() / x.norm_sq()
    });

    let n = ratios.len() as f64;
    let mean = ratios.iter().sum::<f64>() / n;
    let var = ratios.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let se = (var / n).sqrt();
    let bound = 1.0 - gamma + 3.0 * se;
    let details = format!(
        "trials={trials} mean_ratio={mean:.6} bound=(1-gamma)+3se={bound:.6} gamma={gamma:.6} se={se:.2e}"
    );
    let check = if mean <= bound {
        CheckLine::pass("compression_error_bound", details)
    } else {
        CheckLine::fail(
            "compression_error_bound",
            details,
            json!({"mean_ratio": mean, "bound": bound, "gamma": gamma, "trials": trials}),
        )
    };
    SuiteReport::new("lemma1", vec![check])
}

/// Exhaustive cross-check of the max-min matching: on random instances
/// the threshold-policy bottleneck must equal the best min edge over
/// all injections.
pub fn matching(seed: u64, instances: u64) -> SuiteReport {
    let root = RngStream::new(seed).purpose(Purpose::Verify);
    let mut checks = Vec::new();
    let mut agreements = 0u64;
    let mut first_failure: Option<CheckLine> = None;

    for i in 0..instances {
        let mut rng = root.child(i).rng();
        let n = rng.random_range(2..=6usize);
        let m = rng.random_range(n..=8usize);
        let weights: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..m).map(|_| rng.random_range(0.0..10.0)).collect())
            .collect();

        let assignment = match crate::allocation::bottleneck_matching(&weights) {
            Ok(a) => a,
            Err(e) => {
                first_failure.get_or_insert(CheckLine::fail(
                    "bottleneck_vs_brute_force",
                    format!("instance {i}: {e}"),
                    json!({"instance": i, "weights": weights}),
                ));
                continue;
            }
        };
        let got = assignment
            .iter()
            .enumerate()
            .map(|(dev, &ch)| weights[dev][ch])
            .fold(f64::INFINITY, f64::min);
        let best = (0..m)
            .permutations(n)
            .map(|perm| {
                perm.iter()
                    .enumerate()
                    .map(|(dev, &ch)| weights[dev][ch])
                    .fold(f64::INFINITY, f64::min)
            })
            .fold(f64::NEG_INFINITY, f64::max);
        if got == best {
            agreements += 1;
        } else {
            first_failure.get_or_insert(CheckLine::fail(
                "bottleneck_vs_brute_force",
                format!("instance {i}: policy {got} vs brute force {best}"),
                json!({"instance": i, "weights": weights, "got": got, "best": best}),
            ));
        }
    }

    if let Some(fail) = first_failure {
        checks.push(fail);
    } else {
        checks.push(CheckLine::pass(
            "bottleneck_vs_brute_force",
            format!("{agreements}/{instances} brute-force agreements"),
        ));
    }
    SuiteReport::new("matching", checks)
}

/// Water-filling optimality: exact budget use, the KKT conditions to
/// 1e-9, and no random feasible split beating the water-filled rate.
pub fn waterfill(seed: u64, instances: u64, random_splits: u64) -> SuiteReport {
    let root = RngStream::new(seed).purpose(Purpose::Verify);

    let results: Vec<std::result::Result<(f64, f64), CheckLine>> = map_indexed(
        instances as usize,
        |i| {
            let mut rng = root.child(i as u64).rng();
            let k = rng.random_range(1..=6usize);
            let gains: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..3.0)).collect();
            let noise = 10f64.powf(rng.random_range(-6.0..0.0));
            let total: f64 = rng.random_range(0.1..10.0);
            let powers = water_fill(&gains, noise, total).expect("valid instance");

            let rate = |p: &[f64]| -> f64 {
                gains
                    .iter()
                    .zip(p)
                    .map(|(&h, &pw)| (1.0 + pw * h * h / noise).log2())
                    .sum()
            };
            let wf_rate = rate(&powers);

            // Budget residual.
            let spent: f64 = powers.iter().sum();
            let budget_resid = (spent - total).abs();
            // KKT: active channels share the water level, inactive
            // floors sit at or above it.
            let level = powers
                .iter()
                .zip(&gains)
                .filter(|(&p, _)| p > 0.0)
                .map(|(&p, &h)| p + noise / (h * h))
                .fold(f64::NEG_INFINITY, f64::max);
            let mut kkt_resid = budget_resid / total.max(1.0);
            for (&p, &h) in powers.iter().zip(&gains) {
                let floor = noise / (h * h);
                if p > 0.0 {
                    kkt_resid = kkt_resid.max((p + floor - level).abs());
                } else {
                    kkt_resid = kkt_resid.max((level - floor).max(0.0));
                }
            }
            if kkt_resid >= 1e-9 {
                return Err(CheckLine::fail(
                    "kkt_conditions",
                    format!("instance {i}: KKT residual {kkt_resid:.2e}"),
                    json!({"instance": i, "gains": gains, "noise": noise, "total": total, "powers": powers}),
                ));
            }

            let mut best_random = f64::NEG_INFINITY;
            let mut split_rng = root.child(i as u64).child(1).rng();
            let mut split = vec![0.0; k];
            for _ in 0..random_splits {
                let mut sum = 0.0;
                for s in split.iter_mut() {
                    *s = split_rng.random::<f64>();
                    sum += *s;
                }
                let scale = total / sum;
                for s in split.iter_mut() {
                    *s *= scale;
                }
                let r = rate(&split);
                if r > best_random {
                    best_random = r;
                }
            }
            if wf_rate + 1e-12 < best_random {
                return Err(CheckLine::fail(
                    "rate_optimality",
                    format!(
                        "instance {i}: water-filled {wf_rate} beaten by random split {best_random}"
                    ),
                    json!({"instance": i, "gains": gains, "noise": noise, "total": total}),
                ));
            }
            Ok((kkt_resid, wf_rate - best_random))
        },
    );

    let mut checks = Vec::new();
    if let Some(fail) = results.iter().find_map(|r| r.as_ref().err()) {
        checks.push(fail.clone());
    } else {
        let max_kkt = results
            .iter()
            .filter_map(|r| r.as_ref().ok())
            .map(|&(k, _)| k)
            .fold(0.0f64, f64::max);
        checks.push(CheckLine::pass(
            "kkt_conditions",
            format!("{instances} instances, max KKT residual {max_kkt:.2e}"),
        ));
        checks.push(CheckLine::pass(
            "rate_optimality",
            format!("{instances} instances, none of {random_splits} random splits won"),
        ));
    }
    SuiteReport::new("waterfill", checks)
}

/// Analog-aggregation calibration: the received noise variance per
/// supported coordinate within 5% of the configured value, and exact
/// (1e-10 relative) noiseless sums.
pub fn oac(seed: u64, reps: u64) -> SuiteReport {
    let root = RngStream::new(seed).purpose(Purpose::Verify);
    let mut checks = Vec::new();

    // Noise calibration on a zero update: the received vector is pure
    // noise on the supported coordinates.
    let noise_var = 1e-6;
    let k = 8;
    let cfg = OacConfig::new(5.0, 3, k).expect("valid cfg");
    let ch = draw_channel(1, 3, noise_var, root.child(0)).expect("channel");
    let zero = SparseUpdate {
        mask: MaskVector::new((0..k).collect(), k).expect("mask"),
        values: vec![0.0; k],
    };
    let samples: Vec<Vec<f64>> = map_indexed(reps as usize, |r| {
        oac_aggregate(
            std::slice::from_ref(&zero),
            &ch,
            &cfg,
            root.child(1).child(r as u64),
        )
        .expect("aggregate")
        .as_slice()
        .to_vec()
    });
    let mut worst_rel = 0.0f64;
    let mut worst_coord = 0;
    for coord in 0..k {
        let mean = samples.iter().map(|s| s[coord]).sum::<f64>() / reps as f64;
        let var = samples
            .iter()
            .map(|s| (s[coord] - mean) * (s[coord] - mean))
            .sum::<f64>()
            / reps as f64;
        let rel = (var - noise_var).abs() / noise_var;
        if rel > worst_rel {
            worst_rel = rel;
            worst_coord = coord;
        }
    }
    if worst_rel < 0.05 {
        checks.push(CheckLine::pass(
            "noise_variance_calibration",
            format!(
                "reps={reps} worst coordinate deviation {:.2}%",
                worst_rel * 100.0
            ),
        ));
    } else {
        checks.push(CheckLine::fail(
            "noise_variance_calibration",
            format!(
                "coordinate {worst_coord} variance off by {:.2}%",
                worst_rel * 100.0
            ),
            json!({"reps": reps, "noise_var": noise_var, "worst_rel": worst_rel}),
        ));
    }

    // Noiseless exactness across random update sets.
    let mut worst_exact = 0.0f64;
    let mut exact_fail = None;
    for i in 0..50u64 {
        let mut rng = root.child(2).child(i).rng();
        let devices = rng.random_range(1..=5usize);
        let kk = rng.random_range(1..=12usize);
        let m = rng.random_range(1..=4usize);
        let d = kk + rng.random_range(0..8usize);
        let positions: Vec<usize> = (0..kk).collect();
        let cfg = OacConfig::new(5.0, m, kk).expect("cfg");
        let ch = draw_channel(devices, m, 0.0, root.child(3).child(i)).expect("channel");
        let updates: Vec<SparseUpdate> = (0..devices)
            .map(|_| SparseUpdate {
                mask: MaskVector::new(positions.clone(), d).expect("mask"),
                values: (0..kk).map(|_| rng.random_range(-1.0..1.0)).collect(),
            })
            .collect();
        let y = oac_aggregate(&updates, &ch, &cfg, root.child(4).child(i)).expect("aggregate");
        let mut expect = ParamVector::zeros(d);
        for u in &updates {
            expect.add_assign(&u.densify());
        }
        let rel = y.scale(1.0 / cfg.sigma_t).sub(&expect).norm() / expect.norm().max(1e-300);
        worst_exact = worst_exact.max(rel);
        if rel > 1e-10 && exact_fail.is_none() {
            exact_fail = Some(CheckLine::fail(
                "noiseless_exactness",
                format!("instance {i}: relative error {rel:.2e}"),
                json!({"instance": i, "devices": devices, "k": kk, "m": m}),
            ));
        }
    }
    checks.push(exact_fail.unwrap_or_else(|| {
        CheckLine::pass(
            "noiseless_exactness",
            format!("50 instances, worst relative error {worst_exact:.2e}"),
        )
    }));

    SuiteReport::new("oac", checks)
}

/// Analytic gradients against central finite differences at random
/// parameter points, to 1e-5 relative in vector norm.
pub fn gradcheck(seed: u64, points: u64) -> SuiteReport {
    let root = RngStream::new(seed).purpose(Purpose::Verify);
    let spec = ModelSpec::new(vec![6, 8, 4]).expect("model");
    let data = synthesize_dataset(4, 40, 6, 2.0, root.child(0)).expect("data");
    let all: Vec<usize> = (0..data.len()).collect();
    let h = 1e-5;

    let mut worst = 0.0f64;
    let mut failure = None;
    for p in 0..points {
        let w = spec.init_params(root.child(1).child(p));
        let (_, analytic) = spec.loss_and_grad(&w, &data, &all);
        let fd: Vec<f64> = map_indexed(spec.param_count(), |i| {
            let mut plus = w.clone();
            plus.as_mut_slice()[i] += h;
            let mut minus = w.clone();
            minus.as_mut_slice()[i] -= h;
            let (lp, _) = spec.loss_and_grad(&plus, &data, &all);
            let (lm, _) = spec.loss_and_grad(&minus, &data, &all);
            (lp - lm) / (2.0 * h)
        });
        let fd = ParamVector::from_vec(fd).expect("finite fd");
        let rel = analytic.sub(&fd).norm() / analytic.norm().max(1e-12);
        worst = worst.max(rel);
        if rel >= 1e-5 && failure.is_none() {
            failure = Some(CheckLine::fail(
                "gradient_vs_central_differences",
                format!("point {p}: relative error {rel:.2e}"),
                json!({"point": p, "relative_error": rel}),
            ));
        }
    }
    let check = failure.unwrap_or_else(|| {
        CheckLine::pass(
            "gradient_vs_central_differences",
            format!("{points} points, worst relative error {worst:.2e}"),
        )
    });
    SuiteReport::new("gradcheck", check.into_iter().collect())
}

impl IntoIterator for CheckLine {
    type Item = CheckLine;
    type IntoIter = std::iter::Once<CheckLine>;

    fn into_iter(self) -> Self::IntoIter {
        std::iter::once(self)
    }
}
