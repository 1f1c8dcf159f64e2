//! Device scheduling, sub-channel assignment and power allocation for
//! one round.
//!
//! Scheduling gates each device on its analog-phase energy against the
//! remaining per-slot power budget. Sub-channels are then assigned in
//! two passes: a max-min (bottleneck) matching gives every scheduled
//! device one channel, and leftover channels go greedily to the
//! lowest-rate device while the equal-split rate gain stays positive.
//! Water-filling finally splits each device's power budget across its
//! channels.

use serde::{Deserialize, Serialize};

use crate::channel::{ChannelRealization, OacConfig};
use crate::error::{Result, SimError};

// ---------------------------------------------------------------------------
// Power budget ledger
// ---------------------------------------------------------------------------

/// Per-run communication budget: C slots total and an average per-slot
/// power cap per device. Cumulative spend never exceeds C * P_bar_n;
/// the final round may overrun the slot budget (the loop checks slots
/// between rounds), in which case the committed energy clamps at the
/// remaining budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerBudget {
    total_slots: u64,
    p_bar: Vec<f64>,
    alpha: f64,
    spent_power: Vec<f64>,
    spent_slots: u64,
}

impl PowerBudget {
    pub fn new(total_slots: u64, p_bar: Vec<f64>, alpha: f64) -> Result<Self> {
        if total_slots == 0 {
            return Err(SimError::InvalidArgument(
                "slot budget must be positive".into(),
            ));
        }
        if p_bar.is_empty() || p_bar.iter().any(|&p| !(p > 0.0)) {
            return Err(SimError::InvalidArgument(
                "per-device power caps must be positive".into(),
            ));
        }
        if !(alpha > 0.0) {
            return Err(SimError::InvalidArgument(format!(
                "alpha must be positive, got {alpha}"
            )));
        }
        let n = p_bar.len();
        Ok(PowerBudget {
            total_slots,
            p_bar,
            alpha,
            spent_power: vec![0.0; n],
            spent_slots: 0,
        })
    }

    pub fn n_devices(&self) -> usize {
        self.p_bar.len()
    }

    pub fn total_slots(&self) -> u64 {
        self.total_slots
    }

    pub fn spent_slots(&self) -> u64 {
        self.spent_slots
    }

    pub fn slots_remaining(&self) -> u64 {
        self.total_slots.saturating_sub(self.spent_slots)
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn spent_power(&self, device: usize) -> f64 {
        self.spent_power[device]
    }

    /// Total energy device may spend over the whole run: C * P_bar_n.
    pub fn energy_cap(&self, device: usize) -> f64 {
        self.total_slots as f64 * self.p_bar[device]
    }

    /// Average power available per remaining slot:
    /// (C P_bar_n - spent energy) / (C - spent slots).
    /// Zero once the slot budget is exhausted.
    pub fn remaining_avg(&self, device: usize) -> f64 {
        let slots_left = self.slots_remaining();
        if slots_left == 0 {
            return 0.0;
        }
        let energy_left = self.energy_cap(device) - self.spent_power[device];
        energy_left / slots_left as f64
    }

    /// Record a finished round: per-device energy (clamped to the
    /// remaining budget, a device cannot overdraw) and the round's slot
    /// usage.
    pub fn commit_round(&mut self, u_round: u64, energy: &[f64]) {
        assert_eq!(energy.len(), self.p_bar.len());
        for (n, &e) in energy.iter().enumerate() {
            debug_assert!(e >= 0.0);
            self.spent_power[n] = (self.spent_power[n] + e).min(self.energy_cap(n));
        }
        self.spent_slots += u_round;
    }
}

// ---------------------------------------------------------------------------
// Scheduling
// ---------------------------------------------------------------------------

/// Devices whose analog-phase energy fits the gated budget
/// P_g <= alpha * P_bar_t,n * U_g. Devices with an exhausted budget are
/// out regardless.
pub fn schedule_devices(oac_powers: &[f64], budget: &PowerBudget, u_global: u64) -> Vec<usize> {
    assert_eq!(oac_powers.len(), budget.n_devices());
    (0..oac_powers.len())
        .filter(|&n| {
            let p_bar_t = budget.remaining_avg(n);
            p_bar_t > 0.0 && oac_powers[n] <= budget.alpha() * p_bar_t * u_global as f64
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Bottleneck matching
// ---------------------------------------------------------------------------

/// One-to-one assignment of devices (rows) to sub-channels (columns)
/// maximizing the minimum edge weight.
///
/// Threshold policy: binary search over the distinct weights, testing
/// at each threshold whether a perfect matching exists among the edges
/// at or above it (augmenting-path maximum matching). Exact, and
/// deterministic through index-ordered search.
pub fn bottleneck_matching(weights: &[Vec<f64>]) -> Result<Vec<usize>> {
    let n = weights.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let m = weights[0].len();
    if n > m {
        return Err(SimError::InvalidArgument(format!(
            "{n} devices cannot each get one of {m} sub-channels"
        )));
    }
    debug_assert!(weights.iter().all(|row| row.len() == m));

    let mut distinct: Vec<f64> = weights.iter().flatten().copied().collect();
    distinct.sort_by(|a, b| a.partial_cmp(b).expect("weights are comparable"));
    distinct.dedup();

    // All edges pass the lowest threshold and the graph is complete, so
    // a perfect matching always exists there.
    let mut lo = 0;
    let mut hi = distinct.len() - 1;
    while lo < hi {
        let mid = (lo + hi).div_ceil(2);
        if matching_at_threshold(weights, distinct[mid]).is_some() {
            lo = mid;
        } else {
            hi = mid - 1;
        }
    }
    matching_at_threshold(weights, distinct[lo]).ok_or_else(|| {
        SimError::ContractViolation("no perfect matching at minimum threshold".into())
    })
}

/// Kuhn's augmenting-path matching over edges with weight >= threshold.
/// Returns device -> channel if every device can be matched.
fn matching_at_threshold(weights: &[Vec<f64>], threshold: f64) -> Option<Vec<usize>> {
    let n = weights.len();
    let m = weights[0].len();
    let mut owner: Vec<Option<usize>> = vec![None; m];

    fn augment(
        dev: usize,
        weights: &[Vec<f64>],
        threshold: f64,
        seen: &mut [bool],
        owner: &mut [Option<usize>],
    ) -> bool {
        for ch in 0..weights[dev].len() {
            if weights[dev][ch] >= threshold && !seen[ch] {
                seen[ch] = true;
                let free = match owner[ch] {
                    None => true,
                    Some(prev) => augment(prev, weights, threshold, seen, owner),
                };
                if free {
                    owner[ch] = Some(dev);
                    return true;
                }
            }
        }
        false
    }

    for dev in 0..n {
        let mut seen = vec![false; m];
        if !augment(dev, weights, threshold, &mut seen, &mut owner) {
            return None;
        }
    }

    let mut assignment = vec![usize::MAX; n];
    for (ch, &o) in owner.iter().enumerate() {
        if let Some(dev) = o {
            assignment[dev] = ch;
        }
    }
    Some(assignment)
}

// ---------------------------------------------------------------------------
// Remaining-channel assignment
// ---------------------------------------------------------------------------

/// Sum rate of one device under an equal power split across its
/// assigned channels: sum of log2(1 + P_bar h^2 / (noise * k)).
pub fn equal_split_rate(p_bar_t: f64, gains: &[f64], assigned: &[usize], noise_var: f64) -> f64 {
    let k = assigned.len();
    if k == 0 {
        return 0.0;
    }
    assigned
        .iter()
        .map(|&m| {
            let h = gains[m];
            (1.0 + p_bar_t * h * h / (noise_var * k as f64)).log2()
        })
        .sum()
}

/// Greedy distribution of unassigned sub-channels.
///
/// Repeatedly gives the lowest-rate improvable device its best spare
/// channel if the equal-split rate gain is positive, otherwise marks
/// the device unimprovable. Ties break toward lower device and channel
/// indices. `assigned` is updated in place.
pub fn assign_remaining(
    assigned: &mut [Vec<usize>],
    gains: &[&[f64]],
    p_bar_t: &[f64],
    noise_var: f64,
    m_subchannels: usize,
) {
    let n = assigned.len();
    let mut taken = vec![false; m_subchannels];
    for channels in assigned.iter() {
        for &c in channels {
            taken[c] = true;
        }
    }
    let mut spare: Vec<usize> = (0..m_subchannels).filter(|&c| !taken[c]).collect();
    let mut improvable: Vec<bool> = vec![true; n];
    let mut rates: Vec<f64> = (0..n)
        .map(|i| equal_split_rate(p_bar_t[i], gains[i], &assigned[i], noise_var))
        .collect();

    while !spare.is_empty() {
        let Some(dev) = (0..n).filter(|&i| improvable[i]).min_by(|&a, &b| {
            rates[a]
                .partial_cmp(&rates[b])
                .expect("finite rates")
                .then(a.cmp(&b))
        }) else {
            break;
        };
        let best = spare
            .iter()
            .copied()
            .max_by(|&a, &b| {
                gains[dev][a]
                    .partial_cmp(&gains[dev][b])
                    .expect("finite gains")
                    .then(b.cmp(&a)) // prefer the lower channel index on ties
            })
            .expect("spare non-empty");

        let mut candidate = assigned[dev].clone();
        candidate.push(best);
        let gain = equal_split_rate(p_bar_t[dev], gains[dev], &candidate, noise_var) - rates[dev];
        if gain > 0.0 {
            assigned[dev].push(best);
            assigned[dev].sort_unstable();
            rates[dev] += gain;
            spare.retain(|&c| c != best);
        } else {
            improvable[dev] = false;
            if improvable.iter().all(|&b| !b) {
                break;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Water-filling
// ---------------------------------------------------------------------------

/// Rate-optimal power split over parallel Gaussian channels:
/// p_m = (1/lambda - noise/h_m^2)+ with lambda set so the powers sum to
/// `total_power` exactly. Solved by the breakpoint method: sort inverse
/// CNRs, then the active set and water level follow in closed form.
pub fn water_fill(gains: &[f64], noise_var: f64, total_power: f64) -> Result<Vec<f64>> {
    if gains.is_empty() {
        return Err(SimError::InvalidArgument(
            "water-filling needs at least one channel".into(),
        ));
    }
    if !(total_power > 0.0) {
        return Err(SimError::InvalidArgument(format!(
            "total power must be positive, got {total_power}"
        )));
    }
    let floors: Vec<f64> = gains.iter().map(|&h| noise_var / (h * h)).collect();
    let mut order: Vec<usize> = (0..floors.len()).collect();
    order.sort_by(|&a, &b| floors[a].partial_cmp(&floors[b]).expect("finite floors"));

    // Largest k whose water level clears the k-th floor.
    let mut prefix = 0.0;
    let mut level = 0.0;
    let mut active = 0;
    for (k, &i) in order.iter().enumerate() {
        let candidate = (total_power + prefix + floors[i]) / (k + 1) as f64;
        if candidate > floors[i] {
            prefix += floors[i];
            level = candidate;
            active = k + 1;
        } else {
            break;
        }
    }
    debug_assert!(active >= 1);

    let mut powers = vec![0.0; gains.len()];
    for &i in order.iter().take(active) {
        powers[i] = level - floors[i];
    }
    Ok(powers)
}

// ---------------------------------------------------------------------------
// Round allocation
// ---------------------------------------------------------------------------

/// Output of the per-round allocation: who transmits, on which
/// sub-channels, at what power, and the slot bill.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Allocation {
    /// Scheduled device ids, ascending.
    pub scheduled: Vec<usize>,
    /// Assigned sub-channels per scheduled device (exclusive across
    /// devices within the round).
    pub channels: Vec<Vec<usize>>,
    /// Dense per-sub-channel power per scheduled device.
    pub powers: Vec<Vec<f64>>,
    /// Achievable bits per slot per scheduled device.
    pub rates: Vec<f64>,
    /// Digital slots each device actually transmits for.
    pub u_local_per_device: Vec<u64>,
    /// Slots of the analog phase.
    pub u_global: u64,
    /// Slots of the digital phase: the slowest device bounds the round.
    pub u_local: u64,
    /// u_global + u_local.
    pub u_total: u64,
}

impl Allocation {
    /// Digital-phase energy of one scheduled device: its own slot count
    /// times its total transmit power.
    pub fn digital_energy(&self, sched_idx: usize) -> f64 {
        let p: f64 = self.powers[sched_idx].iter().sum();
        self.u_local_per_device[sched_idx] as f64 * p
    }
}

/// Assign sub-channels and power to the scheduled devices and bill the
/// round's slots: bottleneck matching, greedy remainder, water-filling,
/// then U_local = max_n ceil(payload_bits / R_n). Pure; the caller
/// commits budgets.
pub fn allocate_round(
    scheduled: &[usize],
    ch: &ChannelRealization,
    budget: &PowerBudget,
    payload_bits: u64,
    cfg: &OacConfig,
) -> Result<Allocation> {
    if scheduled.is_empty() {
        return Err(SimError::InvalidArgument("no scheduled devices".into()));
    }
    let m = ch.m_subchannels();
    if scheduled.len() > m {
        return Err(SimError::InvalidArgument(format!(
            "{} scheduled devices exceed {m} sub-channels",
            scheduled.len()
        )));
    }
    let p_bar_t: Vec<f64> = scheduled.iter().map(|&n| budget.remaining_avg(n)).collect();
    if let Some(i) = p_bar_t.iter().position(|&p| !(p > 0.0)) {
        return Err(SimError::InvalidArgument(format!(
            "scheduled device {} has no remaining power budget",
            scheduled[i]
        )));
    }
    let noise_var = ch.noise_var();

    // Single-channel full-budget rates drive the initial matching.
    let weights: Vec<Vec<f64>> = scheduled
        .iter()
        .zip(&p_bar_t)
        .map(|(&n, &p)| {
            (0..m)
                .map(|sc| {
                    let h = ch.gain(n, sc);
                    (1.0 + p * h * h / noise_var).log2()
                })
                .collect()
        })
        .collect();
    let initial = bottleneck_matching(&weights)?;
    let mut channels: Vec<Vec<usize>> = initial.into_iter().map(|c| vec![c]).collect();

    let gain_rows: Vec<&[f64]> = scheduled.iter().map(|&n| ch.gains_of(n)).collect();
    assign_remaining(&mut channels, &gain_rows, &p_bar_t, noise_var, m);

    let mut powers = Vec::with_capacity(scheduled.len());
    let mut rates = Vec::with_capacity(scheduled.len());
    let mut u_local_per_device = Vec::with_capacity(scheduled.len());
    for (i, &n) in scheduled.iter().enumerate() {
        let assigned_gains: Vec<f64> = channels[i].iter().map(|&sc| ch.gain(n, sc)).collect();
        let split = water_fill(&assigned_gains, noise_var, p_bar_t[i])?;
        let mut dense = vec![0.0; m];
        for (&sc, &p) in channels[i].iter().zip(&split) {
            dense[sc] = p;
        }
        let rate = ch.digital_rate(n, &channels[i], &dense);
        let slots = if payload_bits == 0 {
            0
        } else if rate.is_infinite() {
            // Noiseless capacity: delivery is instantaneous.
            0
        } else if rate > 0.0 {
            (payload_bits as f64 / rate).ceil() as u64
        } else {
            return Err(SimError::ContractViolation(format!(
                "scheduled device {n} has zero digital rate"
            )));
        };
        powers.push(dense);
        rates.push(rate);
        u_local_per_device.push(slots);
    }

    let u_global = cfg.u_global_slots();
    let u_local = u_local_per_device.iter().copied().max().unwrap_or(0);
    Ok(Allocation {
        scheduled: scheduled.to_vec(),
        channels,
        powers,
        rates,
        u_local_per_device,
        u_global,
        u_local,
        u_total: u_global + u_local,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::draw_channel;
    use crate::math::{Purpose, RngStream};
    use itertools::Itertools;
    use rand::Rng;

    fn stream(label: u64) -> RngStream {
        RngStream::new(17).child(label).purpose(Purpose::Schedule)
    }

    // Exhaustive max-min over all injections; the independent oracle.
    fn brute_force_bottleneck(weights: &[Vec<f64>]) -> f64 {
        let n = weights.len();
        let m = weights[0].len();
        (0..m)
            .permutations(n)
            .map(|perm| {
                perm.iter()
                    .enumerate()
                    .map(|(dev, &ch)| weights[dev][ch])
                    .fold(f64::INFINITY, f64::min)
            })
            .fold(f64::NEG_INFINITY, f64::max)
    }

    fn bottleneck_value(weights: &[Vec<f64>], assignment: &[usize]) -> f64 {
        assignment
            .iter()
            .enumerate()
            .map(|(dev, &ch)| weights[dev][ch])
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn bottleneck_small_example() {
        let weights = vec![vec![3.0, 1.0], vec![2.0, 4.0]];
        let assignment = bottleneck_matching(&weights).unwrap();
        assert_eq!(assignment, vec![0, 1]);
        assert_eq!(bottleneck_value(&weights, &assignment), 3.0);
    }

    #[test]
    fn bottleneck_single_device_takes_argmax() {
        let weights = vec![vec![0.3, 2.0, 1.4]];
        let assignment = bottleneck_matching(&weights).unwrap();
        assert_eq!(assignment, vec![1]);
    }

    #[test]
    fn bottleneck_identical_rows_matches_brute_force() {
        let row = vec![5.0, 1.0, 3.0, 4.0];
        let weights = vec![row.clone(), row.clone(), row];
        let assignment = bottleneck_matching(&weights).unwrap();
        let distinct: std::collections::HashSet<_> = assignment.iter().collect();
        assert_eq!(distinct.len(), 3, "assignment must be one-to-one");
        assert_eq!(
            bottleneck_value(&weights, &assignment),
            brute_force_bottleneck(&weights)
        );
    }

    #[test]
    fn bottleneck_matches_brute_force_on_random_instances() {
        let mut rng = stream(0).rng();
        for trial in 0..30 {
            let n = rng.random_range(2..=5);
            let m = rng.random_range(n..=7);
            let weights: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..m).map(|_| rng.random_range(0.0..10.0)).collect())
                .collect();
            let assignment = bottleneck_matching(&weights).unwrap();
            let distinct: std::collections::HashSet<_> = assignment.iter().collect();
            assert_eq!(distinct.len(), n, "trial {trial}: not one-to-one");
            let got = bottleneck_value(&weights, &assignment);
            let best = brute_force_bottleneck(&weights);
            assert_eq!(got, best, "trial {trial}");
        }
    }

    #[test]
    fn bottleneck_rejects_more_devices_than_channels() {
        let weights = vec![vec![1.0], vec![2.0]];
        assert!(bottleneck_matching(&weights).is_err());
    }

    #[test]
    fn water_fill_equal_gains_split_evenly() {
        let powers = water_fill(&[2.0, 2.0, 2.0, 2.0], 1e-3, 8.0).unwrap();
        for &p in &powers {
            assert!((p - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn water_fill_drowns_deep_fade() {
        // Second channel's noise floor is far above the water level.
        let powers = water_fill(&[1.0, 1e-9], 1.0, 1.0).unwrap();
        assert!((powers[0] - 1.0).abs() < 1e-12);
        assert_eq!(powers[1], 0.0);
    }

    #[test]
    fn water_fill_kkt_and_budget() {
        let mut rng = stream(1).rng();
        for trial in 0..100 {
            let k = rng.random_range(1..=6);
            let gains: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..3.0)).collect();
            let noise = 10f64.powf(rng.random_range(-6.0..0.0));
            let total: f64 = rng.random_range(0.1..10.0);
            let powers = water_fill(&gains, noise, total).unwrap();

            let spent: f64 = powers.iter().sum();
            assert!(
                (spent - total).abs() <= 1e-9 * total,
                "trial {trial}: budget residual {}",
                spent - total
            );

            // Active channels share one water level; inactive floors
            // sit above it.
            let level = powers
                .iter()
                .zip(&gains)
                .filter(|(&p, _)| p > 0.0)
                .map(|(&p, &h)| p + noise / (h * h))
                .fold(f64::NEG_INFINITY, f64::max);
            for (&p, &h) in powers.iter().zip(&gains) {
                let floor = noise / (h * h);
                if p > 0.0 {
                    assert!((p + floor - level).abs() < 1e-9, "trial {trial}");
                } else {
                    assert!(level <= floor + 1e-9, "trial {trial}");
                }
            }
        }
    }

    fn rate_of_split(gains: &[f64], noise: f64, powers: &[f64]) -> f64 {
        gains
            .iter()
            .zip(powers)
            .map(|(&h, &p)| (1.0 + p * h * h / noise).log2())
            .sum()
    }

    #[test]
    fn water_fill_beats_equal_split_and_random_splits() {
        let mut rng = stream(2).rng();
        for _ in 0..20 {
            let k = rng.random_range(2..=5);
            let gains: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..3.0)).collect();
            let noise = 1e-3;
            let total = 5.0;
            let wf = water_fill(&gains, noise, total).unwrap();
            let wf_rate = rate_of_split(&gains, noise, &wf);

            let equal: Vec<f64> = vec![total / k as f64; k];
            assert!(wf_rate >= rate_of_split(&gains, noise, &equal) - 1e-12);

            for _ in 0..2000 {
                let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..1.0f64)).collect();
                let sum: f64 = raw.iter().sum();
                let split: Vec<f64> = raw.iter().map(|r| r / sum * total).collect();
                assert!(wf_rate >= rate_of_split(&gains, noise, &split) - 1e-12);
            }
        }
    }

    #[test]
    fn assign_remaining_no_spare_channels() {
        let gains_data = [vec![1.0, 2.0], vec![2.0, 1.0]];
        let gains: Vec<&[f64]> = gains_data.iter().map(Vec::as_slice).collect();
        let mut assigned = vec![vec![0], vec![1]];
        let before = assigned.clone();
        assign_remaining(&mut assigned, &gains, &[1.0, 1.0], 1e-3, 2);
        assert_eq!(assigned, before);
    }

    #[test]
    fn assign_remaining_skips_useless_channel() {
        // The spare channel's gain is so small that splitting power
        // into it loses rate; the device is marked unimprovable and the
        // channel stays unassigned.
        let gains_data = [vec![1.0, 1e-12]];
        let gains: Vec<&[f64]> = gains_data.iter().map(Vec::as_slice).collect();
        let mut assigned = vec![vec![0]];
        assign_remaining(&mut assigned, &gains, &[1.0], 1e-2, 2);
        assert_eq!(assigned, vec![vec![0]]);
    }

    #[test]
    fn assign_remaining_gains_verified_independently() {
        let mut rng = stream(3).rng();
        for trial in 0..50 {
            let n = 3;
            let m = 6;
            let gains_data: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..m).map(|_| rng.random_range(0.05..3.0)).collect())
                .collect();
            let gains: Vec<&[f64]> = gains_data.iter().map(Vec::as_slice).collect();
            let p_bar: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..5.0)).collect();
            let noise = 1e-4;
            let mut assigned = vec![vec![0], vec![1], vec![2]];
            let before = assigned.clone();
            assign_remaining(&mut assigned, &gains, &p_bar, noise, m);

            // Every channel added must improve its device's equal-split
            // rate, re-derived here from scratch.
            for dev in 0..n {
                let added: Vec<usize> = assigned[dev]
                    .iter()
                    .copied()
                    .filter(|c| !before[dev].contains(c))
                    .collect();
                let mut set = before[dev].clone();
                for &c in &added {
                    let old = equal_split_rate(p_bar[dev], gains[dev], &set, noise);
                    set.push(c);
                    let new = equal_split_rate(p_bar[dev], gains[dev], &set, noise);
                    assert!(
                        new > old,
                        "trial {trial}: device {dev} gained channel {c} without rate gain"
                    );
                }
            }

            // Exclusivity.
            let mut taken = vec![false; m];
            for channels in &assigned {
                for &c in channels {
                    assert!(!taken[c], "trial {trial}: channel {c} assigned twice");
                    taken[c] = true;
                }
            }
        }
    }

    #[test]
    fn schedule_gate_boundary() {
        let budget = PowerBudget::new(100, vec![2.0, 2.0, 2.0], 1.0).unwrap();
        let u_global = 5;
        let limit = 2.0 * 5.0; // alpha * P_bar_t * U_g with nothing spent
        let scheduled = schedule_devices(&[limit - 1e-9, limit, limit + 1e-9], &budget, u_global);
        assert_eq!(scheduled, vec![0, 1]);
    }

    #[test]
    fn schedule_excludes_exhausted_budget() {
        let mut budget = PowerBudget::new(10, vec![1.0, 1.0], 1.0).unwrap();
        // Device 0 burns its entire energy budget.
        budget.commit_round(5, &[10.0, 0.0]);
        let scheduled = schedule_devices(&[0.0, 0.0], &budget, 1);
        assert_eq!(scheduled, vec![1]);
    }

    #[test]
    fn schedule_zero_power_includes_all_with_budget() {
        let budget = PowerBudget::new(10, vec![1.0, 1.0, 1.0], 1.0).unwrap();
        assert_eq!(
            schedule_devices(&[0.0, 0.0, 0.0], &budget, 3),
            vec![0, 1, 2]
        );
    }

    #[test]
    fn budget_formula_and_clamp() {
        let mut budget = PowerBudget::new(100, vec![5.0], 1.0).unwrap();
        assert_eq!(budget.remaining_avg(0), 5.0);
        budget.commit_round(10, &[20.0]);
        // (500 - 20) / (100 - 10)
        assert!((budget.remaining_avg(0) - 480.0 / 90.0).abs() < 1e-12);

        // Committing beyond the cap clamps at C * P_bar.
        budget.commit_round(10, &[1e9]);
        assert_eq!(budget.spent_power(0), 500.0);
        assert_eq!(budget.remaining_avg(0), 0.0);
    }

    #[test]
    fn allocate_round_single_device_slots_match_hand_formula() {
        let ch = draw_channel(1, 4, 1e-6, stream(4)).unwrap();
        let budget = PowerBudget::new(1000, vec![5.0], 1.0).unwrap();
        let cfg = OacConfig::new(5.0, 4, 10).unwrap();
        let payload_bits = 2000;
        let alloc = allocate_round(&[0], &ch, &budget, payload_bits, &cfg).unwrap();
        assert_eq!(alloc.scheduled, vec![0]);
        assert_eq!(alloc.u_global, 3); // ceil(10 / 4)
        let rate = alloc.rates[0];
        assert_eq!(
            alloc.u_local_per_device[0],
            (payload_bits as f64 / rate).ceil() as u64
        );
        assert_eq!(alloc.u_total, alloc.u_global + alloc.u_local);
    }

    #[test]
    fn allocate_round_zero_payload_is_pure_analog() {
        let ch = draw_channel(3, 5, 1e-6, stream(5)).unwrap();
        let budget = PowerBudget::new(1000, vec![5.0; 3], 1.0).unwrap();
        let cfg = OacConfig::new(5.0, 5, 12).unwrap();
        let alloc = allocate_round(&[0, 1, 2], &ch, &budget, 0, &cfg).unwrap();
        assert_eq!(alloc.u_local, 0);
        assert_eq!(alloc.u_total, alloc.u_global);
    }

    #[test]
    fn allocate_round_invariants_hold_on_random_instances() {
        let mut rng = stream(6).rng();
        for trial in 0..200 {
            let n_devices = rng.random_range(1..=6);
            let m = rng.random_range(n_devices..=8);
            let ch = draw_channel(n_devices, m, 1e-5, stream(100 + trial)).unwrap();
            let p_bar: Vec<f64> = (0..n_devices).map(|_| rng.random_range(0.5..8.0)).collect();
            let budget = PowerBudget::new(5000, p_bar, 1.0).unwrap();
            let scheduled: Vec<usize> = (0..n_devices).collect();
            let payload_bits = rng.random_range(1..5000);
            let cfg = OacConfig::new(5.0, m, rng.random_range(0..40)).unwrap();
            let alloc = allocate_round(&scheduled, &ch, &budget, payload_bits, &cfg).unwrap();

            // Channel exclusivity.
            let mut taken = vec![false; m];
            for channels in &alloc.channels {
                for &c in channels {
                    assert!(!taken[c], "trial {trial}");
                    taken[c] = true;
                }
            }
            // Power feasibility and the bit-delivery constraint.
            for (i, &dev) in alloc.scheduled.iter().enumerate() {
                let spent: f64 = alloc.powers[i].iter().sum();
                let cap = budget.remaining_avg(dev);
                assert!(
                    spent <= cap * (1.0 + 1e-9),
                    "trial {trial}: power {spent} over {cap}"
                );
                let delivered = alloc.u_local_per_device[i] as f64 * alloc.rates[i];
                assert!(delivered >= payload_bits as f64 - 1e-6, "trial {trial}");
                // Power appears only on assigned channels.
                for (m_idx, &p) in alloc.powers[i].iter().enumerate() {
                    if p > 0.0 {
                        assert!(alloc.channels[i].contains(&m_idx), "trial {trial}");
                    }
                }
            }
            assert_eq!(
                alloc.u_local,
                alloc.u_local_per_device.iter().copied().max().unwrap()
            );
        }
    }

    #[test]
    fn allocate_round_rejects_bad_input() {
        let ch = draw_channel(2, 3, 1e-6, stream(7)).unwrap();
        let budget = PowerBudget::new(100, vec![5.0, 5.0], 1.0).unwrap();
        let cfg = OacConfig::new(5.0, 3, 4).unwrap();
        assert!(allocate_round(&[], &ch, &budget, 10, &cfg).is_err());

        let ch_small = draw_channel(4, 3, 1e-6, stream(8)).unwrap();
        let budget4 = PowerBudget::new(100, vec![5.0; 4], 1.0).unwrap();
        assert!(allocate_round(&[0, 1, 2, 3], &ch_small, &budget4, 10, &cfg).is_err());
    }
}
