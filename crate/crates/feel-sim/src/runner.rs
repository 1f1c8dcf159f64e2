//! The round loop: local training, compression, scheduling, hybrid
//! aggregation and budget accounting, for the hybrid algorithm and the
//! two digital baselines.
//!
//! Rounds are sequential (aggregation is a global barrier); per-device
//! work inside a round runs data-parallel. Every random draw comes from
//! a context-keyed stream, so the round loop is bit-reproducible
//! regardless of thread count.

use log::{info, warn};
use rand::seq::index::sample;

use crate::allocation::{allocate_round, schedule_devices, Allocation, PowerBudget};
use crate::channel::{draw_channel, oac_aggregate, oac_transmit_power, OacConfig};
use crate::compression::{
    compress_round, dequantize, error_update, local_payload_bits, quantize, CompressionSpec,
    QuantizedUpdate, SparseUpdate,
};
use crate::config::{Algorithm, DataSource, PartitionKind, RunConfig};
use crate::error::{Result, SimError};
use crate::learning::{
    local_sgd, partition, synthesize_dataset, Dataset, ModelSpec, PartitionMode,
};
use crate::math::{top_k_mask, ParamVector, Purpose, RngStream};
use crate::par::map_indexed;
use crate::report::RoundReport;

/// Final state of a finished run.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub reports: Vec<RoundReport>,
    pub budget: PowerBudget,
    pub final_model: ParamVector,
    /// Model after every round, when tracing was requested.
    pub model_trace: Option<Vec<ParamVector>>,
}

/// One experiment: configuration resolved against data, plus the
/// mutable round state.
pub struct Runner {
    cfg: RunConfig,
    model: ModelSpec,
    comp: CompressionSpec,
    oac: OacConfig,
    payload_bits: u64,
    train: Dataset,
    test: Dataset,
    shards: Vec<Dataset>,
    root: RngStream,
    w: ParamVector,
    g_hat: ParamVector,
    errors: Vec<ParamVector>,
    budget: PowerBudget,
    trace_models: bool,
}

// Per-device round products for the three algorithms.
struct HybridWork {
    g_ec: ParamVector,
    global_part: SparseUpdate,
    local_q: QuantizedUpdate,
}

struct DigitalTcsWork {
    g_ec: ParamVector,
    global_q: QuantizedUpdate,
    local_q: QuantizedUpdate,
}

struct TopKWork {
    g_ec: ParamVector,
    update_q: QuantizedUpdate,
}

impl Runner {
    /// Resolve the configuration against its data: load or synthesize
    /// the datasets, size the model and masks, shard the training set,
    /// and run the free initialization round.
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let root = RngStream::new(cfg.run.seed);

        let (train, test) = match cfg.data.source {
            DataSource::Synthetic => {
                let classes = cfg.data.classes.expect("validated");
                let train_n = cfg.data.train_samples.expect("validated");
                let test_n = cfg.data.test_samples.expect("validated");
                let dim = cfg.data.feature_dim.expect("validated");
                let separation = cfg.data.separation.expect("validated");
                // One draw for both splits keeps the class means shared.
                let all = synthesize_dataset(
                    classes,
                    train_n + test_n,
                    dim,
                    separation,
                    root.purpose(Purpose::DatasetTrain),
                )?;
                split_dataset(&all, train_n)
            }
            DataSource::Csv => {
                let train =
                    Dataset::from_csv_path(cfg.data.train_csv.as_ref().expect("validated"))?;
                let test = Dataset::from_csv_path(cfg.data.test_csv.as_ref().expect("validated"))?;
                if test.feature_dim() != train.feature_dim() {
                    return Err(SimError::InvalidArgument(format!(
                        "data.test_csv: feature dim {} does not match train {}",
                        test.feature_dim(),
                        train.feature_dim()
                    )));
                }
                if test.num_classes() > train.num_classes() {
                    return Err(SimError::InvalidArgument(
                        "data.test_csv: labels outside the training classes".into(),
                    ));
                }
                (train, test)
            }
        };

        let mut layers = Vec::with_capacity(cfg.model.hidden_layers.len() + 2);
        layers.push(train.feature_dim());
        layers.extend_from_slice(&cfg.model.hidden_layers);
        layers.push(train.num_classes());
        let model = ModelSpec::new(layers)?;
        let d = model.param_count();

        let k_global =
            RunConfig::resolve_k(cfg.compression.k_global, cfg.compression.phi_global, d);
        let k_local = RunConfig::resolve_k(cfg.compression.k_local, cfg.compression.phi_local, d);
        let comp = CompressionSpec::new(k_global, k_local, cfg.compression.q_bits, d)?;

        // Only the hybrid algorithm has an analog phase.
        let analog_k = match cfg.run.algorithm {
            Algorithm::TcsH => k_global,
            Algorithm::TcsD | Algorithm::TopK => 0,
        };
        let oac = OacConfig::new(cfg.channel.sigma_t, cfg.channel.m_subchannels, analog_k)?;
        let payload_bits = payload_bits_for(cfg.run.algorithm, &comp);

        let mode = match cfg.data.partition {
            PartitionKind::Iid => PartitionMode::Iid,
            PartitionKind::LabelSkew => PartitionMode::LabelSkew {
                classes_per_device: cfg.data.classes_per_device.expect("validated"),
            },
        };
        let shards = partition(
            &train,
            cfg.fleet.n_devices,
            mode,
            root.purpose(Purpose::Partition),
        )?;
        if let Some(short) = shards.iter().position(|s| s.len() < cfg.fleet.batch_size) {
            return Err(SimError::InvalidArgument(format!(
                "fleet.batch_size: shard {short} holds {} samples, fewer than the batch size {}",
                shards[short].len(),
                cfg.fleet.batch_size
            )));
        }

        let budget = PowerBudget::new(
            cfg.run.slot_budget,
            vec![cfg.channel.p_bar_mw; cfg.fleet.n_devices],
            cfg.channel.alpha,
        )?;

        // Free initialization: one exact full-batch aggregation seeds
        // the first global model difference.
        let w_initial = model.init_params(root.purpose(Purpose::InitWeights));
        let grads = map_indexed(shards.len(), |dev| {
            let all: Vec<usize> = (0..shards[dev].len()).collect();
            model.loss_and_grad(&w_initial, &shards[dev], &all).1
        });
        let mut mean_grad = ParamVector::zeros(d);
        for g in &grads {
            mean_grad.add_assign(g);
        }
        let g0 = mean_grad.scale(-cfg.fleet.eta / shards.len() as f64);
        let w0 = w_initial.add(&g0);
        let errors = vec![ParamVector::zeros(d); cfg.fleet.n_devices];

        Ok(Runner {
            cfg,
            model,
            comp,
            oac,
            payload_bits,
            train,
            test,
            shards,
            root,
            w: w0,
            g_hat: g0,
            errors,
            budget,
            trace_models: false,
        })
    }

    pub fn trace_models(&mut self, on: bool) {
        self.trace_models = on;
    }

    pub fn model(&self) -> &ModelSpec {
        &self.model
    }

    pub fn compression(&self) -> &CompressionSpec {
        &self.comp
    }

    pub fn payload_bits(&self) -> u64 {
        self.payload_bits
    }

    pub fn shards(&self) -> &[Dataset] {
        &self.shards
    }

    pub fn test_set(&self) -> &Dataset {
        &self.test
    }

    pub fn current_model(&self) -> &ParamVector {
        &self.w
    }

    pub fn g_hat(&self) -> &ParamVector {
        &self.g_hat
    }

    pub fn device_errors(&self) -> &[ParamVector] {
        &self.errors
    }

    // Stream contexts, shared with reference implementations in tests.
    pub fn sgd_stream(root: RngStream, round: u64, device: usize) -> RngStream {
        root.child(round)
            .child(device as u64)
            .purpose(Purpose::LocalSgd)
    }

    pub fn quantize_stream(root: RngStream, round: u64, device: usize) -> RngStream {
        root.child(round)
            .child(device as u64)
            .purpose(Purpose::Quantize)
    }

    pub fn channel_stream(root: RngStream, round: u64) -> RngStream {
        root.child(round).purpose(Purpose::ChannelGains)
    }

    pub fn noise_stream(root: RngStream, round: u64) -> RngStream {
        root.child(round).purpose(Purpose::OacNoise)
    }

    pub fn schedule_stream(root: RngStream, round: u64) -> RngStream {
        root.child(round).purpose(Purpose::Schedule)
    }

    /// Execute rounds until the slot budget runs out, the round cap is
    /// reached, or the optional accuracy target is met.
    pub fn run(mut self) -> Result<RunResult> {
        info!(
            "run start: algorithm={} d={} k_global={} k_local={} payload_bits={}",
            self.cfg.run.algorithm.name(),
            self.comp.d,
            self.comp.k_global,
            self.comp.k_local,
            self.payload_bits
        );
        let mut reports = Vec::new();
        let mut trace = self.trace_models.then(Vec::new);
        let mut round = 1u64;
        while round <= self.cfg.run.max_rounds
            && self.budget.spent_slots() < self.budget.total_slots()
        {
            let report = match self.cfg.run.algorithm {
                Algorithm::TcsH => self.round_tcs_h(round)?,
                Algorithm::TcsD => self.round_tcs_d(round)?,
                Algorithm::TopK => self.round_top_k(round)?,
            };
            if let Some(t) = trace.as_mut() {
                t.push(self.w.clone());
            }
            let reached_target = self
                .cfg
                .run
                .target_accuracy
                .is_some_and(|target| report.accuracy >= target);
            reports.push(report);
            if reached_target {
                info!("target accuracy reached at round {round}");
                break;
            }
            round += 1;
        }
        Ok(RunResult {
            reports,
            budget: self.budget,
            final_model: self.w,
            model_trace: trace,
        })
    }

    fn round_tcs_h(&mut self, round: u64) -> Result<RoundReport> {
        let cfg = &self.cfg;
        let work: Vec<HybridWork> = collect_device_work(self.shards.len(), |dev| {
            let g = local_sgd(
                &self.model,
                &self.w,
                &self.shards[dev],
                cfg.fleet.h_steps,
                cfg.fleet.batch_size,
                cfg.fleet.eta,
                Self::sgd_stream(self.root, round, dev),
            )?;
            let g_ec = g.add(&self.errors[dev]);
            let (global_part, local_q) = compress_round(
                &g_ec,
                &self.g_hat,
                &self.comp,
                Self::quantize_stream(self.root, round, dev).child(0),
            )?;
            Ok(HybridWork {
                g_ec,
                global_part,
                local_q,
            })
        })?;

        // Mask consensus is what makes the analog sum meaningful; check
        // it every round.
        for w in &work[1..] {
            if w.global_part.mask != work[0].global_part.mask {
                return Err(SimError::ContractViolation(
                    "global mask consensus broken across devices".into(),
                ));
            }
        }

        let ch = draw_channel(
            self.shards.len(),
            cfg.channel.m_subchannels,
            cfg.channel.noise_var,
            Self::channel_stream(self.root, round),
        )?;
        let oac_powers: Vec<f64> = work
            .iter()
            .enumerate()
            .map(|(dev, w)| oac_transmit_power(&w.global_part, &ch, dev, &self.oac))
            .collect::<Result<_>>()?;
        let scheduled = schedule_devices(&oac_powers, &self.budget, self.oac.u_global_slots());
        if scheduled.is_empty() {
            return Ok(self.skipped_round(round));
        }

        let alloc = allocate_round(&scheduled, &ch, &self.budget, self.payload_bits, &self.oac)?;
        let global_parts: Vec<SparseUpdate> = scheduled
            .iter()
            .map(|&dev| work[dev].global_part.clone())
            .collect();
        let y = oac_aggregate(
            &global_parts,
            &ch,
            &self.oac,
            Self::noise_stream(self.root, round),
        )?;
        let locals: Vec<SparseUpdate> = scheduled
            .iter()
            .map(|&dev| dequantize(&work[dev].local_q))
            .collect();
        let g_hat_new = aggregate_eq2(&y, &locals, scheduled.len(), self.oac.sigma_t)?;
        self.w.add_assign(&g_hat_new);
        self.g_hat = g_hat_new;

        let mut energy = vec![0.0; self.shards.len()];
        for (i, &dev) in alloc.scheduled.iter().enumerate() {
            energy[dev] = oac_powers[dev] + alloc.digital_energy(i);
        }
        self.update_errors(&scheduled, &work, |w| {
            (&w.g_ec, w.global_part.clone(), &w.local_q)
        });
        self.commit_and_report(round, &alloc, energy)
    }

    fn round_tcs_d(&mut self, round: u64) -> Result<RoundReport> {
        let cfg = &self.cfg;
        let work: Vec<DigitalTcsWork> = collect_device_work(self.shards.len(), |dev| {
            let g = local_sgd(
                &self.model,
                &self.w,
                &self.shards[dev],
                cfg.fleet.h_steps,
                cfg.fleet.batch_size,
                cfg.fleet.eta,
                Self::sgd_stream(self.root, round, dev),
            )?;
            let g_ec = g.add(&self.errors[dev]);
            let qstream = Self::quantize_stream(self.root, round, dev);
            let (global_part, local_q) =
                compress_round(&g_ec, &self.g_hat, &self.comp, qstream.child(0))?;
            // Same sparsification, but the global part goes digital too.
            let global_q = quantize(&global_part, self.comp.q, qstream.child(1))?;
            Ok(DigitalTcsWork {
                g_ec,
                global_q,
                local_q,
            })
        })?;

        for w in &work[1..] {
            if w.global_q.mask != work[0].global_q.mask {
                return Err(SimError::ContractViolation(
                    "global mask consensus broken across devices".into(),
                ));
            }
        }

        let ch = draw_channel(
            self.shards.len(),
            cfg.channel.m_subchannels,
            cfg.channel.noise_var,
            Self::channel_stream(self.root, round),
        )?;
        let scheduled = self.random_schedule(round);
        if scheduled.is_empty() {
            return Ok(self.skipped_round(round));
        }
        let alloc = allocate_round(&scheduled, &ch, &self.budget, self.payload_bits, &self.oac)?;

        let mut sum = ParamVector::zeros(self.comp.d);
        for &dev in &scheduled {
            sum.add_assign(&dequantize(&work[dev].global_q).densify());
            sum.add_assign(&dequantize(&work[dev].local_q).densify());
        }
        let g_hat_new = sum.scale(1.0 / scheduled.len() as f64);
        self.w.add_assign(&g_hat_new);
        self.g_hat = g_hat_new;

        let mut energy = vec![0.0; self.shards.len()];
        for (i, &dev) in alloc.scheduled.iter().enumerate() {
            energy[dev] = alloc.digital_energy(i);
        }
        self.update_errors(&scheduled, &work, |w| {
            (&w.g_ec, dequantize(&w.global_q), &w.local_q)
        });
        self.commit_and_report(round, &alloc, energy)
    }

    fn round_top_k(&mut self, round: u64) -> Result<RoundReport> {
        let cfg = &self.cfg;
        let k_total = self.comp.k_global + self.comp.k_local;
        let work: Vec<TopKWork> = collect_device_work(self.shards.len(), |dev| {
            let g = local_sgd(
                &self.model,
                &self.w,
                &self.shards[dev],
                cfg.fleet.h_steps,
                cfg.fleet.batch_size,
                cfg.fleet.eta,
                Self::sgd_stream(self.root, round, dev),
            )?;
            let g_ec = g.add(&self.errors[dev]);
            // Device-specific mask: no temporal correlation exploited.
            let mask = top_k_mask(&g_ec, k_total)?;
            let sparse = SparseUpdate::from_dense(&g_ec, mask)?;
            let update_q = quantize(
                &sparse,
                self.comp.q,
                Self::quantize_stream(self.root, round, dev).child(0),
            )?;
            Ok(TopKWork { g_ec, update_q })
        })?;

        let ch = draw_channel(
            self.shards.len(),
            cfg.channel.m_subchannels,
            cfg.channel.noise_var,
            Self::channel_stream(self.root, round),
        )?;
        let scheduled = self.random_schedule(round);
        if scheduled.is_empty() {
            return Ok(self.skipped_round(round));
        }
        let alloc = allocate_round(&scheduled, &ch, &self.budget, self.payload_bits, &self.oac)?;

        let mut sum = ParamVector::zeros(self.comp.d);
        for &dev in &scheduled {
            sum.add_assign(&dequantize(&work[dev].update_q).densify());
        }
        let g_hat_new = sum.scale(1.0 / scheduled.len() as f64);
        self.w.add_assign(&g_hat_new);
        self.g_hat = g_hat_new;

        let mut energy = vec![0.0; self.shards.len()];
        for (i, &dev) in alloc.scheduled.iter().enumerate() {
            energy[dev] = alloc.digital_energy(i);
        }
        let scheduled_flags = membership(self.shards.len(), &scheduled);
        for (dev, work) in work.iter().enumerate() {
            if scheduled_flags[dev] {
                let mut e = work.g_ec.clone();
                e.sub_assign(&dequantize(&work.update_q).densify());
                self.errors[dev] = e;
            }
        }
        self.commit_and_report(round, &alloc, energy)
    }

    /// Uniform random fixed-size schedule for the digital baselines,
    /// drawn from the devices that still hold power budget.
    fn random_schedule(&self, round: u64) -> Vec<usize> {
        let eligible: Vec<usize> = (0..self.shards.len())
            .filter(|&n| self.budget.remaining_avg(n) > 0.0)
            .collect();
        let take = self.cfg.fleet.digital_schedule_size.min(eligible.len());
        if take == 0 {
            return Vec::new();
        }
        let mut rng = Self::schedule_stream(self.root, round).rng();
        let mut picked: Vec<usize> = sample(&mut rng, eligible.len(), take)
            .into_iter()
            .map(|i| eligible[i])
            .collect();
        picked.sort_unstable();
        picked
    }

    fn update_errors<W, F>(&mut self, scheduled: &[usize], work: &[W], parts: F)
    where
        F: Fn(&W) -> (&ParamVector, SparseUpdate, &QuantizedUpdate),
    {
        let flags = membership(self.shards.len(), scheduled);
        for (dev, w) in work.iter().enumerate() {
            if flags[dev] {
                let (g_ec, transmitted_global, local_q) = parts(w);
                self.errors[dev] = error_update(
                    &self.errors[dev],
                    g_ec,
                    Some((&transmitted_global, local_q)),
                );
            }
            // Unscheduled devices keep their prior error; the round's
            // local progress is discarded.
        }
    }

    fn skipped_round(&mut self, round: u64) -> RoundReport {
        warn!("round {round}: no device scheduled, skipping aggregation");
        let energy = vec![0.0; self.shards.len()];
        self.report_for(round, 0, 0, energy, true)
    }

    fn commit_and_report(
        &mut self,
        round: u64,
        alloc: &Allocation,
        energy: Vec<f64>,
    ) -> Result<RoundReport> {
        self.budget.commit_round(alloc.u_total, &energy);
        Ok(self.report_for(round, alloc.scheduled.len(), alloc.u_total, energy, false))
    }

    fn report_for(
        &self,
        round: u64,
        n_scheduled: usize,
        u_round: u64,
        power_round: Vec<f64>,
        skipped: bool,
    ) -> RoundReport {
        let (loss, _) = self.model.evaluate(&self.w, &self.train);
        let (_, accuracy) = self.model.evaluate(&self.w, &self.test);
        let norms: Vec<f64> = self.errors.iter().map(ParamVector::norm).collect();
        let power_spent_max = (0..self.shards.len())
            .map(|n| self.budget.spent_power(n))
            .fold(0.0, f64::max);
        RoundReport {
            round,
            loss,
            accuracy,
            n_scheduled,
            u_round,
            blocks_cum: self.budget.spent_slots() * self.cfg.channel.m_subchannels as u64,
            power_spent_max,
            power_round,
            gamma: self.comp.gamma(),
            error_norm_mean: norms.iter().sum::<f64>() / norms.len() as f64,
            error_norm_max: norms.iter().copied().fold(0.0, f64::max),
            skipped,
        }
    }
}

/// Global aggregation of one round: the analog sum scaled down by the
/// power scalar and the scheduled count, plus the average of the
/// digitally received local parts.
pub fn aggregate_eq2(
    y: &ParamVector,
    locals: &[SparseUpdate],
    n_scheduled: usize,
    sigma_t: f64,
) -> Result<ParamVector> {
    if n_scheduled == 0 {
        return Err(SimError::ContractViolation(
            "aggregation over an empty scheduled set".into(),
        ));
    }
    let mut out = y.scale(1.0 / (sigma_t * n_scheduled as f64));
    let mut local_sum = ParamVector::zeros(y.dim());
    for u in locals {
        local_sum.add_assign(&u.densify());
    }
    out.axpy(1.0 / n_scheduled as f64, &local_sum);
    Ok(out)
}

/// Per-device digital payload in bits for each algorithm. The hybrid
/// algorithm ships only the local part digitally; the digital TCS
/// baseline adds q bits per global value (positions ride free on the
/// shared mask); plain top-k pays positions and values for everything.
pub fn payload_bits_for(algorithm: Algorithm, comp: &CompressionSpec) -> u64 {
    match algorithm {
        Algorithm::TcsH => local_payload_bits(comp.d, comp.q, comp.k_local),
        Algorithm::TcsD => {
            u64::from(comp.q) * comp.k_global as u64
                + local_payload_bits(comp.d, comp.q, comp.k_local)
        }
        Algorithm::TopK => local_payload_bits(comp.d, comp.q, comp.k_global + comp.k_local),
    }
}

fn membership(n: usize, scheduled: &[usize]) -> Vec<bool> {
    let mut flags = vec![false; n];
    for &dev in scheduled {
        flags[dev] = true;
    }
    flags
}

fn collect_device_work<W, F>(n: usize, f: F) -> Result<Vec<W>>
where
    W: Send,
    F: Fn(usize) -> Result<W> + Sync + Send,
{
    map_indexed(n, f).into_iter().collect()
}

fn split_dataset(all: &Dataset, train_n: usize) -> (Dataset, Dataset) {
    let mut train_features = Vec::with_capacity(train_n);
    let mut train_labels = Vec::with_capacity(train_n);
    let mut test_features = Vec::with_capacity(all.len() - train_n);
    let mut test_labels = Vec::with_capacity(all.len() - train_n);
    for i in 0..all.len() {
        if i < train_n {
            train_features.push(all.feature(i).to_vec());
            train_labels.push(all.label(i));
        } else {
            test_features.push(all.feature(i).to_vec());
            test_labels.push(all.label(i));
        }
    }
    (
        Dataset::new(train_features, train_labels, all.num_classes()).expect("valid split"),
        Dataset::new(test_features, test_labels, all.num_classes()).expect("valid split"),
    )
}
