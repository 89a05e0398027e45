//! Training loop: two-view batches, synchronized encoder replicas, the
//! sharded classifier, SGD with momentum, warmup + cosine schedule, and a
//! per-epoch hard-class refresh.

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::collectives::WorkerGroup;
use crate::data::{view_batch, AugmentationConfig, InstanceDataset};
use crate::encoder::{backward_replicas, forward_replicas, init_random, BNMode, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::math::LossVariant;
use crate::prior::{extract_prior_features, init_weights_from_features, DEFAULT_EXTRACT_BATCH};
use crate::rng::{stream_rng, Stream};
use crate::sharded::{
    assemble_weights, random_shards, sampled_class_mask, split_evenly, DhpClassifier, ShardPlan, WeightShard,
};
use crate::smoothing::{build_labels, compute_hard_classes, HardClassTable, SmoothedLabelSet};
use crate::tensor::{DType, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    Random,
    PriorFixedBn,
    PriorRunningBn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    Onehot,
    Smoothed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassMode {
    Full,
    /// Softmax over the batch's label classes plus uniform negatives, `m` in total.
    Sampled { m: usize },
}

/// Training configuration. Defaults are the large-scale reference settings;
/// desk-scale runs override sizes and epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub total_epochs: usize,
    pub warmup_epochs: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Rows per step, i.e. instances per step × views.
    pub batch_size: usize,
    pub views_per_instance: usize,
    pub tau: f64,
    pub alpha: f64,
    pub k: usize,
    pub workers: usize,
    pub seed: u64,
    pub init_mode: InitMode,
    pub label_mode: LabelMode,
    pub class_mode: ClassMode,
    pub loss_variant: LossVariant,
    pub dtype: DType,
    pub encoder: EncoderConfig,
    pub augmentation: AugmentationConfig,
    pub extract_batch_size: usize,
    pub hard_block_size: usize,
    /// Save a checkpoint every this many epochs (0: final only).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_epochs: 200,
            warmup_epochs: 10,
            base_lr: 0.48,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 4096,
            views_per_instance: 2,
            tau: 0.15,
            alpha: 0.2,
            k: 100,
            workers: 1,
            seed: 0,
            init_mode: InitMode::PriorRunningBn,
            label_mode: LabelMode::Smoothed,
            class_mode: ClassMode::Full,
            loss_variant: LossVariant::default(),
            dtype: DType::F64,
            encoder: EncoderConfig::default(),
            augmentation: AugmentationConfig { noise_std: 0.1, mask_rate: 0.1, scale_jitter: 0.1, crop: None },
            extract_batch_size: DEFAULT_EXTRACT_BATCH,
            hard_block_size: 1024,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.total_epochs == 0 {
            return bad("total_epochs must be at least 1".into());
        }
        if self.warmup_epochs > self.total_epochs {
            return bad(format!("warmup_epochs {} exceeds total_epochs {}", self.warmup_epochs, self.total_epochs));
        }
        if !(self.base_lr >= 0.0) || !self.base_lr.is_finite() {
            return bad(format!("base_lr must be finite and nonnegative, got {}", self.base_lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return bad(format!("weight_decay must be nonnegative, got {}", self.weight_decay));
        }
        if self.views_per_instance == 0 {
            return bad("views_per_instance must be at least 1".into());
        }
        if self.batch_size < 2 || self.batch_size % self.views_per_instance != 0 {
            return bad(format!(
                "batch_size {} must be at least 2 and a multiple of views_per_instance {}",
                self.batch_size, self.views_per_instance
            ));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if !(0.0..1.0).contains(&self.alpha) {
            return bad(format!("alpha must lie in [0, 1), got {}", self.alpha));
        }
        if self.label_mode == LabelMode::Smoothed && self.k == 0 {
            return bad("smoothed labels need k ≥ 1".into());
        }
        if self.workers == 0 {
            return bad("workers must be at least 1".into());
        }
        if let ClassMode::Sampled { m } = self.class_mode {
            if m < self.instances_per_step() {
                return bad(format!("sampled class count {m} is below the {} instances per step", self.instances_per_step()));
            }
        }
        if self.extract_batch_size == 0 || self.hard_block_size == 0 {
            return bad("extract_batch_size and hard_block_size must be positive".into());
        }
        self.encoder.validate()?;
        self.augmentation.validate(self.encoder.input_dim)
    }

    pub fn instances_per_step(&self) -> usize {
        self.batch_size / self.views_per_instance.max(1)
    }

    /// Steps per epoch for `n` instances; the last step may be short.
    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.instances_per_step().max(1))
    }

    /// Whether labels actually carry smoothing mass.
    pub fn smoothing_active(&self) -> bool {
        self.label_mode == LabelMode::Smoothed && self.alpha > 0.0 && self.k > 0
    }
}

/// Linear warmup over `warmup_epochs`, then cosine decay to zero at the final step.
pub fn lr_at(config: &TrainConfig, step: usize, steps_per_epoch: usize) -> f64 {
    let warmup = config.warmup_epochs * steps_per_epoch;
    let total = config.total_epochs * steps_per_epoch;
    if step < warmup {
        return config.base_lr * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup + 1);
    let progress = if span == 0 { 0.0 } else { ((step - warmup) as f64 / span as f64).min(1.0) };
    0.5 * config.base_lr * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// `buf ← momentum·buf + (grad + wd·param)`, `param ← param − lr·buf`.
pub fn sgd_update<S: Scalar>(
    param: &mut Tensor<S>,
    grad: &Tensor<S>,
    buf: &mut Tensor<S>,
    lr: S,
    momentum: S,
    weight_decay: S,
) -> Result<()> {
    param.check_same_shape(grad, "sgd gradient")?;
    param.check_same_shape(buf, "sgd momentum buffer")?;
    for ((p, &g), b) in param.data_mut().iter_mut().zip(grad.data()).zip(buf.data_mut()) {
        *b = momentum * *b + (g + weight_decay * *p);
        *p -= lr * *b;
    }
    Ok(())
}

/// Deterministic per-epoch record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    pub comm_bytes: u64,
    pub steps: usize,
    pub hard_refreshed: bool,
}

/// Wall-clock figures, kept apart so the main log is reproducible bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochTiming {
    pub epoch: usize,
    pub wall_s: f64,
    pub hard_refresh_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub timings: Vec<EpochTiming>,
    pub checkpoints: Vec<String>,
}

impl TrainLog {
    pub fn to_jsonl(&self) -> String {
        self.epochs.iter().map(|e| serde_json::to_string(e).expect("plain struct") + "\n").collect()
    }

    pub fn timings_jsonl(&self) -> String {
        self.timings.iter().map(|e| serde_json::to_string(e).expect("plain struct") + "\n").collect()
    }

    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.mean_loss).collect()
    }
}

/// Result of one optimization step.
#[derive(Debug, Clone)]
pub struct StepOutcome<S> {
    pub loss: S,
    pub rows: usize,
    pub lr: f64,
    pub comm_bytes: u64,
}

pub struct Trainer<'a, S: Scalar> {
    config: TrainConfig,
    data: &'a InstanceDataset<S>,
    replicas: Vec<Encoder<S>>,
    enc_momentum: Vec<Vec<Tensor<S>>>,
    decay: Vec<bool>,
    classifier: DhpClassifier<S>,
    group: WorkerGroup,
    table: Option<HardClassTable>,
    epoch: usize,
    global_step: usize,
    log: TrainLog,
}

impl<'a, S: Scalar> Trainer<'a, S> {
    /// Validates the configuration against the dataset, then initializes the
    /// encoder replicas and the classifier shards.
    pub fn new(config: TrainConfig, data: &'a InstanceDataset<S>) -> Result<Self> {
        config.validate()?;
        if config.dtype != S::DTYPE {
            return Err(Error::Config(format!("config asks for {}, trainer runs {}", config.dtype.name(), S::DTYPE.name())));
        }
        if data.input_dim() != config.encoder.input_dim {
            return Err(Error::Config(format!(
                "encoder input_dim {} does not match data dimension {}",
                config.encoder.input_dim,
                data.input_dim()
            )));
        }
        let n = data.len();
        if n < config.instances_per_step() {
            return Err(Error::Config(format!("{n} instances cannot fill a step of {}", config.instances_per_step())));
        }
        if n < config.workers {
            return Err(Error::Config(format!("{n} classes cannot be sharded over {} workers", config.workers)));
        }
        let plan = ShardPlan::new(n, config.workers)?;
        let mut enc = init_random::<S>(&config.encoder, config.seed)?;
        let shards = match config.init_mode {
            InitMode::Random => random_shards(&plan, config.encoder.embed_dim, config.seed)?,
            InitMode::PriorFixedBn | InitMode::PriorRunningBn => {
                let mode = if config.init_mode == InitMode::PriorRunningBn { BNMode::PriorExtract } else { BNMode::Eval };
                let prior = extract_prior_features(&mut enc, data, mode, config.extract_batch_size, config.seed, None)?;
                init_weights_from_features(&prior, &plan)?
            }
        };
        let classifier = DhpClassifier::new(plan, shards, S::cast(config.tau), config.loss_variant)?;
        let enc_momentum = vec![enc.params().iter().map(|t| Tensor::zeros(t.dims())).collect(); config.workers];
        let decay = enc.param_specs().iter().map(|s| s.decay).collect();
        Ok(Trainer {
            replicas: vec![enc; config.workers],
            enc_momentum,
            decay,
            classifier,
            group: WorkerGroup::new(config.workers)?,
            table: None,
            epoch: 0,
            global_step: 0,
            log: TrainLog::default(),
            config,
            data,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Worker 0's encoder (all replicas are identical).
    pub fn encoder(&self) -> &Encoder<S> {
        &self.replicas[0]
    }

    pub fn replicas(&self) -> &[Encoder<S>] {
        &self.replicas
    }

    pub fn plan(&self) -> &ShardPlan {
        self.classifier.plan()
    }

    pub fn shards(&self) -> &[WeightShard<S>] {
        self.classifier.shards()
    }

    pub fn group(&self) -> &WorkerGroup {
        &self.group
    }

    pub fn log(&self) -> &TrainLog {
        &self.log
    }

    pub fn log_mut(&mut self) -> &mut TrainLog {
        &mut self.log
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    pub fn hard_table(&self) -> Option<&HardClassTable> {
        self.table.as_ref()
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.config.steps_per_epoch(self.data.len())
    }

    /// Instance IDs of every step of `epoch`, in order.
    pub fn epoch_batches(&self, epoch: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.data.len()).collect();
        order.shuffle(&mut stream_rng(self.config.seed, Stream::Order, &[epoch as u64]));
        order.chunks(self.config.instances_per_step()).map(<[usize]>::to_vec).collect()
    }

    /// Recomputes the hard-class table for `epoch` from the current weights.
    pub fn refresh_hard_classes(&mut self, epoch: usize) -> Result<()> {
        let w = assemble_weights(self.classifier.shards())?;
        self.table = Some(compute_hard_classes(&w, self.config.k, self.config.hard_block_size, epoch)?);
        Ok(())
    }

    fn labels_for(&self, ids: &[usize], epoch: usize) -> Result<SmoothedLabelSet<S>> {
        let (alpha, k) = match self.config.label_mode {
            LabelMode::Onehot => (0.0, 0),
            LabelMode::Smoothed => (self.config.alpha, self.config.k),
        };
        let labels = build_labels::<S>(ids, self.table.as_ref(), alpha, k, self.data.len(), epoch)?;
        Ok(labels.repeat_rows(self.config.views_per_instance))
    }

    fn mask_for(&self, labels: &SmoothedLabelSet<S>, epoch: usize, step: usize) -> Result<Option<Vec<usize>>> {
        match self.config.class_mode {
            ClassMode::Full => Ok(None),
            ClassMode::Sampled { m } => Ok(Some(sampled_class_mask(
                &labels.support(),
                m,
                self.data.len(),
                self.config.seed,
                &[epoch as u64, step as u64],
            )?)),
        }
    }

    fn local_blocks(&self, ids: &[usize], epoch: usize) -> Result<Vec<Tensor<S>>> {
        let x = view_batch(self.data, ids, self.config.views_per_instance, &self.config.augmentation, self.config.seed, epoch)?;
        Ok(split_evenly(x.rows(), self.config.workers).into_iter().map(|r| x.slice_rows(r)).collect())
    }

    /// One optimization step on instances `ids` (step `step` of `epoch`).
    pub fn step(&mut self, ids: &[usize], epoch: usize, step: usize) -> Result<StepOutcome<S>> {
        let before = self.group.bytes_moved();
        let blocks = self.local_blocks(ids, epoch)?;
        let rows: usize = blocks.iter().map(Tensor::rows).sum();
        let labels = self.labels_for(ids, epoch)?;
        let mask = self.mask_for(&labels, epoch, step)?;

        let (features, caches): (Vec<_>, Vec<_>) =
            forward_replicas(&mut self.replicas, &mut self.group, &blocks, BNMode::Train)?.into_iter().unzip();
        let out = self.classifier.forward_backward(&mut self.group, &features, &labels, mask.as_deref())?;
        let ranges = split_evenly(rows, self.config.workers);
        let feature_grads: Vec<Tensor<S>> =
            out.feature_grads.iter().zip(&ranges).map(|(g, r)| g.slice_rows(r.clone())).collect();
        let grads = backward_replicas(&self.replicas, &mut self.group, &caches, &feature_grads)?;

        let lr = lr_at(&self.config, self.global_step, self.steps_per_epoch());
        let (lr_s, mom, wd) = (S::cast(lr), S::cast(self.config.momentum), S::cast(self.config.weight_decay));
        for (r, enc) in self.replicas.iter_mut().enumerate() {
            for (p, ((param, g), buf)) in
                enc.params_mut().into_iter().zip(&grads[r].params).zip(self.enc_momentum[r].iter_mut()).enumerate()
            {
                let decay = if self.decay[p] { wd } else { S::zero() };
                sgd_update(param, g, buf, lr_s, mom, decay)?;
            }
        }
        for (shard, g) in self.classifier.shards_mut().iter_mut().zip(&out.weight_grads) {
            sgd_update(&mut shard.weights, g, &mut shard.momentum, lr_s, mom, wd)?;
        }
        for shard in self.classifier.shards() {
            shard.weights.ensure_finite("classifier weights")?;
        }
        self.check_replicas()?;
        self.global_step += 1;
        Ok(StepOutcome { loss: out.loss, rows, lr, comm_bytes: self.group.bytes_moved() - before })
    }

    /// Data-parallel replication check: every replica bit-equals worker 0.
    pub fn check_replicas(&self) -> Result<()> {
        for (r, enc) in self.replicas.iter().enumerate().skip(1) {
            if !enc.bit_eq(&self.replicas[0]) {
                return Err(Error::State(format!("encoder replica {r} diverged from replica 0")));
            }
        }
        Ok(())
    }

    /// Runs the next epoch and appends its record to the log.
    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        let epoch = self.epoch;
        let start = Instant::now();
        let mut hard_refresh_s = 0.0;
        let refresh = self.config.smoothing_active();
        if refresh {
            let t = Instant::now();
            self.refresh_hard_classes(epoch)?;
            hard_refresh_s = t.elapsed().as_secs_f64();
        }
        let bytes_before = self.group.bytes_moved();
        let batches = self.epoch_batches(epoch);
        let mut weighted = 0.0;
        let mut rows = 0;
        let mut lr = 0.0;
        for (s, ids) in batches.iter().enumerate() {
            let out = self.step(ids, epoch, s)?;
            weighted += out.loss.as_f64() * out.rows as f64;
            rows += out.rows;
            lr = out.lr;
        }
        let mean_loss = weighted / rows as f64;
        if !mean_loss.is_finite() {
            return Err(Error::NonFinite(format!("epoch {epoch} loss")));
        }
        let record = EpochRecord {
            epoch: epoch + 1,
            mean_loss,
            lr,
            comm_bytes: self.group.bytes_moved() - bytes_before,
            steps: batches.len(),
            hard_refreshed: refresh,
        };
        log::info!("epoch {} loss {:.6} lr {:.5}", record.epoch, mean_loss, lr);
        self.log.epochs.push(record.clone());
        self.log.timings.push(EpochTiming { epoch: epoch + 1, wall_s: start.elapsed().as_secs_f64(), hard_refresh_s });
        self.epoch += 1;
        Ok(record)
    }

    /// Runs all remaining epochs.
    pub fn train(&mut self) -> Result<&TrainLog> {
        while self.epoch < self.config.total_epochs {
            self.run_epoch()?;
        }
        Ok(&self.log)
    }

    /// Loss of one step on `ids` with the current parameters, without
    /// changing any state (BN statistics included).
    pub fn probe_step_loss(&self, ids: &[usize], epoch: usize, step: usize) -> Result<S> {
        let mut replicas = self.replicas.clone();
        let mut group = WorkerGroup::new(self.config.workers)?;
        let blocks = self.local_blocks(ids, epoch)?;
        let labels = self.labels_for(ids, epoch)?;
        let mask = self.mask_for(&labels, epoch, step)?;
        let features: Vec<Tensor<S>> = forward_replicas(&mut replicas, &mut group, &blocks, BNMode::Train)?
            .into_iter()
            .map(|p| p.0)
            .collect();
        let mut clf = DhpClassifier::new(
            self.classifier.plan().clone(),
            self.classifier.shards().to_vec(),
            self.classifier.tau(),
            self.classifier.variant(),
        )?;
        Ok(clf.forward(&mut group, &features, &labels, mask.as_deref())?.losses[0])
    }
}

/// Trains from scratch; returns the trainer for inspection.
pub fn train<S: Scalar>(config: TrainConfig, data: &InstanceDataset<S>) -> Result<Trainer<'_, S>> {
    let mut t = Trainer::new(config, data)?;
    t.train()?;
    Ok(t)
}
