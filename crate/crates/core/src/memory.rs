//! Analytic per-worker memory and communication model for replicated (DDP)
//! versus sharded (DHP) classifier training.
//!
//! Memory per worker is a fixed overhead plus the classifier state plus,
//! optionally, the logit activations (forward and backward):
//!
//! | term        | DDP                 | DHP                 |
//! |-------------|---------------------|---------------------|
//! | classifier  | `m·D·N·b`           | `m·D·⌈N/T⌉·b`       |
//! | activations | `2·⌈B/T⌉·N·b`       | `2·B·⌈N/T⌉·b`       |
//!
//! The overhead stands in for backbone, activations and framework memory.
//! It is one constant per mode, calibrated so the model reproduces the
//! reference scalability anchors (see [`Calibration`]).
//!
//! Communication counts total bytes over all links per step, the same
//! convention as [`crate::collectives`]: all-gather `(T−1)·Σ payload`,
//! all-reduce `2(T−1)·payload`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Ddp,
    Dhp,
}

/// Fixed per-worker overhead, bytes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Overheads {
    pub ddp: u64,
    pub dhp: u64,
}

impl Overheads {
    pub fn get(&self, mode: Mode) -> u64 {
        match mode {
            Mode::Ddp => self.ddp,
            Mode::Dhp => self.dhp,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostScenario {
    pub n_classes: u64,
    pub workers: u64,
    pub embed_dim: u64,
    /// Global batch (rows).
    pub batch: u64,
    pub bytes_per_scalar: u64,
    /// Weights + momentum + gradient.
    pub multiplicity: u64,
    pub include_activations: bool,
    pub budget_bytes: u64,
    /// Encoder parameter count (gradient all-reduce).
    pub encoder_params: u64,
    /// Total synchronized batch-norm channels.
    pub bn_channels: u64,
    /// Defaults to the calibrated values.
    pub overheads: Option<Overheads>,
}

pub const GIB: u64 = 1 << 30;

impl Default for CostScenario {
    fn default() -> Self {
        CostScenario { overheads: None, ..Calibration::reference().scenario(1_280_000) }
    }
}

impl CostScenario {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("workers", self.workers),
            ("embed_dim", self.embed_dim),
            ("batch", self.batch),
            ("bytes_per_scalar", self.bytes_per_scalar),
            ("multiplicity", self.multiplicity),
            ("budget_bytes", self.budget_bytes),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::Config(format!("scenario field {name} must be positive")));
            }
        }
        Ok(())
    }

    fn overhead(&self, mode: Mode) -> Result<u64> {
        match self.overheads {
            Some(o) => Ok(o.get(mode)),
            None => Ok(Calibration::reference().overheads()?.get(mode)),
        }
    }

    fn shard(&self, n: u64) -> u64 {
        n.div_ceil(self.workers)
    }

    fn local_batch(&self) -> u64 {
        self.batch.div_ceil(self.workers)
    }

    /// Bytes of classifier state per worker for `n` classes.
    fn classifier_for(&self, mode: Mode, n: u64) -> u64 {
        let cols = match mode {
            Mode::Ddp => n,
            Mode::Dhp => self.shard(n),
        };
        self.multiplicity * self.embed_dim * cols * self.bytes_per_scalar
    }

    fn activations_for(&self, mode: Mode, n: u64) -> u64 {
        if !self.include_activations {
            return 0;
        }
        let entries = match mode {
            Mode::Ddp => self.local_batch() * n,
            Mode::Dhp => self.batch * self.shard(n),
        };
        2 * entries * self.bytes_per_scalar
    }
}

pub fn classifier_memory(s: &CostScenario, mode: Mode) -> u64 {
    s.classifier_for(mode, s.n_classes)
}

pub fn activation_memory(s: &CostScenario, mode: Mode) -> u64 {
    s.activations_for(mode, s.n_classes)
}

pub fn total_memory(s: &CostScenario, mode: Mode) -> Result<u64> {
    Ok(s.overhead(mode)? + classifier_memory(s, mode) + activation_memory(s, mode))
}

/// Largest class count whose per-worker memory fits the budget.
pub fn max_classes(s: &CostScenario, mode: Mode) -> Result<u64> {
    s.validate()?;
    let overhead = s.overhead(mode)?;
    if s.budget_bytes <= overhead {
        return Err(Error::InvalidArgument(format!(
            "budget {} bytes does not exceed the fixed overhead {overhead}",
            s.budget_bytes
        )));
    }
    let free = s.budget_bytes - overhead;
    let b = s.bytes_per_scalar;
    let act = u64::from(s.include_activations);
    Ok(match mode {
        Mode::Ddp => free / (s.multiplicity * s.embed_dim * b + act * 2 * s.local_batch() * b),
        // memory depends on N only through ⌈N/T⌉
        Mode::Dhp => s.workers * (free / (s.multiplicity * s.embed_dim * b + act * 2 * s.batch * b)),
    })
}

/// Per-collective byte counts of one training step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommBreakdown {
    pub items: Vec<(String, u64)>,
    pub total: u64,
}

pub fn comm_volume(s: &CostScenario, mode: Mode) -> CommBreakdown {
    let t1 = s.workers.saturating_sub(1);
    let b = s.bytes_per_scalar;
    let reduce = |payload: u64| 2 * t1 * payload * b;
    let items: Vec<(String, u64)> = match mode {
        Mode::Dhp => vec![
            ("feature_all_gather".into(), t1 * s.batch * s.embed_dim * b),
            ("row_max_all_reduce".into(), reduce(s.batch)),
            ("denominator_all_reduce".into(), reduce(s.batch)),
            ("numerator_all_reduce".into(), reduce(s.batch)),
            ("feature_grad_all_reduce".into(), reduce(s.batch * s.embed_dim)),
            ("encoder_grad_all_reduce".into(), reduce(s.encoder_params)),
            // mean and variance forward, two sums backward
            ("batch_norm_sync".into(), 4 * reduce(s.bn_channels)),
        ],
        Mode::Ddp => vec![
            ("encoder_grad_all_reduce".into(), reduce(s.encoder_params)),
            ("classifier_grad_all_reduce".into(), reduce(s.embed_dim * s.n_classes)),
            ("batch_norm_sync".into(), 4 * reduce(s.bn_channels)),
        ],
    };
    let total = items.iter().map(|i| i.1).sum();
    CommBreakdown { items, total }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeReport {
    pub classifier_bytes: u64,
    pub activation_bytes: u64,
    pub overhead_bytes: u64,
    pub total_bytes: u64,
    pub comm_bytes_per_step: u64,
    pub max_classes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub scenario: CostScenario,
    pub ddp: ModeReport,
    pub dhp: ModeReport,
    pub max_classes_ratio: f64,
    /// DDP / DHP bytes per step, a proxy for the time contrast only.
    pub comm_ratio: f64,
}

fn mode_report(s: &CostScenario, mode: Mode) -> Result<ModeReport> {
    Ok(ModeReport {
        classifier_bytes: classifier_memory(s, mode),
        activation_bytes: activation_memory(s, mode),
        overhead_bytes: s.overhead(mode)?,
        total_bytes: total_memory(s, mode)?,
        comm_bytes_per_step: comm_volume(s, mode).total,
        max_classes: max_classes(s, mode)?,
    })
}

pub fn cost_report(s: &CostScenario) -> Result<CostReport> {
    s.validate()?;
    let ddp = mode_report(s, Mode::Ddp)?;
    let dhp = mode_report(s, Mode::Dhp)?;
    let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(CostReport {
        scenario: s.clone(),
        max_classes_ratio: ratio(dhp.max_classes, ddp.max_classes),
        comm_ratio: ratio(ddp.comm_bytes_per_step, dhp.comm_bytes_per_step),
        ddp,
        dhp,
    })
}

impl CostReport {
    pub fn to_table(&self) -> String {
        let gb = |b: u64| b as f64 / 1e9;
        let mut out = format!(
            "N = {}, T = {}, D = {}, B = {}, {} bytes/scalar, budget {:.2} GB\n",
            self.scenario.n_classes,
            self.scenario.workers,
            self.scenario.embed_dim,
            self.scenario.batch,
            self.scenario.bytes_per_scalar,
            gb(self.scenario.budget_bytes)
        );
        out += &format!("{:<28}{:>16}{:>16}\n", "", "DDP", "DHP");
        let rows: [(&str, String, String); 6] = [
            ("classifier (GB)", format!("{:.3}", gb(self.ddp.classifier_bytes)), format!("{:.3}", gb(self.dhp.classifier_bytes))),
            ("logit activations (GB)", format!("{:.3}", gb(self.ddp.activation_bytes)), format!("{:.3}", gb(self.dhp.activation_bytes))),
            ("fixed overhead (GB)", format!("{:.3}", gb(self.ddp.overhead_bytes)), format!("{:.3}", gb(self.dhp.overhead_bytes))),
            ("total per worker (GB)", format!("{:.3}", gb(self.ddp.total_bytes)), format!("{:.3}", gb(self.dhp.total_bytes))),
            ("comm per step (GB)", format!("{:.3}", gb(self.ddp.comm_bytes_per_step)), format!("{:.3}", gb(self.dhp.comm_bytes_per_step))),
            ("max classes", self.ddp.max_classes.to_string(), self.dhp.max_classes.to_string()),
        ];
        for (name, a, b) in rows {
            out += &format!("{name:<28}{a:>16}{b:>16}\n");
        }
        out += &format!("max-classes ratio DHP/DDP: {:.3}\n", self.max_classes_ratio);
        out
    }
}

/// Reference scalability scenario and the class counts at which each mode
/// runs out of memory there.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub workers: u64,
    pub budget_bytes: u64,
    pub batch: u64,
    pub embed_dim: u64,
    pub bytes_per_scalar: u64,
    pub multiplicity: u64,
    pub ddp_max_classes: u64,
    pub dhp_max_classes: u64,
}

impl Calibration {
    /// 64 workers with 32 GB each, batch 4096, D = 128, fp32: replicated
    /// training tops out at 4.7M classes, sharded at 30M.
    pub fn reference() -> Self {
        Calibration {
            workers: 64,
            budget_bytes: 32 * GIB,
            batch: 4096,
            embed_dim: 128,
            bytes_per_scalar: 4,
            multiplicity: 3,
            ddp_max_classes: 4_700_000,
            dhp_max_classes: 30_000_000,
        }
    }

    fn scenario(&self, n_classes: u64) -> CostScenario {
        CostScenario {
            n_classes,
            workers: self.workers,
            embed_dim: self.embed_dim,
            batch: self.batch,
            bytes_per_scalar: self.bytes_per_scalar,
            multiplicity: self.multiplicity,
            include_activations: true,
            budget_bytes: self.budget_bytes,
            encoder_params: 0,
            bn_channels: 0,
            overheads: Some(Overheads { ddp: 0, dhp: 0 }),
        }
    }

    /// Overheads that put each mode's memory exactly at the budget at its anchor.
    pub fn overheads(&self) -> Result<Overheads> {
        let fit = |mode: Mode, n: u64| -> Result<u64> {
            let s = self.scenario(n);
            let used = classifier_memory(&s, mode) + activation_memory(&s, mode);
            self.budget_bytes.checked_sub(used).ok_or_else(|| {
                Error::Config(format!("{mode:?} anchor of {n} classes already exceeds the budget"))
            })
        };
        Ok(Overheads { ddp: fit(Mode::Ddp, self.ddp_max_classes)?, dhp: fit(Mode::Dhp, self.dhp_max_classes)? })
    }
}

/// Max classes per mode across worker counts, as CSV.
pub fn sweep_workers_csv(base: &CostScenario, workers: &[u64]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::InvalidArgument(format!("csv: {e}"));
    w.write_record(["workers", "ddp_max_classes", "dhp_max_classes"]).map_err(err)?;
    for &t in workers {
        let s = CostScenario { workers: t, ..base.clone() };
        w.write_record([t.to_string(), max_classes(&s, Mode::Ddp)?.to_string(), max_classes(&s, Mode::Dhp)?.to_string()])
            .map_err(err)?;
    }
    finish(w)
}

/// Per-worker memory per mode across class counts, as CSV.
pub fn sweep_classes_csv(base: &CostScenario, classes: &[u64]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::InvalidArgument(format!("csv: {e}"));
    w.write_record(["n_classes", "ddp_bytes", "dhp_bytes", "budget_bytes"]).map_err(err)?;
    for &n in classes {
        let s = CostScenario { n_classes: n, ..base.clone() };
        w.write_record([
            n.to_string(),
            total_memory(&s, Mode::Ddp)?.to_string(),
            total_memory(&s, Mode::Dhp)?.to_string(),
            s.budget_bytes.to_string(),
        ])
        .map_err(err)?;
    }
    finish(w)
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
