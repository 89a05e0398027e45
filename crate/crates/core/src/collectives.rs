//! In-process collectives over `T` simulated workers.
//!
//! Every collective takes one contribution per rank and hands each rank its
//! own copy of the result. Reductions always run in rank-ascending order, so
//! results are bit-reproducible no matter how contributions arrive.
//!
//! Byte accounting follows ring-algorithm volumes, summed over all workers:
//!
//! | collective | bytes moved |
//! |---|---|
//! | all-gather | `(T−1) · Σ_r payload_r` |
//! | all-reduce | `2 · (T−1) · payload` |
//! | broadcast  | `(T−1) · payload` |

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CollectiveKind {
    AllGather,
    AllReduceSum,
    AllReduceMax,
    Broadcast,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Max,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KindStats {
    pub calls: u64,
    pub bytes: u64,
}

/// Running totals of collective traffic.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommStats {
    pub by_kind: BTreeMap<CollectiveKind, KindStats>,
}

impl CommStats {
    pub fn total_bytes(&self) -> u64 {
        self.by_kind.values().map(|k| k.bytes).sum()
    }

    pub fn total_calls(&self) -> u64 {
        self.by_kind.values().map(|k| k.calls).sum()
    }

    pub fn kind(&self, kind: CollectiveKind) -> KindStats {
        self.by_kind.get(&kind).copied().unwrap_or_default()
    }

    /// Traffic recorded since `earlier`.
    pub fn delta_since(&self, earlier: &CommStats) -> CommStats {
        let mut by_kind = BTreeMap::new();
        for (&kind, now) in &self.by_kind {
            let before = earlier.kind(kind);
            by_kind.insert(kind, KindStats { calls: now.calls - before.calls, bytes: now.bytes - before.bytes });
        }
        CommStats { by_kind }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("comm stats serialize")
    }

    fn record(&mut self, kind: CollectiveKind, bytes: u64) {
        let e = self.by_kind.entry(kind).or_default();
        e.calls += 1;
        e.bytes += bytes;
    }
}

/// A group of `T` logical workers sharing one process.
#[derive(Debug, Clone)]
pub struct WorkerGroup {
    world: usize,
    stats: CommStats,
}

impl WorkerGroup {
    pub fn new(world: usize) -> Result<Self> {
        if world == 0 {
            return Err(Error::InvalidArgument("a worker group needs at least one worker".into()));
        }
        Ok(WorkerGroup { world, stats: CommStats::default() })
    }

    pub fn world(&self) -> usize {
        self.world
    }

    pub fn stats(&self) -> &CommStats {
        &self.stats
    }

    pub fn bytes_moved(&self) -> u64 {
        self.stats.total_bytes()
    }

    fn check_arity<S: Scalar>(&self, inputs: &[Tensor<S>], what: &str) -> Result<()> {
        if inputs.len() != self.world {
            return Err(Error::Shape(format!(
                "{what} got {} contributions for {} workers",
                inputs.len(),
                self.world
            )));
        }
        Ok(())
    }

    /// Concatenates per-rank tensors along their first axis, in rank order.
    pub fn all_gather<S: Scalar>(&mut self, inputs: &[Tensor<S>]) -> Result<Vec<Tensor<S>>> {
        self.check_arity(inputs, "all_gather")?;
        let trailing = &inputs[0].dims()[1..];
        for (r, t) in inputs.iter().enumerate().skip(1) {
            if t.ndim() != inputs[0].ndim() || &t.dims()[1..] != trailing {
                return Err(Error::Shape(format!(
                    "all_gather: rank {r} has dims {:?}, rank 0 has {:?}",
                    t.dims(),
                    inputs[0].dims()
                )));
            }
        }
        let mut data = Vec::new();
        let mut lead = 0;
        for t in inputs {
            data.extend_from_slice(t.data());
            lead += t.dims()[0];
        }
        let mut dims = vec![lead];
        dims.extend_from_slice(trailing);
        let out = Tensor::new(dims, data)?;
        let payload: u64 = inputs.iter().map(Tensor::size_bytes).sum();
        self.stats.record(CollectiveKind::AllGather, (self.world as u64 - 1) * payload);
        Ok(vec![out; self.world])
    }

    /// Elementwise reduction, accumulated in rank order starting from rank 0.
    pub fn all_reduce<S: Scalar>(&mut self, inputs: &[Tensor<S>], op: ReduceOp) -> Result<Vec<Tensor<S>>> {
        self.check_arity(inputs, "all_reduce")?;
        for (r, t) in inputs.iter().enumerate().skip(1) {
            if t.dims() != inputs[0].dims() {
                return Err(Error::Shape(format!(
                    "all_reduce: rank {r} has dims {:?}, rank 0 has {:?}",
                    t.dims(),
                    inputs[0].dims()
                )));
            }
        }
        let mut acc = inputs[0].clone();
        for t in &inputs[1..] {
            for (a, &b) in acc.data_mut().iter_mut().zip(t.data()) {
                *a = match op {
                    ReduceOp::Sum => *a + b,
                    ReduceOp::Max => a.max(b),
                };
            }
        }
        let kind = match op {
            ReduceOp::Sum => CollectiveKind::AllReduceSum,
            ReduceOp::Max => CollectiveKind::AllReduceMax,
        };
        self.stats.record(kind, 2 * (self.world as u64 - 1) * inputs[0].size_bytes());
        Ok(vec![acc; self.world])
    }

    /// All-reduce over contributions tagged with their rank, in any arrival
    /// order. The result is identical to [`Self::all_reduce`] on the
    /// rank-ordered inputs.
    pub fn all_reduce_tagged<S: Scalar>(
        &mut self,
        mut arrivals: Vec<(usize, Tensor<S>)>,
        op: ReduceOp,
    ) -> Result<Vec<Tensor<S>>> {
        arrivals.sort_by_key(|a| a.0);
        let ranks: Vec<usize> = arrivals.iter().map(|a| a.0).collect();
        if ranks != (0..self.world).collect::<Vec<_>>() {
            return Err(Error::Shape(format!("all_reduce: expected one contribution per rank, got ranks {ranks:?}")));
        }
        let inputs: Vec<Tensor<S>> = arrivals.into_iter().map(|a| a.1).collect();
        self.all_reduce(&inputs, op)
    }

    pub fn broadcast<S: Scalar>(&mut self, root: usize, tensor: &Tensor<S>) -> Result<Vec<Tensor<S>>> {
        if root >= self.world {
            return Err(Error::InvalidArgument(format!("broadcast root {root} outside {} workers", self.world)));
        }
        self.stats.record(CollectiveKind::Broadcast, (self.world as u64 - 1) * tensor.size_bytes());
        Ok(vec![tensor.clone(); self.world])
    }
}
