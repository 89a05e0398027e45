//! The sharded (model-parallel) cosine softmax classifier.
//!
//! The `D×N` weight matrix is split column-wise into contiguous shards, one
//! per worker. A training step on every rank:
//!
//! 1. contributes the features of its slice of the minibatch,
//! 2. all-gathers the full `B×D` feature block,
//! 3. computes cosine logits against its local columns,
//! 4. all-reduces row maxima (MAX) and then the shifted exponential sums
//!    (SUM) into global softmax denominators,
//! 5. all-reduces its share of the label-weighted numerators and evaluates
//!    the loss, identical on every rank,
//! 6. derives local weight gradients and partial feature gradients,
//! 7. all-reduces the feature gradients.
//!
//! [`reference_forward_backward`] evaluates the same quantities on one node
//! and is the oracle for the distributed path.

use std::ops::Range;

use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::collectives::{CommStats, ReduceOp, WorkerGroup};
use crate::error::{Error, Result};
use crate::math::{
    check_numerator, cosine_logits, cosine_logits_backward, numerator_term, row_grad, row_loss, smoothed_softmax_loss,
    CosineLogits, LossVariant,
};
use crate::rng::{stream_rng, Stream};
use crate::smoothing::SmoothedLabelSet;
use crate::tensor::{Scalar, Tensor};

/// Splits `0..n` into `parts` contiguous ranges; the first `n mod parts`
/// ranges get one extra element.
pub fn split_evenly(n: usize, parts: usize) -> Vec<Range<usize>> {
    let base = n / parts;
    let extra = n % parts;
    let mut start = 0;
    (0..parts)
        .map(|r| {
            let len = base + usize::from(r < extra);
            let range = start..start + len;
            start += len;
            range
        })
        .collect()
}

/// Contiguous partition of the global class indices across workers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardPlan {
    pub n_classes: usize,
    pub world: usize,
    pub ranges: Vec<Range<usize>>,
}

impl ShardPlan {
    pub fn new(n_classes: usize, world: usize) -> Result<Self> {
        if world == 0 {
            return Err(Error::InvalidArgument("shard plan needs at least one worker".into()));
        }
        if n_classes < world {
            return Err(Error::InvalidArgument(format!("{n_classes} classes cannot be split over {world} workers")));
        }
        Ok(ShardPlan { n_classes, world, ranges: split_evenly(n_classes, world) })
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.ranges.iter().map(|r| r.len()).collect()
    }

    /// `(rank, local index)` of a global class.
    pub fn locate(&self, class: usize) -> Option<(usize, usize)> {
        self.ranges
            .iter()
            .position(|r| r.contains(&class))
            .map(|rank| (rank, class - self.ranges[rank].start))
    }
}

pub fn make_plan(n_classes: usize, world: usize) -> Result<ShardPlan> {
    ShardPlan::new(n_classes, world)
}

/// One worker's slice of the classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightShard<S> {
    pub rank: usize,
    pub range: Range<usize>,
    /// `D × range.len()`
    pub weights: Tensor<S>,
    pub momentum: Tensor<S>,
}

impl<S: Scalar> WeightShard<S> {
    pub fn new(rank: usize, range: Range<usize>, weights: Tensor<S>) -> Result<Self> {
        let (_, c) = weights.expect_matrix("shard weights")?;
        if c != range.len() {
            return Err(Error::Shape(format!("shard {rank} holds {c} columns for range {range:?}")));
        }
        let momentum = Tensor::zeros(weights.dims());
        Ok(WeightShard { rank, range, weights, momentum })
    }

    pub fn embed_dim(&self) -> usize {
        self.weights.rows()
    }
}

/// Splits a full `D×N` weight matrix according to `plan`.
pub fn shard_weights<S: Scalar>(w: &Tensor<S>, plan: &ShardPlan) -> Result<Vec<WeightShard<S>>> {
    let (_, n) = w.expect_matrix("classifier weights")?;
    if n != plan.n_classes {
        return Err(Error::Shape(format!("weights have {n} columns, plan covers {}", plan.n_classes)));
    }
    plan.ranges
        .iter()
        .enumerate()
        .map(|(rank, r)| WeightShard::new(rank, r.clone(), w.slice_cols(r.clone())))
        .collect()
}

/// Reassembles the full `D×N` weight matrix.
pub fn assemble_weights<S: Scalar>(shards: &[WeightShard<S>]) -> Result<Tensor<S>> {
    let parts: Vec<Tensor<S>> = shards.iter().map(|s| s.weights.clone()).collect();
    Tensor::concat_cols(&parts)
}

/// Gaussian classifier weights with per-entry standard deviation `1/√D`.
pub fn random_shards<S: Scalar>(plan: &ShardPlan, embed_dim: usize, seed: u64) -> Result<Vec<WeightShard<S>>> {
    let std = 1.0 / (embed_dim as f64).sqrt();
    let mut rng = stream_rng(seed, Stream::ClassifierInit, &[]);
    let n = plan.n_classes;
    let mut w = Tensor::zeros(&[embed_dim, n]);
    // column-major draw so a class's weights do not depend on N
    for j in 0..n {
        for d in 0..embed_dim {
            w.set(d, j, S::cast(rng.sample::<f64, _>(StandardNormal) * std));
        }
    }
    shard_weights(&w, plan)
}

/// Sorted class subset: every class in `required` plus uniformly drawn
/// others, `m` in total (clamped to `n`).
pub fn sampled_class_mask(required: &[usize], m: usize, n: usize, seed: u64, coords: &[u64]) -> Result<Vec<usize>> {
    let mut req: Vec<usize> = required.to_vec();
    req.sort_unstable();
    req.dedup();
    if let Some(&bad) = req.iter().find(|&&c| c >= n) {
        return Err(Error::InvalidArgument(format!("class {bad} out of range for {n} classes")));
    }
    let m = if m > n {
        log::warn!("sampled class count {m} exceeds {n} classes; clamping");
        n
    } else {
        m
    };
    if m < req.len() {
        return Err(Error::InvalidArgument(format!(
            "sampled class count {m} is below the {} classes the batch needs",
            req.len()
        )));
    }
    let mut is_req = vec![false; n];
    for &c in &req {
        is_req[c] = true;
    }
    let pool: Vec<usize> = (0..n).filter(|&c| !is_req[c]).collect();
    let mut rng = stream_rng(seed, Stream::ClassSampling, coords);
    let picks = index::sample(&mut rng, pool.len(), m - req.len());
    let mut out = req;
    out.extend(picks.iter().map(|p| pool[p]));
    out.sort_unstable();
    Ok(out)
}

/// Single-node loss and gradients.
#[derive(Debug, Clone)]
pub struct ReferenceResult<S> {
    pub loss: S,
    pub per_instance_loss: Vec<S>,
    pub logits_grad: Tensor<S>,
    /// `D×N`
    pub weight_grad: Tensor<S>,
    /// `B×D`
    pub feature_grad: Tensor<S>,
}

pub fn reference_forward_backward<S: Scalar>(
    w: &Tensor<S>,
    x: &Tensor<S>,
    labels: &SmoothedLabelSet<S>,
    tau: S,
    variant: LossVariant,
) -> Result<ReferenceResult<S>> {
    let cache = cosine_logits(w, x, tau)?;
    let out = smoothed_softmax_loss(&cache.logits, labels, variant)?;
    let (weight_grad, feature_grad) = cosine_logits_backward(w, x, &cache, &out.logits_grad)?;
    Ok(ReferenceResult {
        loss: out.loss,
        per_instance_loss: out.per_instance_loss,
        logits_grad: out.logits_grad,
        weight_grad,
        feature_grad,
    })
}

/// Reference evaluation with the softmax restricted to `classes` (sorted).
/// Weight gradients of excluded classes are zero.
pub fn reference_restricted<S: Scalar>(
    w: &Tensor<S>,
    x: &Tensor<S>,
    labels: &SmoothedLabelSet<S>,
    tau: S,
    variant: LossVariant,
    classes: &[usize],
) -> Result<ReferenceResult<S>> {
    let n = w.cols();
    let mut map = vec![None; n];
    for (new, &old) in classes.iter().enumerate() {
        map[old] = Some(new);
    }
    let sub_labels = labels.remap(&map, classes.len())?;
    let sub = reference_forward_backward(&w.select_cols(classes), x, &sub_labels, tau, variant)?;
    let mut weight_grad = Tensor::zeros(w.dims());
    for (new, &old) in classes.iter().enumerate() {
        for d in 0..w.rows() {
            weight_grad.set(d, old, sub.weight_grad.get(d, new));
        }
    }
    Ok(ReferenceResult { weight_grad, ..sub })
}

/// Result of one distributed forward/backward pass.
#[derive(Debug, Clone)]
pub struct DistLossResult<S> {
    pub loss: S,
    pub per_instance_loss: Vec<S>,
    /// Summed feature gradients for the whole batch (`B×D`), identical on all ranks.
    pub feature_grads: Vec<Tensor<S>>,
    /// Per-rank gradients of the local shard (`D × shard width`).
    pub weight_grads: Vec<Tensor<S>>,
    /// Collective traffic of this forward + backward pass.
    pub comm: CommStats,
}

struct RankState<S> {
    features: Tensor<S>,
    /// Local column indices taking part in the softmax; `None` = all.
    active: Option<Vec<usize>>,
    cache: CosineLogits<S>,
}

struct ForwardState<S> {
    ranks: Vec<RankState<S>>,
    labels: SmoothedLabelSet<S>,
    row_max: Vec<S>,
    denom: Vec<S>,
    numer: Vec<S>,
    mass: Vec<S>,
    loss: S,
    per_instance: Vec<S>,
    stats_before: CommStats,
}

/// Per-rank loss outputs of a forward pass.
#[derive(Debug, Clone)]
pub struct DhpForward<S> {
    /// Loss as seen by each rank.
    pub losses: Vec<S>,
    pub per_instance_loss: Vec<S>,
}

/// The classifier shards plus the bookkeeping between forward and backward.
pub struct DhpClassifier<S> {
    plan: ShardPlan,
    shards: Vec<WeightShard<S>>,
    tau: S,
    variant: LossVariant,
    pending: Option<ForwardState<S>>,
}

impl<S: Scalar> DhpClassifier<S> {
    pub fn new(plan: ShardPlan, shards: Vec<WeightShard<S>>, tau: S, variant: LossVariant) -> Result<Self> {
        if shards.len() != plan.world {
            return Err(Error::Shape(format!("{} shards for {} workers", shards.len(), plan.world)));
        }
        for (rank, (s, r)) in shards.iter().zip(&plan.ranges).enumerate() {
            if s.rank != rank || s.range != *r {
                return Err(Error::Shape(format!("shard {rank} covers {:?}, plan says {r:?}", s.range)));
            }
        }
        if !(tau > S::zero()) {
            return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
        }
        Ok(DhpClassifier { plan, shards, tau, variant, pending: None })
    }

    pub fn plan(&self) -> &ShardPlan {
        &self.plan
    }

    pub fn shards(&self) -> &[WeightShard<S>] {
        &self.shards
    }

    pub fn shards_mut(&mut self) -> &mut [WeightShard<S>] {
        &mut self.shards
    }

    pub fn into_shards(self) -> Vec<WeightShard<S>> {
        self.shards
    }

    pub fn tau(&self) -> S {
        self.tau
    }

    pub fn variant(&self) -> LossVariant {
        self.variant
    }

    pub fn embed_dim(&self) -> usize {
        self.shards[0].embed_dim()
    }

    /// Distributed forward pass over per-rank feature blocks. `mask`, when
    /// given, restricts the softmax to a sorted subset of global classes.
    pub fn forward(
        &mut self,
        group: &mut WorkerGroup,
        local_features: &[Tensor<S>],
        labels: &SmoothedLabelSet<S>,
        mask: Option<&[usize]>,
    ) -> Result<DhpForward<S>> {
        let world = self.plan.world;
        if group.world() != world {
            return Err(Error::Shape(format!("group has {} workers, plan has {world}", group.world())));
        }
        if local_features.len() != world {
            return Err(Error::Shape(format!("{} feature blocks for {world} workers", local_features.len())));
        }
        let stats_before = group.stats().clone();
        let batch: usize = local_features.iter().map(|f| f.dims()[0]).sum();
        if batch == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        labels.validate(batch, self.plan.n_classes)?;
        let active = self.local_masks(mask, labels)?;

        // step 2
        let gathered = group.all_gather(local_features)?;

        // step 3 + local maxima
        let mut ranks = Vec::with_capacity(world);
        let mut local_max = Vec::with_capacity(world);
        for (rank, features) in gathered.into_iter().enumerate() {
            let shard = &self.shards[rank];
            let cache = match &active[rank] {
                None => cosine_logits(&shard.weights, &features, self.tau)?,
                Some(cols) => cosine_logits(&shard.weights.select_cols(cols), &features, self.tau)?,
            };
            let maxima: Vec<S> = (0..batch)
                .map(|i| cache.logits.row(i).iter().copied().fold(S::neg_infinity(), S::max))
                .collect();
            local_max.push(Tensor::new(vec![batch], maxima)?);
            ranks.push(RankState { features, active: active[rank].clone(), cache });
        }
        let row_max = group.all_reduce(&local_max, ReduceOp::Max)?.swap_remove(0).into_data();

        // step 4
        let mut local_denom = Vec::with_capacity(world);
        for rs in &ranks {
            let sums: Vec<S> = (0..batch)
                .map(|i| {
                    let mut z = S::zero();
                    for &l in rs.cache.logits.row(i) {
                        z += (l - row_max[i]).exp();
                    }
                    z
                })
                .collect();
            local_denom.push(Tensor::new(vec![batch], sums)?);
        }
        let denom = group.all_reduce(&local_denom, ReduceOp::Sum)?.swap_remove(0).into_data();

        // step 5
        let mut local_numer = Vec::with_capacity(world);
        for (rank, rs) in ranks.iter().enumerate() {
            let range = &self.shards[rank].range;
            let sums: Vec<S> = (0..batch)
                .map(|i| {
                    let mut a = S::zero();
                    for &(j, y) in labels.row(i) {
                        if range.contains(&j) {
                            let col = local_column(&rs.active, j - range.start);
                            a += numerator_term(self.variant, rs.cache.logits.get(i, col) - row_max[i], y);
                        }
                    }
                    a
                })
                .collect();
            local_numer.push(Tensor::new(vec![batch], sums)?);
        }
        let numer = group.all_reduce(&local_numer, ReduceOp::Sum)?.swap_remove(0).into_data();

        let inv_b = S::one() / S::cast(batch as f64);
        let mut mass = Vec::with_capacity(batch);
        let mut per_instance = Vec::with_capacity(batch);
        let mut total = S::zero();
        for i in 0..batch {
            let mut m = S::zero();
            for &(_, y) in labels.row(i) {
                m += y;
            }
            check_numerator(self.variant, i, numer[i])?;
            let li = row_loss(self.variant, denom[i], numer[i], m);
            per_instance.push(li);
            total += li;
            mass.push(m);
        }
        let loss = total * inv_b;
        if !loss.is_finite() {
            return Err(Error::NonFinite("distributed softmax loss".into()));
        }
        self.pending = Some(ForwardState {
            ranks,
            labels: labels.clone(),
            row_max,
            denom,
            numer,
            mass,
            loss,
            per_instance: per_instance.clone(),
            stats_before,
        });
        Ok(DhpForward { losses: vec![loss; world], per_instance_loss: per_instance })
    }

    /// Distributed backward pass for the most recent [`Self::forward`].
    pub fn backward(&mut self, group: &mut WorkerGroup) -> Result<DistLossResult<S>> {
        let state = self
            .pending
            .take()
            .ok_or_else(|| Error::State("backward called without a preceding forward".into()))?;
        let batch = state.labels.len();
        let inv_b = S::one() / S::cast(batch as f64);

        let mut partial_x = Vec::with_capacity(self.plan.world);
        let mut weight_grads = Vec::with_capacity(self.plan.world);
        for (rank, rs) in state.ranks.iter().enumerate() {
            let shard = &self.shards[rank];
            let range = &shard.range;
            let width = rs.cache.logits.cols();
            let mut g = Tensor::zeros(&[batch, width]);
            for i in 0..batch {
                let (m, z, a, mass) = (state.row_max[i], state.denom[i], state.numer[i], state.mass[i]);
                let logits = rs.cache.logits.row(i);
                let grow = g.row_mut(i);
                for (gj, &l) in grow.iter_mut().zip(logits) {
                    *gj = row_grad(self.variant, l - m, S::zero(), z, a, mass) * inv_b;
                }
                for &(j, y) in state.labels.row(i) {
                    if range.contains(&j) {
                        let col = local_column(&rs.active, j - range.start);
                        grow[col] = row_grad(self.variant, logits[col] - m, y, z, a, mass) * inv_b;
                    }
                }
            }
            let (gw, gx) = match &rs.active {
                None => cosine_logits_backward(&shard.weights, &rs.features, &rs.cache, &g)?,
                Some(cols) => {
                    let sub = shard.weights.select_cols(cols);
                    let (gw_sub, gx) = cosine_logits_backward(&sub, &rs.features, &rs.cache, &g)?;
                    let mut gw = Tensor::zeros(shard.weights.dims());
                    for (k, &c) in cols.iter().enumerate() {
                        for d in 0..gw.rows() {
                            gw.set(d, c, gw_sub.get(d, k));
                        }
                    }
                    (gw, gx)
                }
            };
            partial_x.push(gx);
            weight_grads.push(gw);
        }
        // step 7
        let feature_grads = group.all_reduce(&partial_x, ReduceOp::Sum)?;
        Ok(DistLossResult {
            loss: state.loss,
            per_instance_loss: state.per_instance,
            feature_grads,
            weight_grads,
            comm: group.stats().delta_since(&state.stats_before),
        })
    }

    /// Forward followed immediately by backward.
    pub fn forward_backward(
        &mut self,
        group: &mut WorkerGroup,
        local_features: &[Tensor<S>],
        labels: &SmoothedLabelSet<S>,
        mask: Option<&[usize]>,
    ) -> Result<DistLossResult<S>> {
        self.forward(group, local_features, labels, mask)?;
        self.backward(group)
    }

    fn local_masks(&self, mask: Option<&[usize]>, labels: &SmoothedLabelSet<S>) -> Result<Vec<Option<Vec<usize>>>> {
        let Some(mask) = mask else {
            return Ok(vec![None; self.plan.world]);
        };
        if mask.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument("class mask must be strictly ascending".into()));
        }
        if let Some(&bad) = mask.iter().find(|&&c| c >= self.plan.n_classes) {
            return Err(Error::InvalidArgument(format!("masked class {bad} out of range")));
        }
        for (i, row) in labels.rows().iter().enumerate() {
            if let Some(&(j, _)) = row.iter().find(|(j, _)| mask.binary_search(j).is_err()) {
                return Err(Error::InvalidLabel { row: i, reason: format!("class {j} is outside the class mask") });
            }
        }
        Ok(self
            .plan
            .ranges
            .iter()
            .map(|r| Some(mask.iter().filter(|c| r.contains(c)).map(|c| c - r.start).collect()))
            .collect())
    }
}

/// Column of local class `local` within the (possibly masked) logit block.
fn local_column(active: &Option<Vec<usize>>, local: usize) -> usize {
    match active {
        None => local,
        Some(cols) => cols.binary_search(&local).expect("label classes are validated against the mask"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::smoothing::{build_labels, compute_hard_classes};
    use crate::tensor::max_relative_error;

    fn random(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
        let mut rng = stream_rng(seed, Stream::Evaluation, &[rows as u64, cols as u64]);
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
    }

    struct Problem {
        w: Tensor<f64>,
        x: Tensor<f64>,
        labels: SmoothedLabelSet<f64>,
    }

    fn problem(n: usize, b: usize, d: usize, smoothed: bool, seed: u64) -> Problem {
        let w = random(d, n, seed);
        let x = random(b, d, seed + 1);
        let mut rng = stream_rng(seed, Stream::Evaluation, &[99]);
        let ids: Vec<usize> = (0..b).map(|_| rng.random_range(0..n)).collect();
        let labels = if smoothed {
            let table = compute_hard_classes(&w, 5, 16, 0).unwrap();
            build_labels(&ids, Some(&table), 0.2, 5, n, 0).unwrap()
        } else {
            SmoothedLabelSet::one_hot(&ids, n)
        };
        Problem { w, x, labels }
    }

    fn run_dhp(p: &Problem, world: usize, mask: Option<&[usize]>) -> DistLossResult<f64> {
        let plan = make_plan(p.w.cols(), world).unwrap();
        let shards = shard_weights(&p.w, &plan).unwrap();
        let mut clf = DhpClassifier::new(plan, shards, 0.15, LossVariant::Printed).unwrap();
        let mut group = WorkerGroup::new(world).unwrap();
        let blocks: Vec<Tensor<f64>> =
            split_evenly(p.x.rows(), world).into_iter().map(|r| p.x.slice_rows(r)).collect();
        clf.forward_backward(&mut group, &blocks, &p.labels, mask).unwrap()
    }

    #[test]
    fn plan_examples() {
        let p = make_plan(10, 4).unwrap();
        assert_eq!(p.sizes(), vec![3, 3, 2, 2]);
        assert_eq!(p.ranges, vec![0..3, 3..6, 6..8, 8..10]);
        assert_eq!(make_plan(8, 1).unwrap().ranges, vec![0..8]);
        assert!(make_plan(1_280_000, 64).unwrap().sizes().iter().all(|&s| s == 20_000));
        assert!(make_plan(3, 4).is_err());
        assert_eq!(p.locate(7), Some((2, 1)));
    }

    #[test]
    fn single_worker_is_bit_identical_to_reference() {
        for smoothed in [false, true] {
            let p = problem(31, 6, 8, smoothed, 5);
            let reference = reference_forward_backward(&p.w, &p.x, &p.labels, 0.15, LossVariant::Printed).unwrap();
            let dist = run_dhp(&p, 1, None);
            assert_eq!(dist.loss.to_bits(), reference.loss.to_bits());
            assert!(dist.feature_grads[0].bit_eq(&reference.feature_grad));
            assert!(dist.weight_grads[0].bit_eq(&reference.weight_grad));
        }
    }

    #[test]
    fn sharded_matches_reference() {
        for smoothed in [false, true] {
            let p = problem(97, 12, 16, smoothed, 11);
            let reference = reference_forward_backward(&p.w, &p.x, &p.labels, 0.15, LossVariant::Printed).unwrap();
            for world in [2, 3, 4, 8] {
                let dist = run_dhp(&p, world, None);
                assert!((dist.loss - reference.loss).abs() < 1e-10);
                let gw = Tensor::concat_cols(&dist.weight_grads).unwrap();
                assert!(max_relative_error(gw.data(), reference.weight_grad.data(), 1e-12) < 1e-9);
                for fg in &dist.feature_grads {
                    assert!(fg.bit_eq(&dist.feature_grads[0]));
                    assert!(max_relative_error(fg.data(), reference.feature_grad.data(), 1e-12) < 1e-9);
                }
                assert!(dist.weight_grads.iter().all(|g| !g.is_all_zero()));
            }
        }
    }

    #[test]
    fn backward_without_forward_fails() {
        let p = problem(10, 4, 3, false, 1);
        let plan = make_plan(10, 2).unwrap();
        let shards = shard_weights(&p.w, &plan).unwrap();
        let mut clf = DhpClassifier::new(plan, shards, 0.5, LossVariant::Printed).unwrap();
        let mut group = WorkerGroup::new(2).unwrap();
        assert!(matches!(clf.backward(&mut group), Err(Error::State(_))));
    }

    #[test]
    fn rejects_bad_labels_and_empty_batches() {
        let p = problem(10, 4, 3, false, 2);
        let plan = make_plan(10, 2).unwrap();
        let shards = shard_weights(&p.w, &plan).unwrap();
        let mut clf = DhpClassifier::new(plan, shards, 0.5, LossVariant::Printed).unwrap();
        let mut group = WorkerGroup::new(2).unwrap();
        let blocks = vec![p.x.slice_rows(0..2), p.x.slice_rows(2..4)];
        let bad = SmoothedLabelSet::one_hot(&[0, 1, 2, 10], 10);
        assert!(matches!(clf.forward(&mut group, &blocks, &bad, None), Err(Error::InvalidLabel { row: 3, .. })));
        let empty = vec![Tensor::zeros(&[0, 3]), Tensor::zeros(&[0, 3])];
        let none = SmoothedLabelSet::one_hot(&[], 10);
        assert!(clf.forward(&mut group, &empty, &none, None).is_err());
    }

    #[test]
    fn reference_symmetric_two_class() {
        let w = Tensor::<f64>::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let x = Tensor::<f64>::matrix(1, 2, vec![1.0, 1.0]).unwrap();
        let labels = SmoothedLabelSet::one_hot(&[0], 2);
        let r = reference_forward_backward(&w, &x, &labels, 0.15, LossVariant::Printed).unwrap();
        assert!((r.loss - 2f64.ln()).abs() < 1e-15);
        let s: f64 = r.logits_grad.row(0).iter().sum();
        assert!(s.abs() < 1e-15);
    }

    #[test]
    fn full_mask_equals_unmasked() {
        let p = problem(40, 8, 6, true, 3);
        let all: Vec<usize> = (0..40).collect();
        for world in [1, 3] {
            let a = run_dhp(&p, world, None);
            let b = run_dhp(&p, world, Some(&all));
            assert_eq!(a.loss.to_bits(), b.loss.to_bits());
            for (x, y) in a.weight_grads.iter().zip(&b.weight_grads) {
                assert!(x.bit_eq(y));
            }
        }
    }

    #[test]
    fn masked_matches_restricted_reference() {
        let p = problem(60, 8, 6, false, 4);
        let mask = sampled_class_mask(&p.labels.support(), p.labels.support().len(), 60, 1, &[]).unwrap();
        let reference =
            reference_restricted(&p.w, &p.x, &p.labels, 0.15, LossVariant::Printed, &mask).unwrap();
        let dist = run_dhp(&p, 4, Some(&mask));
        assert!((dist.loss - reference.loss).abs() < 1e-12);
        let gw = Tensor::concat_cols(&dist.weight_grads).unwrap();
        assert!(max_relative_error(gw.data(), reference.weight_grad.data(), 1e-12) < 1e-9);
    }

    #[test]
    fn class_mask_sampling() {
        let m = sampled_class_mask(&[3, 7, 3], 6, 20, 9, &[1]).unwrap();
        assert_eq!(m.len(), 6);
        assert!(m.contains(&3) && m.contains(&7));
        assert!(m.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(m, sampled_class_mask(&[3, 7], 6, 20, 9, &[1]).unwrap());
        assert_eq!(sampled_class_mask(&[1], 50, 20, 9, &[]).unwrap(), (0..20).collect::<Vec<_>>());
        assert!(sampled_class_mask(&[1, 2, 3], 2, 20, 9, &[]).is_err());
    }
}
