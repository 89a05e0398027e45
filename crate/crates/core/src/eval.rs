//! Representation quality: linear probe, kNN, instance accuracy and the
//! instance-vs-semantic correlation report.

use std::cmp::Ordering;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{InstanceDataset, SemanticLabels};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::math::{cosine_logits, pairwise_cosines};
use crate::rng::{stream_rng, Stream};
use crate::sharded::WeightShard;
use crate::tensor::{Scalar, Tensor};

/// Which encoder output to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Representation {
    /// Projection head output.
    #[default]
    Embedding,
    /// Backbone output, before the head.
    Backbone,
}

const EMBED_CHUNK: usize = 1024;

/// EVAL-mode features for every instance, row `i` = instance `i`.
pub fn embed_dataset<S: Scalar>(enc: &Encoder<S>, data: &InstanceDataset<S>, rep: Representation) -> Result<Tensor<S>> {
    let n = data.len();
    let mut parts = Vec::with_capacity(n.div_ceil(EMBED_CHUNK));
    for start in (0..n).step_by(EMBED_CHUNK) {
        let x = data.features().slice_rows(start..(start + EMBED_CHUNK).min(n));
        parts.push(match rep {
            Representation::Embedding => enc.forward_eval(&x)?,
            Representation::Backbone => enc.backbone_eval(&x)?,
        });
    }
    if parts.is_empty() {
        return Err(Error::InvalidArgument("cannot embed an empty dataset".into()));
    }
    Tensor::concat_rows(&parts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { epochs: 60, lr: 0.5, momentum: 0.9, weight_decay: 0.0, batch_size: 256, train_fraction: 0.8, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub top1: f64,
    /// Held-out accuracy per class; `None` for classes absent from the split.
    pub per_class: Vec<Option<f64>>,
    pub train_top1: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub epochs: usize,
    pub lr: f64,
}

/// Seeded `train_fraction` / rest split of `0..n`.
pub fn holdout_split(n: usize, train_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream_rng(seed, Stream::Split, &[]));
    let n_train = ((n as f64 * train_fraction).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    let test = idx.split_off(n_train);
    (idx, test)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Multinomial logistic regression on frozen, standardized features, trained
/// by minibatch SGD with momentum and a cosine learning-rate decay.
pub fn linear_probe<S: Scalar>(emb: &Tensor<S>, labels: &SemanticLabels, cfg: &ProbeConfig) -> Result<ProbeResult> {
    let (n, d) = emb.expect_matrix("probe features")?;
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} embeddings", labels.len())));
    }
    let c = labels.num_classes();
    let present = {
        let mut seen = vec![false; c];
        labels.as_slice().iter().for_each(|&l| seen[l] = true);
        seen.iter().filter(|&&s| s).count()
    };
    if present < 2 {
        return Err(Error::InvalidArgument("linear probe needs at least two classes".into()));
    }
    if n < 2 || cfg.batch_size == 0 || !(cfg.train_fraction > 0.0 && cfg.train_fraction < 1.0) {
        return Err(Error::Config("probe needs two instances, a positive batch and a train fraction in (0, 1)".into()));
    }
    emb.ensure_finite("probe features")?;
    let x: Tensor<f64> = emb.cast();
    let y = labels.as_slice();
    let (train, test) = holdout_split(n, cfg.train_fraction, cfg.seed);

    let mut mean = vec![0.0; d];
    let mut sd = vec![0.0; d];
    for &i in &train {
        mean.iter_mut().zip(x.row(i)).for_each(|(m, &v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= train.len() as f64);
    for &i in &train {
        for (j, &v) in x.row(i).iter().enumerate() {
            sd[j] += (v - mean[j]).powi(2);
        }
    }
    sd.iter_mut().for_each(|s| *s = (*s / train.len() as f64).sqrt().max(1e-12));
    let z = |i: usize| -> Vec<f64> { x.row(i).iter().enumerate().map(|(j, &v)| (v - mean[j]) / sd[j]).collect() };

    let mut w = vec![0.0; d * c];
    let mut b = vec![0.0; c];
    let mut vw = vec![0.0; d * c];
    let mut vb = vec![0.0; c];
    let logits = |w: &[f64], b: &[f64], zi: &[f64]| -> Vec<f64> {
        (0..c).map(|k| b[k] + zi.iter().enumerate().map(|(j, &v)| v * w[j * c + k]).sum::<f64>()).collect()
    };
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total = (cfg.epochs * steps_per_epoch).max(1);
    let mut step = 0;
    let mut order = train.clone();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut stream_rng(cfg.seed, Stream::Probe, &[epoch as u64]));
        for batch in order.chunks(cfg.batch_size) {
            let lr = 0.5 * cfg.lr * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos());
            let mut gw = vec![0.0; d * c];
            let mut gb = vec![0.0; c];
            for &i in batch {
                let zi = z(i);
                let l = logits(&w, &b, &zi);
                let m = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = l.iter().map(|v| (v - m).exp()).collect();
                let s: f64 = e.iter().sum();
                for k in 0..c {
                    let g = e[k] / s - f64::from(u8::from(k == y[i]));
                    gb[k] += g;
                    for j in 0..d {
                        gw[j * c + k] += g * zi[j];
                    }
                }
            }
            let inv = 1.0 / batch.len() as f64;
            for (k, (v, p)) in vw.iter_mut().zip(w.iter_mut()).enumerate() {
                *v = cfg.momentum * *v + gw[k] * inv + cfg.weight_decay * *p;
                *p -= lr * *v;
            }
            for (k, (v, p)) in vb.iter_mut().zip(b.iter_mut()).enumerate() {
                *v = cfg.momentum * *v + gb[k] * inv;
                *p -= lr * *v;
            }
            step += 1;
        }
    }
    let predict = |i: usize| argmax(&logits(&w, &b, &z(i)));
    let mut hits = vec![0usize; c];
    let mut counts = vec![0usize; c];
    for &i in &test {
        counts[y[i]] += 1;
        if predict(i) == y[i] {
            hits[y[i]] += 1;
        }
    }
    let correct_train = train.iter().filter(|&&i| predict(i) == y[i]).count();
    let top1 = hits.iter().sum::<usize>() as f64 / test.len() as f64;
    if !top1.is_finite() {
        return Err(Error::NonFinite("probe accuracy".into()));
    }
    Ok(ProbeResult {
        top1,
        per_class: hits.iter().zip(&counts).map(|(&h, &n)| (n > 0).then(|| h as f64 / n as f64)).collect(),
        train_top1: correct_train as f64 / train.len() as f64,
        n_train: train.len(),
        n_test: test.len(),
        epochs: cfg.epochs,
        lr: cfg.lr,
    })
}

/// Indices of the `k` rows most cosine-similar to `query`, excluding itself.
/// Ties go to the lower index.
fn nearest(cos_row: &[f64], query: usize, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..cos_row.len()).filter(|&j| j != query).collect();
    let cmp = |&a: &usize, &b: &usize| cos_row[b].partial_cmp(&cos_row[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b));
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, cmp);
        idx.truncate(k);
    }
    idx.sort_by(cmp);
    idx
}

/// Leave-one-out kNN by cosine with majority vote; vote ties go to the
/// lowest class index.
pub fn knn_eval<S: Scalar>(emb: &Tensor<S>, labels: &SemanticLabels, k: usize) -> Result<f64> {
    let (n, _) = emb.expect_matrix("knn features")?;
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} embeddings", labels.len())));
    }
    if k == 0 || k >= n {
        return Err(Error::InvalidArgument(format!("k must lie in [1, {}), got {k}", n)));
    }
    let cos: Tensor<f64> = pairwise_cosines(emb, emb)?.cast();
    let y = labels.as_slice();
    let mut correct = 0;
    for i in 0..n {
        let mut votes = vec![0usize; labels.num_classes()];
        for j in nearest(cos.row(i), i, k) {
            votes[y[j]] += 1;
        }
        let mut best = 0;
        for (cl, &v) in votes.iter().enumerate() {
            if v > votes[best] {
                best = cl;
            }
        }
        correct += usize::from(best == y[i]);
    }
    Ok(correct as f64 / n as f64)
}

/// Top-1 retrieval: fraction of instances whose nearest other instance
/// shares their semantic label.
pub fn nearest_neighbor_accuracy<S: Scalar>(emb: &Tensor<S>, labels: &SemanticLabels) -> Result<f64> {
    if emb.rows() < 2 {
        return Err(Error::InvalidArgument("retrieval needs at least two instances".into()));
    }
    knn_eval(emb, labels, 1)
}

/// Fraction of (optionally sampled) instances whose argmax class under the
/// sharded cosine classifier is their own ID. EVAL-mode, un-augmented.
pub fn instance_accuracy<S: Scalar>(
    enc: &Encoder<S>,
    shards: &[WeightShard<S>],
    data: &InstanceDataset<S>,
    sample: Option<(usize, u64)>,
) -> Result<f64> {
    let n_classes: usize = shards.iter().map(|s| s.range.len()).sum();
    if n_classes != data.len() {
        return Err(Error::Shape(format!("{n_classes} classes for {} instances", data.len())));
    }
    let ids: Vec<usize> = match sample {
        Some((m, seed)) if m < data.len() => {
            let mut ids: Vec<usize> = (0..data.len()).collect();
            ids.shuffle(&mut stream_rng(seed, Stream::Evaluation, &[]));
            ids.truncate(m);
            ids.sort_unstable();
            ids
        }
        _ => (0..data.len()).collect(),
    };
    if ids.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation sample".into()));
    }
    let x = enc.forward_eval(&data.features().select_rows(&ids))?;
    // per shard (best value, global index), merged in rank order
    let mut best: Vec<(S, usize)> = vec![(S::neg_infinity(), usize::MAX); ids.len()];
    for shard in shards {
        let cos = cosine_logits(&shard.weights, &x, S::one())?.cosines;
        for (i, slot) in best.iter_mut().enumerate() {
            for (j, &v) in cos.row(i).iter().enumerate() {
                if v > slot.0 {
                    *slot = (v, shard.range.start + j);
                }
            }
        }
    }
    let hits = ids.iter().zip(&best).filter(|(&id, b)| b.1 == id).count();
    Ok(hits as f64 / ids.len() as f64)
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties. A constant series
/// has no ranking, and the coefficient is reported as 0.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::InvalidArgument("spearman needs two equal series of length ≥ 2".into()));
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    if va == 0.0 || vb == 0.0 {
        return Ok(0.0);
    }
    Ok((cov / (va * vb).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationPoint {
    pub checkpoint: String,
    pub epoch: usize,
    pub instance_top1: f64,
    pub semantic_top1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub points: Vec<CorrelationPoint>,
    pub spearman: f64,
}

impl CorrelationReport {
    pub fn new(points: Vec<CorrelationPoint>) -> Result<Self> {
        let a: Vec<f64> = points.iter().map(|p| p.instance_top1).collect();
        let b: Vec<f64> = points.iter().map(|p| p.semantic_top1).collect();
        let spearman = spearman(&a, &b)?;
        Ok(CorrelationReport { points, spearman })
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| Error::InvalidArgument(format!("csv: {e}"));
        w.write_record(["checkpoint", "epoch", "instance_top1", "semantic_top1"]).map_err(io)?;
        for p in &self.points {
            w.write_record([p.checkpoint.clone(), p.epoch.to_string(), p.instance_top1.to_string(), p.semantic_top1.to_string()])
                .map_err(io)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic;
    use crate::math::cosine_similarity;

    fn labels(v: Vec<usize>, c: usize) -> SemanticLabels {
        SemanticLabels::new(v, c).unwrap()
    }

    #[test]
    fn separable_two_class_probe_is_perfect() {
        let rows: Vec<Vec<f64>> = (0..40).map(|i| vec![if i % 2 == 0 { 2.0 } else { -2.0 }, (i as f64 * 0.37).sin()]).collect();
        let emb = Tensor::from_rows(&rows).unwrap();
        let l = labels((0..40).map(|i| i % 2).collect(), 2);
        let r = linear_probe(&emb, &l, &ProbeConfig::default()).unwrap();
        assert_eq!(r.top1, 1.0);
        assert!(linear_probe(&emb, &labels(vec![0; 40], 1), &ProbeConfig::default()).is_err());
    }

    #[test]
    fn shuffled_labels_probe_at_chance() {
        let (x, _) = generate_synthetic::<f64>(1, 1000, 8, 1.0, 3).unwrap().split();
        let c = 4;
        let mut y: Vec<usize> = (0..1000).map(|i| i % c).collect();
        y.shuffle(&mut stream_rng(1, Stream::Evaluation, &[]));
        let cfg = ProbeConfig { epochs: 20, ..Default::default() };
        let r = linear_probe(x.features(), &labels(y, c), &cfg).unwrap();
        let p = 1.0 / c as f64;
        let sigma = (p * (1.0 - p) / r.n_test as f64).sqrt();
        assert!((r.top1 - p).abs() < 3.0 * sigma, "top1 {}", r.top1);
    }

    #[test]
    fn knn_duplicates_and_majority() {
        let base = Tensor::<f64>::from_rows(&[vec![1.0, 0.1], vec![0.2, 1.0], vec![-1.0, 0.3]]).unwrap();
        let emb = Tensor::concat_rows(&[base.clone(), base]).unwrap();
        let l = labels(vec![0, 1, 2, 0, 1, 2], 3);
        assert_eq!(knn_eval(&emb, &l, 1).unwrap(), 1.0);
        assert!(knn_eval(&emb, &l, 6).is_err());
        assert!(knn_eval(&emb, &l, 0).is_err());

        // k = N−1: every vote sees all other rows
        let l = labels(vec![1, 1, 1, 0, 0, 2], 3);
        let acc = knn_eval(&emb, &l, 5).unwrap();
        // leaving out a 1 leaves 1,1,0,0,2 → tie 1 vs 0 → 0; else 1 wins
        assert_eq!(acc, 0.0);
    }

    #[test]
    fn knn_matches_brute_force() {
        let (x, l) = generate_synthetic::<f64>(5, 10, 6, 0.8, 4).unwrap().split();
        let emb = x.features();
        for k in [1, 3, 7] {
            let mut correct = 0;
            for i in 0..50 {
                let mut sims: Vec<(f64, usize)> =
                    (0..50).filter(|&j| j != i).map(|j| (cosine_similarity(emb.row(i), emb.row(j)).unwrap(), j)).collect();
                sims.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
                let mut votes = [0; 5];
                for &(_, j) in &sims[..k] {
                    votes[l.as_slice()[j]] += 1;
                }
                let max = *votes.iter().max().unwrap();
                let pred = votes.iter().position(|&v| v == max).unwrap();
                correct += usize::from(pred == l.as_slice()[i]);
            }
            assert_eq!(knn_eval(emb, &l, k).unwrap(), correct as f64 / 50.0);
        }
    }

    #[test]
    fn spearman_basics() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap(), 1.0);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
        assert_eq!(spearman(&[1.0, 1.0, 1.0], &[3.0, 2.0, 1.0]).unwrap(), 0.0);
        assert!(spearman(&[1.0], &[1.0]).is_err());
        let rep = CorrelationReport::new(vec![
            CorrelationPoint { checkpoint: "a".into(), epoch: 1, instance_top1: 0.1, semantic_top1: 0.2 },
            CorrelationPoint { checkpoint: "b".into(), epoch: 2, instance_top1: 0.3, semantic_top1: 0.5 },
        ])
        .unwrap();
        assert_eq!(rep.to_csv().unwrap().lines().count(), 3);
    }

    fn random_orthogonal(d: usize, seed: u64) -> Tensor<f64> {
        use rand::Rng;
        let mut rng = stream_rng(seed, Stream::Similarity, &[]);
        let mut q: Vec<Vec<f64>> = Vec::new();
        while q.len() < d {
            let mut v: Vec<f64> = (0..d).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
            for u in &q {
                let p: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
            }
            let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            q.push(v.into_iter().map(|a| a / n).collect());
        }
        Tensor::from_rows(&q).unwrap()
    }

    proptest::proptest! {
        #[test]
        fn knn_is_rotation_invariant(seed in 0u64..200, k in 1usize..6) {
            let (x, l) = generate_synthetic::<f64>(3, 10, 6, 0.7, seed).unwrap().split();
            let emb = x.features();
            let rot = emb.matmul(&random_orthogonal(6, seed)).unwrap();
            proptest::prop_assert_eq!(knn_eval(emb, &l, k).unwrap(), knn_eval(&rot, &l, k).unwrap());
        }
    }
}
