//! Hardest-negative discovery and smoothed label sets.
//!
//! Each instance is represented by its own classifier weight column. Once per
//! epoch the `K` columns most cosine-similar to column `i` (excluding `i`)
//! become its hard negatives `H_i`, and the label row for instance `i` puts
//! `1 − α` on `i` and `α/K` on each member of `H_i`.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::cosine_from_parts;
use crate::tensor::{dot, sq_norm, Scalar, Tensor};

/// Sparse label row: `(class, mass)` pairs sorted by class.
pub type LabelRow<S> = Vec<(usize, S)>;

/// Per-row sparse label distributions over `n_classes` classes.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothedLabelSet<S> {
    rows: Vec<LabelRow<S>>,
    n_classes: usize,
    alpha: f64,
    k: usize,
}

const LABEL_SUM_TOLERANCE: f64 = 1e-6;

impl<S: Scalar> SmoothedLabelSet<S> {
    pub fn one_hot(ids: &[usize], n_classes: usize) -> Self {
        SmoothedLabelSet {
            rows: ids.iter().map(|&i| vec![(i, S::one())]).collect(),
            n_classes,
            alpha: 0.0,
            k: 0,
        }
    }

    /// Builds a label set from explicit rows, validating each one.
    pub fn from_rows(rows: Vec<LabelRow<S>>, n_classes: usize, alpha: f64, k: usize) -> Result<Self> {
        let set = SmoothedLabelSet { rows, n_classes, alpha, k };
        set.validate(set.rows.len(), n_classes)?;
        Ok(set)
    }

    /// No validation; consumers validate before use.
    pub fn from_rows_unchecked(rows: Vec<LabelRow<S>>, n_classes: usize) -> Self {
        SmoothedLabelSet { rows, n_classes, alpha: f64::NAN, k: 0 }
    }

    pub fn rows(&self) -> &[LabelRow<S>] {
        &self.rows
    }

    pub fn row(&self, i: usize) -> &[(usize, S)] {
        &self.rows[i]
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Row `i`'s positive class (largest mass, lowest index on ties).
    pub fn positive(&self, i: usize) -> usize {
        let mut best = self.rows[i][0];
        for &(j, y) in &self.rows[i][1..] {
            if y > best.1 {
                best = (j, y);
            }
        }
        best.0
    }

    /// Repeats every row `times` times consecutively (one copy per view).
    pub fn repeat_rows(&self, times: usize) -> Self {
        let mut rows = Vec::with_capacity(self.rows.len() * times);
        for r in &self.rows {
            for _ in 0..times {
                rows.push(r.clone());
            }
        }
        SmoothedLabelSet { rows, n_classes: self.n_classes, alpha: self.alpha, k: self.k }
    }

    /// All classes carrying label mass, sorted and deduplicated.
    pub fn support(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self.rows.iter().flat_map(|r| r.iter().map(|e| e.0)).collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    /// Re-indexes classes through `map` (old → new) into a domain of `n` classes.
    pub fn remap(&self, map: &[Option<usize>], n: usize) -> Result<Self> {
        let mut rows = Vec::with_capacity(self.rows.len());
        for (i, r) in self.rows.iter().enumerate() {
            let mut out = Vec::with_capacity(r.len());
            for &(j, y) in r {
                match map.get(j).copied().flatten() {
                    Some(nj) => out.push((nj, y)),
                    None => {
                        return Err(Error::InvalidLabel {
                            row: i,
                            reason: format!("class {j} is outside the restricted domain"),
                        })
                    }
                }
            }
            out.sort_by_key(|e| e.0);
            rows.push(out);
        }
        Ok(SmoothedLabelSet { rows, n_classes: n, alpha: self.alpha, k: self.k })
    }

    /// Checks row count, class range, ordering, nonnegativity and unit mass.
    pub fn validate(&self, batch: usize, n_classes: usize) -> Result<()> {
        if self.rows.len() != batch {
            return Err(Error::Shape(format!("{} label rows for a batch of {batch}", self.rows.len())));
        }
        if self.n_classes != n_classes {
            return Err(Error::Shape(format!(
                "labels span {} classes, logits have {n_classes}",
                self.n_classes
            )));
        }
        for (i, r) in self.rows.iter().enumerate() {
            if r.is_empty() {
                return Err(Error::InvalidLabel { row: i, reason: "empty row".into() });
            }
            let mut sum = 0.0;
            let mut prev: Option<usize> = None;
            for &(j, y) in r {
                if j >= n_classes {
                    return Err(Error::InvalidLabel {
                        row: i,
                        reason: format!("class {j} out of range for {n_classes} classes"),
                    });
                }
                if prev.is_some_and(|p| p >= j) {
                    return Err(Error::InvalidLabel { row: i, reason: "classes not strictly ascending".into() });
                }
                prev = Some(j);
                let y = y.as_f64();
                if !(y >= 0.0) || !y.is_finite() {
                    return Err(Error::InvalidLabel { row: i, reason: format!("mass {y} on class {j}") });
                }
                sum += y;
            }
            if (sum - 1.0).abs() > LABEL_SUM_TOLERANCE {
                return Err(Error::InvalidLabel { row: i, reason: format!("mass sums to {sum}") });
            }
        }
        Ok(())
    }
}

/// Per-instance hard negatives for one epoch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HardClassTable {
    pub epoch: usize,
    /// Effective `K` after clamping to `N − 1`.
    pub k: usize,
    /// `hard[i]` lists classes by descending `cos(w_i, w_j)`, ties by ascending `j`.
    pub hard: Vec<Vec<usize>>,
}

impl HardClassTable {
    pub fn n_classes(&self) -> usize {
        self.hard.len()
    }
}

/// Orders `(similarity, index)` candidates: higher similarity first, then
/// lower index.
fn by_hardness<S: Scalar>(a: &(S, usize), b: &(S, usize)) -> Ordering {
    b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1))
}

/// Exact top-`k` hardest negatives among the columns of `w` (`D×N`),
/// evaluated `block_size` query columns at a time.
pub fn compute_hard_classes<S: Scalar>(
    w: &Tensor<S>,
    k: usize,
    block_size: usize,
    epoch: usize,
) -> Result<HardClassTable> {
    let (_, n) = w.expect_matrix("classifier weights")?;
    if n == 0 {
        return Err(Error::InvalidArgument("no classes".into()));
    }
    let k_eff = if k >= n {
        log::warn!("K = {k} is not below N = {n}; clamping to {}", n - 1);
        n - 1
    } else {
        k
    };
    let wt = w.transpose();
    let mut norms = Vec::with_capacity(n);
    for j in 0..n {
        let s = sq_norm(wt.row(j));
        if s == S::zero() {
            return Err(Error::ZeroNorm { what: "weight column", index: j });
        }
        norms.push(s);
    }
    if k_eff == 0 {
        return Ok(HardClassTable { epoch, k: 0, hard: vec![Vec::new(); n] });
    }
    let block = block_size.max(1);
    let starts: Vec<usize> = (0..n).step_by(block).collect();
    let blocks: Vec<Vec<Vec<usize>>> = starts
        .par_iter()
        .map(|&start| {
            let end = (start + block).min(n);
            let mut out = Vec::with_capacity(end - start);
            let mut cand: Vec<(S, usize)> = Vec::with_capacity(n);
            for i in start..end {
                cand.clear();
                let wi = wt.row(i);
                for j in (0..n).filter(|&j| j != i) {
                    cand.push((cosine_from_parts(dot(wi, wt.row(j)), norms[i], norms[j]), j));
                }
                if k_eff < cand.len() {
                    cand.select_nth_unstable_by(k_eff - 1, by_hardness);
                    cand.truncate(k_eff);
                }
                cand.sort_by(by_hardness);
                out.push(cand.iter().map(|c| c.1).collect());
            }
            out
        })
        .collect();
    Ok(HardClassTable { epoch, k: k_eff, hard: blocks.into_iter().flatten().collect() })
}

/// Eq.-2-style label rows for a batch of instance IDs.
///
/// `α = 0` or `K = 0` yields exact one-hot rows and ignores `table`. When
/// fewer than `K` negatives exist, `α` is spread evenly over the available
/// ones so every row still carries unit mass.
pub fn build_labels<S: Scalar>(
    ids: &[usize],
    table: Option<&HardClassTable>,
    alpha: f64,
    k: usize,
    n_classes: usize,
    epoch: usize,
) -> Result<SmoothedLabelSet<S>> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("smoothing factor must lie in [0, 1), got {alpha}")));
    }
    if let Some(&bad) = ids.iter().find(|&&i| i >= n_classes) {
        return Err(Error::InvalidArgument(format!("instance {bad} out of range for {n_classes} classes")));
    }
    if alpha == 0.0 || k == 0 {
        return Ok(SmoothedLabelSet::one_hot(ids, n_classes));
    }
    let table = table.ok_or_else(|| Error::State("smoothed labels need a hard-class table".into()))?;
    if table.epoch != epoch {
        return Err(Error::StaleTable { table_epoch: table.epoch, epoch });
    }
    if table.n_classes() != n_classes {
        return Err(Error::Shape(format!(
            "hard-class table covers {} classes, expected {n_classes}",
            table.n_classes()
        )));
    }
    let k_eff = k.min(table.k);
    let mut rows = Vec::with_capacity(ids.len());
    for &i in ids {
        let hard = &table.hard[i][..k_eff];
        let mut row: LabelRow<S> = Vec::with_capacity(k_eff + 1);
        if hard.is_empty() {
            row.push((i, S::one()));
        } else {
            let share = S::cast(alpha / hard.len() as f64);
            row.push((i, S::cast(1.0 - alpha)));
            row.extend(hard.iter().map(|&j| (j, share)));
            row.sort_by_key(|e| e.0);
        }
        rows.push(row);
    }
    Ok(SmoothedLabelSet { rows, n_classes, alpha, k: k_eff })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn brute_force(w: &Tensor<f64>, k: usize) -> Vec<Vec<usize>> {
        let n = w.cols();
        (0..n)
            .map(|i| {
                let wi = w.column(i);
                let mut c: Vec<(f64, usize)> = (0..n)
                    .filter(|&j| j != i)
                    .map(|j| {
                        let wj = w.column(j);
                        let d: f64 = wi.iter().zip(&wj).fold(0.0, |a, (x, y)| a + x * y);
                        let ni: f64 = wi.iter().fold(0.0, |a, x| a + x * x);
                        let nj: f64 = wj.iter().fold(0.0, |a, x| a + x * x);
                        (d / (ni * nj).sqrt(), j)
                    })
                    .collect();
                c.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
                c.into_iter().take(k).map(|e| e.1).collect()
            })
            .collect()
    }

    fn random_w(d: usize, n: usize, seed: u64) -> Tensor<f64> {
        let mut rng = stream_rng(seed, Stream::Evaluation, &[]);
        Tensor::matrix(d, n, (0..d * n).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
    }

    #[test]
    fn orthonormal_columns_fall_back_to_index_order() {
        let w = Tensor::<f64>::identity(5);
        let t = compute_hard_classes(&w, 2, 2, 0).unwrap();
        assert_eq!(t.hard[0], vec![1, 2]);
        assert_eq!(t.hard[1], vec![0, 2]);
        assert_eq!(t.hard[4], vec![0, 1]);
    }

    #[test]
    fn matches_brute_force_small() {
        let w = random_w(4, 6, 3);
        let t = compute_hard_classes(&w, 3, 4, 0).unwrap();
        assert_eq!(t.hard, brute_force(&w, 3));
    }

    #[test]
    fn duplicate_columns_rank_first() {
        let mut w = random_w(4, 6, 8);
        for r in 0..4 {
            let v = w.get(r, 1);
            w.set(r, 4, v);
        }
        let t = compute_hard_classes(&w, 2, 3, 0).unwrap();
        assert_eq!(t.hard[4][0], 1);
        assert_eq!(t.hard[1][0], 4);
    }

    #[test]
    fn k_is_clamped() {
        let w = random_w(3, 4, 1);
        let t = compute_hard_classes(&w, 10, 2, 0).unwrap();
        assert_eq!(t.k, 3);
        assert!(t.hard.iter().enumerate().all(|(i, h)| h.len() == 3 && !h.contains(&i)));
    }

    #[test]
    fn eq2_substitution() {
        let table = HardClassTable { epoch: 0, k: 2, hard: vec![vec![1, 2], vec![0, 2], vec![4, 0], vec![0, 1], vec![0, 1]] };
        let labels = build_labels::<f64>(&[2], Some(&table), 0.2, 2, 5, 0).unwrap();
        let mut dense = [0.0; 5];
        for &(j, y) in labels.row(0) {
            dense[j] = y;
        }
        assert_eq!(dense, [0.1, 0.0, 0.8, 0.0, 0.1]);
    }

    #[test]
    fn alpha_zero_is_one_hot_without_table() {
        let labels = build_labels::<f64>(&[3, 1], None, 0.0, 100, 5, 7).unwrap();
        assert_eq!(labels, SmoothedLabelSet::one_hot(&[3, 1], 5));
    }

    #[test]
    fn stale_table_is_rejected() {
        let w = random_w(3, 5, 2);
        let t = compute_hard_classes(&w, 2, 2, 0).unwrap();
        assert!(matches!(
            build_labels::<f64>(&[0], Some(&t), 0.2, 2, 5, 1),
            Err(Error::StaleTable { table_epoch: 0, epoch: 1 })
        ));
    }

    #[test]
    fn short_tables_renormalize() {
        let w = random_w(3, 3, 4);
        let t = compute_hard_classes(&w, 5, 2, 0).unwrap();
        let labels = build_labels::<f64>(&[0, 1, 2], Some(&t), 0.3, 5, 3, 0).unwrap();
        for r in labels.rows() {
            assert_eq!(r.len(), 3);
            let s: f64 = r.iter().map(|e| e.1).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn repeat_and_support() {
        let l = SmoothedLabelSet::<f64>::one_hot(&[4, 2], 6).repeat_rows(2);
        assert_eq!(l.len(), 4);
        assert_eq!(l.row(1), &[(4, 1.0)]);
        assert_eq!(l.support(), vec![2, 4]);
        assert_eq!(l.positive(3), 2);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(24))]

        #[test]
        fn blocked_equals_unblocked(seed in 0u64..1000, n in 2usize..40, k in 0usize..8, block in 1usize..50) {
            let w = random_w(5, n, seed);
            let full = compute_hard_classes(&w, k, n, 0).unwrap();
            let blocked = compute_hard_classes(&w, k, block, 0).unwrap();
            proptest::prop_assert_eq!(full, blocked);
        }

        #[test]
        fn power_of_two_rescaling_is_invisible(seed in 0u64..1000, n in 2usize..30, k in 1usize..6) {
            let w = random_w(4, n, seed);
            let mut rng = stream_rng(seed, Stream::Evaluation, &[1]);
            let mut scaled = w.clone();
            for j in 0..n {
                let s = 2f64.powi(rng.random_range(-6..7));
                for r in 0..4 {
                    let v = scaled.get(r, j);
                    scaled.set(r, j, v * s);
                }
            }
            let a = compute_hard_classes(&w, k, 7, 0).unwrap();
            let b = compute_hard_classes(&scaled, k, 7, 0).unwrap();
            proptest::prop_assert_eq!(a, b);
        }

        #[test]
        fn label_rows_sum_to_one(seed in 0u64..1000, n in 2usize..30, k in 1usize..10, alpha in 0.0f64..0.99) {
            let w = random_w(4, n, seed);
            let t = compute_hard_classes(&w, k, 8, 3).unwrap();
            let ids: Vec<usize> = (0..n).collect();
            let labels = build_labels::<f64>(&ids, Some(&t), alpha, k, n, 3).unwrap();
            for r in labels.rows() {
                let s: f64 = r.iter().map(|e| e.1).sum();
                proptest::prop_assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }
}
