//! Cosine logits, the smoothed softmax loss, and their analytic gradients.
//!
//! The loss for one row with logits `ℓ` and label distribution `y` is
//!
//! ```text
//! loss = −log( Σ_j y_j exp(ℓ_j − m) / Σ_j exp(ℓ_j − m) )
//! ```
//!
//! where `m` is the row maximum. For one-hot `y` this is ordinary softmax
//! cross-entropy. The conventional smoothed cross-entropy `−Σ_j y_j log p_j`
//! is available as [`LossVariant::Conventional`]; the two differ whenever
//! `y` has more than one nonzero entry.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};
use crate::smoothing::SmoothedLabelSet;
use crate::tensor::{dot, max_relative_error, sq_norm, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossVariant {
    /// `−log Σ_j y_j p_j`
    #[default]
    Printed,
    /// `−Σ_j y_j log p_j`
    Conventional,
}

/// Cosine similarity `a·b / sqrt(|a|²|b|²)`.
///
/// For `a == b` this is exactly `1.0`: the dot product and the squared norm
/// are the same sum, and `sqrt(s·s) == s` in binary floating point.
pub fn cosine_similarity<S: Scalar>(a: &[S], b: &[S]) -> Result<S> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("cosine of lengths {} and {}", a.len(), b.len())));
    }
    let (na, nb) = (sq_norm(a), sq_norm(b));
    if na == S::zero() {
        return Err(Error::ZeroNorm { what: "vector", index: 0 });
    }
    if nb == S::zero() {
        return Err(Error::ZeroNorm { what: "vector", index: 1 });
    }
    Ok(dot(a, b) / (na * nb).sqrt())
}

#[inline]
pub(crate) fn cosine_from_parts<S: Scalar>(dot: S, sq_a: S, sq_b: S) -> S {
    dot / (sq_a * sq_b).sqrt()
}

/// Cosine logits plus the pieces the backward pass needs.
#[derive(Debug, Clone)]
pub struct CosineLogits<S> {
    /// `B×M`, entry `(i, j) = cos(w_j, x_i) / τ`.
    pub logits: Tensor<S>,
    /// `B×M` raw cosines.
    pub cosines: Tensor<S>,
    pub w_sq_norms: Vec<S>,
    pub x_sq_norms: Vec<S>,
    pub tau: S,
}

fn column_sq_norms<S: Scalar>(wt: &Tensor<S>) -> Result<Vec<S>> {
    let mut out = Vec::with_capacity(wt.rows());
    for j in 0..wt.rows() {
        let n = sq_norm(wt.row(j));
        if n == S::zero() {
            return Err(Error::ZeroNorm { what: "weight column", index: j });
        }
        out.push(n);
    }
    Ok(out)
}

fn row_sq_norms<S: Scalar>(x: &Tensor<S>) -> Result<Vec<S>> {
    let mut out = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let n = sq_norm(x.row(i));
        if n == S::zero() {
            return Err(Error::ZeroNorm { what: "feature row", index: i });
        }
        out.push(n);
    }
    Ok(out)
}

/// Cosine logits of features `x` (`B×D`) against weight columns `w` (`D×M`).
pub fn cosine_logits<S: Scalar>(w: &Tensor<S>, x: &Tensor<S>, tau: S) -> Result<CosineLogits<S>> {
    if !(tau > S::zero()) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
    }
    let (d, m) = w.expect_matrix("weights")?;
    let (b, dx) = x.expect_matrix("features")?;
    if d != dx {
        return Err(Error::Shape(format!("weights are {d}x{m} but features are {b}x{dx}")));
    }
    let wt = w.transpose();
    let w_sq_norms = column_sq_norms(&wt)?;
    let x_sq_norms = row_sq_norms(x)?;
    let mut cosines = x.matmul_t(&wt)?;
    for i in 0..b {
        let nx = x_sq_norms[i];
        for (c, &nw) in cosines.row_mut(i).iter_mut().zip(&w_sq_norms) {
            *c = cosine_from_parts(*c, nw, nx);
        }
    }
    let logits = cosines.map(|c| c / tau);
    Ok(CosineLogits { logits, cosines, w_sq_norms, x_sq_norms, tau })
}

/// `B×M` matrix of `cos(w_j, x_i) / τ`.
pub fn cosine_logit_matrix<S: Scalar>(w: &Tensor<S>, x: &Tensor<S>, tau: S) -> Result<Tensor<S>> {
    Ok(cosine_logits(w, x, tau)?.logits)
}

/// `A×B` matrix with entry `(i, j) = cos(a_i, b_j)`, bit-equal to
/// [`cosine_similarity`] on the same rows.
pub fn pairwise_cosines<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (_, da) = a.expect_matrix("cosine lhs")?;
    let (_, db) = b.expect_matrix("cosine rhs")?;
    if da != db {
        return Err(Error::Shape(format!("cosine rows of width {da} and {db}")));
    }
    let na = row_sq_norms(a)?;
    let nb = row_sq_norms(b)?;
    let mut out = a.matmul_t(b)?;
    for (i, &sa) in na.iter().enumerate() {
        for (c, &sb) in out.row_mut(i).iter_mut().zip(&nb) {
            *c = cosine_from_parts(*c, sa, sb);
        }
    }
    Ok(out)
}

/// Pulls `∂J/∂logits` back to `(∂J/∂W  D×M, ∂J/∂X  B×D)`.
pub fn cosine_logits_backward<S: Scalar>(
    w: &Tensor<S>,
    x: &Tensor<S>,
    cache: &CosineLogits<S>,
    grad_logits: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>)> {
    grad_logits.check_same_shape(&cache.logits, "logit gradient")?;
    let (b, d) = x.expect_matrix("features")?;
    let m = w.cols();
    let tau = cache.tau;

    let w_norms: Vec<S> = cache.w_sq_norms.iter().map(|n| n.sqrt()).collect();
    let x_norms: Vec<S> = cache.x_sq_norms.iter().map(|n| n.sqrt()).collect();

    let mut w_hat_t = w.transpose();
    for j in 0..m {
        let inv = S::one() / w_norms[j];
        w_hat_t.row_mut(j).iter_mut().for_each(|v| *v *= inv);
    }
    let mut x_hat = x.clone();
    for i in 0..b {
        let inv = S::one() / x_norms[i];
        x_hat.row_mut(i).iter_mut().for_each(|v| *v *= inv);
    }

    // s_i = Σ_j g_ij c_ij and s'_j = Σ_i g_ij c_ij
    let mut row_s = vec![S::zero(); b];
    let mut col_s = vec![S::zero(); m];
    for i in 0..b {
        let g = grad_logits.row(i);
        let c = cache.cosines.row(i);
        for j in 0..m {
            let gc = g[j] * c[j];
            row_s[i] += gc;
            col_s[j] += gc;
        }
    }

    let mut grad_x = grad_logits.matmul(&w_hat_t)?;
    for i in 0..b {
        let scale = S::one() / (tau * x_norms[i]);
        let xh = x_hat.row(i).to_vec();
        let s = row_s[i];
        for (g, &xv) in grad_x.row_mut(i).iter_mut().zip(&xh) {
            *g = (*g - s * xv) * scale;
        }
    }

    let mut grad_wt = grad_logits.t_matmul(&x_hat)?;
    for j in 0..m {
        let scale = S::one() / (tau * w_norms[j]);
        let wh = w_hat_t.row(j).to_vec();
        let s = col_s[j];
        for (g, &wv) in grad_wt.row_mut(j).iter_mut().zip(&wh) {
            *g = (*g - s * wv) * scale;
        }
    }
    debug_assert_eq!(grad_wt.cols(), d);
    Ok((grad_wt.transpose(), grad_x))
}

#[derive(Debug, Clone)]
pub struct LossOutput<S> {
    /// Mean over rows.
    pub loss: S,
    /// `∂loss/∂logits`, same shape as the logits.
    pub logits_grad: Tensor<S>,
    pub per_instance_loss: Vec<S>,
}

/// Contribution of one labelled entry (logit already shifted by the row
/// stabilizer) to the per-row numerator.
#[inline]
pub(crate) fn numerator_term<S: Scalar>(variant: LossVariant, shifted: S, y: S) -> S {
    match variant {
        LossVariant::Printed => y * shifted.exp(),
        LossVariant::Conventional => y * shifted,
    }
}

#[inline]
pub(crate) fn row_loss<S: Scalar>(variant: LossVariant, denom: S, numer: S, label_mass: S) -> S {
    match variant {
        LossVariant::Printed => denom.ln() - numer.ln(),
        LossVariant::Conventional => label_mass * denom.ln() - numer,
    }
}

/// `∂loss_i/∂ℓ_ij` before the `1/B` factor.
#[inline]
pub(crate) fn row_grad<S: Scalar>(variant: LossVariant, shifted: S, y: S, denom: S, numer: S, label_mass: S) -> S {
    let e = shifted.exp();
    match variant {
        LossVariant::Printed => e / denom - y * e / numer,
        LossVariant::Conventional => label_mass * e / denom - y,
    }
}

pub(crate) fn check_numerator<S: Scalar>(variant: LossVariant, row: usize, numer: S) -> Result<()> {
    if variant == LossVariant::Printed && !(numer > S::zero()) {
        return Err(Error::NonFinite(format!(
            "labelled probability mass of row {row} underflowed to zero"
        )));
    }
    Ok(())
}

/// Mean smoothed softmax loss over the rows of `logits` (`B×N`).
pub fn smoothed_softmax_loss<S: Scalar>(
    logits: &Tensor<S>,
    labels: &SmoothedLabelSet<S>,
    variant: LossVariant,
) -> Result<LossOutput<S>> {
    let (b, n) = logits.expect_matrix("logits")?;
    if b == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    labels.validate(b, n)?;
    let inv_b = S::one() / S::cast(b as f64);
    let mut grad = Tensor::zeros(&[b, n]);
    let mut per_instance = Vec::with_capacity(b);
    let mut total = S::zero();
    for i in 0..b {
        let row = logits.row(i);
        let m = row.iter().copied().fold(S::neg_infinity(), S::max);
        let mut denom = S::zero();
        for &l in row {
            denom += (l - m).exp();
        }
        let entries = labels.row(i);
        let mut numer = S::zero();
        let mut mass = S::zero();
        for &(j, y) in entries {
            numer += numerator_term(variant, row[j] - m, y);
            mass += y;
        }
        check_numerator(variant, i, numer)?;
        let li = row_loss(variant, denom, numer, mass);
        per_instance.push(li);
        total += li;

        let g = grad.row_mut(i);
        for (gj, &l) in g.iter_mut().zip(row) {
            *gj = row_grad(variant, l - m, S::zero(), denom, numer, mass) * inv_b;
        }
        for &(j, y) in entries {
            g[j] = row_grad(variant, row[j] - m, y, denom, numer, mass) * inv_b;
        }
    }
    let loss = total * inv_b;
    if !loss.is_finite() {
        return Err(Error::NonFinite("softmax loss".into()));
    }
    Ok(LossOutput { loss, logits_grad: grad, per_instance_loss: per_instance })
}

/// Label family used by [`softmax_loss_grad_check`].
#[derive(Debug, Clone, Copy)]
pub enum CheckLabels {
    OneHot,
    Smoothed { alpha: f64, k: usize },
}

/// Worst relative error between the analytic logit gradient and central
/// finite differences over `trials` random problems of size `batch×classes`.
pub fn softmax_loss_grad_check(
    batch: usize,
    classes: usize,
    trials: usize,
    epsilon: f64,
    labels: CheckLabels,
    variant: LossVariant,
    seed: u64,
) -> Result<f64> {
    let mut worst = 0.0f64;
    for trial in 0..trials {
        let mut rng = stream_rng(seed, Stream::Evaluation, &[trial as u64]);
        let data: Vec<f64> = (0..batch * classes).map(|_| rng.sample::<f64, _>(StandardNormal) * 2.0).collect();
        let logits = Tensor::matrix(batch, classes, data)?;
        let label_set = match labels {
            CheckLabels::OneHot => {
                let ids: Vec<usize> = (0..batch).map(|_| rng.random_range(0..classes)).collect();
                SmoothedLabelSet::one_hot(&ids, classes)
            }
            CheckLabels::Smoothed { alpha, k } => {
                let k = k.min(classes - 1);
                let mut rows = Vec::with_capacity(batch);
                for _ in 0..batch {
                    let pos = rng.random_range(0..classes);
                    let mut others: Vec<usize> = (0..classes).filter(|&j| j != pos).collect();
                    for s in 0..k {
                        let pick = rng.random_range(s..others.len());
                        others.swap(s, pick);
                    }
                    let mut row = vec![(pos, 1.0 - alpha)];
                    row.extend(others[..k].iter().map(|&j| (j, alpha / k as f64)));
                    row.sort_by_key(|e| e.0);
                    rows.push(row);
                }
                SmoothedLabelSet::from_rows(rows, classes, alpha, k)?
            }
        };
        let out = smoothed_softmax_loss(&logits, &label_set, variant)?;
        let mut numeric = vec![0.0; batch * classes];
        for idx in 0..batch * classes {
            let mut plus = logits.clone();
            plus.data_mut()[idx] += epsilon;
            let mut minus = logits.clone();
            minus.data_mut()[idx] -= epsilon;
            let lp = smoothed_softmax_loss(&plus, &label_set, variant)?.loss;
            let lm = smoothed_softmax_loss(&minus, &label_set, variant)?.loss;
            numeric[idx] = (lp - lm) / (2.0 * epsilon);
        }
        worst = worst.max(max_relative_error(out.logits_grad.data(), &numeric, 1e-8));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
        let mut rng = stream_rng(seed, Stream::Evaluation, &[rows as u64, cols as u64]);
        let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
        Tensor::matrix(rows, cols, data).unwrap()
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&[1.0, 0.0, 0.0], &[1.0, 0.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let c = cosine_similarity(&[1.0f64, 1.0], &[1.0, 0.0]).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
    }

    #[test]
    fn cosine_rejects_zero_vectors() {
        assert!(matches!(
            cosine_similarity(&[0.0f64, 0.0], &[1.0, 0.0]),
            Err(Error::ZeroNorm { index: 0, .. })
        ));
        assert!(matches!(
            cosine_similarity(&[1.0f64, 0.0], &[0.0, 0.0]),
            Err(Error::ZeroNorm { index: 1, .. })
        ));
        assert!(cosine_similarity(&[1.0f64], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn identity_logits() {
        let w = Tensor::<f64>::identity(3);
        let x = Tensor::<f64>::identity(3);
        let l = cosine_logit_matrix(&w, &x, 1.0).unwrap();
        assert_eq!(l, Tensor::identity(3));
    }

    #[test]
    fn temperature_scales_unit_cosine() {
        let w = Tensor::<f64>::matrix(2, 1, vec![3.0, 4.0]).unwrap();
        let x = Tensor::<f64>::matrix(1, 2, vec![0.6, 0.8]).unwrap();
        let l = cosine_logit_matrix(&w, &x, 0.15).unwrap();
        assert!((l.data()[0] - 1.0 / 0.15).abs() < 1e-12);
    }

    #[test]
    fn logits_match_scalar_loop() {
        let w = random_matrix(4, 3, 1);
        let x = random_matrix(3, 4, 2);
        let tau = 0.5;
        let l = cosine_logit_matrix(&w, &x, tau).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let (mut d, mut nw, mut nx) = (0.0, 0.0, 0.0);
                for k in 0..4 {
                    d += w.get(k, j) * x.get(i, k);
                    nw += w.get(k, j) * w.get(k, j);
                    nx += x.get(i, k) * x.get(i, k);
                }
                let expected = d / (nw.sqrt() * nx.sqrt()) / tau;
                assert!((l.get(i, j) - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_norm_inputs_name_the_index() {
        let mut w = random_matrix(3, 4, 3);
        for k in 0..3 {
            w.set(k, 2, 0.0);
        }
        let x = random_matrix(2, 3, 4);
        assert!(matches!(
            cosine_logit_matrix(&w, &x, 1.0),
            Err(Error::ZeroNorm { what: "weight column", index: 2 })
        ));
        let w = random_matrix(3, 4, 3);
        let mut x = random_matrix(2, 3, 4);
        x.row_mut(1).fill(0.0);
        assert!(matches!(
            cosine_logit_matrix(&w, &x, 1.0),
            Err(Error::ZeroNorm { what: "feature row", index: 1 })
        ));
        assert!(cosine_logit_matrix(&w, &random_matrix(2, 3, 5), 0.0).is_err());
    }

    #[test]
    fn single_class_loss_is_zero() {
        let logits = Tensor::<f64>::matrix(1, 1, vec![0.7]).unwrap();
        let labels = SmoothedLabelSet::one_hot(&[0], 1);
        let out = smoothed_softmax_loss(&logits, &labels, LossVariant::Printed).unwrap();
        assert_eq!(out.loss, 0.0);
    }

    #[test]
    fn two_class_loss_value() {
        let logits = Tensor::<f64>::matrix(1, 2, vec![1.0, 0.0]).unwrap();
        let labels = SmoothedLabelSet::one_hot(&[0], 2);
        let out = smoothed_softmax_loss(&logits, &labels, LossVariant::Printed).unwrap();
        assert!((out.loss - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-15);
        assert!((out.loss - 0.313261687).abs() < 1e-9);
    }

    #[test]
    fn smoothed_loss_matches_brute_force() {
        let logits = random_matrix(1, 5, 9);
        let y = [0.1, 0.0, 0.8, 0.0, 0.1];
        let labels = SmoothedLabelSet::from_rows(
            vec![vec![(0, 0.1), (2, 0.8), (4, 0.1)]],
            5,
            0.2,
            2,
        )
        .unwrap();
        let out = smoothed_softmax_loss(&logits, &labels, LossVariant::Printed).unwrap();
        let row = logits.row(0);
        let num: f64 = (0..5).map(|j| y[j] * row[j].exp()).sum();
        let den: f64 = (0..5).map(|j| row[j].exp()).sum();
        assert!((out.loss - -(num / den).ln()).abs() < 1e-12);
    }

    #[test]
    fn conventional_variant_is_cross_entropy_against_soft_targets() {
        let logits = random_matrix(1, 5, 10);
        let labels = SmoothedLabelSet::from_rows(vec![vec![(0, 0.1), (2, 0.8), (4, 0.1)]], 5, 0.2, 2).unwrap();
        let out = smoothed_softmax_loss(&logits, &labels, LossVariant::Conventional).unwrap();
        let row = logits.row(0);
        let den: f64 = row.iter().map(|l| l.exp()).sum();
        let expected: f64 = [(0, 0.1), (2, 0.8), (4, 0.1)]
            .iter()
            .map(|&(j, y)| -y * (row[j].exp() / den).ln())
            .sum();
        assert!((out.loss - expected).abs() < 1e-12);
        let printed = smoothed_softmax_loss(&logits, &labels, LossVariant::Printed).unwrap();
        assert!((printed.loss - out.loss).abs() > 1e-6);
    }

    #[test]
    fn label_rows_must_sum_to_one() {
        let logits = random_matrix(1, 3, 11);
        let labels = SmoothedLabelSet::from_rows_unchecked(vec![vec![(0, 0.5), (1, 0.4)]], 3);
        assert!(matches!(
            smoothed_softmax_loss(&logits, &labels, LossVariant::Printed),
            Err(Error::InvalidLabel { row: 0, .. })
        ));
    }

    #[test]
    fn grad_check_one_hot_and_smoothed() {
        for variant in [LossVariant::Printed, LossVariant::Conventional] {
            let e = softmax_loss_grad_check(4, 7, 3, 1e-5, CheckLabels::OneHot, variant, 1).unwrap();
            assert!(e < 1e-6, "{variant:?} one-hot {e}");
            let e = softmax_loss_grad_check(4, 7, 3, 1e-5, CheckLabels::Smoothed { alpha: 0.2, k: 3 }, variant, 2)
                .unwrap();
            assert!(e < 1e-6, "{variant:?} smoothed {e}");
        }
    }

    #[test]
    fn zero_logits_uniform_labels_give_zero_gradient() {
        let logits = Tensor::<f64>::zeros(&[2, 4]);
        let row: Vec<(usize, f64)> = (0..4).map(|j| (j, 0.25)).collect();
        let labels = SmoothedLabelSet::from_rows_unchecked(vec![row.clone(), row], 4);
        let out = smoothed_softmax_loss(&logits, &labels, LossVariant::Printed).unwrap();
        assert!(out.logits_grad.data().iter().all(|&g| g == 0.0));
        assert_eq!(out.loss, 4f64.ln());
    }

    #[test]
    fn cosine_backward_matches_finite_differences() {
        let w = random_matrix(5, 6, 21);
        let x = random_matrix(3, 5, 22);
        let upstream = random_matrix(3, 6, 23);
        let tau = 0.3;
        let objective = |w: &Tensor<f64>, x: &Tensor<f64>| -> f64 {
            let l = cosine_logit_matrix(w, x, tau).unwrap();
            l.data().iter().zip(upstream.data()).map(|(a, b)| a * b).sum()
        };
        let cache = cosine_logits(&w, &x, tau).unwrap();
        let (gw, gx) = cosine_logits_backward(&w, &x, &cache, &upstream).unwrap();
        let eps = 1e-6;
        let mut fd_w = vec![0.0; w.len()];
        for k in 0..w.len() {
            let (mut p, mut m) = (w.clone(), w.clone());
            p.data_mut()[k] += eps;
            m.data_mut()[k] -= eps;
            fd_w[k] = (objective(&p, &x) - objective(&m, &x)) / (2.0 * eps);
        }
        let mut fd_x = vec![0.0; x.len()];
        for k in 0..x.len() {
            let (mut p, mut m) = (x.clone(), x.clone());
            p.data_mut()[k] += eps;
            m.data_mut()[k] -= eps;
            fd_x[k] = (objective(&w, &p) - objective(&w, &m)) / (2.0 * eps);
        }
        assert!(max_relative_error(gw.data(), &fd_w, 1e-6) < 1e-6);
        assert!(max_relative_error(gx.data(), &fd_x, 1e-6) < 1e-6);
    }
}
