//! Classifier initialization from the features of a fixed random encoder,
//! and the diagnostics that explain why it works.
//!
//! One inference pass runs the untrained encoder over the dataset, in
//! instance order. With [`BNMode::PriorExtract`] the batch-norm layers
//! normalize with batch statistics and keep updating their running
//! averages, and nothing else changes. Row `i` of the result becomes the
//! weight vector of class `i`.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{augment, AugmentationConfig, InstanceDataset, SemanticLabels};
use crate::encoder::{BNMode, Encoder};
use crate::error::{Error, Result};
use crate::eval::{embed_dataset, nearest_neighbor_accuracy, Representation};
use crate::math::pairwise_cosines;
use crate::rng::{stream_rng, Stream};
use crate::sharded::{shard_weights, ShardPlan, WeightShard};
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_EXTRACT_BATCH: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct PriorFeatures<S> {
    /// `N×D`, row `i` = instance `i`.
    pub features: Tensor<S>,
    pub meta: ExtractionMeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionMeta {
    pub batch_size: usize,
    pub seed: u64,
    pub mode: BNMode,
    pub augmented: bool,
}

/// Extraction batches: consecutive IDs, with a trailing batch of one merged
/// into its predecessor so batch statistics stay defined.
pub fn extraction_batches(n: usize, batch_size: usize) -> Vec<std::ops::Range<usize>> {
    let mut out: Vec<std::ops::Range<usize>> =
        (0..n).step_by(batch_size.max(1)).map(|s| s..(s + batch_size).min(n)).collect();
    if out.len() > 1 && out.last().is_some_and(|r| r.len() == 1) {
        let last = out.pop().expect("nonempty");
        out.last_mut().expect("nonempty").end = last.end;
    }
    out
}

/// One pass over the dataset in instance order. `PriorExtract` updates BN
/// running statistics batch by batch; `Eval` leaves the encoder untouched.
pub fn extract_prior_features<S: Scalar>(
    enc: &mut Encoder<S>,
    data: &InstanceDataset<S>,
    mode: BNMode,
    batch_size: usize,
    seed: u64,
    augmentation: Option<&AugmentationConfig>,
) -> Result<PriorFeatures<S>> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("cannot extract features from an empty dataset".into()));
    }
    if mode == BNMode::Train {
        return Err(Error::InvalidArgument("prior extraction runs in PriorExtract or Eval mode".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("extraction batch size must be positive".into()));
    }
    if let Some(a) = augmentation {
        a.validate(data.input_dim())?;
    }
    let mut parts = Vec::new();
    for range in extraction_batches(data.len(), batch_size) {
        let mut x = data.features().slice_rows(range.clone());
        if let Some(a) = augmentation {
            for (row, id) in range.clone().enumerate() {
                let v = augment(data.instance(id), a, seed, 0, id, 0);
                x.row_mut(row).copy_from_slice(&v);
            }
        }
        let y = match mode {
            BNMode::Eval => enc.forward_eval(&x)?,
            _ => enc.forward(&x, mode)?.0,
        };
        parts.push(y);
    }
    let features = Tensor::concat_rows(&parts)?;
    for i in 0..features.rows() {
        if features.row(i).iter().all(|&v| v == S::zero()) {
            return Err(Error::ZeroNorm { what: "prior feature row", index: i });
        }
    }
    Ok(PriorFeatures {
        features,
        meta: ExtractionMeta { batch_size, seed, mode, augmented: augmentation.is_some() },
    })
}

/// `w_i = x_i`: the transposed features, split by `plan`, momentum zeroed.
pub fn init_weights_from_features<S: Scalar>(prior: &PriorFeatures<S>, plan: &ShardPlan) -> Result<Vec<WeightShard<S>>> {
    if prior.features.rows() != plan.n_classes {
        return Err(Error::Shape(format!(
            "{} prior features for {} classes",
            prior.features.rows(),
            plan.n_classes
        )));
    }
    shard_weights(&prior.features.transpose(), plan)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    /// Mean cosine between the two views of one instance.
    pub mean_intra: f64,
    /// Mean cosine between views of different instances.
    pub mean_inter: f64,
    pub gap: f64,
    pub sample_size: usize,
}

/// Intra/inter-instance cosine statistics of EVAL-mode embeddings of two
/// augmented views per sampled instance. Inter pairs are all `(i view 0,
/// j view 1)` with `i ≠ j`.
pub fn similarity_report<S: Scalar>(
    enc: &Encoder<S>,
    data: &InstanceDataset<S>,
    augmentation: &AugmentationConfig,
    sample_size: usize,
    seed: u64,
) -> Result<SimilarityReport> {
    if sample_size < 2 {
        return Err(Error::InvalidArgument(format!("similarity report needs at least 2 samples, got {sample_size}")));
    }
    if data.len() < 2 {
        return Err(Error::InvalidArgument("similarity report needs at least 2 instances".into()));
    }
    augmentation.validate(data.input_dim())?;
    let mut ids: Vec<usize> = (0..data.len()).collect();
    ids.shuffle(&mut stream_rng(seed, Stream::Similarity, &[]));
    ids.truncate(sample_size.min(data.len()));
    ids.sort_unstable();
    let view = |v: usize| -> Result<Tensor<S>> {
        let rows: Vec<Vec<S>> = ids.iter().map(|&id| augment(data.instance(id), augmentation, seed, 0, id, v)).collect();
        enc.forward_eval(&Tensor::from_rows(&rows)?)
    };
    let (a, b) = (view(0)?, view(1)?);
    let cos: Tensor<f64> = pairwise_cosines(&a, &b)?.cast();
    let m = ids.len();
    let mut intra = 0.0;
    let mut inter = 0.0;
    for i in 0..m {
        for j in 0..m {
            if i == j {
                intra += cos.get(i, j);
            } else {
                inter += cos.get(i, j);
            }
        }
    }
    let mean_intra = intra / m as f64;
    let mean_inter = inter / (m * (m - 1)) as f64;
    if !(mean_intra.is_finite() && mean_inter.is_finite()) {
        return Err(Error::NonFinite("similarity report".into()));
    }
    Ok(SimilarityReport { mean_intra, mean_inter, gap: mean_intra - mean_inter, sample_size: m })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub top1: f64,
    pub chance: f64,
    pub num_classes: usize,
}

/// Nearest-neighbor semantic retrieval with EVAL-mode embeddings of an
/// (untrained) encoder. Chance is `1 / num_classes`.
pub fn random_retrieval_probe<S: Scalar>(
    enc: &Encoder<S>,
    data: &InstanceDataset<S>,
    labels: &SemanticLabels,
) -> Result<RetrievalResult> {
    if data.len() < 2 {
        return Err(Error::InvalidArgument("retrieval needs at least two instances".into()));
    }
    let emb = embed_dataset(enc, data, Representation::Embedding)?;
    let top1 = nearest_neighbor_accuracy(&emb, labels)?;
    Ok(RetrievalResult { top1, chance: 1.0 / labels.num_classes() as f64, num_classes: labels.num_classes() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic;
    use crate::encoder::{init_random, EncoderConfig};
    use crate::math::cosine_similarity;
    use crate::sharded::assemble_weights;
    use crate::tensor::max_relative_error;

    fn small() -> EncoderConfig {
        EncoderConfig { input_dim: 6, hidden_dims: vec![8], embed_dim: 5, ..Default::default() }
    }

    #[test]
    fn batches_merge_trailing_singleton() {
        assert_eq!(extraction_batches(10, 4), vec![0..4, 4..8, 8..10]);
        assert_eq!(extraction_batches(9, 4), vec![0..4, 4..9]);
        assert_eq!(extraction_batches(1, 4), vec![0..1]);
    }

    #[test]
    fn eval_extraction_is_pure() {
        let (x, _) = generate_synthetic::<f64>(3, 5, 6, 0.5, 1).unwrap().split();
        let mut enc = init_random::<f64>(&small(), 2).unwrap();
        let before = enc.clone();
        let a = extract_prior_features(&mut enc, &x, BNMode::Eval, 4, 0, None).unwrap();
        let b = extract_prior_features(&mut enc, &x, BNMode::Eval, 4, 0, None).unwrap();
        assert!(a.features.bit_eq(&b.features));
        assert!(enc.bit_eq(&before));
        assert!(extract_prior_features(&mut enc, &x, BNMode::Train, 4, 0, None).is_err());
    }

    #[test]
    fn running_extraction_matches_two_batch_replay() {
        let (x, _) = generate_synthetic::<f64>(2, 4, 6, 0.5, 3).unwrap().split();
        let mut enc = init_random::<f64>(&small(), 4).unwrap();
        let mut replay = enc.clone();
        let prior = extract_prior_features(&mut enc, &x, BNMode::PriorExtract, 4, 0, None).unwrap();
        let (y1, _) = replay.forward(&x.features().slice_rows(0..4), BNMode::PriorExtract).unwrap();
        let (y2, _) = replay.forward(&x.features().slice_rows(4..8), BNMode::PriorExtract).unwrap();
        assert!(prior.features.bit_eq(&Tensor::concat_rows(&[y1, y2]).unwrap()));
        assert!(enc.bit_eq(&replay));
        assert!(!enc.bn_states()[0].running_mean.is_all_zero());
        assert_eq!(enc.bn_updates(), vec![2, 2]);
    }

    #[test]
    fn weights_are_transposed_features() {
        let (x, _) = generate_synthetic::<f64>(2, 5, 6, 0.5, 3).unwrap().split();
        let mut enc = init_random::<f64>(&small(), 4).unwrap();
        let prior = extract_prior_features(&mut enc, &x, BNMode::PriorExtract, 4, 0, None).unwrap();
        let one = init_weights_from_features(&prior, &ShardPlan::new(10, 1).unwrap()).unwrap();
        assert!(one[0].weights.bit_eq(&prior.features.transpose()));
        let four = init_weights_from_features(&prior, &ShardPlan::new(10, 4).unwrap()).unwrap();
        assert_eq!(four[2].range, 6..8);
        assert!(four.iter().all(|s| s.momentum.is_all_zero()));
        let w = assemble_weights(&four).unwrap();
        for i in 0..10 {
            assert_eq!(cosine_similarity(&w.column(i), prior.features.row(i)).unwrap(), 1.0);
        }
        assert!(init_weights_from_features(&prior, &ShardPlan::new(9, 1).unwrap()).is_err());
    }

    #[test]
    fn identity_views_have_unit_intra_similarity() {
        let (x, _) = generate_synthetic::<f64>(3, 5, 6, 0.5, 1).unwrap().split();
        let enc = init_random::<f64>(&small(), 2).unwrap();
        let r = similarity_report(&enc, &x, &AugmentationConfig::identity(), 8, 3).unwrap();
        assert_eq!(r.mean_intra, 1.0);
        assert!(similarity_report(&enc, &x, &AugmentationConfig::identity(), 1, 3).is_err());
    }

    #[test]
    fn similarity_matches_pairwise_loop() {
        let (x, _) = generate_synthetic::<f64>(3, 6, 6, 0.5, 1).unwrap().split();
        let enc = init_random::<f64>(&small(), 2).unwrap();
        let aug = AugmentationConfig { noise_std: 0.3, mask_rate: 0.1, scale_jitter: 0.1, crop: None };
        let r = similarity_report(&enc, &x, &aug, 10, 5).unwrap();

        let mut ids: Vec<usize> = (0..18).collect();
        ids.shuffle(&mut stream_rng(5, Stream::Similarity, &[]));
        ids.truncate(10);
        ids.sort_unstable();
        let emb = |id: usize, v: usize| {
            let row = Tensor::matrix(1, 6, augment(x.instance(id), &aug, 5, 0, id, v)).unwrap();
            enc.forward_eval(&row).unwrap().into_data()
        };
        let (mut intra, mut inter, mut n_inter) = (0.0, 0.0, 0);
        for &i in &ids {
            for &j in &ids {
                let c = cosine_similarity(&emb(i, 0), &emb(j, 1)).unwrap();
                if i == j {
                    intra += c;
                } else {
                    inter += c;
                    n_inter += 1;
                }
            }
        }
        assert!(max_relative_error(&[r.mean_intra, r.mean_inter], &[intra / 10.0, inter / n_inter as f64], 1e-12) < 1e-10);
        assert!((r.gap - (r.mean_intra - r.mean_inter)).abs() < 1e-15);
    }

    #[test]
    fn retrieval_degenerate_cases() {
        let enc = init_random::<f64>(&small(), 2).unwrap();
        // identical features: every query retrieves instance 0 (or 1 for query 0)
        let same = InstanceDataset::new(Tensor::filled(&[6, 6], 0.5), None).unwrap();
        let labels = SemanticLabels::new(vec![0, 0, 1, 1, 1, 2], 3).unwrap();
        let r = random_retrieval_probe(&enc, &same, &labels).unwrap();
        // query 0 → 1 (label 0, hit); queries 1..5 → 0 (label 0): hit only for query 1
        assert_eq!(r.top1, 2.0 / 6.0);
        let one_class = SemanticLabels::new(vec![0; 6], 1).unwrap();
        let (x, _) = generate_synthetic::<f64>(2, 3, 6, 0.5, 1).unwrap().split();
        assert_eq!(random_retrieval_probe(&enc, &x, &one_class).unwrap().top1, 1.0);
    }
}
