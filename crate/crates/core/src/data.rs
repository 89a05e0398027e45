//! Synthetic instance datasets, vector augmentations and the LTF tensor file
//! format.
//!
//! LTF layout (all integers little-endian):
//!
//! ```text
//! offset  size      field
//! 0       4         magic "LTF1"
//! 4       1         dtype code (1 = f32, 2 = f64)
//! 5       1         ndim
//! 6       2         reserved, zero
//! 8       8·ndim    extents (u64)
//! ...               row-major payload
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};
use crate::tensor::{DType, Scalar, Tensor};

pub const LTF_MAGIC: &[u8; 4] = b"LTF1";

/// How a dataset was generated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationMeta {
    pub num_semantic: usize,
    pub instances_per_class: usize,
    pub input_dim: usize,
    pub spread: f64,
    pub seed: u64,
}

/// Training-visible data: one feature row per instance, instance ID = row.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceDataset<S> {
    features: Tensor<S>,
    meta: Option<GenerationMeta>,
}

impl<S: Scalar> InstanceDataset<S> {
    pub fn new(features: Tensor<S>, meta: Option<GenerationMeta>) -> Result<Self> {
        features.expect_matrix("dataset features")?;
        features.ensure_finite("dataset features")?;
        Ok(InstanceDataset { features, meta })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn features(&self) -> &Tensor<S> {
        &self.features
    }

    pub fn instance(&self, id: usize) -> &[S] {
        self.features.row(id)
    }

    pub fn meta(&self) -> Option<&GenerationMeta> {
        self.meta.as_ref()
    }
}

/// Hidden semantic classes, only ever handed to evaluation code.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SemanticLabels {
    labels: Vec<usize>,
    num_classes: usize,
}

impl SemanticLabels {
    pub fn new(labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::InvalidArgument(format!("semantic label {bad} out of range for {num_classes}")));
        }
        Ok(SemanticLabels { labels, num_classes })
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset<S> {
    pub instances: InstanceDataset<S>,
    pub semantic: SemanticLabels,
}

impl<S: Scalar> LabeledDataset<S> {
    pub fn split(self) -> (InstanceDataset<S>, SemanticLabels) {
        (self.instances, self.semantic)
    }
}

/// Clustered synthetic data: `num_semantic` Gaussian centroids with
/// `instances_per_class` noisy copies each, shuffled so instance IDs carry
/// no class information.
pub fn generate_synthetic<S: Scalar>(
    num_semantic: usize,
    instances_per_class: usize,
    input_dim: usize,
    spread: f64,
    seed: u64,
) -> Result<LabeledDataset<S>> {
    if num_semantic == 0 || instances_per_class == 0 || input_dim == 0 {
        return Err(Error::InvalidArgument("class count, per-class count and dimension must be at least 1".into()));
    }
    if !(spread >= 0.0) || !spread.is_finite() {
        return Err(Error::InvalidArgument(format!("spread must be finite and nonnegative, got {spread}")));
    }
    let mut rng = stream_rng(seed, Stream::Generation, &[]);
    let centroids: Vec<Vec<f64>> = (0..num_semantic)
        .map(|_| (0..input_dim).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    let n = num_semantic * instances_per_class;
    let mut rows: Vec<(usize, Vec<f64>)> = Vec::with_capacity(n);
    for (c, centroid) in centroids.iter().enumerate() {
        for _ in 0..instances_per_class {
            let v = centroid.iter().map(|&m| m + spread * rng.sample::<f64, _>(StandardNormal)).collect();
            rows.push((c, v));
        }
    }
    // Fisher–Yates with the same stream
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        rows.swap(i, j);
    }
    let labels: Vec<usize> = rows.iter().map(|r| r.0).collect();
    let data: Vec<S> = rows.iter().flat_map(|r| r.1.iter().map(|&v| S::cast(v))).collect();
    let meta = GenerationMeta { num_semantic, instances_per_class, input_dim, spread, seed };
    Ok(LabeledDataset {
        instances: InstanceDataset::new(Tensor::matrix(n, input_dim, data)?, Some(meta))?,
        semantic: SemanticLabels::new(labels, num_semantic)?,
    })
}

/// Random translation of a square raster, padding with zeros.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropConfig {
    pub side: usize,
    pub max_shift: usize,
}

/// Vector-level augmentations. All-zero strengths make [`augment`] the identity.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationConfig {
    /// Standard deviation of additive Gaussian noise.
    pub noise_std: f64,
    /// Probability of zeroing each coordinate.
    pub mask_rate: f64,
    /// Scale factor drawn uniformly from `[1 − j, 1 + j]`.
    pub scale_jitter: f64,
    /// Optional tiny-image mode.
    pub crop: Option<CropConfig>,
}

impl AugmentationConfig {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn validate(&self, input_dim: usize) -> Result<()> {
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return Err(Error::Config(format!("noise_std must be nonnegative, got {}", self.noise_std)));
        }
        if !(0.0..1.0).contains(&self.mask_rate) {
            return Err(Error::Config(format!("mask_rate must lie in [0, 1), got {}", self.mask_rate)));
        }
        if !(0.0..1.0).contains(&self.scale_jitter) {
            return Err(Error::Config(format!("scale_jitter must lie in [0, 1), got {}", self.scale_jitter)));
        }
        if let Some(c) = self.crop {
            if c.side * c.side != input_dim {
                return Err(Error::Config(format!("crop side {} does not tile input dim {input_dim}", c.side)));
            }
        }
        Ok(())
    }

    fn is_identity(&self) -> bool {
        self.noise_std == 0.0 && self.mask_rate == 0.0 && self.scale_jitter == 0.0 && self.crop.is_none_or(|c| c.max_shift == 0)
    }
}

/// One augmented view, a pure function of `(seed, epoch, instance, view)`.
pub fn augment<S: Scalar>(
    x: &[S],
    cfg: &AugmentationConfig,
    seed: u64,
    epoch: usize,
    instance: usize,
    view: usize,
) -> Vec<S> {
    if cfg.is_identity() {
        return x.to_vec();
    }
    let mut rng = stream_rng(seed, Stream::Augmentation, &[epoch as u64, instance as u64, view as u64]);
    let mut out = x.to_vec();
    if let Some(c) = cfg.crop.filter(|c| c.max_shift > 0 && c.side * c.side == x.len()) {
        let span = 2 * c.max_shift as i64 + 1;
        let dy = rng.random_range(0..span) - c.max_shift as i64;
        let dx = rng.random_range(0..span) - c.max_shift as i64;
        let side = c.side as i64;
        for r in 0..side {
            for col in 0..side {
                let (sr, sc) = (r + dy, col + dx);
                out[(r * side + col) as usize] = if (0..side).contains(&sr) && (0..side).contains(&sc) {
                    x[(sr * side + sc) as usize]
                } else {
                    S::zero()
                };
            }
        }
    }
    if cfg.scale_jitter > 0.0 {
        let s = S::cast(rng.random_range(1.0 - cfg.scale_jitter..=1.0 + cfg.scale_jitter));
        out.iter_mut().for_each(|v| *v *= s);
    }
    if cfg.mask_rate > 0.0 {
        for v in out.iter_mut() {
            if rng.random::<f64>() < cfg.mask_rate {
                *v = S::zero();
            }
        }
    }
    if cfg.noise_std > 0.0 {
        for v in out.iter_mut() {
            *v += S::cast(cfg.noise_std * rng.sample::<f64, _>(StandardNormal));
        }
    }
    out
}

/// Rows `[id₀ view₀, id₀ view₁, …, id₁ view₀, …]` for a step.
pub fn view_batch<S: Scalar>(
    data: &InstanceDataset<S>,
    ids: &[usize],
    views: usize,
    cfg: &AugmentationConfig,
    seed: u64,
    epoch: usize,
) -> Result<Tensor<S>> {
    let d = data.input_dim();
    let mut out = Vec::with_capacity(ids.len() * views * d);
    for &id in ids {
        if id >= data.len() {
            return Err(Error::InvalidArgument(format!("instance {id} out of range for {} instances", data.len())));
        }
        for v in 0..views {
            out.extend(augment(data.instance(id), cfg, seed, epoch, id, v));
        }
    }
    Tensor::matrix(ids.len() * views, d, out)
}

// ---------------------------------------------------------------------------
// LTF
// ---------------------------------------------------------------------------

pub fn encode_ltf<S: Scalar>(t: &Tensor<S>) -> Result<Vec<u8>> {
    let ndim = u8::try_from(t.ndim()).map_err(|_| Error::Shape(format!("{} dims exceed LTF's limit", t.ndim())))?;
    let mut out = Vec::with_capacity(8 + 8 * t.ndim() + t.size_bytes() as usize);
    out.extend_from_slice(LTF_MAGIC);
    out.push(S::DTYPE.code());
    out.push(ndim);
    out.extend_from_slice(&0u16.to_le_bytes());
    for &d in t.dims() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    Ok(out)
}

/// LTF tensor of either element type.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    pub fn cast<S: Scalar>(&self) -> Tensor<S> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }
}

struct Header {
    dtype: DType,
    dims: Vec<usize>,
    payload_offset: usize,
}

fn decode_header(bytes: &[u8], path: &Path) -> Result<Header> {
    let truncated = |detail: String| Error::Truncated { path: path.to_path_buf(), detail };
    if bytes.len() < 4 || &bytes[..4] != LTF_MAGIC {
        if bytes.len() < 4 && LTF_MAGIC.starts_with(bytes) {
            return Err(truncated(format!("{} bytes, header needs 8", bytes.len())));
        }
        return Err(Error::BadMagic { path: path.to_path_buf() });
    }
    if bytes.len() < 8 {
        return Err(truncated(format!("{} bytes, header needs 8", bytes.len())));
    }
    let dtype = DType::from_code(bytes[4]).ok_or_else(|| Error::DTypeMismatch {
        path: path.to_path_buf(),
        expected: "f32 or f64",
        found: format!("code {}", bytes[4]),
    })?;
    let ndim = bytes[5] as usize;
    if bytes[6] != 0 || bytes[7] != 0 {
        return Err(Error::Malformed { path: path.to_path_buf(), detail: "reserved header bytes are nonzero".into() });
    }
    let dims_end = 8 + 8 * ndim;
    if bytes.len() < dims_end {
        return Err(truncated(format!("{} bytes, {ndim} extents need {dims_end}", bytes.len())));
    }
    let dims: Vec<usize> = bytes[8..dims_end]
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")) as usize)
        .collect();
    Ok(Header { dtype, dims, payload_offset: dims_end })
}

fn decode_payload<S: Scalar>(bytes: &[u8], header: &Header, path: &Path) -> Result<Tensor<S>> {
    let count = header
        .dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Malformed { path: path.to_path_buf(), detail: "extent product overflows".into() })?;
    let size = S::DTYPE.size();
    let payload = &bytes[header.payload_offset..];
    let need = count.checked_mul(size).unwrap_or(usize::MAX);
    if payload.len() < need {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            detail: format!("payload has {} bytes, dims {:?} need {need}", payload.len(), header.dims),
        });
    }
    if payload.len() > need {
        return Err(Error::Malformed {
            path: path.to_path_buf(),
            detail: format!("{} trailing bytes after payload", payload.len() - need),
        });
    }
    let data = payload.chunks_exact(size).map(S::read_le).collect();
    Tensor::new(header.dims.clone(), data)
}

pub fn decode_ltf<S: Scalar>(bytes: &[u8], path: &Path) -> Result<Tensor<S>> {
    let header = decode_header(bytes, path)?;
    if header.dtype != S::DTYPE {
        return Err(Error::DTypeMismatch {
            path: path.to_path_buf(),
            expected: S::DTYPE.name(),
            found: header.dtype.name().into(),
        });
    }
    decode_payload(bytes, &header, path)
}

pub fn decode_ltf_any(bytes: &[u8], path: &Path) -> Result<AnyTensor> {
    let header = decode_header(bytes, path)?;
    Ok(match header.dtype {
        DType::F32 => AnyTensor::F32(decode_payload(bytes, &header, path)?),
        DType::F64 => AnyTensor::F64(decode_payload(bytes, &header, path)?),
    })
}

pub fn write_ltf<S: Scalar>(path: impl AsRef<Path>, t: &Tensor<S>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_ltf(t)?).map_err(|e| Error::io(path, e))
}

/// Reads an LTF file whose dtype must be `S`.
pub fn read_ltf<S: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<S>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ltf(&bytes, path)
}

pub fn read_ltf_any(path: impl AsRef<Path>) -> Result<AnyTensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ltf_any(&bytes, path)
}

/// Reads an LTF file of either dtype, converting to `S`.
pub fn read_ltf_as<S: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<S>> {
    Ok(read_ltf_any(path)?.cast())
}

// ---------------------------------------------------------------------------
// Bundles
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleMeta {
    pub n_instances: usize,
    pub input_dim: usize,
    pub dtype: DType,
    pub has_labels: bool,
    pub num_semantic: Option<usize>,
    pub generation: Option<GenerationMeta>,
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

/// Writes `features.ltf`, `labels.ltf` (when labels are given) and `meta.json`.
pub fn write_bundle<S: Scalar>(
    dir: impl AsRef<Path>,
    data: &InstanceDataset<S>,
    labels: Option<&SemanticLabels>,
) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = vec![dir.join("features.ltf")];
    write_ltf(&written[0], data.features())?;
    if let Some(l) = labels {
        if l.len() != data.len() {
            return Err(Error::Shape(format!("{} labels for {} instances", l.len(), data.len())));
        }
        let t = Tensor::<f64>::new(vec![l.len()], l.as_slice().iter().map(|&v| v as f64).collect())?;
        let p = dir.join("labels.ltf");
        write_ltf(&p, &t)?;
        written.push(p);
    }
    let meta = BundleMeta {
        n_instances: data.len(),
        input_dim: data.input_dim(),
        dtype: S::DTYPE,
        has_labels: labels.is_some(),
        num_semantic: labels.map(SemanticLabels::num_classes),
        generation: data.meta().cloned(),
    };
    let p = dir.join("meta.json");
    write_json(&p, &meta)?;
    written.push(p);
    Ok(written)
}

/// Loads a bundle, converting features to `S`.
pub fn read_bundle<S: Scalar>(dir: impl AsRef<Path>) -> Result<(InstanceDataset<S>, Option<SemanticLabels>)> {
    let dir = dir.as_ref();
    let meta: BundleMeta = read_json(dir.join("meta.json"))?;
    let features = read_ltf_as::<S>(dir.join("features.ltf"))?;
    if features.dims() != [meta.n_instances, meta.input_dim] {
        return Err(Error::Malformed {
            path: dir.join("features.ltf"),
            detail: format!("dims {:?} disagree with meta.json", features.dims()),
        });
    }
    let labels = if meta.has_labels {
        let path = dir.join("labels.ltf");
        let raw = read_ltf::<f64>(&path)?;
        let labels: Vec<usize> = raw.data().iter().map(|&v| v as usize).collect();
        if labels.len() != meta.n_instances || raw.data().iter().any(|&v| v < 0.0 || v.fract() != 0.0) {
            return Err(Error::Malformed { path, detail: "labels must be one nonnegative integer per instance".into() });
        }
        let k = meta.num_semantic.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
        Some(SemanticLabels::new(labels, k)?)
    } else {
        None
    };
    Ok((InstanceDataset::new(features, meta.generation)?, labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_spread_collapses_classes() {
        let ds = generate_synthetic::<f64>(3, 4, 5, 0.0, 1).unwrap();
        let (x, l) = ds.split();
        for i in 0..x.len() {
            for j in 0..x.len() {
                if l.as_slice()[i] == l.as_slice()[j] {
                    assert_eq!(x.instance(i), x.instance(j));
                }
            }
        }
    }

    #[test]
    fn generation_is_deterministic_and_shuffled() {
        let a = generate_synthetic::<f64>(4, 5, 3, 0.3, 9).unwrap();
        let b = generate_synthetic::<f64>(4, 5, 3, 0.3, 9).unwrap();
        assert_eq!(a, b);
        let labels = a.semantic.as_slice();
        assert!(labels.windows(2).any(|w| w[0] > w[1]));
        assert!(generate_synthetic::<f64>(0, 5, 3, 0.3, 9).is_err());
    }

    #[test]
    fn zero_strength_augmentation_is_identity() {
        let x = [1.5f64, -0.0, 3.25];
        let y = augment(&x, &AugmentationConfig::identity(), 1, 2, 3, 4);
        assert!(x.iter().zip(&y).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn views_differ_and_replay() {
        let cfg = AugmentationConfig { noise_std: 0.1, mask_rate: 0.1, scale_jitter: 0.2, crop: None };
        let x = [1.0f64; 8];
        let v0 = augment(&x, &cfg, 5, 0, 7, 0);
        let v1 = augment(&x, &cfg, 5, 0, 7, 1);
        assert_ne!(v0, v1);
        assert_eq!(v0, augment(&x, &cfg, 5, 0, 7, 0));
        assert_ne!(v0, augment(&x, &cfg, 5, 1, 7, 0));
    }

    #[test]
    fn crop_shifts_raster() {
        let cfg = AugmentationConfig { crop: Some(CropConfig { side: 4, max_shift: 1 }), ..Default::default() };
        cfg.validate(16).unwrap();
        assert!(cfg.validate(15).is_err());
        let x: Vec<f64> = (1..=16).map(f64::from).collect();
        let mut differs = false;
        for v in 0..8 {
            let y = augment(&x, &cfg, 3, 0, 0, v);
            assert_eq!(y.len(), 16);
            assert!(y.iter().all(|&e| e == 0.0 || x.contains(&e)));
            differs |= y != x;
        }
        assert!(differs);
    }

    #[test]
    fn ltf_header_layout() {
        let t = Tensor::<f32>::new(vec![2, 1], vec![1.0, -2.0]).unwrap();
        let bytes = encode_ltf(&t).unwrap();
        assert_eq!(&bytes[..8], b"LTF1\x01\x02\x00\x00");
        assert_eq!(&bytes[8..16], &2u64.to_le_bytes());
        assert_eq!(&bytes[16..24], &1u64.to_le_bytes());
        assert_eq!(&bytes[24..28], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 32);
    }

    #[test]
    fn ltf_errors_are_distinct() {
        let p = Path::new("mem");
        let t = Tensor::<f64>::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let good = encode_ltf(&t).unwrap();
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode_ltf::<f64>(&bad, p), Err(Error::BadMagic { .. })));
        assert!(matches!(decode_ltf::<f64>(&good[..good.len() - 1], p), Err(Error::Truncated { .. })));
        assert!(matches!(decode_ltf::<f64>(&good[..10], p), Err(Error::Truncated { .. })));
        assert!(matches!(decode_ltf::<f32>(&good, p), Err(Error::DTypeMismatch { .. })));
        let mut extra = good.clone();
        extra.push(0);
        assert!(matches!(decode_ltf::<f64>(&extra, p), Err(Error::Malformed { .. })));
        assert_eq!(decode_ltf::<f64>(&good, p).unwrap(), t);
    }

    #[test]
    fn empty_tensor_is_header_only() {
        let t = Tensor::<f64>::new(vec![0, 4], vec![]).unwrap();
        let bytes = encode_ltf(&t).unwrap();
        assert_eq!(bytes.len(), 8 + 16);
        assert_eq!(decode_ltf::<f64>(&bytes, Path::new("mem")).unwrap(), t);
    }

    #[test]
    fn bundle_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (x, l) = generate_synthetic::<f64>(3, 4, 5, 0.5, 2).unwrap().split();
        write_bundle(dir.path(), &x, Some(&l)).unwrap();
        let (x2, l2) = read_bundle::<f64>(dir.path()).unwrap();
        assert_eq!(x2, x);
        assert_eq!(l2.unwrap(), l);
        let (x32, _) = read_bundle::<f32>(dir.path()).unwrap();
        assert_eq!(x32.features(), &x.features().cast::<f32>());
    }

    proptest::proptest! {
        #[test]
        fn ltf_round_trips_bits(dims in proptest::collection::vec(0usize..5, 0..4), seed in 0u64..1000) {
            let n: usize = dims.iter().product();
            let mut rng = stream_rng(seed, Stream::Evaluation, &[]);
            let data: Vec<f64> = (0..n).map(|_| f64::from_bits(rng.random::<u64>() & !(0x7ffu64 << 52) | (0x3ffu64 << 52))).collect();
            let t = Tensor::new(dims, data).unwrap();
            let back = decode_ltf::<f64>(&encode_ltf(&t).unwrap(), Path::new("mem")).unwrap();
            proptest::prop_assert!(back.bit_eq(&t));
        }
    }
}
