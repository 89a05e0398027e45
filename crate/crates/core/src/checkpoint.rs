//! On-disk checkpoints: one LTF file per tensor plus a JSON manifest.
//!
//! ```text
//! <dir>/encoder/manifest.json    config, dtype, tensor names and files
//! <dir>/encoder/<name>.ltf
//! <dir>/classifier/plan.json     shard plan
//! <dir>/classifier/shard_<r>.ltf D × shard width, one per rank
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{read_json, read_ltf, write_json, write_ltf};
use crate::encoder::{init_random, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::sharded::{ShardPlan, WeightShard};
use crate::tensor::{DType, Scalar};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub file: String,
    pub dims: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderManifest {
    pub config: EncoderConfig,
    pub dtype: DType,
    pub params: Vec<TensorEntry>,
    pub buffers: Vec<TensorEntry>,
    pub bn_updates: Vec<u64>,
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes the encoder under `dir`, returning every file written.
pub fn save_encoder<S: Scalar>(dir: impl AsRef<Path>, enc: &Encoder<S>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    create_dir(dir)?;
    let mut written = Vec::new();
    let mut entry = |name: String, t: &crate::Tensor<S>| -> Result<TensorEntry> {
        let file = format!("{name}.ltf");
        let path = dir.join(&file);
        write_ltf(&path, t)?;
        written.push(path);
        Ok(TensorEntry { name, file, dims: t.dims().to_vec() })
    };
    let params = enc
        .param_specs()
        .into_iter()
        .zip(enc.params())
        .map(|(spec, t)| entry(spec.name, t))
        .collect::<Result<Vec<_>>>()?;
    let buffers = enc.buffers().into_iter().map(|(name, t)| entry(name, t)).collect::<Result<Vec<_>>>()?;
    let manifest = EncoderManifest {
        config: enc.config().clone(),
        dtype: S::DTYPE,
        params,
        buffers,
        bn_updates: enc.bn_updates(),
    };
    let path = dir.join("manifest.json");
    write_json(&path, &manifest)?;
    written.push(path);
    Ok(written)
}

pub fn load_encoder<S: Scalar>(dir: impl AsRef<Path>) -> Result<Encoder<S>> {
    let dir = dir.as_ref();
    let manifest_path = dir.join("manifest.json");
    let manifest: EncoderManifest = read_json(&manifest_path)?;
    let mut enc = init_random::<S>(&manifest.config, 0)?;
    let malformed = |detail: String| Error::Malformed { path: manifest_path.clone(), detail };
    let specs = enc.param_specs();
    if specs.len() != manifest.params.len() {
        return Err(malformed(format!("{} parameter entries, config implies {}", manifest.params.len(), specs.len())));
    }
    for ((spec, entry), slot) in specs.iter().zip(&manifest.params).zip(enc.params_mut()) {
        if spec.name != entry.name {
            return Err(malformed(format!("expected parameter {}, found {}", spec.name, entry.name)));
        }
        *slot = load_checked(dir, entry, &spec.dims)?;
    }
    let buffer_names: Vec<(String, Vec<usize>)> =
        enc.buffers().into_iter().map(|(n, t)| (n, t.dims().to_vec())).collect();
    if buffer_names.len() != manifest.buffers.len() {
        return Err(malformed("buffer count disagrees with config".into()));
    }
    for (((name, dims), entry), slot) in buffer_names.iter().zip(&manifest.buffers).zip(enc.buffers_mut()) {
        if *name != entry.name {
            return Err(malformed(format!("expected buffer {name}, found {}", entry.name)));
        }
        *slot = load_checked(dir, entry, dims)?;
    }
    enc.set_bn_updates(&manifest.bn_updates)?;
    Ok(enc)
}

fn load_checked<S: Scalar>(dir: &Path, entry: &TensorEntry, dims: &[usize]) -> Result<crate::Tensor<S>> {
    let path = dir.join(&entry.file);
    let t = read_ltf::<S>(&path)?;
    if t.dims() != dims {
        return Err(Error::Malformed { path, detail: format!("dims {:?}, expected {dims:?}", t.dims()) });
    }
    Ok(t)
}

/// Writes one LTF per rank plus `plan.json`.
pub fn save_shards<S: Scalar>(dir: impl AsRef<Path>, plan: &ShardPlan, shards: &[WeightShard<S>]) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    create_dir(dir)?;
    let mut written = Vec::new();
    for s in shards {
        let path = dir.join(format!("shard_{}.ltf", s.rank));
        write_ltf(&path, &s.weights)?;
        written.push(path);
    }
    let path = dir.join("plan.json");
    write_json(&path, plan)?;
    written.push(path);
    Ok(written)
}

/// Loads shards with zeroed momentum.
pub fn load_shards<S: Scalar>(dir: impl AsRef<Path>) -> Result<(ShardPlan, Vec<WeightShard<S>>)> {
    let dir = dir.as_ref();
    let plan: ShardPlan = read_json(dir.join("plan.json"))?;
    let check = ShardPlan::new(plan.n_classes, plan.world)?;
    if check != plan {
        return Err(Error::Malformed { path: dir.join("plan.json"), detail: "ranges are not the even split".into() });
    }
    let shards = plan
        .ranges
        .iter()
        .enumerate()
        .map(|(rank, r)| WeightShard::new(rank, r.clone(), read_ltf(dir.join(format!("shard_{rank}.ltf")))?))
        .collect::<Result<Vec<_>>>()?;
    Ok((plan, shards))
}
