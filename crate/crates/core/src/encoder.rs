//! Feed-forward encoder: an MLP backbone plus a two-layer projection head,
//! with batch norm and a hand-written backward pass.
//!
//! For `hidden_dims = [h₁, h₂]` the layer stack is
//!
//! ```text
//! Linear → BN → act → Linear → BN → act        (backbone)
//! Linear → BN → act → Linear + bias            (head)
//! ```
//!
//! Linear layers that feed a BN carry no bias.
//!
//! [`forward_replicas`] and [`backward_replicas`] drive one encoder copy per
//! simulated worker, each over its own rows. Batch statistics and parameter
//! gradients go through all-reduce, so every replica sees whole-batch values
//! and the replicas stay bit-identical.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::collectives::{ReduceOp, WorkerGroup};
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

/// How batch norm behaves in one forward call.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BNMode {
    /// Batch statistics, running statistics updated, cache kept for backward.
    Train,
    /// Running statistics, nothing updated.
    Eval,
    /// Batch statistics and running updates, no backward.
    PriorExtract,
}

impl BNMode {
    pub fn uses_batch_stats(self) -> bool {
        !matches!(self, BNMode::Eval)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub embed_dim: usize,
    /// Width of the head's hidden layer; defaults to the head input width.
    pub head_hidden: Option<usize>,
    pub bn_momentum: f64,
    pub bn_epsilon: f64,
    pub activation: Activation,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            input_dim: 32,
            hidden_dims: vec![64],
            embed_dim: 128,
            head_hidden: None,
            bn_momentum: 0.1,
            bn_epsilon: 1e-5,
            activation: Activation::Relu,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.embed_dim == 0 || self.hidden_dims.contains(&0) || self.head_hidden == Some(0) {
            return Err(Error::Config("encoder dimensions must be at least 1".into()));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return Err(Error::Config(format!("bn_momentum must lie in (0, 1], got {}", self.bn_momentum)));
        }
        if !(self.bn_epsilon > 0.0) || !self.bn_epsilon.is_finite() {
            return Err(Error::Config(format!("bn_epsilon must be positive, got {}", self.bn_epsilon)));
        }
        Ok(())
    }

    pub fn head_input_dim(&self) -> usize {
        self.hidden_dims.last().copied().unwrap_or(self.input_dim)
    }

    pub fn head_hidden_dim(&self) -> usize {
        self.head_hidden.unwrap_or_else(|| self.head_input_dim())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<S> {
    /// `in × out`.
    pub weight: Tensor<S>,
    pub bias: Option<Tensor<S>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState<S> {
    pub scale: Tensor<S>,
    pub shift: Tensor<S>,
    pub running_mean: Tensor<S>,
    pub running_var: Tensor<S>,
    /// Number of running-statistics updates so far.
    pub updates: u64,
}

impl<S: Scalar> BatchNormState<S> {
    fn fresh(c: usize) -> Self {
        BatchNormState {
            scale: Tensor::filled(&[c], S::one()),
            shift: Tensor::zeros(&[c]),
            running_mean: Tensor::zeros(&[c]),
            running_var: Tensor::filled(&[c], S::one()),
            updates: 0,
        }
    }

    pub fn channels(&self) -> usize {
        self.scale.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer<S> {
    Linear(Linear<S>),
    BatchNorm(BatchNormState<S>),
    Act(Activation),
}

/// Name, shape and weight-decay flag of one trainable tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub dims: Vec<usize>,
    pub decay: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder<S> {
    config: EncoderConfig,
    layers: Vec<Layer<S>>,
    backbone_layers: usize,
}

/// Gradients from one backward pass, aligned with [`Encoder::params`].
#[derive(Debug, Clone)]
pub struct EncoderGrads<S> {
    pub params: Vec<Tensor<S>>,
    pub input: Tensor<S>,
}

#[derive(Debug, Clone)]
enum LayerCache<S> {
    Linear { input: Tensor<S> },
    BatchNorm { xhat: Tensor<S>, inv_std: Vec<S> },
    Relu { input: Tensor<S> },
    Tanh { output: Tensor<S> },
}

/// Forward-pass record. Only TRAIN forwards keep the layer activations.
#[derive(Debug, Clone)]
pub struct EncoderCache<S> {
    mode: BNMode,
    global_batch: usize,
    layers: Vec<LayerCache<S>>,
}

impl<S: Scalar> EncoderCache<S> {
    pub fn mode(&self) -> BNMode {
        self.mode
    }

    /// Normalized (pre-scale) BN outputs, one entry per BN layer.
    pub fn normalized(&self) -> Vec<&Tensor<S>> {
        self.layers
            .iter()
            .filter_map(|c| match c {
                LayerCache::BatchNorm { xhat, .. } => Some(xhat),
                _ => None,
            })
            .collect()
    }
}

/// Fresh encoder: He-style normal weights, BN scale 1, shift 0, running mean
/// 0, running variance 1. Deterministic in `seed`.
pub fn init_random<S: Scalar>(config: &EncoderConfig, seed: u64) -> Result<Encoder<S>> {
    config.validate()?;
    let gain = match config.activation {
        Activation::Relu => 2.0,
        Activation::Tanh => 1.0,
    };
    let mut layers = Vec::new();
    let linear = |layers: &mut Vec<Layer<S>>, fan_in: usize, fan_out: usize, bias: bool, g: f64| {
        let mut rng = stream_rng(seed, Stream::EncoderInit, &[layers.len() as u64]);
        let std = (g / fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| S::cast(std * rng.sample::<f64, _>(StandardNormal))).collect();
        layers.push(Layer::Linear(Linear {
            weight: Tensor::new(vec![fan_in, fan_out], data).expect("sized"),
            bias: bias.then(|| Tensor::zeros(&[fan_out])),
        }));
    };
    let mut width = config.input_dim;
    for &h in &config.hidden_dims {
        linear(&mut layers, width, h, false, gain);
        layers.push(Layer::BatchNorm(BatchNormState::fresh(h)));
        layers.push(Layer::Act(config.activation));
        width = h;
    }
    let backbone_layers = layers.len();
    let hh = config.head_hidden_dim();
    linear(&mut layers, width, hh, false, gain);
    layers.push(Layer::BatchNorm(BatchNormState::fresh(hh)));
    layers.push(Layer::Act(config.activation));
    linear(&mut layers, hh, config.embed_dim, true, 1.0);
    Ok(Encoder { config: config.clone(), layers, backbone_layers })
}

fn linear_forward<S: Scalar>(lin: &Linear<S>, x: &Tensor<S>) -> Result<Tensor<S>> {
    let mut y = x.matmul(&lin.weight)?;
    if let Some(b) = &lin.bias {
        let b = b.data();
        for i in 0..y.rows() {
            for (v, &bb) in y.row_mut(i).iter_mut().zip(b) {
                *v += bb;
            }
        }
    }
    Ok(y)
}

fn act_forward<S: Scalar>(act: Activation, x: &Tensor<S>) -> Tensor<S> {
    match act {
        Activation::Relu => x.map(|v| if v > S::zero() { v } else { S::zero() }),
        Activation::Tanh => x.map(S::tanh),
    }
}

fn bn_eval_forward<S: Scalar>(bn: &BatchNormState<S>, eps: S, x: &Tensor<S>) -> Tensor<S> {
    let c = bn.channels();
    let inv: Vec<S> = bn.running_var.data().iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
    let mut y = x.clone();
    for i in 0..y.rows() {
        let row = y.row_mut(i);
        for j in 0..c {
            let xhat = (row[j] - bn.running_mean.data()[j]) * inv[j];
            row[j] = bn.scale.data()[j] * xhat + bn.shift.data()[j];
        }
    }
    y
}

fn column_sums<S: Scalar>(x: &Tensor<S>) -> Vec<S> {
    let mut s = vec![S::zero(); x.cols()];
    for i in 0..x.rows() {
        for (a, &v) in s.iter_mut().zip(x.row(i)) {
            *a += v;
        }
    }
    s
}

impl<S: Scalar> Encoder<S> {
    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Layer<S>] {
        &self.layers
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    pub fn bn_states(&self) -> Vec<&BatchNormState<S>> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::BatchNorm(b) => Some(b),
                _ => None,
            })
            .collect()
    }

    /// Total BN channels, i.e. the width of each statistics all-reduce summed over layers.
    pub fn bn_channels(&self) -> usize {
        self.bn_states().iter().map(|b| b.channels()).sum()
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Linear(lin) => {
                    out.push(ParamSpec { name: format!("l{l}.weight"), dims: lin.weight.dims().to_vec(), decay: true });
                    if let Some(b) = &lin.bias {
                        out.push(ParamSpec { name: format!("l{l}.bias"), dims: b.dims().to_vec(), decay: true });
                    }
                }
                Layer::BatchNorm(bn) => {
                    let dims = vec![bn.channels()];
                    out.push(ParamSpec { name: format!("l{l}.scale"), dims: dims.clone(), decay: false });
                    out.push(ParamSpec { name: format!("l{l}.shift"), dims, decay: false });
                }
                Layer::Act(_) => {}
            }
        }
        out
    }

    /// Trainable tensors in [`Self::param_specs`] order.
    pub fn params(&self) -> Vec<&Tensor<S>> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Linear(lin) => {
                    out.push(&lin.weight);
                    out.extend(lin.bias.as_ref());
                }
                Layer::BatchNorm(bn) => {
                    out.push(&bn.scale);
                    out.push(&bn.shift);
                }
                Layer::Act(_) => {}
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Linear(lin) => {
                    out.push(&mut lin.weight);
                    out.extend(lin.bias.as_mut());
                }
                Layer::BatchNorm(bn) => {
                    out.push(&mut bn.scale);
                    out.push(&mut bn.shift);
                }
                Layer::Act(_) => {}
            }
        }
        out
    }

    /// Scalar count over all trainable tensors.
    pub fn num_params(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    /// Named non-trainable buffers (BN running statistics).
    pub fn buffers(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            if let Layer::BatchNorm(bn) = layer {
                out.push((format!("l{l}.running_mean"), &bn.running_mean));
                out.push((format!("l{l}.running_var"), &bn.running_var));
            }
        }
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            if let Layer::BatchNorm(bn) = layer {
                out.push(&mut bn.running_mean);
                out.push(&mut bn.running_var);
            }
        }
        out
    }

    pub fn bn_updates(&self) -> Vec<u64> {
        self.bn_states().iter().map(|b| b.updates).collect()
    }

    pub fn set_bn_updates(&mut self, counts: &[u64]) -> Result<()> {
        let mut it = counts.iter();
        for layer in &mut self.layers {
            if let Layer::BatchNorm(bn) = layer {
                bn.updates = *it.next().ok_or_else(|| Error::Shape("too few BN update counters".into()))?;
            }
        }
        if it.next().is_some() {
            return Err(Error::Shape("too many BN update counters".into()));
        }
        Ok(())
    }

    /// Bitwise equality of parameters, buffers and counters.
    pub fn bit_eq(&self, other: &Encoder<S>) -> bool {
        self.config == other.config
            && self.params().len() == other.params().len()
            && self.params().iter().zip(other.params()).all(|(a, b)| a.bit_eq(b))
            && self.buffers().iter().zip(other.buffers()).all(|(a, b)| a.1.bit_eq(b.1))
            && self.bn_updates() == other.bn_updates()
    }

    fn eval_layers(&self, x: &Tensor<S>, upto: usize) -> Result<Tensor<S>> {
        let (_, cols) = x.expect_matrix("encoder input")?;
        if cols != self.config.input_dim {
            return Err(Error::Shape(format!("encoder expects {} inputs, got {cols}", self.config.input_dim)));
        }
        let eps = S::cast(self.config.bn_epsilon);
        let mut h = x.clone();
        for layer in &self.layers[..upto] {
            h = match layer {
                Layer::Linear(lin) => linear_forward(lin, &h)?,
                Layer::BatchNorm(bn) => bn_eval_forward(bn, eps, &h),
                Layer::Act(a) => act_forward(*a, &h),
            };
        }
        h.ensure_finite("encoder output")?;
        Ok(h)
    }

    /// EVAL-mode embeddings. Takes `&self`, so concurrent callers are fine.
    pub fn forward_eval(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        self.eval_layers(x, self.layers.len())
    }

    /// EVAL-mode backbone features (before the projection head).
    pub fn backbone_eval(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        self.eval_layers(x, self.backbone_layers)
    }

    /// Single-worker forward in any mode.
    pub fn forward(&mut self, x: &Tensor<S>, mode: BNMode) -> Result<(Tensor<S>, EncoderCache<S>)> {
        let mut group = WorkerGroup::new(1)?;
        let mut out = forward_replicas(std::slice::from_mut(self), &mut group, std::slice::from_ref(x), mode)?;
        Ok(out.swap_remove(0))
    }

    /// Single-worker backward for a TRAIN cache.
    pub fn backward(&self, cache: &EncoderCache<S>, grad: &Tensor<S>) -> Result<EncoderGrads<S>> {
        let mut group = WorkerGroup::new(1)?;
        let mut out = backward_replicas(
            std::slice::from_ref(self),
            &mut group,
            std::slice::from_ref(cache),
            std::slice::from_ref(grad),
        )?;
        Ok(out.swap_remove(0))
    }
}

/// Forward over per-worker row blocks with synchronized batch statistics.
pub fn forward_replicas<S: Scalar>(
    replicas: &mut [Encoder<S>],
    group: &mut WorkerGroup,
    inputs: &[Tensor<S>],
    mode: BNMode,
) -> Result<Vec<(Tensor<S>, EncoderCache<S>)>> {
    let world = group.world();
    if replicas.len() != world || inputs.len() != world {
        return Err(Error::Shape(format!(
            "{} replicas and {} input blocks for {world} workers",
            replicas.len(),
            inputs.len()
        )));
    }
    let input_dim = replicas[0].config.input_dim;
    for x in inputs {
        let (_, cols) = x.expect_matrix("encoder input")?;
        if cols != input_dim {
            return Err(Error::Shape(format!("encoder expects {input_dim} inputs, got {cols}")));
        }
    }
    let global_batch: usize = inputs.iter().map(Tensor::rows).sum();
    if mode.uses_batch_stats() && global_batch < 2 {
        return Err(Error::InvalidArgument(format!(
            "batch statistics need at least 2 rows, got {global_batch}"
        )));
    }
    let keep = mode == BNMode::Train;
    let eps = S::cast(replicas[0].config.bn_epsilon);
    let momentum = S::cast(replicas[0].config.bn_momentum);
    let n_layers = replicas[0].layers.len();
    let mut h: Vec<Tensor<S>> = inputs.to_vec();
    let mut caches: Vec<Vec<LayerCache<S>>> = vec![Vec::new(); world];

    for l in 0..n_layers {
        match &replicas[0].layers[l] {
            Layer::Linear(_) => {
                for r in 0..world {
                    let Layer::Linear(lin) = &replicas[r].layers[l] else { unreachable!("replicas share structure") };
                    let y = linear_forward(lin, &h[r])?;
                    let x = std::mem::replace(&mut h[r], y);
                    if keep {
                        caches[r].push(LayerCache::Linear { input: x });
                    }
                }
            }
            Layer::Act(act) => {
                let act = *act;
                for r in 0..world {
                    let y = act_forward(act, &h[r]);
                    let x = std::mem::replace(&mut h[r], y);
                    if keep {
                        caches[r].push(match act {
                            Activation::Relu => LayerCache::Relu { input: x },
                            Activation::Tanh => LayerCache::Tanh { output: h[r].clone() },
                        });
                    }
                }
            }
            Layer::BatchNorm(_) if !mode.uses_batch_stats() => {
                for r in 0..world {
                    let Layer::BatchNorm(bn) = &replicas[r].layers[l] else { unreachable!("replicas share structure") };
                    h[r] = bn_eval_forward(bn, eps, &h[r]);
                }
            }
            Layer::BatchNorm(bn0) => {
                let c = bn0.channels();
                let b = S::cast(global_batch as f64);
                let sums: Vec<Tensor<S>> = h.iter().map(|x| Tensor::new(vec![c], column_sums(x))).collect::<Result<_>>()?;
                let mean: Vec<S> = group.all_reduce(&sums, ReduceOp::Sum)?.swap_remove(0).data().iter().map(|&s| s / b).collect();
                let mut sq = Vec::with_capacity(world);
                for x in &h {
                    let mut s = vec![S::zero(); c];
                    for i in 0..x.rows() {
                        for (j, &v) in x.row(i).iter().enumerate() {
                            let d = v - mean[j];
                            s[j] += d * d;
                        }
                    }
                    sq.push(Tensor::new(vec![c], s)?);
                }
                let var: Vec<S> = group.all_reduce(&sq, ReduceOp::Sum)?.swap_remove(0).data().iter().map(|&s| s / b).collect();
                let inv_std: Vec<S> = var.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
                let unbias = b / (b - S::one());
                for r in 0..world {
                    let Layer::BatchNorm(bn) = &mut replicas[r].layers[l] else { unreachable!("replicas share structure") };
                    let mut xhat = h[r].clone();
                    let mut y = h[r].clone();
                    for i in 0..xhat.rows() {
                        let (xr, yr) = (xhat.row_mut(i), y.row_mut(i));
                        for j in 0..c {
                            xr[j] = (xr[j] - mean[j]) * inv_std[j];
                            yr[j] = bn.scale.data()[j] * xr[j] + bn.shift.data()[j];
                        }
                    }
                    for j in 0..c {
                        let rm = &mut bn.running_mean.data_mut()[j];
                        *rm = (S::one() - momentum) * *rm + momentum * mean[j];
                        let rv = &mut bn.running_var.data_mut()[j];
                        *rv = (S::one() - momentum) * *rv + momentum * var[j] * unbias;
                    }
                    bn.updates += 1;
                    h[r] = y;
                    if keep {
                        caches[r].push(LayerCache::BatchNorm { xhat, inv_std: inv_std.clone() });
                    }
                }
            }
        }
    }
    h.into_iter()
        .zip(caches)
        .map(|(y, layers)| {
            y.ensure_finite("encoder output")?;
            Ok((y, EncoderCache { mode, global_batch, layers }))
        })
        .collect()
}

/// Backward over per-worker TRAIN caches. Parameter gradients are summed
/// across workers in one all-reduce; input gradients stay local.
pub fn backward_replicas<S: Scalar>(
    replicas: &[Encoder<S>],
    group: &mut WorkerGroup,
    caches: &[EncoderCache<S>],
    grads: &[Tensor<S>],
) -> Result<Vec<EncoderGrads<S>>> {
    let world = group.world();
    if replicas.len() != world || caches.len() != world || grads.len() != world {
        return Err(Error::Shape(format!("backward needs one replica, cache and gradient per worker ({world})")));
    }
    for c in caches {
        if c.mode != BNMode::Train {
            return Err(Error::State(format!("backward needs a TRAIN-mode cache, got {:?}", c.mode)));
        }
    }
    let global_batch = caches[0].global_batch;
    let b = S::cast(global_batch as f64);
    let n_layers = replicas[0].layers.len();
    let mut dy: Vec<Tensor<S>> = grads.to_vec();
    for (r, g) in dy.iter().enumerate() {
        let rows = match caches[r].layers.first() {
            Some(LayerCache::Linear { input }) => input.rows(),
            _ => return Err(Error::State("encoder cache is empty".into())),
        };
        if g.dims() != [rows, replicas[r].config.embed_dim] {
            return Err(Error::Shape(format!("embedding gradient dims {:?}, expected [{rows}, {}]", g.dims(), replicas[r].config.embed_dim)));
        }
    }
    // per rank, param grads in reverse layer order (re-reversed below)
    let mut local: Vec<Vec<Tensor<S>>> = vec![Vec::new(); world];

    for l in (0..n_layers).rev() {
        match &replicas[0].layers[l] {
            Layer::Linear(_) => {
                for r in 0..world {
                    let Layer::Linear(lin) = &replicas[r].layers[l] else { unreachable!("replicas share structure") };
                    let LayerCache::Linear { input } = &caches[r].layers[l] else {
                        return Err(Error::State("cache does not match encoder layout".into()));
                    };
                    let g = &dy[r];
                    if lin.bias.is_some() {
                        local[r].push(Tensor::new(vec![g.cols()], column_sums(g))?);
                    }
                    local[r].push(input.t_matmul(g)?);
                    dy[r] = g.matmul_t(&lin.weight)?;
                }
            }
            Layer::Act(_) => {
                for r in 0..world {
                    let g = &mut dy[r];
                    match &caches[r].layers[l] {
                        LayerCache::Relu { input } => {
                            for (gv, &x) in g.data_mut().iter_mut().zip(input.data()) {
                                if x <= S::zero() {
                                    *gv = S::zero();
                                }
                            }
                        }
                        LayerCache::Tanh { output } => {
                            for (gv, &t) in g.data_mut().iter_mut().zip(output.data()) {
                                *gv *= S::one() - t * t;
                            }
                        }
                        _ => return Err(Error::State("cache does not match encoder layout".into())),
                    }
                }
            }
            Layer::BatchNorm(bn0) => {
                let c = bn0.channels();
                let mut dxhats = Vec::with_capacity(world);
                let mut partial = Vec::with_capacity(world);
                for r in 0..world {
                    let Layer::BatchNorm(bn) = &replicas[r].layers[l] else { unreachable!("replicas share structure") };
                    let LayerCache::BatchNorm { xhat, .. } = &caches[r].layers[l] else {
                        return Err(Error::State("cache does not match encoder layout".into()));
                    };
                    let g = &dy[r];
                    let mut dscale = vec![S::zero(); c];
                    let mut dshift = vec![S::zero(); c];
                    let mut s = vec![S::zero(); 2 * c];
                    let mut dxhat = g.clone();
                    for i in 0..g.rows() {
                        let (gr, xr, dr) = (g.row(i), xhat.row(i), dxhat.row_mut(i));
                        for j in 0..c {
                            dscale[j] += gr[j] * xr[j];
                            dshift[j] += gr[j];
                            dr[j] = gr[j] * bn.scale.data()[j];
                            s[j] += dr[j];
                            s[c + j] += dr[j] * xr[j];
                        }
                    }
                    local[r].push(Tensor::new(vec![c], dshift)?);
                    local[r].push(Tensor::new(vec![c], dscale)?);
                    dxhats.push(dxhat);
                    partial.push(Tensor::new(vec![2 * c], s)?);
                }
                let sums = group.all_reduce(&partial, ReduceOp::Sum)?.swap_remove(0).into_data();
                for (r, mut dxhat) in dxhats.into_iter().enumerate() {
                    let LayerCache::BatchNorm { xhat, inv_std } = &caches[r].layers[l] else { unreachable!() };
                    for i in 0..dxhat.rows() {
                        let (dr, xr) = (dxhat.row_mut(i), xhat.row(i));
                        for j in 0..c {
                            dr[j] = inv_std[j] / b * (b * dr[j] - sums[j] - xr[j] * sums[c + j]);
                        }
                    }
                    dy[r] = dxhat;
                }
            }
        }
    }

    let shapes: Vec<Vec<usize>> = replicas[0].params().iter().map(|t| t.dims().to_vec()).collect();
    let flat: Vec<Tensor<S>> = local
        .into_iter()
        .map(|mut v| {
            v.reverse();
            let total: usize = v.iter().map(Tensor::len).sum();
            Tensor::new(vec![total], v.into_iter().flat_map(Tensor::into_data).collect())
        })
        .collect::<Result<_>>()?;
    let summed = group.all_reduce(&flat, ReduceOp::Sum)?.swap_remove(0).into_data();
    let mut params = Vec::with_capacity(shapes.len());
    let mut off = 0;
    for dims in shapes {
        let n: usize = dims.iter().product();
        params.push(Tensor::new(dims, summed[off..off + n].to_vec())?);
        off += n;
    }
    Ok(dy.into_iter().map(|input| EncoderGrads { params: params.clone(), input }).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sharded::split_evenly;
    use crate::tensor::max_relative_error;

    fn cfg(act: Activation) -> EncoderConfig {
        EncoderConfig {
            input_dim: 5,
            hidden_dims: vec![6, 4],
            embed_dim: 3,
            head_hidden: Some(5),
            bn_momentum: 0.1,
            bn_epsilon: 1e-5,
            activation: act,
        }
    }

    fn randn(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
        let mut rng = stream_rng(seed, Stream::Evaluation, &[]);
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
    }

    #[test]
    fn init_is_deterministic_and_fresh() {
        let a = init_random::<f64>(&cfg(Activation::Relu), 3).unwrap();
        let b = init_random::<f64>(&cfg(Activation::Relu), 3).unwrap();
        let c = init_random::<f64>(&cfg(Activation::Relu), 4).unwrap();
        assert!(a.bit_eq(&b));
        assert!(!a.bit_eq(&c));
        for bn in a.bn_states() {
            assert!(bn.scale.data().iter().all(|&v| v == 1.0));
            assert!(bn.shift.is_all_zero() && bn.running_mean.is_all_zero());
            assert!(bn.running_var.data().iter().all(|&v| v == 1.0));
        }
        let specs = a.param_specs();
        assert_eq!(specs.len(), a.params().len());
        assert!(specs.iter().all(|s| s.decay != (s.name.ends_with("scale") || s.name.ends_with("shift"))));
    }

    #[test]
    fn fresh_eval_matches_identity_normalization() {
        let enc = init_random::<f64>(&cfg(Activation::Tanh), 1).unwrap();
        let x = randn(4, 5, 2);
        let eps = 1e-5f64;
        let mut h = x.clone();
        for layer in enc.layers() {
            h = match layer {
                Layer::Linear(lin) => linear_forward(lin, &h).unwrap(),
                Layer::BatchNorm(_) => h.map(|v| v / (1.0 + eps).sqrt()),
                Layer::Act(_) => h.map(f64::tanh),
            };
        }
        assert!(max_relative_error(enc.forward_eval(&x).unwrap().data(), h.data(), 1e-12) < 1e-12);
    }

    #[test]
    fn eval_is_per_sample_and_stateless() {
        let mut enc = init_random::<f64>(&cfg(Activation::Relu), 1).unwrap();
        enc.forward(&randn(16, 5, 9), BNMode::Train).unwrap();
        let before = enc.clone();
        let x = randn(8, 5, 3);
        let full = enc.forward_eval(&x).unwrap();
        for i in 0..8 {
            let one = enc.forward_eval(&x.slice_rows(i..i + 1)).unwrap();
            assert_eq!(one.row(0), full.row(i));
        }
        let (y, cache) = enc.forward(&x, BNMode::Eval).unwrap();
        assert!(y.bit_eq(&full));
        assert!(enc.bit_eq(&before));
        assert!(matches!(enc.backward(&cache, &y), Err(Error::State(_))));
    }

    #[test]
    fn train_mode_normalizes_each_channel() {
        let mut enc = init_random::<f64>(&cfg(Activation::Relu), 5).unwrap();
        let x = randn(32, 5, 6).map(|v| 3.0 * v + 1.5);
        let (_, cache) = enc.forward(&x, BNMode::Train).unwrap();
        let bns = cache.normalized();
        assert_eq!(bns.len(), 3);
        for xhat in bns {
            for j in 0..xhat.cols() {
                let col = xhat.column(j);
                let mean = col.iter().sum::<f64>() / 32.0;
                let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 32.0;
                assert!(mean.abs() < 1e-6);
                // eps in the denominator pulls the variance a hair under one
                assert!((var - 1.0).abs() < 1e-4, "var {var}");
            }
        }
    }

    #[test]
    fn batch_of_one_needs_running_stats() {
        let mut enc = init_random::<f64>(&cfg(Activation::Relu), 5).unwrap();
        let x = randn(1, 5, 1);
        assert!(enc.forward(&x, BNMode::Train).is_err());
        assert!(enc.forward(&x, BNMode::PriorExtract).is_err());
        assert!(enc.forward(&x, BNMode::Eval).is_ok());
    }

    #[test]
    fn two_step_running_mean_oracle() {
        let config = EncoderConfig { hidden_dims: vec![4], ..cfg(Activation::Relu) };
        let mut enc = init_random::<f64>(&config, 2).unwrap();
        let Layer::Linear(first) = enc.layers()[0].clone() else { panic!() };
        let (x1, x2) = (randn(6, 5, 1), randn(7, 5, 2));
        let m = 0.1;
        let mut rm = vec![0.0; 4];
        let mut rv = vec![1.0; 4];
        for x in [&x1, &x2] {
            let pre = x.matmul(&first.weight).unwrap();
            let n = pre.rows() as f64;
            for j in 0..4 {
                let col = pre.column(j);
                let mean = col.iter().sum::<f64>() / n;
                let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
                rm[j] = (1.0 - m) * rm[j] + m * mean;
                rv[j] = (1.0 - m) * rv[j] + m * var;
            }
            enc.forward(x, BNMode::PriorExtract).unwrap();
        }
        let bn = enc.bn_states()[0];
        assert_eq!(bn.updates, 2);
        assert!(max_relative_error(bn.running_mean.data(), &rm, 1e-12) < 1e-12);
        assert!(max_relative_error(bn.running_var.data(), &rv, 1e-12) < 1e-12);
    }

    #[test]
    fn prior_extract_leaves_params_alone() {
        let mut enc = init_random::<f64>(&cfg(Activation::Relu), 2).unwrap();
        let params: Vec<Tensor<f64>> = enc.params().into_iter().cloned().collect();
        enc.forward(&randn(8, 5, 1), BNMode::PriorExtract).unwrap();
        assert!(enc.params().iter().zip(&params).all(|(a, b)| a.bit_eq(b)));
        assert!(!enc.bn_states()[0].running_mean.is_all_zero());
    }

    #[test]
    fn single_linear_gradient_is_closed_form() {
        let lin = Linear { weight: randn(3, 2, 1), bias: Some(Tensor::zeros(&[2])) };
        let enc = Encoder::<f64> {
            config: EncoderConfig { input_dim: 3, hidden_dims: vec![], embed_dim: 2, ..Default::default() },
            layers: vec![Layer::Linear(lin.clone())],
            backbone_layers: 0,
        };
        let x = randn(4, 3, 2);
        let g = randn(4, 2, 3);
        let cache = EncoderCache { mode: BNMode::Train, global_batch: 4, layers: vec![LayerCache::Linear { input: x.clone() }] };
        let grads = enc.backward(&cache, &g).unwrap();
        assert!(grads.params[0].bit_eq(&x.transpose().matmul(&g).unwrap()));
        assert_eq!(grads.params[1].data(), column_sums(&g).as_slice());
        assert!(grads.input.bit_eq(&g.matmul(&lin.weight.transpose()).unwrap()));
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let mut enc = init_random::<f64>(&cfg(Activation::Tanh), 2).unwrap();
        let (y, cache) = enc.forward(&randn(6, 5, 1), BNMode::Train).unwrap();
        let grads = enc.backward(&cache, &Tensor::zeros(y.dims())).unwrap();
        assert!(grads.params.iter().all(Tensor::is_all_zero));
        assert!(grads.input.is_all_zero());
    }

    fn fd_check(act: Activation, seed: u64) -> f64 {
        let enc0 = init_random::<f64>(&cfg(act), seed).unwrap();
        let x = randn(7, 5, seed + 100);
        let probe = randn(7, 3, seed + 200);
        let objective = |e: &Encoder<f64>, x: &Tensor<f64>| {
            let mut e = e.clone();
            let (y, _) = e.forward(x, BNMode::Train).unwrap();
            y.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut e = enc0.clone();
        let (_, cache) = e.forward(&x, BNMode::Train).unwrap();
        let grads = enc0.backward(&cache, &probe).unwrap();
        let h = 1e-5;
        let mut worst = 0.0f64;
        for p in 0..grads.params.len() {
            let mut fd = Vec::new();
            for k in 0..grads.params[p].len() {
                let mut plus = enc0.clone();
                plus.params_mut()[p].data_mut()[k] += h;
                let mut minus = enc0.clone();
                minus.params_mut()[p].data_mut()[k] -= h;
                fd.push((objective(&plus, &x) - objective(&minus, &x)) / (2.0 * h));
            }
            worst = worst.max(max_relative_error(grads.params[p].data(), &fd, 1e-4));
        }
        let mut fd = Vec::new();
        for k in 0..x.len() {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp.data_mut()[k] += h;
            xm.data_mut()[k] -= h;
            fd.push((objective(&enc0, &xp) - objective(&enc0, &xm)) / (2.0 * h));
        }
        worst.max(max_relative_error(grads.input.data(), &fd, 1e-4))
    }

    #[test]
    fn full_network_matches_finite_differences() {
        for seed in 0..3 {
            for act in [Activation::Tanh, Activation::Relu] {
                let err = fd_check(act, seed);
                assert!(err < 1e-5, "{act:?} seed {seed}: {err}");
            }
        }
    }

    #[test]
    fn replicas_match_single_worker() {
        let base = init_random::<f64>(&cfg(Activation::Relu), 8).unwrap();
        let x = randn(10, 5, 1);
        let g = randn(10, 3, 2);
        let mut single = base.clone();
        let (y1, c1) = single.forward(&x, BNMode::Train).unwrap();
        let g1 = single.backward(&c1, &g).unwrap();
        for world in [2, 3, 4] {
            let mut reps = vec![base.clone(); world];
            let mut group = WorkerGroup::new(world).unwrap();
            let ranges = split_evenly(10, world);
            let xs: Vec<_> = ranges.iter().map(|r| x.slice_rows(r.clone())).collect();
            let gs: Vec<_> = ranges.iter().map(|r| g.slice_rows(r.clone())).collect();
            let out = forward_replicas(&mut reps, &mut group, &xs, BNMode::Train).unwrap();
            let (ys, caches): (Vec<_>, Vec<_>) = out.into_iter().unzip();
            let grads = backward_replicas(&reps, &mut group, &caches, &gs).unwrap();
            let y = Tensor::concat_rows(&ys).unwrap();
            assert!(max_relative_error(y.data(), y1.data(), 1e-12) < 1e-12);
            for (a, b) in grads[0].params.iter().zip(&g1.params) {
                assert!(max_relative_error(a.data(), b.data(), 1e-12) < 1e-10);
            }
            let dx = Tensor::concat_rows(&grads.iter().map(|gr| gr.input.clone()).collect::<Vec<_>>()).unwrap();
            assert!(max_relative_error(dx.data(), g1.input.data(), 1e-12) < 1e-10);
            assert!(reps.iter().all(|r| r.bit_eq(&reps[0])));
            assert!(max_relative_error(reps[0].buffers()[0].1.data(), single.buffers()[0].1.data(), 1e-12) < 1e-12);
        }
    }
}
