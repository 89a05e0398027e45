//! Full instance classification on a desk-scale budget.
//!
//! Every example in a dataset is its own class. The classifier over those
//! classes is sharded across simulated workers (hybrid parallelism: the
//! encoder is replicated, the softmax weights are split), and two training
//! accelerators are provided: classifier initialization from the features of
//! a fixed random encoder with running batch-norm statistics, and label
//! smoothing restricted to the hardest negative classes.
//!
//! Module map:
//!
//! - [`tensor`], [`math`]: dense primitives, cosine logits, the smoothed
//!   softmax loss and its gradients.
//! - [`encoder`]: MLP backbone + projection head with batch norm.
//! - [`collectives`]: deterministic in-process collectives with byte accounting.
//! - [`sharded`]: shard plans and the distributed softmax classifier.
//! - [`prior`]: contrastive-prior weight initialization and diagnostics.
//! - [`smoothing`]: hardest-class discovery and smoothed label sets.
//! - [`trainer`]: schedule, SGD, and the training loop.
//! - [`data`]: synthetic datasets, augmentation, and the LTF tensor format.
//! - [`eval`]: linear probe, kNN, instance accuracy, correlation report.
//! - [`memory`]: analytic memory and communication cost model.

pub mod checkpoint;
pub mod collectives;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod math;
pub mod memory;
pub mod prior;
pub mod rng;
pub mod sharded;
pub mod smoothing;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{DType, Scalar, Tensor};
