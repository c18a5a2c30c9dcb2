//! Crack-segmentation stack built from scratch: a dense tensor engine with
//! reverse-mode autodiff, a selective-scan sequence core with extractable
//! hidden attention, the hybrid global/local mixer encoder, direction-guided
//! edge gating, a spatial-refinement decoder, plus synthetic data, metrics,
//! and training loops.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod decoder;
pub mod degconv;
pub mod error;
pub mod fdcheck;
pub mod init;
pub mod kernels;
pub mod loss;
pub mod metrics;
pub mod net;
pub mod optim;
pub mod rng;
pub mod scalar;
pub mod ssm;
pub mod tensor;
pub mod train;
pub mod transmixer;

pub use autodiff::{Gradients, Tape, Var};
pub use data::{CrackSpec, SegSample, Split};
pub use error::{Error, Result};
pub use metrics::MetricsReport;
pub use net::{Model, ModelConfig};
pub use rng::Rng;
pub use scalar::{Dtype, Scalar};
pub use ssm::{AttentionMatrix, ChannelSplit, ScanTrace};
pub use tensor::Tensor;
pub use train::TrainConfig;
