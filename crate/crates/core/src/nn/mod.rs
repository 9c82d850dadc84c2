//! A small sequential network stack with manual backpropagation and Adam.

mod adam;
pub mod arch;
pub mod checkpoint;
mod layers;
pub mod loss;
mod network;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use arch::{autoencoder_specs, build_autoencoder, build_classifier, classifier_specs, scale_channels};
pub use layers::{Layer, LayerSpec, Param, ParamKind};
pub use loss::{loss_ce, loss_l2};
pub use network::{infer_shapes, train_step, Batch, Mode, Network, Targets};
pub use tensor::{gemm, Scalar, Tensor};
