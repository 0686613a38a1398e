//! A small differentiable-network engine: layer kernels with analytic
//! backward passes, a miniature U-Net and CNN, Adam/BCE training with early
//! stopping, and the LKMB model format.

pub mod bundle;
pub mod network;
pub mod ops;
pub mod spec;
mod tensor;
pub mod train;

pub use bundle::{extract_features, predict, ModelBundle, TrainMeta};
pub use network::Network;
pub use ops::{Mode, Padding};
pub use spec::{build_mini_cnn, build_mini_unet, LayerSpec, NetworkSpec, Task};
pub use tensor::Tensor4;
pub use train::{train_model, EpochRecord, TrainConfig, TrainHistory};
