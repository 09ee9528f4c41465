//! Tensor network engine: sequential layers with activation taps, a
//! reverse-mode gradient tape, Adam, and a weight container.

pub mod container;
pub(crate) mod kernels;
pub mod layer;
pub mod model;
pub mod optim;
pub mod tape;
pub mod train;

pub use container::{load_model, save_model, MODEL_VERSION};
pub use layer::{Layer, LayerKind};
pub use model::{ForwardPass, ModelBuilder, TappedModel};
pub use optim::Adam;
pub use tape::{gradients, Gradients, Tape, Var};
pub use train::{accuracy, train_classifier, EpochStats, TrainConfig, TrainedModel};
