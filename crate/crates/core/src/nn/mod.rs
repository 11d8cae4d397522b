//! Reverse-mode differentiable building blocks.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use graph::{BnMode, Graph, NodeId};
pub use layers::{ConvBlock, Ctx, Layer, LayerSpec, Mode, Padding};
pub use optim::{Adam, AdamConfig};
pub use params::{ParamLayout, ParamStore};
pub use tensor::{Real, Tensor};
