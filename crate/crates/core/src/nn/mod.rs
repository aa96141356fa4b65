//! Differentiable tensor core: the recorded [`Graph`], parameter storage,
//! and the layer types used by the encoder, generator and critics.

pub(crate) mod conv;
pub mod gradcheck;
mod graph;
pub mod layers;
mod params;

pub use graph::{Gradients, Graph, Mode, Var};
pub use layers::{
    BatchNorm, BatchNormSpec, Conv2d, Conv2dSpec, ConvTranspose2d, Linear, Lstm, LstmSpec,
    DEFAULT_LEAKY_SLOPE,
};
pub use params::{uniform_tensor, Buffer, BufferId, Group, ParamId, ParamStore, Parameter, StatUpdate};
