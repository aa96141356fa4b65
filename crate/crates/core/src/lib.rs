//! Spatio-temporal GAN conditioned on extreme-event segmentation masks.
//!
//! A mask encoder turns a multi-class event mask sequence into a context
//! embedding that conditions the generator and the two causal optimal
//! transport critics `h` and `M`. Training minimizes a mixed Sinkhorn
//! divergence under a causal transport cost, with a martingale penalty on
//! `M`, using AdamW.

pub mod cot;
pub mod data;
pub mod encoder;
pub mod error;
pub mod gan;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{Error, ErrorKind, Result};
pub use tensor::{Real, Tensor};
