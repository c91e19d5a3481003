//! Watermark encoder, score decoder and seam blending.

mod blend;
mod decoder;
mod encoder;
pub(crate) mod layers;
pub(crate) mod resnet;

pub use blend::{blend_edges, blend_edges_var, edge_mask};
pub use decoder::{Activation, Decoder, DecoderConfig, Pooling, StageConfig};
pub use encoder::{Encoder, EncoderConfig};
pub use resnet::ResNetConfig;

/// Band width of the seam blend, in pixels.
pub const DEFAULT_BLEND_WIDTH: usize = 3;
