//! Jigsaw-keyed invisible image watermarking.
//!
//! An encoder adds a residual to a block-shuffled image; a decoder scores
//! whether an image, shuffled by a claimed key, carries a correctly ordered
//! watermark. Both are trained contrastively against perturbations that are
//! never differentiated through.

pub mod attacks;
pub mod checkpoint;
pub mod desk;
pub mod detect;
pub mod error;
pub mod hav;
pub mod image;
pub mod jigsaw;
pub mod losses;
pub mod model;
pub mod nets;
pub mod oracle;
pub mod perturb;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
pub use jigwm_autograd as autograd;
pub use jigwm_autograd::{Scalar, Tensor};

pub type Image32 = image::Image<f32>;
pub type Image64 = image::Image<f64>;
pub type Encoder32 = nets::Encoder<f32>;
pub type Decoder32 = nets::Decoder<f32>;
