mod conv;
mod elementwise;
mod norm;
mod reduce;
mod shape;

pub use elementwise::PixelMask;
