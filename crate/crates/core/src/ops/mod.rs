//! Differentiable tensor operations.

pub mod conv;
pub mod elementwise;
pub mod norm;
pub mod pool;
pub mod resize;
pub mod shape;

pub use conv::{conv2d, conv_out_size, Conv2dOpts};
pub use elementwise::sigmoid;
pub use norm::{batch_norm_eval, batch_norm_train, BatchMoments};
pub use pool::adaptive_window;
pub use resize::{bilinear_taps, resize_bilinear};
pub use shape::concat_channels;
