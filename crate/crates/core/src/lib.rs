//! Content-adaptive single-image super-resolution.
//!
//! Low-resolution patches are scored by a vertical-gradient prior, tagged
//! mild / moderate / severe, and routed through early, middle, or full exits
//! of a small convolutional network. The early exits run dilated filter
//! banks that are rolled in place of the regular ones, widening the
//! receptive field of the short paths without touching the full path.
//!
//! Module map:
//! - [`tensorops`]: dense NCHW tensors, convolution (plain, dilated,
//!   transposed), Leaky ReLU, exact gradients, parameter init.
//! - [`imagepipe`]: PNG/PNM I/O, BT.601 color conversion, bicubic
//!   resampling, patch cropping and reassembly.
//! - [`prior`]: the gradient prior, difficulty thresholds and tags.
//! - [`prnet`]: the routed model, rolling filter swap, whole-image
//!   super-resolution, checkpoints, MAC accounting.
//! - [`training`]: L2 backprop through routed paths, the tag-homogeneous
//!   training loop, learning-rate schedule.
//! - [`evalbench`]: PSNR/SSIM, dataset evaluation, gain analysis,
//!   threshold / rolling / stage-depth ablations, timing reports.

pub mod error;
pub mod evalbench;
pub mod imagepipe;
pub mod prior;
pub mod prnet;
pub mod tensorops;
pub mod training;

pub use error::{PrnError, Result};
