//! Recurrent deblurring network (RDN).
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`], [`ops`], [`optim`], [`gradcheck`]: a small dense tensor core with
//!   hand-written reverse-mode gradients for every layer the network uses.
//! * [`net`]: the deblur block, its recurrent unrolling with shared weights and the
//!   checkpoint format.
//! * [`datagen`]: synthesis of aligned blurry/sharp training pairs from sharp
//!   frame sequences (optical flow, subframe interpolation, frame averaging,
//!   camera-shake kernels).
//! * [`train`]: mini-batch optimisation of the unrolled network.
//! * [`infer`]: pairwise iterative deblurring of frame sequences, tiling and
//!   multi-scale inference, PSNR.
//!
//! Data-parallel inner loops run on rayon when the `parallel` feature is on
//! (default) and fall back to plain iterators otherwise. Results do not depend
//! on the number of threads.

pub mod datagen;
pub mod error;
pub mod exec;
pub mod gradcheck;
pub mod infer;
pub mod io;
pub mod net;
pub mod ops;
pub mod optim;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
