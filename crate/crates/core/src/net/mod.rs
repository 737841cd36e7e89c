//! The deblur block and its recurrent, weight-shared unrolling.

mod block;
pub mod checkpoint;
mod container;
mod params;
mod unroll;

pub use block::{
    deblur_block, deblur_block_backward, deblur_block_forward, BlockTape, DeblurState,
    TemporalFeatures,
};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub(crate) use container::{read_container, write_container, Entry};
pub use params::{
    init_params, Layer, LayerGrads, LayerKind, RdnGrads, RdnParams, WidthMultiplier, LAYER_NAMES,
};
pub use unroll::{rdn_unroll, rdn_unroll_grad, UnrollGrad, UnrollOutput};
