//! Arrow block masks, FLOPs accounting and the block-sparse kernel.

mod kernel;
mod mask;

pub use kernel::{
    dense_tiled_attention, sparse_attention_forward, sparse_attention_head, streaming_softmax, RunningSoftmax,
};
pub use mask::{build_arrow_mask, dense_flops, flops_count, sparsity_ratio, ArrowSpec, BlockMask};
