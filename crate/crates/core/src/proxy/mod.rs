//! Proxy attention, proxy bias, Proxy Blocks, output heads, cluster feature
//! extraction, attention pooling and the FLOPs accountant.

mod attention;
mod bias;
mod block;
mod flops;
mod heads;
mod pointnet;
mod pool;

pub use attention::{
    composite_weights, proxy_attention, proxy_attention_forward, proxy_attention_pullback, ProxyAttentionGrads,
    ProxyAttentionCache,
};
pub use bias::{
    interpolation_matrix, proxy_bias, proxy_bias_pullback, proxy_bias_rows, ProxyBiasParams,
    ProxyBiasShape,
};
pub use block::{
    proxy_block, proxy_block_backward, proxy_block_forward, stack_backward, stack_forward,
    stack_forward_cached, BlockCache, BlockGrads, ProxyBlockParams, StackGrads,
};
pub use flops::{
    bias_params_per_row, closest_to, flops_count, param_count, reduction, sweep, AttentionVariant,
    FlopsBreakdown, FlopsConfig, FlopsReport, ParamBreakdown, SweepGrid, SweepPoint,
};
pub use heads::{
    rows_to_matrix3, rows_to_vec3, transform_head, transform_head_pullback, translation_head,
    translation_head_pullback, HeadParams, TransformForm,
};
pub use pointnet::{
    pointnet_lite, pointnet_lite_backward, pointnet_lite_forward, PointNetParams, PointNetTrace,
};
pub use pool::{
    attention_pool, attention_pool_groups, attention_pool_groups_forward,
    attention_pool_groups_pullback, PoolParams, PoolTrace,
};
