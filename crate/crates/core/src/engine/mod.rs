//! Execution kernels and the graph executor.

mod config;
mod conv;
mod executor;
mod gemm;
mod pool;
mod spmm;

pub use config::{KernelConfig, LoadCounter, LoopOrder};
pub use conv::{conv2d_direct, depthwise_conv2d};
pub use executor::{execute_graph, execute_graph_profiled, ExecOptions, ProfileRow};
pub use gemm::{gemm_naive, gemm_tiled, gemm_tiled_mt};
pub use pool::{apply_activation, elementwise_add, pool2d};
pub use spmm::{
    pack_weights_tiled, spmm_csr_elementwise_counted, spmm_csr_tiled, spmm_csr_tiled_counted,
    spmm_csr_tiled_mt,
};
