//! Weight compression: self-contained trainable nets, Euclidean projections
//! onto sparsity/quantization constraint sets, and the ADMM outer loop with
//! masked retraining and progressive tightening.

mod admm;
mod net;
mod projection;

pub use admm::{
    admm_compress, export_compressed, masked_retrain, net_from_graph, progressive_compress,
    AdmmSchedule, AdmmState, ConstraintSpec, HistoryEntry, PruneSpec, QuantSpec,
};
pub use net::{
    accuracy, conv_init, forward_backward, logits_for, predict, train_dense, ParamGrad,
    SgdOptions, TrainLayer, TrainableNet,
};
pub use projection::{project_quantization, project_sparsity, quant_levels, support_mask};
