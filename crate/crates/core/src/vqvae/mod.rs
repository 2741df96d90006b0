//! Graph vector-quantized autoencoder: a two-layer mean-aggregation encoder,
//! a multi-head codebook with a shared projection, an MLP feature decoder,
//! and the reconstruction plus vector-quantization objective.

mod checkpoint;
mod model;
mod params;
mod train;
mod verify;

pub use checkpoint::{
    load_params, read_blob, read_toml, save_params, write_blob, write_toml, ParamsManifest,
    PARAMS_SCHEMA_VERSION,
};
pub use model::{
    assign_codes, decode_features, decode_taped, encode, encode_taped, encoder_layer, loss_feat,
    loss_pretrain, loss_pretrain_taped, loss_topo_dense, loss_topo_sampled, nearest_token, quantize,
    quantize_taped, BoundParams, CodeAssignment, LossBreakdown, LossVars, PreparedGraph, Topology,
};
pub use params::{Codebook, Decoder, EncoderLayer, GfmParams, Metric, ModelConfig, ENCODER_LAYERS};
pub use train::{local_pretrain, LocalOutcome, LocalTrainConfig};
pub use verify::{full_gradient_check, routing_check, RoutingReport};
