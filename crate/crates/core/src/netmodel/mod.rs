//! Desk-scale networks with filter grouping, per-filter scales and
//! synthetic data.

mod dataset;
mod network;

pub use dataset::{blob_centers, make_blobs, Dataset};
pub use network::{
    build_cnn, build_cnn_scaled, build_mlp, build_mlp_scaled, init_std, Activation, CnnSpec, Granularity, Layer,
    LayerKind, Network, ParamRole, PruneGroup,
};
