//! Attention as unrolled clustering.
//!
//! Centroid attention summarises `N` input tokens into `M ≤ N` centroids by
//! running a few gradient-ascent steps on a soft k-means objective, and
//! ordinary self-attention falls out as the `M = N` special case. The crate
//! provides the dense kernels, a small reverse-mode autodiff engine that can
//! train through the unrolled updates, clustering utilities, the energy-based
//! reading of both updates, and a trainable transformer stack mixing the two.

pub mod attention;
pub mod autodiff;
pub mod clustering;
pub mod energy;
pub mod error;
pub mod harness;
pub mod model;
pub mod tensor;

pub use attention::{
    centroid_attention, centroid_update_step, knn_mask, self_attention, AttentionParams,
    CentroidAttentionConfig, CentroidHead, HeadCombine, HeadParams, KnnMask, NormAxis,
    SimilarityKernel, ValueFn,
};
pub use autodiff::{finite_diff_check, numeric_gradient, FdReport, GradientMap, Graph, NodeId};
pub use clustering::{
    farthest_point_sample, lloyd_kmeans, soft_kmeans_objective, ClusterAssignment, Initializer,
};
pub use error::{Error, Result};
pub use model::{build_model, BlockSpec, Model, ModelSpec, Pooling};
pub use tensor::Tensor;
