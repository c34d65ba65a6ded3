//! Match pair retrieval for large unordered image collections.
//!
//! Local descriptors are aggregated into VLAD global vectors against a small
//! codebook trained online, indexed in an HNSW graph, and retrieved with an
//! adaptive similarity threshold. Retrieved pairs are verified with descriptor
//! matching plus RANSAC fundamental-matrix estimation, assembled into a
//! weighted view graph, and partitioned with recursive normalized cuts.
//!
//! A classical vocabulary-tree bag-of-words retriever ([`bow`]) is included as
//! the baseline for the benchmark harness in [`bench`].

pub mod bench;
pub mod binio;
pub mod bow;
pub mod codebook;
pub mod config;
pub mod descriptor;
pub mod distance;
pub mod hnsw;
pub mod hull;
pub mod partition;
pub mod pipeline;
pub mod retrieval;
pub mod seed;
pub mod synthetic;
pub mod verification;
pub mod view_graph;
pub mod vlad;

pub use codebook::{Codebook, KMeansParams, SamplingConfig};
pub use descriptor::{DescriptorSet, LocalFeature, DESCRIPTOR_DIM};
pub use hnsw::{HnswIndex, HnswParams};
pub use vlad::VladDescriptor;
