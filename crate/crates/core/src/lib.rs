//! Fixed-length representations of arbitrarily shaped districts from the
//! satellite tiles that cover them, and regression of economic scales from
//! those representations.
//!
//! The pipeline runs in four stages:
//!
//! 1. a small convolutional extractor is trained semi-supervised
//!    ([`convnet`], [`mean_teacher`]) on urban / rural / uninhabited tiles,
//! 2. tiles classified as uninhabited are dropped per district ([`pruning`]),
//! 3. tile embeddings are reduced with PCA ([`pca`]),
//! 4. each district's reduced tiles are summarised by mean, deviation, count
//!    and pairwise correlation plus their cross-products ([`spatial_stats`]),
//!    and a regressor is fitted on the result ([`regression`]).
//!
//! Tiles belong to a district when at least three of their four corners lie
//! inside its polygon ([`geo_tiles`]). [`pipeline`] wires the stages together
//! behind the `read-pipeline` command line and generates synthetic worlds
//! with planted ground truth.

mod codec;
pub mod convnet;
pub mod error;
pub mod geo_tiles;
pub mod imagery_store;
pub mod linalg;
pub mod mean_teacher;
pub mod pca;
pub mod pipeline;
pub mod pruning;
pub mod regression;
pub mod spatial_stats;

pub use error::{Error, Result};
