//! Global-scale location estimation from precomputed image feature vectors.
//!
//! The pipeline partitions the sphere into data-adaptive cells, trains
//! classification heads over those cells (plain cross-entropy, hierarchical,
//! and a von Mises-Fisher mixture), refines feature vectors into unit-norm
//! embeddings with a contrastively trained residual module, and at inference
//! time searches for the most similar background images within the predicted
//! cell, aggregating their locations by geodesic density clustering.
//!
//! Everything operates on feature vectors ingested from files (or produced by
//! the built-in synthetic generator); no image processing happens here.

mod binio;
pub mod classify;
pub mod data;
pub mod evaluate;
pub mod geo;
pub mod hash;
pub mod index;
pub mod numerics;
pub mod partition;
pub mod retrieve;
pub mod swc;
