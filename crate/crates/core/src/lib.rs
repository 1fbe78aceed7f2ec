//! Interpretable face representations.
//!
//! A small reverse-mode engine ([`graph`]) drives a hypercolumn network
//! ([`network`]) trained with filter/response diversity losses, large
//! magnitude filtering and occlusion-aware feature losses ([`losses`]).
//! Occluders are defined on a triangulated frontal face template and
//! transported to posed faces through barycentric coordinates ([`geometry`]).

pub mod analysis;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod experiment;
pub mod geometry;
pub mod graph;
pub mod losses;
pub mod network;
pub mod ops;
pub mod synthdata;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use graph::{Graph, NodeId};
pub use tensor::Tensor;
