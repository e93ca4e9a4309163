//! Multimodal frame/caption autoencoding, latent clustering and cluster
//! interpretation.

// Range checks are written as `!(x > 0.0)` on purpose so that NaN fails them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod exec;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod textprep;
pub mod synth;
pub mod verbalize;
pub mod ingest;
pub mod cluster;
pub mod compare;
pub mod interpret;
pub mod plot;
