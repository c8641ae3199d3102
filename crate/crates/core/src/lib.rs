//! Few-pair alignment of frozen unimodal embedding spaces.
//!
//! Two pretrained encoders produce embeddings for a small set of paired
//! samples. This crate learns lightweight maps `f1`, `f2` into a shared space
//! with a symmetric contrastive loss plus a regularizer that keeps the
//! multi-scale neighborhood geometry of each pretrained space, and provides
//! layer selection, evaluation metrics and bound calculators.

pub mod eval;
pub mod grad;
pub mod rng;
pub mod select;
pub mod store;
pub mod structure;
pub mod synth;
pub mod train;
