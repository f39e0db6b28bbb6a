//! Hyperbolic multimodal embeddings for taxonomic hierarchies.
//!
//! Image, DNA and taxonomic-label encoders are projected onto the Lorentz
//! hyperboloid and trained with contrastive and stacked entailment-cone
//! objectives; retrieval is evaluated per taxonomic rank for seen and
//! unseen taxa.

pub mod dataset;
pub mod evaluator;
pub mod losses;
pub mod manifold;
pub mod numerics;
pub mod trainer;
