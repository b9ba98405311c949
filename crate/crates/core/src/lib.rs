//! Cross-domain visual emotion recognition on a procedurally generated
//! two-domain corpus.
//!
//! The pipeline couples a knowledge-conditioned denoising feature extractor
//! (latent encoder, noise schedule, four-level conv backbone with
//! knowledge-guided cross-attention adapted by LoRA, feature-pyramid fusion,
//! mixture-of-experts prediction) with a counterfactual language-image
//! alignment head that produces pseudo-labels for the unlabeled target
//! domain. Everything runs in f64 on the CPU; batch work fans out over rayon
//! when the `parallel` feature (default) is enabled and falls back to
//! sequential execution otherwise, with identical results either way.




pub mod error;

pub mod graph;


pub mod nn;
pub mod par;
pub mod rng;
pub mod synthcorpus;
pub mod textkb;


pub use error::{Error, Result};
