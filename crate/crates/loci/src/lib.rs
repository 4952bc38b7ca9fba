//! Loci: a slot-based looped world model at desk scale.
//!
//! The model tracks objects as per-slot "what" (Gestalt) and "where"
//! (position) codes, predicts their dynamics in latent space, and fuses
//! latent imaginations with pixel observations through learned percept
//! gates. The crate bundles the full stack: a small autodiff engine, the
//! scene algebra, the networks, the processing loop, training, synthetic
//! scenario generators, and the evaluation metrics, plus a CLI.

pub mod rng;
pub mod tensor;
