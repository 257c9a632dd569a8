//! Diagnosis and rectification of classifiers trained on a shared
//! image-text embedding space.
//!
//! The crate covers the whole pipeline: modality-gap geometry
//! ([`geometry`]), probe training and cross-modal evaluation ([`probe`]),
//! prompt composition ([`prompts`]), error-slice discovery and attribute
//! influence ([`diagnose`]), rectification on generated text ([`rectify`]),
//! and synthetic worlds with exact numerical certificates ([`synthlab`]).

pub mod cli;
pub mod diagnose;
pub mod embed;
pub mod error;
pub mod geometry;
pub mod linalg;
pub mod probe;
pub mod prompts;
pub mod rectify;
pub mod store;
pub mod synthlab;

pub use error::{Error, Result};
