//! Synthetic worlds with known structure: constant-gap paired embeddings,
//! a planted spurious-correlation scenario, and bipartite-graph
//! factorization checks.

pub mod graph;
mod planted;
mod prop1;

pub use graph::{
    class_blocked, classmean_check, scaling_check, spectral_identity_check, spectral_loss,
    spectral_residual, violate_assumption, GraphInstance, ScalingCheck,
};
pub use planted::{
    class_value, gen_planted, nuisance_value, PlantedParams, PlantedScenario, CLASS_FAMILY,
    NUISANCE_FAMILY, SCENARIO_TEMPLATES,
};
pub use prop1::{gen_prop1, Prop1Params, Prop1World};
