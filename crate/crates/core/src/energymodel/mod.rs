//! Concept-conditioned energies.
//!
//! Head `k` of the [`EnergyNetwork`] emits `n_k` logits for concept `k`;
//! their LogSumExp is the per-concept energy. Summing the per-concept
//! energies of an assignment gives the composed energy, and an
//! [`InterventionSpec`] re-weights them (`w⁺ = 1` to activate a concept,
//! `w⁻ = −0.001` to negate it, neutral concepts dropped).
//!
//! The density is `p(v | C) ∝ exp(−E(v, C))`, so the model score is
//! `−∇_v E`. The normalizer is never computed.

mod concepts;
mod intervention;
mod network;

pub use concepts::{Concept, ConceptAssignment, ConceptSpec};
pub use intervention::{
    EnergyTerm, InterventionBuilder, InterventionEntry, InterventionSpec, InterventionState, NegationMode,
    DEFAULT_NEGATIVE_WEIGHT, DEFAULT_POSITIVE_WEIGHT,
};
pub use network::{Architecture, EnergyNetwork, InterventionEval};
