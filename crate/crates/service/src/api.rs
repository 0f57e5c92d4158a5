//! Request and response bodies.

use cocobot::energymodel::{InterventionState, DEFAULT_NEGATIVE_WEIGHT, DEFAULT_POSITIVE_WEIGHT};
use cocobot::sampler::{EtaSchedule, TrajectoryRecord};
use cocobot::synthworld::Glyph;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterventionRequest {
    pub concept: String,
    pub state: InterventionState,
    /// Target (active) or negated value; defaults to 1.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<f64>,
}

/// Per-request changes to the checkpoint's default sampler.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerOverrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps_per_t: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta_schedule: Option<EtaSchedule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_scale: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRequest {
    pub interventions: Vec<InterventionRequest>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub sampler: SamplerOverrides,
    #[serde(default)]
    pub return_trajectory: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptScore {
    pub concept: String,
    /// Softmax over the concept's values at the final latent, `t = 1`.
    pub probabilities: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleResponse {
    pub spec: String,
    pub seed: u64,
    pub initial_latent: Vec<f64>,
    pub final_latent: Vec<f64>,
    pub glyph: Glyph,
    pub scores: Vec<ConceptScore>,
    /// Weighted intervention energy of the final latent.
    pub energy: f64,
    /// Unweighted per-concept energies of the final latent; `null` for
    /// neutral concepts.
    pub concept_energies: Vec<Option<f64>>,
    pub updates: usize,
    pub clipped_updates: usize,
    /// Recorded states, at most 512, first and last always included.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trajectory: Option<Vec<TrajectoryRecord>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trajectory_length: Option<usize>,
}

/// The plane `origin + a·u + b·w` for `a, b` on an even grid over `[lo, hi]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlaneSpec {
    /// Defaults to the zero latent.
    #[serde(default)]
    pub origin: Option<Vec<f64>>,
    /// Defaults to the first coordinate axis.
    #[serde(default)]
    pub u: Option<Vec<f64>>,
    /// Defaults to the second coordinate axis.
    #[serde(default)]
    pub w: Option<Vec<f64>>,
    #[serde(default = "PlaneSpec::default_lo")]
    pub lo: f64,
    #[serde(default = "PlaneSpec::default_hi")]
    pub hi: f64,
}

impl PlaneSpec {
    fn default_lo() -> f64 {
        -3.0
    }

    fn default_hi() -> f64 {
        3.0
    }
}

impl Default for PlaneSpec {
    fn default() -> Self {
        Self { origin: None, u: None, w: None, lo: Self::default_lo(), hi: Self::default_hi() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnergyGridRequest {
    pub t: usize,
    pub resolution: usize,
    #[serde(default)]
    pub plane: PlaneSpec,
    /// Defaults to every concept active at value 1.
    #[serde(default)]
    pub interventions: Option<Vec<InterventionRequest>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyGridResponse {
    pub t: usize,
    pub resolution: usize,
    pub spec: String,
    /// Grid coordinates along both plane axes.
    pub axis: Vec<f64>,
    /// `energies[i][j]` is the energy at `origin + axis[j]·u + axis[i]·w`.
    pub energies: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptEntry {
    pub index: usize,
    pub name: String,
    pub cardinality: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DefaultWeights {
    pub positive: f64,
    pub negative: f64,
}

impl Default for DefaultWeights {
    fn default() -> Self {
        Self { positive: DEFAULT_POSITIVE_WEIGHT, negative: DEFAULT_NEGATIVE_WEIGHT }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptsResponse {
    pub concepts: Vec<ConceptEntry>,
    pub default_weights: DefaultWeights,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InfoResponse {
    pub checkpoint_hash: String,
    pub untrained: bool,
    pub step: u64,
    pub latent_dim: usize,
    pub timesteps: usize,
    pub concepts: usize,
    pub parameters: usize,
    pub version: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub valid_concepts: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostic_id: Option<String>,
}
