//! A synthetic latent world with oracle concept labels.
//!
//! Latents are drawn from `N(0, I_d)`. Concept `k` is defined by a unit
//! direction `a_k` and threshold `τ_k`: the oracle labels `c_k = 1` exactly
//! when `⟨a_k, v⟩ > τ_k`. A glyph decoder maps each latent to six bounded
//! visual attributes so that concept flips are visible.

mod dataset;
mod glyph;

pub use dataset::{load_dataset, make_dataset, save_dataset, Sample, DATASET_FILE, WORLD_FILE};
pub use glyph::{Glyph, GLYPH_ATTRIBUTES};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::energymodel::{ConceptAssignment, ConceptSpec};
use crate::error::{Error, Result};

/// Names used for the default concept set, in order.
pub const DEFAULT_CONCEPT_NAMES: [&str; 8] =
    ["Smile", "Male", "MouthOpen", "Makeup", "Attractive", "Young", "Eyeglasses", "Bald"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DirectionMode {
    /// Seeded orthonormal directions; concepts are independent under the prior.
    #[default]
    Orthonormal,
    /// Independently drawn unit directions, generally correlated.
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldConfig {
    pub latent_dim: usize,
    pub concepts: ConceptSpec,
    pub seed: u64,
    #[serde(default)]
    pub directions: DirectionMode,
    /// `τ_k`; empty means all zero.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub thresholds: Vec<f64>,
    /// Slope of each glyph attribute's squashing, in [`GLYPH_ATTRIBUTES`] order.
    #[serde(default = "default_gains")]
    pub glyph_gains: [f64; 6],
}

fn default_gains() -> [f64; 6] {
    [1.0; 6]
}

impl WorldConfig {
    /// `d`-dimensional world with the first `k` default concept names.
    pub fn with_concepts(latent_dim: usize, k: usize, seed: u64) -> Result<Self> {
        if k == 0 || k > DEFAULT_CONCEPT_NAMES.len() {
            return Err(Error::invalid(format!("default worlds have 1..={} concepts", DEFAULT_CONCEPT_NAMES.len())));
        }
        Ok(Self {
            latent_dim,
            concepts: ConceptSpec::binary(&DEFAULT_CONCEPT_NAMES[..k])?,
            seed,
            directions: DirectionMode::Orthonormal,
            thresholds: Vec::new(),
            glyph_gains: default_gains(),
        })
    }

    pub fn threshold(&self, k: usize) -> f64 {
        self.thresholds.get(k).copied().unwrap_or(0.0)
    }
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self::with_concepts(8, 4, 0).expect("default world is valid")
    }
}

/// A built world: the config plus its seeded directions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "WorldFile", into = "WorldFile")]
pub struct World {
    config: WorldConfig,
    directions: Vec<Vec<f64>>,
    /// Functional driving each glyph attribute.
    attribute_functionals: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WorldFile {
    config: WorldConfig,
    directions: Vec<Vec<f64>>,
}

impl TryFrom<WorldFile> for World {
    type Error = Error;

    fn try_from(f: WorldFile) -> Result<Self> {
        let world = World::new(f.config)?;
        if world.directions != f.directions {
            return Err(Error::invalid("stored concept directions do not match the ones derived from the config seed"));
        }
        Ok(world)
    }
}

impl From<World> for WorldFile {
    fn from(w: World) -> Self {
        WorldFile { config: w.config, directions: w.directions }
    }
}

fn unit_normal(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let n = norm(&v);
        if n > 1e-8 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Gram-Schmidt continuation: a unit vector orthogonal to all of `basis`,
/// or `None` once the space is exhausted.
fn orthogonal_unit(rng: &mut ChaCha8Rng, basis: &[Vec<f64>], d: usize) -> Option<Vec<f64>> {
    if basis.len() >= d {
        return None;
    }
    loop {
        let mut v = unit_normal(rng, d);
        // two passes keep the result orthogonal to rounding level
        for _ in 0..2 {
            for b in basis {
                let p = dot(&v, b);
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
            }
        }
        let n = norm(&v);
        if n > 1e-6 {
            return Some(v.into_iter().map(|x| x / n).collect());
        }
    }
}

impl World {
    pub fn new(config: WorldConfig) -> Result<Self> {
        let d = config.latent_dim;
        let k = config.concepts.len();
        if d == 0 {
            return Err(Error::invalid("latent_dim must be positive"));
        }
        if config.concepts.concepts().iter().any(|c| c.cardinality != 2) {
            return Err(Error::invalid("the oracle labeler only defines binary concepts"));
        }
        if !config.thresholds.is_empty() && config.thresholds.len() != k {
            return Err(Error::invalid(format!("{} thresholds given for {k} concepts", config.thresholds.len())));
        }
        if config.thresholds.iter().chain(&config.glyph_gains).any(|x| !x.is_finite()) {
            return Err(Error::invalid("thresholds and glyph gains must be finite"));
        }
        if config.directions == DirectionMode::Orthonormal && d < k {
            return Err(Error::invalid(format!(
                "{k} orthonormal directions do not fit in {d} dimensions; use random directions or raise latent_dim"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut directions: Vec<Vec<f64>> = Vec::with_capacity(k);
        for _ in 0..k {
            let a = match config.directions {
                DirectionMode::Orthonormal => orthogonal_unit(&mut rng, &directions, d).expect("d >= k checked"),
                DirectionMode::Random => unit_normal(&mut rng, d),
            };
            directions.push(a);
        }
        let mut basis = directions.clone();
        let attribute_functionals = (0..GLYPH_ATTRIBUTES.len())
            .map(|j| {
                let driving: Vec<&Vec<f64>> = directions.iter().skip(j).step_by(GLYPH_ATTRIBUTES.len()).collect();
                if driving.is_empty() {
                    match orthogonal_unit(&mut rng, &basis, d) {
                        Some(f) => {
                            basis.push(f.clone());
                            f
                        }
                        None => vec![0.0; d],
                    }
                } else {
                    (0..d).map(|i| driving.iter().map(|a| a[i]).sum()).collect()
                }
            })
            .collect();
        Ok(Self { config, directions, attribute_functionals })
    }

    pub fn config(&self) -> &WorldConfig {
        &self.config
    }

    pub fn concepts(&self) -> &ConceptSpec {
        &self.config.concepts
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    pub fn direction(&self, k: usize) -> &[f64] {
        &self.directions[k]
    }

    pub fn directions(&self) -> &[Vec<f64>] {
        &self.directions
    }

    /// Non-fatal configuration concerns.
    pub fn warnings(&self) -> Vec<String> {
        let (d, k) = (self.latent_dim(), self.concepts().len());
        let mut out = Vec::new();
        if d < k {
            out.push(format!("latent_dim {d} is below the concept count {k}; concepts will be entangled"));
        }
        out
    }

    /// `⟨a_k, v⟩` for every concept.
    pub fn projections(&self, v: &[f64]) -> Vec<f64> {
        self.directions.iter().map(|a| dot(a, v)).collect()
    }

    pub fn sample_prior(&self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        sample_standard_normal(&mut rng, self.latent_dim())
    }

    pub fn oracle_label(&self, v: &[f64]) -> ConceptAssignment {
        ConceptAssignment::new(
            self.projections(v).iter().enumerate().map(|(k, &p)| usize::from(p > self.config.threshold(k))).collect(),
        )
    }

    pub fn render_glyph(&self, v: &[f64]) -> Glyph {
        Glyph::from_normalized(self.normalized_attributes(v))
    }

    /// Squashed attribute drivers `tanh(g_j ⟨f_j, v⟩) ∈ (−1, 1)`.
    pub fn normalized_attributes(&self, v: &[f64]) -> [f64; 6] {
        std::array::from_fn(|j| (self.config.glyph_gains[j] * dot(&self.attribute_functionals[j], v)).tanh())
    }

    /// Per-attribute Lipschitz constants of [`World::render_glyph`] in the
    /// latent's Euclidean norm: `range_j · g_j · ‖f_j‖`.
    pub fn glyph_lipschitz(&self) -> [f64; 6] {
        std::array::from_fn(|j| {
            glyph::HALF_RANGES[j] * self.config.glyph_gains[j].abs() * norm(&self.attribute_functionals[j])
        })
    }

    /// The attribute index concept `k` drives.
    pub fn attribute_of(&self, k: usize) -> usize {
        k % GLYPH_ATTRIBUTES.len()
    }
}

pub fn sample_standard_normal(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}
