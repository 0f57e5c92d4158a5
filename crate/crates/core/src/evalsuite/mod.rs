//! Concept accuracy under intervention and a kernel two-sample surrogate
//! for sample quality.
//!
//! The MMD is computed on normalized glyph attributes. It is a desk-scale
//! stand-in for image-quality metrics and is not comparable to them.

mod mmd;

pub use mmd::{mmd, mmd_estimate, mmd_permutation_test, MmdEstimate, PermutationTest};

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::energymodel::{ConceptAssignment, InterventionSpec, InterventionState};
use crate::error::{Error, Result};
use crate::sampler::{format_spec, sample_finals, SamplerConfig};
use crate::synthworld::{sample_standard_normal, World};
use crate::trainer::Checkpoint;

pub const DEFAULT_EVAL_SAMPLES: usize = 500;
pub const DEFAULT_PERMUTATIONS: usize = 200;

/// The value each concept is meant to take, or `None` when unconstrained.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Intent(pub Vec<Option<usize>>);

impl Intent {
    /// Active concepts intend their target; negated binary concepts intend
    /// the complement of the negated value.
    pub fn from_spec(spec: &InterventionSpec) -> Self {
        Intent(
            spec.entries()
                .iter()
                .map(|e| match e.state {
                    InterventionState::Active => Some(e.target),
                    InterventionState::Negated => Some(e.target ^ 1),
                    InterventionState::Neutral => None,
                })
                .collect(),
        )
    }

    pub fn from_assignment(c: &ConceptAssignment) -> Self {
        Intent(c.values().iter().map(|&v| Some(v)).collect())
    }

    pub fn satisfied_by(&self, labels: &ConceptAssignment) -> bool {
        self.0.iter().enumerate().all(|(k, want)| want.is_none_or(|w| labels.get(k) == w))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptAccuracy {
    /// Agreement per concept; `None` for unconstrained concepts.
    pub per_concept: Vec<Option<f64>>,
    /// Mean over constrained concepts.
    pub mean: f64,
    /// Fraction of samples agreeing on every constrained concept.
    pub joint: f64,
    /// Oracle positive rate per concept, constrained or not.
    pub positive_rate: Vec<f64>,
    pub samples: usize,
}

pub fn concept_accuracy(world: &World, samples: &[Vec<f64>], intent: &Intent) -> Result<ConceptAccuracy> {
    if samples.is_empty() {
        return Err(Error::invalid("concept accuracy needs at least one sample"));
    }
    let k = world.concepts().len();
    if intent.0.len() != k {
        return Err(Error::invalid(format!("intent covers {} concepts, world has {k}", intent.0.len())));
    }
    if intent.0.iter().all(Option::is_none) {
        return Err(Error::AllNeutral);
    }
    let mut hits = vec![0usize; k];
    let mut pos = vec![0usize; k];
    let mut joint = 0usize;
    for v in samples {
        let labels = world.oracle_label(v);
        for kk in 0..k {
            pos[kk] += labels.get(kk);
            if intent.0[kk] == Some(labels.get(kk)) {
                hits[kk] += 1;
            }
        }
        joint += usize::from(intent.satisfied_by(&labels));
    }
    let n = samples.len() as f64;
    let per_concept: Vec<Option<f64>> = (0..k).map(|kk| intent.0[kk].map(|_| hits[kk] as f64 / n)).collect();
    let constrained: Vec<f64> = per_concept.iter().flatten().copied().collect();
    Ok(ConceptAccuracy {
        mean: constrained.iter().sum::<f64>() / constrained.len() as f64,
        per_concept,
        joint: joint as f64 / n,
        positive_rate: pos.iter().map(|&p| p as f64 / n).collect(),
        samples: samples.len(),
    })
}

/// Prior draws that satisfy `intent`, found by rejection from one seeded
/// stream.
pub fn conditioned_prior(world: &World, intent: &Intent, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    let budget = 10_000usize.max(n * 1_000);
    for _ in 0..budget {
        if out.len() == n {
            break;
        }
        let v = sample_standard_normal(&mut rng, world.latent_dim());
        if intent.satisfied_by(&world.oracle_label(&v)) {
            out.push(v);
        }
    }
    if out.len() < n {
        return Err(Error::invalid("intent is too rare under the prior to build a reference set"));
    }
    Ok(out)
}

pub fn glyph_features(world: &World, latents: &[Vec<f64>]) -> Vec<Vec<f64>> {
    latents.iter().map(|v| world.normalized_attributes(v).to_vec()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub n: usize,
    pub sampler: SamplerConfig,
    pub reference_seed: u64,
    pub permutations: usize,
    pub permutation_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n: DEFAULT_EVAL_SAMPLES,
            sampler: SamplerConfig::default(),
            reference_seed: 1_000_003,
            permutations: DEFAULT_PERMUTATIONS,
            permutation_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpecReport {
    pub spec: String,
    pub intent: Intent,
    pub accuracy: ConceptAccuracy,
    /// Generated glyph attributes against prior draws satisfying the intent.
    pub mmd: PermutationTest,
}

/// Diagonal-readout predictions on unconditioned prior draws, scored
/// against the oracle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnconditionedReport {
    pub per_concept: Vec<f64>,
    pub mean: f64,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint_hash: String,
    pub checkpoint_step: u64,
    pub concepts: Vec<String>,
    pub config: EvalConfig,
    pub specs: Vec<SpecReport>,
    pub unconditioned: UnconditionedReport,
}

pub fn unconditioned_report(ck: &Checkpoint, world: &World, n: usize, seed: u64) -> Result<UnconditionedReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = world.latent_dim();
    let vs: Vec<Vec<f64>> = (0..n).map(|_| sample_standard_normal(&mut rng, d)).collect();
    let rows = crate::diffengine::Array::from_rows(&vs)?;
    let probs = ck.network.predict_concepts_batch(&rows, 1)?;
    let k = world.concepts().len();
    let mut hits = vec![0usize; k];
    for (v, p) in vs.iter().zip(&probs) {
        let labels = world.oracle_label(v);
        for kk in 0..k {
            let arg = (0..p[kk].len()).fold(0, |b, j| if p[kk][j] > p[kk][b] { j } else { b });
            hits[kk] += usize::from(arg == labels.get(kk));
        }
    }
    let per_concept: Vec<f64> = hits.iter().map(|&h| h as f64 / n as f64).collect();
    Ok(UnconditionedReport { mean: per_concept.iter().sum::<f64>() / k as f64, per_concept, samples: n })
}

pub fn evaluate_spec(ck: &Checkpoint, world: &World, spec: &InterventionSpec, cfg: &EvalConfig) -> Result<SpecReport> {
    let intent = Intent::from_spec(spec);
    let samples = sample_finals(&ck.network, spec, &cfg.sampler, cfg.n)?;
    let accuracy = concept_accuracy(world, &samples, &intent)?;
    let reference = conditioned_prior(world, &intent, cfg.n, cfg.reference_seed)?;
    let mmd = mmd_permutation_test(&glyph_features(world, &samples), &glyph_features(world, &reference), cfg.permutations, cfg.permutation_seed)?;
    Ok(SpecReport { spec: format_spec(spec, world.concepts()), intent, accuracy, mmd })
}

pub fn run_eval(ck: &Checkpoint, world: &World, specs: &[InterventionSpec], cfg: &EvalConfig) -> Result<EvalReport> {
    if cfg.n < 2 {
        return Err(Error::invalid("evaluation needs at least two samples per spec"));
    }
    if world.config() != &ck.world {
        return Err(Error::invalid("evaluation world differs from the checkpoint's world"));
    }
    let specs = specs.iter().map(|s| evaluate_spec(ck, world, s, cfg)).collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        checkpoint_hash: ck.hash()?,
        checkpoint_step: ck.step,
        concepts: world.concepts().names(),
        config: cfg.clone(),
        specs,
        unconditioned: unconditioned_report(ck, world, cfg.n, cfg.reference_seed.wrapping_add(1))?,
    })
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// One row per spec: the expression, sample count, mean and joint
    /// accuracy, MMD statistic and p-value, then per-concept accuracy
    /// (empty for unconstrained concepts).
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["spec".to_string(), "n".into(), "mean_accuracy".into(), "joint_accuracy".into(), "mmd".into(), "mmd_p_value".into()];
        header.extend(self.concepts.iter().map(|c| format!("accuracy_{c}")));
        w.write_record(&header)?;
        for s in &self.specs {
            let mut row = vec![
                s.spec.clone(),
                s.accuracy.samples.to_string(),
                s.accuracy.mean.to_string(),
                s.accuracy.joint.to_string(),
                s.mmd.statistic.to_string(),
                s.mmd.p_value.to_string(),
            ];
            row.extend(s.accuracy.per_concept.iter().map(|a| a.map(|x| x.to_string()).unwrap_or_default()));
            w.write_record(&row)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    /// Writes `report.json` and `summary.csv` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let j = dir.join("report.json");
        fs::write(&j, self.to_json()?).map_err(|e| Error::io(&j, e))?;
        let c = dir.join("summary.csv");
        fs::write(&c, self.to_csv()?).map_err(|e| Error::io(&c, e))
    }
}
