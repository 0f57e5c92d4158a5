//! Annealed gradient descent on the weighted intervention energy.
//!
//! Starting from standard-normal noise, the timestep condition is swept
//! from `T` down to 1 and at each timestep the latent takes
//! `steps_per_t` updates `v ← v − η ∇_v E_w(v, t)`. Optional Langevin
//! noise adds `√(2η) · scale · ξ` per update.

mod expr;

pub use expr::{format_spec, parse_spec};

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffengine::Array;
use crate::energymodel::{EnergyNetwork, InterventionSpec};
use crate::error::{Error, Result};
use crate::synthworld::sample_standard_normal;

pub const DEFAULT_STEPS_PER_T: usize = 2;
pub const DEFAULT_ETA: f64 = 0.05;
pub const DEFAULT_CLIP_NORM: f64 = 100.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EtaSchedule {
    #[default]
    Constant,
    /// `η_t = η · ½ (1 + cos(π (t_start − t) / t_start))`.
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub steps_per_t: usize,
    pub eta: f64,
    pub eta_schedule: EtaSchedule,
    /// First timestep of the sweep; `None` starts at the schedule's `T`.
    pub t_start: Option<usize>,
    pub t_end: usize,
    pub noise_scale: f64,
    pub clip_norm: f64,
    /// Caps the total number of updates; `Some(0)` returns the initial noise.
    pub max_updates: Option<usize>,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps_per_t: DEFAULT_STEPS_PER_T,
            eta: DEFAULT_ETA,
            eta_schedule: EtaSchedule::Constant,
            t_start: None,
            t_end: 1,
            noise_scale: 0.0,
            clip_norm: DEFAULT_CLIP_NORM,
            max_updates: None,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, timesteps: usize) -> Result<()> {
        if self.steps_per_t == 0 {
            return Err(Error::invalid("sampler.steps_per_t must be at least 1"));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::invalid("sampler.eta must be positive and finite"));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::invalid("sampler.noise_scale must be non-negative and finite"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::invalid("sampler.clip_norm must be positive"));
        }
        let start = self.t_start.unwrap_or(timesteps);
        if self.t_end < 1 || start < self.t_end || start > timesteps {
            return Err(Error::invalid(format!(
                "timestep sweep {start}..={} must descend within 1..={timesteps}",
                self.t_end
            )));
        }
        Ok(())
    }

    /// `(t, η)` for every update, in order.
    pub fn plan(&self, timesteps: usize) -> Vec<(usize, f64)> {
        let start = self.t_start.unwrap_or(timesteps);
        let mut out = Vec::new();
        for t in (self.t_end..=start).rev() {
            let eta = match self.eta_schedule {
                EtaSchedule::Constant => self.eta,
                EtaSchedule::Cosine => {
                    self.eta * 0.5 * (1.0 + (std::f64::consts::PI * (start - t) as f64 / start as f64).cos())
                }
            };
            out.extend(std::iter::repeat_n((t, eta), self.steps_per_t));
        }
        if let Some(m) = self.max_updates {
            out.truncate(m);
        }
        out
    }
}

/// Standard-normal starting point, identical to the world prior draw for
/// the same seed.
pub fn init_latent(d: usize, seed: u64) -> Vec<f64> {
    sample_standard_normal(&mut ChaCha8Rng::seed_from_u64(seed), d)
}

/// One state of a trajectory. Update records hold the state before the
/// update performed at `t`; the last record is the final sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub t: usize,
    pub latent: Vec<f64>,
    pub energy: f64,
    /// Unweighted energy of each concept; `None` for neutral concepts.
    pub concept_energies: Vec<Option<f64>>,
    /// Whether the gradient of this update was clipped.
    pub clipped: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub seed: u64,
    pub records: Vec<TrajectoryRecord>,
    pub clipped_updates: usize,
}

impl Trajectory {
    pub fn final_record(&self) -> &TrajectoryRecord {
        self.records.last().expect("trajectories hold at least the final state")
    }

    pub fn final_latent(&self) -> &[f64] {
        &self.final_record().latent
    }

    pub fn initial_latent(&self) -> &[f64] {
        &self.records[0].latent
    }

    /// One JSON object per record.
    pub fn write_jsonl(&self, mut out: impl Write) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n").map_err(|e| Error::io("<trajectory>", e))?;
        }
        Ok(())
    }

    /// At most `max` records, keeping the first and the final state and an
    /// evenly spaced selection between them.
    pub fn truncated(&self, max: usize) -> Vec<TrajectoryRecord> {
        let n = self.records.len();
        match max {
            _ if n <= max => return self.records.clone(),
            0 => return Vec::new(),
            1 => return vec![self.final_record().clone()],
            _ => {}
        }
        (0..max).map(|i| self.records[i * (n - 1) / (max - 1)].clone()).collect()
    }
}

/// `v − η g`.
pub fn descend(v: &[f64], grad: &[f64], eta: f64) -> Vec<f64> {
    v.iter().zip(grad).map(|(x, g)| x - eta * g).collect()
}

/// `v − η ∇_v E_w(v, t)` without clipping or noise.
pub fn intervention_step(net: &EnergyNetwork, v: &[f64], t: usize, spec: &InterventionSpec, eta: f64) -> Result<Vec<f64>> {
    let rows = Array::matrix(1, v.len(), v.to_vec())?;
    let eval = net.intervention_eval(&rows, t, spec)?;
    if !eval.grad.is_finite() {
        return Err(Error::NonFinite { what: "intervention gradient".into(), step: 0 });
    }
    Ok(descend(v, eval.grad.data(), eta))
}

fn concept_energies(spec: &InterventionSpec, k: usize, term_energies: &[Vec<f64>], row: usize) -> Vec<Option<f64>> {
    let mut out = vec![None; k];
    for (term, e) in spec.terms().iter().zip(term_energies) {
        out[term.concept] = Some(e[row]);
    }
    out
}

/// Samples one trajectory per seed, advancing all of them together as a
/// batch. When `record` is false only the initial and final states are
/// kept.
pub fn run_batch(
    net: &EnergyNetwork,
    spec: &InterventionSpec,
    cfg: &SamplerConfig,
    seeds: &[u64],
    record: bool,
) -> Result<Vec<Trajectory>> {
    let timesteps = net.arch().timesteps;
    cfg.validate(timesteps)?;
    spec.validate(net.concepts())?;
    let (d, k, n) = (net.latent_dim(), net.concepts().len(), seeds.len());
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut rngs: Vec<ChaCha8Rng> = seeds.iter().map(|&s| ChaCha8Rng::seed_from_u64(s)).collect();
    let mut data = Vec::with_capacity(n * d);
    for rng in &mut rngs {
        data.extend(sample_standard_normal(rng, d));
    }
    let mut v = Array::matrix(n, d, data)?;
    let mut trajs: Vec<Trajectory> =
        seeds.iter().map(|&seed| Trajectory { seed, records: Vec::new(), clipped_updates: 0 }).collect();
    let plan = cfg.plan(timesteps);
    for (i, &(t, eta)) in plan.iter().enumerate() {
        let eval = net.intervention_eval(&v, t, spec)?;
        if !eval.grad.is_finite() || eval.energy.iter().any(|e| !e.is_finite()) {
            return Err(Error::NonFinite { what: "intervention gradient".into(), step: i as u64 });
        }
        let noise = (cfg.noise_scale > 0.0).then(|| (2.0 * eta).sqrt() * cfg.noise_scale);
        for (r, traj) in trajs.iter_mut().enumerate() {
            let g = eval.grad.row(r);
            let norm = grad_norm(g);
            let clipped = norm > cfg.clip_norm;
            let factor = if clipped { cfg.clip_norm / norm } else { 1.0 };
            if record || i == 0 {
                traj.records.push(TrajectoryRecord {
                    t,
                    latent: v.row(r).to_vec(),
                    energy: eval.energy[r],
                    concept_energies: concept_energies(spec, k, &eval.term_energies, r),
                    clipped,
                });
            }
            traj.clipped_updates += usize::from(clipped);
            let xi = noise.map(|s| (s, sample_standard_normal(&mut rngs[r], d)));
            let row = &mut v.data_mut()[r * d..(r + 1) * d];
            for (j, x) in row.iter_mut().enumerate() {
                *x -= eta * factor * g[j];
                if let Some((s, xi)) = &xi {
                    *x += s * xi[j];
                }
            }
        }
    }
    let t_final = plan.last().map_or(cfg.t_start.unwrap_or(timesteps), |p| p.0);
    let eval = net.intervention_eval(&v, t_final, spec)?;
    for (r, traj) in trajs.iter_mut().enumerate() {
        traj.records.push(TrajectoryRecord {
            t: t_final,
            latent: v.row(r).to_vec(),
            energy: eval.energy[r],
            concept_energies: concept_energies(spec, k, &eval.term_energies, r),
            clipped: false,
        });
    }
    Ok(trajs)
}

/// Euclidean norm, rescaled only when the plain sum of squares overflows.
fn grad_norm(g: &[f64]) -> f64 {
    let plain = g.iter().map(|x| x * x).sum::<f64>().sqrt();
    if plain.is_finite() {
        return plain;
    }
    let m = g.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    m * g.iter().map(|x| (x / m).powi(2)).sum::<f64>().sqrt()
}

/// A single recorded trajectory from `cfg.seed`.
pub fn run_sampler(net: &EnergyNetwork, spec: &InterventionSpec, cfg: &SamplerConfig) -> Result<Trajectory> {
    Ok(run_batch(net, spec, cfg, &[cfg.seed], true)?.remove(0))
}

/// Final latents of `n` samples seeded `cfg.seed, cfg.seed + 1, …`.
pub fn sample_finals(net: &EnergyNetwork, spec: &InterventionSpec, cfg: &SamplerConfig, n: usize) -> Result<Vec<Vec<f64>>> {
    let seeds: Vec<u64> = (0..n as u64).map(|i| cfg.seed.wrapping_add(i)).collect();
    // chunks bound the tape size without changing any row's arithmetic
    let mut out = Vec::with_capacity(n);
    for chunk in seeds.chunks(256) {
        out.extend(run_batch(net, spec, cfg, chunk, false)?.into_iter().map(|t| t.final_latent().to_vec()));
    }
    Ok(out)
}
