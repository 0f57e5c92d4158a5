//! Noise schedules and the forward noising process.
//!
//! `v_t = √ᾱ_t · v0 + √(1 − ᾱ_t) · ε` with `ε ~ N(0, I)`. The exact score of
//! `q(v_t | v0)` is `−(v_t − √ᾱ_t · v0) / (1 − ᾱ_t)`, which is the
//! training target for the model score.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_TIMESTEPS: usize = 100;
/// Offset of the cosine schedule.
pub const COSINE_OFFSET: f64 = 0.008;
/// Upper clip on per-step β for the cosine schedule.
pub const COSINE_MAX_BETA: f64 = 0.999;
pub const LINEAR_BETA_START: f64 = 1e-4;
pub const LINEAR_BETA_END: f64 = 2e-2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    #[default]
    Cosine,
}

/// Schedule identity as stored in checkpoints and configs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    #[serde(default)]
    pub kind: ScheduleKind,
    #[serde(default = "default_timesteps")]
    pub timesteps: usize,
}

fn default_timesteps() -> usize {
    DEFAULT_TIMESTEPS
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { kind: ScheduleKind::Cosine, timesteps: DEFAULT_TIMESTEPS }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.kind, self.timesteps)
    }
}

/// `ᾱ_t` for `t = 0..=T`, strictly decreasing from `ᾱ_0 = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    alpha_bar: Vec<f64>,
}

pub fn make_schedule(kind: ScheduleKind, timesteps: usize) -> Result<NoiseSchedule> {
    if timesteps < 1 {
        return Err(Error::invalid("a schedule needs at least one timestep"));
    }
    let betas: Vec<f64> = match kind {
        ScheduleKind::Linear => (1..=timesteps)
            .map(|t| {
                if timesteps == 1 {
                    LINEAR_BETA_START
                } else {
                    let u = (t - 1) as f64 / (timesteps - 1) as f64;
                    LINEAR_BETA_START + u * (LINEAR_BETA_END - LINEAR_BETA_START)
                }
            })
            .collect(),
        ScheduleKind::Cosine => {
            let f = |t: usize| {
                let u = (t as f64 / timesteps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
                (u * std::f64::consts::FRAC_PI_2).cos().powi(2)
            };
            (1..=timesteps).map(|t| (1.0 - f(t) / f(t - 1)).min(COSINE_MAX_BETA)).collect()
        }
    };
    let mut alpha_bar = Vec::with_capacity(timesteps + 1);
    alpha_bar.push(1.0);
    for b in betas {
        let prev = *alpha_bar.last().unwrap();
        alpha_bar.push(prev * (1.0 - b));
    }
    Ok(NoiseSchedule { kind, alpha_bar })
}

impl NoiseSchedule {
    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn timesteps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn config(&self) -> ScheduleConfig {
        ScheduleConfig { kind: self.kind, timesteps: self.timesteps() }
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    fn check(&self, t: usize) -> Result<()> {
        if t > self.timesteps() {
            return Err(Error::invalid(format!("timestep {t} outside 0..={}", self.timesteps())));
        }
        Ok(())
    }

    /// `√ᾱ_t · v0 + √(1 − ᾱ_t) · ε`. `t = 0` is accepted and returns `v0`.
    pub fn forward_noise(&self, v0: &[f64], t: usize, eps: &[f64]) -> Result<Vec<f64>> {
        self.check(t)?;
        if v0.len() != eps.len() {
            return Err(Error::invalid(format!("v0 has {} entries but ε has {}", v0.len(), eps.len())));
        }
        let ab = self.alpha_bar[t];
        if ab == 1.0 {
            return Ok(v0.to_vec());
        }
        let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(v0.iter().zip(eps).map(|(x, e)| a.mul_add(*x, s * e)).collect())
    }

    /// `−(v_t − √ᾱ_t · v0) / (1 − ᾱ_t)`; undefined where `ᾱ_t = 1`.
    pub fn target_score(&self, v0: &[f64], vt: &[f64], t: usize) -> Result<Vec<f64>> {
        self.check(t)?;
        if v0.len() != vt.len() {
            return Err(Error::invalid(format!("v0 has {} entries but v_t has {}", v0.len(), vt.len())));
        }
        let ab = self.alpha_bar[t];
        if ab >= 1.0 {
            return Err(Error::invalid(format!("target score undefined at timestep {t} where ᾱ = 1")));
        }
        let a = ab.sqrt();
        let var = 1.0 - ab;
        Ok(v0.iter().zip(vt).map(|(x0, x)| a.mul_add(*x0, -x) / var).collect())
    }
}
