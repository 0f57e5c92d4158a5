//! Score-matching training of the energy network.
//!
//! Each step draws a fresh batch from the world prior, corrupts it at
//! uniformly drawn timesteps, and minimizes
//! `L_score + γ · L_concept` with Adam. `L_score` depends on `∇_v E`, so its
//! parameter gradient differentiates through the input gradient.

mod checkpoint;
mod loss;
mod optimizer;

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

pub use checkpoint::{Checkpoint, MANIFEST_FILE, PARAMS_DIR};
pub use loss::{concept_ce_loss, score_matching_loss, total_loss, Batch, LossBreakdown};
pub use optimizer::{Optimizer, OptimizerKind};

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffengine::{Activation, Array, CheckMode, ParamVars, ParameterSet, Tape};
use crate::diffusion::NoiseSchedule;
use crate::energymodel::{Architecture, EnergyNetwork};
use crate::error::{Error, Result};
use crate::synthworld::{sample_standard_normal, World};

/// Balance between the score and concept losses.
pub const DEFAULT_GAMMA: f64 = 1e-3;

const DATA_STREAM: u64 = 1;
const HELDOUT_STREAM: u64 = 2;
const VERIFY_STREAM: u64 = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub gamma: f64,
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
    pub batch_size: usize,
    pub steps: u64,
    pub optimizer: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    /// Held-out evaluation (and gradient verification) cadence in steps.
    pub eval_every: u64,
    pub eval_size: usize,
    /// Compare engine gradients with finite differences at every evaluation.
    pub verify_gradients: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// `lr · ½ (1 + cos(π s / steps))` for the update after `s` completed
    /// steps.
    Cosine,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: DEFAULT_GAMMA,
            learning_rate: 1e-3,
            lr_schedule: LrSchedule::Cosine,
            batch_size: 128,
            steps: 20_000,
            optimizer: OptimizerKind::Adam,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            eval_every: 500,
            eval_size: 512,
            verify_gradients: false,
        }
    }
}

impl TrainConfig {
    /// Learning rate of the update that follows `step` completed updates.
    pub fn lr_at(&self, step: u64) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::Cosine => {
                let frac = step as f64 / self.steps.max(1) as f64;
                self.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::invalid("train.gamma must be finite and non-negative"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("train.learning_rate must be finite and non-negative"));
        }
        if self.batch_size == 0 || self.eval_size == 0 || self.eval_every == 0 {
            return Err(Error::invalid("train.batch_size, train.eval_size and train.eval_every must be positive"));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.epsilon > 0.0) {
            return Err(Error::invalid("optimizer moments must lie in [0, 1) and epsilon must be positive"));
        }
        Ok(())
    }
}

/// Network shape; the latent size and timestep count come from the world
/// and the schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: usize,
    pub time_dim: usize,
    pub trunk_layers: usize,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let a = Architecture::new(1, 1);
        Self { hidden: a.hidden, time_dim: a.time_dim, trunk_layers: a.trunk_layers, activation: a.activation }
    }
}

impl ModelConfig {
    pub fn architecture(&self, latent_dim: usize, timesteps: usize) -> Architecture {
        Architecture {
            latent_dim,
            hidden: self.hidden,
            time_dim: self.time_dim,
            trunk_layers: self.trunk_layers,
            timesteps,
            activation: self.activation,
        }
    }
}

/// One row of the metric log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    /// Losses of the batch used for update `step`.
    pub score_loss: f64,
    pub concept_loss: f64,
    pub total_loss: f64,
    /// Held-out concept prediction accuracy at `t = 1`.
    pub accuracy: f64,
    /// Held-out concept cross-entropy, averaged over concepts.
    pub heldout_concept_loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gradient_check: Option<f64>,
}

pub const METRICS_HEADER: [&str; 5] = ["step", "L_score", "L_concept", "L_total", "accuracy"];

/// Appends records to a CSV log, writing the header when the file is new.
pub fn append_metrics(path: &Path, records: &[MetricRecord]) -> Result<()> {
    let fresh = !path.exists();
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    if fresh {
        text.push_str(&METRICS_HEADER.join(","));
        text.push('\n');
    }
    for r in records {
        text.push_str(&format!("{},{},{},{},{}\n", r.step, r.score_loss, r.concept_loss, r.total_loss, r.accuracy));
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Held-out losses and accuracy.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeldOut {
    pub losses: LossBreakdown,
    pub concept_loss_per_concept: f64,
    pub accuracy: f64,
}

pub struct Trainer {
    cfg: TrainConfig,
    net: EnergyNetwork,
    schedule: NoiseSchedule,
    world: World,
    optimizer: Optimizer,
    rng: ChaCha8Rng,
    verify_rng: ChaCha8Rng,
    heldout: Batch,
    step: u64,
    history: Vec<MetricRecord>,
}

fn draw_batch(rng: &mut ChaCha8Rng, world: &World, timesteps: usize, n: usize) -> Batch {
    let d = world.latent_dim();
    let (mut v0, mut eps, mut labels, mut ts) = (Vec::with_capacity(n * d), Vec::with_capacity(n * d), Vec::with_capacity(n), Vec::with_capacity(n));
    for _ in 0..n {
        let v = sample_standard_normal(rng, d);
        labels.push(world.oracle_label(&v));
        ts.push(rng.random_range(1..=timesteps));
        eps.extend(sample_standard_normal(rng, d));
        v0.extend(v);
    }
    Batch {
        v0: Array::matrix(n, d, v0).expect("sizes agree"),
        labels,
        ts,
        eps: Array::matrix(n, d, eps).expect("sizes agree"),
    }
}

fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl Trainer {
    pub fn new(cfg: TrainConfig, model: &ModelConfig, world: &World, schedule: &NoiseSchedule) -> Result<Self> {
        cfg.validate()?;
        let arch = model.architecture(world.latent_dim(), schedule.timesteps());
        let net = EnergyNetwork::new(world.concepts().clone(), arch, cfg.seed)?;
        Self::with_network(cfg, net, world, schedule)
    }

    /// Continues from an existing network with fresh optimizer state.
    pub fn with_network(cfg: TrainConfig, net: EnergyNetwork, world: &World, schedule: &NoiseSchedule) -> Result<Self> {
        cfg.validate()?;
        if net.concepts() != world.concepts() || net.latent_dim() != world.latent_dim() || net.arch().timesteps != schedule.timesteps() {
            return Err(Error::invalid("network does not match the world or schedule"));
        }
        let optimizer = Optimizer::new(cfg.optimizer, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon, net.params());
        let heldout = draw_batch(&mut stream(cfg.seed, HELDOUT_STREAM), world, schedule.timesteps(), cfg.eval_size);
        Ok(Self {
            rng: stream(cfg.seed, DATA_STREAM),
            verify_rng: stream(cfg.seed, VERIFY_STREAM),
            cfg,
            net,
            schedule: schedule.clone(),
            world: world.clone(),
            optimizer,
            heldout,
            step: 0,
            history: Vec::new(),
        })
    }

    pub fn network(&self) -> &EnergyNetwork {
        &self.net
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn history(&self) -> &[MetricRecord] {
        &self.history
    }

    pub fn heldout(&self) -> &Batch {
        &self.heldout
    }

    pub fn draw_batch(&mut self) -> Batch {
        draw_batch(&mut self.rng, &self.world, self.schedule.timesteps(), self.cfg.batch_size)
    }

    pub fn losses(&self, batch: &Batch) -> Result<LossBreakdown> {
        losses_of(&self.net, &self.schedule, batch, self.cfg.gamma)
    }

    /// Losses and `∂L_total/∂θ` at the current parameters.
    pub fn loss_and_grads(&self, batch: &Batch) -> Result<(LossBreakdown, ParameterSet)> {
        let mut tape = Tape::with_mode(CheckMode::Fast);
        let pv = self.net.register(&mut tape);
        let nodes = loss::batch_loss_on_tape(&mut tape, &self.net, &pv, &self.schedule, batch, self.cfg.gamma)?;
        let grads = tape.grad(nodes.total, pv.vars())?;
        let out = LossBreakdown {
            score: tape.scalar_value(nodes.score),
            concept: tape.scalar_value(nodes.concept),
            total: tape.scalar_value(nodes.total),
        };
        Ok((out, ParamVars::collect_grads(&tape, &grads, self.net.params())))
    }

    /// One optimizer update. A non-finite loss or gradient leaves the
    /// parameters untouched and returns [`Error::Diverged`] carrying them.
    pub fn train_step(&mut self, batch: &Batch) -> Result<LossBreakdown> {
        let (losses, grads) = self.loss_and_grads(batch)?;
        let bad = if !losses.total.is_finite() {
            Some(format!("loss is {}", losses.total))
        } else {
            grads.iter().find(|(_, g)| !g.is_finite()).map(|(name, _)| format!("gradient of `{name}` is not finite"))
        };
        if let Some(reason) = bad {
            return Err(Error::Diverged { step: self.step + 1, reason, last_good: Box::new(self.checkpoint()) });
        }
        self.optimizer.set_lr(self.cfg.lr_at(self.step));
        self.optimizer.step(self.net.params_mut(), &grads);
        self.step += 1;
        Ok(losses)
    }

    pub fn evaluate(&self) -> Result<HeldOut> {
        let losses = self.losses(&self.heldout)?;
        let probs = self.net.predict_concepts_batch(&self.heldout.v0, 1)?;
        let k = self.net.concepts().len();
        let mut hits = 0usize;
        for (p, c) in probs.iter().zip(&self.heldout.labels) {
            for (kk, pk) in p.iter().enumerate() {
                let arg = (0..pk.len()).fold(0, |best, j| if pk[j] > pk[best] { j } else { best });
                hits += usize::from(arg == c.get(kk));
            }
        }
        Ok(HeldOut {
            losses,
            concept_loss_per_concept: losses.concept / k as f64,
            accuracy: hits as f64 / (probs.len() * k) as f64,
        })
    }

    /// Largest relative error between engine gradients and central
    /// differences of the total loss over 20 random parameter coordinates.
    pub fn verify_gradients(&mut self, batch: &Batch) -> Result<f64> {
        let (_, grads) = self.loss_and_grads(batch)?;
        let count = self.net.params().count();
        let coords: Vec<usize> = (0..20).map(|_| self.verify_rng.random_range(0..count)).collect();
        let mut probe = self.net.clone();
        let mut worst = 0.0f64;
        for c in coords {
            let x = probe.params().flat_get(c);
            let h = 1e-3 * x.abs().max(1.0);
            let mut at = |dx: f64| -> Result<f64> {
                probe.params_mut().flat_set(c, x + dx);
                Ok(losses_of(&probe, &self.schedule, batch, self.cfg.gamma)?.total)
            };
            // fourth-order central stencil; the loss is large enough that
            // second-order differences drown in rounding
            let fd = (at(-2.0 * h)? - 8.0 * at(-h)? + 8.0 * at(h)? - at(2.0 * h)?) / (12.0 * h);
            probe.params_mut().flat_set(c, x);
            let g = grads.flat_get(c);
            worst = worst.max((fd - g).abs() / fd.abs().max(g.abs()).max(1e-6));
        }
        Ok(worst)
    }

    /// Runs the configured number of steps, reporting each metric record
    /// as it is produced.
    pub fn run(&mut self, mut on_record: impl FnMut(&MetricRecord) -> Result<()>) -> Result<()> {
        while self.step < self.cfg.steps {
            let batch = self.draw_batch();
            let losses = self.train_step(&batch)?;
            if self.step % self.cfg.eval_every == 0 || self.step == self.cfg.steps {
                let held = self.evaluate()?;
                let gradient_check = if self.cfg.verify_gradients {
                    let worst = self.verify_gradients(&batch)?;
                    if worst > 1e-4 {
                        return Err(Error::GradientCheck { step: self.step, max_rel_error: worst });
                    }
                    Some(worst)
                } else {
                    None
                };
                let rec = MetricRecord {
                    step: self.step,
                    score_loss: losses.score,
                    concept_loss: losses.concept,
                    total_loss: losses.total,
                    accuracy: held.accuracy,
                    heldout_concept_loss: held.concept_loss_per_concept,
                    gradient_check,
                };
                on_record(&rec)?;
                self.history.push(rec);
            }
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            network: self.net.clone(),
            schedule: self.schedule.config(),
            world: self.world.config().clone(),
            step: self.step,
            history: self.history.clone(),
            train: Some(self.cfg.clone()),
        }
    }
}

fn losses_of(net: &EnergyNetwork, schedule: &NoiseSchedule, batch: &Batch, gamma: f64) -> Result<LossBreakdown> {
    let mut tape = Tape::with_mode(CheckMode::Fast);
    let pv = net.register(&mut tape);
    let nodes = loss::batch_loss_on_tape(&mut tape, net, &pv, schedule, batch, gamma)?;
    Ok(LossBreakdown {
        score: tape.scalar_value(nodes.score),
        concept: tape.scalar_value(nodes.concept),
        total: tape.scalar_value(nodes.total),
    })
}

/// Trains from a fresh initialization and returns the final checkpoint.
pub fn train(cfg: &TrainConfig, model: &ModelConfig, world: &World, schedule: &NoiseSchedule) -> Result<Checkpoint> {
    let mut t = Trainer::new(cfg.clone(), model, world, schedule)?;
    t.run(|_| Ok(()))?;
    Ok(t.checkpoint())
}
