use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{ConceptAssignment, ConceptSpec, InterventionSpec};
use crate::diffengine::{Activation, Array, ParamVars, ParameterSet, Tape, Var};
use crate::error::{Error, Result};

/// Shape of the energy network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub latent_dim: usize,
    #[serde(default = "Architecture::default_hidden")]
    pub hidden: usize,
    #[serde(default = "Architecture::default_time_dim")]
    pub time_dim: usize,
    #[serde(default = "Architecture::default_trunk_layers")]
    pub trunk_layers: usize,
    /// Number of diffusion steps; timesteps are fed to the network as `t/T`.
    pub timesteps: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl Architecture {
    fn default_hidden() -> usize {
        128
    }
    fn default_time_dim() -> usize {
        32
    }
    fn default_trunk_layers() -> usize {
        2
    }

    pub fn new(latent_dim: usize, timesteps: usize) -> Self {
        Self {
            latent_dim,
            hidden: Self::default_hidden(),
            time_dim: Self::default_time_dim(),
            trunk_layers: Self::default_trunk_layers(),
            timesteps,
            activation: Activation::Silu,
        }
    }

    pub fn with_hidden(mut self, hidden: usize) -> Self {
        self.hidden = hidden;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.hidden == 0 || self.timesteps == 0 {
            return Err(Error::invalid("latent_dim, hidden and timesteps must be positive"));
        }
        if self.time_dim == 0 || self.time_dim % 2 != 0 {
            return Err(Error::invalid("time_dim must be a positive even number"));
        }
        if !self.activation.is_smooth() {
            return Err(Error::invalid(format!(
                "activation `{}` is not smooth; score matching differentiates through the input gradient",
                self.activation.name()
            )));
        }
        Ok(())
    }
}

/// Parameter indices resolved once at construction.
#[derive(Clone, Debug, PartialEq)]
struct Layout {
    input: (usize, usize),
    time: (usize, usize),
    tokens: usize,
    trunk: Vec<(usize, usize)>,
    heads: Vec<(usize, usize)>,
}

/// Concept-conditioned energy network.
///
/// The latent, a sinusoidal timestep embedding and a learned
/// `(concept, value)` token embedding are projected to the hidden width and
/// summed; a smooth MLP trunk follows, and head `k` reads out `n_k` logits.
/// The per-concept energy is the LogSumExp of those logits.
#[derive(Clone, Debug, PartialEq)]
pub struct EnergyNetwork {
    concepts: ConceptSpec,
    arch: Architecture,
    params: ParameterSet,
    layout: Layout,
}

/// Weighted energies and their latent gradient for a batch of latents.
#[derive(Clone, Debug)]
pub struct InterventionEval {
    /// Weighted energy per row.
    pub energy: Vec<f64>,
    /// Unweighted per-term energies, `[term][row]`, in term order.
    pub term_energies: Vec<Vec<f64>>,
    /// `∇_v` of the weighted energy, one row per latent.
    pub grad: Array,
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array {
    let data = (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect();
    Array::from_parts(vec![rows, cols], data)
}

impl EnergyNetwork {
    /// Freshly initialized network: fan-in scaled normal weights in the
    /// trunk, zero biases and zero output heads, so every per-concept
    /// energy starts at `ln n_k` regardless of input.
    pub fn new(concepts: ConceptSpec, arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = arch.hidden;
        let mut p = ParameterSet::new();
        let fan = |n: usize| 1.0 / (n as f64).sqrt();
        p.insert("input.weight", normal_matrix(&mut rng, h, arch.latent_dim, fan(arch.latent_dim)))?;
        p.insert("input.bias", Array::zeros(&[h]))?;
        p.insert("time.weight", normal_matrix(&mut rng, h, arch.time_dim, fan(arch.time_dim)))?;
        p.insert("time.bias", Array::zeros(&[h]))?;
        p.insert("token.embedding", normal_matrix(&mut rng, concepts.total_values(), h, 1.0))?;
        for l in 0..arch.trunk_layers {
            p.insert(format!("trunk.{l}.weight"), normal_matrix(&mut rng, h, h, fan(h)))?;
            p.insert(format!("trunk.{l}.bias"), Array::zeros(&[h]))?;
        }
        for k in 0..concepts.len() {
            let n = concepts.cardinality(k);
            p.insert(format!("head.{k}.weight"), Array::zeros(&[n, h]))?;
            p.insert(format!("head.{k}.bias"), Array::zeros(&[n]))?;
        }
        Self::from_params(concepts, arch, p)
    }

    /// Wraps existing parameters, checking every expected name and shape.
    pub fn from_params(concepts: ConceptSpec, arch: Architecture, params: ParameterSet) -> Result<Self> {
        arch.validate()?;
        let h = arch.hidden;
        let find = |name: &str, shape: &[usize]| -> Result<usize> {
            let i = params
                .index_of(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            if params.array(i).shape() != shape {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, expected {shape:?}",
                    params.array(i).shape()
                )));
            }
            Ok(i)
        };
        let layout = Layout {
            input: (find("input.weight", &[h, arch.latent_dim])?, find("input.bias", &[h])?),
            time: (find("time.weight", &[h, arch.time_dim])?, find("time.bias", &[h])?),
            tokens: find("token.embedding", &[concepts.total_values(), h])?,
            trunk: (0..arch.trunk_layers)
                .map(|l| Ok((find(&format!("trunk.{l}.weight"), &[h, h])?, find(&format!("trunk.{l}.bias"), &[h])?)))
                .collect::<Result<_>>()?,
            heads: (0..concepts.len())
                .map(|k| {
                    let n = concepts.cardinality(k);
                    Ok((find(&format!("head.{k}.weight"), &[n, h])?, find(&format!("head.{k}.bias"), &[n])?))
                })
                .collect::<Result<_>>()?,
        };
        let expected = 5 + 2 * arch.trunk_layers + 2 * concepts.len();
        if params.len() != expected {
            return Err(Error::Checkpoint(format!("expected {expected} parameter arrays, found {}", params.len())));
        }
        Ok(Self { concepts, arch, params, layout })
    }

    pub fn concepts(&self) -> &ConceptSpec {
        &self.concepts
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }

    pub fn latent_dim(&self) -> usize {
        self.arch.latent_dim
    }

    /// Sinusoidal features of `t/T`, one row per timestep.
    pub fn time_features(&self, ts: &[usize]) -> Array {
        let half = self.arch.time_dim / 2;
        let mut data = Vec::with_capacity(ts.len() * self.arch.time_dim);
        for &t in ts {
            let phase = 1000.0 * t as f64 / self.arch.timesteps as f64;
            let freqs = (0..half).map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp());
            let angles: Vec<f64> = freqs.map(|w| phase * w).collect();
            data.extend(angles.iter().map(|a| a.sin()));
            data.extend(angles.iter().map(|a| a.cos()));
        }
        Array::from_parts(vec![ts.len(), self.arch.time_dim], data)
    }

    pub fn register(&self, tape: &mut Tape) -> ParamVars {
        ParamVars::register(tape, &self.params)
    }

    /// The concept-independent part of the trunk input,
    /// `W_in v + b_in + W_t φ(t/T) + b_t`, for latents `v: [B × d]`.
    pub fn shared_input(&self, tape: &mut Tape, pv: &ParamVars, v: Var, ts: &[usize]) -> Var {
        let (wi, bi) = self.layout.input;
        let (wt, bt) = self.layout.time;
        let x = tape.affine(v, pv.get(wi), pv.get(bi));
        let tf = tape.leaf(self.time_features(ts));
        let te = tape.affine(tf, pv.get(wt), pv.get(bt));
        tape.add(x, te)
    }

    /// Head-`k` logits `[B × n_k]` with row `b` conditioned on token
    /// `(k, values[b])`.
    pub fn head_logits(&self, tape: &mut Tape, pv: &ParamVars, shared: Var, k: usize, values: &[usize]) -> Var {
        let idx: Vec<usize> = values.iter().map(|&c| self.concepts.token(k, c)).collect();
        let tok = tape.gather_rows(pv.get(self.layout.tokens), idx);
        let mut h = tape.add(shared, tok);
        h = tape.activate(h, self.arch.activation);
        for &(w, b) in &self.layout.trunk {
            h = tape.affine(h, pv.get(w), pv.get(b));
            h = tape.activate(h, self.arch.activation);
        }
        let (w, b) = self.layout.heads[k];
        tape.affine(h, pv.get(w), pv.get(b))
    }

    /// Per-row weighted energy `Σ_terms w · LSE(logits)` plus each term's
    /// unweighted energy.
    pub fn weighted_energy_on_tape(
        &self,
        tape: &mut Tape,
        pv: &ParamVars,
        shared: Var,
        terms: &[(usize, Vec<usize>, f64)],
    ) -> (Var, Vec<Var>) {
        let mut total = None;
        let mut parts = Vec::with_capacity(terms.len());
        for (k, values, w) in terms {
            let logits = self.head_logits(tape, pv, shared, *k, values);
            let e = tape.logsumexp_rows(logits);
            parts.push(e);
            let we = if *w == 1.0 { e } else { tape.scale(e, *w) };
            total = Some(match total {
                None => we,
                Some(acc) => tape.add(acc, we),
            });
        }
        (total.expect("at least one energy term"), parts)
    }

    fn check_latent(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.arch.latent_dim {
            return Err(Error::invalid(format!("latent has {} entries, expected {}", v.len(), self.arch.latent_dim)));
        }
        Ok(())
    }

    fn check_time(&self, t: usize) -> Result<()> {
        if t > self.arch.timesteps {
            return Err(Error::invalid(format!("timestep {t} outside 0..={}", self.arch.timesteps)));
        }
        Ok(())
    }

    fn latent_leaf(&self, tape: &mut Tape, v: &[f64]) -> Result<Var> {
        self.check_latent(v)?;
        Ok(tape.leaf(Array::matrix(1, v.len(), v.to_vec())?))
    }

    pub fn concept_logits(&self, v: &[f64], t: usize, k: usize, value: usize) -> Result<Vec<f64>> {
        self.concepts.check_value(k, value)?;
        self.check_time(t)?;
        let mut tape = Tape::new();
        let pv = self.register(&mut tape);
        let x = self.latent_leaf(&mut tape, v)?;
        let shared = self.shared_input(&mut tape, &pv, x, &[t]);
        let logits = self.head_logits(&mut tape, &pv, shared, k, &[value]);
        tape.check()?;
        Ok(tape.value(logits).data().to_vec())
    }

    /// `LogSumExp` of the head-`k` logits under token `(k, value)`.
    pub fn per_concept_energy(&self, v: &[f64], t: usize, k: usize, value: usize) -> Result<f64> {
        self.concepts.check_value(k, value)?;
        self.energy_terms(v, t, &[(k, value, 1.0)])
    }

    /// `Σ_k e(v, t, k, c_k)`, summed in concept order.
    pub fn composed_energy(&self, v: &[f64], t: usize, c: &ConceptAssignment) -> Result<f64> {
        self.concepts.check_assignment(c)?;
        let terms: Vec<_> = c.values().iter().enumerate().map(|(k, &val)| (k, val, 1.0)).collect();
        self.energy_terms(v, t, &terms)
    }

    pub fn intervention_energy(&self, v: &[f64], t: usize, spec: &InterventionSpec) -> Result<f64> {
        spec.validate(&self.concepts)?;
        let terms: Vec<_> = spec.terms().iter().map(|e| (e.concept, e.token_value, e.weight)).collect();
        self.energy_terms(v, t, &terms)
    }

    fn energy_terms(&self, v: &[f64], t: usize, terms: &[(usize, usize, f64)]) -> Result<f64> {
        self.check_time(t)?;
        let mut tape = Tape::new();
        let pv = self.register(&mut tape);
        let x = self.latent_leaf(&mut tape, v)?;
        let shared = self.shared_input(&mut tape, &pv, x, &[t]);
        let batch: Vec<_> = terms.iter().map(|&(k, val, w)| (k, vec![val], w)).collect();
        let (e, _) = self.weighted_energy_on_tape(&mut tape, &pv, shared, &batch);
        tape.check()?;
        Ok(tape.value(e).data()[0])
    }

    /// Per-concept probabilities read off the diagonal: candidate value `j`
    /// is scored by logit `j` of head `k` under token `(k, j)`, and the
    /// scores are softmax-normalized over `j`.
    pub fn predict_concepts(&self, v: &[f64], t: usize) -> Result<Vec<Vec<f64>>> {
        let rows = Array::matrix(1, v.len(), v.to_vec())?;
        self.check_latent(v)?;
        Ok(self.predict_concepts_batch(&rows, t)?.remove(0))
    }

    /// Batched [`EnergyNetwork::predict_concepts`]: `[row][concept][value]`.
    pub fn predict_concepts_batch(&self, vs: &Array, t: usize) -> Result<Vec<Vec<Vec<f64>>>> {
        self.check_time(t)?;
        let b = vs.rows();
        let mut tape = Tape::new();
        let pv = self.register(&mut tape);
        let x = tape.leaf(vs.clone());
        let shared = self.shared_input(&mut tape, &pv, x, &vec![t; b]);
        let mut out = vec![Vec::with_capacity(self.concepts.len()); b];
        for k in 0..self.concepts.len() {
            let n = self.concepts.cardinality(k);
            let mut diag = vec![vec![0.0; n]; b];
            for j in 0..n {
                let logits = self.head_logits(&mut tape, &pv, shared, k, &vec![j; b]);
                let l = tape.value(logits);
                for (r, d) in diag.iter_mut().enumerate() {
                    d[j] = l.row(r)[j];
                }
            }
            for (r, d) in diag.into_iter().enumerate() {
                out[r].push(softmax(&d));
            }
        }
        tape.check()?;
        Ok(out)
    }

    /// Model score `−∇_v Σ_k e(v, t, k, c_k)`.
    pub fn model_score(&self, v: &[f64], t: usize, c: &ConceptAssignment) -> Result<Vec<f64>> {
        self.concepts.check_assignment(c)?;
        self.check_latent(v)?;
        let spec = InterventionSpec::all_active(c);
        let eval = self.intervention_eval(&Array::matrix(1, v.len(), v.to_vec())?, t, &spec)?;
        Ok(eval.grad.data().iter().map(|g| -g).collect())
    }

    /// Weighted energies and `∇_v` for every row of `vs: [B × d]` at a
    /// common timestep.
    pub fn intervention_eval(&self, vs: &Array, t: usize, spec: &InterventionSpec) -> Result<InterventionEval> {
        spec.validate(&self.concepts)?;
        self.check_time(t)?;
        if vs.shape().len() != 2 || vs.cols() != self.arch.latent_dim {
            return Err(Error::invalid(format!("latents have shape {:?}, expected [B, {}]", vs.shape(), self.arch.latent_dim)));
        }
        let b = vs.rows();
        let mut tape = Tape::new();
        let pv = self.register(&mut tape);
        let x = tape.leaf(vs.clone());
        let shared = self.shared_input(&mut tape, &pv, x, &vec![t; b]);
        let terms: Vec<_> = spec.terms().iter().map(|e| (e.concept, vec![e.token_value; b], e.weight)).collect();
        let (e, parts) = self.weighted_energy_on_tape(&mut tape, &pv, shared, &terms);
        let total = tape.sum(e);
        let g = tape.grad(total, &[x])?[0];
        Ok(InterventionEval {
            energy: tape.value(e).data().to_vec(),
            term_energies: parts.iter().map(|p| tape.value(*p).data().to_vec()).collect(),
            grad: tape.value(g).clone(),
        })
    }
}

pub(crate) fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}
