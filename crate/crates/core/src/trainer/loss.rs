use crate::diffengine::{Array, ParamVars, Tape, Var};
use crate::diffusion::NoiseSchedule;
use crate::energymodel::{ConceptAssignment, EnergyNetwork};
use crate::error::{Error, Result};

/// A training mini-batch: clean latents, their labels, timesteps and the
/// noise used to corrupt them.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub v0: Array,
    pub labels: Vec<ConceptAssignment>,
    pub ts: Vec<usize>,
    pub eps: Array,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.ts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ts.is_empty()
    }

    fn validate(&self, net: &EnergyNetwork) -> Result<()> {
        let (b, d) = (self.ts.len(), net.latent_dim());
        if b == 0 {
            return Err(Error::invalid("empty batch"));
        }
        if self.v0.shape() != [b, d] || self.eps.shape() != [b, d] || self.labels.len() != b {
            return Err(Error::invalid(format!("batch pieces disagree on shape [{b}, {d}]")));
        }
        self.labels.iter().try_for_each(|c| net.concepts().check_assignment(c))
    }
}

/// Mean losses over a batch.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossBreakdown {
    pub score: f64,
    pub concept: f64,
    pub total: f64,
}

pub(crate) struct LossNodes {
    pub score: Var,
    pub concept: Var,
    pub total: Var,
}

/// Noised latents and score targets for every row of the batch.
pub(crate) fn noised(schedule: &NoiseSchedule, batch: &Batch) -> Result<(Array, Array)> {
    let (b, d) = (batch.len(), batch.v0.cols());
    let mut vt = Vec::with_capacity(b * d);
    let mut target = Vec::with_capacity(b * d);
    for (r, &t) in batch.ts.iter().enumerate() {
        let x = schedule.forward_noise(batch.v0.row(r), t, batch.eps.row(r))?;
        target.extend(schedule.target_score(batch.v0.row(r), &x, t)?);
        vt.extend(x);
    }
    Ok((Array::matrix(b, d, vt)?, Array::matrix(b, d, target)?))
}

/// Records `L_score + γ · L_concept` for a batch.
///
/// Head `k` is conditioned on the token of the label it is supervised
/// with. The model score is `−∇_v Σ_k e_k`, so the score residual is
/// `target + ∇_v E`.
pub(crate) fn batch_loss_on_tape(
    tape: &mut Tape,
    net: &EnergyNetwork,
    pv: &ParamVars,
    schedule: &NoiseSchedule,
    batch: &Batch,
    gamma: f64,
) -> Result<LossNodes> {
    batch.validate(net)?;
    let b = batch.len();
    let (vt, target) = noised(schedule, batch)?;
    let v = tape.leaf(vt);
    let shared = net.shared_input(tape, pv, v, &batch.ts);
    let mut energy = None;
    let mut ce = None;
    for k in 0..net.concepts().len() {
        let values: Vec<usize> = batch.labels.iter().map(|c| c.get(k)).collect();
        let logits = net.head_logits(tape, pv, shared, k, &values);
        let e = tape.logsumexp_rows(logits);
        let picked = tape.pick_cols(logits, values);
        let nll = tape.sub(e, picked);
        let es = tape.sum(e);
        let cs = tape.sum(nll);
        energy = Some(energy.map_or(es, |acc| tape.add(acc, es)));
        ce = Some(ce.map_or(cs, |acc| tape.add(acc, cs)));
    }
    let energy = energy.expect("at least one concept");
    let g = tape.grad(energy, &[v])?[0];
    let target = tape.leaf(target);
    let r = tape.add(g, target);
    let sq = tape.sum_squares(r);
    let score = tape.scale(sq, 0.5 / b as f64);
    let concept = tape.scale(ce.expect("at least one concept"), 1.0 / b as f64);
    let weighted = tape.scale(concept, gamma);
    let total = tape.add(score, weighted);
    Ok(LossNodes { score, concept, total })
}

/// `½‖target_score − model_score‖²` for one example.
pub fn score_matching_loss(
    net: &EnergyNetwork,
    schedule: &NoiseSchedule,
    v0: &[f64],
    c: &ConceptAssignment,
    t: usize,
    eps: &[f64],
) -> Result<f64> {
    let vt = schedule.forward_noise(v0, t, eps)?;
    let target = schedule.target_score(v0, &vt, t)?;
    let s = net.model_score(&vt, t, c)?;
    Ok(0.5 * target.iter().zip(&s).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
}

/// `−Σ_k log softmax(head_k)[label_k]`, averaged over rows. Head `k` of
/// row `b` is conditioned on `cond[b][k]`.
pub fn concept_ce_loss(
    net: &EnergyNetwork,
    vt: &Array,
    ts: &[usize],
    cond: &[ConceptAssignment],
    labels: &[ConceptAssignment],
) -> Result<f64> {
    let b = ts.len();
    if b == 0 || vt.shape() != [b, net.latent_dim()] || cond.len() != b || labels.len() != b {
        return Err(Error::invalid("concept loss inputs disagree on batch size"));
    }
    for c in cond.iter().chain(labels) {
        net.concepts().check_assignment(c)?;
    }
    let mut tape = Tape::new();
    let pv = net.register(&mut tape);
    let v = tape.leaf(vt.clone());
    let shared = net.shared_input(&mut tape, &pv, v, ts);
    let mut total = 0.0;
    for k in 0..net.concepts().len() {
        let values: Vec<usize> = cond.iter().map(|c| c.get(k)).collect();
        let logits = net.head_logits(&mut tape, &pv, shared, k, &values);
        let l = tape.value(logits);
        for (r, lab) in labels.iter().enumerate() {
            let row = l.row(r);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            total += lse - row[lab.get(k)];
        }
    }
    tape.check()?;
    Ok(total / b as f64)
}

pub fn total_loss(score: f64, concept: f64, gamma: f64) -> f64 {
    score + gamma * concept
}
