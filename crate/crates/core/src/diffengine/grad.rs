use super::{Array, EngineError, ParameterSet, Tape, Var};

/// Tape handles for every array of a [`ParameterSet`], in set order.
#[derive(Clone, Debug)]
pub struct ParamVars {
    vars: Vec<Var>,
}

impl ParamVars {
    /// Records every parameter array as a leaf.
    pub fn register(tape: &mut Tape, params: &ParameterSet) -> Self {
        Self { vars: params.arrays().iter().map(|a| tape.leaf(a.clone())).collect() }
    }

    pub fn get(&self, index: usize) -> Var {
        self.vars[index]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Reads gradient values for these parameters back into a set shaped
    /// like `like`.
    pub fn collect_grads(tape: &Tape, grads: &[Var], like: &ParameterSet) -> ParameterSet {
        let mut out = like.zeros_like();
        for (i, g) in grads.iter().enumerate() {
            out.data_mut(i).copy_from_slice(tape.value(*g).data());
        }
        out
    }
}

/// `∇_v f` for a scalar function recorded by `f` on a fresh tape.
pub fn grad_input<F>(v: &Array, f: F) -> Result<Array, EngineError>
where
    F: FnOnce(&mut Tape, Var) -> Var,
{
    let mut tape = Tape::new();
    let x = tape.leaf(v.clone());
    let y = f(&mut tape, x);
    let g = tape.grad(y, &[x])?;
    Ok(tape.value(g[0]).clone())
}

/// `∂f/∂θ`, one gradient array per parameter array.
pub fn grad_params<F>(params: &ParameterSet, f: F) -> Result<ParameterSet, EngineError>
where
    F: FnOnce(&mut Tape, &ParamVars) -> Var,
{
    let mut tape = Tape::new();
    let pv = ParamVars::register(&mut tape, params);
    let y = f(&mut tape, &pv);
    let g = tape.grad(y, pv.vars())?;
    Ok(ParamVars::collect_grads(&tape, &g, params))
}

/// Exact `∂loss/∂θ` where the loss depends on the model score
/// `s_θ(v) = −∇_v E_θ(v)`.
///
/// `energy` records the scalar energy; `loss` receives the score as a tape
/// variable shaped like `v` and records the scalar loss. The inner gradient
/// is built on the tape and then differentiated, so every activation inside
/// `energy` must be smooth. Returns the loss value and its parameter
/// gradients.
pub fn grad_params_of_input_grad<E, L>(
    params: &ParameterSet,
    v: &Array,
    energy: E,
    loss: L,
) -> Result<(f64, ParameterSet), EngineError>
where
    E: FnOnce(&mut Tape, &ParamVars, Var) -> Var,
    L: FnOnce(&mut Tape, Var) -> Var,
{
    let mut tape = Tape::new();
    let pv = ParamVars::register(&mut tape, params);
    let x = tape.leaf(v.clone());
    let e = energy(&mut tape, &pv, x);
    let grad_v = tape.grad(e, &[x])?[0];
    let score = tape.neg(grad_v);
    let l = loss(&mut tape, score);
    let g = tape.grad(l, pv.vars())?;
    Ok((tape.scalar_value(l), ParamVars::collect_grads(&tape, &g, params)))
}

/// Loss closure `½‖target − s‖²` for [`grad_params_of_input_grad`].
pub fn score_matching_objective(target: Array) -> impl FnOnce(&mut Tape, Var) -> Var {
    move |tape, score| {
        let t = tape.leaf(target);
        let r = tape.sub(t, score);
        let sq = tape.sum_squares(r);
        tape.scale(sq, 0.5)
    }
}
