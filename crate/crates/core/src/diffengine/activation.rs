use serde::{Deserialize, Serialize};

/// Highest derivative order available for smooth activations.
pub const MAX_ACTIVATION_ORDER: u8 = 3;

/// Pointwise nonlinearities understood by the tape.
///
/// Every smooth variant exposes closed-form derivatives up to
/// [`MAX_ACTIVATION_ORDER`], so a gradient trace that contains them can be
/// differentiated once more. `Relu` is kept for diagnostics: its first
/// derivative exists almost everywhere, its second does not.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Silu,
    Softplus,
    Tanh,
    Relu,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Activation {
    pub fn is_smooth(self) -> bool {
        !matches!(self, Activation::Relu)
    }

    /// Highest order for which [`Activation::derivative`] is defined.
    pub fn max_order(self) -> u8 {
        match self {
            Activation::Relu => 1,
            _ => MAX_ACTIVATION_ORDER,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Silu => "silu",
            Activation::Softplus => "softplus",
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
        }
    }

    /// `order`-th derivative at `x`; order 0 is the function itself.
    ///
    /// Panics if `order > self.max_order()`; the tape checks this before
    /// calling.
    pub fn derivative(self, order: u8, x: f64) -> f64 {
        assert!(order <= self.max_order(), "{} has no derivative of order {order}", self.name());
        match self {
            Activation::Silu => {
                let s = sigmoid(x);
                let u = s * (1.0 - s);
                match order {
                    0 => x * s,
                    1 => s * (1.0 + x * (1.0 - s)),
                    2 => u * (2.0 + x * (1.0 - 2.0 * s)),
                    _ => u * ((1.0 - 2.0 * s) * (3.0 + x * (1.0 - 2.0 * s)) - 2.0 * x * u),
                }
            }
            Activation::Softplus => {
                let s = sigmoid(x);
                match order {
                    0 => x.max(0.0) + (-x.abs()).exp().ln_1p(),
                    1 => s,
                    2 => s * (1.0 - s),
                    _ => s * (1.0 - s) * (1.0 - 2.0 * s),
                }
            }
            Activation::Tanh => {
                let y = x.tanh();
                let d = 1.0 - y * y;
                match order {
                    0 => y,
                    1 => d,
                    2 => -2.0 * y * d,
                    _ => d * (6.0 * y * y - 2.0),
                }
            }
            Activation::Relu => match order {
                0 => x.max(0.0),
                _ => {
                    if x > 0.0 {
                        1.0
                    } else {
                        0.0
                    }
                }
            },
        }
    }
}
