use serde::{Deserialize, Serialize};

pub const GLYPH_ATTRIBUTES: [&str; 6] = ["x", "y", "size", "elongation", "rotation", "hue"];

pub(super) const MIDPOINTS: [f64; 6] = [0.0, 0.0, 0.55, 1.0, 0.0, 180.0];
pub(super) const HALF_RANGES: [f64; 6] = [1.0, 1.0, 0.45, 0.5, std::f64::consts::FRAC_PI_2, 180.0];

/// Visual attributes of a decoded latent.
///
/// | attribute    | range           |
/// |--------------|-----------------|
/// | `x`, `y`     | (−1, 1)         |
/// | `size`       | (0.1, 1)        |
/// | `elongation` | (0.5, 1.5)      |
/// | `rotation`   | (−π/2, π/2) rad |
/// | `hue`        | (0, 360) deg    |
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Glyph {
    pub x: f64,
    pub y: f64,
    pub size: f64,
    pub elongation: f64,
    pub rotation: f64,
    pub hue: f64,
}

impl Glyph {
    pub(super) fn from_normalized(u: [f64; 6]) -> Self {
        let a: [f64; 6] = std::array::from_fn(|j| MIDPOINTS[j] + HALF_RANGES[j] * u[j]);
        Self { x: a[0], y: a[1], size: a[2], elongation: a[3], rotation: a[4], hue: a[5] }
    }

    pub fn to_array(&self) -> [f64; 6] {
        [self.x, self.y, self.size, self.elongation, self.rotation, self.hue]
    }

    /// Inverse of the affine map onto each attribute's range, in (−1, 1).
    pub fn normalized(&self) -> [f64; 6] {
        let a = self.to_array();
        std::array::from_fn(|j| (a[j] - MIDPOINTS[j]) / HALF_RANGES[j])
    }

    /// Closed bounds of each attribute, in [`GLYPH_ATTRIBUTES`] order.
    pub fn bounds() -> [(f64, f64); 6] {
        std::array::from_fn(|j| (MIDPOINTS[j] - HALF_RANGES[j], MIDPOINTS[j] + HALF_RANGES[j]))
    }
}
