//! Parametric per-pixel color transforms used by the mock editors and by
//! the fixture oracle to produce edited ground truth.

use serde::{Deserialize, Serialize};

use crate::image::{Image, Rgb};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ColorTransform {
    Identity,
    /// Rotation of the HSV hue angle; saturation and value are preserved.
    Hue {
        degrees: f64,
    },
    /// `out = A * rgb + b`, clamped to `[0, 1]`. Row-major `[A | b]`.
    Affine {
        matrix: [f64; 12],
    },
}

impl ColorTransform {
    pub fn apply(&self, rgb: Rgb) -> Rgb {
        match self {
            ColorTransform::Identity => rgb,
            ColorTransform::Hue { degrees } => rotate_hue(rgb, *degrees),
            ColorTransform::Affine { matrix: m } => std::array::from_fn(|r| {
                (m[4 * r] * rgb[0] + m[4 * r + 1] * rgb[1] + m[4 * r + 2] * rgb[2] + m[4 * r + 3])
                    .clamp(0.0, 1.0)
            }),
        }
    }

    pub fn apply_image(&self, img: &Image) -> Image {
        img.map(|p| self.apply(p))
    }
}

/// HSV hue rotation. Inputs outside `[0, 1]` are clamped first.
pub fn rotate_hue(rgb: Rgb, degrees: f64) -> Rgb {
    let [r, g, b] = rgb.map(|v| v.clamp(0.0, 1.0));
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let chroma = max - min;
    if chroma <= 0.0 {
        return [r, g, b];
    }
    let sector = if max == r {
        ((g - b) / chroma).rem_euclid(6.0)
    } else if max == g {
        (b - r) / chroma + 2.0
    } else {
        (r - g) / chroma + 4.0
    };
    let hue = (sector + degrees / 60.0).rem_euclid(6.0);
    let x = chroma * (1.0 - ((hue % 2.0) - 1.0).abs());
    let (r1, g1, b1) = match hue as u32 {
        0 => (chroma, x, 0.0),
        1 => (x, chroma, 0.0),
        2 => (0.0, chroma, x),
        3 => (0.0, x, chroma),
        4 => (x, 0.0, chroma),
        _ => (chroma, 0.0, x),
    };
    [r1 + min, g1 + min, b1 + min]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hue_rotation_by_120_cycles_channels() {
        // Rotating hue by +120 degrees moves red to green, green to blue.
        let out = rotate_hue([0.9, 0.2, 0.1], 120.0);
        let expected = [0.1, 0.9, 0.2];
        for c in 0..3 {
            assert!((out[c] - expected[c]).abs() < 1e-12, "{out:?}");
        }
    }

    #[test]
    fn grays_are_fixed_points() {
        for v in [0.0, 0.37, 1.0] {
            assert_eq!(rotate_hue([v, v, v], 73.0), [v, v, v]);
        }
    }

    #[test]
    fn full_turn_is_identity() {
        let c = [0.8, 0.35, 0.6];
        let out = rotate_hue(c, 360.0);
        for i in 0..3 {
            assert!((out[i] - c[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn affine_identity_matrix() {
        let t = ColorTransform::Affine {
            matrix: [1., 0., 0., 0., 0., 1., 0., 0., 0., 0., 1., 0.],
        };
        assert_eq!(t.apply([0.1, 0.5, 0.9]), [0.1, 0.5, 0.9]);
    }
}
