use std::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::polygon::ConvexPolygon;

/// Wraps an angle into `[−π/2, π/2)` with period π.
///
/// A rectangle rotated by π is the same rectangle, so no extent swap is
/// needed for this wrap.
pub fn normalize_angle(alpha: f64) -> f64 {
    let mut a = alpha - PI * ((alpha + FRAC_PI_2) / PI).floor();
    // floor can land one ulp on the wrong side
    if a >= FRAC_PI_2 {
        a -= PI;
    }
    if a < -FRAC_PI_2 {
        a += PI;
    }
    a
}

/// Oriented rectangle in normalized image coordinates.
///
/// `alpha` is measured from the x axis to the `w` edge and is kept in
/// `[−π/2, π/2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RotatedBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub alpha: f64,
}

impl RotatedBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64, alpha: f64) -> Result<Self> {
        if ![cx, cy, w, h, alpha].iter().all(|v| v.is_finite()) {
            return Err(Error::Parameter(format!(
                "non-finite box ({cx}, {cy}, {w}, {h}, {alpha})"
            )));
        }
        if w <= 0.0 || h <= 0.0 {
            return Err(Error::Parameter(format!(
                "box extents must be positive, got {w}x{h}"
            )));
        }
        Ok(Self {
            cx,
            cy,
            w,
            h,
            alpha: normalize_angle(alpha),
        })
    }

    pub fn from_array(p: [f64; 5]) -> Result<Self> {
        Self::new(p[0], p[1], p[2], p[3], p[4])
    }

    pub fn to_array(self) -> [f64; 5] {
        [self.cx, self.cy, self.w, self.h, self.alpha]
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Long-edge form: `w ≥ h`, swapping extents and turning by π/2 if needed.
    pub fn long_edge(self) -> Self {
        if self.h > self.w {
            Self {
                w: self.h,
                h: self.w,
                alpha: normalize_angle(self.alpha + FRAC_PI_2),
                ..self
            }
        } else {
            self
        }
    }

    pub fn to_polygon(&self) -> ConvexPolygon {
        ConvexPolygon::from_vertices(corners(self.to_array()).to_vec())
    }

    /// Whether a point lies inside (boundary included).
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.alpha.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        u.abs() <= 0.5 * self.w && v.abs() <= 0.5 * self.h
    }

    /// Same rectangle turned by `theta` about `(px, py)`.
    pub fn rotated_about(&self, px: f64, py: f64, theta: f64) -> Self {
        let (s, c) = theta.sin_cos();
        let (dx, dy) = (self.cx - px, self.cy - py);
        Self {
            cx: px + c * dx - s * dy,
            cy: py + s * dx + c * dy,
            w: self.w,
            h: self.h,
            alpha: normalize_angle(self.alpha + theta),
        }
    }
}

/// Counter-clockwise corners of `(cx, cy, w, h, alpha)`.
pub(crate) fn corners<T: super::Real>(p: [T; 5]) -> [[T; 2]; 4] {
    let [cx, cy, w, h, a] = p;
    let half = T::cst(0.5);
    let (c, s) = (a.cos(), a.sin());
    // half-extent vectors along the w and h edges
    let (ux, uy) = (half * w * c, half * w * s);
    let (vx, vy) = (-(half * h * s), half * h * c);
    [
        [cx - ux - vx, cy - uy - vy],
        [cx + ux - vx, cy + uy - vy],
        [cx + ux + vx, cy + uy + vy],
        [cx - ux + vx, cy - uy + vy],
    ]
}
