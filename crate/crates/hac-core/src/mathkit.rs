//! Reference-frame transforms and angle-space arithmetic.
//!
//! All ac-side quantities are real pairs in the αβ or dq plane. The
//! controller's relative angle lives on `M = [-2π, 2π]` with the endpoints
//! identified (the boundary of a Möbius strip, circumference 4π), which is
//! the natural domain of the 4π-periodic half-angle feedback.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const TWO_PI: f64 = 2.0 * std::f64::consts::PI;
pub const FOUR_PI: f64 = 4.0 * std::f64::consts::PI;

#[derive(Debug, Error, PartialEq)]
pub enum MathError {
    #[error("three-phase input unbalanced: |z_a+z_b+z_c| = {sum_abs:.3e} exceeds {tol:.3e}")]
    Unbalanced { sum_abs: f64, tol: f64 },
    #[error("polar decomposition of the zero vector is not unique")]
    ZeroVector,
    #[error("expected a unit vector, got norm {norm}")]
    NotUnit { norm: f64 },
}

/// An αβ or dq pair. Units are context dependent (A, V, or dimensionless).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Vec2 {
    pub a: f64,
    pub b: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { a: 0.0, b: 0.0 };

    pub fn new(a: f64, b: f64) -> Self {
        Vec2 { a, b }
    }

    pub fn dot(self, other: Vec2) -> f64 {
        self.a * other.a + self.b * other.b
    }

    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    pub fn norm(self) -> f64 {
        self.norm_sq().sqrt()
    }

    /// `J z` with `J = [[0, 1], [-1, 0]]`, the skew matrix appearing in the
    /// impedance matrices and the reactive-power forms.
    pub fn skew(self) -> Vec2 {
        Vec2::new(self.b, -self.a)
    }

    pub fn is_finite(self) -> bool {
        self.a.is_finite() && self.b.is_finite()
    }
}

impl std::ops::Add for Vec2 {
    type Output = Vec2;
    fn add(self, rhs: Vec2) -> Vec2 {
        Vec2::new(self.a + rhs.a, self.b + rhs.b)
    }
}

impl std::ops::Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, rhs: Vec2) -> Vec2 {
        Vec2::new(self.a - rhs.a, self.b - rhs.b)
    }
}

impl std::ops::Neg for Vec2 {
    type Output = Vec2;
    fn neg(self) -> Vec2 {
        Vec2::new(-self.a, -self.b)
    }
}

impl std::ops::Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, s: f64) -> Vec2 {
        Vec2::new(self.a * s, self.b * s)
    }
}

/// Magnitude-preserving Clarke transform of a balanced three-phase triple.
///
/// The input must satisfy `z_a + z_b + z_c = 0` within `1e-9 · max|z|`.
pub fn clarke(z_abc: [f64; 3]) -> Result<Vec2, MathError> {
    let [za, zb, zc] = z_abc;
    let sum_abs = (za + zb + zc).abs();
    let scale = za.abs().max(zb.abs()).max(zc.abs());
    let tol = 1e-9 * scale;
    if sum_abs > tol {
        return Err(MathError::Unbalanced { sum_abs, tol });
    }
    Ok(Vec2::new(
        (2.0 / 3.0) * (za - 0.5 * zb - 0.5 * zc),
        (2.0 / 3.0) * (3f64.sqrt() / 2.0) * (zb - zc),
    ))
}

/// Applies the rotation `R(angle) = [[cos, -sin], [sin, cos]]`.
pub fn rotate(angle: f64, z: Vec2) -> Vec2 {
    let (s, c) = angle.sin_cos();
    Vec2::new(c * z.a - s * z.b, s * z.a + c * z.b)
}

/// Unit vector at the given angle, `ψ(φ) = (cos φ, sin φ)`.
pub fn psi(angle: f64) -> Vec2 {
    let (s, c) = angle.sin_cos();
    Vec2::new(c, s)
}

/// Cartesian to polar. Undefined at the origin.
pub fn to_polar(z: Vec2) -> Result<(f64, f64), MathError> {
    let mag = z.norm();
    if mag == 0.0 {
        return Err(MathError::ZeroVector);
    }
    Ok((mag, z.b.atan2(z.a)))
}

pub fn from_polar(mag: f64, angle: f64) -> Vec2 {
    psi(angle) * mag
}

/// An angle canonicalized onto `M = [-2π, 2π]`, `±2π` identified.
///
/// The integrator evolves raw real-valued angles; canonicalization happens
/// only at recording and comparison boundaries so the RK stages always see
/// a smooth right-hand side.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MobiusAngle(f64);

impl MobiusAngle {
    pub fn value(self) -> f64 {
        self.0
    }

    /// Geodesic distance on the circle of circumference 4π.
    pub fn distance(self, other: MobiusAngle) -> f64 {
        let d = (self.0 - other.0).abs();
        d.min(FOUR_PI - d)
    }

    pub fn approx_eq(self, other: MobiusAngle, tol: f64) -> bool {
        self.distance(other) <= tol
    }
}

/// Reduces a raw angle modulo 4π onto `(-2π, 2π]`.
pub fn wrap_mobius(raw: f64) -> MobiusAngle {
    let mut r = raw.rem_euclid(FOUR_PI);
    if r > TWO_PI {
        r -= FOUR_PI;
    }
    MobiusAngle(r)
}

/// Möbius distance between two raw angles.
pub fn mobius_distance(a: f64, b: f64) -> f64 {
    wrap_mobius(a).distance(wrap_mobius(b))
}
