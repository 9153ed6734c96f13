//! Hybrid angle control, its implicit-measurement implementation, the
//! proportional dc-voltage regulation, and the current-limiting modulation
//! control.
//!
//! The control law is
//!
//! ```text
//! ω_c = ω_0 + η(v_dc - v_dc,r) - γ·sin((θ - θ_r)/2)
//! i_dc,r = i_r - κ(v_dc - v_dc,r)
//! ```
//!
//! Three variants of the angle feedback are provided: the explicit half-angle
//! sine, the implicit implementation built from the unit vectors `ψ(θ_r)` and
//! `ψ(θ)` (which outside `|θ-θ_r| < π` equals the 2π-periodic switching
//! signal `u_sw = sgn(cos(θ̃/2))·sin(θ̃/2)`), and an arctan feedback acting on
//! the unwrapped real-line angle.
//!
//! Current limiting re-parametrizes the modulation magnitude as
//! `μ = (1-Δμ)·μ_r` with a barrier-type `Δμ` that makes `‖i‖` strictly
//! decreasing above the threshold current.

use crate::mathkit::{psi, rotate, to_polar, wrap_mobius, Vec2};
use crate::plant::{PlantParams, StateCoi, StateIb};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Denominator threshold below which the implicit feedback is on the
/// switching surface `|θ - θ_r| = π` and the one-sided limit ±1 is returned.
pub const SWITCHING_SURFACE_EPS: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum ControlError {
    #[error("expected unit vector, got norm {norm}")]
    NotUnit { norm: f64 },
    #[error("disturbance D is undefined: {reason}")]
    DisturbanceUndefined { reason: &'static str },
    #[error("feedforward requires a nonzero power reference")]
    ZeroPowerReference,
    #[error("feedforward produced an inconsistent result: {reason}")]
    Inconsistent { reason: &'static str },
    #[error("control parameter {name} out of range: {value}")]
    BadParameter { name: &'static str, value: f64 },
}

/// Which implementation of the angle feedback closes the loop.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackMode {
    /// sin((θ - θ_r)/2) on the Möbius interval, 4π-periodic.
    Explicit,
    /// ψ-vector implementation; equals u_sw outside `|θ̃| < π`.
    ImplicitUsw,
    /// arctan(θ - θ_r) on the unwrapped real line.
    Atan,
}

/// Control gains and references.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HacParams {
    /// dc-voltage feedback gain [rad/(V·s)], ≥ 0
    pub eta: f64,
    /// angle feedback gain [rad/s], > 0
    pub gamma: f64,
    /// dc current-reference gain [A/V], > 0
    pub kappa: f64,
    /// dc voltage reference [V]
    pub v_dc_r: f64,
    /// open-loop dc current reference [A]
    pub i_r: f64,
    /// reference modulation magnitude, in (0, 1]
    pub mu_r: f64,
    /// relative angle reference [rad] on M
    pub theta_r: f64,
    pub feedback_mode: FeedbackMode,
}

impl HacParams {
    /// Unit vector of the angle reference, `ψ(θ_r)`.
    pub fn psi_theta_r(&self) -> Vec2 {
        psi(self.theta_r)
    }

    pub fn validate(&self) -> Result<(), ControlError> {
        if !(self.eta >= 0.0) {
            return Err(ControlError::BadParameter { name: "eta", value: self.eta });
        }
        if !(self.gamma > 0.0) {
            return Err(ControlError::BadParameter { name: "gamma", value: self.gamma });
        }
        if !(self.kappa > 0.0) {
            return Err(ControlError::BadParameter { name: "kappa", value: self.kappa });
        }
        if !(self.mu_r > 0.0 && self.mu_r <= 1.0) {
            return Err(ControlError::BadParameter { name: "mu_r", value: self.mu_r });
        }
        Ok(())
    }

    /// The modulation bound of the averaged model is μ ∈ [0, 1/2]; values
    /// above it still integrate fine but are physically over-modulated.
    pub fn mu_r_exceeds_modulation_bound(&self) -> bool {
        self.mu_r > 0.5
    }
}

/// Barrier parameters of the current-limiting control.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LimiterParams {
    pub enabled: bool,
    /// barrier steepness [1/A]
    pub beta: f64,
    /// threshold current [A]
    pub i_th: f64,
    /// lower bound substituted for the measured disturbance, in (0, 1)
    pub d_min: f64,
    /// if false, the disturbance-free implementation uses d_min constantly
    pub use_measured_d: bool,
    /// extend the feasible disturbance range to D ∈ (0, 2) via |1 - D|
    pub extended_d_range: bool,
}

impl LimiterParams {
    pub const DISABLED: LimiterParams = LimiterParams {
        enabled: false,
        beta: 1.0,
        i_th: 1.0,
        d_min: 0.01,
        use_measured_d: false,
        extended_d_range: false,
    };

    pub fn validate(&self) -> Result<(), ControlError> {
        if self.enabled {
            if !(self.beta > 0.0) {
                return Err(ControlError::BadParameter { name: "beta", value: self.beta });
            }
            if !(self.i_th > 0.0) {
                return Err(ControlError::BadParameter { name: "i_th", value: self.i_th });
            }
            if !(self.d_min > 0.0 && self.d_min < 1.0) {
                return Err(ControlError::BadParameter { name: "d_min", value: self.d_min });
            }
        }
        Ok(())
    }
}

/// Everything the plant needs from the controller at one state.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlOutputs {
    /// θ̇ = ω_c minus the reference-frame rate (ω_0 against the bus, ω
    /// against the COI grid) [rad/s]
    pub theta_dot: f64,
    /// effective modulation magnitude, (1 - Δμ)·μ_r
    pub mu: f64,
    /// reference dc current [A]
    pub i_dc_ref: f64,
    /// barrier output in [0, 1)
    pub delta_mu: f64,
    /// disturbance value used by the limiter (NaN when undefined)
    pub d_value: f64,
    /// the implicit feedback was evaluated within ε of `|θ̃| = π`
    pub switching_surface: bool,
    /// the measured disturbance was unavailable and d_min was substituted
    pub d_fallback: bool,
}

/// `i_dc,r = i_r - κ(v_dc - v_dc,r)`.
pub fn dc_current_ref(v_dc: f64, hp: &HacParams) -> f64 {
    hp.i_r - hp.kappa * (v_dc - hp.v_dc_r)
}

/// Explicit half-angle feedback `sin((θ - θ_r)/2)`, 4π-periodic in the raw
/// difference.
pub fn angle_feedback_explicit(theta: f64, theta_r: f64) -> f64 {
    (wrap_mobius(theta - theta_r).value() / 2.0).sin()
}

/// Implicit relative-angle measurement: recovers `ψ(θ_c - θ_b)` from the two
/// unit vectors, using the angle-difference identities.
pub fn relative_angle_measurement(
    psi_theta_c: Vec2,
    psi_theta_b: Vec2,
) -> Result<Vec2, ControlError> {
    for v in [psi_theta_c, psi_theta_b] {
        let n = v.norm();
        if (n - 1.0).abs() > 1e-6 {
            return Err(ControlError::NotUnit { norm: n });
        }
    }
    // cos(θ_c-θ_b) = ψ(θ_c)ᵀψ(θ_b); sin(θ_c-θ_b) = ψ(θ_b)ᵀJψ(θ_c)
    Ok(Vec2::new(
        psi_theta_c.dot(psi_theta_b),
        psi_theta_b.dot(psi_theta_c.skew()),
    ))
}

/// Implicit angle feedback
/// `ψ(θ_r)ᵀJψ(θ) / √(2(1 + ψ(θ_r)ᵀψ(θ)))`.
///
/// Equals `sin(θ̃/2)` for `|θ̃| < π` and the switching signal
/// `u_sw = sgn(cos(θ̃/2))·sin(θ̃/2)` elsewhere. The denominator is computed
/// as `‖ψ(θ_r) + ψ(θ)‖`, which is the same quantity without the cancellation
/// that the inner-product form suffers near the switching surface. Within
/// [`SWITCHING_SURFACE_EPS`] of the surface the one-sided limit ±1 is
/// returned and the event is flagged.
pub fn angle_feedback_implicit(
    psi_theta_r: Vec2,
    psi_theta: Vec2,
) -> Result<(f64, bool), ControlError> {
    for v in [psi_theta_r, psi_theta] {
        let n = v.norm();
        if (n - 1.0).abs() > 1e-6 {
            return Err(ControlError::NotUnit { norm: n });
        }
    }
    // ψ(θ_r)ᵀJψ(θ) = sin(θ - θ_r)
    let num = psi_theta_r.dot(psi_theta.skew());
    let den = (psi_theta_r + psi_theta).norm();
    if den < SWITCHING_SURFACE_EPS {
        return Ok((if num >= 0.0 { 1.0 } else { -1.0 }, true));
    }
    Ok(((num / den).clamp(-1.0, 1.0), false))
}

/// `ω_c = ω_0 + η(v_dc - v_dc,r) - γ·angle_fb`.
pub fn hac_rate(v_dc: f64, angle_fb: f64, hp: &HacParams, omega_0: f64) -> f64 {
    omega_0 + hp.eta * (v_dc - hp.v_dc_r) - hp.gamma * angle_fb
}

/// Arctan variant: `ω_c = ω_0 + η(v_dc - v_dc,r) - γ·arctan(θ - θ_r)` with
/// the angle tracked on the real line rather than on M.
pub fn atan_rate(theta_unwrapped: f64, v_dc: f64, hp: &HacParams, omega_0: f64) -> f64 {
    omega_0 + hp.eta * (v_dc - hp.v_dc_r) - hp.gamma * (theta_unwrapped - hp.theta_r).atan()
}

/// Fictitious disturbance of the current-magnitude dynamics,
/// `D = ‖v‖cos(θ_v - θ_i) / (μ_r·v_dc·cos(θ - θ_i))`.
///
/// In normal operation D ∈ (0, 1); for μ = μ_r it equals `p_f/p_s`.
pub fn disturbance_d(x: &StateIb, mu_r: f64) -> Result<f64, ControlError> {
    let (_, theta_i) = to_polar(x.i)
        .map_err(|_| ControlError::DisturbanceUndefined { reason: "zero current" })?;
    let den = mu_r * x.v_dc * (x.theta - theta_i).cos();
    if den.abs() < 1e-12 {
        return Err(ControlError::DisturbanceUndefined { reason: "vanishing denominator" });
    }
    let num = match to_polar(x.v) {
        Ok((v_mag, theta_v)) => v_mag * (theta_v - theta_i).cos(),
        Err(_) => 0.0, // bolted fault, ‖v‖ = 0
    };
    Ok(num / den)
}

/// Barrier function
/// `Δμ = (1-D)·e^{β(‖i‖-i_th)} / (1 + (1-D)(e^{β(‖i‖-i_th)} - 1))`,
/// evaluated in the overflow-free form `C / (C + (1-C)e^{-x})`.
///
/// Strictly increasing in both `‖i‖` and `C = 1-D`; equals `C` at
/// `‖i‖ = i_th`. The caller clamps `D` before use.
pub fn limiter_delta_mu(i_mag: f64, d_value: f64, lp: &LimiterParams) -> f64 {
    let c = if lp.extended_d_range { (1.0 - d_value).abs() } else { 1.0 - d_value };
    let x = lp.beta * (i_mag - lp.i_th);
    let delta = c / (c + (1.0 - c) * (-x).exp());
    // keep strictly below 1 so μ stays positive
    delta.min(0.9999999999999999).max(0.0)
}

/// `μ = (1 - Δμ)·μ_r`.
pub fn effective_mu(mu_r: f64, delta_mu: f64) -> f64 {
    (1.0 - delta_mu) * mu_r
}

/// Clamp range applied to the measured disturbance before the barrier.
fn clamp_d(d: f64, lp: &LimiterParams) -> f64 {
    let hi = if lp.extended_d_range { 2.0 - 1e-9 } else { 1.0 - 1e-9 };
    d.clamp(lp.d_min, hi)
}

fn limiter_outputs(x: &StateIb, hp: &HacParams, lp: &LimiterParams) -> (f64, f64, bool) {
    if !lp.enabled {
        let d = disturbance_d(x, hp.mu_r).unwrap_or(f64::NAN);
        return (0.0, d, false);
    }
    let (d_used, fallback) = if lp.use_measured_d {
        match disturbance_d(x, hp.mu_r) {
            Ok(d) => (clamp_d(d, lp), false),
            Err(_) => (lp.d_min, true),
        }
    } else {
        (lp.d_min, false)
    };
    let delta_mu = limiter_delta_mu(x.i.norm(), d_used, lp);
    (delta_mu, d_used, fallback)
}

fn omega_c(x: &StateIb, pp: &PlantParams, hp: &HacParams, grid_angle_psi: Vec2) -> (f64, bool) {
    match hp.feedback_mode {
        FeedbackMode::Explicit => {
            let fb = angle_feedback_explicit(x.theta, hp.theta_r);
            (hac_rate(x.v_dc, fb, hp, pp.omega_0), false)
        }
        FeedbackMode::ImplicitUsw => {
            // ψ(θ_c) = R(θ)ψ(θ_b) is internally available from the modulation
            // vector; the relative measurement then recovers ψ(θ).
            let psi_c = rotate(x.theta, grid_angle_psi);
            let psi_t = relative_angle_measurement(psi_c, grid_angle_psi)
                .expect("rotation preserves unit norm");
            let (fb, on_surface) = angle_feedback_implicit(hp.psi_theta_r(), psi_t)
                .expect("ψ outputs are unit vectors");
            (hac_rate(x.v_dc, fb, hp, pp.omega_0), on_surface)
        }
        FeedbackMode::Atan => (atan_rate(x.theta, x.v_dc, hp, pp.omega_0), false),
    }
}

/// Full controller evaluation against the infinite bus:
/// `theta_dot = ω_c - ω_0`.
pub fn control_step_ib(
    x: &StateIb,
    pp: &PlantParams,
    hp: &HacParams,
    lp: &LimiterParams,
    grid_angle_psi: Vec2,
) -> ControlOutputs {
    let (w_c, on_surface) = omega_c(x, pp, hp, grid_angle_psi);
    let (delta_mu, d_value, d_fallback) = limiter_outputs(x, hp, lp);
    ControlOutputs {
        theta_dot: w_c - pp.omega_0,
        mu: effective_mu(hp.mu_r, delta_mu),
        i_dc_ref: dc_current_ref(x.v_dc, hp),
        delta_mu,
        d_value,
        switching_surface: on_surface,
        d_fallback,
    }
}

/// Full controller evaluation against the COI grid:
/// `theta_dot = ω_c - ω`.
pub fn control_step_coi(
    x: &StateCoi,
    pp: &PlantParams,
    hp: &HacParams,
    lp: &LimiterParams,
    grid_angle_psi: Vec2,
) -> ControlOutputs {
    let el = x.electrical();
    let mut out = control_step_ib(&el, pp, hp, lp, grid_angle_psi);
    out.theta_dot = out.theta_dot + pp.omega_0 - x.omega;
    out
}

/// Consistent feedforward references recovered from grid power set-points.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct FeedforwardRefs {
    pub psi_theta_r: Vec2,
    /// principal angle of `psi_theta_r` in (-π, π]
    pub theta_r: f64,
    pub mu_r: f64,
    /// filter-node active power implied by the references [W]
    pub p_f: f64,
    /// filter-node reactive power implied by the references [var]
    pub q_f: f64,
    /// combined filter and line impedance angle, atan(ℓ_gω_0/r_g) + atan(ℓω_0/r)
    pub delta: f64,
    /// capacitance-node voltage magnitude implied by the references [V]
    pub v_mag_implied: f64,
}

/// Recovers `ψ(θ_r)` and `μ_r` from equilibrium grid power references.
///
/// The grid current consistent with `(p_g, q_g)` at the bus voltage
/// `v_b = (v_r, 0)` is `i_g = (p_g/v_r, -q_g/v_r)`; walking it back through
/// the line, shunt, and filter (which adds the line loss and the shunt power
/// to the filter-node flows) yields the switching-node voltage
/// `v_s = Z·i + v`, whose direction is `ψ(θ_r)` and whose magnitude fixes
/// `μ_r = ‖v_s‖ / v_dc*`. This inverts the steady-state power flow exactly,
/// so references read from a converged trajectory reproduce the configured
/// `(ψ(θ_r), μ_r)` to machine precision.
pub fn feedforward_refs(
    p_g_r: f64,
    q_g_r: f64,
    v_dc_star: f64,
    v_mag_star: f64,
    pp: &PlantParams,
) -> Result<FeedforwardRefs, ControlError> {
    if p_g_r == 0.0 && q_g_r == 0.0 {
        return Err(ControlError::ZeroPowerReference);
    }
    if !(v_dc_star > 0.0) {
        return Err(ControlError::BadParameter { name: "v_dc_star", value: v_dc_star });
    }
    if !(v_mag_star > 0.0) {
        return Err(ControlError::BadParameter { name: "v_mag_star", value: v_mag_star });
    }
    let w0 = pp.omega_0;
    // i_g from the bus-frame power definitions p_g = i_gᵀv_b, q_g = i_gᵀJv_b
    let i_g = Vec2::new(p_g_r / pp.v_r, -q_g_r / pp.v_r);
    // v = v_b + Z_g i_g
    let v = pp.v_b() + i_g * pp.r_g - i_g.skew() * (pp.ell_g * w0);
    // i = Y v + i_g
    let i = v * pp.g - v.skew() * (pp.c * w0) + i_g;
    // v_s = Z i + v
    let v_s = i * pp.r - i.skew() * (pp.ell * w0) + v;
    let v_s_mag = v_s.norm();
    if !(v_s_mag > 0.0) || !v_s.is_finite() {
        return Err(ControlError::Inconsistent { reason: "degenerate switching-node voltage" });
    }
    let psi_theta_r = v_s * (1.0 / v_s_mag);
    let unit_err = (psi_theta_r.norm() - 1.0).abs();
    if unit_err > 1e-9 {
        return Err(ControlError::Inconsistent { reason: "non-unit angle reference" });
    }
    Ok(FeedforwardRefs {
        psi_theta_r,
        theta_r: psi_theta_r.b.atan2(psi_theta_r.a),
        mu_r: v_s_mag / v_dc_star,
        p_f: i.dot(v),
        q_f: i.dot(v.skew()),
        delta: (pp.ell_g * w0 / pp.r_g).atan() + (pp.ell * w0 / pp.r).atan(),
        v_mag_implied: v.norm(),
    })
}
