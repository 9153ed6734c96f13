//! Equilibrium solving, stability-certificate evaluation, Lyapunov value and
//! trajectory audit, the instability determinant test, droop slope, and the
//! RoCoF metric.
//!
//! Equilibria: with the dc voltage pinned at its reference and the angle at
//! θ_r, the Euclidean ac states solve the linear system
//! `A·(i*, v*, i_g*) = b` whose symmetric part is negative definite for any
//! positive parameter set, so the solution is unique. Two equilibria share
//! these Euclidean components and differ only in the angle, θ_r versus
//! θ_r + 2π; the first is almost globally stable under the gain condition
//! evaluated here, the second is unstable with a positive Jacobian
//! determinant.

use crate::controller::{control_step_coi, control_step_ib, FeedbackMode, HacParams, LimiterParams};
use crate::mathkit::{mobius_distance, psi, wrap_mobius, Vec2, TWO_PI};
use crate::plant::{rhs_coi, rhs_ib, CoiParams, GridModel, PlantParams, ShuntPerturbation, State, StateCoi, StateIb};
use nalgebra::{DMatrix, SMatrix, SVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AnalysisError {
    #[error("equilibrium system is singular (should not happen for positive parameters)")]
    SingularSystem,
    #[error("Lyapunov scaling λ is undefined: requires η > 0 or γ > 0")]
    LambdaUndefined,
    #[error("droop slope requires η > 0")]
    EtaZero,
    #[error("time {t} is outside the trajectory span [{start}, {end}]")]
    OutOfSpan { t: f64, start: f64, end: f64 },
    #[error("trajectory lacks a frequency state (infinite-bus model)")]
    NoFrequencyState,
    #[error("trajectory is empty or mismatched")]
    BadTrajectory,
}

/// The two closed-loop equilibria: identical Euclidean components, angles
/// θ_r (stable) and θ_r + 2π (unstable saddle of the Lyapunov function).
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EquilibriumPair {
    pub theta_stable: f64,
    pub theta_unstable: f64,
    pub i_dc: f64,
    pub v_dc: f64,
    /// equilibrium frequency (COI only)
    pub omega: Option<f64>,
    pub i: Vec2,
    pub v: Vec2,
    pub i_g: Vec2,
    /// open-loop dc current reference required for v_dc* = v_dc,r
    pub i_r_consistent: f64,
    /// mechanical torque required for ω* = ω_0 (COI only)
    pub t_m_consistent: Option<f64>,
    /// Euclidean norm of the closed-loop equation residuals at both points
    pub residual_norm: f64,
    /// Euclidean norm of the state-derivative residual at the stable point
    /// (the equation residuals with the inductance/capacitance divisions
    /// applied; at the 2π-shifted point this form is dominated by the f64
    /// representation of the angle through ψ, so it is reported for x_s*)
    pub derivative_residual_norm: f64,
}

impl EquilibriumPair {
    pub fn is_coi(&self) -> bool {
        self.omega.is_some()
    }

    fn ib_state(&self, theta: f64) -> StateIb {
        StateIb {
            theta,
            i_dc: self.i_dc,
            v_dc: self.v_dc,
            i: self.i,
            v: self.v,
            i_g: self.i_g,
        }
    }

    fn coi_state(&self, theta: f64) -> StateCoi {
        StateCoi {
            theta,
            i_dc: self.i_dc,
            v_dc: self.v_dc,
            omega: self.omega.unwrap_or(0.0),
            i: self.i,
            v: self.v,
            i_g: self.i_g,
        }
    }

    pub fn state_stable(&self) -> State {
        match self.omega {
            None => State::Ib(self.ib_state(self.theta_stable)),
            Some(_) => State::Coi(self.coi_state(self.theta_stable)),
        }
    }

    pub fn state_unstable(&self) -> State {
        match self.omega {
            None => State::Ib(self.ib_state(self.theta_unstable)),
            Some(_) => State::Coi(self.coi_state(self.theta_unstable)),
        }
    }

    /// Norm of the Euclidean equilibrium components y*.
    pub fn y_norm(&self) -> f64 {
        let mut s = self.i_dc * self.i_dc
            + self.v_dc * self.v_dc
            + self.i.norm_sq()
            + self.v.norm_sq()
            + self.i_g.norm_sq();
        if let Some(w) = self.omega {
            s += w * w;
        }
        s.sqrt()
    }

    /// Relative Euclidean error `‖y - y*‖ / ‖y*‖` of a state.
    pub fn rel_y_error(&self, x: &State) -> f64 {
        let el = x.electrical();
        let mut s = (el.i_dc - self.i_dc).powi(2)
            + (el.v_dc - self.v_dc).powi(2)
            + (el.i - self.i).norm_sq()
            + (el.v - self.v).norm_sq()
            + (el.i_g - self.i_g).norm_sq();
        if let (Some(w_star), Some(w)) = (self.omega, x.omega()) {
            s += (w - w_star).powi(2);
        }
        s.sqrt() / self.y_norm()
    }

    /// Möbius distances of an angle to the stable and unstable representatives.
    pub fn theta_distances(&self, theta: f64) -> (f64, f64) {
        (
            mobius_distance(theta, self.theta_stable),
            mobius_distance(theta, self.theta_unstable),
        )
    }

    /// Per-component scale vector (block norms, floor 1) used for
    /// perturbation windows and divergence guards. Order matches the
    /// Euclidean state layout.
    pub fn component_scales(&self) -> Vec<f64> {
        let in_ = self.i.norm().max(1.0);
        let vn = self.v.norm().max(1.0);
        let ign = self.i_g.norm().max(1.0);
        let mut s = vec![self.i_dc.abs().max(1.0), self.v_dc.abs().max(1.0)];
        if let Some(w) = self.omega {
            s.push(w.abs().max(1.0));
        }
        s.extend_from_slice(&[in_, in_, vn, vn, ign, ign]);
        s
    }
}

/// Assembles and solves `A (i, v, i_g) = b` for the Euclidean equilibrium.
///
/// `v_b` is the grid-node voltage at equilibrium: `(v_r, 0)` against the bus,
/// `(b·ω_0, 0)` against the COI model.
fn solve_network(
    pp: &PlantParams,
    m: Vec2,
    v_dc: f64,
    v_b: Vec2,
) -> Result<(Vec2, Vec2, Vec2), AnalysisError> {
    let w0 = pp.omega_0;
    let lw = pp.ell * w0;
    let lgw = pp.ell_g * w0;
    let cw = pp.c * w0;
    // Z = rI - ℓωJ acts as [[r, -ℓω], [ℓω, r]]; same pattern for Y and Z_g.
    #[rustfmt::skip]
    let a = SMatrix::<f64, 6, 6>::from_row_slice(&[
        -pp.r,   lw,    -1.0,  0.0,   0.0,    0.0,
        -lw,    -pp.r,   0.0, -1.0,   0.0,    0.0,
         1.0,    0.0,   -pp.g, cw,   -1.0,    0.0,
         0.0,    1.0,   -cw,  -pp.g,  0.0,   -1.0,
         0.0,    0.0,    1.0,  0.0,  -pp.r_g, lgw,
         0.0,    0.0,    0.0,  1.0,  -lgw,   -pp.r_g,
    ]);
    let b = SVector::<f64, 6>::from_column_slice(&[
        -v_dc * m.a,
        -v_dc * m.b,
        0.0,
        0.0,
        v_b.a,
        v_b.b,
    ]);
    let lu = a.lu();
    let mut x = lu.solve(&b).ok_or(AnalysisError::SingularSystem)?;
    // Refinement passes push the solve to the last ulp; among the iterates,
    // keep the one with the smallest true residual (the iteration dithers
    // within an ulp once converged).
    let mut best = x;
    let mut best_res = (b - a * x).norm();
    for _ in 0..4 {
        let r = b - a * x;
        match lu.solve(&r) {
            Some(dx) => x += dx,
            None => break,
        }
        let res = (b - a * x).norm();
        if res < best_res {
            best_res = res;
            best = x;
        }
    }
    let x = best;
    Ok((
        Vec2::new(x[0], x[1]),
        Vec2::new(x[2], x[3]),
        Vec2::new(x[4], x[5]),
    ))
}

fn residual_norms(
    pp: &PlantParams,
    hp: &HacParams,
    grid: &GridModel,
    eq: &EquilibriumPair,
) -> (f64, f64) {
    // Residuals with the consistent references substituted; the limiter is
    // the nominal system's, i.e. disabled.
    let hp_c = HacParams { i_r: eq.i_r_consistent, feedback_mode: FeedbackMode::Explicit, ..*hp };
    let mut eq_sq = 0.0_f64;
    let mut der_sq = 0.0_f64;
    for (stable, state) in [(true, eq.state_stable()), (false, eq.state_unstable())] {
        match (state, grid) {
            (State::Ib(x), GridModel::InfiniteBus) => {
                let ctrl = control_step_ib(&x, pp, &hp_c, &LimiterParams::DISABLED, psi(0.0));
                let d = rhs_ib(&x, pp, &ctrl, &ShuntPerturbation::NONE);
                let w = [1.0, pp.tau_dc, pp.c_dc, pp.ell, pp.ell, pp.c, pp.c, pp.ell_g, pp.ell_g];
                for (k, dv) in d.to_array().iter().enumerate() {
                    eq_sq += (dv * w[k]).powi(2);
                    if stable {
                        der_sq += dv * dv;
                    }
                }
            }
            (State::Coi(x), GridModel::Coi(cp)) => {
                let mut cpc = *cp;
                cpc.t_m = eq.t_m_consistent.unwrap_or(cp.t_m);
                let ctrl = control_step_coi(&x, pp, &hp_c, &LimiterParams::DISABLED, psi(0.0));
                let d = rhs_coi(&x, pp, &cpc, &ctrl, &ShuntPerturbation::NONE);
                let j = cpc.inertia(pp.omega_0);
                let w =
                    [1.0, pp.tau_dc, pp.c_dc, j, pp.ell, pp.ell, pp.c, pp.c, pp.ell_g, pp.ell_g];
                for (k, dv) in d.to_array().iter().enumerate() {
                    eq_sq += (dv * w[k]).powi(2);
                    if stable {
                        der_sq += dv * dv;
                    }
                }
            }
            _ => unreachable!("state kind always matches grid kind"),
        }
    }
    (eq_sq.sqrt(), der_sq.sqrt())
}

/// Solves for the equilibrium pair.
///
/// The dc voltage is pinned at `v_dc,r` and the angle at `θ_r`; the solver
/// reports the open-loop current reference `i_r` (and mechanical torque for
/// the COI model) required to make these self-consistent. The residual is
/// evaluated with those consistent references substituted.
pub fn solve_equilibrium(
    pp: &PlantParams,
    hp: &HacParams,
    grid: &GridModel,
) -> Result<EquilibriumPair, AnalysisError> {
    let v_dc = hp.v_dc_r;
    let m = psi(hp.theta_r) * hp.mu_r;
    let (v_b, omega, coi) = match grid {
        GridModel::InfiniteBus => (pp.v_b(), None, None),
        GridModel::Coi(cp) => (Vec2::new(cp.b * pp.omega_0, 0.0), Some(pp.omega_0), Some(*cp)),
    };
    let (i, v, i_g) = solve_network(pp, m, v_dc, v_b)?;
    let i_r_consistent = pp.g_dc * v_dc + m.dot(i);
    let t_m_consistent = coi.map(|cp| cp.d * pp.omega_0 - cp.b * i_g.a);
    let theta_stable = hp.theta_r;
    let theta_unstable = wrap_mobius(hp.theta_r + TWO_PI).value();
    let mut eq = EquilibriumPair {
        theta_stable,
        theta_unstable,
        i_dc: i_r_consistent,
        v_dc,
        omega,
        i,
        v,
        i_g,
        i_r_consistent,
        t_m_consistent,
        residual_norm: f64::NAN,
        derivative_residual_norm: f64::NAN,
    };
    let (rn, dn) = residual_norms(pp, hp, grid, &eq);
    eq.residual_norm = rn;
    eq.derivative_residual_norm = dn;
    Ok(eq)
}

/// JSON-safe (de)serialization of possibly non-finite floats: infinities and
/// NaN are written as strings, which plain JSON cannot carry as numbers.
mod f64_any {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_str(&format!("{v}"))
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(v),
            Raw::Str(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// Same as [`f64_any`] for optional values.
mod opt_f64_any {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            None => s.serialize_none(),
            Some(x) if x.is_finite() => s.serialize_some(x),
            Some(x) => s.serialize_some(&format!("{x}")),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Option::<Raw>::deserialize(d)? {
            None => Ok(None),
            Some(Raw::Num(v)) => Ok(Some(v)),
            Some(Raw::Str(t)) => t.parse().map(Some).map_err(serde::de::Error::custom),
        }
    }
}

/// Outcome of a parametric stability-condition evaluation.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct StabilityCert {
    /// left-hand side of the gain condition [rad/s]
    #[serde(with = "f64_any")]
    pub lhs: f64,
    pub gamma: f64,
    pub satisfied: bool,
    /// γ - lhs [rad/s]
    #[serde(with = "f64_any")]
    pub margin: f64,
    /// minimum grid damping required (COI only)
    pub d_min_required: Option<f64>,
    /// the additional 1/(2(D - D_min)) term (COI only; infinite if D ≤ D_min)
    #[serde(with = "opt_f64_any", default)]
    pub extra_term: Option<f64>,
}

fn ib_lhs(pp: &PlantParams, hp: &HacParams, eq: &EquilibriumPair) -> f64 {
    hp.eta / pp.g_dc
        + hp.eta * (hp.mu_r * eq.i.norm()).powi(2) / pp.g_dc
        + hp.eta * (hp.mu_r * eq.v_dc).powi(2) / pp.r
}

/// Global-attractivity gain condition against the infinite bus:
/// `η/g_dc + η(μ_r‖i*‖)²/g_dc + η(μ_r·v_dc*)²/r < γ`.
///
/// Sufficient, not necessary; with η = 0 it holds for any γ > 0 regardless
/// of the equilibrium. Independent of τ_dc and κ.
pub fn stability_condition_ib(
    pp: &PlantParams,
    hp: &HacParams,
    eq: &EquilibriumPair,
) -> StabilityCert {
    let lhs = ib_lhs(pp, hp, eq);
    StabilityCert {
        lhs,
        gamma: hp.gamma,
        satisfied: lhs < hp.gamma,
        margin: hp.gamma - lhs,
        d_min_required: None,
        extra_term: None,
    }
}

/// COI variant: additionally requires `D > D_min` with
/// `D_min = (ℓ‖i*‖)²/r + (c‖v*‖)²/g + (ℓ_g‖i_g*‖)²/r_g`, and the gain
/// condition picks up the term `1/(2(D - D_min))`. For `D ≫ D_min` it
/// reduces to the infinite-bus condition.
pub fn stability_condition_coi(
    pp: &PlantParams,
    cp: &CoiParams,
    hp: &HacParams,
    eq: &EquilibriumPair,
) -> StabilityCert {
    let d_min = (pp.ell * eq.i.norm()).powi(2) / pp.r
        + (pp.c * eq.v.norm()).powi(2) / pp.g
        + (pp.ell_g * eq.i_g.norm()).powi(2) / pp.r_g;
    let extra = if cp.d > d_min { 0.5 / (cp.d - d_min) } else { f64::INFINITY };
    let lhs = ib_lhs(pp, hp, eq) + extra;
    StabilityCert {
        lhs,
        gamma: hp.gamma,
        satisfied: cp.d > d_min && lhs < hp.gamma,
        margin: hp.gamma - lhs,
        d_min_required: Some(d_min),
        extra_term: Some(extra),
    }
}

/// Weights of the composite LaSalle/Lyapunov function
/// `V(x̃) = ½ ỹᵀPỹ + 2λ(1 - cos(θ̃/2))`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LyapunovConfig {
    pub lambda: f64,
    w_i_dc: f64,
    w_v_dc: f64,
    w_omega: f64,
    w_i: f64,
    w_v: f64,
    w_i_g: f64,
}

impl LyapunovConfig {
    /// Default λ: `2/η` for η > 0, otherwise twice the smallest λ that
    /// satisfies the η = 0 gain condition.
    pub fn new(
        pp: &PlantParams,
        hp: &HacParams,
        grid: &GridModel,
        eq: &EquilibriumPair,
    ) -> Result<Self, AnalysisError> {
        let lambda = if hp.eta > 0.0 {
            2.0 / hp.eta
        } else if hp.gamma > 0.0 {
            let lambda_min = (2.0 * (hp.mu_r * eq.i.norm()).powi(2) / pp.g_dc
                + 2.0 * (hp.mu_r * eq.v_dc).powi(2) / pp.r)
                / hp.gamma;
            2.0 * lambda_min
        } else {
            return Err(AnalysisError::LambdaUndefined);
        };
        Ok(Self::with_lambda(pp, hp, grid, lambda))
    }

    pub fn with_lambda(pp: &PlantParams, hp: &HacParams, grid: &GridModel, lambda: f64) -> Self {
        LyapunovConfig {
            lambda,
            w_i_dc: pp.tau_dc / hp.kappa,
            w_v_dc: pp.c_dc,
            w_omega: grid.coi().map(|cp| cp.inertia(pp.omega_0)).unwrap_or(0.0),
            w_i: pp.ell,
            w_v: pp.c,
            w_i_g: pp.ell_g,
        }
    }
}

/// Which angle representative the error coordinates are taken against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AngleRepresentative {
    Stable,
    Unstable,
}

/// Lyapunov value centered at the chosen angle representative (the Euclidean
/// center y* is shared by both equilibria).
pub fn lyapunov_value_centered(
    x: &State,
    eq: &EquilibriumPair,
    cfg: &LyapunovConfig,
    rep: AngleRepresentative,
) -> f64 {
    let theta_c = match rep {
        AngleRepresentative::Stable => eq.theta_stable,
        AngleRepresentative::Unstable => eq.theta_unstable,
    };
    let el = x.electrical();
    let theta_err = wrap_mobius(el.theta - theta_c).value();
    let mut quad = cfg.w_i_dc * (el.i_dc - eq.i_dc).powi(2)
        + cfg.w_v_dc * (el.v_dc - eq.v_dc).powi(2)
        + cfg.w_i * (el.i - eq.i).norm_sq()
        + cfg.w_v * (el.v - eq.v).norm_sq()
        + cfg.w_i_g * (el.i_g - eq.i_g).norm_sq();
    if let (Some(w), Some(w_star)) = (x.omega(), eq.omega) {
        quad += cfg.w_omega * (w - w_star).powi(2);
    }
    0.5 * quad + 2.0 * cfg.lambda * (1.0 - (theta_err / 2.0).cos())
}

/// `V(x̃)` with errors taken against the stable equilibrium.
pub fn lyapunov_value(x: &State, eq: &EquilibriumPair, cfg: &LyapunovConfig) -> f64 {
    lyapunov_value_centered(x, eq, cfg, AngleRepresentative::Stable)
}

/// Result of a finite-difference monotonicity audit of V along a trajectory.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LyapunovAudit {
    /// representative the audit centered on (decided by the final angle)
    pub center: AngleRepresentative,
    pub max_v: f64,
    /// largest positive per-sample increment observed
    pub max_positive_increment: f64,
    /// per-step tolerance actually applied, `1e-6·max(V)`
    pub tolerance: f64,
    /// sample times where the increment exceeded the tolerance
    pub violation_times: Vec<f64>,
    pub samples: usize,
}

impl LyapunovAudit {
    pub fn clean(&self) -> bool {
        self.violation_times.is_empty()
    }
}

/// Audits `V` along recorded samples for monotone decrease within the
/// discretization tolerance `1e-6·max(V)` per step.
///
/// Under the switching implementation the region `|θ̃| > π` flows to the
/// 2π-shifted representative, along which the same function centered there
/// decreases; the audit therefore centers on the representative nearest the
/// trajectory's final angle and reports which one it used.
pub fn lyapunov_audit(
    times: &[f64],
    states: &[State],
    eq: &EquilibriumPair,
    cfg: &LyapunovConfig,
) -> Result<LyapunovAudit, AnalysisError> {
    if times.is_empty() || times.len() != states.len() {
        return Err(AnalysisError::BadTrajectory);
    }
    let (ds, du) = eq.theta_distances(states[states.len() - 1].theta());
    let center = if ds <= du { AngleRepresentative::Stable } else { AngleRepresentative::Unstable };
    let values: Vec<f64> =
        states.iter().map(|x| lyapunov_value_centered(x, eq, cfg, center)).collect();
    let max_v = values.iter().cloned().fold(0.0_f64, f64::max);
    let tolerance = 1e-6 * max_v;
    let mut max_inc = 0.0_f64;
    let mut violation_times = Vec::new();
    for k in 1..values.len() {
        let inc = values[k] - values[k - 1];
        if inc > max_inc {
            max_inc = inc;
        }
        if inc > tolerance {
            violation_times.push(times[k]);
        }
    }
    Ok(LyapunovAudit {
        center,
        max_v,
        max_positive_increment: max_inc,
        tolerance,
        violation_times,
        samples: values.len(),
    })
}

/// Numerical Jacobian determinant signs at the two equilibria.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct JacobianSignReport {
    pub det_at_stable: f64,
    pub det_at_unstable: f64,
    /// det > 0 at the unstable point and det < 0 at the stable one (the
    /// stable 9-state Jacobian is Hurwitz, so its determinant has sign (-1)⁹)
    pub consistent: bool,
    /// false when either determinant is too small relative to its row scales
    pub conclusive: bool,
}

fn numerical_jacobian_ib(pp: &PlantParams, hp: &HacParams, x0: &StateIb) -> DMatrix<f64> {
    let f = |arr: &[f64; 9]| -> [f64; 9] {
        let x = StateIb::from_array(arr);
        let ctrl = control_step_ib(&x, pp, hp, &LimiterParams::DISABLED, psi(0.0));
        rhs_ib(&x, pp, &ctrl, &ShuntPerturbation::NONE).to_array()
    };
    let base = x0.to_array();
    let mut jac = DMatrix::zeros(9, 9);
    for j in 0..9 {
        let scale = base[j].abs().max(1.0);
        let h = 1e-6 * scale;
        let mut xp = base;
        let mut xm = base;
        xp[j] += h;
        xm[j] -= h;
        let fp = f(&xp);
        let fm = f(&xm);
        for i in 0..9 {
            jac[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    jac
}

/// Central-difference Jacobian determinant test at both equilibria of the
/// infinite-bus closed loop (explicit feedback, limiter off).
pub fn jacobian_sign_test(
    pp: &PlantParams,
    hp: &HacParams,
    eq: &EquilibriumPair,
) -> JacobianSignReport {
    let hp_c = HacParams { i_r: eq.i_r_consistent, feedback_mode: FeedbackMode::Explicit, ..*hp };
    let xs = StateIb {
        theta: eq.theta_stable,
        i_dc: eq.i_dc,
        v_dc: eq.v_dc,
        i: eq.i,
        v: eq.v,
        i_g: eq.i_g,
    };
    let xu = StateIb { theta: eq.theta_unstable, ..xs };
    let mut dets = [0.0_f64; 2];
    let mut conclusive = true;
    for (k, x) in [xs, xu].iter().enumerate() {
        let jac = numerical_jacobian_ib(pp, &hp_c, x);
        // Hadamard bound as the determinant's natural scale
        let mut scale = 1.0_f64;
        for i in 0..9 {
            scale *= jac.row(i).norm();
        }
        let det = jac.lu().determinant();
        if !(det.abs() > 1e-30 * scale) {
            conclusive = false;
        }
        dets[k] = det;
    }
    JacobianSignReport {
        det_at_stable: dets[0],
        det_at_unstable: dets[1],
        consistent: dets[1] > 0.0 && dets[0] < 0.0,
        conclusive,
    }
}

/// Steady-state net dc power as a function of the equilibrium frequency,
/// `p_net,x(ω_x) = i_0(ω_x - β_θ)/η - (κ + g_dc)(ω_x - β_θ)²/η²`.
pub fn p_net_at_frequency(
    pp: &PlantParams,
    hp: &HacParams,
    omega_x: f64,
    theta_x: f64,
) -> Result<f64, AnalysisError> {
    if hp.eta <= 0.0 {
        return Err(AnalysisError::EtaZero);
    }
    let g_dc_tot = hp.kappa + pp.g_dc;
    let i_0 = hp.i_r + hp.kappa * hp.v_dc_r;
    let beta = beta_theta(pp, hp, theta_x);
    let dw = omega_x - beta;
    Ok(i_0 * dw / hp.eta - g_dc_tot * dw * dw / (hp.eta * hp.eta))
}

fn beta_theta(pp: &PlantParams, hp: &HacParams, theta_x: f64) -> f64 {
    pp.omega_0
        - hp.eta * hp.v_dc_r
        - hp.gamma * (wrap_mobius(theta_x - hp.theta_r).value() / 2.0).sin()
}

/// Analytic power–frequency droop slope at an off-nominal equilibrium:
/// `d_{p-ω} = -(2G_dc/η²)·ω_x + (η·i_0 + 2G_dc·β_θ)/η²` with
/// `G_dc = κ + g_dc`, `i_0 = i_r + κ·v_dc,r`,
/// `β_θ = ω_0 - η·v_dc,r - γ·sin((θ_x - θ_r)/2)`.
pub fn droop_slope(
    pp: &PlantParams,
    hp: &HacParams,
    omega_x: f64,
    theta_x: f64,
) -> Result<f64, AnalysisError> {
    if hp.eta <= 0.0 {
        return Err(AnalysisError::EtaZero);
    }
    let g_dc_tot = hp.kappa + pp.g_dc;
    let i_0 = hp.i_r + hp.kappa * hp.v_dc_r;
    let beta = beta_theta(pp, hp, theta_x);
    Ok(-(2.0 * g_dc_tot / (hp.eta * hp.eta)) * omega_x
        + (hp.eta * i_0 + 2.0 * g_dc_tot * beta) / (hp.eta * hp.eta))
}

/// Central-difference slope of [`p_net_at_frequency`]; exact for the
/// quadratic power curve up to rounding.
pub fn droop_slope_fd(
    pp: &PlantParams,
    hp: &HacParams,
    omega_x: f64,
    theta_x: f64,
    h: f64,
) -> Result<f64, AnalysisError> {
    let plus = p_net_at_frequency(pp, hp, omega_x + h, theta_x)?;
    let minus = p_net_at_frequency(pp, hp, omega_x - h, theta_x)?;
    Ok((plus - minus) / (2.0 * h))
}

/// Matching-control approximation of the slope, valid when β_θ vanishes:
/// `-(2G_dc/η²)·ω_x + i_0/η`.
pub fn droop_slope_matching_approx(
    pp: &PlantParams,
    hp: &HacParams,
    omega_x: f64,
) -> Result<f64, AnalysisError> {
    if hp.eta <= 0.0 {
        return Err(AnalysisError::EtaZero);
    }
    let g_dc_tot = hp.kappa + pp.g_dc;
    let i_0 = hp.i_r + hp.kappa * hp.v_dc_r;
    Ok(-(2.0 * g_dc_tot / (hp.eta * hp.eta)) * omega_x + i_0 / hp.eta)
}

/// RoCoF metric `|ω(t_0 + T) - ω(t_0)| / T` from sampled frequency data,
/// linearly interpolated between samples.
pub fn rocof(times: &[f64], omega: &[f64], t0: f64, horizon: f64) -> Result<f64, AnalysisError> {
    if times.is_empty() || times.len() != omega.len() {
        return Err(AnalysisError::BadTrajectory);
    }
    let sample = |t: f64| -> Result<f64, AnalysisError> {
        let (start, end) = (times[0], times[times.len() - 1]);
        if t < start || t > end {
            return Err(AnalysisError::OutOfSpan { t, start, end });
        }
        let k = times.partition_point(|&tk| tk <= t);
        if k == 0 {
            return Ok(omega[0]);
        }
        if k >= times.len() {
            return Ok(omega[omega.len() - 1]);
        }
        let (t0k, t1k) = (times[k - 1], times[k]);
        let frac = if t1k > t0k { (t - t0k) / (t1k - t0k) } else { 0.0 };
        Ok(omega[k - 1] + frac * (omega[k] - omega[k - 1]))
    };
    Ok((sample(t0 + horizon)? - sample(t0)?).abs() / horizon)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::controller::FeedbackMode;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    pub(crate) fn table1() -> (PlantParams, HacParams, CoiParams) {
        let pp = crate::plant::tests::table1_plant();
        let hp = HacParams {
            eta: 0.01,
            gamma: 1e4,
            kappa: 2.0,
            v_dc_r: 3.0 * pp.v_r,
            i_r: 0.0,
            mu_r: 2.0 * pp.v_r / (3.0 * pp.v_r),
            theta_r: 0.0,
            feedback_mode: FeedbackMode::Explicit,
        };
        let cp = CoiParams {
            s_r_g: 5e6,
            h: 5.0,
            d: 100.0,
            t_m: 100.0 * pp.omega_0,
            b: pp.v_r / pp.omega_0,
        };
        (pp, hp, cp)
    }

    #[test]
    fn homogeneous_system_has_zero_equilibrium() {
        let (pp, hp, _) = table1();
        let mut pp0 = pp;
        pp0.v_r = 1e-300;
        let hp0 = HacParams { mu_r: 1e-300, v_dc_r: 1e-300, ..hp };
        let eq = solve_equilibrium(&pp0, &hp0, &GridModel::InfiniteBus).unwrap();
        assert!(eq.i.norm() < 1e-280);
        assert!(eq.v.norm() < 1e-280);
        assert!(eq.i_g.norm() < 1e-280);
    }

    #[test]
    fn table1_equilibrium_residual() {
        let (pp, hp, cp) = table1();
        let eq = solve_equilibrium(&pp, &hp, &GridModel::InfiniteBus).unwrap();
        assert!(eq.residual_norm < 1e-9, "residual = {:.3e}", eq.residual_norm);
        // per-component derivative residual at x_s* with the consistent i_r
        assert!(eq.derivative_residual_norm < 1e-9, "{:.3e}", eq.derivative_residual_norm);
        let eqc = solve_equilibrium(&pp, &hp, &GridModel::Coi(cp)).unwrap();
        assert!(eqc.residual_norm < 1e-9, "residual = {:.3e}", eqc.residual_norm);
        assert!(eqc.derivative_residual_norm < 1e-9, "{:.3e}", eqc.derivative_residual_norm);
        // with b = v_r/ω_0 the COI equilibrium coincides with the IB one
        assert!((eqc.i - eq.i).norm() < 1e-9 * eq.i.norm());
        assert!((eqc.v - eq.v).norm() < 1e-9 * eq.v.norm());
        assert_eq!(eqc.omega, Some(pp.omega_0));
        // Theorem-level sanity: the two points differ only in angle
        assert_eq!(eq.theta_unstable, TWO_PI);
    }

    #[test]
    fn certificate_eta_zero_always_satisfied() {
        let (pp, hp, _) = table1();
        let mut r = ChaCha12Rng::seed_from_u64(1);
        for _ in 0..50 {
            let hp0 = HacParams {
                eta: 0.0,
                gamma: r.gen_range(1e-3..1e6),
                mu_r: r.gen_range(0.05..1.0),
                ..hp
            };
            let eq = solve_equilibrium(&pp, &hp0, &GridModel::InfiniteBus).unwrap();
            let cert = stability_condition_ib(&pp, &hp0, &eq);
            assert!(cert.satisfied);
            assert_eq!(cert.lhs, 0.0);
        }
    }

    #[test]
    fn certificate_table1_si_reported() {
        // Sufficient condition only: report, do not assume the outcome.
        let (pp, hp, _) = table1();
        let eq = solve_equilibrium(&pp, &hp, &GridModel::InfiniteBus).unwrap();
        let cert = stability_condition_ib(&pp, &hp, &eq);
        assert!(cert.lhs > 0.0 && cert.lhs.is_finite());
        assert_eq!(cert.satisfied, cert.lhs < hp.gamma);
        assert_eq!(cert.margin, hp.gamma - cert.lhs);
        // doubling γ never flips satisfied from true to false
        let hp2 = HacParams { gamma: 2.0 * hp.gamma, ..hp };
        let cert2 = stability_condition_ib(&pp, &hp2, &eq);
        assert_eq!(cert2.lhs, cert.lhs);
        assert!(cert2.margin > cert.margin);
    }

    #[test]
    fn certificate_coi_damping_limit() {
        let (pp, hp, cp) = table1();
        let eq = solve_equilibrium(&pp, &hp, &GridModel::Coi(cp)).unwrap();
        let cert = stability_condition_coi(&pp, &cp, &hp, &eq);
        let d_min = cert.d_min_required.unwrap();
        assert!(d_min > 0.0);
        // zero equilibrium flows give D_min = 0
        let eq0 = EquilibriumPair { i: Vec2::ZERO, v: Vec2::ZERO, i_g: Vec2::ZERO, ..eq };
        let cert0 = stability_condition_coi(&pp, &cp, &hp, &eq0);
        assert_eq!(cert0.d_min_required, Some(0.0));
        // for D ≫ D_min the condition reduces to the infinite-bus one
        let big = CoiParams { d: 1e6 * d_min, ..cp };
        let cert_big = stability_condition_coi(&pp, &big, &hp, &eq);
        let cert_ib = stability_condition_ib(&pp, &hp, &eq);
        assert!((cert_big.margin - cert_ib.margin).abs() < 1e-9);
        // D below D_min is rejected with an infinite extra term
        let small = CoiParams { d: 0.5 * d_min, ..cp };
        let cert_small = stability_condition_coi(&pp, &small, &hp, &eq);
        assert!(!cert_small.satisfied);
        assert_eq!(cert_small.extra_term, Some(f64::INFINITY));
    }

    #[test]
    fn lyapunov_values_at_equilibria() {
        let (pp, hp, _) = table1();
        let grid = GridModel::InfiniteBus;
        let eq = solve_equilibrium(&pp, &hp, &grid).unwrap();
        let cfg = LyapunovConfig::new(&pp, &hp, &grid, &eq).unwrap();
        assert!((cfg.lambda - 2.0 / hp.eta).abs() < 1e-12);
        assert_eq!(lyapunov_value(&eq.state_stable(), &eq, &cfg), 0.0);
        // saddle value: pure angle term 2λ(1 - cos π) = 4λ
        let vu = lyapunov_value(&eq.state_unstable(), &eq, &cfg);
        assert!((vu - 4.0 * cfg.lambda).abs() <= 1e-12 * cfg.lambda);
    }

    #[test]
    fn lyapunov_positive_away_from_center() {
        let (pp, hp, _) = table1();
        let grid = GridModel::InfiniteBus;
        let eq = solve_equilibrium(&pp, &hp, &grid).unwrap();
        let cfg = LyapunovConfig::new(&pp, &hp, &grid, &eq).unwrap();
        let mut r = ChaCha12Rng::seed_from_u64(2);
        for _ in 0..1000 {
            let x = State::Ib(StateIb {
                theta: r.gen_range(-6.28..6.28),
                i_dc: eq.i_dc + r.gen_range(-10.0..10.0),
                v_dc: eq.v_dc + r.gen_range(-100.0..100.0),
                i: eq.i + Vec2::new(r.gen_range(-50.0..50.0), r.gen_range(-50.0..50.0)),
                v: eq.v + Vec2::new(r.gen_range(-50.0..50.0), r.gen_range(-50.0..50.0)),
                i_g: eq.i_g + Vec2::new(r.gen_range(-50.0..50.0), r.gen_range(-50.0..50.0)),
            });
            let v = lyapunov_value(&x, &eq, &cfg);
            let same = eq.rel_y_error(&x) < 1e-15
                && mobius_distance(x.theta(), eq.theta_stable) < 1e-12;
            if !same {
                assert!(v > 0.0);
            }
        }
    }

    #[test]
    fn lyapunov_saddle_structure() {
        // V(θ, y*) ≤ V(θ₂*, y*) ≤ V(θ₂*, y) near the unstable point
        let (pp, hp, _) = table1();
        let grid = GridModel::InfiniteBus;
        let eq = solve_equilibrium(&pp, &hp, &grid).unwrap();
        let cfg = LyapunovConfig::new(&pp, &hp, &grid, &eq).unwrap();
        let v_saddle = lyapunov_value(&eq.state_unstable(), &eq, &cfg);
        let mut r = ChaCha12Rng::seed_from_u64(3);
        for _ in 0..500 {
            let dth = r.gen_range(-0.3..0.3);
            let mut x_th = eq.state_unstable().electrical();
            x_th.theta += dth;
            assert!(lyapunov_value(&State::Ib(x_th), &eq, &cfg) <= v_saddle + 1e-9);
            let mut x_y = eq.state_unstable().electrical();
            x_y.v_dc += r.gen_range(-5.0..5.0);
            x_y.i = x_y.i + Vec2::new(r.gen_range(-5.0..5.0), r.gen_range(-5.0..5.0));
            assert!(lyapunov_value(&State::Ib(x_y), &eq, &cfg) >= v_saddle - 1e-9);
        }
    }

    #[test]
    fn audit_detects_injected_increase() {
        let (pp, hp, _) = table1();
        let grid = GridModel::InfiniteBus;
        let eq = solve_equilibrium(&pp, &hp, &grid).unwrap();
        let cfg = LyapunovConfig::new(&pp, &hp, &grid, &eq).unwrap();
        // constant trajectory at the stable point: increments identically 0
        let xs = eq.state_stable();
        let times: Vec<f64> = (0..100).map(|k| k as f64 * 1e-3).collect();
        let states = vec![xs; 100];
        let audit = lyapunov_audit(&times, &states, &eq, &cfg).unwrap();
        assert!(audit.clean());
        assert_eq!(audit.max_positive_increment, 0.0);
        // corrupt a sample so V rises mid-way: must be flagged
        let mut corrupted = states.clone();
        let mut bad = xs.electrical();
        bad.v_dc += 50.0;
        corrupted[50] = State::Ib(bad);
        let audit = lyapunov_audit(&times, &corrupted, &eq, &cfg).unwrap();
        assert!(!audit.clean());
        assert_eq!(audit.violation_times.len(), 1);
        assert!((audit.violation_times[0] - 0.050).abs() < 1e-12);
    }

    #[test]
    fn jacobian_sign_test_table1() {
        let (pp, hp, _) = table1();
        // certified configuration: η = 0 makes the gain condition hold
        let hp0 = HacParams { eta: 0.0, ..hp };
        let eq = solve_equilibrium(&pp, &hp0, &GridModel::InfiniteBus).unwrap();
        let report = jacobian_sign_test(&pp, &hp0, &eq);
        assert!(report.conclusive);
        assert!(report.det_at_unstable > 0.0, "det_u = {:.3e}", report.det_at_unstable);
        assert!(report.det_at_stable < 0.0, "det_s = {:.3e}", report.det_at_stable);
        assert!(report.consistent);
    }

    #[test]
    fn jacobian_theta_row_matches_analytic() {
        let (pp, hp, _) = table1();
        let eq = solve_equilibrium(&pp, &hp, &GridModel::InfiniteBus).unwrap();
        let hp_c = HacParams { i_r: eq.i_r_consistent, ..hp };
        let x = StateIb {
            theta: eq.theta_stable,
            i_dc: eq.i_dc,
            v_dc: eq.v_dc,
            i: eq.i,
            v: eq.v,
            i_g: eq.i_g,
        };
        let jac = numerical_jacobian_ib(&pp, &hp_c, &x);
        // θ̇ row: ∂/∂θ = -γ/2·cos((θ-θ_r)/2), ∂/∂v_dc = η, zeros elsewhere
        assert!((jac[(0, 0)] + hp.gamma / 2.0).abs() < 1e-4 * hp.gamma);
        assert!((jac[(0, 2)] - hp.eta).abs() < 1e-8);
        for j in [1, 3, 4, 5, 6, 7, 8] {
            assert!(jac[(0, j)].abs() < 1e-8);
        }
    }

    #[test]
    fn jacobian_det_sign_invariant_under_state_rescaling() {
        let (pp, hp, _) = table1();
        let hp0 = HacParams { eta: 0.0, ..hp };
        let eq = solve_equilibrium(&pp, &hp0, &GridModel::InfiniteBus).unwrap();
        let hp_c = HacParams { i_r: eq.i_r_consistent, ..hp0 };
        let x = StateIb {
            theta: eq.theta_unstable,
            i_dc: eq.i_dc,
            v_dc: eq.v_dc,
            i: eq.i,
            v: eq.v,
            i_g: eq.i_g,
        };
        let jac = numerical_jacobian_ib(&pp, &hp_c, &x);
        let det = jac.clone().lu().determinant();
        // similarity transform S J S⁻¹ leaves the determinant unchanged
        let scales = [1.0, 10.0, 100.0, 1.0, 1.0, 0.01, 0.01, 5.0, 5.0];
        let mut scaled = jac.clone();
        for i in 0..9 {
            for j in 0..9 {
                scaled[(i, j)] = jac[(i, j)] * scales[i] / scales[j];
            }
        }
        let det_scaled = scaled.lu().determinant();
        assert_eq!(det.signum(), det_scaled.signum());
    }

    #[test]
    fn droop_slope_matches_finite_difference() {
        let (pp, hp, _) = table1();
        let mut r = ChaCha12Rng::seed_from_u64(4);
        for _ in 0..20 {
            let w_x = pp.omega_0 * r.gen_range(0.9..1.1);
            let th_x = r.gen_range(-TWO_PI..TWO_PI);
            let analytic = droop_slope(&pp, &hp, w_x, th_x).unwrap();
            let fd = droop_slope_fd(&pp, &hp, w_x, th_x, 1.0).unwrap();
            assert!(
                (analytic - fd).abs() <= 1e-6 * analytic.abs(),
                "analytic {analytic} vs fd {fd}"
            );
            // affine in ω_x: second difference vanishes
            let s2 = droop_slope(&pp, &hp, w_x + 7.0, th_x).unwrap();
            let s1 = droop_slope(&pp, &hp, w_x + 3.5, th_x).unwrap();
            assert!(((s2 - s1) - (s1 - analytic)).abs() < 1e-6 * analytic.abs());
        }
        assert_eq!(
            droop_slope(&pp, &HacParams { eta: 0.0, ..hp }, pp.omega_0, 0.0).unwrap_err(),
            AnalysisError::EtaZero
        );
    }

    #[test]
    fn droop_slope_matching_control_reduction() {
        // η = ω_0/v_dc,r and θ_x = θ_r: β_θ = 0 and the slope reduces to the
        // matching-control expression.
        let (pp, hp, _) = table1();
        let hp_m = HacParams { eta: pp.omega_0 / hp.v_dc_r, ..hp };
        let w_x = pp.omega_0 * 0.98;
        let exact = droop_slope(&pp, &hp_m, w_x, hp_m.theta_r).unwrap();
        let approx = droop_slope_matching_approx(&pp, &hp_m, w_x).unwrap();
        assert!((exact - approx).abs() <= 1e-12 * exact.abs());
    }

    #[test]
    fn rocof_constant_and_linear() {
        let times: Vec<f64> = (0..=100).map(|k| k as f64 * 0.01).collect();
        let flat: Vec<f64> = times.iter().map(|_| 314.159).collect();
        assert_eq!(rocof(&times, &flat, 0.1, 0.5).unwrap(), 0.0);
        let a = -2.5;
        let ramp: Vec<f64> = times.iter().map(|t| 314.159 + a * t).collect();
        let r = rocof(&times, &ramp, 0.2, 0.5).unwrap();
        assert!((r - a.abs()).abs() < 1e-9);
        assert!(matches!(
            rocof(&times, &ramp, 0.8, 0.5),
            Err(AnalysisError::OutOfSpan { .. })
        ));
    }
}
