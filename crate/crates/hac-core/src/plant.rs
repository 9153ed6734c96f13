//! Electrical parameters and right-hand sides of the closed-loop dynamics.
//!
//! Two grid models are supported: a stiff infinite bus with constant voltage
//! `v_b = (v_r, 0)` and frequency `ω_0`, and a center-of-inertia swing model
//! whose frequency state feeds back into the (then frequency-dependent)
//! impedance and admittance matrices. Everything is SI; per-unit only ever
//! appears at output normalization.
//!
//! Sign conventions: `J = [[0, 1], [-1, 0]]`, filter impedance
//! `Z(ω) = r·I - ℓω·J`, shunt admittance `Y(ω) = g·I - cω·J`, line impedance
//! `Z_g(ω) = r_g·I - ℓ_g·ω·J`. The modulated ac voltage is `v_s = v_dc·μ·ψ(θ)`
//! (no 1/2 factor), so dc/ac conversion is lossless: `p_net = p_s` exactly.

use crate::controller::ControlOutputs;
use crate::mathkit::{psi, to_polar, Vec2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum PlantError {
    #[error("parameter {name} must be strictly positive, got {value}")]
    NonPositiveParameter { name: &'static str, value: f64 },
    #[error("current magnitude dynamics are undefined at ‖i‖ = 0")]
    ZeroCurrent,
}

/// Converter, filter, line, and dc-side constants. All strictly positive.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantParams {
    /// dc source time constant [s]
    pub tau_dc: f64,
    /// dc-link capacitance [F]
    pub c_dc: f64,
    /// dc-side loss conductance [S]
    pub g_dc: f64,
    /// filter inductance [H]
    pub ell: f64,
    /// filter series resistance [Ω]
    pub r: f64,
    /// filter capacitance [F]
    pub c: f64,
    /// filter shunt conductance [S]
    pub g: f64,
    /// line inductance [H]
    pub ell_g: f64,
    /// line resistance [Ω]
    pub r_g: f64,
    /// nominal grid frequency [rad/s]
    pub omega_0: f64,
    /// nominal ac voltage magnitude [V]
    pub v_r: f64,
}

impl PlantParams {
    pub fn validate(&self) -> Result<(), PlantError> {
        let fields = [
            ("tau_dc", self.tau_dc),
            ("c_dc", self.c_dc),
            ("g_dc", self.g_dc),
            ("ell", self.ell),
            ("r", self.r),
            ("c", self.c),
            ("g", self.g),
            ("ell_g", self.ell_g),
            ("r_g", self.r_g),
            ("omega_0", self.omega_0),
            ("v_r", self.v_r),
        ];
        for (name, value) in fields {
            if !(value > 0.0) || !value.is_finite() {
                return Err(PlantError::NonPositiveParameter { name, value });
            }
        }
        Ok(())
    }

    /// Infinite-bus voltage in the dq frame aligned with the bus angle.
    pub fn v_b(&self) -> Vec2 {
        Vec2::new(self.v_r, 0.0)
    }
}

/// Aggregated swing-dynamics constants of the center-of-inertia grid model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoiParams {
    /// grid base power [VA]
    pub s_r_g: f64,
    /// inertia constant [s]
    pub h: f64,
    /// aggregated damping / governor droop [N·m·s/rad]
    pub d: f64,
    /// mechanical torque [N·m]
    pub t_m: f64,
    /// voltage constant [V·s/rad]; the grid emf magnitude is b·ω
    pub b: f64,
}

impl CoiParams {
    /// Moment of inertia `J = 2·H·S_r,g / ω_0²`.
    pub fn inertia(&self, omega_0: f64) -> f64 {
        2.0 * self.h * self.s_r_g / (omega_0 * omega_0)
    }

    pub fn validate(&self) -> Result<(), PlantError> {
        let fields = [("s_r_g", self.s_r_g), ("h", self.h), ("d", self.d), ("b", self.b)];
        for (name, value) in fields {
            if !(value > 0.0) || !value.is_finite() {
                return Err(PlantError::NonPositiveParameter { name, value });
            }
        }
        Ok(())
    }
}

/// The grid the converter is interfaced to.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum GridModel {
    InfiniteBus,
    Coi(CoiParams),
}

impl GridModel {
    pub fn is_coi(&self) -> bool {
        matches!(self, GridModel::Coi(_))
    }

    pub fn coi(&self) -> Option<&CoiParams> {
        match self {
            GridModel::InfiniteBus => None,
            GridModel::Coi(cp) => Some(cp),
        }
    }
}

/// Closed-loop state against the infinite bus: `x = (θ, i_dc, v_dc, i, v, i_g)`.
///
/// `theta` is the raw (unwrapped) relative angle; it is canonicalized onto
/// `M = [-2π, 2π]` only when recorded or compared.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StateIb {
    pub theta: f64,
    pub i_dc: f64,
    pub v_dc: f64,
    pub i: Vec2,
    pub v: Vec2,
    pub i_g: Vec2,
}

/// Closed-loop state against the COI grid: `x = (θ, i_dc, v_dc, ω, i, v, i_g)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StateCoi {
    pub theta: f64,
    pub i_dc: f64,
    pub v_dc: f64,
    pub omega: f64,
    pub i: Vec2,
    pub v: Vec2,
    pub i_g: Vec2,
}

impl StateIb {
    pub const DIM: usize = 9;

    pub fn to_array(&self) -> [f64; 9] {
        [
            self.theta, self.i_dc, self.v_dc, self.i.a, self.i.b, self.v.a, self.v.b, self.i_g.a,
            self.i_g.b,
        ]
    }

    pub fn from_array(x: &[f64; 9]) -> Self {
        StateIb {
            theta: x[0],
            i_dc: x[1],
            v_dc: x[2],
            i: Vec2::new(x[3], x[4]),
            v: Vec2::new(x[5], x[6]),
            i_g: Vec2::new(x[7], x[8]),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

impl StateCoi {
    pub const DIM: usize = 10;

    pub fn to_array(&self) -> [f64; 10] {
        [
            self.theta, self.i_dc, self.v_dc, self.omega, self.i.a, self.i.b, self.v.a, self.v.b,
            self.i_g.a, self.i_g.b,
        ]
    }

    pub fn from_array(x: &[f64; 10]) -> Self {
        StateCoi {
            theta: x[0],
            i_dc: x[1],
            v_dc: x[2],
            omega: x[3],
            i: Vec2::new(x[4], x[5]),
            v: Vec2::new(x[6], x[7]),
            i_g: Vec2::new(x[8], x[9]),
        }
    }

    /// Electrical sub-state shared with the infinite-bus model.
    pub fn electrical(&self) -> StateIb {
        StateIb {
            theta: self.theta,
            i_dc: self.i_dc,
            v_dc: self.v_dc,
            i: self.i,
            v: self.v,
            i_g: self.i_g,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

/// Either closed-loop state, tagged by grid model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum State {
    Ib(StateIb),
    Coi(StateCoi),
}

impl State {
    pub fn theta(&self) -> f64 {
        match self {
            State::Ib(x) => x.theta,
            State::Coi(x) => x.theta,
        }
    }

    pub fn omega(&self) -> Option<f64> {
        match self {
            State::Ib(_) => None,
            State::Coi(x) => Some(x.omega),
        }
    }

    pub fn electrical(&self) -> StateIb {
        match self {
            State::Ib(x) => *x,
            State::Coi(x) => x.electrical(),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            State::Ib(_) => StateIb::DIM,
            State::Coi(_) => StateCoi::DIM,
        }
    }
}

/// Admittance added in parallel with the filter capacitance. Faults and load
/// steps both use this mechanism; zero means the nominal network.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ShuntPerturbation {
    /// extra conductance [S]
    pub g_extra: f64,
    /// extra susceptance [S]; positive acts like added capacitive admittance
    pub b_extra: f64,
}

impl ShuntPerturbation {
    pub const NONE: ShuntPerturbation = ShuntPerturbation { g_extra: 0.0, b_extra: 0.0 };

    pub fn is_zero(&self) -> bool {
        self.g_extra == 0.0 && self.b_extra == 0.0
    }
}

/// Power flows at the switching node, filter-capacitance node, and grid node.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PowerFlows {
    /// net dc current transferred to the ac side, `mᵀi` [A]
    pub i_net: f64,
    /// net dc power, `v_dc·i_net` [W]
    pub p_net: f64,
    /// active power at the switching node, `iᵀv_s` [W]
    pub p_s: f64,
    /// reactive power at the switching node, `iᵀJv_s` [var]
    pub q_s: f64,
    /// active power at the filter capacitance, `iᵀv` [W]
    pub p_f: f64,
    /// reactive power at the filter capacitance, `iᵀJv` [var]
    pub q_f: f64,
    /// active power into the grid node, `i_gᵀv_b` [W]
    pub p_g: f64,
    /// reactive power into the grid node, `i_gᵀJv_b` [var]
    pub q_g: f64,
}

/// `Z(ω)·x = r·x - ℓω·J·x` (works for the shunt with `r → g`, `ℓ → c`).
#[inline]
fn impedance_apply(r: f64, l_omega: f64, x: Vec2) -> Vec2 {
    x * r - x.skew() * l_omega
}

/// Shunt current at the filter-capacitance node, including a perturbation.
#[inline]
fn shunt_current(v: Vec2, g: f64, c_omega: f64, pert: &ShuntPerturbation) -> Vec2 {
    v * (g + pert.g_extra) - v.skew() * (c_omega + pert.b_extra)
}

/// Right-hand side of the closed-loop converter–infinite-bus dynamics.
///
/// `ctrl` must carry the controller outputs evaluated at `x` (the integrator
/// re-evaluates it at every stage).
pub fn rhs_ib(
    x: &StateIb,
    pp: &PlantParams,
    ctrl: &ControlOutputs,
    pert: &ShuntPerturbation,
) -> StateIb {
    let m = psi(x.theta) * ctrl.mu;
    StateIb {
        theta: ctrl.theta_dot,
        i_dc: (ctrl.i_dc_ref - x.i_dc) / pp.tau_dc,
        v_dc: (x.i_dc - pp.g_dc * x.v_dc - m.dot(x.i)) / pp.c_dc,
        i: (m * x.v_dc - impedance_apply(pp.r, pp.ell * pp.omega_0, x.i) - x.v) * (1.0 / pp.ell),
        v: (x.i - shunt_current(x.v, pp.g, pp.c * pp.omega_0, pert) - x.i_g) * (1.0 / pp.c),
        i_g: (x.v - impedance_apply(pp.r_g, pp.ell_g * pp.omega_0, x.i_g) - pp.v_b())
            * (1.0 / pp.ell_g),
    }
}

/// Right-hand side of the closed-loop converter–COI dynamics.
///
/// The impedance and admittance matrices use the instantaneous grid
/// frequency, and the grid voltage is `b·ω·e₁`.
pub fn rhs_coi(
    x: &StateCoi,
    pp: &PlantParams,
    cp: &CoiParams,
    ctrl: &ControlOutputs,
    pert: &ShuntPerturbation,
) -> StateCoi {
    let m = psi(x.theta) * ctrl.mu;
    let w = x.omega;
    let v_g = Vec2::new(cp.b * w, 0.0);
    StateCoi {
        theta: ctrl.theta_dot,
        i_dc: (ctrl.i_dc_ref - x.i_dc) / pp.tau_dc,
        v_dc: (x.i_dc - pp.g_dc * x.v_dc - m.dot(x.i)) / pp.c_dc,
        omega: (cp.t_m - cp.d * w + cp.b * x.i_g.a) / cp.inertia(pp.omega_0),
        i: (m * x.v_dc - impedance_apply(pp.r, pp.ell * w, x.i) - x.v) * (1.0 / pp.ell),
        v: (x.i - shunt_current(x.v, pp.g, pp.c * w, pert) - x.i_g) * (1.0 / pp.c),
        i_g: (x.v - impedance_apply(pp.r_g, pp.ell_g * w, x.i_g) - v_g) * (1.0 / pp.ell_g),
    }
}

/// Derived power flows for a given effective modulation magnitude.
pub fn power_flows(x: &StateIb, pp: &PlantParams, grid: &GridModel, mu: f64, omega: Option<f64>) -> PowerFlows {
    let m = psi(x.theta) * mu;
    let v_s = m * x.v_dc;
    let v_b = match grid {
        GridModel::InfiniteBus => pp.v_b(),
        GridModel::Coi(cp) => Vec2::new(cp.b * omega.unwrap_or(pp.omega_0), 0.0),
    };
    let i_net = m.dot(x.i);
    PowerFlows {
        i_net,
        p_net: x.v_dc * i_net,
        p_s: x.i.dot(v_s),
        q_s: x.i.dot(v_s.skew()),
        p_f: x.i.dot(x.v),
        q_f: x.i.dot(x.v.skew()),
        p_g: x.i_g.dot(v_b),
        q_g: x.i_g.dot(v_b.skew()),
    }
}

/// Filter-current magnitude dynamics,
/// `d‖i‖/dt = [μ·v_dc·cos(θ-θ_i) - r‖i‖ - ‖v‖cos(θ_v-θ_i)] / ℓ`.
///
/// `θ_i` and `θ_v` are the polar angles of `i` and `v`. Undefined at `‖i‖ = 0`.
pub fn current_magnitude_rhs(x: &StateIb, pp: &PlantParams, mu: f64) -> Result<f64, PlantError> {
    let (i_mag, theta_i) = to_polar(x.i).map_err(|_| PlantError::ZeroCurrent)?;
    let v_term = match to_polar(x.v) {
        Ok((v_mag, theta_v)) => v_mag * (theta_v - theta_i).cos(),
        Err(_) => 0.0,
    };
    Ok((mu * x.v_dc * (x.theta - theta_i).cos() - pp.r * i_mag - v_term) / pp.ell)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::controller::ControlOutputs;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    pub(crate) fn table1_plant() -> PlantParams {
        PlantParams {
            tau_dc: 0.05,
            c_dc: 0.008,
            g_dc: 0.001,
            ell: 200e-6,
            r: 0.001,
            c: 300e-6,
            g: 0.001,
            ell_g: 200e-6,
            r_g: 0.001,
            omega_0: 100.0 * std::f64::consts::PI,
            v_r: 816.4,
        }
    }

    fn ctrl_with(mu: f64, i_dc_ref: f64) -> ControlOutputs {
        ControlOutputs {
            theta_dot: 0.0,
            mu,
            i_dc_ref,
            delta_mu: 0.0,
            d_value: f64::NAN,
            switching_surface: false,
            d_fallback: false,
        }
    }

    #[test]
    fn rhs_ib_zero_state_zero_bus() {
        // μ = 0, v_b = 0, zero state: only the dc source current moves.
        let mut pp = table1_plant();
        pp.v_r = 1e-300; // validate() requires > 0; effectively zero bus
        let x = StateIb::default();
        let i_dc_ref = 3.7;
        let d = rhs_ib(&x, &pp, &ctrl_with(0.0, i_dc_ref), &ShuntPerturbation::NONE);
        assert_eq!(d.theta, 0.0);
        assert!((d.i_dc - i_dc_ref / pp.tau_dc).abs() < 1e-12);
        assert_eq!(d.v_dc, 0.0);
        assert_eq!(d.i, Vec2::ZERO);
        assert_eq!(d.v, Vec2::ZERO);
        assert!(d.i_g.norm() < 1e-290);
    }

    #[test]
    fn rhs_ib_is_4pi_periodic_in_theta() {
        let pp = table1_plant();
        let mut r = ChaCha12Rng::seed_from_u64(7);
        for _ in 0..200 {
            let x = StateIb {
                theta: r.gen_range(-6.0..6.0),
                i_dc: r.gen_range(-10.0..10.0),
                v_dc: r.gen_range(100.0..3000.0),
                i: Vec2::new(r.gen_range(-100.0..100.0), r.gen_range(-100.0..100.0)),
                v: Vec2::new(r.gen_range(-900.0..900.0), r.gen_range(-900.0..900.0)),
                i_g: Vec2::new(r.gen_range(-100.0..100.0), r.gen_range(-100.0..100.0)),
            };
            let ctrl = ctrl_with(2.0 / 3.0, 0.0);
            let mut x2 = x;
            x2.theta += crate::mathkit::FOUR_PI;
            let d1 = rhs_ib(&x, &pp, &ctrl, &ShuntPerturbation::NONE).to_array();
            let d2 = rhs_ib(&x2, &pp, &ctrl, &ShuntPerturbation::NONE).to_array();
            for (a, b) in d1.iter().zip(d2.iter()) {
                // exact up to the f64 representation of 4π in the argument
                assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
            }
        }
    }

    #[test]
    fn rhs_coi_swing_balance() {
        // ω = ω_0, T_m = D·ω_0, i_g = 0 → ω̇ = 0
        let pp = table1_plant();
        let cp = CoiParams {
            s_r_g: 5e6,
            h: 5.0,
            d: 100.0,
            t_m: 100.0 * pp.omega_0,
            b: pp.v_r / pp.omega_0,
        };
        let x = StateCoi { omega: pp.omega_0, v_dc: 2449.2, ..Default::default() };
        let d = rhs_coi(&x, &pp, &cp, &ctrl_with(0.0, 0.0), &ShuntPerturbation::NONE);
        assert_eq!(d.omega, 0.0);
    }

    #[test]
    fn power_flows_zero_current() {
        let pp = table1_plant();
        let x = StateIb { v_dc: 2449.2, v: Vec2::new(800.0, 10.0), ..Default::default() };
        let f = power_flows(&x, &pp, &GridModel::InfiniteBus, 2.0 / 3.0, None);
        assert_eq!(
            (f.p_net, f.p_s, f.q_s, f.p_f, f.q_f, f.p_g, f.q_g),
            (0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0)
        );
    }

    #[test]
    fn power_preserving_dc_ac_conversion() {
        // p_net = p_s identically; the power-preserving structure of the
        // modulation terms.
        let pp = table1_plant();
        let mut r = ChaCha12Rng::seed_from_u64(11);
        for _ in 0..500 {
            let x = StateIb {
                theta: r.gen_range(-6.3..6.3),
                i_dc: r.gen_range(-10.0..10.0),
                v_dc: r.gen_range(-3000.0..3000.0),
                i: Vec2::new(r.gen_range(-1e3..1e3), r.gen_range(-1e3..1e3)),
                v: Vec2::new(r.gen_range(-1e3..1e3), r.gen_range(-1e3..1e3)),
                i_g: Vec2::new(r.gen_range(-1e3..1e3), r.gen_range(-1e3..1e3)),
            };
            let f = power_flows(&x, &pp, &GridModel::InfiniteBus, r.gen_range(0.0..0.7), None);
            assert!((f.p_net - f.p_s).abs() <= 1e-9 * f.p_s.abs().max(1.0));
        }
    }

    #[test]
    fn current_magnitude_matches_chain_rule() {
        // ‖i‖˙ = iᵀi̇/‖i‖ from the full vector field.
        let pp = table1_plant();
        let mut r = ChaCha12Rng::seed_from_u64(13);
        for _ in 0..1000 {
            let x = StateIb {
                theta: r.gen_range(-6.3..6.3),
                i_dc: r.gen_range(-10.0..10.0),
                v_dc: r.gen_range(100.0..3000.0),
                i: Vec2::new(r.gen_range(-1e3..1e3), r.gen_range(-1e3..1e3)),
                v: Vec2::new(r.gen_range(-1e3..1e3), r.gen_range(-1e3..1e3)),
                i_g: Vec2::new(r.gen_range(-1e3..1e3), r.gen_range(-1e3..1e3)),
            };
            if x.i.norm() < 1.0 {
                continue;
            }
            let mu = r.gen_range(0.01..0.7);
            let d = rhs_ib(&x, &pp, &ctrl_with(mu, 0.0), &ShuntPerturbation::NONE);
            let oracle = x.i.dot(d.i) / x.i.norm();
            let got = current_magnitude_rhs(&x, &pp, mu).unwrap();
            assert!((got - oracle).abs() <= 1e-10 * oracle.abs().max(1.0));
        }
    }

    #[test]
    fn current_magnitude_aligned_case() {
        // θ = θ_i = θ_v = 0: all cosines are 1.
        let pp = table1_plant();
        let x = StateIb {
            theta: 0.0,
            v_dc: 2449.2,
            i: Vec2::new(40.0, 0.0),
            v: Vec2::new(818.0, 0.0),
            ..Default::default()
        };
        let mu = 1.0 / 3.0;
        let want = (mu * x.v_dc - pp.r * 40.0 - 818.0) / pp.ell;
        let got = current_magnitude_rhs(&x, &pp, mu).unwrap();
        assert!((got - want).abs() < 1e-9 * want.abs());
        let zero = StateIb { v_dc: 1.0, ..Default::default() };
        assert_eq!(current_magnitude_rhs(&zero, &pp, mu).unwrap_err(), PlantError::ZeroCurrent);
    }
}
