//! Simulation and analysis toolkit for grid-forming power converters under
//! hybrid angle control.
//!
//! The toolkit covers the closed-loop converter models against an infinite
//! bus and a center-of-inertia grid, the hybrid angle control law with its
//! implicit-measurement and arctan variants, current-limiting modulation
//! control, equilibrium solving, parametric stability certificates, Lyapunov
//! auditing of trajectories, droop analysis, and scenario-driven simulation
//! with CSV export.

pub mod analysis;
pub mod controller;
pub mod io;
pub mod mathkit;
pub mod plant;
pub mod sim;
pub(crate) mod probe_tmp;
