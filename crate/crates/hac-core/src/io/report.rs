//! Self-contained run reports and plot-script emission.
//!
//! A report echoes the fully resolved scenario, so re-running from the echo
//! reproduces the run bit-for-bit.

use crate::analysis::{
    jacobian_sign_test, stability_condition_coi, stability_condition_ib, EquilibriumPair,
    JacobianSignReport, LyapunovAudit, StabilityCert,
};
use crate::sim::{LoggedEvent, RunMetrics, Scenario, Trajectory};
use serde::{Deserialize, Serialize};

/// Everything needed to understand and regenerate one run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunReport {
    pub tool_version: String,
    /// fully resolved scenario (consistent references substituted)
    pub scenario: Scenario,
    pub seed: u64,
    pub equilibrium: EquilibriumPair,
    pub cert_ib: StabilityCert,
    pub cert_coi: Option<StabilityCert>,
    pub jacobian_sign: JacobianSignReport,
    pub metrics: Option<RunMetrics>,
    pub lyapunov_audit: Option<LyapunovAudit>,
    pub events_log: Vec<LoggedEvent>,
    pub warnings: Vec<String>,
}

impl RunReport {
    /// Assembles the analysis part of a report (certificates, determinant
    /// signs) for a resolved scenario. Trajectory-dependent fields start
    /// empty and are filled by the caller after integration.
    pub fn for_scenario(sc: &Scenario, seed: u64, warnings: Vec<String>) -> Self {
        let eq = sc.eq.expect("resolved scenario carries its equilibrium");
        let cert_ib = stability_condition_ib(&sc.pp, &sc.hp, &eq);
        let cert_coi = sc.grid.coi().map(|cp| stability_condition_coi(&sc.pp, cp, &sc.hp, &eq));
        let jacobian_sign = jacobian_sign_test(&sc.pp, &sc.hp, &eq);
        RunReport {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            scenario: sc.clone(),
            seed,
            equilibrium: eq,
            cert_ib,
            cert_coi,
            jacobian_sign,
            metrics: None,
            lyapunov_audit: None,
            events_log: Vec::new(),
            warnings,
        }
    }

    pub fn attach_trajectory(&mut self, traj: &Trajectory, sc: &Scenario) {
        self.metrics = Some(crate::sim::trajectory_metrics(traj, sc));
        if let (Some(eq), Some(cfg)) = (&sc.eq, &sc.lyap) {
            self.lyapunov_audit = traj.lyapunov_audit(eq, cfg).ok();
        }
        self.events_log = traj.events_log.clone();
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// Certificate relevant to the configured grid model.
    pub fn active_cert(&self) -> &StabilityCert {
        self.cert_coi.as_ref().unwrap_or(&self.cert_ib)
    }
}

/// A generic matplotlib script that plots an exported trajectory CSV.
pub fn plot_script(csv_name: &str) -> String {
    format!(
        r#"#!/usr/bin/env python3
"""Plot a trajectory CSV exported by the hac toolkit."""
import csv
import sys

import matplotlib.pyplot as plt

path = sys.argv[1] if len(sys.argv) > 1 else "{csv_name}"
with open(path) as fh:
    rows = list(csv.reader(fh))
header, data = rows[0], rows[1:]
cols = {{name: [float(r[i]) for r in data] for i, name in enumerate(header)}}
t = cols["t"]

groups = [
    [c for c in ("theta",) if c in cols],
    [c for c in ("v_dc", "i_dc") if c in cols],
    [c for c in ("i_d", "i_q", "v_d", "v_q", "ig_d", "ig_q") if c in cols],
    [c for c in ("omega",) if c in cols],
    [c for c in ("mu", "delta_mu", "d_value") if c in cols],
    [c for c in ("p_net", "p_f", "p_g", "q_g") if c in cols],
    [c for c in ("V_lyap",) if c in cols],
]
groups = [g for g in groups if g]
fig, axes = plt.subplots(len(groups), 1, sharex=True, figsize=(9, 2.2 * len(groups)))
if len(groups) == 1:
    axes = [axes]
for ax, group in zip(axes, groups):
    for name in group:
        ax.plot(t, cols[name], label=name, linewidth=0.9)
    ax.legend(loc="upper right", fontsize=8)
    ax.grid(alpha=0.3)
axes[-1].set_xlabel("t [s]")
fig.tight_layout()
out = path.rsplit(".", 1)[0] + ".png"
fig.savefig(out, dpi=150)
print(f"wrote {{out}}")
"#
    )
}
