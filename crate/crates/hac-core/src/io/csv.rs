//! Trajectory CSV export and re-import.
//!
//! Schema (one row per recorded sample, full double precision):
//!
//! ```text
//! t,theta,i_dc,v_dc,i_d,i_q,v_d,v_q,ig_d,ig_q[,omega],
//!   mu,delta_mu,d_value,p_net,i_net,p_s,q_s,p_f,q_f,p_g,q_g,V_lyap
//! ```
//!
//! 22 channels for the infinite-bus model, 23 with the COI frequency.
//! Values are written with 17 significant digits, so a re-import reproduces
//! the samples bit-exactly.

use crate::analysis::EquilibriumPair;
use crate::plant::State;
use crate::sim::Trajectory;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CsvError {
    #[error("csv io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("cannot export an empty trajectory")]
    Empty,
    #[error("per-equilibrium normalization needs the solved equilibrium")]
    MissingEquilibrium,
}

/// Output normalization of the Euclidean state channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// raw SI values
    Si,
    /// each Euclidean channel divided by its equilibrium value (channels
    /// whose equilibrium value is exactly zero stay SI)
    PerEquilibrium,
}

fn header(coi: bool) -> String {
    let mut cols: Vec<&str> = vec!["t", "theta", "i_dc", "v_dc", "i_d", "i_q", "v_d", "v_q", "ig_d", "ig_q"];
    if coi {
        cols.push("omega");
    }
    cols.extend_from_slice(&[
        "mu", "delta_mu", "d_value", "p_net", "i_net", "p_s", "q_s", "p_f", "q_f", "p_g", "q_g",
        "V_lyap",
    ]);
    cols.join(",")
}

fn norm_div(v: f64, star: f64) -> f64 {
    if star == 0.0 {
        v
    } else {
        v / star
    }
}

/// Writes a trajectory as CSV.
pub fn export_csv<W: Write>(
    traj: &Trajectory,
    out: &mut W,
    normalization: Normalization,
    eq: Option<&EquilibriumPair>,
) -> Result<(), CsvError> {
    if traj.times.is_empty() {
        return Err(CsvError::Empty);
    }
    let coi = traj.is_coi();
    writeln!(out, "{}", header(coi))?;
    let eq = match normalization {
        Normalization::PerEquilibrium => Some(eq.ok_or(CsvError::MissingEquilibrium)?),
        Normalization::Si => None,
    };
    let mut row: Vec<f64> = Vec::with_capacity(23);
    for (k, state) in traj.states.iter().enumerate() {
        row.clear();
        let el = state.electrical();
        let d = &traj.derived[k];
        row.push(traj.times[k]);
        row.push(el.theta);
        match eq {
            Some(eq) => {
                row.push(norm_div(el.i_dc, eq.i_dc));
                row.push(norm_div(el.v_dc, eq.v_dc));
                row.push(norm_div(el.i.a, eq.i.a));
                row.push(norm_div(el.i.b, eq.i.b));
                row.push(norm_div(el.v.a, eq.v.a));
                row.push(norm_div(el.v.b, eq.v.b));
                row.push(norm_div(el.i_g.a, eq.i_g.a));
                row.push(norm_div(el.i_g.b, eq.i_g.b));
                if let State::Coi(s) = state {
                    row.push(norm_div(s.omega, eq.omega.unwrap_or(0.0)));
                }
            }
            None => {
                row.push(el.i_dc);
                row.push(el.v_dc);
                row.push(el.i.a);
                row.push(el.i.b);
                row.push(el.v.a);
                row.push(el.v.b);
                row.push(el.i_g.a);
                row.push(el.i_g.b);
                if let State::Coi(s) = state {
                    row.push(s.omega);
                }
            }
        }
        row.extend_from_slice(&[
            d.mu,
            d.delta_mu,
            d.d_value,
            d.flows.p_net,
            d.flows.i_net,
            d.flows.p_s,
            d.flows.q_s,
            d.flows.p_f,
            d.flows.q_f,
            d.flows.p_g,
            d.flows.q_g,
            d.v_lyap,
        ]);
        let mut line = String::with_capacity(row.len() * 26);
        for (j, v) in row.iter().enumerate() {
            if j > 0 {
                line.push(',');
            }
            line.push_str(&format!("{v:.16e}"));
        }
        writeln!(out, "{line}")?;
    }
    Ok(())
}

pub fn export_csv_path(
    traj: &Trajectory,
    path: &Path,
    normalization: Normalization,
    eq: Option<&EquilibriumPair>,
) -> Result<(), CsvError> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    export_csv(traj, &mut file, normalization, eq)
}

/// Re-imports an exported trajectory CSV as named columns.
pub fn import_csv(text: &str) -> Result<(Vec<String>, Vec<Vec<f64>>), CsvError> {
    let mut lines = text.lines().enumerate();
    let (_, head) = lines.next().ok_or(CsvError::Parse { line: 1, msg: "empty file".into() })?;
    let header: Vec<String> = head.split(',').map(|s| s.to_string()).collect();
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); header.len()];
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let mut n = 0;
        for (j, field) in line.split(',').enumerate() {
            if j >= header.len() {
                return Err(CsvError::Parse { line: idx + 1, msg: "too many fields".into() });
            }
            let v: f64 = field
                .parse()
                .map_err(|e| CsvError::Parse { line: idx + 1, msg: format!("{e}: `{field}`") })?;
            columns[j].push(v);
            n = j + 1;
        }
        if n != header.len() {
            return Err(CsvError::Parse { line: idx + 1, msg: "too few fields".into() });
        }
    }
    Ok((header, columns))
}
