//! Command-line front end: scenario simulation, equilibrium and certificate
//! reports, droop evaluation, parameter sweeps, and Monte-Carlo convergence
//! runs, driven by TOML configs (or bundled presets via `preset:<name>`).

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use hac_core::analysis::{droop_slope, droop_slope_fd, droop_slope_matching_approx};
use hac_core::io::{self, csv, presets, report::RunReport};
use hac_core::sim;
use std::fs;
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "hac",
    version,
    about = "Simulation and analysis toolkit for hybrid-angle-controlled grid-forming converters"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate the configured scenario; writes trajectory CSV, a run
    /// report, and a plot script
    Simulate {
        config: String,
        /// overrides [output].directory
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Solve and print both closed-loop equilibria with residuals and the
    /// consistent references
    Equilibrium {
        config: String,
        #[arg(long)]
        json: bool,
    },
    /// Evaluate the parametric stability certificates and the Jacobian
    /// determinant sign test
    Certify {
        config: String,
        #[arg(long)]
        json: bool,
    },
    /// Power-frequency droop slope at an operating frequency
    Droop {
        config: String,
        /// operating frequency ω_x [rad/s]
        #[arg(long)]
        omega: f64,
        /// equilibrium relative angle θ_x [rad]
        #[arg(long, default_value_t = 0.0)]
        theta: f64,
    },
    /// Run the sweep block of the config; writes a metrics table CSV
    Sweep {
        config: String,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Seeded convergence experiment from sampled initial conditions
    Montecarlo {
        config: String,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        spread: f64,
        #[arg(long)]
        seed: u64,
        /// simulated-time budget per sample [s]
        #[arg(long, default_value_t = 60.0)]
        t_max: f64,
        /// convergence check interval [s]
        #[arg(long, default_value_t = 2.0)]
        chunk: f64,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// List bundled presets, or print one
    Presets { name: Option<String> },
}

fn main() {
    if let Err(err) = run() {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

fn load(config: &str) -> Result<io::Resolved> {
    let doc = io::load_config(config).with_context(|| format!("loading `{config}`"))?;
    let resolved = io::resolve(&doc).context("resolving config")?;
    for w in &resolved.warnings {
        eprintln!("warning: {w}");
    }
    Ok(resolved)
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::Simulate { config, out_dir } => simulate(&config, out_dir),
        Command::Equilibrium { config, json } => equilibrium(&config, json),
        Command::Certify { config, json } => certify(&config, json),
        Command::Droop { config, omega, theta } => droop(&config, omega, theta),
        Command::Sweep { config, out_dir } => sweep_cmd(&config, out_dir),
        Command::Montecarlo { config, n, spread, seed, t_max, chunk, out_dir } => {
            montecarlo(&config, n, spread, seed, t_max, chunk, out_dir)
        }
        Command::Presets { name } => presets_cmd(name),
    }
}

fn simulate(config: &str, out_dir: Option<PathBuf>) -> Result<()> {
    let res = load(config)?;
    let sc = &res.scenario;
    let traj = sim::integrate(sc).context("integration failed")?;
    let mut report = RunReport::for_scenario(sc, res.seed, res.warnings.clone());
    report.attach_trajectory(&traj, sc);

    let dir = out_dir.unwrap_or_else(|| res.out_dir.clone());
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let csv_path = dir.join("trajectory.csv");
    csv::export_csv_path(&traj, &csv_path, res.normalization, sc.eq.as_ref())
        .context("writing trajectory CSV")?;
    fs::write(dir.join("report.json"), report.to_json())?;
    fs::write(dir.join("plot.py"), io::plot_script("trajectory.csv"))?;

    let m = report.metrics.as_ref().expect("metrics attached");
    println!("samples:        {}", traj.times.len());
    println!("t_end:          {} s", sc.t_end);
    println!("final rel err:  {:.3e}", m.final_rel_err);
    println!("max ‖i‖:        {:.3} A", m.max_i_mag);
    if let Some(r) = m.rocof {
        println!("rocof:          {:.4} rad/s²", r);
    }
    if let Some(audit) = &report.lyapunov_audit {
        println!(
            "lyapunov audit: {} violations (max increment {:.3e}, tol {:.3e})",
            audit.violation_times.len(),
            audit.max_positive_increment,
            audit.tolerance
        );
    }
    println!("wrote {}", csv_path.display());
    println!("wrote {}", dir.join("report.json").display());
    println!("wrote {}", dir.join("plot.py").display());
    Ok(())
}

fn equilibrium(config: &str, json: bool) -> Result<()> {
    let res = load(config)?;
    let eq = res.scenario.eq.as_ref().expect("resolved scenario has equilibrium");
    if json {
        println!("{}", serde_json::to_string_pretty(eq)?);
        return Ok(());
    }
    println!("equilibrium (both points share the Euclidean components):");
    println!("  θ*   stable   = {:.6} rad", eq.theta_stable);
    println!("  θ*   unstable = {:.6} rad", eq.theta_unstable);
    println!("  i_dc*  = {:.6} A", eq.i_dc);
    println!("  v_dc*  = {:.6} V", eq.v_dc);
    if let Some(w) = eq.omega {
        println!("  ω*     = {:.6} rad/s", w);
    }
    println!("  i*     = ({:.6}, {:.6}) A   ‖i*‖   = {:.3} A", eq.i.a, eq.i.b, eq.i.norm());
    println!("  v*     = ({:.6}, {:.6}) V   ‖v*‖   = {:.3} V", eq.v.a, eq.v.b, eq.v.norm());
    println!(
        "  i_g*   = ({:.6}, {:.6}) A   ‖i_g*‖ = {:.3} A",
        eq.i_g.a,
        eq.i_g.b,
        eq.i_g.norm()
    );
    println!("consistent references:");
    println!("  i_r   = {:.9} A", eq.i_r_consistent);
    if let Some(tm) = eq.t_m_consistent {
        println!("  T_m   = {:.6} N·m", tm);
    }
    println!("residuals:");
    println!("  equation form    = {:.3e}", eq.residual_norm);
    println!("  derivative form  = {:.3e}  (at x_s*)", eq.derivative_residual_norm);
    Ok(())
}

fn certify(config: &str, json: bool) -> Result<()> {
    let res = load(config)?;
    let sc = &res.scenario;
    let report = RunReport::for_scenario(sc, res.seed, res.warnings.clone());
    if json {
        let out = serde_json::json!({
            "cert_ib": report.cert_ib,
            "cert_coi": report.cert_coi,
            "jacobian_sign": report.jacobian_sign,
        });
        println!("{}", serde_json::to_string_pretty(&out)?);
        return Ok(());
    }
    let c = &report.cert_ib;
    println!("infinite-bus gain condition:");
    println!("  lhs = {:.6e} rad/s, γ = {:.6e} rad/s", c.lhs, c.gamma);
    println!("  satisfied = {}, margin = {:.6e} rad/s", c.satisfied, c.margin);
    if let Some(cc) = &report.cert_coi {
        println!("coi gain + damping condition:");
        println!("  D_min required = {:.6}", cc.d_min_required.unwrap_or(f64::NAN));
        println!("  extra term     = {:.6e} rad/s", cc.extra_term.unwrap_or(f64::NAN));
        println!("  lhs = {:.6e} rad/s, γ = {:.6e} rad/s", cc.lhs, cc.gamma);
        println!("  satisfied = {}, margin = {:.6e} rad/s", cc.satisfied, cc.margin);
    }
    let j = &report.jacobian_sign;
    println!("jacobian determinant signs (bus-connected loop):");
    println!("  det at x_s* = {:.6e}", j.det_at_stable);
    println!("  det at x_u* = {:.6e}", j.det_at_unstable);
    println!("  consistent = {}, conclusive = {}", j.consistent, j.conclusive);
    Ok(())
}

fn droop(config: &str, omega: f64, theta: f64) -> Result<()> {
    let res = load(config)?;
    let sc = &res.scenario;
    let analytic = droop_slope(&sc.pp, &sc.hp, omega, theta).context("droop slope")?;
    let fd = droop_slope_fd(&sc.pp, &sc.hp, omega, theta, 1.0).context("droop slope fd")?;
    let approx = droop_slope_matching_approx(&sc.pp, &sc.hp, omega)?;
    println!("droop slope at ω_x = {omega} rad/s, θ_x = {theta} rad:");
    println!("  analytic          = {:.9e} W·s/rad", analytic);
    println!("  finite difference = {:.9e} W·s/rad", fd);
    println!("  matching approx   = {:.9e} W·s/rad (valid when the angle term vanishes)", approx);
    println!("  |analytic - fd| / |analytic| = {:.3e}", (analytic - fd).abs() / analytic.abs());
    Ok(())
}

fn sweep_cmd(config: &str, out_dir: Option<PathBuf>) -> Result<()> {
    let res = load(config)?;
    let Some(spec) = res.sweep.clone() else {
        bail!("config has no [scenario.sweep] block");
    };
    let table = sim::sweep(&res.scenario, &spec.param, &spec.values, res.consistent_refs)
        .context("sweep failed")?;
    let dir = out_dir.unwrap_or_else(|| res.out_dir.clone());
    fs::create_dir_all(&dir)?;
    let path = dir.join("sweep.csv");
    let mut out = String::from(
        "value,final_rel_err,max_i_mag,rocof,settling_time,cert_lhs,cert_satisfied,cert_margin\n",
    );
    println!(
        "{:>12}  {:>12}  {:>12}  {:>12}  {:>10}",
        spec.param, "rel_err", "max‖i‖", "rocof", "cert"
    );
    for row in &table.rows {
        let m = &row.metrics;
        out.push_str(&format!(
            "{:.16e},{:.16e},{:.16e},{},{},{:.16e},{},{:.16e}\n",
            row.value,
            m.final_rel_err,
            m.max_i_mag,
            m.rocof.map(|v| format!("{v:.16e}")).unwrap_or_default(),
            m.settling_time.map(|v| format!("{v:.16e}")).unwrap_or_default(),
            row.cert_lhs,
            row.cert_satisfied,
            row.cert_margin,
        ));
        println!(
            "{:>12.4e}  {:>12.4e}  {:>12.4e}  {:>12}  {:>10}",
            row.value,
            m.final_rel_err,
            m.max_i_mag,
            m.rocof.map(|v| format!("{v:.4e}")).unwrap_or_else(|| "-".into()),
            if row.cert_satisfied { "ok" } else { "violated" },
        );
    }
    fs::write(&path, out)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn montecarlo(
    config: &str,
    n: usize,
    spread: f64,
    seed: u64,
    t_max: f64,
    chunk: f64,
    out_dir: Option<PathBuf>,
) -> Result<()> {
    let res = load(config)?;
    let report = sim::convergence_experiment(&res.scenario, n, spread, seed, t_max, chunk)
        .context("convergence experiment failed")?;
    let dir = out_dir.unwrap_or_else(|| res.out_dir.clone());
    fs::create_dir_all(&dir)?;
    let path = dir.join("montecarlo.csv");
    let mut out = String::from(
        "index,theta0,t_converged,final_rel_err,theta_dist_stable,theta_dist_unstable,representative,lyap_violations\n",
    );
    for r in &report.rows {
        out.push_str(&format!(
            "{},{:.16e},{},{:.16e},{:.16e},{:.16e},{},{}\n",
            r.index,
            r.theta0,
            r.t_converged.map(|v| format!("{v:.6}")).unwrap_or_default(),
            r.final_rel_err,
            r.final_theta_dist_stable,
            r.final_theta_dist_unstable,
            if r.to_stable_representative { "stable" } else { "shifted" },
            r.lyap_violations,
        ));
    }
    fs::write(&path, out)?;
    println!("samples:           {}", report.rows.len());
    println!("all converged:     {}", report.all_converged);
    println!("reached θ_r:       {}", report.reached_stable);
    println!("reached θ_r ± 2π:  {}", report.reached_unstable);
    println!("audit violations:  {}", report.total_violations);
    println!("wrote {}", path.display());
    if !report.all_converged {
        bail!(
            "{} samples did not converge",
            report.rows.iter().filter(|r| r.t_converged.is_none()).count()
        );
    }
    Ok(())
}

fn presets_cmd(name: Option<String>) -> Result<()> {
    match name {
        None => {
            for n in presets::preset_names() {
                println!("{n}");
            }
        }
        Some(n) => match presets::preset(&n) {
            Some(text) => print!("{text}"),
            None => bail!("unknown preset `{n}`"),
        },
    }
    Ok(())
}
