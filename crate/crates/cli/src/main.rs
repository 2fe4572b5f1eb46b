//! Command-line front end: one subcommand per experiment. Configuration
//! comes from an optional TOML file whose missing sections fall back to the
//! reference setup; a handful of flags override the common knobs. Every run
//! writes CSV artifacts plus a `run.json` manifest into the output
//! directory.
//!
//! Exit codes: 0 on success, 1 when the invocation or configuration is
//! invalid, 2 when the experiment itself fails.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use lts_wave_core::harness::io::write_manifest;
use lts_wave_core::harness::{
    cfl_table, convergence_study, energy_trace, instability_demo, lshape_study,
    spectrum_experiment, HarnessConfig,
};
use lts_wave_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "lts-wave",
    version,
    about = "Stabilized leapfrog local time-stepping for the wave equation",
    after_help = "LTS_WAVE_THREADS bounds worker threads; results are identical at any setting."
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct CommonArgs {
    /// TOML config; absent sections take the reference-setup defaults
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Directory for CSV artifacts and the run.json manifest
    #[arg(long, value_name = "DIR", default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Cmd {
    /// Convergence ladder over mesh levels and stage counts
    Converge {
        #[command(flatten)]
        common: CommonArgs,
        /// Damping parameter
        #[arg(long)]
        nu: Option<f64>,
        /// Stage counts (repeatable), replacing the configured list
        #[arg(long)]
        p: Vec<u32>,
        /// Coarse spacings (repeatable), finest last
        #[arg(long = "hc", value_name = "H")]
        h_c: Vec<f64>,
        /// Final time
        #[arg(long)]
        t_final: Option<f64>,
    },
    /// Long-horizon discrete energy trace
    Energy {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        nu: Option<f64>,
        /// Stage count
        #[arg(long)]
        p: Option<u32>,
        /// Coarse spacing
        #[arg(long = "hc", value_name = "H")]
        h_c: Option<f64>,
        #[arg(long)]
        t_final: Option<f64>,
    },
    /// Eigenvalue branches of the stabilized operator over a step grid
    Spectrum {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        nu: Option<f64>,
        #[arg(long)]
        p: Option<u32>,
        #[arg(long = "hc", value_name = "H")]
        h_c: Option<f64>,
    },
    /// Largest stable step and stability margin per damping level
    CflTable {
        #[command(flatten)]
        common: CommonArgs,
        /// Damping levels (repeatable), replacing the configured list
        #[arg(long)]
        nu: Vec<f64>,
        #[arg(long)]
        p: Option<u32>,
        #[arg(long = "hc", value_name = "H")]
        h_c: Option<f64>,
    },
    /// Growth contrast at the critical step: undamped, damped, off-critical
    Instability {
        #[command(flatten)]
        common: CommonArgs,
        /// Damping of the stabilized contrast run
        #[arg(long)]
        nu: Option<f64>,
        #[arg(long)]
        p: Option<u32>,
        #[arg(long = "hc", value_name = "H")]
        h_c: Option<f64>,
        #[arg(long)]
        t_final: Option<f64>,
    },
    /// Graded corner-domain ladder with an ungraded control
    Lshape {
        #[command(flatten)]
        common: CommonArgs,
        /// Grading exponent of the study ladder
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        t_final: Option<f64>,
        /// Skip the ungraded control ladder
        #[arg(long)]
        skip_control: bool,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) => 1,
                _ => 2,
            })
        }
    }
}

/// Loads the config (or defaults) and creates the output directory. File
/// problems surface as config errors: they are invocation mistakes, not
/// experiment failures.
fn setup(common: &CommonArgs) -> Result<HarnessConfig> {
    let cfg = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                Error::Config(format!("cannot read config {}: {e}", path.display()))
            })?;
            HarnessConfig::from_toml(&text)?
        }
        None => HarnessConfig::default(),
    };
    std::fs::create_dir_all(&common.out)
        .map_err(|e| Error::Config(format!("cannot create {}: {e}", common.out.display())))?;
    Ok(cfg)
}

fn dispatch(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Converge {
            common,
            nu,
            p,
            h_c,
            t_final,
        } => {
            let mut cfg = setup(&common)?;
            if let Some(v) = nu {
                cfg.converge.nu = v;
            }
            if !p.is_empty() {
                cfg.converge.p = p;
            }
            if !h_c.is_empty() {
                cfg.converge.h_c = h_c;
            }
            if let Some(v) = t_final {
                cfg.converge.t_final = v;
            }
            cfg.validate()?;
            let t = Instant::now();
            let rep = convergence_study(&cfg.converge, Some(&common.out))?;
            let extras = vec![
                ("levels".into(), json!(cfg.converge.h_c.len())),
                ("stage_counts".into(), json!(cfg.converge.p)),
                ("t_run".into(), json!(rep.t_run)),
            ];
            write_manifest(
                &common.out,
                "converge",
                &cfg.echo_section("converge"),
                t.elapsed().as_secs_f64(),
                &extras,
            )?;
            println!(
                "converge: {} levels x {} stage counts to t = {:.4}; artifacts in {}",
                cfg.converge.h_c.len(),
                cfg.converge.p.len(),
                rep.t_run,
                common.out.display()
            );
        }
        Cmd::Energy {
            common,
            nu,
            p,
            h_c,
            t_final,
        } => {
            let mut cfg = setup(&common)?;
            if let Some(v) = nu {
                cfg.energy.nu = v;
            }
            if let Some(v) = p {
                cfg.energy.p = v;
            }
            if let Some(v) = h_c {
                cfg.energy.h_c = v;
            }
            if let Some(v) = t_final {
                cfg.energy.t_final = v;
            }
            cfg.validate()?;
            let t = Instant::now();
            let rep = energy_trace(&cfg.energy, Some(&common.out))?;
            let extras = vec![
                ("n_steps".into(), json!(rep.n_steps)),
                ("dt".into(), json!(rep.dt)),
                ("max_rel_dev".into(), json!(rep.max_rel_dev)),
            ];
            write_manifest(
                &common.out,
                "energy",
                &cfg.echo_section("energy"),
                t.elapsed().as_secs_f64(),
                &extras,
            )?;
            println!(
                "energy: {} steps, max |E/E_first - 1| = {:.3e}; artifacts in {}",
                rep.n_steps,
                rep.max_rel_dev,
                common.out.display()
            );
        }
        Cmd::Spectrum { common, nu, p, h_c } => {
            let mut cfg = setup(&common)?;
            if let Some(v) = nu {
                cfg.spectrum.nu = v;
                if v != 0.0 {
                    cfg.spectrum.scan_critical = false;
                }
            }
            if let Some(v) = p {
                cfg.spectrum.p = v;
            }
            if let Some(v) = h_c {
                cfg.spectrum.h_c = v;
            }
            cfg.validate()?;
            let t = Instant::now();
            let rep = spectrum_experiment(&cfg.spectrum, Some(&common.out))?;
            let extras = vec![
                ("n_dofs".into(), json!(rep.n_dofs)),
                ("grid_points".into(), json!(rep.grid_points)),
                ("critical_points".into(), json!(rep.critical.len())),
            ];
            write_manifest(
                &common.out,
                "spectrum",
                &cfg.echo_section("spectrum"),
                t.elapsed().as_secs_f64(),
                &extras,
            )?;
            println!(
                "spectrum: {} DoFs over {} step-grid points, {} boundary tangencies; artifacts in {}",
                rep.n_dofs,
                rep.grid_points,
                rep.critical.len(),
                common.out.display()
            );
        }
        Cmd::CflTable { common, nu, p, h_c } => {
            let mut cfg = setup(&common)?;
            if !nu.is_empty() {
                cfg.cfl_table.nu = nu;
            }
            if let Some(v) = p {
                cfg.cfl_table.p = v;
            }
            if let Some(v) = h_c {
                cfg.cfl_table.h_c = v;
            }
            cfg.validate()?;
            let t = Instant::now();
            let rep = cfl_table(&cfg.cfl_table, Some(&common.out))?;
            let rows: Vec<serde_json::Value> = rep
                .rows
                .iter()
                .map(|r| json!({ "nu": r.nu, "ratio_pct": r.ratio_pct, "min_margin": r.min_margin }))
                .collect();
            let mut extras = vec![
                ("matrix_free".into(), json!(rep.matrix_free)),
                ("rows".into(), json!(rows)),
            ];
            if rep.matrix_free {
                extras.push((
                    "expected_runtime".into(),
                    json!("minutes: matrix-free Lanczos per step sample, coarsened margin scan"),
                ));
            }
            write_manifest(
                &common.out,
                "cfl-table",
                &cfg.echo_section("cfl-table"),
                t.elapsed().as_secs_f64(),
                &extras,
            )?;
            for r in &rep.rows {
                println!(
                    "cfl-table: nu = {:<6} dt_max/dt_opt = {:6.2}%  min_margin = {:.6}",
                    r.nu, r.ratio_pct, r.min_margin
                );
            }
            println!("cfl-table: artifacts in {}", common.out.display());
        }
        Cmd::Instability {
            common,
            nu,
            p,
            h_c,
            t_final,
        } => {
            let mut cfg = setup(&common)?;
            if let Some(v) = nu {
                cfg.instability.nu_stab = v;
            }
            if let Some(v) = p {
                cfg.instability.p = v;
            }
            if let Some(v) = h_c {
                cfg.instability.h_c = v;
            }
            if let Some(v) = t_final {
                cfg.instability.t_final = v;
            }
            cfg.validate()?;
            let t = Instant::now();
            let rep = instability_demo(&cfg.instability, Some(&common.out))?;
            // Every trace starts from the same critical eigenvector; the
            // checksum in the manifest is the proof.
            let extras = vec![
                ("u0_checksum".into(), json!(rep.u0_checksum)),
                ("dt_onset_over_hc".into(), json!(rep.dt_onset_over_hc)),
                ("growth_undamped".into(), json!(rep.growth_undamped)),
                ("fit_r2".into(), json!(rep.fit_r2)),
                ("ratio_damped".into(), json!(rep.ratio_damped)),
            ];
            write_manifest(
                &common.out,
                "instability",
                &cfg.echo_section("instability"),
                t.elapsed().as_secs_f64(),
                &extras,
            )?;
            println!(
                "instability: onset at {:.6} h_c; undamped x{:.1}, damped x{:.2}; artifacts in {}",
                rep.dt_onset_over_hc,
                rep.growth_undamped,
                rep.ratio_damped,
                common.out.display()
            );
        }
        Cmd::Lshape {
            common,
            beta,
            t_final,
            skip_control,
        } => {
            let mut cfg = setup(&common)?;
            if let Some(v) = beta {
                cfg.lshape.beta = v;
            }
            if let Some(v) = t_final {
                cfg.lshape.t_final = v;
            }
            if skip_control {
                cfg.lshape.run_control = false;
            }
            cfg.validate()?;
            let t = Instant::now();
            let rep = lshape_study(&cfg.lshape, Some(&common.out))?;
            let mut extras = vec![
                (
                    "dt_rule".into(),
                    json!(format!(
                        "per level: dt = t_final / ceil(t_final / ({} * dt_max))",
                        cfg.lshape.dt_safety
                    )),
                ),
                ("reference_dofs".into(), json!(rep.reference_dofs)),
                ("reference_stages".into(), json!(rep.reference_p)),
                ("graded_ls_l2_rate".into(), json!(rep.graded_ls_l2_rate)),
            ];
            if let Some(gap) = rep.rate_gap {
                extras.push(("rate_gap".into(), json!(gap)));
            }
            write_manifest(
                &common.out,
                "lshape",
                &cfg.echo_section("lshape"),
                t.elapsed().as_secs_f64(),
                &extras,
            )?;
            println!(
                "lshape: {} graded levels, fitted L2 rate {:.3}{}; artifacts in {}",
                rep.graded.len(),
                rep.graded_ls_l2_rate,
                match rep.rate_gap {
                    Some(g) => format!(", gap over control {g:.3}"),
                    None => String::new(),
                },
                common.out.display()
            );
        }
    }
    Ok(())
}
