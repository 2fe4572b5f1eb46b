//! The experiment drivers: convergence ladders, energy traces, spectrum
//! sweeps, the maximal-step table, the instability contrast and the L-shape
//! study.
//!
//! Every driver validates its config section, computes a typed report, and
//! writes CSV artifacts only when an output directory is supplied. Fan-out
//! over independent levels or damping values goes through the bounded worker
//! pool in [`super::io`].

use std::collections::HashMap;
use std::f64::consts::PI;
use std::path::Path;

use crate::cheb::StabParams;
use crate::error::{Error, Result};
use crate::fem::{
    assemble, error_norms, interpolate, to_vertex_vector, LumpedSystem, Reference,
};
use crate::lts::{discrete_energy, run_with, StartScheme, WaveState};
use crate::mesh::{
    build_interval_mesh, build_lshape_graded, mesh_stats, partition_dofs, Mesh,
};
use crate::spectral::{
    critical_dt_scan, dense_as, eigs_t_sorted, max_stable_dt, spectrum_sweep, ScanSettings,
    StabilizedOperator, DEFAULT_DENSE_CAP,
};

use super::config::{
    CflTableCfg, ConvergeCfg, DtRule, EnergyCfg, InstabilityCfg, LshapeCfg, ReferenceRule,
    SpectrumCfg,
};
use super::io::{self, Cell};
use super::oracle::{elliptic_solve, reference_semidiscrete};

/// The standard initial pulse: a Gaussian centered in the domain, effectively
/// zero at the boundary (mismatch ~ `exp(-100)`).
pub fn gaussian_pulse(x: f64) -> f64 {
    (-400.0 * (x - 0.5) * (x - 0.5)).exp()
}

/// Sine coefficient of the pulse's odd periodic extension; even modes vanish
/// by symmetry.
fn gaussian_sine_coeff(m: usize) -> f64 {
    let sign = match m % 4 {
        1 => 1.0,
        3 => -1.0,
        _ => return 0.0,
    };
    let mpi = m as f64 * PI;
    2.0 * (PI / 400.0).sqrt() * (-mpi * mpi / 1600.0).exp() * sign
}

/// Closed-form solution of the continuum wave equation for the pulse with
/// zero initial velocity, truncated after `terms` modes.
pub fn gaussian_series(x: f64, t: f64, terms: usize) -> f64 {
    let mut s = 0.0;
    for m in (1..=terms).step_by(2) {
        let a = gaussian_sine_coeff(m);
        if a == 0.0 {
            continue;
        }
        let mpi = m as f64 * PI;
        s += a * (mpi * t).cos() * (mpi * x).sin();
    }
    s
}

/// Spatial derivative of [`gaussian_series`].
pub fn gaussian_series_dx(x: f64, t: f64, terms: usize) -> f64 {
    let mut s = 0.0;
    for m in (1..=terms).step_by(2) {
        let a = gaussian_sine_coeff(m);
        if a == 0.0 {
            continue;
        }
        let mpi = m as f64 * PI;
        s += a * (mpi * t).cos() * mpi * (mpi * x).cos();
    }
    s
}

fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| a + (b - a) * i as f64 / (n - 1).max(1) as f64)
        .collect()
}

/// Leapfrog optimum `2 / sqrt(lambda_max)` of the uniform mesh at spacing
/// `h_c`; the normalization used throughout.
pub fn uniform_dt_opt(h_c: f64, speed: f64) -> Result<f64> {
    let mesh = build_interval_mesh(h_c, 0.0, 0.0, 1, speed)?;
    let sys = assemble(&mesh)?;
    let (eigs, _) = eigs_t_sorted(&sys, &dense_as(&sys));
    Ok(2.0 / eigs[eigs.len() - 1].sqrt())
}

fn dt_from_rule(rule: DtRule, dt_value: f64, nu: f64, h_c: f64) -> Result<f64> {
    match rule {
        DtRule::ExpNuTimesHc => Ok((-nu).exp() * h_c),
        DtRule::Absolute => Ok(dt_value),
        DtRule::FactorOfDtOpt => Ok(dt_value * uniform_dt_opt(h_c, 1.0)?),
        DtRule::Critical => Err(Error::Config(
            "the critical rule needs a scan window; handled by the convergence driver".into(),
        )),
    }
}

/// Per-pair observed order: `ln(e_prev/e_cur) / ln(h_prev/h_cur)`. Only the
/// error ratio enters, so rescaling all errors leaves it unchanged.
fn pair_rate(e_prev: f64, e_cur: f64, h_prev: f64, h_cur: f64) -> f64 {
    (e_prev / e_cur).ln() / (h_prev / h_cur).ln()
}

/// Least-squares slope of `ln e` against `ln h` over a whole ladder.
fn ls_rate(hs: &[f64], errs: &[f64]) -> f64 {
    let n = hs.len() as f64;
    let xs: Vec<f64> = hs.iter().map(|h| h.ln()).collect();
    let ys: Vec<f64> = errs.iter().map(|e| e.ln()).collect();
    let xm = xs.iter().sum::<f64>() / n;
    let ym = ys.iter().sum::<f64>() / n;
    let num: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - xm) * (y - ym)).sum();
    let den: f64 = xs.iter().map(|x| (x - xm) * (x - xm)).sum();
    num / den
}

// ---------------------------------------------------------------------------
// Convergence study
// ---------------------------------------------------------------------------

/// One ladder level of a convergence run.
#[derive(Debug, Clone)]
pub struct ConvergenceRow {
    pub h: f64,
    pub dofs: usize,
    pub dt: f64,
    pub l2_error: f64,
    pub h1_error: f64,
    /// Observed order against the previous row; NaN on the first row.
    pub observed_rate: f64,
}

#[derive(Debug, Clone)]
pub struct ConvergenceReport {
    pub nu: f64,
    /// Final time actually integrated to (a whole number of coarsest-level
    /// steps near the configured horizon).
    pub t_run: f64,
    pub per_p: Vec<(u32, Vec<ConvergenceRow>)>,
}

struct LevelOutcome {
    h: f64,
    dofs: usize,
    dt: f64,
    l2: f64,
    h1: f64,
    snapshot: Option<(Vec<f64>, f64)>,
}

pub fn convergence_study(cfg: &ConvergeCfg, out: Option<&Path>) -> Result<ConvergenceReport> {
    cfg.validate()?;
    let level_mesh = |h: f64, p: u32| -> Result<Mesh> {
        let lo = cfg.fine_lo - cfg.fine_overlap_elements as f64 * h;
        if lo < 0.0 {
            return Err(Error::Config(format!(
                "fine overlap pushes the refined region below 0 at h = {h}"
            )));
        }
        build_interval_mesh(h, lo, cfg.fine_hi, p, 1.0)
    };
    let level_dt = |h: f64, p: u32| -> Result<f64> {
        if cfg.dt_rule == DtRule::Critical {
            let mesh = level_mesh(h, p)?;
            let grid = linspace(cfg.crit_lo_over_hc * h, cfg.crit_hi_over_hc * h, cfg.crit_points);
            let points = critical_dt_scan(&mesh, p, &grid, &ScanSettings::default())?;
            points
                .iter()
                .find(|c| c.upper)
                .map(|c| c.dt)
                .ok_or(Error::NoConvergence {
                    what: "critical-step search in the scan window",
                    iters: 0,
                })
        } else {
            dt_from_rule(cfg.dt_rule, cfg.dt_value, cfg.nu, h)
        }
    };

    // A whole number of coarsest-level steps covering the horizon; with the
    // default halving ladder and step rule every level then ends at the
    // identical time.
    let dt0 = level_dt(cfg.h_c[0], cfg.p[0])?;
    let t_run = (cfg.t_final / dt0).ceil() * dt0;

    let snapshot_task = (0, cfg.h_c.len() - 1);
    let mut tasks = Vec::new();
    for (pi, &p) in cfg.p.iter().enumerate() {
        for (li, &h) in cfg.h_c.iter().enumerate() {
            tasks.push((pi, li, p, h));
        }
    }
    let results: Vec<Result<(usize, usize, LevelOutcome)>> =
        io::parallel_map(tasks, |(pi, li, p, h)| {
            let mesh = level_mesh(h, p)?;
            let sys = assemble(&mesh)?;
            let params = StabParams::new(p, cfg.nu)?;
            let dt = level_dt(h, p)?;
            let u0 = interpolate(&mesh, |x| gaussian_pulse(x[0]));
            let v0 = vec![0.0; sys.n_dofs()];
            let state = run_with(&sys, &params, dt, t_run, &u0, &v0, StartScheme::Plain, |_| {})?;
            let t_end = state.time();

            let (l2, h1) = match cfg.reference {
                ReferenceRule::Analytic => {
                    let terms = cfg.series_terms;
                    let value = move |x: &[f64]| gaussian_series(x[0], t_end, terms);
                    let gradient =
                        move |x: &[f64]| [gaussian_series_dx(x[0], t_end, terms), 0.0];
                    error_norms(
                        &mesh,
                        &state.u_cur,
                        &Reference::Analytic {
                            value: &value,
                            gradient: &gradient,
                        },
                    )?
                }
                ReferenceRule::Semidiscrete => {
                    let fine = level_mesh(h / 2.0, p)?;
                    let fine_sys = assemble(&fine)?;
                    let fu0 = interpolate(&fine, |x| gaussian_pulse(x[0]));
                    let fv0 = vec![0.0; fine_sys.n_dofs()];
                    let values = reference_semidiscrete(&fine_sys, &fu0, &fv0, t_end)?;
                    error_norms(
                        &mesh,
                        &state.u_cur,
                        &Reference::FineMesh {
                            mesh: &fine,
                            values: &values,
                        },
                    )?
                }
            };
            let snapshot = if (pi, li) == snapshot_task {
                Some((state.u_cur.clone(), t_end))
            } else {
                None
            };
            Ok((
                pi,
                li,
                LevelOutcome {
                    h,
                    dofs: sys.n_dofs(),
                    dt,
                    l2,
                    h1,
                    snapshot,
                },
            ))
        });

    let mut grid: Vec<Vec<Option<LevelOutcome>>> = cfg
        .p
        .iter()
        .map(|_| cfg.h_c.iter().map(|_| None).collect())
        .collect();
    let mut snapshot = None;
    for r in results {
        let (pi, li, mut outcome) = r?;
        if let Some(s) = outcome.snapshot.take() {
            snapshot = Some(s);
        }
        grid[pi][li] = Some(outcome);
    }

    let mut per_p = Vec::new();
    for (pi, &p) in cfg.p.iter().enumerate() {
        let mut rows: Vec<ConvergenceRow> = Vec::new();
        for li in 0..cfg.h_c.len() {
            let o = grid[pi][li].take().expect("every task reported");
            let observed_rate = if li == 0 {
                f64::NAN
            } else {
                let prev = &rows[li - 1];
                pair_rate(prev.l2_error, o.l2, prev.h, o.h)
            };
            rows.push(ConvergenceRow {
                h: o.h,
                dofs: o.dofs,
                dt: o.dt,
                l2_error: o.l2,
                h1_error: o.h1,
                observed_rate,
            });
        }
        per_p.push((p, rows));
    }

    if let Some(dir) = out {
        let comments = vec![format!("converge: {}", summary_line(cfg))];
        let mut rows = Vec::new();
        for (p, level_rows) in &per_p {
            for r in level_rows {
                rows.push(vec![
                    Cell::from(*p),
                    Cell::from(r.h),
                    Cell::from(r.dofs),
                    Cell::from(r.dt),
                    Cell::from(r.l2_error),
                    Cell::from(r.h1_error),
                    Cell::from(r.observed_rate),
                ]);
            }
        }
        io::write_csv(
            &dir.join("converge.csv"),
            &comments,
            "p,h,dofs,dt,l2_error,h1_error,observed_rate",
            rows,
        )?;
        if let Some((u, t_end)) = snapshot {
            let p = cfg.p[0];
            let h = *cfg.h_c.last().unwrap();
            let mesh = level_mesh(h, p)?;
            let part = partition_dofs(&mesh);
            io::write_snapshot(&dir.join("snapshot.csv"), &mesh, &part, &u, t_end, &comments)?;
        }
    }

    Ok(ConvergenceReport {
        nu: cfg.nu,
        t_run,
        per_p,
    })
}

fn summary_line(cfg: &impl serde::Serialize) -> String {
    toml::to_string(cfg)
        .unwrap_or_default()
        .lines()
        .collect::<Vec<_>>()
        .join("; ")
}

// ---------------------------------------------------------------------------
// Energy trace
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct EnergyReport {
    pub dt: f64,
    pub n_steps: u64,
    /// `(step, t, E, rel_dev)`.
    pub rows: Vec<(u64, f64, f64, f64)>,
    pub e_first: f64,
    pub max_rel_dev: f64,
}

pub fn energy_trace(cfg: &EnergyCfg, out: Option<&Path>) -> Result<EnergyReport> {
    cfg.validate()?;
    let mesh = build_interval_mesh(cfg.h_c, cfg.fine_lo, cfg.fine_hi, cfg.p, 1.0)?;
    let sys = assemble(&mesh)?;
    let params = StabParams::new(cfg.p, cfg.nu)?;
    let dt = dt_from_rule(cfg.dt_rule, cfg.dt_value, cfg.nu, cfg.h_c)?;
    let n_steps = (cfg.t_final / dt).round() as u64;
    let u0 = interpolate(&mesh, |x| gaussian_pulse(x[0]));
    let v0 = vec![0.0; sys.n_dofs()];

    let mut samples: Vec<(u64, f64, f64)> = Vec::new();
    let mut sample_err = None;
    run_with(&sys, &params, dt, cfg.t_final, &u0, &v0, StartScheme::Plain, |state| {
        let due = state.step <= cfg.stride_threshold
            || state.step % 10 == 0
            || state.step == n_steps;
        if due && sample_err.is_none() {
            match discrete_energy(&sys, &params, dt, state) {
                Ok(e) => samples.push((state.step, state.time(), e.value)),
                Err(e) => sample_err = Some(e),
            }
        }
    })?;
    if let Some(e) = sample_err {
        return Err(e);
    }

    let e_first = samples.first().map(|s| s.2).unwrap_or(0.0);
    let rows: Vec<(u64, f64, f64, f64)> = samples
        .into_iter()
        .map(|(step, t, e)| {
            let rel_dev = if e_first != 0.0 {
                (e / e_first - 1.0).abs()
            } else {
                // Zero initial energy: deviations are reported absolutely,
                // which for zero data stays exactly zero.
                (e - e_first).abs()
            };
            (step, t, e, rel_dev)
        })
        .collect();
    let max_rel_dev = rows.iter().map(|r| r.3).fold(0.0f64, f64::max);

    if let Some(dir) = out {
        let comments = vec![format!("energy: {}", summary_line(cfg))];
        io::write_csv(
            &dir.join("energy.csv"),
            &comments,
            "step,t,E,rel_dev",
            rows.iter().map(|&(s, t, e, d)| {
                vec![Cell::from(s), Cell::from(t), Cell::from(e), Cell::from(d)]
            }),
        )?;
    }

    Ok(EnergyReport {
        dt,
        n_steps,
        rows,
        e_first,
        max_rel_dev,
    })
}

// ---------------------------------------------------------------------------
// Spectrum sweep
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SpectrumReport {
    pub n_dofs: usize,
    pub grid_points: usize,
    /// `(dt, dt/h_c, upper_branch)` per located tangency.
    pub critical: Vec<(f64, f64, bool)>,
}

pub fn spectrum_experiment(cfg: &SpectrumCfg, out: Option<&Path>) -> Result<SpectrumReport> {
    cfg.validate()?;
    let mesh = build_interval_mesh(cfg.h_c, cfg.fine_lo, cfg.fine_hi, cfg.p, 1.0)?;
    let sys = assemble(&mesh)?;
    let grid = linspace(
        cfg.dt_lo_over_hc * cfg.h_c,
        cfg.dt_hi_over_hc * cfg.h_c,
        cfg.n_points,
    );
    let sweep = spectrum_sweep(&sys, cfg.p, cfg.nu, &grid, DEFAULT_DENSE_CAP)?;

    let critical = if cfg.scan_critical && cfg.nu == 0.0 {
        critical_dt_scan(&mesh, cfg.p, &grid, &ScanSettings::default())?
            .into_iter()
            .map(|c| (c.dt, c.dt / cfg.h_c, c.upper))
            .collect()
    } else {
        Vec::new()
    };

    if let Some(dir) = out {
        let comments = vec![format!("spectrum: {}", summary_line(cfg))];
        let mut rows = Vec::new();
        for (dt, eigs) in &sweep {
            for (k, &val) in eigs.iter().enumerate() {
                rows.push(vec![
                    Cell::from(dt / cfg.h_c),
                    Cell::from(k),
                    Cell::from(val),
                ]);
            }
        }
        io::write_csv(
            &dir.join("spectrum.csv"),
            &comments,
            "dt_over_hc,eig_index,value",
            rows,
        )?;
        io::write_csv(
            &dir.join("critical.csv"),
            &comments,
            "dt_crit,dt_crit_over_hc",
            critical
                .iter()
                .map(|&(dt, r, _)| vec![Cell::from(dt), Cell::from(r)]),
        )?;
    }

    Ok(SpectrumReport {
        n_dofs: sys.n_dofs(),
        grid_points: grid.len(),
        critical,
    })
}

// ---------------------------------------------------------------------------
// Maximal-step table
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct CflRow {
    pub nu: f64,
    pub dt_max: f64,
    pub dt_opt: f64,
    pub ratio_pct: f64,
    pub min_margin: f64,
    /// Top eigenvalue of `Pi_f A^S Pi_f` backing the lower-spectrum
    /// positivity certificate on matrix-free scans; `None` on dense scans.
    pub fine_top: Option<f64>,
    /// Smallest stabilized eigenvalue at `dt_max`; only materialized on the
    /// dense path. Matrix-free runs certify positivity from `fine_top` and
    /// the first zero of the damped polynomial (`nu > 0`).
    pub lambda_min: Option<f64>,
    pub lambda_max: f64,
}

#[derive(Debug, Clone)]
pub struct CflReport {
    pub p: u32,
    pub h_c: f64,
    pub matrix_free: bool,
    pub rows: Vec<CflRow>,
}

pub fn cfl_table(cfg: &CflTableCfg, out: Option<&Path>) -> Result<CflReport> {
    cfg.validate()?;
    let mesh = build_interval_mesh(cfg.h_c, cfg.fine_lo, cfg.fine_hi, cfg.p, 1.0)?;
    let n_free = partition_dofs(&mesh).n_free();
    let matrix_free = n_free > DEFAULT_DENSE_CAP;

    let results: Vec<Result<CflRow>> = io::parallel_map(cfg.nu.clone(), |nu| {
        if matrix_free && nu == 0.0 {
            return Err(Error::Config(
                "above the dense cap the positive-spectrum check needs nu > 0".into(),
            ));
        }
        let settings = ScanSettings {
            dense_cap: DEFAULT_DENSE_CAP,
            eig_tol: cfg.eig_tol,
            bracket: (0.5, 1.2),
            bisect_iters: 50,
            margin_grid: cfg.margin_points_effective(),
        };
        let rep = max_stable_dt(&mesh, cfg.p, nu, &settings)?;
        let (lambda_min, lambda_max) = if matrix_free {
            // The margin scan already sampled dt_max last.
            let lmax = match rep.margin_profile.last() {
                Some(&(dt, norm_top)) => 4.0 * norm_top / (dt * dt),
                None => {
                    let sys = assemble(&mesh)?;
                    let params = StabParams::new(cfg.p, nu)?;
                    let op = StabilizedOperator::new(&sys, params, rep.dt_max)?;
                    op.lambda_max_lanczos(cfg.eig_tol, None)?.0
                }
            };
            (None, lmax)
        } else {
            let sys = assemble(&mesh)?;
            let params = StabParams::new(cfg.p, nu)?;
            let op = StabilizedOperator::new(&sys, params, rep.dt_max)?;
            let (lmin, lmax) = op.extreme_eigs(cfg.eig_tol)?;
            (Some(lmin), lmax)
        };
        Ok(CflRow {
            nu,
            dt_max: rep.dt_max,
            dt_opt: rep.dt_opt,
            ratio_pct: rep.ratio_pct,
            min_margin: rep.min_margin,
            fine_top: rep.fine_top,
            lambda_min,
            lambda_max,
        })
    });
    let rows: Vec<CflRow> = results.into_iter().collect::<Result<_>>()?;

    if let Some(dir) = out {
        let comments = vec![format!("cfl_table: {}", summary_line(cfg))];
        io::write_csv(
            &dir.join("stability.csv"),
            &comments,
            "nu,dt_max,dt_opt,ratio_pct,min_margin",
            rows.iter().map(|r| {
                vec![
                    Cell::from(r.nu),
                    Cell::from(r.dt_max),
                    Cell::from(r.dt_opt),
                    Cell::from(r.ratio_pct),
                    Cell::from(r.min_margin),
                ]
            }),
        )?;
    }

    Ok(CflReport {
        p: cfg.p,
        h_c: cfg.h_c,
        matrix_free,
        rows,
    })
}

// ---------------------------------------------------------------------------
// Instability contrast
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct InstabilityReport {
    /// Left edge of the first instability bubble: the onset step the demo
    /// runs at, where the boundary eigenvalue sits exactly on the stability
    /// boundary (double root, linear growth).
    pub dt_onset: f64,
    pub dt_onset_over_hc: f64,
    /// Extremum inside the bubble, the headline critical step.
    pub peak_dt_over_hc: Option<f64>,
    /// `max_t ||u||_inf / ||u0||_inf` of the undamped run.
    pub growth_undamped: f64,
    pub fit_slope: f64,
    pub fit_r2: f64,
    pub ratio_damped: f64,
    pub ratio_stab_start: f64,
    pub ratio_minus: f64,
    pub ratio_plus: f64,
    pub u0_checksum: String,
    /// `(name, samples)` per trace.
    pub traces: Vec<(String, TraceSamples)>,
}

/// Sup-norm history of one run: `(t, ||u||_inf)` per sample.
pub type TraceSamples = Vec<(f64, f64)>;

pub fn instability_demo(cfg: &InstabilityCfg, out: Option<&Path>) -> Result<InstabilityReport> {
    cfg.validate()?;
    let mesh = build_interval_mesh(cfg.h_c, cfg.fine_lo, cfg.fine_hi, cfg.p, 1.0)?;
    let sys = assemble(&mesh)?;
    let n = sys.n_dofs();
    if n > DEFAULT_DENSE_CAP {
        return Err(Error::DenseCap {
            n,
            cap: DEFAULT_DENSE_CAP,
        });
    }
    let params0 = StabParams::new(cfg.p, 0.0)?;

    // Normalized top eigenvalue as a function of dt.
    let y_top = |dt: f64| -> Result<f64> {
        let op = StabilizedOperator::new(&sys, params0.clone(), dt)?;
        let a = op.dense_stabilized(DEFAULT_DENSE_CAP)?;
        let (eigs, _) = eigs_t_sorted(&sys, &a);
        Ok(dt * dt * eigs[n - 1] / 4.0)
    };

    let grid = linspace(
        cfg.scan_lo_over_hc * cfg.h_c,
        cfg.scan_hi_over_hc * cfg.h_c,
        cfg.scan_points,
    );
    let mut first_inside = None;
    for (i, &dt) in grid.iter().enumerate() {
        if y_top(dt)? > 1.0 {
            first_inside = Some(i);
            break;
        }
    }
    let i = first_inside.ok_or(Error::NoConvergence {
        what: "instability-bubble search in the scan window",
        iters: 0,
    })?;
    if i == 0 {
        return Err(Error::Config(
            "scan window starts inside the instability bubble; lower scan_lo_over_hc".into(),
        ));
    }
    let (mut lo, mut hi) = (grid[i - 1], grid[i]);
    for _ in 0..70 {
        let mid = 0.5 * (lo + hi);
        if y_top(mid)? > 1.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let dt_onset = 0.5 * (lo + hi);

    let peak_dt_over_hc = critical_dt_scan(&mesh, cfg.p, &grid, &ScanSettings::default())?
        .into_iter()
        .find(|c| c.upper)
        .map(|c| c.dt / cfg.h_c);

    // Touching eigenvector at the onset, sup-normalized (the eigensolver
    // already fixes the sign).
    let op = StabilizedOperator::new(&sys, params0.clone(), dt_onset)?;
    let a = op.dense_stabilized(DEFAULT_DENSE_CAP)?;
    let (_, vecs) = eigs_t_sorted(&sys, &a);
    let mut u0: Vec<f64> = (0..n).map(|i| vecs[(i, n - 1)]).collect();
    let sup = u0.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    for x in &mut u0 {
        *x /= sup;
    }
    let v0 = vec![0.0; n];
    let u0_checksum = io::checksum_f64(&u0);

    let trace = |nu: f64, dt: f64, scheme: StartScheme| -> Result<TraceSamples> {
        let params = StabParams::new(cfg.p, nu)?;
        let n_steps = (cfg.t_final / dt).round() as u64;
        let mut samples = Vec::new();
        run_with(&sys, &params, dt, cfg.t_final, &u0, &v0, scheme, |state: &WaveState| {
            if state.step.is_multiple_of(cfg.sample_stride) || state.step == 1 || state.step == n_steps {
                let sup = state.u_cur.iter().fold(0.0f64, |m, x| m.max(x.abs()));
                samples.push((state.time(), sup));
            }
        })?;
        Ok(samples)
    };

    let dt_minus = dt_onset * (1.0 - cfg.perturb_rel);
    let dt_plus = dt_onset * (1.0 + cfg.perturb_rel);
    let runs: Vec<(String, f64, f64, StartScheme)> = vec![
        ("nu_zero".into(), 0.0, dt_onset, StartScheme::Plain),
        ("nu_stab".into(), cfg.nu_stab, dt_onset, StartScheme::Plain),
        ("stab_start".into(), 0.0, dt_onset, StartScheme::Stabilized),
        ("minus_1pct".into(), 0.0, dt_minus, StartScheme::Plain),
        ("plus_1pct".into(), 0.0, dt_plus, StartScheme::Plain),
    ];
    let traced: Vec<Result<(String, TraceSamples)>> =
        io::parallel_map(runs, |(name, nu, dt, scheme)| {
            Ok((name, trace(nu, dt, scheme)?))
        });
    let traces: Vec<(String, TraceSamples)> = traced.into_iter().collect::<Result<_>>()?;

    // All ratios are against the initial sup-norm, which is 1 by
    // construction.
    let max_of = |name: &str| -> f64 {
        traces
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, s)| s.iter().map(|&(_, y)| y).fold(0.0f64, f64::max))
            .unwrap_or(f64::NAN)
    };
    let growth_undamped = max_of("nu_zero");
    let ratio_damped = max_of("nu_stab");
    let ratio_stab_start = max_of("stab_start");
    let ratio_minus = max_of("minus_1pct");
    let ratio_plus = max_of("plus_1pct");

    let fit_samples: Vec<(f64, f64)> = traces
        .iter()
        .find(|(n, _)| n == "nu_zero")
        .map(|(_, s)| {
            s.iter()
                .copied()
                .filter(|&(t, _)| t >= cfg.fit_t_min)
                .collect()
        })
        .unwrap_or_default();
    let (fit_slope, fit_r2) = fit_through_origin(&fit_samples);

    if let Some(dir) = out {
        let comments = vec![format!("instability: {}", summary_line(cfg))];
        let mut rows = Vec::new();
        for (name, samples) in &traces {
            for &(t, y) in samples {
                rows.push(vec![
                    Cell::from(name.as_str()),
                    Cell::from(t),
                    Cell::from(y),
                ]);
            }
        }
        io::write_csv(&dir.join("instability.csv"), &comments, "trace,t,sup_norm", rows)?;
    }

    Ok(InstabilityReport {
        dt_onset,
        dt_onset_over_hc: dt_onset / cfg.h_c,
        peak_dt_over_hc,
        growth_undamped,
        fit_slope,
        fit_r2,
        ratio_damped,
        ratio_stab_start,
        ratio_minus,
        ratio_plus,
        u0_checksum,
        traces,
    })
}

/// Least-squares fit of `y = c t` plus the coefficient of determination
/// against the through-origin model.
fn fit_through_origin(samples: &[(f64, f64)]) -> (f64, f64) {
    if samples.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let st2: f64 = samples.iter().map(|&(t, _)| t * t).sum();
    let sty: f64 = samples.iter().map(|&(t, y)| t * y).sum();
    let c = sty / st2;
    let ym = samples.iter().map(|&(_, y)| y).sum::<f64>() / samples.len() as f64;
    let ss_res: f64 = samples.iter().map(|&(t, y)| (y - c * t) * (y - c * t)).sum();
    let ss_tot: f64 = samples.iter().map(|&(_, y)| (y - ym) * (y - ym)).sum();
    (c, 1.0 - ss_res / ss_tot)
}

// ---------------------------------------------------------------------------
// L-shape study
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct LshapeLadderRow {
    pub n: usize,
    pub dofs: usize,
    pub p: u32,
    /// Largest element diameter; rates are measured against it.
    pub h_max: f64,
    pub dt: f64,
    pub l2_error: f64,
    pub h1_error: f64,
    /// Rates against the previous level; NaN on the first row.
    pub l2_rate: f64,
    pub h1_rate: f64,
}

#[derive(Debug, Clone)]
pub struct LshapeReport {
    pub graded: Vec<LshapeLadderRow>,
    pub control: Option<Vec<LshapeLadderRow>>,
    pub graded_ls_l2_rate: f64,
    pub control_ls_l2_rate: Option<f64>,
    /// Graded minus control least-squares L2 rate.
    pub rate_gap: Option<f64>,
    pub reference_dofs: usize,
    pub reference_p: u32,
}

/// Substep count from the coarse/fine size contrast of a mesh.
fn p_for_mesh(mesh: &Mesh) -> u32 {
    let stats = mesh_stats(mesh);
    let ratio = stats.ratio_p_bound;
    (ratio - 1e-9).ceil().max(1.0) as u32
}

fn lshape_mesh(n: usize, beta: f64) -> Result<Mesh> {
    let mut mesh = build_lshape_graded(n as u32, beta)?;
    if beta > 1.0 {
        // Refined region: the innermost rings, radius threshold at ring
        // floor(sqrt(n)) with headroom for roundoff.
        let rings = (n as f64).sqrt().floor();
        let r = 0.5 * (rings / n as f64).powf(beta) * (1.0 + 1e-9);
        mesh.mark_fine_where(|v| (v[0] - 0.5).abs().max((v[1] - 0.5).abs()) <= r);
    }
    Ok(mesh)
}

/// Maximal stable step of the stabilized operator on an assembled system:
/// geometric bracket growth from the plain-leapfrog limit, then bisection,
/// with Lanczos for the top eigenvalue throughout. The lower spectral edge is
/// covered by the damped polynomial's positivity (`nu > 0`) or by `p = 1`
/// degenerating to plain leapfrog.
fn stabilized_dt_max(sys: &LumpedSystem, params: &StabParams, eig_tol: f64) -> Result<f64> {
    let plain = StabParams::new(1, 0.0)?;
    let probe = StabilizedOperator::new(sys, plain, 1.0)?;
    let (lam_plain, v) = probe.lambda_max_lanczos(eig_tol, None)?;
    let mut warm = Some(v);
    let top = |dt: f64, warm: &mut Option<Vec<f64>>| -> Result<f64> {
        let op = StabilizedOperator::new(sys, params.clone(), dt)?;
        let (lam, w) = op.lambda_max_lanczos(eig_tol, warm.as_deref())?;
        *warm = Some(w);
        Ok(lam)
    };
    let stable = |dt: f64, lam: f64| lam.is_finite() && dt * dt * lam <= 4.0 * (1.0 - 1e-12);

    let mut lo = 0.95 * 2.0 / lam_plain.sqrt();
    let mut guard = 0;
    while !stable(lo, top(lo, &mut warm)?) {
        lo *= 0.5;
        guard += 1;
        if guard > 60 {
            return Err(Error::NoConvergence {
                what: "stable lower bracket for the step search",
                iters: guard,
            });
        }
    }
    let mut hi = 2.0 * lo;
    let mut found_unstable = false;
    for _ in 0..40 {
        if stable(hi, top(hi, &mut warm)?) {
            lo = hi;
            hi *= 2.0;
        } else {
            found_unstable = true;
            break;
        }
    }
    if !found_unstable {
        return Err(Error::NoConvergence {
            what: "unstable upper bracket for the step search",
            iters: 40,
        });
    }
    for _ in 0..50 {
        if (hi - lo) <= 1e-6 * hi {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if stable(mid, top(mid, &mut warm)?) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

struct LshapeLevel {
    n: usize,
    dofs: usize,
    p: u32,
    h_max: f64,
    dt: f64,
    l2: f64,
    h1: f64,
}

fn lshape_ladder(cfg: &LshapeCfg, beta: f64) -> Result<(Vec<LshapeLadderRow>, usize, u32)> {
    let ref_mesh = lshape_mesh(cfg.n_reference, beta)?;
    let ref_p = p_for_mesh(&ref_mesh);
    let ref_sys = assemble(&ref_mesh)?;
    let ref_params = StabParams::new(ref_p, cfg.nu)?;

    let w_ref = elliptic_solve(&ref_mesh, cfg.rhs_const)?;
    let ref_part = partition_dofs(&ref_mesh);
    let w_ref_vertex = to_vertex_vector(&ref_mesh, &ref_part, &w_ref);

    let run_to_t = |sys: &LumpedSystem,
                    params: &StabParams,
                    v0: &[f64],
                    eig_tol: f64|
     -> Result<(Vec<f64>, f64)> {
        let dt_max = stabilized_dt_max(sys, params, eig_tol)?;
        let steps = (cfg.t_final / (cfg.dt_safety * dt_max)).ceil().max(1.0);
        let dt = cfg.t_final / steps;
        let u0 = vec![0.0; sys.n_dofs()];
        let state = run_with(sys, params, dt, cfg.t_final, &u0, v0, StartScheme::Plain, |_| {})?;
        Ok((state.u_cur, dt))
    };

    let v0_ref: Vec<f64> = w_ref.iter().map(|&w| -w).collect();
    let (u_ref, _) = run_to_t(&ref_sys, &ref_params, &v0_ref, cfg.eig_tol)?;

    // Bit-exact vertex lookup into the reference mesh; the graded ladders are
    // nested by construction.
    let mut ref_lookup: HashMap<(u64, u64), usize> =
        HashMap::with_capacity(ref_mesh.n_vertices());
    for v in 0..ref_mesh.n_vertices() {
        let x = ref_mesh.vertex(v);
        ref_lookup.insert((x[0].to_bits(), x[1].to_bits()), v);
    }

    let levels: Vec<Result<LshapeLevel>> = io::parallel_map(cfg.n_levels.clone(), |n| {
        let mesh = lshape_mesh(n, beta)?;
        let p = p_for_mesh(&mesh);
        let sys = assemble(&mesh)?;
        let params = StabParams::new(p, cfg.nu)?;
        let part = partition_dofs(&mesh);
        let mut v0 = Vec::with_capacity(sys.n_dofs());
        for &node in &part.free_nodes {
            let x = mesh.vertex(node);
            let key = (x[0].to_bits(), x[1].to_bits());
            let rv = ref_lookup.get(&key).ok_or_else(|| {
                Error::Mesh(format!(
                    "study vertex {x:?} is not a reference-mesh vertex; ladders must be nested"
                ))
            })?;
            v0.push(-w_ref_vertex[*rv]);
        }
        let (u_final, dt) = run_to_t(&sys, &params, &v0, cfg.eig_tol)?;
        let (l2, h1) = error_norms(
            &mesh,
            &u_final,
            &Reference::FineMesh {
                mesh: &ref_mesh,
                values: &u_ref,
            },
        )?;
        Ok(LshapeLevel {
            n,
            dofs: sys.n_dofs(),
            p,
            h_max: mesh_stats(&mesh).h_max,
            dt,
            l2,
            h1,
        })
    });

    let mut rows: Vec<LshapeLadderRow> = Vec::new();
    for lv in levels {
        let lv = lv?;
        let (l2_rate, h1_rate) = match rows.last() {
            None => (f64::NAN, f64::NAN),
            Some(prev) => (
                pair_rate(prev.l2_error, lv.l2, prev.h_max, lv.h_max),
                pair_rate(prev.h1_error, lv.h1, prev.h_max, lv.h_max),
            ),
        };
        rows.push(LshapeLadderRow {
            n: lv.n,
            dofs: lv.dofs,
            p: lv.p,
            h_max: lv.h_max,
            dt: lv.dt,
            l2_error: lv.l2,
            h1_error: lv.h1,
            l2_rate,
            h1_rate,
        });
    }
    Ok((rows, ref_sys.n_dofs(), ref_p))
}

pub fn lshape_study(cfg: &LshapeCfg, out: Option<&Path>) -> Result<LshapeReport> {
    cfg.validate()?;
    let (graded, reference_dofs, reference_p) = lshape_ladder(cfg, cfg.beta)?;
    let control = if cfg.run_control {
        Some(lshape_ladder(cfg, cfg.control_beta)?.0)
    } else {
        None
    };

    let hs: Vec<f64> = graded.iter().map(|r| r.h_max).collect();
    let errs: Vec<f64> = graded.iter().map(|r| r.l2_error).collect();
    let graded_ls_l2_rate = ls_rate(&hs, &errs);
    let control_ls_l2_rate = control.as_ref().map(|rows| {
        let hs: Vec<f64> = rows.iter().map(|r| r.h_max).collect();
        let errs: Vec<f64> = rows.iter().map(|r| r.l2_error).collect();
        ls_rate(&hs, &errs)
    });
    let rate_gap = control_ls_l2_rate.map(|c| graded_ls_l2_rate - c);

    if let Some(dir) = out {
        let comments = vec![format!("lshape: {}", summary_line(cfg))];
        let mut rows = Vec::new();
        let mut push = |beta: f64, ladder: &[LshapeLadderRow]| {
            for r in ladder {
                rows.push(vec![
                    Cell::from(beta),
                    Cell::from(r.n),
                    Cell::from(r.dofs),
                    Cell::from(r.p),
                    Cell::from(r.dt),
                    Cell::from(r.l2_error),
                    Cell::from(r.h1_error),
                    Cell::from(r.l2_rate),
                    Cell::from(r.h1_rate),
                ]);
            }
        };
        push(cfg.beta, &graded);
        if let Some(c) = &control {
            push(cfg.control_beta, c);
        }
        io::write_csv(
            &dir.join("lshape.csv"),
            &comments,
            "beta,n,dofs,p,dt,l2_error,h1_error,l2_rate,h1_rate",
            rows,
        )?;
    }

    Ok(LshapeReport {
        graded,
        control,
        graded_ls_l2_rate,
        control_ls_l2_rate,
        rate_gap,
        reference_dofs,
        reference_p,
    })
}
