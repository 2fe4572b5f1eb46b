//! The stabilized local time-stepping integrator.
//!
//! One step advances the two-level state `(u^{n-1}, u^n)` to
//! `(u^n, u^{n+1})` through `p` inner stages that only touch the refined
//! region, plus a single full matvec on the coarse part:
//!
//! ```text
//! w       = A Pc u^n
//! z_0     = u^n
//! z_1     = z_0 - dt^2/(omega delta) (w + A Pf z_0)
//! z_{k+1} = (1 + beta_k) z_k - beta_k z_{k-1}
//!           - 2 dt^2/omega beta_{k+1/2} (w + A Pf z_k),   k = 1..p-1
//! u^{n+1} = -u^{n-1} + 2 z_p
//! ```
//!
//! with `A = D^{-1} K` and the damped Chebyshev weights of
//! [`StabParams`](crate::cheb::StabParams). Algebraically this is leapfrog
//! applied to the stabilized operator of [`crate::spectral`], which is what
//! the energy functional below is built from.

use crate::cheb::StabParams;
use crate::error::{Error, Result};
use crate::fem::LumpedSystem;
use crate::spectral::{ApplyWork, StabilizedOperator};

/// How the missing second time level is produced from `(u0, v0)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StartScheme {
    /// Second-order Taylor start with the plain operator:
    /// `u^1 = u0 + dt v0 - dt^2/2 A u0`.
    #[default]
    Plain,
    /// Same formula with the stabilized operator in place of `A`. Exact for
    /// eigenvectors of the stabilized operator, which the plain start is not.
    Stabilized,
}

/// Two consecutive time levels of the solution on the free dofs.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveState {
    /// `u^{n-1}`.
    pub u_prev: Vec<f64>,
    /// `u^n`.
    pub u_cur: Vec<f64>,
    /// `n`.
    pub step: u64,
    pub dt: f64,
}

impl WaveState {
    /// Time of the current level, `n dt`.
    pub fn time(&self) -> f64 {
        self.step as f64 * self.dt
    }
}

fn check_dt(dt: f64) -> Result<()> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::InvalidParam(format!("dt must be > 0, got {dt}")));
    }
    Ok(())
}

/// Builds the state `(u^0, u^1)` from initial value and velocity with the
/// default [`StartScheme::Plain`].
pub fn initial_state(
    sys: &LumpedSystem,
    params: &StabParams,
    dt: f64,
    u0: &[f64],
    v0: &[f64],
) -> Result<WaveState> {
    initial_state_with(sys, params, dt, u0, v0, StartScheme::Plain)
}

/// [`initial_state`] with an explicit starting scheme.
pub fn initial_state_with(
    sys: &LumpedSystem,
    params: &StabParams,
    dt: f64,
    u0: &[f64],
    v0: &[f64],
    scheme: StartScheme,
) -> Result<WaveState> {
    check_dt(dt)?;
    let n = sys.n_dofs();
    if u0.len() != n {
        return Err(Error::DimMismatch { expected: n, got: u0.len() });
    }
    if v0.len() != n {
        return Err(Error::DimMismatch { expected: n, got: v0.len() });
    }
    let au0 = match scheme {
        StartScheme::Plain => sys.apply_as(u0)?,
        StartScheme::Stabilized => {
            StabilizedOperator::new(sys, params.clone(), dt)?.apply(u0)?
        }
    };
    let u1: Vec<f64> = (0..n)
        .map(|i| u0[i] + dt * v0[i] - 0.5 * dt * dt * au0[i])
        .collect();
    Ok(WaveState {
        u_prev: u0.to_vec(),
        u_cur: u1,
        step: 1,
        dt,
    })
}

/// Reusable stepper: owns the stage buffers so repeated steps do not
/// allocate. Cost per step is exactly one full matvec (on the
/// coarse-projected level) plus `p` fine matvecs, visible on the system's
/// counters.
pub struct LtsStepper<'a> {
    sys: &'a LumpedSystem,
    params: StabParams,
    dt: f64,
    /// `dt^2 / (omega delta)`.
    c1: f64,
    /// `2 dt^2 / omega`.
    c2: f64,
    w: Vec<f64>,
    tmp: Vec<f64>,
    z_prev: Vec<f64>,
    z_cur: Vec<f64>,
    z_next: Vec<f64>,
}

impl<'a> LtsStepper<'a> {
    pub fn new(sys: &'a LumpedSystem, params: StabParams, dt: f64) -> Result<Self> {
        check_dt(dt)?;
        let n = sys.n_dofs();
        Ok(Self {
            sys,
            c1: dt * dt / (params.omega() * params.delta()),
            c2: 2.0 * dt * dt / params.omega(),
            params,
            dt,
            w: vec![0.0; n],
            tmp: vec![0.0; n],
            z_prev: vec![0.0; n],
            z_cur: vec![0.0; n],
            z_next: vec![0.0; n],
        })
    }

    pub fn params(&self) -> &StabParams {
        &self.params
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Advances `state` by one step of size `dt`.
    pub fn step(&mut self, state: &mut WaveState) -> Result<()> {
        let n = self.sys.n_dofs();
        if state.u_prev.len() != n || state.u_cur.len() != n {
            return Err(Error::DimMismatch {
                expected: n,
                got: state.u_cur.len(),
            });
        }
        if state.dt != self.dt {
            return Err(Error::InvalidParam(format!(
                "state was advanced with dt = {}, stepper uses {}",
                state.dt, self.dt
            )));
        }
        let p = self.params.p() as usize;

        self.sys.project_coarse_into(&state.u_cur, &mut self.tmp)?;
        self.sys.apply_as_into(&self.tmp, &mut self.w)?;

        self.sys.apply_as_fine_into(&state.u_cur, &mut self.tmp)?;
        for i in 0..n {
            self.z_prev[i] = state.u_cur[i];
            self.z_cur[i] = state.u_cur[i] - self.c1 * (self.w[i] + self.tmp[i]);
        }
        for k in 1..p {
            let b = self.params.beta()[k - 1];
            let bh = self.params.beta_half()[k - 1];
            self.sys.apply_as_fine_into(&self.z_cur, &mut self.tmp)?;
            for i in 0..n {
                self.z_next[i] = (1.0 + b) * self.z_cur[i] - b * self.z_prev[i]
                    - self.c2 * bh * (self.w[i] + self.tmp[i]);
            }
            std::mem::swap(&mut self.z_prev, &mut self.z_cur);
            std::mem::swap(&mut self.z_cur, &mut self.z_next);
        }

        for i in 0..n {
            state.u_prev[i] = 2.0 * self.z_cur[i] - state.u_prev[i];
        }
        std::mem::swap(&mut state.u_prev, &mut state.u_cur);
        state.step += 1;
        Ok(())
    }
}

/// Single step without keeping a stepper around.
pub fn lts_step(
    sys: &LumpedSystem,
    params: &StabParams,
    dt: f64,
    state: &mut WaveState,
) -> Result<()> {
    LtsStepper::new(sys, params.clone(), dt)?.step(state)
}

/// Integrates from `(u0, v0)` to the step count `round(t_final / dt)`,
/// invoking `observer` after the starting step and after every update.
///
/// `t_final = dt` therefore performs the starting step only.
#[allow(clippy::too_many_arguments)]
pub fn run_with(
    sys: &LumpedSystem,
    params: &StabParams,
    dt: f64,
    t_final: f64,
    u0: &[f64],
    v0: &[f64],
    scheme: StartScheme,
    mut observer: impl FnMut(&WaveState),
) -> Result<WaveState> {
    check_dt(dt)?;
    if !(t_final > 0.0) || !t_final.is_finite() {
        return Err(Error::InvalidParam(format!(
            "t_final must be > 0, got {t_final}"
        )));
    }
    let n_steps = (t_final / dt).round() as u64;
    if n_steps == 0 {
        return Err(Error::InvalidParam(format!(
            "t_final = {t_final} is below half a step dt = {dt}"
        )));
    }
    let mut state = initial_state_with(sys, params, dt, u0, v0, scheme)?;
    observer(&state);
    let mut stepper = LtsStepper::new(sys, params.clone(), dt)?;
    while state.step < n_steps {
        stepper.step(&mut state)?;
        observer(&state);
    }
    Ok(state)
}

/// Discrete energy at the half step between the two levels of `state`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergySample {
    /// Index of the newer level; the sample lives between `step - 1` and
    /// `step`.
    pub step: u64,
    /// `(kinetic + potential_cross) / 2`.
    pub value: f64,
    /// `|| (u^n - u^{n-1}) / dt ||_T^2`.
    pub kinetic: f64,
    /// `(A_stab u^n, u^{n-1})_T`.
    pub potential_cross: f64,
}

/// Evaluates the conserved energy functional of the scheme; costs one
/// stabilized apply.
pub fn discrete_energy(
    sys: &LumpedSystem,
    params: &StabParams,
    dt: f64,
    state: &WaveState,
) -> Result<EnergySample> {
    let n = sys.n_dofs();
    let diff: Vec<f64> = state
        .u_cur
        .iter()
        .zip(&state.u_prev)
        .map(|(&a, &b)| (a - b) / dt)
        .collect();
    let kinetic = sys.t_inner(&diff, &diff)?;
    let op = StabilizedOperator::new(sys, params.clone(), dt)?;
    let mut au = vec![0.0; n];
    let mut work = ApplyWork::new(n);
    op.apply_into(&state.u_cur, &mut au, &mut work)?;
    let potential_cross = sys.t_inner(&au, &state.u_prev)?;
    Ok(EnergySample {
        step: state.step,
        value: 0.5 * (kinetic + potential_cross),
        kinetic,
        potential_cross,
    })
}
