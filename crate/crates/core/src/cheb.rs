//! Damped (stabilized) Chebyshev polynomial kernel.
//!
//! The time integrator is built on the polynomial family
//!
//! ```text
//! P(y) = 2 * (1 - T_p(delta - y/omega) / T_p(delta)),
//! delta = 1 + nu / p^2,
//! omega = 2 * T_p'(delta) / T_p(delta),
//! ```
//!
//! where `T_p` is the Chebyshev polynomial of the first kind, `p >= 1` is the
//! coarse-to-fine step ratio and `nu in [0, 1/2]` the damping parameter.
//! `P` satisfies `P(0) = 0`, `P'(0) = 1`; for `nu = 0` it oscillates through
//! the full stability band `[0, 4]` on `[0, 4p^2]`, while `nu > 0` pulls it
//! strictly inside. `p = 1` degenerates to `P(y) = y` (plain leapfrog).
//!
//! The expanded coefficients of `P` are never materialized: evaluation goes
//! through the closed form above or through the three-term recursion used by
//! the stepper, and the two agree to rounding (checked in the tests).

use crate::error::{Error, Result};

/// `T_p(x)` by the three-term recurrence `T_{k+1} = 2x T_k - T_{k-1}`.
///
/// Valid for all real `x`, including `|x| > 1` where the trigonometric form
/// does not apply.
pub fn cheb_eval(p: u32, x: f64) -> f64 {
    if p == 0 {
        return 1.0;
    }
    let (mut prev, mut cur) = (1.0, x);
    for _ in 2..=p {
        (prev, cur) = (cur, 2.0 * x * cur - prev);
    }
    cur
}

/// `m`-th derivative `T_p^{(m)}(x)`, by differentiating the recurrence.
///
/// Each recurrence step advances the whole derivative table
/// `T_{k+1}^{(j)} = 2x T_k^{(j)} + 2j T_k^{(j-1)} - T_{k-1}^{(j)}`, so the
/// cost is `O(p * m)`. Orders `m > p` return 0 (the degree is `p`).
pub fn cheb_deriv(p: u32, x: f64, m: u32) -> f64 {
    let m = m as usize;
    // prev[j] = T_{k-1}^{(j)}, cur[j] = T_k^{(j)}
    let mut prev = vec![0.0; m + 1];
    let mut cur = vec![0.0; m + 1];
    prev[0] = 1.0;
    cur[0] = x;
    if m >= 1 {
        cur[1] = 1.0;
    }
    if p == 0 {
        return prev[m];
    }
    let mut next = vec![0.0; m + 1];
    for _ in 2..=p {
        for j in 0..=m {
            let lower = if j > 0 { cur[j - 1] } else { 0.0 };
            next[j] = 2.0 * x * cur[j] + 2.0 * j as f64 * lower - prev[j];
        }
        prev.copy_from_slice(&next);
        std::mem::swap(&mut prev, &mut cur);
    }
    cur[m]
}

/// Coefficient bundle for one `(p, nu)` pair.
///
/// Holds `delta`, `omega` and the ratio tables
/// `beta_k = T_{k-1}(delta) / T_{k+1}(delta)`,
/// `beta_{k+1/2} = T_k(delta) / T_{k+1}(delta)` for `k = 1..p-1`,
/// which the stepper consumes unchanged on every step. All entries lie in
/// `(0, 1]` and equal 1 exactly when `nu = 0`.
#[derive(Debug, Clone)]
pub struct StabParams {
    p: u32,
    nu: f64,
    delta: f64,
    omega: f64,
    tp_delta: f64,
    beta: Vec<f64>,
    beta_half: Vec<f64>,
}

impl StabParams {
    /// Builds the bundle. Rejects `p < 1` and `nu` outside `[0, 1/2]`.
    pub fn new(p: u32, nu: f64) -> Result<Self> {
        if p < 1 {
            return Err(Error::InvalidParam("p must be >= 1".into()));
        }
        if !(0.0..=0.5).contains(&nu) {
            return Err(Error::InvalidParam(format!(
                "nu must lie in [0, 1/2], got {nu}"
            )));
        }
        let pf = p as f64;
        let delta = 1.0 + nu / (pf * pf);
        let tp_delta = cheb_eval(p, delta);
        let omega = 2.0 * cheb_deriv(p, delta, 1) / tp_delta;
        let mut beta = Vec::with_capacity(p as usize - 1);
        let mut beta_half = Vec::with_capacity(p as usize - 1);
        for k in 1..p {
            let t_next = cheb_eval(k + 1, delta);
            beta.push(cheb_eval(k - 1, delta) / t_next);
            beta_half.push(cheb_eval(k, delta) / t_next);
        }
        Ok(Self {
            p,
            nu,
            delta,
            omega,
            tp_delta,
            beta,
            beta_half,
        })
    }

    pub fn p(&self) -> u32 {
        self.p
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn omega(&self) -> f64 {
        self.omega
    }

    /// `beta_k` for `k = 1..p-1` (empty when `p = 1`).
    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    /// `beta_{k+1/2}` for `k = 1..p-1` (empty when `p = 1`).
    pub fn beta_half(&self) -> &[f64] {
        &self.beta_half
    }

    /// `P(y)` by the closed form.
    pub fn eval_p(&self, y: f64) -> f64 {
        2.0 * (1.0 - cheb_eval(self.p, self.delta - y / self.omega) / self.tp_delta)
    }

    /// First positive zero of `P`, or `None` when `P > 0` on the whole
    /// half-line.
    ///
    /// For `nu > 0` and even `p` the closed form first vanishes at
    /// `2 delta omega`, where the argument reaches `-delta` and
    /// `T_p(-delta) = T_p(delta)`; `P` is strictly positive before that
    /// point and strictly negative beyond it. Odd degrees never return to
    /// `T_p(delta)` on the far side (`T_p < 0` there) and stay positive.
    /// Undamped polynomials (`nu = 0`, `p >= 2`) first touch zero at the
    /// interior tangency `omega (1 - cos(2 pi / p))` without changing sign.
    pub fn positivity_limit(&self) -> Option<f64> {
        if self.nu > 0.0 {
            (self.p % 2 == 0).then(|| 2.0 * self.delta * self.omega)
        } else if self.p >= 2 {
            Some(self.omega * (1.0 - (2.0 * std::f64::consts::PI / f64::from(self.p)).cos()))
        } else {
            None
        }
    }

    /// Reduced polynomial `P(dt^2 x) / (dt^2 x)`.
    ///
    /// The singularity at `x = 0` is removable (`P'(0) = 1`); arguments with
    /// `|dt^2 x| < 1e-300` take the limit value 1.
    pub fn eval_p_reduced(&self, dt: f64, x: f64) -> f64 {
        let y = dt * dt * x;
        if y.abs() < 1e-300 {
            1.0
        } else {
            self.eval_p(y) / y
        }
    }

    /// Reduced polynomial by the stepper's three-term recursion:
    /// stage 0 is 0, stage 1 is `2/(omega*delta)`, and stage `k+1` combines
    /// stages `k`, `k-1` with the `beta` tables. Agrees with
    /// [`eval_p_reduced`](Self::eval_p_reduced) to rounding.
    pub fn eval_p_recursive(&self, dt: f64, x: f64) -> f64 {
        let mut prev = 0.0;
        let mut cur = 2.0 / (self.omega * self.delta);
        for k in 1..self.p as usize {
            let next = 2.0 * self.beta_half[k - 1]
                * (self.delta * cur - dt * dt / self.omega * x * cur)
                - self.beta[k - 1] * prev
                + 4.0 / self.omega * self.beta_half[k - 1];
            (prev, cur) = (cur, next);
        }
        cur
    }

    /// Samples the analytic bounds on `P` over uniform grids and reports the
    /// observed extremes. `grid_size >= 100` is required; `dt` only fixes the
    /// `x`-parametrization of the reduced polynomial (the bounds themselves
    /// are `dt`-invariant).
    ///
    /// Checked bounds, each with `1e-10` absolute slack:
    /// * `sup |P| <= 4 - 2 nu / (1 + nu)` on `[0, (1 + delta) omega]`,
    /// * `sup P(y)/y <= 1` on `(0, 2 delta omega]`,
    /// * `inf P(y)/y >= 2 nu / ((2 + nu)^2 omega)` on `(0, (1 + delta) omega]`,
    /// * `sup |(1 - P(y)/y) / P(y)| <= (nu + 1) / (2 nu)` on the open interval
    ///   `(0, (1 + delta) omega)` — only for `nu > 0`; for `nu = 0` the field
    ///   is NaN and excluded from `all_pass`.
    pub fn verify_bounds(&self, dt: f64, grid_size: usize) -> Result<PolyBoundsReport> {
        if grid_size < 100 {
            return Err(Error::InvalidParam(format!(
                "bound verification needs grid_size >= 100, got {grid_size}"
            )));
        }
        if !(dt > 0.0) {
            return Err(Error::InvalidParam(format!("dt must be > 0, got {dt}")));
        }
        const SLACK: f64 = 1e-10;
        let nu = self.nu;
        let upper = (1.0 + self.delta) * self.omega;
        let dt2 = dt * dt;

        let mut sup_abs_p = 0.0f64;
        for i in 0..=grid_size {
            let y = upper * i as f64 / grid_size as f64;
            sup_abs_p = sup_abs_p.max(self.eval_p(y).abs());
        }

        let mut sup_p_over_x = f64::NEG_INFINITY;
        let r2 = 2.0 * self.delta * self.omega;
        for i in 1..=grid_size {
            let y = r2 * i as f64 / grid_size as f64;
            sup_p_over_x = sup_p_over_x.max(self.eval_p_reduced(dt, y / dt2));
        }

        let mut inf_p_over_x = f64::INFINITY;
        for i in 1..=grid_size {
            let y = upper * i as f64 / grid_size as f64;
            inf_p_over_x = inf_p_over_x.min(self.eval_p_reduced(dt, y / dt2));
        }

        let sup_diff_quot = if nu > 0.0 {
            let mut sup = 0.0f64;
            for i in 1..grid_size {
                let y = upper * i as f64 / grid_size as f64;
                let p = self.eval_p(y);
                sup = sup.max(((1.0 - p / y) / p).abs());
            }
            sup
        } else {
            f64::NAN
        };

        let all_pass = sup_abs_p <= 4.0 - 2.0 * nu / (1.0 + nu) + SLACK
            && sup_p_over_x <= 1.0 + SLACK
            && inf_p_over_x >= 2.0 * nu / ((2.0 + nu) * (2.0 + nu) * self.omega) - SLACK
            && (nu == 0.0 || sup_diff_quot <= (nu + 1.0) / (2.0 * nu) + SLACK);

        Ok(PolyBoundsReport {
            sup_abs_p,
            sup_p_over_x,
            inf_p_over_x,
            sup_diff_quot,
            grid_size,
            all_pass,
        })
    }
}

/// Sampled extremes of the polynomial bounds, from
/// [`StabParams::verify_bounds`].
#[derive(Debug, Clone)]
pub struct PolyBoundsReport {
    pub sup_abs_p: f64,
    pub sup_p_over_x: f64,
    pub inf_p_over_x: f64,
    /// NaN when `nu = 0` (the bound is vacuous there).
    pub sup_diff_quot: f64,
    pub grid_size: usize,
    pub all_pass: bool,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn chebyshev_basics() {
        for p in 0..=64 {
            assert_eq!(cheb_eval(p, 1.0), 1.0, "T_{p}(1)");
        }
        assert_eq!(cheb_eval(0, 0.37), 1.0);
        assert_eq!(cheb_eval(2, 1.125), 1.53125); // 2x^2 - 1
        assert!((cheb_eval(5, 0.3) - (16.0 * 0.3f64.powi(5) - 20.0 * 0.3f64.powi(3) + 5.0 * 0.3)).abs() < 1e-15);
    }

    #[test]
    fn chebyshev_derivatives_at_one() {
        for p in 1..=64u32 {
            let d = cheb_deriv(p, 1.0, 1);
            let expect = (p * p) as f64;
            assert!(
                (d - expect).abs() <= 1e-9 * expect,
                "T_{p}'(1) = {d}, want {expect}"
            );
        }
        // T_p''(1) = p^2 (p^2 - 1) / 3; for p = 4 this is 16*15/3 = 80.
        assert!((cheb_deriv(4, 1.0, 2) - 80.0).abs() < 1e-11);
        assert_eq!(cheb_deriv(2, 1.125, 1), 4.5); // T_2' = 4x
        assert_eq!(cheb_deriv(3, 0.7, 3), 24.0); // T_3''' = 24
        assert_eq!(cheb_deriv(3, 0.7, 4), 0.0); // beyond the degree
    }

    #[test]
    fn params_closed_form_cases() {
        let s = StabParams::new(2, 0.0).unwrap();
        assert_eq!(s.delta(), 1.0);
        assert_eq!(s.omega(), 8.0);
        assert_eq!(s.beta(), &[1.0]);
        assert_eq!(s.beta_half(), &[1.0]);

        // p = 1: omega = 2/delta, no beta tables.
        let s = StabParams::new(1, 0.3).unwrap();
        assert!((s.omega() - 2.0 / 1.3).abs() < 1e-15);
        assert!(s.beta().is_empty() && s.beta_half().is_empty());

        // p = 2, nu = 1/2: delta = 1.125, omega = 2*T_2'(delta)/T_2(delta) = 9/1.53125.
        let s = StabParams::new(2, 0.5).unwrap();
        assert_eq!(s.delta(), 1.125);
        assert!((s.omega() - 9.0 / 1.53125).abs() < 1e-12);
    }

    #[test]
    fn params_rejects_out_of_range() {
        assert!(StabParams::new(0, 0.1).is_err());
        assert!(StabParams::new(3, -0.01).is_err());
        assert!(StabParams::new(3, 0.51).is_err());
        assert!(StabParams::new(3, f64::NAN).is_err());
    }

    #[test]
    fn beta_tables_in_unit_interval() {
        for p in [2u32, 3, 5, 8, 17, 32] {
            for nu in [0.0, 0.05, 0.2, 0.5] {
                let s = StabParams::new(p, nu).unwrap();
                for (&b, &bh) in s.beta().iter().zip(s.beta_half()) {
                    assert!(b > 0.0 && b <= 1.0, "beta out of (0,1]: {b}");
                    assert!(bh > 0.0 && bh <= 1.0, "beta_half out of (0,1]: {bh}");
                    // 1 + beta_k = 2 delta beta_{k+1/2} (recurrence identity).
                    assert!((1.0 + b - 2.0 * s.delta() * bh).abs() < 1e-13);
                }
            }
        }
    }

    #[test]
    fn omega_window_and_tp_lower_bound() {
        // 2 p^2 e^{-nu} <= omega <= 2 p^2 and T_p(delta) >= 1 + nu.
        for p in 1..=32u32 {
            for i in 0..=10 {
                let nu = 0.05 * i as f64;
                let s = StabParams::new(p, nu).unwrap();
                let cap = 2.0 * (p * p) as f64;
                assert!(
                    s.omega() <= cap + 1e-10 && s.omega() >= cap * (-nu).exp() - 1e-10,
                    "omega window violated at p={p}, nu={nu}: {}",
                    s.omega()
                );
                assert!(cheb_eval(p, s.delta()) >= 1.0 + nu - 1e-12);
            }
        }
    }

    #[test]
    fn p_poly_point_values() {
        let s = StabParams::new(3, 0.2).unwrap();
        assert_eq!(s.eval_p(0.0), 0.0);

        // p = 1 gives P(y) = y identically.
        let s1 = StabParams::new(1, 0.37).unwrap();
        for y in [0.0, 0.5, 1.7, 3.9] {
            assert!((s1.eval_p(y) - y).abs() < 1e-13);
        }

        // nu = 0: values stay within [0, 4] on [0, 4 p^2].
        let s30 = StabParams::new(3, 0.0).unwrap();
        for i in 0..=4000 {
            let y = 36.0 * i as f64 / 4000.0;
            let v = s30.eval_p(y);
            assert!((-1e-12..=4.0 + 1e-12).contains(&v), "P({y}) = {v}");
        }

        // p = 2, nu = 0: P(y) = y - y^2/16 exactly.
        let s20 = StabParams::new(2, 0.0).unwrap();
        for y in [0.3, 1.0, 7.5, 16.0] {
            assert!((s20.eval_p(y) - (y - y * y / 16.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn reduced_poly_limit_and_values() {
        let s = StabParams::new(4, 0.12).unwrap();
        assert_eq!(s.eval_p_reduced(0.3, 0.0), 1.0);

        let s1 = StabParams::new(1, 0.4).unwrap();
        for x in [0.0, 1.0, 44.0] {
            assert!((s1.eval_p_reduced(0.7, x) - 1.0).abs() < 1e-14);
        }

        let s20 = StabParams::new(2, 0.0).unwrap();
        let want = s20.eval_p(2.0) / 2.0; // = (2 - 4/16)/2 = 0.875
        assert!((s20.eval_p_reduced(1.0, 2.0) - want).abs() < 1e-15);
        assert_eq!(want, 0.875);
    }

    #[test]
    fn recursion_stage_one_matches() {
        let s = StabParams::new(1, 0.25).unwrap();
        // For p = 1, omega = 2/delta forces the stage-1 value 2/(omega delta) = 1.
        assert!((s.eval_p_recursive(0.5, 3.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn recursion_matches_closed_form() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0x5eed_c4eb);
        for _ in 0..300 {
            let p = rng.gen_range(1..=16u32);
            let nu = rng.gen_range(0.0..=0.5);
            let dt = rng.gen_range(0.01..2.0);
            let x = rng.gen_range(0.0..4.0 * (p * p) as f64 / (dt * dt));
            let s = StabParams::new(p, nu).unwrap();
            let a = s.eval_p_recursive(dt, x);
            let b = s.eval_p_reduced(dt, x);
            let scale = a.abs().max(b.abs()).max(1e-30);
            assert!(
                (a - b).abs() <= 1e-12 * scale,
                "p={p} nu={nu} dt={dt} x={x}: recursive {a} vs closed {b}"
            );
        }

        let s = StabParams::new(4, 0.01).unwrap();
        let a = s.eval_p_recursive(0.5, 3.7);
        let b = s.eval_p_reduced(0.5, 3.7);
        assert!((a - b).abs() <= 1e-13 * b.abs());
    }

    #[test]
    fn derivative_at_zero_is_one() {
        // (P(h) - P(0))/h -> 1 with O(h) error.
        for (p, nu) in [(3u32, 0.0), (6, 0.3), (12, 0.5)] {
            let s = StabParams::new(p, nu).unwrap();
            let e4 = (s.eval_p(1e-4) / 1e-4 - 1.0).abs();
            let e6 = (s.eval_p(1e-6) / 1e-6 - 1.0).abs();
            assert!(e4 < 1e-2, "p={p} nu={nu}: err(1e-4) = {e4}");
            assert!(e6 < 1e-4, "p={p} nu={nu}: err(1e-6) = {e6}");
            assert!(e6 < e4);
        }
    }

    #[test]
    fn first_zero_splits_signs_for_even_degrees() {
        for p in [2u32, 4, 8, 16, 1000] {
            for nu in [0.001, 0.05, 0.5] {
                let s = StabParams::new(p, nu).unwrap();
                let y0 = s.positivity_limit().unwrap();
                assert!((y0 - 2.0 * s.delta() * s.omega()).abs() <= 1e-12 * y0);
                assert!(s.eval_p(y0).abs() <= 1e-9, "p={p} nu={nu}: P(y0) = {}", s.eval_p(y0));
                assert!(s.eval_p(0.999 * y0) > 0.0);
                assert!(s.eval_p(1.001 * y0) < 0.0);
            }
        }
    }

    #[test]
    fn odd_degrees_stay_positive() {
        for p in [3u32, 5, 17] {
            for nu in [0.001, 0.5] {
                let s = StabParams::new(p, nu).unwrap();
                assert!(s.positivity_limit().is_none());
                for f in [0.3, 1.0, 2.0, 3.0, 8.0] {
                    let y = f * s.delta() * s.omega();
                    assert!(s.eval_p(y) > 0.0, "p={p} nu={nu} y={y}");
                }
            }
        }
    }

    #[test]
    fn undamped_first_zero_is_a_tangency() {
        for p in [3u32, 4, 5, 8] {
            let s = StabParams::new(p, 0.0).unwrap();
            let y0 = s.positivity_limit().unwrap();
            assert!(s.eval_p(y0).abs() <= 1e-12);
            assert!(s.eval_p(0.995 * y0) >= 0.0);
            assert!(s.eval_p(1.005 * y0) >= 0.0);
            // Interior zeros rule the undamped case out of the sign
            // certificate: the polynomial touches without crossing.
        }
        assert!(StabParams::new(1, 0.0).unwrap().positivity_limit().is_none());
    }

    #[test]
    fn bound_report_passes() {
        let r = StabParams::new(6, 0.3)
            .unwrap()
            .verify_bounds(0.17, 10_000)
            .unwrap();
        assert!(r.all_pass, "{r:?}");
        assert!(r.sup_abs_p <= 4.0 - 2.0 * 0.3 / 1.3 + 1e-10);
        assert!(r.sup_p_over_x <= 1.0 + 1e-10);

        // nu = 0 degenerates gracefully: diff-quotient skipped, rest holds.
        let r0 = StabParams::new(6, 0.0)
            .unwrap()
            .verify_bounds(1.0, 10_000)
            .unwrap();
        assert!(r0.all_pass, "{r0:?}");
        assert!(r0.sup_diff_quot.is_nan());

        assert!(StabParams::new(6, 0.3)
            .unwrap()
            .verify_bounds(1.0, 99)
            .is_err());
    }
}
