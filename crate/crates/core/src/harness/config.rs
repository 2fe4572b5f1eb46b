//! Experiment configuration: TOML sections, one per experiment, with the
//! reference-setup values as defaults so a bare subcommand reproduces the
//! standard runs.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rule that turns a mesh level into a time step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DtRule {
    /// `dt = dt_value * dt_opt(h_c)` with the uniform-mesh leapfrog optimum.
    FactorOfDtOpt,
    /// `dt = dt_value` verbatim.
    Absolute,
    /// `dt = exp(-nu) * h_c`.
    #[default]
    ExpNuTimesHc,
    /// `dt` at the first upper tangency of the undamped spectrum, located per
    /// level by the critical scan. Requires `nu = 0`.
    Critical,
}

/// Reference against which convergence errors are measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceRule {
    /// Closed-form series solution of the continuum problem.
    #[default]
    Analytic,
    /// Exact integrator of the semi-discrete system on a nested mesh one
    /// refinement finer than the level under study.
    Semidiscrete,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvergeCfg {
    /// Coarse spacings, finest last.
    pub h_c: Vec<f64>,
    pub p: Vec<u32>,
    pub nu: f64,
    pub t_final: f64,
    pub dt_rule: DtRule,
    /// Factor or absolute step for the rules that need one.
    pub dt_value: f64,
    pub fine_lo: f64,
    pub fine_hi: f64,
    /// The refined region is extended left by this many coarse elements.
    pub fine_overlap_elements: usize,
    pub reference: ReferenceRule,
    /// Sine-series terms of the analytic reference.
    pub series_terms: usize,
    /// Scan window (in units of `h_c`) and resolution for `dt_rule =
    /// "critical"`.
    pub crit_lo_over_hc: f64,
    pub crit_hi_over_hc: f64,
    pub crit_points: usize,
}

impl Default for ConvergeCfg {
    fn default() -> Self {
        Self {
            h_c: vec![1.0 / 40.0, 1.0 / 80.0, 1.0 / 160.0, 1.0 / 320.0],
            p: vec![2, 5, 17],
            nu: 0.01,
            t_final: 2.0,
            dt_rule: DtRule::ExpNuTimesHc,
            dt_value: 0.0,
            fine_lo: 0.9,
            fine_hi: 1.0,
            fine_overlap_elements: 1,
            reference: ReferenceRule::Analytic,
            series_terms: 300,
            crit_lo_over_hc: 0.695,
            crit_hi_over_hc: 0.80,
            crit_points: 211,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnergyCfg {
    pub h_c: f64,
    pub p: u32,
    pub nu: f64,
    pub t_final: f64,
    pub dt_rule: DtRule,
    pub dt_value: f64,
    pub fine_lo: f64,
    pub fine_hi: f64,
    /// Up to this many steps every step is sampled; beyond it every tenth.
    pub stride_threshold: u64,
}

impl Default for EnergyCfg {
    fn default() -> Self {
        Self {
            h_c: 1.0 / 320.0,
            p: 2,
            nu: 0.01,
            t_final: 100.0,
            dt_rule: DtRule::ExpNuTimesHc,
            dt_value: 0.0,
            fine_lo: 0.9,
            fine_hi: 1.0,
            stride_threshold: 10_000,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpectrumCfg {
    pub h_c: f64,
    pub p: u32,
    pub nu: f64,
    pub fine_lo: f64,
    pub fine_hi: f64,
    /// Time-step grid `[dt_lo, dt_hi] * h_c`, `n_points` samples.
    pub dt_lo_over_hc: f64,
    pub dt_hi_over_hc: f64,
    pub n_points: usize,
    /// Locate boundary tangencies on the same grid (undamped runs only).
    pub scan_critical: bool,
}

impl Default for SpectrumCfg {
    fn default() -> Self {
        Self {
            h_c: 1.0 / 40.0,
            p: 3,
            nu: 0.0,
            fine_lo: 0.8,
            fine_hi: 1.0,
            dt_lo_over_hc: 0.02,
            dt_hi_over_hc: 1.06,
            n_points: 600,
            scan_critical: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CflTableCfg {
    pub h_c: f64,
    pub p: u32,
    pub nu: Vec<f64>,
    pub fine_lo: f64,
    pub fine_hi: f64,
    /// Margin-scan resolution; 0 selects 240, coarsened to 200 for the
    /// matrix-free `p = 1000` extreme-scale run.
    pub margin_points: usize,
    pub eig_tol: f64,
}

impl Default for CflTableCfg {
    fn default() -> Self {
        Self {
            h_c: 0.01,
            p: 1000,
            nu: vec![0.001, 0.01, 0.05, 0.5],
            fine_lo: 0.9,
            fine_hi: 1.0,
            margin_points: 0,
            eig_tol: 1e-9,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InstabilityCfg {
    pub h_c: f64,
    pub p: u32,
    /// Damping of the contrast run; the baseline always runs undamped.
    pub nu_stab: f64,
    pub fine_lo: f64,
    pub fine_hi: f64,
    pub t_final: f64,
    /// Window (in units of `h_c`) scanned for the first instability bubble.
    pub scan_lo_over_hc: f64,
    pub scan_hi_over_hc: f64,
    pub scan_points: usize,
    /// Sup-norm sampling stride in steps.
    pub sample_stride: u64,
    /// Least-squares window for the linear-growth fit.
    pub fit_t_min: f64,
    /// Relative size of the off-critical step perturbation.
    pub perturb_rel: f64,
}

impl Default for InstabilityCfg {
    fn default() -> Self {
        Self {
            h_c: 1.0 / 40.0,
            p: 2,
            nu_stab: 0.01,
            fine_lo: 0.8,
            fine_hi: 1.0,
            t_final: 500.0,
            scan_lo_over_hc: 0.695,
            scan_hi_over_hc: 0.80,
            scan_points: 211,
            sample_stride: 10,
            fit_t_min: 10.0,
            perturb_rel: 0.01,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LshapeCfg {
    /// Rings per ray of the study meshes, coarsest first.
    pub n_levels: Vec<usize>,
    /// Rings of the reference mesh (next finer grading level).
    pub n_reference: usize,
    pub beta: f64,
    /// Grading of the control ladder; 1 runs uniform meshes with plain
    /// leapfrog.
    pub control_beta: f64,
    pub run_control: bool,
    pub nu: f64,
    pub t_final: f64,
    /// Constant right-hand side of the elliptic problem defining the initial
    /// velocity.
    pub rhs_const: f64,
    /// `dt = t_final / ceil(t_final / (dt_safety * dt_max))`.
    pub dt_safety: f64,
    pub eig_tol: f64,
}

impl Default for LshapeCfg {
    fn default() -> Self {
        Self {
            n_levels: vec![10, 20, 40, 80],
            n_reference: 160,
            beta: 1.6,
            control_beta: 1.0,
            run_control: true,
            nu: 0.01,
            t_final: 0.3,
            rhs_const: 100.0,
            dt_safety: 0.9,
            eig_tol: 1e-8,
        }
    }
}

/// All experiment sections plus run-wide switches. Any subset may appear in a
/// config file; missing keys take the defaults above.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HarnessConfig {
    /// Reductions are always performed in a fixed sequential order; asking
    /// for anything else is rejected rather than silently ignored.
    #[serde(default = "default_true")]
    pub deterministic: bool,
    pub converge: ConvergeCfg,
    pub energy: EnergyCfg,
    pub spectrum: SpectrumCfg,
    pub cfl_table: CflTableCfg,
    pub instability: InstabilityCfg,
    pub lshape: LshapeCfg,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            deterministic: true,
            converge: ConvergeCfg::default(),
            energy: EnergyCfg::default(),
            spectrum: SpectrumCfg::default(),
            cfl_table: CflTableCfg::default(),
            instability: InstabilityCfg::default(),
            lshape: LshapeCfg::default(),
        }
    }
}

impl HarnessConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.deterministic {
            return Err(Error::Config(
                "only deterministic reductions are implemented; set deterministic = true".into(),
            ));
        }
        self.converge.validate()?;
        self.energy.validate()?;
        self.spectrum.validate()?;
        self.cfl_table.validate()?;
        self.instability.validate()?;
        self.lshape.validate()
    }

    /// TOML echo of one section, used verbatim in CSV headers and manifests.
    pub fn echo_section(&self, experiment: &str) -> String {
        let body = match experiment {
            "converge" => toml::to_string(&self.converge),
            "energy" => toml::to_string(&self.energy),
            "spectrum" => toml::to_string(&self.spectrum),
            "cfl-table" | "cfl_table" => toml::to_string(&self.cfl_table),
            "instability" => toml::to_string(&self.instability),
            "lshape" => toml::to_string(&self.lshape),
            _ => return String::new(),
        };
        body.unwrap_or_default()
            .lines()
            .collect::<Vec<_>>()
            .join("; ")
    }
}

fn check_unit_window(lo: f64, hi: f64) -> Result<()> {
    if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
        return Err(Error::Config(format!(
            "fine region [{lo}, {hi}] must satisfy 0 <= lo <= hi <= 1"
        )));
    }
    Ok(())
}

fn check_nu(nu: f64) -> Result<()> {
    if !(0.0..=0.5).contains(&nu) {
        return Err(Error::Config(format!("nu = {nu} outside [0, 0.5]")));
    }
    Ok(())
}

fn check_pos(name: &str, x: f64) -> Result<()> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(Error::Config(format!("{name} = {x} must be positive")));
    }
    Ok(())
}

impl ConvergeCfg {
    pub fn validate(&self) -> Result<()> {
        if self.h_c.len() < 4 {
            return Err(Error::Config(format!(
                "convergence ladder needs at least 4 levels, got {}",
                self.h_c.len()
            )));
        }
        for w in self.h_c.windows(2) {
            if !(w[1] < w[0]) {
                return Err(Error::Config(
                    "ladder spacings must be strictly decreasing".into(),
                ));
            }
        }
        for &h in &self.h_c {
            check_pos("h_c", h)?;
        }
        if self.p.is_empty() || self.p.contains(&0) {
            return Err(Error::Config("p list must be non-empty, entries >= 1".into()));
        }
        check_nu(self.nu)?;
        check_pos("t_final", self.t_final)?;
        check_unit_window(self.fine_lo, self.fine_hi)?;
        match self.dt_rule {
            DtRule::FactorOfDtOpt | DtRule::Absolute => check_pos("dt_value", self.dt_value)?,
            DtRule::Critical => {
                if self.nu != 0.0 {
                    return Err(Error::Config(
                        "the critical-step rule is defined for nu = 0 only".into(),
                    ));
                }
                if self.crit_points < 3 {
                    return Err(Error::Config("crit_points must be >= 3".into()));
                }
            }
            DtRule::ExpNuTimesHc => {}
        }
        if self.series_terms == 0 {
            return Err(Error::Config("series_terms must be >= 1".into()));
        }
        Ok(())
    }
}

impl EnergyCfg {
    pub fn validate(&self) -> Result<()> {
        check_pos("h_c", self.h_c)?;
        if self.p == 0 {
            return Err(Error::Config("p must be >= 1".into()));
        }
        check_nu(self.nu)?;
        check_pos("t_final", self.t_final)?;
        check_unit_window(self.fine_lo, self.fine_hi)?;
        if matches!(self.dt_rule, DtRule::FactorOfDtOpt | DtRule::Absolute) {
            check_pos("dt_value", self.dt_value)?;
        }
        if matches!(self.dt_rule, DtRule::Critical) {
            return Err(Error::Config(
                "the critical-step rule is not meaningful for the energy trace".into(),
            ));
        }
        Ok(())
    }
}

impl SpectrumCfg {
    pub fn validate(&self) -> Result<()> {
        check_pos("h_c", self.h_c)?;
        if self.p == 0 {
            return Err(Error::Config("p must be >= 1".into()));
        }
        check_nu(self.nu)?;
        check_unit_window(self.fine_lo, self.fine_hi)?;
        if !(0.0 < self.dt_lo_over_hc && self.dt_lo_over_hc < self.dt_hi_over_hc) {
            return Err(Error::Config(
                "need 0 < dt_lo_over_hc < dt_hi_over_hc".into(),
            ));
        }
        if self.n_points < 3 {
            return Err(Error::Config("n_points must be >= 3".into()));
        }
        if self.scan_critical && self.nu != 0.0 {
            return Err(Error::Config(
                "the critical scan is defined for nu = 0; disable scan_critical".into(),
            ));
        }
        Ok(())
    }
}

impl CflTableCfg {
    pub fn validate(&self) -> Result<()> {
        check_pos("h_c", self.h_c)?;
        if self.p == 0 {
            return Err(Error::Config("p must be >= 1".into()));
        }
        if self.nu.is_empty() {
            return Err(Error::Config("nu list must be non-empty".into()));
        }
        for &nu in &self.nu {
            check_nu(nu)?;
        }
        check_unit_window(self.fine_lo, self.fine_hi)?;
        check_pos("eig_tol", self.eig_tol)?;
        Ok(())
    }

    /// Margin-scan resolution after applying the extreme-scale coarsening.
    pub fn margin_points_effective(&self) -> usize {
        if self.margin_points > 0 {
            self.margin_points
        } else if self.p >= 1000 {
            200
        } else {
            240
        }
    }
}

impl InstabilityCfg {
    pub fn validate(&self) -> Result<()> {
        check_pos("h_c", self.h_c)?;
        if self.p == 0 {
            return Err(Error::Config("p must be >= 1".into()));
        }
        check_nu(self.nu_stab)?;
        if self.nu_stab == 0.0 {
            return Err(Error::Config(
                "nu_stab must be positive; the undamped run is always included".into(),
            ));
        }
        check_unit_window(self.fine_lo, self.fine_hi)?;
        check_pos("t_final", self.t_final)?;
        if !(0.0 < self.scan_lo_over_hc && self.scan_lo_over_hc < self.scan_hi_over_hc) {
            return Err(Error::Config("bad critical-scan window".into()));
        }
        if self.scan_points < 3 {
            return Err(Error::Config("scan_points must be >= 3".into()));
        }
        if self.sample_stride == 0 {
            return Err(Error::Config("sample_stride must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.perturb_rel) {
            return Err(Error::Config("perturb_rel must be in [0, 1)".into()));
        }
        Ok(())
    }
}

impl LshapeCfg {
    pub fn validate(&self) -> Result<()> {
        if self.n_levels.is_empty() {
            return Err(Error::Config("n_levels must be non-empty".into()));
        }
        for w in self.n_levels.windows(2) {
            if !(w[0] < w[1]) {
                return Err(Error::Config("n_levels must be strictly increasing".into()));
            }
        }
        for &n in &self.n_levels {
            if n < 2 {
                return Err(Error::Config("every level needs n >= 2".into()));
            }
        }
        if self.n_reference <= *self.n_levels.last().unwrap() {
            return Err(Error::Config(
                "the reference must be finer than the finest study level".into(),
            ));
        }
        if !(self.beta >= 1.0) || !(self.control_beta >= 1.0) {
            return Err(Error::Config("grading exponents must be >= 1".into()));
        }
        check_nu(self.nu)?;
        check_pos("t_final", self.t_final)?;
        if !(0.0 < self.dt_safety && self.dt_safety < 1.0) {
            return Err(Error::Config("dt_safety must be in (0, 1)".into()));
        }
        check_pos("eig_tol", self.eig_tol)?;
        if !self.rhs_const.is_finite() {
            return Err(Error::Config("rhs_const must be finite".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        HarnessConfig::default().validate().unwrap();
    }

    #[test]
    fn toml_round_trip_and_overrides() {
        let text = r#"
            [converge]
            nu = 0.0
            dt_rule = "critical"
            h_c = [0.1, 0.05, 0.025, 0.0125]

            [energy]
            t_final = 5.0
        "#;
        let cfg = HarnessConfig::from_toml(text).unwrap();
        assert_eq!(cfg.converge.dt_rule, DtRule::Critical);
        assert_eq!(cfg.converge.h_c.len(), 4);
        assert_eq!(cfg.energy.t_final, 5.0);
        // Untouched sections keep their defaults.
        assert_eq!(cfg.cfl_table.p, 1000);
        assert_eq!(cfg.spectrum.n_points, 600);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(HarnessConfig::from_toml("[converge]\nnu = 0.9\n").is_err());
        assert!(HarnessConfig::from_toml("[energy]\nh_c = -0.1\n").is_err());
        assert!(HarnessConfig::from_toml("[spectrum]\nunknown_key = 1\n").is_err());
        assert!(HarnessConfig::from_toml("deterministic = false\n").is_err());
        // Critical rule needs nu = 0.
        assert!(
            HarnessConfig::from_toml("[converge]\ndt_rule = \"critical\"\nnu = 0.01\n").is_err()
        );
        assert!(HarnessConfig::from_toml("[lshape]\nn_levels = [10, 20]\nn_reference = 20\n")
            .is_err());
        assert!(HarnessConfig::from_toml("not valid toml [").is_err());
    }

    #[test]
    fn margin_coarsening_tracks_scale() {
        let mut cfg = CflTableCfg::default();
        assert_eq!(cfg.margin_points_effective(), 200);
        cfg.p = 8;
        assert_eq!(cfg.margin_points_effective(), 240);
        cfg.margin_points = 64;
        assert_eq!(cfg.margin_points_effective(), 64);
    }

    #[test]
    fn section_echo_is_single_line_toml() {
        let cfg = HarnessConfig::default();
        let echo = cfg.echo_section("energy");
        assert!(echo.contains("t_final = 100.0"));
        assert!(!echo.contains('\n'));
        assert!(cfg.echo_section("nonsense").is_empty());
    }
}
