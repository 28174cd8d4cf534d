//! Multi-step integration with per-step α tuning, convergence tables and
//! energy-defect order fits.

use std::io::Write;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::conserve::{solve_alpha_for, AlphaSearchConfig, EnergyDefect};
use crate::error::{Error, Result};
use crate::problems::{kepler_reference, Hamiltonian, Problem};
use crate::stepper::{extrapolated_guess, step_with_guess, StageGuess, StepConfig, StepResult};
use crate::tableau::{gamma_matrix_for, ButcherTableau, MethodFamily};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Method {
    /// The Gauss method, α ≡ 0.
    Gauss,
    FixedAlpha(f64),
    /// Per-step α* on the last subdiagonal pair.
    EpGauss,
    /// Per-step α* on an interior subdiagonal pair (index 1 by default).
    EpGaussType2,
}

impl Method {
    pub fn parse(name: &str, alpha: Option<f64>) -> Result<Self> {
        match name {
            "gauss" => Ok(Method::Gauss),
            "fixed-alpha" => alpha
                .map(Method::FixedAlpha)
                .ok_or_else(|| Error::InvalidArgument("fixed-alpha needs --alpha".into())),
            "ep-gauss" => Ok(Method::EpGauss),
            "ep-gauss-type2" => Ok(Method::EpGaussType2),
            other => Err(Error::InvalidArgument(format!("unknown method '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Method::Gauss => "gauss",
            Method::FixedAlpha(_) => "fixed-alpha",
            Method::EpGauss => "ep-gauss",
            Method::EpGaussType2 => "ep-gauss-type2",
        }
    }

    pub fn is_energy_preserving(&self) -> bool {
        matches!(self, Method::EpGauss | Method::EpGaussType2)
    }

    /// Perturbed subdiagonal index for `s` stages, honouring an explicit
    /// choice where the method allows one.
    pub fn perturb_index(&self, s: usize, explicit: Option<usize>) -> Result<Option<usize>> {
        if s < 1 {
            return Err(Error::InvalidArgument("stage count must be at least 1".into()));
        }
        let index = match (self, explicit) {
            (Method::Gauss, None) => return Ok(None),
            (Method::Gauss, Some(_)) => {
                return Err(Error::InvalidArgument("the Gauss method takes no perturbation index".into()))
            }
            (Method::EpGauss, Some(j)) if j + 1 != s => {
                return Err(Error::InvalidArgument(format!(
                    "ep-gauss perturbs index s-1 = {}; use ep-gauss-type2 for index {j}",
                    s.saturating_sub(1)
                )))
            }
            (Method::EpGauss, _) => s.saturating_sub(1),
            (Method::FixedAlpha(_), j) => j.unwrap_or(s.saturating_sub(1)),
            (Method::EpGaussType2, j) => {
                if s < 3 {
                    return Err(Error::InvalidArgument("ep-gauss-type2 needs at least 3 stages".into()));
                }
                j.unwrap_or(1)
            }
        };
        if index == 0 || index >= s {
            return Err(Error::InvalidArgument(format!("perturbation index must lie in 1..={}, got {index}", s - 1)));
        }
        Ok(Some(index))
    }
}

/// Everything needed for one integration.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub problem: Problem,
    /// Overrides the problem's default initial state.
    pub y0: Option<Vec<f64>>,
    pub method: Method,
    pub stages: usize,
    pub perturb_index: Option<usize>,
    pub h: f64,
    pub t_end: f64,
    pub search: AlphaSearchConfig,
    pub step: StepConfig,
}

impl RunSpec {
    pub fn new(problem: Problem, method: Method, stages: usize, h: f64, t_end: f64) -> Self {
        Self {
            problem,
            y0: None,
            method,
            stages,
            perturb_index: None,
            h,
            t_end,
            search: AlphaSearchConfig::default(),
            step: StepConfig::new(h),
        }
    }

    pub fn with_h(&self, h: f64) -> Self {
        Self { h, step: self.step.with_h(h), ..self.clone() }
    }

    /// `r = s - perturb_index`; δ(h) scales like `h^{2r}`.
    pub fn r(&self) -> Result<Option<usize>> {
        Ok(self.method.perturb_index(self.stages, self.perturb_index)?.map(|j| self.stages - j))
    }

    fn initial_state(&self, system: &dyn Hamiltonian, default: &[f64]) -> Result<Vec<f64>> {
        let y0 = self.y0.clone().unwrap_or_else(|| default.to_vec());
        if y0.len() != system.dim() {
            return Err(Error::InvalidArgument(format!(
                "initial state has {} components, {} expects {}",
                y0.len(),
                system.name(),
                system.dim()
            )));
        }
        if y0.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("initial state is not finite".into()));
        }
        Ok(y0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.h.is_finite() && self.h > 0.0) {
            return Err(Error::InvalidArgument(format!("h must be positive, got {}", self.h)));
        }
        if !(self.t_end.is_finite() && self.t_end > 0.0) {
            return Err(Error::InvalidArgument(format!("t_end must be positive, got {}", self.t_end)));
        }
        self.step.with_h(self.h).validate()?;
        if self.method.is_energy_preserving() {
            self.search.validate()?;
        }
        self.method.perturb_index(self.stages, self.perturb_index)?;
        Ok(())
    }
}

/// One accepted step (row 0 is the initial state).
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRow {
    pub step: usize,
    pub t: f64,
    pub y: Vec<f64>,
    pub energy_error: f64,
    pub invariant_errors: Vec<f64>,
    /// α used for the step; NaN on row 0.
    pub alpha: f64,
    pub g_evals: usize,
    pub stage_iterations: usize,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub invariant_names: Vec<String>,
    pub rows: Vec<TrajectoryRow>,
    /// The final step was shortened to land on `t_end`.
    pub partial_last_step: bool,
    pub initial_energy: f64,
}

impl TrajectoryRecord {
    pub fn final_state(&self) -> &[f64] {
        &self.rows.last().expect("record holds the initial row").y
    }

    pub fn max_energy_error(&self) -> f64 {
        self.rows.iter().map(|r| r.energy_error.abs()).fold(0.0, f64::max)
    }

    pub fn max_invariant_error(&self, k: usize) -> f64 {
        self.rows.iter().map(|r| r.invariant_errors[k].abs()).fold(0.0, f64::max)
    }

    /// α values of the full-length steps.
    pub fn alpha_trace(&self) -> impl Iterator<Item = f64> + '_ {
        let full = self.rows.len() - 1 - usize::from(self.partial_last_step);
        self.rows[1..=full].iter().map(|r| r.alpha)
    }

    /// `δ(h) = max α*ₙ - min α*ₙ` over the full-length steps.
    pub fn delta(&self) -> f64 {
        let (lo, hi) = self
            .alpha_trace()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), a| (lo.min(a), hi.max(a)));
        if lo.is_finite() {
            hi - lo
        } else {
            f64::NAN
        }
    }

    pub fn total_g_evals(&self) -> usize {
        self.rows.iter().map(|r| r.g_evals).sum()
    }
}

/// Step count and length of the final step for covering `[0, t_end]` with `h`.
fn step_plan(h: f64, t_end: f64) -> (usize, f64) {
    let ratio = t_end / h;
    let whole = ratio.round();
    if (ratio - whole).abs() <= 1e-9 * ratio.max(1.0) {
        return (whole as usize, h);
    }
    let full = ratio.floor() as usize;
    (full + 1, t_end - full as f64 * h)
}

fn invariant_values(system: &dyn Hamiltonian, y: &[f64]) -> Vec<f64> {
    system.invariants().iter().map(|inv| (inv.value)(y)).collect()
}

/// Integrates `spec` from `t = 0` to `t_end`.
///
/// For energy-preserving methods each step solves for α* so that the energy
/// matches the initial energy `H(y(0))`, which keeps rounding drift from
/// accumulating along the trajectory.
pub fn integrate(spec: &RunSpec) -> Result<TrajectoryRecord> {
    spec.validate()?;
    let (system, ic) = spec.problem.build()?;
    let y0 = spec.initial_state(system.as_ref(), &ic.y0)?;
    integrate_system(system.as_ref(), &y0, spec)
}

/// [`integrate`] for an already-built system and initial state.
pub fn integrate_system(system: &dyn Hamiltonian, y0: &[f64], spec: &RunSpec) -> Result<TrajectoryRecord> {
    spec.validate()?;
    let index = spec.method.perturb_index(spec.stages, spec.perturb_index)?;
    let family = MethodFamily::new(spec.stages, index)?;
    let gamma = match index {
        Some(j) if spec.step.stage_guess == StageGuess::Extrapolated => gamma_matrix_for(&family.quadrature, j)?,
        _ => DMatrix::zeros(spec.stages, spec.stages),
    };
    let fixed_tableau: Option<ButcherTableau> = match spec.method {
        Method::Gauss => Some(family.tableau(0.0)),
        Method::FixedAlpha(a) => Some(family.tableau(a)),
        _ => None,
    };

    let h0 = system.energy(y0)?;
    let inv0 = invariant_values(system, y0);
    let (n_steps, last_h) = step_plan(spec.h, spec.t_end);
    let partial = last_h != spec.h;

    let mut rows = Vec::with_capacity(n_steps + 1);
    rows.push(TrajectoryRow {
        step: 0,
        t: 0.0,
        y: y0.to_vec(),
        energy_error: 0.0,
        invariant_errors: vec![0.0; inv0.len()],
        alpha: f64::NAN,
        g_evals: 0,
        stage_iterations: 0,
        degenerate: false,
    });

    let mut y = y0.to_vec();
    let mut previous: Option<(StepResult, f64)> = None;
    for n in 1..=n_steps {
        let h = if n == n_steps { last_h } else { spec.h };
        let cfg = spec.step.with_h(h);
        let guess = match (&previous, spec.step.stage_guess) {
            (Some((prev, alpha)), StageGuess::Extrapolated) if prev.h == h => {
                Some(extrapolated_guess(prev, &family.tableau(*alpha), &gamma))
            }
            _ => None,
        };
        let at_step = |source: Error, y: &[f64]| Error::AtStep {
            step: n,
            t: (n - 1) as f64 * spec.h,
            state: y.to_vec(),
            source: Box::new(source),
        };
        let (result, alpha, g_evals, degenerate) = match &fixed_tableau {
            Some(tableau) => {
                let result = step_with_guess(system, tableau, &y, &cfg, guess.as_deref()).map_err(|e| at_step(e, &y))?;
                if !result.converged {
                    let err = Error::StageNotConverged { iterations: result.iterations, residual: result.stage_residual };
                    return Err(at_step(err, &y));
                }
                (result, tableau.perturbation.alpha().unwrap_or(0.0), 0, false)
            }
            None => {
                let defect = EnergyDefect {
                    system,
                    family: &family,
                    y0: &y,
                    target: system.energy(&y).map_err(|e| at_step(e, &y))?,
                    step_cfg: cfg,
                    guess: guess.as_deref(),
                };
                let warm = previous.as_ref().map(|(_, a)| *a);
                let rec = solve_alpha_for(&defect, &spec.search, warm).map_err(|e| at_step(e, &y))?;
                (rec.step, rec.alpha_star, rec.g_evals, rec.degenerate)
            }
        };
        y.clone_from(&result.y1);
        let t = if n == n_steps && partial { spec.t_end } else { n as f64 * spec.h };
        let energy_error = system.energy(&y).map_err(|e| at_step(e, &y))? - h0;
        let invariant_errors = invariant_values(system, &y).iter().zip(&inv0).map(|(v, v0)| v - v0).collect();
        rows.push(TrajectoryRow {
            step: n,
            t,
            y: y.clone(),
            energy_error,
            invariant_errors,
            alpha,
            g_evals,
            stage_iterations: result.iterations,
            degenerate,
        });
        previous = Some((result, alpha));
    }
    Ok(TrajectoryRecord {
        invariant_names: system.invariants().iter().map(|inv| inv.name.to_string()).collect(),
        rows,
        partial_last_step: partial,
        initial_energy: h0,
    })
}

/// Where the exact solution at `t_end` comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum Reference {
    /// Closed-form Kepler solution.
    KeplerExact,
    /// Gauss s=3 run with stepsize `h`, checked against a run at `h/2`.
    FineGauss { h: f64, agreement: f64 },
}

/// Reference state at `spec.t_end` and how it was obtained.
pub fn reference_solution(spec: &RunSpec, h_min: f64) -> Result<(Vec<f64>, Reference)> {
    let (system, ic) = spec.problem.build()?;
    let y0 = spec.initial_state(system.as_ref(), &ic.y0)?;
    if let Problem::Kepler { e } = spec.problem {
        if y0 == ic.y0 {
            return Ok((kepler_reference(e, spec.t_end)?.to_vec(), Reference::KeplerExact));
        }
    }
    fine_reference(system.as_ref(), &y0, spec.t_end, h_min / 8.0)
}

/// Richardson-checked Gauss s=3 solution: refine until two successive runs
/// agree to [`REFERENCE_AGREEMENT`].
pub fn fine_reference(system: &dyn Hamiltonian, y0: &[f64], t_end: f64, h: f64) -> Result<(Vec<f64>, Reference)> {
    let run = |h: f64| -> Result<Vec<f64>> {
        let mut spec = RunSpec::new(Problem::Harmonic, Method::Gauss, 3, h, t_end);
        spec.step.stage_tol = 1e-15;
        Ok(integrate_system(system, y0, &spec)?.final_state().to_vec())
    };
    let mut h = h;
    let mut coarse = run(h)?;
    for _ in 0..REFERENCE_REFINEMENTS {
        let fine = run(h / 2.0)?;
        let agreement = distance(&coarse, &fine);
        if agreement <= REFERENCE_AGREEMENT {
            return Ok((fine, Reference::FineGauss { h: h / 2.0, agreement }));
        }
        h /= 2.0;
        coarse = fine;
    }
    Err(Error::Numerical(format!(
        "reference solution did not settle to {REFERENCE_AGREEMENT:e} after {REFERENCE_REFINEMENTS} refinements"
    )))
}

pub const REFERENCE_AGREEMENT: f64 = 1e-12;
const REFERENCE_REFINEMENTS: usize = 3;

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceRow {
    pub h: f64,
    /// Euclidean global error at `t_end`.
    pub e_h: f64,
    /// `log₂(e(h_prev)/e(h))`; NaN on the first row.
    pub order: f64,
    /// NaN for methods without a per-step α*.
    pub delta_h: f64,
    /// `δ(h) / h^{2r}`.
    pub delta_scaled: f64,
    pub max_energy_error: f64,
    pub g_evals: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceTable {
    pub rows: Vec<ConvergenceRow>,
    pub reference: Reference,
    /// Exponent `2r` used for `delta_scaled`.
    pub delta_power: Option<usize>,
}

/// Runs `base` at every stepsize of `h_list` (strictly decreasing) and
/// compares with the reference solution. Rows run concurrently.
pub fn convergence_table(base: &RunSpec, h_list: &[f64]) -> Result<ConvergenceTable> {
    if h_list.is_empty() {
        return Err(Error::InvalidArgument("h list is empty".into()));
    }
    if h_list.windows(2).any(|w| !(w[1] < w[0])) {
        return Err(Error::InvalidArgument("h list must be strictly decreasing".into()));
    }
    let specs: Vec<RunSpec> = h_list.iter().map(|&h| base.with_h(h)).collect();
    for spec in &specs {
        spec.validate()?;
    }
    let h_min = *h_list.last().expect("nonempty");
    let (reference, reference_kind) = reference_solution(base, h_min)?;
    let records: Vec<TrajectoryRecord> = specs.par_iter().map(integrate).collect::<Result<_>>()?;
    let delta_power = base.r()?.map(|r| 2 * r).filter(|_| base.method.is_energy_preserving());
    let mut rows: Vec<ConvergenceRow> = Vec::with_capacity(records.len());
    for (rec, &h) in records.iter().zip(h_list) {
        let e_h = distance(rec.final_state(), &reference);
        let order = rows.last().map_or(f64::NAN, |prev| (prev.e_h / e_h).log2() / (prev.h / h).log2());
        let (delta_h, delta_scaled) = match delta_power {
            Some(p) => {
                let d = rec.delta();
                (d, d / h.powi(p as i32))
            }
            None => (f64::NAN, f64::NAN),
        };
        rows.push(ConvergenceRow {
            h,
            e_h,
            order,
            delta_h,
            delta_scaled,
            max_energy_error: rec.max_energy_error(),
            g_evals: rec.total_g_evals(),
        });
    }
    Ok(ConvergenceTable { rows, reference: reference_kind, delta_power })
}

/// Least-squares slope of `log|g|` against `log h`.
#[derive(Debug, Clone, PartialEq)]
pub struct DefectOrder {
    pub points: Vec<(f64, f64)>,
    /// `None` when g vanished (below [`DEGENERATE_DEFECT`]) at every h.
    pub slope: Option<f64>,
}

pub const DEGENERATE_DEFECT: f64 = 1e-15;

/// Fits the order of the one-step energy defect `g(α, h)` from `y0`.
pub fn energy_defect_order(
    system: &dyn Hamiltonian,
    s: usize,
    perturb_index: usize,
    y0: &[f64],
    alpha: f64,
    h_list: &[f64],
    step_cfg: &StepConfig,
) -> Result<DefectOrder> {
    if h_list.len() < 3 {
        return Err(Error::InvalidArgument("the order fit needs at least 3 stepsizes".into()));
    }
    if h_list.iter().any(|&h| !(h > 0.0)) {
        return Err(Error::InvalidArgument("stepsizes must be positive".into()));
    }
    let family = MethodFamily::new(s, Some(perturb_index))?;
    let target = system.energy(y0)?;
    let points = h_list
        .iter()
        .map(|&h| {
            let defect = EnergyDefect { system, family: &family, y0, target, step_cfg: step_cfg.with_h(h), guess: None };
            defect.eval(alpha).map(|(g, _)| (h, g))
        })
        .collect::<Result<Vec<_>>>()?;
    if points.iter().all(|(_, g)| g.abs() < DEGENERATE_DEFECT) {
        return Ok(DefectOrder { points, slope: None });
    }
    let logs: Vec<(f64, f64)> = points
        .iter()
        .filter(|(_, g)| *g != 0.0)
        .map(|(h, g)| (h.ln(), g.abs().ln()))
        .collect();
    Ok(DefectOrder { points, slope: least_squares_slope(&logs) })
}

pub fn least_squares_slope(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = points.iter().map(|(x, _)| (x - mx).powi(2)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// Whether `(q₁, q₂)` lies strictly inside the triangle spanned by the
/// Hénon-Heiles saddles `(0, 1)`, `(±√3/2, -1/2)`.
pub fn inside_saddle_triangle(q1: f64, q2: f64) -> bool {
    // The triangle is bounded by q₂ > -1/2 and q₂ < 1 ∓ √3 q₁.
    let r3 = 3f64.sqrt();
    q2 > -0.5 && q2 < 1.0 - r3 * q1 && q2 < 1.0 + r3 * q1
}

fn fmt(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes `# key = value` header lines.
pub fn write_header(out: &mut impl Write, header: &[(String, String)]) -> std::io::Result<()> {
    for (k, v) in header {
        writeln!(out, "# {k} = {v}")?;
    }
    Ok(())
}

pub fn write_trajectory_csv(out: &mut impl Write, record: &TrajectoryRecord) -> std::io::Result<()> {
    let dim = record.rows[0].y.len();
    let mut cols: Vec<String> = vec!["step".into(), "t".into()];
    cols.extend((1..=dim).map(|i| format!("y{i}")));
    cols.push("H_err".into());
    cols.extend(record.invariant_names.iter().map(|n| format!("{n}_err")));
    cols.extend(["alpha_star".into(), "g_evals".into(), "stage_iters".into()]);
    writeln!(out, "{}", cols.join(","))?;
    for row in &record.rows {
        let mut fields = vec![row.step.to_string(), fmt(row.t)];
        fields.extend(row.y.iter().map(|&v| fmt(v)));
        fields.push(fmt(row.energy_error));
        fields.extend(row.invariant_errors.iter().map(|&v| fmt(v)));
        fields.extend([fmt(row.alpha), row.g_evals.to_string(), row.stage_iterations.to_string()]);
        writeln!(out, "{}", fields.join(","))?;
    }
    Ok(())
}

pub fn write_convergence_csv(out: &mut impl Write, table: &ConvergenceTable) -> std::io::Result<()> {
    writeln!(out, "h,e_h,order,delta_h,delta_scaled")?;
    for r in &table.rows {
        writeln!(out, "{},{},{},{},{}", fmt(r.h), fmt(r.e_h), fmt(r.order), fmt(r.delta_h), fmt(r.delta_scaled))?;
    }
    Ok(())
}

pub fn write_levelmap_csv(out: &mut impl Write, grid: &crate::conserve::LevelGrid) -> std::io::Result<()> {
    writeln!(out, "h,alpha,g")?;
    for (j, &h) in grid.h_values.iter().enumerate() {
        for (i, &alpha) in grid.alpha_values.iter().enumerate() {
            writeln!(out, "{},{},{}", fmt(h), fmt(alpha), fmt(grid.values[i][j]))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kepler_spec(method: Method, h: f64, t_end: f64) -> RunSpec {
        RunSpec::new(Problem::Kepler { e: 0.6 }, method, 2, h, t_end)
    }

    #[test]
    fn perturb_index_rules() {
        assert_eq!(Method::Gauss.perturb_index(2, None).unwrap(), None);
        assert_eq!(Method::EpGauss.perturb_index(3, None).unwrap(), Some(2));
        assert_eq!(Method::EpGaussType2.perturb_index(3, None).unwrap(), Some(1));
        assert_eq!(Method::FixedAlpha(1e-3).perturb_index(4, Some(2)).unwrap(), Some(2));
        assert!(Method::EpGauss.perturb_index(3, Some(1)).is_err());
        assert!(Method::EpGaussType2.perturb_index(2, None).is_err());
        assert!(Method::EpGauss.perturb_index(1, None).is_err());
        assert!(Method::Gauss.perturb_index(2, Some(1)).is_err());
        assert!(Method::FixedAlpha(0.1).perturb_index(3, Some(3)).is_err());
    }

    #[test]
    fn step_plan_flags_partial_steps() {
        assert_eq!(step_plan(0.25, 50.0), (200, 0.25));
        assert_eq!(step_plan(0.1, 1.0), (10, 0.1));
        let (n, last) = step_plan(0.3, 1.0);
        assert_eq!(n, 4);
        assert!((last - 0.1).abs() < 1e-12);
    }

    #[test]
    fn partial_step_is_excluded_from_delta() {
        let rec = integrate(&kepler_spec(Method::EpGauss, 0.3, 1.0)).unwrap();
        assert!(rec.partial_last_step);
        assert_eq!(rec.rows.len(), 5);
        assert_eq!(rec.rows.last().unwrap().t, 1.0);
        assert_eq!(rec.alpha_trace().count(), 3);
    }

    #[test]
    fn ep_gauss_conserves_energy_and_momentum() {
        let rec = integrate(&kepler_spec(Method::EpGauss, 1.0 / 16.0, 5.0)).unwrap();
        assert!(rec.max_energy_error() <= 2e-13, "{:e}", rec.max_energy_error());
        assert!(rec.max_invariant_error(0) <= 1e-12);
        let gauss = integrate(&kepler_spec(Method::Gauss, 1.0 / 16.0, 5.0)).unwrap();
        assert!(gauss.max_energy_error() > 1e-9);
        assert!(rec.rows[1..].iter().all(|r| r.g_evals > 0 && r.alpha != 0.0));
    }

    #[test]
    fn harmonic_alpha_trace_is_zero() {
        let spec = RunSpec::new(Problem::Harmonic, Method::EpGauss, 2, 0.1, 10.0);
        let rec = integrate(&spec).unwrap();
        assert_eq!(rec.rows.len(), 101);
        assert!(rec.alpha_trace().all(|a| a == 0.0));
        assert!(rec.rows[1..].iter().all(|r| r.degenerate));
        assert!(rec.max_energy_error() <= 1e-13);
    }

    #[test]
    fn secant_and_bisection_trajectories_agree() {
        let spec = kepler_spec(Method::EpGauss, 1.0 / 16.0, 3.0);
        let mut sec = spec.clone();
        sec.search.strategy = crate::conserve::AlphaStrategy::Secant;
        let a = integrate(&spec).unwrap();
        let b = integrate(&sec).unwrap();
        // Near apocenter dg/dα is small and α* is only resolved to ~1e-10.
        for (ra, rb) in a.rows.iter().zip(&b.rows).skip(1) {
            assert!((ra.alpha - rb.alpha).abs() <= 1e-9);
        }
        assert!(b.max_energy_error() <= 2e-13);
        assert!(b.total_g_evals() < a.total_g_evals());
    }

    #[test]
    fn extrapolated_guess_matches_default() {
        let spec = kepler_spec(Method::EpGauss, 1.0 / 16.0, 2.0);
        let mut ext = spec.clone();
        ext.step.stage_guess = StageGuess::Extrapolated;
        let a = integrate(&spec).unwrap();
        let b = integrate(&ext).unwrap();
        let iters = |r: &TrajectoryRecord| r.rows.iter().map(|r| r.stage_iterations).sum::<usize>();
        assert!(iters(&b) < iters(&a));
        assert!(distance(a.final_state(), b.final_state()) < 1e-11);
    }

    #[test]
    fn single_row_table_has_no_order() {
        let table = convergence_table(&kepler_spec(Method::EpGauss, 0.25, 2.0), &[0.25]).unwrap();
        assert_eq!(table.rows.len(), 1);
        assert!(table.rows[0].order.is_nan());
        assert_eq!(table.reference, Reference::KeplerExact);
        assert_eq!(table.delta_power, Some(2));
        assert!(convergence_table(&kepler_spec(Method::EpGauss, 0.25, 2.0), &[0.1, 0.25]).is_err());
    }

    #[test]
    fn gauss_rows_have_no_delta() {
        let table = convergence_table(&kepler_spec(Method::Gauss, 0.25, 2.0), &[0.25, 0.125]).unwrap();
        assert!(table.rows.iter().all(|r| r.delta_h.is_nan()));
        assert!(table.rows[1].order > 3.0);
    }

    #[test]
    fn harmonic_defect_is_degenerate() {
        let (sys, ic) = crate::problems::harmonic();
        let fit = energy_defect_order(&sys, 2, 1, &ic.y0, 0.0, &[0.1, 0.05, 0.025], &StepConfig::new(0.1)).unwrap();
        assert_eq!(fit.slope, None);
    }

    #[test]
    fn slope_fit() {
        let pts: Vec<(f64, f64)> = (1..5).map(|k| (k as f64, 3.0 * k as f64 + 1.0)).collect();
        assert!((least_squares_slope(&pts).unwrap() - 3.0).abs() < 1e-14);
        assert_eq!(least_squares_slope(&pts[..1]), None);
    }

    #[test]
    fn triangle_membership() {
        assert!(inside_saddle_triangle(0.0, 0.0));
        assert!(!inside_saddle_triangle(0.0, 1.0));
        assert!(!inside_saddle_triangle(0.9, -0.4));
        assert!(!inside_saddle_triangle(0.0, -0.6));
        assert!(inside_saddle_triangle(0.5, -0.4));
    }

    #[test]
    fn csv_layout() {
        let rec = integrate(&kepler_spec(Method::EpGauss, 0.25, 0.5)).unwrap();
        let mut buf = Vec::new();
        write_header(&mut buf, &[("h".into(), "0.25".into())]).unwrap();
        write_trajectory_csv(&mut buf, &rec).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "# h = 0.25");
        assert_eq!(lines[1], "step,t,y1,y2,y3,y4,H_err,L_err,alpha_star,g_evals,stage_iters");
        assert_eq!(lines.len(), 5);
        assert!(lines[2].starts_with("0,0.0000000000000000e0,4.0000000000000002e-1"));
    }
}
