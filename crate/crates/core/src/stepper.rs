//! One step of an implicit Runge-Kutta method `(c, A(α), b)` and the
//! stage-interpolating polynomial σ of that step.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::problems::Hamiltonian;
use crate::tableau::{ButcherTableau, LagrangeBasis};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum StageSolver {
    /// Picard iteration, falling back to Newton when it stalls.
    FixedPoint,
    /// Newton with the Jacobian frozen at `y0`, refreshed per stage when the
    /// contraction is poor.
    SimplifiedNewton,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum StageGuess {
    /// All stages start at `y0`.
    FromY0,
    /// Stages start from the previous step's interpolant evaluated at `1 + cᵢ`.
    Extrapolated,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepConfig {
    /// Stepsize; nonzero, may be negative.
    pub h: f64,
    pub stage_tol: f64,
    pub max_iters: usize,
    pub solver: StageSolver,
    pub stage_guess: StageGuess,
}

impl StepConfig {
    pub fn new(h: f64) -> Self {
        Self {
            h,
            stage_tol: 1e-14,
            max_iters: 100,
            solver: StageSolver::FixedPoint,
            stage_guess: StageGuess::FromY0,
        }
    }

    pub fn with_h(&self, h: f64) -> Self {
        Self { h, ..*self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.h.is_finite() && self.h != 0.0) {
            return Err(Error::InvalidArgument(format!("stepsize must be finite and nonzero, got {}", self.h)));
        }
        if !(self.stage_tol > 0.0) {
            return Err(Error::InvalidArgument(format!("stage_tol must be positive, got {}", self.stage_tol)));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidArgument("max_iters must be at least 1".into()));
        }
        Ok(())
    }
}

/// Outcome of one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub y0: Vec<f64>,
    pub h: f64,
    pub y1: Vec<f64>,
    /// `h Σ bⱼ f(Yⱼ)`, so that `y1 = y0 + increment` up to one rounding.
    pub increment: Vec<f64>,
    /// Stages `Y₁..Y_s`, row-major `s × 2m`.
    pub stages: Vec<f64>,
    /// `f(Yⱼ)`, same layout as `stages`.
    pub slopes: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Final scaled stage increment.
    pub stage_residual: f64,
    /// Whether the Newton fallback was needed.
    pub used_newton: bool,
}

impl StepResult {
    pub fn dim(&self) -> usize {
        self.y0.len()
    }

    pub fn stage_count(&self) -> usize {
        self.stages.len() / self.dim()
    }

    pub fn stage(&self, i: usize) -> &[f64] {
        let n = self.dim();
        &self.stages[i * n..(i + 1) * n]
    }

    fn slope(&self, j: usize) -> &[f64] {
        let n = self.dim();
        &self.slopes[j * n..(j + 1) * n]
    }
}

fn max_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()))
}

fn eval_slopes(system: &dyn Hamiltonian, stages: &[f64], n: usize, slopes: &mut [f64]) -> Result<()> {
    for (y, f) in stages.chunks_exact(n).zip(slopes.chunks_exact_mut(n)) {
        system.vector_field(y, f)?;
    }
    Ok(())
}

enum Attempt {
    Converged { iterations: usize, residual: f64 },
    Failed { iterations: usize, residual: f64 },
}

struct StageProblem<'a> {
    system: &'a dyn Hamiltonian,
    a: Vec<f64>,
    s: usize,
    n: usize,
    y0: &'a [f64],
    h: f64,
    scale: f64,
    tol: f64,
    max_iters: usize,
}

impl StageProblem<'_> {
    fn picard(&self, stages: &mut [f64], slopes: &mut [f64]) -> Result<Attempt> {
        let (s, n) = (self.s, self.n);
        let mut history: Vec<f64> = Vec::with_capacity(self.max_iters);
        let mut next = vec![0.0; s * n];
        for k in 1..=self.max_iters {
            match eval_slopes(self.system, stages, n, slopes) {
                Ok(()) => {}
                // Diverging iterates may leave the domain; let Newton retry.
                Err(Error::Domain(_)) => return Ok(Attempt::Failed { iterations: k, residual: f64::INFINITY }),
                Err(e) => return Err(e),
            }
            for i in 0..s {
                let row = &mut next[i * n..(i + 1) * n];
                row.copy_from_slice(self.y0);
                for j in 0..s {
                    let w = self.h * self.a[i * s + j];
                    for (r, f) in row.iter_mut().zip(&slopes[j * n..(j + 1) * n]) {
                        *r += w * f;
                    }
                }
            }
            let inc = next.iter().zip(stages.iter()).fold(0.0_f64, |m, (a, b)| m.max((a - b).abs())) / self.scale;
            stages.copy_from_slice(&next);
            if inc <= self.tol {
                return Ok(Attempt::Converged { iterations: k, residual: inc });
            }
            let stalled = !inc.is_finite() || (history.len() >= 10 && inc > 0.5 * history[history.len() - 10]);
            history.push(inc);
            if stalled {
                return Ok(Attempt::Failed { iterations: k, residual: inc });
            }
        }
        Ok(Attempt::Failed { iterations: self.max_iters, residual: *history.last().unwrap_or(&f64::INFINITY) })
    }

    /// Newton matrix `I - h (A ⊗ ·)` built from per-stage Jacobians.
    fn newton_matrix(&self, jacobians: &[Vec<f64>]) -> DMatrix<f64> {
        let (s, n) = (self.s, self.n);
        let mut m = DMatrix::identity(s * n, s * n);
        for i in 0..s {
            for j in 0..s {
                let w = self.h * self.a[i * s + j];
                let jac = &jacobians[j.min(jacobians.len() - 1)];
                for r in 0..n {
                    for c in 0..n {
                        m[(i * n + r, j * n + c)] -= w * jac[r * n + c];
                    }
                }
            }
        }
        m
    }

    /// Stage residual `Y - e⊗y₀ - h(A⊗I)F(Y)`, refreshing `slopes`; returns
    /// its scaled max-norm.
    fn residual(&self, stages: &[f64], slopes: &mut [f64], out: &mut [f64]) -> Result<f64> {
        let (s, n) = (self.s, self.n);
        eval_slopes(self.system, stages, n, slopes)?;
        for i in 0..s {
            for r in 0..n {
                let mut acc = stages[i * n + r] - self.y0[r];
                for j in 0..s {
                    acc -= self.h * self.a[i * s + j] * slopes[j * n + r];
                }
                out[i * n + r] = acc;
            }
        }
        Ok(max_norm(out) / self.scale)
    }

    fn stage_jacobians(&self, stages: &[f64]) -> Result<Vec<Vec<f64>>> {
        stages
            .chunks_exact(self.n)
            .map(|y| {
                let mut jac = vec![0.0; self.n * self.n];
                self.system.vector_field_jacobian(y, &mut jac).map(|_| jac)
            })
            .collect()
    }

    /// Newton iteration with backtracking on the residual norm. The Jacobian
    /// starts frozen at `y0` and is refreshed per stage whenever a step
    /// contracts poorly or needs damping.
    fn newton(&self, stages: &mut [f64], slopes: &mut [f64]) -> Result<Attempt> {
        let (s, n) = (self.s, self.n);
        let mut jac0 = vec![0.0; n * n];
        self.system.vector_field_jacobian(self.y0, &mut jac0)?;
        let mut lu = self.newton_matrix(&[jac0]).lu();
        let mut prev_inc = f64::INFINITY;
        let mut residual = vec![0.0; s * n];
        let mut trial = vec![0.0; s * n];
        let mut trial_slopes = vec![0.0; s * n];
        let mut trial_residual = vec![0.0; s * n];
        let mut norm = match self.residual(stages, slopes, &mut residual) {
            Ok(v) => v,
            Err(Error::Domain(_)) => return Ok(Attempt::Failed { iterations: 0, residual: f64::INFINITY }),
            Err(e) => return Err(e),
        };
        for k in 1..=self.max_iters {
            let rhs = DVector::from_iterator(s * n, residual.iter().map(|v| -v));
            let delta = lu
                .solve(&rhs)
                .ok_or_else(|| Error::Numerical("singular Newton matrix in stage solve".into()))?;
            let full = max_norm(delta.as_slice()) / self.scale;
            if !full.is_finite() {
                return Ok(Attempt::Failed { iterations: k, residual: full });
            }
            let mut lambda = 1.0;
            let accepted = loop {
                for ((t, y), d) in trial.iter_mut().zip(stages.iter()).zip(delta.iter()) {
                    *t = y + lambda * d;
                }
                let new_norm = match self.residual(&trial, &mut trial_slopes, &mut trial_residual) {
                    Ok(v) => v,
                    Err(Error::Domain(_)) => f64::INFINITY,
                    Err(e) => return Err(e),
                };
                // Near convergence the residual is rounding noise; accept.
                if new_norm < norm || full <= NEWTON_ACCEPT * self.tol {
                    norm = new_norm;
                    break true;
                }
                if lambda < MIN_DAMPING {
                    break false;
                }
                lambda *= 0.5;
            };
            if !accepted {
                return Ok(Attempt::Failed { iterations: k, residual: full });
            }
            stages.copy_from_slice(&trial);
            slopes.copy_from_slice(&trial_slopes);
            residual.copy_from_slice(&trial_residual);
            let inc = lambda * full;
            if lambda == 1.0 && inc <= self.tol {
                return Ok(Attempt::Converged { iterations: k, residual: inc });
            }
            if lambda < 1.0 || inc > 0.25 * prev_inc {
                match self.stage_jacobians(stages) {
                    Ok(jacobians) => lu = self.newton_matrix(&jacobians).lu(),
                    Err(Error::Domain(_)) => return Ok(Attempt::Failed { iterations: k, residual: inc }),
                    Err(e) => return Err(e),
                }
            }
            prev_inc = inc;
        }
        Ok(Attempt::Failed { iterations: self.max_iters, residual: prev_inc })
    }
}

/// Below this many stage tolerances a Newton step is taken undamped.
const NEWTON_ACCEPT: f64 = 1e3;
const MIN_DAMPING: f64 = 1.0 / 1024.0;

/// Advances one step from `y0`, starting all stages at `y0`.
pub fn step(system: &dyn Hamiltonian, tableau: &ButcherTableau, y0: &[f64], cfg: &StepConfig) -> Result<StepResult> {
    step_with_guess(system, tableau, y0, cfg, None)
}

/// Like [`step`], with an optional initial guess for the stages (row-major
/// `s × 2m`).
pub fn step_with_guess(
    system: &dyn Hamiltonian,
    tableau: &ButcherTableau,
    y0: &[f64],
    cfg: &StepConfig,
    guess: Option<&[f64]>,
) -> Result<StepResult> {
    cfg.validate()?;
    let n = system.dim();
    if y0.len() != n {
        return Err(Error::InvalidArgument(format!("state has length {}, system expects {n}", y0.len())));
    }
    if y0.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("initial state is not finite".into()));
    }
    let s = tableau.stages();
    let a: Vec<f64> = (0..s * s).map(|k| tableau.a[(k / s, k % s)]).collect();
    let problem = StageProblem {
        system,
        a,
        s,
        n,
        y0,
        h: cfg.h,
        scale: 1.0 + max_norm(y0),
        tol: cfg.stage_tol,
        max_iters: cfg.max_iters,
    };
    let initial: Vec<f64> = match guess {
        Some(g) if g.len() == s * n && g.iter().all(|v| v.is_finite()) => g.to_vec(),
        _ => y0.repeat(s),
    };

    let mut stages = initial.clone();
    let mut slopes = vec![0.0; s * n];
    let mut used_newton = false;
    let mut total = 0;
    let mut attempt = match cfg.solver {
        StageSolver::FixedPoint => problem.picard(&mut stages, &mut slopes)?,
        StageSolver::SimplifiedNewton => {
            used_newton = true;
            problem.newton(&mut stages, &mut slopes)?
        }
    };
    if let (Attempt::Failed { iterations, .. }, StageSolver::FixedPoint) = (&attempt, cfg.solver) {
        total += iterations;
        used_newton = true;
        stages.copy_from_slice(&initial);
        attempt = problem.newton(&mut stages, &mut slopes)?;
    }
    let (iterations, residual, converged) = match attempt {
        Attempt::Converged { iterations, residual } => (iterations, residual, true),
        Attempt::Failed { iterations, residual } => (iterations, residual, false),
    };
    total += iterations;

    let mut increment = vec![0.0; n];
    if converged {
        eval_slopes(system, &stages, n, &mut slopes)?;
        let b = &tableau.quadrature.b;
        for j in 0..s {
            let w = cfg.h * b[j];
            for (d, f) in increment.iter_mut().zip(&slopes[j * n..(j + 1) * n]) {
                *d += w * f;
            }
        }
    } else {
        increment.iter_mut().for_each(|v| *v = f64::NAN);
    }
    let y1 = y0.iter().zip(&increment).map(|(y, d)| y + d).collect();
    Ok(StepResult {
        y0: y0.to_vec(),
        h: cfg.h,
        y1,
        increment,
        stages,
        slopes,
        iterations: total,
        converged,
        stage_residual: residual,
        used_newton,
    })
}

/// Weights `wⱼ(τ)` with `σ(τ) = y₀ + h Σⱼ wⱼ(τ) f(Yⱼ)`; `derivative` selects
/// `dwⱼ/dτ` instead.
fn interpolant_weights(basis: &LagrangeBasis, gamma: &DMatrix<f64>, alpha: f64, tau: f64, derivative: bool) -> Vec<f64> {
    let s = basis.len();
    let base: Vec<f64> = (0..s)
        .map(|k| if derivative { basis.value(k, tau) } else { basis.integral(k, tau) })
        .collect();
    (0..s)
        .map(|j| base[j] + alpha * (0..s).map(|k| gamma[(k, j)] * base[k]).sum::<f64>())
        .collect()
}

fn check_dense_inputs(result: &StepResult, tableau: &ButcherTableau, gamma: &DMatrix<f64>) -> Result<()> {
    if !result.converged {
        return Err(Error::InvalidArgument("step did not converge".into()));
    }
    let s = tableau.stages();
    if result.stage_count() != s || gamma.nrows() != s || gamma.ncols() != s {
        return Err(Error::InvalidArgument("stage count mismatch between step, tableau and Γ".into()));
    }
    Ok(())
}

fn evaluate_interpolant(result: &StepResult, basis: &LagrangeBasis, gamma: &DMatrix<f64>, alpha: f64, tau: f64) -> Vec<f64> {
    let w = interpolant_weights(basis, gamma, alpha, tau, false);
    let mut out = result.y0.clone();
    for (j, wj) in w.iter().enumerate() {
        for (o, f) in out.iter_mut().zip(result.slope(j)) {
            *o += result.h * wj * f;
        }
    }
    out
}

/// The quasi-collocation polynomial `σ(t₀ + τh)` for `τ ∈ [0, 1]`.
///
/// α is taken from the tableau's single-parameter perturbation; `gamma` is the
/// matching unit Γ (any matrix when α = 0).
pub fn dense_output(result: &StepResult, tableau: &ButcherTableau, gamma: &DMatrix<f64>, tau: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::InvalidArgument(format!("τ must lie in [0, 1], got {tau}")));
    }
    check_dense_inputs(result, tableau, gamma)?;
    let alpha = tableau
        .perturbation
        .alpha()
        .ok_or_else(|| Error::InvalidArgument("dense output needs a single-parameter perturbation".into()))?;
    if tau == 0.0 {
        return Ok(result.y0.clone());
    }
    let basis = LagrangeBasis::new(&tableau.quadrature.c);
    Ok(evaluate_interpolant(result, &basis, gamma, alpha, tau))
}

/// Initial stage guess for the next step from this step's interpolant,
/// evaluated at `τ = 1 + cᵢ` (extrapolation, same stepsize).
pub fn extrapolated_guess(result: &StepResult, tableau: &ButcherTableau, gamma: &DMatrix<f64>) -> Vec<f64> {
    let basis = LagrangeBasis::new(&tableau.quadrature.c);
    let alpha = tableau.perturbation.alpha().unwrap_or(0.0);
    tableau
        .quadrature
        .c
        .iter()
        .flat_map(|&c| evaluate_interpolant(result, &basis, gamma, alpha, 1.0 + c))
        .collect()
}

/// Residuals of the quasi-collocation conditions at each node:
/// `σ̇(t₀+cᵢh) - f(σ(t₀+cᵢh)) - α Σⱼ γᵢⱼ f(σ(t₀+cⱼh))`, max-norm per node.
pub fn collocation_defect(
    result: &StepResult,
    system: &dyn Hamiltonian,
    tableau: &ButcherTableau,
    gamma: &DMatrix<f64>,
    alpha: f64,
) -> Result<Vec<f64>> {
    check_dense_inputs(result, tableau, gamma)?;
    let s = tableau.stages();
    let n = result.dim();
    let c = &tableau.quadrature.c;
    let basis = LagrangeBasis::new(c);

    let mut f_sigma = vec![0.0; s * n];
    for j in 0..s {
        let sigma = evaluate_interpolant(result, &basis, gamma, alpha, c[j]);
        system.vector_field(&sigma, &mut f_sigma[j * n..(j + 1) * n])?;
    }
    let mut out = Vec::with_capacity(s);
    for i in 0..s {
        // dσ/dt = (1/h) dσ/dτ.
        let w = interpolant_weights(&basis, gamma, alpha, c[i], true);
        let mut worst = 0.0_f64;
        for r in 0..n {
            let sigma_dot: f64 = (0..s).map(|j| w[j] * result.slope(j)[r]).sum();
            let rhs = f_sigma[i * n + r] + alpha * (0..s).map(|j| gamma[(i, j)] * f_sigma[j * n + r]).sum::<f64>();
            worst = worst.max((sigma_dot - rhs).abs());
        }
        out.push(worst);
    }
    Ok(out)
}
