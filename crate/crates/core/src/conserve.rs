//! Per-step tuning of α so that `g(α) = H(y₁(α)) - H(y₀)` vanishes.
//!
//! Two strategies are available: a bracket scan followed by bisection carried
//! to full precision, and a warm-started secant iteration that falls back to
//! bisection when it misbehaves.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::problems::Hamiltonian;
use crate::stepper::{step_with_guess, StepConfig, StepResult};
use crate::tableau::MethodFamily;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum AlphaStrategy {
    Bisection,
    Secant,
}

/// How the secant iteration picks its second starting point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum SecantWarmStart {
    /// Previous step's α*; the bracket seed on the first step.
    FromHistory,
    /// `α₀ = 0`, `α₁ = c·|h|^r`.
    Power { c: f64, r: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AlphaSearchConfig {
    pub strategy: AlphaStrategy,
    /// Tolerance on |g|, scaled by `max(1, |H(y0)|)`.
    pub g_tol: f64,
    /// Bisection stops once the bracket is this narrow.
    pub alpha_tol: f64,
    pub max_g_evals: usize,
    /// Half-width of the first scanned interval; `None` means
    /// `min(10 h², 1e-3)`.
    pub bracket_seed: Option<f64>,
    pub bracket_growth: f64,
    pub bracket_max: f64,
    pub secant_warm_start: SecantWarmStart,
}

impl Default for AlphaSearchConfig {
    fn default() -> Self {
        Self {
            strategy: AlphaStrategy::Bisection,
            g_tol: 1e-13,
            alpha_tol: 1e-16,
            max_g_evals: 60,
            bracket_seed: None,
            bracket_growth: 2.0,
            bracket_max: 0.5,
            secant_warm_start: SecantWarmStart::FromHistory,
        }
    }
}

impl AlphaSearchConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.g_tol, self.alpha_tol, self.bracket_max];
        if positive.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::InvalidArgument("α search tolerances must be positive".into()));
        }
        if !(self.bracket_growth > 1.0) {
            return Err(Error::InvalidArgument("bracket_growth must exceed 1".into()));
        }
        if let Some(seed) = self.bracket_seed {
            if !(seed > 0.0 && seed < self.bracket_max) {
                return Err(Error::InvalidArgument(format!(
                    "bracket_seed must lie in (0, bracket_max), got {seed}"
                )));
            }
        }
        if self.max_g_evals < 3 {
            return Err(Error::InvalidArgument("max_g_evals must be at least 3".into()));
        }
        Ok(())
    }

    /// Initial scan half-width for stepsize `h`.
    pub fn seed(&self, h: f64) -> f64 {
        self.bracket_seed.unwrap_or((10.0 * h * h).min(DEFAULT_SEED_CAP)).min(0.5 * self.bracket_max)
    }
}

/// Cap on the default seed: at large h, g is far from linear over `±10 h²`.
const DEFAULT_SEED_CAP: f64 = 1e-3;

/// Outcome of one α search.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaSolveRecord {
    pub alpha_star: f64,
    pub g_residual: f64,
    pub g_evals: usize,
    /// Final bracket with `g(α₁) g(α₂) < 0`, when one was used.
    pub bracket: Option<(f64, f64)>,
    /// g vanished (to tolerance) over the whole initial bracket.
    pub degenerate: bool,
    /// The step taken with `alpha_star`.
    pub step: StepResult,
}

/// The scalar function `g(α) = H(y₁(α)) - target` for one step.
pub struct EnergyDefect<'a> {
    pub system: &'a dyn Hamiltonian,
    pub family: &'a MethodFamily,
    pub y0: &'a [f64],
    pub target: f64,
    pub step_cfg: StepConfig,
    pub guess: Option<&'a [f64]>,
}

impl EnergyDefect<'_> {
    pub fn eval(&self, alpha: f64) -> Result<(f64, StepResult)> {
        let tableau = self.family.tableau(alpha);
        let result = step_with_guess(self.system, &tableau, self.y0, &self.step_cfg, self.guess)?;
        if !result.converged {
            return Err(Error::StageNotConverged {
                iterations: result.iterations,
                residual: result.stage_residual,
            });
        }
        let offset = self.energy_offset()?;
        let g = self.system.energy_change(self.y0, &result.increment)? + offset;
        Ok((g, result))
    }
}

impl EnergyDefect<'_> {
    fn energy_offset(&self) -> Result<f64> {
        Ok(self.system.energy(self.y0)? - self.target)
    }

    /// Size below which the sign of g is rounding noise, for a step with
    /// the given increment.
    fn rounding_level(&self, increment: &[f64]) -> Result<f64> {
        let mut grad = vec![0.0; self.y0.len()];
        self.system.gradient(self.y0, &mut grad)?;
        let scale: f64 = grad.iter().zip(increment).map(|(g, d)| (g * d).abs()).sum();
        Ok(ROUNDING_ULPS * f64::EPSILON * (scale + self.energy_offset()?.abs()))
    }
}

/// `g(α) = H(y₁(α)) - H(y₀)` for the s-stage method perturbed at
/// `perturb_index`.
pub fn g_eval(
    system: &dyn Hamiltonian,
    s: usize,
    perturb_index: usize,
    y0: &[f64],
    h: f64,
    alpha: f64,
    cfg: &StepConfig,
) -> Result<(f64, StepResult)> {
    let family = MethodFamily::new(s, Some(perturb_index))?;
    let defect = EnergyDefect {
        system,
        family: &family,
        y0,
        target: system.energy(y0)?,
        step_cfg: cfg.with_h(h),
        guess: None,
    };
    defect.eval(alpha)
}

/// Running record of evaluations, keeping the best one seen.
struct Tracker<'a, 'b> {
    defect: &'a EnergyDefect<'b>,
    evals: usize,
    max_evals: usize,
    best: Option<(f64, f64, StepResult)>,
    at_zero: Option<(f64, StepResult)>,
    last: Option<(f64, f64, StepResult)>,
    /// Rounding level of g, `ε Σ |∂ᵢH · Δᵢ|` from the first evaluation.
    noise: f64,
}

impl<'a, 'b> Tracker<'a, 'b> {
    fn new(defect: &'a EnergyDefect<'b>, max_evals: usize) -> Self {
        Self { defect, evals: 0, max_evals, best: None, at_zero: None, last: None, noise: 0.0 }
    }

    fn exhausted(&self) -> bool {
        self.evals >= self.max_evals
    }

    fn g(&mut self, alpha: f64) -> Result<f64> {
        let (g, result) = self.defect.eval(alpha)?;
        if self.evals == 0 {
            self.noise = self.defect.rounding_level(&result.increment)?;
        }
        self.evals += 1;
        if alpha == 0.0 {
            self.at_zero = Some((g, result.clone()));
        }
        let better = match &self.best {
            None => true,
            Some((_, best_g, _)) => g.abs() < best_g.abs(),
        };
        if better {
            self.best = Some((alpha, g, result.clone()));
        }
        self.last = Some((alpha, g, result));
        Ok(g)
    }

    /// Makes the most recent evaluation the answer, overriding the
    /// smallest-|g| choice among rounding-level values.
    fn pin_last(&mut self) {
        if let Some(last) = self.last.clone() {
            self.best = Some(last);
        }
    }

    fn pin_zero(&mut self) {
        if let Some((g, step)) = self.at_zero.clone() {
            self.best = Some((0.0, g, step));
        }
    }

    fn finish(self, bracket: Option<(f64, f64)>, degenerate: bool, tol: f64) -> Result<AlphaSolveRecord> {
        let (alpha_star, g_residual, step) = self.best.expect("at least one evaluation");
        if !degenerate && g_residual.abs() > tol {
            return Err(Error::AlphaNotConverged { g_evals: self.evals, residual: g_residual.abs() });
        }
        Ok(AlphaSolveRecord { alpha_star, g_residual, g_evals: self.evals, bracket, degenerate, step })
    }
}

/// Retries per scan direction after stage-solver failures.
const SCAN_RETRIES: usize = 8;

fn opposite(a: f64, b: f64) -> bool {
    (a < 0.0 && b > 0.0) || (a > 0.0 && b < 0.0)
}

/// Final bracket of a bisection run.
struct Bisection {
    lo: f64,
    hi: f64,
    /// |g| did not shrink with the bracket: the sign change is a jump between
    /// stage-solution branches.
    jump: bool,
}

/// Bisection on `[lo, hi]` with `g(lo) g(hi) < 0`, until the bracket is
/// narrower than `alpha_tol`, can no longer be split, or g reaches rounding
/// level (beyond which its sign is noise).
fn bisect(tracker: &mut Tracker, mut lo: f64, mut g_lo: f64, mut hi: f64, mut g_hi: f64, alpha_tol: f64) -> Result<Bisection> {
    let noise = tracker.noise;
    let start = g_lo.abs() + g_hi.abs();
    let mut halvings = 0;
    while (hi - lo).abs() > alpha_tol && !tracker.exhausted() {
        let mid = 0.5 * (lo + hi);
        if mid == lo || mid == hi {
            break;
        }
        let g_mid = match tracker.g(mid) {
            Ok(g) => g,
            // No stage solution inside the bracket: g is not continuous here.
            Err(e) if is_stage_failure(&e) => return Ok(Bisection { lo, hi, jump: true }),
            Err(e) => return Err(e),
        };
        if g_mid.abs() <= noise {
            // Every α with |g| at rounding level is a root; take the linear
            // model of the bracket, whose endpoints are still above noise.
            let alpha = lo - g_lo * (hi - lo) / (g_hi - g_lo);
            if alpha != mid && tracker.g(alpha)?.abs() > noise {
                tracker.g(mid)?;
            }
            tracker.pin_last();
            let alpha = tracker.last.as_ref().map_or(mid, |l| l.0);
            return Ok(Bisection { lo: alpha, hi: alpha, jump: false });
        }
        if opposite(g_mid, g_lo) {
            hi = mid;
            g_hi = g_mid;
        } else {
            lo = mid;
            g_lo = g_mid;
        }
        halvings += 1;
        if halvings == JUMP_HALVINGS && g_lo.abs() + g_hi.abs() > JUMP_RATIO * start {
            return Ok(Bisection { lo, hi, jump: true });
        }
    }
    Ok(Bisection { lo, hi, jump: false })
}

/// |g| below this many ulps of its own scale is rounding noise.
const ROUNDING_ULPS: f64 = 4.0;

/// For a continuous g, `|g(lo)| + |g(hi)|` shrinks like the bracket (2⁻⁶
/// after 6 halvings); if it has not dropped below this ratio, g jumps.
const JUMP_HALVINGS: usize = 6;
const JUMP_RATIO: f64 = 0.25;

enum ScanStep {
    /// g stayed within tolerance of zero over the whole scan.
    Flat,
    Exact(f64),
    Bracket { side: usize, lo: f64, g_lo: f64, hi: f64, g_hi: f64 },
}

/// One direction of the bracket scan.
struct ScanSide {
    sign: f64,
    width: f64,
    prev: (f64, f64),
    retries: usize,
    done: bool,
}

impl ScanSide {
    fn advance(&mut self, alpha: f64, g: f64, cfg: &AlphaSearchConfig) {
        self.prev = (alpha, g);
        if self.width >= cfg.bracket_max {
            self.done = true;
        }
        self.width = (self.width * cfg.bracket_growth).min(cfg.bracket_max);
    }

    fn failed(&mut self) {
        self.retries += 1;
        if self.retries > SCAN_RETRIES {
            self.done = true;
        }
        self.width = 0.5 * (self.prev.0.abs() + self.width);
    }
}

/// Geometric scan over `±seed·growthᵏ` for sign changes of g, nearest to
/// zero first.
///
/// Widths over which g stays within `tol` of `g(0)` carry no usable sign
/// information and are skipped. When the stage solve fails at a scan point,
/// that side retries closer to its last good point and eventually stops.
struct Scanner {
    g0: f64,
    tol: f64,
    sides: [ScanSide; 2],
    flat: bool,
    failure: Option<Error>,
}

impl Scanner {
    fn new(tracker: &mut Tracker, cfg: &AlphaSearchConfig, h: f64, tol: f64) -> Result<Self> {
        let g0 = tracker.g(0.0)?;
        let seed = cfg.seed(h);
        let side = |sign| ScanSide { sign, width: seed, prev: (0.0, g0), retries: 0, done: false };
        Ok(Self { g0, tol, sides: [side(1.0), side(-1.0)], flat: true, failure: None })
    }

    /// Stops scanning in one direction.
    fn abandon(&mut self, side: usize) {
        self.sides[side].done = true;
    }

    fn next(&mut self, tracker: &mut Tracker, cfg: &AlphaSearchConfig, h: f64) -> Result<ScanStep> {
        let (g0, tol) = (self.g0, self.tol);
        while self.sides.iter().any(|s| !s.done) && !tracker.exhausted() {
            let mut best: Option<(f64, ScanStep)> = None;
            for (k, side) in self.sides.iter_mut().enumerate().filter(|(_, s)| !s.done) {
                let alpha = side.sign * side.width;
                let g = match tracker.g(alpha) {
                    Ok(g) => g,
                    Err(e) if is_stage_failure(&e) => {
                        side.failed();
                        self.failure = Some(e);
                        continue;
                    }
                    Err(e) => return Err(e),
                };
                self.flat = self.flat && (g - g0).abs() <= tol;
                let (a_prev, g_prev) = side.prev;
                side.advance(alpha, g, cfg);
                if self.flat {
                    continue;
                }
                // g(0) already at rounding level: α = 0 is as good a root as any.
                if g0.abs() <= tracker.noise {
                    tracker.pin_zero();
                    return Ok(ScanStep::Exact(0.0));
                }
                if g == 0.0 {
                    tracker.pin_last();
                    return Ok(ScanStep::Exact(alpha));
                }
                if opposite(g_prev, g) {
                    // Secant estimate of the root inside the bracket.
                    let est = (a_prev - g_prev * (alpha - a_prev) / (g - g_prev)).abs();
                    if best.as_ref().is_none_or(|(b, _)| est < *b) {
                        let step = ScanStep::Bracket { side: k, lo: a_prev, g_lo: g_prev, hi: alpha, g_hi: g };
                        best = Some((est, step));
                    }
                }
            }
            if let Some((_, step)) = best {
                return Ok(step);
            }
            if self.flat {
                // Sign changes seen so far were noise; keep measuring from 0.
                self.sides.iter_mut().for_each(|s| s.prev = (0.0, g0));
            }
        }
        if self.flat && g0.abs() <= tol && self.failure.is_none() {
            return Ok(ScanStep::Flat);
        }
        Err(self.failure.take().unwrap_or(Error::NoRoot { h, bracket_max: cfg.bracket_max }))
    }
}

fn is_stage_failure(e: &Error) -> bool {
    matches!(e, Error::StageNotConverged { .. } | Error::Domain(_))
}

/// Bracket scan plus bisection. Returns the final bracket and whether g was
/// degenerate.
fn solve_by_bisection(tracker: &mut Tracker, cfg: &AlphaSearchConfig, h: f64, tol: f64) -> Result<(Option<(f64, f64)>, bool)> {
    let mut scanner = Scanner::new(tracker, cfg, h, tol)?;
    loop {
        match scanner.next(tracker, cfg, h)? {
            ScanStep::Flat => return Ok((None, true)),
            ScanStep::Exact(alpha) => return Ok((Some((alpha, alpha)), false)),
            ScanStep::Bracket { side, lo, g_lo, hi, g_hi } => {
                let b = bisect(tracker, lo, g_lo, hi, g_hi, cfg.alpha_tol)?;
                if !b.jump {
                    return Ok((Some((b.lo.min(b.hi), b.lo.max(b.hi))), false));
                }
                scanner.abandon(side);
            }
        }
    }
}

/// Secant iteration; `Ok(false)` requests the bisection fallback.
fn secant(tracker: &mut Tracker, cfg: &AlphaSearchConfig, h: f64, tol: f64, previous: Option<f64>) -> Result<bool> {
    // An exactly zero previous α* comes from a degenerate step; probe afresh.
    let previous = previous.filter(|&a| a != 0.0);
    let (mut a0, mut a1) = match (cfg.secant_warm_start, previous) {
        (SecantWarmStart::Power { c, r }, _) => (0.0, c * h.abs().powf(r)),
        (SecantWarmStart::FromHistory, Some(prev)) => (prev, 1.01 * prev + 1e-12),
        (SecantWarmStart::FromHistory, None) => (0.0, cfg.seed(h)),
    };
    let mut g0 = tracker.g(a0)?;
    if g0 == 0.0 {
        return Ok(true);
    }
    let mut g1 = tracker.g(a1)?;
    if previous.is_none() && (g1 - g0).abs() <= tol {
        // g is flat over the probe: let the bracket scan decide.
        return Ok(false);
    }
    let mut growth = 0;
    while !tracker.exhausted() {
        if g1 == 0.0 {
            return Ok(true);
        }
        if g1 == g0 {
            return Ok(g1.abs() <= tol);
        }
        let next = a1 - g1 * (a1 - a0) / (g1 - g0);
        if !next.is_finite() || next.abs() > cfg.bracket_max {
            return Ok(false);
        }
        let step = (next - a1).abs();
        let g_next = tracker.g(next)?;
        growth = if g_next.abs() > g1.abs() { growth + 1 } else { 0 };
        if growth >= 3 {
            return Ok(false);
        }
        a0 = a1;
        g0 = g1;
        a1 = next;
        g1 = g_next;
        if step <= cfg.alpha_tol.max(4.0 * f64::EPSILON * a1.abs()) {
            return Ok(g1.abs() <= tol || tracker.best.as_ref().is_some_and(|b| b.1.abs() <= tol));
        }
    }
    Ok(false)
}

/// Finds α* for one step.
///
/// `target` is the energy to hit (normally `H(y0)`); `previous` is the last
/// accepted α*, used by the secant warm start.
pub fn solve_alpha_for(
    defect: &EnergyDefect,
    search: &AlphaSearchConfig,
    previous: Option<f64>,
) -> Result<AlphaSolveRecord> {
    search.validate()?;
    let h = defect.step_cfg.h;
    let tol = search.g_tol * defect.target.abs().max(1.0);
    if defect.family.perturb_index.is_none() {
        return Err(Error::InvalidArgument("the α search needs a perturbed method family".into()));
    }
    match search.strategy {
        AlphaStrategy::Bisection => {
            let mut tracker = Tracker::new(defect, search.max_g_evals);
            let (bracket, degenerate) = solve_by_bisection(&mut tracker, search, h, tol)?;
            finish(tracker, bracket, degenerate, tol)
        }
        AlphaStrategy::Secant => {
            let mut tracker = Tracker::new(defect, search.max_g_evals);
            if secant(&mut tracker, search, h, tol, previous)? {
                return tracker.finish(None, false, tol);
            }
            let spent = tracker.evals;
            let mut fallback = Tracker::new(defect, search.max_g_evals);
            let (bracket, degenerate) = solve_by_bisection(&mut fallback, search, h, tol)?;
            fallback.evals += spent;
            finish(fallback, bracket, degenerate, tol)
        }
    }
}

fn finish(tracker: Tracker, bracket: Option<(f64, f64)>, degenerate: bool, tol: f64) -> Result<AlphaSolveRecord> {
    if degenerate {
        let (g_residual, step) = tracker.at_zero.expect("the scan evaluates g(0)");
        return Ok(AlphaSolveRecord {
            alpha_star: 0.0,
            g_residual,
            g_evals: tracker.evals,
            bracket: None,
            degenerate: true,
            step,
        });
    }
    tracker.finish(bracket, false, tol)
}

/// Finds α* with `g(α*) = 0` for one step from `y0` with stepsize `h`.
pub fn solve_alpha(
    system: &dyn Hamiltonian,
    s: usize,
    perturb_index: usize,
    y0: &[f64],
    h: f64,
    search_cfg: &AlphaSearchConfig,
    step_cfg: &StepConfig,
) -> Result<AlphaSolveRecord> {
    if h == 0.0 {
        return Err(Error::InvalidArgument("h must be nonzero".into()));
    }
    let family = MethodFamily::new(s, Some(perturb_index))?;
    let defect = EnergyDefect {
        system,
        family: &family,
        y0,
        target: system.energy(y0)?,
        step_cfg: step_cfg.with_h(h),
        guess: None,
    };
    solve_alpha_for(&defect, search_cfg, None)
}

/// Root of g inside a known sign-change bracket, by bisection.
pub fn solve_alpha_in_bracket(defect: &EnergyDefect, lo: f64, hi: f64, search: &AlphaSearchConfig) -> Result<AlphaSolveRecord> {
    let tol = search.g_tol * defect.target.abs().max(1.0);
    let mut tracker = Tracker::new(defect, search.max_g_evals);
    let g_lo = tracker.g(lo)?;
    let g_hi = tracker.g(hi)?;
    if g_lo == 0.0 || g_hi == 0.0 {
        return tracker.finish(Some((lo, hi)), false, tol);
    }
    if !opposite(g_lo, g_hi) {
        return Err(Error::InvalidArgument(format!("no sign change of g on [{lo:e}, {hi:e}]")));
    }
    let b = bisect(&mut tracker, lo, g_lo, hi, g_hi, search.alpha_tol)?;
    tracker.finish(Some((b.lo.min(b.hi), b.lo.max(b.hi))), false, tol)
}

/// A cell of the level grid where the stage solver failed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridFailure {
    pub alpha_index: usize,
    pub h_index: usize,
    pub message: String,
}

/// `g(αᵢ, hⱼ, y₀)` over a rectangular grid.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelGrid {
    pub h_values: Vec<f64>,
    pub alpha_values: Vec<f64>,
    /// `values[i][j] = g(alpha_values[i], h_values[j])`; NaN where failed.
    pub values: Vec<Vec<f64>>,
    pub failures: Vec<GridFailure>,
}

impl LevelGrid {
    /// Sign-change brackets `(α_lo, α_hi)` of g along the column `h_index`.
    pub fn sign_changes(&self, h_index: usize) -> Vec<(f64, f64)> {
        (1..self.alpha_values.len())
            .filter(|&i| opposite(self.values[i - 1][h_index], self.values[i][h_index]))
            .map(|i| (self.alpha_values[i - 1], self.alpha_values[i]))
            .collect()
    }
}

/// Evaluates g over the grid; cells are independent and run in parallel.
pub fn level_grid(
    system: &dyn Hamiltonian,
    s: usize,
    perturb_index: usize,
    y0: &[f64],
    h_values: &[f64],
    alpha_values: &[f64],
    step_cfg: &StepConfig,
) -> Result<LevelGrid> {
    if h_values.is_empty() || alpha_values.is_empty() {
        return Err(Error::InvalidArgument("level grid needs nonempty h and α lists".into()));
    }
    let family = MethodFamily::new(s, Some(perturb_index))?;
    let target = system.energy(y0)?;
    let cells: Vec<(usize, usize)> = (0..alpha_values.len())
        .flat_map(|i| (0..h_values.len()).map(move |j| (i, j)))
        .collect();
    let results: Vec<std::result::Result<f64, String>> = cells
        .par_iter()
        .map(|&(i, j)| {
            let defect = EnergyDefect {
                system,
                family: &family,
                y0,
                target,
                step_cfg: step_cfg.with_h(h_values[j]),
                guess: None,
            };
            defect.eval(alpha_values[i]).map(|(g, _)| g).map_err(|e| e.to_string())
        })
        .collect();
    let mut values = vec![vec![f64::NAN; h_values.len()]; alpha_values.len()];
    let mut failures = Vec::new();
    for (&(i, j), r) in cells.iter().zip(results) {
        match r {
            Ok(g) => values[i][j] = g,
            Err(message) => failures.push(GridFailure { alpha_index: i, h_index: j, message }),
        }
    }
    Ok(LevelGrid {
        h_values: h_values.to_vec(),
        alpha_values: alpha_values.to_vec(),
        values,
        failures,
    })
}
