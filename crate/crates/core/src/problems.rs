//! Canonical Hamiltonian systems `ẏ = J∇H(y)` and the benchmark problems.
//!
//! States are laid out as `y = (q₁..q_m, p₁..p_m)`.

use std::fmt;

use crate::error::{Error, Result};

/// A quadratic first integral of a system, e.g. angular momentum.
#[derive(Clone, Copy)]
pub struct QuadraticInvariant {
    pub name: &'static str,
    pub value: fn(&[f64]) -> f64,
    pub gradient: fn(&[f64], &mut [f64]),
}

impl fmt::Debug for QuadraticInvariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("QuadraticInvariant").field("name", &self.name).finish()
    }
}

/// A canonical Hamiltonian system on `R^{2m}`.
pub trait Hamiltonian: Send + Sync + fmt::Debug {
    fn name(&self) -> &str;

    /// Degrees of freedom `m`.
    fn degrees_of_freedom(&self) -> usize;

    fn energy(&self, y: &[f64]) -> Result<f64>;

    fn gradient(&self, y: &[f64], grad: &mut [f64]) -> Result<()>;

    /// Row-major `2m × 2m` Hessian of `H`.
    fn hessian(&self, y: &[f64], hess: &mut [f64]) -> Result<()>;

    /// `H(y + d) - H(y)`. Implementations factor the difference so that a
    /// small `d` does not cancel against `H(y)`.
    fn energy_change(&self, y: &[f64], d: &[f64]) -> Result<f64> {
        let moved: Vec<f64> = y.iter().zip(d).map(|(a, b)| a + b).collect();
        Ok(self.energy(&moved)? - self.energy(y)?)
    }

    fn invariants(&self) -> &[QuadraticInvariant] {
        &[]
    }

    fn dim(&self) -> usize {
        2 * self.degrees_of_freedom()
    }

    /// `f(y) = J∇H(y)`, i.e. `(∂H/∂p, -∂H/∂q)`.
    fn vector_field(&self, y: &[f64], out: &mut [f64]) -> Result<()> {
        self.gradient(y, out)?;
        let m = self.degrees_of_freedom();
        for i in 0..m {
            let dq = out[i];
            out[i] = out[m + i];
            out[m + i] = -dq;
        }
        Ok(())
    }

    /// Row-major Jacobian of the vector field, `J ∇²H(y)`.
    fn vector_field_jacobian(&self, y: &[f64], out: &mut [f64]) -> Result<()> {
        let n = self.dim();
        let m = self.degrees_of_freedom();
        let mut hess = vec![0.0; n * n];
        self.hessian(y, &mut hess)?;
        for i in 0..n {
            for k in 0..n {
                out[i * n + k] = if i < m { hess[(m + i) * n + k] } else { -hess[(i - m) * n + k] };
            }
        }
        Ok(())
    }
}

/// Initial state of a problem.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialCondition {
    pub y0: Vec<f64>,
    pub t0: f64,
    pub label: String,
}

fn angular_momentum(y: &[f64]) -> f64 {
    y[0] * y[3] - y[1] * y[2]
}

fn angular_momentum_gradient(y: &[f64], g: &mut [f64]) {
    g[0] = y[3];
    g[1] = -y[2];
    g[2] = -y[1];
    g[3] = y[0];
}

const ANGULAR_MOMENTUM: [QuadraticInvariant; 1] = [QuadraticInvariant {
    name: "L",
    value: angular_momentum,
    gradient: angular_momentum_gradient,
}];

/// `(x + d)² - x²` without cancellation.
fn square_change(x: f64, d: f64) -> f64 {
    d * (2.0 * x + d)
}

/// Change of the kinetic energy `|p|²/2` for a system with `m` degrees of freedom.
fn kinetic_change(y: &[f64], d: &[f64], m: usize) -> f64 {
    0.5 * (m..2 * m).map(|i| square_change(y[i], d[i])).sum::<f64>()
}

/// Kepler two-body problem, `H = |p|²/2 - 1/|q|`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Kepler {
    pub eccentricity: f64,
}

/// Below this radius the Kepler potential is treated as singular.
pub const KEPLER_MIN_RADIUS: f64 = 1e-8;

impl Kepler {
    fn radius(&self, y: &[f64]) -> Result<f64> {
        let r = y[0].hypot(y[1]);
        if r < KEPLER_MIN_RADIUS || !r.is_finite() {
            return Err(Error::Domain(format!("Kepler potential singular at |q| = {r:e}")));
        }
        Ok(r)
    }
}

impl Hamiltonian for Kepler {
    fn name(&self) -> &str {
        "kepler"
    }

    fn degrees_of_freedom(&self) -> usize {
        2
    }

    fn energy(&self, y: &[f64]) -> Result<f64> {
        let r = self.radius(y)?;
        Ok(0.5 * (y[2] * y[2] + y[3] * y[3]) - 1.0 / r)
    }

    fn energy_change(&self, y: &[f64], d: &[f64]) -> Result<f64> {
        let r0 = self.radius(y)?;
        let r1 = self.radius(&[y[0] + d[0], y[1] + d[1]])?;
        let dr = (square_change(y[0], d[0]) + square_change(y[1], d[1])) / (r0 + r1);
        Ok(kinetic_change(y, d, 2) + dr / (r0 * r1))
    }

    fn gradient(&self, y: &[f64], g: &mut [f64]) -> Result<()> {
        let r = self.radius(y)?;
        let r3 = r * r * r;
        g[0] = y[0] / r3;
        g[1] = y[1] / r3;
        g[2] = y[2];
        g[3] = y[3];
        Ok(())
    }

    fn hessian(&self, y: &[f64], h: &mut [f64]) -> Result<()> {
        let r = self.radius(y)?;
        let r3 = r * r * r;
        let r5 = r3 * r * r;
        h.iter_mut().for_each(|v| *v = 0.0);
        h[0] = 1.0 / r3 - 3.0 * y[0] * y[0] / r5;
        h[1] = -3.0 * y[0] * y[1] / r5;
        h[4] = h[1];
        h[5] = 1.0 / r3 - 3.0 * y[1] * y[1] / r5;
        h[10] = 1.0;
        h[15] = 1.0;
        Ok(())
    }

    fn invariants(&self) -> &[QuadraticInvariant] {
        &ANGULAR_MOMENTUM
    }
}

/// Kepler problem started at pericenter with eccentricity `e`.
pub fn kepler(e: f64) -> Result<(Kepler, InitialCondition)> {
    if !(0.0..1.0).contains(&e) {
        return Err(Error::InvalidArgument(format!("eccentricity must be in [0, 1), got {e}")));
    }
    let y0 = vec![1.0 - e, 0.0, 0.0, ((1.0 + e) / (1.0 - e)).sqrt()];
    Ok((
        Kepler { eccentricity: e },
        InitialCondition { y0, t0: 0.0, label: format!("kepler pericenter, e = {e}") },
    ))
}

/// Exact Kepler state at time `t` for the pericenter initial condition of
/// [`kepler`]. The orbit has semi-major axis 1 and period 2π.
pub fn kepler_reference(e: f64, t: f64) -> Result<[f64; 4]> {
    if !(0.0..1.0).contains(&e) {
        return Err(Error::InvalidArgument(format!("eccentricity must be in [0, 1), got {e}")));
    }
    let two_pi = 2.0 * std::f64::consts::PI;
    // Mean anomaly reduced to [-π, π) keeps Newton well started.
    let mean = t - two_pi * (t / two_pi).round();
    let mut ecc_anomaly = if e > 0.8 { std::f64::consts::PI.copysign(mean) } else { mean };
    let mut converged = false;
    for _ in 0..50 {
        let residual = ecc_anomaly - e * ecc_anomaly.sin() - mean;
        if residual.abs() <= 1e-14 {
            converged = true;
            break;
        }
        ecc_anomaly -= residual / (1.0 - e * ecc_anomaly.cos());
    }
    if !converged {
        return Err(Error::Numerical(format!("Kepler equation did not converge at t = {t}")));
    }
    // One more step brings the iterate to round-off.
    ecc_anomaly -= (ecc_anomaly - e * ecc_anomaly.sin() - mean) / (1.0 - e * ecc_anomaly.cos());
    let (sin_e, cos_e) = ecc_anomaly.sin_cos();
    let beta = (1.0 - e * e).sqrt();
    let denom = 1.0 - e * cos_e;
    Ok([cos_e - e, beta * sin_e, -sin_e / denom, beta * cos_e / denom])
}

/// `H = |p|²/2 + (q₁² + q₂²)²`, which also conserves angular momentum.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Quartic;

impl Hamiltonian for Quartic {
    fn name(&self) -> &str {
        "quartic"
    }

    fn degrees_of_freedom(&self) -> usize {
        2
    }

    fn energy(&self, y: &[f64]) -> Result<f64> {
        let r2 = y[0] * y[0] + y[1] * y[1];
        Ok(0.5 * (y[2] * y[2] + y[3] * y[3]) + r2 * r2)
    }

    fn energy_change(&self, y: &[f64], d: &[f64]) -> Result<f64> {
        let r2 = y[0] * y[0] + y[1] * y[1];
        let dr2 = square_change(y[0], d[0]) + square_change(y[1], d[1]);
        Ok(kinetic_change(y, d, 2) + dr2 * (2.0 * r2 + dr2))
    }

    fn gradient(&self, y: &[f64], g: &mut [f64]) -> Result<()> {
        let r2 = y[0] * y[0] + y[1] * y[1];
        g[0] = 4.0 * y[0] * r2;
        g[1] = 4.0 * y[1] * r2;
        g[2] = y[2];
        g[3] = y[3];
        Ok(())
    }

    fn hessian(&self, y: &[f64], h: &mut [f64]) -> Result<()> {
        let r2 = y[0] * y[0] + y[1] * y[1];
        h.iter_mut().for_each(|v| *v = 0.0);
        h[0] = 4.0 * r2 + 8.0 * y[0] * y[0];
        h[1] = 8.0 * y[0] * y[1];
        h[4] = h[1];
        h[5] = 4.0 * r2 + 8.0 * y[1] * y[1];
        h[10] = 1.0;
        h[15] = 1.0;
        Ok(())
    }

    fn invariants(&self) -> &[QuadraticInvariant] {
        &ANGULAR_MOMENTUM
    }
}

/// Default initial state of the quartic problem.
pub const QUARTIC_DEFAULT_Y0: [f64; 4] = [1.0, 0.0, 0.0, 1.0];

pub fn quartic() -> (Quartic, InitialCondition) {
    (
        Quartic,
        InitialCondition { y0: QUARTIC_DEFAULT_Y0.to_vec(), t0: 0.0, label: "quartic default".into() },
    )
}

/// Hénon-Heiles potential `U(q₁, q₂)`.
pub fn henon_heiles_potential(q1: f64, q2: f64) -> f64 {
    0.5 * (q1 * q1 + q2 * q2) + q1 * q1 * q2 - q2 * q2 * q2 / 3.0
}

/// Saddle points of the Hénon-Heiles potential; `U = 1/6` at each.
pub fn henon_heiles_saddles() -> [[f64; 2]; 3] {
    let h = 3f64.sqrt() / 2.0;
    [[0.0, 1.0], [-h, -0.5], [h, -0.5]]
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct HenonHeiles;

impl Hamiltonian for HenonHeiles {
    fn name(&self) -> &str {
        "henon-heiles"
    }

    fn degrees_of_freedom(&self) -> usize {
        2
    }

    fn energy(&self, y: &[f64]) -> Result<f64> {
        Ok(0.5 * (y[2] * y[2] + y[3] * y[3]) + henon_heiles_potential(y[0], y[1]))
    }

    fn energy_change(&self, y: &[f64], d: &[f64]) -> Result<f64> {
        let (q1, q2) = (y[0], y[1]);
        let q2n = q2 + d[1];
        let dq1sq = square_change(q1, d[0]);
        let quadratic = 0.5 * (dq1sq + square_change(q2, d[1]));
        let mixed = dq1sq * q2n + q1 * q1 * d[1];
        let cubic = d[1] * (q2n * q2n + q2n * q2 + q2 * q2) / 3.0;
        Ok(kinetic_change(y, d, 2) + quadratic + mixed - cubic)
    }

    fn gradient(&self, y: &[f64], g: &mut [f64]) -> Result<()> {
        g[0] = y[0] + 2.0 * y[0] * y[1];
        g[1] = y[1] + y[0] * y[0] - y[1] * y[1];
        g[2] = y[2];
        g[3] = y[3];
        Ok(())
    }

    fn hessian(&self, y: &[f64], h: &mut [f64]) -> Result<()> {
        h.iter_mut().for_each(|v| *v = 0.0);
        h[0] = 1.0 + 2.0 * y[1];
        h[1] = 2.0 * y[0];
        h[4] = h[1];
        h[5] = 1.0 - 2.0 * y[1];
        h[10] = 1.0;
        h[15] = 1.0;
        Ok(())
    }
}

pub fn henon_heiles() -> (HenonHeiles, InitialCondition) {
    (
        HenonHeiles,
        InitialCondition {
            y0: vec![0.0, 0.0, 0.3f64.sqrt(), 0.0],
            t0: 0.0,
            label: "henon-heiles P0, H = 0.15".into(),
        },
    )
}

/// Harmonic oscillator `H = (p² + q²)/2`; its energy is quadratic.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Harmonic;

impl Hamiltonian for Harmonic {
    fn name(&self) -> &str {
        "harmonic"
    }

    fn degrees_of_freedom(&self) -> usize {
        1
    }

    fn energy(&self, y: &[f64]) -> Result<f64> {
        Ok(0.5 * (y[0] * y[0] + y[1] * y[1]))
    }

    fn energy_change(&self, y: &[f64], d: &[f64]) -> Result<f64> {
        Ok(0.5 * (square_change(y[0], d[0]) + square_change(y[1], d[1])))
    }

    fn gradient(&self, y: &[f64], g: &mut [f64]) -> Result<()> {
        g[0] = y[0];
        g[1] = y[1];
        Ok(())
    }

    fn hessian(&self, _y: &[f64], h: &mut [f64]) -> Result<()> {
        h.copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        Ok(())
    }
}

pub fn harmonic() -> (Harmonic, InitialCondition) {
    (Harmonic, InitialCondition { y0: vec![1.0, 0.0], t0: 0.0, label: "harmonic (1, 0)".into() })
}

/// Problem selection by name, as used on the command line.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Problem {
    Kepler { e: f64 },
    Quartic,
    HenonHeiles,
    Harmonic,
}

impl Problem {
    pub fn parse(name: &str, e: f64) -> Result<Self> {
        match name {
            "kepler" => Ok(Problem::Kepler { e }),
            "quartic" => Ok(Problem::Quartic),
            "henon-heiles" => Ok(Problem::HenonHeiles),
            "harmonic" => Ok(Problem::Harmonic),
            other => Err(Error::InvalidArgument(format!("unknown problem '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Problem::Kepler { .. } => "kepler",
            Problem::Quartic => "quartic",
            Problem::HenonHeiles => "henon-heiles",
            Problem::Harmonic => "harmonic",
        }
    }

    pub fn build(&self) -> Result<(Box<dyn Hamiltonian>, InitialCondition)> {
        Ok(match *self {
            Problem::Kepler { e } => {
                let (sys, ic) = kepler(e)?;
                (Box::new(sys), ic)
            }
            Problem::Quartic => {
                let (sys, ic) = quartic();
                (Box::new(sys), ic)
            }
            Problem::HenonHeiles => {
                let (sys, ic) = henon_heiles();
                (Box::new(sys), ic)
            }
            Problem::Harmonic => {
                let (sys, ic) = harmonic();
                (Box::new(sys), ic)
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fd_gradient(sys: &dyn Hamiltonian, y: &[f64]) -> Vec<f64> {
        let step = 1e-6;
        (0..y.len())
            .map(|k| {
                let mut yp = y.to_vec();
                let mut ym = y.to_vec();
                yp[k] += step;
                ym[k] -= step;
                (sys.energy(&yp).unwrap() - sys.energy(&ym).unwrap()) / (2.0 * step)
            })
            .collect()
    }

    fn systems() -> Vec<Box<dyn Hamiltonian>> {
        vec![Box::new(Kepler { eccentricity: 0.6 }), Box::new(Quartic), Box::new(HenonHeiles), Box::new(Harmonic)]
    }

    #[test]
    fn kepler_initial_values() {
        let (sys, ic) = kepler(0.6).unwrap();
        assert!((sys.energy(&ic.y0).unwrap() + 0.5).abs() < 1e-15);
        assert!((angular_momentum(&ic.y0) - 0.8).abs() < 1e-15);
        let mut g = [0.0; 4];
        sys.gradient(&ic.y0, &mut g).unwrap();
        assert!((g[0] - 6.25).abs() < 1e-13);
        assert_eq!(g[1], 0.0);
        assert_eq!(g[2], 0.0);
        assert!((g[3] - 2.0).abs() < 1e-15);
        let fd = fd_gradient(&sys, &ic.y0);
        assert!((fd[0] - 6.25).abs() < 1e-6 * 6.25);
    }

    #[test]
    fn kepler_rejects_bad_eccentricity_and_origin() {
        assert!(matches!(kepler(1.0), Err(Error::InvalidArgument(_))));
        assert!(matches!(kepler(-0.1), Err(Error::InvalidArgument(_))));
        let sys = Kepler { eccentricity: 0.6 };
        assert!(matches!(sys.energy(&[0.0, 0.0, 1.0, 0.0]), Err(Error::Domain(_))));
        let mut g = [0.0; 4];
        assert!(matches!(sys.gradient(&[0.0, 0.0, 1.0, 0.0], &mut g), Err(Error::Domain(_))));
    }

    #[test]
    fn quartic_values() {
        let (sys, _) = quartic();
        let y = [1.0, 0.0, 0.0, 1.0];
        assert_eq!(sys.energy(&y).unwrap(), 1.5);
        assert_eq!(angular_momentum(&y), 1.0);
        let mut g = [0.0; 4];
        sys.gradient(&[0.5, -0.7, 0.0, 0.0], &mut g).unwrap();
        let r2 = 0.25 + 0.49;
        assert!((g[0] - 4.0 * 0.5 * r2).abs() < 1e-15);
        assert!((g[1] + 4.0 * 0.7 * r2).abs() < 1e-15);
    }

    #[test]
    fn henon_heiles_values() {
        let (sys, ic) = henon_heiles();
        assert!((sys.energy(&ic.y0).unwrap() - 0.15).abs() < 1e-15);
        for [q1, q2] in henon_heiles_saddles() {
            assert!((henon_heiles_potential(q1, q2) - 1.0 / 6.0).abs() < 1e-15);
        }
        let mut g = [0.0; 4];
        sys.gradient(&[0.0, 0.0, 0.0, 0.0], &mut g).unwrap();
        assert_eq!(g, [0.0; 4]);
        assert!(sys.invariants().is_empty());
    }

    #[test]
    fn harmonic_values() {
        let (sys, ic) = harmonic();
        assert_eq!(sys.energy(&ic.y0).unwrap(), 0.5);
        let mut f = [0.0; 2];
        sys.vector_field(&[0.3, -0.2], &mut f).unwrap();
        assert_eq!(f, [-0.2, -0.3]);
    }

    #[test]
    fn kepler_reference_properties() {
        let y = kepler_reference(0.6, 0.0).unwrap();
        let (sys, ic) = kepler(0.6).unwrap();
        for k in 0..4 {
            assert!((y[k] - ic.y0[k]).abs() < 1e-15);
        }
        for t in [0.3, 1.7, 4.0, 13.1, 50.0] {
            let y = kepler_reference(0.6, t).unwrap();
            assert!((sys.energy(&y).unwrap() + 0.5).abs() < 1e-13);
            assert!((angular_momentum(&y) - 0.8).abs() < 1e-13);
        }
        let y = kepler_reference(0.0, 2.0 * std::f64::consts::PI).unwrap();
        let y0 = kepler(0.0).unwrap().1.y0;
        for k in 0..4 {
            assert!((y[k] - y0[k]).abs() < 1e-12);
        }
        let y = kepler_reference(0.0, 1.0).unwrap();
        assert!((y[0].hypot(y[1]) - 1.0).abs() < 1e-14);
    }

    #[test]
    fn kepler_reference_matches_vector_field() {
        // dy/dt of the closed form equals f(y).
        let sys = Kepler { eccentricity: 0.6 };
        let t = 2.3;
        let dt = 1e-5;
        let yp = kepler_reference(0.6, t + dt).unwrap();
        let ym = kepler_reference(0.6, t - dt).unwrap();
        let y = kepler_reference(0.6, t).unwrap();
        let mut f = [0.0; 4];
        sys.vector_field(&y, &mut f).unwrap();
        for k in 0..4 {
            assert!(((yp[k] - ym[k]) / (2.0 * dt) - f[k]).abs() < 1e-8);
        }
    }

    #[test]
    fn problem_names_round_trip() {
        for name in ["kepler", "quartic", "henon-heiles", "harmonic"] {
            assert_eq!(Problem::parse(name, 0.6).unwrap().name(), name);
        }
        assert!(Problem::parse("lorenz", 0.6).is_err());
    }

    proptest! {
        #[test]
        fn gradients_match_finite_differences(
            q1 in 0.3f64..1.0, q2 in -0.8f64..0.8, p1 in -1.0f64..1.0, p2 in -1.0f64..1.0,
        ) {
            for sys in systems() {
                let y: Vec<f64> = if sys.dim() == 4 { vec![q1, q2, p1, p2] } else { vec![q1, p1] };
                let mut g = vec![0.0; y.len()];
                sys.gradient(&y, &mut g).unwrap();
                let fd = fd_gradient(sys.as_ref(), &y);
                let scale = g.iter().fold(1.0_f64, |a, v| a.max(v.abs()));
                for k in 0..y.len() {
                    prop_assert!((g[k] - fd[k]).abs() <= 1e-6 * scale, "{} k={}", sys.name(), k);
                }
            }
        }

        #[test]
        fn energy_and_invariants_are_first_integrals(
            q1 in 0.3f64..1.0, q2 in -0.8f64..0.8, p1 in -1.0f64..1.0, p2 in -1.0f64..1.0,
        ) {
            for sys in systems() {
                let y: Vec<f64> = if sys.dim() == 4 { vec![q1, q2, p1, p2] } else { vec![q1, p1] };
                let n = y.len();
                let mut g = vec![0.0; n];
                let mut f = vec![0.0; n];
                sys.gradient(&y, &mut g).unwrap();
                sys.vector_field(&y, &mut f).unwrap();
                let norm2: f64 = g.iter().map(|v| v * v).sum();
                let dot: f64 = g.iter().zip(&f).map(|(a, b)| a * b).sum();
                prop_assert!(dot.abs() <= 1e-12 * norm2);
                for inv in sys.invariants() {
                    let mut gl = vec![0.0; n];
                    (inv.gradient)(&y, &mut gl);
                    let dl: f64 = gl.iter().zip(&f).map(|(a, b)| a * b).sum();
                    prop_assert!(dl.abs() <= 1e-10);
                }
            }
        }

        #[test]
        fn hessian_matches_gradient_differences(
            q1 in 0.3f64..1.0, q2 in -0.8f64..0.8, p1 in -1.0f64..1.0, p2 in -1.0f64..1.0,
        ) {
            for sys in systems() {
                let y: Vec<f64> = if sys.dim() == 4 { vec![q1, q2, p1, p2] } else { vec![q1, p1] };
                let n = y.len();
                let mut h = vec![0.0; n * n];
                sys.hessian(&y, &mut h).unwrap();
                for k in 0..n {
                    let step = 1e-6;
                    let mut yp = y.clone();
                    let mut ym = y.clone();
                    yp[k] += step;
                    ym[k] -= step;
                    let mut gp = vec![0.0; n];
                    let mut gm = vec![0.0; n];
                    sys.gradient(&yp, &mut gp).unwrap();
                    sys.gradient(&ym, &mut gm).unwrap();
                    for i in 0..n {
                        let fd = (gp[i] - gm[i]) / (2.0 * step);
                        prop_assert!((h[i * n + k] - fd).abs() <= 1e-5 * (1.0 + fd.abs()));
                    }
                }
            }
        }

        #[test]
        fn energy_change_matches_direct_difference(
            q1 in 0.3f64..1.0, q2 in -0.8f64..0.8, p1 in -1.0f64..1.0, p2 in -1.0f64..1.0,
            d in prop::array::uniform4(-0.2f64..0.2),
        ) {
            for sys in systems() {
                let y: Vec<f64> = if sys.dim() == 4 { vec![q1, q2, p1, p2] } else { vec![q1, p1] };
                let d = &d[..y.len()];
                let moved: Vec<f64> = y.iter().zip(d).map(|(a, b)| a + b).collect();
                let direct = sys.energy(&moved).unwrap() - sys.energy(&y).unwrap();
                let change = sys.energy_change(&y, d).unwrap();
                prop_assert!((change - direct).abs() <= 1e-13, "{}: {change} vs {direct}", sys.name());
            }
        }
    }
}
