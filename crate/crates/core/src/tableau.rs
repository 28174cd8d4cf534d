//! Gauss-Legendre quadrature, the orthonormal shifted Legendre basis and the
//! parametric Butcher arrays `A(α) = P (X_s + W̃) P⁻¹`.
//!
//! Matrices are stored as `nalgebra::DMatrix<f64>`; stage counts are small
//! (at most [`MAX_STAGES`]) so nothing here is performance sensitive.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};

/// Largest supported stage count.
pub const MAX_STAGES: usize = 10;

/// Nodes and weights of the s-point Gauss-Legendre rule on `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuadratureRule {
    pub s: usize,
    pub c: Vec<f64>,
    pub b: Vec<f64>,
}

impl QuadratureRule {
    /// The weight vector ω.
    pub fn omega(&self) -> &[f64] {
        &self.b
    }

    /// The diagonal weight matrix Ω.
    pub fn omega_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(&self.b))
    }
}

/// Standard Legendre polynomial `L_n(x)` and its derivative on `[-1, 1]`.
fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    if n == 0 {
        return (1.0, 0.0);
    }
    let mut p_prev = 1.0;
    let mut p = x;
    for k in 1..n {
        let kf = k as f64;
        let next = ((2.0 * kf + 1.0) * x * p - kf * p_prev) / (kf + 1.0);
        p_prev = p;
        p = next;
    }
    // L'_n(x) = n (x L_n - L_{n-1}) / (x² - 1), valid for |x| < 1.
    let dp = n as f64 * (x * p - p_prev) / (x * x - 1.0);
    (p, dp)
}

/// Shifted Legendre polynomial of degree `degree` on `[0, 1]`, normalized so
/// that `∫₀¹ P² = 1` and the leading coefficient is positive.
pub fn shifted_legendre(degree: usize, tau: f64) -> f64 {
    let x = 2.0 * tau - 1.0;
    let mut p_prev = 1.0;
    let mut p = if degree == 0 { 1.0 } else { x };
    for k in 1..degree {
        let kf = k as f64;
        let next = ((2.0 * kf + 1.0) * x * p - kf * p_prev) / (kf + 1.0);
        p_prev = p;
        p = next;
    }
    (2.0 * degree as f64 + 1.0).sqrt() * p
}

/// Gauss-Legendre nodes and weights on `[0, 1]`.
///
/// Roots of `L_s` are found by Newton's method from Chebyshev-like initial
/// guesses; only the lower half is computed and the upper half is mirrored so
/// that the rule is exactly symmetric.
pub fn gauss_quadrature(s: usize) -> Result<QuadratureRule> {
    if s == 0 || s > MAX_STAGES {
        return Err(Error::InvalidArgument(format!(
            "stage count must be in 1..={MAX_STAGES}, got {s}"
        )));
    }
    let mut c = vec![0.0; s];
    let mut b = vec![0.0; s];
    let sf = s as f64;
    for i in 0..s.div_ceil(2) {
        // i-th smallest root of L_s on [-1, 1].
        let mut x = -(std::f64::consts::PI * (i as f64 + 0.75) / (sf + 0.5)).cos();
        if 2 * i + 1 == s {
            x = 0.0;
        } else {
            for _ in 0..100 {
                let (p, dp) = legendre_with_derivative(s, x);
                let dx = p / dp;
                x -= dx;
                if dx.abs() < 1e-15 {
                    break;
                }
            }
            let (p, dp) = legendre_with_derivative(s, x);
            x -= p / dp;
        }
        let (_, dp) = legendre_with_derivative(s, x);
        let weight = 1.0 / ((1.0 - x) * (1.0 + x) * dp * dp);
        c[i] = if 2 * i + 1 == s { 0.5 } else { 0.5 * (1.0 + x) };
        b[i] = weight;
        c[s - 1 - i] = 1.0 - c[i];
        b[s - 1 - i] = weight;
    }
    if s % 2 == 1 {
        c[s / 2] = 0.5;
    }
    Ok(QuadratureRule { s, c, b })
}

/// The matrix `P` of normalized shifted Legendre polynomials evaluated at the
/// nodes, together with its inverse.
#[derive(Debug, Clone, PartialEq)]
pub struct LegendreBasis {
    pub s: usize,
    /// `p[(i, j)] = P_j(c_i)`, polynomial degree `j`.
    pub p: DMatrix<f64>,
    pub p_inv: DMatrix<f64>,
}

/// Builds `P` and `P⁻¹ = Pᵀ Ω` (discrete orthonormality of the basis).
pub fn legendre_basis(q: &QuadratureRule) -> LegendreBasis {
    let s = q.s;
    let p = DMatrix::from_fn(s, s, |i, j| shifted_legendre(j, q.c[i]));
    let p_inv = DMatrix::from_fn(s, s, |i, j| p[(j, i)] * q.b[j]);
    LegendreBasis { s, p, p_inv }
}

/// `ξ_j = 1 / (2 √((2j+1)(2j-1)))`, `j ≥ 1`.
pub fn xi(j: usize) -> f64 {
    let jf = j as f64;
    0.5 / ((2.0 * jf + 1.0) * (2.0 * jf - 1.0)).sqrt()
}

/// Representation of the Gauss array in the Legendre basis.
pub fn xs_matrix(s: usize) -> DMatrix<f64> {
    let mut x = DMatrix::zeros(s, s);
    if s == 0 {
        return x;
    }
    x[(0, 0)] = 0.5;
    for j in 1..s {
        x[(j, j - 1)] = xi(j);
        x[(j - 1, j)] = -xi(j);
    }
    x
}

/// Which subdiagonal pairs of `X_s` are perturbed, and by how much.
///
/// An entry `(j, α)` with `1 ≤ j ≤ s-1` replaces `ξ_j` by `ξ_j + α` in both
/// positions `(j+1, j)` and `(j, j+1)` (1-based, with the sign of `X_s`).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PerturbationSpec {
    pub s: usize,
    pub entries: Vec<(usize, f64)>,
}

impl PerturbationSpec {
    /// No perturbation: the Gauss method.
    pub fn none(s: usize) -> Self {
        Self { s, entries: Vec::new() }
    }

    pub fn single(s: usize, index: usize, alpha: f64) -> Self {
        Self { s, entries: vec![(index, alpha)] }
    }

    /// The one-parameter family perturbing the last subdiagonal entry.
    pub fn last(s: usize, alpha: f64) -> Self {
        Self::single(s, s.saturating_sub(1), alpha)
    }

    pub fn validate(&self) -> Result<()> {
        for &(j, a) in &self.entries {
            if j == 0 || j >= self.s {
                return Err(Error::InvalidArgument(format!(
                    "perturbation index {j} outside 1..={} for s = {}",
                    self.s.saturating_sub(1),
                    self.s
                )));
            }
            if !a.is_finite() {
                return Err(Error::InvalidArgument(format!("non-finite α = {a}")));
            }
        }
        Ok(())
    }

    /// The scalar α of a single-parameter perturbation (0 when empty).
    pub fn alpha(&self) -> Option<f64> {
        match self.entries.as_slice() {
            [] => Some(0.0),
            [(_, a)] => Some(*a),
            _ => None,
        }
    }

    /// The skew-symmetric matrix W̃.
    pub fn w_matrix(&self) -> DMatrix<f64> {
        let mut w = DMatrix::zeros(self.s, self.s);
        for &(j, a) in &self.entries {
            w[(j, j - 1)] += a;
            w[(j - 1, j)] -= a;
        }
        w
    }

    /// Classical order of the perturbed method: `2s` without an active
    /// perturbation, `2·(lowest perturbed index)` otherwise.
    pub fn order(&self) -> usize {
        self.entries
            .iter()
            .filter(|(_, a)| *a != 0.0)
            .map(|(j, _)| 2 * j)
            .min()
            .unwrap_or(2 * self.s)
    }
}

/// `(c, b, A)` of a perturbed Gauss method.
#[derive(Debug, Clone, PartialEq)]
pub struct ButcherTableau {
    pub quadrature: QuadratureRule,
    pub a: DMatrix<f64>,
    pub perturbation: PerturbationSpec,
    pub order: usize,
}

impl ButcherTableau {
    pub fn stages(&self) -> usize {
        self.quadrature.s
    }

    /// Max-norm of `ΩA + AᵀΩ - ωωᵀ`; zero for a symplectic method.
    pub fn symplecticity_defect(&self) -> f64 {
        let b = &self.quadrature.b;
        let s = self.stages();
        let mut worst = 0.0_f64;
        for i in 0..s {
            for j in 0..s {
                let m = b[i] * self.a[(i, j)] + self.a[(j, i)] * b[j] - b[i] * b[j];
                worst = worst.max(m.abs());
            }
        }
        worst
    }
}

/// `A = P (X_s + W̃) P⁻¹`.
pub fn butcher(q: &QuadratureRule, pert: &PerturbationSpec) -> Result<ButcherTableau> {
    if pert.s != q.s {
        return Err(Error::InvalidArgument(format!(
            "perturbation is for s = {}, quadrature has s = {}",
            pert.s, q.s
        )));
    }
    pert.validate()?;
    let basis = legendre_basis(q);
    let x = xs_matrix(q.s) + pert.w_matrix();
    let a = &basis.p * x * &basis.p_inv;
    Ok(ButcherTableau {
        quadrature: q.clone(),
        a,
        perturbation: pert.clone(),
        order: pert.order(),
    })
}

/// `Γ = P X_s⁻¹ W_s P⁻¹` for the last-subdiagonal perturbation.
pub fn gamma_matrix(q: &QuadratureRule) -> Result<DMatrix<f64>> {
    gamma_matrix_for(q, q.s.saturating_sub(1))
}

/// Γ for a unit perturbation of subdiagonal index `index`, i.e. the solution
/// of `A Γ = P W P⁻¹`.
pub fn gamma_matrix_for(q: &QuadratureRule, index: usize) -> Result<DMatrix<f64>> {
    if q.s < 2 {
        return Err(Error::InvalidArgument(
            "Γ is undefined for s = 1 (no subdiagonal to perturb)".into(),
        ));
    }
    let unit = PerturbationSpec::single(q.s, index, 1.0);
    unit.validate()?;
    let basis = legendre_basis(q);
    let xs = xs_matrix(q.s);
    let x_inv_w = xs
        .lu()
        .solve(&unit.w_matrix())
        .ok_or_else(|| Error::Numerical("X_s is singular".into()))?;
    Ok(&basis.p * x_inv_w * &basis.p_inv)
}

/// A one-parameter family `A(α) = A₀ + α D` with `D = P W P⁻¹` for a fixed
/// perturbation index, cached so that repeated α evaluations are cheap.
#[derive(Debug, Clone)]
pub struct MethodFamily {
    pub quadrature: QuadratureRule,
    /// `None` for the unperturbable Gauss method.
    pub perturb_index: Option<usize>,
    a0: DMatrix<f64>,
    direction: DMatrix<f64>,
}

impl MethodFamily {
    pub fn new(s: usize, perturb_index: Option<usize>) -> Result<Self> {
        let quadrature = gauss_quadrature(s)?;
        let a0 = butcher(&quadrature, &PerturbationSpec::none(s))?.a;
        let direction = match perturb_index {
            Some(j) => {
                let unit = PerturbationSpec::single(s, j, 1.0);
                unit.validate()?;
                let basis = legendre_basis(&quadrature);
                &basis.p * unit.w_matrix() * &basis.p_inv
            }
            None => DMatrix::zeros(s, s),
        };
        Ok(Self { quadrature, perturb_index, a0, direction })
    }

    pub fn stages(&self) -> usize {
        self.quadrature.s
    }

    pub fn tableau(&self, alpha: f64) -> ButcherTableau {
        let perturbation = match self.perturb_index {
            Some(j) if alpha != 0.0 => PerturbationSpec::single(self.stages(), j, alpha),
            _ => PerturbationSpec::none(self.stages()),
        };
        let a = if alpha == 0.0 { self.a0.clone() } else { &self.a0 + &self.direction * alpha };
        ButcherTableau {
            quadrature: self.quadrature.clone(),
            a,
            order: perturbation.order(),
            perturbation,
        }
    }
}

/// Lagrange basis on the nodes, in monomial form.
#[derive(Debug, Clone)]
pub struct LagrangeBasis {
    /// `coeffs[j][k]`: coefficient of `τ^k` in `l_j`.
    coeffs: Vec<Vec<f64>>,
}

impl LagrangeBasis {
    pub fn new(nodes: &[f64]) -> Self {
        let s = nodes.len();
        let coeffs = (0..s)
            .map(|j| {
                let mut poly = vec![1.0];
                let mut denom = 1.0;
                for (k, &ck) in nodes.iter().enumerate() {
                    if k == j {
                        continue;
                    }
                    let mut next = vec![0.0; poly.len() + 1];
                    for (d, &a) in poly.iter().enumerate() {
                        next[d + 1] += a;
                        next[d] -= a * ck;
                    }
                    poly = next;
                    denom *= nodes[j] - ck;
                }
                poly.iter().map(|a| a / denom).collect()
            })
            .collect();
        Self { coeffs }
    }

    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }

    /// `l_j(τ)`.
    pub fn value(&self, j: usize, tau: f64) -> f64 {
        self.coeffs[j].iter().rev().fold(0.0, |acc, &a| acc * tau + a)
    }

    /// `∫₀^τ l_j(x) dx`.
    pub fn integral(&self, j: usize, tau: f64) -> f64 {
        let c = &self.coeffs[j];
        let mut acc = 0.0;
        for (k, &a) in c.iter().enumerate().rev() {
            acc = acc * tau + a / (k as f64 + 1.0);
        }
        acc * tau
    }
}
