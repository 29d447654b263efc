//! Backward integration of the perturbed and generalized Riccati equations.
//!
//! Both equations share the right-hand side
//!
//! ```text
//! Ṗ = −[PA + AᵀP + CᵀPC + Q − (PB + CᵀPD + Sᵀ) K⁺ (BᵀP + DᵀPC + S)],   P(T) = G,
//! ```
//!
//! with `K = R + εI + DᵀPD`. For `ε > 0` the inverse `K⁺ = K⁻¹` is a true
//! inverse; for `ε = 0` (the generalized equation) it is the Moore-Penrose
//! pseudoinverse. Integration uses classical RK4 on a uniform grid, running
//! from `T` down to `0`, and symmetrizes after every step.

use crate::error::{invalid, Error, Result};
use crate::grid::{tail_probe, uniform_grid, GridFn};
use crate::linalg::{
    frobenius, guarded_inverse, min_eigenvalue, pinv, range_included, symmetrize, Matrix,
    PINV_REL_TOL,
};
use crate::problem::SlqProblem;

/// Frobenius norm above which the solution is declared blown up.
pub const BLOW_UP_NORM: f64 = 1e12;

/// Default tolerance for the positivity and range tests.
pub const REGULARITY_TOL: f64 = 1e-9;

/// Numerical solution of a Riccati equation on a uniform grid of `[0, T]`.
#[derive(Debug, Clone)]
pub struct RiccatiSolution {
    /// `0` for the generalized equation.
    pub epsilon: f64,
    /// `P(s)` at the nodes; `P(T) = G` exactly.
    pub p: GridFn,
    /// `Ṗ(s)` at the nodes, used for cubic Hermite evaluation between nodes.
    p_dot: Vec<Matrix>,
    pub steps: usize,
    /// Largest step-doubling discrepancy seen on the sampled steps.
    pub max_local_error_estimate: f64,
    /// Largest relative asymmetry `‖P − Pᵀ‖/max(1,‖P‖)` before symmetrizing.
    pub max_asymmetry: f64,
}

impl RiccatiSolution {
    pub fn grid(&self) -> &[f64] {
        self.p.grid()
    }

    pub fn horizon(&self) -> f64 {
        self.p.end()
    }

    /// `P(s)` by cubic Hermite interpolation of the node values and slopes;
    /// fourth-order accurate like the integrator.
    pub fn eval(&self, s: f64) -> Matrix {
        let grid = self.p.grid();
        let values = self.p.values();
        if s <= grid[0] {
            return values[0].clone();
        }
        if s >= self.horizon() {
            return values.last().unwrap().clone();
        }
        let k = (grid.partition_point(|&x| x <= s) - 1).min(grid.len() - 2);
        let h = grid[k + 1] - grid[k];
        let t = (s - grid[k]) / h;
        let t2 = t * t;
        let t3 = t2 * t;
        let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
        let h10 = t3 - 2.0 * t2 + t;
        let h01 = -2.0 * t3 + 3.0 * t2;
        let h11 = t3 - t2;
        &values[k] * h00
            + &self.p_dot[k] * (h10 * h)
            + &values[k + 1] * h01
            + &self.p_dot[k + 1] * (h11 * h)
    }

    /// Writes `s,P_11,P_12,...,P_nn` rows with 17 significant digits.
    pub fn to_csv(&self) -> String {
        let n = self.p.shape().0;
        let mut out = String::from("s");
        for i in 1..=n {
            for j in 1..=n {
                out.push_str(&format!(",P_{i}{j}"));
            }
        }
        out.push('\n');
        for (s, p) in self.p.grid().iter().zip(self.p.values()) {
            out.push_str(&crate::fmt_num(*s));
            for i in 0..n {
                for j in 0..n {
                    out.push(',');
                    out.push_str(&crate::fmt_num(p[(i, j)]));
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Coefficient values frozen at one time.
pub(crate) struct Frozen {
    pub a: Matrix,
    pub b: Matrix,
    pub c: Matrix,
    pub d: Matrix,
    pub q: Matrix,
    pub s: Matrix,
    pub r: Matrix,
}

impl Frozen {
    pub fn at(p: &SlqProblem, s: f64) -> Self {
        Frozen {
            a: p.a.eval(s),
            b: p.b.eval(s),
            c: p.c.eval(s),
            d: p.d.eval(s),
            q: p.q.eval(s),
            s: p.s.eval(s),
            r: p.r.eval(s),
        }
    }

    /// `K = R + εI + DᵀPD`.
    pub fn inner(&self, pm: &Matrix, epsilon: f64) -> Matrix {
        let m = self.r.nrows();
        &self.r + Matrix::identity(m, m) * epsilon + self.d.transpose() * pm * &self.d
    }

    /// `BᵀP + DᵀPC + S`.
    pub fn cross(&self, pm: &Matrix) -> Matrix {
        self.b.transpose() * pm + self.d.transpose() * pm * &self.c + &self.s
    }
}

/// `K⁺`: a guarded inverse for `ε > 0`, the pseudoinverse for `ε = 0`.
pub(crate) fn inner_inverse(k: &Matrix, epsilon: f64, s: f64) -> Result<Matrix> {
    if epsilon > 0.0 {
        guarded_inverse(k, s)
    } else {
        pinv(&symmetrize(k), PINV_REL_TOL)
    }
}

/// Feedback gain `−K⁺(BᵀP + DᵀPC + S)` at time `s`, with `K⁺` as in
/// [`inner_inverse`]. Returns `(K⁺, Θ)`.
pub(crate) fn gain(
    p: &SlqProblem,
    pm: &Matrix,
    epsilon: f64,
    s: f64,
) -> Result<(Matrix, Matrix)> {
    let f = Frozen::at(p, s);
    let k_inv = inner_inverse(&f.inner(pm, epsilon), epsilon, s)?;
    let theta = -(&k_inv * f.cross(pm));
    Ok((k_inv, theta))
}

fn rhs(p: &SlqProblem, epsilon: f64, s: f64, pm: &Matrix) -> Result<Matrix> {
    let f = Frozen::at(p, s);
    let k_inv = inner_inverse(&f.inner(pm, epsilon), epsilon, s)?;
    let cross = f.cross(pm);
    let at_p = f.a.transpose() * pm;
    let lin = pm * &f.a + &at_p + f.c.transpose() * pm * &f.c + &f.q;
    let quad = cross.transpose() * k_inv * &cross;
    Ok(-(lin - quad))
}

fn rk4_step(p: &SlqProblem, epsilon: f64, s: f64, pm: &Matrix, h: f64) -> Result<Matrix> {
    // h < 0 integrates backwards.
    let k1 = rhs(p, epsilon, s, pm)?;
    let k2 = rhs(p, epsilon, s + 0.5 * h, &(pm + &k1 * (0.5 * h)))?;
    let k3 = rhs(p, epsilon, s + 0.5 * h, &(pm + &k2 * (0.5 * h)))?;
    let k4 = rhs(p, epsilon, s + h, &(pm + &k3 * h))?;
    Ok(pm + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0))
}

fn integrate(p: &SlqProblem, epsilon: f64, steps: usize) -> Result<RiccatiSolution> {
    if steps < 16 {
        return Err(invalid(format!("steps must be at least 16, got {steps}")));
    }
    let horizon = p.horizon;
    let grid = uniform_grid(0.0, horizon, steps);
    let h = horizon / steps as f64;
    let g = p.g.as_matrix().clone();

    let mut values = vec![Matrix::zeros(0, 0); steps + 1];
    let mut p_dot = vec![Matrix::zeros(0, 0); steps + 1];
    p_dot[steps] = rhs(p, epsilon, horizon, &g)?;
    values[steps] = g;
    let mut max_err: f64 = 0.0;
    let mut max_asym: f64 = 0.0;

    for k in (0..steps).rev() {
        let s_next = grid[k + 1];
        let current = &values[k + 1];
        let raw = rk4_step(p, epsilon, s_next, current, -h)?;
        if k % 10 == 0 {
            let half = rk4_step(p, epsilon, s_next, current, -0.5 * h)?;
            let two = rk4_step(p, epsilon, s_next - 0.5 * h, &half, -0.5 * h)?;
            max_err = max_err.max(frobenius(&(&two - &raw)));
        }
        let asym = frobenius(&(&raw - raw.transpose())) / frobenius(&raw).max(1.0);
        max_asym = max_asym.max(asym);
        let sym = symmetrize(&raw);
        let norm = frobenius(&sym);
        if !norm.is_finite() || norm > BLOW_UP_NORM {
            return Err(Error::BlowUp { s: grid[k] });
        }
        p_dot[k] = rhs(p, epsilon, grid[k], &sym)?;
        values[k] = sym;
    }

    Ok(RiccatiSolution {
        epsilon,
        p: GridFn::new(grid, values)?,
        p_dot,
        steps,
        max_local_error_estimate: max_err,
        max_asymmetry: max_asym,
    })
}

/// Solves the ε-perturbed Riccati equation; requires `ε > 0`, `steps ≥ 16`.
pub fn solve_perturbed(p: &SlqProblem, epsilon: f64, steps: usize) -> Result<RiccatiSolution> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(invalid(format!("epsilon must be positive, got {epsilon}")));
    }
    integrate(p, epsilon, steps)
}

/// Solves the generalized Riccati equation (pseudoinverse in place of the
/// inverse). A solution that exists but is not regular is still returned;
/// finite-time blow-up is reported as [`Error::BlowUp`].
pub fn solve_gre(p: &SlqProblem, steps: usize) -> Result<RiccatiSolution> {
    integrate(p, 0.0, steps)
}

/// `Θ̂(s) = −(R + DᵀPD)†(BᵀP + DᵀPC + S)`.
pub fn theta_hat(sol: &RiccatiSolution, p: &SlqProblem, s: f64) -> Result<Matrix> {
    if !(s >= 0.0 && s <= p.horizon) {
        return Err(invalid(format!("time {s} outside [0, {}]", p.horizon)));
    }
    Ok(gain(p, &sol.eval(s), 0.0, s)?.1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regularity {
    Regular,
    NotRegular,
}

/// The three conditions characterizing a regular GRE solution.
#[derive(Debug, Clone, PartialEq)]
pub struct RegularityReport {
    /// `R + DᵀPD ⪰ −tol` at every node.
    pub positivity_ok: bool,
    pub min_eigenvalue: f64,
    /// `‖Θ̂‖_{L²}`, or `+∞` when the tail probe finds it unbounded.
    pub theta_hat_l2: f64,
    /// `R(BᵀP + DᵀPC + S) ⊆ R(R + DᵀPD)` at every node.
    pub range_ok: bool,
    /// First node where the range condition fails.
    pub first_range_violation: Option<f64>,
    /// Set when the GRE has no solution on `[0, T]`.
    pub blow_up: Option<f64>,
    pub verdict: Regularity,
}

impl RegularityReport {
    /// Report for a GRE that blew up at `s`: not regular.
    pub fn blown_up(s: f64) -> Self {
        RegularityReport {
            positivity_ok: false,
            min_eigenvalue: f64::NAN,
            theta_hat_l2: f64::INFINITY,
            range_ok: false,
            first_range_violation: None,
            blow_up: Some(s),
            verdict: Regularity::NotRegular,
        }
    }
}

/// Tests positivity, L²-integrability of `Θ̂`, and range inclusion.
pub fn check_regularity(
    sol: &RiccatiSolution,
    p: &SlqProblem,
    tol: f64,
) -> Result<RegularityReport> {
    if !(tol > 0.0) {
        return Err(invalid("regularity tolerance must be positive"));
    }
    let mut min_eig = f64::INFINITY;
    let mut first_violation = None;
    for (&s, pm) in sol.p.grid().iter().zip(sol.p.values()) {
        let f = Frozen::at(p, s);
        let k = f.inner(pm, 0.0);
        min_eig = min_eig.min(min_eigenvalue(&k));
        if first_violation.is_none() && !range_included(&f.cross(pm), &k, tol)? {
            first_violation = Some(s);
        }
    }
    let positivity_ok = min_eig >= -tol;
    let range_ok = first_violation.is_none();

    let horizon = p.horizon;
    let density = |s: f64| {
        theta_hat(sol, p, s.min(horizon))
            .map(|m| m.norm_squared())
            .unwrap_or(f64::INFINITY)
    };
    let probe = tail_probe(density, 0.0, horizon, 1e-2 * horizon, 1e-5 * horizon);
    let theta_hat_l2 = if probe.diverging || !probe.value.is_finite() {
        f64::INFINITY
    } else {
        probe.value.sqrt()
    };

    let verdict = if positivity_ok && range_ok && theta_hat_l2.is_finite() {
        Regularity::Regular
    } else {
        Regularity::NotRegular
    };
    Ok(RegularityReport {
        positivity_ok,
        min_eigenvalue: min_eig,
        theta_hat_l2,
        range_ok,
        first_range_violation: first_violation,
        blow_up: None,
        verdict,
    })
}
