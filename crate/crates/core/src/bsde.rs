//! The adjoint backward equation
//!
//! ```text
//! dη = −[(A+BΘ)ᵀη + (C+DΘ)ᵀζ + (C+DΘ)ᵀPσ + Θᵀρ + Pb + q] ds + ζ dW,   η(T) = g
//! ```
//!
//! for the two supported input classes.
//!
//! * Deterministic inputs: `ζ ≡ 0` and `η` solves a linear backward ODE.
//! * A modulated drift input `b = M(s) f(s)` on a scalar state: the ansatz
//!   `η = M h`, `ζ = γ M h` turns the equation into the scalar ODE
//!   `ḣ = −[(A + BΘ + γ(C + DΘ)) h + P f]`, `h(T) = 0`.
//!
//! The two parts superpose, since the equation is linear in its forcing.
//!
//! A forcing profile with an inverse square-root singularity at `T` is
//! integrated in the variable `τ = √(T − s)`, in which the equation becomes
//! `dh/dτ = 2τ a h + 2 P g`. Its right-hand side is smooth, so RK4 keeps its
//! order all the way to the terminal time.

use crate::error::{Error, Result};
use crate::grid::GridFn;
use crate::linalg::Matrix;
use crate::problem::{ScalarProfile, SlqProblem};
use crate::riccati::{gain, Frozen, RiccatiSolution};

/// Deterministic description of `(η, ζ)` for one `ε`.
#[derive(Debug, Clone)]
pub struct AdjointProfile {
    pub epsilon: f64,
    /// The deterministic component of `η` (an `n×1` function); equals `g` at `T`.
    pub deterministic_eta: GridFn,
    /// `h` with `η = M h` and `ζ = γ M h`; zero at `T`.
    pub modulated_h: Option<GridFn>,
    pub gamma: Option<f64>,
}

impl AdjointProfile {
    /// `η(s)` along a path where the martingale factor equals `martingale`.
    pub fn eta(&self, s: f64, martingale: f64) -> Matrix {
        let mut eta = self.deterministic_eta.eval(s);
        if let Some(h) = &self.modulated_h {
            eta.add_scalar_mut(martingale * h.eval_entry(s, 0, 0));
        }
        eta
    }

    /// `ζ(s) = γ M(s) h(s)`; zero for deterministic inputs.
    pub fn zeta(&self, s: f64, martingale: f64) -> Matrix {
        let n = self.deterministic_eta.shape().0;
        match (&self.modulated_h, self.gamma) {
            (Some(h), Some(gamma)) => {
                Matrix::from_element(n, 1, gamma * martingale * h.eval_entry(s, 0, 0))
            }
            _ => Matrix::zeros(n, 1),
        }
    }

    /// `s,eta_det_1..eta_det_n,h` with 17 significant digits.
    pub fn to_csv(&self) -> String {
        let n = self.deterministic_eta.shape().0;
        let mut out = String::from("s");
        for i in 1..=n {
            out.push_str(&format!(",eta_det_{i}"));
        }
        out.push_str(",h\n");
        for (k, &s) in self.deterministic_eta.grid().iter().enumerate() {
            out.push_str(&crate::fmt_num(s));
            for i in 0..n {
                out.push(',');
                out.push_str(&crate::fmt_num(self.deterministic_eta.values()[k][(i, 0)]));
            }
            out.push(',');
            let h = self.modulated_h.as_ref().map_or(0.0, |h| h.values()[k][(0, 0)]);
            out.push_str(&crate::fmt_num(h));
            out.push('\n');
        }
        out
    }
}

/// Solves for `(η, ζ)` with whichever reduction the inputs admit.
pub fn solve_adjoint(p: &SlqProblem, sol: &RiccatiSolution) -> Result<AdjointProfile> {
    if p.inputs.any_modulated() {
        solve_adjoint_modulated(p, sol)
    } else {
        solve_adjoint_deterministic(p, sol)
    }
}

/// Deterministic inputs only: `ζ ≡ 0`, RK4 on the Riccati grid.
pub fn solve_adjoint_deterministic(
    p: &SlqProblem,
    sol: &RiccatiSolution,
) -> Result<AdjointProfile> {
    if let Some((name, _)) = p.inputs.named().iter().find(|(_, i)| i.modulated.is_some()) {
        return Err(Error::WrongClass(format!(
            "input {name} is modulated; use solve_adjoint_modulated"
        )));
    }
    Ok(AdjointProfile {
        epsilon: sol.epsilon,
        deterministic_eta: deterministic_part(p, sol)?,
        modulated_h: None,
        gamma: None,
    })
}

/// Scalar state with a modulated drift input `b`; other inputs deterministic.
pub fn solve_adjoint_modulated(p: &SlqProblem, sol: &RiccatiSolution) -> Result<AdjointProfile> {
    if p.n != 1 {
        return Err(Error::WrongClass(
            "modulated adjoint needs a scalar state".into(),
        ));
    }
    for (name, input) in p.inputs.named() {
        if name != "b" && input.modulated.is_some() {
            return Err(Error::WrongClass(format!(
                "only the drift input b may be modulated, {name} is"
            )));
        }
    }
    let modulation = p.inputs.b.modulated.as_ref().ok_or_else(|| {
        Error::WrongClass("no modulated input; use solve_adjoint_deterministic".into())
    })?;
    let h = modulated_part(p, sol, modulation.gamma, &modulation.profile)?;
    Ok(AdjointProfile {
        epsilon: sol.epsilon,
        deterministic_eta: deterministic_part(p, sol)?,
        modulated_h: Some(h),
        gamma: Some(modulation.gamma),
    })
}

fn deterministic_part(p: &SlqProblem, sol: &RiccatiSolution) -> Result<GridFn> {
    let eps = sol.epsilon;
    let inputs = &p.inputs;
    let drift = |s: f64, eta: &Matrix| -> Result<Matrix> {
        let pm = sol.eval(s);
        let f = Frozen::at(p, s);
        let (_, theta) = gain(p, &pm, eps, s)?;
        let closed_a = &f.a + &f.b * &theta;
        let closed_c = &f.c + &f.d * &theta;
        let sigma = inputs.sigma.deterministic.eval(s);
        let rho = inputs.rho.deterministic.eval(s);
        let b = inputs.b.deterministic.eval(s);
        let q = inputs.q.deterministic.eval(s);
        let rate = closed_a.transpose() * eta
            + closed_c.transpose() * &pm * sigma
            + theta.transpose() * rho
            + &pm * b
            + q;
        Ok(-rate)
    };
    let grid = sol.grid().to_vec();
    let steps = grid.len() - 1;
    let mut values = vec![Matrix::zeros(p.n, 1); steps + 1];
    values[steps] = Matrix::from_column_slice(p.n, 1, p.g_lin.as_slice());
    let all_zero = inputs.named().iter().all(|(_, i)| i.is_zero()) && p.g_lin.iter().all(|&x| x == 0.0);
    if !all_zero {
        for k in (0..steps).rev() {
            let (s1, s0) = (grid[k + 1], grid[k]);
            let h = s0 - s1;
            let y = &values[k + 1];
            let k1 = drift(s1, y)?;
            let k2 = drift(s1 + 0.5 * h, &(y + &k1 * (0.5 * h)))?;
            let k3 = drift(s1 + 0.5 * h, &(y + &k2 * (0.5 * h)))?;
            let k4 = drift(s0, &(y + &k3 * h))?;
            values[k] = y + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        }
    }
    GridFn::new(grid, values)
}

fn modulated_part(
    p: &SlqProblem,
    sol: &RiccatiSolution,
    gamma: f64,
    profile: &ScalarProfile,
) -> Result<GridFn> {
    let eps = sol.epsilon;
    let horizon = p.horizon;
    // Coefficient a(s) = A + BΘ + γ(C + DΘ) and P(s) at any time.
    let coeffs = |s: f64| -> Result<(f64, f64)> {
        let pm = sol.eval(s);
        let f = Frozen::at(p, s);
        let (_, theta) = gain(p, &pm, eps, s)?;
        let a = (&f.a + &f.b * &theta + (&f.c + &f.d * &theta) * gamma)[(0, 0)];
        Ok((a, pm[(0, 0)]))
    };

    let grid = sol.grid().to_vec();
    let steps = grid.len() - 1;
    let mut h = vec![0.0; steps + 1];

    match profile.inverse_sqrt_singularity() {
        Some((end, smooth)) => {
            if (end - horizon).abs() > 1e-12 * horizon.max(1.0) {
                return Err(Error::WrongClass(format!(
                    "singular profile must blow up at the horizon {horizon}, not at {end}"
                )));
            }
            // dh/dτ = 2τ a(T−τ²) h + 2 P(T−τ²) g(T−τ²).
            let rate = |tau: f64, y: f64| -> Result<f64> {
                let s = horizon - tau * tau;
                let (a, pm) = coeffs(s)?;
                Ok(2.0 * tau * a * y + 2.0 * pm * smooth(s))
            };
            for k in (0..steps).rev() {
                let tau0 = (horizon - grid[k + 1]).max(0.0).sqrt();
                let tau1 = (horizon - grid[k]).sqrt();
                let dt = tau1 - tau0;
                let y = h[k + 1];
                let k1 = rate(tau0, y)?;
                let k2 = rate(tau0 + 0.5 * dt, y + 0.5 * dt * k1)?;
                let k3 = rate(tau0 + 0.5 * dt, y + 0.5 * dt * k2)?;
                let k4 = rate(tau1, y + dt * k3)?;
                h[k] = y + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            }
        }
        None => {
            let rate = |s: f64, y: f64| -> Result<f64> {
                let (a, pm) = coeffs(s)?;
                Ok(-(a * y + pm * profile.eval(s)))
            };
            for k in (0..steps).rev() {
                let (s1, s0) = (grid[k + 1], grid[k]);
                let dt = s0 - s1;
                let y = h[k + 1];
                let k1 = rate(s1, y)?;
                let k2 = rate(s1 + 0.5 * dt, y + 0.5 * dt * k1)?;
                let k3 = rate(s1 + 0.5 * dt, y + 0.5 * dt * k2)?;
                let k4 = rate(s0, y + dt * k3)?;
                h[k] = y + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            }
        }
    }
    GridFn::scalar(grid, &h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{builtin, CoefFn, RandomInput};
    use crate::riccati::solve_perturbed;
    use rand::{Rng, SeedableRng};

    /// `h_ε(s) = ε/(ε+1−s) · e^{−s} · 2√(1−s)` for the singular example.
    fn h_exact(eps: f64, s: f64) -> f64 {
        eps / (eps + 1.0 - s) * (-s).exp() * 2.0 * (1.0 - s).sqrt()
    }

    #[test]
    fn zero_inputs_give_zero_adjoint() {
        let (p, _) = builtin("standard-scalar").unwrap();
        let sol = solve_perturbed(&p, 1.0, 64).unwrap();
        let adj = solve_adjoint_deterministic(&p, &sol).unwrap();
        assert!(adj.deterministic_eta.values().iter().all(|v| v[(0, 0)] == 0.0));
        assert!(adj.modulated_h.is_none());
    }

    #[test]
    fn pure_terminal_weight_is_transported_unchanged() {
        let (mut p, _) = builtin("standard-scalar").unwrap();
        p.b = CoefFn::scalar(0.0);
        p.g_lin[0] = 0.7;
        let sol = solve_perturbed(&p, 1.0, 64).unwrap();
        let adj = solve_adjoint_deterministic(&p, &sol).unwrap();
        for v in adj.deterministic_eta.values() {
            assert!((v[(0, 0)] - 0.7).abs() < 1e-15);
        }
    }

    #[test]
    fn deterministic_forcing_self_converges() {
        let (mut p, _) = builtin("standard-scalar").unwrap();
        p.inputs.b = RandomInput::deterministic(CoefFn::scalar(1.0));
        let coarse = solve_adjoint_deterministic(&p, &solve_perturbed(&p, 1.0, 500).unwrap()).unwrap();
        let fine = solve_adjoint_deterministic(&p, &solve_perturbed(&p, 1.0, 1000).unwrap()).unwrap();
        for (k, v) in coarse.deterministic_eta.values().iter().enumerate() {
            let w = &fine.deterministic_eta.values()[2 * k];
            assert!((v[(0, 0)] - w[(0, 0)]).abs() <= 1e-8);
        }
        // Sanity: P ≡ 1/(2−s) at ε = 1 gives a positive adjoint before T.
        assert!(coarse.deterministic_eta.values()[0][(0, 0)] > 0.0);
    }

    #[test]
    fn deterministic_route_rejects_modulated_inputs() {
        let (p, _) = builtin("example-5.1").unwrap();
        let sol = solve_perturbed(&p, 1.0, 64).unwrap();
        assert!(matches!(
            solve_adjoint_deterministic(&p, &sol),
            Err(Error::WrongClass(_))
        ));
        let (q, _) = builtin("example-1.1").unwrap();
        assert!(matches!(
            solve_adjoint_modulated(&q, &solve_perturbed(&q, 1.0, 64).unwrap()),
            Err(Error::WrongClass(_))
        ));
    }

    #[test]
    fn modulated_example_point_values() {
        let (p, _) = builtin("example-5.1").unwrap();
        let sol = solve_perturbed(&p, 1.0, 4000).unwrap();
        let adj = solve_adjoint_modulated(&p, &sol).unwrap();
        let h = adj.modulated_h.as_ref().unwrap();
        assert!((h.values()[0][(0, 0)] - 1.0).abs() < 1e-6);
        assert_eq!(h.values().last().unwrap()[(0, 0)], 0.0);

        let sol = solve_perturbed(&p, 0.5, 4000).unwrap();
        let adj = solve_adjoint_modulated(&p, &sol).unwrap();
        let h = adj.modulated_h.as_ref().unwrap();
        // With e^{-s} factored out: ε/(ε+1−s) · 2√(1−s) = √2/2 at ε = s = 1/2.
        let at_half = h.eval_entry(0.5, 0, 0) * 0.5f64.exp();
        assert!((at_half - 0.5f64.sqrt()).abs() < 1e-6, "{at_half}");
    }

    #[test]
    fn modulated_example_matches_closed_form_on_grid() {
        let (p, _) = builtin("example-5.1").unwrap();
        for eps in [1.0, 0.25, 0.0625] {
            let sol = solve_perturbed(&p, eps, 2000).unwrap();
            let adj = solve_adjoint_modulated(&p, &sol).unwrap();
            let h = adj.modulated_h.unwrap();
            for (&s, v) in h.grid().iter().zip(h.values()).filter(|(&s, _)| s < 1.0) {
                let ratio = v[(0, 0)] * (eps + 1.0 - s) / (eps * (-s).exp());
                assert!((ratio - 2.0 * (1.0 - s).sqrt()).abs() < 1e-5, "eps {eps} s {s}");
                assert!((v[(0, 0)] - h_exact(eps, s)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn ansatz_reproduces_bsde_drift() {
        // d(Mh) = M ḣ ds + γ M h dW, so the drift of η is M ḣ. Compare it with
        // −[(A+BΘ)η + (C+DΘ)ζ + P b] at random (s, W).
        let (p, _) = builtin("example-5.1").unwrap();
        let eps = 0.5;
        let sol = solve_perturbed(&p, eps, 4000).unwrap();
        let adj = solve_adjoint_modulated(&p, &sol).unwrap();
        let h = adj.modulated_h.as_ref().unwrap();
        let gamma = adj.gamma.unwrap();
        let grid = h.grid();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let k = rng.random_range(1..3600);
            let s = grid[k];
            let w: f64 = rng.random_range(-2.0..2.0);
            let m = crate::problem::Modulation::martingale(gamma, s, w);
            let dt = grid[k + 1] - grid[k - 1];
            let h_dot = (h.values()[k + 1][(0, 0)] - h.values()[k - 1][(0, 0)]) / dt;
            let lhs = m * h_dot;
            let theta = gain(&p, &sol.eval(s), eps, s).unwrap().1[(0, 0)];
            let eta = adj.eta(s, m)[(0, 0)];
            let zeta = adj.zeta(s, m)[(0, 0)];
            let b = p.inputs.b.eval(s, w)[(0, 0)];
            let pm = sol.eval(s)[(0, 0)];
            let c = 2f64.sqrt();
            let rhs = -((-1.0 + theta) * eta + c * zeta + pm * b);
            worst = worst.max((lhs - rhs).abs() / rhs.abs().max(1e-12));
        }
        assert!(worst <= 1e-6, "max relative residual {worst}");
    }

    #[test]
    fn adjoint_is_linear_in_forcing() {
        let (p, _) = builtin("example-5.1").unwrap();
        let sol = solve_perturbed(&p, 0.5, 400).unwrap();
        let base = solve_adjoint(&p, &sol).unwrap();
        let mut doubled = p.clone();
        if let Some(m) = doubled.inputs.b.modulated.as_mut() {
            if let ScalarProfile::ExpOverSqrtGap { scale, .. } = &mut m.profile {
                *scale *= 2.0;
            }
        }
        let twice = solve_adjoint(&doubled, &sol).unwrap();
        for (a, b) in base
            .modulated_h
            .unwrap()
            .values()
            .iter()
            .zip(twice.modulated_h.unwrap().values())
        {
            assert!((2.0 * a[(0, 0)] - b[(0, 0)]).abs() <= 1e-14 * b[(0, 0)].abs().max(1.0));
        }
    }

    #[test]
    fn csv_header() {
        let (p, _) = builtin("example-5.1").unwrap();
        let sol = solve_perturbed(&p, 0.5, 16).unwrap();
        let csv = solve_adjoint(&p, &sol).unwrap().to_csv();
        assert!(csv.starts_with("s,eta_det_1,h\n"));
        assert_eq!(csv.lines().count(), 18);
    }
}
