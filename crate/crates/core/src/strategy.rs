//! Perturbed feedbacks `(Θ_ε, v_ε)`, the ε-ladder, the weak closed-loop limit
//! and the solvability diagnosis.
//!
//! ```text
//! Θ_ε = −(R + εI + DᵀP_εD)⁻¹ (BᵀP_ε + DᵀP_εC + S)
//! v_ε = −(R + εI + DᵀP_εD)⁻¹ (Bᵀη_ε + Dᵀζ_ε + DᵀP_εσ + ρ)
//! ```
//!
//! With `ε = 0` the same assembly produces the closed-loop strategy of a
//! regular generalized Riccati solution.

use rayon::prelude::*;

use crate::bsde::{solve_adjoint, AdjointProfile};
use crate::error::{invalid, Error, Result};
use crate::grid::GridFn;
use crate::linalg::Matrix;
use crate::problem::{InitialPair, SlqProblem};
use crate::riccati::{
    check_regularity, gain, solve_gre, solve_perturbed, RegularityReport, RiccatiSolution,
    REGULARITY_TOL,
};
use crate::simulate::{
    control_norm, simulate_coupled, ControlSpec, ModulatedProfile, MonteCarloConfig,
    MonteCarloEstimate,
};

/// `Θ_ε(s)`, with a true inverse of the inner matrix.
pub fn theta_eps(sol: &RiccatiSolution, p: &SlqProblem, s: f64) -> Result<Matrix> {
    if !(sol.epsilon > 0.0) {
        return Err(invalid("theta_eps needs a perturbed Riccati solution"));
    }
    check_time(p, s)?;
    Ok(gain(p, &sol.eval(s), sol.epsilon, s)?.1)
}

/// Deterministic part of `v_ε(s)` and, for modulated inputs, the profile
/// whose product with `M(s)` is the random part.
pub fn v_eps_parts(
    sol: &RiccatiSolution,
    adj: &AdjointProfile,
    p: &SlqProblem,
    s: f64,
) -> Result<(Matrix, Option<Matrix>)> {
    if !(sol.epsilon > 0.0) {
        return Err(invalid("v_eps_parts needs a perturbed Riccati solution"));
    }
    check_time(p, s)?;
    let pm = sol.eval(s);
    v_parts_at(p, &pm, adj, sol.epsilon, s, |f| f.eval(s))
}

fn check_time(p: &SlqProblem, s: f64) -> Result<()> {
    if !(s >= 0.0 && s <= p.horizon) {
        return Err(invalid(format!("time {s} outside [0, {}]", p.horizon)));
    }
    Ok(())
}

fn v_parts_at(
    p: &SlqProblem,
    pm: &Matrix,
    adj: &AdjointProfile,
    epsilon: f64,
    s: f64,
    at: impl Fn(&GridFn) -> Matrix,
) -> Result<(Matrix, Option<Matrix>)> {
    if adj.epsilon != epsilon {
        return Err(invalid(format!(
            "adjoint solved for epsilon {} but Riccati for {}",
            adj.epsilon, epsilon
        )));
    }
    let (k_inv, _) = gain(p, pm, epsilon, s)?;
    let b = p.b.eval(s);
    let d = p.d.eval(s);
    let eta = at(&adj.deterministic_eta);
    let sigma = p.inputs.sigma.deterministic.eval(s);
    let rho = p.inputs.rho.deterministic.eval(s);
    let det = -(&k_inv * (b.transpose() * eta + d.transpose() * pm * sigma + rho));
    let modulated = match (&adj.modulated_h, adj.gamma) {
        (Some(h), Some(gamma)) => {
            let h = at(h)[(0, 0)];
            Some(-(&k_inv * (b.transpose() + d.transpose() * gamma)) * h)
        }
        _ => None,
    };
    Ok((det, modulated))
}

/// Everything the ε-perturbed problem produces on one grid.
#[derive(Debug, Clone)]
pub struct PerturbedSolution {
    pub epsilon: f64,
    pub p: RiccatiSolution,
    /// `m×n` gain at the Riccati nodes.
    pub theta: GridFn,
    pub adjoint: AdjointProfile,
    /// `m×1`.
    pub v_det: GridFn,
    /// `m×1` profile; the random part of `v_ε` is this times `M(s)`.
    pub v_mod_profile: Option<GridFn>,
    pub gamma: Option<f64>,
}

impl PerturbedSolution {
    /// Assembles `(Θ, v)` from a Riccati solution of any `ε ≥ 0`.
    pub fn assemble(p: &SlqProblem, sol: RiccatiSolution) -> Result<Self> {
        let adjoint = solve_adjoint(p, &sol)?;
        let eps = sol.epsilon;
        let grid = sol.grid().to_vec();
        let mut theta = Vec::with_capacity(grid.len());
        let mut v_det = Vec::with_capacity(grid.len());
        let mut v_mod = Vec::with_capacity(grid.len());
        for (k, &s) in grid.iter().enumerate() {
            let pm = &sol.p.values()[k];
            theta.push(gain(p, pm, eps, s)?.1);
            let (det, modulated) = v_parts_at(p, pm, &adjoint, eps, s, |f| f.values()[k].clone())?;
            v_det.push(det);
            if let Some(m) = modulated {
                v_mod.push(m);
            }
        }
        let v_mod_profile = if adjoint.modulated_h.is_some() {
            Some(GridFn::new(grid.clone(), v_mod)?)
        } else {
            None
        };
        Ok(PerturbedSolution {
            epsilon: eps,
            theta: GridFn::new(grid.clone(), theta)?,
            v_det: GridFn::new(grid, v_det)?,
            v_mod_profile,
            gamma: adjoint.gamma,
            adjoint,
            p: sol,
        })
    }

    /// Solves the perturbed Riccati equation and the adjoint, then assembles.
    pub fn solve(p: &SlqProblem, epsilon: f64, steps: usize) -> Result<Self> {
        Self::assemble(p, solve_perturbed(p, epsilon, steps)?)
    }

    /// `u_ε = Θ_ε X + v_ε` as a simulator control.
    pub fn control(&self) -> ControlSpec {
        feedback(&self.theta, &self.v_det, self.v_mod_profile.as_ref(), self.gamma)
    }

    /// `s,theta_11..,v_det_1..,v_mod_profile`.
    pub fn to_csv(&self) -> String {
        strategy_csv(&self.theta, &self.v_det, self.v_mod_profile.as_ref())
    }
}

fn feedback(theta: &GridFn, v_det: &GridFn, v_mod: Option<&GridFn>, gamma: Option<f64>) -> ControlSpec {
    ControlSpec::Feedback {
        theta: theta.clone(),
        v_det: v_det.clone(),
        v_mod: v_mod.zip(gamma).map(|(profile, gamma)| ModulatedProfile {
            gamma,
            profile: profile.clone(),
        }),
    }
}

fn strategy_csv(theta: &GridFn, v_det: &GridFn, v_mod: Option<&GridFn>) -> String {
    let (m, n) = theta.shape();
    let mut out = String::from("s");
    for i in 1..=m {
        for j in 1..=n {
            out.push_str(&format!(",theta_{i}{j}"));
        }
    }
    for i in 1..=m {
        out.push_str(&format!(",v_det_{i}"));
    }
    if m == 1 {
        out.push_str(",v_mod_profile");
    } else {
        for i in 1..=m {
            out.push_str(&format!(",v_mod_profile_{i}"));
        }
    }
    out.push('\n');
    for (k, &s) in theta.grid().iter().enumerate() {
        out.push_str(&crate::fmt_num(s));
        let th = &theta.values()[k];
        for i in 0..m {
            for j in 0..n {
                out.push(',');
                out.push_str(&crate::fmt_num(th[(i, j)]));
            }
        }
        for i in 0..m {
            out.push(',');
            out.push_str(&crate::fmt_num(v_det.values()[k][(i, 0)]));
        }
        for i in 0..m {
            out.push(',');
            let v = v_mod.map_or(0.0, |f| f.values()[k][(i, 0)]);
            out.push_str(&crate::fmt_num(v));
        }
        out.push('\n');
    }
    out
}

/// `ε_max, ε_max·f, ε_max·f², …` down to `ε_min` (inclusive up to rounding).
pub fn geometric_ladder(eps_max: f64, eps_min: f64, factor: f64) -> Result<Vec<f64>> {
    if !(factor > 0.0 && factor < 1.0) {
        return Err(invalid(format!("ladder factor must lie in (0, 1), got {factor}")));
    }
    if !(eps_min > 0.0 && eps_min <= eps_max && eps_max.is_finite()) {
        return Err(invalid(format!(
            "need 0 < eps_min <= eps_max, got {eps_min} and {eps_max}"
        )));
    }
    let mut ladder = vec![eps_max];
    loop {
        let next = ladder.last().unwrap() * factor;
        if next < eps_min * (1.0 - 1e-9) {
            break;
        }
        ladder.push(next);
    }
    Ok(ladder)
}

/// Solves every rung of a strictly decreasing ladder on one shared grid.
pub fn run_ladder(p: &SlqProblem, ladder: &[f64], steps: usize) -> Result<Vec<PerturbedSolution>> {
    if ladder.len() < 3 {
        return Err(invalid(format!("a ladder needs at least 3 rungs, got {}", ladder.len())));
    }
    if ladder.iter().any(|&e| !(e > 0.0 && e.is_finite())) {
        return Err(invalid("ladder values must be positive"));
    }
    if ladder.windows(2).any(|w| w[1] >= w[0]) {
        return Err(invalid("ladder must be strictly decreasing"));
    }
    ladder
        .par_iter()
        .map(|&eps| {
            PerturbedSolution::solve(p, eps, steps).map_err(|e| Error::Ladder {
                epsilon: eps,
                source: Box::new(e),
            })
        })
        .collect()
}

/// L² distances between consecutive rungs on `[0, T − δ]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CauchyStep {
    pub epsilon: f64,
    pub next_epsilon: f64,
    pub theta_distance: f64,
    /// Deterministic part and modulated profile combined.
    pub v_distance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LimitStatus {
    Converged,
    Inconclusive,
}

/// `(Θ*, v*)` on `[0, T − δ]`.
#[derive(Debug, Clone)]
pub struct WeakClosedLoopStrategy {
    pub theta_star: GridFn,
    pub v_star_det: GridFn,
    pub v_star_mod_profile: Option<GridFn>,
    pub gamma: Option<f64>,
    pub delta: f64,
    pub cauchy_evidence: Vec<CauchyStep>,
    pub status: LimitStatus,
}

impl WeakClosedLoopStrategy {
    pub fn converged(&self) -> bool {
        self.status == LimitStatus::Converged
    }

    /// The strategy as a simulator control; hold it past `T − δ` with
    /// [`MonteCarloConfig::truncation_delta`] `≥ δ`.
    pub fn control(&self) -> ControlSpec {
        feedback(
            &self.theta_star,
            &self.v_star_det,
            self.v_star_mod_profile.as_ref(),
            self.gamma,
        )
    }

    /// `s,theta_11..,v_det_1..,v_mod_profile`.
    pub fn to_csv(&self) -> String {
        strategy_csv(&self.theta_star, &self.v_star_det, self.v_star_mod_profile.as_ref())
    }
}

struct Restricted {
    theta: GridFn,
    v_det: GridFn,
    v_mod: Option<GridFn>,
}

fn restrict(sol: &PerturbedSolution, s_max: f64) -> Result<Restricted> {
    Ok(Restricted {
        theta: sol.theta.restrict(s_max)?,
        v_det: sol.v_det.restrict(s_max)?,
        v_mod: sol.v_mod_profile.as_ref().map(|f| f.restrict(s_max)).transpose()?,
    })
}

fn v_distance(a: &Restricted, b: &Restricted) -> Result<f64> {
    let det = a.v_det.l2_distance(&b.v_det)?;
    let modulated = match (&a.v_mod, &b.v_mod) {
        (Some(x), Some(y)) => x.l2_distance(y)?,
        (None, None) => 0.0,
        _ => return Err(invalid("ladder members disagree on the input class")),
    };
    Ok(det.hypot(modulated))
}

fn v_norm(a: &Restricted) -> Result<f64> {
    let modulated = a.v_mod.as_ref().map(|f| f.l2_norm()).transpose()?.unwrap_or(0.0);
    Ok(a.v_det.l2_norm()?.hypot(modulated))
}

fn check_ladder(sols: &[PerturbedSolution], delta: f64) -> Result<f64> {
    if sols.len() < 3 {
        return Err(invalid(format!("a ladder needs at least 3 rungs, got {}", sols.len())));
    }
    let grid = sols[0].theta.grid();
    if sols.iter().any(|s| s.theta.grid() != grid) {
        return Err(invalid("ladder members live on different grids"));
    }
    let horizon = *grid.last().unwrap();
    if !(delta > 0.0 && delta < horizon) {
        return Err(invalid(format!("delta must lie in (0, {horizon}), got {delta}")));
    }
    Ok(horizon - delta)
}

/// Takes the last rung as `(Θ*, v*)` on `[0, T − δ]`, with the consecutive
/// L² distances as evidence. Convergence is declared when the last distances
/// are at most `tol · max(1, norm of the last rung)`.
pub fn extract_limit(
    sols: &[PerturbedSolution],
    delta: f64,
    tol: f64,
) -> Result<WeakClosedLoopStrategy> {
    let s_max = check_ladder(sols, delta)?;
    let restricted = sols
        .iter()
        .map(|s| restrict(s, s_max))
        .collect::<Result<Vec<_>>>()?;
    let mut evidence = Vec::with_capacity(sols.len() - 1);
    for k in 0..sols.len() - 1 {
        let (a, b) = (&restricted[k], &restricted[k + 1]);
        evidence.push(CauchyStep {
            epsilon: sols[k].epsilon,
            next_epsilon: sols[k + 1].epsilon,
            theta_distance: a.theta.l2_distance(&b.theta)?,
            v_distance: v_distance(a, b)?,
        });
    }
    let last = restricted.into_iter().last().unwrap();
    let final_step = evidence.last().unwrap();
    let converged = final_step.theta_distance <= tol * last.theta.l2_norm()?.max(1.0)
        && final_step.v_distance <= tol * v_norm(&last)?.max(1.0);
    Ok(WeakClosedLoopStrategy {
        theta_star: last.theta,
        v_star_det: last.v_det,
        v_star_mod_profile: last.v_mod,
        gamma: sols.last().unwrap().gamma,
        delta,
        cauchy_evidence: evidence,
        status: if converged {
            LimitStatus::Converged
        } else {
            LimitStatus::Inconclusive
        },
    })
}

/// Experimental: eliminates the first-order term of the last two rungs,
/// `(r F_last − F_prev)/(r − 1)` with `r = ε_prev / ε_last`. Assumes the
/// error is linear in ε, which holds for the built-in examples but is not
/// guaranteed in general. The result is flagged inconclusive when the
/// ladder itself did not converge.
pub fn richardson_limit(
    sols: &[PerturbedSolution],
    delta: f64,
    tol: f64,
) -> Result<WeakClosedLoopStrategy> {
    let mut limit = extract_limit(sols, delta, tol)?;
    let s_max = check_ladder(sols, delta)?;
    let (prev, last) = (&sols[sols.len() - 2], &sols[sols.len() - 1]);
    let r = prev.epsilon / last.epsilon;
    let combine = |a: &GridFn, b: &GridFn| -> Result<GridFn> {
        let a = a.restrict(s_max)?;
        let b = b.restrict(s_max)?;
        GridFn::new(
            a.grid().to_vec(),
            a.values()
                .iter()
                .zip(b.values())
                .map(|(x, y)| (y * r - x) / (r - 1.0))
                .collect(),
        )
    };
    limit.theta_star = combine(&prev.theta, &last.theta)?;
    limit.v_star_det = combine(&prev.v_det, &last.v_det)?;
    limit.v_star_mod_profile = match (&prev.v_mod_profile, &last.v_mod_profile) {
        (Some(a), Some(b)) => Some(combine(a, b)?),
        _ => None,
    };
    Ok(limit)
}

/// `eps,u_norm_sq,theta_l2_dist,v_l2_dist`; distances are to the next rung
/// and left empty on the last one, as are norms that were not estimated.
pub fn ladder_summary_csv(
    limit: &WeakClosedLoopStrategy,
    ladder: &[f64],
    u_norms: Option<&[MonteCarloEstimate]>,
) -> String {
    let mut out = String::from("eps,u_norm_sq,theta_l2_dist,v_l2_dist\n");
    for (k, &eps) in ladder.iter().enumerate() {
        let norm = u_norms.map_or(String::new(), |u| crate::fmt_num(u[k].mean));
        let (th, v) = limit.cauchy_evidence.get(k).map_or((String::new(), String::new()), |c| {
            (crate::fmt_num(c.theta_distance), crate::fmt_num(c.v_distance))
        });
        out.push_str(&format!("{},{norm},{th},{v}\n", crate::fmt_num(eps)));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpenLoopVerdict {
    Solvable,
    NotSolvable,
    Inconclusive,
}

impl std::fmt::Display for OpenLoopVerdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OpenLoopVerdict::Solvable => "solvable",
            OpenLoopVerdict::NotSolvable => "NOT solvable",
            OpenLoopVerdict::Inconclusive => "inconclusive",
        })
    }
}

/// Closed-loop and open-loop verdicts with the numbers behind them.
#[derive(Debug, Clone)]
pub struct SolvabilityReport {
    pub closed_loop: RegularityReport,
    pub open_loop_verdict: OpenLoopVerdict,
    pub ladder: Vec<f64>,
    /// Monte Carlo `E∫|u_ε|²` per rung.
    pub u_norms: Vec<MonteCarloEstimate>,
    /// Monte Carlo `E∫|u_ε − u_ε′|²` for consecutive rungs, common noise.
    pub u_distances: Vec<MonteCarloEstimate>,
    /// Shrink factor of the last consecutive `u` distance, per halving of ε.
    pub convergence_ratio: f64,
    /// Leading rungs whose feedback the simulation step resolves.
    pub resolved_rungs: usize,
}

impl SolvabilityReport {
    pub fn closed_loop_solvable(&self) -> bool {
        self.closed_loop.verdict == crate::riccati::Regularity::Regular
    }

    /// The three `<facet>: <verdict>` lines.
    pub fn verdict_lines(&self) -> String {
        let closed = if self.closed_loop_solvable() {
            "solvable (regular)"
        } else {
            "NOT solvable"
        };
        format!(
            "closed-loop: {closed}\nopen-loop: {v}\nweak-closed-loop: {v}\n",
            v = self.open_loop_verdict
        )
    }

    /// `eps,u_norm_sq,u_norm_sq_std_error,u_l2_dist`, the distance being to
    /// the next rung.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("eps,u_norm_sq,u_norm_sq_std_error,u_l2_dist\n");
        for (k, &eps) in self.ladder.iter().enumerate() {
            let dist = self
                .u_distances
                .get(k)
                .map_or(String::new(), |d| crate::fmt_num(d.mean.max(0.0).sqrt()));
            out.push_str(&format!(
                "{},{},{},{dist}\n",
                crate::fmt_num(eps),
                crate::fmt_num(self.u_norms[k].mean),
                crate::fmt_num(self.u_norms[k].std_error)
            ));
        }
        out
    }
}

/// Closed-loop part from the generalized Riccati equation; a blow-up counts
/// as not regular.
pub fn closed_loop_report(p: &SlqProblem, steps: usize) -> Result<RegularityReport> {
    match solve_gre(p, steps) {
        Ok(sol) => check_regularity(&sol, p, REGULARITY_TOL),
        Err(Error::BlowUp { s }) => Ok(RegularityReport::blown_up(s)),
        Err(e) => Err(e),
    }
}

/// Simulates `u_ε` for every rung with common random numbers and judges
/// whether the family stays bounded.
pub fn diagnose(
    p: &SlqProblem,
    ip: &InitialPair,
    ladder: &[f64],
    steps: usize,
    mc: &MonteCarloConfig,
) -> Result<SolvabilityReport> {
    let closed_loop = closed_loop_report(p, steps)?;
    let sols = run_ladder(p, ladder, steps)?;
    diagnose_ladder(p, ip, closed_loop, &sols, mc)
}

/// [`diagnose`] for a ladder that has already been solved.
pub fn diagnose_ladder(
    p: &SlqProblem,
    ip: &InitialPair,
    closed_loop: RegularityReport,
    sols: &[PerturbedSolution],
    mc: &MonteCarloConfig,
) -> Result<SolvabilityReport> {
    let ladder: Vec<f64> = sols.iter().map(|s| s.epsilon).collect();
    let controls: Vec<ControlSpec> = sols.iter().map(|s| s.control()).collect();
    let coupled = simulate_coupled(p, ip, &controls, mc)?;
    let u_norms: Vec<MonteCarloEstimate> = coupled.ensembles.iter().map(control_norm).collect();
    let norms: Vec<f64> = u_norms.iter().map(|e| e.mean).collect();
    let dists: Vec<f64> = coupled.distances.iter().map(|d| d.mean.max(0.0).sqrt()).collect();
    let dt = (p.horizon - ip.t) / mc.steps as f64;
    let resolved_rungs = sols
        .iter()
        .take_while(|s| feedback_stiffness(p, s, ip.t) * dt <= 1.0)
        .count();
    let (open_loop_verdict, convergence_ratio) =
        open_loop_verdict(&ladder, &norms, &dists, resolved_rungs);
    Ok(SolvabilityReport {
        closed_loop,
        open_loop_verdict,
        ladder,
        u_norms,
        u_distances: coupled.distances,
        convergence_ratio,
        resolved_rungs,
    })
}

/// `max ‖B(s)Θ_ε(s)‖` over the nodes in `[t, T]`. Once this times the
/// simulation step exceeds 1 the explicit scheme no longer resolves the
/// feedback and the simulated norms of that rung are not trusted.
pub fn feedback_stiffness(p: &SlqProblem, sol: &PerturbedSolution, t: f64) -> f64 {
    sol.theta
        .grid()
        .iter()
        .zip(sol.theta.values())
        .filter(|(&s, _)| s >= t)
        .map(|(&s, th)| (p.b.eval(s) * th).norm())
        .fold(0.0, f64::max)
}

/// Growth exponent of the norms per halving of ε between rungs `i` and `i+1`.
fn growth(ladder: &[f64], norms: &[f64], i: usize) -> f64 {
    let halvings = (ladder[i] / ladder[i + 1]).log2();
    if norms[i + 1] <= norms[i] {
        0.0
    } else if norms[i] <= 0.0 {
        f64::INFINITY
    } else {
        (norms[i + 1] / norms[i]).log2() / halvings
    }
}

/// Judges boundedness of `E∫|u_ε|²` over the first `resolved` rungs: growth
/// of at most 0.1 per halving on the last two steps ⇒ solvable; at least 0.5
/// (norms growing like `ε^{-1/2}` or faster) on the last three ⇒ not
/// solvable; otherwise inconclusive. The second value is the shrink factor of
/// consecutive `u` distances per halving at the end of the resolved range.
pub fn open_loop_verdict(
    ladder: &[f64],
    norms: &[f64],
    dists: &[f64],
    resolved: usize,
) -> (OpenLoopVerdict, f64) {
    let r = resolved.min(ladder.len());
    let convergence_ratio = if r >= 3 && dists.len() >= r - 1 {
        let i = r - 3;
        (dists[i] / dists[i + 1]).powf(1.0 / (ladder[i + 1] / ladder[i + 2]).log2())
    } else {
        f64::NAN
    };
    if r < 3 || norms[..r].iter().any(|x| !x.is_finite()) {
        return (OpenLoopVerdict::Inconclusive, convergence_ratio);
    }
    if r >= 4 && (r - 4..r - 1).all(|i| growth(ladder, norms, i) >= 0.5) {
        return (OpenLoopVerdict::NotSolvable, convergence_ratio);
    }
    if (r - 3..r - 1).all(|i| growth(ladder, norms, i) <= 0.1) {
        return (OpenLoopVerdict::Solvable, convergence_ratio);
    }
    (OpenLoopVerdict::Inconclusive, convergence_ratio)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::builtin;
    use crate::riccati::Regularity;

    fn closed_theta(eps: f64, s: f64) -> f64 {
        -1.0 / (eps + 1.0 - s)
    }

    #[test]
    fn theta_eps_examples() {
        let (p, _) = builtin("example-5.1").unwrap();
        let sol = solve_perturbed(&p, 0.1, 2000).unwrap();
        assert!((theta_eps(&sol, &p, 0.9).unwrap()[(0, 0)] + 5.0).abs() < 1e-8);
        let sol = solve_perturbed(&p, 1.0, 2000).unwrap();
        assert!((theta_eps(&sol, &p, 0.0).unwrap()[(0, 0)] + 0.5).abs() < 1e-12);

        let (mut q, _) = builtin("standard-scalar").unwrap();
        q.b = crate::problem::CoefFn::scalar(0.0);
        let sol = solve_perturbed(&q, 0.5, 64).unwrap();
        for s in [0.0, 0.3, 1.0] {
            assert_eq!(theta_eps(&sol, &q, s).unwrap()[(0, 0)], 0.0);
        }
        let gre = solve_gre(&q, 64).unwrap();
        assert!(theta_eps(&gre, &q, 0.5).is_err());
    }

    #[test]
    fn v_eps_examples() {
        let (p, _) = builtin("example-5.1").unwrap();
        let sol = solve_perturbed(&p, 1.0, 4000).unwrap();
        let adj = solve_adjoint(&p, &sol).unwrap();
        let (det, modulated) = v_eps_parts(&sol, &adj, &p, 0.0).unwrap();
        assert_eq!(det[(0, 0)], 0.0);
        assert!((modulated.unwrap()[(0, 0)] + 1.0).abs() < 1e-6);

        let sol = solve_perturbed(&p, 0.5, 4000).unwrap();
        let adj = solve_adjoint(&p, &sol).unwrap();
        let (_, modulated) = v_eps_parts(&sol, &adj, &p, 0.5).unwrap();
        let expected = -2.0 * 0.5f64.sqrt() * (-0.5f64).exp();
        assert!((modulated.unwrap()[(0, 0)] - expected).abs() < 1e-6);

        let other = solve_perturbed(&p, 0.25, 64).unwrap();
        assert!(matches!(
            v_eps_parts(&other, &adj, &p, 0.5),
            Err(Error::InvalidInput(_))
        ));

        let (q, _) = builtin("standard-scalar").unwrap();
        let sol = solve_perturbed(&q, 1.0, 64).unwrap();
        let adj = solve_adjoint(&q, &sol).unwrap();
        let (det, modulated) = v_eps_parts(&sol, &adj, &q, 0.2).unwrap();
        assert_eq!(det[(0, 0)], 0.0);
        assert!(modulated.is_none());
    }

    #[test]
    fn theta_nodes_match_formula() {
        let (p, _) = builtin("example-5.1").unwrap();
        let sol = PerturbedSolution::solve(&p, 0.125, 256).unwrap();
        for (k, &s) in sol.theta.grid().iter().enumerate() {
            let pm = &sol.p.p.values()[k];
            let f = crate::riccati::Frozen::at(&p, s);
            let k_mat = f.inner(pm, 0.125);
            let direct = -(k_mat.try_inverse().unwrap() * f.cross(pm));
            assert!((sol.theta.values()[k][(0, 0)] - direct[(0, 0)]).abs() <= 1e-12);
        }
    }

    #[test]
    fn ladder_construction() {
        let l = geometric_ladder(1.0, 2f64.powi(-10), 0.5).unwrap();
        assert_eq!(l.len(), 11);
        assert_eq!(*l.last().unwrap(), 2f64.powi(-10));
        assert!(geometric_ladder(1.0, 0.1, 1.5).is_err());
        assert!(geometric_ladder(0.1, 1.0, 0.5).is_err());
    }

    #[test]
    fn run_ladder_examples() {
        let (p, _) = builtin("example-5.1").unwrap();
        let sols = run_ladder(&p, &[1.0, 0.5, 0.25], 512).unwrap();
        let at0: Vec<f64> = sols.iter().map(|s| s.theta.values()[0][(0, 0)]).collect();
        for (got, want) in at0.iter().zip([-0.5, -2.0 / 3.0, -0.8]) {
            assert!((got - want).abs() < 1e-10);
        }
        assert!(matches!(run_ladder(&p, &[1.0, 0.5], 64), Err(Error::InvalidInput(_))));
        assert!(run_ladder(&p, &[0.5, 1.0, 0.25], 64).is_err());

        let (q, _) = builtin("standard-scalar").unwrap();
        for s in run_ladder(&q, &[1.0, 0.5, 0.25], 64).unwrap() {
            assert!(s.v_det.values().iter().all(|v| v[(0, 0)] == 0.0));
        }
    }

    #[test]
    fn ladder_errors_carry_epsilon() {
        let (mut p, _) = builtin("standard-scalar").unwrap();
        p.r = crate::problem::CoefFn::scalar(-0.75);
        let err = run_ladder(&p, &[1.0, 0.5, 0.25], 64).unwrap_err();
        assert!(matches!(err, Error::Ladder { epsilon, .. } if epsilon == 0.5 || epsilon == 0.25));
    }

    #[test]
    fn gains_grow_as_epsilon_shrinks() {
        for name in ["example-5.1", "example-1.1"] {
            let (p, _) = builtin(name).unwrap();
            let sols = run_ladder(&p, &geometric_ladder(1.0, 1.0 / 64.0, 0.5).unwrap(), 256).unwrap();
            for pair in sols.windows(2) {
                for (a, b) in pair[0].theta.values().iter().zip(pair[1].theta.values()).take(256) {
                    assert!(b[(0, 0)].abs() > a[(0, 0)].abs());
                }
            }
        }
    }

    #[test]
    fn limit_of_example_5_1() {
        let (p, _) = builtin("example-5.1").unwrap();
        let sols = run_ladder(&p, &[1.0, 0.5, 0.25, 0.125, 0.0625], 1024).unwrap();
        let lim = extract_limit(&sols, 0.1, 1e-3).unwrap();
        assert!((lim.theta_star.eval_entry(0.5, 0, 0) + 2.0).abs() < 0.25);
        assert!(!lim.converged());
        assert_eq!(lim.cauchy_evidence.len(), 4);
        let end = lim.theta_star.end();
        assert!(end <= 0.9 && end > 0.9 - 1.0 / 1024.0);

        let deep = run_ladder(&p, &geometric_ladder(1.0, 2f64.powi(-10), 0.5).unwrap(), 2048).unwrap();
        let lim = extract_limit(&deep, 0.1, 1e-3).unwrap();
        assert!((lim.theta_star.eval_entry(0.5, 0, 0) + 2.0).abs() < 0.005);
        let eps = 2f64.powi(-10);
        let worst = lim
            .theta_star
            .grid()
            .iter()
            .zip(lim.theta_star.values())
            .map(|(&s, v)| (v[(0, 0)] - closed_theta(eps, s)).abs())
            .fold(0.0, f64::max);
        // Θ_ε = −P_ε/ε magnifies the Riccati error by 1/ε here.
        assert!(worst < 1e-4, "{worst}");
        // Richardson on the closed forms cancels the leading error term.
        let rich = richardson_limit(&deep, 0.1, 1e-3).unwrap();
        let err = |f: &GridFn| {
            f.grid()
                .iter()
                .zip(f.values())
                .map(|(&s, v)| (v[(0, 0)] + 1.0 / (1.0 - s)).abs())
                .fold(0.0, f64::max)
        };
        assert!(err(&rich.theta_star) < err(&lim.theta_star) / 10.0);
    }

    #[test]
    fn truncation_commutes_with_extraction() {
        let (p, _) = builtin("example-5.1").unwrap();
        let sols = run_ladder(&p, &[1.0, 0.5, 0.25, 0.125], 512).unwrap();
        let wide = extract_limit(&sols, 0.1, 1e-3).unwrap();
        let narrow = extract_limit(&sols, 0.01, 1e-3).unwrap();
        let n = wide.theta_star.len();
        assert_eq!(&narrow.theta_star.values()[..n], wide.theta_star.values());
        assert_eq!(
            &narrow.v_star_mod_profile.as_ref().unwrap().values()[..n],
            wide.v_star_mod_profile.as_ref().unwrap().values()
        );
    }

    #[test]
    fn zero_problem_converges_immediately() {
        let (mut p, _) = builtin("standard-scalar").unwrap();
        p.g = crate::linalg::SymMatrix::zeros(1);
        let sols = run_ladder(&p, &[1.0, 0.5, 0.25], 64).unwrap();
        let lim = extract_limit(&sols, 0.1, 1e-3).unwrap();
        assert!(lim.converged());
        assert!(lim.theta_star.values().iter().all(|v| v[(0, 0)] == 0.0));
        assert!(lim.v_star_det.values().iter().all(|v| v[(0, 0)] == 0.0));
        assert!(extract_limit(&sols, 0.0, 1e-3).is_err());
    }

    #[test]
    fn example_1_1_limit_at_zero() {
        let (p, _) = builtin("example-1.1").unwrap();
        let sols = run_ladder(&p, &geometric_ladder(1.0, 2f64.powi(-10), 0.5).unwrap(), 1024).unwrap();
        let lim = extract_limit(&sols, 0.1, 1e-3).unwrap();
        assert!((lim.theta_star.values()[0][(0, 0)] + 1.0).abs() < 2e-3);
    }

    #[test]
    fn csv_layouts() {
        let (p, _) = builtin("example-5.1").unwrap();
        let sols = run_ladder(&p, &[1.0, 0.5, 0.25], 64).unwrap();
        assert!(sols[0].to_csv().starts_with("s,theta_11,v_det_1,v_mod_profile\n"));
        let lim = extract_limit(&sols, 0.1, 1e-3).unwrap();
        let summary = ladder_summary_csv(&lim, &[1.0, 0.5, 0.25], None);
        let lines: Vec<&str> = summary.lines().collect();
        assert_eq!(lines[0], "eps,u_norm_sq,theta_l2_dist,v_l2_dist");
        assert_eq!(lines.len(), 4);
        assert!(lines[3].ends_with(",,,"));
    }

    #[test]
    fn verdict_rules() {
        let ladder = [1.0 / 16.0, 1.0 / 32.0, 1.0 / 64.0, 1.0 / 128.0, 1.0 / 256.0];
        let bounded = ladder.map(|e: f64| 9.0 / (1.0 + e).powi(2));
        let shrinking = [0.8, 0.4, 0.2, 0.1];
        let verdict = |norms: &[f64], resolved| open_loop_verdict(&ladder, norms, &shrinking, resolved).0;
        assert_eq!(verdict(&bounded, 5), OpenLoopVerdict::Solvable);
        let growing = [1.0, 2.5, 6.0, 13.0, 30.0];
        assert_eq!(verdict(&growing, 5), OpenLoopVerdict::NotSolvable);
        let creeping = [1.0, 1.2, 1.45, 1.75, 2.1];
        assert_eq!(verdict(&creeping, 5), OpenLoopVerdict::Inconclusive);
        // An unresolved tail does not count against a bounded family.
        let unstable_tail = [bounded[0], bounded[1], bounded[2], bounded[3], 30.0];
        assert_eq!(verdict(&unstable_tail, 4), OpenLoopVerdict::Solvable);
        assert_eq!(verdict(&unstable_tail, 2), OpenLoopVerdict::Inconclusive);
        assert_eq!(verdict(&[0.0; 5], 5), OpenLoopVerdict::Solvable);
        let (_, ratio) = open_loop_verdict(&ladder, &bounded, &shrinking, 5);
        assert!((ratio - 2.0).abs() < 1e-12);
    }

    #[test]
    fn diagnose_examples() {
        let mc = MonteCarloConfig::new(4000, 256, 2019);
        let ladder = geometric_ladder(1.0, 1.0 / 128.0, 0.5).unwrap();
        let (p, ip) = builtin("example-5.1").unwrap();
        let r = diagnose(&p, &ip, &ladder, 512, &mc).unwrap();
        assert_eq!(r.closed_loop.verdict, Regularity::NotRegular);
        assert_eq!(r.resolved_rungs, ladder.len());
        assert_eq!(r.open_loop_verdict, OpenLoopVerdict::Solvable, "{r:?}");
        assert!(r.verdict_lines().starts_with("closed-loop: NOT solvable\nopen-loop: solvable\n"));

        let (q, ip) = builtin("standard-scalar").unwrap();
        let r = diagnose(&q, &ip, &ladder, 512, &mc).unwrap();
        assert_eq!(r.closed_loop.verdict, Regularity::Regular);
        assert_eq!(r.open_loop_verdict, OpenLoopVerdict::Solvable, "{r:?}");
        assert!(r.verdict_lines().starts_with("closed-loop: solvable (regular)\n"));
        assert_eq!(r.to_csv().lines().count(), ladder.len() + 1);
    }
}
