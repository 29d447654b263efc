//! Euler–Maruyama Monte Carlo for the controlled state equation
//!
//! ```text
//! X_{k+1} = X_k + (A X_k + B u_k + b_k) Δ + (C X_k + D u_k + σ_k) ΔW_k
//! ```
//!
//! plus an exact moment oracle for scalar problems with deterministic data.
//!
//! Path `i` draws its normals from stream `i` of a ChaCha8 generator keyed
//! by the master seed: first `W(t)` when `t > 0`, then the `N` increments.
//! Paths are simulated in parallel and summed in path order, so results do
//! not depend on the number of worker threads. Two controls simulated with
//! the same seed see identical Brownian paths.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::grid::{uniform_grid, GridFn};
use crate::problem::{InitialPair, Modulation, RandomInput, SlqProblem};

/// States with a component above this are treated as blown up.
const STATE_LIMIT: f64 = 1e150;
/// Largest admissible share of flagged paths.
const MAX_FLAGGED_FRACTION: f64 = 0.01;

/// Monte Carlo parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MonteCarloConfig {
    pub paths: usize,
    pub steps: usize,
    pub master_seed: u64,
    /// Feedback controls are evaluated up to `T − δ` and then held.
    pub truncation_delta: f64,
    /// Keep every node of every path for [`PathEnsemble::to_path_csv`].
    pub record_paths: bool,
}

impl MonteCarloConfig {
    pub fn new(paths: usize, steps: usize, master_seed: u64) -> Self {
        MonteCarloConfig {
            paths,
            steps,
            master_seed,
            truncation_delta: 0.0,
            record_paths: false,
        }
    }

    pub fn with_truncation(mut self, delta: f64) -> Self {
        self.truncation_delta = delta;
        self
    }

    fn check(&self) -> Result<()> {
        if self.paths == 0 {
            return Err(invalid("at least one path is required"));
        }
        if self.steps < 16 {
            return Err(invalid(format!("at least 16 steps are required, got {}", self.steps)));
        }
        if !(self.truncation_delta >= 0.0 && self.truncation_delta.is_finite()) {
            return Err(invalid("truncation delta must be finite and nonnegative"));
        }
        Ok(())
    }
}

/// A scalar profile times `M(s) = exp(γ W(s) − γ² s / 2)`, per control entry.
#[derive(Debug, Clone, PartialEq)]
pub struct ModulatedProfile {
    pub gamma: f64,
    /// `m×1` deterministic profile.
    pub profile: GridFn,
}

/// A control to simulate.
#[derive(Debug, Clone, PartialEq)]
pub enum ControlSpec {
    Zero,
    /// Deterministic open-loop control, `m×1`.
    OpenLoopGrid(GridFn),
    /// `u(s) = profile(s) M(s)`.
    OpenLoopModulated(ModulatedProfile),
    /// `u = Θ X + v_det + profile · M`.
    Feedback {
        theta: GridFn,
        v_det: GridFn,
        v_mod: Option<ModulatedProfile>,
    },
}

/// What a [`MonteCarloEstimate`] estimates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Quantity {
    Cost,
    /// `J + ε E∫|u|²`.
    PerturbedCost,
    ControlNormSq,
    TerminalMoment,
    /// `E∫|u − u′|²` between two coupled controls.
    ControlDistanceSq,
}

impl std::fmt::Display for Quantity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Quantity::Cost => "cost",
            Quantity::PerturbedCost => "perturbed_cost",
            Quantity::ControlNormSq => "control_norm_sq",
            Quantity::TerminalMoment => "terminal_moment",
            Quantity::ControlDistanceSq => "control_distance_sq",
        })
    }
}

/// Sample mean with its standard error.
#[derive(Debug, Clone, PartialEq)]
pub struct MonteCarloEstimate {
    pub quantity: Quantity,
    pub mean: f64,
    /// Infinite when fewer than two paths contribute.
    pub std_error: f64,
    pub paths: usize,
    pub steps: usize,
    pub seed: u64,
}

impl MonteCarloEstimate {
    pub const CSV_HEADER: &'static str = "quantity,mean,std_error,paths,steps,seed";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.quantity,
            crate::fmt_num(self.mean),
            crate::fmt_num(self.std_error),
            self.paths,
            self.steps,
            self.seed
        )
    }

    /// `|mean − target| ≤ k · std_error`.
    pub fn within(&self, target: f64, k: f64) -> bool {
        (self.mean - target).abs() <= k * self.std_error
    }
}

/// Per-path functionals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathSummary {
    /// `⟨G X(T), X(T)⟩ + 2⟨g, X(T)⟩`.
    pub terminal_cost: f64,
    /// Trapezoid rule for the running cost.
    pub running_cost: f64,
    /// Trapezoid rule for `∫|u|²`.
    pub control_sq: f64,
    /// `|X(T)|²`.
    pub terminal_sq: f64,
    pub flagged: bool,
}

/// One recorded node of one path.
#[derive(Debug, Clone, PartialEq)]
pub struct PathNode {
    pub path: usize,
    pub k: usize,
    pub s: f64,
    pub w: f64,
    pub x: Vec<f64>,
    pub u: Vec<f64>,
}

/// Simulated paths under one control.
#[derive(Debug, Clone, PartialEq)]
pub struct PathEnsemble {
    pub n: usize,
    pub m: usize,
    pub horizon: f64,
    pub initial: InitialPair,
    pub steps: usize,
    pub seed: u64,
    pub summaries: Vec<PathSummary>,
    pub records: Option<Vec<PathNode>>,
}

impl PathEnsemble {
    pub fn flagged(&self) -> usize {
        self.summaries.iter().filter(|s| s.flagged).count()
    }

    fn estimate(&self, quantity: Quantity, f: impl Fn(&PathSummary) -> f64) -> MonteCarloEstimate {
        let values = self.summaries.iter().filter(|s| !s.flagged).map(f);
        mean_and_error(quantity, values, self.steps, self.seed)
    }

    /// Per-path dump `path,k,s,W,X_1..,u_1..`; empty unless paths were recorded.
    pub fn to_path_csv(&self) -> String {
        let mut out = String::from("path,k,s,W");
        for i in 1..=self.n {
            out.push_str(&format!(",X_{i}"));
        }
        for i in 1..=self.m {
            out.push_str(&format!(",u_{i}"));
        }
        out.push('\n');
        for node in self.records.iter().flatten() {
            out.push_str(&format!(
                "{},{},{},{}",
                node.path,
                node.k,
                crate::fmt_num(node.s),
                crate::fmt_num(node.w)
            ));
            for v in node.x.iter().chain(&node.u) {
                out.push(',');
                out.push_str(&crate::fmt_num(*v));
            }
            out.push('\n');
        }
        out
    }
}

/// Ensembles for several controls driven by the same Brownian paths.
#[derive(Debug, Clone, PartialEq)]
pub struct CoupledEnsembles {
    pub ensembles: Vec<PathEnsemble>,
    /// `E∫|u_i − u_{i+1}|²` for consecutive controls.
    pub distances: Vec<MonteCarloEstimate>,
}

fn mean_and_error(
    quantity: Quantity,
    values: impl Iterator<Item = f64>,
    steps: usize,
    seed: u64,
) -> MonteCarloEstimate {
    let (mut count, mut mean, mut m2) = (0usize, 0.0, 0.0);
    for v in values {
        count += 1;
        let d = v - mean;
        mean += d / count as f64;
        m2 += d * (v - mean);
    }
    let std_error = if count < 2 {
        f64::INFINITY
    } else {
        (m2 / (count - 1) as f64 / count as f64).sqrt()
    };
    MonteCarloEstimate {
        quantity,
        mean: if count == 0 { f64::NAN } else { mean },
        std_error,
        paths: count,
        steps,
        seed,
    }
}

/// Simulates one control.
pub fn simulate_ensemble(
    p: &SlqProblem,
    ip: &InitialPair,
    ctrl: &ControlSpec,
    cfg: &MonteCarloConfig,
) -> Result<PathEnsemble> {
    let mut coupled = simulate_coupled(p, ip, std::slice::from_ref(ctrl), cfg)?;
    Ok(coupled.ensembles.pop().unwrap())
}

/// Simulates every control on the same Brownian paths.
pub fn simulate_coupled(
    p: &SlqProblem,
    ip: &InitialPair,
    ctrls: &[ControlSpec],
    cfg: &MonteCarloConfig,
) -> Result<CoupledEnsembles> {
    cfg.check()?;
    if ctrls.is_empty() {
        return Err(invalid("no control to simulate"));
    }
    if ip.x.len() != p.n {
        return Err(invalid(format!("initial state has length {}, expected {}", ip.x.len(), p.n)));
    }
    if !(ip.t >= 0.0 && ip.t < p.horizon) {
        return Err(invalid(format!("initial time {} outside [0, {})", ip.t, p.horizon)));
    }
    let tables = Tables::new(p, ip, cfg.steps)?;
    let controls = ctrls
        .iter()
        .map(|c| ControlTable::new(c, p, &tables.grid, cfg.truncation_delta))
        .collect::<Result<Vec<_>>>()?;

    let results: Vec<PathResult> = (0..cfg.paths)
        .into_par_iter()
        .map(|i| simulate_path(i, &tables, &controls, ip, cfg))
        .collect();

    let mut ensembles: Vec<PathEnsemble> = (0..ctrls.len())
        .map(|_| PathEnsemble {
            n: p.n,
            m: p.m,
            horizon: p.horizon,
            initial: ip.clone(),
            steps: cfg.steps,
            seed: cfg.master_seed,
            summaries: Vec::with_capacity(cfg.paths),
            records: cfg.record_paths.then(Vec::new),
        })
        .collect();
    let mut distance_values = vec![Vec::with_capacity(cfg.paths); ctrls.len() - 1];
    for result in results {
        for (j, (summary, nodes)) in result.per_control.into_iter().enumerate() {
            ensembles[j].summaries.push(summary);
            if let (Some(records), Some(nodes)) = (ensembles[j].records.as_mut(), nodes) {
                records.extend(nodes);
            }
        }
        for (j, d) in result.distances.into_iter().enumerate() {
            distance_values[j].push(d);
        }
    }
    for e in &ensembles {
        let flagged = e.flagged();
        if flagged as f64 > MAX_FLAGGED_FRACTION * cfg.paths as f64 {
            return Err(Error::EnsembleBlowUp {
                flagged,
                paths: cfg.paths,
            });
        }
    }
    let distances = distance_values
        .into_iter()
        .map(|v| {
            mean_and_error(
                Quantity::ControlDistanceSq,
                v.into_iter().flatten(),
                cfg.steps,
                cfg.master_seed,
            )
        })
        .collect();
    Ok(CoupledEnsembles {
        ensembles,
        distances,
    })
}

fn check_matches(p: &SlqProblem, ip: &InitialPair, ens: &PathEnsemble) -> Result<()> {
    if ens.n != p.n || ens.m != p.m || ens.horizon != p.horizon || &ens.initial != ip {
        return Err(invalid("ensemble was simulated for a different problem or initial pair"));
    }
    Ok(())
}

/// Monte Carlo estimate of `J(t, x; u)`.
pub fn estimate_cost(p: &SlqProblem, ip: &InitialPair, ens: &PathEnsemble) -> Result<MonteCarloEstimate> {
    check_matches(p, ip, ens)?;
    Ok(ens.estimate(Quantity::Cost, |s| s.terminal_cost + s.running_cost))
}

/// Monte Carlo estimate of `J(t, x; u) + ε E∫|u|²`.
pub fn estimate_perturbed_cost(
    p: &SlqProblem,
    ip: &InitialPair,
    ens: &PathEnsemble,
    epsilon: f64,
) -> Result<MonteCarloEstimate> {
    check_matches(p, ip, ens)?;
    Ok(ens.estimate(Quantity::PerturbedCost, |s| {
        s.terminal_cost + s.running_cost + epsilon * s.control_sq
    }))
}

/// Monte Carlo estimate of `E∫|u|²`.
pub fn control_norm(ens: &PathEnsemble) -> MonteCarloEstimate {
    ens.estimate(Quantity::ControlNormSq, |s| s.control_sq)
}

/// Monte Carlo estimate of `E|X(T)|²`.
pub fn terminal_moment(ens: &PathEnsemble) -> MonteCarloEstimate {
    ens.estimate(Quantity::TerminalMoment, |s| s.terminal_sq)
}

/// Row-major node tables of the problem data on the simulation grid.
struct Tables {
    n: usize,
    m: usize,
    grid: Vec<f64>,
    a: Vec<f64>,
    b: Vec<f64>,
    c: Vec<f64>,
    d: Vec<f64>,
    q: Vec<f64>,
    s: Vec<f64>,
    r: Vec<f64>,
    g: Vec<f64>,
    g_lin: Vec<f64>,
    input_b: InputTable,
    input_sigma: InputTable,
    input_q: InputTable,
    input_rho: InputTable,
    has_running_cost: bool,
}

struct InputTable {
    len: usize,
    det: Vec<f64>,
    modulated: Option<(f64, Vec<f64>)>,
}

impl InputTable {
    fn new(input: &RandomInput, grid: &[f64]) -> Self {
        let det = grid
            .iter()
            .flat_map(|&s| input.deterministic.eval(s).as_slice().to_vec())
            .collect();
        let modulated = input.modulated.as_ref().map(|m| {
            (m.gamma, grid.iter().map(|&s| m.profile.eval(s)).collect())
        });
        InputTable {
            len: input.len(),
            det,
            modulated,
        }
    }

    fn is_zero(&self) -> bool {
        self.modulated.is_none() && self.det.iter().all(|&x| x == 0.0)
    }

    /// Adds the input at node `k` to `out`, with `w` the Brownian value.
    fn add(&self, k: usize, s: f64, w: f64, out: &mut [f64]) {
        let det = &self.det[k * self.len..(k + 1) * self.len];
        for (o, v) in out.iter_mut().zip(det) {
            *o += v;
        }
        if let Some((gamma, profile)) = &self.modulated {
            let scalar = profile[k] * Modulation::martingale(*gamma, s, w);
            for o in out.iter_mut() {
                *o += scalar;
            }
        }
    }
}

fn table(f: &crate::problem::CoefFn, grid: &[f64]) -> Vec<f64> {
    // Row-major storage for the hand-written products below.
    grid.iter()
        .flat_map(|&s| {
            let m = f.eval(s);
            let mut row_major = Vec::with_capacity(m.len());
            for i in 0..m.nrows() {
                for j in 0..m.ncols() {
                    row_major.push(m[(i, j)]);
                }
            }
            row_major
        })
        .collect()
}

impl Tables {
    fn new(p: &SlqProblem, ip: &InitialPair, steps: usize) -> Result<Self> {
        let grid = uniform_grid(ip.t, p.horizon, steps);
        let zero_weights = [&p.q, &p.s, &p.r]
            .iter()
            .all(|c| grid.iter().all(|&s| c.eval(s).iter().all(|&x| x == 0.0)));
        let t = Tables {
            n: p.n,
            m: p.m,
            a: table(&p.a, &grid),
            b: table(&p.b, &grid),
            c: table(&p.c, &grid),
            d: table(&p.d, &grid),
            q: table(&p.q, &grid),
            s: table(&p.s, &grid),
            r: table(&p.r, &grid),
            g: {
                let g = p.g.as_matrix();
                (0..p.n).flat_map(|i| (0..p.n).map(move |j| g[(i, j)])).collect()
            },
            g_lin: p.g_lin.as_slice().to_vec(),
            input_b: InputTable::new(&p.inputs.b, &grid),
            input_sigma: InputTable::new(&p.inputs.sigma, &grid),
            input_q: InputTable::new(&p.inputs.q, &grid),
            input_rho: InputTable::new(&p.inputs.rho, &grid),
            has_running_cost: false,
            grid,
        };
        let has_running_cost =
            !(zero_weights && t.input_q.is_zero() && t.input_rho.is_zero());
        Ok(Tables {
            has_running_cost,
            ..t
        })
    }
}

/// `out += M x` with `M` row-major `rows×cols`.
#[inline]
fn mat_vec_add(m: &[f64], x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    for (i, o) in out.iter_mut().enumerate() {
        let row = &m[i * cols..(i + 1) * cols];
        *o += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Quadratic form `⟨M x, y⟩` with `M` row-major `y.len()×x.len()`.
fn bilinear(m: &[f64], x: &[f64], y: &[f64]) -> f64 {
    let cols = x.len();
    y.iter()
        .enumerate()
        .map(|(i, yi)| yi * dot(&m[i * cols..(i + 1) * cols], x))
        .sum()
}

enum ControlTable {
    Zero,
    Open(Vec<f64>),
    OpenModulated(f64, Vec<f64>),
    Feedback {
        theta: Vec<f64>,
        v_det: Vec<f64>,
        v_mod: Option<(f64, Vec<f64>)>,
        /// Last node at which the feedback is evaluated.
        hold: usize,
    },
}

fn grid_table(f: &GridFn, grid: &[f64], upto: usize) -> Vec<f64> {
    let (rows, cols) = f.shape();
    let mut out = Vec::with_capacity((upto + 1) * rows * cols);
    for &s in &grid[..=upto] {
        for i in 0..rows {
            for j in 0..cols {
                out.push(f.eval_entry(s, i, j));
            }
        }
    }
    out
}

impl ControlTable {
    fn new(ctrl: &ControlSpec, p: &SlqProblem, grid: &[f64], delta: f64) -> Result<Self> {
        let last = grid.len() - 1;
        let want = |f: &GridFn, rows: usize, cols: usize, what: &str| -> Result<()> {
            if f.shape() != (rows, cols) {
                return Err(invalid(format!(
                    "{what} has shape {:?}, expected ({rows}, {cols})",
                    f.shape()
                )));
            }
            Ok(())
        };
        Ok(match ctrl {
            ControlSpec::Zero => ControlTable::Zero,
            ControlSpec::OpenLoopGrid(f) => {
                want(f, p.m, 1, "open-loop control")?;
                ControlTable::Open(grid_table(f, grid, last))
            }
            ControlSpec::OpenLoopModulated(mp) => {
                want(&mp.profile, p.m, 1, "modulated control profile")?;
                ControlTable::OpenModulated(mp.gamma, grid_table(&mp.profile, grid, last))
            }
            ControlSpec::Feedback { theta, v_det, v_mod } => {
                want(theta, p.m, p.n, "feedback gain")?;
                want(v_det, p.m, 1, "feedback offset")?;
                let cutoff = p.horizon - delta;
                let slack = 1e-12 * p.horizon.max(1.0);
                let hold = grid.partition_point(|&s| s <= cutoff + slack);
                if hold == 0 {
                    return Err(invalid("truncation removes the whole horizon"));
                }
                let hold = hold - 1;
                let span_ok = |f: &GridFn| {
                    f.start() <= grid[0] + slack && f.end() >= grid[hold] - slack
                };
                if !span_ok(theta) || !span_ok(v_det) {
                    return Err(invalid(format!(
                        "feedback must cover [{}, {}]",
                        grid[0], grid[hold]
                    )));
                }
                let v_mod = match v_mod {
                    Some(mp) => {
                        want(&mp.profile, p.m, 1, "modulated offset profile")?;
                        if !span_ok(&mp.profile) {
                            return Err(invalid("modulated offset does not cover the span"));
                        }
                        Some((mp.gamma, grid_table(&mp.profile, grid, hold)))
                    }
                    None => None,
                };
                ControlTable::Feedback {
                    theta: grid_table(theta, grid, hold),
                    v_det: grid_table(v_det, grid, hold),
                    v_mod,
                    hold,
                }
            }
        })
    }

    /// Writes `u_k` into `u`. Past the hold node `u` keeps its previous value.
    fn eval(&self, k: usize, s: f64, w: f64, x: &[f64], u: &mut [f64]) {
        let m = u.len();
        match self {
            ControlTable::Zero => u.fill(0.0),
            ControlTable::Open(t) => u.copy_from_slice(&t[k * m..(k + 1) * m]),
            ControlTable::OpenModulated(gamma, t) => {
                let factor = Modulation::martingale(*gamma, s, w);
                for (ui, pi) in u.iter_mut().zip(&t[k * m..(k + 1) * m]) {
                    *ui = pi * factor;
                }
            }
            ControlTable::Feedback {
                theta,
                v_det,
                v_mod,
                hold,
            } => {
                if k > *hold {
                    return;
                }
                let n = x.len();
                u.copy_from_slice(&v_det[k * m..(k + 1) * m]);
                mat_vec_add(&theta[k * m * n..(k + 1) * m * n], x, u);
                if let Some((gamma, t)) = v_mod {
                    let factor = Modulation::martingale(*gamma, s, w);
                    for (ui, pi) in u.iter_mut().zip(&t[k * m..(k + 1) * m]) {
                        *ui += pi * factor;
                    }
                }
            }
        }
    }
}

type NodeRecords = Option<Vec<PathNode>>;

struct PathResult {
    per_control: Vec<(PathSummary, NodeRecords)>,
    /// `None` when either path of the pair is flagged.
    distances: Vec<Option<f64>>,
}

fn simulate_path(
    index: usize,
    t: &Tables,
    controls: &[ControlTable],
    ip: &InitialPair,
    cfg: &MonteCarloConfig,
) -> PathResult {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.master_seed);
    rng.set_stream(index as u64);
    let steps = cfg.steps;
    let dt = (t.grid[steps] - t.grid[0]) / steps as f64;
    let sqrt_dt = dt.sqrt();
    let mut w = vec![0.0; steps + 1];
    if ip.t > 0.0 {
        let z: f64 = StandardNormal.sample(&mut rng);
        w[0] = ip.t.sqrt() * z;
    }
    for k in 0..steps {
        let z: f64 = StandardNormal.sample(&mut rng);
        w[k + 1] = w[k] + sqrt_dt * z;
    }

    let (n, m) = (t.n, t.m);
    let mut u_paths: Vec<Vec<f64>> = Vec::with_capacity(controls.len());
    let mut per_control = Vec::with_capacity(controls.len());
    let mut x = vec![0.0; n];
    let mut u = vec![0.0; m];
    let mut drift = vec![0.0; n];
    let mut diffusion = vec![0.0; n];
    let mut q_in = vec![0.0; n];
    let mut rho_in = vec![0.0; m];

    for ctrl in controls {
        x.copy_from_slice(ip.x.as_slice());
        u.fill(0.0);
        let mut u_path = vec![0.0; (steps + 1) * m];
        let mut records = cfg.record_paths.then(|| Vec::with_capacity(steps + 1));
        let mut flagged = false;
        let mut running = 0.0;
        let mut control_sq = 0.0;
        let mut prev_run = 0.0;
        let mut prev_usq = 0.0;
        for k in 0..=steps {
            let s = t.grid[k];
            ctrl.eval(k, s, w[k], &x, &mut u);
            u_path[k * m..(k + 1) * m].copy_from_slice(&u);

            let usq = dot(&u, &u);
            let run = if t.has_running_cost {
                q_in.fill(0.0);
                rho_in.fill(0.0);
                t.input_q.add(k, s, w[k], &mut q_in);
                t.input_rho.add(k, s, w[k], &mut rho_in);
                bilinear(&t.q[k * n * n..(k + 1) * n * n], &x, &x)
                    + 2.0 * bilinear(&t.s[k * m * n..(k + 1) * m * n], &x, &u)
                    + bilinear(&t.r[k * m * m..(k + 1) * m * m], &u, &u)
                    + 2.0 * dot(&q_in, &x)
                    + 2.0 * dot(&rho_in, &u)
            } else {
                0.0
            };
            if k > 0 {
                running += 0.5 * dt * (prev_run + run);
                control_sq += 0.5 * dt * (prev_usq + usq);
            }
            prev_run = run;
            prev_usq = usq;
            if let Some(r) = records.as_mut() {
                r.push(PathNode {
                    path: index,
                    k,
                    s,
                    w: w[k],
                    x: x.clone(),
                    u: u.clone(),
                });
            }
            if k == steps {
                break;
            }

            drift.fill(0.0);
            diffusion.fill(0.0);
            mat_vec_add(&t.a[k * n * n..(k + 1) * n * n], &x, &mut drift);
            mat_vec_add(&t.b[k * n * m..(k + 1) * n * m], &u, &mut drift);
            t.input_b.add(k, s, w[k], &mut drift);
            mat_vec_add(&t.c[k * n * n..(k + 1) * n * n], &x, &mut diffusion);
            mat_vec_add(&t.d[k * n * m..(k + 1) * n * m], &u, &mut diffusion);
            t.input_sigma.add(k, s, w[k], &mut diffusion);
            let dw = w[k + 1] - w[k];
            for i in 0..n {
                x[i] += drift[i] * dt + diffusion[i] * dw;
                if !(x[i].abs() < STATE_LIMIT) {
                    flagged = true;
                }
            }
            if flagged {
                break;
            }
        }
        let terminal_sq = dot(&x, &x);
        let terminal_cost = bilinear(&t.g, &x, &x) + 2.0 * dot(&t.g_lin, &x);
        let flagged = flagged || !(terminal_cost.is_finite() && running.is_finite() && control_sq.is_finite());
        per_control.push((
            PathSummary {
                terminal_cost,
                running_cost: running,
                control_sq,
                terminal_sq,
                flagged,
            },
            records,
        ));
        u_paths.push(u_path);
    }

    let distances = (1..controls.len())
        .map(|j| {
            if per_control[j - 1].0.flagged || per_control[j].0.flagged {
                return None;
            }
            let (a, b) = (&u_paths[j - 1], &u_paths[j]);
            let sq = |k: usize| -> f64 {
                (0..m).map(|i| (a[k * m + i] - b[k * m + i]).powi(2)).sum()
            };
            let mut total = 0.0;
            for k in 0..steps {
                total += 0.5 * dt * (sq(k) + sq(k + 1));
            }
            Some(total)
        })
        .collect();
    PathResult {
        per_control,
        distances,
    }
}

/// Exact first and second moments of a scalar closed-loop state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentOracle {
    /// `E X(T)`.
    pub terminal_mean: f64,
    /// `E X(T)²`.
    pub terminal_second_moment: f64,
    /// `J(t, x; u)` for `u = θ X + v`.
    pub cost: f64,
}

/// Integrates the moment equations of a scalar problem with deterministic
/// inputs under `u = θ X + v` by RK4 with `steps` steps:
///
/// ```text
/// μ' = (A + Bθ) μ + B v + b
/// m' = 2(A + Bθ) m + 2 μ (B v + b) + (C + Dθ)² m + 2 μ (C + Dθ)(D v + σ) + (D v + σ)²
/// ```
///
/// `ctrl` may be `Zero`, `OpenLoopGrid` or an unmodulated `Feedback`; grids
/// are interpolated linearly.
pub fn moment_oracle(
    p: &SlqProblem,
    ip: &InitialPair,
    ctrl: &ControlSpec,
    steps: usize,
) -> Result<MomentOracle> {
    if p.n != 1 || p.m != 1 {
        return Err(Error::WrongClass("the moment oracle needs n = m = 1".into()));
    }
    if p.inputs.any_modulated() {
        return Err(Error::WrongClass("the moment oracle needs deterministic inputs".into()));
    }
    if steps == 0 || ip.x.len() != 1 {
        return Err(invalid("the moment oracle needs steps > 0 and a scalar state"));
    }
    let feedback = |s: f64| -> Result<(f64, f64)> {
        Ok(match ctrl {
            ControlSpec::Zero => (0.0, 0.0),
            ControlSpec::OpenLoopGrid(v) => (0.0, v.eval_entry(s, 0, 0)),
            ControlSpec::Feedback {
                theta,
                v_det,
                v_mod: None,
            } => (theta.eval_entry(s, 0, 0), v_det.eval_entry(s, 0, 0)),
            _ => {
                return Err(Error::WrongClass(
                    "the moment oracle needs a deterministic control".into(),
                ))
            }
        })
    };
    let scalar = |c: &crate::problem::CoefFn, s: f64| c.eval(s)[(0, 0)];
    let inp = |i: &RandomInput, s: f64| i.deterministic.eval(s)[(0, 0)];
    // State (μ, m, accumulated running cost).
    let rate = |s: f64, y: [f64; 3]| -> Result<[f64; 3]> {
        let (theta, v) = feedback(s)?;
        let (a, b, c, d) = (scalar(&p.a, s), scalar(&p.b, s), scalar(&p.c, s), scalar(&p.d, s));
        let (q, sx, r) = (scalar(&p.q, s), scalar(&p.s, s), scalar(&p.r, s));
        let (bb, sig, qq, rho) = (
            inp(&p.inputs.b, s),
            inp(&p.inputs.sigma, s),
            inp(&p.inputs.q, s),
            inp(&p.inputs.rho, s),
        );
        let [mu, m2, _] = y;
        let ac = a + b * theta;
        let cc = c + d * theta;
        let off = d * v + sig;
        let d_mu = ac * mu + b * v + bb;
        let d_m2 = 2.0 * ac * m2 + 2.0 * mu * (b * v + bb) + cc * cc * m2 + 2.0 * mu * cc * off + off * off;
        let xu = theta * m2 + v * mu;
        let uu = theta * theta * m2 + 2.0 * theta * v * mu + v * v;
        let eu = theta * mu + v;
        let run = q * m2 + 2.0 * sx * xu + r * uu + 2.0 * qq * mu + 2.0 * rho * eu;
        Ok([d_mu, d_m2, run])
    };
    let x0 = ip.x[0];
    let mut y = [x0, x0 * x0, 0.0];
    let h = (p.horizon - ip.t) / steps as f64;
    let axpy = |y: [f64; 3], k: [f64; 3], c: f64| [y[0] + c * k[0], y[1] + c * k[1], y[2] + c * k[2]];
    for j in 0..steps {
        let s = ip.t + j as f64 * h;
        let k1 = rate(s, y)?;
        let k2 = rate(s + 0.5 * h, axpy(y, k1, 0.5 * h))?;
        let k3 = rate(s + 0.5 * h, axpy(y, k2, 0.5 * h))?;
        let k4 = rate(s + h, axpy(y, k3, h))?;
        for i in 0..3 {
            y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    }
    let g = p.g.as_matrix()[(0, 0)];
    let cost = g * y[1] + 2.0 * p.g_lin[0] * y[0] + y[2];
    Ok(MomentOracle {
        terminal_mean: y[0],
        terminal_second_moment: y[1],
        cost,
    })
}

/// `m×1` constant function on `[t0, t1]`.
pub fn constant_grid(t0: f64, t1: f64, values: &[f64]) -> Result<GridFn> {
    let v = crate::linalg::Matrix::from_column_slice(values.len(), 1, values);
    GridFn::new(vec![t0, t1], vec![v.clone(), v])
}

/// `x/(t − 1) · e^{−2s}` with `γ = 2`: the open-loop control that steers the
/// homogeneous counterexample (`A = −2`, `C = 2`) to zero at time 1.
pub fn counterexample_open_loop(ip: &InitialPair, steps: usize) -> Result<ControlSpec> {
    let x = ip.x[0];
    let grid = uniform_grid(ip.t, 1.0, steps);
    let values: Vec<f64> = grid.iter().map(|&s| x / (ip.t - 1.0) * (-2.0 * s).exp()).collect();
    Ok(ControlSpec::OpenLoopModulated(ModulatedProfile {
        gamma: 2.0,
        profile: GridFn::scalar(grid, &values)?,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{builtin, CoefFn};

    fn example_1_1() -> (SlqProblem, InitialPair) {
        builtin("example-1.1").unwrap()
    }

    #[test]
    fn zero_control_keeps_second_moment_example_1_1() {
        let (p, ip) = example_1_1();
        let cfg = MonteCarloConfig::new(100_000, 512, 11);
        let ens = simulate_ensemble(&p, &ip, &ControlSpec::Zero, &cfg).unwrap();
        let est = terminal_moment(&ens);
        assert!(est.within(1.0, 3.0), "{est:?}");
        let cost = estimate_cost(&p, &ip, &ens).unwrap();
        assert_eq!(cost.mean, est.mean);
        assert_eq!(control_norm(&ens).mean, 0.0);
    }

    #[test]
    fn reruns_are_bit_identical() {
        let (p, ip) = builtin("example-5.1").unwrap();
        let mut cfg = MonteCarloConfig::new(1, 16, 5);
        cfg.record_paths = true;
        let a = simulate_ensemble(&p, &ip, &ControlSpec::Zero, &cfg).unwrap();
        let b = simulate_ensemble(&p, &ip, &ControlSpec::Zero, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_path_csv(), b.to_path_csv());
        assert_eq!(a.to_path_csv().lines().count(), 18);
        assert!(a.to_path_csv().starts_with("path,k,s,W,X_1,u_1\n"));
    }

    #[test]
    fn results_do_not_depend_on_thread_count() {
        let (p, ip) = example_1_1();
        let cfg = MonteCarloConfig::new(2000, 64, 3);
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| simulate_ensemble(&p, &ip, &ControlSpec::Zero, &cfg).unwrap())
        };
        let one = run(1);
        let four = run(4);
        assert_eq!(one, four);
        assert_eq!(
            terminal_moment(&one).csv_row(),
            terminal_moment(&four).csv_row()
        );
    }

    #[test]
    fn coupled_controls_share_noise() {
        let (p, ip) = example_1_1();
        let mut cfg = MonteCarloConfig::new(50, 32, 9);
        cfg.record_paths = true;
        let ubar = counterexample_open_loop(&ip, 32).unwrap();
        let both = simulate_coupled(&p, &ip, &[ControlSpec::Zero, ubar.clone()], &cfg).unwrap();
        let alone = simulate_ensemble(&p, &ip, &ubar, &cfg).unwrap();
        assert_eq!(both.ensembles[1], alone);
        let w = |e: &PathEnsemble| -> Vec<f64> {
            e.records.as_ref().unwrap().iter().map(|n| n.w).collect()
        };
        assert_eq!(w(&both.ensembles[0]), w(&both.ensembles[1]));
        // Distance from the zero control is the norm of the other one.
        let d = &both.distances[0];
        let norm = control_norm(&both.ensembles[1]);
        assert!((d.mean - norm.mean).abs() <= 1e-12 * norm.mean);
    }

    #[test]
    fn empty_functional_costs_nothing() {
        let (mut p, ip) = example_1_1();
        p.g = crate::linalg::SymMatrix::zeros(1);
        let cfg = MonteCarloConfig::new(200, 32, 1);
        let ubar = counterexample_open_loop(&ip, 32).unwrap();
        let ens = simulate_ensemble(&p, &ip, &ubar, &cfg).unwrap();
        let est = estimate_cost(&p, &ip, &ens).unwrap();
        assert_eq!(est.mean, 0.0);
        assert_eq!(est.std_error, 0.0);
    }

    #[test]
    fn mismatched_ensemble_is_rejected() {
        let (p, ip) = example_1_1();
        let cfg = MonteCarloConfig::new(10, 16, 1);
        let ens = simulate_ensemble(&p, &ip, &ControlSpec::Zero, &cfg).unwrap();
        let other = InitialPair::scalar(0.0, 2.0);
        assert!(matches!(estimate_cost(&p, &other, &ens), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn blow_up_is_an_ensemble_error() {
        let (mut p, ip) = example_1_1();
        p.a = CoefFn::scalar(1e12);
        let cfg = MonteCarloConfig::new(100, 16, 1);
        assert!(matches!(
            simulate_ensemble(&p, &ip, &ControlSpec::Zero, &cfg),
            Err(Error::EnsembleBlowUp { .. })
        ));
    }

    #[test]
    fn moment_oracle_examples() {
        let (p, ip) = example_1_1();
        let o = moment_oracle(&p, &ip, &ControlSpec::Zero, 100).unwrap();
        assert!((o.terminal_second_moment - 1.0).abs() < 1e-13);
        assert!((o.cost - 1.0).abs() < 1e-13);

        let (mut q, ip) = builtin("example-5.1").unwrap();
        q.inputs.b = RandomInput::zero(1);
        let o = moment_oracle(&q, &ip, &ControlSpec::Zero, 100).unwrap();
        assert!((o.terminal_second_moment - 1.0).abs() < 1e-13);

        let zero = InitialPair::scalar(0.0, 0.0);
        let o = moment_oracle(&q, &zero, &ControlSpec::Zero, 100).unwrap();
        assert_eq!(o.terminal_second_moment, 0.0);

        let (q, ip) = builtin("example-5.1").unwrap();
        assert!(matches!(
            moment_oracle(&q, &ip, &ControlSpec::Zero, 100),
            Err(Error::WrongClass(_))
        ));
    }

    #[test]
    fn moment_oracle_matches_closed_form() {
        // dX = (X + 1) ds + 0.5 dW, X(0) = 1: E X(1) = 2e − 1,
        // Var X(1) = 0.25 (e² − 1) / 2.
        let (mut p, ip) = builtin("standard-scalar").unwrap();
        p.a = CoefFn::scalar(1.0);
        p.inputs.b = RandomInput::deterministic(CoefFn::scalar(1.0));
        p.inputs.sigma = RandomInput::deterministic(CoefFn::scalar(0.5));
        let o = moment_oracle(&p, &ip, &ControlSpec::Zero, 2000).unwrap();
        let e = std::f64::consts::E;
        let mean = 2.0 * e - 1.0;
        let var = 0.125 * (e * e - 1.0);
        assert!((o.terminal_mean - mean).abs() < 1e-10);
        assert!((o.terminal_second_moment - (var + mean * mean)).abs() < 1e-10, "{o:?} {}", var + mean * mean);
    }

    #[test]
    fn monte_carlo_agrees_with_moment_oracle() {
        // Regular feedback with deterministic forcing and running weights.
        let (mut p, ip) = builtin("standard-scalar").unwrap();
        p.a = CoefFn::scalar(-0.5);
        p.c = CoefFn::scalar(0.3);
        p.q = CoefFn::scalar(0.5);
        p.inputs.b = RandomInput::deterministic(CoefFn::scalar(0.4));
        p.inputs.sigma = RandomInput::deterministic(CoefFn::scalar(0.3));
        p.inputs.q = RandomInput::deterministic(CoefFn::scalar(0.2));
        let theta = GridFn::from_fn(uniform_grid(0.0, 1.0, 64), |s| {
            crate::linalg::Matrix::from_element(1, 1, -0.5 - 0.5 * s)
        })
        .unwrap();
        let v = constant_grid(0.0, 1.0, &[0.25]).unwrap();
        let ctrl = ControlSpec::Feedback {
            theta,
            v_det: v,
            v_mod: None,
        };
        let oracle = moment_oracle(&p, &ip, &ctrl, 2000).unwrap();
        let mut passed = 0;
        for seed in 0..20 {
            let cfg = MonteCarloConfig::new(4000, 512, 1000 + seed);
            let ens = simulate_ensemble(&p, &ip, &ctrl, &cfg).unwrap();
            let cost = estimate_cost(&p, &ip, &ens).unwrap();
            let moment = terminal_moment(&ens);
            if cost.within(oracle.cost, 3.0) && moment.within(oracle.terminal_second_moment, 3.0) {
                passed += 1;
            }
        }
        assert!(passed >= 18, "{passed}/20 seeds within three standard errors");
    }

    #[test]
    fn truncated_feedback_holds_last_value() {
        let (p, ip) = builtin("standard-scalar").unwrap();
        let theta = constant_grid(0.0, 0.5, &[-1.0]).unwrap();
        let v = constant_grid(0.0, 0.5, &[0.0]).unwrap();
        let ctrl = ControlSpec::Feedback {
            theta,
            v_det: v,
            v_mod: None,
        };
        let mut cfg = MonteCarloConfig::new(3, 16, 4).with_truncation(0.5);
        cfg.record_paths = true;
        let ens = simulate_ensemble(&p, &ip, &ctrl, &cfg).unwrap();
        let nodes = ens.records.as_ref().unwrap();
        for path in nodes.chunks(17) {
            let held = path[8].u[0];
            assert_eq!(held, -path[8].x[0]);
            assert!(path[8..].iter().all(|n| n.u[0] == held));
        }
        // Without truncation the gain must cover the whole horizon.
        let cfg = MonteCarloConfig::new(3, 16, 4);
        assert!(simulate_ensemble(&p, &ip, &ctrl, &cfg).is_err());
    }
}
