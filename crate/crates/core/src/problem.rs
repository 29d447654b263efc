//! The stochastic LQ problem datum.
//!
//! State equation on `[t, T]`:
//!
//! ```text
//! dX = (A X + B u + b) ds + (C X + D u + σ) dW,   X(t) = x
//! ```
//!
//! and cost
//!
//! ```text
//! J = E{ ⟨G X(T), X(T)⟩ + 2⟨g, X(T)⟩
//!        + ∫ ⟨Q X, X⟩ + 2⟨S X, u⟩ + ⟨R u, u⟩ + 2⟨q, X⟩ + 2⟨ρ, u⟩ ds }.
//! ```
//!
//! Coefficients are deterministic. The inhomogeneous inputs `b, σ, q, ρ`
//! are a deterministic function plus, optionally, a martingale-modulated
//! term `M(s) f(s)` with `M(s) = exp(γ W(s) − γ² s / 2)`.

use std::f64::consts::SQRT_2;
use std::fmt;

use crate::error::{invalid, Error, Result};
use crate::grid::{tail_probe, GridFn};
use crate::linalg::{is_symmetric, Matrix, SymMatrix, Vector};

/// Symmetry tolerance used by [`SlqProblem::validate`].
const SYMMETRY_TOL: f64 = 1e-12;

/// A deterministic matrix-valued coefficient.
#[derive(Debug, Clone, PartialEq)]
pub enum CoefFn {
    Constant(Matrix),
    /// Linear interpolation between table nodes, clamped outside the span.
    Table(GridFn),
}

impl CoefFn {
    pub fn constant(m: Matrix) -> Self {
        CoefFn::Constant(m)
    }

    pub fn scalar(x: f64) -> Self {
        CoefFn::Constant(Matrix::from_element(1, 1, x))
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        CoefFn::Constant(Matrix::zeros(rows, cols))
    }

    pub fn eval(&self, s: f64) -> Matrix {
        match self {
            CoefFn::Constant(m) => m.clone(),
            CoefFn::Table(f) => f.eval(s),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        match self {
            CoefFn::Constant(m) => m.shape(),
            CoefFn::Table(f) => f.shape(),
        }
    }

    /// All stored matrices (one for a constant, one per node for a table).
    fn samples(&self) -> Vec<&Matrix> {
        match self {
            CoefFn::Constant(m) => vec![m],
            CoefFn::Table(f) => f.values().iter().collect(),
        }
    }

    fn is_zero(&self) -> bool {
        self.samples().iter().all(|m| m.iter().all(|&x| x == 0.0))
    }
}

/// Scalar deterministic profile multiplying a martingale factor.
#[derive(Debug, Clone, PartialEq)]
pub enum ScalarProfile {
    /// `scale · e^{rate·s}`.
    Exp { scale: f64, rate: f64 },
    /// `scale · e^{rate·s} / √(end − s)` for `s < end`, and `0` for `s ≥ end`.
    ExpOverSqrtGap { scale: f64, rate: f64, end: f64 },
    Table(GridFn),
}

impl ScalarProfile {
    pub fn eval(&self, s: f64) -> f64 {
        match self {
            ScalarProfile::Exp { scale, rate } => scale * (rate * s).exp(),
            ScalarProfile::ExpOverSqrtGap { scale, rate, end } => {
                if s >= *end {
                    0.0
                } else {
                    scale * (rate * s).exp() / (end - s).sqrt()
                }
            }
            ScalarProfile::Table(f) => f.eval_entry(s, 0, 0),
        }
    }

    /// For profiles of the form `g(s)/√(end − s)`, returns `end` and the
    /// smooth factor `g`.
    pub fn inverse_sqrt_singularity(&self) -> Option<(f64, impl Fn(f64) -> f64 + '_)> {
        match self {
            ScalarProfile::ExpOverSqrtGap { scale, rate, end } => {
                Some((*end, move |s: f64| scale * (rate * s).exp()))
            }
            _ => None,
        }
    }

    /// Identifier used in problem files.
    pub fn named_id(&self) -> Option<&'static str> {
        match self {
            ScalarProfile::Exp { .. } => Some("exp"),
            ScalarProfile::ExpOverSqrtGap { .. } => Some("exp-over-sqrt-gap"),
            ScalarProfile::Table(_) => None,
        }
    }
}

/// `M(s) f(s)` with `M(s) = exp(γ W(s) − γ² s / 2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Modulation {
    pub gamma: f64,
    pub profile: ScalarProfile,
}

impl Modulation {
    /// The martingale factor `exp(γ w − γ² s / 2)`.
    pub fn martingale(gamma: f64, s: f64, w: f64) -> f64 {
        (gamma * w - 0.5 * gamma * gamma * s).exp()
    }
}

/// An inhomogeneous input: deterministic column plus optional modulated term.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomInput {
    pub deterministic: CoefFn,
    pub modulated: Option<Modulation>,
}

impl RandomInput {
    pub fn zero(len: usize) -> Self {
        RandomInput {
            deterministic: CoefFn::zeros(len, 1),
            modulated: None,
        }
    }

    pub fn deterministic(f: CoefFn) -> Self {
        RandomInput {
            deterministic: f,
            modulated: None,
        }
    }

    pub fn len(&self) -> usize {
        self.deterministic.shape().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_zero(&self) -> bool {
        self.modulated.is_none() && self.deterministic.is_zero()
    }

    /// Value along a Brownian path with `W(s) = w`.
    pub fn eval(&self, s: f64, w: f64) -> Matrix {
        let mut v = self.deterministic.eval(s);
        if let Some(m) = &self.modulated {
            v.add_scalar_mut(m.profile.eval(s) * Modulation::martingale(m.gamma, s, w));
        }
        v
    }
}

/// The four inhomogeneous inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Inputs {
    pub b: RandomInput,
    pub sigma: RandomInput,
    pub q: RandomInput,
    pub rho: RandomInput,
}

impl Inputs {
    pub fn zero(n: usize, m: usize) -> Self {
        Inputs {
            b: RandomInput::zero(n),
            sigma: RandomInput::zero(n),
            q: RandomInput::zero(n),
            rho: RandomInput::zero(m),
        }
    }

    pub fn any_modulated(&self) -> bool {
        self.named().iter().any(|(_, i)| i.modulated.is_some())
    }

    pub fn named(&self) -> [(&'static str, &RandomInput); 4] {
        [
            ("b", &self.b),
            ("sigma", &self.sigma),
            ("q", &self.q),
            ("rho", &self.rho),
        ]
    }
}

/// Names of the time-dependent coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Coef {
    A,
    B,
    C,
    D,
    Q,
    S,
    R,
}

impl Coef {
    pub const ALL: [Coef; 7] = [Coef::A, Coef::B, Coef::C, Coef::D, Coef::Q, Coef::S, Coef::R];
}

impl fmt::Display for Coef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Coef::A => "A",
            Coef::B => "B",
            Coef::C => "C",
            Coef::D => "D",
            Coef::Q => "Q",
            Coef::S => "S",
            Coef::R => "R",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Coef {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Coef::ALL
            .into_iter()
            .find(|c| c.to_string() == s)
            .ok_or_else(|| Error::NotFound(format!("coefficient '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlqProblem {
    pub n: usize,
    pub m: usize,
    pub horizon: f64,
    pub a: CoefFn,
    pub b: CoefFn,
    pub c: CoefFn,
    pub d: CoefFn,
    pub q: CoefFn,
    pub s: CoefFn,
    pub r: CoefFn,
    pub g: SymMatrix,
    /// Terminal linear weight `g` (deterministic).
    pub g_lin: Vector,
    pub inputs: Inputs,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InitialPair {
    pub t: f64,
    pub x: Vector,
}

impl InitialPair {
    pub fn new(t: f64, x: Vector) -> Self {
        InitialPair { t, x }
    }

    pub fn scalar(t: f64, x: f64) -> Self {
        InitialPair {
            t,
            x: Vector::from_element(1, x),
        }
    }
}

/// Findings of [`SlqProblem::validate`]; empty means valid.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<String>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

pub const BUILTIN_NAMES: [&str; 3] = ["example-1.1", "example-5.1", "standard-scalar"];

/// A built-in problem together with its default initial pair `(0, 1)`.
pub fn builtin(name: &str) -> Result<(SlqProblem, InitialPair)> {
    let scalar = |a: f64, b: f64, c: f64, d: f64, q: f64, s: f64, r: f64| SlqProblem {
        n: 1,
        m: 1,
        horizon: 1.0,
        a: CoefFn::scalar(a),
        b: CoefFn::scalar(b),
        c: CoefFn::scalar(c),
        d: CoefFn::scalar(d),
        q: CoefFn::scalar(q),
        s: CoefFn::scalar(s),
        r: CoefFn::scalar(r),
        g: SymMatrix::from_symmetrized(&Matrix::from_element(1, 1, 1.0)),
        g_lin: Vector::zeros(1),
        inputs: Inputs::zero(1, 1),
    };
    let problem = match name {
        "example-1.1" => scalar(-2.0, 1.0, 2.0, 0.0, 0.0, 0.0, 0.0),
        "example-5.1" => {
            let mut p = scalar(-1.0, 1.0, SQRT_2, 0.0, 0.0, 0.0, 0.0);
            // b(s) = e^{√2 W(s) − 2s}/√(1−s) = M(s) · e^{−s}/√(1−s) with γ = √2.
            p.inputs.b.modulated = Some(Modulation {
                gamma: SQRT_2,
                profile: ScalarProfile::ExpOverSqrtGap {
                    scale: 1.0,
                    rate: -1.0,
                    end: 1.0,
                },
            });
            p
        }
        "standard-scalar" => scalar(0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0),
        other => return Err(Error::NotFound(format!("built-in problem '{other}'"))),
    };
    Ok((problem, InitialPair::scalar(0.0, 1.0)))
}

impl SlqProblem {
    pub fn coef(&self, which: Coef) -> &CoefFn {
        match which {
            Coef::A => &self.a,
            Coef::B => &self.b,
            Coef::C => &self.c,
            Coef::D => &self.d,
            Coef::Q => &self.q,
            Coef::S => &self.s,
            Coef::R => &self.r,
        }
    }

    /// Evaluates a coefficient at `s ∈ [0, T]`.
    pub fn eval_coef(&self, which: Coef, s: f64) -> Result<Matrix> {
        let slack = 1e-12 * self.horizon;
        if !(s >= -slack && s <= self.horizon + slack) {
            return Err(invalid(format!(
                "time {s} outside [0, {}]",
                self.horizon
            )));
        }
        Ok(self.coef(which).eval(s))
    }

    /// Checks shapes, symmetry, finiteness and the integrability of
    /// modulated profiles. All findings go into the report.
    pub fn validate(&self) -> ValidationReport {
        let mut v = Vec::new();
        let (n, m) = (self.n, self.m);
        if n == 0 || m == 0 {
            v.push(format!("dimensions must be positive, got n = {n}, m = {m}"));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            v.push(format!("horizon must be positive, got {}", self.horizon));
        }
        let expected = [
            (Coef::A, (n, n)),
            (Coef::B, (n, m)),
            (Coef::C, (n, n)),
            (Coef::D, (n, m)),
            (Coef::Q, (n, n)),
            (Coef::S, (m, n)),
            (Coef::R, (m, m)),
        ];
        for (c, shape) in expected {
            let got = self.coef(c).shape();
            if got != shape {
                v.push(format!(
                    "{c} has shape {}x{}, expected {}x{}",
                    got.0, got.1, shape.0, shape.1
                ));
            }
        }
        for (c, name) in [(Coef::Q, "Q"), (Coef::R, "R")] {
            if self
                .coef(c)
                .samples()
                .iter()
                .any(|mat| !is_symmetric(mat, SYMMETRY_TOL))
            {
                v.push(format!("{name} not symmetric"));
            }
        }
        for c in Coef::ALL {
            if self.coef(c).samples().iter().any(|mat| mat.iter().any(|x| !x.is_finite())) {
                v.push(format!("{c} has non-finite entries"));
            }
        }
        if self.g.dim() != n {
            v.push(format!("G has dimension {}, expected {n}", self.g.dim()));
        }
        if self.g_lin.len() != n {
            v.push(format!("g has length {}, expected {n}", self.g_lin.len()));
        }
        if self.g_lin.iter().any(|x| !x.is_finite()) {
            v.push("g has non-finite entries".into());
        }
        for (name, input) in self.inputs.named() {
            let want = if name == "rho" { m } else { n };
            let shape = input.deterministic.shape();
            if shape != (want, 1) {
                v.push(format!(
                    "{name} has shape {}x{}, expected {want}x1",
                    shape.0, shape.1
                ));
            }
            if let Some(modulation) = &input.modulated {
                if n != 1 {
                    v.push("modulated inputs require scalar state".into());
                }
                if !modulation.gamma.is_finite() {
                    v.push(format!("{name}: modulation gamma must be finite"));
                }
                if let Some(problem) = profile_problem(&modulation.profile, self.horizon) {
                    v.push(format!("{name}: {problem}"));
                }
            }
        }
        v.dedup();
        ValidationReport { violations: v }
    }
}

/// Finite on `[0, T)` and integrable on `[0, T]`; `None` when both hold.
fn profile_problem(profile: &ScalarProfile, horizon: f64) -> Option<String> {
    let samples = 1000;
    let finite = (0..samples)
        .map(|i| horizon * i as f64 / samples as f64)
        .chain(std::iter::once(horizon - 1e-6 * horizon))
        .all(|s| profile.eval(s).is_finite());
    if !finite {
        return Some("modulated profile is not finite on [0, T)".into());
    }
    let probe = tail_probe(|s| profile.eval(s).abs(), 0.0, horizon, 1e-2 * horizon, 1e-6 * horizon);
    if probe.diverging || !probe.value.is_finite() {
        return Some("modulated profile is not integrable on [0, T]".into());
    }
    None
}
