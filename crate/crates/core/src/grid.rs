//! Matrix-valued functions of time stored on a grid of nodes.

use crate::error::{invalid, Result};
use crate::linalg::Matrix;

/// A matrix-valued function sampled on a strictly increasing grid.
///
/// Between nodes the function is linear; outside the grid span it is
/// clamped to the nearest endpoint value.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFn {
    grid: Vec<f64>,
    values: Vec<Matrix>,
}

/// `steps + 1` equally spaced nodes on `[t0, t1]`; the last node is `t1` exactly.
pub fn uniform_grid(t0: f64, t1: f64, steps: usize) -> Vec<f64> {
    let h = (t1 - t0) / steps as f64;
    (0..=steps)
        .map(|k| if k == steps { t1 } else { t0 + k as f64 * h })
        .collect()
}

/// Composite trapezoid rule for samples `ys` on nodes `xs`.
pub fn trapezoid(xs: &[f64], ys: &[f64]) -> f64 {
    xs.windows(2)
        .zip(ys.windows(2))
        .map(|(x, y)| 0.5 * (x[1] - x[0]) * (y[0] + y[1]))
        .sum()
}

impl GridFn {
    pub fn new(grid: Vec<f64>, values: Vec<Matrix>) -> Result<Self> {
        if grid.is_empty() || grid.len() != values.len() {
            return Err(invalid(format!(
                "grid has {} nodes but {} values",
                grid.len(),
                values.len()
            )));
        }
        if grid.iter().any(|s| !s.is_finite()) || grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(invalid("grid must be finite and strictly increasing"));
        }
        let shape = values[0].shape();
        if values.iter().any(|v| v.shape() != shape) {
            return Err(invalid("grid values must share one shape"));
        }
        if values.iter().any(|v| v.iter().any(|x| !x.is_finite())) {
            return Err(invalid("grid values must be finite"));
        }
        Ok(GridFn { grid, values })
    }

    pub fn from_fn(grid: Vec<f64>, mut f: impl FnMut(f64) -> Matrix) -> Result<Self> {
        let values = grid.iter().map(|&s| f(s)).collect();
        GridFn::new(grid, values)
    }

    /// Scalar function from node/value pairs.
    pub fn scalar(grid: Vec<f64>, values: &[f64]) -> Result<Self> {
        GridFn::new(
            grid,
            values.iter().map(|&v| Matrix::from_element(1, 1, v)).collect(),
        )
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn values(&self) -> &[Matrix] {
        &self.values
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values[0].shape()
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    pub fn start(&self) -> f64 {
        self.grid[0]
    }

    pub fn end(&self) -> f64 {
        *self.grid.last().unwrap()
    }

    /// Index `k` such that `grid[k] ≤ s < grid[k+1]`, clamped to valid cells.
    fn cell(&self, s: f64) -> usize {
        let k = self.grid.partition_point(|&x| x <= s);
        k.saturating_sub(1).min(self.grid.len().saturating_sub(2))
    }

    /// Linear interpolation, clamped outside the grid span.
    pub fn eval(&self, s: f64) -> Matrix {
        if self.grid.len() == 1 || s <= self.grid[0] {
            return self.values[0].clone();
        }
        if s >= self.end() {
            return self.values.last().unwrap().clone();
        }
        let k = self.cell(s);
        let (s0, s1) = (self.grid[k], self.grid[k + 1]);
        let w = (s - s0) / (s1 - s0);
        &self.values[k] * (1.0 - w) + &self.values[k + 1] * w
    }

    /// Entry `(i, j)` of [`GridFn::eval`] without allocating.
    pub fn eval_entry(&self, s: f64, i: usize, j: usize) -> f64 {
        if self.grid.len() == 1 || s <= self.grid[0] {
            return self.values[0][(i, j)];
        }
        if s >= self.end() {
            return self.values.last().unwrap()[(i, j)];
        }
        let k = self.cell(s);
        let (s0, s1) = (self.grid[k], self.grid[k + 1]);
        let w = (s - s0) / (s1 - s0);
        self.values[k][(i, j)] * (1.0 - w) + self.values[k + 1][(i, j)] * w
    }

    /// Square root of the trapezoid approximation of `∫ |f(s)|²_F ds`.
    pub fn l2_norm(&self) -> Result<f64> {
        if self.grid.len() < 2 {
            return Err(invalid("L2 norm needs at least two grid points"));
        }
        let sq: Vec<f64> = self.values.iter().map(|v| v.norm_squared()).collect();
        Ok(trapezoid(&self.grid, &sq).max(0.0).sqrt())
    }

    /// L² distance to another function on the same grid.
    pub fn l2_distance(&self, other: &GridFn) -> Result<f64> {
        if self.grid != other.grid || self.shape() != other.shape() {
            return Err(invalid("L2 distance needs identical grids and shapes"));
        }
        if self.grid.len() < 2 {
            return Err(invalid("L2 distance needs at least two grid points"));
        }
        let sq: Vec<f64> = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).norm_squared())
            .collect();
        Ok(trapezoid(&self.grid, &sq).max(0.0).sqrt())
    }

    /// Keeps the nodes with `s ≤ s_max` (up to a relative slack of 1e-12).
    pub fn restrict(&self, s_max: f64) -> Result<GridFn> {
        let slack = 1e-12 * s_max.abs().max(1.0);
        let k = self.grid.partition_point(|&x| x <= s_max + slack);
        if k == 0 {
            return Err(invalid(format!("no grid node at or below {s_max}")));
        }
        Ok(GridFn {
            grid: self.grid[..k].to_vec(),
            values: self.values[..k].to_vec(),
        })
    }

    /// Applies `f` node-wise.
    pub fn map(&self, f: impl Fn(&Matrix) -> Matrix) -> Result<GridFn> {
        GridFn::new(self.grid.clone(), self.values.iter().map(f).collect())
    }

    /// Largest slope `|v_{k+1} − v_k|_F / (s_{k+1} − s_k)` over the table.
    pub fn max_slope(&self) -> f64 {
        self.grid
            .windows(2)
            .zip(self.values.windows(2))
            .map(|(s, v)| (&v[1] - &v[0]).norm() / (s[1] - s[0]))
            .fold(0.0, f64::max)
    }
}

/// Outcome of a terminal-singularity probe.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TailProbe {
    /// Integral over `[t0, T − δ_min]`.
    pub value: f64,
    /// True when the integral keeps growing as `δ` shrinks.
    pub diverging: bool,
}

/// Decides whether `∫_{t0}^{T} density(s) ds` is finite when `density` may be
/// singular at `T`.
///
/// The integral is computed on `[t0, T − δ_j]` with `δ_j = δ_0 2^{-j}` down to
/// `δ_min`, using trapezoid quadrature on a grid graded geometrically towards
/// `T`. A finite integral has increments that shrink geometrically; the
/// probe reports divergence when the last increment is at least 0.85 of the
/// one before. Per halving of `δ` the increment ratio is 1 for `1/(T−s)`,
/// 2 for `1/(T−s)²` and `1/√2` for `1/√(T−s)`.
pub fn tail_probe(
    density: impl Fn(f64) -> f64,
    t0: f64,
    horizon: f64,
    delta0: f64,
    delta_min: f64,
) -> TailProbe {
    const NODES_PER_DECADE: f64 = 400.0;
    let integral_to = |gap_end: f64| -> f64 {
        let gap0 = horizon - t0;
        if gap_end >= gap0 {
            return 0.0;
        }
        let decades = (gap0 / gap_end).log10();
        let n = ((decades * NODES_PER_DECADE).ceil() as usize).max(64);
        let xs: Vec<f64> = (0..=n)
            .map(|i| horizon - gap0 * (gap_end / gap0).powf(i as f64 / n as f64))
            .collect();
        let ys: Vec<f64> = xs.iter().map(|&s| density(s)).collect();
        trapezoid(&xs, &ys)
    };
    let mut deltas = vec![delta0];
    while *deltas.last().unwrap() > delta_min {
        let d = deltas.last().unwrap() * 0.5;
        deltas.push(d);
    }
    let values: Vec<f64> = deltas.iter().map(|&d| integral_to(d)).collect();
    let k = values.len();
    let diverging = if k >= 3 {
        let last = values[k - 1] - values[k - 2];
        let prev = values[k - 2] - values[k - 3];
        !values[k - 1].is_finite() || (last > 0.0 && last >= 0.85 * prev)
    } else {
        !values[k - 1].is_finite()
    };
    TailProbe {
        value: values[k - 1],
        diverging,
    }
}
