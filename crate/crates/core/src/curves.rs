//! Grid-sampled forward-rate surfaces.
//!
//! One uniform grid indexes both calendar time `t` and maturity `theta`.
//! Surfaces are stored row-major as `rates[t][theta]`. For `theta < t` the
//! entry is frozen at `f(theta, theta)`, the short rate at `theta`, so that
//! `exp(int_0^t f(t,u) du)` is the bank account and
//! `exp(-int_0^theta f(t,u) du)` the discounted bond. All maturity integrals
//! use the trapezoid rule on grid nodes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, n_steps: usize) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) || n_steps == 0 {
            return Err(Error::Precondition(format!(
                "grid needs a positive horizon and step count, got T*={horizon}, n={n_steps}"
            )));
        }
        Ok(TimeGrid { horizon, n_steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn n_nodes(&self) -> usize {
        self.n_steps + 1
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        if k == self.n_steps {
            self.horizon
        } else {
            k as f64 * self.dt()
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.n_steps).map(|k| self.time(k)).collect()
    }

    /// Grid index of `t` if it lies on a node (relative tolerance 1e-9).
    pub fn index_of(&self, t: f64) -> Option<usize> {
        let x = t / self.dt();
        let k = x.round();
        if k < 0.0 || k > self.n_steps as f64 || (x - k).abs() > 1e-9 * self.n_steps as f64 {
            None
        } else {
            Some(k as usize)
        }
    }

    /// Index of the step `[t_k, t_{k+1})` containing `t`, clamped to the grid.
    pub fn step_containing(&self, t: f64) -> usize {
        let k = (t / self.dt()).floor();
        if k < 0.0 {
            0
        } else {
            (k as usize).min(self.n_steps - 1)
        }
    }
}

/// Trapezoid integral of equally spaced samples.
pub fn trapezoid(values: &[f64], dt: f64) -> f64 {
    match values.len() {
        0 | 1 => 0.0,
        n => {
            let inner: f64 = values[1..n - 1].iter().sum();
            dt * (inner + 0.5 * (values[0] + values[n - 1]))
        }
    }
}

/// `out[m] = trapezoid(values[..=m])`.
pub fn cumulative_trapezoid(values: &[f64], dt: f64, out: &mut [f64]) {
    if values.is_empty() {
        return;
    }
    out[0] = 0.0;
    for m in 1..values.len() {
        out[m] = out[m - 1] + 0.5 * dt * (values[m - 1] + values[m]);
    }
}

/// Closed-form families for initial curves.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialCurve {
    Flat(f64),
    NelsonSiegel {
        beta0: f64,
        beta1: f64,
        beta2: f64,
        tau: f64,
    },
    /// Raw node values, one per grid node.
    Grid(Vec<f64>),
}

impl InitialCurve {
    pub fn sample(&self, grid: &TimeGrid) -> Result<Vec<f64>> {
        let v: Vec<f64> = match self {
            InitialCurve::Flat(c) => vec![*c; grid.n_nodes()],
            InitialCurve::NelsonSiegel { beta0, beta1, beta2, tau } => {
                if *tau <= 0.0 {
                    return Err(Error::Precondition("Nelson-Siegel tau must be positive".into()));
                }
                grid.times()
                    .into_iter()
                    .map(|th| {
                        let x = th / tau;
                        let e = (-x).exp();
                        beta0 + beta1 * e + beta2 * x * e
                    })
                    .collect()
            }
            InitialCurve::Grid(v) => {
                if v.len() != grid.n_nodes() {
                    return Err(Error::Shape(format!(
                        "curve has {} nodes, grid has {}",
                        v.len(),
                        grid.n_nodes()
                    )));
                }
                v.clone()
            }
        };
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Precondition("initial curve has non-finite values".into()));
        }
        Ok(v)
    }
}

/// Volatility `sigma(t, theta)` in factor space, zero for `t > theta`.
#[derive(Clone, Debug, PartialEq)]
pub struct VolatilitySurface {
    n_nodes: usize,
    dim: usize,
    dt: f64,
    data: Vec<f64>,
    pub owner_rating: Option<usize>,
}

impl VolatilitySurface {
    pub fn from_fn(grid: &TimeGrid, dim: usize, f: impl Fn(f64, f64) -> Vec<f64>) -> Result<Self> {
        let n = grid.n_nodes();
        let mut data = vec![0.0; n * n * dim];
        for t in 0..n {
            for th in t..n {
                let s = f(grid.time(t), grid.time(th));
                if s.len() != dim {
                    return Err(Error::Shape(format!("volatility has dimension {}, expected {dim}", s.len())));
                }
                data[(t * n + th) * dim..(t * n + th + 1) * dim].copy_from_slice(&s);
            }
        }
        Self::from_raw(grid, dim, data)
    }

    /// Takes `n_nodes^2 * dim` values; entries with `t > theta` are reset to zero.
    pub fn from_raw(grid: &TimeGrid, dim: usize, mut data: Vec<f64>) -> Result<Self> {
        let n = grid.n_nodes();
        if data.len() != n * n * dim {
            return Err(Error::Shape(format!(
                "volatility has {} values, expected {}",
                data.len(),
                n * n * dim
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::Precondition("volatility must be bounded (finite)".into()));
        }
        for t in 0..n {
            for th in 0..t {
                data[(t * n + th) * dim..(t * n + th + 1) * dim].fill(0.0);
            }
        }
        Ok(VolatilitySurface {
            n_nodes: n,
            dim,
            dt: grid.dt(),
            data,
            owner_rating: None,
        })
    }

    pub fn zero(grid: &TimeGrid, dim: usize) -> Self {
        let n = grid.n_nodes();
        Self::from_raw(grid, dim, vec![0.0; n * n * dim]).expect("zero surface")
    }

    pub fn constant(grid: &TimeGrid, s: &[f64]) -> Result<Self> {
        Self::from_fn(grid, s.len(), |_, _| s.to_vec())
    }

    /// `sigma(t, theta) = level * exp(-decay (theta - t))`.
    pub fn exponential(grid: &TimeGrid, level: &[f64], decay: f64) -> Result<Self> {
        Self::from_fn(grid, level.len(), |t, th| {
            let w = (-decay * (th - t)).exp();
            level.iter().map(|l| l * w).collect()
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    #[inline]
    pub fn sigma(&self, t: usize, theta: usize) -> &[f64] {
        let i = (t * self.n_nodes + theta) * self.dim;
        &self.data[i..i + self.dim]
    }

    pub fn max_norm(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, x| m.max(x.abs()))
    }

    /// `Sigma(t, theta) = int_t^theta sigma(t, v) dv`.
    pub fn integrate_sigma(&self, t: usize, theta: usize) -> Result<Vec<f64>> {
        if t > theta || theta >= self.n_nodes {
            return Err(Error::Precondition(format!("need t <= theta < {}, got t={t}, theta={theta}", self.n_nodes)));
        }
        let mut out = vec![0.0; self.dim];
        for v in t..theta {
            let (a, b) = (self.sigma(t, v), self.sigma(t, v + 1));
            for i in 0..self.dim {
                out[i] += 0.5 * self.dt * (a[i] + b[i]);
            }
        }
        Ok(out)
    }

    /// `Sigma(t, theta)` for every `theta`, row-major `n_nodes x dim`; zero for `theta <= t`.
    pub fn cumulative_sigma(&self, t: usize) -> Vec<f64> {
        let (n, d) = (self.n_nodes, self.dim);
        let mut out = vec![0.0; n * d];
        for v in t..n.saturating_sub(1) {
            let (a, b) = (self.sigma(t, v), self.sigma(t, v + 1));
            for i in 0..d {
                out[(v + 1) * d + i] = out[v * d + i] + 0.5 * self.dt * (a[i] + b[i]);
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CurveKind {
    RiskFree,
    PreDefault(usize),
}

/// Drift surface `alpha(t, theta)`, zero for `t > theta`.
#[derive(Clone, Debug, PartialEq)]
pub struct DriftSurface {
    n_nodes: usize,
    alpha: Vec<f64>,
    pub owner_rating: Option<usize>,
}

impl DriftSurface {
    pub fn zeros(n_nodes: usize) -> Self {
        DriftSurface {
            n_nodes,
            alpha: vec![0.0; n_nodes * n_nodes],
            owner_rating: None,
        }
    }

    pub fn from_raw(n_nodes: usize, alpha: Vec<f64>) -> Result<Self> {
        if alpha.len() != n_nodes * n_nodes {
            return Err(Error::Shape(format!("drift has {} values, expected {}", alpha.len(), n_nodes * n_nodes)));
        }
        let mut s = DriftSurface {
            n_nodes,
            alpha,
            owner_rating: None,
        };
        for t in 0..n_nodes {
            s.row_mut(t)[..t].fill(0.0);
        }
        Ok(s)
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn alpha(&self, t: usize, theta: usize) -> f64 {
        self.alpha[t * self.n_nodes + theta]
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.alpha[t * self.n_nodes..(t + 1) * self.n_nodes]
    }

    pub fn row_mut(&mut self, t: usize) -> &mut [f64] {
        &mut self.alpha[t * self.n_nodes..(t + 1) * self.n_nodes]
    }

    pub fn values(&self) -> &[f64] {
        &self.alpha
    }

    pub fn max_abs(&self) -> f64 {
        self.alpha.iter().fold(0.0f64, |m, x| m.max(x.abs()))
    }
}

/// One row `f(t_k, .)` of a surface.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardCurve {
    pub t_index: usize,
    pub rates: Vec<f64>,
}

/// `f(t+dt, theta) = f(t, theta) + alpha(t, theta) dt + <sigma(t, theta), dZ>`
/// for live maturities `theta >= t + dt`; earlier nodes keep their value.
pub fn evolve_step(
    curve: &ForwardCurve,
    drift: &DriftSurface,
    vol: &VolatilitySurface,
    dz: &[f64],
    dt: f64,
) -> Result<ForwardCurve> {
    let n = curve.rates.len();
    if drift.n_nodes() != n || vol.n_nodes() != n || vol.dim() != dz.len() {
        return Err(Error::Shape(format!(
            "curve has {n} nodes, drift {}, volatility {} with dim {} vs dZ dim {}",
            drift.n_nodes(),
            vol.n_nodes(),
            vol.dim(),
            dz.len()
        )));
    }
    if curve.t_index + 1 >= n {
        return Err(Error::Precondition("cannot step past the horizon".into()));
    }
    let mut next = curve.clone();
    evolve_row_in_place(&mut next.rates, curve.t_index, drift.row(curve.t_index), vol, dz, dt);
    next.t_index += 1;
    Ok(next)
}

/// In-place Euler step of row `t` to row `t + 1`.
#[inline]
pub fn evolve_row_in_place(
    rates: &mut [f64],
    t: usize,
    drift_row: &[f64],
    vol: &VolatilitySurface,
    dz: &[f64],
    dt: f64,
) {
    for th in t + 1..rates.len() {
        let s = vol.sigma(t, th);
        let mut noise = 0.0;
        for (si, zi) in s.iter().zip(dz) {
            noise += si * zi;
        }
        rates[th] += drift_row[th] * dt + noise;
    }
}

/// Full surface, row-major `rates[t][theta]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardSurface {
    n_nodes: usize,
    dt: f64,
    rates: Vec<f64>,
    pub kind: CurveKind,
}

impl ForwardSurface {
    /// A surface that never moves: every row equals the initial curve.
    pub fn frozen(grid: &TimeGrid, initial: &[f64], kind: CurveKind) -> Result<Self> {
        let n = grid.n_nodes();
        if initial.len() != n {
            return Err(Error::Shape(format!("curve has {} nodes, grid has {n}", initial.len())));
        }
        let rows = vec![initial.to_vec(); n];
        Self::from_rows(grid, rows, kind)
    }

    pub fn from_rows(grid: &TimeGrid, rows: Vec<Vec<f64>>, kind: CurveKind) -> Result<Self> {
        let n = grid.n_nodes();
        if rows.len() != n || rows.iter().any(|r| r.len() != n) {
            return Err(Error::Shape(format!("surface must be {n}x{n}")));
        }
        Ok(ForwardSurface {
            n_nodes: n,
            dt: grid.dt(),
            rates: rows.concat(),
            kind,
        })
    }

    /// Evolve `initial` through every step with the given drift, volatility and increments.
    pub fn simulate(
        grid: &TimeGrid,
        initial: &[f64],
        drift: &DriftSurface,
        vol: &VolatilitySurface,
        increments: &crate::levy::IncrementPath,
        kind: CurveKind,
    ) -> Result<Self> {
        let mut curve = ForwardCurve {
            t_index: 0,
            rates: initial.to_vec(),
        };
        let mut rows = vec![curve.rates.clone()];
        for k in 0..grid.n_steps() {
            curve = evolve_step(&curve, drift, vol, increments.step(k), grid.dt())?;
            rows.push(curve.rates.clone());
        }
        Self::from_rows(grid, rows, kind)
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn rate(&self, t: usize, theta: usize) -> f64 {
        self.rates[t * self.n_nodes + theta]
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.rates[t * self.n_nodes..(t + 1) * self.n_nodes]
    }

    pub fn short_rate(&self, t: usize) -> f64 {
        self.rate(t, t)
    }

    /// `B(t, theta)`: `exp(-int_t^theta f(t,s) ds)` for `t <= theta`,
    /// `exp(int_theta^t r(s) ds)` once the bond has rolled into the bank account.
    pub fn bond_price(&self, t: usize, theta: usize) -> f64 {
        let row = self.row(t);
        if t <= theta {
            (-trapezoid(&row[t..=theta], self.dt)).exp()
        } else {
            trapezoid(&row[theta..=t], self.dt).exp()
        }
    }

    /// `B_t = exp(int_0^t f(t,u) du)`.
    pub fn bank_account(&self, t: usize) -> f64 {
        trapezoid(&self.row(t)[..=t], self.dt).exp()
    }

    /// `exp(-int_0^theta f(t,u) du)`, equal to `B(t,theta) / B_t`.
    pub fn discounted_bond(&self, t: usize, theta: usize) -> f64 {
        (-trapezoid(&self.row(t)[..=theta], self.dt)).exp()
    }

    /// Rows whose frozen part disagrees with the diagonal.
    pub fn flat_extension_violations(&self) -> usize {
        let mut bad = 0;
        for t in 0..self.n_nodes {
            for th in 0..t {
                if self.rate(t, th) != self.rate(th, th) {
                    bad += 1;
                }
            }
        }
        bad
    }

    pub fn max_abs(&self) -> f64 {
        self.rates.iter().fold(0.0f64, |m, x| m.max(x.abs()))
    }
}

/// Count of `(theta)` nodes of row `t` where `f < g_1 < ... < g_{K-1}` fails.
pub fn ordering_violations(t: usize, f: &[f64], g: &[&[f64]]) -> usize {
    let mut bad = 0;
    for th in t..f.len() {
        let mut prev = f[th];
        for gi in g {
            if gi[th] <= prev {
                bad += 1;
                break;
            }
            prev = gi[th];
        }
    }
    bad
}
