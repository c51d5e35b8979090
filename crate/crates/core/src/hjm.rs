//! Drift synthesis from the no-arbitrage conditions and their residuals.
//!
//! The Levy part of every drift is `<grad J(Sigma(t,theta)), sigma(t,theta)>`
//! with `Sigma(t,theta) = int_t^theta sigma(t,v) dv`. Since `sigma(t,v) = 0`
//! for `v < t`, integrating from `0` or from `t` gives the same `Sigma`.
//! Scheme terms use the on-grid identity
//! `D_j(t,theta) / D_i(t,theta) = exp(int_t^theta (g_i - g_j))`, so bond
//! price ratios never need to be stored separately.

use nalgebra::DMatrix;

use crate::curves::{cumulative_trapezoid, DriftSurface, ForwardSurface, TimeGrid, VolatilitySurface};
use crate::error::{Error, Result};
use crate::levy::LevyModel;
use crate::pricing::{RecoveryScheme, SchemeKind};

/// Deterministic Levy contributions for one `(model, sigma)` pair:
/// `<grad J(Sigma), sigma>` and `J(Sigma)` on every `t <= theta` node.
#[derive(Clone, Debug)]
pub struct LevyParts {
    pub drift: DriftSurface,
    exponent: Vec<f64>,
}

impl LevyParts {
    pub fn new(model: &LevyModel, vol: &VolatilitySurface) -> Result<Self> {
        if model.dim() != vol.dim() {
            return Err(Error::Shape(format!(
                "model has {} factors, volatility {}",
                model.dim(),
                vol.dim()
            )));
        }
        let n = vol.n_nodes();
        let d = vol.dim();
        let mut drift = DriftSurface::zeros(n);
        let mut exponent = vec![0.0; n * n];
        let mut grad = vec![0.0; d];
        for t in 0..n {
            let cum = vol.cumulative_sigma(t);
            let row = drift.row_mut(t);
            for th in t..n {
                let big = &cum[th * d..(th + 1) * d];
                model.laplace_exponent_gradient_into(big, &mut grad)?;
                row[th] = dot(&grad, vol.sigma(t, th));
                exponent[t * n + th] = model.laplace_exponent(big)?;
            }
        }
        Ok(LevyParts { drift, exponent })
    }

    /// `J(Sigma(t, theta))`.
    pub fn exponent(&self, t: usize, theta: usize) -> f64 {
        self.exponent[t * self.drift.n_nodes() + theta]
    }

    pub fn exponent_row(&self, t: usize) -> &[f64] {
        let n = self.drift.n_nodes();
        &self.exponent[t * n..(t + 1) * n]
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Risk-free HJM drift `alpha(t,theta) = <grad J(Sigma(t,theta)), sigma(t,theta)>`.
pub fn riskfree_drift(model: &LevyModel, vol: &VolatilitySurface) -> Result<DriftSurface> {
    Ok(LevyParts::new(model, vol)?.drift)
}

/// Scheme-dependent terms of the drift condition on row `t`, in derivative
/// form (`deriv`) and integral form (`integral`).
///
/// `g` holds the rows `g_j(t, .)` of all pre-default ratings and `lambda` is
/// `Lambda(t)`: `K x K` with default state `K-1`, or `(K-1) x (K-1)` without
/// an absorbing state. Entries with `theta < t` are set to zero.
#[allow(clippy::too_many_arguments)]
pub fn scheme_terms(
    kind: SchemeKind,
    i: usize,
    delta_i: f64,
    t: usize,
    dt: f64,
    f: &[f64],
    g: &[&[f64]],
    lambda: &DMatrix<f64>,
    deriv: &mut [f64],
    integral: &mut [f64],
) {
    let n = f.len();
    deriv.fill(0.0);
    integral.fill(0.0);
    let gi = g[i];
    let mut add = |other: &dyn Fn(usize) -> f64, weight: f64| {
        if weight == 0.0 {
            return;
        }
        // cumulative int_t^theta (g_i - other)
        let mut cum = 0.0;
        let mut prev = gi[t] - other(t);
        for th in t..n {
            let cur = gi[th] - other(th);
            if th > t {
                cum += 0.5 * dt * (prev + cur);
            }
            prev = cur;
            deriv[th] += weight * cur * cum.exp();
            integral[th] += weight * cum.exp_m1();
        }
    };
    for (j, gj) in g.iter().enumerate() {
        if j != i {
            add(&|th| gj[th], lambda[(i, j)]);
        }
    }
    let default_col = g.len();
    match kind {
        SchemeKind::Treasury => add(&|th| f[th], delta_i * lambda[(i, default_col)]),
        SchemeKind::Par => add(&|_| 0.0, delta_i * lambda[(i, default_col)]),
        SchemeKind::MarketValue | SchemeKind::MultipleDefaults => {}
    }
}

/// Full-surface market inputs: `f`, every `g_j`, and `Lambda(t_k)` per node.
pub struct MarketSnapshot<'a> {
    pub grid: &'a TimeGrid,
    pub f: &'a ForwardSurface,
    pub g: &'a [ForwardSurface],
    pub generators: &'a [DMatrix<f64>],
}

impl MarketSnapshot<'_> {
    fn validate(&self, scheme: &RecoveryScheme, i: usize) -> Result<()> {
        let pre = self.g.len();
        if pre == 0 {
            return Err(Error::ModelInvariant("need at least two rating states".into()));
        }
        if i >= pre {
            return Err(Error::Precondition(format!(
                "rating {i} is not a pre-default rating (there are {pre})"
            )));
        }
        let n = self.grid.n_nodes();
        if self.f.n_nodes() != n || self.g.iter().any(|g| g.n_nodes() != n) || self.generators.len() != n {
            return Err(Error::Shape(format!("market inputs must all have {n} nodes")));
        }
        let k = if scheme.kind.absorbing() { pre + 1 } else { pre };
        if self.generators.iter().any(|m| m.nrows() != k || m.ncols() != k) {
            return Err(Error::Shape(format!("{} needs {k}x{k} generators", scheme.kind)));
        }
        scheme.check_ratings(pre)
    }

    fn g_rows(&self, t: usize) -> Vec<&[f64]> {
        self.g.iter().map(|s| s.row(t)).collect()
    }

    /// Largest forward rate or drift magnitude; sets the residual budget.
    pub fn scale(&self, alpha: &DriftSurface) -> f64 {
        self.g.iter().fold(self.f.max_abs().max(alpha.max_abs()), |r, g| r.max(g.max_abs()))
    }
}

/// Residual pass threshold for one maturity integral.
pub fn residual_budget(scale: f64, dt: f64) -> f64 {
    1e-10 + 2.0 * scale * scale * dt * dt
}

/// Drift `alpha_i` of the pre-default curve `g_i` under `scheme`.
pub fn defaultable_drift(
    scheme: &RecoveryScheme,
    i: usize,
    model: &LevyModel,
    vol: &VolatilitySurface,
    market: &MarketSnapshot<'_>,
) -> Result<DriftSurface> {
    market.validate(scheme, i)?;
    let mut alpha = LevyParts::new(model, vol)?.drift;
    let n = market.grid.n_nodes();
    let dt = market.grid.dt();
    let mut deriv = vec![0.0; n];
    let mut integral = vec![0.0; n];
    for t in 0..n {
        let g = market.g_rows(t);
        scheme_terms(
            scheme.kind,
            i,
            scheme.delta(i, t),
            t,
            dt,
            market.f.row(t),
            &g,
            &market.generators[t],
            &mut deriv,
            &mut integral,
        );
        for (a, x) in alpha.row_mut(t).iter_mut().zip(&deriv) {
            *a += x;
        }
    }
    alpha.owner_rating = Some(i);
    Ok(alpha)
}

/// Integral-form residual `int_t^theta alpha - J(Sigma) - scheme term` on every node.
#[derive(Clone, Debug)]
pub struct DriftConditionResidual {
    n_nodes: usize,
    pub residual: Vec<f64>,
    pub scheme: Option<SchemeKind>,
    pub rating: Option<usize>,
    pub budget: f64,
}

impl DriftConditionResidual {
    pub fn at(&self, t: usize, theta: usize) -> f64 {
        self.residual[t * self.n_nodes + theta]
    }

    fn cells(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.n_nodes).flat_map(move |t| (t..self.n_nodes).map(move |th| self.at(t, th)))
    }

    pub fn max_abs(&self) -> f64 {
        self.cells().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn mean_abs(&self) -> f64 {
        let n = self.n_nodes * (self.n_nodes + 1) / 2;
        self.cells().map(f64::abs).sum::<f64>() / n as f64
    }

    pub fn passes(&self) -> bool {
        self.max_abs() <= self.budget
    }
}

fn residual_from(
    alpha: &DriftSurface,
    levy: &LevyParts,
    dt: f64,
    mut scheme_integral: impl FnMut(usize, &mut [f64]),
) -> Vec<f64> {
    let n = alpha.n_nodes();
    let mut out = vec![0.0; n * n];
    let mut cum = vec![0.0; n];
    let mut extra = vec![0.0; n];
    for t in 0..n {
        cumulative_trapezoid(&alpha.row(t)[t..], dt, &mut cum[t..]);
        scheme_integral(t, &mut extra);
        for th in t..n {
            out[t * n + th] = cum[th] - levy.exponent(t, th) - extra[th];
        }
    }
    out
}

/// Residual of the risk-free condition `int_t^theta alpha = J(Sigma)`.
/// `rate_scale` is the largest forward rate magnitude; the budget scale is
/// the larger of it and `max |alpha|`.
pub fn riskfree_residual(
    model: &LevyModel,
    vol: &VolatilitySurface,
    alpha: &DriftSurface,
    grid: &TimeGrid,
    rate_scale: f64,
) -> Result<DriftConditionResidual> {
    if alpha.n_nodes() != grid.n_nodes() || vol.n_nodes() != grid.n_nodes() {
        return Err(Error::Shape("drift, volatility and grid disagree".into()));
    }
    let levy = LevyParts::new(model, vol)?;
    let residual = residual_from(alpha, &levy, grid.dt(), |_, e| e.fill(0.0));
    let scale = alpha.max_abs().max(rate_scale.abs());
    Ok(DriftConditionResidual {
        n_nodes: grid.n_nodes(),
        residual,
        scheme: None,
        rating: None,
        budget: residual_budget(scale, grid.dt()),
    })
}

/// Residual of the defaultable drift condition of rating `i` under `scheme`.
pub fn condition_residual(
    scheme: &RecoveryScheme,
    i: usize,
    alpha: &DriftSurface,
    model: &LevyModel,
    vol: &VolatilitySurface,
    market: &MarketSnapshot<'_>,
) -> Result<DriftConditionResidual> {
    market.validate(scheme, i)?;
    if alpha.n_nodes() != market.grid.n_nodes() {
        return Err(Error::Shape("drift and grid disagree".into()));
    }
    let levy = LevyParts::new(model, vol)?;
    let dt = market.grid.dt();
    let mut deriv = vec![0.0; market.grid.n_nodes()];
    let residual = residual_from(alpha, &levy, dt, |t, extra| {
        let g = market.g_rows(t);
        scheme_terms(
            scheme.kind,
            i,
            scheme.delta(i, t),
            t,
            dt,
            market.f.row(t),
            &g,
            &market.generators[t],
            &mut deriv,
            extra,
        );
    });
    Ok(DriftConditionResidual {
        n_nodes: market.grid.n_nodes(),
        residual,
        scheme: Some(scheme.kind),
        rating: Some(i),
        budget: residual_budget(market.scale(alpha), dt),
    })
}
