//! Joint Monte Carlo of the risk-free curve, the pre-default curves, the
//! rating chain and (for multiple defaults) the Cox loss process.
//!
//! Every curve is adapted to the market noise alone. Each `g_i` moves under
//! its own rating-`i` drift whatever rating the issuer currently holds, so
//! `D_i(t, theta)` exists on every path and every node. Per step:
//!
//! 1. record `log B_t`, `-int_t^theta f`, `-int_t^theta g_i` and `Lambda(t_k)`,
//!    with the default column read off the short spreads through H1;
//! 2. build every drift row from the pre-step state (the left limit);
//! 3. apply the Euler step to every curve.
//!
//! The chain is then drawn on the sampled generator, linearly interpolated
//! between nodes, with uniforms from its own stream.

use nalgebra::DMatrix;
use rand::Rng;

use crate::curves::{evolve_row_in_place, CurveKind, ForwardSurface, TimeGrid, VolatilitySurface};
use crate::error::{Error, Result};
use crate::hjm::{scheme_terms, LevyParts};
use crate::levy::{IncrementPath, LevyModel};
use crate::migration::{h1_intensity, normalize_generator, simulate_chain, IntensityProcess, RatingPath, SampledIntensity};
use crate::pricing::{RecoveryScheme, SchemeKind};
use crate::rng::{stream_rng, Stream};

/// Initial curve, volatility, and the index of the Levy driver it loads on.
#[derive(Clone, Debug)]
pub struct CurveSpec {
    pub initial: Vec<f64>,
    pub vol: VolatilitySurface,
    pub driver: usize,
}

/// Where the default intensities come from.
#[derive(Clone, Debug, PartialEq)]
pub enum DefaultIntensity {
    /// `lambda_{i,K}` (or `gamma_i`) from the short spread through H1.
    H1,
    /// Taken from the generator as given; for multiple defaults, constant `gamma_i`.
    Given(Vec<f64>),
}

pub struct RatingSetup {
    pub scheme: RecoveryScheme,
    /// `g_0 .. g_{K-2}`.
    pub curves: Vec<CurveSpec>,
    /// Migration intensities; `K x K` absorbing, or `(K-1) x (K-1)` for multiple defaults.
    pub migration: Box<dyn IntensityProcess>,
    pub default_intensity: DefaultIntensity,
    pub initial_state: usize,
}

/// Deliberate departures from the no-arbitrage setup, for negative controls.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Perturbation {
    /// Added to `alpha(t, theta)` of the risk-free curve.
    pub riskfree_drift: f64,
    /// Added to `alpha_i(t, theta)` of every pre-default curve.
    pub defaultable_drift: f64,
    /// Added to every default intensity after H1 is applied.
    pub default_intensity: f64,
}

impl Perturbation {
    pub fn is_none(&self) -> bool {
        *self == Perturbation::default()
    }
}

pub struct MarketModel {
    pub grid: TimeGrid,
    pub drivers: Vec<LevyModel>,
    pub riskfree: CurveSpec,
    pub ratings: Option<RatingSetup>,
    pub perturbation: Perturbation,
    rf_levy: LevyParts,
    g_levy: Vec<LevyParts>,
}

/// Frozen initial market: surfaces, `Lambda(t_k)` and Cox intensities
/// `gamma[i][k]` (empty outside multiple defaults).
#[derive(Clone, Debug)]
pub struct Snapshot {
    pub f: ForwardSurface,
    pub g: Vec<ForwardSurface>,
    pub generators: Vec<DMatrix<f64>>,
    pub gamma: Vec<Vec<f64>>,
}

/// Everything recorded along one simulated path.
#[derive(Clone, Debug)]
pub struct PathState {
    pub times: Vec<f64>,
    /// `log B_{t_k}`.
    pub log_bank: Vec<f64>,
    /// `r(t_k) = f(t_k, t_k)`.
    pub short_rate: Vec<f64>,
    /// `-int_{t_k}^{theta} f(t_k, u) du`, row-major `[k][theta]`, zero for `theta < t_k`.
    pub log_bond: Vec<f64>,
    /// Same for every `g_i`.
    pub log_pre: Vec<Vec<f64>>,
    /// `g_i(t_k, t_k)`.
    pub short_pre: Vec<Vec<f64>>,
    /// `Lambda(t_k)` as simulated.
    pub generators: Vec<DMatrix<f64>>,
    /// Cox intensities `gamma_i(t_k)` (multiple defaults only).
    pub gamma: Vec<Vec<f64>>,
    pub chain: Option<RatingPath>,
    /// Cox process jump times (multiple defaults only).
    pub cox_jumps: Vec<f64>,
    /// Exact jump times of every Levy driver.
    pub levy_jumps: Vec<f64>,
    /// Full surfaces, kept only on request.
    pub surfaces: Option<(ForwardSurface, Vec<ForwardSurface>)>,
}

impl PathState {
    pub fn n_nodes(&self) -> usize {
        self.times.len()
    }

    pub fn dt(&self) -> f64 {
        self.times[1] - self.times[0]
    }

    /// `B(t_k, theta)`.
    pub fn bond(&self, k: usize, theta: usize) -> f64 {
        self.log_bond[k * self.n_nodes() + theta].exp()
    }

    /// `D_i(t_k, theta)`.
    pub fn pre_default(&self, i: usize, k: usize, theta: usize) -> f64 {
        self.log_pre[i][k * self.n_nodes() + theta].exp()
    }

    /// `B(t_k, theta) / B_{t_k}`.
    pub fn discounted_bond(&self, k: usize, theta: usize) -> f64 {
        (self.log_bond[k * self.n_nodes() + theta] - self.log_bank[k]).exp()
    }

    /// `log B_t` at any time: exact integral of the short rate interpolated
    /// linearly between nodes.
    pub fn log_bank_at(&self, t: f64) -> f64 {
        let n = self.n_nodes();
        let dt = self.dt();
        let k = ((t / dt).floor() as usize).min(n - 2);
        let h = t - self.times[k];
        let (r0, r1) = (self.short_rate[k], self.short_rate[k + 1]);
        self.log_bank[k] + h * r0 + 0.5 * h * h * (r1 - r0) / dt
    }

    /// Default time, when the chain has an absorbing state.
    pub fn default_time(&self) -> Option<f64> {
        let chain = self.chain.as_ref()?;
        let k = self.generators[0].nrows();
        if k == self.log_pre.len() + 1 {
            chain.hitting_time(k - 1)
        } else {
            None
        }
    }

    /// `V_t = (1 - L)^{N_t}`.
    pub fn loss_factor(&self, loss: f64, t: f64) -> f64 {
        let jumps = self.cox_jumps.partition_point(|x| *x <= t);
        (1.0 - loss).powi(jumps as i32)
    }
}

impl MarketModel {
    pub fn new(
        grid: TimeGrid,
        drivers: Vec<LevyModel>,
        riskfree: CurveSpec,
        ratings: Option<RatingSetup>,
    ) -> Result<Self> {
        let n = grid.n_nodes();
        let check = |c: &CurveSpec, what: &str| -> Result<&LevyModel> {
            let model = drivers
                .get(c.driver)
                .ok_or_else(|| Error::Shape(format!("{what} refers to missing driver {}", c.driver)))?;
            if c.initial.len() != n || c.vol.n_nodes() != n {
                return Err(Error::Shape(format!("{what} does not match the {n}-node grid")));
            }
            Ok(model)
        };
        let rf_levy = LevyParts::new(check(&riskfree, "risk-free curve")?, &riskfree.vol)?;
        let mut g_levy = Vec::new();
        if let Some(r) = &ratings {
            let pre = r.curves.len();
            if pre == 0 {
                return Err(Error::ModelInvariant("need at least one pre-default rating".into()));
            }
            r.scheme.check_ratings(pre)?;
            let k = if r.scheme.kind.absorbing() { pre + 1 } else { pre };
            if r.migration.k() != k || r.migration.absorbing() != r.scheme.kind.absorbing() {
                return Err(Error::Precondition(format!(
                    "{} needs a {k}-state generator ({}), got {} states",
                    r.scheme.kind,
                    if r.scheme.kind.absorbing() { "absorbing" } else { "no absorbing state" },
                    r.migration.k()
                )));
            }
            if r.initial_state >= pre {
                return Err(Error::Precondition(format!("initial rating {} is not a pre-default rating", r.initial_state)));
            }
            if let DefaultIntensity::Given(g) = &r.default_intensity {
                if r.scheme.kind == SchemeKind::MultipleDefaults && g.len() != pre {
                    return Err(Error::Shape("need one Cox intensity per rating".into()));
                }
            }
            for (i, c) in r.curves.iter().enumerate() {
                g_levy.push(LevyParts::new(check(c, &format!("curve g{}", i + 1))?, &c.vol)?);
            }
        }
        Ok(MarketModel {
            grid,
            drivers,
            riskfree,
            ratings,
            perturbation: Perturbation::default(),
            rf_levy,
            g_levy,
        })
    }

    pub fn with_perturbation(mut self, p: Perturbation) -> Self {
        self.perturbation = p;
        self
    }

    pub fn scheme(&self) -> Option<&RecoveryScheme> {
        self.ratings.as_ref().map(|r| &r.scheme)
    }

    /// Curves frozen at their initial values with the generators they imply;
    /// the deterministic market used for drift reports.
    pub fn initial_snapshot(&self) -> Result<Snapshot> {
        let f = ForwardSurface::frozen(&self.grid, &self.riskfree.initial, CurveKind::RiskFree)?;
        let Some(r) = &self.ratings else {
            return Ok(Snapshot { f, g: Vec::new(), generators: Vec::new(), gamma: Vec::new() });
        };
        let g: Vec<_> = r
            .curves
            .iter()
            .enumerate()
            .map(|(i, c)| ForwardSurface::frozen(&self.grid, &c.initial, CurveKind::PreDefault(i)))
            .collect::<Result<_>>()?;
        let n = self.grid.n_nodes();
        let mut generators = Vec::with_capacity(n);
        let mut gamma = vec![Vec::with_capacity(n); g.len()];
        for k in 0..n {
            let short: Vec<f64> = g.iter().map(|s| s.short_rate(k)).collect();
            let (m, cox) = self.generator_at(k, f.short_rate(k), &short)?;
            generators.push(m);
            for (row, x) in gamma.iter_mut().zip(cox) {
                row.push(x);
            }
        }
        Ok(Snapshot { f, g, generators, gamma })
    }

    /// `Lambda(t_k)` and the Cox intensities given the short rates at node `k`.
    fn generator_at(&self, k: usize, r: f64, short_pre: &[f64]) -> Result<(DMatrix<f64>, Vec<f64>)> {
        let setup = self.ratings.as_ref().expect("ratings");
        let t = self.grid.time(k);
        let mut m = setup.migration.matrix_at(t);
        let pre = short_pre.len();
        let bump = self.perturbation.default_intensity;
        let mut gamma = Vec::new();
        let scheme = &setup.scheme;
        for i in 0..pre {
            let spread = short_pre[i] - r;
            let base = match &setup.default_intensity {
                DefaultIntensity::H1 => Some(h1_intensity(spread, scheme.delta(i, k), i, t)?),
                DefaultIntensity::Given(g) if scheme.kind == SchemeKind::MultipleDefaults => Some(g[i]),
                DefaultIntensity::Given(_) => None,
            };
            if scheme.kind.absorbing() {
                if let Some(x) = base {
                    m[(i, pre)] = x;
                }
                m[(i, pre)] += bump;
            } else {
                gamma.push(base.unwrap_or(0.0) + bump);
            }
        }
        Ok((normalize_generator(m, scheme.kind.absorbing())?, gamma))
    }

    /// Simulate path `path` of the run with seed `seed`.
    pub fn simulate_path(&self, seed: u64, path: u64, keep_surfaces: bool) -> Result<PathState> {
        let grid = &self.grid;
        let n = grid.n_nodes();
        let dt = grid.dt();
        let incs: Vec<IncrementPath> = self
            .drivers
            .iter()
            .enumerate()
            .map(|(m, d)| d.sample_path(grid, &mut stream_rng(seed, path, Stream::Levy(m))))
            .collect();
        let levy_jumps = incs.iter().flat_map(|p| p.jump_events.iter().map(|e| e.time)).collect();

        let pre = self.ratings.as_ref().map_or(0, |r| r.curves.len());
        let mut f = self.riskfree.initial.clone();
        let mut g: Vec<Vec<f64>> = self
            .ratings
            .iter()
            .flat_map(|r| r.curves.iter().map(|c| c.initial.clone()))
            .collect();

        let mut st = PathState {
            times: grid.times(),
            log_bank: vec![0.0; n],
            short_rate: vec![0.0; n],
            log_bond: vec![0.0; n * n],
            log_pre: vec![vec![0.0; n * n]; pre],
            short_pre: vec![vec![0.0; n]; pre],
            generators: Vec::with_capacity(if pre > 0 { n } else { 0 }),
            gamma: vec![Vec::with_capacity(n); pre],
            chain: None,
            cox_jumps: Vec::new(),
            levy_jumps,
            surfaces: None,
        };
        let mut f_rows = Vec::new();
        let mut g_rows: Vec<Vec<Vec<f64>>> = vec![Vec::new(); pre];
        let mut drift_row = vec![0.0; n];
        let mut g_drifts = vec![vec![0.0; n]; pre];
        let mut scratch = vec![0.0; n];
        let mut shorts = vec![0.0; pre];

        for k in 0..n {
            // record node k
            if k > 0 {
                st.log_bank[k] = st.log_bank[k - 1] + 0.5 * dt * (f[k - 1] + f[k]);
            }
            st.short_rate[k] = f[k];
            neg_cumulative(&f, k, dt, &mut st.log_bond[k * n..(k + 1) * n]);
            for i in 0..pre {
                neg_cumulative(&g[i], k, dt, &mut st.log_pre[i][k * n..(k + 1) * n]);
                st.short_pre[i][k] = g[i][k];
                shorts[i] = g[i][k];
            }
            if keep_surfaces {
                f_rows.push(f.clone());
                for i in 0..pre {
                    g_rows[i].push(g[i].clone());
                }
            }
            let setup = match &self.ratings {
                Some(s) => {
                    let (m, gamma) = self.generator_at(k, f[k], &shorts)?;
                    st.generators.push(m);
                    for (i, x) in gamma.into_iter().enumerate() {
                        st.gamma[i].push(x);
                    }
                    Some(s)
                }
                None => None,
            };
            if k + 1 == n {
                break;
            }

            // drift rows from the pre-step state
            if let Some(s) = setup {
                let rows: Vec<&[f64]> = g.iter().map(|v| v.as_slice()).collect();
                for i in 0..pre {
                    let out = &mut g_drifts[i];
                    scheme_terms(
                        s.scheme.kind,
                        i,
                        s.scheme.delta(i, k),
                        k,
                        dt,
                        &f,
                        &rows,
                        &st.generators[k],
                        out,
                        &mut scratch,
                    );
                    for (o, a) in out.iter_mut().zip(self.g_levy[i].drift.row(k)) {
                        *o += a + self.perturbation.defaultable_drift;
                    }
                }
            }
            for (o, a) in drift_row.iter_mut().zip(self.rf_levy.drift.row(k)) {
                *o = a + self.perturbation.riskfree_drift;
            }

            // Euler step
            evolve_row_in_place(&mut f, k, &drift_row, &self.riskfree.vol, incs[self.riskfree.driver].step(k), dt);
            if let Some(s) = setup {
                for i in 0..pre {
                    let c = &s.curves[i];
                    evolve_row_in_place(&mut g[i], k, &g_drifts[i], &c.vol, incs[c.driver].step(k), dt);
                }
            }
        }

        if let Some(s) = &self.ratings {
            let absorbing = s.scheme.kind.absorbing();
            let gen = SampledIntensity::from_normalized(st.times.clone(), st.generators.clone(), absorbing, false);
            let mut rng = stream_rng(seed, path, Stream::Chain);
            let chain = simulate_chain(&gen, s.initial_state, grid.horizon(), &mut rng)?;
            if s.scheme.kind == SchemeKind::MultipleDefaults {
                st.cox_jumps = cox_jumps(&st.times, &st.gamma, &chain, &mut stream_rng(seed, path, Stream::Cox));
            }
            st.chain = Some(chain);
        }
        if keep_surfaces {
            let f = ForwardSurface::from_rows(grid, f_rows, CurveKind::RiskFree)?;
            let g = g_rows
                .into_iter()
                .enumerate()
                .map(|(i, rows)| ForwardSurface::from_rows(grid, rows, CurveKind::PreDefault(i)))
                .collect::<Result<Vec<_>>>()?;
            st.surfaces = Some((f, g));
        }
        Ok(st)
    }
}

/// `out[theta] = -int_k^theta row`, zero for `theta <= k`.
fn neg_cumulative(row: &[f64], k: usize, dt: f64, out: &mut [f64]) {
    out[..=k].fill(0.0);
    for th in k + 1..row.len() {
        out[th] = out[th - 1] - 0.5 * dt * (row[th - 1] + row[th]);
    }
}

/// Cox process with intensity `gamma_{C(t)}(t)`, by thinning against the
/// per-step maximum over ratings of the linearly interpolated intensities.
pub fn cox_jumps<R: Rng + ?Sized>(times: &[f64], gamma: &[Vec<f64>], chain: &RatingPath, rng: &mut R) -> Vec<f64> {
    let mut out = Vec::new();
    for k in 0..times.len() - 1 {
        let (t0, t1) = (times[k], times[k + 1]);
        let bound = gamma
            .iter()
            .map(|g| g[k].max(g[k + 1]))
            .fold(0.0f64, f64::max);
        if bound <= 0.0 {
            continue;
        }
        let mut t = t0;
        loop {
            t += -(1.0 - rng.random::<f64>()).ln() / bound;
            if t >= t1 {
                break;
            }
            let g = &gamma[chain.state_at(t)];
            let w = (t - t0) / (t1 - t0);
            let rate = (1.0 - w) * g[k] + w * g[k + 1];
            if rng.random::<f64>() * bound < rate {
                out.push(t);
            }
        }
    }
    out
}
