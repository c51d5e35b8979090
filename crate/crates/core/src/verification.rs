//! Monte Carlo martingale tests, consistency-condition residuals and the
//! consistency/HJM equivalence gap.
//!
//! "Local martingale" is tested as a true martingale: on a finite grid with
//! bounded coefficients the discounted prices are bounded, so the two
//! notions cannot be told apart here. Every condition is checked at grid
//! nodes only.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::curves::{cumulative_trapezoid, DriftSurface, TimeGrid, VolatilitySurface};
use crate::engine::MarketModel;
use crate::error::{Error, Result};
use crate::hjm::{condition_residual, MarketSnapshot};
use crate::levy::LevyModel;
use crate::migration::{compensated_martingales, simulate_chain, transition_matrices, IntensityProcess};
use crate::par::{map_chunks, MomentAccumulator};
use crate::pricing::{discounted_price, RecoveryScheme, SchemeKind};
use crate::rng::{stream_rng, Stream};

/// Smallest path count accepted by [`martingale_test`].
pub const MIN_PATHS: usize = 1000;

/// Sample means of a vector-valued statistic against expected values.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MeanTest {
    pub n_paths: usize,
    pub expected: Vec<f64>,
    pub mean: Vec<f64>,
    pub std_err: Vec<f64>,
    pub z_score: Vec<f64>,
    /// Zero sample variance while the mean differs from the expected value.
    pub degenerate: Vec<bool>,
    pub threshold: f64,
}

impl MeanTest {
    pub fn max_abs_z(&self) -> f64 {
        self.z_score.iter().fold(0.0, |m, z| m.max(z.abs()))
    }

    pub fn passes(&self) -> bool {
        self.max_abs_z() <= self.threshold && !self.degenerate.iter().any(|d| *d)
    }
}

/// Draw `n_paths` samples of width `expected.len()` and compare their means
/// with `expected`. Paths are processed in fixed chunks and reduced in
/// chunk order, so the result does not depend on the thread count.
pub fn mean_test<F>(n_paths: usize, expected: &[f64], z_threshold: f64, sample: F) -> Result<MeanTest>
where
    F: Fn(u64, &mut [f64]) -> Result<()> + Sync + Send,
{
    if n_paths < 2 {
        return Err(Error::Precondition("need at least two paths".into()));
    }
    let w = expected.len();
    let parts = map_chunks(n_paths, |a, b| -> Result<MomentAccumulator> {
        let mut acc = MomentAccumulator::new(w);
        let mut buf = vec![0.0; w];
        for p in a..b {
            sample(p as u64, &mut buf)?;
            // centre on the expected value so rounding stays relative to the deviation
            for (x, e) in buf.iter_mut().zip(expected) {
                *x -= e;
            }
            acc.push(&buf);
        }
        Ok(acc)
    });
    let mut acc = MomentAccumulator::new(w);
    for part in parts {
        acc.merge(&part?);
    }
    let mut out = MeanTest {
        n_paths,
        expected: expected.to_vec(),
        mean: Vec::with_capacity(w),
        std_err: Vec::with_capacity(w),
        z_score: Vec::with_capacity(w),
        degenerate: Vec::with_capacity(w),
        threshold: z_threshold,
    };
    for (c, e) in expected.iter().enumerate() {
        let dev = acc.mean(c);
        let se = acc.std_err(c);
        let same = dev.abs() <= 1e-12 * e.abs().max(1.0);
        let z = if se > 0.0 && !same {
            dev / se
        } else if same {
            0.0
        } else {
            f64::INFINITY.copysign(dev)
        };
        out.mean.push(e + dev);
        out.std_err.push(se);
        out.z_score.push(z);
        out.degenerate.push(se == 0.0 && !same);
    }
    Ok(out)
}

/// Result of a martingale test on one discounted price.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MartingaleReport {
    pub checkpoints: Vec<f64>,
    pub initial: f64,
    pub mean: Vec<f64>,
    pub std_err: Vec<f64>,
    pub z_score: Vec<f64>,
    pub degenerate: Vec<bool>,
    pub threshold: f64,
    pub n_paths: usize,
    pub verdict: bool,
}

impl MartingaleReport {
    pub fn max_abs_z(&self) -> f64 {
        self.z_score.iter().fold(0.0, |m, z| m.max(z.abs()))
    }
}

/// Test `E[X(t_c)] = X(0)` at every checkpoint. `sample(path, out)` fills
/// one value per checkpoint.
pub fn martingale_test<F>(
    n_paths: usize,
    checkpoints: &[f64],
    initial: f64,
    z_threshold: f64,
    sample: F,
) -> Result<MartingaleReport>
where
    F: Fn(u64, &mut [f64]) -> Result<()> + Sync + Send,
{
    if n_paths < MIN_PATHS {
        return Err(Error::Precondition(format!(
            "martingale test needs at least {MIN_PATHS} paths, got {n_paths}"
        )));
    }
    let expected = vec![initial; checkpoints.len()];
    let t = mean_test(n_paths, &expected, z_threshold, sample)?;
    let verdict = t.passes();
    Ok(MartingaleReport {
        checkpoints: checkpoints.to_vec(),
        initial,
        mean: t.mean,
        std_err: t.std_err,
        z_score: t.z_score,
        degenerate: t.degenerate,
        threshold: z_threshold,
        n_paths,
        verdict,
    })
}

/// Price at `t = 0` of the bond maturing at node `theta`: the risk-free bond
/// without ratings, otherwise the pre-default bond of the initial rating.
pub fn initial_price(model: &MarketModel, theta: usize) -> f64 {
    let curve = match &model.ratings {
        Some(r) => &r.curves[r.initial_state].initial,
        None => &model.riskfree.initial,
    };
    let mut cum = vec![0.0; theta + 1];
    cumulative_trapezoid(&curve[..=theta], model.grid.dt(), &mut cum);
    (-cum[theta]).exp()
}

/// Martingale test of the discounted bond price maturing at node `theta`
/// (defaultable when the model has ratings, risk-free otherwise).
pub fn price_martingale(
    model: &MarketModel,
    seed: u64,
    n_paths: usize,
    theta: usize,
    checkpoints: &[usize],
    z_threshold: f64,
) -> Result<MartingaleReport> {
    if theta >= model.grid.n_nodes() || checkpoints.iter().any(|k| *k > theta) {
        return Err(Error::Precondition("checkpoints must lie on the grid before maturity".into()));
    }
    let times: Vec<f64> = checkpoints.iter().map(|k| model.grid.time(*k)).collect();
    martingale_test(n_paths, &times, initial_price(model, theta), z_threshold, |p, out| {
        let st = model.simulate_path(seed, p, false)?;
        for (o, k) in out.iter_mut().zip(checkpoints) {
            *o = match model.scheme() {
                Some(s) => discounted_price(s, &st, *k, theta)?.0,
                None => st.discounted_bond(*k, theta),
            };
        }
        Ok(())
    })
}

/// Inputs of the consistency condition for one pre-default rating.
pub struct ConsistencyInputs<'a> {
    pub scheme: &'a RecoveryScheme,
    pub rating: usize,
    pub market: MarketSnapshot<'a>,
    /// Cox intensities `gamma[j][t]`, multiple defaults only.
    pub gamma: Option<&'a [Vec<f64>]>,
    /// Drift `alpha_i` of `g_i`.
    pub alpha: &'a DriftSurface,
    pub model: &'a LevyModel,
    pub vol: &'a VolatilitySurface,
}

impl ConsistencyInputs<'_> {
    fn default_intensity(&self, t: usize) -> Result<f64> {
        let i = self.rating;
        if self.scheme.kind == SchemeKind::MultipleDefaults {
            let g = self
                .gamma
                .ok_or_else(|| Error::Precondition("multiple defaults need the Cox intensities".into()))?;
            return g
                .get(i)
                .and_then(|row| row.get(t))
                .copied()
                .ok_or_else(|| Error::Shape("Cox intensities do not cover the grid".into()));
        }
        Ok(self.market.generators[t][(i, self.market.g.len())])
    }

    /// `I_1(t) = g_i(t,t) - f(t,t) - (1 - delta_i) lambda_{i,K}(t)`, zero under H1.
    pub fn h1_gap(&self, t: usize) -> Result<f64> {
        let i = self.rating;
        let spread = self.market.g[i].short_rate(t) - self.market.f.short_rate(t);
        Ok(spread - (1.0 - self.scheme.delta(i, t)) * self.default_intensity(t)?)
    }
}

/// Consistency left-hand side on every `t <= theta` node, row-major.
#[derive(Clone, Debug)]
pub struct ConsistencyResidual {
    n_nodes: usize,
    pub value: Vec<f64>,
    pub scheme: SchemeKind,
    pub rating: usize,
}

impl ConsistencyResidual {
    pub fn at(&self, t: usize, theta: usize) -> f64 {
        self.value[t * self.n_nodes + theta]
    }

    pub fn max_abs(&self) -> f64 {
        let n = self.n_nodes;
        (0..n)
            .flat_map(|t| (t..n).map(move |th| (t, th)))
            .fold(0.0, |m, (t, th)| m.max(self.at(t, th).abs()))
    }
}

/// `sum_{j != i} (D_j - D_i) lambda_ij + (delta X - D_i) lambda_iK + (spread + abar_i) D_i`
/// with `X = D_i`, `B(t,theta)` or `1` for market value (and multiple
/// defaults), Treasury and par, and `abar_i = -int alpha_i + J(Sigma_i)`.
pub fn consistency_residual(inp: &ConsistencyInputs<'_>) -> Result<ConsistencyResidual> {
    let i = inp.rating;
    let pre = inp.market.g.len();
    if i >= pre {
        return Err(Error::Precondition(format!("rating {i} is not a pre-default rating")));
    }
    // validates shapes as a side effect
    condition_residual(inp.scheme, i, inp.alpha, inp.model, inp.vol, &inp.market)?;
    let levy = crate::hjm::LevyParts::new(inp.model, inp.vol)?;
    let grid = inp.market.grid;
    let n = grid.n_nodes();
    let dt = grid.dt();
    let mut value = vec![0.0; n * n];
    let mut cum_alpha = vec![0.0; n];
    for t in 0..n {
        let lambda = &inp.market.generators[t];
        let delta = inp.scheme.delta(i, t);
        let dflt = inp.default_intensity(t)?;
        let spread = inp.market.g[i].short_rate(t) - inp.market.f.short_rate(t);
        cumulative_trapezoid(&inp.alpha.row(t)[t..], dt, &mut cum_alpha[t..]);
        for th in t..n {
            let di = inp.market.g[i].bond_price(t, th);
            let mut v = 0.0;
            for j in (0..pre).filter(|j| *j != i) {
                v += (inp.market.g[j].bond_price(t, th) - di) * lambda[(i, j)];
            }
            let x = match inp.scheme.kind {
                SchemeKind::MarketValue | SchemeKind::MultipleDefaults => di,
                SchemeKind::Treasury => inp.market.f.bond_price(t, th),
                SchemeKind::Par => 1.0,
            };
            let abar = -cum_alpha[th] + levy.exponent(t, th);
            v += (delta * x - di) * dflt + (spread + abar) * di;
            value[t * n + th] = v;
        }
    }
    Ok(ConsistencyResidual {
        n_nodes: n,
        value,
        scheme: inp.scheme.kind,
        rating: i,
    })
}

/// `max |consistency - D_i * hjm|` over `t <= theta`, where `hjm` is the
/// integral-form HJM residual `J(Sigma_i) - int alpha_i + scheme terms`.
/// Equals `max |D_i I_1|`, so it vanishes exactly when H1 holds.
pub fn equivalence_gap(inp: &ConsistencyInputs<'_>) -> Result<f64> {
    let cons = consistency_residual(inp)?;
    let hjm = condition_residual(inp.scheme, inp.rating, inp.alpha, inp.model, inp.vol, &inp.market)?;
    let n = inp.market.grid.n_nodes();
    let mut gap = 0.0f64;
    for t in 0..n {
        for th in t..n {
            let di = inp.market.g[inp.rating].bond_price(t, th);
            gap = gap.max((cons.at(t, th) + di * hjm.at(t, th)).abs());
        }
    }
    Ok(gap)
}

/// [`equivalence_gap`], refusing inputs on which H1 does not hold.
pub fn equivalence_check(inp: &ConsistencyInputs<'_>) -> Result<f64> {
    let n = inp.market.grid.n_nodes();
    for t in 0..n {
        let gap = inp.h1_gap(t)?;
        let scale = inp.market.g[inp.rating].short_rate(t).abs().max(inp.market.f.short_rate(t).abs()).max(1.0);
        if gap.abs() > 1e-12 * scale {
            return Err(Error::H1Infeasible {
                rating: inp.rating,
                time: inp.market.grid.time(t),
                reason: format!("inputs violate H1 by {gap:e}; equivalence is only claimed under H1"),
            });
        }
    }
    equivalence_gap(inp)
}

/// The two parts of the drift of the discounted pre-default price:
/// `d E[D^] = D^ (I_1 + I_2) dt` while the issuer holds rating `i`.
#[derive(Clone, Debug)]
pub struct DriftDecomposition {
    n_nodes: usize,
    /// `I_1(t)`, the H1 gap.
    pub i1: Vec<f64>,
    /// `I_2(t, theta)`, the HJM residual, row-major.
    pub i2: Vec<f64>,
}

impl DriftDecomposition {
    pub fn i2_at(&self, t: usize, theta: usize) -> f64 {
        self.i2[t * self.n_nodes + theta]
    }

    /// Relative drift `I_1 + I_2` of `D^_i(t, theta)`.
    pub fn total(&self, t: usize, theta: usize) -> f64 {
        self.i1[t] + self.i2_at(t, theta)
    }
}

pub fn drift_decomposition(inp: &ConsistencyInputs<'_>) -> Result<DriftDecomposition> {
    let hjm = condition_residual(inp.scheme, inp.rating, inp.alpha, inp.model, inp.vol, &inp.market)?;
    let n = inp.market.grid.n_nodes();
    let i1 = (0..n).map(|t| inp.h1_gap(t)).collect::<Result<Vec<_>>>()?;
    Ok(DriftDecomposition {
        n_nodes: n,
        i1,
        i2: hjm.residual.iter().map(|x| -x).collect(),
    })
}

/// Number of exact coincidences between two sets of jump times.
pub fn common_jump_audit(levy_jumps: &[f64], rating_jumps: &[f64]) -> usize {
    let mut a = levy_jumps.to_vec();
    let mut b = rating_jumps.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (mut i, mut j, mut hits) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].total_cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                hits += 1;
                i += 1;
                j += 1;
            }
        }
    }
    hits
}

/// Jump coincidences over `n_paths` simulated paths of `model`, counting
/// chain and Cox jumps against the exact Levy jump times.
pub fn audit_model(model: &MarketModel, seed: u64, n_paths: usize) -> Result<usize> {
    let parts = map_chunks(n_paths, |a, b| -> Result<usize> {
        let mut hits = 0;
        for p in a..b {
            let st = model.simulate_path(seed, p as u64, false)?;
            let mut rating: Vec<f64> = st.chain.as_ref().map(|c| c.jump_times.clone()).unwrap_or_default();
            rating.extend_from_slice(&st.cox_jumps);
            hits += common_jump_audit(&st.levy_jumps, &rating);
        }
        Ok(hits)
    });
    parts.into_iter().sum()
}

/// State frequencies of the chain against `p(0, t)` at each checkpoint.
/// Cells are ordered `[checkpoint][state]`.
pub fn chain_law_test(
    gen: &dyn IntensityProcess,
    i0: usize,
    checkpoints: &[f64],
    n_paths: usize,
    seed: u64,
    z_threshold: f64,
) -> Result<MeanTest> {
    let k = gen.k();
    let horizon = checkpoints.iter().copied().fold(0.0, f64::max);
    let mut times = vec![0.0];
    times.extend_from_slice(checkpoints);
    let p = transition_matrices(gen, &times);
    let expected: Vec<f64> = p[1..].iter().flat_map(|m| (0..k).map(move |j| m[(i0, j)])).collect();
    mean_test(n_paths, &expected, z_threshold, |path, out| {
        let chain = simulate_chain(gen, i0, horizon, &mut stream_rng(seed, path, Stream::Chain))?;
        for (c, t) in checkpoints.iter().enumerate() {
            for j in 0..k {
                out[c * k + j] = chain.indicator(j, *t);
            }
        }
        Ok(())
    })
}

/// Means of the compensated martingales `M_i`, `M_ij` (`i != j`) and `M_K`
/// at every grid node after the first, against zero. Cells are ordered
/// `[node][M_0..M_{K-1}, M_ij row-major without the diagonal, M_K]`.
pub fn compensator_test(
    gen: &dyn IntensityProcess,
    i0: usize,
    grid: &TimeGrid,
    n_paths: usize,
    seed: u64,
    z_threshold: f64,
) -> Result<MeanTest> {
    let k = gen.k();
    let per = k + k * (k - 1) + 1;
    let nodes = grid.n_nodes() - 1;
    let expected = vec![0.0; nodes * per];
    mean_test(n_paths, &expected, z_threshold, |path, out| {
        let chain = simulate_chain(gen, i0, grid.horizon(), &mut stream_rng(seed, path, Stream::Chain))?;
        let m = compensated_martingales(&chain, gen, grid)?;
        for node in 0..nodes {
            let row = &mut out[node * per..(node + 1) * per];
            let mut c = 0;
            for i in 0..k {
                row[c] = m.m_state[i][node + 1];
                c += 1;
            }
            for i in 0..k {
                for j in (0..k).filter(|j| *j != i) {
                    row[c] = m.m_pair[i][j][node + 1];
                    c += 1;
                }
            }
            row[c] = m.m_default[node + 1];
        }
        Ok(())
    })
}

/// `Lambda` with a bump on one entry and the diagonal renormalized; used to
/// break H1 on purpose.
pub fn bump_entry(m: &DMatrix<f64>, i: usize, j: usize, eps: f64) -> DMatrix<f64> {
    let mut out = m.clone();
    out[(i, j)] += eps;
    out[(i, i)] -= eps;
    out
}
