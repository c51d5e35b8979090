//! Conditional Markov chain for credit ratings.
//!
//! Generators are `K x K` with the default state `K-1` absorbing, or
//! `(K-1) x (K-1)` without an absorbing state for the multiple-defaults
//! setting. Jump times follow the canonical construction: the holding time in
//! state `i` solves `int |lambda_ii| = -ln U` with a uniform `U` drawn from a
//! stream that never touches the factor noise.

use nalgebra::DMatrix;
use rand::Rng;

use crate::curves::{ForwardSurface, TimeGrid};
use crate::error::{Error, Result};
use crate::pricing::RecoveryScheme;

/// Set the diagonal of `m` to minus the off-diagonal row sums after checking
/// that off-diagonal rates are finite and non-negative.
pub fn normalize_generator(mut m: DMatrix<f64>, absorbing: bool) -> Result<DMatrix<f64>> {
    let k = m.nrows();
    if m.ncols() != k || k == 0 {
        return Err(Error::Shape(format!("generator must be square, got {}x{}", k, m.ncols())));
    }
    for i in 0..k {
        let mut out = 0.0;
        for j in 0..k {
            if i == j {
                continue;
            }
            let x = m[(i, j)];
            if !x.is_finite() || x < 0.0 {
                return Err(Error::ModelInvariant(format!("intensity lambda[{i}][{j}] = {x} must be finite and >= 0")));
            }
            out += x;
        }
        if absorbing && i == k - 1 && out != 0.0 {
            return Err(Error::ModelInvariant("default state must be absorbing (last row zero)".into()));
        }
        m[(i, i)] = -out;
    }
    Ok(m)
}

/// Time-indexed generator `Lambda(t)`.
pub trait IntensityProcess: Send + Sync {
    fn k(&self) -> usize;

    fn absorbing(&self) -> bool;

    /// Right-continuous entry `lambda_ij(t)`.
    fn rate(&self, i: usize, j: usize, t: f64) -> f64;

    /// Left limit `lambda_ij(t-)`.
    fn rate_left(&self, i: usize, j: usize, t: f64) -> f64 {
        self.rate(i, j, t)
    }

    /// Exact `int_a^b lambda_ij(u) du`.
    fn integral(&self, i: usize, j: usize, a: f64, b: f64) -> f64;

    /// Points in `(a, b)` where `Lambda` jumps or has a kink.
    fn breakpoints_in(&self, a: f64, b: f64) -> Vec<f64>;

    /// False when `Lambda` was read off a simulated market path.
    fn is_deterministic(&self) -> bool {
        true
    }

    fn matrix_at(&self, t: f64) -> DMatrix<f64> {
        DMatrix::from_fn(self.k(), self.k(), |i, j| self.rate(i, j, t))
    }

    fn matrix_left(&self, t: f64) -> DMatrix<f64> {
        DMatrix::from_fn(self.k(), self.k(), |i, j| self.rate_left(i, j, t))
    }

    fn default_state(&self) -> Option<usize> {
        self.absorbing().then(|| self.k() - 1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConstantIntensity {
    m: DMatrix<f64>,
    absorbing: bool,
}

impl ConstantIntensity {
    pub fn new(m: DMatrix<f64>, absorbing: bool) -> Result<Self> {
        Ok(ConstantIntensity {
            m: normalize_generator(m, absorbing)?,
            absorbing,
        })
    }

    pub fn zero(k: usize, absorbing: bool) -> Self {
        ConstantIntensity {
            m: DMatrix::zeros(k, k),
            absorbing,
        }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.m
    }
}

impl IntensityProcess for ConstantIntensity {
    fn k(&self) -> usize {
        self.m.nrows()
    }

    fn absorbing(&self) -> bool {
        self.absorbing
    }

    fn rate(&self, i: usize, j: usize, _t: f64) -> f64 {
        self.m[(i, j)]
    }

    fn integral(&self, i: usize, j: usize, a: f64, b: f64) -> f64 {
        self.m[(i, j)] * (b - a)
    }

    fn breakpoints_in(&self, _a: f64, _b: f64) -> Vec<f64> {
        Vec::new()
    }
}

/// Right-continuous piecewise-constant generator: `mats[k]` on `[starts[k], starts[k+1])`.
#[derive(Clone, Debug, PartialEq)]
pub struct PiecewiseIntensity {
    starts: Vec<f64>,
    mats: Vec<DMatrix<f64>>,
    absorbing: bool,
}

impl PiecewiseIntensity {
    pub fn new(starts: Vec<f64>, mats: Vec<DMatrix<f64>>, absorbing: bool) -> Result<Self> {
        if starts.is_empty() || starts.len() != mats.len() || starts[0] != 0.0 {
            return Err(Error::Shape("piecewise generator needs matching pieces starting at t=0".into()));
        }
        if starts.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Precondition("piece start times must increase".into()));
        }
        let k = mats[0].nrows();
        let mats = mats
            .into_iter()
            .map(|m| {
                if m.nrows() != k {
                    return Err(Error::Shape("pieces have different dimensions".into()));
                }
                normalize_generator(m, absorbing)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PiecewiseIntensity { starts, mats, absorbing })
    }

    fn piece(&self, t: f64) -> usize {
        self.starts.partition_point(|s| *s <= t).saturating_sub(1)
    }
}

impl IntensityProcess for PiecewiseIntensity {
    fn k(&self) -> usize {
        self.mats[0].nrows()
    }

    fn absorbing(&self) -> bool {
        self.absorbing
    }

    fn rate(&self, i: usize, j: usize, t: f64) -> f64 {
        self.mats[self.piece(t)][(i, j)]
    }

    fn rate_left(&self, i: usize, j: usize, t: f64) -> f64 {
        let p = self.starts.partition_point(|s| *s < t).saturating_sub(1);
        self.mats[p][(i, j)]
    }

    fn integral(&self, i: usize, j: usize, a: f64, b: f64) -> f64 {
        if b <= a {
            return -self.integral(i, j, b, a);
        }
        let mut total = 0.0;
        let mut p = self.piece(a);
        let mut lo = a;
        loop {
            let hi = self.starts.get(p + 1).copied().unwrap_or(f64::INFINITY).min(b);
            total += self.mats[p][(i, j)] * (hi - lo);
            if hi >= b {
                return total;
            }
            lo = hi;
            p += 1;
        }
    }

    fn breakpoints_in(&self, a: f64, b: f64) -> Vec<f64> {
        self.starts.iter().copied().filter(|s| *s > a && *s < b).collect()
    }
}

/// Generator sampled on a time grid and interpolated linearly between nodes;
/// held constant outside the node range.
#[derive(Clone, Debug, PartialEq)]
pub struct SampledIntensity {
    times: Vec<f64>,
    mats: Vec<DMatrix<f64>>,
    absorbing: bool,
    deterministic: bool,
}

impl SampledIntensity {
    pub fn new(times: Vec<f64>, mats: Vec<DMatrix<f64>>, absorbing: bool, deterministic: bool) -> Result<Self> {
        if times.is_empty() || times.len() != mats.len() {
            return Err(Error::Shape("sampled generator needs one matrix per node".into()));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Precondition("sample times must increase".into()));
        }
        let mats = mats
            .into_iter()
            .map(|m| normalize_generator(m, absorbing))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_normalized(times, mats, absorbing, deterministic))
    }

    /// Skips validation; `mats` must already be normalized generators.
    pub(crate) fn from_normalized(times: Vec<f64>, mats: Vec<DMatrix<f64>>, absorbing: bool, deterministic: bool) -> Self {
        SampledIntensity {
            times,
            mats,
            absorbing,
            deterministic,
        }
    }

    pub fn matrices(&self) -> &[DMatrix<f64>] {
        &self.mats
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// Segment index `s` with `times[s] <= t < times[s+1]`, clamped.
    fn segment(&self, t: f64) -> usize {
        self.times
            .partition_point(|x| *x <= t)
            .saturating_sub(1)
            .min(self.times.len().saturating_sub(2))
    }

    fn value(&self, i: usize, j: usize, t: f64) -> f64 {
        let n = self.times.len();
        if n == 1 || t <= self.times[0] {
            return self.mats[0][(i, j)];
        }
        if t >= self.times[n - 1] {
            return self.mats[n - 1][(i, j)];
        }
        let s = self.segment(t);
        let (t0, t1) = (self.times[s], self.times[s + 1]);
        let w = (t - t0) / (t1 - t0);
        (1.0 - w) * self.mats[s][(i, j)] + w * self.mats[s + 1][(i, j)]
    }
}

impl IntensityProcess for SampledIntensity {
    fn k(&self) -> usize {
        self.mats[0].nrows()
    }

    fn absorbing(&self) -> bool {
        self.absorbing
    }

    fn rate(&self, i: usize, j: usize, t: f64) -> f64 {
        self.value(i, j, t)
    }

    fn integral(&self, i: usize, j: usize, a: f64, b: f64) -> f64 {
        if b <= a {
            return -self.integral(i, j, b, a);
        }
        // integrand is piecewise linear: trapezoid per piece is exact
        let mut cuts = vec![a];
        cuts.extend(self.breakpoints_in(a, b));
        cuts.push(b);
        cuts.windows(2)
            .map(|w| 0.5 * (w[1] - w[0]) * (self.value(i, j, w[0]) + self.value(i, j, w[1])))
            .sum()
    }

    fn breakpoints_in(&self, a: f64, b: f64) -> Vec<f64> {
        let lo = self.times.partition_point(|x| *x <= a);
        let hi = self.times.partition_point(|x| *x < b);
        self.times[lo..hi.max(lo)].to_vec()
    }

    fn is_deterministic(&self) -> bool {
        self.deterministic
    }
}

/// Trajectory of the rating chain on `[0, horizon]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RatingPath {
    pub initial_state: usize,
    /// Strictly increasing jump times.
    pub jump_times: Vec<f64>,
    /// State entered at each jump.
    pub states: Vec<usize>,
    pub horizon: f64,
}

impl RatingPath {
    pub fn constant(state: usize, horizon: f64) -> Self {
        RatingPath {
            initial_state: state,
            jump_times: Vec::new(),
            states: Vec::new(),
            horizon,
        }
    }

    /// Number of jumps at or before `t`.
    pub fn jumps_until(&self, t: f64) -> usize {
        self.jump_times.partition_point(|x| *x <= t)
    }

    /// `C^1(t)`, right-continuous.
    pub fn state_at(&self, t: f64) -> usize {
        match self.jumps_until(t) {
            0 => self.initial_state,
            n => self.states[n - 1],
        }
    }

    /// `C^2(t)`: rating held before the last jump at or before `t`; before the
    /// first jump this is the initial rating.
    pub fn previous_state_at(&self, t: f64) -> usize {
        match self.jumps_until(t) {
            0 | 1 => self.initial_state,
            n => self.states[n - 2],
        }
    }

    /// First entry time into `state`.
    pub fn hitting_time(&self, state: usize) -> Option<f64> {
        self.states.iter().position(|s| *s == state).map(|p| self.jump_times[p])
    }

    /// `(time, from, to)` for every jump.
    pub fn transitions(&self) -> impl Iterator<Item = (f64, usize, usize)> + '_ {
        self.jump_times.iter().enumerate().map(move |(n, t)| {
            let from = if n == 0 { self.initial_state } else { self.states[n - 1] };
            (*t, from, self.states[n])
        })
    }

    /// `H_i(t) = 1{C^1(t) = i}`.
    pub fn indicator(&self, i: usize, t: f64) -> f64 {
        (self.state_at(t) == i) as u8 as f64
    }

    /// `H_ij(t)`: number of `i -> j` transitions up to `t`.
    pub fn transition_count(&self, i: usize, j: usize, t: f64) -> usize {
        self.transitions().filter(|(s, a, b)| *s <= t && *a == i && *b == j).count()
    }
}

/// Time `u` in `[a, b]` with `base + int_a^u q = target`, by bisection.
fn solve_hazard(
    gen: &dyn IntensityProcess,
    i: usize,
    a: f64,
    b: f64,
    base: f64,
    target: f64,
    tol: f64,
) -> f64 {
    let (mut lo, mut hi) = (a, b);
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if base - gen.integral(i, i, a, mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Canonical construction of the rating chain on `[0, horizon]`.
pub fn simulate_chain<R: Rng + ?Sized>(
    gen: &dyn IntensityProcess,
    i0: usize,
    horizon: f64,
    rng: &mut R,
) -> Result<RatingPath> {
    let k = gen.k();
    if i0 >= k {
        return Err(Error::Precondition(format!("initial rating {i0} outside 0..{k}")));
    }
    if gen.default_state() == Some(i0) {
        return Err(Error::Precondition("chain cannot start in default".into()));
    }
    let tol = 1e-10 * horizon;
    let mut path = RatingPath::constant(i0, horizon);
    let (mut state, mut now) = (i0, 0.0);
    loop {
        if gen.default_state() == Some(state) {
            break;
        }
        let target = -(1.0 - rng.random::<f64>()).ln();
        let mut cuts = gen.breakpoints_in(now, horizon);
        cuts.push(horizon);
        let mut acc = 0.0;
        let mut lo = now;
        let mut jump = None;
        for hi in cuts {
            let piece = -gen.integral(state, state, lo, hi);
            if acc + piece >= target {
                jump = Some(solve_hazard(gen, state, lo, hi, acc, target, tol));
                break;
            }
            acc += piece;
            lo = hi;
        }
        let Some(at) = jump else { break };
        // destination with probabilities lambda_ij / |lambda_ii|
        let mut exit = -gen.rate(state, state, at);
        let mut use_left = false;
        if exit <= 0.0 {
            exit = -gen.rate_left(state, state, at);
            use_left = true;
        }
        let pick = rng.random::<f64>() * exit;
        let mut next = state;
        let mut cum = 0.0;
        for j in (0..k).filter(|j| *j != state) {
            let r = if use_left { gen.rate_left(state, j, at) } else { gen.rate(state, j, at) };
            if r <= 0.0 {
                continue;
            }
            next = j;
            cum += r;
            if pick < cum {
                break;
            }
        }
        if next == state {
            break;
        }
        // keep jump times strictly increasing even at bisection resolution
        let at = if at <= now { f64::from_bits(now.to_bits() + 1) } else { at };
        path.jump_times.push(at);
        path.states.push(next);
        state = next;
        now = at;
    }
    Ok(path)
}

/// `p(t, u)` for the grid nodes `u >= t`, `p[m] = p(t, t + m dt)`.
#[derive(Clone, Debug)]
pub struct ForwardEquationSolution {
    pub t_index: usize,
    pub p: Vec<DMatrix<f64>>,
}

impl ForwardEquationSolution {
    /// `p(t, u)` for grid index `u >= t_index`.
    pub fn at(&self, u_index: usize) -> &DMatrix<f64> {
        &self.p[u_index - self.t_index]
    }
}

const RK4_MAX_STEP: f64 = 1e-2;

/// RK4 for `dp/du = p Lambda(u)` from `a` to `b`, starting at `p`.
fn rk4_segment(gen: &dyn IntensityProcess, p: &mut DMatrix<f64>, a: f64, b: f64) {
    let steps = ((b - a) / RK4_MAX_STEP).ceil().max(1.0) as usize;
    let h = (b - a) / steps as f64;
    for s in 0..steps {
        let u = a + s as f64 * h;
        let end = if s + 1 == steps { b } else { u + h };
        let k1 = &*p * gen.matrix_at(u);
        let mid = gen.matrix_at(u + 0.5 * h);
        let k2 = (&*p + &k1 * (0.5 * h)) * &mid;
        let k3 = (&*p + &k2 * (0.5 * h)) * &mid;
        let k4 = (&*p + &k3 * h) * gen.matrix_left(end);
        *p += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
    }
}

/// `p(times[0], times[m])` for every `m`, stepping RK4 between breakpoints.
pub fn transition_matrices(gen: &dyn IntensityProcess, times: &[f64]) -> Vec<DMatrix<f64>> {
    let mut p = DMatrix::identity(gen.k(), gen.k());
    let mut out = Vec::with_capacity(times.len());
    if times.is_empty() {
        return out;
    }
    out.push(p.clone());
    for w in times.windows(2) {
        let mut cuts = vec![w[0]];
        cuts.extend(gen.breakpoints_in(w[0], w[1]));
        cuts.push(w[1]);
        for c in cuts.windows(2) {
            rk4_segment(gen, &mut p, c[0], c[1]);
        }
        out.push(p.clone());
    }
    out
}

/// Conditional Kolmogorov forward equation from grid node `t_index`.
pub fn kolmogorov_forward(gen: &dyn IntensityProcess, t_index: usize, grid: &TimeGrid) -> ForwardEquationSolution {
    let times: Vec<f64> = (t_index..grid.n_nodes()).map(|k| grid.time(k)).collect();
    ForwardEquationSolution {
        t_index,
        p: transition_matrices(gen, &times),
    }
}

/// Compensated martingales of one path on the grid.
///
/// `m_state[i][k] = H_i(t_k) - H_i(0) - int_0^{t_k} lambda_{C(u),i}(u) du`,
/// `m_pair[i][j][k] = H_ij(t_k) - int_0^{t_k} lambda_ij(u) H_i(u) du`, and
/// `m_default[k] = H_K(t_k) - int_0^{t_k} lambda_{C(u),K}(u) (1 - H_K(u)) du`
/// (identically zero without an absorbing state).
#[derive(Clone, Debug, PartialEq)]
pub struct CompensatedMartingales {
    pub m_state: Vec<Vec<f64>>,
    pub m_pair: Vec<Vec<Vec<f64>>>,
    pub m_default: Vec<f64>,
}

pub fn compensated_martingales(path: &RatingPath, gen: &dyn IntensityProcess, grid: &TimeGrid) -> Result<CompensatedMartingales> {
    let k = gen.k();
    if path.initial_state >= k || path.states.iter().any(|s| *s >= k) {
        return Err(Error::Shape(format!("path visits a state outside 0..{k}")));
    }
    let n = grid.n_nodes();
    let mut m_state = vec![vec![0.0; n]; k];
    let mut m_pair = vec![vec![vec![0.0; n]; k]; k];
    let mut m_default = vec![0.0; n];
    // occupation intervals [start, end) with the state held
    let mut spans = Vec::with_capacity(path.jump_times.len() + 1);
    let mut start = 0.0;
    let mut state = path.initial_state;
    for (t, _, to) in path.transitions() {
        spans.push((start, t, state));
        start = t;
        state = to;
    }
    spans.push((start, f64::INFINITY, state));
    let dflt = gen.default_state();
    for (idx, t) in grid.times().into_iter().enumerate() {
        for &(a, b, s) in &spans {
            if a >= t {
                break;
            }
            let b = b.min(t);
            for j in 0..k {
                let c = gen.integral(s, j, a, b);
                m_state[j][idx] -= c;
                if j != s {
                    m_pair[s][j][idx] -= c;
                }
            }
            if let Some(d) = dflt {
                if s != d {
                    m_default[idx] -= gen.integral(s, d, a, b);
                }
            }
        }
        for i in 0..k {
            m_state[i][idx] += path.indicator(i, t) - (i == path.initial_state) as u8 as f64;
        }
        for (s, from, to) in path.transitions() {
            if s <= t {
                m_pair[from][to][idx] += 1.0;
            }
        }
        if let Some(d) = dflt {
            m_default[idx] += path.indicator(d, t);
        }
    }
    Ok(CompensatedMartingales {
        m_state,
        m_pair,
        m_default,
    })
}

/// Intensity `lambda_{i,K} = spread / (1 - delta)` demanded by H1.
pub fn h1_intensity(spread: f64, delta: f64, rating: usize, time: f64) -> Result<f64> {
    if delta >= 1.0 {
        return Err(Error::H1Infeasible {
            rating,
            time,
            reason: format!("recovery {delta} >= 1"),
        });
    }
    if !(spread > 0.0) {
        return Err(Error::H1Infeasible {
            rating,
            time,
            reason: format!("short spread g(t,t) - f(t,t) = {spread} is not positive"),
        });
    }
    Ok(spread / (1.0 - delta))
}

/// Overwrite the default column of `base` with the H1 intensities implied by
/// the short spreads of `g` over `f` at every grid node.
pub fn enforce_h1(
    grid: &TimeGrid,
    f: &ForwardSurface,
    g: &[ForwardSurface],
    scheme: &RecoveryScheme,
    base: &dyn IntensityProcess,
) -> Result<SampledIntensity> {
    if !base.absorbing() || base.k() != g.len() + 1 {
        return Err(Error::Shape(format!(
            "H1 needs an absorbing {}-state generator, got {} states",
            g.len() + 1,
            base.k()
        )));
    }
    scheme.check_ratings(g.len())?;
    let k = base.k();
    let mut mats = Vec::with_capacity(grid.n_nodes());
    for t in 0..grid.n_nodes() {
        let time = grid.time(t);
        let mut m = base.matrix_at(time);
        for (i, gi) in g.iter().enumerate() {
            let spread = gi.short_rate(t) - f.short_rate(t);
            m[(i, k - 1)] = h1_intensity(spread, scheme.delta(i, t), i, time)?;
        }
        mats.push(normalize_generator(m, true)?);
    }
    Ok(SampledIntensity::from_normalized(grid.times(), mats, true, base.is_deterministic()))
}

/// Hazard rate `F'(t) / (1 - F(t))` from distribution-function samples on a
/// uniform grid. The density uses central differences inside and
/// second-order one-sided differences at the ends.
pub fn hazard_from_distribution(cdf: &[f64], dt: f64) -> Result<Vec<f64>> {
    let n = cdf.len();
    if let Some(k) = cdf.iter().position(|x| !(*x < 1.0)) {
        return Err(Error::Domain(format!("F = {} >= 1 at sample {k}", cdf[k])));
    }
    if n < 3 {
        return Err(Error::Precondition("need at least three samples".into()));
    }
    let density = |k: usize| -> f64 {
        if k == 0 {
            (-3.0 * cdf[0] + 4.0 * cdf[1] - cdf[2]) / (2.0 * dt)
        } else if k == n - 1 {
            (3.0 * cdf[n - 1] - 4.0 * cdf[n - 2] + cdf[n - 3]) / (2.0 * dt)
        } else {
            (cdf[k + 1] - cdf[k - 1]) / (2.0 * dt)
        }
    };
    Ok((0..n).map(|k| density(k) / (1.0 - cdf[k])).collect())
}
