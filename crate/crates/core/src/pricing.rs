//! Recovery schemes and defaultable bond prices.
//!
//! Ratings are 0-based in code: pre-default ratings are `0..K-1` and the
//! default state, when there is one, is `K-1`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeKind {
    MarketValue,
    Treasury,
    Par,
    MultipleDefaults,
}

impl SchemeKind {
    pub const ALL: [SchemeKind; 4] = [
        SchemeKind::MarketValue,
        SchemeKind::Treasury,
        SchemeKind::Par,
        SchemeKind::MultipleDefaults,
    ];

    /// Whether the rating chain has an absorbing default state.
    pub fn absorbing(self) -> bool {
        self != SchemeKind::MultipleDefaults
    }

    pub fn name(self) -> &'static str {
        match self {
            SchemeKind::MarketValue => "market_value",
            SchemeKind::Treasury => "treasury",
            SchemeKind::Par => "par",
            SchemeKind::MultipleDefaults => "multiple_defaults",
        }
    }
}

impl std::fmt::Display for SchemeKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// A recovery scheme with its parameters.
///
/// Recovery rates are constants per rating. Market value recovery may in
/// addition carry a per-node profile `delta[i][t_k]`. Multiple defaults use a
/// constant loss fraction `L`; its recovery rate is `1 - L`.
#[derive(Clone, Debug, PartialEq)]
pub struct RecoveryScheme {
    pub kind: SchemeKind,
    deltas: Vec<f64>,
    delta_profile: Option<Vec<Vec<f64>>>,
    loss: f64,
}

impl RecoveryScheme {
    pub fn new(kind: SchemeKind, deltas: Vec<f64>) -> Result<Self> {
        if kind == SchemeKind::MultipleDefaults {
            return Err(Error::Precondition("use RecoveryScheme::multiple_defaults".into()));
        }
        for (i, d) in deltas.iter().enumerate() {
            if !(0.0..=1.0).contains(d) {
                return Err(Error::ModelInvariant(format!("recovery rate of rating {i} is {d}, outside [0,1]")));
            }
        }
        Ok(RecoveryScheme {
            kind,
            deltas,
            delta_profile: None,
            loss: 0.0,
        })
    }

    pub fn multiple_defaults(loss: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&loss) {
            return Err(Error::ModelInvariant(format!("loss fraction {loss} outside [0,1]")));
        }
        Ok(RecoveryScheme {
            kind: SchemeKind::MultipleDefaults,
            deltas: Vec::new(),
            delta_profile: None,
            loss,
        })
    }

    /// Time-varying recovery for market value: `profile[i][k]` at node `k`.
    pub fn with_delta_profile(mut self, profile: Vec<Vec<f64>>) -> Result<Self> {
        if self.kind != SchemeKind::MarketValue {
            return Err(Error::Unsupported(format!(
                "time-varying recovery is only defined for market value, not {}",
                self.kind
            )));
        }
        if profile.len() != self.deltas.len() {
            return Err(Error::Shape(format!(
                "recovery profile has {} ratings, expected {}",
                profile.len(),
                self.deltas.len()
            )));
        }
        if profile.iter().flatten().any(|d| !(0.0..=1.0).contains(d)) {
            return Err(Error::ModelInvariant("recovery profile leaves [0,1]".into()));
        }
        self.delta_profile = Some(profile);
        Ok(self)
    }

    pub fn loss(&self) -> f64 {
        self.loss
    }

    pub fn deltas(&self) -> &[f64] {
        &self.deltas
    }

    pub fn has_profile(&self) -> bool {
        self.delta_profile.is_some()
    }

    /// Recovery rate of rating `i` at node `t`.
    pub fn delta(&self, i: usize, t: usize) -> f64 {
        if self.kind == SchemeKind::MultipleDefaults {
            return 1.0 - self.loss;
        }
        match &self.delta_profile {
            Some(p) => p[i][t.min(p[i].len() - 1)],
            None => self.deltas[i],
        }
    }

    /// Checks the recovery vector against the number of pre-default ratings.
    pub fn check_ratings(&self, pre_default: usize) -> Result<()> {
        if self.kind != SchemeKind::MultipleDefaults && self.deltas.len() != pre_default {
            return Err(Error::Shape(format!(
                "{} recovery rates for {pre_default} pre-default ratings",
                self.deltas.len()
            )));
        }
        if let Some(p) = &self.delta_profile {
            if p.iter().any(|row| row.is_empty()) {
                return Err(Error::Shape("empty recovery profile".into()));
            }
        }
        Ok(())
    }
}

use crate::curves::cumulative_trapezoid;
use crate::engine::PathState;
use crate::migration::{transition_matrices, IntensityProcess};

/// `dV = -V_{t-} L dN`: apply one step of the loss process.
pub fn update_loss_process(v_prev: f64, loss: f64, cox_jump: bool) -> f64 {
    if cox_jump {
        v_prev * (1.0 - loss)
    } else {
        v_prev
    }
}

/// Prices of one bond along one path at the requested grid nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct DefaultableBondPath {
    pub theta: usize,
    pub checkpoints: Vec<usize>,
    pub times: Vec<f64>,
    /// `D(t, theta)`.
    pub values: Vec<f64>,
    /// `D(t, theta) / B_t`.
    pub discounted: Vec<f64>,
    /// `C^1(t)`, 0-based.
    pub ratings: Vec<usize>,
    /// `V_t` (identically one outside multiple defaults).
    pub loss_factor: Vec<f64>,
    pub default_time: Option<f64>,
}

/// Discounted price `D(t_k, theta) / B_{t_k}`, the rating and `V_{t_k}`.
pub fn discounted_price(scheme: &RecoveryScheme, st: &PathState, k: usize, theta: usize) -> Result<(f64, usize, f64)> {
    let chain = st
        .chain
        .as_ref()
        .ok_or_else(|| Error::Precondition("path has no rating chain".into()))?;
    if k > theta {
        return Err(Error::Precondition(format!("node {k} is past maturity node {theta}")));
    }
    let n = st.n_nodes();
    let t = st.times[k];
    let pre = st.log_pre.len();
    let absorbing = st.generators[0].nrows() == pre + 1;
    if absorbing != scheme.kind.absorbing() {
        return Err(Error::Precondition(format!(
            "{} cannot be priced on a chain {} an absorbing default state",
            scheme.kind,
            if absorbing { "with" } else { "without" }
        )));
    }
    let live = |i: usize| (st.log_pre[i][k * n + theta] - st.log_bank[k]).exp();
    if scheme.kind == SchemeKind::MultipleDefaults {
        let i = chain.state_at(t);
        let v = st.loss_factor(scheme.loss(), t);
        return Ok((v * live(i), i, v));
    }
    match st.default_time() {
        Some(tau) if tau <= t => {
            let j = chain.previous_state_at(tau);
            // last grid node before the default
            let kd = ((tau / st.dt()).floor() as usize).min(n - 2).min(k);
            let delta = scheme.delta(j, kd);
            let log_bank_tau = st.log_bank_at(tau);
            let value = match scheme.kind {
                SchemeKind::MarketValue => delta * (st.log_pre[j][kd * n + theta] - log_bank_tau).exp(),
                SchemeKind::Treasury => delta * st.discounted_bond(k, theta),
                SchemeKind::Par => delta * (-log_bank_tau).exp(),
                SchemeKind::MultipleDefaults => unreachable!(),
            };
            Ok((value, pre, 1.0))
        }
        _ => {
            let i = chain.state_at(t);
            Ok((live(i), i, 1.0))
        }
    }
}

/// Price path of the bond maturing at node `theta`, evaluated at `checkpoints`.
pub fn price_path(scheme: &RecoveryScheme, st: &PathState, theta: usize, checkpoints: &[usize]) -> Result<DefaultableBondPath> {
    let mut out = DefaultableBondPath {
        theta,
        checkpoints: checkpoints.to_vec(),
        times: Vec::with_capacity(checkpoints.len()),
        values: Vec::with_capacity(checkpoints.len()),
        discounted: Vec::with_capacity(checkpoints.len()),
        ratings: Vec::with_capacity(checkpoints.len()),
        loss_factor: Vec::with_capacity(checkpoints.len()),
        default_time: st.default_time(),
    };
    for &k in checkpoints {
        let (d, rating, v) = discounted_price(scheme, st, k, theta)?;
        out.times.push(st.times[k]);
        out.discounted.push(d);
        out.values.push(d * st.log_bank[k].exp());
        out.ratings.push(rating);
        out.loss_factor.push(v);
    }
    Ok(out)
}

/// `D(theta, theta)` straight from the contractual payoff definitions.
pub fn contractual_payoff(scheme: &RecoveryScheme, st: &PathState, theta: usize) -> Result<f64> {
    let chain = st
        .chain
        .as_ref()
        .ok_or_else(|| Error::Precondition("path has no rating chain".into()))?;
    let t = st.times[theta];
    if scheme.kind == SchemeKind::MultipleDefaults {
        return Ok(st.loss_factor(scheme.loss(), t));
    }
    let Some(tau) = st.default_time().filter(|tau| *tau <= t) else {
        return Ok(1.0);
    };
    let j = chain.previous_state_at(tau);
    let n = st.n_nodes();
    let kd = ((tau / st.dt()).floor() as usize).min(n - 2);
    let delta = scheme.delta(j, kd);
    let growth = (st.log_bank[theta] - st.log_bank_at(tau)).exp();
    Ok(match scheme.kind {
        SchemeKind::MarketValue => delta * st.pre_default(j, kd, theta) * growth,
        SchemeKind::Treasury => delta,
        SchemeKind::Par => delta * growth,
        SchemeKind::MultipleDefaults => unreachable!(),
    })
}

/// Ex-dividend price of a bond held in rating `i` with deterministic `r` and
/// `Lambda`, using `steps` quadrature intervals on `[t, theta]`:
/// `sum_{j<K} [exp(-int r) p_ij(t,theta) + delta_j int exp(-int_t^u r) p_ij(t,u) lambda_jK(u) du]`.
pub fn ex_dividend_price(
    gen: &dyn IntensityProcess,
    r: &dyn Fn(f64) -> f64,
    deltas: &[f64],
    i: usize,
    t: f64,
    theta: f64,
    steps: usize,
) -> Result<f64> {
    if !gen.is_deterministic() {
        return Err(Error::Unsupported("ex-dividend price needs a deterministic generator".into()));
    }
    let Some(dflt) = gen.default_state() else {
        return Err(Error::Unsupported("ex-dividend price needs an absorbing default state".into()));
    };
    if i >= dflt || deltas.len() != dflt {
        return Err(Error::Precondition(format!("rating {i} with {} recovery rates for K={}", deltas.len(), dflt + 1)));
    }
    if theta < t {
        return Err(Error::Precondition("maturity before valuation time".into()));
    }
    if theta == t {
        return Ok(1.0);
    }
    let steps = steps.max(1);
    let h = (theta - t) / steps as f64;
    let nodes: Vec<f64> = (0..=steps).map(|m| if m == steps { theta } else { t + m as f64 * h }).collect();
    let p = transition_matrices(gen, &nodes);
    let rates: Vec<f64> = nodes.iter().map(|u| r(*u)).collect();
    let mut integrated = vec![0.0; nodes.len()];
    cumulative_trapezoid(&rates, h, &mut integrated);
    let dividend: Vec<f64> = (0..nodes.len())
        .map(|m| {
            let flow: f64 = (0..dflt).map(|j| deltas[j] * p[m][(i, j)] * gen.rate(j, dflt, nodes[m])).sum();
            (-integrated[m]).exp() * flow
        })
        .collect();
    let survive: f64 = (0..dflt).map(|j| p[steps][(i, j)]).sum();
    Ok((-integrated[steps]).exp() * survive + crate::curves::trapezoid(&dividend, h))
}

/// `-(ln D(t, t + dtheta) - ln D(t, t)) / dtheta` for a price function of maturity.
pub fn short_spread_limit(price: impl Fn(f64) -> Result<f64>, t: f64, dtheta: f64) -> Result<f64> {
    if !(dtheta > 0.0) {
        return Err(Error::Precondition("dtheta must be positive".into()));
    }
    Ok(-(price(t + dtheta)?.ln() - price(t)?.ln()) / dtheta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::migration::{ConstantIntensity, RatingPath};
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;

    fn k2(lam: f64) -> ConstantIntensity {
        ConstantIntensity::new(DMatrix::from_row_slice(2, 2, &[0.0, lam, 0.0, 0.0]), true).unwrap()
    }

    #[test]
    fn loss_process_steps() {
        assert_eq!(update_loss_process(0.7, 0.3, false), 0.7);
        assert_eq!(update_loss_process(0.7, 1.0, true), 0.0);
        assert_relative_eq!(update_loss_process(0.5, 0.2, true), 0.4);
    }

    #[test]
    fn ex_dividend_trivial_and_closed_form() {
        let gen = k2(0.05);
        let r = |_: f64| 0.03;
        assert_eq!(ex_dividend_price(&gen, &r, &[0.4], 0, 1.0, 1.0, 10).unwrap(), 1.0);
        let d = ex_dividend_price(&gen, &r, &[0.0], 0, 0.5, 2.5, 400).unwrap();
        assert_relative_eq!(d, (-0.08f64 * 2.0).exp(), max_relative = 1e-10);
    }

    #[test]
    fn full_recovery_pays_one_at_default_or_maturity() {
        let gen = ConstantIntensity::new(
            DMatrix::from_row_slice(3, 3, &[0.0, 0.2, 0.1, 0.15, 0.0, 0.3, 0.0, 0.0, 0.0]),
            true,
        )
        .unwrap();
        // with r = 0 the bond is default-insensitive
        let zero = |_: f64| 0.0;
        for i in 0..2 {
            let d = ex_dividend_price(&gen, &zero, &[1.0, 1.0], i, 0.0, 3.0, 600).unwrap();
            assert_relative_eq!(d, 1.0, epsilon = 1e-6);
        }
        // with r > 0: 1 - int r exp(-r u) P(tau > u) du, P from the matrix exponential
        let r = 0.04;
        let rate = |_: f64| r;
        let m = gen.matrix().clone();
        let n = 3000;
        let h = 3.0 / n as f64;
        let integrand: Vec<f64> = (0..=n)
            .map(|k| {
                let u = k as f64 * h;
                let p = (&m * u).exp();
                r * (-r * u).exp() * (p[(0, 0)] + p[(0, 1)])
            })
            .collect();
        let expect = 1.0 - crate::curves::trapezoid(&integrand, h);
        let d = ex_dividend_price(&gen, &rate, &[1.0, 1.0], 0, 0.0, 3.0, 600).unwrap();
        assert_relative_eq!(d, expect, epsilon = 1e-6);
        assert!(d > (-r * 3.0).exp());
    }

    #[test]
    fn short_spread_limits() {
        let r = |_: f64| 0.03;
        let s = short_spread_limit(|th| ex_dividend_price(&k2(0.05), &r, &[0.0], 0, 0.0, th, 20), 0.0, 1e-3).unwrap();
        assert!((s - 0.08).abs() <= 0.01 * 0.08);
        let s = short_spread_limit(|th| ex_dividend_price(&k2(0.05), &r, &[1.0], 0, 0.0, th, 20), 0.0, 1e-3).unwrap();
        assert!((s - 0.03).abs() <= 0.01 * 0.03);
        let s = short_spread_limit(|th| ex_dividend_price(&k2(0.0), &r, &[0.3], 0, 0.0, th, 20), 0.0, 1e-3).unwrap();
        assert_relative_eq!(s, 0.03, max_relative = 1e-9);
    }

    #[test]
    fn sampled_generators_are_refused() {
        let gen = crate::migration::SampledIntensity::new(vec![0.0, 1.0], vec![DMatrix::zeros(2, 2); 2], true, false).unwrap();
        assert!(matches!(
            ex_dividend_price(&gen, &|_| 0.0, &[0.5], 0, 0.0, 1.0, 10),
            Err(Error::Unsupported(_))
        ));
    }

    fn flat_state(chain: RatingPath, absorbing: bool) -> PathState {
        let n = 11;
        let dt = 0.1;
        let (r, g) = (0.03, 0.05);
        let times: Vec<f64> = (0..n).map(|k| k as f64 * dt).collect();
        let lb = |c: f64| -> Vec<f64> {
            let mut v = vec![0.0; n * n];
            for k in 0..n {
                for th in k..n {
                    v[k * n + th] = -c * (th - k) as f64 * dt;
                }
            }
            v
        };
        let k = if absorbing { 2 } else { 1 };
        PathState {
            log_bank: times.iter().map(|t| r * t).collect(),
            short_rate: vec![r; n],
            log_bond: lb(r),
            log_pre: vec![lb(g)],
            short_pre: vec![vec![g; n]],
            generators: vec![DMatrix::zeros(k, k); n],
            gamma: vec![],
            chain: Some(chain),
            cox_jumps: vec![],
            levy_jumps: vec![],
            surfaces: None,
            times,
        }
    }

    #[test]
    fn survival_pays_face_value() {
        let st = flat_state(RatingPath::constant(0, 1.0), true);
        for kind in [SchemeKind::MarketValue, SchemeKind::Treasury, SchemeKind::Par] {
            let s = RecoveryScheme::new(kind, vec![0.4]).unwrap();
            let p = price_path(&s, &st, 10, &[0, 5, 10]).unwrap();
            assert_relative_eq!(p.values[2], 1.0, epsilon = 1e-15);
            assert_relative_eq!(p.values[0], (-0.05f64).exp(), epsilon = 1e-15);
            assert_eq!(contractual_payoff(&s, &st, 10).unwrap(), 1.0);
        }
    }

    #[test]
    fn treasury_and_par_after_default() {
        let chain = RatingPath { initial_state: 0, jump_times: vec![0.35], states: vec![1], horizon: 1.0 };
        let st = flat_state(chain, true);
        let tr = RecoveryScheme::new(SchemeKind::Treasury, vec![0.4]).unwrap();
        let p = price_path(&tr, &st, 10, &[4, 7, 10]).unwrap();
        for (m, k) in [4, 7, 10].iter().enumerate() {
            let t = *k as f64 * 0.1;
            assert_relative_eq!(p.values[m], 0.4 * (-0.03 * (1.0 - t)).exp(), epsilon = 1e-14);
            assert_eq!(p.ratings[m], 1);
        }
        assert_relative_eq!(p.values[2], contractual_payoff(&tr, &st, 10).unwrap(), epsilon = 1e-15);

        let par = RecoveryScheme::new(SchemeKind::Par, vec![0.4]).unwrap();
        let p = price_path(&par, &st, 10, &[4, 10]).unwrap();
        assert_relative_eq!(p.values[0], 0.4 * (0.03f64 * 0.05).exp(), epsilon = 1e-14);
        assert_relative_eq!(p.values[1], 0.4 * (0.03f64 * 0.65).exp(), epsilon = 1e-14);
        assert_relative_eq!(p.values[1], contractual_payoff(&par, &st, 10).unwrap(), epsilon = 1e-14);

        let mv = RecoveryScheme::new(SchemeKind::MarketValue, vec![0.4]).unwrap();
        let p = price_path(&mv, &st, 10, &[3, 4, 10]).unwrap();
        // left limit from node 3 (t = 0.3), grown at the risk-free rate from tau
        let pre = (-0.05f64 * 0.7).exp();
        assert_relative_eq!(p.values[0], pre, epsilon = 1e-15);
        assert_relative_eq!(p.values[1], 0.4 * pre * (0.03f64 * 0.05).exp(), epsilon = 1e-14);
        assert_relative_eq!(p.values[2], contractual_payoff(&mv, &st, 10).unwrap(), epsilon = 1e-14);
    }

    #[test]
    fn multiple_defaults_factorize() {
        let mut st = flat_state(RatingPath::constant(0, 1.0), false);
        st.cox_jumps = vec![0.22, 0.61];
        let s = RecoveryScheme::multiple_defaults(0.25).unwrap();
        let p = price_path(&s, &st, 10, &[0, 3, 7, 10]).unwrap();
        for m in 0..4 {
            let k = p.checkpoints[m];
            let expect = p.loss_factor[m] * st.pre_default(0, k, 10);
            assert!((p.values[m] - expect).abs() <= 1e-14);
        }
        assert_eq!(p.loss_factor, vec![1.0, 0.75, 0.5625, 0.5625]);
        assert_eq!(contractual_payoff(&s, &st, 10).unwrap(), 0.5625);
        let mv = RecoveryScheme::new(SchemeKind::MarketValue, vec![0.4]).unwrap();
        assert!(price_path(&mv, &st, 10, &[0]).is_err());
    }
}
