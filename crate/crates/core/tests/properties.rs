use lhc::curves::{ordering_violations, CurveKind, DriftSurface, ForwardSurface, TimeGrid, VolatilitySurface};
use lhc::hjm::{condition_residual, defaultable_drift, MarketSnapshot};
use lhc::levy::{Atom, LevyModel};
use lhc::migration::{enforce_h1, normalize_generator, transition_matrices, ConstantIntensity};
use lhc::par::{map_chunks_sequential, CompensatedSum, MomentAccumulator};
use lhc::pricing::{contractual_payoff, discounted_price, price_path, RecoveryScheme, SchemeKind};
use lhc::scenario::Scenario;
use lhc::verification::{equivalence_check, ConsistencyInputs};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn model_strategy() -> impl Strategy<Value = LevyModel> {
    (1usize..=3)
        .prop_flat_map(|d| {
            (
                prop::collection::vec(-0.5f64..0.5, d),
                prop::collection::vec(0.0f64..1.5, d),
                prop::collection::vec((prop::collection::vec(-1.5f64..1.5, d), 0.05f64..2.0), 0..4),
            )
        })
        .prop_map(|(a, q, atoms)| {
            let d = a.len();
            let cov = DMatrix::from_fn(d, d, |i, j| if i == j { q[i] } else { 0.1 * (q[i] * q[j]).sqrt() });
            let atoms = atoms.into_iter().map(|(jump, rate)| Atom { jump, rate }).collect();
            LevyModel::new(a, cov, atoms).unwrap()
        })
}

fn point(d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, d)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn gradient_matches_central_differences((m, u) in model_strategy().prop_flat_map(|m| { let d = m.dim(); (Just(m), point(d)) })) {
        let g = m.laplace_exponent_gradient(&u).unwrap();
        let h = 1e-5;
        for i in 0..u.len() {
            let mut up = u.clone();
            let mut dn = u.clone();
            up[i] += h;
            dn[i] -= h;
            let fd = (m.laplace_exponent(&up).unwrap() - m.laplace_exponent(&dn).unwrap()) / (2.0 * h);
            prop_assert!((fd - g[i]).abs() <= 1e-6 * g[i].abs().max(1.0), "{fd} vs {}", g[i]);
        }
    }

    #[test]
    fn exponent_is_convex_and_vanishes_at_origin(
        (m, u, v) in model_strategy().prop_flat_map(|m| { let d = m.dim(); (Just(m), point(d), point(d)) }),
        w in 0.0f64..1.0,
    ) {
        prop_assert_eq!(m.laplace_exponent(&vec![0.0; m.dim()]).unwrap(), 0.0);
        let mix: Vec<f64> = u.iter().zip(&v).map(|(a, b)| w * a + (1.0 - w) * b).collect();
        let lhs = m.laplace_exponent(&mix).unwrap();
        let rhs = w * m.laplace_exponent(&u).unwrap() + (1.0 - w) * m.laplace_exponent(&v).unwrap();
        prop_assert!(lhs <= rhs + 1e-12 * rhs.abs().max(1.0));
    }

    #[test]
    fn normalized_generators_have_zero_row_sums(
        k in 2usize..6,
        entries in prop::collection::vec(0.0f64..3.0, 36),
        absorbing in any::<bool>(),
    ) {
        let m = DMatrix::from_fn(k, k, |i, j| if absorbing && i == k - 1 { 0.0 } else { entries[i * 6 + j] });
        if absorbing {
            let mut live = m.clone();
            live[(k - 1, 0)] = 0.1;
            prop_assert!(normalize_generator(live, true).is_err());
        }
        let n = normalize_generator(m, absorbing).unwrap();
        for i in 0..k {
            let row: f64 = n.row(i).iter().sum();
            prop_assert!(row.abs() < 1e-12);
            for j in (0..k).filter(|j| *j != i) {
                prop_assert!(n[(i, j)] >= 0.0);
            }
        }
        if absorbing {
            prop_assert!(n.row(k - 1).iter().all(|x| *x == 0.0));
        }
    }

    #[test]
    fn transition_matrices_are_stochastic(entries in prop::collection::vec(0.0f64..1.0, 9), t in 0.1f64..3.0) {
        let m = DMatrix::from_fn(3, 3, |i, j| if i == 2 { 0.0 } else { entries[i * 3 + j] });
        let gen = ConstantIntensity::new(m, true).unwrap();
        let p = transition_matrices(&gen, &[0.0, t]);
        let expm = (gen.matrix() * t).exp();
        for i in 0..3 {
            prop_assert!((p[1].row(i).sum() - 1.0).abs() < 1e-12);
            for j in 0..3 {
                prop_assert!(p[1][(i, j)] >= -1e-15);
                prop_assert!((p[1][(i, j)] - expm[(i, j)]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn h1_generators_satisfy_the_premium_identity(
        spreads in prop::collection::vec(0.001f64..0.05, 2),
        deltas in prop::collection::vec(0.0f64..0.95, 2),
        slope in -0.01f64..0.01,
    ) {
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let f0: Vec<f64> = grid.times().iter().map(|t| 0.02 + slope * t).collect();
        let f = ForwardSurface::frozen(&grid, &f0, CurveKind::RiskFree).unwrap();
        let g: Vec<_> = (0..2)
            .map(|i| {
                let v: Vec<f64> = f0.iter().map(|x| x + spreads[i]).collect();
                ForwardSurface::frozen(&grid, &v, CurveKind::PreDefault(i)).unwrap()
            })
            .collect();
        let scheme = RecoveryScheme::new(SchemeKind::Treasury, deltas.clone()).unwrap();
        let gen = enforce_h1(&grid, &f, &g, &scheme, &ConstantIntensity::zero(3, true)).unwrap();
        for (k, m) in gen.matrices().iter().enumerate() {
            for i in 0..2 {
                let spread = g[i].short_rate(k) - f.short_rate(k);
                prop_assert!((spread - (1.0 - deltas[i]) * m[(i, 2)]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn compensated_means_do_not_depend_on_chunking(xs in prop::collection::vec(-1e6f64..1e6, 1..3000), split in 1usize..3000) {
        let split = split.min(xs.len());
        let mut whole = MomentAccumulator::new(1);
        for x in &xs {
            whole.push(&[*x]);
        }
        let mut a = MomentAccumulator::new(1);
        let mut b = MomentAccumulator::new(1);
        for x in &xs[..split] { a.push(&[*x]); }
        for x in &xs[split..] { b.push(&[*x]); }
        a.merge(&b);
        prop_assert!((a.mean(0) - whole.mean(0)).abs() <= 1e-13 * whole.mean(0).abs().max(1.0));
        let mut s = CompensatedSum::default();
        for x in xs.iter().rev() { s.add(*x); }
        prop_assert!((s.value() - whole.mean(0) * xs.len() as f64).abs() <= 1e-9 * s.value().abs().max(1.0));
    }

    #[test]
    fn equivalence_gap_vanishes_under_h1(
        seed in any::<u64>(),
        kind in prop::sample::select(vec![SchemeKind::MarketValue, SchemeKind::Treasury, SchemeKind::Par]),
    ) {
        prop_assert!(random_equivalence(seed, kind) <= 1e-12);
    }
}

/// Random H1-consistent market with an arbitrary drift; returns the gap.
fn random_equivalence(seed: u64, kind: SchemeKind) -> f64 {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let grid = TimeGrid::new(rng.random_range(0.5..3.0), rng.random_range(4..16)).unwrap();
    let n = grid.n_nodes();
    let pre = rng.random_range(1..4);
    let f0: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..0.05)).collect();
    let f = ForwardSurface::frozen(&grid, &f0, CurveKind::RiskFree).unwrap();
    let g: Vec<_> = (0..pre)
        .map(|i| {
            let v: Vec<f64> = f0.iter().map(|x| x + rng.random_range(0.001..0.06)).collect();
            ForwardSurface::frozen(&grid, &v, CurveKind::PreDefault(i)).unwrap()
        })
        .collect();
    let base = DMatrix::from_fn(pre + 1, pre + 1, |i, j| if i < pre && j < pre && i != j { rng.random_range(0.0..0.3) } else { 0.0 });
    let deltas: Vec<f64> = (0..pre).map(|_| rng.random_range(0.0..0.9)).collect();
    let scheme = RecoveryScheme::new(kind, deltas).unwrap();
    let gens = enforce_h1(&grid, &f, &g, &scheme, &ConstantIntensity::new(base, true).unwrap())
        .unwrap()
        .matrices()
        .to_vec();
    let model = LevyModel::new(
        vec![rng.random_range(-0.1..0.1)],
        DMatrix::from_element(1, 1, rng.random_range(0.0..1.0)),
        vec![Atom { jump: vec![rng.random_range(-2.0..2.0)], rate: rng.random_range(0.1..2.0) }],
    )
    .unwrap();
    let vol = VolatilitySurface::exponential(&grid, &[rng.random_range(0.0..0.02)], 0.5).unwrap();
    let alpha = DriftSurface::from_raw(n, (0..n * n).map(|_| rng.random_range(-0.01..0.01)).collect()).unwrap();
    let rating = rng.random_range(0..pre);
    let inp = ConsistencyInputs {
        scheme: &scheme,
        rating,
        market: MarketSnapshot { grid: &grid, f: &f, g: &g, generators: &gens },
        gamma: None,
        alpha: &alpha,
        model: &model,
        vol: &vol,
    };
    equivalence_check(&inp).unwrap()
}

#[test]
fn chunked_maps_preserve_order() {
    let v = map_chunks_sequential(1500, |a, b| (a, b));
    assert_eq!(v, vec![(0, 512), (512, 1024), (1024, 1500)]);
    #[cfg(feature = "parallel")]
    assert_eq!(lhc::par::map_chunks_parallel(1500, |a, b| (a, b)), v);
}

#[test]
fn paths_are_reproducible_and_flat_extended() {
    for name in ["k3_par", "k3_multiple"] {
        let b = Scenario::load(name).unwrap().build().unwrap();
        for p in 0..5 {
            let x = b.model.simulate_path(99, p, true).unwrap();
            let y = b.model.simulate_path(99, p, true).unwrap();
            assert_eq!(x.log_pre, y.log_pre);
            assert_eq!(x.chain, y.chain);
            assert_eq!(x.cox_jumps, y.cox_jumps);
            let (f, g) = x.surfaces.as_ref().unwrap();
            assert_eq!(f.flat_extension_violations(), 0);
            assert!(g.iter().all(|s| s.flat_extension_violations() == 0));
        }
        let a = b.model.simulate_path(99, 0, false).unwrap();
        let c = b.model.simulate_path(100, 0, false).unwrap();
        assert_ne!(a.log_bond, c.log_bond);
    }
}

#[test]
fn terminal_prices_match_contractual_payoffs() {
    for name in ["k2_market", "k3_treasury", "k3_par", "k3_multiple"] {
        let sc = Scenario::load(name).unwrap();
        let b = sc.build().unwrap();
        let scheme = b.model.scheme().unwrap();
        let mut defaults = 0;
        for p in 0..3000 {
            let st = b.model.simulate_path(sc.mc.seed, p, false).unwrap();
            let path = price_path(scheme, &st, b.theta, &[b.theta]).unwrap();
            let pay = contractual_payoff(scheme, &st, b.theta).unwrap();
            assert!((path.values[0] - pay).abs() <= 1e-14 * pay.abs().max(1.0), "{name} path {p}");
            defaults += (path.default_time.is_some() || path.loss_factor[0] < 1.0) as usize;
        }
        assert!(defaults > 0, "{name}: no default in 3000 paths");
    }
}

#[test]
fn multiple_defaults_factorize_at_every_node() {
    let sc = Scenario::load("k3_multiple").unwrap();
    let b = sc.build().unwrap();
    let scheme = b.model.scheme().unwrap();
    let all: Vec<usize> = (0..=b.theta).collect();
    for p in 0..500 {
        let st = b.model.simulate_path(sc.mc.seed, p, false).unwrap();
        let path = price_path(scheme, &st, b.theta, &all).unwrap();
        for (m, k) in all.iter().enumerate() {
            let expect = path.loss_factor[m] * st.pre_default(path.ratings[m], *k, b.theta);
            assert!((path.values[m] - expect).abs() <= 1e-14);
        }
    }
}

#[test]
fn ordered_curves_give_ordered_prices() {
    let sc = Scenario::load("k3_treasury").unwrap();
    let b = sc.build().unwrap();
    let n = b.model.grid.n_nodes();
    for p in 0..300 {
        let st = b.model.simulate_path(sc.mc.seed, p, true).unwrap();
        let (f, g) = st.surfaces.as_ref().unwrap();
        for k in 0..n {
            let rows: Vec<&[f64]> = g.iter().map(|s| s.row(k)).collect();
            assert_eq!(ordering_violations(k, f.row(k), &rows), 0);
            for th in k + 1..n {
                let (d1, d2, bond) = (st.pre_default(0, k, th), st.pre_default(1, k, th), st.bond(k, th));
                assert!(d2 < d1 && d1 < bond, "path {p} at ({k},{th})");
            }
        }
    }
}

#[test]
fn synthesized_drift_residuals_pass_on_bundled_markets() {
    for name in ["k3_treasury", "k3_par", "k3_multiple"] {
        let b = Scenario::load(name).unwrap().build().unwrap();
        let r = b.model.ratings.as_ref().unwrap();
        let snap = b.model.initial_snapshot().unwrap();
        let market = MarketSnapshot { grid: &b.model.grid, f: &snap.f, g: &snap.g, generators: &snap.generators };
        for (i, c) in r.curves.iter().enumerate() {
            let m = &b.model.drivers[c.driver];
            let a = defaultable_drift(&r.scheme, i, m, &c.vol, &market).unwrap();
            let res = condition_residual(&r.scheme, i, &a, m, &c.vol, &market).unwrap();
            assert!(res.passes(), "{name} g{}: {} > {}", i + 1, res.max_abs(), res.budget);
        }
    }
}

#[test]
fn discounted_price_refuses_wrong_chain() {
    let b = Scenario::load("k3_multiple").unwrap().build().unwrap();
    let st = b.model.simulate_path(1, 0, false).unwrap();
    let mv = RecoveryScheme::new(SchemeKind::MarketValue, vec![0.4, 0.3]).unwrap();
    assert!(discounted_price(&mv, &st, 0, b.theta).is_err());
}
