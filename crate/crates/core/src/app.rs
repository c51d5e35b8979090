//! Scenario-driven commands behind the `lhc` binary.
//!
//! Every artifact starts with a header naming the engine version, the
//! scenario hash and the seed: a `#` line in CSV, a `header` field in JSON.
//! CSV numbers use 17 significant digits so files compare bit for bit.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};

use crate::curves::DriftSurface;
use crate::engine::MarketModel;
use crate::error::{Error, Result};
use crate::hjm::{condition_residual, defaultable_drift, riskfree_drift, riskfree_residual, DriftConditionResidual, MarketSnapshot};
use crate::par::{map_chunks, with_threads, MomentAccumulator};
use crate::pricing::{price_path, DefaultableBondPath};
use crate::scenario::{Format, Scenario};
use crate::verification::{equivalence_gap, price_martingale, ConsistencyInputs, MartingaleReport};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Per-path CSV dumps stop after this many paths; summaries use every path.
pub const PATH_DUMP_LIMIT: usize = 1000;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_TEST_FAILED: i32 = 2;
pub const EXIT_H1: i32 = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Simulate,
    Drift,
    Price,
    Verify,
    Report,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Drift => "drift",
            Command::Price => "price",
            Command::Verify => "verify",
            Command::Report => "report",
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct Options {
    /// Scenario file, or the name of a bundled scenario.
    pub scenario: Option<String>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub out: Option<PathBuf>,
    pub format: Option<Format>,
    pub paths: Option<usize>,
    /// JSON artifacts to merge (`report`); defaults to every JSON file in `out`.
    pub inputs: Vec<PathBuf>,
}

/// What a command produced.
#[derive(Debug, Default)]
pub struct Outcome {
    pub files: Vec<PathBuf>,
    /// `Some(false)` when a verification failed.
    pub verdict: Option<bool>,
}

/// Map an error to the process exit code.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::H1Infeasible { .. } => EXIT_H1,
        _ => EXIT_INVALID,
    }
}

/// Run a command and return the exit code, logging failures.
pub fn run(cmd: Command, opts: &Options) -> i32 {
    match with_threads(opts.threads, || execute(cmd, opts)) {
        Ok(out) => {
            for f in &out.files {
                log::info!("wrote {}", f.display());
            }
            if out.verdict == Some(false) {
                EXIT_TEST_FAILED
            } else {
                EXIT_OK
            }
        }
        Err(e) => {
            eprintln!("lhc {}: {e}", cmd.name());
            exit_code(&e)
        }
    }
}

/// Resolved scenario with the command-line overrides applied.
pub struct Context {
    pub scenario: Scenario,
    pub hash: String,
    pub seed: u64,
    pub n_paths: usize,
    pub out: PathBuf,
    pub formats: Vec<Format>,
}

impl Context {
    pub fn new(opts: &Options) -> Result<Self> {
        let path = opts
            .scenario
            .as_deref()
            .ok_or_else(|| Error::scenario("--scenario", "no scenario given"))?;
        let scenario = Scenario::load(path)?;
        let hash = scenario.hash();
        let seed = opts.seed.unwrap_or(scenario.mc.seed);
        let n_paths = opts.paths.unwrap_or(scenario.mc.n_paths);
        if n_paths < 2 {
            return Err(Error::scenario("--paths", "need at least two paths"));
        }
        let out = opts.out.clone().unwrap_or_else(|| PathBuf::from(&scenario.output.directory));
        let formats = match opts.format {
            Some(f) => vec![f],
            None => scenario.output.formats.clone(),
        };
        Ok(Context { scenario, hash, seed, n_paths, out, formats })
    }

    pub fn header(&self) -> String {
        format!("lhc {VERSION} scenario={} seed={}", self.hash, self.seed)
    }

    fn stem(&self, cmd: Command) -> String {
        let name = if self.scenario.name.is_empty() { "scenario" } else { &self.scenario.name };
        format!("{name}_{}", cmd.name())
    }

    fn wants(&self, f: Format) -> bool {
        self.formats.contains(&f)
    }

    fn write(&self, cmd: Command, ext: &str, body: &str, out: &mut Outcome) -> Result<()> {
        std::fs::create_dir_all(&self.out)?;
        let path = self.out.join(format!("{}.{ext}", self.stem(cmd)));
        std::fs::write(&path, body)?;
        out.files.push(path);
        Ok(())
    }

    fn write_csv(&self, cmd: Command, columns: &str, rows: &str, out: &mut Outcome) -> Result<()> {
        let body = format!("# {}\n{columns}\n{rows}", self.header());
        self.write(cmd, "csv", &body, out)
    }

    fn write_json(&self, cmd: Command, mut value: Value, out: &mut Outcome) -> Result<()> {
        let obj = value.as_object_mut().expect("json object");
        let mut full = serde_json::Map::new();
        full.insert("header".into(), Value::String(self.header()));
        full.insert("command".into(), Value::String(cmd.name().into()));
        full.insert("scenario".into(), Value::String(self.scenario.name.clone()));
        full.append(obj);
        let mut body = serde_json::to_string_pretty(&Value::Object(full))?;
        body.push('\n');
        self.write(cmd, "json", &body, out)
    }
}

/// 17 significant digits, '.' decimal separator.
pub fn num(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn execute(cmd: Command, opts: &Options) -> Result<Outcome> {
    if cmd == Command::Report {
        return report(opts);
    }
    let ctx = Context::new(opts)?;
    let built = ctx.scenario.build()?;
    log::info!("{} on {} ({} paths, seed {})", cmd.name(), ctx.scenario.name, ctx.n_paths, ctx.seed);
    match cmd {
        Command::Simulate => simulate(&ctx, &built.model),
        Command::Drift => drift(&ctx, &built.model),
        Command::Price => price(&ctx, &built.model, built.theta, &built.checkpoints),
        Command::Verify => verify(&ctx, &built.model, built.theta, &built.checkpoints),
        Command::Report => unreachable!(),
    }
}

fn simulate(ctx: &Context, model: &MarketModel) -> Result<Outcome> {
    let n = ctx.n_paths.min(PATH_DUMP_LIMIT);
    let pre = model.ratings.as_ref().map_or(0, |r| r.curves.len());
    let loss = model.scheme().map_or(0.0, |s| s.loss());
    let chunks = map_chunks(n, |a, b| -> Result<String> {
        let mut s = String::new();
        for p in a..b {
            let st = model.simulate_path(ctx.seed, p as u64, false)?;
            for k in 0..st.n_nodes() {
                let t = st.times[k];
                let _ = write!(s, "{p},{},{},{}", num(t), num(st.short_rate[k]), num(st.log_bank[k]));
                for i in 0..pre {
                    let _ = write!(s, ",{}", num(st.short_pre[i][k]));
                }
                match &st.chain {
                    Some(c) => {
                        let _ = write!(s, ",{},{}", c.state_at(t) + 1, num(st.loss_factor(loss, t)));
                    }
                    None => s.push_str(",,"),
                }
                s.push('\n');
            }
        }
        Ok(s)
    });
    let mut rows = String::new();
    for c in chunks {
        rows.push_str(&c?);
    }
    let mut columns = String::from("path_id,t,r,log_B");
    for i in 0..pre {
        let _ = write!(columns, ",g{}_short", i + 1);
    }
    columns.push_str(",rating,V");
    let mut out = Outcome::default();
    // the path dump only has a CSV form
    ctx.write_csv(Command::Simulate, &columns, &rows, &mut out)?;
    if ctx.wants(Format::Json) {
        ctx.write_json(Command::Simulate, json!({ "paths_written": n, "n_nodes": model.grid.n_nodes() }), &mut out)?;
    }
    Ok(out)
}

/// Synthesized drifts (plus any configured perturbation) and their residuals
/// on the frozen initial market.
pub struct DriftReport {
    pub riskfree: (DriftSurface, DriftConditionResidual),
    pub ratings: Vec<(DriftSurface, DriftConditionResidual)>,
}

pub fn drift_report(model: &MarketModel) -> Result<DriftReport> {
    let rf_model = &model.drivers[model.riskfree.driver];
    let mut alpha = riskfree_drift(rf_model, &model.riskfree.vol)?;
    shift(&mut alpha, model.perturbation.riskfree_drift);
    let rates = model.riskfree.initial.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let res = riskfree_residual(rf_model, &model.riskfree.vol, &alpha, &model.grid, rates)?;
    let mut ratings = Vec::new();
    if let Some(r) = &model.ratings {
        let snap = model.initial_snapshot()?;
        let market = MarketSnapshot { grid: &model.grid, f: &snap.f, g: &snap.g, generators: &snap.generators };
        for (i, c) in r.curves.iter().enumerate() {
            let m = &model.drivers[c.driver];
            let mut a = defaultable_drift(&r.scheme, i, m, &c.vol, &market)?;
            shift(&mut a, model.perturbation.defaultable_drift);
            let res = condition_residual(&r.scheme, i, &a, m, &c.vol, &market)?;
            ratings.push((a, res));
        }
    }
    Ok(DriftReport { riskfree: (alpha, res), ratings })
}

fn shift(alpha: &mut DriftSurface, eps: f64) {
    if eps == 0.0 {
        return;
    }
    let n = alpha.n_nodes();
    for t in 0..n {
        for a in &mut alpha.row_mut(t)[t..] {
            *a += eps;
        }
    }
}

#[derive(Serialize)]
struct ResidualSummary {
    curve: String,
    max: f64,
    mean: f64,
    budget: f64,
    passes: bool,
}

fn summary(curve: String, r: &DriftConditionResidual) -> ResidualSummary {
    ResidualSummary {
        curve,
        max: r.max_abs(),
        mean: r.mean_abs(),
        budget: r.budget,
        passes: r.passes(),
    }
}

fn drift(ctx: &Context, model: &MarketModel) -> Result<Outcome> {
    let rep = drift_report(model)?;
    let n = model.grid.n_nodes();
    let mut out = Outcome::default();
    if ctx.wants(Format::Csv) {
        let mut columns = String::from("t,theta,alpha_f,residual_f");
        for i in 0..rep.ratings.len() {
            let _ = write!(columns, ",alpha_g{0},residual_g{0}", i + 1);
        }
        let mut rows = String::new();
        for t in 0..n {
            for th in t..n {
                let _ = write!(
                    rows,
                    "{},{},{},{}",
                    num(model.grid.time(t)),
                    num(model.grid.time(th)),
                    num(rep.riskfree.0.alpha(t, th)),
                    num(rep.riskfree.1.at(t, th))
                );
                for (a, r) in &rep.ratings {
                    let _ = write!(rows, ",{},{}", num(a.alpha(t, th)), num(r.at(t, th)));
                }
                rows.push('\n');
            }
        }
        ctx.write_csv(Command::Drift, &columns, &rows, &mut out)?;
    }
    let mut curves = vec![summary("f".into(), &rep.riskfree.1)];
    for (i, (_, r)) in rep.ratings.iter().enumerate() {
        curves.push(summary(format!("g{}", i + 1), r));
    }
    let passes = curves.iter().all(|c| c.passes);
    if ctx.wants(Format::Json) {
        ctx.write_json(
            Command::Drift,
            json!({ "scheme": ctx.scenario.scheme_kind(), "residuals": curves, "passes": passes }),
            &mut out,
        )?;
    }
    Ok(out)
}

fn price(ctx: &Context, model: &MarketModel, theta: usize, checkpoints: &[usize]) -> Result<Outcome> {
    let scheme = model
        .scheme()
        .ok_or_else(|| Error::scenario("scheme", "price needs a recovery scheme"))?;
    let c = checkpoints.len();
    let dump = ctx.n_paths.min(PATH_DUMP_LIMIT);
    let chunks = map_chunks(ctx.n_paths, |a, b| -> Result<(MomentAccumulator, String)> {
        let mut acc = MomentAccumulator::new(2 * c);
        let mut rows = String::new();
        let mut buf = vec![0.0; 2 * c];
        for p in a..b {
            let st = model.simulate_path(ctx.seed, p as u64, false)?;
            let path = price_path(scheme, &st, theta, checkpoints)?;
            buf[..c].copy_from_slice(&path.discounted);
            buf[c..].copy_from_slice(&path.values);
            acc.push(&buf);
            if p < dump {
                write_price_rows(&mut rows, p, model, &path);
            }
        }
        Ok((acc, rows))
    });
    let mut acc = MomentAccumulator::new(2 * c);
    let mut rows = String::new();
    for part in chunks {
        let (a, r) = part?;
        acc.merge(&a);
        rows.push_str(&r);
    }
    let mut out = Outcome::default();
    if ctx.wants(Format::Csv) {
        ctx.write_csv(Command::Price, "path_id,t,theta,D,D_discounted,rating,V", &rows, &mut out)?;
    }
    if ctx.wants(Format::Json) {
        let times: Vec<f64> = checkpoints.iter().map(|k| model.grid.time(*k)).collect();
        ctx.write_json(
            Command::Price,
            json!({
                "scheme_kind": scheme.kind,
                "n_paths": ctx.n_paths,
                "theta": model.grid.time(theta),
                "checkpoints": times,
                "mean": (0..c).map(|m| acc.mean(m)).collect::<Vec<_>>(),
                "std_err": (0..c).map(|m| acc.std_err(m)).collect::<Vec<_>>(),
                "mean_price": (0..c).map(|m| acc.mean(c + m)).collect::<Vec<_>>(),
                "std_err_price": (0..c).map(|m| acc.std_err(c + m)).collect::<Vec<_>>(),
            }),
            &mut out,
        )?;
    }
    Ok(out)
}

fn write_price_rows(rows: &mut String, p: usize, model: &MarketModel, path: &DefaultableBondPath) {
    let theta = num(model.grid.time(path.theta));
    for m in 0..path.checkpoints.len() {
        let _ = writeln!(
            rows,
            "{p},{},{theta},{},{},{},{}",
            num(path.times[m]),
            num(path.values[m]),
            num(path.discounted[m]),
            path.ratings[m] + 1,
            num(path.loss_factor[m])
        );
    }
}

/// Everything `verify` computes.
pub struct Verification {
    pub martingale: MartingaleReport,
    pub residual: DriftConditionResidual,
    pub equivalence_gap: Option<f64>,
    pub rating: Option<usize>,
}

impl Verification {
    pub fn verdict(&self) -> bool {
        self.martingale.verdict && self.residual.passes()
    }
}

pub fn verification(
    model: &MarketModel,
    seed: u64,
    n_paths: usize,
    theta: usize,
    checkpoints: &[usize],
    z_threshold: f64,
) -> Result<Verification> {
    let rep = drift_report(model)?;
    let (residual, rating, gap) = match &model.ratings {
        None => (rep.riskfree.1, None, None),
        Some(r) => {
            let i = r.initial_state;
            let snap = model.initial_snapshot()?;
            let c = &r.curves[i];
            let (alpha, res) = &rep.ratings[i];
            let inp = ConsistencyInputs {
                scheme: &r.scheme,
                rating: i,
                market: MarketSnapshot { grid: &model.grid, f: &snap.f, g: &snap.g, generators: &snap.generators },
                gamma: Some(&snap.gamma),
                alpha,
                model: &model.drivers[c.driver],
                vol: &c.vol,
            };
            (res.clone(), Some(i), Some(equivalence_gap(&inp)?))
        }
    };
    let martingale = price_martingale(model, seed, n_paths, theta, checkpoints, z_threshold)?;
    Ok(Verification { martingale, residual, equivalence_gap: gap, rating })
}

fn verify(ctx: &Context, model: &MarketModel, theta: usize, checkpoints: &[usize]) -> Result<Outcome> {
    let v = verification(model, ctx.seed, ctx.n_paths, theta, checkpoints, ctx.scenario.mc.z_threshold)?;
    let verdict = v.verdict();
    let m = &v.martingale;
    let mut out = Outcome { files: Vec::new(), verdict: Some(verdict) };
    if ctx.wants(Format::Csv) {
        let mut rows = String::new();
        for c in 0..m.checkpoints.len() {
            let _ = writeln!(
                rows,
                "{},{},{},{},{}",
                num(m.checkpoints[c]),
                num(m.initial),
                num(m.mean[c]),
                num(m.std_err[c]),
                num(m.z_score[c])
            );
        }
        ctx.write_csv(Command::Verify, "t,initial,mean,std_err,z", &rows, &mut out)?;
    }
    if ctx.wants(Format::Json) {
        ctx.write_json(
            Command::Verify,
            json!({
                "scheme_kind": ctx.scenario.scheme_kind(),
                "rating": v.rating.map(|i| i + 1),
                "n_paths": m.n_paths,
                "theta": model.grid.time(theta),
                "initial": m.initial,
                "checkpoints": m.checkpoints,
                "mean": m.mean,
                "std_err": m.std_err,
                "z": m.z_score,
                "z_threshold": m.threshold,
                "martingale_pass": m.verdict,
                "residuals": { "max": v.residual.max_abs(), "mean": v.residual.mean_abs(), "budget": v.residual.budget },
                "equivalence_gap": v.equivalence_gap,
                "verdict": if verdict { "pass" } else { "fail" },
            }),
            &mut out,
        )?;
    }
    if !verdict {
        log::warn!("verification failed: max |z| = {}", m.max_abs_z());
    }
    Ok(out)
}

/// Merge per-checkpoint statistics from JSON artifacts into one CSV table.
fn report(opts: &Options) -> Result<Outcome> {
    let out_dir = opts.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    let mut inputs = opts.inputs.clone();
    if inputs.is_empty() {
        inputs = json_files(&out_dir)?;
    }
    if inputs.is_empty() {
        return Err(Error::scenario(out_dir.display().to_string(), "no JSON artifacts to merge"));
    }
    let mut rows = String::new();
    let mut headers = Vec::new();
    for path in &inputs {
        let text = std::fs::read_to_string(path)?;
        let v: Value = serde_json::from_str(&text).map_err(|e| Error::scenario(path.display().to_string(), e.to_string()))?;
        let Some(times) = v.get("checkpoints").and_then(Value::as_array) else {
            continue;
        };
        let field = |name: &str, c: usize| -> String {
            v.get(name)
                .and_then(|a| a.get(c))
                .and_then(Value::as_f64)
                .map(num)
                .unwrap_or_default()
        };
        let text_of = |name: &str| v.get(name).and_then(Value::as_str).unwrap_or("").to_string();
        let scheme = text_of("scheme_kind");
        headers.push(text_of("header"));
        for (c, t) in times.iter().enumerate() {
            let _ = writeln!(
                rows,
                "{},{},{},{},{},{},{}",
                text_of("scenario"),
                text_of("command"),
                scheme,
                num(t.as_f64().unwrap_or(f64::NAN)),
                field("mean", c),
                field("std_err", c),
                field("z", c)
            );
        }
    }
    std::fs::create_dir_all(&out_dir)?;
    let path = out_dir.join("report.csv");
    let mut body = String::new();
    headers.sort();
    headers.dedup();
    for h in headers.iter().filter(|h| !h.is_empty()) {
        let _ = writeln!(body, "# {h}");
    }
    body.push_str("scenario,command,scheme,t,mean,std_err,z\n");
    body.push_str(&rows);
    std::fs::write(&path, body)?;
    Ok(Outcome { files: vec![path], verdict: None })
}

fn json_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    v.sort();
    Ok(v)
}
