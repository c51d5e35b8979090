//! Scenario documents (JSON) and their translation into a [`MarketModel`].
//!
//! Ratings are 1-based in scenario files. `K` counts every rating state
//! including default; under multiple defaults there is no default state and
//! the chain lives on the `K - 1` pre-default ratings.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::curves::{InitialCurve, TimeGrid, VolatilitySurface};
use crate::engine::{CurveSpec, DefaultIntensity, MarketModel, Perturbation, RatingSetup};
use crate::error::{Error, Result};
use crate::levy::{Atom, LevyModel};
use crate::migration::{ConstantIntensity, IntensityProcess, PiecewiseIntensity};
use crate::pricing::{RecoveryScheme, SchemeKind};

pub const BUNDLED: [(&str, &str); 4] = [
    ("k2_market", include_str!("../scenarios/k2_market.json")),
    ("k3_treasury", include_str!("../scenarios/k3_treasury.json")),
    ("k3_par", include_str!("../scenarios/k3_par.json")),
    ("k3_multiple", include_str!("../scenarios/k3_multiple.json")),
];

pub fn bundled(name: &str) -> Option<&'static str> {
    BUNDLED.iter().find(|(n, _)| *n == name).map(|(_, s)| *s)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    pub grid: GridSpec,
    pub drivers: Vec<DriverSpec>,
    pub curves: CurvesSpec,
    pub vols: VolsSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ratings: Option<RatingsSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scheme: Option<SchemeSpec>,
    pub mc: McSpec,
    #[serde(default)]
    pub output: OutputSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perturbation: Option<PerturbationSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    #[serde(rename = "T_star")]
    pub t_star: f64,
    pub n_steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriverSpec {
    pub dim: usize,
    pub a: Vec<f64>,
    #[serde(rename = "Q")]
    pub q: CovarianceSpec,
    #[serde(default)]
    pub atoms: Vec<AtomSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum CovarianceSpec {
    Diag(Vec<f64>),
    Dense(Vec<Vec<f64>>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AtomSpec {
    pub y: Vec<f64>,
    pub rho: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurvesSpec {
    pub f0: InitialCurve,
    #[serde(default)]
    pub g0: Vec<InitialCurve>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolsSpec {
    pub f: VolSpec,
    #[serde(default)]
    pub g: Vec<VolSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolSpec {
    #[serde(default)]
    pub driver: usize,
    pub shape: VolShape,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum VolShape {
    /// `sigma(t, theta) = level * exp(-decay (theta - t))`.
    Exponential { level: Vec<f64>, decay: f64 },
    Constant(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RatingsSpec {
    #[serde(rename = "K")]
    pub k: usize,
    pub lambda: LambdaSpec,
    pub default_column: DefaultColumn,
    #[serde(default)]
    pub deltas: Vec<f64>,
    /// 1-based.
    pub initial_state: usize,
    /// Constant Cox intensities per rating (multiple defaults with `given`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum LambdaSpec {
    Constant(Vec<Vec<f64>>),
    Piecewise { starts: Vec<f64>, matrices: Vec<Vec<Vec<f64>>> },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefaultColumn {
    H1,
    Given,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemeSpec {
    pub kind: SchemeKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
}

fn default_z() -> f64 {
    4.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McSpec {
    pub n_paths: usize,
    pub seed: u64,
    pub checkpoints: Vec<f64>,
    pub maturity: f64,
    #[serde(default = "default_z")]
    pub z_threshold: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    pub directory: String,
    pub formats: Vec<Format>,
}

impl Default for OutputSpec {
    fn default() -> Self {
        OutputSpec {
            directory: "out".into(),
            formats: vec![Format::Csv, Format::Json],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationSpec {
    #[serde(default)]
    pub riskfree_drift: f64,
    #[serde(default)]
    pub defaultable_drift: f64,
    #[serde(default)]
    pub default_intensity: f64,
}

/// A scenario turned into engine objects.
pub struct Built {
    pub model: MarketModel,
    /// Grid index of the bond maturity.
    pub theta: usize,
    /// Grid indices of the checkpoints.
    pub checkpoints: Vec<usize>,
}

fn bad(location: impl Into<String>, message: impl std::fmt::Display) -> Error {
    Error::scenario(location, message.to_string())
}

fn matrix(rows: &[Vec<f64>], n: usize, at: &str) -> Result<DMatrix<f64>> {
    if rows.len() != n || rows.iter().any(|r| r.len() != n) {
        return Err(bad(at, format!("expected a {n}x{n} matrix")));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

impl Scenario {
    /// Parse and validate. `origin` names the source in error messages.
    pub fn from_json_str(text: &str, origin: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let sc: Scenario = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            bad(
                format!("{origin}:{}:{} (field `{path}`)", inner.line(), inner.column()),
                inner,
            )
        })?;
        sc.validate()?;
        Ok(sc)
    }

    /// Load a file, or a bundled scenario by name when no such file exists.
    pub fn load(path: &str) -> Result<Self> {
        let p = std::path::Path::new(path);
        if !p.exists() {
            if let Some(text) = bundled(path) {
                return Scenario::from_json_str(text, path);
            }
        }
        let text = std::fs::read_to_string(p)?;
        Scenario::from_json_str(&text, path)
    }

    /// Canonical compact serialization; fields in declaration order.
    pub fn canonical(&self) -> String {
        serde_json::to_string(self).expect("scenario serializes")
    }

    /// SHA-256 of the canonical serialization, hex.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().as_bytes()))
    }

    pub fn scheme_kind(&self) -> Option<SchemeKind> {
        self.scheme.as_ref().map(|s| s.kind)
    }

    /// Checks that need no engine objects.
    pub fn validate(&self) -> Result<()> {
        let n = self.grid.n_steps;
        if !(self.grid.t_star > 0.0 && self.grid.t_star.is_finite()) {
            return Err(bad("grid.T_star", "must be positive"));
        }
        if n == 0 {
            return Err(bad("grid.n_steps", "must be positive"));
        }
        if self.drivers.is_empty() {
            return Err(bad("drivers", "need at least one driver"));
        }
        for (m, d) in self.drivers.iter().enumerate() {
            if d.a.len() != d.dim {
                return Err(bad(format!("drivers[{m}].a"), format!("length must equal dim = {}", d.dim)));
            }
            if let CovarianceSpec::Diag(v) = &d.q {
                if v.len() != d.dim {
                    return Err(bad(format!("drivers[{m}].Q.diag"), format!("length must equal dim = {}", d.dim)));
                }
            }
            for (a, atom) in d.atoms.iter().enumerate() {
                if atom.y.len() != d.dim {
                    return Err(bad(format!("drivers[{m}].atoms[{a}].y"), format!("length must equal dim = {}", d.dim)));
                }
            }
        }
        let check_vol = |v: &VolSpec, at: &str| -> Result<()> {
            let d = self
                .drivers
                .get(v.driver)
                .ok_or_else(|| bad(format!("{at}.driver"), format!("no driver {}", v.driver)))?;
            let len = match &v.shape {
                VolShape::Exponential { level, .. } => level.len(),
                VolShape::Constant(s) => s.len(),
            };
            if len != d.dim {
                return Err(bad(format!("{at}.shape"), format!("driver {} has dim {}, volatility {len}", v.driver, d.dim)));
            }
            Ok(())
        };
        check_vol(&self.vols.f, "vols.f")?;
        match (&self.ratings, &self.scheme) {
            (None, None) => {
                if !self.curves.g0.is_empty() || !self.vols.g.is_empty() {
                    return Err(bad("curves.g0", "pre-default curves given without a ratings block"));
                }
            }
            (Some(_), None) => return Err(bad("scheme", "a ratings block needs a recovery scheme")),
            (None, Some(_)) => return Err(bad("ratings", "a recovery scheme needs a ratings block")),
            (Some(r), Some(s)) => {
                if r.k < 2 {
                    return Err(bad("ratings.K", "need at least two rating states"));
                }
                let pre = r.k - 1;
                if self.curves.g0.len() != pre {
                    return Err(bad("curves.g0", format!("need K-1 = {pre} pre-default curves, got {}", self.curves.g0.len())));
                }
                if self.vols.g.len() != pre {
                    return Err(bad("vols.g", format!("need K-1 = {pre} volatilities, got {}", self.vols.g.len())));
                }
                for (i, v) in self.vols.g.iter().enumerate() {
                    check_vol(v, &format!("vols.g[{i}]"))?;
                }
                if r.initial_state == 0 || r.initial_state > pre {
                    return Err(bad("ratings.initial_state", format!("must be a pre-default rating in 1..={pre}")));
                }
                if s.kind == SchemeKind::MultipleDefaults {
                    match s.loss {
                        Some(l) if (0.0..=1.0).contains(&l) => {}
                        Some(_) => return Err(bad("scheme.loss", "must lie in [0,1]")),
                        None => return Err(bad("scheme.loss", "multiple defaults need a loss fraction")),
                    }
                    if r.default_column == DefaultColumn::Given && r.gamma.as_ref().map(Vec::len) != Some(pre) {
                        return Err(bad("ratings.gamma", format!("`given` needs {pre} Cox intensities")));
                    }
                } else {
                    if s.loss.is_some() {
                        return Err(bad("scheme.loss", "only used by multiple defaults"));
                    }
                    if r.deltas.len() != pre {
                        return Err(bad("ratings.deltas", format!("need {pre} recovery rates, got {}", r.deltas.len())));
                    }
                    if let Some(i) = r.deltas.iter().position(|d| !(0.0..=1.0).contains(d)) {
                        return Err(bad(format!("ratings.deltas[{i}]"), "must lie in [0,1]"));
                    }
                    if r.gamma.is_some() {
                        return Err(bad("ratings.gamma", "only used by multiple defaults"));
                    }
                }
            }
        }
        let dt = self.grid.t_star / n as f64;
        let on_grid = |t: f64| {
            let x = t / dt;
            (x - x.round()).abs() <= 1e-9 * n as f64 && x.round() >= 0.0 && x.round() <= n as f64
        };
        if !on_grid(self.mc.maturity) {
            return Err(bad("mc.maturity", "must be a grid node"));
        }
        for (c, t) in self.mc.checkpoints.iter().enumerate() {
            if !on_grid(*t) || *t > self.mc.maturity + 1e-12 {
                return Err(bad(format!("mc.checkpoints[{c}]"), "must be a grid node no later than the maturity"));
            }
        }
        if self.mc.checkpoints.is_empty() {
            return Err(bad("mc.checkpoints", "need at least one checkpoint"));
        }
        if self.mc.n_paths < 2 {
            return Err(bad("mc.n_paths", "need at least two paths"));
        }
        if !(self.mc.z_threshold > 0.0) {
            return Err(bad("mc.z_threshold", "must be positive"));
        }
        if self.output.formats.is_empty() {
            return Err(bad("output.formats", "need at least one format"));
        }
        Ok(())
    }

    /// Build the engine objects.
    pub fn build(&self) -> Result<Built> {
        self.validate()?;
        let grid = TimeGrid::new(self.grid.t_star, self.grid.n_steps)?;
        let drivers = self
            .drivers
            .iter()
            .enumerate()
            .map(|(m, d)| {
                let cov = match &d.q {
                    CovarianceSpec::Diag(v) => DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(v)),
                    CovarianceSpec::Dense(rows) => matrix(rows, d.dim, &format!("drivers[{m}].Q.dense"))?,
                };
                let atoms = d.atoms.iter().map(|a| Atom { jump: a.y.clone(), rate: a.rho }).collect();
                LevyModel::new(d.a.clone(), cov, atoms).map_err(|e| bad(format!("drivers[{m}]"), e))
            })
            .collect::<Result<Vec<_>>>()?;
        let curve = |c: &InitialCurve, v: &VolSpec, at: &str, vat: &str| -> Result<CurveSpec> {
            let initial = c.sample(&grid).map_err(|e| bad(at, e))?;
            let vol = match &v.shape {
                VolShape::Exponential { level, decay } => VolatilitySurface::exponential(&grid, level, *decay),
                VolShape::Constant(s) => VolatilitySurface::constant(&grid, s),
            }
            .map_err(|e| bad(vat, e))?;
            Ok(CurveSpec { initial, vol, driver: v.driver })
        };
        let riskfree = curve(&self.curves.f0, &self.vols.f, "curves.f0", "vols.f")?;
        let ratings = match (&self.ratings, &self.scheme) {
            (Some(r), Some(s)) => Some(self.build_ratings(r, s, &curve)?),
            _ => None,
        };
        let theta = grid.index_of(self.mc.maturity).expect("validated");
        let checkpoints = self.mc.checkpoints.iter().map(|t| grid.index_of(*t).expect("validated")).collect();
        let mut model = MarketModel::new(grid, drivers, riskfree, ratings)?;
        if let Some(p) = &self.perturbation {
            model = model.with_perturbation(Perturbation {
                riskfree_drift: p.riskfree_drift,
                defaultable_drift: p.defaultable_drift,
                default_intensity: p.default_intensity,
            });
        }
        Ok(Built { model, theta, checkpoints })
    }

    fn build_ratings(
        &self,
        r: &RatingsSpec,
        s: &SchemeSpec,
        curve: &dyn Fn(&InitialCurve, &VolSpec, &str, &str) -> Result<CurveSpec>,
    ) -> Result<RatingSetup> {
        let pre = r.k - 1;
        let absorbing = s.kind.absorbing();
        let states = if absorbing { r.k } else { pre };
        let scheme = match s.kind {
            SchemeKind::MultipleDefaults => RecoveryScheme::multiple_defaults(s.loss.expect("validated")),
            kind => RecoveryScheme::new(kind, r.deltas.clone()),
        }
        .map_err(|e| bad("scheme", e))?;
        let migration: Box<dyn IntensityProcess> = match &r.lambda {
            LambdaSpec::Constant(rows) => {
                let m = matrix(rows, states, "ratings.lambda.constant")?;
                Box::new(ConstantIntensity::new(m, absorbing).map_err(|e| bad("ratings.lambda.constant", e))?)
            }
            LambdaSpec::Piecewise { starts, matrices } => {
                let mats = matrices
                    .iter()
                    .enumerate()
                    .map(|(p, rows)| matrix(rows, states, &format!("ratings.lambda.piecewise.matrices[{p}]")))
                    .collect::<Result<Vec<_>>>()?;
                Box::new(
                    PiecewiseIntensity::new(starts.clone(), mats, absorbing)
                        .map_err(|e| bad("ratings.lambda.piecewise", e))?,
                )
            }
        };
        let default_intensity = match r.default_column {
            DefaultColumn::H1 => DefaultIntensity::H1,
            DefaultColumn::Given => DefaultIntensity::Given(r.gamma.clone().unwrap_or_default()),
        };
        let curves = (0..pre)
            .map(|i| {
                curve(
                    &self.curves.g0[i],
                    &self.vols.g[i],
                    &format!("curves.g0[{i}]"),
                    &format!("vols.g[{i}]"),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(RatingSetup {
            scheme,
            curves,
            migration,
            default_intensity,
            initial_state: r.initial_state - 1,
        })
    }
}
