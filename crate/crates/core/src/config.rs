//! Experiment configuration: a flat key-value text format with dotted
//! sections, schema validation (unknown keys are rejected), and the named
//! presets for the benchmark experiments.
//!
//! ```text
//! # comment
//! seed = 1
//! model.drift = ou            # ou | affine
//! model.mu = 1.5              # ou mean-reversion rate
//! model.kappa = 0.8           # comma-separated for d > 1
//! model.v0 = 0
//! grid.h = 0.01
//! grid.T = 1
//! driver.kind = example1      # log | exp | power | example1 | example2
//! train.solver = gebsde       # gebsde | laebsde
//! estimator.method = ratio    # ratio | linear-exp | cole-hopf
//! output.dir = out
//! ```

use crate::drivers::{ConvexSet, Driver, DriverKind, RiskPremium};
use crate::ergodic_cost::LambdaMethod;
use crate::oracles::{example1_solution, example2_solution, OracleSolution};
use crate::sde::{FactorModel, TimeGrid};
use crate::solvers::SolverConfig;
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected 'key = value', got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("unknown key {0:?}")]
    UnknownKey(String),
    #[error("missing key {0:?}")]
    MissingKey(String),
    #[error("bad value for {key}: {reason}")]
    BadValue { key: String, reason: String },
    #[error("invalid combination: {0}")]
    Incompatible(String),
    #[error(transparent)]
    Sde(#[from] crate::sde::SdeError),
    #[error(transparent)]
    Driver(#[from] crate::drivers::DriverError),
}

const KNOWN_KEYS: &[&str] = &[
    "seed",
    "model.drift",
    "model.mu",
    "model.a",
    "model.b",
    "model.kappa",
    "model.v0",
    "grid.h",
    "grid.T",
    "grid.max_steps",
    "driver.kind",
    "driver.delta",
    "driver.gamma",
    "driver.theta",
    "driver.b",
    "driver.theta_const",
    "driver.constraint",
    "driver.box_lo",
    "driver.box_hi",
    "driver.axis_free",
    "driver.C_v",
    "train.solver",
    "train.batch",
    "train.steps",
    "train.lr",
    "train.seed",
    "train.resample",
    "train.y0",
    "train.eval_every",
    "train.truncate_z",
    "train.lr_decay",
    "estimator.method",
    "estimator.M",
    "estimator.reps",
    "table.h_list",
    "table.m_list",
    "utility.x0",
    "utility.x_min",
    "utility.x_max",
    "utility.x_steps",
    "output.dir",
];

/// A validated experiment configuration.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    map: BTreeMap<String, String>,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut map = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| ConfigError::Syntax { line: idx + 1, text: raw.into() })?;
            let key = key.trim().to_string();
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(ConfigError::UnknownKey(key));
            }
            map.insert(key, value.trim().to_string());
        }
        let cfg = ExperimentConfig { map };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::BadValue {
            key: path.display().to_string(),
            reason: e.to_string(),
        })?;
        Self::parse(&text)
    }

    /// Builds every derived object once, surfacing inconsistencies early.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model()?;
        self.grid()?;
        if self.map.contains_key("driver.kind") {
            let drv = self.driver()?;
            if self.map.contains_key("estimator.method") {
                self.estimator_method(&drv)?;
            }
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        if !KNOWN_KEYS.contains(&key) {
            return Err(ConfigError::UnknownKey(key.into()));
        }
        self.map.insert(key.into(), value.into());
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(String::as_str)
    }

    /// Canonical text: sorted `key = value` lines. Hashing this pins the
    /// effective configuration, including overrides. The output directory
    /// is left out: where results land is not part of the experiment.
    pub fn canonical(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.map {
            if k == "output.dir" {
                continue;
            }
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(v);
            out.push('\n');
        }
        out
    }

    fn required(&self, key: &str) -> Result<&str, ConfigError> {
        self.get(key).ok_or_else(|| ConfigError::MissingKey(key.into()))
    }

    fn f64_at(&self, key: &str) -> Result<f64, ConfigError> {
        self.required(key)?.parse().map_err(|_| ConfigError::BadValue {
            key: key.into(),
            reason: format!("{:?} is not a number", self.get(key).unwrap()),
        })
    }

    fn f64_or(&self, key: &str, default: f64) -> Result<f64, ConfigError> {
        match self.get(key) {
            Some(_) => self.f64_at(key),
            None => Ok(default),
        }
    }

    fn usize_or(&self, key: &str, default: usize) -> Result<usize, ConfigError> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| ConfigError::BadValue {
                key: key.into(),
                reason: format!("{v:?} is not a count"),
            }),
        }
    }

    fn bool_or(&self, key: &str, default: bool) -> Result<bool, ConfigError> {
        match self.get(key) {
            None => Ok(default),
            Some("true") => Ok(true),
            Some("false") => Ok(false),
            Some(v) => Err(ConfigError::BadValue {
                key: key.into(),
                reason: format!("{v:?} is not true/false"),
            }),
        }
    }

    fn f64_list(&self, key: &str) -> Result<Vec<f64>, ConfigError> {
        self.required(key)?
            .split(',')
            .map(|s| {
                s.trim().parse().map_err(|_| ConfigError::BadValue {
                    key: key.into(),
                    reason: format!("{s:?} is not a number"),
                })
            })
            .collect()
    }

    pub fn seed(&self) -> u64 {
        self.get("seed").and_then(|s| s.parse().ok()).unwrap_or(0)
    }

    pub fn out_dir(&self) -> std::path::PathBuf {
        if let Ok(dir) = std::env::var("EBSDE_OUT_DIR") {
            return dir.into();
        }
        self.get("output.dir").unwrap_or("out").into()
    }

    pub fn model(&self) -> Result<FactorModel, ConfigError> {
        let kappa = self.f64_list("model.kappa")?;
        let v0 = self.f64_at("model.v0")?;
        match self.required("model.drift")? {
            "ou" => Ok(FactorModel::ou(self.f64_at("model.mu")?, kappa, v0)?),
            "affine" => {
                Ok(FactorModel::affine(self.f64_at("model.a")?, self.f64_at("model.b")?, kappa, v0)?)
            }
            other => Err(ConfigError::BadValue {
                key: "model.drift".into(),
                reason: format!("{other:?} is not ou/affine"),
            }),
        }
    }

    pub fn grid(&self) -> Result<TimeGrid, ConfigError> {
        let grid = TimeGrid::new(self.f64_at("grid.h")?, self.f64_at("grid.T")?)?;
        match self.get("grid.max_steps") {
            Some(_) => Ok(grid.with_max_steps(self.usize_or("grid.max_steps", 0)?)?),
            None => Ok(grid),
        }
    }

    fn constraint(&self, dims: usize) -> Result<ConvexSet, ConfigError> {
        match self.get("driver.constraint").unwrap_or("full") {
            "full" => Ok(ConvexSet::Full),
            "box" => Ok(ConvexSet::Box {
                lo: self.f64_list("driver.box_lo")?,
                hi: self.f64_list("driver.box_hi")?,
            }),
            "axis" => {
                let free = self
                    .required("driver.axis_free")?
                    .split(',')
                    .map(|s| {
                        s.trim().parse::<usize>().map_err(|_| ConfigError::BadValue {
                            key: "driver.axis_free".into(),
                            reason: format!("{s:?} is not an index"),
                        })
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                if free.iter().any(|&i| i >= dims) {
                    return Err(ConfigError::BadValue {
                        key: "driver.axis_free".into(),
                        reason: format!("index out of range for d = {dims}"),
                    });
                }
                Ok(ConvexSet::AxisSubspace { free })
            }
            other => Err(ConfigError::BadValue {
                key: "driver.constraint".into(),
                reason: format!("{other:?} is not full/box/axis"),
            }),
        }
    }

    fn risk_premium(&self) -> Result<RiskPremium, ConfigError> {
        if self.map.contains_key("driver.theta_const") {
            return Ok(RiskPremium::Constant(self.f64_list("driver.theta_const")?));
        }
        Ok(RiskPremium::TruncatedLinear {
            slope: self.f64_or("driver.theta", 0.0)?,
            bound: self.f64_or("driver.b", f64::INFINITY)?,
        })
    }

    pub fn driver(&self) -> Result<Driver, ConfigError> {
        let dims = self.f64_list("model.kappa")?.len();
        let kind = match self.required("driver.kind")? {
            "log" => DriverKind::Log,
            "exp" => DriverKind::Exp { gamma: self.f64_at("driver.gamma")? },
            "power" => DriverKind::Power { delta: self.f64_at("driver.delta")? },
            "example1" => DriverKind::Example1 { c_v: self.f64_at("driver.C_v")? },
            "example2" => DriverKind::Example2 { c_v: self.f64_at("driver.C_v")? },
            other => {
                return Err(ConfigError::BadValue {
                    key: "driver.kind".into(),
                    reason: format!("{other:?} is not a driver kind"),
                })
            }
        };
        Ok(Driver::new(kind, self.constraint(dims)?, self.risk_premium()?, dims)?)
    }

    /// Closed-form solution for the benchmark drivers, when one exists.
    pub fn oracle(&self) -> Result<Option<OracleSolution>, ConfigError> {
        let model = self.model()?;
        Ok(match self.driver()?.kind {
            DriverKind::Example1 { c_v } => {
                Some(example1_solution(c_v, model.c_mu, model.kappa_norm()))
            }
            DriverKind::Example2 { c_v } => Some(example2_solution(c_v, model.kappa_norm())),
            _ => None,
        })
    }

    /// The pinned initial value: a number, or `oracle` for the benchmark
    /// drivers (the closed form evaluated at the starting point).
    pub fn y0(&self) -> Result<f64, ConfigError> {
        match self.get("train.y0").unwrap_or("0") {
            "oracle" => {
                let oracle = self.oracle()?.ok_or_else(|| {
                    ConfigError::Incompatible(
                        "train.y0 = oracle requires a benchmark driver".into(),
                    )
                })?;
                Ok(oracle.y(self.model()?.v0))
            }
            v => v.parse().map_err(|_| ConfigError::BadValue {
                key: "train.y0".into(),
                reason: format!("{v:?} is neither a number nor 'oracle'"),
            }),
        }
    }

    pub fn solver_config(&self) -> Result<SolverConfig, ConfigError> {
        let driver = self.driver()?;
        let model = self.model()?;
        let grid = self.grid()?;
        let batch = self.usize_or("train.batch", 64)?;
        let mut cfg = SolverConfig::new(driver, model, grid, batch);
        cfg.grad_steps = self.usize_or("train.steps", 10_000)?;
        cfg.lr = self.f64_or("train.lr", 3e-4)?;
        cfg.seed = match self.get("train.seed") {
            Some(s) => s.parse().map_err(|_| ConfigError::BadValue {
                key: "train.seed".into(),
                reason: "not an integer".into(),
            })?,
            None => self.seed(),
        };
        cfg.y0 = self.y0()?;
        cfg.eval_every = self.usize_or("train.eval_every", 500)?;
        cfg.eval_batch = 100 * batch;
        cfg.resample = self.bool_or("train.resample", false)?;
        cfg.truncate_z = self.bool_or("train.truncate_z", false)?;
        cfg.lr_decay = self.bool_or("train.lr_decay", false)?;
        Ok(cfg)
    }

    pub fn solver_kind(&self) -> Result<&str, ConfigError> {
        match self.get("train.solver").unwrap_or("gebsde") {
            k @ ("gebsde" | "laebsde") => Ok(k),
            other => Err(ConfigError::BadValue {
                key: "train.solver".into(),
                reason: format!("{other:?} is not gebsde/laebsde"),
            }),
        }
    }

    /// Estimator selection, validated against the driver.
    pub fn estimator_method(&self, drv: &Driver) -> Result<LambdaMethod, ConfigError> {
        match self.required("estimator.method")? {
            "ratio" => {
                if drv.depends_on_z() {
                    return Err(ConfigError::Incompatible(
                        "the ratio estimator requires a z-free driver (log or a benchmark)".into(),
                    ));
                }
                Ok(LambdaMethod::Ratio { driver: drv.clone() })
            }
            "linear-exp" => {
                if drv.constraint != ConvexSet::Full {
                    return Err(ConfigError::Incompatible(
                        "the linear representation holds without portfolio constraints".into(),
                    ));
                }
                Ok(LambdaMethod::LinearExp { theta: drv.theta.clone(), y0: self.y0()? })
            }
            "cole-hopf" => match drv.kind {
                DriverKind::Power { delta } => {
                    if drv.constraint != ConvexSet::Full {
                        return Err(ConfigError::Incompatible(
                            "the Cole-Hopf transform requires an unconstrained power driver"
                                .into(),
                        ));
                    }
                    Ok(LambdaMethod::ColeHopfPower {
                        delta,
                        theta: drv.theta.clone(),
                        k_bound: drv.sup_f0(),
                    })
                }
                _ => Err(ConfigError::Incompatible(
                    "the Cole-Hopf estimator applies to the power driver".into(),
                )),
            },
            other => Err(ConfigError::BadValue {
                key: "estimator.method".into(),
                reason: format!("{other:?} is not ratio/linear-exp/cole-hopf"),
            }),
        }
    }

    pub fn estimator_m(&self) -> Result<usize, ConfigError> {
        self.usize_or("estimator.M", 10_000)
    }

    pub fn estimator_reps(&self) -> Result<usize, ConfigError> {
        self.usize_or("estimator.reps", 10)
    }

    pub fn table_h_list(&self) -> Result<Vec<f64>, ConfigError> {
        match self.get("table.h_list") {
            Some(_) => self.f64_list("table.h_list"),
            None => Ok(vec![0.05, 0.02, 0.01]),
        }
    }

    pub fn table_m_list(&self) -> Result<Vec<usize>, ConfigError> {
        match self.get("table.m_list") {
            None => Ok(vec![1_000, 10_000, 100_000]),
            Some(v) => v
                .split(',')
                .map(|s| {
                    s.trim().parse().map_err(|_| ConfigError::BadValue {
                        key: "table.m_list".into(),
                        reason: format!("{s:?} is not a count"),
                    })
                })
                .collect(),
        }
    }

    pub fn x_grid(&self) -> Result<Vec<f64>, ConfigError> {
        let lo = self.f64_or("utility.x_min", 0.25)?;
        let hi = self.f64_or("utility.x_max", 10.0)?;
        let n = self.usize_or("utility.x_steps", 40)?;
        Ok((0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1).max(1) as f64).collect())
    }

    pub fn x0(&self) -> Result<f64, ConfigError> {
        self.f64_or("utility.x0", 1.0)
    }
}

/// Named presets matching the reported experiments.
pub fn preset(name: &str) -> Option<&'static str> {
    Some(match name {
        // Benchmark one, training setup.
        "example1" => {
            "seed = 1\n\
             model.drift = ou\n\
             model.mu = 1.5\n\
             model.kappa = 0.8\n\
             model.v0 = 0\n\
             grid.h = 0.01\n\
             grid.T = 1\n\
             driver.kind = example1\n\
             driver.C_v = 1\n\
             train.solver = gebsde\n\
             train.batch = 64\n\
             train.steps = 10000\n\
             train.lr = 0.0003\n\
             train.y0 = oracle\n\
             estimator.method = ratio\n\
             estimator.M = 100000\n\
             estimator.reps = 10\n\
             output.dir = out/example1\n"
        }
        // Benchmark two, training setup (mu = kappa^2/2).
        "example2" => {
            "seed = 1\n\
             model.drift = ou\n\
             model.mu = 1\n\
             model.kappa = 1.4142135623730951\n\
             model.v0 = 0\n\
             grid.h = 0.01\n\
             grid.T = 1\n\
             driver.kind = example2\n\
             driver.C_v = 0.75\n\
             train.solver = gebsde\n\
             train.batch = 64\n\
             train.steps = 10000\n\
             train.lr = 0.0003\n\
             train.y0 = oracle\n\
             estimator.method = ratio\n\
             estimator.M = 100000\n\
             estimator.reps = 10\n\
             output.dir = out/example2\n"
        }
        // Monte Carlo table parameters for the benchmarks.
        "example1-mc" => {
            "seed = 1\n\
             model.drift = ou\n\
             model.mu = 2\n\
             model.kappa = 2\n\
             model.v0 = 0.5\n\
             grid.h = 0.01\n\
             grid.T = 1\n\
             driver.kind = example1\n\
             driver.C_v = 1\n\
             train.y0 = oracle\n\
             estimator.method = ratio\n\
             estimator.M = 100000\n\
             estimator.reps = 100\n\
             table.h_list = 0.05,0.02,0.01\n\
             table.m_list = 1000,10000,100000\n\
             output.dir = out/example1-mc\n"
        }
        "example2-mc" => {
            "seed = 1\n\
             model.drift = ou\n\
             model.mu = 2\n\
             model.kappa = 2\n\
             model.v0 = 0.5\n\
             grid.h = 0.01\n\
             grid.T = 1\n\
             driver.kind = example2\n\
             driver.C_v = 1\n\
             train.y0 = oracle\n\
             estimator.method = ratio\n\
             estimator.M = 100000\n\
             estimator.reps = 100\n\
             table.h_list = 0.05,0.02,0.01\n\
             table.m_list = 1000,10000,100000\n\
             output.dir = out/example2-mc\n"
        }
        // Unconstrained power utility experiment.
        "power-5.3" => {
            "seed = 1\n\
             model.drift = ou\n\
             model.mu = 3\n\
             model.kappa = 1.3\n\
             model.v0 = 0\n\
             grid.h = 0.01\n\
             grid.T = 1\n\
             driver.kind = power\n\
             driver.delta = 0.5\n\
             driver.theta = 0.8\n\
             driver.b = 3\n\
             driver.constraint = full\n\
             train.solver = gebsde\n\
             train.batch = 64\n\
             train.steps = 10000\n\
             train.lr = 0.0007\n\
             train.y0 = 0\n\
             estimator.method = cole-hopf\n\
             estimator.M = 100000\n\
             estimator.reps = 10\n\
             table.h_list = 0.1,0.05,0.02,0.01\n\
             table.m_list = 1000,10000,100000\n\
             utility.x0 = 1\n\
             utility.x_min = 0.25\n\
             utility.x_max = 10\n\
             utility.x_steps = 40\n\
             output.dir = out/power-5.3\n"
        }
        // Constrained two-dimensional power setup: only the first Brownian
        // coordinate is tradable.
        "two-dim-5.3" => {
            "seed = 1\n\
             model.drift = ou\n\
             model.mu = 3\n\
             model.kappa = 1.2,0.5\n\
             model.v0 = 0\n\
             grid.h = 0.01\n\
             grid.T = 1\n\
             driver.kind = power\n\
             driver.delta = 0.5\n\
             driver.theta = 0.8\n\
             driver.b = 3\n\
             driver.constraint = axis\n\
             driver.axis_free = 0\n\
             train.solver = gebsde\n\
             train.batch = 64\n\
             train.steps = 10000\n\
             train.lr = 0.0007\n\
             train.y0 = 0\n\
             utility.x0 = 1\n\
             utility.x_min = 0.25\n\
             utility.x_max = 10\n\
             utility.x_steps = 40\n\
             output.dir = out/two-dim-5.3\n"
        }
        _ => return None,
    })
}

pub fn preset_names() -> &'static [&'static str] {
    &["example1", "example2", "example1-mc", "example2-mc", "power-5.3", "two-dim-5.3"]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_parse_and_validate() {
        for name in preset_names() {
            let cfg = ExperimentConfig::parse(preset(name).unwrap())
                .unwrap_or_else(|e| panic!("preset {name}: {e}"));
            cfg.model().unwrap();
            cfg.grid().unwrap();
            cfg.driver().unwrap();
        }
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = ExperimentConfig::parse("model.nope = 3\n").unwrap_err();
        assert!(matches!(err, ConfigError::UnknownKey(_)));
    }

    #[test]
    fn syntax_errors_carry_line_numbers() {
        let err = ExperimentConfig::parse("model.drift = ou\nbroken line\n").unwrap_err();
        match err {
            ConfigError::Syntax { line, .. } => assert_eq!(line, 2),
            other => panic!("{other}"),
        }
    }

    #[test]
    fn bad_h_is_rejected() {
        let mut cfg = ExperimentConfig::parse(preset("example1").unwrap()).unwrap();
        cfg.set("grid.h", "-0.5").unwrap();
        assert!(cfg.grid().is_err());
    }

    #[test]
    fn ratio_with_power_driver_is_invalid_combination() {
        let mut cfg = ExperimentConfig::parse(preset("power-5.3").unwrap()).unwrap();
        cfg.set("estimator.method", "ratio").unwrap();
        let drv = cfg.driver().unwrap();
        assert!(matches!(cfg.estimator_method(&drv), Err(ConfigError::Incompatible(_))));
    }

    #[test]
    fn oracle_y0_resolves_for_benchmarks() {
        let cfg = ExperimentConfig::parse(preset("example1").unwrap()).unwrap();
        assert!((cfg.y0().unwrap() - 0.6886341).abs() < 1e-6);
        let cfg = ExperimentConfig::parse(preset("example2").unwrap()).unwrap();
        assert_eq!(cfg.y0().unwrap(), 0.0);
    }

    #[test]
    fn canonical_text_is_sorted_and_stable() {
        let a = ExperimentConfig::parse("grid.h = 0.01\ngrid.T = 1\nmodel.drift = ou\nmodel.mu = 1\nmodel.kappa = 1\nmodel.v0 = 0\n").unwrap();
        let b = ExperimentConfig::parse("model.v0 = 0\nmodel.kappa = 1\nmodel.mu = 1\nmodel.drift = ou\ngrid.T = 1\ngrid.h = 0.01\n").unwrap();
        assert_eq!(a.canonical(), b.canonical());
    }

    #[test]
    fn two_dim_preset_builds_axis_constraint() {
        let cfg = ExperimentConfig::parse(preset("two-dim-5.3").unwrap()).unwrap();
        let drv = cfg.driver().unwrap();
        assert_eq!(drv.dims, 2);
        assert_eq!(drv.constraint, ConvexSet::AxisSubspace { free: vec![0] });
        // theta embeds into the first coordinate.
        assert_eq!(drv.theta_at(1.0), vec![0.8, 0.0]);
    }
}
