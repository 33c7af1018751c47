//! Experiment configuration read from a flat TOML file.
//!
//! Top-level keys describe the data and the run, one `[methods.<name>]`
//! table per optimizer:
//!
//! ```toml
//! seed = 42
//! n = 10
//! d = 50
//! steps = 2000
//!
//! [methods.GD]
//! family = "identity"
//! eta_scale = 1.0
//!
//! [methods.AM1]
//! family = "diag-adagrad"
//! window = "unbounded"
//! eta = 0.5
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use precond_core::experiments::{
    DecisionRule, GaussianRegressionSpec, Init, MarginExperimentConfig, Method, StepSize, TableExperimentConfig,
};
use precond_core::precond::{Family, PreconditionerConfig, Window};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const SEED_ENV: &str = "PRECOND_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub n: usize,
    pub d: usize,
    pub noise: f64,
    pub lambda: f64,
    pub steps: usize,
    pub runs: usize,
    pub test_size: usize,
    /// `"zero"` or `"gaussian"`.
    pub init: String,
    pub init_scale: f64,
    pub early_stop: Option<f64>,
    /// Row-major CSV files replacing the generated Gaussian instance.
    pub data_x: Option<PathBuf>,
    pub data_y: Option<PathBuf>,

    pub level: f64,
    pub positive_prob: f64,
    /// `"first-three"` or `"full-sign"`.
    pub rule: String,

    pub etas: Vec<f64>,
    pub momenta: Vec<f64>,

    pub methods: BTreeMap<String, MethodConfig>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n: 10,
            d: 50,
            noise: 1.0,
            lambda: 0.0,
            steps: 2000,
            runs: 5,
            test_size: 10_000,
            init: "zero".into(),
            init_scale: 1.0,
            early_stop: None,
            data_x: None,
            data_y: None,
            level: 1.0 / 32.0,
            positive_prob: 7.0 / 8.0,
            rule: "first-three".into(),
            etas: precond_core::experiments::DEFAULT_STEP_GRID.to_vec(),
            momenta: precond_core::experiments::DEFAULT_MOMENTUM_GRID.to_vec(),
            methods: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodConfig {
    pub family: String,
    /// Fixed step size. Takes precedence over `eta_scale`.
    pub eta: Option<f64>,
    /// Step size `eta_scale / (sigma_max^2 + lambda)`.
    pub eta_scale: Option<f64>,
    pub epsilon: Option<f64>,
    /// A positive integer or `"unbounded"`.
    pub window: Option<String>,
    pub momentum: Option<f64>,
    pub rho: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
}

impl MethodConfig {
    pub fn to_method(&self, name: &str) -> Result<Method> {
        let family: Family = self.family.parse().map_err(|_| {
            let known: Vec<&str> = Family::ALL.iter().map(|f| f.name()).collect();
            anyhow::anyhow!("method {name}: unknown family `{}` (expected one of {})", self.family, known.join(", "))
        })?;
        let mut cfg = PreconditionerConfig::new(family);
        if let Some(e) = self.epsilon {
            cfg.epsilon = e;
        }
        if let Some(w) = &self.window {
            cfg.window = w.parse::<Window>().map_err(|e| anyhow::anyhow!("method {name}: {e}"))?;
        }
        if let Some(v) = self.rho {
            cfg.rho = v;
        }
        if let Some(v) = self.beta1 {
            cfg.beta1 = v;
        }
        if let Some(v) = self.beta2 {
            cfg.beta2 = v;
        }
        cfg.validate().map_err(|e| anyhow::anyhow!("method {name}: {e}"))?;
        let step = match (self.eta, self.eta_scale) {
            (Some(eta), _) if eta > 0.0 => StepSize::Fixed(eta),
            (None, Some(scale)) if scale > 0.0 => StepSize::InverseCurvature(scale),
            (None, None) => StepSize::InverseCurvature(1.0),
            _ => bail!("method {name}: step sizes must be positive"),
        };
        let mut method = Method::new(name, cfg, step);
        method.momentum = self.momentum.unwrap_or(0.0);
        if !(0.0..1.0).contains(&method.momentum) {
            bail!("method {name}: momentum must lie in [0, 1)");
        }
        Ok(method)
    }
}

impl RunConfig {
    /// Reads `path`, or returns the defaults when no path is given.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: RunConfig = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        // Data paths are relative to the config file.
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.data_x, &mut cfg.data_y].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// Applies the seed overrides: command line first, then the
    /// environment, then the file.
    pub fn apply_seed(&mut self, flag: Option<u64>) -> Result<()> {
        if let Some(seed) = flag {
            self.seed = seed;
        } else if let Ok(raw) = std::env::var(SEED_ENV) {
            self.seed = raw.trim().parse().with_context(|| format!("{SEED_ENV}={raw} is not a u64"))?;
        }
        Ok(())
    }

    /// SHA-256 of the configuration in canonical TOML form followed by
    /// `extra`, which carries any settings given on the command line.
    pub fn hash_with(&self, extra: &str) -> String {
        let canonical = toml::to_string(self).unwrap_or_else(|_| format!("{self:?}"));
        let mut h = Sha256::new();
        h.update(canonical.as_bytes());
        h.update(b"\n");
        h.update(extra.as_bytes());
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn methods(&self) -> Result<Vec<Method>> {
        self.methods.iter().map(|(name, m)| m.to_method(name)).collect()
    }

    /// Configured methods, or `defaults` when the file lists none.
    pub fn methods_or(&self, defaults: Vec<Method>) -> Result<Vec<Method>> {
        if self.methods.is_empty() {
            Ok(defaults)
        } else {
            self.methods()
        }
    }

    pub fn gaussian_spec(&self) -> Result<GaussianRegressionSpec> {
        if self.n == 0 || self.d == 0 {
            bail!("n and d must be positive");
        }
        if !(self.noise >= 0.0) {
            bail!("noise must be nonnegative");
        }
        Ok(GaussianRegressionSpec { n: self.n, d: self.d, noise_scale: self.noise, seed: self.seed })
    }

    pub fn init(&self) -> Result<Init> {
        match self.init.as_str() {
            "zero" => Ok(Init::Zero),
            "gaussian" => Ok(Init::Gaussian { scale: self.init_scale }),
            other => bail!("init must be `zero` or `gaussian`, got `{other}`"),
        }
    }

    pub fn rule(&self) -> Result<DecisionRule> {
        match self.rule.as_str() {
            "first-three" => Ok(DecisionRule::FirstThreeFeatures),
            "full-sign" => Ok(DecisionRule::FullSignRule),
            other => bail!("rule must be `first-three` or `full-sign`, got `{other}`"),
        }
    }

    fn check_run(&self) -> Result<()> {
        if self.steps == 0 {
            bail!("steps must be at least 1");
        }
        if !(self.lambda >= 0.0) {
            bail!("lambda must be nonnegative");
        }
        Ok(())
    }

    pub fn table_experiment(&self) -> Result<TableExperimentConfig> {
        self.check_run()?;
        Ok(TableExperimentConfig {
            methods: self.methods_or(TableExperimentConfig::standard_methods())?,
            spec: self.gaussian_spec()?,
            lambda: self.lambda,
            steps: self.steps,
            runs: self.runs.max(1),
            test_size: self.test_size,
            init: self.init()?,
            early_stop: self.early_stop,
        })
    }

    pub fn margin_experiment(&self) -> Result<MarginExperimentConfig> {
        self.check_run()?;
        Ok(MarginExperimentConfig {
            methods: self.methods_or(MarginExperimentConfig::standard_methods())?,
            n: self.n,
            level: self.level,
            positive_prob: self.positive_prob,
            seed: self.seed,
            realizations: self.runs.max(1),
            steps: self.steps,
            test_size: self.test_size.max(1),
            rule: self.rule()?,
        })
    }

    pub fn validate_run(&self) -> Result<()> {
        self.check_run()
    }
}
