//! Run configurations: read from an optional TOML file, overridden by flags,
//! and echoed into the output directory.

use std::path::Path;

use anyhow::{bail, Context, Result};
use befa::effects::{FactorPrior, UniquenessPrior};
use befa::gibbs::{ModelSpec, SamplerConfig};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UniquenessChoice {
    Gamma,
    SqrtUniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub k: usize,
    pub chains: usize,
    pub seed: u64,
    pub adapt: usize,
    pub iters: usize,
    pub burn: usize,
    pub thin: usize,
    pub rho_step: f64,
    pub tau_step: f64,
    pub target_acceptance: f64,
    pub uniqueness_prior: UniquenessChoice,
    /// Upper bound A of √u ~ Uniform(0, A).
    pub sqrt_uniform_upper: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            k: 2,
            chains: 5,
            seed: 1,
            adapt: 1000,
            iters: 80_000,
            burn: 50_000,
            thin: 1,
            rho_step: 0.2,
            tau_step: 0.5,
            target_acceptance: 0.44,
            uniqueness_prior: UniquenessChoice::Gamma,
            sqrt_uniform_upper: 10.0,
        }
    }
}

impl FitConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(FitConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))
            }
        }
    }

    pub fn model_spec(&self) -> ModelSpec {
        let mut spec = ModelSpec::new(self.k);
        if self.uniqueness_prior == UniquenessChoice::SqrtUniform {
            spec.prior = FactorPrior {
                uniqueness: UniquenessPrior::SqrtUniform {
                    upper: self.sqrt_uniform_upper,
                },
                ..spec.prior
            };
        }
        spec
    }

    pub fn sampler_config(&self) -> Result<SamplerConfig> {
        if self.chains == 0 {
            bail!("chains must be at least 1");
        }
        let mut cfg = SamplerConfig::new(self.chains, self.seed);
        cfg.n_adapt = self.adapt;
        cfg.n_iter = self.iters;
        cfg.n_burn = self.burn;
        cfg.thin = self.thin;
        cfg.rho_step = self.rho_step;
        cfg.tau_step = self.tau_step;
        cfg.target_acceptance = self.target_acceptance;
        cfg.validate()?;
        Ok(cfg)
    }
}
