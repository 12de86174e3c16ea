//! Metropolis-within-Gibbs sampler for the joint ordinal/effects/factor
//! model, with multi-chain orchestration.

mod layout;
mod sweep;

use std::time::Instant;

use rayon::prelude::*;

pub use layout::{ObsLayout, Observation};
pub use sweep::ChainState;

use crate::archive::{ArchiveMeta, Draw, DrawArchive};
use crate::data::RatingDataset;
use crate::effects::FactorPrior;
use crate::error::{BefaError, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelSpec {
    pub k: usize,
    pub prior: FactorPrior,
}

impl ModelSpec {
    pub fn new(k: usize) -> Self {
        ModelSpec {
            k,
            prior: FactorPrior::default(),
        }
    }
}

/// Blocks held fixed at their current value. Used by oracle checks that
/// need a sub-model with a closed-form posterior.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Freeze {
    pub latent: bool,
    pub cutpoints: bool,
    /// Section, lesson, rater and rater-by-lesson effects and precisions.
    pub nuisance: bool,
    pub uniqueness: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    pub n_adapt: usize,
    pub n_iter: usize,
    pub n_burn: usize,
    pub thin: usize,
    /// One seed per chain.
    pub seeds: Vec<u64>,
    pub rho_step: f64,
    pub tau_step: f64,
    pub target_acceptance: f64,
    pub freeze: Freeze,
}

impl SamplerConfig {
    /// `n_chains` chains seeded `seed, seed + 1, ...`.
    pub fn new(n_chains: usize, seed: u64) -> Self {
        SamplerConfig {
            n_adapt: 1000,
            n_iter: 80_000,
            n_burn: 50_000,
            thin: 1,
            seeds: (0..n_chains as u64).map(|c| seed.wrapping_add(c)).collect(),
            rho_step: 0.2,
            tau_step: 0.5,
            target_acceptance: 0.44,
            freeze: Freeze::default(),
        }
    }

    pub fn n_chains(&self) -> usize {
        self.seeds.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_burn >= self.n_iter {
            return Err(BefaError::Config(format!(
                "n_burn ({}) must be below n_iter ({})",
                self.n_burn, self.n_iter
            )));
        }
        if self.thin == 0 {
            return Err(BefaError::Config("thin must be at least 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(BefaError::Config("at least one chain is required".into()));
        }
        if !(self.rho_step > 0.0 && self.tau_step > 0.0) {
            return Err(BefaError::Config("initial step sizes must be positive".into()));
        }
        if !(self.target_acceptance > 0.0 && self.target_acceptance < 1.0) {
            return Err(BefaError::Config("target acceptance must lie in (0, 1)".into()));
        }
        Ok(())
    }

    /// Whether main-phase iteration `i` (0-based) is retained.
    pub fn keeps(&self, i: usize) -> bool {
        i >= self.n_burn && (i - self.n_burn + 1).is_multiple_of(self.thin)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChainReport {
    pub chain: usize,
    pub seed: u64,
    /// Post-adaptation acceptance rate of the ρ updates, averaged per dimension.
    pub rho_acceptance: Vec<f64>,
    pub tau_acceptance: Vec<f64>,
    pub adapt_seconds: f64,
    pub sample_seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunReport {
    pub chains: Vec<ChainReport>,
    /// (dimension label, level, count) for levels observed fewer than five times.
    pub sparse_levels: Vec<(String, usize, usize)>,
}

impl RunReport {
    pub fn render(&self) -> String {
        let mut out = String::from("chain,seed,mean_rho_acceptance,mean_tau_acceptance,adapt_seconds,sample_seconds\n");
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
        for c in &self.chains {
            out.push_str(&format!(
                "{},{},{:.4},{:.4},{:.3},{:.3}\n",
                c.chain,
                c.seed,
                mean(&c.rho_acceptance),
                mean(&c.tau_acceptance),
                c.adapt_seconds,
                c.sample_seconds
            ));
        }
        out
    }
}

/// Everything that stays fixed while a chain runs.
pub struct Sampler<'a> {
    pub ds: &'a RatingDataset,
    pub layout: ObsLayout,
    pub spec: ModelSpec,
    pub freeze: Freeze,
}

impl<'a> Sampler<'a> {
    pub fn new(ds: &'a RatingDataset, spec: ModelSpec, freeze: Freeze) -> Self {
        Sampler {
            ds,
            layout: ObsLayout::new(ds),
            spec,
            freeze,
        }
    }

    fn run_chain(&self, cfg: &SamplerConfig, chain: usize) -> Result<(Vec<Draw>, ChainReport)> {
        let seed = cfg.seeds[chain];
        let abort = |state: &ChainState, e: BefaError| BefaError::ChainAbort {
            chain,
            iteration: state.iteration,
            message: format!("{e}; {}", state.diagnostic()),
        };
        let mut state = self.initial_state(seed, cfg.rho_step, cfg.tau_step)?;
        state.target_acceptance = cfg.target_acceptance;

        let t0 = Instant::now();
        state.adapting = true;
        for _ in 0..cfg.n_adapt {
            if let Err(e) = self.sweep(&mut state) {
                return Err(abort(&state, e));
            }
        }
        state.adapting = false;
        state.reset_counters();
        let adapt_seconds = t0.elapsed().as_secs_f64();

        let t1 = Instant::now();
        let mut draws = Vec::with_capacity((cfg.n_iter - cfg.n_burn) / cfg.thin);
        for i in 0..cfg.n_iter {
            if let Err(e) = self.sweep(&mut state) {
                return Err(abort(&state, e));
            }
            if cfg.keeps(i) {
                match self.draw(&state, chain, i) {
                    Ok(d) => draws.push(d),
                    Err(e) => return Err(abort(&state, e)),
                }
            }
        }
        let (rho_acceptance, tau_acceptance) = state.acceptance_rates();
        Ok((
            draws,
            ChainReport {
                chain,
                seed,
                rho_acceptance,
                tau_acceptance,
                adapt_seconds,
                sample_seconds: t1.elapsed().as_secs_f64(),
            },
        ))
    }

    fn draw(&self, state: &ChainState, chain: usize, iter: usize) -> Result<Draw> {
        let (loadings, scores) = state.factors.identified_loadings()?;
        Ok(Draw {
            chain,
            iter,
            loadings,
            uniqueness: state.factors.uniqueness.clone(),
            scores,
            cutpoints: (0..self.layout.n_dims)
                .map(|g| state.cutpoints.gamma(g).to_vec())
                .collect(),
            variances: self.variance_summary(state)?,
            loglik: self.all_event_loglik(state),
        })
    }

    fn sparse_levels(&self) -> Vec<(String, usize, usize)> {
        let mut out = Vec::new();
        for (g, counts) in self.layout.level_counts().iter().enumerate() {
            for (l, &c) in counts.iter().enumerate() {
                if c < 5 {
                    out.push((self.ds.dim_label(g), l + 1, c));
                }
            }
        }
        out
    }
}

/// Run every chain of `cfg` and merge the retained draws.
pub fn run(ds: &RatingDataset, spec: &ModelSpec, cfg: &SamplerConfig) -> Result<(DrawArchive, RunReport)> {
    cfg.validate()?;
    let sampler = Sampler::new(ds, *spec, cfg.freeze);
    let results: Vec<Result<(Vec<Draw>, ChainReport)>> = (0..cfg.n_chains())
        .into_par_iter()
        .map(|c| sampler.run_chain(cfg, c))
        .collect();
    let mut draws = Vec::new();
    let mut chains = Vec::new();
    for r in results {
        let (d, rep) = r?;
        draws.extend(d);
        chains.push(rep);
    }
    let meta = ArchiveMeta {
        k: spec.k,
        dim_labels: ds.dim_labels(),
        levels: ds.dim_levels(),
        teacher_ids: ds.teachers().names().to_vec(),
        event_ids: ds.events().iter().map(|e| e.event_id.clone()).collect(),
        seeds: cfg.seeds.clone(),
        n_iter: cfg.n_iter,
        n_burn: cfg.n_burn,
        thin: cfg.thin,
    };
    Ok((
        DrawArchive { meta, draws },
        RunReport {
            chains,
            sparse_levels: sampler.sparse_levels(),
        },
    ))
}
