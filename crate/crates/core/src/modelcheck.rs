//! Model-size selection and MCMC diagnostics: LPML from conditional
//! predictive ordinates, parallel analysis on correlation eigenvalues,
//! and the potential scale reduction factor.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::archive::DrawArchive;
use crate::error::{BefaError, Result};
use crate::linalg::{cov_to_corr, sorted_eigenvalues};

pub use crate::dip::{dip_test, DipResult};

/// Linear-interpolation quantile of an ascending slice.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty sample");
    let h = (sorted.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[derive(Clone, Debug, PartialEq)]
pub struct LpmlResult {
    pub k: usize,
    pub per_chain: Vec<f64>,
    /// Mean of the per-chain values.
    pub average: f64,
    /// log CPO per event from all chains pooled.
    pub log_cpo: Vec<f64>,
    /// Events whose CPO denominator was not finite.
    pub unstable: Vec<usize>,
}

impl LpmlResult {
    pub fn cpo(&self) -> Vec<f64> {
        self.log_cpo.iter().map(|v| v.exp()).collect()
    }

    pub fn chain_sd(&self) -> f64 {
        let n = self.per_chain.len();
        if n < 2 {
            return 0.0;
        }
        let ss: f64 = self.per_chain.iter().map(|v| (v - self.average).powi(2)).sum();
        (ss / (n - 1) as f64).sqrt()
    }
}

/// Harmonic-mean log CPO per event. `draws[b][i]` is log f(y_i | θ_b).
pub fn log_cpo(draws: &[&[f64]]) -> Result<(Vec<f64>, Vec<usize>)> {
    let Some(first) = draws.first() else {
        return Err(BefaError::InvalidArgument("no draws for CPO".into()));
    };
    let n = first.len();
    if draws.iter().any(|d| d.len() != n) {
        return Err(BefaError::InvalidArgument("draws disagree on the number of events".into()));
    }
    let ln_b = (draws.len() as f64).ln();
    let mut out = Vec::with_capacity(n);
    let mut unstable = Vec::new();
    for i in 0..n {
        let lse = log_sum_exp(draws.iter().map(|d| -d[i]));
        if !lse.is_finite() {
            unstable.push(i);
        }
        out.push(ln_b - lse);
    }
    Ok((out, unstable))
}

/// LPML per chain, averaged across chains.
pub fn lpml_from_chains(k: usize, chains: &[Vec<&[f64]>]) -> Result<LpmlResult> {
    if chains.is_empty() {
        return Err(BefaError::InvalidArgument("no chains for LPML".into()));
    }
    let per_chain = chains
        .iter()
        .map(|c| log_cpo(c).map(|(v, _)| v.iter().sum::<f64>()))
        .collect::<Result<Vec<f64>>>()?;
    let pooled: Vec<&[f64]> = chains.iter().flatten().copied().collect();
    let (log_cpo, unstable) = log_cpo(&pooled)?;
    Ok(LpmlResult {
        k,
        average: per_chain.iter().sum::<f64>() / per_chain.len() as f64,
        per_chain,
        log_cpo,
        unstable,
    })
}

pub fn lpml(archive: &DrawArchive) -> Result<LpmlResult> {
    let chains: Vec<Vec<&[f64]>> = (0..archive.meta.n_chains())
        .map(|c| archive.chain_draws(c).map(|d| d.loglik.as_slice()).collect())
        .filter(|c: &Vec<&[f64]>| !c.is_empty())
        .collect();
    lpml_from_chains(archive.k(), &chains)
}

/// Ordered correlation eigenvalues per covariance draw.
#[derive(Clone, Debug, PartialEq)]
pub struct EigenPosterior {
    /// `values[b]` is non-increasing.
    pub values: Vec<Vec<f64>>,
    /// Draws skipped because the covariance was not positive definite.
    pub skipped: usize,
}

impl EigenPosterior {
    pub fn n_dims(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    pub fn mean(&self) -> Vec<f64> {
        let d = self.n_dims();
        let b = self.values.len().max(1) as f64;
        (0..d)
            .map(|k| self.values.iter().map(|v| v[k]).sum::<f64>() / b)
            .collect()
    }

    /// Per-eigenvalue (lo, hi) quantiles.
    pub fn intervals(&self, lo: f64, hi: f64) -> Vec<(f64, f64)> {
        (0..self.n_dims())
            .map(|k| {
                let mut col: Vec<f64> = self.values.iter().map(|v| v[k]).collect();
                col.sort_by(f64::total_cmp);
                (quantile(&col, lo), quantile(&col, hi))
            })
            .collect()
    }
}

pub fn eigens_of_corr(covs: &[DMatrix<f64>]) -> EigenPosterior {
    let per: Vec<Option<Vec<f64>>> = covs
        .par_iter()
        .map(|c| {
            c.clone().cholesky()?;
            cov_to_corr(c).map(|r| sorted_eigenvalues(&r))
        })
        .collect();
    let skipped = per.iter().filter(|v| v.is_none()).count();
    EigenPosterior {
        values: per.into_iter().flatten().collect(),
        skipped,
    }
}

/// Eigenvalues of corr(Q + U) for every retained draw.
pub fn eigens_of_archive(archive: &DrawArchive) -> EigenPosterior {
    let covs: Vec<DMatrix<f64>> = archive
        .draws
        .iter()
        .map(|d| d.communality() + DMatrix::from_diagonal(&d.uniqueness.clone().into()))
        .collect();
    eigens_of_corr(&covs)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HornOptions {
    pub n_null: usize,
    pub pct: f64,
    pub seed: u64,
}

impl Default for HornOptions {
    fn default() -> Self {
        HornOptions {
            n_null: 100_000,
            pct: 0.95,
            seed: 1,
        }
    }
}

const NULL_BLOCK: usize = 1000;

/// Ordered eigenvalues of the sample correlation of an N × D data matrix.
pub fn sample_corr_eigenvalues(x: &DMatrix<f64>) -> Vec<f64> {
    let n = x.nrows() as f64;
    let mut c = x.clone();
    for mut col in c.column_iter_mut() {
        let m = col.mean();
        col.add_scalar_mut(-m);
    }
    let cov = c.transpose() * &c / (n - 1.0);
    cov_to_corr(&cov).map_or_else(|| vec![f64::NAN; x.ncols()], |r| sorted_eigenvalues(&r))
}

/// `pct` quantile of each ordered eigenvalue of the sample correlation of
/// `n` independent `d`-variate standard Gaussian vectors.
pub fn null_thresholds(n: usize, d: usize, opts: &HornOptions) -> Vec<f64> {
    let blocks = opts.n_null.div_ceil(NULL_BLOCK);
    let sims: Vec<Vec<f64>> = (0..blocks)
        .into_par_iter()
        .flat_map_iter(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            rng.set_stream(b as u64 + 1);
            let reps = NULL_BLOCK.min(opts.n_null - b * NULL_BLOCK);
            (0..reps)
                .map(|_| {
                    let x = DMatrix::from_fn(n, d, |_, _| StandardNormal.sample(&mut rng));
                    sample_corr_eigenvalues(&x)
                })
                .collect::<Vec<_>>()
        })
        .collect();
    (0..d)
        .map(|k| {
            let mut col: Vec<f64> = sims.iter().map(|v| v[k]).collect();
            col.sort_by(f64::total_cmp);
            quantile(&col, opts.pct)
        })
        .collect()
}

/// Number of leading eigenvalues that exceed their null thresholds.
pub fn select_k(observed: &[f64], thresholds: &[f64]) -> usize {
    observed
        .iter()
        .zip(thresholds)
        .take_while(|(o, t)| o > t)
        .count()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParallelAnalysisResult {
    pub observed_mean: Vec<f64>,
    pub intervals: Vec<(f64, f64)>,
    pub null_thresholds: Vec<f64>,
    pub selected_k: usize,
    pub skipped_draws: usize,
    pub warning: Option<String>,
}

pub fn horn_parallel(eig: &EigenPosterior, n: usize, opts: &HornOptions) -> Result<ParallelAnalysisResult> {
    let d = eig.n_dims();
    if d == 0 {
        return Err(BefaError::InvalidArgument("empty eigenvalue posterior".into()));
    }
    if n < 2 || opts.n_null == 0 || !(opts.pct > 0.0 && opts.pct < 1.0) {
        return Err(BefaError::InvalidArgument(format!(
            "parallel analysis needs N ≥ 2, n_null ≥ 1 and pct in (0, 1); got N = {n}, n_null = {}, pct = {}",
            opts.n_null, opts.pct
        )));
    }
    let warning = (n <= d).then(|| format!("sample size {n} does not exceed the {d} dimensions"));
    let thresholds = null_thresholds(n, d, opts);
    let observed_mean = eig.mean();
    Ok(ParallelAnalysisResult {
        selected_k: select_k(&observed_mean, &thresholds),
        intervals: eig.intervals(0.025, 0.975),
        observed_mean,
        null_thresholds: thresholds,
        skipped_draws: eig.skipped,
        warning,
    })
}

/// Potential scale reduction factor; `None` when the within-chain
/// variance is zero.
pub fn gelman_rubin(chains: &[&[f64]]) -> Result<Option<f64>> {
    let m = chains.len();
    if m < 2 {
        return Err(BefaError::InvalidArgument("R-hat needs at least two chains".into()));
    }
    let n = chains[0].len();
    if n < 2 || chains.iter().any(|c| c.len() != n) {
        return Err(BefaError::InvalidArgument(
            "R-hat needs chains of equal length ≥ 2".into(),
        ));
    }
    let means: Vec<f64> = chains.iter().map(|c| c.iter().sum::<f64>() / n as f64).collect();
    let grand = means.iter().sum::<f64>() / m as f64;
    let b = n as f64 / (m - 1) as f64 * means.iter().map(|x| (x - grand).powi(2)).sum::<f64>();
    let w = chains
        .iter()
        .zip(&means)
        .map(|(c, mu)| c.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (n - 1) as f64)
        .sum::<f64>()
        / m as f64;
    if !(w > 0.0) {
        return Ok(None);
    }
    let var_plus = (n - 1) as f64 / n as f64 * w + b / n as f64;
    Ok(Some((var_plus / w).sqrt()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct RhatEntry {
    pub name: String,
    pub value: Option<f64>,
}

/// R̂ for every element q_ij (i ≤ j) of Q and every u_i.
pub fn rhat_communality(archive: &DrawArchive) -> Result<Vec<RhatEntry>> {
    let chains: Vec<Vec<_>> = (0..archive.meta.n_chains())
        .map(|c| archive.chain_draws(c).collect())
        .collect();
    let qs: Vec<Vec<DMatrix<f64>>> = chains
        .iter()
        .map(|c| c.iter().map(|d| d.communality()).collect())
        .collect();
    let labels = &archive.meta.dim_labels;
    let d = archive.meta.n_dims();
    let mut out = Vec::new();
    let mut push = |name: String, series: Vec<Vec<f64>>| -> Result<()> {
        let refs: Vec<&[f64]> = series.iter().map(Vec::as_slice).collect();
        out.push(RhatEntry {
            name,
            value: gelman_rubin(&refs)?,
        });
        Ok(())
    };
    for i in 0..d {
        for j in i..d {
            let series = qs.iter().map(|c| c.iter().map(|q| q[(i, j)]).collect()).collect();
            push(format!("q[{},{}]", labels[i], labels[j]), series)?;
        }
    }
    for i in 0..d {
        let series = chains
            .iter()
            .map(|c| c.iter().map(|dr| dr.uniqueness[i]).collect())
            .collect();
        push(format!("u[{}]", labels[i]), series)?;
    }
    Ok(out)
}
