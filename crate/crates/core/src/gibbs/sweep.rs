//! Chain state and the full-conditional updates of one sweep.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use super::{Observation, Sampler};
use crate::archive::VarianceSummary;
use crate::effects::{EffectBlocks, FactorState, UniquenessPrior};
use crate::error::{BefaError, Result};
use crate::linalg::{cholesky, sample_from_precision, sample_precision_posterior, PrecisionSampler};
use crate::ordinal::{
    bracket, increments_from_cutpoints, ln_interval_prob, norm_quantile, sample_truncated_normal,
    CutpointState, TAU_MAX,
};

/// Smallest initial cutpoint and initial cutpoint spacing.
const INIT_CUT_FLOOR: f64 = 0.05;

#[derive(Clone, Debug)]
pub struct ChainState {
    pub cutpoints: CutpointState,
    /// Latent t, one per layout observation.
    pub latent: Vec<f64>,
    pub effects: EffectBlocks,
    pub factors: FactorState,
    pub rng: ChaCha8Rng,
    /// Completed sweeps.
    pub iteration: usize,
    /// While true, Metropolis step sizes are tuned after every proposal.
    pub adapting: bool,
    pub target_acceptance: f64,
    rho_log_step: Vec<Vec<f64>>,
    tau_log_step: Vec<f64>,
    /// (accepted, proposed)
    rho_accept: Vec<Vec<(u64, u64)>>,
    tau_accept: Vec<(u64, u64)>,
    adapt_sweeps: usize,
    /// t − μ per observation; rebuilt at the start of every sweep.
    resid: Vec<f64>,
}

impl ChainState {
    pub fn reset_counters(&mut self) {
        for r in &mut self.rho_accept {
            r.iter_mut().for_each(|c| *c = (0, 0));
        }
        self.tau_accept.iter_mut().for_each(|c| *c = (0, 0));
    }

    /// Acceptance rates of (ρ averaged per dimension, τ) since the last reset.
    pub fn acceptance_rates(&self) -> (Vec<f64>, Vec<f64>) {
        let rate = |(a, p): (u64, u64)| if p == 0 { 0.0 } else { a as f64 / p as f64 };
        let rho = self
            .rho_accept
            .iter()
            .map(|r| {
                let (a, p) = r.iter().fold((0, 0), |acc, c| (acc.0 + c.0, acc.1 + c.1));
                rate((a, p))
            })
            .collect();
        (rho, self.tau_accept.iter().map(|&c| rate(c)).collect())
    }

    pub fn rho_step_sizes(&self) -> Vec<Vec<f64>> {
        self.rho_log_step
            .iter()
            .map(|r| r.iter().map(|s| s.exp()).collect())
            .collect()
    }

    /// Short state dump attached to chain-abort errors.
    pub fn diagnostic(&self) -> String {
        let fmt = |v: &[f64]| {
            v.iter()
                .map(|x| format!("{x:.4}"))
                .collect::<Vec<_>>()
                .join(" ")
        };
        let taus: Vec<f64> = (0..self.cutpoints.n_dims()).map(|d| self.cutpoints.tau(d)).collect();
        format!(
            "state at failure: uniqueness [{}], expansion precisions [{}], tau [{}]",
            fmt(&self.factors.uniqueness),
            fmt(&self.factors.expansion_precision),
            fmt(&taus)
        )
    }

    fn record(&mut self, accepted: bool, which: StepRef) {
        let gain = (self.adapt_sweeps as f64 + 1.0).powf(-0.6);
        let delta = gain * (accepted as u8 as f64 - self.target_acceptance);
        let (counter, step) = match which {
            StepRef::Rho(g, l) => (&mut self.rho_accept[g][l], &mut self.rho_log_step[g][l]),
            StepRef::Tau(g) => (&mut self.tau_accept[g], &mut self.tau_log_step[g]),
        };
        counter.1 += 1;
        if accepted {
            counter.0 += 1;
        }
        if self.adapting {
            *step += delta;
        }
    }
}

#[derive(Clone, Copy)]
enum StepRef {
    Rho(usize, usize),
    Tau(usize),
}

fn sample_gamma<R: Rng + ?Sized>(shape: f64, rate: f64, rng: &mut R, what: &str) -> Result<f64> {
    let g = Gamma::new(shape, 1.0 / rate)
        .map_err(|e| BefaError::Numerical(format!("{what}: Gamma({shape}, {rate}): {e}")))?;
    Ok(g.sample(rng))
}

/// Draw a precision τ with density ∝ τ^(shape−1) e^(−rate τ) on τ > lower.
fn sample_truncated_gamma<R: Rng + ?Sized>(shape: f64, rate: f64, lower: f64, rng: &mut R) -> Result<f64> {
    if shape < 1.0 {
        // shifted exponential proposal; the density ratio (τ/lower)^(shape−1) is ≤ 1
        for _ in 0..100_000 {
            let e: f64 = -rng.random::<f64>().ln() / rate;
            let tau = lower + e;
            if rng.random::<f64>() <= (tau / lower).powf(shape - 1.0) {
                return Ok(tau);
            }
        }
    } else {
        for _ in 0..100_000 {
            let tau = sample_gamma(shape, rate, rng, "uniqueness precision")?;
            if tau > lower {
                return Ok(tau);
            }
        }
    }
    Err(BefaError::Numerical(format!(
        "truncated Gamma({shape}, {rate}) above {lower}: rejection sampler exhausted"
    )))
}

/// Conditional update of one block of Gaussian random effects.
///
/// `values` holds the block flattened with unit `u` at
/// `offsets[u]..offsets[u + 1]`; `position` maps an observation to its
/// (unit, flat index). Each unit's prior precision is `priors[prior_of(u)]`.
#[allow(clippy::too_many_arguments)]
fn update_block(
    resid: &mut [f64],
    obs: &[Observation],
    position: impl Fn(&Observation) -> usize,
    values: &mut [f64],
    counts: &[f64],
    offsets: &[usize],
    priors: &[DMatrix<f64>],
    prior_of: impl Fn(usize) -> usize,
    rng: &mut ChaCha8Rng,
    what: &str,
) -> Result<()> {
    let mut sums = vec![0.0; values.len()];
    for (o, r) in obs.iter().zip(resid.iter()) {
        let pos = position(o);
        sums[pos] += r + values[pos];
    }
    let mut delta = vec![0.0; values.len()];
    for u in 0..offsets.len() - 1 {
        let (a, b) = (offsets[u], offsets[u + 1]);
        let mut prec = priors[prior_of(u)].clone();
        for i in 0..b - a {
            prec[(i, i)] += counts[a + i];
        }
        let lin = DVector::from_column_slice(&sums[a..b]);
        let x = sample_from_precision(&prec, &lin, rng, what)?;
        for i in 0..b - a {
            delta[a + i] = x[i] - values[a + i];
            values[a + i] = x[i];
        }
    }
    for (o, r) in obs.iter().zip(resid.iter_mut()) {
        *r -= delta[position(o)];
    }
    Ok(())
}

fn scatter(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.transpose() * m
}

fn diag_of_inverse(prec: &DMatrix<f64>, what: &str) -> Result<Vec<f64>> {
    let inv = cholesky(prec, what)?.inverse();
    Ok(inv.diagonal().iter().copied().collect())
}

impl Sampler<'_> {
    /// Starting state for one chain.
    pub fn initial_state(&self, seed: u64, rho_step: f64, tau_step: f64) -> Result<ChainState> {
        let lay = &self.layout;
        let d = lay.n_dims;
        let k = self.spec.k;
        let n_teach = self.ds.teachers().len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        let mut rho = Vec::with_capacity(d);
        let mut tau = Vec::with_capacity(d);
        for counts in lay.level_counts() {
            let n: usize = counts.iter().sum();
            let mut gamma = Vec::with_capacity(counts.len() - 1);
            let mut cum = 0usize;
            for (l, c) in counts.iter().take(counts.len() - 1).enumerate() {
                cum += c;
                let p = (cum as f64 + 0.5) / (n as f64 + 1.0);
                let floor = if l == 0 { INIT_CUT_FLOOR } else { gamma[l - 1] + INIT_CUT_FLOOR };
                gamma.push(norm_quantile(p).max(floor));
            }
            let r = increments_from_cutpoints(&gamma)?;
            let rms = (r.iter().map(|x| x * x).sum::<f64>() / r.len() as f64).sqrt();
            tau.push(rms.clamp(1.0, 0.5 * TAU_MAX));
            rho.push(r);
        }
        let cutpoints = CutpointState::new(rho, tau)?;

        let mut latent = Vec::with_capacity(lay.obs.len());
        for o in &lay.obs {
            let (lo, hi) = cutpoints.bracket(o.dim as usize, o.level as usize);
            latent.push(sample_truncated_normal(0.0, lo, hi, &mut rng)?);
        }

        let factors = FactorState {
            working_loadings: DMatrix::from_fn(d, k, |_, _| 0.1 * rng.sample::<f64, _>(StandardNormal)),
            expansion_precision: vec![1.0; k],
            working_scores: DMatrix::zeros(n_teach, k),
            uniqueness: vec![1.0; d],
        };
        let n_cut: Vec<usize> = lay.levels.iter().map(|l| l - 1).collect();
        Ok(ChainState {
            cutpoints,
            resid: latent.clone(),
            latent,
            effects: EffectBlocks::zeros(self.ds),
            factors,
            rng,
            iteration: 0,
            adapting: false,
            target_acceptance: 0.44,
            rho_log_step: n_cut.iter().map(|&n| vec![rho_step.ln(); n]).collect(),
            tau_log_step: vec![tau_step.ln(); d],
            rho_accept: n_cut.iter().map(|&n| vec![(0, 0); n]).collect(),
            tau_accept: vec![(0, 0); d],
            adapt_sweeps: 0,
        })
    }

    /// One full scan: cutpoint increments and scales (with the latent
    /// scores integrated out), latent scores, nuisance effects, nuisance
    /// precisions, teacher effects, factor scores, loadings, expansion
    /// precisions and uniquenesses.
    pub fn sweep(&self, st: &mut ChainState) -> Result<()> {
        self.refresh_residuals(st);
        if !self.freeze.cutpoints {
            self.update_cutpoints(st);
            self.update_scales(st);
        }
        if !self.freeze.latent {
            self.update_latent(st)?;
        }
        if !self.freeze.nuisance {
            self.update_nuisance_effects(st)?;
            self.update_nuisance_precisions(st)?;
        }
        self.update_teacher_effects(st)?;
        self.update_factors(st)?;
        st.iteration += 1;
        if st.adapting {
            st.adapt_sweeps += 1;
        }
        Ok(())
    }

    fn mu(&self, st: &ChainState, o: &Observation) -> f64 {
        let d = self.layout.n_dims;
        let g = o.dim as usize;
        let e = &st.effects;
        e.teacher.as_slice()[o.teacher as usize * d + g]
            + e.section_effect.as_slice()[o.section as usize * d + g]
            + e.lesson.as_slice()[o.lesson as usize * d + g]
            + e.rater.as_slice()[o.rater as usize * d + g]
            + e.zeta[o.cell as usize][o.local as usize]
    }

    fn refresh_residuals(&self, st: &mut ChainState) {
        let resid: Vec<f64> = self
            .layout
            .obs
            .iter()
            .zip(&st.latent)
            .map(|(o, t)| t - self.mu(st, o))
            .collect();
        st.resid = resid;
    }

    /// Random-walk Metropolis on each ρ_{d,l} against the likelihood of the
    /// observed levels given μ, with t integrated out.
    fn update_cutpoints(&self, st: &mut ChainState) {
        let lay = &self.layout;
        let mut mu = Vec::new();
        let mut ll = Vec::new();
        let mut proposal_ll = Vec::new();
        for g in 0..lay.n_dims {
            let idx = &lay.by_dim[g];
            let starts = &lay.level_start[g];
            mu.clear();
            ll.clear();
            let mut gamma = st.cutpoints.gamma(g).to_vec();
            for &i in idx {
                let i = i as usize;
                let m = st.latent[i] - st.resid[i];
                let (lo, hi) = bracket(&gamma, lay.obs[i].level as usize);
                mu.push(m);
                ll.push(ln_interval_prob(lo - m, hi - m));
            }
            proposal_ll.resize(idx.len(), 0.0);
            let tau = st.cutpoints.tau(g);
            for l in 0..gamma.len() {
                let rho = st.cutpoints.rho(g)[l];
                let step = st.rho_log_step[g][l].exp();
                let prop = rho + step * st.rng.sample::<f64, _>(StandardNormal);
                let shift = prop.exp() - rho.exp();
                let mut new_gamma = gamma.clone();
                new_gamma[l..].iter_mut().for_each(|x| *x += shift);
                let mut log_ratio = -(prop * prop - rho * rho) / (2.0 * tau * tau);
                let from = starts[l];
                if new_gamma.iter().all(|x| x.is_finite()) {
                    for p in from..idx.len() {
                        let level = lay.obs[idx[p] as usize].level as usize;
                        let (lo, hi) = bracket(&new_gamma, level);
                        proposal_ll[p] = ln_interval_prob(lo - mu[p], hi - mu[p]);
                        log_ratio += proposal_ll[p] - ll[p];
                    }
                } else {
                    log_ratio = f64::NEG_INFINITY;
                }
                // NaN compares false and rejects
                let accepted = st.rng.random::<f64>().ln() < log_ratio;
                if accepted {
                    ll[from..].copy_from_slice(&proposal_ll[from..]);
                    gamma = new_gamma;
                    st.cutpoints.set_rho(g, l, prop);
                }
                st.record(accepted, StepRef::Rho(g, l));
            }
        }
    }

    /// Random-walk Metropolis on log τ_d under τ_d ~ Uniform(0, 100).
    fn update_scales(&self, st: &mut ChainState) {
        for g in 0..self.layout.n_dims {
            let rho = st.cutpoints.rho(g);
            let m = rho.len() as f64;
            let ss: f64 = rho.iter().map(|r| r * r).sum();
            // density of log τ: prior × Gaussian terms × Jacobian τ
            let ln_target = |t: f64| -m * t.ln() - ss / (2.0 * t * t) + t.ln();
            let tau = st.cutpoints.tau(g);
            let step = st.tau_log_step[g].exp();
            let prop = tau * (step * st.rng.sample::<f64, _>(StandardNormal)).exp();
            let accepted = prop > 0.0
                && prop < TAU_MAX
                && st.rng.random::<f64>().ln() < ln_target(prop) - ln_target(tau);
            if accepted {
                st.cutpoints.set_tau(g, prop);
            }
            st.record(accepted, StepRef::Tau(g));
        }
    }

    fn update_latent(&self, st: &mut ChainState) -> Result<()> {
        for (i, o) in self.layout.obs.iter().enumerate() {
            let mu = st.latent[i] - st.resid[i];
            let (lo, hi) = st.cutpoints.bracket(o.dim as usize, o.level as usize);
            let t = sample_truncated_normal(mu, lo, hi, &mut st.rng)?;
            st.resid[i] += t - st.latent[i];
            st.latent[i] = t;
        }
        Ok(())
    }

    fn update_nuisance_effects(&self, st: &mut ChainState) -> Result<()> {
        let lay = &self.layout;
        let d = lay.n_dims;
        let wide = |n: usize| (0..=n).map(|u| u * d).collect::<Vec<_>>();
        let ChainState { effects, resid, rng, .. } = st;

        let prior = [effects.section_precision.clone()];
        let offsets = wide(effects.section_effect.rows());
        update_block(
            resid,
            &lay.obs,
            |o| o.section as usize * d + o.dim as usize,
            effects.section_effect.as_mut_slice(),
            &lay.section_n,
            &offsets,
            &prior,
            |_| 0,
            rng,
            "section-effect conditional precision",
        )?;

        let prior = [effects.lesson_precision.clone()];
        let offsets = wide(effects.lesson.rows());
        update_block(
            resid,
            &lay.obs,
            |o| o.lesson as usize * d + o.dim as usize,
            effects.lesson.as_mut_slice(),
            &lay.lesson_n,
            &offsets,
            &prior,
            |_| 0,
            rng,
            "lesson-effect conditional precision",
        )?;

        let prior = [effects.rater_precision.clone()];
        let offsets = wide(effects.rater.rows());
        update_block(
            resid,
            &lay.obs,
            |o| o.rater as usize * d + o.dim as usize,
            effects.rater.as_mut_slice(),
            &lay.rater_n,
            &offsets,
            &prior,
            |_| 0,
            rng,
            "rater-effect conditional precision",
        )?;

        let mut flat: Vec<f64> = effects.zeta.concat();
        let cells = &lay.zeta_cells.cells;
        update_block(
            resid,
            &lay.obs,
            |o| lay.zeta_offset[o.cell as usize] + o.local as usize,
            &mut flat,
            &lay.zeta_n,
            &lay.zeta_offset,
            &effects.zeta_precision,
            |u| cells[u].2,
            rng,
            "rater-by-lesson conditional precision",
        )?;
        for (c, z) in effects.zeta.iter_mut().enumerate() {
            z.copy_from_slice(&flat[lay.zeta_offset[c]..lay.zeta_offset[c + 1]]);
        }
        Ok(())
    }

    fn update_nuisance_precisions(&self, st: &mut ChainState) -> Result<()> {
        let d = self.layout.n_dims;
        let df0 = d as f64 + 1.0;
        let e = &mut st.effects;
        let rng = &mut st.rng;
        let blocks = [
            (&e.section_effect, &mut e.section_precision),
            (&e.lesson, &mut e.lesson_precision),
            (&e.rater, &mut e.rater_precision),
        ];
        for (table, prec) in blocks {
            let s = scatter(&table.to_matrix());
            *prec = sample_precision_posterior(df0, &s, table.rows(), rng)?;
        }
        for (p, prec) in e.zeta_precision.iter_mut().enumerate() {
            let dp = prec.nrows();
            let mut s = DMatrix::zeros(dp, dp);
            let mut n = 0;
            for (c, &(_, _, cp)) in self.layout.zeta_cells.cells.iter().enumerate() {
                if cp == p {
                    let z = DVector::from_column_slice(&e.zeta[c]);
                    s += &z * z.transpose();
                    n += 1;
                }
            }
            *prec = sample_precision_posterior(dp as f64 + 1.0, &s, n, rng)?;
        }
        Ok(())
    }

    /// δ_j from its conditional with the factor scores integrated out:
    /// prior covariance Λ#Φ⁻¹Λ#' + U.
    fn update_teacher_effects(&self, st: &mut ChainState) -> Result<()> {
        let lay = &self.layout;
        let d = lay.n_dims;
        let f = &st.factors;
        let mut cov = DMatrix::from_diagonal(&DVector::from_column_slice(&f.uniqueness));
        for (k, &phi) in f.expansion_precision.iter().enumerate() {
            let col = f.working_loadings.column(k);
            cov += (col * col.transpose()) / phi;
        }
        let prior = [cholesky(&cov, "teacher-effect prior covariance")?.inverse()];
        let offsets: Vec<usize> = (0..=st.effects.teacher.rows()).map(|u| u * d).collect();
        let ChainState { effects, resid, rng, .. } = st;
        update_block(
            resid,
            &lay.obs,
            |o| o.teacher as usize * d + o.dim as usize,
            effects.teacher.as_mut_slice(),
            &lay.teacher_n,
            &offsets,
            &prior,
            |_| 0,
            rng,
            "teacher-effect conditional precision",
        )
    }

    /// η#_j, Λ# rows, φ_k and u_dd given the teacher effects.
    fn update_factors(&self, st: &mut ChainState) -> Result<()> {
        let delta = st.effects.teacher.to_matrix();
        let n = delta.nrows();
        let d = delta.ncols();
        let k = st.factors.k();
        let prior = self.spec.prior;
        let rng = &mut st.rng;
        let f = &mut st.factors;

        if k > 0 {
            // η#_j | δ_j: precision Φ + Λ#'U⁻¹Λ#
            let mut b = f.working_loadings.transpose();
            for g in 0..d {
                b.column_mut(g).unscale_mut(f.uniqueness[g]);
            }
            let mut prec = &b * &f.working_loadings;
            for (kk, &phi) in f.expansion_precision.iter().enumerate() {
                prec[(kk, kk)] += phi;
            }
            let sampler = PrecisionSampler::new(&prec, "factor-score conditional precision")?;
            let lin_all = &b * delta.transpose();
            for j in 0..n {
                let eta = sampler.draw(&lin_all.column(j).into_owned(), rng);
                f.working_scores.row_mut(j).copy_from(&eta.transpose());
            }

            // Λ# row g: precision I + H'H / u_g
            let h = &f.working_scores;
            let hth = h.transpose() * h;
            let htd = h.transpose() * &delta;
            for g in 0..d {
                let u = f.uniqueness[g];
                let prec = DMatrix::identity(k, k) + &hth / u;
                let lin = htd.column(g) / u;
                let row = sample_from_precision(&prec, &lin, rng, "loading conditional precision")?;
                f.working_loadings.row_mut(g).copy_from(&row.transpose());
            }

            for kk in 0..k {
                let ss: f64 = f.working_scores.column(kk).iter().map(|x| x * x).sum();
                let phi = sample_gamma(
                    prior.expansion_shape + n as f64 / 2.0,
                    prior.expansion_rate + ss / 2.0,
                    rng,
                    "expansion precision",
                )?;
                f.expansion_precision[kk] = phi;
            }
        }

        if !self.freeze.uniqueness {
            let fitted = &f.working_scores * f.working_loadings.transpose();
            for g in 0..d {
                let ss: f64 = (0..n).map(|j| (delta[(j, g)] - fitted[(j, g)]).powi(2)).sum();
                let precision = match prior.uniqueness {
                    UniquenessPrior::GammaPrecision { shape, rate } => {
                        sample_gamma(shape + n as f64 / 2.0, rate + ss / 2.0, rng, "uniqueness precision")?
                    }
                    UniquenessPrior::SqrtUniform { upper } => {
                        if n == 0 {
                            let s = upper * rng.random::<f64>();
                            1.0 / (s * s)
                        } else {
                            sample_truncated_gamma((n as f64 - 1.0) / 2.0, ss / 2.0, 1.0 / (upper * upper), rng)?
                        }
                    }
                };
                f.uniqueness[g] = 1.0 / precision;
            }
        }
        Ok(())
    }

    /// log f(y_e | parameters) for event `e`, integrating t only.
    pub fn event_loglik(&self, st: &ChainState, e: usize) -> f64 {
        let lay = &self.layout;
        (lay.event_start[e]..lay.event_start[e + 1])
            .map(|i| {
                let o = &lay.obs[i];
                let mu = self.mu(st, o);
                let (lo, hi) = st.cutpoints.bracket(o.dim as usize, o.level as usize);
                ln_interval_prob(lo - mu, hi - mu)
            })
            .sum()
    }

    pub fn all_event_loglik(&self, st: &ChainState) -> Vec<f64> {
        (0..self.layout.n_events).map(|e| self.event_loglik(st, e)).collect()
    }

    pub fn variance_summary(&self, st: &ChainState) -> Result<VarianceSummary> {
        let e = &st.effects;
        let mut rater_lesson = vec![0.0; self.layout.n_dims];
        for (p, prec) in e.zeta_precision.iter().enumerate() {
            let v = diag_of_inverse(prec, "rater-by-lesson precision")?;
            for (local, &g) in self.ds.protocol_positions(p).iter().enumerate() {
                rater_lesson[g] = v[local];
            }
        }
        Ok(VarianceSummary {
            section: diag_of_inverse(&e.section_precision, "section precision")?,
            lesson: diag_of_inverse(&e.lesson_precision, "lesson precision")?,
            rater: diag_of_inverse(&e.rater_precision, "rater precision")?,
            rater_lesson,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// E[τ] under the truncated density, by Simpson's rule.
    fn truncated_mean(shape: f64, rate: f64, lower: f64) -> f64 {
        let n = 200_000;
        let h = 80.0 / rate / n as f64;
        let (mut m0, mut m1) = (0.0, 0.0);
        for i in 0..=n {
            let t = lower + i as f64 * h;
            let w = if i == 0 || i == n { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
            let f = w * ((shape - 1.0) * t.ln() - rate * t).exp();
            m0 += f;
            m1 += f * t;
        }
        m1 / m0
    }

    #[test]
    fn truncated_gamma_matches_numerical_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (shape, rate, lower) in [(0.5, 2.0, 0.3), (3.0, 1.0, 2.5), (40.0, 10.0, 1.0), (0.9, 0.1, 0.01)] {
            let n = 200_000;
            let draws: Vec<f64> = (0..n)
                .map(|_| sample_truncated_gamma(shape, rate, lower, &mut rng).unwrap())
                .collect();
            assert!(draws.iter().all(|&t| t > lower));
            let mean = draws.iter().sum::<f64>() / n as f64;
            let sd = (draws.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
            let expected = truncated_mean(shape, rate, lower);
            assert!((mean - expected).abs() < 4.0 * sd / (n as f64).sqrt(), "{shape} {rate} {lower}: {mean} vs {expected}");
        }
    }
}
