//! Ordinal-probit link: cutpoints built from unconstrained increments,
//! thresholding of latent scores, and truncated-normal data augmentation.

use rand::Rng;
use rand_distr::{Distribution, Exp};
use statrs::function::erf::{erfc, erfc_inv};

use crate::error::{BefaError, Result};

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Standardised distance from the mean beyond which the truncated-normal
/// sampler switches from inverse-CDF to rejection.
pub const TAIL_SWITCH: f64 = 5.0;

pub fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / SQRT_2)
}

/// Upper tail 1 - Φ(x), accurate for large x.
pub fn norm_sf(x: f64) -> f64 {
    0.5 * erfc(x / SQRT_2)
}

pub fn norm_ln_pdf(x: f64) -> f64 {
    -0.5 * x * x - LN_SQRT_2PI
}

pub fn norm_quantile(p: f64) -> f64 {
    -SQRT_2 * erfc_inv(2.0 * p)
}

/// ln Φ(x), finite far into the lower tail.
pub fn norm_ln_cdf(x: f64) -> f64 {
    if x == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if x > -30.0 {
        return norm_cdf(x).ln();
    }
    // Mills-ratio expansion
    let z2 = 1.0 / (x * x);
    norm_ln_pdf(x) - (-x).ln() + (1.0 - z2 + 3.0 * z2 * z2 - 15.0 * z2 * z2 * z2).ln()
}

/// ln(Φ(hi) − Φ(lo)) for lo < hi; either bound may be infinite.
pub fn ln_interval_prob(lo: f64, hi: f64) -> f64 {
    if lo >= hi {
        return f64::NEG_INFINITY;
    }
    if lo > 0.0 {
        // both in the upper half: work with survival functions
        let a = norm_ln_cdf(-lo);
        let b = norm_ln_cdf(-hi);
        return a + (-(b - a).exp()).ln_1p();
    }
    if hi < 0.0 {
        let a = norm_ln_cdf(hi);
        let b = norm_ln_cdf(lo);
        return a + (-(b - a).exp()).ln_1p();
    }
    let p = norm_cdf(hi) - norm_cdf(lo);
    if p > 1e-8 {
        p.ln()
    } else {
        (hi - lo).ln() + norm_ln_pdf(0.5 * (lo + hi))
    }
}

/// γ_ℓ = Σ_{l ≤ ℓ} exp(ρ_l).
pub fn cutpoints_from_increments(rho: &[f64]) -> Result<Vec<f64>> {
    if rho.iter().any(|r| !r.is_finite()) {
        return Err(BefaError::InvalidArgument(
            "cutpoint increments must be finite".into(),
        ));
    }
    let mut acc = 0.0;
    Ok(rho
        .iter()
        .map(|r| {
            acc += r.exp();
            acc
        })
        .collect())
}

/// Inverse of [`cutpoints_from_increments`]; cutpoints must be positive and
/// strictly increasing.
pub fn increments_from_cutpoints(gamma: &[f64]) -> Result<Vec<f64>> {
    let mut prev = 0.0;
    let mut out = Vec::with_capacity(gamma.len());
    for &g in gamma {
        if !(g > prev) || !g.is_finite() {
            return Err(BefaError::InvalidArgument(format!(
                "cutpoints must be positive and strictly increasing, got {gamma:?}"
            )));
        }
        out.push((g - prev).ln());
        prev = g;
    }
    Ok(out)
}

/// The level ℓ in 1..=L with γ_{ℓ−1} < t ≤ γ_ℓ (γ_0 = −∞, γ_L = +∞).
/// `gamma` holds the L − 1 finite cutpoints.
pub fn score_from_latent(t: f64, gamma: &[f64]) -> usize {
    1 + gamma.iter().take_while(|&&g| g < t).count()
}

/// Finite/infinite bracket (γ_{y−1}, γ_y] of level `y`.
pub fn bracket(gamma: &[f64], y: usize) -> (f64, f64) {
    let lo = if y <= 1 { f64::NEG_INFINITY } else { gamma[y - 2] };
    let hi = if y > gamma.len() { f64::INFINITY } else { gamma[y - 1] };
    (lo, hi)
}

/// Draw from Normal(mean, 1) restricted to (lower, upper].
pub fn sample_truncated_normal<R: Rng + ?Sized>(
    mean: f64,
    lower: f64,
    upper: f64,
    rng: &mut R,
) -> Result<f64> {
    if !(lower < upper) {
        return Err(BefaError::InvalidArgument(format!(
            "truncation bounds must satisfy lower < upper, got ({lower}, {upper}]"
        )));
    }
    Ok(mean + standard_truncated(lower - mean, upper - mean, rng))
}

fn standard_truncated<R: Rng + ?Sized>(a: f64, b: f64, rng: &mut R) -> f64 {
    if b <= 0.0 {
        return -standard_truncated_upper(-b, -a, rng);
    }
    if a >= 0.0 {
        return standard_truncated_upper(a, b, rng);
    }
    let pa = norm_cdf(a);
    let pb = norm_cdf(b);
    for _ in 0..16 {
        let z = norm_quantile(pa + rng.random::<f64>() * (pb - pa));
        if a < z && z <= b {
            return z;
        }
    }
    fallback(a, b)
}

/// (a, b] with a ≥ 0.
fn standard_truncated_upper<R: Rng + ?Sized>(a: f64, b: f64, rng: &mut R) -> f64 {
    if a > TAIL_SWITCH {
        return tail_rejection(a, b, rng);
    }
    let qa = norm_sf(a);
    let qb = norm_sf(b);
    for _ in 0..16 {
        let q = qa - rng.random::<f64>() * (qa - qb);
        let z = -norm_quantile(q);
        if a < z && z <= b {
            return z;
        }
    }
    fallback(a, b)
}

/// Rejection sampling for a > TAIL_SWITCH: uniform proposals on short
/// intervals, translated-exponential proposals otherwise.
fn tail_rejection<R: Rng + ?Sized>(a: f64, b: f64, rng: &mut R) -> f64 {
    let alpha = 0.5 * (a + (a * a + 4.0).sqrt());
    let exp = Exp::new(alpha).expect("positive rate");
    if b - a < 1.0 / a {
        loop {
            let z = a + rng.random::<f64>() * (b - a);
            if z > a && rng.random::<f64>() <= (0.5 * (a * a - z * z)).exp() {
                return z;
            }
        }
    }
    loop {
        let z = a + exp.sample(rng);
        if z <= a || z > b {
            continue;
        }
        let d = z - alpha;
        if rng.random::<f64>() <= (-0.5 * d * d).exp() {
            return z;
        }
    }
}

fn fallback(a: f64, b: f64) -> f64 {
    if a.is_finite() && b.is_finite() {
        0.5 * (a + b)
    } else if b.is_finite() {
        b
    } else {
        a + 1e-12 * a.abs().max(1.0)
    }
}

/// Cutpoint parameters for every global dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct CutpointState {
    rho: Vec<Vec<f64>>,
    tau: Vec<f64>,
    gamma: Vec<Vec<f64>>,
}

pub const TAU_MAX: f64 = 100.0;

impl CutpointState {
    pub fn new(rho: Vec<Vec<f64>>, tau: Vec<f64>) -> Result<Self> {
        if rho.len() != tau.len() {
            return Err(BefaError::InvalidArgument(
                "one τ per dimension required".into(),
            ));
        }
        if tau.iter().any(|&t| !(t > 0.0 && t < TAU_MAX)) {
            return Err(BefaError::InvalidArgument(format!(
                "τ must lie in (0, {TAU_MAX})"
            )));
        }
        let gamma = rho
            .iter()
            .map(|r| cutpoints_from_increments(r))
            .collect::<Result<_>>()?;
        Ok(CutpointState { rho, tau, gamma })
    }

    pub fn n_dims(&self) -> usize {
        self.rho.len()
    }

    pub fn rho(&self, d: usize) -> &[f64] {
        &self.rho[d]
    }

    pub fn gamma(&self, d: usize) -> &[f64] {
        &self.gamma[d]
    }

    pub fn tau(&self, d: usize) -> f64 {
        self.tau[d]
    }

    pub fn set_rho(&mut self, d: usize, l: usize, value: f64) {
        self.rho[d][l] = value;
        let mut acc = if l == 0 { 0.0 } else { self.gamma[d][l - 1] };
        for i in l..self.rho[d].len() {
            acc += self.rho[d][i].exp();
            self.gamma[d][i] = acc;
        }
    }

    pub fn set_tau(&mut self, d: usize, value: f64) {
        debug_assert!(value > 0.0 && value < TAU_MAX);
        self.tau[d] = value;
    }

    pub fn bracket(&self, d: usize, y: usize) -> (f64, f64) {
        bracket(&self.gamma[d], y)
    }
}
