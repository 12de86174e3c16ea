//! Oracle computations shared by the sampler tests and the acceptance run.
//! Each returns the measured discrepancy; callers decide the tolerance.
#![allow(dead_code)]

use befa::data::{ProtocolDef, RatingDataset, RawEvent};
use befa::effects::EffectTable;
use befa::gibbs::{Freeze, ModelSpec, Sampler};
use befa::ordinal::{increments_from_cutpoints, norm_cdf, norm_ln_pdf, sample_truncated_normal};
use befa::synthetic::{simulate, TruthConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// One protocol with a single dimension; each teacher gets one section,
/// one lesson and one rater, and every score is its own segment.
pub fn one_dim_dataset(levels: usize, scores: &[Vec<u16>]) -> RatingDataset {
    let proto = ProtocolDef::new("P", vec!["x".into()], levels).unwrap();
    let mut b = RatingDataset::builder(vec![proto]).unwrap();
    let mut n = 0;
    for (j, ys) in scores.iter().enumerate() {
        let (t, s, l) = (format!("t{j}"), format!("t{j}s"), format!("t{j}l"));
        for &y in ys {
            let (e, g) = (format!("e{n}"), format!("g{n}"));
            n += 1;
            b.push(RawEvent {
                event_id: &e,
                teacher: &t,
                section: &s,
                lesson: &l,
                segment: &g,
                rater: "r",
                protocol: "P",
                scores: vec![Some(y)],
            })
            .unwrap();
        }
    }
    b.build()
}

pub fn small_truth(teachers: usize, seed: u64) -> TruthConfig {
    let mut cfg = TruthConfig::desk_default();
    cfg.teachers = teachers;
    cfg.seed = seed;
    cfg
}

fn simpson(a: f64, b: f64, n: usize, f: impl Fn(f64) -> f64) -> f64 {
    let h = (b - a) / n as f64;
    let mut acc = f(a) + f(b);
    for i in 1..n {
        acc += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    acc * h / 3.0
}

/// Largest deviation of empirical mean and variance of truncated N(μ, 1)
/// draws from the analytic moments, over a set of bounds including far tails.
pub fn truncated_normal_moment_error(n: usize, seed: u64) -> f64 {
    let cases = [
        (0.0, f64::NEG_INFINITY, 0.0),
        (0.0, 1.0, f64::INFINITY),
        (0.3, -0.5, 0.7),
        (0.0, 6.0, f64::INFINITY),
        (2.0, f64::NEG_INFINITY, -4.0),
        (-1.0, 2.0, 2.5),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pdf = |x: f64| if x.is_finite() { norm_ln_pdf(x).exp() } else { 0.0 };
    let xpdf = |x: f64| if x.is_finite() { x * norm_ln_pdf(x).exp() } else { 0.0 };
    let mut worst: f64 = 0.0;
    for (mu, lo, hi) in cases {
        let (a, b) = (lo - mu, hi - mu);
        let z = if a > 0.0 {
            norm_cdf(-a) - norm_cdf(-b)
        } else {
            norm_cdf(b) - norm_cdf(a)
        };
        let m1 = (pdf(a) - pdf(b)) / z;
        let mean = mu + m1;
        let var = 1.0 + (xpdf(a) - xpdf(b)) / z - m1 * m1;
        let xs: Vec<f64> = (0..n).map(|_| sample_truncated_normal(mu, lo, hi, &mut rng).unwrap()).collect();
        let em = xs.iter().sum::<f64>() / n as f64;
        let ev = xs.iter().map(|x| (x - em).powi(2)).sum::<f64>() / (n - 1) as f64;
        worst = worst.max((em - mean).abs()).max((ev - var).abs());
    }
    worst
}

/// Relative errors of the mean and variance of 1/u under the prior
/// (no data), against Gamma(1.5, 1.5): mean 1, variance 2/3.
pub fn prior_precision_moment_errors(sweeps: usize, seed: u64) -> (f64, f64) {
    let proto = ProtocolDef::new("P", (0..4).map(|i| format!("d{i}")).collect(), 3).unwrap();
    let ds = RatingDataset::builder(vec![proto]).unwrap().build();
    let s = Sampler::new(&ds, ModelSpec::new(1), Freeze::default());
    let mut st = s.initial_state(seed, 0.2, 0.5).unwrap();
    let mut w = Vec::with_capacity(sweeps * 4);
    for _ in 0..sweeps {
        s.sweep(&mut st).unwrap();
        w.extend(st.factors.uniqueness.iter().map(|u| 1.0 / u));
    }
    let n = w.len() as f64;
    let mean = w.iter().sum::<f64>() / n;
    let var = w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    ((mean - 1.0).abs(), (var / (2.0 / 3.0) - 1.0).abs())
}

/// K = 0 with latent scores, cutpoints, nuisance effects and U held at the
/// truth: δ_jg | t is Gaussian, N(S / (n + 1/u), 1 / (n + 1/u)). Returns
/// the largest gap between the sampled and closed-form posterior means.
pub fn teacher_effect_posterior_error(teachers: usize, seed: u64, sweeps: usize) -> f64 {
    let (ds, truth) = simulate(&small_truth(teachers, seed)).unwrap();
    let cfg = &truth.config;
    let freeze = Freeze {
        latent: true,
        cutpoints: true,
        nuisance: true,
        uniqueness: true,
    };
    let s = Sampler::new(&ds, ModelSpec::new(0), freeze);
    let mut st = s.initial_state(6, 0.2, 0.5).unwrap();
    let d = ds.n_dims();
    for g in 0..d {
        let rho = increments_from_cutpoints(&cfg.cutpoints[g]).unwrap();
        for (l, r) in rho.iter().enumerate() {
            st.cutpoints.set_rho(g, l, *r);
        }
    }
    st.effects.section_effect = EffectTable::from_matrix(&truth.section_effects);
    st.effects.lesson = EffectTable::from_matrix(&truth.lesson_effects);
    st.effects.rater = EffectTable::from_matrix(&truth.rater_effects);
    for ((l, r, p), z) in &truth.zeta {
        let c = st.effects.zeta_cells.get(*l, *r, *p).unwrap();
        st.effects.zeta[c] = z.clone();
    }
    // with K = 0 the teacher effect carries the whole Q + U
    let marginal = cfg.true_communality();
    st.factors.uniqueness = (0..d).map(|g| marginal[(g, g)] + cfg.uniqueness[g]).collect();

    let n_teach = ds.teachers().len();
    let mut sum = vec![0.0; n_teach * d];
    let mut count = vec![0.0; n_teach * d];
    for (i, o) in s.layout.obs.iter().enumerate() {
        let (e, g) = (o.event as usize, o.dim as usize);
        let t = truth.latent[e][o.local as usize];
        st.latent[i] = t;
        let nuisance = truth.section_effects[(o.section as usize, g)]
            + truth.lesson_effects[(o.lesson as usize, g)]
            + truth.rater_effects[(o.rater as usize, g)]
            + st.effects.zeta[o.cell as usize][o.local as usize];
        sum[o.teacher as usize * d + g] += t - nuisance;
        count[o.teacher as usize * d + g] += 1.0;
    }

    let mut mean = vec![0.0; n_teach * d];
    for _ in 0..sweeps {
        s.sweep(&mut st).unwrap();
        for (m, x) in mean.iter_mut().zip(st.effects.teacher.as_slice()) {
            *m += x / sweeps as f64;
        }
    }
    let mut worst: f64 = 0.0;
    for i in 0..n_teach * d {
        let expected = sum[i] / (count[i] + 1.0 / st.factors.uniqueness[i % d]);
        worst = worst.max((mean[i] - expected).abs());
    }
    worst
}

/// Prior density of ρ with τ ~ Uniform(0, 100) integrated out, up to a constant.
fn rho_prior(rho: f64) -> f64 {
    // substituting τ = e^s, dτ = τ ds cancels the 1/τ of the Gaussian
    simpson(-12.0, 100f64.ln(), 4000, |s| {
        let tau = s.exp();
        (-rho * rho / (2.0 * tau * tau)).exp()
    })
}

/// Two teachers scored on a two-level scale with U and nuisance frozen:
/// total variation between the sampled marginal of the single cutpoint
/// increment ρ and a grid posterior with δ integrated by quadrature.
pub fn micro_cutpoint_tv(sweeps: usize) -> f64 {
    let teachers = [
        [vec![1u16; 34], vec![2; 6]].concat(),
        [vec![1u16; 30], vec![2; 10]].concat(),
    ];
    let ds = one_dim_dataset(2, &teachers);
    let u: f64 = 0.02;
    let freeze = Freeze {
        nuisance: true,
        uniqueness: true,
        ..Freeze::default()
    };
    let s = Sampler::new(&ds, ModelSpec::new(0), freeze);
    let mut st = s.initial_state(12, 0.5, 0.5).unwrap();
    st.factors.uniqueness = vec![u];

    let lik = |rho: f64| -> f64 {
        let gamma = rho.exp();
        teachers
            .iter()
            .map(|ys| {
                let n1 = ys.iter().filter(|&&y| y == 1).count() as i32;
                let n2 = ys.len() as i32 - n1;
                simpson(-6.0, 6.0, 800, |z| {
                    let p = norm_cdf(gamma - u.sqrt() * z);
                    (-z * z / 2.0).exp() * p.powi(n1) * (1.0 - p).powi(n2)
                })
            })
            .product()
    };
    let (lo, hi, bins) = (-2.0f64, 1.2f64, 20);
    let width = (hi - lo) / bins as f64;
    let per_bin = 40;
    let mut grid = vec![0.0; bins];
    for (b, mass) in grid.iter_mut().enumerate() {
        for i in 0..per_bin {
            let rho = lo + width * (b as f64 + (i as f64 + 0.5) / per_bin as f64);
            *mass += rho_prior(rho) * lik(rho);
        }
    }
    let total: f64 = grid.iter().sum();
    grid.iter_mut().for_each(|m| *m /= total);

    st.adapting = true;
    for _ in 0..3000 {
        s.sweep(&mut st).unwrap();
    }
    st.adapting = false;
    let mut hist = vec![0.0; bins];
    let mut outside = 0.0;
    for _ in 0..sweeps {
        s.sweep(&mut st).unwrap();
        let rho = st.cutpoints.rho(0)[0];
        let b = ((rho - lo) / width).floor();
        if b >= 0.0 && (b as usize) < bins {
            hist[b as usize] += 1.0 / sweeps as f64;
        } else {
            outside += 1.0 / sweeps as f64;
        }
    }
    // mass the sampler puts outside the window counts in full
    0.5 * (grid.iter().zip(&hist).map(|(p, q)| (p - q).abs()).sum::<f64>() + outside)
}
