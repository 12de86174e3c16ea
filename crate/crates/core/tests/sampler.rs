mod common;

use befa::gibbs::{run, Freeze, ModelSpec, Sampler, SamplerConfig};
use befa::ordinal::bracket;
use befa::synthetic::simulate;
use common::{one_dim_dataset, small_truth};

fn short_config(chains: usize, seed: u64) -> SamplerConfig {
    let mut cfg = SamplerConfig::new(chains, seed);
    cfg.n_adapt = 20;
    cfg.n_iter = 60;
    cfg.n_burn = 20;
    cfg.thin = 10;
    cfg
}

#[test]
fn equal_seeds_give_identical_chains() {
    let (ds, _) = simulate(&small_truth(12, 3)).unwrap();
    let mut cfg = short_config(2, 9);
    cfg.seeds = vec![9, 9];
    let (a, _) = run(&ds, &ModelSpec::new(2), &cfg).unwrap();
    let (b, _) = run(&ds, &ModelSpec::new(2), &cfg).unwrap();
    assert_eq!(a.draws, b.draws);

    let c0: Vec<_> = a.chain_draws(0).collect();
    let c1: Vec<_> = a.chain_draws(1).collect();
    assert_eq!(c0.len(), c1.len());
    for (x, y) in c0.iter().zip(&c1) {
        assert_eq!(x.iter, y.iter);
        assert_eq!(x.loadings, y.loadings);
        assert_eq!(x.uniqueness, y.uniqueness);
        assert_eq!(x.scores, y.scores);
        assert_eq!(x.cutpoints, y.cutpoints);
        assert_eq!(x.loglik, y.loglik);
    }
}

#[test]
fn archive_size_and_burn_in() {
    let (ds, _) = simulate(&small_truth(10, 4)).unwrap();
    let cfg = short_config(3, 1);
    let (arch, report) = run(&ds, &ModelSpec::new(1), &cfg).unwrap();
    assert_eq!(arch.draws.len(), 3 * (60 - 20) / 10);
    assert_eq!(report.chains.len(), 3);
    for c in 0..3 {
        let iters: Vec<usize> = arch.chain_draws(c).map(|d| d.iter).collect();
        assert_eq!(iters, vec![29, 39, 49, 59]);
    }
    for d in &arch.draws {
        assert_eq!(d.loglik.len(), ds.events().len());
        assert!(d.loglik.iter().all(|l| l.is_finite() && *l <= 0.0));
    }

    let mut unthinned = short_config(1, 1);
    unthinned.thin = 1;
    let (arch, _) = run(&ds, &ModelSpec::new(1), &unthinned).unwrap();
    let iters: Vec<usize> = arch.draws.iter().map(|d| d.iter).collect();
    assert_eq!(iters, (20..60).collect::<Vec<_>>());
}

#[test]
fn no_events_means_prior_draws() {
    let (mean_err, var_err) = common::prior_precision_moment_errors(100_000, 17);
    assert!(mean_err < 0.02, "{mean_err}");
    assert!(var_err < 0.02, "{var_err}");
}

#[test]
fn all_level_one_stays_below_first_cutpoint() {
    let ds = one_dim_dataset(3, &[vec![1; 6], vec![1; 4], vec![1; 5]]);
    let s = Sampler::new(&ds, ModelSpec::new(1), Freeze::default());
    let mut st = s.initial_state(2, 0.2, 0.5).unwrap();
    for _ in 0..500 {
        s.sweep(&mut st).unwrap();
        let g1 = st.cutpoints.gamma(0)[0];
        assert!(g1 > 0.0);
        assert!(st.latent.iter().all(|&t| t <= g1));
    }
}

#[test]
fn event_loglik_closed_forms() {
    let ds = one_dim_dataset(2, &[vec![1, 2]]);
    let s = Sampler::new(&ds, ModelSpec::new(0), Freeze::default());
    let mut st = s.initial_state(1, 0.2, 0.5).unwrap();
    let g1 = st.cutpoints.gamma(0)[0];
    st.effects.teacher.row_mut(0)[0] = g1;
    for e in 0..2 {
        assert!((s.event_loglik(&st, e) - 0.5f64.ln()).abs() < 1e-12);
    }
    st.effects.teacher.row_mut(0)[0] = 60.0;
    assert!(s.event_loglik(&st, 1).abs() < 1e-12);
    assert!(s.event_loglik(&st, 0) < -1000.0);
}

/// ∫_lo^hi φ(t − μ) dt by composite Simpson over the effective support.
fn interval_mass(lo: f64, hi: f64, mu: f64) -> f64 {
    let a = lo.max(mu - 14.0);
    let b = hi.min(mu + 14.0);
    if b <= a {
        return 0.0;
    }
    let n = 20_000;
    let h = (b - a) / n as f64;
    let f = |t: f64| (-(t - mu) * (t - mu) / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut acc = f(a) + f(b);
    for i in 1..n {
        acc += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    acc * h / 3.0
}

#[test]
fn event_loglik_matches_quadrature() {
    let (ds, _) = simulate(&small_truth(6, 8)).unwrap();
    let s = Sampler::new(&ds, ModelSpec::new(2), Freeze::default());
    let mut st = s.initial_state(4, 0.2, 0.5).unwrap();
    for _ in 0..30 {
        s.sweep(&mut st).unwrap();
    }
    for (e, ev) in ds.events().iter().enumerate().step_by(7) {
        let mu = st.effects.mu_for_event(&ds, ev).unwrap();
        let mut expected = 0.0;
        for (local, y) in ev.scores.iter().enumerate() {
            let Some(y) = y else { continue };
            let g = ds.global_dim(ev.protocol, local);
            let (lo, hi) = bracket(st.cutpoints.gamma(g), *y as usize);
            expected += interval_mass(lo, hi, mu[local]).ln();
        }
        let got = s.event_loglik(&st, e);
        assert!((got - expected).abs() < 1e-8, "event {e}: {got} vs {expected}");
    }
}

#[test]
fn truncated_normal_moments() {
    let err = common::truncated_normal_moment_error(200_000, 3);
    assert!(err < 0.01, "{err}");
}

#[test]
fn teacher_effects_match_conjugate_posterior() {
    let err = common::teacher_effect_posterior_error(30, 21, 8000);
    assert!(err < 0.02, "{err}");
}

#[test]
fn two_level_cutpoint_matches_grid_posterior() {
    let tv = common::micro_cutpoint_tv(400_000);
    assert!(tv < 0.05, "total variation {tv}");
}
