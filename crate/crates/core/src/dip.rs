//! Hartigan's dip statistic for unimodality with a Monte Carlo p-value
//! under the uniform null.
//!
//! The statistic follows the classical greatest-convex-minorant /
//! least-concave-majorant cycling algorithm, with a zero floor so that
//! perfectly uniform spacings give a dip of 0.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{BefaError, Result};

pub const NULL_REPLICATES: usize = 10_000;

/// Dip of a sorted sample (1-based indexing internally).
fn dip_sorted(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n < 2 || sorted[n - 1] == sorted[0] {
        return 0.0;
    }
    // x[1..=n]
    let mut x = Vec::with_capacity(n + 1);
    x.push(f64::NAN);
    x.extend_from_slice(sorted);
    let mut mn = vec![0usize; n + 1];
    let mut mj = vec![0usize; n + 1];
    let mut gcm = vec![0usize; n + 1];
    let mut lcm = vec![0usize; n + 1];

    // indices over which combination is needed for the convex minorant
    mn[1] = 1;
    for j in 2..=n {
        mn[j] = j - 1;
        loop {
            let mnj = mn[j];
            let mnmnj = mn[mnj];
            if mnj == 1
                || (x[j] - x[mnj]) * ((mnj - mnmnj) as f64) < (x[mnj] - x[mnmnj]) * ((j - mnj) as f64)
            {
                break;
            }
            mn[j] = mnmnj;
        }
    }
    // and for the concave majorant
    mj[n] = n;
    for k in (1..n).rev() {
        mj[k] = k + 1;
        loop {
            let mjk = mj[k];
            let mjmjk = mj[mjk];
            if mjk == n
                || (x[k] - x[mjk]) * (mjk as f64 - mjmjk as f64)
                    < (x[mjk] - x[mjmjk]) * (k as f64 - mjk as f64)
            {
                break;
            }
            mj[k] = mjmjk;
        }
    }

    // work with 2n·dip until the end
    let mut dip = 0.0f64;
    let mut low = 1usize;
    let mut high = n;
    loop {
        // change points of the GCM from high to low
        gcm[1] = high;
        let mut i = 1;
        while gcm[i] > low {
            gcm[i + 1] = mn[gcm[i]];
            i += 1;
        }
        let l_gcm = i;
        let mut ig = l_gcm;
        let mut ix = ig - 1;

        // change points of the LCM from low to high
        lcm[1] = low;
        let mut i = 1;
        while lcm[i] < high {
            lcm[i + 1] = mj[lcm[i]];
            i += 1;
        }
        let l_lcm = i;
        let mut ih = l_lcm;
        let mut iv = 2;

        // largest distance between GCM and LCM from low to high
        let mut d = 0.0f64;
        if l_gcm != 2 || l_lcm != 2 {
            loop {
                let gcmix = gcm[ix];
                let lcmiv = lcm[iv];
                if gcmix > lcmiv {
                    let gcmi1 = gcm[ix + 1];
                    let dx = (lcmiv as f64 - gcmi1 as f64 + 1.0)
                        - (x[lcmiv] - x[gcmi1]) * (gcmix as f64 - gcmi1 as f64) / (x[gcmix] - x[gcmi1]);
                    iv += 1;
                    if dx >= d {
                        d = dx;
                        ig = ix + 1;
                        ih = iv - 1;
                    }
                } else {
                    let lcmiv1 = lcm[iv - 1];
                    let dx = (x[gcmix] - x[lcmiv1]) * (lcmiv as f64 - lcmiv1 as f64) / (x[lcmiv] - x[lcmiv1])
                        - (gcmix as f64 - lcmiv1 as f64 - 1.0);
                    ix -= 1;
                    if dx >= d {
                        d = dx;
                        ig = ix + 1;
                        ih = iv;
                    }
                }
                if ix < 1 {
                    ix = 1;
                }
                if iv > l_lcm {
                    iv = l_lcm;
                }
                if gcm[ix] == lcm[iv] {
                    break;
                }
            }
        }
        if d < dip {
            break;
        }

        // dips of the convex minorant and concave majorant pieces
        let mut dip_l = 0.0f64;
        for j in ig..l_gcm {
            let mut max_t = 1.0f64;
            let (jb, je) = (gcm[j + 1], gcm[j]);
            if je - jb > 1 && x[je] != x[jb] {
                let c = (je - jb) as f64 / (x[je] - x[jb]);
                for jj in jb..=je {
                    let t = (jj - jb + 1) as f64 - (x[jj] - x[jb]) * c;
                    max_t = max_t.max(t);
                }
            }
            dip_l = dip_l.max(max_t);
        }
        let mut dip_u = 0.0f64;
        for j in ih..l_lcm {
            let mut max_t = 1.0f64;
            let (jb, je) = (lcm[j], lcm[j + 1]);
            if je - jb > 1 && x[je] != x[jb] {
                let c = (je - jb) as f64 / (x[je] - x[jb]);
                for jj in jb..=je {
                    let t = (x[jj] - x[jb]) * c - (jj as f64 - jb as f64 - 1.0);
                    max_t = max_t.max(t);
                }
            }
            dip_u = dip_u.max(max_t);
        }
        dip = dip.max(dip_u.max(dip_l));

        // without this check the cycle may not terminate
        if low == gcm[ig] && high == lcm[ih] {
            break;
        }
        low = gcm[ig];
        high = lcm[ih];
    }
    dip / (2 * n) as f64
}

/// Dip statistic of an unsorted sample.
pub fn dip_statistic(sample: &[f64]) -> f64 {
    let mut s = sample.to_vec();
    s.sort_by(f64::total_cmp);
    dip_sorted(&s)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DipResult {
    pub dip: f64,
    pub p_value: f64,
}

type NullCache = Mutex<HashMap<usize, Arc<Vec<f64>>>>;

fn null_cache() -> &'static NullCache {
    static CACHE: OnceLock<NullCache> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

/// Sorted dip statistics of `NULL_REPLICATES` uniform samples of size `n`.
/// Deterministic in `n`; computed once per process.
pub fn uniform_null(n: usize) -> Arc<Vec<f64>> {
    if let Some(v) = null_cache().lock().expect("dip cache").get(&n) {
        return v.clone();
    }
    let mut null: Vec<f64> = (0..NULL_REPLICATES)
        .into_par_iter()
        .map(|r| {
            let seed = (n as u64) << 32 | r as u64;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut u: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            u.sort_by(f64::total_cmp);
            dip_sorted(&u)
        })
        .collect();
    null.sort_by(f64::total_cmp);
    let null = Arc::new(null);
    null_cache()
        .lock()
        .expect("dip cache")
        .insert(n, null.clone());
    null
}

/// Dip statistic and Monte Carlo p-value (1 + #{null ≥ dip}) / (1 + R).
pub fn dip_test(sample: &[f64]) -> Result<DipResult> {
    let n = sample.len();
    if n < 4 {
        return Err(BefaError::InvalidArgument(format!(
            "dip test needs at least 4 values, got {n}"
        )));
    }
    if sample.iter().any(|x| !x.is_finite()) {
        return Err(BefaError::InvalidArgument("dip test input must be finite".into()));
    }
    let dip = dip_statistic(sample);
    if dip == 0.0 && sample.iter().all(|&x| x == sample[0]) {
        return Ok(DipResult { dip, p_value: 1.0 });
    }
    let null = uniform_null(n);
    let below = null.partition_point(|&v| v < dip);
    let at_least = null.len() - below;
    Ok(DipResult {
        dip,
        p_value: (1 + at_least) as f64 / (1 + null.len()) as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::StandardNormal;

    #[test]
    fn constant_and_small_samples() {
        assert_eq!(dip_test(&[2.0; 10]).unwrap(), DipResult { dip: 0.0, p_value: 1.0 });
        assert!(dip_test(&[1.0, 2.0, 3.0]).is_err());
        assert!(dip_test(&[1.0, 2.0, f64::NAN, 3.0]).is_err());
    }

    #[test]
    fn dip_is_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for n in [4, 5, 17, 100] {
            for _ in 0..200 {
                let x: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                let d = dip_statistic(&x);
                assert!((0.0..=0.25).contains(&d), "{d}");
            }
        }
    }

    #[test]
    fn dip_is_affine_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x: Vec<f64> = (0..80).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let y: Vec<f64> = x.iter().map(|v| 3.0 - 2.0 * v).collect();
        assert!((dip_statistic(&x) - dip_statistic(&y)).abs() < 1e-12);
    }

    #[test]
    fn unimodal_samples_rarely_reject() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ok = 0;
        for _ in 0..40 {
            let x: Vec<f64> = (0..1000).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            if dip_test(&x).unwrap().p_value > 0.05 {
                ok += 1;
            }
        }
        assert!(ok >= 36, "{ok} of 40");
    }

    #[test]
    fn separated_mixture_rejects() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let x: Vec<f64> = (0..1000)
                .map(|i| rng.sample::<f64, _>(StandardNormal) + if i % 2 == 0 { -3.0 } else { 3.0 })
                .collect();
            assert!(dip_test(&x).unwrap().p_value < 0.01);
        }
    }
}
