//! Correlating identified factor scores with external teacher measures,
//! corrected for the measure's unreliability, draw by draw.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{BefaError, Result};
use crate::modelcheck::quantile;

#[derive(Clone, Debug, PartialEq)]
pub struct ExternalMeasure {
    pub name: String,
    /// (teacher id, estimate) pairs.
    pub estimates: Vec<(String, f64)>,
    pub reliability: f64,
}

impl ExternalMeasure {
    pub fn new(name: impl Into<String>, estimates: Vec<(String, f64)>, reliability: f64) -> Result<Self> {
        if !(reliability > 0.0 && reliability <= 1.0) {
            return Err(BefaError::InvalidArgument(format!(
                "reliability must lie in (0, 1], got {reliability}"
            )));
        }
        if let Some((id, v)) = estimates.iter().find(|(_, v)| !v.is_finite()) {
            return Err(BefaError::InvalidArgument(format!(
                "estimate for teacher {id} is not finite: {v}"
            )));
        }
        let mut seen = HashMap::new();
        for (id, _) in &estimates {
            if seen.insert(id.as_str(), ()).is_some() {
                return Err(BefaError::InvalidArgument(format!("teacher {id} listed twice")));
            }
        }
        Ok(ExternalMeasure {
            name: name.into(),
            estimates,
            reliability,
        })
    }

    /// Reads `teacher_id,estimate` rows.
    pub fn read_csv(path: &Path, name: &str, reliability: f64) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)?;
        let headers = rdr.headers()?.clone();
        if headers.len() != 2 || &headers[0] != "teacher_id" || &headers[1] != "estimate" {
            return Err(BefaError::Malformed {
                line: 1,
                message: format!("expected header teacher_id,estimate, found {:?}", headers.iter().collect::<Vec<_>>()),
            });
        }
        let mut estimates = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let line = rec.position().map_or(0, |p| p.line());
            let v: f64 = rec[1].trim().parse().map_err(|_| BefaError::Malformed {
                line,
                message: format!("bad estimate {:?}", &rec[1]),
            })?;
            estimates.push((rec[0].trim().to_string(), v));
        }
        Self::new(name, estimates, reliability)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["teacher_id", "estimate"])?;
        for (id, v) in &self.estimates {
            w.write_record([id.clone(), v.to_string()])?;
        }
        w.flush().map_err(|e| BefaError::io(path, e))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Coverage {
    /// Teachers with both factor scores and a measure.
    pub matched: usize,
    /// Teachers with scores but no measure.
    pub missing_measure: usize,
    /// Measure rows naming teachers without scores.
    pub unknown_teachers: usize,
}

pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

pub fn disattenuate(c: f64, reliability: f64) -> f64 {
    c / reliability.sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationPosterior {
    pub measure: String,
    pub factor: usize,
    pub reliability: f64,
    /// C̃_b per draw; `None` where either vector had zero variance.
    pub draws: Vec<Option<f64>>,
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
    /// Defined draws with |C̃_b| > 1.
    pub exceed_one: usize,
    pub coverage: Coverage,
}

impl CorrelationPosterior {
    pub fn defined(&self) -> Vec<f64> {
        self.draws.iter().flatten().copied().collect()
    }

    pub fn undefined(&self) -> usize {
        self.draws.iter().filter(|d| d.is_none()).count()
    }
}

/// Disattenuated correlation between factor `factor` of each score draw
/// (teachers in rows, ordered as `teacher_ids`) and the measure.
pub fn disattenuated_corr(
    scores: &[DMatrix<f64>],
    teacher_ids: &[String],
    measure: &ExternalMeasure,
    factor: usize,
) -> Result<CorrelationPosterior> {
    if scores.is_empty() {
        return Err(BefaError::InvalidArgument("no score draws".into()));
    }
    if let Some(s) = scores.iter().find(|s| s.nrows() != teacher_ids.len() || factor >= s.ncols()) {
        return Err(BefaError::InvalidArgument(format!(
            "score draw is {}×{}, expected {} teachers and factor {factor} in range",
            s.nrows(),
            s.ncols(),
            teacher_ids.len()
        )));
    }
    let lookup: HashMap<&str, f64> = measure.estimates.iter().map(|(k, v)| (k.as_str(), *v)).collect();
    let (rows, y): (Vec<usize>, Vec<f64>) = teacher_ids
        .iter()
        .enumerate()
        .filter_map(|(j, id)| lookup.get(id.as_str()).map(|v| (j, *v)))
        .unzip();
    let known: HashMap<&str, ()> = teacher_ids.iter().map(|t| (t.as_str(), ())).collect();
    let coverage = Coverage {
        matched: rows.len(),
        missing_measure: teacher_ids.len() - rows.len(),
        unknown_teachers: measure
            .estimates
            .iter()
            .filter(|(id, _)| !known.contains_key(id.as_str()))
            .count(),
    };
    if rows.len() < 3 {
        return Err(BefaError::InvalidArgument(format!(
            "only {} teachers have both scores and a {} estimate; at least 3 are needed",
            rows.len(),
            measure.name
        )));
    }

    let draws: Vec<Option<f64>> = scores
        .par_iter()
        .map(|s| {
            let x: Vec<f64> = rows.iter().map(|&j| s[(j, factor)]).collect();
            pearson(&x, &y).map(|c| disattenuate(c, measure.reliability))
        })
        .collect();
    let mut defined: Vec<f64> = draws.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(BefaError::Numerical("correlation undefined in every draw".into()));
    }
    defined.sort_by(f64::total_cmp);
    Ok(CorrelationPosterior {
        measure: measure.name.clone(),
        factor,
        reliability: measure.reliability,
        mean: defined.iter().sum::<f64>() / defined.len() as f64,
        lower: quantile(&defined, 0.025),
        upper: quantile(&defined, 0.975),
        exceed_one: defined.iter().filter(|c| c.abs() > 1.0).count(),
        draws,
        coverage,
    })
}

/// Gaussian kernel density estimate on a regular grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Kde {
    pub bandwidth: f64,
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
}

/// Silverman's rule of thumb, 0.9 · min(sd, IQR / 1.34) · n^(-1/5).
pub fn silverman_bandwidth(sample: &[f64]) -> Option<f64> {
    let n = sample.len();
    if n < 2 {
        return None;
    }
    let mean = sample.iter().sum::<f64>() / n as f64;
    let sd = (sample.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    let mut s = sample.to_vec();
    s.sort_by(f64::total_cmp);
    let iqr = quantile(&s, 0.75) - quantile(&s, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    let h = 0.9 * spread * (n as f64).powf(-0.2);
    (h > 0.0).then_some(h)
}

pub fn kde(sample: &[f64], n_grid: usize) -> Option<Kde> {
    let h = silverman_bandwidth(sample)?;
    let lo = sample.iter().copied().fold(f64::INFINITY, f64::min) - 3.0 * h;
    let hi = sample.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 3.0 * h;
    let step = (hi - lo) / (n_grid.max(2) - 1) as f64;
    let grid: Vec<f64> = (0..n_grid.max(2)).map(|i| lo + i as f64 * step).collect();
    let norm = 1.0 / (sample.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
    let density = grid
        .par_iter()
        .map(|g| norm * sample.iter().map(|x| (-0.5 * ((g - x) / h).powi(2)).exp()).sum::<f64>())
        .collect();
    Some(Kde {
        bandwidth: h,
        grid,
        density,
    })
}

/// A measure whose sample correlation with `truth` is exactly
/// `latent_corr · √reliability`, so its disattenuated correlation with the
/// true scores is exactly `latent_corr`.
pub fn simulate_measure(
    name: &str,
    teacher_ids: &[String],
    truth: &[f64],
    latent_corr: f64,
    reliability: f64,
    seed: u64,
) -> Result<ExternalMeasure> {
    let n = truth.len();
    if n != teacher_ids.len() || n < 3 {
        return Err(BefaError::InvalidArgument(
            "need one truth value per teacher and at least 3 teachers".into(),
        ));
    }
    let target = latent_corr * reliability.sqrt();
    if target.abs() > 1.0 {
        return Err(BefaError::InvalidArgument(format!("implied correlation {target} exceeds 1")));
    }
    let standardize = |v: &mut Vec<f64>| {
        let m = v.iter().sum::<f64>() / n as f64;
        v.iter_mut().for_each(|x| *x -= m);
        let s = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= s);
    };
    let mut x = truth.to_vec();
    standardize(&mut x);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let m = z.iter().sum::<f64>() / n as f64;
    z.iter_mut().for_each(|v| *v -= m);
    let proj: f64 = z.iter().zip(&x).map(|(a, b)| a * b).sum();
    z.iter_mut().zip(&x).for_each(|(v, xi)| *v -= proj * xi);
    standardize(&mut z);
    let resid = (1.0 - target * target).sqrt();
    let estimates = teacher_ids
        .iter()
        .zip(x.iter().zip(&z))
        .map(|(id, (xi, zi))| (id.clone(), target * xi + resid * zi))
        .collect();
    ExternalMeasure::new(name, estimates, reliability)
}
