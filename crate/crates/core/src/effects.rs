//! Latent effect decomposition of the ordinal means and the teacher-level
//! factor model.
//!
//! Each scoring event's mean vector is the sum of teacher, section, lesson,
//! rater and rater-by-lesson effects restricted to the event's protocol.
//! Teacher effects follow `δ_j = Λ# η#_j + ε_j` with working loadings
//! `Λ#`, working scores `η#_j ~ N(0, Φ⁻¹)` and uniquenesses `ε_j ~ N(0, U)`.
//! The identified scale divides `Λ#` columns by `√φ_k` and multiplies the
//! scores by the same factor.

use std::collections::HashMap;

use nalgebra::DMatrix;
use statrs::function::gamma::ln_gamma;

use crate::data::{RatingDataset, ScoringEvent};
use crate::error::{BefaError, Result};

/// Row-major table of equally sized effect vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct EffectTable {
    width: usize,
    values: Vec<f64>,
}

impl EffectTable {
    pub fn zeros(rows: usize, width: usize) -> Self {
        EffectTable {
            width,
            values: vec![0.0; rows * width],
        }
    }

    pub fn rows(&self) -> usize {
        if self.width == 0 {
            0
        } else {
            self.values.len() / self.width
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.width..(i + 1) * self.width]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.values[i * self.width..(i + 1) * self.width]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.width + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows(), self.width, &self.values)
    }

    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        let mut t = EffectTable::zeros(m.nrows(), m.ncols());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                t.values[i * t.width + j] = m[(i, j)];
            }
        }
        t
    }
}

/// Rater-by-lesson cells present in a dataset, one per (lesson, rater,
/// protocol) combination.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ZetaCells {
    pub cells: Vec<(usize, usize, usize)>,
    lookup: HashMap<(usize, usize, usize), usize>,
    /// Cell of each event, in event order.
    pub of_event: Vec<usize>,
}

impl ZetaCells {
    pub fn from_dataset(ds: &RatingDataset) -> Self {
        let mut z = ZetaCells::default();
        for ev in ds.events() {
            let key = (ev.lesson, ev.rater, ev.protocol);
            let next = z.cells.len();
            let idx = *z.lookup.entry(key).or_insert(next);
            if idx == next {
                z.cells.push(key);
            }
            z.of_event.push(idx);
        }
        z
    }

    pub fn get(&self, lesson: usize, rater: usize, protocol: usize) -> Option<usize> {
        self.lookup.get(&(lesson, rater, protocol)).copied()
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }
}

/// All random effects of the mean decomposition plus the precision
/// matrices of the nuisance blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct EffectBlocks {
    pub teacher: EffectTable,
    pub section_effect: EffectTable,
    pub lesson: EffectTable,
    pub rater: EffectTable,
    /// One protocol-local vector per rater-by-lesson cell.
    pub zeta: Vec<Vec<f64>>,
    pub zeta_cells: ZetaCells,
    pub section_precision: DMatrix<f64>,
    pub lesson_precision: DMatrix<f64>,
    pub rater_precision: DMatrix<f64>,
    /// Per protocol, D_P × D_P.
    pub zeta_precision: Vec<DMatrix<f64>>,
}

impl EffectBlocks {
    /// Zero effects; precisions at their prior means (df · I).
    pub fn zeros(ds: &RatingDataset) -> Self {
        let d = ds.n_dims();
        let cells = ZetaCells::from_dataset(ds);
        let zeta = cells
            .cells
            .iter()
            .map(|&(_, _, p)| vec![0.0; ds.protocols()[p].n_dims()])
            .collect();
        let prior_mean = |n: usize| DMatrix::identity(n, n) * (n as f64 + 1.0);
        EffectBlocks {
            teacher: EffectTable::zeros(ds.teachers().len(), d),
            section_effect: EffectTable::zeros(ds.sections().len(), d),
            lesson: EffectTable::zeros(ds.lessons().len(), d),
            rater: EffectTable::zeros(ds.raters().len(), d),
            zeta,
            zeta_cells: cells,
            section_precision: prior_mean(d),
            lesson_precision: prior_mean(d),
            rater_precision: prior_mean(d),
            zeta_precision: ds
                .protocols()
                .iter()
                .map(|p| prior_mean(p.n_dims()))
                .collect(),
        }
    }

    /// μ_i = δ + φ + θ + κ + ζ restricted to the event's protocol.
    pub fn mu_for_event(&self, ds: &RatingDataset, ev: &ScoringEvent) -> Result<Vec<f64>> {
        let check = |idx: usize, rows: usize, what: &str| {
            if idx < rows {
                Ok(())
            } else {
                Err(BefaError::InvalidArgument(format!(
                    "event {}: {what} index {idx} not present in effect blocks",
                    ev.event_id
                )))
            }
        };
        check(ev.teacher, self.teacher.rows(), "teacher")?;
        check(ev.section, self.section_effect.rows(), "section")?;
        check(ev.lesson, self.lesson.rows(), "lesson")?;
        check(ev.rater, self.rater.rows(), "rater")?;
        if ev.protocol >= ds.protocols().len() {
            return Err(BefaError::InvalidArgument(format!(
                "event {}: unknown protocol index {}",
                ev.event_id, ev.protocol
            )));
        }
        let cell = self
            .zeta_cells
            .get(ev.lesson, ev.rater, ev.protocol)
            .ok_or_else(|| {
                BefaError::InvalidArgument(format!(
                    "event {}: no rater-by-lesson effect for this lesson and rater",
                    ev.event_id
                ))
            })?;
        Ok(ds
            .protocol_positions(ev.protocol)
            .iter()
            .enumerate()
            .map(|(d, &g)| {
                self.teacher.get(ev.teacher, g)
                    + self.section_effect.get(ev.section, g)
                    + self.lesson.get(ev.lesson, g)
                    + self.rater.get(ev.rater, g)
                    + self.zeta[cell][d]
            })
            .collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UniquenessPrior {
    /// u_dd⁻¹ ~ Gamma(shape, rate).
    GammaPrecision { shape: f64, rate: f64 },
    /// √u_dd ~ Uniform(0, upper).
    SqrtUniform { upper: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FactorPrior {
    /// Gamma(shape, rate) on each expansion precision φ_k.
    pub expansion_shape: f64,
    pub expansion_rate: f64,
    pub uniqueness: UniquenessPrior,
}

impl Default for FactorPrior {
    fn default() -> Self {
        FactorPrior {
            expansion_shape: 1.5,
            expansion_rate: 1.5,
            uniqueness: UniquenessPrior::GammaPrecision {
                shape: 1.5,
                rate: 1.5,
            },
        }
    }
}

fn ln_gamma_density(x: f64, shape: f64, rate: f64) -> f64 {
    if x <= 0.0 {
        return f64::NEG_INFINITY;
    }
    shape * rate.ln() - ln_gamma(shape) + (shape - 1.0) * x.ln() - rate * x
}

impl FactorPrior {
    /// Log prior density of (Λ#, Φ, U) up to a constant; U enters through
    /// its diagonal.
    pub fn ln_density(&self, loadings: &DMatrix<f64>, expansion: &[f64], uniqueness: &[f64]) -> f64 {
        let ln_load: f64 = loadings.iter().map(|l| -0.5 * l * l).sum();
        let ln_exp: f64 = expansion
            .iter()
            .map(|&p| ln_gamma_density(p, self.expansion_shape, self.expansion_rate))
            .sum();
        let ln_u: f64 = uniqueness
            .iter()
            .map(|&u| match self.uniqueness {
                // density of u when 1/u ~ Gamma: g(1/u) / u²
                UniquenessPrior::GammaPrecision { shape, rate } => {
                    ln_gamma_density(1.0 / u, shape, rate) - 2.0 * u.ln()
                }
                // density of u when √u ~ U(0, A): 1 / (2 A √u)
                UniquenessPrior::SqrtUniform { upper } => {
                    if u > 0.0 && u.sqrt() < upper {
                        -(2.0 * upper).ln() - 0.5 * u.ln()
                    } else {
                        f64::NEG_INFINITY
                    }
                }
            })
            .sum();
        ln_load + ln_exp + ln_u
    }
}

/// Parameter-expanded factor state of the teacher effects.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorState {
    /// Λ#, D × K.
    pub working_loadings: DMatrix<f64>,
    /// φ_1..φ_K.
    pub expansion_precision: Vec<f64>,
    /// η#, one row per teacher (N × K).
    pub working_scores: DMatrix<f64>,
    /// Diagonal of U.
    pub uniqueness: Vec<f64>,
}

impl FactorState {
    pub fn k(&self) -> usize {
        self.working_loadings.ncols()
    }

    /// Identified-scale loadings λ_dk = λ#_dk φ_k^{-1/2} and scores
    /// η_jk = η#_jk φ_k^{1/2}.
    pub fn identified_loadings(&self) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        if let Some(p) = self.expansion_precision.iter().find(|p| !(**p > 0.0)) {
            return Err(BefaError::InvalidArgument(format!(
                "expansion precision must be positive, got {p}"
            )));
        }
        let mut lambda = self.working_loadings.clone();
        let mut eta = self.working_scores.clone();
        for (k, &phi) in self.expansion_precision.iter().enumerate() {
            let s = phi.sqrt();
            lambda.column_mut(k).unscale_mut(s);
            eta.column_mut(k).scale_mut(s);
        }
        Ok((lambda, eta))
    }

    pub fn communality_draw(&self) -> Result<CommunalityDraw> {
        let (lambda, _) = self.identified_loadings()?;
        Ok(CommunalityDraw::new(&lambda, &self.uniqueness))
    }
}

/// Q = Λ Λ'.
pub fn communality(lambda: &DMatrix<f64>) -> DMatrix<f64> {
    lambda * lambda.transpose()
}

#[derive(Clone, Debug, PartialEq)]
pub struct CommunalityDraw {
    pub q: DMatrix<f64>,
    pub u: Vec<f64>,
}

impl CommunalityDraw {
    pub fn new(lambda: &DMatrix<f64>, u: &[f64]) -> Self {
        CommunalityDraw {
            q: communality(lambda),
            u: u.to_vec(),
        }
    }

    /// Cov(δ) = Q + U.
    pub fn total(&self) -> DMatrix<f64> {
        let mut t = self.q.clone();
        for (d, u) in self.u.iter().enumerate() {
            t[(d, d)] += u;
        }
        t
    }
}
