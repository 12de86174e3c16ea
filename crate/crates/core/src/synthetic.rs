//! Simulation from the full generative model with known ground truth.

use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{ProtocolDef, RatingDataset, RawEvent};
use crate::error::{BefaError, Result};
use crate::ordinal::score_from_latent;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolSpec {
    pub name: String,
    pub dims: Vec<String>,
    pub levels: usize,
}

/// Ground-truth configuration. Matrices are lists of rows; dimensions are
/// in schema order (protocols concatenated).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthConfig {
    pub seed: u64,
    pub teachers: usize,
    pub sections_per_teacher: usize,
    pub lessons_per_section: usize,
    pub segments_per_lesson: usize,
    pub raters: usize,
    /// Probability that a lesson gets a second rater.
    pub double_rating_fraction: f64,
    pub protocols: Vec<ProtocolSpec>,
    /// Λ*, D × K.
    pub loadings: Vec<Vec<f64>>,
    /// Diagonal of U*.
    pub uniqueness: Vec<f64>,
    pub section_cov: Vec<Vec<f64>>,
    pub lesson_cov: Vec<Vec<f64>>,
    pub rater_cov: Vec<Vec<f64>>,
    /// One D_P × D_P covariance per protocol.
    pub zeta_cov: Vec<Vec<Vec<f64>>>,
    /// L − 1 finite cutpoints per dimension.
    pub cutpoints: Vec<Vec<f64>>,
}

/// Exchangeable covariance: `var` on the diagonal, `var * corr` off it.
fn exchangeable_rows(n: usize, var: f64, corr: f64) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| (0..n).map(|j| if i == j { var } else { var * corr }).collect())
        .collect()
}

impl TruthConfig {
    /// Desk-scale scenario: two 4-dimension protocols with 4 levels, two
    /// factors that each span both protocols, 150 teachers.
    pub fn desk_default() -> Self {
        let protocols = vec![
            ProtocolSpec {
                name: "A".into(),
                dims: (1..=4).map(|i| format!("a{i}")).collect(),
                levels: 4,
            },
            ProtocolSpec {
                name: "B".into(),
                dims: (1..=4).map(|i| format!("b{i}")).collect(),
                levels: 4,
            },
        ];
        // factor 1: a1 a2 b1 b2; factor 2: a3 a4 b3 b4
        let loadings = vec![
            vec![0.4, 0.0],
            vec![0.4, 0.0],
            vec![0.0, 0.4],
            vec![0.0, 0.4],
            vec![0.4, 0.0],
            vec![0.4, 0.0],
            vec![0.0, 0.4],
            vec![0.0, 0.4],
        ];
        let cutpoints = (0..8)
            .map(|d| {
                if d % 2 == 0 {
                    vec![0.1, 0.8, 1.6]
                } else {
                    vec![0.2, 0.7, 1.4]
                }
            })
            .collect();
        TruthConfig {
            seed: 20140601,
            teachers: 150,
            sections_per_teacher: 2,
            lessons_per_section: 2,
            segments_per_lesson: 3,
            raters: 6,
            double_rating_fraction: 0.2,
            protocols,
            loadings,
            uniqueness: vec![0.05; 8],
            section_cov: exchangeable_rows(8, 0.05, 0.3),
            lesson_cov: exchangeable_rows(8, 0.05, 0.3),
            rater_cov: exchangeable_rows(8, 0.05, 0.2),
            zeta_cov: vec![exchangeable_rows(4, 0.05, 0.4), exchangeable_rows(4, 0.05, 0.4)],
            cutpoints,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| BefaError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn protocol_defs(&self) -> Result<Vec<ProtocolDef>> {
        self.protocols
            .iter()
            .map(|p| ProtocolDef::new(p.name.clone(), p.dims.clone(), p.levels))
            .collect()
    }

    pub fn n_dims(&self) -> usize {
        self.protocols.iter().map(|p| p.dims.len()).sum()
    }

    pub fn k(&self) -> usize {
        self.loadings.first().map_or(0, |r| r.len())
    }

    pub fn loadings_matrix(&self) -> DMatrix<f64> {
        rows_to_matrix(&self.loadings)
    }

    /// Λ*Λ*'.
    pub fn true_communality(&self) -> DMatrix<f64> {
        let l = self.loadings_matrix();
        &l * l.transpose()
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(BefaError::Config(m));
        let protocols = self.protocol_defs().map_err(|e| BefaError::Config(e.to_string()))?;
        let d = self.n_dims();
        if self.teachers == 0
            || self.sections_per_teacher == 0
            || self.lessons_per_section == 0
            || self.segments_per_lesson == 0
            || self.raters == 0
        {
            return err("teachers, sections_per_teacher, lessons_per_section, segments_per_lesson and raters must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.double_rating_fraction) {
            return err("double_rating_fraction must lie in [0, 1]".into());
        }
        if self.double_rating_fraction > 0.0 && self.raters < 2 {
            return err("double rating needs at least two raters".into());
        }
        if self.loadings.len() != d || self.loadings.iter().any(|r| r.len() != self.k()) {
            return err(format!("loadings must be {d} rows of equal length"));
        }
        if self.uniqueness.len() != d || self.uniqueness.iter().any(|u| !(*u > 0.0)) {
            return err(format!("uniqueness must hold {d} positive values"));
        }
        check_cov(&self.section_cov, d, "section_cov")?;
        check_cov(&self.lesson_cov, d, "lesson_cov")?;
        check_cov(&self.rater_cov, d, "rater_cov")?;
        if self.zeta_cov.len() != protocols.len() {
            return err("zeta_cov needs one matrix per protocol".into());
        }
        for (p, c) in protocols.iter().zip(&self.zeta_cov) {
            check_cov(c, p.n_dims(), &format!("zeta_cov[{}]", p.name))?;
        }
        let total = self.true_communality()
            + DMatrix::from_diagonal(&DVector::from_vec(self.uniqueness.clone()));
        if nalgebra::Cholesky::new(total).is_none() {
            return err("Λ*Λ*' + U* is not positive definite".into());
        }
        if self.cutpoints.len() != d {
            return err(format!("cutpoints must have {d} rows"));
        }
        let mut g = 0;
        for p in &protocols {
            for dim in &p.dims {
                let c = &self.cutpoints[g];
                if c.len() != p.levels - 1 {
                    return err(format!(
                        "cutpoints for {}:{dim} need {} values",
                        p.name,
                        p.levels - 1
                    ));
                }
                if c.iter().any(|v| !v.is_finite()) || c.windows(2).any(|w| w[1] <= w[0]) {
                    return err(format!(
                        "cutpoints for {}:{dim} must be finite and strictly increasing",
                        p.name
                    ));
                }
                g += 1;
            }
        }
        Ok(())
    }
}

fn rows_to_matrix(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let r = rows.len();
    let c = rows.first().map_or(0, |x| x.len());
    DMatrix::from_fn(r, c, |i, j| rows[i][j])
}

fn check_cov(rows: &[Vec<f64>], n: usize, name: &str) -> Result<()> {
    if rows.len() != n || rows.iter().any(|r| r.len() != n) {
        return Err(BefaError::Config(format!("{name} must be {n} × {n}")));
    }
    let m = rows_to_matrix(rows);
    if crate::linalg::max_abs_diff(&m, &m.transpose()) > 1e-12 {
        return Err(BefaError::Config(format!("{name} is not symmetric")));
    }
    let min = SymmetricEigen::new(m).eigenvalues.min();
    if min < -1e-10 {
        return Err(BefaError::Config(format!(
            "{name} is not positive semidefinite (smallest eigenvalue {min})"
        )));
    }
    Ok(())
}

/// Gaussian sampler for a PSD covariance via its symmetric square root.
struct GaussianDraw {
    root: DMatrix<f64>,
}

impl GaussianDraw {
    fn new(rows: &[Vec<f64>]) -> Self {
        let eig = SymmetricEigen::new(rows_to_matrix(rows));
        let sqrt_vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
        let root = &eig.eigenvectors * DMatrix::from_diagonal(&sqrt_vals);
        GaussianDraw { root }
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let z = DVector::from_fn(self.root.ncols(), |_, _| rng.sample(StandardNormal));
        (&self.root * z).iter().copied().collect()
    }
}

/// Every latent quantity drawn by [`simulate`].
#[derive(Clone, Debug, PartialEq)]
pub struct TruthRecord {
    pub config: TruthConfig,
    /// δ, teacher × D.
    pub teacher_effects: DMatrix<f64>,
    /// η, teacher × K.
    pub factor_scores: DMatrix<f64>,
    pub section_effects: DMatrix<f64>,
    pub lesson_effects: DMatrix<f64>,
    pub rater_effects: DMatrix<f64>,
    /// ((lesson, rater, protocol), protocol-local vector)
    pub zeta: Vec<((usize, usize, usize), Vec<f64>)>,
    /// Latent t per event, protocol-local order.
    pub latent: Vec<Vec<f64>>,
}

pub fn simulate(cfg: &TruthConfig) -> Result<(RatingDataset, TruthRecord)> {
    cfg.validate()?;
    let protocols = cfg.protocol_defs()?;
    let d = cfg.n_dims();
    let k = cfg.k();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let lambda = cfg.loadings_matrix();
    let offsets: Vec<usize> = protocols
        .iter()
        .scan(0, |acc, p| {
            let o = *acc;
            *acc += p.n_dims();
            Some(o)
        })
        .collect();

    let section_draw = GaussianDraw::new(&cfg.section_cov);
    let lesson_draw = GaussianDraw::new(&cfg.lesson_cov);
    let rater_draw = GaussianDraw::new(&cfg.rater_cov);
    let zeta_draws: Vec<GaussianDraw> = cfg.zeta_cov.iter().map(|c| GaussianDraw::new(c)).collect();

    let n_sect = cfg.teachers * cfg.sections_per_teacher;
    let n_less = n_sect * cfg.lessons_per_section;
    let mut teacher_effects = DMatrix::zeros(cfg.teachers, d);
    let mut factor_scores = DMatrix::zeros(cfg.teachers, k);
    let mut section_effects = DMatrix::zeros(n_sect, d);
    let mut lesson_effects = DMatrix::zeros(n_less, d);
    let mut rater_effects = DMatrix::zeros(cfg.raters, d);

    for r in 0..cfg.raters {
        rater_effects.row_mut(r).copy_from_slice(&rater_draw.draw(&mut rng));
    }

    let mut builder = RatingDataset::builder(protocols.clone())?;
    let mut zeta = Vec::new();
    let mut latent = Vec::new();
    let mut n_events = 0usize;
    let rater_ids: Vec<String> = (0..cfg.raters).map(|r| format!("r{r:02}")).collect();

    for j in 0..cfg.teachers {
        let eta = DVector::from_fn(k, |_, _| rng.sample::<f64, _>(StandardNormal));
        let mut delta = &lambda * &eta;
        for g in 0..d {
            delta[g] += cfg.uniqueness[g].sqrt() * rng.sample::<f64, _>(StandardNormal);
        }
        factor_scores.row_mut(j).copy_from_slice(eta.as_slice());
        teacher_effects.row_mut(j).copy_from_slice(delta.as_slice());
        let teacher_id = format!("t{j:04}");

        for s in 0..cfg.sections_per_teacher {
            let si = j * cfg.sections_per_teacher + s;
            section_effects.row_mut(si).copy_from_slice(&section_draw.draw(&mut rng));
            let section_id = format!("{teacher_id}s{s}");
            for l in 0..cfg.lessons_per_section {
                let li = si * cfg.lessons_per_section + l;
                lesson_effects.row_mut(li).copy_from_slice(&lesson_draw.draw(&mut rng));
                let lesson_id = format!("{section_id}l{l}");

                let first = rng.random_range(0..cfg.raters);
                let mut assigned = vec![first];
                if rng.random::<f64>() < cfg.double_rating_fraction {
                    let mut second = rng.random_range(0..cfg.raters - 1);
                    if second >= first {
                        second += 1;
                    }
                    assigned.push(second);
                }
                for (p, proto) in protocols.iter().enumerate() {
                    for &r in &assigned {
                        let z = zeta_draws[p].draw(&mut rng);
                        for seg in 0..cfg.segments_per_lesson {
                            let segment_id = format!("{lesson_id}g{seg}");
                            let mut t = Vec::with_capacity(proto.n_dims());
                            let mut scores = Vec::with_capacity(proto.n_dims());
                            for (dl, &zv) in z.iter().enumerate() {
                                let g = offsets[p] + dl;
                                let mu = teacher_effects[(j, g)]
                                    + section_effects[(si, g)]
                                    + lesson_effects[(li, g)]
                                    + rater_effects[(r, g)]
                                    + zv;
                                let tv = mu + rng.sample::<f64, _>(StandardNormal);
                                scores.push(Some(score_from_latent(tv, &cfg.cutpoints[g]) as u16));
                                t.push(tv);
                            }
                            let event_id = format!("e{n_events:06}");
                            n_events += 1;
                            builder.push(RawEvent {
                                event_id: &event_id,
                                teacher: &teacher_id,
                                section: &section_id,
                                lesson: &lesson_id,
                                segment: &segment_id,
                                rater: &rater_ids[r],
                                protocol: &proto.name,
                                scores,
                            })?;
                            latent.push(t);
                        }
                        zeta.push(((li, r, p), z));
                    }
                }
            }
        }
    }
    let ds = builder.build();
    // builder interns raters by first appearance; re-index the truth to match
    let rater_order: Vec<usize> = ds
        .raters()
        .names()
        .iter()
        .map(|name| rater_ids.iter().position(|r| r == name).expect("known rater"))
        .collect();
    let mut rater_dense = DMatrix::zeros(ds.raters().len(), d);
    for (dense, &orig) in rater_order.iter().enumerate() {
        rater_dense.row_mut(dense).copy_from(&rater_effects.row(orig));
    }
    let zeta = zeta
        .into_iter()
        .map(|((l, r, p), z)| {
            let dense = rater_order.iter().position(|&o| o == r).expect("rater used");
            ((l, dense, p), z)
        })
        .collect();

    Ok((
        ds,
        TruthRecord {
            config: cfg.clone(),
            teacher_effects,
            factor_scores,
            section_effects,
            lesson_effects,
            rater_effects: rater_dense,
            zeta,
            latent,
        },
    ))
}

/// See [`RatingDataset::permute_dimensions`].
pub fn permute_dimensions(ds: &RatingDataset, perm: &[usize]) -> Result<RatingDataset> {
    ds.permute_dimensions(perm)
}

fn write_matrix(path: &Path, ids: &[String], cols: &[String], m: &DMatrix<f64>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["id".to_string()];
    header.extend(cols.iter().cloned());
    w.write_record(&header)?;
    for i in 0..m.nrows() {
        let mut row = vec![ids[i].clone()];
        row.extend(m.row(i).iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| BefaError::io(path, e))?;
    Ok(())
}

impl TruthRecord {
    /// Write one CSV per latent block plus the config echo.
    pub fn write_dir(&self, ds: &RatingDataset, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| BefaError::io(dir, e))?;
        let cfg_path = dir.join("config.toml");
        std::fs::write(&cfg_path, self.config.to_toml()).map_err(|e| BefaError::io(&cfg_path, e))?;
        let dims: Vec<String> = self
            .config
            .protocols
            .iter()
            .flat_map(|p| p.dims.iter().map(move |d| format!("{}:{d}", p.name)))
            .collect();
        let factors: Vec<String> = (1..=self.config.k()).map(|k| format!("f{k}")).collect();
        write_matrix(&dir.join("loadings.csv"), &dims, &factors, &self.config.loadings_matrix())?;
        write_matrix(
            &dir.join("uniqueness.csv"),
            &dims,
            &["u".to_string()],
            &DMatrix::from_column_slice(dims.len(), 1, &self.config.uniqueness),
        )?;
        write_matrix(&dir.join("teacher_effects.csv"), ds.teachers().names(), &dims, &self.teacher_effects)?;
        write_matrix(&dir.join("factor_scores.csv"), ds.teachers().names(), &factors, &self.factor_scores)?;
        write_matrix(&dir.join("section_effects.csv"), ds.sections().names(), &dims, &self.section_effects)?;
        write_matrix(&dir.join("lesson_effects.csv"), ds.lessons().names(), &dims, &self.lesson_effects)?;
        write_matrix(&dir.join("rater_effects.csv"), ds.raters().names(), &dims, &self.rater_effects)?;

        let path = dir.join("rater_lesson_effects.csv");
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["lesson_id", "rater_id", "protocol", "dimension", "value"])?;
        for ((l, r, p), z) in &self.zeta {
            let proto = &self.config.protocols[*p];
            for (dim, v) in proto.dims.iter().zip(z) {
                w.write_record([
                    ds.lessons().name(*l),
                    ds.raters().name(*r),
                    proto.name.as_str(),
                    dim.as_str(),
                    v.to_string().as_str(),
                ])?;
            }
        }
        w.flush().map_err(|e| BefaError::io(&path, e))?;

        let path = dir.join("latent.csv");
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["event_id", "dimension", "t"])?;
        for (ev, t) in ds.events().iter().zip(&self.latent) {
            let proto = &ds.protocols()[ev.protocol];
            for (dim, v) in proto.dims.iter().zip(t) {
                w.write_record([ev.event_id.as_str(), dim.as_str(), v.to_string().as_str()])?;
            }
        }
        w.flush().map_err(|e| BefaError::io(&path, e))?;
        Ok(())
    }
}
