//! Post-processing of loading draws into one interpretable orientation:
//! varimax per draw, signed-permutation alignment to an iterated pivot, and
//! the matching rotation of factor scores.

use itertools::Itertools;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::archive::DrawArchive;
use crate::error::{BefaError, Result};
use crate::linalg::{has_full_column_rank, random_orthogonal};

/// Largest K for which signed permutations are enumerated (46,080 at K = 6).
pub const ENUMERATION_CAP: usize = 6;

const RANK_TOL: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VarimaxOptions {
    /// Kaiser row normalisation before rotating.
    pub normalize: bool,
    /// Stop once a sweep raises the criterion by less than this…
    pub criterion_tol: f64,
    /// …and no planar rotation in it exceeds this angle.
    pub angle_tol: f64,
    pub max_sweeps: usize,
    /// Restarts from a random rotation when a run stalls.
    pub restarts: usize,
    pub seed: u64,
}

impl Default for VarimaxOptions {
    fn default() -> Self {
        VarimaxOptions {
            normalize: false,
            criterion_tol: 1e-10,
            angle_tol: 1e-10,
            max_sweeps: 1000,
            restarts: 3,
            seed: 0,
        }
    }
}

/// Σ_k [ (1/D) Σ_d λ⁴_dk − ((1/D) Σ_d λ²_dk)² ].
pub fn varimax_criterion(lambda: &DMatrix<f64>) -> f64 {
    let d = lambda.nrows() as f64;
    lambda
        .column_iter()
        .map(|c| {
            let m2 = c.iter().map(|x| x * x).sum::<f64>() / d;
            let m4 = c.iter().map(|x| x.powi(4)).sum::<f64>() / d;
            m4 - m2 * m2
        })
        .sum()
}

fn rotate_pair(m: &mut DMatrix<f64>, j: usize, k: usize, c: f64, s: f64) {
    for r in 0..m.nrows() {
        let (x, y) = (m[(r, j)], m[(r, k)]);
        m[(r, j)] = c * x + s * y;
        m[(r, k)] = -s * x + c * y;
    }
}

/// One attempt from the rotation `start`. Returns (Λ_V, R, trace) or the
/// trace on stall.
fn varimax_from(
    lambda: &DMatrix<f64>,
    start: DMatrix<f64>,
    opts: &VarimaxOptions,
) -> std::result::Result<(DMatrix<f64>, DMatrix<f64>), Vec<f64>> {
    let k = lambda.ncols();
    let d = lambda.nrows() as f64;
    let mut rot = start;
    let mut l = lambda * &rot;
    let mut crit = varimax_criterion(&l);
    let mut trace = vec![crit];
    for _ in 0..opts.max_sweeps {
        let mut max_angle = 0.0f64;
        for j in 0..k {
            for kk in j + 1..k {
                let (mut a, mut b, mut c, mut dd) = (0.0, 0.0, 0.0, 0.0);
                for r in 0..l.nrows() {
                    let (x, y) = (l[(r, j)], l[(r, kk)]);
                    let u = x * x - y * y;
                    let v = 2.0 * x * y;
                    a += u;
                    b += v;
                    c += u * u - v * v;
                    dd += 2.0 * u * v;
                }
                let num = dd - 2.0 * a * b / d;
                let den = c - (a * a - b * b) / d;
                let phi = num.atan2(den) / 4.0;
                max_angle = max_angle.max(phi.abs());
                if phi != 0.0 {
                    let (s, co) = phi.sin_cos();
                    rotate_pair(&mut l, j, kk, co, s);
                    rotate_pair(&mut rot, j, kk, co, s);
                }
            }
        }
        let next = varimax_criterion(&l);
        trace.push(next);
        let gain = next - crit;
        crit = next;
        if gain < opts.criterion_tol && max_angle < opts.angle_tol {
            return Ok((l, rot));
        }
    }
    Err(trace)
}

/// Orthogonal R maximising the varimax criterion of ΛR. Returns (ΛR, R).
pub fn varimax(lambda: &DMatrix<f64>, opts: &VarimaxOptions) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let (d, k) = lambda.shape();
    if k == 0 {
        return Ok((lambda.clone(), DMatrix::zeros(0, 0)));
    }
    if d < k {
        return Err(BefaError::InvalidArgument(format!(
            "varimax needs D ≥ K, got D = {d}, K = {k}"
        )));
    }
    if !has_full_column_rank(lambda, RANK_TOL) {
        return Err(BefaError::InvalidArgument(
            "varimax input is rank deficient".into(),
        ));
    }
    let norms: Vec<f64> = if opts.normalize {
        lambda.row_iter().map(|r| r.norm()).collect()
    } else {
        vec![1.0; d]
    };
    let mut work = lambda.clone();
    for (i, n) in norms.iter().enumerate() {
        if *n > 0.0 {
            work.row_mut(i).unscale_mut(*n);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut start = DMatrix::identity(k, k);
    let mut last_trace = Vec::new();
    for _ in 0..=opts.restarts {
        match varimax_from(&work, start, opts) {
            Ok((_, rot)) => {
                let lv = lambda * &rot;
                return Ok((lv, rot));
            }
            Err(trace) => {
                last_trace = trace;
                start = random_orthogonal(k, &mut rng);
            }
        }
    }
    let tail = last_trace.len().saturating_sub(5);
    Err(BefaError::VarimaxNonConvergence {
        iterations: opts.max_sweeps * (opts.restarts + 1),
        trace: last_trace[tail..].to_vec(),
    })
}

/// A K × K permutation matrix with ±1 entries, stored as `T[perm[k], k] =
/// signs[k]`: column k of ΛT is `signs[k]` times column `perm[k]` of Λ.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SignedPermutation {
    pub perm: Vec<usize>,
    pub signs: Vec<i8>,
}

impl SignedPermutation {
    pub fn identity(k: usize) -> Self {
        SignedPermutation {
            perm: (0..k).collect(),
            signs: vec![1; k],
        }
    }

    pub fn k(&self) -> usize {
        self.perm.len()
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        let k = self.k();
        let mut t = DMatrix::zeros(k, k);
        for (col, (&p, &s)) in self.perm.iter().zip(&self.signs).enumerate() {
            t[(p, col)] = s as f64;
        }
        t
    }

    /// Λ T.
    pub fn apply(&self, lambda: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(lambda.nrows(), self.k());
        for (col, (&p, &s)) in self.perm.iter().zip(&self.signs).enumerate() {
            out.set_column(col, &(lambda.column(p) * s as f64));
        }
        out
    }

    /// The product `self · other` as matrices.
    pub fn then(&self, other: &SignedPermutation) -> SignedPermutation {
        // (A B)[:, c] = A[:, perm_b[c]] * s_b[c] = s_a[perm_b[c]] s_b[c] e_{perm_a[perm_b[c]]}
        let perm = other.perm.iter().map(|&p| self.perm[p]).collect();
        let signs = other
            .perm
            .iter()
            .zip(&other.signs)
            .map(|(&p, &s)| self.signs[p] * s)
            .collect();
        SignedPermutation { perm, signs }
    }

    pub fn transpose(&self) -> SignedPermutation {
        let k = self.k();
        let mut perm = vec![0; k];
        let mut signs = vec![1; k];
        for (col, (&p, &s)) in self.perm.iter().zip(&self.signs).enumerate() {
            perm[p] = col;
            signs[p] = s;
        }
        SignedPermutation { perm, signs }
    }

    /// Compact text form, e.g. `+2 -1` (1-based source columns).
    pub fn render(&self) -> String {
        self.perm
            .iter()
            .zip(&self.signs)
            .map(|(p, s)| format!("{}{}", if *s > 0 { '+' } else { '-' }, p + 1))
            .join(" ")
    }
}

/// All 2^K K! signed permutations: permutations in lexicographic order,
/// each with sign patterns in binary order (bit k set flips column k).
pub fn enumerate_signed_perms(k: usize) -> Result<Vec<SignedPermutation>> {
    if k > ENUMERATION_CAP {
        return Err(BefaError::InvalidArgument(format!(
            "K = {k} exceeds the signed-permutation enumeration cap of {ENUMERATION_CAP}"
        )));
    }
    let mut out = Vec::new();
    for perm in (0..k).permutations(k) {
        for mask in 0..(1u32 << k) {
            let signs = (0..k).map(|b| if mask >> b & 1 == 1 { -1 } else { 1 }).collect();
            out.push(SignedPermutation {
                perm: perm.clone(),
                signs,
            });
        }
    }
    Ok(out)
}

fn sq_distance(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Signed permutation T minimising tr[(target − candidate T)'(target − candidate T)],
/// with ties resolved to the first minimiser in enumeration order.
pub fn best_orientation(target: &DMatrix<f64>, candidate: &DMatrix<f64>) -> Result<(SignedPermutation, f64)> {
    if target.shape() != candidate.shape() {
        return Err(BefaError::InvalidArgument(format!(
            "shape mismatch: target {:?}, candidate {:?}",
            target.shape(),
            candidate.shape()
        )));
    }
    let k = target.ncols();
    if k > ENUMERATION_CAP {
        return Err(BefaError::InvalidArgument(format!(
            "K = {k} exceeds the signed-permutation enumeration cap of {ENUMERATION_CAP}"
        )));
    }
    // distance = ‖target‖² + ‖candidate‖² − 2 Σ_k s_k C[perm[k], k]
    let c = candidate.transpose() * target;
    let mut best: Option<(f64, SignedPermutation)> = None;
    for perm in (0..k).permutations(k) {
        let mut score = 0.0;
        let mut signs = Vec::with_capacity(k);
        for (col, &p) in perm.iter().enumerate() {
            let v = c[(p, col)];
            // a zero entry ties both signs; + comes first in enumeration order
            if v < 0.0 {
                signs.push(-1);
                score -= v;
            } else {
                signs.push(1);
                score += v;
            }
        }
        if best.as_ref().is_none_or(|(s, _)| score > *s) {
            best = Some((score, SignedPermutation { perm, signs }));
        }
    }
    let t = best.map(|b| b.1).unwrap_or_else(|| SignedPermutation::identity(0));
    let dist = sq_distance(target, &t.apply(candidate));
    Ok((t, dist))
}

/// Sign convention applied after alignment.
#[derive(Clone, Debug, Default, PartialEq)]
pub enum SignConvention {
    /// Each column of the mean loadings has a nonnegative sum.
    #[default]
    ColumnSum,
    /// Factor k (0-based, after ordering) loads nonnegatively on the given
    /// dimension; unlisted factors fall back to the column-sum rule.
    Anchors(Vec<(usize, usize)>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignOptions {
    pub seed: u64,
    pub max_passes: usize,
    pub signs: SignConvention,
}

impl Default for AlignOptions {
    fn default() -> Self {
        AlignOptions {
            seed: 0,
            max_passes: 100,
            signs: SignConvention::ColumnSum,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Alignment {
    /// Λ_Fb.
    pub aligned: Vec<DMatrix<f64>>,
    /// T_b with Λ_Fb = Λ_Vb T_b, including the final relabelling.
    pub orientations: Vec<SignedPermutation>,
    pub pivot_index: usize,
    /// Pivot used in each pass.
    pub pivot_history: Vec<DMatrix<f64>>,
    /// Draws whose decision changed, per pass after the first.
    pub changes: Vec<usize>,
    /// Global relabelling applied after convergence.
    pub relabel: SignedPermutation,
}

impl Alignment {
    pub fn passes(&self) -> usize {
        self.pivot_history.len()
    }

    pub fn mean(&self) -> DMatrix<f64> {
        mean_matrix(&self.aligned)
    }
}

pub fn mean_matrix(ms: &[DMatrix<f64>]) -> DMatrix<f64> {
    let mut acc = DMatrix::zeros(ms[0].nrows(), ms[0].ncols());
    for m in ms {
        acc += m;
    }
    acc / ms.len() as f64
}

/// Column order (decreasing sum of squares) and sign choice for the mean.
fn final_relabel(mean: &DMatrix<f64>, signs: &SignConvention) -> Result<SignedPermutation> {
    let k = mean.ncols();
    let ss: Vec<f64> = mean.column_iter().map(|c| c.norm_squared()).collect();
    let mut perm: Vec<usize> = (0..k).collect();
    perm.sort_by(|&a, &b| ss[b].total_cmp(&ss[a]));
    let mut out = Vec::with_capacity(k);
    for (col, &p) in perm.iter().enumerate() {
        let column = mean.column(p);
        let anchor = match signs {
            SignConvention::Anchors(list) => list.iter().find(|(_, f)| *f == col).map(|(d, _)| *d),
            SignConvention::ColumnSum => None,
        };
        let value = match anchor {
            Some(d) if d >= mean.nrows() => {
                return Err(BefaError::InvalidArgument(format!(
                    "anchor dimension {d} out of range for {} dimensions",
                    mean.nrows()
                )))
            }
            Some(d) => column[d],
            None => column.sum(),
        };
        out.push(if value < 0.0 { -1 } else { 1 });
    }
    if let SignConvention::Anchors(list) = signs {
        if let Some((_, f)) = list.iter().find(|(_, f)| *f >= k) {
            return Err(BefaError::InvalidArgument(format!(
                "anchor factor {} out of range for K = {k}",
                f + 1
            )));
        }
    }
    Ok(SignedPermutation { perm, signs: out })
}

/// Reorient every draw to a common pivot: start from a random draw, align
/// all draws to it, replace the pivot by the mean of the aligned draws and
/// repeat until no decision changes.
pub fn align(draws: &[DMatrix<f64>], opts: &AlignOptions) -> Result<Alignment> {
    if draws.is_empty() {
        return Err(BefaError::InvalidArgument("align needs at least one draw".into()));
    }
    let shape = draws[0].shape();
    if let Some(bad) = draws.iter().find(|d| d.shape() != shape) {
        return Err(BefaError::InvalidArgument(format!(
            "draws differ in shape: {shape:?} vs {:?}",
            bad.shape()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let pivot_index = rng.random_range(0..draws.len());
    let mut pivot = draws[pivot_index].clone();
    let mut pivot_history = Vec::new();
    let mut changes = Vec::new();
    let mut previous: Option<Vec<SignedPermutation>> = None;
    loop {
        if pivot_history.len() == opts.max_passes {
            return Err(BefaError::AlignNonConvergence {
                passes: opts.max_passes,
                changes,
            });
        }
        pivot_history.push(pivot.clone());
        let decisions: Vec<SignedPermutation> = draws
            .par_iter()
            .map(|d| best_orientation(&pivot, d).map(|(t, _)| t))
            .collect::<Result<_>>()?;
        let aligned: Vec<DMatrix<f64>> = draws
            .iter()
            .zip(&decisions)
            .map(|(d, t)| t.apply(d))
            .collect();
        if let Some(prev) = &previous {
            let n = prev.iter().zip(&decisions).filter(|(a, b)| a != b).count();
            changes.push(n);
            if n == 0 {
                let relabel = final_relabel(&mean_matrix(&aligned), &opts.signs)?;
                let orientations: Vec<SignedPermutation> =
                    decisions.iter().map(|t| t.then(&relabel)).collect();
                let aligned = aligned.iter().map(|a| relabel.apply(a)).collect();
                return Ok(Alignment {
                    aligned,
                    orientations,
                    pivot_index,
                    pivot_history,
                    changes,
                    relabel,
                });
            }
        }
        pivot = mean_matrix(&aligned);
        previous = Some(decisions);
    }
}

/// η_F = Λ_F' Λ (Λ'Λ)⁻¹ η with scores stored one teacher per row, so that
/// Λ_F η_F = Λ η.
pub fn rotate_scores(lambda: &DMatrix<f64>, lambda_f: &DMatrix<f64>, eta: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !has_full_column_rank(lambda, RANK_TOL) {
        return Err(BefaError::InvalidArgument(
            "score rotation needs full-column-rank loadings".into(),
        ));
    }
    let gram = lambda.transpose() * lambda;
    let inv = gram
        .cholesky()
        .ok_or_else(|| BefaError::Numerical("Λ'Λ is not positive definite".into()))?
        .inverse();
    // row form: η_F' = η' (Λ'Λ)⁻¹ Λ' Λ_F
    Ok(eta * inv * lambda.transpose() * lambda_f)
}

#[derive(Clone, Debug, PartialEq)]
pub struct IdentifiedPosterior {
    /// Λ_Vb.
    pub varimax: Vec<DMatrix<f64>>,
    /// R_V per draw.
    pub rotations: Vec<DMatrix<f64>>,
    pub alignment: Alignment,
    /// η_Fb, one teacher per row.
    pub scores: Vec<DMatrix<f64>>,
}

impl IdentifiedPosterior {
    pub fn loadings(&self) -> &[DMatrix<f64>] {
        &self.alignment.aligned
    }

    pub fn mean_loadings(&self) -> DMatrix<f64> {
        self.alignment.mean()
    }

    pub fn mean_scores(&self) -> DMatrix<f64> {
        mean_matrix(&self.scores)
    }
}

/// Varimax, align and rotate scores for every draw of an archive.
pub fn identify_archive(
    archive: &DrawArchive,
    varimax_opts: &VarimaxOptions,
    align_opts: &AlignOptions,
) -> Result<IdentifiedPosterior> {
    if archive.k() == 0 {
        return Err(BefaError::InvalidArgument(
            "nothing to identify for a K = 0 fit".into(),
        ));
    }
    let rotated: Vec<(DMatrix<f64>, DMatrix<f64>)> = archive
        .draws
        .par_iter()
        .map(|d| varimax(&d.loadings, varimax_opts))
        .collect::<Result<_>>()?;
    let (varimax, rotations): (Vec<_>, Vec<_>) = rotated.into_iter().unzip();
    let alignment = align(&varimax, align_opts)?;
    let scores = archive
        .draws
        .par_iter()
        .zip(alignment.aligned.par_iter())
        .map(|(d, lf)| rotate_scores(&d.loadings, lf, &d.scores))
        .collect::<Result<_>>()?;
    Ok(IdentifiedPosterior {
        varimax,
        rotations,
        alignment,
        scores,
    })
}
