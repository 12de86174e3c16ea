//! Retained posterior draws, in memory and as a directory of CSV files.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::DMatrix;

use crate::effects::communality;
use crate::error::{BefaError, Result};
use crate::kv::KvFile;

/// Posterior summaries of the nuisance blocks: diagonals of the implied
/// covariance matrices, in global dimension order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct VarianceSummary {
    pub section: Vec<f64>,
    pub lesson: Vec<f64>,
    pub rater: Vec<f64>,
    pub rater_lesson: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Draw {
    pub chain: usize,
    pub iter: usize,
    /// Identified-scale Λ, D × K.
    pub loadings: DMatrix<f64>,
    pub uniqueness: Vec<f64>,
    /// Identified-scale η, teacher × K.
    pub scores: DMatrix<f64>,
    /// Finite cutpoints per global dimension.
    pub cutpoints: Vec<Vec<f64>>,
    pub variances: VarianceSummary,
    /// log f(y_i | parameters) per scoring event, in dataset event order.
    pub loglik: Vec<f64>,
}

impl Draw {
    pub fn communality(&self) -> DMatrix<f64> {
        communality(&self.loadings)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArchiveMeta {
    pub k: usize,
    pub dim_labels: Vec<String>,
    /// Level count per global dimension.
    pub levels: Vec<usize>,
    pub teacher_ids: Vec<String>,
    pub event_ids: Vec<String>,
    pub seeds: Vec<u64>,
    pub n_iter: usize,
    pub n_burn: usize,
    pub thin: usize,
}

impl ArchiveMeta {
    pub fn n_dims(&self) -> usize {
        self.dim_labels.len()
    }

    pub fn n_chains(&self) -> usize {
        self.seeds.len()
    }

    pub fn draws_per_chain(&self) -> usize {
        (self.n_iter - self.n_burn) / self.thin
    }
}

/// Merged draws of all chains, ordered by chain then iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct DrawArchive {
    pub meta: ArchiveMeta,
    pub draws: Vec<Draw>,
}

fn csv_header(names: impl Iterator<Item = String>) -> Vec<String> {
    let mut h = vec!["chain".to_string(), "iter".to_string()];
    h.extend(names);
    h
}

fn join_list<T: ToString>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn split_list<T: std::str::FromStr>(s: &str, key: &str) -> Result<Vec<T>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|x| {
            x.trim()
                .parse()
                .map_err(|_| BefaError::Archive(format!("meta key {key}: bad entry {x:?}")))
        })
        .collect()
}

impl DrawArchive {
    pub fn k(&self) -> usize {
        self.meta.k
    }

    pub fn chain_draws(&self, chain: usize) -> impl Iterator<Item = &Draw> {
        self.draws.iter().filter(move |d| d.chain == chain)
    }

    /// Elementwise posterior mean of Q.
    pub fn mean_communality(&self) -> DMatrix<f64> {
        let d = self.meta.n_dims();
        let mut acc = DMatrix::zeros(d, d);
        for draw in &self.draws {
            acc += draw.communality();
        }
        acc / self.draws.len().max(1) as f64
    }

    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| BefaError::io(dir, e))?;
        let m = &self.meta;
        let d = m.n_dims();
        let k = m.k;
        let mut kv = KvFile::default();
        kv.push("K", k.to_string());
        kv.push("dims", d.to_string());
        kv.push("dim_labels", join_list(&m.dim_labels));
        kv.push("levels", join_list(&m.levels));
        kv.push("teachers", m.teacher_ids.len().to_string());
        kv.push("events", m.event_ids.len().to_string());
        kv.push("chains", m.n_chains().to_string());
        kv.push("seeds", join_list(&m.seeds));
        kv.push("n_iter", m.n_iter.to_string());
        kv.push("n_burn", m.n_burn.to_string());
        kv.push("thin", m.thin.to_string());
        kv.push("draws", self.draws.len().to_string());
        kv.write(&dir.join("meta"))?;

        let write_ids = |name: &str, ids: &[String]| -> Result<()> {
            let path = dir.join(name);
            let mut w = csv::Writer::from_path(&path)?;
            w.write_record(["id"])?;
            for id in ids {
                w.write_record([id])?;
            }
            w.flush().map_err(|e| BefaError::io(&path, e))
        };
        write_ids("teachers.csv", &m.teacher_ids)?;
        write_ids("events.csv", &m.event_ids)?;

        let max_cut = m.levels.iter().map(|l| l - 1).collect::<Vec<_>>();
        let blocks: Vec<(&str, Vec<String>, Box<dyn Fn(&Draw) -> Vec<f64>>)> = vec![
            (
                "loadings.csv",
                (0..d)
                    .flat_map(|i| (0..k).map(move |j| format!("lambda_{}_{}", i + 1, j + 1)))
                    .collect(),
                Box::new(|dr: &Draw| dr.loadings.transpose().iter().copied().collect()),
            ),
            (
                "uniqueness.csv",
                (0..d).map(|i| format!("u_{}", i + 1)).collect(),
                Box::new(|dr: &Draw| dr.uniqueness.clone()),
            ),
            (
                "communality.csv",
                (0..d)
                    .flat_map(|i| (0..d).map(move |j| format!("q_{}_{}", i + 1, j + 1)))
                    .collect(),
                Box::new(|dr: &Draw| dr.communality().transpose().iter().copied().collect()),
            ),
            (
                "scores.csv",
                (0..m.teacher_ids.len())
                    .flat_map(|i| (0..k).map(move |j| format!("eta_{}_{}", i + 1, j + 1)))
                    .collect(),
                Box::new(|dr: &Draw| dr.scores.transpose().iter().copied().collect()),
            ),
            (
                "cutpoints.csv",
                max_cut
                    .iter()
                    .enumerate()
                    .flat_map(|(i, &n)| (0..n).map(move |l| format!("gamma_{}_{}", i + 1, l + 1)))
                    .collect(),
                Box::new(|dr: &Draw| dr.cutpoints.concat()),
            ),
            (
                "variances.csv",
                ["section", "lesson", "rater", "rater_lesson"]
                    .iter()
                    .flat_map(|b| (0..d).map(move |i| format!("{b}_{}", i + 1)))
                    .collect(),
                Box::new(|dr: &Draw| {
                    let v = &dr.variances;
                    [&v.section, &v.lesson, &v.rater, &v.rater_lesson]
                        .iter()
                        .flat_map(|x| x.iter().copied())
                        .collect()
                }),
            ),
        ];
        for (name, cols, get) in blocks {
            let path = dir.join(name);
            let mut w = csv::Writer::from_path(&path)?;
            w.write_record(csv_header(cols.into_iter()))?;
            for dr in &self.draws {
                let mut row = vec![dr.chain.to_string(), dr.iter.to_string()];
                row.extend(get(dr).iter().map(|v| v.to_string()));
                w.write_record(&row)?;
            }
            w.flush().map_err(|e| BefaError::io(&path, e))?;
        }

        let path = dir.join("loglik.csv");
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["chain", "iter", "event_id", "loglik"])?;
        for dr in &self.draws {
            let chain = dr.chain.to_string();
            let iter = dr.iter.to_string();
            for (id, ll) in m.event_ids.iter().zip(&dr.loglik) {
                w.write_record([chain.as_str(), iter.as_str(), id.as_str(), ll.to_string().as_str()])?;
            }
        }
        w.flush().map_err(|e| BefaError::io(&path, e))?;
        Ok(())
    }

    pub fn read_dir(dir: &Path) -> Result<DrawArchive> {
        let kv = KvFile::read(&dir.join("meta"))?;
        let k: usize = kv.require_parse("K")?;
        let d: usize = kv.require_parse("dims")?;
        let dim_labels: Vec<String> = split_list(kv.require("dim_labels")?, "dim_labels")?;
        let levels: Vec<usize> = split_list(kv.require("levels")?, "levels")?;
        if dim_labels.len() != d || levels.len() != d {
            return Err(BefaError::Archive(format!(
                "meta lists {} labels and {} level counts for {d} dimensions",
                dim_labels.len(),
                levels.len()
            )));
        }
        let read_ids = |name: &str| -> Result<Vec<String>> {
            let path = dir.join(name);
            let mut r = csv::Reader::from_path(&path)?;
            r.records()
                .map(|rec| Ok(rec?.get(0).unwrap_or_default().to_string()))
                .collect()
        };
        let meta = ArchiveMeta {
            k,
            dim_labels,
            levels,
            teacher_ids: read_ids("teachers.csv")?,
            event_ids: read_ids("events.csv")?,
            seeds: split_list(kv.require("seeds")?, "seeds")?,
            n_iter: kv.require_parse("n_iter")?,
            n_burn: kv.require_parse("n_burn")?,
            thin: kv.require_parse("thin")?,
        };
        let n_teach = meta.teacher_ids.len();
        let n_cut: usize = meta.levels.iter().map(|l| l - 1).sum();

        // block name -> rows of (chain, iter, values)
        let read_block = |name: &str, width: usize| -> Result<Vec<(usize, usize, Vec<f64>)>> {
            let path = dir.join(name);
            let mut r = csv::Reader::from_path(&path)?;
            let mut out = Vec::new();
            for (line, rec) in r.records().enumerate() {
                let rec = rec?;
                if rec.len() != width + 2 {
                    return Err(BefaError::Archive(format!(
                        "{name} row {}: expected {} columns, found {}",
                        line + 2,
                        width + 2,
                        rec.len()
                    )));
                }
                let parse_err = |s: &str| {
                    BefaError::Archive(format!("{name} row {}: bad number {s:?}", line + 2))
                };
                let chain = rec[0].parse().map_err(|_| parse_err(&rec[0]))?;
                let iter = rec[1].parse().map_err(|_| parse_err(&rec[1]))?;
                let vals = rec
                    .iter()
                    .skip(2)
                    .map(|s| s.parse::<f64>().map_err(|_| parse_err(s)))
                    .collect::<Result<Vec<_>>>()?;
                out.push((chain, iter, vals));
            }
            Ok(out)
        };
        let loadings = read_block("loadings.csv", d * k)?;
        let uniq = read_block("uniqueness.csv", d)?;
        let scores = read_block("scores.csv", n_teach * k)?;
        let cuts = read_block("cutpoints.csv", n_cut)?;
        let vars = read_block("variances.csv", 4 * d)?;
        let n = loadings.len();
        if [uniq.len(), scores.len(), cuts.len(), vars.len()].iter().any(|&x| x != n) {
            return Err(BefaError::Archive("parameter blocks hold different draw counts".into()));
        }

        let mut index: HashMap<(usize, usize), usize> = HashMap::new();
        let mut draws = Vec::with_capacity(n);
        for i in 0..n {
            let (chain, iter, ref lv) = loadings[i];
            for (name, other) in [("uniqueness", &uniq[i]), ("scores", &scores[i]), ("cutpoints", &cuts[i]), ("variances", &vars[i])] {
                if (other.0, other.1) != (chain, iter) {
                    return Err(BefaError::Archive(format!(
                        "{name}.csv row {} does not match loadings (chain {chain}, iter {iter})",
                        i + 2
                    )));
                }
            }
            let mut cutpoints = Vec::with_capacity(d);
            let mut pos = 0;
            for l in &meta.levels {
                cutpoints.push(cuts[i].2[pos..pos + l - 1].to_vec());
                pos += l - 1;
            }
            let v = &vars[i].2;
            index.insert((chain, iter), i);
            draws.push(Draw {
                chain,
                iter,
                loadings: DMatrix::from_row_slice(d, k, lv),
                uniqueness: uniq[i].2.clone(),
                scores: DMatrix::from_row_slice(n_teach, k, &scores[i].2),
                cutpoints,
                variances: VarianceSummary {
                    section: v[..d].to_vec(),
                    lesson: v[d..2 * d].to_vec(),
                    rater: v[2 * d..3 * d].to_vec(),
                    rater_lesson: v[3 * d..].to_vec(),
                },
                loglik: vec![f64::NAN; meta.event_ids.len()],
            });
        }

        let event_pos: HashMap<&str, usize> = meta
            .event_ids
            .iter()
            .enumerate()
            .map(|(i, e)| (e.as_str(), i))
            .collect();
        let path = dir.join("loglik.csv");
        let mut r = csv::Reader::from_path(&path)?;
        let mut seen = 0usize;
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            let bad = || BefaError::Archive(format!("loglik.csv row {}: malformed", line + 2));
            if rec.len() != 4 {
                return Err(bad());
            }
            let chain: usize = rec[0].parse().map_err(|_| bad())?;
            let iter: usize = rec[1].parse().map_err(|_| bad())?;
            let ev = *event_pos.get(&rec[2]).ok_or_else(bad)?;
            let ll: f64 = rec[3].parse().map_err(|_| bad())?;
            let di = *index.get(&(chain, iter)).ok_or_else(bad)?;
            draws[di].loglik[ev] = ll;
            seen += 1;
        }
        if seen != n * meta.event_ids.len() {
            return Err(BefaError::Archive(format!(
                "loglik.csv holds {seen} rows, expected {}",
                n * meta.event_ids.len()
            )));
        }
        Ok(DrawArchive { meta, draws })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn toy_archive() -> DrawArchive {
        let meta = ArchiveMeta {
            k: 2,
            dim_labels: vec!["P:a".into(), "P:b".into(), "Q:c".into()],
            levels: vec![3, 3, 2],
            teacher_ids: vec!["t1".into(), "t2".into()],
            event_ids: vec!["e1".into(), "e2".into()],
            seeds: vec![7, 8],
            n_iter: 4,
            n_burn: 2,
            thin: 1,
        };
        let mut draws = Vec::new();
        for chain in 0..2 {
            for iter in 2..4 {
                let x = (chain * 10 + iter) as f64;
                draws.push(Draw {
                    chain,
                    iter,
                    loadings: DMatrix::from_fn(3, 2, |i, j| x + 0.1 * i as f64 - 1.0 / 3.0 * j as f64),
                    uniqueness: vec![0.1 * x, 0.2, 1e-17],
                    scores: DMatrix::from_fn(2, 2, |i, j| (i + j) as f64 / 7.0),
                    cutpoints: vec![vec![0.5, 1.5], vec![0.25, 2.0 / 3.0], vec![std::f64::consts::PI]],
                    variances: VarianceSummary {
                        section: vec![1.0, 2.0, 3.0],
                        lesson: vec![0.1; 3],
                        rater: vec![0.2; 3],
                        rater_lesson: vec![0.3; 3],
                    },
                    loglik: vec![-0.1 * x, -1.0 / 3.0],
                });
            }
        }
        DrawArchive { meta, draws }
    }

    #[test]
    fn directory_round_trip_is_exact() {
        let a = toy_archive();
        let dir = tempfile::tempdir().unwrap();
        a.write_dir(dir.path()).unwrap();
        let b = DrawArchive::read_dir(dir.path()).unwrap();
        assert_eq!(a, b);
        let meta = std::fs::read_to_string(dir.path().join("meta")).unwrap();
        assert!(meta.contains("K = 2") || meta.contains("K=2"), "{meta}");
        let ll = std::fs::read_to_string(dir.path().join("loglik.csv")).unwrap();
        assert!(ll.starts_with("chain,iter,event_id,loglik"));
        assert_eq!(ll.lines().count(), 1 + 4 * 2);
    }

    #[test]
    fn truncated_loglik_is_rejected() {
        let a = toy_archive();
        let dir = tempfile::tempdir().unwrap();
        a.write_dir(dir.path()).unwrap();
        let p = dir.path().join("loglik.csv");
        let text = std::fs::read_to_string(&p).unwrap();
        let cut: Vec<&str> = text.lines().take(4).collect();
        std::fs::write(&p, cut.join("\n")).unwrap();
        assert!(matches!(DrawArchive::read_dir(dir.path()), Err(BefaError::Archive(_))));
    }

    #[test]
    fn mean_communality_averages_draws() {
        let a = toy_archive();
        let mut expect = DMatrix::zeros(3, 3);
        for d in &a.draws {
            expect += &d.loadings * d.loadings.transpose();
        }
        expect /= 4.0;
        assert!(crate::linalg::max_abs_diff(&a.mean_communality(), &expect) < 1e-12);
        assert_eq!(a.meta.draws_per_chain(), 2);
    }
}
