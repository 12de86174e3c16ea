//! Flattened view of the observed (event, dimension) scores used by the
//! sampler.

use crate::data::RatingDataset;
use crate::effects::ZetaCells;

/// One observed score with every index the sampler needs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Observation {
    pub event: u32,
    /// Global dimension position.
    pub dim: u16,
    /// Position within the event's protocol.
    pub local: u16,
    /// Observed level, 1-based.
    pub level: u16,
    pub teacher: u32,
    pub section: u32,
    pub lesson: u32,
    pub rater: u32,
    pub cell: u32,
}

#[derive(Clone, Debug)]
pub struct ObsLayout {
    pub obs: Vec<Observation>,
    pub n_dims: usize,
    pub n_events: usize,
    pub levels: Vec<usize>,
    /// Observations of event `e` occupy `event_start[e]..event_start[e + 1]`.
    pub event_start: Vec<usize>,
    /// Observation indices per dimension, sorted by level.
    pub(crate) by_dim: Vec<Vec<u32>>,
    /// `level_start[g][y - 1]`: first position in `by_dim[g]` with level ≥ y.
    pub(crate) level_start: Vec<Vec<usize>>,
    pub(crate) teacher_n: Vec<f64>,
    pub(crate) section_n: Vec<f64>,
    pub(crate) lesson_n: Vec<f64>,
    pub(crate) rater_n: Vec<f64>,
    /// Observation counts per rater-by-lesson cell, flattened with `zeta_offset`.
    pub(crate) zeta_n: Vec<f64>,
    pub(crate) zeta_offset: Vec<usize>,
    pub zeta_cells: ZetaCells,
}

impl ObsLayout {
    pub fn new(ds: &RatingDataset) -> Self {
        let d = ds.n_dims();
        let levels = ds.dim_levels();
        let cells = ZetaCells::from_dataset(ds);
        let mut zeta_offset = Vec::with_capacity(cells.len() + 1);
        zeta_offset.push(0);
        for &(_, _, p) in &cells.cells {
            zeta_offset.push(zeta_offset.last().unwrap() + ds.protocols()[p].n_dims());
        }

        let mut obs = Vec::new();
        let mut event_start = Vec::with_capacity(ds.events().len() + 1);
        for (e, ev) in ds.events().iter().enumerate() {
            event_start.push(obs.len());
            let cell = cells.of_event[e];
            for (local, s) in ev.scores.iter().enumerate() {
                if let Some(y) = s {
                    obs.push(Observation {
                        event: e as u32,
                        dim: ds.global_dim(ev.protocol, local) as u16,
                        local: local as u16,
                        level: *y,
                        teacher: ev.teacher as u32,
                        section: ev.section as u32,
                        lesson: ev.lesson as u32,
                        rater: ev.rater as u32,
                        cell: cell as u32,
                    });
                }
            }
        }

        event_start.push(obs.len());
        let mut by_dim: Vec<Vec<u32>> = vec![Vec::new(); d];
        for (i, o) in obs.iter().enumerate() {
            by_dim[o.dim as usize].push(i as u32);
        }
        let mut level_start = Vec::with_capacity(d);
        for (g, idx) in by_dim.iter_mut().enumerate() {
            idx.sort_by_key(|&i| obs[i as usize].level);
            let starts: Vec<usize> = (1..=levels[g] + 1)
                .map(|y| idx.partition_point(|&i| (obs[i as usize].level as usize) < y))
                .collect();
            level_start.push(starts);
        }

        let count = |units: usize, key: &dyn Fn(&Observation) -> usize| {
            let mut n = vec![0.0; units * d];
            for o in &obs {
                n[key(o) * d + o.dim as usize] += 1.0;
            }
            n
        };
        let teacher_n = count(ds.teachers().len(), &|o| o.teacher as usize);
        let section_n = count(ds.sections().len(), &|o| o.section as usize);
        let lesson_n = count(ds.lessons().len(), &|o| o.lesson as usize);
        let rater_n = count(ds.raters().len(), &|o| o.rater as usize);
        let mut zeta_n = vec![0.0; *zeta_offset.last().unwrap()];
        for o in &obs {
            zeta_n[zeta_offset[o.cell as usize] + o.local as usize] += 1.0;
        }

        ObsLayout {
            obs,
            n_dims: d,
            n_events: ds.events().len(),
            levels,
            event_start,
            by_dim,
            level_start,
            teacher_n,
            section_n,
            lesson_n,
            rater_n,
            zeta_n,
            zeta_offset,
            zeta_cells: cells,
        }
    }

    /// Observed count of each level per dimension, `[g][y - 1]`.
    pub fn level_counts(&self) -> Vec<Vec<usize>> {
        self.level_start
            .iter()
            .map(|s| s.windows(2).map(|w| w[1] - w[0]).collect())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{simulate, TruthConfig};

    #[test]
    fn layout_counts_agree_with_dataset() {
        let mut cfg = TruthConfig::desk_default();
        cfg.teachers = 10;
        let (ds, _) = simulate(&cfg).unwrap();
        let lay = ObsLayout::new(&ds);
        assert_eq!(lay.obs.len(), ds.events().len() * 4);
        assert_eq!(lay.level_counts(), ds.score_counts());
        for (g, idx) in lay.by_dim.iter().enumerate() {
            assert!(idx.windows(2).all(|w| lay.obs[w[0] as usize].level <= lay.obs[w[1] as usize].level));
            assert!(idx.iter().all(|&i| lay.obs[i as usize].dim as usize == g));
        }
        let total: f64 = lay.teacher_n.iter().sum();
        assert_eq!(total as usize, lay.obs.len());
        assert_eq!(lay.zeta_n.iter().sum::<f64>() as usize, lay.obs.len());
    }
}
