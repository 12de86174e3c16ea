//! Rating dataset schema: protocols, scoring events, and the
//! teacher > section > lesson > segment hierarchy with crossed raters.
//!
//! Ids are opaque strings on disk and dense indices everywhere else. The
//! global dimension order is the concatenation of protocol dimensions in
//! schema order unless [`RatingDataset::permute_dimensions`] was applied;
//! the permutation is kept in [`RatingDataset::dim_origin`].

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use crate::error::{BefaError, Result};
use crate::kv::KvFile;

/// Sentinel for a missing dimension score.
pub const MISSING: &str = "NA";

pub const LONG_HEADER: [&str; 9] = [
    "event_id",
    "teacher_id",
    "section_id",
    "lesson_id",
    "segment_id",
    "rater_id",
    "protocol",
    "dimension",
    "score",
];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProtocolDef {
    pub name: String,
    pub dims: Vec<String>,
    /// Scores run 1..=levels.
    pub levels: usize,
}

impl ProtocolDef {
    pub fn new(name: impl Into<String>, dims: Vec<String>, levels: usize) -> Result<Self> {
        let name = name.into();
        if name.is_empty() {
            return Err(BefaError::Schema("protocol name is empty".into()));
        }
        if dims.is_empty() {
            return Err(BefaError::Schema(format!("protocol {name} has no dimensions")));
        }
        let unique: BTreeSet<_> = dims.iter().collect();
        if unique.len() != dims.len() {
            return Err(BefaError::Schema(format!(
                "protocol {name} repeats a dimension name"
            )));
        }
        if dims.iter().any(|d| d.is_empty()) {
            return Err(BefaError::Schema(format!(
                "protocol {name} has an empty dimension name"
            )));
        }
        if !(2..=255).contains(&levels) {
            return Err(BefaError::Schema(format!(
                "protocol {name}: levels must be in 2..=255, got {levels}"
            )));
        }
        Ok(ProtocolDef { name, dims, levels })
    }

    pub fn n_dims(&self) -> usize {
        self.dims.len()
    }
}

/// Parse a schema file:
///
/// ```text
/// protocol = CLASS
/// levels = 7
/// dims = pc, nc, ts
/// ```
///
/// A `protocol` key opens a block; `levels` and `dims` fill it in.
pub fn parse_schema(text: &str) -> Result<Vec<ProtocolDef>> {
    struct Partial {
        name: String,
        levels: Option<usize>,
        dims: Option<Vec<String>>,
        line: u64,
    }
    let kv = KvFile::parse(text)?;
    let mut blocks: Vec<Partial> = Vec::new();
    for e in &kv.entries {
        match e.key.as_str() {
            "protocol" => blocks.push(Partial {
                name: e.value.clone(),
                levels: None,
                dims: None,
                line: e.line,
            }),
            "levels" | "dims" => {
                let b = blocks.last_mut().ok_or_else(|| BefaError::Malformed {
                    line: e.line,
                    message: format!("`{}` before any `protocol`", e.key),
                })?;
                if e.key == "levels" {
                    let l = e.value.parse().map_err(|_| BefaError::Malformed {
                        line: e.line,
                        message: format!("levels must be an integer, got `{}`", e.value),
                    })?;
                    b.levels = Some(l);
                } else {
                    b.dims = Some(
                        e.value
                            .split(',')
                            .map(|s| s.trim().to_string())
                            .filter(|s| !s.is_empty())
                            .collect(),
                    );
                }
            }
            other => {
                return Err(BefaError::Malformed {
                    line: e.line,
                    message: format!("unknown schema key `{other}`"),
                })
            }
        }
    }
    let mut out: Vec<ProtocolDef> = Vec::with_capacity(blocks.len());
    for b in blocks {
        let levels = b.levels.ok_or_else(|| {
            BefaError::Schema(format!("protocol {} (line {}) lacks `levels`", b.name, b.line))
        })?;
        let dims = b.dims.ok_or_else(|| {
            BefaError::Schema(format!("protocol {} (line {}) lacks `dims`", b.name, b.line))
        })?;
        if out.iter().any(|p| p.name == b.name) {
            return Err(BefaError::Schema(format!("protocol {} defined twice", b.name)));
        }
        out.push(ProtocolDef::new(b.name, dims, levels)?);
    }
    Ok(out)
}

pub fn read_schema(path: &Path) -> Result<Vec<ProtocolDef>> {
    let text = std::fs::read_to_string(path).map_err(|e| BefaError::io(path, e))?;
    parse_schema(&text)
}

pub fn render_schema(protocols: &[ProtocolDef]) -> String {
    let mut kv = KvFile::default();
    for p in protocols {
        kv.push("protocol", &p.name);
        kv.push("levels", p.levels);
        kv.push("dims", p.dims.join(", "));
    }
    kv.render()
}

/// Bidirectional map between opaque string ids and dense indices, in order
/// of first appearance.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IdIndex {
    names: Vec<String>,
    lookup: HashMap<String, usize>,
}

impl IdIndex {
    pub fn intern(&mut self, id: &str) -> (usize, bool) {
        if let Some(&i) = self.lookup.get(id) {
            return (i, false);
        }
        let i = self.names.len();
        self.names.push(id.to_string());
        self.lookup.insert(id.to_string(), i);
        (i, true)
    }

    pub fn get(&self, id: &str) -> Option<usize> {
        self.lookup.get(id).copied()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

/// One rater scoring one segment under one protocol. Indices are dense.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScoringEvent {
    pub event_id: String,
    pub teacher: usize,
    pub section: usize,
    pub lesson: usize,
    pub segment: usize,
    pub rater: usize,
    pub protocol: usize,
    /// Scores in the protocol's own dimension order; `None` is missing.
    pub scores: Vec<Option<u16>>,
}

/// An event with string ids, as read from disk or produced by a simulator.
#[derive(Clone, Debug)]
pub struct RawEvent<'a> {
    pub event_id: &'a str,
    pub teacher: &'a str,
    pub section: &'a str,
    pub lesson: &'a str,
    pub segment: &'a str,
    pub rater: &'a str,
    pub protocol: &'a str,
    pub scores: Vec<Option<u16>>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RatingDataset {
    protocols: Vec<ProtocolDef>,
    events: Vec<ScoringEvent>,
    teachers: IdIndex,
    sections: IdIndex,
    lessons: IdIndex,
    segments: IdIndex,
    raters: IdIndex,
    section_teacher: Vec<usize>,
    lesson_section: Vec<usize>,
    segment_lesson: Vec<usize>,
    /// protocol -> local dim -> global position
    dim_position: Vec<Vec<usize>>,
    /// global position -> canonical (schema-order) dimension index
    dim_origin: Vec<usize>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LevelCounts {
    pub events: usize,
    pub teachers: usize,
    pub sections: usize,
    pub lessons: usize,
    pub segments: usize,
    pub raters: usize,
    pub dims: usize,
}

impl RatingDataset {
    pub fn builder(protocols: Vec<ProtocolDef>) -> Result<DatasetBuilder> {
        let names: BTreeSet<_> = protocols.iter().map(|p| p.name.as_str()).collect();
        if names.len() != protocols.len() {
            return Err(BefaError::Schema("duplicate protocol name".into()));
        }
        let mut dim_position = Vec::with_capacity(protocols.len());
        let mut next = 0;
        for p in &protocols {
            dim_position.push((next..next + p.n_dims()).collect());
            next += p.n_dims();
        }
        Ok(DatasetBuilder {
            ds: RatingDataset {
                protocols,
                events: Vec::new(),
                teachers: IdIndex::default(),
                sections: IdIndex::default(),
                lessons: IdIndex::default(),
                segments: IdIndex::default(),
                raters: IdIndex::default(),
                section_teacher: Vec::new(),
                lesson_section: Vec::new(),
                segment_lesson: Vec::new(),
                dim_position,
                dim_origin: (0..next).collect(),
            },
            event_ids: HashMap::new(),
        })
    }

    pub fn protocols(&self) -> &[ProtocolDef] {
        &self.protocols
    }

    pub fn protocol_index(&self, name: &str) -> Option<usize> {
        self.protocols.iter().position(|p| p.name == name)
    }

    pub fn events(&self) -> &[ScoringEvent] {
        &self.events
    }

    pub fn teachers(&self) -> &IdIndex {
        &self.teachers
    }

    pub fn sections(&self) -> &IdIndex {
        &self.sections
    }

    pub fn lessons(&self) -> &IdIndex {
        &self.lessons
    }

    pub fn segments(&self) -> &IdIndex {
        &self.segments
    }

    pub fn raters(&self) -> &IdIndex {
        &self.raters
    }

    pub fn section_teacher(&self) -> &[usize] {
        &self.section_teacher
    }

    pub fn lesson_section(&self) -> &[usize] {
        &self.lesson_section
    }

    pub fn segment_lesson(&self) -> &[usize] {
        &self.segment_lesson
    }

    /// Combined dimension count D.
    pub fn n_dims(&self) -> usize {
        self.dim_origin.len()
    }

    /// Global position of a protocol's local dimension.
    pub fn global_dim(&self, protocol: usize, local: usize) -> usize {
        self.dim_position[protocol][local]
    }

    /// Global positions of all dimensions of a protocol, in local order.
    pub fn protocol_positions(&self, protocol: usize) -> &[usize] {
        &self.dim_position[protocol]
    }

    /// Canonical dimension index held at each global position.
    pub fn dim_origin(&self) -> &[usize] {
        &self.dim_origin
    }

    /// (protocol, local dim) at a global position.
    pub fn dim_at(&self, global: usize) -> (usize, usize) {
        for (p, positions) in self.dim_position.iter().enumerate() {
            if let Some(d) = positions.iter().position(|&g| g == global) {
                return (p, d);
            }
        }
        panic!("global dimension {global} out of range")
    }

    /// `PROTOCOL:dim` label of a global position.
    pub fn dim_label(&self, global: usize) -> String {
        let (p, d) = self.dim_at(global);
        format!("{}:{}", self.protocols[p].name, self.protocols[p].dims[d])
    }

    /// Labels for every global position, in global order.
    pub fn dim_labels(&self) -> Vec<String> {
        (0..self.n_dims()).map(|g| self.dim_label(g)).collect()
    }

    /// Level count L at each global position.
    pub fn dim_levels(&self) -> Vec<usize> {
        (0..self.n_dims())
            .map(|g| self.protocols[self.dim_at(g).0].levels)
            .collect()
    }

    pub fn counts(&self) -> LevelCounts {
        LevelCounts {
            events: self.events.len(),
            teachers: self.teachers.len(),
            sections: self.sections.len(),
            lessons: self.lessons.len(),
            segments: self.segments.len(),
            raters: self.raters.len(),
            dims: self.n_dims(),
        }
    }

    /// Observed score frequencies: `[global dim][level - 1]`.
    pub fn score_counts(&self) -> Vec<Vec<usize>> {
        let levels = self.dim_levels();
        let mut counts: Vec<Vec<usize>> = levels.iter().map(|&l| vec![0; l]).collect();
        for ev in &self.events {
            for (d, s) in ev.scores.iter().enumerate() {
                if let Some(s) = s {
                    counts[self.global_dim(ev.protocol, d)][*s as usize - 1] += 1;
                }
            }
        }
        counts
    }

    /// Reorder the global dimensions: new position `i` holds the dimension
    /// currently at position `perm[i]`.
    pub fn permute_dimensions(&self, perm: &[usize]) -> Result<RatingDataset> {
        let d = self.n_dims();
        if perm.len() != d {
            return Err(BefaError::InvalidArgument(format!(
                "permutation has length {}, dataset has {d} dimensions",
                perm.len()
            )));
        }
        let mut inverse = vec![usize::MAX; d];
        for (i, &p) in perm.iter().enumerate() {
            if p >= d || inverse[p] != usize::MAX {
                return Err(BefaError::InvalidArgument(
                    "dimension permutation is not a bijection".into(),
                ));
            }
            inverse[p] = i;
        }
        let mut out = self.clone();
        for positions in out.dim_position.iter_mut() {
            for g in positions.iter_mut() {
                *g = inverse[*g];
            }
        }
        out.dim_origin = perm.iter().map(|&p| self.dim_origin[p]).collect();
        Ok(out)
    }

    /// Write the long-format CSV (one row per event and dimension).
    pub fn export_long(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(LONG_HEADER)?;
        for ev in &self.events {
            let proto = &self.protocols[ev.protocol];
            for (d, s) in ev.scores.iter().enumerate() {
                let score = s.map_or_else(|| MISSING.to_string(), |v| v.to_string());
                w.write_record([
                    ev.event_id.as_str(),
                    self.teachers.name(ev.teacher),
                    self.sections.name(ev.section),
                    self.lessons.name(ev.lesson),
                    self.segments.name(ev.segment),
                    self.raters.name(ev.rater),
                    proto.name.as_str(),
                    proto.dims[d].as_str(),
                    score.as_str(),
                ])?;
            }
        }
        w.flush().map_err(|e| BefaError::io(path, e))?;
        Ok(())
    }

    /// Write a wide CSV (one row per event, one column per global
    /// dimension) for inspection. Dimensions outside the event's protocol
    /// are left blank.
    pub fn export_wide(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header: Vec<String> = LONG_HEADER[..7].iter().map(|s| s.to_string()).collect();
        header.extend(self.dim_labels());
        w.write_record(&header)?;
        for ev in &self.events {
            let mut row = vec![
                ev.event_id.clone(),
                self.teachers.name(ev.teacher).to_string(),
                self.sections.name(ev.section).to_string(),
                self.lessons.name(ev.lesson).to_string(),
                self.segments.name(ev.segment).to_string(),
                self.raters.name(ev.rater).to_string(),
                self.protocols[ev.protocol].name.clone(),
            ];
            let mut cells = vec![String::new(); self.n_dims()];
            for (d, s) in ev.scores.iter().enumerate() {
                cells[self.global_dim(ev.protocol, d)] =
                    s.map_or_else(|| MISSING.to_string(), |v| v.to_string());
            }
            row.extend(cells);
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| BefaError::io(path, e))?;
        Ok(())
    }
}

pub struct DatasetBuilder {
    ds: RatingDataset,
    event_ids: HashMap<String, usize>,
}

impl DatasetBuilder {
    pub fn push(&mut self, ev: RawEvent<'_>) -> Result<()> {
        let ds = &mut self.ds;
        let protocol = ds.protocol_index(ev.protocol).ok_or_else(|| {
            BefaError::Schema(format!(
                "event {}: unknown protocol {}",
                ev.event_id, ev.protocol
            ))
        })?;
        let proto = &ds.protocols[protocol];
        if ev.scores.len() != proto.n_dims() {
            return Err(BefaError::Schema(format!(
                "event {}: {} scores for protocol {} with {} dimensions",
                ev.event_id,
                ev.scores.len(),
                proto.name,
                proto.n_dims()
            )));
        }
        for (d, s) in ev.scores.iter().enumerate() {
            if let Some(s) = *s {
                if s == 0 || s as usize > proto.levels {
                    return Err(BefaError::ScoreOutOfRange {
                        line: 0,
                        protocol: proto.name.clone(),
                        dimension: proto.dims[d].clone(),
                        score: s as i64,
                        levels: proto.levels,
                    });
                }
            }
        }
        if self.event_ids.contains_key(ev.event_id) {
            return Err(BefaError::Schema(format!("duplicate event id {}", ev.event_id)));
        }

        let (teacher, _) = ds.teachers.intern(ev.teacher);
        let section = link(
            &mut ds.sections,
            &mut ds.section_teacher,
            ev.section,
            teacher,
            "section",
            "teacher",
            &ds.teachers,
        )?;
        let lesson = link(
            &mut ds.lessons,
            &mut ds.lesson_section,
            ev.lesson,
            section,
            "lesson",
            "section",
            &ds.sections,
        )?;
        let segment = link(
            &mut ds.segments,
            &mut ds.segment_lesson,
            ev.segment,
            lesson,
            "segment",
            "lesson",
            &ds.lessons,
        )?;
        let (rater, _) = ds.raters.intern(ev.rater);

        self.event_ids
            .insert(ev.event_id.to_string(), ds.events.len());
        ds.events.push(ScoringEvent {
            event_id: ev.event_id.to_string(),
            teacher,
            section,
            lesson,
            segment,
            rater,
            protocol,
            scores: ev.scores,
        });
        Ok(())
    }

    pub fn build(self) -> RatingDataset {
        self.ds
    }
}

/// Intern a child id and check it always sits under the same parent.
fn link(
    children: &mut IdIndex,
    parent_of: &mut Vec<usize>,
    child: &str,
    parent: usize,
    child_kind: &str,
    parent_kind: &str,
    parents: &IdIndex,
) -> Result<usize> {
    let (idx, fresh) = children.intern(child);
    if fresh {
        parent_of.push(parent);
    } else if parent_of[idx] != parent {
        return Err(BefaError::Hierarchy(format!(
            "{child_kind} {child} appears under {parent_kind}s {} and {}",
            parents.name(parent_of[idx]),
            parents.name(parent)
        )));
    }
    Ok(idx)
}

/// Load a long-format rating CSV against a protocol schema.
pub fn load_dataset(path: &Path, schema: &[ProtocolDef]) -> Result<RatingDataset> {
    let file = std::fs::File::open(path).map_err(|e| BefaError::io(path, e))?;
    read_long(file, schema)
}

struct PendingEvent {
    first_line: u64,
    ids: [String; 6],
    protocol: usize,
    scores: Vec<Option<Option<u16>>>,
}

pub fn read_long<R: std::io::Read>(reader: R, schema: &[ProtocolDef]) -> Result<RatingDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.iter().ne(LONG_HEADER.iter().copied()) {
        return Err(BefaError::Malformed {
            line: 1,
            message: format!("expected header `{}`", LONG_HEADER.join(",")),
        });
    }

    let mut order: Vec<String> = Vec::new();
    let mut pending: HashMap<String, PendingEvent> = HashMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            BefaError::Malformed {
                line,
                message: e.to_string(),
            }
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != LONG_HEADER.len() {
            return Err(BefaError::Malformed {
                line,
                message: format!("expected {} fields, found {}", LONG_HEADER.len(), rec.len()),
            });
        }
        let field = |i: usize| rec.get(i).unwrap_or("");
        for (i, name) in LONG_HEADER.iter().enumerate().take(8) {
            if field(i).is_empty() {
                return Err(BefaError::Malformed {
                    line,
                    message: format!("empty `{name}`"),
                });
            }
        }
        let protocol = schema
            .iter()
            .position(|p| p.name == field(6))
            .ok_or_else(|| BefaError::Malformed {
                line,
                message: format!("unknown protocol `{}`", field(6)),
            })?;
        let proto = &schema[protocol];
        let dim = proto
            .dims
            .iter()
            .position(|d| d == field(7))
            .ok_or_else(|| BefaError::Malformed {
                line,
                message: format!("protocol {} has no dimension `{}`", proto.name, field(7)),
            })?;
        let score = parse_score(field(8), line, proto, dim)?;

        let ids = [
            field(1).to_string(),
            field(2).to_string(),
            field(3).to_string(),
            field(4).to_string(),
            field(5).to_string(),
            field(6).to_string(),
        ];
        let event_id = field(0);
        let entry = match pending.get_mut(event_id) {
            Some(p) => p,
            None => {
                order.push(event_id.to_string());
                pending.entry(event_id.to_string()).or_insert(PendingEvent {
                    first_line: line,
                    ids: ids.clone(),
                    protocol,
                    scores: vec![None; proto.n_dims()],
                })
            }
        };
        if entry.ids != ids {
            return Err(BefaError::Malformed {
                line,
                message: format!(
                    "event {event_id} changes its teacher/section/lesson/segment/rater/protocol"
                ),
            });
        }
        if entry.scores[dim].is_some() {
            return Err(BefaError::Malformed {
                line,
                message: format!("event {event_id} repeats dimension {}", proto.dims[dim]),
            });
        }
        entry.scores[dim] = Some(score);
    }

    let mut builder = RatingDataset::builder(schema.to_vec())?;
    for event_id in &order {
        let p = &pending[event_id];
        let proto = &schema[p.protocol];
        let mut scores = Vec::with_capacity(p.scores.len());
        for (d, s) in p.scores.iter().enumerate() {
            match s {
                Some(v) => scores.push(*v),
                None => {
                    return Err(BefaError::Malformed {
                        line: p.first_line,
                        message: format!(
                            "event {event_id} has no row for dimension {} (use `{MISSING}` for missing scores)",
                            proto.dims[d]
                        ),
                    })
                }
            }
        }
        builder
            .push(RawEvent {
                event_id,
                teacher: &p.ids[0],
                section: &p.ids[1],
                lesson: &p.ids[2],
                segment: &p.ids[3],
                rater: &p.ids[4],
                protocol: &p.ids[5],
                scores,
            })
            .map_err(|e| match e {
                BefaError::Hierarchy(m) => {
                    BefaError::Hierarchy(format!("line {}: {m}", p.first_line))
                }
                other => other,
            })?;
    }
    Ok(builder.build())
}

fn parse_score(raw: &str, line: u64, proto: &ProtocolDef, dim: usize) -> Result<Option<u16>> {
    if raw == MISSING {
        return Ok(None);
    }
    let value: i64 = raw.parse().map_err(|_| BefaError::Malformed {
        line,
        message: format!("score `{raw}` is neither an integer nor `{MISSING}`"),
    })?;
    if value < 1 || value as usize > proto.levels {
        return Err(BefaError::ScoreOutOfRange {
            line,
            protocol: proto.name.clone(),
            dimension: proto.dims[dim].clone(),
            score: value,
            levels: proto.levels,
        });
    }
    Ok(Some(value as u16))
}

/// Summary of the crossed rating design.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CrossingReport {
    pub counts: LevelCounts,
    /// Number of distinct (lesson, protocol) pairs.
    pub lesson_protocol_pairs: usize,
    /// Fraction of (lesson, protocol) pairs scored by exactly one rater.
    pub singly_rated_fraction: f64,
    pub mean_raters_per_lesson: f64,
    pub mean_lessons_per_rater: f64,
    pub mean_protocols_per_lesson: f64,
    pub mean_teachers_per_rater: f64,
    /// Histogram: `raters_per_lesson_protocol[k]` pairs had k raters.
    pub raters_per_lesson_protocol: Vec<usize>,
}

pub fn validate_crossing(ds: &RatingDataset) -> CrossingReport {
    let mut pair_raters: HashMap<(usize, usize), BTreeSet<usize>> = HashMap::new();
    let mut lesson_raters: HashMap<usize, BTreeSet<usize>> = HashMap::new();
    let mut lesson_protocols: HashMap<usize, BTreeSet<usize>> = HashMap::new();
    let mut rater_lessons: HashMap<usize, BTreeSet<usize>> = HashMap::new();
    let mut rater_teachers: HashMap<usize, BTreeSet<usize>> = HashMap::new();
    for ev in ds.events() {
        pair_raters
            .entry((ev.lesson, ev.protocol))
            .or_default()
            .insert(ev.rater);
        lesson_raters.entry(ev.lesson).or_default().insert(ev.rater);
        lesson_protocols
            .entry(ev.lesson)
            .or_default()
            .insert(ev.protocol);
        rater_lessons.entry(ev.rater).or_default().insert(ev.lesson);
        rater_teachers.entry(ev.rater).or_default().insert(ev.teacher);
    }
    let mean_size = |m: &HashMap<usize, BTreeSet<usize>>| {
        if m.is_empty() {
            0.0
        } else {
            m.values().map(|s| s.len()).sum::<usize>() as f64 / m.len() as f64
        }
    };
    let mut hist = Vec::new();
    for raters in pair_raters.values() {
        let k = raters.len();
        if hist.len() <= k {
            hist.resize(k + 1, 0);
        }
        hist[k] += 1;
    }
    let pairs = pair_raters.len();
    let single = hist.get(1).copied().unwrap_or(0);
    CrossingReport {
        counts: ds.counts(),
        lesson_protocol_pairs: pairs,
        singly_rated_fraction: if pairs == 0 {
            0.0
        } else {
            single as f64 / pairs as f64
        },
        mean_raters_per_lesson: mean_size(&lesson_raters),
        mean_lessons_per_rater: mean_size(&rater_lessons),
        mean_protocols_per_lesson: mean_size(&lesson_protocols),
        mean_teachers_per_rater: mean_size(&rater_teachers),
        raters_per_lesson_protocol: hist,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn class() -> ProtocolDef {
        ProtocolDef::new(
            "CLASS",
            (1..=10).map(|i| format!("c{i}")).collect(),
            7,
        )
        .unwrap()
    }

    fn csv_for(rows: &[(&str, &str, &str, &str, &str, &str, &str, &str, &str)]) -> String {
        let mut s = LONG_HEADER.join(",");
        s.push('\n');
        for r in rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.0, r.1, r.2, r.3, r.4, r.5, r.6, r.7, r.8
            ));
        }
        s
    }

    fn one_event(score_of: impl Fn(usize) -> String) -> String {
        let mut s = LONG_HEADER.join(",");
        s.push('\n');
        for d in 1..=10 {
            s.push_str(&format!("e1,t1,s1,l1,g1,r1,CLASS,c{d},{}\n", score_of(d)));
        }
        s
    }

    #[test]
    fn minimal_event_loads() {
        let ds = read_long(one_event(|d| (d % 7 + 1).to_string()).as_bytes(), &[class()]).unwrap();
        assert_eq!(ds.events().len(), 1);
        assert_eq!(ds.n_dims(), 10);
        assert_eq!(ds.counts().teachers, 1);
        assert_eq!(ds.events()[0].scores[0], Some(2));
    }

    #[test]
    fn score_eight_on_class_is_out_of_range() {
        let text = one_event(|d| if d == 3 { "8".into() } else { "4".into() });
        let err = read_long(text.as_bytes(), &[class()]).unwrap_err();
        match err {
            BefaError::ScoreOutOfRange {
                protocol,
                dimension,
                score,
                line,
                ..
            } => {
                assert_eq!(protocol, "CLASS");
                assert_eq!(dimension, "c3");
                assert_eq!(score, 8);
                assert_eq!(line, 4);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn lesson_under_two_sections_is_hierarchy_violation() {
        let p = ProtocolDef::new("P", vec!["a".into()], 3).unwrap();
        let text = csv_for(&[
            ("e1", "t1", "S1", "L1", "g1", "r1", "P", "a", "1"),
            ("e2", "t1", "S2", "L1", "g2", "r1", "P", "a", "2"),
        ]);
        let err = read_long(text.as_bytes(), &[p]).unwrap_err();
        assert!(matches!(err, BefaError::Hierarchy(_)), "{err}");
    }

    #[test]
    fn malformed_row_reports_line() {
        let p = ProtocolDef::new("P", vec!["a".into()], 3).unwrap();
        let text = csv_for(&[
            ("e1", "t1", "s1", "l1", "g1", "r1", "P", "a", "1"),
            ("e2", "t1", "s1", "l1", "g2", "r1", "P", "a", "x"),
        ]);
        let err = read_long(text.as_bytes(), &[p]).unwrap_err();
        assert!(matches!(err, BefaError::Malformed { line: 3, .. }), "{err}");
    }

    #[test]
    fn missing_sentinel_and_absent_row_differ() {
        let p = ProtocolDef::new("P", vec!["a".into(), "b".into()], 3).unwrap();
        let text = csv_for(&[
            ("e1", "t1", "s1", "l1", "g1", "r1", "P", "a", "1"),
            ("e1", "t1", "s1", "l1", "g1", "r1", "P", "b", "NA"),
        ]);
        let ds = read_long(text.as_bytes(), std::slice::from_ref(&p)).unwrap();
        assert_eq!(ds.events()[0].scores, vec![Some(1), None]);

        let text = csv_for(&[("e1", "t1", "s1", "l1", "g1", "r1", "P", "a", "1")]);
        assert!(read_long(text.as_bytes(), &[p.clone()]).is_err());

        let text = csv_for(&[
            ("e1", "t1", "s1", "l1", "g1", "r1", "P", "a", "1"),
            ("e1", "t1", "s1", "l1", "g1", "r1", "P", "b", ""),
        ]);
        assert!(read_long(text.as_bytes(), &[p]).is_err());
    }

    #[test]
    fn schema_parse_and_render() {
        let text = "protocol = CLASS\nlevels = 7\ndims = a, b\n\nprotocol = FFT\nlevels = 4\ndims = x\n";
        let s = parse_schema(text).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].dims, vec!["a", "b"]);
        assert_eq!(parse_schema(&render_schema(&s)).unwrap(), s);
        assert!(parse_schema("levels = 3\n").is_err());
        assert!(parse_schema("protocol = A\nlevels = 1\ndims = a\n").is_err());
        assert!(parse_schema("protocol = A\nlevels = 3\ndims = a, a\n").is_err());
        assert!(parse_schema("protocol = A\ncolour = red\n").is_err());
    }

    #[test]
    fn crossing_of_empty_dataset_is_zero() {
        let ds = RatingDataset::builder(vec![class()]).unwrap().build();
        let r = validate_crossing(&ds);
        assert_eq!(r.singly_rated_fraction, 0.0);
        assert_eq!(r.lesson_protocol_pairs, 0);
        assert_eq!(r.mean_lessons_per_rater, 0.0);
    }

    #[test]
    fn crossing_single_rater_per_protocol() {
        let p = ProtocolDef::new("P", vec!["a".into()], 3).unwrap();
        let q = ProtocolDef::new("Q", vec!["b".into()], 3).unwrap();
        let text = csv_for(&[
            ("e1", "t1", "s1", "l1", "g1", "r1", "P", "a", "1"),
            ("e2", "t1", "s1", "l1", "g2", "r1", "P", "a", "2"),
            ("e3", "t1", "s1", "l1", "g1", "r2", "Q", "b", "2"),
            ("e4", "t2", "s2", "l2", "g3", "r2", "P", "a", "3"),
        ]);
        let ds = read_long(text.as_bytes(), &[p, q]).unwrap();
        let r = validate_crossing(&ds);
        assert_eq!(r.lesson_protocol_pairs, 3);
        assert_eq!(r.singly_rated_fraction, 1.0);
        assert_eq!(r.mean_protocols_per_lesson, 1.5);
        assert_eq!(r.mean_teachers_per_rater, 1.5);
    }

    #[test]
    fn permutation_moves_dimensions() {
        let p = ProtocolDef::new("P", vec!["a".into(), "b".into()], 3).unwrap();
        let q = ProtocolDef::new("Q", vec!["c".into(), "d".into()], 3).unwrap();
        let ds = RatingDataset::builder(vec![p, q]).unwrap().build();
        let rev = ds.permute_dimensions(&[3, 2, 1, 0]).unwrap();
        assert_eq!(rev.global_dim(0, 0), 3);
        assert_eq!(rev.dim_label(0), "Q:d");
        assert_eq!(rev.dim_origin(), &[3, 2, 1, 0]);
        assert_eq!(rev.permute_dimensions(&[3, 2, 1, 0]).unwrap(), ds);
        assert_eq!(ds.permute_dimensions(&[0, 1, 2, 3]).unwrap(), ds);
        assert!(ds.permute_dimensions(&[0, 0, 1, 2]).is_err());
        assert!(ds.permute_dimensions(&[0, 1, 2]).is_err());
    }
}
