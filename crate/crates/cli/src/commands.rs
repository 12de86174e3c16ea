use std::collections::HashMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use befa::archive::DrawArchive;
use befa::data::{load_dataset, read_schema, render_schema, validate_crossing};
use befa::gibbs::run;
use befa::identify::{identify_archive, AlignOptions, IdentifiedPosterior, SignConvention, VarimaxOptions};
use befa::modelcheck::{
    dip_test, eigens_of_archive, horn_parallel, lpml as archive_lpml, quantile, rhat_communality, HornOptions,
    LpmlResult, ParallelAnalysisResult,
};
use befa::report::{density_figure, eigen_figure, loading_heatmap, lpml_figure, DensitySeries};
use befa::stage2::{disattenuated_corr, kde, CorrelationPosterior, ExternalMeasure};
use befa::synthetic::{simulate as simulate_truth, TruthConfig};
use clap::Args;
use nalgebra::DMatrix;
use serde::Serialize;

use crate::config::FitConfig;
use crate::output::{echo_config, factor_names, run_dir, write_matrix, write_text, writer};
use crate::OutArg;

// ---------------------------------------------------------------- simulate

#[derive(Args, Debug)]
pub struct SimulateArgs {
    /// Ground-truth TOML; the desk-scale default when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    out: OutArg,
}

pub fn simulate(a: SimulateArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            TruthConfig::from_toml(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => TruthConfig::desk_default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let dir = run_dir(a.out.out.as_deref(), "simulate")?;
    let (ds, truth) = simulate_truth(&cfg)?;
    ds.export_long(&dir.join("ratings.csv"))?;
    write_text(&dir.join("schema.txt"), &render_schema(ds.protocols()))?;
    truth.write_dir(&ds, &dir.join("truth"))?;
    write_text(&dir.join("run.toml"), &format!("command = \"simulate\"\n\n{}", cfg.to_toml()))?;
    let c = ds.counts();
    println!(
        "{} events, {} teachers, {} raters, {} dimensions -> {}",
        c.events,
        c.teachers,
        c.raters,
        c.dims,
        dir.display()
    );
    Ok(())
}

// --------------------------------------------------------------------- fit

#[derive(Args, Debug)]
pub struct FitArgs {
    /// Long-format ratings CSV.
    #[arg(long)]
    data: PathBuf,
    /// Protocol schema file.
    #[arg(long)]
    schema: PathBuf,
    /// Sampler TOML; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    chains: Option<usize>,
    #[arg(long)]
    adapt: Option<usize>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    burn: Option<usize>,
    #[arg(long)]
    thin: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Serialize)]
struct FitEcho<'a> {
    data: &'a Path,
    schema: &'a Path,
    sampler: &'a FitConfig,
}

pub fn fit(a: FitArgs) -> Result<()> {
    let mut cfg = FitConfig::load(a.config.as_deref())?;
    let overrides = [
        (a.k, &mut cfg.k),
        (a.chains, &mut cfg.chains),
        (a.adapt, &mut cfg.adapt),
        (a.iters, &mut cfg.iters),
        (a.burn, &mut cfg.burn),
        (a.thin, &mut cfg.thin),
    ];
    for (flag, field) in overrides {
        if let Some(v) = flag {
            *field = v;
        }
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let sampler = cfg.sampler_config()?;
    let schema = read_schema(&a.schema).with_context(|| format!("schema {}", a.schema.display()))?;
    let ds = load_dataset(&a.data, &schema).with_context(|| format!("ratings {}", a.data.display()))?;

    let dir = run_dir(a.out.out.as_deref(), "fit")?;
    echo_config(
        &dir,
        "fit",
        &FitEcho {
            data: &a.data,
            schema: &a.schema,
            sampler: &cfg,
        },
    )?;
    let crossing = validate_crossing(&ds);
    write_text(&dir.join("crossing.txt"), &format!("{crossing:#?}\n"))?;

    let (archive, report) = run(&ds, &cfg.model_spec(), &sampler)?;
    archive.write_dir(&dir)?;
    write_text(&dir.join("timing.csv"), &report.render())?;

    let mut w = writer(&dir.join("sparse_levels.csv"))?;
    w.write_record(["dimension", "level", "count"])?;
    for (dim, level, count) in &report.sparse_levels {
        w.write_record([dim.clone(), level.to_string(), count.to_string()])?;
    }
    w.flush()?;

    let worst = if cfg.k > 0 || archive.meta.n_dims() > 0 {
        write_rhat(&dir, &archive)?
    } else {
        None
    };
    match worst {
        Some(r) => println!("{} draws; worst R-hat {r:.3} -> {}", archive.draws.len(), dir.display()),
        None => println!("{} draws -> {}", archive.draws.len(), dir.display()),
    }
    Ok(())
}

/// Writes `rhat.csv`; returns the largest defined value.
fn write_rhat(dir: &Path, archive: &DrawArchive) -> Result<Option<f64>> {
    let mut w = writer(&dir.join("rhat.csv"))?;
    w.write_record(["parameter", "rhat"])?;
    if archive.meta.n_chains() < 2 {
        w.flush()?;
        return Ok(None);
    }
    let entries = rhat_communality(archive)?;
    let mut worst: Option<f64> = None;
    for e in &entries {
        w.write_record([e.name.clone(), e.value.map_or_else(|| "NA".into(), |v| v.to_string())])?;
        if let Some(v) = e.value {
            worst = Some(worst.map_or(v, |m: f64| m.max(v)));
        }
    }
    w.flush()?;
    Ok(worst)
}

// ---------------------------------------------------------------- identify

#[derive(Args, Debug, Clone)]
pub struct IdentifyArgs {
    /// Directory written by `fit`.
    #[arg(long)]
    archive: PathBuf,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// `dim=NAME:factor=k`: factor k (1-based) loads nonnegatively on NAME.
    #[arg(long)]
    anchor: Vec<String>,
    /// Kaiser-normalise rows before varimax.
    #[arg(long)]
    normalize: bool,
    /// Also run the dip test on every aligned loading element.
    #[arg(long)]
    dip: bool,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Serialize)]
struct IdentifyEcho<'a> {
    archive: &'a Path,
    seed: u64,
    anchors: &'a [String],
    normalize: bool,
    dip: bool,
}

/// Parse `dim=NAME:factor=k` against the archive's dimension labels
/// (`PROTOCOL:dim`); a bare dimension name must be unambiguous.
pub fn parse_anchor(spec: &str, labels: &[String], k: usize) -> Result<(usize, usize)> {
    let bad = || anyhow!("anchor `{spec}`: expected dim=NAME:factor=k");
    let rest = spec.strip_prefix("dim=").ok_or_else(bad)?;
    let (name, factor) = rest.rsplit_once(":factor=").ok_or_else(bad)?;
    let factor: usize = factor.trim().parse().map_err(|_| bad())?;
    if factor == 0 || factor > k {
        bail!("anchor `{spec}`: factor must lie in 1..={k}");
    }
    let exact: Vec<usize> = (0..labels.len()).filter(|&g| labels[g] == name).collect();
    let matches = if exact.is_empty() {
        (0..labels.len())
            .filter(|&g| labels[g].rsplit_once(':').map(|(_, d)| d) == Some(name))
            .collect()
    } else {
        exact
    };
    match matches.as_slice() {
        [g] => Ok((factor - 1, *g)),
        [] => bail!("anchor `{spec}`: no dimension named {name}"),
        _ => bail!("anchor `{spec}`: {name} is ambiguous; use PROTOCOL:{name}"),
    }
}

fn identify_with(archive: &DrawArchive, seed: u64, anchors: &[String], normalize: bool) -> Result<IdentifiedPosterior> {
    let labels = &archive.meta.dim_labels;
    let signs = if anchors.is_empty() {
        SignConvention::ColumnSum
    } else {
        let parsed = anchors
            .iter()
            .map(|s| parse_anchor(s, labels, archive.k()))
            .collect::<Result<Vec<_>>>()?;
        SignConvention::Anchors(parsed)
    };
    let vopts = VarimaxOptions {
        normalize,
        seed,
        ..VarimaxOptions::default()
    };
    let aopts = AlignOptions {
        seed,
        signs,
        ..AlignOptions::default()
    };
    Ok(identify_archive(archive, &vopts, &aopts)?)
}

fn read_archive(dir: &Path) -> Result<DrawArchive> {
    DrawArchive::read_dir(dir).with_context(|| format!("reading archive {}", dir.display()))
}

pub fn identify(a: IdentifyArgs) -> Result<()> {
    let archive = read_archive(&a.archive)?;
    let idp = identify_with(&archive, a.seed, &a.anchor, a.normalize)?;
    let dir = run_dir(a.out.out.as_deref(), "identify")?;
    echo_config(
        &dir,
        "identify",
        &IdentifyEcho {
            archive: &a.archive,
            seed: a.seed,
            anchors: &a.anchor,
            normalize: a.normalize,
            dip: a.dip,
        },
    )?;
    write_identified(&dir, &archive, &idp)?;
    if a.dip {
        write_dip(&dir, &archive, &idp)?;
    }
    println!(
        "{} draws aligned in {} passes -> {}",
        idp.loadings().len(),
        idp.alignment.passes(),
        dir.display()
    );
    Ok(())
}

fn write_identified(dir: &Path, archive: &DrawArchive, idp: &IdentifiedPosterior) -> Result<()> {
    let labels = &archive.meta.dim_labels;
    let k = archive.k();
    let fnames = factor_names(k);
    write_matrix(&dir.join("loadings_mean.csv"), "dimension", labels, &fnames, &idp.mean_loadings())?;
    write_matrix(
        &dir.join("scores_mean.csv"),
        "teacher_id",
        &archive.meta.teacher_ids,
        &fnames,
        &idp.mean_scores(),
    )?;

    let mut header = vec!["chain".to_string(), "iter".to_string(), "dimension".to_string()];
    header.extend(fnames.iter().cloned());
    let mut w = writer(&dir.join("loadings_draws.csv"))?;
    w.write_record(&header)?;
    for (d, l) in archive.draws.iter().zip(idp.loadings()) {
        for (g, label) in labels.iter().enumerate() {
            let mut rec = vec![d.chain.to_string(), d.iter.to_string(), label.clone()];
            rec.extend(l.row(g).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;

    header[2] = "teacher_id".into();
    let mut w = writer(&dir.join("scores_draws.csv"))?;
    w.write_record(&header)?;
    for (d, s) in archive.draws.iter().zip(&idp.scores) {
        for (j, id) in archive.meta.teacher_ids.iter().enumerate() {
            let mut rec = vec![d.chain.to_string(), d.iter.to_string(), id.clone()];
            rec.extend(s.row(j).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;

    // T_b audit: the signed permutation taking each varimax draw to its aligned form
    let mut w = writer(&dir.join("orientations.csv"))?;
    w.write_record(["draw", "chain", "iter", "orientation"])?;
    for (b, (d, t)) in archive.draws.iter().zip(&idp.alignment.orientations).enumerate() {
        w.write_record([b.to_string(), d.chain.to_string(), d.iter.to_string(), t.render()])?;
    }
    w.flush()?;

    let al = &idp.alignment;
    let changes: Vec<String> = al.changes.iter().map(|c| c.to_string()).collect();
    write_text(
        &dir.join("alignment.txt"),
        &format!(
            "passes = {}\npivot_draw = {}\nchanges_per_pass = {}\nrelabel = {}\n",
            al.passes(),
            al.pivot_index,
            changes.join(", "),
            al.relabel.render()
        ),
    )
}

fn write_dip(dir: &Path, archive: &DrawArchive, idp: &IdentifiedPosterior) -> Result<()> {
    let mut w = writer(&dir.join("dip.csv"))?;
    w.write_record(["dimension", "factor", "stage", "dip", "p_value"])?;
    let stages: [(&str, &[DMatrix<f64>]); 2] = [("varimax", &idp.varimax), ("aligned", idp.loadings())];
    for (stage, draws) in stages {
        for (g, label) in archive.meta.dim_labels.iter().enumerate() {
            for k in 0..archive.k() {
                let x: Vec<f64> = draws.iter().map(|l| l[(g, k)]).collect();
                let r = dip_test(&x)?;
                w.write_record([
                    label.clone(),
                    format!("f{}", k + 1),
                    stage.to_string(),
                    r.dip.to_string(),
                    r.p_value.to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

// -------------------------------------------------------------------- lpml

#[derive(Args, Debug)]
pub struct LpmlArgs {
    /// Fit directories, typically one per K.
    #[arg(long, required = true)]
    archive: Vec<PathBuf>,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Serialize)]
struct LpmlEcho<'a> {
    archives: &'a [PathBuf],
}

pub fn lpml(a: LpmlArgs) -> Result<()> {
    let dir = run_dir(a.out.out.as_deref(), "lpml")?;
    echo_config(&dir, "lpml", &LpmlEcho { archives: &a.archive })?;
    let archives = a.archive.iter().map(|p| read_archive(p)).collect::<Result<Vec<_>>>()?;
    let results = write_lpml(&dir, &archives)?;
    for r in &results {
        println!("K = {}: LPML {:.2} (chain sd {:.2})", r.k, r.average, r.chain_sd());
    }
    Ok(())
}

fn write_lpml(dir: &Path, archives: &[DrawArchive]) -> Result<Vec<LpmlResult>> {
    let mut results = Vec::with_capacity(archives.len());
    let mut w = writer(&dir.join("lpml.csv"))?;
    w.write_record(["k", "chain", "lpml", "unstable_events"])?;
    for arch in archives {
        let r = archive_lpml(arch)?;
        for (c, v) in r.per_chain.iter().enumerate() {
            w.write_record([r.k.to_string(), c.to_string(), v.to_string(), String::new()])?;
        }
        w.write_record([
            r.k.to_string(),
            "mean".into(),
            r.average.to_string(),
            r.unstable.len().to_string(),
        ])?;

        let mut c = writer(&dir.join(format!("cpo_k{}.csv", r.k)))?;
        c.write_record(["event_id", "log_cpo"])?;
        for (id, v) in arch.meta.event_ids.iter().zip(&r.log_cpo) {
            c.write_record([id.clone(), v.to_string()])?;
        }
        c.flush()?;
        results.push(r);
    }
    w.flush()?;
    Ok(results)
}

// ---------------------------------------------------------------- parallel

#[derive(Args, Debug)]
pub struct ParallelArgs {
    #[arg(long)]
    archive: PathBuf,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Simulated null data sets.
    #[arg(long, default_value_t = 100_000)]
    n_null: usize,
    /// Null quantile used as the threshold.
    #[arg(long, default_value_t = 0.95)]
    pct: f64,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Serialize)]
struct ParallelEcho<'a> {
    archive: &'a Path,
    seed: u64,
    n_null: usize,
    pct: f64,
}

pub fn parallel(a: ParallelArgs) -> Result<()> {
    let dir = run_dir(a.out.out.as_deref(), "parallel")?;
    echo_config(
        &dir,
        "parallel",
        &ParallelEcho {
            archive: &a.archive,
            seed: a.seed,
            n_null: a.n_null,
            pct: a.pct,
        },
    )?;
    let archive = read_archive(&a.archive)?;
    let opts = HornOptions {
        n_null: a.n_null,
        pct: a.pct,
        seed: a.seed,
    };
    let pa = write_parallel(&dir, &archive, &opts)?;
    println!("parallel analysis selects K = {} -> {}", pa.selected_k, dir.display());
    Ok(())
}

fn write_parallel(dir: &Path, archive: &DrawArchive, opts: &HornOptions) -> Result<ParallelAnalysisResult> {
    let eig = eigens_of_archive(archive);
    let pa = horn_parallel(&eig, archive.meta.teacher_ids.len(), opts)?;
    let mut w = writer(&dir.join("eigenvalues.csv"))?;
    w.write_record(["index", "posterior_mean", "lower", "upper", "null_threshold"])?;
    for i in 0..pa.observed_mean.len() {
        w.write_record([
            (i + 1).to_string(),
            pa.observed_mean[i].to_string(),
            pa.intervals[i].0.to_string(),
            pa.intervals[i].1.to_string(),
            pa.null_thresholds[i].to_string(),
        ])?;
    }
    w.flush()?;
    let mut text = format!("selected_k = {}\nskipped_draws = {}\n", pa.selected_k, pa.skipped_draws);
    if let Some(warn) = &pa.warning {
        text.push_str(&format!("warning = {warn}\n"));
        eprintln!("warning: {warn}");
    }
    write_text(&dir.join("parallel.txt"), &text)?;
    Ok(pa)
}

// ------------------------------------------------------------------ stage2

#[derive(Args, Debug)]
pub struct Stage2Args {
    /// Directory written by `identify`.
    #[arg(long)]
    identified: PathBuf,
    /// CSV with columns teacher_id,estimate.
    #[arg(long)]
    measure: PathBuf,
    /// Label of the measure in outputs.
    #[arg(long, default_value = "measure")]
    name: String,
    #[arg(long)]
    reliability: f64,
    /// 1-based factor; all factors when omitted.
    #[arg(long)]
    factor: Vec<usize>,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Serialize)]
struct Stage2Echo<'a> {
    identified: &'a Path,
    measure: &'a Path,
    name: &'a str,
    reliability: f64,
    factors: Vec<usize>,
}

/// Score draws from `scores_draws.csv`: (chain, iter) keys, teacher ids in
/// file order and one teacher × K matrix per draw.
pub struct ScoreDraws {
    pub keys: Vec<(usize, usize)>,
    pub teacher_ids: Vec<String>,
    pub draws: Vec<DMatrix<f64>>,
}

pub fn read_score_draws(path: &Path) -> Result<ScoreDraws> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let k = r.headers()?.len().checked_sub(3).filter(|&k| k > 0).ok_or_else(|| {
        anyhow!("{}: expected chain,iter,teacher_id and at least one factor column", path.display())
    })?;
    let mut keys: Vec<(usize, usize)> = Vec::new();
    let mut rows: Vec<Vec<Vec<f64>>> = Vec::new();
    let mut teacher_ids: Vec<String> = Vec::new();
    let mut slot: HashMap<(usize, usize), usize> = HashMap::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let num = |s: &str| -> Result<f64> {
            s.parse().map_err(|_| anyhow!("{} line {line}: bad number {s:?}", path.display()))
        };
        let key = (num(&rec[0])? as usize, num(&rec[1])? as usize);
        let b = *slot.entry(key).or_insert_with(|| {
            keys.push(key);
            rows.push(Vec::new());
            keys.len() - 1
        });
        if b == 0 {
            teacher_ids.push(rec[2].to_string());
        } else if teacher_ids.get(rows[b].len()).map(String::as_str) != Some(&rec[2]) {
            bail!("{} line {line}: teacher order differs between draws", path.display());
        }
        rows[b].push(rec.iter().skip(3).map(num).collect::<Result<Vec<_>>>()?);
    }
    let n = teacher_ids.len();
    let draws = rows
        .into_iter()
        .map(|rs| {
            if rs.len() != n {
                bail!("{}: draws have differing teacher counts", path.display());
            }
            Ok(DMatrix::from_fn(n, k, |j, c| rs[j][c]))
        })
        .collect::<Result<Vec<_>>>()?;
    if draws.is_empty() {
        bail!("{}: no draws", path.display());
    }
    Ok(ScoreDraws {
        keys,
        teacher_ids,
        draws,
    })
}

pub fn stage2(a: Stage2Args) -> Result<()> {
    let scores = read_score_draws(&a.identified.join("scores_draws.csv"))?;
    let k = scores.draws[0].ncols();
    let factors = resolve_factors(&a.factor, k)?;
    let measure = ExternalMeasure::read_csv(&a.measure, &a.name, a.reliability)?;
    let dir = run_dir(a.out.out.as_deref(), "stage2")?;
    echo_config(
        &dir,
        "stage2",
        &Stage2Echo {
            identified: &a.identified,
            measure: &a.measure,
            name: &a.name,
            reliability: a.reliability,
            factors: factors.iter().map(|f| f + 1).collect(),
        },
    )?;
    let posts = factors
        .iter()
        .map(|&f| Ok(disattenuated_corr(&scores.draws, &scores.teacher_ids, &measure, f)?))
        .collect::<Result<Vec<_>>>()?;
    write_stage2(&dir, &posts, &scores.keys)?;
    for p in &posts {
        println!(
            "{} ~ f{}: mean {:.3} [{:.3}, {:.3}]",
            p.measure,
            p.factor + 1,
            p.mean,
            p.lower,
            p.upper
        );
    }
    Ok(())
}

fn resolve_factors(requested: &[usize], k: usize) -> Result<Vec<usize>> {
    if requested.is_empty() {
        return Ok((0..k).collect());
    }
    requested
        .iter()
        .map(|&f| {
            if f == 0 || f > k {
                bail!("factor {f} outside 1..={k}");
            }
            Ok(f - 1)
        })
        .collect()
}

fn write_stage2(dir: &Path, posts: &[CorrelationPosterior], keys: &[(usize, usize)]) -> Result<()> {
    let mut w = writer(&dir.join("correlations.csv"))?;
    w.write_record([
        "measure",
        "factor",
        "reliability",
        "mean",
        "q025",
        "q975",
        "exceed_one",
        "undefined_draws",
        "matched_teachers",
        "teachers_without_measure",
        "unknown_teachers",
    ])?;
    for p in posts {
        w.write_record([
            p.measure.clone(),
            format!("f{}", p.factor + 1),
            p.reliability.to_string(),
            p.mean.to_string(),
            p.lower.to_string(),
            p.upper.to_string(),
            p.exceed_one.to_string(),
            p.undefined().to_string(),
            p.coverage.matched.to_string(),
            p.coverage.missing_measure.to_string(),
            p.coverage.unknown_teachers.to_string(),
        ])?;
        if p.exceed_one > 0 {
            eprintln!(
                "warning: {} of f{}'s draws exceed 1 in magnitude after disattenuation",
                p.exceed_one,
                p.factor + 1
            );
        }
    }
    w.flush()?;

    let mut w = writer(&dir.join("correlation_draws.csv"))?;
    w.write_record(["measure", "factor", "chain", "iter", "value"])?;
    for p in posts {
        for ((chain, iter), v) in keys.iter().zip(&p.draws) {
            w.write_record([
                p.measure.clone(),
                format!("f{}", p.factor + 1),
                chain.to_string(),
                iter.to_string(),
                v.map_or_else(|| "NA".into(), |x| x.to_string()),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

// ------------------------------------------------------------------ report

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Fit directories, typically one per K.
    #[arg(long, required = true)]
    archive: Vec<PathBuf>,
    /// K of the fit used for the eigenvalue, heatmap and stage-2 figures;
    /// the best-LPML fit when omitted.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 100_000)]
    n_null: usize,
    #[arg(long)]
    anchor: Vec<String>,
    /// External measure CSV (teacher_id,estimate) for the correlation figure.
    #[arg(long, requires = "reliability")]
    measure: Option<PathBuf>,
    #[arg(long, default_value = "measure")]
    name: String,
    #[arg(long)]
    reliability: Option<f64>,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Serialize)]
struct ReportEcho<'a> {
    archives: &'a [PathBuf],
    k: Option<usize>,
    seed: u64,
    n_null: usize,
    anchors: &'a [String],
    measure: Option<&'a Path>,
    name: &'a str,
    reliability: Option<f64>,
}

pub fn report(a: ReportArgs) -> Result<()> {
    let dir = run_dir(a.out.out.as_deref(), "report")?;
    echo_config(
        &dir,
        "report",
        &ReportEcho {
            archives: &a.archive,
            k: a.k,
            seed: a.seed,
            n_null: a.n_null,
            anchors: &a.anchor,
            measure: a.measure.as_deref(),
            name: &a.name,
            reliability: a.reliability,
        },
    )?;
    let archives = a.archive.iter().map(|p| read_archive(p)).collect::<Result<Vec<_>>>()?;
    let lpmls = write_lpml(&dir, &archives)?;
    write_text(&dir.join("lpml.svg"), &lpml_figure(&lpmls))?;

    let chosen = match a.k {
        Some(k) => archives
            .iter()
            .position(|x| x.k() == k)
            .ok_or_else(|| anyhow!("no archive with K = {k}"))?,
        None => (0..archives.len())
            .max_by(|&i, &j| lpmls[i].average.total_cmp(&lpmls[j].average))
            .expect("at least one archive"),
    };
    let arch = &archives[chosen];
    let opts = HornOptions {
        n_null: a.n_null,
        pct: 0.95,
        seed: a.seed,
    };
    let pa = write_parallel(&dir, arch, &opts)?;
    write_text(&dir.join("eigenvalues.svg"), &eigen_figure(&pa))?;

    if arch.k() == 0 {
        println!("K = 0 selected; no loadings to plot -> {}", dir.display());
        return Ok(());
    }
    let idp = identify_with(arch, a.seed, &a.anchor, false)?;
    write_identified(&dir, arch, &idp)?;
    let d = arch.meta.n_dims();
    let n = arch.draws.len() as f64;
    let mean_u: Vec<f64> = (0..d)
        .map(|g| arch.draws.iter().map(|x| x.uniqueness[g]).sum::<f64>() / n)
        .collect();
    write_text(
        &dir.join("loadings_heatmap.svg"),
        &loading_heatmap(&idp.mean_loadings(), &mean_u, &arch.meta.dim_labels),
    )?;

    if let (Some(path), Some(r)) = (&a.measure, a.reliability) {
        let measure = ExternalMeasure::read_csv(path, &a.name, r)?;
        let posts = (0..arch.k())
            .map(|f| Ok(disattenuated_corr(&idp.scores, &arch.meta.teacher_ids, &measure, f)?))
            .collect::<Result<Vec<_>>>()?;
        let keys: Vec<(usize, usize)> = arch.draws.iter().map(|x| (x.chain, x.iter)).collect();
        write_stage2(&dir, &posts, &keys)?;
        let labels: Vec<String> = posts.iter().map(|p| format!("{} ~ f{}", p.measure, p.factor + 1)).collect();
        let kdes: Vec<_> = posts.iter().map(|p| kde(&p.defined(), 256)).collect();
        let series: Vec<DensitySeries> = posts
            .iter()
            .zip(&kdes)
            .zip(&labels)
            .filter_map(|((p, k), label)| {
                let k = k.as_ref()?;
                let mut s = p.defined();
                s.sort_by(f64::total_cmp);
                Some(DensitySeries {
                    label,
                    kde: k,
                    lower: quantile(&s, 0.025),
                    upper: quantile(&s, 0.975),
                })
            })
            .collect();
        write_text(
            &dir.join("correlations.svg"),
            &density_figure("Disattenuated correlations", &series),
        )?;
    }
    println!("report for K = {} -> {}", arch.k(), dir.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels() -> Vec<String> {
        ["A:x", "A:y", "B:x", "B:z"].iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn anchor_by_full_label_and_unique_name() {
        assert_eq!(parse_anchor("dim=B:x:factor=2", &labels(), 2).unwrap(), (1, 2));
        assert_eq!(parse_anchor("dim=z:factor=1", &labels(), 2).unwrap(), (0, 3));
    }

    #[test]
    fn anchor_errors() {
        for bad in ["dim=x:factor=1", "dim=q:factor=1", "dim=A:y:factor=3", "A:y:factor=1", "dim=A:y"] {
            assert!(parse_anchor(bad, &labels(), 2).is_err(), "{bad}");
        }
    }

    #[test]
    fn factor_selection() {
        assert_eq!(resolve_factors(&[], 3).unwrap(), vec![0, 1, 2]);
        assert_eq!(resolve_factors(&[2], 3).unwrap(), vec![1]);
        assert!(resolve_factors(&[0], 3).is_err());
        assert!(resolve_factors(&[4], 3).is_err());
    }
}
