//! Dependency-free SVG figures for the diagnostics and summaries.

use std::fmt::Write as _;

use nalgebra::DMatrix;

use crate::modelcheck::{LpmlResult, ParallelAnalysisResult};
use crate::stage2::Kde;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN: (f64, f64, f64, f64) = (70.0, 20.0, 30.0, 50.0); // left, right, top, bottom
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

struct Svg {
    out: String,
}

impl Svg {
    fn new(title: &str) -> Self {
        let mut out = String::new();
        let _ = writeln!(
            out,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(out, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
        let _ = writeln!(
            out,
            r#"<text class="title" x="{}" y="18" text-anchor="middle" font-size="14">{}</text>"#,
            WIDTH / 2.0,
            escape(title)
        );
        Svg { out }
    }

    fn line(&mut self, class: &str, (x1, y1): (f64, f64), (x2, y2): (f64, f64), stroke: &str, dash: bool) {
        let dash = if dash { r#" stroke-dasharray="5,4""# } else { "" };
        let _ = writeln!(
            self.out,
            r#"<line class="{class}" x1="{x1:.2}" y1="{y1:.2}" x2="{x2:.2}" y2="{y2:.2}" stroke="{stroke}"{dash}/>"#
        );
    }

    fn circle(&mut self, class: &str, (x, y): (f64, f64), r: f64, fill: &str) {
        let _ = writeln!(
            self.out,
            r#"<circle class="{class}" cx="{x:.2}" cy="{y:.2}" r="{r}" fill="{fill}"/>"#
        );
    }

    fn rect(&mut self, class: &str, (x, y): (f64, f64), (w, h): (f64, f64), fill: &str, title: &str) {
        let _ = writeln!(
            self.out,
            r#"<rect class="{class}" x="{x:.2}" y="{y:.2}" width="{w:.2}" height="{h:.2}" fill="{fill}"><title>{}</title></rect>"#,
            escape(title)
        );
    }

    fn text(&mut self, (x, y): (f64, f64), anchor: &str, s: &str) {
        let _ = writeln!(
            self.out,
            r#"<text x="{x:.2}" y="{y:.2}" text-anchor="{anchor}">{}</text>"#,
            escape(s)
        );
    }

    fn polyline(&mut self, class: &str, pts: &[(f64, f64)], stroke: &str) {
        let p: Vec<String> = pts.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
        let _ = writeln!(
            self.out,
            r#"<polyline class="{class}" points="{}" fill="none" stroke="{stroke}" stroke-width="1.5"/>"#,
            p.join(" ")
        );
    }

    fn finish(mut self) -> String {
        self.out.push_str("</svg>\n");
        self.out
    }
}

/// Linear map from a data box to the plotting area.
struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn new(x: (f64, f64), y: (f64, f64)) -> Self {
        let pad = |(lo, hi): (f64, f64)| {
            if hi > lo {
                let p = 0.05 * (hi - lo);
                (lo - p, hi + p)
            } else {
                (lo - 0.5, hi + 0.5)
            }
        };
        Frame { x: pad(x), y: pad(y) }
    }

    fn px(&self, x: f64) -> f64 {
        MARGIN.0 + (x - self.x.0) / (self.x.1 - self.x.0) * (WIDTH - MARGIN.0 - MARGIN.1)
    }

    fn py(&self, y: f64) -> f64 {
        HEIGHT - MARGIN.3 - (y - self.y.0) / (self.y.1 - self.y.0) * (HEIGHT - MARGIN.2 - MARGIN.3)
    }

    fn at(&self, x: f64, y: f64) -> (f64, f64) {
        (self.px(x), self.py(y))
    }

    fn axes(&self, svg: &mut Svg, xlabel: &str, ylabel: &str, xticks: &[(f64, String)]) {
        let (x0, x1) = (MARGIN.0, WIDTH - MARGIN.1);
        let (y0, y1) = (HEIGHT - MARGIN.3, MARGIN.2);
        svg.line("axis", (x0, y0), (x1, y0), "black", false);
        svg.line("axis", (x0, y0), (x0, y1), "black", false);
        for (v, label) in xticks {
            let x = self.px(*v);
            svg.line("tick", (x, y0), (x, y0 + 4.0), "black", false);
            svg.text((x, y0 + 16.0), "middle", label);
        }
        for i in 0..=4 {
            let v = self.y.0 + (self.y.1 - self.y.0) * i as f64 / 4.0;
            let y = self.py(v);
            svg.line("tick", (x0 - 4.0, y), (x0, y), "black", false);
            svg.text((x0 - 6.0, y + 4.0), "end", &format!("{v:.3}"));
        }
        svg.text(((x0 + x1) / 2.0, HEIGHT - 12.0), "middle", xlabel);
        let _ = writeln!(
            svg.out,
            r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">{}</text>"#,
            (y0 + y1) / 2.0,
            (y0 + y1) / 2.0,
            escape(ylabel)
        );
    }
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

/// LPML against K: averaged value as a line, one dot per chain.
pub fn lpml_figure(results: &[LpmlResult]) -> String {
    let mut rs: Vec<&LpmlResult> = results.iter().collect();
    rs.sort_by_key(|r| r.k);
    let mut svg = Svg::new("LPML by number of factors");
    if rs.is_empty() {
        return svg.finish();
    }
    let frame = Frame::new(
        range(rs.iter().map(|r| r.k as f64)),
        range(rs.iter().flat_map(|r| r.per_chain.iter().copied().chain([r.average]))),
    );
    let ticks: Vec<(f64, String)> = rs.iter().map(|r| (r.k as f64, r.k.to_string())).collect();
    frame.axes(&mut svg, "K", "LPML", &ticks);
    for r in &rs {
        for v in &r.per_chain {
            svg.circle("chain", frame.at(r.k as f64, *v), 3.0, "#999999");
        }
    }
    let pts: Vec<(f64, f64)> = rs.iter().map(|r| frame.at(r.k as f64, r.average)).collect();
    svg.polyline("average", &pts, PALETTE[0]);
    for p in pts {
        svg.circle("average", p, 4.0, PALETTE[0]);
    }
    svg.finish()
}

/// Posterior mean eigenvalues with 95% intervals and the null threshold.
pub fn eigen_figure(pa: &ParallelAnalysisResult) -> String {
    let mut svg = Svg::new(&format!("Correlation eigenvalues (selected K = {})", pa.selected_k));
    let m = pa.observed_mean.len();
    if m == 0 {
        return svg.finish();
    }
    let frame = Frame::new(
        (1.0, m as f64),
        range(
            pa.intervals
                .iter()
                .flat_map(|(a, b)| [*a, *b])
                .chain(pa.null_thresholds.iter().copied())
                .chain([0.0]),
        ),
    );
    let ticks: Vec<(f64, String)> = (1..=m).map(|i| (i as f64, i.to_string())).collect();
    frame.axes(&mut svg, "eigenvalue index", "eigenvalue", &ticks);
    for (i, ((lo, hi), mean)) in pa.intervals.iter().zip(&pa.observed_mean).enumerate() {
        let x = (i + 1) as f64;
        svg.line("interval", frame.at(x, *lo), frame.at(x, *hi), PALETTE[0], false);
        svg.circle("eigenvalue", frame.at(x, *mean), 3.5, PALETTE[0]);
    }
    let null: Vec<(f64, f64)> = pa
        .null_thresholds
        .iter()
        .enumerate()
        .map(|(i, v)| frame.at((i + 1) as f64, *v))
        .collect();
    let _ = writeln!(
        svg.out,
        r#"<polyline class="null" points="{}" fill="none" stroke="{}" stroke-dasharray="5,4"/>"#,
        null.iter()
            .map(|(x, y)| format!("{x:.2},{y:.2}"))
            .collect::<Vec<_>>()
            .join(" "),
        PALETTE[1]
    );
    svg.finish()
}

/// λ²_dk / (Σ_k λ²_dk + u_d): share of each dimension's variance explained
/// by each factor. Rows sum to at most 1.
pub fn normalized_squared_loadings(loadings: &DMatrix<f64>, uniqueness: &[f64]) -> DMatrix<f64> {
    let mut out = loadings.map(|v| v * v);
    for (d, u) in uniqueness.iter().enumerate() {
        let total = out.row(d).sum() + u;
        if total > 0.0 {
            out.row_mut(d).unscale_mut(total);
        }
    }
    out
}

/// Heat map of normalized squared loadings, dimensions in rows.
pub fn loading_heatmap(loadings: &DMatrix<f64>, uniqueness: &[f64], dim_labels: &[String]) -> String {
    let share = normalized_squared_loadings(loadings, uniqueness);
    let (d, k) = share.shape();
    let mut svg = Svg::new("Share of variance explained");
    let cell_w = ((WIDTH - 160.0) / k.max(1) as f64).min(80.0);
    let cell_h = ((HEIGHT - 80.0) / d.max(1) as f64).min(40.0);
    let (x0, y0) = (120.0, 40.0);
    for kk in 0..k {
        svg.text((x0 + (kk as f64 + 0.5) * cell_w, y0 - 6.0), "middle", &format!("F{}", kk + 1));
    }
    for dd in 0..d {
        let label = dim_labels.get(dd).map_or_else(|| format!("d{}", dd + 1), Clone::clone);
        svg.text((x0 - 6.0, y0 + (dd as f64 + 0.65) * cell_h), "end", &label);
        for kk in 0..k {
            let v = share[(dd, kk)].clamp(0.0, 1.0);
            // white → dark blue
            let c = |a: f64, b: f64| (a + (b - a) * v).round() as u8;
            let fill = format!("#{:02x}{:02x}{:02x}", c(255.0, 8.0), c(255.0, 48.0), c(255.0, 107.0));
            svg.rect(
                "cell",
                (x0 + kk as f64 * cell_w, y0 + dd as f64 * cell_h),
                (cell_w - 1.0, cell_h - 1.0),
                &fill,
                &format!("{label} F{}: {:.1}%", kk + 1, 100.0 * share[(dd, kk)]),
            );
        }
    }
    svg.finish()
}

/// One density curve per series with dots at its 0.025 and 0.975 quantiles.
pub struct DensitySeries<'a> {
    pub label: &'a str,
    pub kde: &'a Kde,
    pub lower: f64,
    pub upper: f64,
}

fn density_at(kde: &Kde, x: f64) -> f64 {
    let i = kde.grid.partition_point(|g| *g < x);
    if i == 0 || i >= kde.grid.len() {
        return 0.0;
    }
    let (g0, g1) = (kde.grid[i - 1], kde.grid[i]);
    let w = (x - g0) / (g1 - g0);
    kde.density[i - 1] * (1.0 - w) + kde.density[i] * w
}

pub fn density_figure(title: &str, series: &[DensitySeries<'_>]) -> String {
    let mut svg = Svg::new(title);
    if series.is_empty() {
        return svg.finish();
    }
    let frame = Frame::new(
        range(series.iter().flat_map(|s| s.kde.grid.iter().copied())),
        range(series.iter().flat_map(|s| s.kde.density.iter().copied()).chain([0.0])),
    );
    let (lo, hi) = frame.x;
    let ticks: Vec<(f64, String)> = (0..=4)
        .map(|i| {
            let v = lo + (hi - lo) * i as f64 / 4.0;
            (v, format!("{v:.2}"))
        })
        .collect();
    frame.axes(&mut svg, "disattenuated correlation", "density", &ticks);
    for (i, s) in series.iter().enumerate() {
        let colour = PALETTE[i % PALETTE.len()];
        let pts: Vec<(f64, f64)> = s.kde.grid.iter().zip(&s.kde.density).map(|(x, y)| frame.at(*x, *y)).collect();
        svg.polyline("density", &pts, colour);
        for q in [s.lower, s.upper] {
            svg.circle("quantile", frame.at(q, density_at(s.kde, q)), 3.5, colour);
        }
        let ly = MARGIN.2 + 14.0 * (i as f64 + 1.0);
        svg.line("legend", (WIDTH - 150.0, ly - 4.0), (WIDTH - 130.0, ly - 4.0), colour, false);
        svg.text((WIDTH - 126.0, ly), "start", s.label);
    }
    svg.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn count(svg: &str, needle: &str) -> usize {
        svg.matches(needle).count()
    }

    fn lpml(k: usize, chains: &[f64]) -> LpmlResult {
        LpmlResult {
            k,
            per_chain: chains.to_vec(),
            average: chains.iter().sum::<f64>() / chains.len() as f64,
            log_cpo: vec![],
            unstable: vec![],
        }
    }

    #[test]
    fn lpml_figure_has_a_dot_per_chain_and_per_k() {
        let svg = lpml_figure(&[lpml(3, &[-10.0, -11.0]), lpml(1, &[-12.0, -12.5]), lpml(2, &[-9.0, -9.5])]);
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
        assert_eq!(count(&svg, r#"<circle class="chain""#), 6);
        assert_eq!(count(&svg, r#"<circle class="average""#), 3);
        assert_eq!(count(&svg, r#"<polyline class="average""#), 1);
    }

    #[test]
    fn eigen_figure_has_intervals_and_null_line() {
        let pa = ParallelAnalysisResult {
            observed_mean: vec![3.0, 1.5, 0.8, 0.7],
            intervals: vec![(2.5, 3.4), (1.2, 1.7), (0.6, 0.9), (0.5, 0.8)],
            null_thresholds: vec![1.4, 1.2, 1.0, 0.9],
            selected_k: 2,
            skipped_draws: 0,
            warning: None,
        };
        let svg = eigen_figure(&pa);
        assert_eq!(count(&svg, r#"class="interval""#), 4);
        assert_eq!(count(&svg, r#"class="null""#), 1);
        assert!(svg.contains("selected K = 2"));
    }

    #[test]
    fn normalized_rows_are_variance_shares() {
        let l = DMatrix::from_row_slice(3, 2, &[0.6, 0.0, 0.3, 0.4, 0.0, 0.0]);
        let u = [0.64, 0.75, 1.0];
        let s = normalized_squared_loadings(&l, &u);
        assert!((s[(0, 0)] - 0.36).abs() < 1e-12);
        assert!((s[(1, 0)] - 0.09).abs() < 1e-12 && (s[(1, 1)] - 0.16).abs() < 1e-12);
        for r in 0..3 {
            assert!(s.row(r).sum() <= 1.0);
        }
        let svg = loading_heatmap(&l, &u, &["a&b".into(), "c".into(), "d".into()]);
        assert_eq!(count(&svg, r#"<rect class="cell""#), 6);
        assert!(svg.contains("a&amp;b") && !svg.contains("a&b"));
    }

    #[test]
    fn density_figure_marks_both_quantiles() {
        let kde = Kde {
            bandwidth: 0.1,
            grid: vec![-1.0, 0.0, 1.0],
            density: vec![0.1, 0.5, 0.1],
        };
        let svg = density_figure(
            "x",
            &[
                DensitySeries {
                    label: "F1 vs TK",
                    kde: &kde,
                    lower: -0.5,
                    upper: 0.5,
                },
                DensitySeries {
                    label: "F2 vs TK",
                    kde: &kde,
                    lower: -0.2,
                    upper: 0.9,
                },
            ],
        );
        assert_eq!(count(&svg, r#"class="quantile""#), 4);
        assert_eq!(count(&svg, r#"<polyline class="density""#), 2);
        assert!((density_at(&kde, -0.5) - 0.3).abs() < 1e-12);
    }
}
