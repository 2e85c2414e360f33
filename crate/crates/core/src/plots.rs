//! SVG figures of an evaluation report: ROI box plots per source, per-patient
//! NAWM-to-lesion lines, demyelination bars and agreement-map slices.

use std::fmt::Write as _;

use crate::config::Provenance;
use crate::eval::{Agreement, AgreementMap, Roi, Source};
use crate::report::EvaluationReport;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 50.0;
const SOURCE_COLORS: [&str; 2] = ["#1f77b4", "#ff7f0e"];

struct Svg {
    body: String,
    width: f64,
    height: f64,
}

impl Svg {
    fn new(width: f64, height: f64, title: &str, prov: &Provenance) -> Self {
        let mut s = Self {
            body: String::new(),
            width,
            height,
        };
        let _ = writeln!(
            s.body,
            "<!-- config_hash {} seed {} -->",
            prov.config_hash, prov.seed
        );
        s.rect(0.0, 0.0, width, height, "#ffffff", None);
        s.text(width / 2.0, 20.0, title, "middle", 14);
        s
    }

    fn rect(&mut self, x: f64, y: f64, w: f64, h: f64, fill: &str, stroke: Option<&str>) {
        let stroke = stroke
            .map(|c| format!(" stroke=\"{c}\""))
            .unwrap_or_default();
        let _ = writeln!(
            self.body,
            "<rect x=\"{x:.2}\" y=\"{y:.2}\" width=\"{w:.2}\" height=\"{h:.2}\" fill=\"{fill}\"{stroke}/>"
        );
    }

    fn line(&mut self, x1: f64, y1: f64, x2: f64, y2: f64, color: &str) {
        let _ = writeln!(
            self.body,
            "<line x1=\"{x1:.2}\" y1=\"{y1:.2}\" x2=\"{x2:.2}\" y2=\"{y2:.2}\" stroke=\"{color}\"/>"
        );
    }

    fn circle(&mut self, x: f64, y: f64, color: &str) {
        let _ = writeln!(
            self.body,
            "<circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"3\" fill=\"{color}\"/>"
        );
    }

    fn text(&mut self, x: f64, y: f64, t: &str, anchor: &str, size: u32) {
        let _ = writeln!(
            self.body,
            "<text x=\"{x:.2}\" y=\"{y:.2}\" text-anchor=\"{anchor}\" font-size=\"{size}\" font-family=\"sans-serif\">{t}</text>"
        );
    }

    /// Left axis with five ticks over `[lo, hi]`.
    fn y_axis(&mut self, lo: f64, hi: f64, label: &str) {
        let (top, bottom) = (MARGIN, self.height - MARGIN);
        self.line(MARGIN, top, MARGIN, bottom, "#000000");
        self.line(MARGIN, bottom, self.width - MARGIN / 2.0, bottom, "#000000");
        for i in 0..=4 {
            let v = lo + (hi - lo) * i as f64 / 4.0;
            let y = bottom - (bottom - top) * i as f64 / 4.0;
            self.line(MARGIN - 4.0, y, MARGIN, y, "#000000");
            self.text(MARGIN - 6.0, y + 4.0, &format!("{v:.2}"), "end", 10);
        }
        self.text(12.0, self.height / 2.0, label, "middle", 11);
    }

    fn finish(self) -> String {
        format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n{}</svg>\n",
            self.body,
            w = self.width,
            h = self.height
        )
    }
}

/// Value range padded by 5 %, never empty.
fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| {
        (l.min(v), h.max(v))
    });
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.05).max(1e-3);
    (lo - pad, hi + pad)
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (i, f) = (pos.floor() as usize, pos.fract());
    if i + 1 < sorted.len() {
        sorted[i] * (1.0 - f) + sorted[i + 1] * f
    } else {
        sorted[i]
    }
}

/// Box plot of subject-level mean DVR per ROI, reference and predicted side
/// by side. Whiskers span min to max.
pub fn roi_box_plot(report: &EvaluationReport) -> String {
    let mut svg = Svg::new(WIDTH, HEIGHT, "Mean DVR per ROI", &report.provenance);
    let sources = [Source::Truth, Source::Predicted];
    let groups: Vec<Vec<Vec<f64>>> = Roi::ALL
        .iter()
        .map(|&roi| {
            sources
                .iter()
                .map(|&src| {
                    let mut v: Vec<f64> = report
                        .roi_means(src, roi)
                        .into_iter()
                        .map(|(_, m)| m)
                        .collect();
                    v.sort_by(f64::total_cmp);
                    v
                })
                .collect()
        })
        .collect();
    let (lo, hi) = range(groups.iter().flatten().flatten().copied());
    svg.y_axis(lo, hi, "DVR");
    let plot_h = HEIGHT - 2.0 * MARGIN;
    let y = |v: f64| HEIGHT - MARGIN - plot_h * (v - lo) / (hi - lo);
    let slot = (WIDTH - 1.5 * MARGIN) / Roi::ALL.len() as f64;
    for (r, roi) in Roi::ALL.iter().enumerate() {
        let x0 = MARGIN + slot * r as f64;
        svg.text(
            x0 + slot / 2.0,
            HEIGHT - MARGIN + 18.0,
            roi.name(),
            "middle",
            11,
        );
        for (k, values) in groups[r].iter().enumerate() {
            if values.is_empty() {
                continue;
            }
            let cx = x0 + slot * (0.3 + 0.4 * k as f64);
            let w = slot * 0.25;
            let color = SOURCE_COLORS[k];
            let (q1, med, q3) = (
                quantile(values, 0.25),
                quantile(values, 0.5),
                quantile(values, 0.75),
            );
            svg.line(cx, y(values[0]), cx, y(values[values.len() - 1]), color);
            svg.rect(
                cx - w / 2.0,
                y(q3),
                w,
                (y(q1) - y(q3)).max(0.5),
                "#ffffff",
                Some(color),
            );
            svg.line(cx - w / 2.0, y(med), cx + w / 2.0, y(med), color);
        }
    }
    for (k, src) in sources.iter().enumerate() {
        svg.rect(
            WIDTH - 130.0,
            30.0 + 16.0 * k as f64,
            10.0,
            10.0,
            SOURCE_COLORS[k],
            None,
        );
        svg.text(
            WIDTH - 115.0,
            39.0 + 16.0 * k as f64,
            &src.to_string(),
            "start",
            10,
        );
    }
    svg.finish()
}

/// Per-patient lines from NAWM mean to lesion mean, one panel per source.
pub fn subject_lines(report: &EvaluationReport) -> String {
    let mut svg = Svg::new(
        WIDTH,
        HEIGHT,
        "NAWM vs lesion mean DVR per patient",
        &report.provenance,
    );
    let sources = [Source::Truth, Source::Predicted];
    let pairs: Vec<Vec<(f64, f64)>> = sources
        .iter()
        .map(|&src| {
            let nawm = report.roi_means(src, Roi::Nawm);
            let lesion = report.roi_means(src, Roi::Lesion);
            nawm.iter()
                .filter_map(|(id, n)| lesion.iter().find(|(j, _)| j == id).map(|(_, l)| (*n, *l)))
                .collect()
        })
        .collect();
    let (lo, hi) = range(pairs.iter().flatten().flat_map(|&(a, b)| [a, b]));
    svg.y_axis(lo, hi, "DVR");
    let plot_h = HEIGHT - 2.0 * MARGIN;
    let y = |v: f64| HEIGHT - MARGIN - plot_h * (v - lo) / (hi - lo);
    let panel = (WIDTH - 1.5 * MARGIN) / 2.0;
    for (k, src) in sources.iter().enumerate() {
        let (xa, xb) = (
            MARGIN + panel * k as f64 + panel * 0.25,
            MARGIN + panel * k as f64 + panel * 0.75,
        );
        svg.text(
            (xa + xb) / 2.0,
            HEIGHT - MARGIN + 30.0,
            &src.to_string(),
            "middle",
            11,
        );
        svg.text(xa, HEIGHT - MARGIN + 15.0, "nawm", "middle", 10);
        svg.text(xb, HEIGHT - MARGIN + 15.0, "lesion", "middle", 10);
        for &(n, l) in &pairs[k] {
            svg.line(xa, y(n), xb, y(l), SOURCE_COLORS[k]);
            svg.circle(xa, y(n), SOURCE_COLORS[k]);
            svg.circle(xb, y(l), SOURCE_COLORS[k]);
        }
    }
    svg.finish()
}

/// Percentage of demyelinated lesion voxels per patient, reference and
/// predicted bars side by side.
pub fn demyelination_bars(report: &EvaluationReport) -> String {
    let mut svg = Svg::new(
        WIDTH,
        HEIGHT,
        "Demyelinated lesion voxels (%)",
        &report.provenance,
    );
    let rows: Vec<(&str, f64, f64)> = report
        .subjects
        .iter()
        .filter_map(|s| {
            s.demyelination.map(|d| {
                (
                    s.id.as_str(),
                    d.truth_percent * 100.0,
                    d.predicted_percent * 100.0,
                )
            })
        })
        .collect();
    svg.y_axis(0.0, 100.0, "%");
    let plot_h = HEIGHT - 2.0 * MARGIN;
    let y = |v: f64| HEIGHT - MARGIN - plot_h * v / 100.0;
    let slot = (WIDTH - 1.5 * MARGIN) / rows.len().max(1) as f64;
    for (i, (id, t, p)) in rows.iter().enumerate() {
        let x0 = MARGIN + slot * i as f64;
        for (k, v) in [t, p].iter().enumerate() {
            let x = x0 + slot * (0.1 + 0.4 * k as f64);
            svg.rect(
                x,
                y(**v),
                slot * 0.4,
                HEIGHT - MARGIN - y(**v),
                SOURCE_COLORS[k],
                None,
            );
        }
        svg.text(x0 + slot / 2.0, HEIGHT - MARGIN + 14.0, id, "middle", 9);
    }
    svg.finish()
}

/// Axial slice `z` of an agreement map; voxels outside lesions are grey.
pub fn agreement_slice(map: &AgreementMap, z: usize, subject: &str, prov: &Provenance) -> String {
    let [nx, ny, _] = map.dims;
    let cell = 10.0;
    let mut svg = Svg::new(
        nx as f64 * cell + 2.0 * MARGIN,
        ny as f64 * cell + 2.0 * MARGIN + 60.0,
        &format!("Agreement map {subject}, z = {z}"),
        prov,
    );
    for yy in 0..ny {
        for xx in 0..nx {
            let color = match map.categories[xx + nx * (yy + ny * z)] {
                Some(a) => a.color(),
                None => "#bbbbbb",
            };
            svg.rect(
                MARGIN + xx as f64 * cell,
                MARGIN + yy as f64 * cell,
                cell,
                cell,
                color,
                None,
            );
        }
    }
    let legend_y = MARGIN + ny as f64 * cell + 15.0;
    for (k, a) in Agreement::ALL.iter().enumerate() {
        let x = MARGIN + k as f64 * 110.0;
        svg.rect(x, legend_y, 10.0, 10.0, a.color(), Some("#000000"));
        let label = match a {
            Agreement::BothDemyelinated => "both",
            Agreement::BothNormal => "neither",
            Agreement::TruthOnly => "reference only",
            Agreement::PredictionOnly => "prediction only",
        };
        svg.text(x + 14.0, legend_y + 9.0, label, "start", 10);
    }
    svg.finish()
}

/// The slice with the most lesion voxels.
pub fn busiest_slice(map: &AgreementMap) -> usize {
    let [nx, ny, nz] = map.dims;
    (0..nz)
        .max_by_key(|&z| {
            let n = map.categories[z * nx * ny..(z + 1) * nx * ny]
                .iter()
                .filter(|c| c.is_some())
                .count();
            (n, std::cmp::Reverse(z))
        })
        .unwrap_or(0)
}
