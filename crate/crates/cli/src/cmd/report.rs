//! Static SVG plots and a markdown summary from a run directory.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use alignlite::train::EpochRecord;
use anyhow::Context;
use serde::Deserialize;

use super::sweep::{CurveRow, BASELINE, REGULARIZED};
use crate::output::read_csv;
use crate::{CmdResult, Failure};

const W: f64 = 640.0;
const H: f64 = 400.0;
const MARGIN: f64 = 60.0;
const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

#[derive(Debug, Deserialize)]
struct GridCsvRow {
    layer_a: usize,
    layer_b: usize,
    score: f64,
    metric: String,
}

pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
    pub markers: bool,
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Line chart with axis ticks at the data bounds.
pub fn line_chart(title: &str, xlabel: &str, ylabel: &str, series: &[Series]) -> String {
    let (x0, x1) = bounds(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let (y0, y1) = bounds(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
    let px = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (W - 2.0 * MARGIN);
    let py = |y: f64| H - MARGIN - (y - y0) / (y1 - y0) * (H - 2.0 * MARGIN);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<line x1="{m}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{m}" y1="{t}" x2="{m}" y2="{b}" stroke="black"/>"#,
        m = MARGIN,
        b = H - MARGIN,
        r = W - MARGIN,
        t = MARGIN
    );
    for (v, anchor, x, y) in [
        (x0, "start", MARGIN, H - MARGIN + 16.0),
        (x1, "end", W - MARGIN, H - MARGIN + 16.0),
    ] {
        let _ = writeln!(s, r#"<text x="{x}" y="{y}" text-anchor="{anchor}">{v:.4}</text>"#);
    }
    for (v, y) in [(y0, H - MARGIN), (y1, MARGIN)] {
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{v:.4}</text>"#, MARGIN - 4.0, y + 4.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, W / 2.0, H - 16.0, escape(xlabel));
    let _ = writeln!(
        s,
        r#"<text x="16" y="{y}" text-anchor="middle" transform="rotate(-90 16 {y})">{}</text>"#,
        escape(ylabel),
        y = H / 2.0
    );
    for (i, ser) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = ser.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, pts.join(" "));
        if ser.markers {
            for &(x, y) in &ser.points {
                let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#, px(x), py(y));
            }
        }
        let ly = MARGIN + 16.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{ly}" fill="{color}" text-anchor="end">{}</text>"#,
            W - MARGIN - 4.0,
            escape(&ser.name)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Grid of colored cells, darker for higher scores.
fn heatmap(title: &str, rows: &[GridCsvRow]) -> String {
    let mut la: Vec<usize> = rows.iter().map(|r| r.layer_a).collect();
    let mut lb: Vec<usize> = rows.iter().map(|r| r.layer_b).collect();
    la.sort_unstable();
    la.dedup();
    lb.sort_unstable();
    lb.dedup();
    let (lo, hi) = bounds(rows.iter().map(|r| r.score));
    let cw = (W - 2.0 * MARGIN) / lb.len() as f64;
    let ch = (H - 2.0 * MARGIN) / la.len() as f64;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, escape(title));
    for r in rows {
        let i = la.binary_search(&r.layer_a).expect("present");
        let j = lb.binary_search(&r.layer_b).expect("present");
        let t = (r.score - lo) / (hi - lo);
        let level = (255.0 * (1.0 - t)).round() as u8;
        let (x, y) = (MARGIN + j as f64 * cw, MARGIN + i as f64 * ch);
        let _ = writeln!(
            s,
            r#"<rect x="{x:.2}" y="{y:.2}" width="{cw:.2}" height="{ch:.2}" fill="rgb({level},{level},255)"><title>a={} b={} score={:.6}</title></rect>"#,
            r.layer_a, r.layer_b, r.score
        );
    }
    for (i, l) in la.iter().enumerate() {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.2}" text-anchor="end">{l}</text>"#,
            MARGIN - 4.0,
            MARGIN + (i as f64 + 0.5) * ch + 4.0
        );
    }
    for (j, l) in lb.iter().enumerate() {
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{}" text-anchor="middle">{l}</text>"#,
            MARGIN + (j as f64 + 0.5) * cw,
            H - MARGIN + 16.0
        );
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">layer (b)</text>"#, W / 2.0, H - 16.0);
    let _ = writeln!(
        s,
        r#"<text x="16" y="{y}" text-anchor="middle" transform="rotate(-90 16 {y})">layer (a)</text>"#,
        y = H / 2.0
    );
    s.push_str("</svg>\n");
    s
}

fn write(path: &Path, text: &str) -> CmdResult<()> {
    Ok(fs::write(path, text).with_context(|| format!("writing {}", path.display()))?)
}

pub fn run(dir: &Path) -> CmdResult<()> {
    let history = dir.join("history.csv");
    let curve = dir.join("curve.csv");
    let grid = dir.join("grid.csv");
    if ![&history, &curve, &grid].iter().any(|p| p.exists()) {
        return Err(Failure::input(format!(
            "{} has none of history.csv, curve.csv, grid.csv",
            dir.display()
        )));
    }
    let mut md = String::from("# Run summary\n\n");

    if history.exists() {
        let recs: Vec<EpochRecord> = read_csv(&history)?;
        if recs.is_empty() {
            return Err(Failure::input(format!("{} has no rows", history.display())));
        }
        let pts = |f: fn(&EpochRecord) -> f64| recs.iter().map(|r| (r.epoch as f64, f(r))).collect();
        let svg = line_chart(
            "Training loss",
            "epoch",
            "loss",
            &[
                Series { name: "total".into(), points: pts(|r| r.total_loss), markers: false },
                Series { name: "contrastive".into(), points: pts(|r| r.contrastive_loss), markers: false },
            ],
        );
        write(&dir.join("loss.svg"), &svg)?;
        let best = recs
            .iter()
            .max_by(|a, b| a.val_r1.total_cmp(&b.val_r1))
            .expect("nonempty");
        let last = recs.last().expect("nonempty");
        let _ = writeln!(md, "## Training\n");
        let _ = writeln!(md, "- epochs run: {}", recs.len());
        let _ = writeln!(md, "- final total loss: {:.6}", last.total_loss);
        let _ = writeln!(md, "- best validation R@1: {:.4} (epoch {})", best.val_r1, best.epoch);
        let _ = writeln!(md, "- plot: loss.svg\n");
    }

    if curve.exists() {
        let rows: Vec<CurveRow> = read_csv(&curve)?;
        if rows.is_empty() {
            return Err(Failure::input(format!("{} has no rows", curve.display())));
        }
        let mean = |cond: &str| {
            let mut acc: std::collections::BTreeMap<usize, (f64, usize)> = Default::default();
            for r in rows.iter().filter(|r| r.condition == cond) {
                let e = acc.entry(r.size).or_default();
                e.0 += r.test_r1;
                e.1 += 1;
            }
            acc.into_iter()
                .map(|(n, (s, c))| (n as f64, s / c as f64))
                .collect::<Vec<_>>()
        };
        let (base, reg) = (mean(BASELINE), mean(REGULARIZED));
        let svg = line_chart(
            "Test R@1 vs training pairs",
            "training pairs",
            "mean R@1",
            &[
                Series { name: BASELINE.into(), points: base.clone(), markers: true },
                Series { name: REGULARIZED.into(), points: reg.clone(), markers: true },
            ],
        );
        write(&dir.join("scaling.svg"), &svg)?;
        let _ = writeln!(md, "## Scaling\n");
        let _ = writeln!(md, "| pairs | {BASELINE} | {REGULARIZED} |\n|---:|---:|---:|");
        for ((n, b), (_, r)) in base.iter().zip(&reg) {
            let _ = writeln!(md, "| {n} | {b:.4} | {r:.4} |");
        }
        let util = dir.join("utility.json");
        if util.exists() {
            let v: serde_json::Value = serde_json::from_str(
                &fs::read_to_string(&util).with_context(|| format!("reading {}", util.display()))?,
            )
            .with_context(|| format!("parsing {}", util.display()))?;
            match v["utility"]["mean"].as_f64() {
                Some(u) => {
                    let _ = writeln!(md, "\nMean utility: {u:.4}");
                }
                None => {
                    let _ = writeln!(md, "\nUtility unavailable: {}", v["error"].as_str().unwrap_or("unknown"));
                }
            }
        }
        let _ = writeln!(md, "\n- plot: scaling.svg\n");
    }

    if grid.exists() {
        let rows: Vec<GridCsvRow> = read_csv(&grid)?;
        if rows.is_empty() {
            return Err(Failure::input(format!("{} has no rows", grid.display())));
        }
        let metric = rows[0].metric.clone();
        write(&dir.join("heatmap.svg"), &heatmap(&format!("Layer similarity ({metric})"), &rows))?;
        let best = rows
            .iter()
            .max_by(|a, b| a.score.total_cmp(&b.score).then((a.layer_a, a.layer_b).cmp(&(b.layer_a, b.layer_b))))
            .expect("nonempty");
        let _ = writeln!(md, "## Layer selection\n");
        let _ = writeln!(md, "- metric: {metric}");
        let _ = writeln!(md, "- best pair: ({}, {}) score {:.6}", best.layer_a, best.layer_b, best.score);
        let _ = writeln!(md, "- plot: heatmap.svg\n");
    }

    write(&dir.join("summary.md"), &md)
}
