//! SVG success / precision plots and a CSV curve table.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::eval::{norm_precision_threshold, precision_threshold, success_threshold, EvalReport};

const W: f64 = 480.0;
const H: f64 = 360.0;
const MARGIN: f64 = 50.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

struct Plot<'a> {
    title: &'a str,
    x_label: &'a str,
    y_label: &'a str,
    x_max: f64,
}

fn sx(x: f64, x_max: f64) -> f64 {
    MARGIN + x / x_max * (W - 2.0 * MARGIN)
}

fn sy(y: f64) -> f64 {
    H - MARGIN - y * (H - 2.0 * MARGIN)
}

fn render(p: &Plot, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{:.1}" y="20" text-anchor="middle" font-size="13">{}</text>"#, W / 2.0, p.title);
    for k in 0..=5 {
        let f = k as f64 / 5.0;
        let (x, y) = (sx(f * p.x_max, p.x_max), sy(f));
        let _ = writeln!(s, r##"<line x1="{x:.1}" y1="{:.1}" x2="{x:.1}" y2="{:.1}" stroke="#ddd"/>"##, sy(0.0), sy(1.0));
        let _ = writeln!(s, r##"<line x1="{:.1}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#ddd"/>"##, sx(0.0, p.x_max), sx(p.x_max, p.x_max));
        let _ = writeln!(s, r#"<text x="{x:.1}" y="{:.1}" text-anchor="middle">{:.2}</text>"#, sy(0.0) + 15.0, f * p.x_max);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{f:.1}</text>"#, sx(0.0, p.x_max) - 5.0, y + 4.0);
    }
    let _ = writeln!(
        s,
        r#"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="none" stroke="black"/>"#,
        MARGIN,
        MARGIN,
        W - 2.0 * MARGIN,
        H - 2.0 * MARGIN
    );
    let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, W / 2.0, H - 12.0, p.x_label);
    let _ = writeln!(
        s,
        r#"<text x="14" y="{:.1}" text-anchor="middle" transform="rotate(-90 14 {:.1})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        p.y_label
    );
    for (i, (label, pts)) in series.iter().enumerate() {
        let colour = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = pts
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x, p.x_max), sy(y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{colour}" stroke-width="{}" points="{}"/>"#,
            if i == 0 { 2.0 } else { 1.0 },
            path.join(" ")
        );
        let ly = MARGIN + 15.0 + 14.0 * i as f64;
        let _ = writeln!(s, r#"<text x="{:.1}" y="{ly:.1}" text-anchor="end" fill="{colour}">{label}</text>"#, W - MARGIN - 6.0);
    }
    s.push_str("</svg>\n");
    s
}

fn series(report: &EvalReport, pick: impl Fn(&crate::eval::Summary) -> (&Vec<f64>, f64), at: impl Fn(usize) -> f64) -> Vec<(String, Vec<(f64, f64)>)> {
    let mut out = Vec::new();
    let mut push = |name: &str, s: &crate::eval::Summary| {
        let (curve, score) = pick(s);
        let pts = curve.iter().enumerate().map(|(k, &v)| (at(k), v)).collect();
        out.push((format!("{name} [{score:.3}]"), pts));
    };
    push("overall", &report.overall);
    for r in &report.sequences {
        push(&r.name, &r.summary);
    }
    out
}

pub fn success_svg(report: &EvalReport) -> String {
    let p = Plot {
        title: "Success plot of OPE",
        x_label: "Overlap threshold",
        y_label: "Success rate",
        x_max: 1.0,
    };
    render(&p, &series(report, |s| (&s.success_curve, s.success_auc), success_threshold))
}

pub fn norm_precision_svg(report: &EvalReport) -> String {
    let p = Plot {
        title: "Normalized precision plot of OPE",
        x_label: "Normalized location error threshold",
        y_label: "Precision",
        x_max: 0.5,
    };
    render(&p, &series(report, |s| (&s.norm_precision_curve, s.norm_precision), norm_precision_threshold))
}

pub fn precision_svg(report: &EvalReport) -> String {
    let p = Plot {
        title: "Precision plot of OPE",
        x_label: "Location error threshold (px)",
        y_label: "Precision",
        x_max: 50.0,
    };
    render(&p, &series(report, |s| (&s.precision_curve, s.precision), precision_threshold))
}

/// `curve,threshold,value` rows for the overall curves.
pub fn curve_table(report: &EvalReport) -> String {
    let mut s = String::from("curve,threshold,value\n");
    let o = &report.overall;
    for (k, v) in o.success_curve.iter().enumerate() {
        let _ = writeln!(s, "success,{:.3},{v:.12}", success_threshold(k));
    }
    for (k, v) in o.norm_precision_curve.iter().enumerate() {
        let _ = writeln!(s, "norm_precision,{:.3},{v:.12}", norm_precision_threshold(k));
    }
    for (k, v) in o.precision_curve.iter().enumerate() {
        let _ = writeln!(s, "precision,{:.0},{v:.12}", precision_threshold(k));
    }
    s
}

/// Writes the three plots and the curve table into `dir`.
pub fn emit_plots(report: &EvalReport, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = [
        ("success.svg", success_svg(report)),
        ("norm_precision.svg", norm_precision_svg(report)),
        ("precision.svg", precision_svg(report)),
        ("curves.csv", curve_table(report)),
    ];
    let mut out = Vec::new();
    for (name, body) in files {
        let p = dir.join(name);
        fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        out.push(p);
    }
    Ok(out)
}
