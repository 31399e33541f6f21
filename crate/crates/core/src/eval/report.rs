use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{SweepReport, SweepRow};
use crate::error::{Error, Result};

const W: f64 = 640.0;
const H: f64 = 400.0;
const MARGIN: f64 = 50.0;

/// `noise_level,accuracy,macro_f1` with shortest round-trip floats.
pub fn report_csv(report: &SweepReport) -> String {
    let mut out = String::from("noise_level,accuracy,macro_f1\n");
    for r in &report.rows {
        let _ = writeln!(out, "{},{},{}", r.noise_level, r.accuracy, r.macro_f1);
    }
    out
}

pub fn parse_report_csv(text: &str) -> Result<Vec<SweepRow>> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::Input(e.to_string()))?
        .clone();
    if headers.iter().collect::<Vec<_>>() != ["noise_level", "accuracy", "macro_f1"] {
        return Err(Error::Input(format!(
            "unexpected report header {headers:?}"
        )));
    }
    reader
        .records()
        .map(|row| {
            let row = row.map_err(|e| Error::Input(e.to_string()))?;
            let f = |i: usize| -> Result<f64> {
                row.get(i)
                    .unwrap_or("")
                    .parse()
                    .map_err(|_| Error::Input(format!("bad number in report row {row:?}")))
            };
            Ok(SweepRow {
                noise_level: f(0)?,
                accuracy: f(1)?,
                macro_f1: f(2)?,
            })
        })
        .collect()
}

fn polyline(points: &[(f64, f64)], color: &str) -> String {
    let pts: Vec<String> = points
        .iter()
        .map(|(x, y)| format!("{x:.2},{y:.2}"))
        .collect();
    format!(
        "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>\n",
        pts.join(" ")
    )
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// Accuracy and macro F1 against noise level; levels are evenly spaced on the x axis.
pub fn report_svg(report: &SweepReport) -> String {
    let n = report.rows.len().max(2) - 1;
    let x = |i: usize| MARGIN + (W - 2.0 * MARGIN) * i as f64 / n as f64;
    let y = |v: f64| H - MARGIN - (H - 2.0 * MARGIN) * v;
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    );
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"20\" text-anchor=\"middle\">{} under {} noise</text>",
        W / 2.0,
        escape(&report.method),
        report.kind
    );
    let _ = writeln!(
        s,
        "<line x1=\"{MARGIN}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>",
        y(0.0),
        W - MARGIN,
        y(0.0)
    );
    let _ = writeln!(
        s,
        "<line x1=\"{MARGIN}\" y1=\"{}\" x2=\"{MARGIN}\" y2=\"{}\" stroke=\"black\"/>",
        y(0.0),
        y(1.0)
    );
    for t in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{:.2}\" text-anchor=\"end\">{t}</text>",
            MARGIN - 6.0,
            y(t) + 4.0
        );
    }
    for (i, r) in report.rows.iter().enumerate() {
        let _ = writeln!(
            s,
            "<text x=\"{:.2}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
            x(i),
            H - MARGIN + 18.0,
            r.noise_level
        );
    }
    let acc: Vec<(f64, f64)> = report
        .rows
        .iter()
        .enumerate()
        .map(|(i, r)| (x(i), y(r.accuracy)))
        .collect();
    let f1: Vec<(f64, f64)> = report
        .rows
        .iter()
        .enumerate()
        .map(|(i, r)| (x(i), y(r.macro_f1)))
        .collect();
    s.push_str(&polyline(&acc, "#1f77b4"));
    s.push_str(&polyline(&f1, "#d62728"));
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"40\" fill=\"#1f77b4\">accuracy</text>\n<text x=\"{}\" y=\"56\" fill=\"#d62728\">macro F1</text>",
        W - MARGIN - 70.0,
        W - MARGIN - 70.0
    );
    s.push_str("</svg>\n");
    s
}

/// Clean and perturbed traces of one lead, stacked.
pub fn signal_svg(title: &str, clean: &[f64], noisy: &[f64]) -> String {
    let panel = (H - 2.0 * MARGIN) / 2.0;
    let lo = clean
        .iter()
        .chain(noisy)
        .copied()
        .fold(f64::INFINITY, f64::min);
    let hi = clean
        .iter()
        .chain(noisy)
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let n = clean.len().max(noisy.len()).max(2) - 1;
    let trace = |v: &[f64], top: f64| -> Vec<(f64, f64)> {
        v.iter()
            .enumerate()
            .map(|(i, &s)| {
                (
                    MARGIN + (W - 2.0 * MARGIN) * i as f64 / n as f64,
                    top + panel - panel * (s - lo) / span,
                )
            })
            .collect()
    };
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    );
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"20\" text-anchor=\"middle\">{}</text>",
        W / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        "<text x=\"{MARGIN}\" y=\"{}\">clean</text>",
        MARGIN - 4.0
    );
    let _ = writeln!(
        s,
        "<text x=\"{MARGIN}\" y=\"{}\">perturbed</text>",
        MARGIN + panel - 4.0 + 8.0
    );
    s.push_str(&polyline(&trace(clean, MARGIN), "#1f77b4"));
    s.push_str(&polyline(&trace(noisy, MARGIN + panel + 8.0), "#d62728"));
    s.push_str("</svg>\n");
    s
}

/// Writes `<method>_<kind>.csv`, `.svg` and `.json` (full report with metadata)
/// into `out_dir`, returning the paths.
pub fn emit_report(report: &SweepReport, out_dir: &Path) -> Result<Vec<PathBuf>> {
    report.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let stem = format!("{}_{}", report.method, report.kind);
    let json = serde_json::to_string_pretty(report).map_err(|e| Error::Input(e.to_string()))?;
    let files = [
        (out_dir.join(format!("{stem}.csv")), report_csv(report)),
        (out_dir.join(format!("{stem}.svg")), report_svg(report)),
        (out_dir.join(format!("{stem}.json")), json + "\n"),
    ];
    for (path, text) in &files {
        fs::write(path, text).map_err(|e| Error::io(path, e))?;
    }
    Ok(files.into_iter().map(|(p, _)| p).collect())
}
