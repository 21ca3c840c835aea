//! Report rendering: CSV rows, pretty JSON, and two small SVG line charts.
//! Output is a pure function of the report, so identical reports give identical bytes.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::config::Format;
use super::suite::SuiteReport;
use crate::error::{LopaError, Result};

pub const CSV_COLUMNS: [&str; 16] = [
    "run_id",
    "k",
    "tau",
    "block_size",
    "tau_add",
    "tau_act",
    "tau_conf",
    "devices",
    "protocol",
    "tokens",
    "forwards",
    "tpf",
    "wall_clock_s",
    "avg_tps",
    "max_tps",
    "latency_s",
];

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn render_csv(report: &SuiteReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| LopaError::Io(e.to_string());
    w.write_record(CSV_COLUMNS).map_err(io)?;
    for r in &report.rows {
        w.write_record([
            r.run_id.to_string(),
            r.k.to_string(),
            r.tau.to_string(),
            opt(r.block_size),
            opt(r.tau_add),
            opt(r.tau_act),
            opt(r.tau_conf),
            r.devices.to_string(),
            r.protocol.to_string(),
            r.tokens.to_string(),
            r.forwards.to_string(),
            r.tpf.to_string(),
            r.wall_clock_s.to_string(),
            r.avg_tps.to_string(),
            r.max_tps.to_string(),
            r.latency_s.to_string(),
        ])
        .map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| LopaError::Io(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn render_json(report: &SuiteReport) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("report serializes");
    s.push('\n');
    s
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

struct Series {
    label: String,
    values: Vec<f64>,
}

fn line_chart(title: &str, x_label: &str, y_label: &str, x_ticks: &[String], series: &[Series]) -> String {
    let (w, h) = (480.0, 320.0);
    let (left, right, top, bottom) = (60.0, 20.0, 40.0, 50.0);
    let plot_w = w - left - right;
    let plot_h = h - top - bottom;
    let y_max = series
        .iter()
        .flat_map(|s| s.values.iter().copied())
        .filter(|v| v.is_finite())
        .fold(0.0, f64::max);
    let y_max = if y_max > 0.0 { y_max * 1.1 } else { 1.0 };
    let n = x_ticks.len().max(1);
    let x_at = |i: usize| {
        if n == 1 {
            left + plot_w / 2.0
        } else {
            left + plot_w * i as f64 / (n - 1) as f64
        }
    };
    let y_at = |v: f64| top + plot_h * (1.0 - v / y_max);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{:.1}" y="20" text-anchor="middle" font-size="13">{title}</text>"#, w / 2.0);
    let _ = writeln!(
        svg,
        r#"<line x1="{left}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="black"/>"#,
        top + plot_h,
        left + plot_w,
        top + plot_h
    );
    let _ = writeln!(svg, r#"<line x1="{left}" y1="{top}" x2="{left}" y2="{:.1}" stroke="black"/>"#, top + plot_h);
    for (i, t) in x_ticks.iter().enumerate() {
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{t}</text>"#,
            x_at(i),
            top + plot_h + 15.0
        );
    }
    for i in 0..=4 {
        let v = y_max * i as f64 / 4.0;
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{v:.2}</text>"#,
            left - 5.0,
            y_at(v) + 4.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{x_label}</text>"#,
        left + plot_w / 2.0,
        h - 12.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="14" y="{:.1}" text-anchor="middle" transform="rotate(-90 14 {:.1})">{y_label}</text>"#,
        top + plot_h / 2.0,
        top + plot_h / 2.0
    );
    for (si, s) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        let points: Vec<String> = s
            .values
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .map(|(i, &v)| format!("{:.1},{:.1}", x_at(i), y_at(v)))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            points.join(" ")
        );
        for p in &points {
            let (x, y) = p.split_once(',').expect("point");
            let _ = writeln!(svg, r#"<circle cx="{x}" cy="{y}" r="3" fill="{color}"/>"#);
        }
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" fill="{color}">{}</text>"#,
            left + 10.0,
            top + 12.0 + 14.0 * si as f64,
            s.label
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Mean TPF against branch budget, one line per tau (first device count).
pub fn render_tpf_svg(report: &SuiteReport) -> String {
    let d = report.axes.devices[0];
    let series: Vec<Series> = report
        .axes
        .tau
        .iter()
        .map(|&tau| Series {
            label: format!("tau={tau}"),
            values: report
                .axes
                .k
                .iter()
                .map(|&k| report.aggregate_for(k, tau, d).map_or(f64::NAN, |a| a.mean_tpf))
                .collect(),
        })
        .collect();
    let ticks: Vec<String> = report.axes.k.iter().map(|k| k.to_string()).collect();
    line_chart("Tokens per forward vs branch budget", "branch budget k", "mean TPF", &ticks, &series)
}

/// Mean simulated TPS against device count, one line per k (first tau).
pub fn render_tps_svg(report: &SuiteReport) -> String {
    let tau = report.axes.tau[0];
    let series: Vec<Series> = report
        .axes
        .k
        .iter()
        .map(|&k| Series {
            label: format!("k={k}"),
            values: report
                .axes
                .devices
                .iter()
                .map(|&d| report.aggregate_for(k, tau, d).map_or(f64::NAN, |a| a.mean_tps))
                .collect(),
        })
        .collect();
    let ticks: Vec<String> = report.axes.devices.iter().map(|d| d.to_string()).collect();
    line_chart("Simulated throughput vs devices", "devices D", "mean tokens/s", &ticks, &series)
}

fn check_report(report: &SuiteReport) -> Result<()> {
    if report.rows.is_empty() {
        return Err(LopaError::InvalidConfig("report has no rows".into()));
    }
    let axes = &report.axes;
    if axes.k.is_empty() || axes.tau.is_empty() || axes.devices.is_empty() {
        return Err(LopaError::InvalidConfig("report has an empty sweep axis".into()));
    }
    Ok(())
}

/// Writes the requested formats into `dir`, returning the written paths.
pub fn emit_report(report: &SuiteReport, formats: &[Format], dir: &Path) -> Result<Vec<PathBuf>> {
    check_report(report)?;
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut write = |name: &str, body: String| -> Result<()> {
        let path = dir.join(name);
        std::fs::write(&path, body)?;
        written.push(path);
        Ok(())
    };
    for f in formats {
        match f {
            Format::Csv => write("suite.csv", render_csv(report)?)?,
            Format::Json => write("suite.json", render_json(report))?,
            Format::Svg => {
                write("tpf_vs_k.svg", render_tpf_svg(report))?;
                write("tps_vs_devices.svg", render_tps_svg(report))?;
            }
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::suite::{RunRow, SweepAxes};
    use crate::bpsim::Protocol;
    use crate::types::DecodeMetrics;

    fn row(run_id: usize, k: usize, devices: usize, tpf: f64) -> RunRow {
        RunRow {
            run_id,
            instance: 0,
            k,
            tau: 0.9,
            block_size: None,
            tau_add: None,
            tau_act: None,
            tau_conf: None,
            devices,
            protocol: Protocol::TwoPhase,
            tokens: 12,
            forwards: (12.0 / tpf) as u64,
            tpf,
            wall_clock_s: 0.01,
            avg_tps: 1200.0,
            max_tps: 2000.0,
            latency_s: 0.01,
            metrics: DecodeMetrics::default(),
        }
    }

    fn report() -> SuiteReport {
        SuiteReport::from_rows(
            SweepAxes {
                k: vec![0, 2],
                tau: vec![0.9],
                devices: vec![1],
            },
            vec![row(0, 0, 1, 2.0), row(1, 2, 1, 3.0)],
        )
    }

    #[test]
    fn csv_has_header_and_rows() {
        let csv = render_csv(&report()).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], CSV_COLUMNS.join(","));
        assert!(lines[1].starts_with("0,0,0.9,,,,,1,two-phase,12,6,2,"));
    }

    #[test]
    fn empty_axis_rejected() {
        let mut r = report();
        r.axes.k.clear();
        let dir = tempfile::tempdir().unwrap();
        assert!(emit_report(&r, &[Format::Csv], dir.path()).is_err());
    }

    #[test]
    fn emission_is_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let a = emit_report(&report(), &[Format::Csv, Format::Json, Format::Svg], &dir.path().join("a")).unwrap();
        let b = emit_report(&report(), &[Format::Csv, Format::Json, Format::Svg], &dir.path().join("b")).unwrap();
        assert_eq!(a.len(), 4);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap());
        }
        let svg = std::fs::read_to_string(&a[2]).unwrap();
        assert!(svg.starts_with("<svg") && svg.contains("polyline"));
    }
}
