//! Gantt renderings of a simulated timeline, as plain text or standalone SVG.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::schedule::{OpKind, VersionRef};
use crate::simulator::{Lane, SimReport, TimelineEntry};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RenderFormat {
    Ascii,
    Svg,
}

impl FromStr for RenderFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ascii" | "txt" | "text" => Ok(RenderFormat::Ascii),
            "svg" => Ok(RenderFormat::Svg),
            other => Err(Error::Render(format!("unsupported format {other:?}; expected ascii or svg"))),
        }
    }
}

pub fn render_timeline(report: &SimReport, format: RenderFormat) -> Result<Vec<u8>> {
    let unit = time_unit(report)?;
    let text = match format {
        RenderFormat::Ascii => ascii(report, unit),
        RenderFormat::Svg => svg(report, unit),
    };
    Ok(text.into_bytes())
}

/// Shortest compute pass; one grid unit in both renderings.
fn time_unit(report: &SimReport) -> Result<f64> {
    if report.timeline.is_empty() {
        return Err(Error::Render("timeline is empty".into()));
    }
    let unit = report
        .timeline
        .iter()
        .filter(|e| e.op.kind.is_compute() && e.end > e.start)
        .map(|e| e.end - e.start)
        .fold(f64::INFINITY, f64::min);
    if unit.is_finite() {
        Ok(unit)
    } else {
        Err(Error::Render("timeline has no compute passes".into()))
    }
}

fn version_of(e: &TimelineEntry) -> Option<u32> {
    match e.op.version {
        Some(VersionRef::Fixed(v)) => Some(v),
        _ => None,
    }
}

fn short_label(e: &TimelineEntry) -> String {
    let mb = e.op.microbatch.map(|k| k.to_string()).unwrap_or_default();
    match e.op.kind {
        OpKind::Forward => format!("F{mb}"),
        OpKind::Backward => format!("B{mb}"),
        OpKind::Recompute => format!("R{mb}"),
        OpKind::ActivationSend | OpKind::GradSend => ">".into(),
        OpKind::ActivationRecv | OpKind::GradRecv => "<".into(),
        OpKind::AllReduce => "AR".into(),
        OpKind::WeightUpdate => format!("U{}", version_of(e).unwrap_or(0)),
        OpKind::FlushBarrier => "|".into(),
    }
}

fn fill_char(kind: OpKind) -> char {
    match kind {
        OpKind::Forward => '-',
        OpKind::Backward => '=',
        OpKind::Recompute => '~',
        OpKind::ActivationSend | OpKind::GradSend => '>',
        OpKind::ActivationRecv | OpKind::GradRecv => '<',
        OpKind::AllReduce => '#',
        OpKind::WeightUpdate => '+',
        OpKind::FlushBarrier => '|',
    }
}

const COLS_PER_UNIT: f64 = 4.0;

fn ascii(report: &SimReport, unit: f64) -> String {
    let col = |t: f64| (t / unit * COLS_PER_UNIT).round() as usize;
    let width = col(report.makespan()) + 1;
    let mut out = String::new();
    let _ = writeln!(
        out,
        "# {} d={} m={} batches={}",
        report.label, report.config.depth, report.microbatches_per_batch, report.num_batches
    );
    let _ = writeln!(out, "# one column = {:.6} s; F fwd -, B bwd =, R recompute ~, > send, < recv, | flush, AR all-reduce, U update", unit / COLS_PER_UNIT);
    for worker in 0..report.workers() {
        for lane in [Lane::Compute, Lane::Collective] {
            let entries: Vec<&TimelineEntry> = report
                .timeline
                .iter()
                .filter(|e| e.worker == worker && e.lane == lane)
                .collect();
            if lane == Lane::Collective && entries.iter().all(|e| e.end <= e.start) {
                continue;
            }
            let mut row = vec![' '; width];
            for e in &entries {
                let (c0, c1) = (col(e.start), col(e.end));
                if c1 > c0 {
                    row[c0..c1].iter_mut().for_each(|c| *c = fill_char(e.op.kind));
                    for (i, ch) in short_label(e).chars().take(c1 - c0).enumerate() {
                        row[c0 + i] = ch;
                    }
                } else if e.op.kind == OpKind::FlushBarrier && row[c0] == ' ' {
                    row[c0] = '|';
                }
            }
            let name = match lane {
                Lane::Compute => format!("Worker {}", worker + 1),
                Lane::Collective => "  sync".to_string(),
            };
            let line: String = row.into_iter().collect();
            let _ = writeln!(out, "{name:<9}|{}", line.trim_end());
        }
    }
    out
}

const PX_PER_UNIT: f64 = 40.0;
const ROW: f64 = 28.0;
const SYNC: f64 = 8.0;
const GAP: f64 = 8.0;
const LEFT: f64 = 80.0;
const TOP: f64 = 32.0;
const STROKE: &str = "#333333";

fn color(kind: OpKind) -> &'static str {
    match kind {
        OpKind::Forward => "#5b8bd6",
        OpKind::Backward => "#5cb85c",
        OpKind::Recompute => "#e8a33d",
        OpKind::ActivationSend | OpKind::ActivationRecv | OpKind::GradSend | OpKind::GradRecv => "#c8c8c8",
        OpKind::AllReduce => "#9b72cf",
        OpKind::WeightUpdate => "url(#update)",
        OpKind::FlushBarrier => "#d9534f",
    }
}

fn svg(report: &SimReport, unit: f64) -> String {
    let x = |t: f64| LEFT + t / unit * PX_PER_UNIT;
    let band = ROW + SYNC + GAP;
    let width = x(report.makespan()) + 20.0;
    let height = TOP + band * report.workers() as f64 + 10.0;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.2}" height="{height:.2}" viewBox="0 0 {width:.2} {height:.2}" font-family="sans-serif">"#
    );
    out.push_str(concat!(
        "<defs><pattern id=\"update\" width=\"6\" height=\"6\" patternUnits=\"userSpaceOnUse\">",
        "<rect width=\"6\" height=\"6\" fill=\"#5cb85c\"/><rect width=\"3\" height=\"3\" fill=\"#ffffff\"/>",
        "<rect x=\"3\" y=\"3\" width=\"3\" height=\"3\" fill=\"#ffffff\"/></pattern></defs>\n"
    ));
    let _ = writeln!(
        out,
        r#"<text x="{LEFT}" y="18" font-size="13">{} (d={}, m={}, {} batches)</text>"#,
        escape(&report.label),
        report.config.depth,
        report.microbatches_per_batch,
        report.num_batches
    );
    for worker in 0..report.workers() {
        let y0 = TOP + band * worker as f64;
        let _ = writeln!(
            out,
            r#"<text x="6" y="{:.2}" font-size="12">Worker {}</text>"#,
            y0 + ROW / 2.0 + 4.0,
            worker + 1
        );
        for e in report.timeline.iter().filter(|e| e.worker == worker) {
            let (x0, x1) = (x(e.start), x(e.end));
            let (y, h) = match e.lane {
                Lane::Compute => (y0, ROW),
                Lane::Collective => (y0 + ROW + 1.0, SYNC),
            };
            if e.op.kind == OpKind::FlushBarrier {
                let _ = writeln!(
                    out,
                    r#"<line x1="{x1:.2}" y1="{y:.2}" x2="{x1:.2}" y2="{:.2}" stroke="{}" stroke-width="2" data-stage="{}" data-op="FlushBarrier"/>"#,
                    y + h,
                    color(e.op.kind),
                    worker
                );
                continue;
            }
            if x1 <= x0 {
                continue;
            }
            let mb = e.op.microbatch.map(|k| k.to_string()).unwrap_or_default();
            let ver = version_of(e).map(|v| v.to_string()).unwrap_or_default();
            let _ = write!(
                out,
                r#"<rect x="{x0:.2}" y="{y:.2}" width="{:.2}" height="{h:.2}" fill="{}" stroke="{STROKE}" stroke-width="0.5" data-worker="{}" data-stage="{worker}" data-op="{}" data-mb="{mb}" data-ver="{ver}"><title>{} mb={} ver={} [{:.4}, {:.4}]</title></rect>"#,
                x1 - x0,
                color(e.op.kind),
                worker + 1,
                e.op.kind.name(),
                e.op.kind.name(),
                if mb.is_empty() { "-" } else { &mb },
                if ver.is_empty() { "-" } else { &ver },
                e.start,
                e.end
            );
            out.push('\n');
            if e.op.kind.is_compute() && e.lane == Lane::Compute {
                let _ = writeln!(
                    out,
                    r#"<text x="{:.2}" y="{:.2}" font-size="11" text-anchor="middle" data-label="mb">{mb}</text>"#,
                    (x0 + x1) / 2.0,
                    y + ROW / 2.0 + 4.0
                );
                if !ver.is_empty() {
                    let _ = writeln!(
                        out,
                        r#"<text x="{:.2}" y="{:.2}" font-size="7" text-anchor="end" data-label="ver">v{ver}</text>"#,
                        x1 - 2.0,
                        y + ROW - 2.0
                    );
                }
            }
        }
    }
    out.push_str("</svg>\n");
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::figure;

    #[test]
    fn format_parsing() {
        assert_eq!("SVG".parse::<RenderFormat>().unwrap(), RenderFormat::Svg);
        assert!(matches!("png".parse::<RenderFormat>(), Err(Error::Render(_))));
    }

    #[test]
    fn empty_timeline_is_rejected() {
        let mut report = figure("fig3a").unwrap().simulate().unwrap();
        report.timeline.clear();
        assert!(render_timeline(&report, RenderFormat::Ascii).is_err());
    }

    #[test]
    fn ascii_labels_passes() {
        let report = figure("fig3a").unwrap().simulate().unwrap();
        let text = String::from_utf8(render_timeline(&report, RenderFormat::Ascii).unwrap()).unwrap();
        let w1 = text.lines().find(|l| l.starts_with("Worker 1")).unwrap();
        assert!(w1.starts_with("Worker 1 |F1--F2--F3--F4--"));
        assert!(w1.contains("B4======"));
        assert!(text.lines().any(|l| l.starts_with("Worker 2")));
    }

    #[test]
    fn svg_carries_version_of_each_pass() {
        let report = figure("fig2").unwrap().simulate().unwrap();
        let svg = String::from_utf8(render_timeline(&report, RenderFormat::Svg).unwrap()).unwrap();
        assert!(svg.starts_with("<svg xmlns=\"http://www.w3.org/2000/svg\""));
        assert!(svg.contains(r#"data-worker="4" data-stage="3" data-op="Forward" data-mb="9" data-ver="1""#));
        assert!(svg.contains(">Worker 4</text>"));
        assert!(!svg.contains("href"));
    }

    #[test]
    fn rendering_is_deterministic() {
        let a = figure("fig1b").unwrap().simulate().unwrap();
        let b = figure("fig1b").unwrap().simulate().unwrap();
        for f in [RenderFormat::Ascii, RenderFormat::Svg] {
            assert_eq!(render_timeline(&a, f).unwrap(), render_timeline(&b, f).unwrap());
        }
    }
}
