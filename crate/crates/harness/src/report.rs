//! Accuracy tables and block/timestep ablations, as CSV, aligned text and
//! SVG line plots. Output is a pure function of the records: rows are
//! sorted and numbers have fixed formatting, so regenerating a report gives
//! identical bytes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use diffprobe::checkpoint::write_atomic;
use diffprobe::HeadKind;

use crate::error::{HarnessError, Result};
use crate::store::RunRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ReportStyle {
    AccuracyTable,
    BlockAblation,
    TimestepAblation,
}

impl ReportStyle {
    pub fn name(self) -> &'static str {
        match self {
            ReportStyle::AccuracyTable => "accuracy-table",
            ReportStyle::BlockAblation => "block-ablation",
            ReportStyle::TimestepAblation => "timestep-ablation",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        w.into_inner().map_err(|e| HarnessError::Report(e.to_string()))
    }

    /// Columns padded to a common width; the first column is left-aligned,
    /// the rest right-aligned.
    pub fn to_text(&self) -> String {
        let n = self.header.len();
        let mut width = vec![0; n];
        for r in std::iter::once(&self.header).chain(&self.rows) {
            for (w, c) in width.iter_mut().zip(r) {
                *w = (*w).max(c.chars().count());
            }
        }
        let line = |r: &[String]| {
            let cells: Vec<String> = r
                .iter()
                .zip(&width)
                .enumerate()
                .map(|(i, (c, &w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
                .collect();
            cells.join("  ").trim_end().to_string()
        };
        let mut out = line(&self.header);
        out.push('\n');
        out.push_str(&"-".repeat(width.iter().sum::<usize>() + 2 * (n.saturating_sub(1))));
        out.push('\n');
        for r in &self.rows {
            out.push_str(&line(r));
            out.push('\n');
        }
        out
    }
}

/// Accuracy as a percentage with two decimals; `NA` when missing.
pub fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{:.2}", 100.0 * x))
}

/// Metric columns shared by all records: `clean` then each attack.
pub fn metric_names(records: &[RunRecord]) -> Result<Vec<String>> {
    let first = records
        .first()
        .ok_or_else(|| HarnessError::Report("no records to report".into()))?;
    let attacks: Vec<&str> = first.attacks.iter().map(|a| a.name.as_str()).collect();
    for r in records {
        if r.config_hash != first.config_hash {
            return Err(HarnessError::Report("records come from different configurations".into()));
        }
        if r.attacks.iter().map(|a| a.name.as_str()).ne(attacks.iter().copied()) {
            return Err(HarnessError::Report(format!("record {} has a different attack suite", r.cell.key())));
        }
    }
    Ok(std::iter::once("clean".to_string())
        .chain(attacks.iter().map(|s| s.to_string()))
        .collect())
}

fn metric_values(r: &RunRecord) -> Vec<Option<f64>> {
    std::iter::once(Some(r.clean_accuracy))
        .chain(r.attacks.iter().map(|a| a.robust_accuracy))
        .collect()
}

/// One row per `(head, block, timestep)` with clean and robust accuracy in
/// percent.
pub fn accuracy_table(records: &[RunRecord]) -> Result<Table> {
    let metrics = metric_names(records)?;
    let mut sorted: Vec<&RunRecord> = records.iter().collect();
    sorted.sort_by_key(|r| r.cell);
    let mut header = vec!["head".to_string(), "block".into(), "timestep".into()];
    header.extend(metrics);
    let rows = sorted
        .iter()
        .map(|r| {
            let mut row = vec![r.cell.head.name().to_string(), r.cell.block.to_string(), r.cell.timestep.to_string()];
            row.extend(metric_values(r).into_iter().map(pct));
            row
        })
        .collect();
    Ok(Table { header, rows })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Block,
    Timestep,
}

impl Axis {
    fn name(self) -> &'static str {
        match self {
            Axis::Block => "block",
            Axis::Timestep => "timestep",
        }
    }
}

/// Mean of each metric at one axis value, over the other axis.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationPoint {
    pub head: HeadKind,
    pub x: usize,
    /// Cells averaged into this point.
    pub cells: usize,
    /// Same order as [`metric_names`]; `None` when no cell had a value.
    pub values: Vec<Option<f64>>,
}

/// Per-head curves of each metric against `axis`, averaging over whatever
/// values of the other axis the records contain.
pub fn ablation(records: &[RunRecord], axis: Axis) -> Result<(Vec<String>, Vec<AblationPoint>)> {
    let metrics = metric_names(records)?;
    let mut groups: BTreeMap<(HeadKind, usize), Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        let x = match axis {
            Axis::Block => r.cell.block,
            Axis::Timestep => r.cell.timestep,
        };
        groups.entry((r.cell.head, x)).or_default().push(r);
    }
    let points = groups
        .into_iter()
        .map(|((head, x), rs)| {
            let values = (0..metrics.len())
                .map(|m| {
                    let vals: Vec<f64> = rs.iter().filter_map(|r| metric_values(r)[m]).collect();
                    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
                })
                .collect();
            AblationPoint {
                head,
                x,
                cells: rs.len(),
                values,
            }
        })
        .collect();
    Ok((metrics, points))
}

pub fn ablation_table(metrics: &[String], points: &[AblationPoint], axis: Axis) -> Table {
    let mut header = vec!["head".to_string(), axis.name().to_string(), "cells".into()];
    header.extend(metrics.iter().cloned());
    let rows = points
        .iter()
        .map(|p| {
            let mut row = vec![p.head.name().to_string(), p.x.to_string(), p.cells.to_string()];
            row.extend(p.values.iter().copied().map(pct));
            row
        })
        .collect();
    Table { header, rows }
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Accuracy (0–100 %) against categorical x values, one line per series.
pub fn line_plot_svg(title: &str, x_label: &str, xs: &[usize], series: &[(String, Vec<Option<f64>>)]) -> String {
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (60.0, 150.0, 40.0, 50.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let xpos = |i: usize| {
        if xs.len() <= 1 {
            left + pw / 2.0
        } else {
            left + pw * i as f64 / (xs.len() - 1) as f64
        }
    };
    let ypos = |v: f64| top + ph * (1.0 - v);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#, left + pw / 2.0, esc(title));
    for k in 0..=5 {
        let v = k as f64 / 5.0;
        let y = ypos(v);
        let _ = writeln!(
            s,
            r##"<line x1="{left}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#dddddd"/>"##,
            left + pw
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#,
            left - 6.0,
            y + 4.0,
            (v * 100.0).round()
        );
    }
    let _ = writeln!(
        s,
        r#"<line x1="{left}" y1="{top}" x2="{left}" y2="{:.2}" stroke="black"/>"#,
        top + ph
    );
    let _ = writeln!(
        s,
        r#"<line x1="{left}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="black"/>"#,
        top + ph,
        left + pw,
        top + ph
    );
    for (i, x) in xs.iter().enumerate() {
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{x}</text>"#,
            xpos(i),
            top + ph + 18.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
        left + pw / 2.0,
        h - 10.0,
        esc(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">accuracy [%]</text>"#,
        top + ph / 2.0,
        top + ph / 2.0
    );
    for (k, (name, vals)) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let pts: Vec<String> = vals
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| format!("{:.2},{:.2}", xpos(i), ypos(v))))
            .collect();
        if pts.len() > 1 {
            let _ = writeln!(
                s,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
                pts.join(" ")
            );
        }
        for p in &pts {
            let (cx, cy) = p.split_once(',').expect("formatted pair");
            let _ = writeln!(s, r#"<circle cx="{cx}" cy="{cy}" r="3" fill="{color}"/>"#);
        }
        let ly = top + 16.0 * k as f64 + 8.0;
        let lx = left + pw + 12.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"/>"#,
            lx + 18.0
        );
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}">{}</text>"#, lx + 24.0, ly + 4.0, esc(name));
    }
    s.push_str("</svg>\n");
    s
}

fn write(dir: &Path, name: &str, bytes: &[u8], out: &mut Vec<PathBuf>) -> Result<()> {
    let p = dir.join(name);
    write_atomic(&p, bytes)?;
    out.push(p);
    Ok(())
}

/// Writes the report files for `style` into `dir` and returns their paths.
pub fn emit_report(records: &[RunRecord], style: ReportStyle, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut out = Vec::new();
    let stem = style.name();
    let axis = match style {
        ReportStyle::AccuracyTable => {
            let t = accuracy_table(records)?;
            write(dir, &format!("{stem}.csv"), &t.to_csv()?, &mut out)?;
            write(dir, &format!("{stem}.txt"), t.to_text().as_bytes(), &mut out)?;
            return Ok(out);
        }
        ReportStyle::BlockAblation => Axis::Block,
        ReportStyle::TimestepAblation => Axis::Timestep,
    };
    let (metrics, points) = ablation(records, axis)?;
    let t = ablation_table(&metrics, &points, axis);
    write(dir, &format!("{stem}.csv"), &t.to_csv()?, &mut out)?;
    write(dir, &format!("{stem}.txt"), t.to_text().as_bytes(), &mut out)?;
    let other = match axis {
        Axis::Block => "timesteps",
        Axis::Timestep => "blocks",
    };
    let mut heads: Vec<HeadKind> = points.iter().map(|p| p.head).collect();
    heads.dedup();
    for head in heads {
        let pts: Vec<&AblationPoint> = points.iter().filter(|p| p.head == head).collect();
        let xs: Vec<usize> = pts.iter().map(|p| p.x).collect();
        let series: Vec<(String, Vec<Option<f64>>)> = metrics
            .iter()
            .enumerate()
            .map(|(m, name)| (name.clone(), pts.iter().map(|p| p.values[m]).collect()))
            .collect();
        let title = format!("{} head: accuracy vs {} (mean over {other})", head.name(), axis.name());
        let svg = line_plot_svg(&title, axis.name(), &xs, &series);
        write(dir, &format!("{stem}-{}.svg", head.name()), svg.as_bytes(), &mut out)?;
    }
    Ok(out)
}
