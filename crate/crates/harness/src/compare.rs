//! Desk measurements next to published reference numbers. Reference rows
//! are flagged `literature`, are never produced by this code, and never
//! enter any average.

use std::path::{Path, PathBuf};

use diffprobe::attacks::{AttackConfig, AttackKind};
use diffprobe::checkpoint::write_atomic;

use crate::error::Result;
use crate::report::{pct, Table};
use crate::store::RunRecord;

pub const COLUMNS: [&str; 9] = ["Clean", "FGSM", "BIM", "PGD-10", "PGD-20", "CW", "FAB", "APGD", "AA"];

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceRow {
    pub group: &'static str,
    pub dataset: &'static str,
    pub model: &'static str,
    /// `(column, accuracy in percent)`.
    pub values: &'static [(&'static str, f64)],
}

macro_rules! row {
    ($g:expr, $d:expr, $m:expr, [$(($c:expr, $v:expr)),* $(,)?]) => {
        ReferenceRow { group: $g, dataset: $d, model: $m, values: &[$(($c, $v)),*] }
    };
}

const BASELINES: &str = "pretraining baselines";
const SUITE: &str = "attack suite";
const IMAGENET: &str = "imagenet probes";

/// Published accuracies (percent) used for orientation only.
pub const REFERENCE_ROWS: &[ReferenceRow] = &[
    row!(BASELINES, "CIFAR-10", "Robust pretraining, Selfie", [("Clean", 79.0), ("PGD-20", 6.0)]),
    row!(BASELINES, "CIFAR-10", "Robust pretraining, Rotation", [("Clean", 87.0), ("PGD-20", 18.0)]),
    row!(BASELINES, "CIFAR-10", "Robust pretraining, Jigsaw", [("Clean", 80.0), ("PGD-20", 3.0)]),
    row!(BASELINES, "CIFAR-10", "FlowGMM", [("Clean", 68.0), ("PGD-20", 33.0)]),
    row!(BASELINES, "CIFAR-10", "Linear head b=8 t=90", [("Clean", 64.0), ("PGD-20", 35.0)]),
    row!(BASELINES, "CIFAR-10", "Linear head b=8 t=30", [("Clean", 72.0), ("PGD-20", 49.0)]),
    row!(BASELINES, "CIFAR-10", "Linear head b=7 t=10", [("Clean", 82.0), ("PGD-20", 5.0)]),
    row!(BASELINES, "CIFAR-10", "Attention head b=8 t=90", [("Clean", 73.0), ("PGD-20", 39.0)]),
    row!(BASELINES, "CIFAR-10", "Attention head b=8 t=30", [("Clean", 85.0), ("PGD-20", 25.0)]),
    row!(BASELINES, "CIFAR-10", "Attention head b=8 t=10", [("Clean", 88.0), ("PGD-20", 2.0)]),
    row!(SUITE, "CIFAR-10", "ViT-B/16 (CIFAR-10 finetuned)", [
        ("Clean", 97.88), ("FGSM", 44.01), ("BIM", 0.76), ("PGD-10", 52.04), ("PGD-20", 0.27),
        ("CW", 18.98), ("FAB", 0.01), ("APGD", 0.00), ("AA", 0.00),
    ]),
    row!(SUITE, "CIFAR-10", "Linear head b=8 t=30", [
        ("Clean", 77.00), ("FGSM", 64.94), ("BIM", 53.16), ("PGD-10", 77.35), ("PGD-20", 49.19),
        ("CW", 37.02), ("FAB", 74.08), ("APGD", 40.93), ("AA", 5.00),
    ]),
    row!(SUITE, "CIFAR-10", "Linear head b=8 t=10", [
        ("Clean", 81.00), ("FGSM", 72.38), ("BIM", 63.14), ("PGD-10", 81.27), ("PGD-20", 60.64),
        ("CW", 23.92), ("FAB", 77.03), ("APGD", 59.55), ("AA", 4.00),
    ]),
    row!(SUITE, "CIFAR-10", "Linear head b=7 t=10", [
        ("Clean", 82.00), ("FGSM", 39.10), ("BIM", 8.99), ("PGD-10", 81.59), ("PGD-20", 5.59),
        ("CW", 51.00), ("FAB", 76.81), ("APGD", 6.92), ("AA", 5.00),
    ]),
    row!(SUITE, "CIFAR-10", "Attention head b=8 t=50", [
        ("Clean", 81.00), ("FGSM", 47.52), ("BIM", 31.18), ("PGD-10", 80.96), ("PGD-20", 34.05),
        ("CW", 77.41), ("FAB", 78.75), ("APGD", 33.40), ("AA", 46.00),
    ]),
    row!(SUITE, "CIFAR-10", "Attention head b=8 t=90", [
        ("Clean", 73.00), ("FGSM", 47.98), ("BIM", 36.94), ("PGD-10", 73.79), ("PGD-20", 39.43),
        ("CW", 72.38), ("FAB", 72.77), ("APGD", 44.38), ("AA", 56.00),
    ]),
    row!(SUITE, "CIFAR-10", "Attention head b=7 t=90", [
        ("Clean", 71.00), ("FGSM", 44.13), ("BIM", 33.79), ("PGD-10", 71.06), ("PGD-20", 34.81),
        ("CW", 69.80), ("FAB", 69.84), ("APGD", 41.09), ("AA", 53.00),
    ]),
    row!(IMAGENET, "ImageNet", "Linear head b=24 t=90", [("Clean", 61.9), ("PGD-10", 46.3)]),
    row!(IMAGENET, "ImageNet", "Attention head b=24 t=150", [("Clean", 74.3), ("PGD-10", 39.0)]),
];

/// Reference column an attack's results belong under, if any.
pub fn reference_column(a: &AttackConfig) -> Option<&'static str> {
    match a.kind {
        AttackKind::Fgsm => Some("FGSM"),
        AttackKind::Bim => Some("BIM"),
        AttackKind::Pgd if a.steps == 10 => Some("PGD-10"),
        AttackKind::Pgd if a.steps == 20 => Some("PGD-20"),
        AttackKind::Pgd => None,
        AttackKind::Cw => Some("CW"),
        AttackKind::Fab => Some("FAB"),
        AttackKind::Apgd => Some("APGD"),
        AttackKind::ApgdT | AttackKind::Square => None,
        AttackKind::Autoattack => Some("AA"),
    }
}

/// Measured rows first, then every reference row. Attacks without a
/// reference column get columns of their own.
pub fn comparison_table(records: &[RunRecord], attacks: &[AttackConfig], dataset: &str) -> Table {
    let mut columns: Vec<String> = COLUMNS.iter().map(|s| s.to_string()).collect();
    let mut placement = Vec::with_capacity(attacks.len());
    let mut used = vec![false; COLUMNS.len()];
    for a in attacks {
        let col = match reference_column(a).and_then(|c| COLUMNS.iter().position(|&x| x == c)) {
            Some(i) if !used[i] => {
                used[i] = true;
                i
            }
            _ => {
                columns.push(a.name());
                columns.len() - 1
            }
        };
        placement.push(col);
    }
    let mut header = vec!["source".to_string(), "group".into(), "dataset".into(), "model".into()];
    header.extend(columns.iter().cloned());
    let mut rows = Vec::new();
    let mut sorted: Vec<&RunRecord> = records.iter().collect();
    sorted.sort_by_key(|r| r.cell);
    for r in sorted {
        let mut vals = vec!["".to_string(); columns.len()];
        vals[0] = pct(Some(r.clean_accuracy));
        for (a, &col) in attacks.iter().zip(&placement) {
            vals[col] = pct(r.robust(&a.name()));
        }
        let head = r.cell.head.name();
        let model = format!("{}{} head b={} t={}", head[..1].to_uppercase(), &head[1..], r.cell.block, r.cell.timestep);
        let mut row = vec!["measured".to_string(), "desk run".into(), dataset.to_string(), model];
        row.extend(vals);
        rows.push(row);
    }
    for lit in REFERENCE_ROWS {
        let mut vals = vec!["".to_string(); columns.len()];
        for (c, v) in lit.values {
            let i = COLUMNS.iter().position(|x| x == c).expect("reference columns are standard");
            vals[i] = format!("{v:.2}");
        }
        let mut row = vec!["literature".to_string(), lit.group.into(), lit.dataset.into(), lit.model.into()];
        row.extend(vals);
        rows.push(row);
    }
    Table { header, rows }
}

pub const NOTICE: &str = "Rows marked `literature` are published full-scale results copied for orientation. \
They were not reproduced here and are not comparable in scale to the desk measurements.";

pub fn emit_comparison(records: &[RunRecord], attacks: &[AttackConfig], dataset: &str, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let t = comparison_table(records, attacks, dataset);
    let csv_path = dir.join("compare-paper.csv");
    let txt_path = dir.join("compare-paper.txt");
    write_atomic(&csv_path, &t.to_csv()?)?;
    write_atomic(&txt_path, format!("{NOTICE}\n\n{}", t.to_text()).as_bytes())?;
    Ok(vec![csv_path, txt_path])
}
