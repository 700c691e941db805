mod common;

use std::fs;

use common::record;
use diffprobe::attacks::AttackConfig;
use diffprobe::HeadKind::{Attention, Linear};
use diffprobe_harness::compare::{comparison_table, emit_comparison, REFERENCE_ROWS};
use diffprobe_harness::report::{ablation, accuracy_table, metric_names, pct, Axis};
use diffprobe_harness::{emit_report, ReportStyle};
use tempfile::tempdir;

fn records() -> Vec<diffprobe_harness::RunRecord> {
    vec![
        record("h", Linear, 4, 10, 0.9, &[("PGD-20", 0.6)]),
        record("h", Linear, 4, 90, 0.7, &[("PGD-20", 0.8)]),
        record("h", Linear, 6, 10, 1.0, &[("PGD-20", 0.1)]),
        record("h", Attention, 4, 10, 0.95, &[("PGD-20", 0.2)]),
    ]
}

#[test]
fn block_ablation_averages_over_timesteps() {
    let (metrics, points) = ablation(&records(), Axis::Block).unwrap();
    assert_eq!(metrics, ["clean", "PGD-20"]);
    let p = points.iter().find(|p| p.head == Linear && p.x == 4).unwrap();
    assert_eq!(p.cells, 2);
    assert!((p.values[1].unwrap() - 0.7).abs() < 1e-12);
    assert!((p.values[0].unwrap() - 0.8).abs() < 1e-12);
    let p = points.iter().find(|p| p.head == Attention && p.x == 4).unwrap();
    assert_eq!(p.cells, 1);
    assert_eq!(p.values[1], Some(0.2));
}

#[test]
fn timestep_ablation_averages_over_blocks() {
    let (_, points) = ablation(&records(), Axis::Timestep).unwrap();
    let p = points.iter().find(|p| p.head == Linear && p.x == 10).unwrap();
    assert_eq!(p.cells, 2);
    assert!((p.values[1].unwrap() - 0.35).abs() < 1e-12);
}

#[test]
fn accuracy_table_lists_cells_in_order() {
    let t = accuracy_table(&records()).unwrap();
    assert_eq!(t.header, ["head", "block", "timestep", "clean", "PGD-20"]);
    assert_eq!(t.rows.len(), 4);
    assert_eq!(t.rows[0], ["linear", "4", "10", "90.00", "60.00"]);
    assert_eq!(t.rows[3][0], "attention");
    assert_eq!(pct(None), "NA");
}

#[test]
fn mixed_runs_are_rejected() {
    let mut rs = records();
    rs.push(record("other", Linear, 8, 10, 0.5, &[("PGD-20", 0.1)]));
    assert!(metric_names(&rs).is_err());
    let mut rs = records();
    rs.push(record("h", Linear, 8, 10, 0.5, &[("FGSM", 0.1)]));
    assert!(metric_names(&rs).is_err());
    assert!(metric_names(&[]).is_err());
}

#[test]
fn reports_regenerate_byte_for_byte() {
    let (a, b) = (tempdir().unwrap(), tempdir().unwrap());
    let mut shuffled = records();
    shuffled.reverse();
    for style in [ReportStyle::AccuracyTable, ReportStyle::BlockAblation, ReportStyle::TimestepAblation] {
        let pa = emit_report(&records(), style, a.path()).unwrap();
        let pb = emit_report(&shuffled, style, b.path()).unwrap();
        assert_eq!(pa.len(), pb.len());
        for (x, y) in pa.iter().zip(&pb) {
            assert_eq!(x.file_name(), y.file_name());
            assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap(), "{}", x.display());
        }
    }
    let svg = fs::read_to_string(a.path().join("block-ablation-linear.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
}

#[test]
fn literature_rows_are_flagged_and_untouched() {
    let attacks = vec![AttackConfig::pgd20(), AttackConfig::fgsm()];
    let rs = vec![record("h", Linear, 4, 10, 0.9, &[("PGD-20", 0.25), ("FGSM", 0.5)])];
    let t = comparison_table(&rs, &attacks, "synthetic");
    let col = |name: &str| t.header.iter().position(|h| h == name).unwrap();

    let measured: Vec<_> = t.rows.iter().filter(|r| r[0] == "measured").collect();
    assert_eq!(measured.len(), 1);
    assert_eq!(measured[0][col("Clean")], "90.00");
    assert_eq!(measured[0][col("PGD-20")], "25.00");
    assert_eq!(measured[0][col("FGSM")], "50.00");

    let lit: Vec<_> = t.rows.iter().filter(|r| r[0] == "literature").collect();
    assert_eq!(lit.len(), REFERENCE_ROWS.len());
    assert_eq!(t.rows.len(), 1 + REFERENCE_ROWS.len());

    let flow = lit.iter().find(|r| r[3] == "FlowGMM").unwrap();
    assert_eq!((flow[col("Clean")].as_str(), flow[col("PGD-20")].as_str()), ("68.00", "33.00"));
    let inet = lit.iter().find(|r| r[2] == "ImageNet" && r[3].starts_with("Attention")).unwrap();
    assert_eq!((inet[col("Clean")].as_str(), inet[col("PGD-10")].as_str()), ("74.30", "39.00"));

    // Changing the measurements never moves a literature row.
    let rs2 = vec![record("h", Linear, 4, 10, 0.1, &[("PGD-20", 0.0), ("FGSM", 0.0)])];
    let t2 = comparison_table(&rs2, &attacks, "synthetic");
    assert_eq!(&t.rows[1..], &t2.rows[1..]);
}

#[test]
fn comparison_files_carry_the_notice() {
    let d = tempdir().unwrap();
    let rs = vec![record("h", Linear, 4, 10, 0.9, &[("PGD-20", 0.25)])];
    emit_comparison(&rs, &[AttackConfig::pgd20()], "synthetic", d.path()).unwrap();
    let txt = fs::read_to_string(d.path().join("compare-paper.txt")).unwrap();
    assert!(txt.contains("not reproduced here"));
    let csv = fs::read_to_string(d.path().join("compare-paper.csv")).unwrap();
    assert!(csv.lines().filter(|l| l.starts_with("literature")).count() == REFERENCE_ROWS.len());
}
