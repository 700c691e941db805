#![allow(dead_code)]

use diffprobe::attacks::AttackConfig;
use diffprobe::HeadKind;
use diffprobe_harness::config::{Cell, RunConfig};
use diffprobe_harness::store::{AttackMetric, RunRecord, SCHEMA_VERSION};

/// Small enough to pretrain and sweep in seconds.
pub fn fast_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig {
        seed,
        ..Default::default()
    };
    cfg.data.train = Some(40);
    cfg.data.test = Some(16);
    cfg.backbone.pretrain.steps = 4;
    cfg.backbone.pretrain.batch_size = 8;
    cfg.head.epochs = 3;
    cfg.head.batch_size = 16;
    cfg.attacks = vec![
        AttackConfig::fgsm(),
        AttackConfig::pgd(3, 2.0 / 255.0).with_label("PGD-3"),
    ];
    cfg.sweep.blocks = vec![4, 6];
    cfg.sweep.timesteps = vec![10, 90];
    cfg.sweep.heads = vec![HeadKind::Linear];
    cfg
}

pub fn record(hash: &str, head: HeadKind, block: usize, timestep: usize, clean: f64, robust: &[(&str, f64)]) -> RunRecord {
    RunRecord {
        schema_version: SCHEMA_VERSION,
        config_hash: hash.into(),
        backbone_sha256: "00".repeat(32),
        cell: Cell::new(head, block, timestep),
        test_samples: 100,
        clean_accuracy: clean,
        attacks: robust
            .iter()
            .map(|&(name, v)| AttackMetric {
                name: name.into(),
                robust_accuracy: Some(v),
                sample_errors: 0,
                error: None,
            })
            .collect(),
        partial: false,
        wall_time_secs: 1.0,
        head_path: String::new(),
    }
}
