//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits
//! non-zero when a gating criterion fails.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use diffprobe::attacks::models::{LinearModel, TwoLayerModel};
use diffprobe::attacks::{
    attack_set, bim, check_gradient, fgsm, pgd, run_attack, AttackConfig, AttackKind, Classifier, LossKind, Norm,
    ThreatModel,
};
use diffprobe::backbone::sample_noise;
use diffprobe::data::{LabeledImageSet, Split};
use diffprobe::heads::AttentionConfig;
use diffprobe::schedule::{build_linear_schedule, q_sample};
use diffprobe::{BackboneCheckpoint, DiffusionClassifier, HeadKind, Parallelism, ProbeHead, ProbeSpec, Tensor, UNetConfig};
use diffprobe_harness::config::DataSource;
use diffprobe_harness::{evaluate_cell, run_sweep, Cell, Context, RunConfig, RunRecord, RunStore};
use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, RngAlgorithm, TestRng, TestRunner};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Verdict = Result<String, String>;

fn check(cond: bool, detail: String) -> Verdict {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// 1 --------------------------------------------------------------------

fn schedule_oracle() -> Verdict {
    let t0 = Instant::now();
    let (steps, b0, b1) = (1000usize, 1e-4, 0.02);
    let s = build_linear_schedule(steps, b0, b1).map_err(|e| e.to_string())?;
    let mut prod = 1.0f64;
    let mut worst = 0.0f64;
    for t in 1..=steps {
        let beta = b0 + (b1 - b0) * (t - 1) as f64 / (steps - 1) as f64;
        prod *= 1.0 - beta;
        let got = s.alpha_bar(t).map_err(|e| e.to_string())?;
        worst = worst.max((got - prod).abs() / prod);
    }
    let secs = t0.elapsed().as_secs_f64();
    check(
        worst <= 1e-12 && secs < 1.0,
        format!("max relative error {worst:.2e} over t = 1..=1000 in {secs:.3}s"),
    )
}

// 2 --------------------------------------------------------------------

fn noising_statistics() -> Verdict {
    let t0 = Instant::now();
    let s = build_linear_schedule(1000, 1e-4, 0.02).map_err(|e| e.to_string())?;
    let t = (1..=1000)
        .min_by(|&a, &b| {
            let da = (s.alpha_bar(a).unwrap() - 0.7).abs();
            let db = (s.alpha_bar(b).unwrap() - 0.7).abs();
            da.total_cmp(&db)
        })
        .unwrap();
    let ab = s.alpha_bar(t).unwrap();
    let shape = [3, 8, 8];
    let d: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let x0 = Tensor::new(&shape, (0..d).map(|_| rng.random_range(0.0..=1.0)).collect()).map_err(|e| e.to_string())?;
    let draws = 10_000;
    let mut sum = vec![0.0; d];
    let mut sq = vec![0.0; d];
    for k in 0..draws {
        let eps = sample_noise(99, k, &shape);
        let xt = q_sample(&x0, t, &eps, &s).map_err(|e| e.to_string())?.x_t;
        for (i, v) in xt.data().iter().enumerate() {
            sum[i] += v;
            sq[i] += v * v;
        }
    }
    let n = draws as f64;
    let target_sd = (1.0 - ab).sqrt();
    let mut worst_mean = 0.0f64;
    let mut worst_sd = 0.0f64;
    let mut pooled_var = 0.0;
    for i in 0..d {
        let mean = sum[i] / n;
        let var = (sq[i] - n * mean * mean) / (n - 1.0);
        pooled_var += var / d as f64;
        worst_mean = worst_mean.max((mean - ab.sqrt() * x0.data()[i]).abs());
        worst_sd = worst_sd.max((var.sqrt() / target_sd - 1.0).abs());
    }
    let pooled_sd = (pooled_var.sqrt() / target_sd - 1.0).abs();
    let secs = t0.elapsed().as_secs_f64();
    check(
        worst_mean <= 0.04 && pooled_sd <= 0.02 && secs < 10.0,
        format!(
            "t = {t} (alpha_bar {ab:.4}), {draws} draws x {d} pixels: worst mean error {worst_mean:.4}, \
             pooled std error {:.2}% (worst single pixel {:.2}%), {secs:.1}s",
            100.0 * pooled_sd,
            100.0 * worst_sd
        ),
    )
}

// 3 --------------------------------------------------------------------

fn gradient_fidelity() -> Verdict {
    let t0 = Instant::now();
    let sched = build_linear_schedule(1000, 1e-4, 0.02).map_err(|e| e.to_string())?;
    let cfg = UNetConfig::tiny(16);
    let ckpt = BackboneCheckpoint::init(&cfg, 31).map_err(|e| e.to_string())?;
    let d = 3 * 16 * 16;
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let x: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..=1.0)).collect();
    let coords = sample(&mut rng, d, 100).into_vec();
    let mut worst = 0.0f64;
    let mut report = Vec::new();
    for block in [4, 6, 12] {
        let channels = ckpt.blocks()[block].channels;
        let head = ProbeHead::init(HeadKind::Linear, channels, 2, 2, &AttentionConfig::default(), 33)
            .map_err(|e| e.to_string())?;
        let model = DiffusionClassifier::new(&ckpt, &head, ProbeSpec::new(block, 10, 2, 34), &sched)
            .map_err(|e| e.to_string())?;
        let probes = check_gradient(&model, 0, &x, 1, &coords, 1e-4).map_err(|e| e.to_string())?;
        let w = probes.iter().map(|p| p.relative_error(1e-7)).fold(0.0, f64::max);
        report.push(format!("block {block}: {w:.1e}"));
        worst = worst.max(w);
    }
    let secs = t0.elapsed().as_secs_f64();
    check(
        worst <= 1e-3 && secs < 120.0,
        format!("worst relative error on 100 coordinates ({}) in {secs:.1}s", report.join(", ")),
    )
}

// 4 --------------------------------------------------------------------

fn small_config(kind: AttackKind, eps: f64) -> AttackConfig {
    let mut cfg = match kind {
        AttackKind::Fgsm => AttackConfig::fgsm(),
        AttackKind::Bim => AttackConfig::bim(4, eps / 2.0),
        AttackKind::Pgd => AttackConfig::pgd(4, eps / 2.0),
        AttackKind::Cw => AttackConfig::cw(4, eps / 2.0, 0.0),
        AttackKind::Apgd => AttackConfig::apgd(6, LossKind::Ce),
        AttackKind::ApgdT => AttackConfig::apgd_targeted(4, 2),
        AttackKind::Fab => AttackConfig::fab(4),
        AttackKind::Square => AttackConfig::square(30),
        AttackKind::Autoattack => AttackConfig {
            steps: 4,
            queries: 30,
            targets: 2,
            ..AttackConfig::autoattack()
        },
    };
    cfg.seed = 7;
    cfg
}

const KINDS: [AttackKind; 9] = [
    AttackKind::Fgsm,
    AttackKind::Bim,
    AttackKind::Pgd,
    AttackKind::Cw,
    AttackKind::Apgd,
    AttackKind::ApgdT,
    AttackKind::Fab,
    AttackKind::Square,
    AttackKind::Autoattack,
];

fn toy_model(seed: u64, classes: usize, two_layer: bool) -> Box<dyn Classifier> {
    if two_layer {
        Box::new(TwoLayerModel::random(classes, 6, [2, 3, 3], 2.0, seed))
    } else {
        Box::new(LinearModel::random(classes, [2, 3, 3], seed))
    }
}

fn attack_contracts() -> Verdict {
    let mut runner = TestRunner::new_with_rng(
        PropConfig {
            cases: 200,
            failure_persistence: None,
            ..PropConfig::default()
        },
        TestRng::deterministic_rng(RngAlgorithm::ChaCha),
    );
    let strategy = (any::<u64>(), 2usize..5, any::<bool>(), any::<bool>(), 0.0f64..1.0);
    runner
        .run(&strategy, |(seed, classes, two_layer, l2, scale)| {
            let m = toy_model(seed, classes, two_layer);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x: Vec<f64> = (0..18).map(|_| rng.random_range(0.0..=1.0)).collect();
            let y = m.predict(0, &x).unwrap();
            let tm = if l2 { ThreatModel::l2(scale) } else { ThreatModel::linf(scale * 0.1) };
            for kind in KINDS {
                let o = run_attack(m.as_ref(), seed, &x, y, &tm, &small_config(kind, tm.epsilon.max(1e-3)));
                prop_assert!(tm.admits(&x, &o.adversarial, 1e-6), "{:?} left the ball or box", kind);
                if o.error.is_some() {
                    let refusable =
                        (kind == AttackKind::Fgsm && tm.norm == Norm::L2) || (kind == AttackKind::ApgdT && classes < 3);
                    prop_assert!(refusable, "{:?}: {:?}", kind, o.error);
                }
            }
            let eps = scale * 0.1;
            let linf = ThreatModel::linf(eps);
            let f = fgsm(m.as_ref(), 0, &x, y, &linf).unwrap();
            let one = AttackConfig {
                random_start: Some(false),
                ..AttackConfig::pgd(1, eps)
            };
            prop_assert_eq!(&f.adversarial, &pgd(m.as_ref(), 0, &x, y, &linf, &one).unwrap().adversarial);
            let it = AttackConfig::bim(5, eps / 3.0);
            let plain = AttackConfig {
                random_start: Some(false),
                ..AttackConfig::pgd(5, eps / 3.0)
            };
            prop_assert_eq!(
                &bim(m.as_ref(), 0, &x, y, &linf, &it).unwrap().adversarial,
                &pgd(m.as_ref(), 0, &x, y, &linf, &plain).unwrap().adversarial
            );
            Ok(())
        })
        .map_err(|e| format!("property suite: {e}"))?;

    let model = TwoLayerModel::random(4, 10, [1, 4, 4], 3.0, 41);
    let n = 200;
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let pixels: Vec<f64> = (0..n * 16).map(|_| rng.random_range(0.0..=1.0)).collect();
    let labels: Vec<usize> = (0..n).map(|i| model.predict(i as u64, &pixels[i * 16..(i + 1) * 16]).unwrap()).collect();
    let set = LabeledImageSet::new([1, 4, 4], pixels, labels, (0..n as u64).collect(), 4, Split::Test, "acceptance")
        .map_err(|e| e.to_string())?;
    let tm = ThreatModel::linf(0.03);
    let aa = AttackConfig {
        steps: 20,
        queries: 300,
        ..AttackConfig::autoattack()
    };
    let par = Parallelism::default();
    let ens = attack_set(&model, &set, &tm, &aa, par).and_then(|o| o.robust_accuracy()).map_err(|e| e.to_string())?;
    let mut parts = Vec::new();
    let mut min = f64::INFINITY;
    for c in aa.autoattack_components() {
        let acc = attack_set(&model, &set, &tm, &c, par).and_then(|o| o.robust_accuracy()).map_err(|e| e.to_string())?;
        parts.push(format!("{} {acc:.3}", c.name()));
        min = min.min(acc);
    }
    check(
        ens <= min,
        format!("200 cases x 9 attacks in ball and box, FGSM/BIM identities hold; AA {ens:.3} vs {}", parts.join(", ")),
    )
}

// 5 --------------------------------------------------------------------

fn linear_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let tm = ThreatModel::linf(0.05);
    let mut agree = 0;
    let mut predicted_success = 0;
    for case in 0..50u64 {
        // Redraw knife-edge cases where rounding would decide.
        let (model, x, y, margin, l1) = loop {
            let d = 8;
            let w: Vec<f64> = (0..d)
                .map(|_| rng.random_range(0.2..1.0) * if rng.random::<bool>() { 1.0 } else { -1.0 })
                .collect();
            let x: Vec<f64> = (0..d).map(|_| rng.random_range(0.1..0.9)).collect();
            let target: f64 = rng.random_range(0.02..0.6);
            let wx: f64 = w.iter().zip(&x).map(|(a, b)| a * b).sum();
            let y = usize::from(case % 3 != 0);
            let b = if y == 1 { target - wx } else { -target - wx };
            let model = LinearModel::binary(w.clone(), b);
            let z = model.logits(0, &x).map_err(|e| e.to_string())?;
            let margin = z[y] - z[1 - y];
            let l1: f64 = w.iter().map(|v| v.abs()).sum();
            if ((tm.epsilon - margin / l1) / tm.epsilon).abs() >= 0.05 {
                break (model, x, y, margin, l1);
            }
        };
        let expected = tm.epsilon >= margin / l1;
        predicted_success += usize::from(expected);
        let o = pgd(&model, case, &x, y, &tm, &AttackConfig::pgd(20, tm.epsilon / 4.0)).map_err(|e| e.to_string())?;
        agree += usize::from(o.success == expected);
    }
    check(
        agree == 50,
        format!("{agree}/50 agree with eps >= margin / |w|_1 ({predicted_success} predicted successes)"),
    )
}

// 6 --------------------------------------------------------------------

fn desk_config_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml")
}

fn desk_run() -> Verdict {
    let cfg = RunConfig::load(&desk_config_path()).map_err(|e| e.to_string())?;
    if cfg.data.source != DataSource::Synthetic {
        return Err("desk config must use synthetic data".into());
    }
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let par = Parallelism::default();
    let t0 = Instant::now();
    let ctx = Context::prepare(cfg, dir.path(), par).map_err(|e| e.to_string())?;
    let pretrain = t0.elapsed().as_secs_f64();
    let store = ctx.open_store(dir.path()).map_err(|e| e.to_string())?;
    let cell = Cell::new(HeadKind::Linear, 6, 10);
    let (rec, _) = evaluate_cell(&ctx, &store, &cell, par).map_err(|e| e.to_string())?;
    let pgd20 = rec.robust("PGD-20").ok_or("no PGD-20 result")?;
    let drop = rec.clean_accuracy - pgd20;
    check(
        rec.clean_accuracy >= 0.95 && drop >= 0.10 && pretrain <= 1800.0,
        format!(
            "{cell}: clean {:.1}%, PGD-20 {:.1}% (drop {:.1} pp); pretraining {pretrain:.0}s",
            100.0 * rec.clean_accuracy,
            100.0 * pgd20,
            100.0 * drop
        ),
    )
}

// 7 --------------------------------------------------------------------

/// Runs only when `DIFFPROBE_CIFAR10` points at the binary batches and
/// `DIFFPROBE_BACKBONE` at a long-trained checkpoint.
fn qualitative_trend() -> Option<Verdict> {
    let root = std::env::var_os("DIFFPROBE_CIFAR10")?;
    let ckpt = std::env::var_os("DIFFPROBE_BACKBONE")?;
    let run = || -> Result<(f64, f64), String> {
        let mut cfg = RunConfig::default();
        cfg.data.source = DataSource::Cifar10;
        cfg.data.root = Some(root.into());
        cfg.backbone.checkpoint = Some(ckpt.into());
        cfg.attacks.clear();
        cfg.sweep.timesteps = vec![10, 150];
        cfg.sweep.heads = vec![HeadKind::Linear];
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let par = Parallelism::default();
        let ctx = Context::prepare(cfg, dir.path(), par).map_err(|e| e.to_string())?;
        let store = ctx.open_store(dir.path()).map_err(|e| e.to_string())?;
        run_sweep(&ctx, &store, None, par).map_err(|e| e.to_string())?;
        let recs = store.records().map_err(|e| e.to_string())?;
        let mean = |t: usize| {
            let v: Vec<f64> = recs.iter().filter(|r| r.cell.timestep == t).map(|r| r.clean_accuracy).collect();
            v.iter().sum::<f64>() / v.len().max(1) as f64
        };
        Ok((mean(10), mean(150)))
    };
    Some(run().and_then(|(a, b)| {
        check(
            a > b,
            format!("mean clean accuracy t=10 {:.1}% vs t=150 {:.1}%", 100.0 * a, 100.0 * b),
        )
    }))
}

// 8 --------------------------------------------------------------------

fn crash_config() -> RunConfig {
    let mut cfg = RunConfig {
        seed: 81,
        ..Default::default()
    };
    cfg.data.train = Some(40);
    cfg.data.test = Some(32);
    cfg.backbone.pretrain.steps = 4;
    cfg.backbone.pretrain.batch_size = 8;
    cfg.head.epochs = 3;
    cfg.head.batch_size = 16;
    cfg.attacks = vec![AttackConfig::fgsm(), AttackConfig::pgd20()];
    cfg.sweep.blocks = vec![4, 6];
    cfg.sweep.timesteps = vec![10, 30, 90, 150];
    cfg.sweep.heads = vec![HeadKind::Linear];
    cfg
}

type Metrics = Vec<(Cell, u64, Vec<(String, Option<u64>)>)>;

fn metrics(recs: &[RunRecord]) -> Metrics {
    recs.iter()
        .map(|r| {
            let a = r.attacks.iter().map(|m| (m.name.clone(), m.robust_accuracy.map(f64::to_bits))).collect();
            (r.cell, r.clean_accuracy.to_bits(), a)
        })
        .collect()
}

fn record_files(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = std::fs::read_dir(dir.join("records"))
        .map(|rd| rd.filter_map(|e| e.ok()).map(|e| e.file_name().to_string_lossy().into_owned()).collect())
        .unwrap_or_default();
    v.sort();
    v
}

fn determinism_and_resume() -> Verdict {
    let cfg = crash_config();
    let expected: BTreeSet<Cell> = cfg
        .sweep
        .blocks
        .iter()
        .flat_map(|&b| cfg.sweep.timesteps.iter().map(move |&t| Cell::new(HeadKind::Linear, b, t)))
        .collect();

    // Two uninterrupted in-process sweeps, sequential and data-parallel.
    let mut reference = Vec::new();
    for par in [Parallelism::Sequential, Parallelism::default()] {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let ctx = Context::prepare(cfg.clone(), dir.path(), par).map_err(|e| e.to_string())?;
        let store = ctx.open_store(dir.path()).map_err(|e| e.to_string())?;
        run_sweep(&ctx, &store, None, par).map_err(|e| e.to_string())?;
        reference.push(metrics(&store.records().map_err(|e| e.to_string())?));
    }
    if reference[0] != reference[1] {
        return Err("sequential and parallel sweeps disagree".into());
    }

    // The CLI, killed once some records exist, then resumed.
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg_path = dir.path().join("run.toml");
    std::fs::write(&cfg_path, cfg.to_toml()).map_err(|e| e.to_string())?;
    let out = dir.path().join("run");
    let sweep = |workers: &str| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_diffprobe"));
        c.arg("--config")
            .arg(&cfg_path)
            .arg("--out")
            .arg(&out)
            .args(["--workers", workers, "sweep"])
            .env("RUST_LOG", "warn")
            .stdout(Stdio::null())
            .stderr(Stdio::null());
        c
    };
    let mut child = sweep("1").spawn().map_err(|e| e.to_string())?;
    let deadline = Instant::now() + Duration::from_secs(600);
    let mut killed_at = None;
    while Instant::now() < deadline {
        if child.try_wait().map_err(|e| e.to_string())?.is_some() {
            break;
        }
        let n = record_files(&out.clone()).iter().filter(|f| f.ends_with(".json")).count();
        if n >= 2 {
            child.kill().map_err(|e| e.to_string())?;
            killed_at = Some(n);
            break;
        }
        std::thread::sleep(Duration::from_millis(5));
    }
    let _ = child.wait();
    let killed_at = killed_at.ok_or("sweep finished or stalled before it could be killed")?;
    let before = record_files(&out);
    if before.len() >= expected.len() {
        return Err("kill came too late to interrupt the sweep".into());
    }
    let status = sweep("2").status().map_err(|e| e.to_string())?;
    if !status.success() {
        return Err(format!("resumed sweep exited with {status}"));
    }
    let after = record_files(&out);
    let store = RunStore::open_existing(&out).map_err(|e| e.to_string())?;
    let recs = store.records().map_err(|e| e.to_string())?;
    let cells: Vec<Cell> = recs.iter().map(|r| r.cell).collect();
    let unique: BTreeSet<Cell> = cells.iter().copied().collect();
    let leftovers = after.iter().filter(|f| !f.ends_with(".json")).count();
    let resumed = metrics(&recs);

    check(
        unique == expected && cells.len() == expected.len() && after.len() == expected.len() && leftovers == 0
            && resumed == reference[0],
        format!(
            "killed with {killed_at} of {} cells recorded, resumed to {} records ({} distinct); \
             metrics bit-identical across sequential, parallel and resumed runs: {}",
            expected.len(),
            cells.len(),
            unique.len(),
            resumed == reference[0]
        ),
    )
}

fn run(id: usize, name: &str, gating: bool, f: impl FnOnce() -> Verdict) -> bool {
    let t0 = Instant::now();
    let verdict = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    });
    let secs = t0.elapsed().as_secs_f64();
    let tag = if gating { "" } else { " (diagnostic)" };
    match &verdict {
        Ok(d) => println!("criterion {id} PASS{tag}  {name}: {d} [{secs:.1}s]"),
        Err(d) => println!("criterion {id} FAIL{tag}  {name}: {d} [{secs:.1}s]"),
    }
    verdict.is_ok() || !gating
}

fn main() {
    // `cargo test -- --list` and filters expect a libtest-like interface;
    // the gate has a single entry point.
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let mut ok = true;
    ok &= run(1, "schedule oracle", true, schedule_oracle);
    ok &= run(2, "noising statistics", true, noising_statistics);
    ok &= run(3, "gradient fidelity", true, gradient_fidelity);
    ok &= run(4, "attack contracts", true, attack_contracts);
    ok &= run(5, "linear analytic oracle", true, linear_oracle);
    ok &= run(6, "end-to-end desk run", true, desk_run);
    match qualitative_trend() {
        Some(v) => {
            run(7, "qualitative trend", false, || v);
        }
        None => println!(
            "criterion 7 SKIP (diagnostic)  qualitative trend: set DIFFPROBE_CIFAR10 and DIFFPROBE_BACKBONE to run"
        ),
    }
    ok &= run(8, "determinism and crash safety", true, determinism_and_resume);
    if !ok {
        std::process::exit(1);
    }
}
