use diffprobe::attacks::{attack_set, check_gradient, AttackConfig, Classifier, ThreatModel};
use diffprobe::backbone::{extract_features, pretrain_backbone, NoisePolicy, PretrainConfig};
use diffprobe::data::{make_synthetic_twoclass, Split};
use diffprobe::heads::{train_head, AttentionConfig, HeadTrainConfig};
use diffprobe::pipeline::{build_feature_set, feature_vector};
use diffprobe::*;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn schedule() -> NoiseSchedule {
    ScheduleParams::default().build().unwrap()
}

fn quick_pretrain(par: Parallelism) -> BackboneCheckpoint {
    let data = make_synthetic_twoclass(48, 8, 0.1, 1).unwrap();
    let opts = PretrainConfig {
        steps: 6,
        batch_size: 4,
        learning_rate: 1e-3,
        ..Default::default()
    };
    pretrain_backbone(&data, &UNetConfig::tiny(8), &schedule(), &opts, par).unwrap()
}

#[test]
fn input_gradient_matches_central_differences() {
    let sched = schedule();
    let ckpt = BackboneCheckpoint::init(&UNetConfig::tiny(8), 3).unwrap();
    let data = make_synthetic_twoclass(4, 8, 0.1, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let coords = sample(&mut rng, 192, 100).into_vec();
    for (kind, block, t) in [(HeadKind::Linear, 4, 50), (HeadKind::Attention, 9, 400), (HeadKind::Linear, 12, 1)] {
        let b = &ckpt.blocks()[block];
        let head = ProbeHead::init(kind, b.channels, 2, 2, &AttentionConfig::default(), 4).unwrap();
        let spec = ProbeSpec::new(block, t, 2, 11);
        let model = DiffusionClassifier::new(&ckpt, &head, spec, &sched).unwrap();
        let probes = check_gradient(&model, 0, data.image(0), data.label(0), &coords, 1e-4).unwrap();
        let worst = probes.iter().map(|p| p.relative_error(1e-7)).fold(0.0, f64::max);
        assert!(worst <= 1e-3, "{kind:?} block {block}: worst relative error {worst}");
    }
}

#[test]
fn jacobian_rows_match_per_class_gradients() {
    let sched = schedule();
    let ckpt = BackboneCheckpoint::init(&UNetConfig::tiny(8), 3).unwrap();
    let head = ProbeHead::init(HeadKind::Linear, 16, 1, 3, &AttentionConfig::default(), 4).unwrap();
    let model = DiffusionClassifier::new(&ckpt, &head, ProbeSpec::new(6, 20, 1, 1), &sched).unwrap();
    let x = vec![0.4; 192];
    let (z, rows) = model.jacobian(7, &x).unwrap();
    assert_eq!(z, model.logits(7, &x).unwrap());
    for (k, row) in rows.iter().enumerate() {
        let g = model
            .loss_grad(7, &x, &|z: &[f64]| {
                let mut e = vec![0.0; z.len()];
                e[k] = 1.0;
                (z[k], e)
            })
            .unwrap()
            .grad;
        assert_eq!(&g, row);
    }
}

#[test]
fn sequential_and_rayon_runs_are_bit_identical() {
    let a = quick_pretrain(Parallelism::Sequential);
    let b = quick_pretrain(Parallelism::Rayon);
    assert_eq!(a.weights_blob(), b.weights_blob());
    assert_eq!(a.meta(), b.meta());

    let sched = schedule();
    let data = make_synthetic_twoclass(40, 8, 0.1, 9).unwrap();
    let spec = ProbeSpec::new(4, 10, 2, 3);
    let fa = build_feature_set(&a, &data, &spec, &sched, Parallelism::Sequential).unwrap();
    let fb = build_feature_set(&a, &data, &spec, &sched, Parallelism::Rayon).unwrap();
    assert_eq!(fa, fb);

    let cfg = HeadTrainConfig {
        epochs: 3,
        ..Default::default()
    };
    for kind in [HeadKind::Linear, HeadKind::Attention] {
        let ha = train_head(&fa, kind, &cfg, Parallelism::Sequential).unwrap();
        let hb = train_head(&fa, kind, &cfg, Parallelism::Rayon).unwrap();
        assert_eq!(ha, hb);
    }

    let head = train_head(&fa, HeadKind::Linear, &cfg, Parallelism::Sequential).unwrap();
    let model = DiffusionClassifier::new(&a, &head, spec, &sched).unwrap();
    let few = data.select(&[0, 1, 2, 3], Split::Test);
    let tm = ThreatModel::default();
    let pa = attack_set(&model, &few, &tm, &AttackConfig::pgd(3, 2.0 / 255.0), Parallelism::Sequential).unwrap();
    let pb = attack_set(&model, &few, &tm, &AttackConfig::pgd(3, 2.0 / 255.0), Parallelism::Rayon).unwrap();
    assert_eq!(pa, pb);
    for (s, i) in pa.samples.iter().zip(0..) {
        s.verify(&model, few.image(i), &tm, 1e-12).unwrap();
    }
}

#[test]
fn pretraining_lowers_held_out_loss() {
    let data = make_synthetic_twoclass(64, 8, 0.1, 1).unwrap();
    let opts = PretrainConfig {
        steps: 40,
        batch_size: 8,
        learning_rate: 2e-3,
        ..Default::default()
    };
    let ckpt = pretrain_backbone(&data, &UNetConfig::tiny(8), &schedule(), &opts, Parallelism::Rayon).unwrap();
    let m = ckpt.meta();
    assert_eq!(m.steps, 40);
    assert!(m.final_loss.unwrap() < m.initial_loss.unwrap(), "{m:?}");
}

#[test]
fn checkpoints_round_trip_to_identical_features() {
    let sched = schedule();
    let ckpt = quick_pretrain(Parallelism::Rayon);
    let dir = tempfile::tempdir().unwrap();
    ckpt.save(&dir.path().join("bb")).unwrap();
    let back = BackboneCheckpoint::load(&dir.path().join("bb")).unwrap();
    assert_eq!(back, ckpt);

    let data = make_synthetic_twoclass(20, 8, 0.1, 4).unwrap();
    let spec = ProbeSpec::new(2, 100, 2, 8);
    let fs = build_feature_set(&ckpt, &data, &spec, &sched, Parallelism::Rayon).unwrap();
    assert_eq!(fs, build_feature_set(&back, &data, &spec, &sched, Parallelism::Rayon).unwrap());

    let head = train_head(&fs, HeadKind::Attention, &HeadTrainConfig { epochs: 2, ..Default::default() }, Parallelism::Rayon).unwrap();
    head.save(&dir.path().join("head")).unwrap();
    let head_back = ProbeHead::load(&dir.path().join("head")).unwrap();
    assert_eq!(head_back, head);
    for row in &fs.rows {
        assert_eq!(head.logits(row).unwrap(), head_back.logits(row).unwrap());
    }
}

#[test]
fn noise_policy_controls_the_draw() {
    let sched = schedule();
    let ckpt = BackboneCheckpoint::init(&UNetConfig::tiny(8), 1).unwrap();
    let x = make_synthetic_twoclass(2, 8, 0.1, 4).unwrap().tensor(0);
    let spec = ProbeSpec::new(3, 200, 2, 5);
    let a = feature_vector(&ckpt, &x, 0, &spec, &sched).unwrap();
    assert_eq!(a, feature_vector(&ckpt, &x, 0, &spec, &sched).unwrap());
    assert_eq!(a.provenance.as_ref().unwrap().noise_seed, Some(5));
    assert_eq!(a.values.len(), 16 * 4);
    assert_ne!(a.values, feature_vector(&ckpt, &x, 1, &spec, &sched).unwrap().values);
    assert_ne!(a.values, feature_vector(&ckpt, &x, 0, &ProbeSpec::new(3, 200, 2, 6), &sched).unwrap().values);

    let draw = diffprobe::backbone::sample_noise(5, 0, &[3, 8, 8]);
    let supplied = ProbeSpec {
        noise: NoisePolicy::Supplied(draw),
        ..spec.clone()
    };
    let s = extract_features(&ckpt, &x, 99, &supplied, &sched).unwrap();
    assert_eq!(s, extract_features(&ckpt, &x, 0, &spec, &sched).unwrap());
    let wrong = ProbeSpec {
        noise: NoisePolicy::Supplied(Tensor::zeros(&[3, 4, 4])),
        ..spec
    };
    assert!(matches!(extract_features(&ckpt, &x, 0, &wrong, &sched), Err(Error::Shape(_))));
}

#[test]
fn probe_specs_are_validated() {
    let sched = schedule();
    let ckpt = BackboneCheckpoint::init(&UNetConfig::tiny(8), 1).unwrap();
    let x = Tensor::zeros(&[3, 8, 8]);
    let cases = [
        (ProbeSpec::new(13, 10, 1, 0), "block"),
        (ProbeSpec::new(0, 0, 1, 0), "timestep"),
        (ProbeSpec::new(0, 1001, 1, 0), "timestep"),
        (ProbeSpec::new(4, 10, 3, 0), "pool"),
        (ProbeSpec::new(4, 10, 0, 0), "pool"),
    ];
    for (spec, what) in cases {
        let e = extract_features(&ckpt, &x, 0, &spec, &sched).unwrap_err();
        match what {
            "block" | "timestep" => assert!(matches!(e, Error::ProbeSpec(_)), "{e}"),
            _ => assert!(matches!(e, Error::Pooling(_)), "{e}"),
        }
    }
    let bad = Tensor::full(&[3, 8, 8], 1.5);
    assert!(matches!(
        extract_features(&ckpt, &bad, 0, &ProbeSpec::new(0, 1, 1, 0), &sched),
        Err(Error::Data(_))
    ));
}

#[test]
fn pooling_matches_a_hand_average() {
    let sched = schedule();
    let ckpt = BackboneCheckpoint::init(&UNetConfig::tiny(8), 2).unwrap();
    let x = make_synthetic_twoclass(2, 8, 0.1, 4).unwrap().tensor(0);
    let fm = extract_features(&ckpt, &x, 0, &ProbeSpec::new(0, 5, 1, 1), &sched).unwrap();
    assert_eq!(fm.shape(), &[8, 8, 8]);
    let fv = feature_vector(&ckpt, &x, 0, &ProbeSpec::new(0, 5, 2, 1), &sched).unwrap();
    for c in 0..8 {
        for (i, j) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            let mut sum = 0.0;
            for r in 4 * i..4 * i + 4 {
                for col in 4 * j..4 * j + 4 {
                    sum += fm.data()[(c * 8 + r) * 8 + col];
                }
            }
            let got = fv.values[c * 4 + i * 2 + j];
            assert!((got - sum / 16.0).abs() < 1e-12);
        }
    }
}

#[test]
fn model_shapes_and_heads_must_agree() {
    let sched = schedule();
    let ckpt = BackboneCheckpoint::init(&UNetConfig::tiny(8), 2).unwrap();
    let head = ProbeHead::init(HeadKind::Linear, 8, 2, 2, &AttentionConfig::default(), 0).unwrap();
    assert!(DiffusionClassifier::new(&ckpt, &head, ProbeSpec::new(4, 5, 2, 0), &sched).is_err());
    let data = make_synthetic_twoclass(2, 16, 0.1, 4).unwrap();
    assert!(build_feature_set(&ckpt, &data, &ProbeSpec::new(4, 5, 2, 0), &sched, Parallelism::Sequential).is_err());
}
