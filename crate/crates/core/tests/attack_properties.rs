use diffprobe::attacks::models::{LinearModel, TwoLayerModel};
use diffprobe::attacks::{fgsm, pgd, run_attack, AttackConfig, AttackKind, Classifier, LossKind, Norm, ThreatModel};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn model(seed: u64, classes: usize, shape: [usize; 3], two_layer: bool) -> Box<dyn Classifier> {
    if two_layer {
        Box::new(TwoLayerModel::random(classes, 6, shape, 2.0, seed))
    } else {
        Box::new(LinearModel::random(classes, shape, seed))
    }
}

fn image(seed: u64, len: usize, saturate: bool) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    (0..len)
        .map(|_| {
            if saturate && rng.random::<f64>() < 0.3 {
                f64::from(u8::from(rng.random::<bool>()))
            } else {
                rng.random_range(0.0..=1.0)
            }
        })
        .collect()
}

fn config(kind: AttackKind, eps: f64) -> AttackConfig {
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

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn every_attack_stays_in_the_ball_and_box(
        seed in any::<u64>(),
        classes in 2usize..5,
        two_layer in any::<bool>(),
        l2 in any::<bool>(),
        eps_scale in 0.0f64..1.0,
        saturate in any::<bool>(),
    ) {
        let shape = [2, 3, 3];
        let m = model(seed, classes, shape, two_layer);
        let x = image(seed, 18, saturate);
        let y = m.predict(0, &x).unwrap();
        let tm = if l2 { ThreatModel::l2(eps_scale) } else { ThreatModel::linf(eps_scale * 0.1) };
        for kind in KINDS {
            let cfg = config(kind, tm.epsilon.max(1e-3));
            let o = run_attack(m.as_ref(), seed, &x, y, &tm, &cfg);
            prop_assert!(tm.admits(&x, &o.adversarial, 1e-9), "{:?}", kind);
            if o.error.is_none() {
                prop_assert!(o.verify(m.as_ref(), &x, &tm, 1e-9).is_ok(), "{:?}", kind);
            } else {
                // Only the L∞-only or three-class-only attacks may refuse.
                let refusable = (kind == AttackKind::Fgsm && tm.norm == Norm::L2)
                    || (kind == AttackKind::ApgdT && classes < 3);
                prop_assert!(refusable, "{:?}: {:?}", kind, o.error);
                prop_assert_eq!(&o.adversarial, &x);
            }
        }
    }

    #[test]
    fn fgsm_is_one_unrandomized_pgd_step(
        seed in any::<u64>(),
        classes in 2usize..5,
        two_layer in any::<bool>(),
        eps in 0.0f64..0.1,
    ) {
        let m = model(seed, classes, [1, 4, 4], two_layer);
        let x = image(seed, 16, true);
        let y = (seed % classes as u64) as usize;
        let tm = ThreatModel::linf(eps);
        let f = fgsm(m.as_ref(), 0, &x, y, &tm).unwrap();
        let cfg = AttackConfig { random_start: Some(false), ..AttackConfig::pgd(1, eps) };
        let p = pgd(m.as_ref(), 0, &x, y, &tm, &cfg).unwrap();
        prop_assert_eq!(f.adversarial, p.adversarial);
    }

    #[test]
    fn zero_budget_leaves_inputs_unchanged(
        seed in any::<u64>(),
        two_layer in any::<bool>(),
        k in 0usize..9,
    ) {
        let m = model(seed, 3, [1, 3, 3], two_layer);
        let x = image(seed, 9, false);
        let y = m.predict(0, &x).unwrap();
        let tm = ThreatModel::linf(0.0);
        let o = run_attack(m.as_ref(), 0, &x, y, &tm, &config(KINDS[k], 0.01));
        prop_assert_eq!(o.adversarial, x);
        prop_assert!(!o.success);
    }
}
