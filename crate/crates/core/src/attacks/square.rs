//! Score-based random search over square patches.
//!
//! Only logits are used. The objective is the margin
//! `z_y − max_{i≠y} z_i`, and a candidate replaces the incumbent only if it
//! lowers the margin strictly.

use rand::Rng;

use super::losses::cw_margin_loss;
use super::{engine, finish, rng_for, AttackConfig, Classifier, Raw, SampleOutcome, ThreatModel};
use crate::error::Result;
use crate::heads::argmax;

/// Fraction of the image covered by the next patch. The schedule is defined
/// for 10 000 iterations and rescaled to the actual budget.
pub fn p_selection(p_init: f64, it: usize, budget: usize) -> f64 {
    let it = if budget == 0 {
        0
    } else {
        (it as f64 / budget as f64 * 10_000.0) as usize
    };
    let div = match it {
        0..=10 => 1.0,
        11..=50 => 2.0,
        51..=200 => 4.0,
        201..=500 => 8.0,
        501..=1000 => 16.0,
        1001..=2000 => 32.0,
        2001..=4000 => 64.0,
        4001..=6000 => 128.0,
        6001..=8000 => 256.0,
        _ => 512.0,
    };
    p_init / div
}

fn pm_eps(rng: &mut impl Rng, eps: f64) -> f64 {
    if rng.random::<bool>() {
        eps
    } else {
        -eps
    }
}

pub fn square_attack(
    model: &dyn Classifier,
    id: u64,
    x: &[f64],
    y: usize,
    tm: &ThreatModel,
    cfg: &AttackConfig,
) -> Result<SampleOutcome> {
    super::check_input(model, x, y)?;
    cfg.validate()?;
    let budget = cfg.queries;
    if budget == 0 {
        return finish(model, id, x, y, tm, Raw::unchanged(x));
    }
    let [c, h, w] = model.input_shape();
    let eps = tm.epsilon;
    let mut rng = rng_for(cfg.seed, id);
    let mut queries = 1;
    let z = model.logits(id, x)?;
    if argmax(&z) != y || queries >= budget {
        return finish(model, id, x, y, tm, Raw { queries, ..Raw::unchanged(x) });
    }

    // Vertical stripes of ±ε, one sign per (channel, column).
    let mut delta = vec![0.0; x.len()];
    for ch in 0..c {
        for col in 0..w {
            let v = pm_eps(&mut rng, eps);
            for row in 0..h {
                delta[(ch * h + row) * w + col] = v;
            }
        }
    }
    let mut best = engine::apply(x, &delta, tm);
    let z = model.logits(id, &best)?;
    queries += 1;
    let mut margin = cw_margin_loss(&z, y, f64::INFINITY);
    let mut adversarial = argmax(&z) != y;
    let mut trace = vec![-margin];
    let mut iterations = 0;
    while !adversarial && queries < budget {
        let p = p_selection(cfg.p_init, iterations, budget);
        let side = ((p * (h * w) as f64).sqrt().round() as usize).clamp(1, h.min(w));
        let r0 = rng.random_range(0..=h - side);
        let c0 = rng.random_range(0..=w - side);
        let mut cand_delta: Vec<f64> = best.iter().zip(x).map(|(a, b)| a - b).collect();
        // Redraw until the window actually changes (bounded).
        for _ in 0..10 {
            let mut changed = false;
            for ch in 0..c {
                let v = pm_eps(&mut rng, eps);
                for row in r0..r0 + side {
                    for col in c0..c0 + side {
                        let i = (ch * h + row) * w + col;
                        let new = (x[i] + v).clamp(0.0, 1.0) - x[i];
                        changed |= (new - (best[i] - x[i])).abs() > 1e-7;
                        cand_delta[i] = v;
                    }
                }
            }
            if changed {
                break;
            }
        }
        let cand = engine::apply(x, &cand_delta, tm);
        let z = model.logits(id, &cand)?;
        queries += 1;
        iterations += 1;
        let m = cw_margin_loss(&z, y, f64::INFINITY);
        if m < margin {
            margin = m;
            best = cand;
            adversarial = argmax(&z) != y;
            trace.push(-m);
        }
    }
    let raw = Raw {
        x: best,
        iterations,
        queries,
        trace,
    };
    finish(model, id, x, y, tm, raw)
}
