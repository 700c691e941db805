use super::{
    check_input, finish, run_attack, AttackConfig, AttackKind, Classifier, ComponentRecord, Raw, SampleOutcome,
    ThreatModel,
};
use crate::error::Result;

/// APGD-CE, targeted APGD-DLR, FAB and square search in sequence. A sample
/// broken by one component is not passed to the later ones. Targeted APGD is
/// skipped for models with fewer than three classes. Component failures are
/// recorded in `components` and do not abort the ensemble.
pub fn autoattack(
    model: &dyn Classifier,
    id: u64,
    x: &[f64],
    y: usize,
    tm: &ThreatModel,
    cfg: &AttackConfig,
) -> Result<SampleOutcome> {
    check_input(model, x, y)?;
    let mut queries = 1;
    if model.predict(id, x)? != y {
        return finish(model, id, x, y, tm, Raw { queries, ..Raw::unchanged(x) });
    }
    let mut components = Vec::new();
    let mut winner: Option<SampleOutcome> = None;
    for comp in cfg.autoattack_components() {
        if comp.kind == AttackKind::ApgdT && model.num_classes() < 3 {
            continue;
        }
        let o = run_attack(model, id, x, y, tm, &comp);
        queries += o.queries;
        components.push(ComponentRecord {
            name: comp.name(),
            queries: o.queries,
            success: o.success && o.error.is_none(),
            error: o.error.clone(),
        });
        if o.success && o.error.is_none() {
            winner = Some(o);
            break;
        }
    }
    let mut out = match winner {
        Some(o) => o,
        None => finish(model, id, x, y, tm, Raw::unchanged(x))?,
    };
    out.iterations = components.len();
    out.queries = queries;
    out.components = components;
    Ok(out)
}
