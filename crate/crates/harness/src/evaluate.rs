//! Data and backbone preparation, and evaluation of one sweep cell.

use std::path::{Path, PathBuf};
use std::time::Instant;

use diffprobe::attacks::{attack_set, clean_accuracy, AttackConfig, AttackOutcome};
use diffprobe::backbone::pretrain_backbone;
use diffprobe::data::{load_archive, load_cifar10, make_synthetic_twoclass, save_archive, LabeledImageSet, Split};
use diffprobe::heads::train_head;
use diffprobe::pipeline::build_feature_set;
use diffprobe::{BackboneCheckpoint, DiffusionClassifier, NoiseSchedule, Parallelism, ProbeHead, ProbeSpec};
use serde::Serialize;

use crate::config::{backbone_key, config_hash, nearest_blocks, sha256_hex, Cell, DataSource, RunConfig};
use crate::error::{HarnessError, Result};
use crate::store::{AttackMetric, RunRecord, RunStore, SCHEMA_VERSION};

/// Everything shared by the cells of one run.
pub struct Context {
    pub config: RunConfig,
    pub hash: String,
    pub schedule: NoiseSchedule,
    pub backbone: BackboneCheckpoint,
    pub backbone_sha256: String,
    pub train: LabeledImageSet,
    pub test: LabeledImageSet,
}

/// Train and test splits described by the data section.
pub fn load_data(cfg: &RunConfig) -> Result<(LabeledImageSet, LabeledImageSet)> {
    let d = &cfg.data;
    let seed = d.seed.unwrap_or(cfg.seed);
    match d.source {
        DataSource::Synthetic => {
            let (n_train, n_test) = (d.train.unwrap_or(300), d.test.unwrap_or(100));
            let all = make_synthetic_twoclass(n_train + n_test, d.resolution, d.margin, seed)?;
            let held = all.stratified_indices(n_test, seed)?;
            let mut is_test = vec![false; all.len()];
            held.iter().for_each(|&i| is_test[i] = true);
            let rest: Vec<usize> = (0..all.len()).filter(|&i| !is_test[i]).collect();
            Ok((all.select(&rest, Split::Train), all.select(&held, Split::Test)))
        }
        DataSource::Cifar10 => {
            let root = d.root.as_deref().expect("resolved");
            let train = load_cifar10(root, Split::Train, d.train, seed)?;
            let test = load_cifar10(root, Split::Test, d.test, seed)?;
            Ok((train, test))
        }
        DataSource::Archive => {
            let root = d.root.as_deref().expect("resolved");
            let subset = |set: LabeledImageSet, n: Option<usize>, split| -> Result<LabeledImageSet> {
                match n {
                    Some(n) if n < set.len() => {
                        let idx = set.stratified_indices(n, seed)?;
                        Ok(set.select(&idx, split))
                    }
                    _ => Ok(set),
                }
            };
            let train = subset(load_archive(&root.join("train"))?, d.train, Split::Train)?;
            let test = subset(load_archive(&root.join("test"))?, d.test, Split::Test)?;
            Ok((train, test))
        }
    }
}

/// Where the pretrained backbone for `cfg` lives inside a run directory.
pub fn backbone_dir(out: &Path, cfg: &RunConfig) -> PathBuf {
    out.join("backbones").join(&backbone_key(cfg)[..16])
}

/// Loads the configured checkpoint, or the cached one in `out`, or
/// pretrains and caches a new one.
pub fn obtain_backbone(cfg: &RunConfig, train: &LabeledImageSet, out: &Path, par: Parallelism) -> Result<BackboneCheckpoint> {
    if let Some(p) = &cfg.backbone.checkpoint {
        let ckpt = BackboneCheckpoint::load(p)?;
        if ckpt.input_shape() != train.shape() {
            return Err(HarnessError::Config(format!(
                "checkpoint expects {:?} images, data has {:?}",
                ckpt.input_shape(),
                train.shape()
            )));
        }
        return Ok(ckpt);
    }
    let dir = backbone_dir(out, cfg);
    if dir.join(diffprobe::checkpoint::MANIFEST_FILE).exists() {
        log::info!("reusing backbone {}", dir.display());
        return Ok(BackboneCheckpoint::load(&dir)?);
    }
    log::info!("pretraining backbone ({} steps)", cfg.backbone.pretrain.steps);
    let t0 = Instant::now();
    let schedule = cfg.schedule.build()?;
    let ckpt = pretrain_backbone(train, cfg.unet(), &schedule, &cfg.backbone.pretrain, par)?;
    log::info!(
        "pretraining done in {:.1}s, held-out loss {:?} -> {:?}",
        t0.elapsed().as_secs_f64(),
        ckpt.meta().initial_loss,
        ckpt.meta().final_loss
    );
    ckpt.save(&dir)?;
    Ok(ckpt)
}

impl Context {
    /// Resolves `cfg`, loads data and obtains the backbone.
    pub fn prepare(cfg: RunConfig, out: &Path, par: Parallelism) -> Result<Self> {
        let config = cfg.resolve()?;
        crate::store::check_lock(out, &config_hash(&config))?;
        let (train, test) = load_data(&config)?;
        if train.shape()[1] != config.unet().resolution || train.shape()[0] != config.unet().in_channels {
            return Err(HarnessError::Config(format!(
                "images are {:?}, architecture expects {} channels at {}px",
                train.shape(),
                config.unet().in_channels,
                config.unet().resolution
            )));
        }
        let backbone = obtain_backbone(&config, &train, out, par)?;
        let backbone_sha256 = sha256_hex(&backbone.weights_blob());
        Ok(Self {
            hash: config_hash(&config),
            schedule: config.schedule.build()?,
            config,
            backbone,
            backbone_sha256,
            train,
            test,
        })
    }

    pub fn open_store(&self, out: &Path) -> Result<RunStore> {
        RunStore::open(out, &self.config, &self.backbone_sha256)
    }

    /// Block axis of the sweep; defaults to the three taps nearest the
    /// bottleneck.
    pub fn blocks(&self) -> Vec<usize> {
        if self.config.sweep.blocks.is_empty() {
            let blocks = self.backbone.blocks();
            let mid = blocks
                .iter()
                .position(|b| b.stage == diffprobe::backbone::Stage::Middle)
                .unwrap_or(blocks.len() / 2);
            nearest_blocks(blocks.len(), mid, 3)
        } else {
            self.config.sweep.blocks.clone()
        }
    }

    /// The validated cartesian product of the sweep axes.
    pub fn grid(&self) -> Result<Vec<Cell>> {
        let blocks = self.blocks();
        let mut cells = Vec::new();
        for &head in &self.config.sweep.heads {
            for &block in &blocks {
                for &timestep in &self.config.sweep.timesteps {
                    let cell = Cell::new(head, block, timestep);
                    self.spec(&cell).validate(&self.backbone, &self.schedule)?;
                    cells.push(cell);
                }
            }
        }
        cells.sort();
        Ok(cells)
    }

    pub fn spec(&self, cell: &Cell) -> ProbeSpec {
        ProbeSpec::new(cell.block, cell.timestep, self.config.probe.pool, self.config.noise_seed())
    }

    fn head_dir(&self, cell: &Cell) -> String {
        format!("heads/{}/{}", &self.hash[..16], cell.key())
    }

    /// Trains the head for `cell`, or loads it if this config already
    /// trained one.
    pub fn head(&self, store: &RunStore, cell: &Cell, par: Parallelism) -> Result<ProbeHead> {
        let dir = store.dir().join(self.head_dir(cell));
        if dir.join(diffprobe::checkpoint::MANIFEST_FILE).exists() {
            log::info!("{cell}: cached head");
            return Ok(ProbeHead::load(&dir)?);
        }
        let spec = self.spec(cell);
        let features = build_feature_set(&self.backbone, &self.train, &spec, &self.schedule, par)?;
        let head = train_head(&features, cell.head, &self.config.head, par)?;
        head.save(&dir)?;
        Ok(head)
    }

    pub fn classifier<'a>(&'a self, head: &'a ProbeHead, cell: &Cell) -> Result<DiffusionClassifier<'a>> {
        Ok(DiffusionClassifier::new(&self.backbone, head, self.spec(cell), &self.schedule)?)
    }
}

/// Clean and per-attack robust accuracy of one cell, written to `store`.
/// A cell already in the store is returned as is.
pub fn evaluate_cell(ctx: &Context, store: &RunStore, cell: &Cell, par: Parallelism) -> Result<(RunRecord, bool)> {
    if let Some(r) = store.get(cell)? {
        log::info!("{cell}: already recorded, skipping");
        return Ok((r, true));
    }
    let t0 = Instant::now();
    let head = ctx.head(store, cell, par)?;
    let model = ctx.classifier(&head, cell)?;
    let clean = clean_accuracy(&model, &ctx.test, par)?;
    log::info!("{cell}: clean accuracy {:.4}", clean);
    let mut attacks = Vec::with_capacity(ctx.config.attacks.len());
    for a in &ctx.config.attacks {
        attacks.push(run_one(ctx, &model, a, par).0);
    }
    let partial = attacks.iter().any(|m| m.error.is_some() || m.sample_errors > 0);
    let record = RunRecord {
        schema_version: SCHEMA_VERSION,
        config_hash: ctx.hash.clone(),
        backbone_sha256: ctx.backbone_sha256.clone(),
        cell: *cell,
        test_samples: ctx.test.len(),
        clean_accuracy: clean,
        attacks,
        partial,
        wall_time_secs: t0.elapsed().as_secs_f64(),
        head_path: ctx.head_dir(cell),
    };
    store.append(&record)?;
    Ok((record, false))
}

/// Runs one attack on the test split; failures end up in the metric.
pub fn run_one(
    ctx: &Context,
    model: &DiffusionClassifier<'_>,
    attack: &AttackConfig,
    par: Parallelism,
) -> (AttackMetric, Option<AttackOutcome>) {
    let t0 = Instant::now();
    let name = attack.name();
    match attack_set(model, &ctx.test, &ctx.config.threat, attack, par).and_then(|o| Ok((o.robust_accuracy()?, o))) {
        Ok((acc, outcome)) => {
            log::info!("  {name}: robust accuracy {acc:.4} ({:.1}s)", t0.elapsed().as_secs_f64());
            let metric = AttackMetric {
                name,
                robust_accuracy: Some(acc),
                sample_errors: outcome.errors(),
                error: None,
            };
            (metric, Some(outcome))
        }
        Err(e) => {
            log::warn!("  {name} failed: {e}");
            let metric = AttackMetric {
                name,
                robust_accuracy: None,
                sample_errors: 0,
                error: Some(e.to_string()),
            };
            (metric, None)
        }
    }
}

#[derive(Serialize)]
struct DumpRow {
    id: u64,
    label: usize,
    predicted: usize,
    norm: f64,
    success: bool,
}

/// Writes adversarial images as an image archive plus `samples.csv`.
pub fn dump_adversarial(outcome: &AttackOutcome, test: &LabeledImageSet, dir: &Path) -> Result<()> {
    let pixels: Vec<f64> = outcome.samples.iter().flat_map(|s| s.adversarial.iter().copied()).collect();
    let set = LabeledImageSet::new(
        test.shape(),
        pixels,
        test.labels().to_vec(),
        test.ids().to_vec(),
        test.classes(),
        Split::Test,
        format!("adversarial:{}:{}", outcome.attack, test.provenance),
    )?;
    save_archive(&set, dir)?;
    let mut w = csv::Writer::from_path(dir.join("samples.csv"))?;
    for s in &outcome.samples {
        w.serialize(DumpRow {
            id: s.id,
            label: s.label,
            predicted: s.predicted,
            norm: s.norm,
            success: s.success,
        })?;
    }
    w.flush()?;
    Ok(())
}
