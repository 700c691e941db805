//! The frozen ε-prediction U-Net: architecture, pretraining, block taps and
//! pooled feature extraction.
//!
//! Blocks are numbered with a single flat index in execution order: every
//! encoder residual block output, then the middle block output, then every
//! decoder residual block output. [`list_blocks`] prints the mapping.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::checkpoint::{read_checkpoint, write_checkpoint};
use crate::data::LabeledImageSet;
use crate::error::{Error, Result};
use crate::parallel::Parallelism;
use crate::params::{uniform, Adam, ParamStore, ParamView};
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UNetConfig {
    pub resolution: usize,
    pub in_channels: usize,
    pub base_channels: usize,
    pub channel_mults: Vec<usize>,
    pub res_blocks: usize,
    /// Spatial sizes at which residual blocks are followed by self-attention.
    pub attention_resolutions: Vec<usize>,
    pub time_embed_dim: usize,
    #[serde(default = "default_norm_groups")]
    pub norm_groups: usize,
}

fn default_norm_groups() -> usize {
    32
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            resolution: 32,
            in_channels: 3,
            base_channels: 64,
            channel_mults: vec![1, 2, 2],
            res_blocks: 2,
            attention_resolutions: vec![16],
            time_embed_dim: 256,
            norm_groups: 32,
        }
    }
}

impl UNetConfig {
    /// A very small network for tests and quick desk runs.
    pub fn tiny(resolution: usize) -> Self {
        Self {
            resolution,
            in_channels: 3,
            base_channels: 8,
            channel_mults: vec![1, 2, 2],
            res_blocks: 2,
            attention_resolutions: vec![resolution / 2],
            time_embed_dim: 16,
            norm_groups: 4,
        }
    }

    pub fn levels(&self) -> usize {
        self.channel_mults.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.resolution == 0 || self.in_channels == 0 || self.base_channels == 0 {
            return bad("resolution and channel widths must be at least 1".into());
        }
        if self.channel_mults.is_empty() || self.channel_mults.contains(&0) {
            return bad(format!("invalid channel multipliers {:?}", self.channel_mults));
        }
        if self.res_blocks == 0 || self.time_embed_dim == 0 || self.norm_groups == 0 {
            return bad("res_blocks, time_embed_dim and norm_groups must be at least 1".into());
        }
        let div = 1usize << (self.levels() - 1);
        if !self.resolution.is_multiple_of(div) {
            return bad(format!(
                "resolution {} is not divisible by 2^{}",
                self.resolution,
                self.levels() - 1
            ));
        }
        Ok(())
    }

    fn width(&self, level: usize) -> usize {
        self.base_channels * self.channel_mults[level]
    }

    fn groups_for(&self, channels: usize) -> usize {
        gcd(self.norm_groups, channels)
    }

    fn embed_input_dim(&self) -> usize {
        (self.base_channels + self.base_channels % 2).max(2)
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Encoder,
    Middle,
    Decoder,
}

/// One tappable block output, `[channels, height, width]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockDescriptor {
    pub index: usize,
    pub name: String,
    pub stage: Stage,
    pub level: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub attention: bool,
}

impl BlockDescriptor {
    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Step {
    Res {
        name: String,
        c_in: usize,
        c_out: usize,
        attention: bool,
        push_skip: bool,
        pop_skip: bool,
        tap: Option<usize>,
    },
    Down {
        name: String,
        channels: usize,
    },
    Up {
        name: String,
        channels: usize,
    },
}

/// Execution plan and block table for a configuration.
fn plan(cfg: &UNetConfig) -> (Vec<Step>, Vec<BlockDescriptor>) {
    let mut steps = Vec::new();
    let mut blocks = Vec::new();
    let mut res = cfg.resolution;
    let mut ch = cfg.base_channels;
    let mut skips = Vec::new();
    let levels = cfg.levels();
    let tap = |blocks: &mut Vec<BlockDescriptor>, name: &str, stage, level, channels, res, attention| {
        let index = blocks.len();
        blocks.push(BlockDescriptor {
            index,
            name: name.to_string(),
            stage,
            level,
            channels,
            height: res,
            width: res,
            attention,
        });
        Some(index)
    };
    for level in 0..levels {
        let w = cfg.width(level);
        let attention = cfg.attention_resolutions.contains(&res);
        for r in 0..cfg.res_blocks {
            let name = format!("down{level}.res{r}");
            let t = tap(&mut blocks, &name, Stage::Encoder, level, w, res, attention);
            steps.push(Step::Res {
                name,
                c_in: ch,
                c_out: w,
                attention,
                push_skip: true,
                pop_skip: false,
                tap: t,
            });
            ch = w;
            skips.push(w);
        }
        if level + 1 < levels {
            steps.push(Step::Down {
                name: format!("down{level}.downsample"),
                channels: ch,
            });
            res /= 2;
        }
    }
    steps.push(Step::Res {
        name: "mid.res0".into(),
        c_in: ch,
        c_out: ch,
        attention: true,
        push_skip: false,
        pop_skip: false,
        tap: None,
    });
    let t = tap(&mut blocks, "mid.res1", Stage::Middle, levels - 1, ch, res, false);
    steps.push(Step::Res {
        name: "mid.res1".into(),
        c_in: ch,
        c_out: ch,
        attention: false,
        push_skip: false,
        pop_skip: false,
        tap: t,
    });
    for level in (0..levels).rev() {
        let w = cfg.width(level);
        let attention = cfg.attention_resolutions.contains(&res);
        for r in 0..cfg.res_blocks {
            let skip = skips.pop().expect("one skip per encoder block");
            let name = format!("up{level}.res{r}");
            let t = tap(&mut blocks, &name, Stage::Decoder, level, w, res, attention);
            steps.push(Step::Res {
                name,
                c_in: ch + skip,
                c_out: w,
                attention,
                push_skip: false,
                pop_skip: true,
                tap: t,
            });
            ch = w;
        }
        if level > 0 {
            steps.push(Step::Up {
                name: format!("up{level}.upsample"),
                channels: ch,
            });
            res *= 2;
        }
    }
    (steps, blocks)
}

fn init_params(cfg: &UNetConfig, steps: &[Step], seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamStore::new();
    let conv = |p: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, c_out: usize, c_in: usize, k: usize| {
        let bound = 1.0 / ((c_in * k * k) as f64).sqrt();
        p.insert(format!("{name}.weight"), uniform(rng, &[c_out, c_in, k, k], bound));
        p.insert(format!("{name}.bias"), Tensor::zeros(&[c_out]));
    };
    let norm = |p: &mut ParamStore, name: &str, c: usize| {
        p.insert(format!("{name}.gamma"), Tensor::full(&[c], 1.0));
        p.insert(format!("{name}.beta"), Tensor::zeros(&[c]));
    };
    let e_in = cfg.embed_input_dim();
    let e = cfg.time_embed_dim;
    p.insert("time.dense0.weight", uniform(&mut rng, &[e, e_in], 1.0 / (e_in as f64).sqrt()));
    p.insert("time.dense0.bias", Tensor::zeros(&[e]));
    p.insert("time.dense1.weight", uniform(&mut rng, &[e, e], 1.0 / (e as f64).sqrt()));
    p.insert("time.dense1.bias", Tensor::zeros(&[e]));
    conv(&mut p, &mut rng, "in.conv", cfg.base_channels, cfg.in_channels, 3);
    for step in steps {
        match step {
            Step::Res {
                name,
                c_in,
                c_out,
                attention,
                ..
            } => {
                norm(&mut p, &format!("{name}.norm1"), *c_in);
                conv(&mut p, &mut rng, &format!("{name}.conv1"), *c_out, *c_in, 3);
                p.insert(
                    format!("{name}.temb.weight"),
                    uniform(&mut rng, &[*c_out, e], 1.0 / (e as f64).sqrt()),
                );
                p.insert(format!("{name}.temb.bias"), Tensor::zeros(&[*c_out]));
                norm(&mut p, &format!("{name}.norm2"), *c_out);
                conv(&mut p, &mut rng, &format!("{name}.conv2"), *c_out, *c_out, 3);
                if c_in != c_out {
                    conv(&mut p, &mut rng, &format!("{name}.skip"), *c_out, *c_in, 1);
                }
                if *attention {
                    norm(&mut p, &format!("{name}.attn.norm"), *c_out);
                    for part in ["q", "k", "v", "proj"] {
                        conv(&mut p, &mut rng, &format!("{name}.attn.{part}"), *c_out, *c_out, 1);
                    }
                }
            }
            Step::Down { name, channels } | Step::Up { name, channels } => {
                conv(&mut p, &mut rng, &format!("{name}.conv"), *channels, *channels, 3);
            }
        }
    }
    norm(&mut p, "out.norm", cfg.base_channels);
    conv(&mut p, &mut rng, "out.conv", cfg.in_channels, cfg.base_channels, 3);
    p
}

/// Sinusoidal timestep embedding of even length `dim`.
fn timestep_embedding(t: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let scale = if half > 1 { (10_000f64).ln() / (half - 1) as f64 } else { 0.0 };
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let arg = t as f64 * (-(i as f64) * scale).exp();
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    Tensor::from_parts(vec![dim], out)
}

struct Net<'a, 'g, 's> {
    cfg: &'a UNetConfig,
    p: &'a ParamView<'g, 's>,
}

impl<'g> Net<'_, 'g, '_> {
    fn conv(&self, x: Var<'g>, name: &str, stride: usize, pad: usize) -> Var<'g> {
        let w = self.p.get(&format!("{name}.weight"));
        let b = self.p.get(&format!("{name}.bias"));
        x.conv2d(w, Some(b), stride, pad)
    }

    fn norm(&self, x: Var<'g>, name: &str) -> Var<'g> {
        let c = x.shape()[0];
        x.group_norm(
            self.cfg.groups_for(c),
            self.p.get(&format!("{name}.gamma")),
            self.p.get(&format!("{name}.beta")),
            NORM_EPS,
        )
    }

    fn res_block(&self, x: Var<'g>, temb: Var<'g>, name: &str, c_in: usize, c_out: usize) -> Var<'g> {
        let h = self.norm(x, &format!("{name}.norm1")).silu();
        let h = self.conv(h, &format!("{name}.conv1"), 1, 1);
        let t = temb.linear(
            self.p.get(&format!("{name}.temb.weight")),
            self.p.get(&format!("{name}.temb.bias")),
        );
        let h = h.add_channel(t);
        let h = self.norm(h, &format!("{name}.norm2")).silu();
        let h = self.conv(h, &format!("{name}.conv2"), 1, 1);
        let skip = if c_in != c_out {
            self.conv(x, &format!("{name}.skip"), 1, 0)
        } else {
            x
        };
        skip.add(h)
    }

    fn attention(&self, x: Var<'g>, name: &str) -> Var<'g> {
        let s = x.shape();
        let (c, n) = (s[0], s[1] * s[2]);
        let h = self.norm(x, &format!("{name}.norm"));
        let q = self.conv(h, &format!("{name}.q"), 1, 0).reshape(&[c, n]);
        let k = self.conv(h, &format!("{name}.k"), 1, 0).reshape(&[c, n]);
        let v = self.conv(h, &format!("{name}.v"), 1, 0).reshape(&[c, n]);
        let weights = q
            .transpose()
            .matmul(k)
            .scale(1.0 / (c as f64).sqrt())
            .softmax_rows();
        let mixed = v.matmul(weights.transpose()).reshape(&s);
        x.add(self.conv(mixed, &format!("{name}.proj"), 1, 0))
    }

    /// Runs the network. With `stop_after = Some(b)` execution ends right
    /// after block `b` and no noise prediction is returned.
    fn forward(&self, steps: &[Step], x: Var<'g>, t: usize, stop_after: Option<usize>) -> (Vec<Var<'g>>, Option<Var<'g>>) {
        let graph = self.p.graph();
        let emb = graph.constant(timestep_embedding(t, self.cfg.embed_input_dim()));
        let temb = emb
            .linear(self.p.get("time.dense0.weight"), self.p.get("time.dense0.bias"))
            .silu()
            .linear(self.p.get("time.dense1.weight"), self.p.get("time.dense1.bias"))
            .silu();
        let mut h = self.conv(x, "in.conv", 1, 1);
        let mut skips: Vec<Var<'g>> = Vec::new();
        let mut taps = Vec::new();
        for step in steps {
            match step {
                Step::Res {
                    name,
                    c_in,
                    c_out,
                    attention,
                    push_skip,
                    pop_skip,
                    tap,
                } => {
                    if *pop_skip {
                        h = h.concat0(skips.pop().expect("skip stack underflow"));
                    }
                    h = self.res_block(h, temb, name, *c_in, *c_out);
                    if *attention {
                        h = self.attention(h, &format!("{name}.attn"));
                    }
                    if *push_skip {
                        skips.push(h);
                    }
                    if let Some(b) = tap {
                        taps.push(h);
                        if stop_after == Some(*b) {
                            return (taps, None);
                        }
                    }
                }
                Step::Down { name, .. } => h = self.conv(h, &format!("{name}.conv"), 2, 1),
                Step::Up { name, .. } => h = self.conv(h.upsample2(), &format!("{name}.conv"), 1, 1),
            }
        }
        let out = self.norm(h, "out.norm").silu();
        (taps, Some(self.conv(out, "out.conv", 1, 1)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub dataset_id: String,
    pub steps: usize,
    pub seed: u64,
    pub schedule_steps: usize,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
}

/// Frozen U-Net weights with architecture and block table. There is no API
/// to mutate weights once constructed.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneCheckpoint {
    config: UNetConfig,
    params: ParamStore,
    meta: TrainingMeta,
    steps: Vec<Step>,
    blocks: Vec<BlockDescriptor>,
}

#[derive(Serialize, Deserialize)]
struct BackboneInfo {
    architecture: UNetConfig,
    training: TrainingMeta,
    blocks: Vec<BlockDescriptor>,
}

impl BackboneCheckpoint {
    /// Freshly initialized (untrained) network.
    pub fn init(cfg: &UNetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let (steps, blocks) = plan(cfg);
        let mut params = init_params(cfg, &steps, seed);
        params.round_to_f32();
        Ok(Self {
            config: cfg.clone(),
            params,
            meta: TrainingMeta {
                dataset_id: String::new(),
                steps: 0,
                seed,
                schedule_steps: 0,
                initial_loss: None,
                final_loss: None,
            },
            steps,
            blocks,
        })
    }

    fn from_parts(config: UNetConfig, params: ParamStore, meta: TrainingMeta) -> Result<Self> {
        config.validate()?;
        let (steps, blocks) = plan(&config);
        let expected = init_params(&config, &steps, 0);
        for (name, t) in expected.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => {
                    return Err(Error::Checkpoint(format!(
                        "parameter {name} has shape {:?}, architecture needs {:?}",
                        p.shape(),
                        t.shape()
                    )))
                }
                None => return Err(Error::Checkpoint(format!("missing parameter {name}"))),
            }
        }
        if expected.len() != params.len() {
            return Err(Error::Checkpoint("checkpoint holds unexpected parameters".into()));
        }
        Ok(Self {
            config,
            params,
            meta,
            steps,
            blocks,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn meta(&self) -> &TrainingMeta {
        &self.meta
    }

    pub fn blocks(&self) -> &[BlockDescriptor] {
        &self.blocks
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.config.in_channels, self.config.resolution, self.config.resolution]
    }

    /// The exact bytes of `weights.bin`.
    pub fn weights_blob(&self) -> Vec<u8> {
        self.params.to_le_bytes()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let info = BackboneInfo {
            architecture: self.config.clone(),
            training: self.meta.clone(),
            blocks: self.blocks.clone(),
        };
        write_checkpoint(dir, "backbone", serde_json::to_value(info)?, &self.params)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (manifest, params) = read_checkpoint(dir, "backbone")?;
        let info: BackboneInfo = serde_json::from_value(manifest.info)?;
        let ckpt = Self::from_parts(info.architecture, params, info.training)?;
        if ckpt.blocks != info.blocks {
            return Err(Error::Checkpoint("block table does not match the architecture".into()));
        }
        Ok(ckpt)
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape() != self.input_shape() {
            return Err(Error::Shape(format!(
                "backbone expects {:?} inputs, got {:?}",
                self.input_shape(),
                x.shape()
            )));
        }
        Ok(())
    }

    /// ε prediction for a noised image.
    pub fn predict_noise(&self, x_t: &Tensor, t: usize) -> Result<Tensor> {
        self.check_input(x_t)?;
        let g = Graph::new();
        let view = ParamView::new(&g, &self.params, false);
        let net = Net {
            cfg: &self.config,
            p: &view,
        };
        let (_, out) = net.forward(&self.steps, g.constant(x_t.clone()), t, None);
        Ok(out.expect("full forward").value())
    }

    /// Block `block` output for clean input `x0` noised with the fixed draw
    /// `eps` at timestep `t`. Differentiable with respect to `x0`.
    pub fn features_var<'g>(
        &self,
        view: &ParamView<'g, '_>,
        x0: Var<'g>,
        eps: &Tensor,
        t: usize,
        block: usize,
        schedule: &NoiseSchedule,
    ) -> Result<Var<'g>> {
        self.check_block(block)?;
        let (signal, noise) = schedule.noising_coefficients(t)?;
        if x0.shape() != eps.shape() {
            return Err(Error::Shape("noise draw does not match the input".into()));
        }
        let graph = view.graph();
        let x_t = x0.scale(signal).add(graph.constant(eps.scale(noise)));
        let net = Net {
            cfg: &self.config,
            p: view,
        };
        let (taps, _) = net.forward(&self.steps, x_t, t, Some(block));
        Ok(*taps.last().expect("block reached"))
    }

    fn check_block(&self, block: usize) -> Result<()> {
        if block >= self.blocks.len() {
            return Err(Error::ProbeSpec(format!(
                "block {block} out of range (network has {} blocks)",
                self.blocks.len()
            )));
        }
        Ok(())
    }
}

/// The ordered block descriptor table.
pub fn list_blocks(ckpt: &BackboneCheckpoint) -> Vec<BlockDescriptor> {
    ckpt.blocks.clone()
}

/// Runs one probe forward pass and checks every declared block shape against
/// the observed one.
pub fn verify_blocks(ckpt: &BackboneCheckpoint) -> Result<()> {
    let g = Graph::new();
    let view = ParamView::new(&g, &ckpt.params, false);
    let net = Net {
        cfg: &ckpt.config,
        p: &view,
    };
    let x = g.constant(Tensor::full(&ckpt.input_shape(), 0.5));
    let (taps, out) = net.forward(&ckpt.steps, x, 1, None);
    if taps.len() != ckpt.blocks.len() {
        return Err(Error::Checkpoint(format!(
            "{} taps observed, {} declared",
            taps.len(),
            ckpt.blocks.len()
        )));
    }
    for (tap, desc) in taps.iter().zip(&ckpt.blocks) {
        if tap.shape() != desc.shape() {
            return Err(Error::Checkpoint(format!(
                "block {} declared {:?}, observed {:?}",
                desc.index,
                desc.shape(),
                tap.shape()
            )));
        }
    }
    if out.map(|o| o.shape()) != Some(ckpt.input_shape().to_vec()) {
        return Err(Error::Checkpoint("noise prediction has the wrong shape".into()));
    }
    Ok(())
}

/// Where the Gaussian draw used for noising comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum NoisePolicy {
    /// One draw per sample id from a run-level seed.
    PerSample { seed: u64 },
    /// The caller's draw, used for every sample.
    Supplied(Tensor),
}

/// Identifies one feature-extraction configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSpec {
    pub block: usize,
    pub timestep: usize,
    pub pool: usize,
    pub noise: NoisePolicy,
}

impl ProbeSpec {
    pub fn new(block: usize, timestep: usize, pool: usize, noise_seed: u64) -> Self {
        Self {
            block,
            timestep,
            pool,
            noise: NoisePolicy::PerSample { seed: noise_seed },
        }
    }

    pub fn validate(&self, ckpt: &BackboneCheckpoint, schedule: &NoiseSchedule) -> Result<()> {
        ckpt.check_block(self.block)?;
        if self.timestep == 0 || self.timestep > schedule.steps() {
            return Err(Error::ProbeSpec(format!(
                "timestep {} out of range 1..={}",
                self.timestep,
                schedule.steps()
            )));
        }
        let d = &ckpt.blocks[self.block];
        if self.pool == 0 || self.pool > d.height || self.pool > d.width {
            return Err(Error::Pooling(format!(
                "pool grid {} does not fit the {}x{} map of block {}",
                self.pool, d.height, d.width, self.block
            )));
        }
        Ok(())
    }

    /// The noise draw for `sample_id`.
    pub fn noise_for(&self, sample_id: u64, shape: &[usize]) -> Result<Tensor> {
        match &self.noise {
            NoisePolicy::PerSample { seed } => Ok(sample_noise(*seed, sample_id, shape)),
            NoisePolicy::Supplied(t) if t.shape() == shape => Ok(t.clone()),
            NoisePolicy::Supplied(t) => Err(Error::Shape(format!(
                "supplied noise has shape {:?}, input is {shape:?}",
                t.shape()
            ))),
        }
    }

    pub fn noise_seed(&self) -> Option<u64> {
        match self.noise {
            NoisePolicy::PerSample { seed } => Some(seed),
            NoisePolicy::Supplied(_) => None,
        }
    }
}

/// Standard normal draw keyed by `(seed, sample_id)`.
pub fn sample_noise(seed: u64, sample_id: u64, shape: &[usize]) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(sample_id);
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| rng.sample(StandardNormal)).collect())
}

/// Feature map `[C_b, H_b, W_b]` of `x0` at the spec's block and timestep.
pub fn extract_features(
    ckpt: &BackboneCheckpoint,
    x0: &Tensor,
    sample_id: u64,
    spec: &ProbeSpec,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    spec.validate(ckpt, schedule)?;
    ckpt.check_input(x0)?;
    if let Some(p) = x0.data().iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::Data(format!("pixel value {p} outside [0, 1]")));
    }
    let eps = spec.noise_for(sample_id, x0.shape())?;
    let g = Graph::new();
    let view = ParamView::new(&g, &ckpt.params, false);
    let fm = ckpt.features_var(&view, g.constant(x0.clone()), &eps, spec.timestep, spec.block, schedule)?;
    Ok(fm.value())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureProvenance {
    pub block: usize,
    pub timestep: usize,
    pub pool: usize,
    pub sample_id: u64,
    pub noise_seed: Option<u64>,
}

/// Pooled features, flattened channel-major: index `c·k² + i·k + j`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub channels: usize,
    pub grid: usize,
    pub provenance: Option<FeatureProvenance>,
}

/// Adaptive average pooling to `k×k` followed by channel-major flattening.
pub fn pool_flatten(fm: &Tensor, k: usize) -> Result<FeatureVector> {
    let s = fm.shape();
    if s.len() != 3 || s[1] == 0 || s[2] == 0 {
        return Err(Error::Pooling(format!("expected a non-empty [C, H, W] map, got {s:?}")));
    }
    if k == 0 || k > s[1] || k > s[2] {
        return Err(Error::Pooling(format!("cannot pool a {}x{} map to {k}x{k}", s[1], s[2])));
    }
    let g = Graph::new();
    let pooled = g.constant(fm.clone()).adaptive_avg_pool(k).value();
    Ok(FeatureVector {
        values: pooled.into_vec(),
        channels: s[0],
        grid: k,
        provenance: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub grad_clip: Option<f64>,
    #[serde(default = "default_held_out")]
    pub held_out_fraction: f64,
    pub seed: u64,
}

fn default_held_out() -> f64 {
    0.1
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 32,
            learning_rate: 2e-4,
            grad_clip: Some(1.0),
            held_out_fraction: 0.1,
            seed: 0,
        }
    }
}

fn denoising_loss_grad(
    cfg: &UNetConfig,
    steps: &[Step],
    params: &ParamStore,
    x0: &Tensor,
    eps: &Tensor,
    t: usize,
    schedule: &NoiseSchedule,
    with_grad: bool,
) -> Result<(f64, Option<ParamStore>)> {
    let (signal, noise) = schedule.noising_coefficients(t)?;
    let x_t = x0.zip_map(eps, |x, e| signal * x + noise * e);
    let g = Graph::new();
    let view = ParamView::new(&g, params, with_grad);
    let net = Net { cfg, p: &view };
    let (_, out) = net.forward(steps, g.constant(x_t), t, None);
    let loss = out.expect("full forward").mse(eps);
    let value = loss.value().data()[0];
    if !with_grad {
        return Ok((value, None));
    }
    let mut grads = g.backward(loss);
    Ok((value, Some(view.collect(&mut grads))))
}

/// Trains the ε-prediction objective `E‖ε − ε_Θ(x_t, t)‖²` with `t` uniform
/// in `1..=T`, Adam, optional global-norm clipping. A held-out split (fixed
/// per-sample `t` and `ε`) is scored before and after training. Results are
/// bit-reproducible for a given seed and dataset order regardless of the
/// parallelism mode.
pub fn pretrain_backbone(
    dataset: &LabeledImageSet,
    cfg: &UNetConfig,
    schedule: &NoiseSchedule,
    opts: &PretrainConfig,
    par: Parallelism,
) -> Result<BackboneCheckpoint> {
    cfg.validate()?;
    let want = [cfg.in_channels, cfg.resolution, cfg.resolution];
    if dataset.shape() != want {
        return Err(Error::Config(format!(
            "dataset images are {:?}, network expects {want:?}",
            dataset.shape()
        )));
    }
    if dataset.is_empty() {
        return Err(Error::Data("cannot pretrain on an empty dataset".into()));
    }
    if opts.batch_size == 0 || !(opts.learning_rate > 0.0) {
        return Err(Error::Config("batch size and learning rate must be positive".into()));
    }
    let mut ckpt = BackboneCheckpoint::init(cfg, opts.seed)?;
    let (train, held_out) = dataset.split_off(opts.held_out_fraction, opts.seed, crate::data::Split::Val);
    let (train, held_out) = if held_out.is_empty() || train.is_empty() {
        (dataset.clone(), dataset.clone())
    } else {
        (train, held_out)
    };
    let t_max = schedule.steps();
    let eval_seed = opts.seed ^ 0x9e37_79b9_7f4a_7c15;
    let held_out_loss = |params: &ParamStore| -> Result<f64> {
        let losses = par.map_range(held_out.len(), |i| {
            let id = held_out.id(i);
            let mut rng = ChaCha8Rng::seed_from_u64(eval_seed);
            rng.set_stream(id);
            let t = rng.random_range(1..=t_max);
            let eps = sample_noise(eval_seed.wrapping_add(1), id, &want);
            denoising_loss_grad(cfg, &ckpt.steps, params, &held_out.tensor(i), &eps, t, schedule, false)
                .map(|(l, _)| l)
        });
        let mut sum = 0.0;
        for l in losses {
            sum += l?;
        }
        Ok(sum / held_out.len() as f64)
    };
    let initial = held_out_loss(&ckpt.params)?;
    log::info!("pretraining: initial held-out denoising loss {initial:.6}");
    let mut params = ckpt.params.clone();
    let mut opt = Adam::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    rng.set_stream(1);
    for step in 0..opts.steps {
        let draws: Vec<(usize, usize, u64)> = (0..opts.batch_size)
            .map(|_| (rng.random_range(0..train.len()), rng.random_range(1..=t_max), rng.random::<u64>()))
            .collect();
        let per_sample = par.map(&draws, |_, &(i, t, noise_seed)| {
            let eps = sample_noise(noise_seed, 0, &want);
            denoising_loss_grad(cfg, &ckpt.steps, &params, &train.tensor(i), &eps, t, schedule, true)
        });
        let mut total = params.zeros_like();
        let mut loss_sum = 0.0;
        for r in per_sample {
            let (l, g) = r?;
            loss_sum += l;
            total.accumulate(&g.expect("gradient requested"));
        }
        total.scale_all(1.0 / opts.batch_size as f64);
        if let Some(clip) = opts.grad_clip {
            let norm = total.global_norm();
            if norm > clip {
                total.scale_all(clip / norm);
            }
        }
        if !total.is_finite() {
            return Err(Error::Data(format!("non-finite gradient at pretraining step {step}")));
        }
        opt.step(&mut params, &total, opts.learning_rate);
        if step % 50 == 0 || step + 1 == opts.steps {
            log::debug!("pretraining step {step}: batch loss {:.6}", loss_sum / opts.batch_size as f64);
        }
    }
    params.round_to_f32();
    let final_loss = if opts.steps == 0 { initial } else { held_out_loss(&params)? };
    log::info!("pretraining: final held-out denoising loss {final_loss:.6}");
    ckpt.params = params;
    ckpt.meta = TrainingMeta {
        dataset_id: dataset.provenance.clone(),
        steps: opts.steps,
        seed: opts.seed,
        schedule_steps: t_max,
        initial_loss: Some(initial),
        final_loss: Some(final_loss),
    };
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::build_linear_schedule;

    #[test]
    fn block_count_and_shapes_for_default_layout() {
        let ckpt = BackboneCheckpoint::init(&UNetConfig::default(), 0).unwrap();
        let blocks = list_blocks(&ckpt);
        assert_eq!(blocks.len(), 13);
        assert_eq!(blocks.iter().filter(|b| b.stage == Stage::Encoder).count(), 6);
        assert_eq!(blocks.iter().filter(|b| b.stage == Stage::Middle).count(), 1);
        let sizes: Vec<usize> = blocks.iter().map(|b| b.height).collect();
        assert_eq!(sizes, [32, 32, 16, 16, 8, 8, 8, 8, 8, 16, 16, 32, 32]);
        assert_eq!(blocks[2].shape(), [128, 16, 16]);
        assert!(blocks.iter().enumerate().all(|(i, b)| b.index == i));
    }

    #[test]
    fn declared_shapes_match_probe_pass() {
        let ckpt = BackboneCheckpoint::init(&UNetConfig::tiny(8), 1).unwrap();
        verify_blocks(&ckpt).unwrap();
    }

    #[test]
    fn rejects_bad_configs() {
        let mut cfg = UNetConfig::tiny(8);
        cfg.resolution = 6;
        assert!(matches!(BackboneCheckpoint::init(&cfg, 0), Err(Error::Config(_))));
        let mut cfg = UNetConfig::tiny(8);
        cfg.channel_mults = vec![];
        assert!(BackboneCheckpoint::init(&cfg, 0).is_err());
    }

    #[test]
    fn pooling_edge_cases() {
        let fm = Tensor::full(&[1, 4, 4], 2.0);
        assert_eq!(pool_flatten(&fm, 1).unwrap().values, vec![2.0]);
        let ramp = Tensor::new(&[2, 3, 3], (0..18).map(f64::from).collect()).unwrap();
        assert_eq!(pool_flatten(&ramp, 3).unwrap().values, ramp.data());
        assert!(matches!(pool_flatten(&fm, 5), Err(Error::Pooling(_))));
        assert!(matches!(pool_flatten(&fm, 0), Err(Error::Pooling(_))));
        let big = Tensor::zeros(&[128, 16, 16]);
        assert_eq!(pool_flatten(&big, 4).unwrap().values.len(), 2048);
    }

    #[test]
    fn feature_extraction_is_deterministic_and_noise_dependent() {
        let ckpt = BackboneCheckpoint::init(&UNetConfig::tiny(8), 3).unwrap();
        let s = build_linear_schedule(100, 1e-4, 0.02).unwrap();
        let x = Tensor::full(&[3, 8, 8], 0.3);
        let spec = ProbeSpec::new(2, 80, 2, 7);
        let a = extract_features(&ckpt, &x, 5, &spec, &s).unwrap();
        let b = extract_features(&ckpt, &x, 5, &spec, &s).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), ckpt.blocks()[2].shape());
        let c = extract_features(&ckpt, &x, 5, &ProbeSpec::new(2, 80, 2, 8), &s).unwrap();
        assert_ne!(a, c);
        assert!(matches!(
            extract_features(&ckpt, &x, 5, &ProbeSpec::new(99, 80, 2, 7), &s),
            Err(Error::ProbeSpec(_))
        ));
        assert!(matches!(
            extract_features(&ckpt, &x, 5, &ProbeSpec::new(2, 101, 2, 7), &s),
            Err(Error::ProbeSpec(_))
        ));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = BackboneCheckpoint::init(&UNetConfig::tiny(8), 4).unwrap();
        ckpt.save(dir.path()).unwrap();
        let back = BackboneCheckpoint::load(dir.path()).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(std::fs::read(dir.path().join("weights.bin")).unwrap(), ckpt.weights_blob());
    }

    #[test]
    fn timestep_embedding_layout() {
        let e = timestep_embedding(0, 4);
        assert_eq!(e.data(), &[0.0, 0.0, 1.0, 1.0]);
    }
}
