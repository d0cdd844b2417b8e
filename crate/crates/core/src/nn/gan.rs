//! Progressive-growing adversarial generator and discriminator.
//!
//! Training starts at 4x4 and doubles the resolution stage by stage. When a stage
//! begins, its new generator block (and the mirrored discriminator block) is
//! blended in with a fade coefficient `alpha` that ramps from 0 to 1 over
//! `fade_fraction` of the stage's step budget:
//!
//! ```text
//! out = (1 - alpha) * upsample(to_out[s-1](h[s-1])) + alpha * to_out[s](block[s](h[s-1]))
//! ```
//!
//! Layers use equalized learning rate, the generator normalizes features per pixel, and
//! the discriminator appends a minibatch standard-deviation channel before its last block.
//! The loss is the non-saturating logistic loss with a small drift penalty on the real logits.

use std::io::Write;
use std::path::PathBuf;

use candle_core::{DType, Device, Tensor, D};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{
    adam, downsample2x, finite_scalar, grids_to_tensor, leaky_relu, pixel_norm, softplus, step, tensor_to_grids,
    upsample2x, upsample_by, Conv2d, ConvOpts, Linear, NetworkCheckpoint, ParamStore,
};
use crate::error::{Error, Result};
use crate::label::{self, LabelMap};
use crate::raster::Grid;
use crate::seed;

pub const KIND: &str = "progressive_gan";
const SLOPE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GrowthSchedule {
    pub start_res: usize,
    pub target_res: usize,
    /// Step budget per stage; a single value applies to every stage.
    pub stage_steps: Vec<usize>,
    /// Part of each stage (after the first) spent fading the new block in.
    pub fade_fraction: f64,
}

impl Default for GrowthSchedule {
    fn default() -> Self {
        Self::uniform(64, 200, 0.5)
    }
}

impl GrowthSchedule {
    pub fn uniform(target_res: usize, steps: usize, fade_fraction: f64) -> Self {
        Self { start_res: 4, target_res, stage_steps: vec![steps], fade_fraction }
    }

    pub fn validate(&self) -> Result<()> {
        if self.start_res != 4 {
            return Err(Error::Config(format!("growth must start at 4x4, got {}", self.start_res)));
        }
        if !self.target_res.is_power_of_two() || self.target_res < self.start_res {
            return Err(Error::Config(format!(
                "target resolution must be a power of two >= {}, got {}",
                self.start_res, self.target_res
            )));
        }
        if !(self.fade_fraction > 0.0 && self.fade_fraction < 1.0) {
            return Err(Error::Config(format!("fade_fraction must lie in (0, 1), got {}", self.fade_fraction)));
        }
        let n = self.stage_count();
        if self.stage_steps.is_empty() || !(self.stage_steps.len() == 1 || self.stage_steps.len() == n) {
            return Err(Error::Config(format!("stage_steps needs 1 or {n} entries, got {}", self.stage_steps.len())));
        }
        Ok(())
    }

    pub fn stage_count(&self) -> usize {
        (self.target_res / self.start_res).trailing_zeros() as usize + 1
    }

    /// `[4, 8, ..., target]`.
    pub fn resolutions(&self) -> Vec<usize> {
        (0..self.stage_count()).map(|s| self.start_res << s).collect()
    }

    pub fn steps(&self, stage: usize) -> usize {
        if self.stage_steps.len() == 1 {
            self.stage_steps[0]
        } else {
            self.stage_steps[stage]
        }
    }

    pub fn fade_steps(&self, stage: usize) -> usize {
        ((self.fade_fraction * self.steps(stage) as f64).ceil() as usize).max(1)
    }

    /// Fade coefficient after `step_in_stage` steps of `stage`.
    pub fn alpha(&self, stage: usize, step_in_stage: usize) -> f64 {
        if stage == 0 {
            1.0
        } else {
            (step_in_stage as f64 / self.fade_steps(stage) as f64).min(1.0)
        }
    }
}

/// Generator/discriminator configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub latent_dim: usize,
    /// 1 (label or dot maps) or 2 (stacked image + label).
    pub out_channels: usize,
    /// Upper bound on every layer's width.
    pub max_feature_maps: usize,
    /// Width at stage `s` is `min(max_feature_maps, feature_base >> s)`, at least 4.
    pub feature_base: usize,
    pub schedule: GrowthSchedule,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub drift: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            latent_dim: 64,
            out_channels: 1,
            max_feature_maps: 64,
            feature_base: 512,
            schedule: GrowthSchedule::uniform(64, 200, 0.5),
            batch_size: 8,
            learning_rate: 1e-3,
            drift: 1e-3,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if self.latent_dim == 0 {
            return Err(Error::Config("latent_dim must be >= 1".into()));
        }
        if !(self.out_channels == 1 || self.out_channels == 2) {
            return Err(Error::Config(format!("out_channels must be 1 or 2, got {}", self.out_channels)));
        }
        if self.max_feature_maps == 0 || self.batch_size < 2 {
            return Err(Error::Config("max_feature_maps >= 1 and batch_size >= 2 required".into()));
        }
        Ok(())
    }

    pub fn width(&self, stage: usize) -> usize {
        (self.feature_base >> stage).clamp(4, usize::MAX).min(self.max_feature_maps)
    }
}

struct GenBlock {
    conv1: Conv2d,
    conv2: Conv2d,
}

struct Generator {
    latent: Linear,
    base_conv: Conv2d,
    blocks: Vec<GenBlock>,
    to_out: Vec<Conv2d>,
    base_width: usize,
}

struct DiscBlock {
    conv1: Conv2d,
    conv2: Conv2d,
}

struct Discriminator {
    from_in: Vec<Conv2d>,
    blocks: Vec<DiscBlock>,
    final_conv: Conv2d,
    final_fc: Linear,
    final_out: Linear,
}

/// Name and output width of every layer, for auditing the feature-map cap.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerWidth {
    pub name: String,
    pub width: usize,
    /// Output (image/score) layers are exempt from the cap.
    pub is_output: bool,
}

/// Generator + discriminator pair together with its growth state.
pub struct ProgressiveGan {
    pub config: GeneratorConfig,
    params: ParamStore,
    gen: Generator,
    disc: Discriminator,
    widths: Vec<LayerWidth>,
    stage: usize,
    step_in_stage: usize,
    total_steps: usize,
}

fn eq() -> ConvOpts {
    ConvOpts { equalized: true, ..Default::default() }
}

impl ProgressiveGan {
    pub fn build(config: &GeneratorConfig) -> Result<Self> {
        Self::build_with_dtype(config, DType::F32)
    }

    pub fn build_with_dtype(config: &GeneratorConfig, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut ps = ParamStore::new(seed::derive(config.seed, "gan-init"), dtype);
        let stages = config.schedule.stage_count();
        let mut widths = Vec::new();
        let mut audit = |name: &str, width: usize, is_output: bool| {
            widths.push(LayerWidth { name: name.to_string(), width, is_output })
        };

        let w0 = config.width(0);
        let latent = Linear::new(&mut ps, "g.latent", config.latent_dim, w0 * 16, true, 2f64.sqrt() / 4.0)?;
        audit("g.latent", w0, false);
        let base_conv = Conv2d::new(&mut ps, "g.base_conv", w0, w0, 3, eq())?;
        audit("g.base_conv", w0, false);
        let mut blocks = Vec::new();
        let mut to_out = Vec::new();
        for s in 0..stages {
            let ws = config.width(s);
            if s > 0 {
                let wp = config.width(s - 1);
                let conv1 = Conv2d::new(&mut ps, &format!("g.block{s}.conv1"), wp, ws, 3, eq())?;
                let conv2 = Conv2d::new(&mut ps, &format!("g.block{s}.conv2"), ws, ws, 3, eq())?;
                audit(&format!("g.block{s}.conv1"), ws, false);
                audit(&format!("g.block{s}.conv2"), ws, false);
                blocks.push(GenBlock { conv1, conv2 });
            }
            let mut out = Conv2d::new(&mut ps, &format!("g.to_out{s}"), ws, config.out_channels, 1, eq())?;
            out.gain_override(1.0 / (ws as f64).sqrt());
            audit(&format!("g.to_out{s}"), config.out_channels, true);
            to_out.push(out);
        }
        let gen = Generator { latent, base_conv, blocks, to_out, base_width: w0 };

        let mut from_in = Vec::new();
        let mut dblocks = Vec::new();
        for s in 0..stages {
            let ws = config.width(s);
            from_in.push(Conv2d::new(&mut ps, &format!("d.from_in{s}"), config.out_channels, ws, 1, eq())?);
            audit(&format!("d.from_in{s}"), ws, false);
            if s > 0 {
                let wp = config.width(s - 1);
                let conv1 = Conv2d::new(&mut ps, &format!("d.block{s}.conv1"), ws, ws, 3, eq())?;
                let conv2 = Conv2d::new(&mut ps, &format!("d.block{s}.conv2"), ws, wp, 3, eq())?;
                audit(&format!("d.block{s}.conv1"), ws, false);
                audit(&format!("d.block{s}.conv2"), wp, false);
                dblocks.push(DiscBlock { conv1, conv2 });
            }
        }
        let final_conv = Conv2d::new(&mut ps, "d.final_conv", w0 + 1, w0, 3, eq())?;
        audit("d.final_conv", w0, false);
        let final_fc = Linear::new(&mut ps, "d.final_fc", w0 * 16, w0, true, 2f64.sqrt())?;
        audit("d.final_fc", w0, false);
        let final_out = Linear::new(&mut ps, "d.final_out", w0, 1, true, 1.0)?;
        audit("d.final_out", 1, true);
        let disc = Discriminator { from_in, blocks: dblocks, final_conv, final_fc, final_out };

        Ok(Self { config: config.clone(), params: ps, gen, disc, widths, stage: 0, step_in_stage: 0, total_steps: 0 })
    }

    pub fn layer_widths(&self) -> &[LayerWidth] {
        &self.widths
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn stage(&self) -> usize {
        self.stage
    }

    pub fn final_stage(&self) -> usize {
        self.config.schedule.stage_count() - 1
    }

    pub fn resolution(&self) -> usize {
        self.config.schedule.resolutions()[self.stage]
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn step_in_stage(&self) -> usize {
        self.step_in_stage
    }

    pub fn alpha(&self) -> f64 {
        self.config.schedule.alpha(self.stage, self.step_in_stage)
    }

    /// Moves to the next resolution; the new blocks start fully faded out (alpha = 0).
    pub fn grow(&mut self) -> Result<()> {
        if self.stage >= self.final_stage() {
            return Err(Error::State(format!(
                "cannot grow past the target resolution {}",
                self.config.schedule.target_res
            )));
        }
        self.stage += 1;
        self.step_in_stage = 0;
        Ok(())
    }

    fn gen_features(&self, h: &Tensor, stage: usize) -> Result<Tensor> {
        let b = &self.gen.blocks[stage - 1];
        let h = upsample2x(h)?;
        let h = pixel_norm(&leaky_relu(&b.conv1.forward(&h)?, SLOPE)?)?;
        pixel_norm(&leaky_relu(&b.conv2.forward(&h)?, SLOPE)?)
    }

    /// Generator output at the current stage with an explicit fade coefficient.
    pub fn generate_with_alpha(&self, z: &Tensor, alpha: f64) -> Result<Tensor> {
        let n = z.dim(0)?;
        let z = pixel_norm(&z.unsqueeze(2)?.unsqueeze(3)?)?.flatten_from(1)?;
        let h = self.gen.latent.forward(&z)?.reshape((n, self.gen.base_width, 4, 4))?;
        let h = pixel_norm(&leaky_relu(&h, SLOPE)?)?;
        let mut h = pixel_norm(&leaky_relu(&self.gen.base_conv.forward(&h)?, SLOPE)?)?;
        if self.stage == 0 {
            return self.gen.to_out[0].forward(&h);
        }
        for s in 1..self.stage {
            h = self.gen_features(&h, s)?;
        }
        let old = || -> Result<Tensor> { upsample2x(&self.gen.to_out[self.stage - 1].forward(&h)?) };
        if alpha <= 0.0 {
            return old();
        }
        let new = self.gen.to_out[self.stage].forward(&self.gen_features(&h, self.stage)?)?;
        if alpha >= 1.0 {
            return Ok(new);
        }
        Ok(((old()? * (1.0 - alpha))? + (new * alpha)?)?)
    }

    pub fn generate(&self, z: &Tensor) -> Result<Tensor> {
        self.generate_with_alpha(z, self.alpha())
    }

    fn disc_block(&self, h: &Tensor, stage: usize) -> Result<Tensor> {
        let b = &self.disc.blocks[stage - 1];
        let h = leaky_relu(&b.conv1.forward(h)?, SLOPE)?;
        let h = leaky_relu(&b.conv2.forward(&h)?, SLOPE)?;
        downsample2x(&h)
    }

    /// Discriminator logits `(batch, 1)` for inputs at the current stage resolution.
    pub fn discriminate_with_alpha(&self, x: &Tensor, alpha: f64) -> Result<Tensor> {
        let s = self.stage;
        let from = |stage: usize, x: &Tensor| leaky_relu(&self.disc.from_in[stage].forward(x)?, SLOPE);
        let mut h = if s == 0 {
            from(0, x)?
        } else {
            let new = || self.disc_block(&from(s, x)?, s);
            if alpha >= 1.0 {
                new()?
            } else if alpha <= 0.0 {
                from(s - 1, &downsample2x(x)?)?
            } else {
                let old = from(s - 1, &downsample2x(x)?)?;
                ((old * (1.0 - alpha))? + (new()? * alpha)?)?
            }
        };
        for stage in (1..s).rev() {
            h = self.disc_block(&h, stage)?;
        }
        let h = minibatch_stddev(&h)?;
        let h = leaky_relu(&self.disc.final_conv.forward(&h)?, SLOPE)?;
        let h = leaky_relu(&self.disc.final_fc.forward(&h.flatten_from(1)?)?, SLOPE)?;
        self.disc.final_out.forward(&h)
    }

    pub fn discriminate(&self, x: &Tensor) -> Result<Tensor> {
        self.discriminate_with_alpha(x, self.alpha())
    }

    pub fn checkpoint(&self) -> Result<NetworkCheckpoint> {
        let mut ck = NetworkCheckpoint::new(KIND, &self.config, self.stage, self.total_steps, self.params.tensors())?;
        ck.metadata.insert("step_in_stage".into(), self.step_in_stage.to_string());
        ck.metadata.insert("resolution".into(), self.resolution().to_string());
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &NetworkCheckpoint) -> Result<Self> {
        ck.expect_kind(KIND)?;
        let config: GeneratorConfig = ck.config()?;
        ck.expect(KIND, &config)?;
        let mut gan = Self::build(&config)?;
        gan.params.load(&ck.tensors)?;
        if ck.stage > gan.final_stage() {
            return Err(Error::State(format!("checkpoint stage {} beyond schedule", ck.stage)));
        }
        gan.stage = ck.stage;
        gan.total_steps = ck.step;
        gan.step_in_stage = ck
            .metadata
            .get("step_in_stage")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::State("checkpoint lacks step_in_stage".into()))?;
        Ok(gan)
    }

    /// Standard-normal latents from a seeded stream.
    pub fn latents(&self, n: usize, rng: &mut impl Rng) -> Result<Tensor> {
        let data: Vec<f32> = (0..n * self.config.latent_dim).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
        Ok(Tensor::from_vec(data, (n, self.config.latent_dim), &Device::Cpu)?.to_dtype(self.params.dtype())?)
    }
}

impl Conv2d {
    fn gain_override(&mut self, gain: f64) {
        self.gain = gain;
    }
}

/// Appends the mean (over channels and pixels) of the per-feature batch stddev as one channel.
fn minibatch_stddev(x: &Tensor) -> Result<Tensor> {
    let (n, _, h, w) = x.dims4()?;
    let mean = x.mean_keepdim(0)?;
    let var = x.broadcast_sub(&mean)?.sqr()?.mean_keepdim(0)?;
    let std = (var + 1e-8)?.sqrt()?.mean_all()?;
    let extra = std.reshape((1, 1, 1, 1))?.broadcast_as((n, 1, h, w))?.contiguous()?;
    Ok(Tensor::cat(&[x, &extra], 1)?)
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GanLogRecord {
    pub step: usize,
    pub stage: usize,
    pub resolution: usize,
    pub alpha: f64,
    pub d_loss: f64,
    pub g_loss: f64,
}

#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Receives one JSON line per step.
    pub log: Option<&'a mut dyn Write>,
    /// Stage checkpoints are written here as `stage<k>.ckpt`.
    pub checkpoint_dir: Option<PathBuf>,
    pub resume: Option<NetworkCheckpoint>,
}

pub struct TrainOutcome {
    pub checkpoint: NetworkCheckpoint,
    pub stage_checkpoints: Vec<NetworkCheckpoint>,
    pub log: Vec<GanLogRecord>,
}

/// Maps `[0, 1]` data to the generator's `[-1, 1]` range.
fn to_signed(t: &Tensor) -> Result<Tensor> {
    Ok(t.affine(2.0, -1.0)?)
}

fn select_rows(t: &Tensor, idx: &[u32]) -> Result<Tensor> {
    let ids = Tensor::from_vec(idx.to_vec(), idx.len(), &Device::Cpu)?;
    Ok(t.index_select(&ids, 0)?)
}

/// Trains the pair on `data` (grids in `[0, 1]` at the target resolution).
pub fn train_adversarial(data: &[Grid], config: &GeneratorConfig, mut opts: TrainOptions<'_>) -> Result<TrainOutcome> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Config("adversarial training needs at least one sample".into()));
    }
    let target = config.schedule.target_res;
    for (i, g) in data.iter().enumerate() {
        if (g.channels, g.height, g.width) != (config.out_channels, target, target) {
            return Err(Error::Shape(format!(
                "sample {i} is {}x{}x{}, expected {}x{target}x{target}",
                g.channels, g.height, g.width, config.out_channels
            )));
        }
    }
    let mut gan = match opts.resume.take() {
        Some(ck) => {
            let gan = ProgressiveGan::from_checkpoint(&ck)?;
            if gan.config != *config {
                return Err(Error::State("resume checkpoint was trained with a different config".into()));
            }
            gan
        }
        None => ProgressiveGan::build(config)?,
    };

    // resolution pyramid of the real data, finest last
    let refs: Vec<&Grid> = data.iter().collect();
    let mut pyramid = vec![to_signed(&grids_to_tensor(&refs, DType::F32)?)?];
    for _ in 1..config.schedule.stage_count() {
        let next = downsample2x(pyramid.last().expect("non-empty"))?;
        pyramid.push(next);
    }
    pyramid.reverse();

    let mut d_opt = adam(gan.params.vars_with_prefix("d."), config.learning_rate, 0.0, 0.99)?;
    let mut g_opt = adam(gan.params.vars_with_prefix("g."), config.learning_rate, 0.0, 0.99)?;
    let mut log = Vec::new();
    let mut stage_checkpoints = Vec::new();
    let n = data.len();
    let batch = config.batch_size;

    loop {
        let stage = gan.stage;
        let budget = config.schedule.steps(stage);
        while gan.step_in_stage < budget {
            let mut rng = seed::rng(seed::derive_indexed(config.seed, "gan-step", gan.total_steps as u64));
            let alpha = gan.alpha();
            let idx: Vec<u32> = (0..batch).map(|_| rng.random_range(0..n) as u32).collect();
            let mut real = select_rows(&pyramid[stage], &idx)?;
            if stage > 0 && alpha < 1.0 {
                let coarse = upsample2x(&select_rows(&pyramid[stage - 1], &idx)?)?;
                real = ((coarse * (1.0 - alpha))? + (real * alpha)?)?;
            }

            let z = gan.latents(batch, &mut rng)?;
            let fake = gan.generate(&z)?.detach();
            let d_real = gan.discriminate(&real)?;
            let d_fake = gan.discriminate(&fake)?;
            let d_loss = ((softplus(&d_real.neg()?)?.mean_all()? + softplus(&d_fake)?.mean_all()?)?
                + (d_real.sqr()?.mean_all()? * config.drift)?)?;
            let d_val = finite_scalar(&d_loss, gan.total_steps, "discriminator loss")?;
            step(&mut d_opt, &d_loss)?;

            let z = gan.latents(batch, &mut rng)?;
            let g_loss = softplus(&gan.discriminate(&gan.generate(&z)?)?.neg()?)?.mean_all()?;
            let g_val = finite_scalar(&g_loss, gan.total_steps, "generator loss")?;
            step(&mut g_opt, &g_loss)?;

            let rec = GanLogRecord {
                step: gan.total_steps,
                stage,
                resolution: gan.resolution(),
                alpha,
                d_loss: d_val,
                g_loss: g_val,
            };
            if let Some(w) = opts.log.as_mut() {
                writeln!(w, "{}", serde_json::to_string(&rec)?).map_err(|e| Error::io("<training log>", e))?;
            }
            log.push(rec);
            gan.step_in_stage += 1;
            gan.total_steps += 1;
        }
        let ck = gan.checkpoint()?;
        if let Some(dir) = &opts.checkpoint_dir {
            ck.save(&dir.join(format!("stage{stage}.ckpt")))?;
        }
        stage_checkpoints.push(ck);
        if gan.stage == gan.final_stage() {
            break;
        }
        gan.grow()?;
    }
    let checkpoint = stage_checkpoints.last().cloned().expect("at least one stage");
    Ok(TrainOutcome { checkpoint, stage_checkpoints, log })
}

/// Draws `n` grids in `[0, 1]` at the target resolution; deterministic per seed.
pub fn sample(ckpt: &NetworkCheckpoint, n: usize, seed_value: u64) -> Result<Vec<Grid>> {
    let gan = ProgressiveGan::from_checkpoint(ckpt)?;
    sample_from(&gan, n, seed_value)
}

pub fn sample_from(gan: &ProgressiveGan, n: usize, seed_value: u64) -> Result<Vec<Grid>> {
    let mut rng = seed::rng(seed::derive(seed_value, "gan-sample"));
    let target = gan.config.schedule.target_res;
    let mut out = Vec::with_capacity(n);
    let mut remaining = n;
    while remaining > 0 {
        let b = remaining.min(16);
        let z = gan.latents(b, &mut rng)?;
        let mut y = gan.generate(&z)?.affine(0.5, 0.5)?.clamp(0.0, 1.0)?;
        let (_, _, h, _) = y.dims4()?;
        if h != target {
            y = upsample_by(&y, target / h, target / h)?;
        }
        out.extend(tensor_to_grids(&y)?);
        remaining -= b;
    }
    Ok(out)
}

/// Quantizes a 1-channel sample to the nearest class levels.
pub fn decode_labels(grid: &Grid) -> Result<LabelMap> {
    if grid.channels != 1 {
        return Err(Error::Shape(format!("label samples have 1 channel, got {}", grid.channels)));
    }
    label::levels_to_map(grid.height, grid.width, grid.plane(0))
}

/// Mean over the batch of the discriminator logit, used by gradient checks.
pub fn score_of_generated(gan: &ProgressiveGan, z: &Tensor, alpha: f64) -> Result<Tensor> {
    let x = gan.generate_with_alpha(z, alpha)?;
    Ok(gan.discriminate_with_alpha(&x, alpha)?.mean(D::Minus1)?.mean_all()?)
}
