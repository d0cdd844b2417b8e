//! Attention-augmented segmentation network plus its crop-based training loop and
//! sliding-window inference.
//!
//! The encoder is a small residual network (group normalization) whose last
//! stages keep the 1/8 resolution and use dilated convolutions instead of further
//! striding. Deep features are pooled into 1x1, 2x2 and 4x4 bins; a per-pixel
//! softmax over the three scales weights the pooled context before it is fused
//! with the features. Without attention the pooled maps are simply concatenated
//! (pyramid pooling). A two-level decoder recovers full resolution using a
//! half-resolution and a full-resolution skip connection.

use std::io::Write;

use candle_core::{DType, Device, Tensor};
use candle_nn::ops::{log_softmax, softmax};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{adam, avg_pool_by, finite_scalar, step, upsample_by, Conv2d, ConvOpts, GroupNorm, NetworkCheckpoint, ParamStore};
use crate::error::{Error, Result};
use crate::label::{LabelMap, CLASS_COUNT};
use crate::metrics::{self, MetricsReport};
use crate::raster::GrayImage;
use crate::seed;

pub const KIND: &str = "segmenter";
/// Network inputs are padded to a multiple of this.
pub const SIZE_MULTIPLE: usize = 32;
const POOL_BINS: [usize; 3] = [1, 2, 4];

/// What to do when an image is smaller than the crop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SmallImagePolicy {
    /// Shrink the crop to the image.
    #[default]
    Clamp,
    /// Pad the image by reflection up to the crop size.
    Reflect,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmenterConfig {
    pub class_count: usize,
    pub crop: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub base_channels: usize,
    /// Residual blocks per encoder stage (1/2, 1/4, 1/8, 1/8 dilated, ...).
    pub stage_blocks: Vec<usize>,
    pub attention: bool,
    pub decoder_levels: usize,
    /// Per-class loss weights; empty means uniform.
    pub class_weights: Vec<f64>,
    pub groups: usize,
    pub steps: usize,
    pub small_images: SmallImagePolicy,
    pub seed: u64,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        Self {
            class_count: CLASS_COUNT,
            crop: 377,
            batch_size: 17,
            learning_rate: 1e-4,
            base_channels: 16,
            stage_blocks: vec![1, 1, 1, 1],
            attention: true,
            decoder_levels: 2,
            class_weights: Vec::new(),
            groups: 4,
            steps: 1000,
            small_images: SmallImagePolicy::Clamp,
            seed: 0,
        }
    }
}

impl SegmenterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.class_count < 2 || self.class_count > CLASS_COUNT {
            return Err(Error::Config(format!("class_count must be in 2..=6, got {}", self.class_count)));
        }
        if self.crop == 0 || self.batch_size == 0 || self.base_channels == 0 {
            return Err(Error::Config("crop, batch_size and base_channels must be >= 1".into()));
        }
        if self.stage_blocks.len() < 3 || self.stage_blocks.contains(&0) {
            return Err(Error::Config(format!(
                "encoder needs >= 3 stages with >= 1 block each, got {:?}",
                self.stage_blocks
            )));
        }
        if !(1..=2).contains(&self.decoder_levels) {
            return Err(Error::Config(format!("decoder_levels must be 1 or 2, got {}", self.decoder_levels)));
        }
        if !self.class_weights.is_empty()
            && (self.class_weights.len() != self.class_count || self.class_weights.iter().any(|w| !(*w > 0.0)))
        {
            return Err(Error::Config("class_weights must be empty or one positive weight per class".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }

    pub fn weights(&self) -> Vec<f64> {
        if self.class_weights.is_empty() {
            vec![1.0; self.class_count]
        } else {
            self.class_weights.clone()
        }
    }
}

fn c3() -> ConvOpts {
    ConvOpts::default()
}

struct ConvGn {
    conv: Conv2d,
    gn: GroupNorm,
}

impl ConvGn {
    fn new(ps: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize, opts: ConvOpts, groups: usize) -> Result<Self> {
        Ok(Self { conv: Conv2d::new(ps, name, cin, cout, k, opts)?, gn: GroupNorm::new(ps, &format!("{name}.gn"), cout, groups)? })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.gn.forward(&self.conv.forward(x)?)
    }

    fn forward_relu(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward(x)?.relu()?)
    }
}

struct BasicBlock {
    a: ConvGn,
    b: ConvGn,
    shortcut: Option<ConvGn>,
}

impl BasicBlock {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.b.forward(&self.a.forward_relu(x)?)?;
        let s = match &self.shortcut {
            Some(sc) => sc.forward(x)?,
            None => x.clone(),
        };
        Ok((h + s)?.relu()?)
    }
}

struct Context {
    pools: Vec<Conv2d>,
    attn: Option<Vec<Conv2d>>,
    fuse: ConvGn,
}

/// The segmentation network.
pub struct Segmenter {
    pub config: SegmenterConfig,
    params: ParamStore,
    shallow: ConvGn,
    stem: ConvGn,
    stages: Vec<Vec<BasicBlock>>,
    context: Context,
    dec1: Option<ConvGn>,
    dec2: ConvGn,
    classifier: Conv2d,
    steps_done: usize,
}

impl Segmenter {
    pub fn build(config: &SegmenterConfig) -> Result<Self> {
        Self::build_with_dtype(config, DType::F32)
    }

    pub fn build_with_dtype(config: &SegmenterConfig, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut ps = ParamStore::new(seed::derive(config.seed, "segmenter-init"), dtype);
        let g = config.groups;
        let c = config.base_channels;
        let shallow_c = (c / 2).max(1);
        let shallow = ConvGn::new(&mut ps, "enc.shallow", 1, shallow_c, 3, c3(), g)?;
        let stem = ConvGn::new(&mut ps, "enc.stem", 1, c, 3, ConvOpts { stride: 2, ..c3() }, g)?;

        let mut stages = Vec::new();
        let mut cin = c;
        for (i, &blocks) in config.stage_blocks.iter().enumerate() {
            // 1/2, 1/4, 1/8, then dilation 2, 4, ... at 1/8
            let cout = c << i.min(2);
            let stride = if i == 1 || i == 2 { 2 } else { 1 };
            let dilation = if i >= 3 { 1 << (i - 2) } else { 1 };
            let mut stage = Vec::new();
            for b in 0..blocks {
                let name = format!("enc.stage{i}.block{b}");
                let s = if b == 0 { stride } else { 1 };
                let bin = if b == 0 { cin } else { cout };
                let a = ConvGn::new(&mut ps, &format!("{name}.a"), bin, cout, 3, ConvOpts { stride: s, dilation, ..c3() }, g)?;
                let bb = ConvGn::new(&mut ps, &format!("{name}.b"), cout, cout, 3, ConvOpts { dilation, ..c3() }, g)?;
                let shortcut = if s != 1 || bin != cout {
                    Some(ConvGn::new(&mut ps, &format!("{name}.shortcut"), bin, cout, 1, ConvOpts { stride: s, ..c3() }, g)?)
                } else {
                    None
                };
                stage.push(BasicBlock { a, b: bb, shortcut });
            }
            stages.push(stage);
            cin = cout;
        }

        let deep = cin;
        let ctx_c = (deep / 4).max(1);
        let pools = POOL_BINS
            .iter()
            .map(|b| Conv2d::new(&mut ps, &format!("ctx.pool{b}"), deep, ctx_c, 1, c3()))
            .collect::<Result<Vec<_>>>()?;
        let (attn, fuse_in) = if config.attention {
            let a = POOL_BINS
                .iter()
                .map(|b| Conv2d::new(&mut ps, &format!("ctx.attn{b}"), deep + ctx_c, 1, 1, c3()))
                .collect::<Result<Vec<_>>>()?;
            (Some(a), deep + ctx_c)
        } else {
            (None, deep + ctx_c * POOL_BINS.len())
        };
        let fuse = ConvGn::new(&mut ps, "ctx.fuse", fuse_in, deep, 3, c3(), g)?;
        let context = Context { pools, attn, fuse };

        let dec_c = c;
        let (dec1, dec2_in) = if config.decoder_levels == 2 {
            (Some(ConvGn::new(&mut ps, "dec.level1", deep + c, dec_c, 3, c3(), g)?), dec_c + shallow_c)
        } else {
            (None, deep + shallow_c)
        };
        let dec2 = ConvGn::new(&mut ps, "dec.level2", dec2_in, dec_c, 3, c3(), g)?;
        let classifier = Conv2d::new(&mut ps, "dec.classifier", dec_c, config.class_count, 1, c3())?;
        Ok(Self { config: config.clone(), params: ps, shallow, stem, stages, context, dec1, dec2, classifier, steps_done: 0 })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.param_count()
    }

    pub fn steps_done(&self) -> usize {
        self.steps_done
    }

    fn context(&self, f: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = f.dims4()?;
        let mut pooled = Vec::with_capacity(POOL_BINS.len());
        for (bins, conv) in POOL_BINS.iter().zip(&self.context.pools) {
            let p = avg_pool_by(f, h / bins, w / bins)?;
            let p = upsample_by(&conv.forward(&p)?.relu()?, h / bins, w / bins)?;
            pooled.push(p);
        }
        match &self.context.attn {
            Some(attn) => {
                let logits = pooled
                    .iter()
                    .zip(attn)
                    .map(|(p, a)| a.forward(&Tensor::cat(&[f, p], 1)?))
                    .collect::<Result<Vec<_>>>()?;
                let weights = softmax(&Tensor::cat(&logits, 1)?, 1)?;
                let mut attended: Option<Tensor> = None;
                for (i, p) in pooled.iter().enumerate() {
                    let term = p.broadcast_mul(&weights.narrow(1, i, 1)?)?;
                    attended = Some(match attended {
                        None => term,
                        Some(a) => (a + term)?,
                    });
                }
                let attended = attended.expect("three scales");
                self.context.fuse.forward_relu(&Tensor::cat(&[f, &attended], 1)?)
            }
            None => {
                let mut parts = vec![f.clone()];
                parts.extend(pooled);
                self.context.fuse.forward_relu(&Tensor::cat(&parts, 1)?)
            }
        }
    }

    /// Class logits `(n, classes, h, w)` for images `(n, 1, h, w)` of any size >= 1.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        if c != 1 {
            return Err(Error::Shape(format!("segmenter expects 1 input channel, got {c}")));
        }
        let ph = h.div_ceil(SIZE_MULTIPLE) * SIZE_MULTIPLE;
        let pw = w.div_ceil(SIZE_MULTIPLE) * SIZE_MULTIPLE;
        let x = if (ph, pw) != (h, w) { x.pad_with_same(2, 0, ph - h)?.pad_with_same(3, 0, pw - w)? } else { x.clone() };

        let shallow = self.shallow.forward_relu(&x)?;
        let half = self.stem.forward_relu(&x)?;
        let mut f = half.clone();
        for stage in &self.stages {
            for block in stage {
                f = block.forward(&f)?;
            }
        }
        let f = self.context(&f)?;
        let y = match &self.dec1 {
            Some(d1) => {
                let up = upsample_by(&f, 4, 4)?;
                let y = d1.forward_relu(&Tensor::cat(&[&up, &half], 1)?)?;
                let up = upsample_by(&y, 2, 2)?;
                self.dec2.forward_relu(&Tensor::cat(&[&up, &shallow], 1)?)?
            }
            None => {
                let up = upsample_by(&f, 8, 8)?;
                self.dec2.forward_relu(&Tensor::cat(&[&up, &shallow], 1)?)?
            }
        };
        let logits = self.classifier.forward(&y)?;
        Ok(logits.narrow(2, 0, h)?.narrow(3, 0, w)?)
    }

    /// Weighted pixelwise cross-entropy of `logits` against `targets` (class indices `(n, h, w)`).
    pub fn loss(&self, logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
        let k = self.config.class_count;
        let logp = log_softmax(logits, 1)?;
        let onehot = targets.unsqueeze(1)?.broadcast_as(logp.shape())?.eq(
            &Tensor::arange(0u32, k as u32, &Device::Cpu)?.reshape((1, k, 1, 1))?.broadcast_as(logp.shape())?,
        )?;
        let onehot = onehot.to_dtype(logp.dtype())?;
        let w = Tensor::from_vec(self.config.weights(), (1, k, 1, 1), &Device::Cpu)?.to_dtype(logp.dtype())?;
        let weighted = onehot.broadcast_mul(&w)?;
        let num = (weighted.clone() * logp)?.sum_all()?.neg()?;
        let den = weighted.sum_all()?;
        Ok((num / den)?)
    }

    /// Input `(n,1,h,w)` and target `(n,h,w)` tensors for equally sized pairs.
    pub fn batch_tensors(&self, images: &[GrayImage], labels: &[LabelMap]) -> Result<(Tensor, Tensor)> {
        let (h, w) = images[0].dims();
        let mut x = Vec::with_capacity(images.len() * h * w);
        let mut t = Vec::with_capacity(images.len() * h * w);
        for (i, l) in images.iter().zip(labels) {
            x.extend_from_slice(i.data());
            t.extend(l.raw().iter().map(|&v| v as u32));
        }
        let n = images.len();
        Ok((
            Tensor::from_vec(x, (n, 1, h, w), &Device::Cpu)?.to_dtype(self.params.dtype())?,
            Tensor::from_vec(t, (n, h, w), &Device::Cpu)?,
        ))
    }

    pub fn checkpoint(&self, phase: usize) -> Result<NetworkCheckpoint> {
        NetworkCheckpoint::new(KIND, &self.config, phase, self.steps_done, self.params.tensors())
    }

    pub fn from_checkpoint(ck: &NetworkCheckpoint) -> Result<Self> {
        ck.expect_kind(KIND)?;
        let config: SegmenterConfig = ck.config()?;
        ck.expect(KIND, &config)?;
        let mut s = Self::build(&config)?;
        s.params.load(&ck.tensors)?;
        s.steps_done = ck.step;
        Ok(s)
    }
}

/// Anything that scores square-ish windows of an image.
pub trait ScoreModel {
    fn class_count(&self) -> usize;
    /// Preferred window side.
    fn window(&self) -> usize;
    /// Scores `(class_count, h, w)` flattened, for a window of the image.
    fn score_window(&self, window: &GrayImage) -> Result<Vec<f32>>;
}

impl ScoreModel for Segmenter {
    fn class_count(&self) -> usize {
        self.config.class_count
    }

    fn window(&self) -> usize {
        self.config.crop
    }

    fn score_window(&self, window: &GrayImage) -> Result<Vec<f32>> {
        let (h, w) = window.dims();
        let x = Tensor::from_vec(window.data().to_vec(), (1, 1, h, w), &Device::Cpu)?.to_dtype(self.params.dtype())?;
        let p = softmax(&self.forward(&x)?, 1)?;
        Ok(p.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?)
    }
}

/// Window start offsets along one axis: stride equals the window, last window abuts the end.
pub fn window_offsets(len: usize, window: usize) -> Vec<usize> {
    if len <= window {
        return vec![0];
    }
    let count = len.div_ceil(window);
    let mut v: Vec<usize> = (0..count - 1).map(|i| i * window).collect();
    v.push(len - window);
    v
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegPrediction {
    pub class_count: usize,
    pub height: usize,
    pub width: usize,
    /// `(class_count, height, width)` averaged window scores.
    pub scores: Vec<f32>,
    pub labels: LabelMap,
}

/// Scores every window and averages them where they overlap.
pub fn predict_sliding(model: &dyn ScoreModel, image: &GrayImage) -> Result<SegPrediction> {
    let (h, w) = image.dims();
    let k = model.class_count();
    let wh = model.window().min(h);
    let ww = model.window().min(w);
    let mut sum = vec![0f64; k * h * w];
    let mut hits = vec![0u32; h * w];
    for &r0 in &window_offsets(h, wh) {
        for &c0 in &window_offsets(w, ww) {
            let mut win = Vec::with_capacity(wh * ww);
            for r in r0..r0 + wh {
                win.extend_from_slice(&image.data()[r * w + c0..r * w + c0 + ww]);
            }
            let scores = model.score_window(&GrayImage::new(wh, ww, win)?)?;
            if scores.len() != k * wh * ww {
                return Err(Error::Shape(format!("window scores have {} values, expected {}", scores.len(), k * wh * ww)));
            }
            for r in 0..wh {
                for c in 0..ww {
                    let p = (r0 + r) * w + c0 + c;
                    hits[p] += 1;
                    for cls in 0..k {
                        sum[cls * h * w + p] += scores[cls * wh * ww + r * ww + c] as f64;
                    }
                }
            }
        }
    }
    let plane = h * w;
    let scores: Vec<f32> = sum.iter().enumerate().map(|(i, s)| (*s / hits[i % plane] as f64) as f32).collect();
    let labels = crate::nn::translator::argmax_decode(&scores, k, h, w)?;
    Ok(SegPrediction { class_count: k, height: h, width: w, scores, labels })
}

fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Pads image and labels by reflection to at least `min_h x min_w`.
pub fn reflect_pad(image: &GrayImage, labels: &LabelMap, min_h: usize, min_w: usize) -> Result<(GrayImage, LabelMap)> {
    let (h, w) = image.dims();
    let (oh, ow) = (h.max(min_h), w.max(min_w));
    let (top, left) = ((oh - h) / 2, (ow - w) / 2);
    let mut data = Vec::with_capacity(oh * ow);
    let mut raw = Vec::with_capacity(oh * ow);
    for r in 0..oh {
        let sr = reflect(r as isize - top as isize, h);
        for c in 0..ow {
            let sc = reflect(c as isize - left as isize, w);
            data.push(image.get(sr, sc));
            raw.push(labels.get(sr, sc) as u8);
        }
    }
    Ok((GrayImage::new(oh, ow, data)?, LabelMap::from_raw(oh, ow, &raw)?))
}

fn crop_pair(image: &GrayImage, labels: &LabelMap, r0: usize, c0: usize, ch: usize, cw: usize) -> Result<(GrayImage, LabelMap)> {
    let w = image.width();
    let mut data = Vec::with_capacity(ch * cw);
    let mut raw = Vec::with_capacity(ch * cw);
    for r in r0..r0 + ch {
        data.extend_from_slice(&image.data()[r * w + c0..r * w + c0 + cw]);
        raw.extend(labels.raw()[r * w + c0..r * w + c0 + cw].iter());
    }
    Ok((GrayImage::new(ch, cw, data)?, LabelMap::from_raw(ch, cw, &raw)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegLogRecord {
    pub phase: String,
    pub step: usize,
    pub loss: f64,
}

fn validate_data(data: &[(GrayImage, LabelMap)]) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Config("segmenter training needs at least one pair".into()));
    }
    for (i, (img, lab)) in data.iter().enumerate() {
        if img.dims() != lab.dims() {
            return Err(Error::Shape(format!("pair {i}: image {:?} vs labels {:?}", img.dims(), lab.dims())));
        }
    }
    Ok(())
}

fn run_steps(
    net: &mut Segmenter,
    data: &[(GrayImage, LabelMap)],
    steps: usize,
    phase: &str,
    mut log: Option<&mut dyn Write>,
) -> Result<Vec<SegLogRecord>> {
    validate_data(data)?;
    let cfg = net.config.clone();
    let prepared: Vec<(GrayImage, LabelMap)> = match cfg.small_images {
        SmallImagePolicy::Reflect => data
            .iter()
            .map(|(i, l)| reflect_pad(i, l, cfg.crop, cfg.crop))
            .collect::<Result<_>>()?,
        SmallImagePolicy::Clamp => data.to_vec(),
    };
    let ch = prepared.iter().map(|(i, _)| i.height()).min().expect("non-empty").min(cfg.crop);
    let cw = prepared.iter().map(|(i, _)| i.width()).min().expect("non-empty").min(cfg.crop);
    let mut opt = adam(net.params.vars(), cfg.learning_rate, 0.9, 0.999)?;
    let mut records = Vec::with_capacity(steps);
    for _ in 0..steps {
        let global = net.steps_done;
        let mut rng = seed::rng(seed::derive_indexed(cfg.seed, &format!("seg-{phase}-step"), global as u64));
        // sampling with replacement, so batches may exceed the dataset size
        let mut imgs = Vec::with_capacity(cfg.batch_size);
        let mut labs = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let (img, lab) = &prepared[rng.random_range(0..prepared.len())];
            let r0 = rng.random_range(0..=img.height() - ch);
            let c0 = rng.random_range(0..=img.width() - cw);
            let (ci, cl) = crop_pair(img, lab, r0, c0, ch, cw)?;
            imgs.push(ci);
            labs.push(cl);
        }
        let (x, t) = net.batch_tensors(&imgs, &labs)?;
        let loss = net.loss(&net.forward(&x)?, &t)?;
        let v = finite_scalar(&loss, global, "segmentation loss")?;
        step(&mut opt, &loss)?;
        let rec = SegLogRecord { phase: phase.to_string(), step: global, loss: v };
        if let Some(w) = log.as_mut() {
            writeln!(w, "{}", serde_json::to_string(&rec)?).map_err(|e| Error::io("<training log>", e))?;
        }
        records.push(rec);
        net.steps_done += 1;
    }
    Ok(records)
}

/// Trains from scratch; `source` is recorded as the data provenance.
pub fn train_segmenter(
    data: &[(GrayImage, LabelMap)],
    config: &SegmenterConfig,
    source: &str,
    log: Option<&mut dyn Write>,
) -> Result<(NetworkCheckpoint, Vec<SegLogRecord>)> {
    let mut net = Segmenter::build(config)?;
    validate_data(data)?;
    let records = run_steps(&mut net, data, config.steps, "train", log)?;
    let mut ck = net.checkpoint(0)?;
    ck.metadata.insert("train_source".into(), source.to_string());
    ck.metadata.insert("train_steps".into(), records.len().to_string());
    ck.metadata.insert("train_pairs".into(), data.len().to_string());
    Ok((ck, records))
}

/// Continues training on `data` (real pairs) for `steps` further steps.
pub fn finetune(
    ckpt: &NetworkCheckpoint,
    data: &[(GrayImage, LabelMap)],
    steps: usize,
    source: &str,
    log: Option<&mut dyn Write>,
) -> Result<(NetworkCheckpoint, Vec<SegLogRecord>)> {
    let mut net = Segmenter::from_checkpoint(ckpt)?;
    validate_data(data)?;
    let records = run_steps(&mut net, data, steps, "finetune", log)?;
    let mut ck = net.checkpoint(1)?;
    let pre = |k: &str| ckpt.metadata.get(k).cloned().unwrap_or_else(|| "unknown".into());
    ck.metadata.insert("pretrain_source".into(), pre("train_source"));
    ck.metadata.insert("pretrain_steps".into(), pre("train_steps"));
    ck.metadata.insert("finetune_source".into(), source.to_string());
    ck.metadata.insert("finetune_steps".into(), steps.to_string());
    ck.metadata.insert("finetune_pairs".into(), data.len().to_string());
    Ok((ck, records))
}

/// Predicts every image and scores the predictions against the labels.
pub fn evaluate(
    model: &dyn ScoreModel,
    data: &[(GrayImage, LabelMap)],
    subset: &[crate::label::ClassCode],
) -> Result<(Vec<LabelMap>, MetricsReport)> {
    let preds: Vec<LabelMap> = data.iter().map(|(i, _)| predict_sliding(model, i).map(|p| p.labels)).collect::<Result<_>>()?;
    let pairs: Vec<(&LabelMap, &LabelMap)> = preds.iter().zip(data.iter().map(|(_, l)| l)).collect();
    let report = metrics::report_refs(&pairs, subset, metrics::Averaging::Micro)?;
    Ok((preds, report))
}

/// Mean of the per-step losses over a window of the log (for smoke checks).
pub fn mean_loss(records: &[SegLogRecord]) -> f64 {
    records.iter().map(|r| r.loss).sum::<f64>() / records.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{gradient_check, relative_error};

    fn small() -> SegmenterConfig {
        SegmenterConfig {
            crop: 32,
            batch_size: 2,
            base_channels: 4,
            stage_blocks: vec![1, 1, 1],
            groups: 2,
            steps: 2,
            ..Default::default()
        }
    }

    struct Constant {
        scores: [f32; 6],
        window: usize,
    }

    impl ScoreModel for Constant {
        fn class_count(&self) -> usize {
            6
        }
        fn window(&self) -> usize {
            self.window
        }
        fn score_window(&self, w: &GrayImage) -> Result<Vec<f32>> {
            let n = w.height() * w.width();
            Ok(self.scores.iter().flat_map(|&s| std::iter::repeat_n(s, n)).collect())
        }
    }

    /// Scores each pixel by its own intensity in every class channel.
    struct Identity {
        window: usize,
    }

    impl ScoreModel for Identity {
        fn class_count(&self) -> usize {
            2
        }
        fn window(&self) -> usize {
            self.window
        }
        fn score_window(&self, w: &GrayImage) -> Result<Vec<f32>> {
            let mut v = w.data().to_vec();
            v.extend(w.data().iter().map(|x| 1.0 - x));
            Ok(v)
        }
    }

    #[test]
    fn offsets_cover_and_abut() {
        assert_eq!(window_offsets(512, 377), vec![0, 135]);
        assert_eq!(window_offsets(377, 377), vec![0]);
        assert_eq!(window_offsets(100, 377), vec![0]);
        assert_eq!(window_offsets(1000, 300), vec![0, 300, 600, 700]);
    }

    #[test]
    fn constant_scores_survive_averaging() {
        let m = Constant { scores: [0.1, 0.3, 0.05, 0.4, 0.1, 0.05], window: 40 };
        let img = GrayImage::filled(100, 70, 0.5).unwrap();
        let p = predict_sliding(&m, &img).unwrap();
        for cls in 0..6 {
            assert!(p.scores[cls * 7000..(cls + 1) * 7000].iter().all(|&s| s == m.scores[cls]));
        }
        assert!(p.labels.codes().iter().all(|&c| c == crate::label::ClassCode::Heart));
    }

    #[test]
    fn identity_stitching_is_exact() {
        let mut rng = seed::rng(4);
        let data: Vec<f32> = (0..90 * 75).map(|_| rng.random_range(0.0..1.0)).collect();
        let img = GrayImage::new(90, 75, data.clone()).unwrap();
        let p = predict_sliding(&Identity { window: 32 }, &img).unwrap();
        assert_eq!(&p.scores[..90 * 75], &data[..]);
    }

    #[test]
    fn output_matches_input_dims() {
        for attention in [true, false] {
            let net = Segmenter::build(&SegmenterConfig { attention, ..small() }).unwrap();
            for (h, w) in [(8, 8), (37, 50), (64, 64)] {
                let x = Tensor::zeros((1, 1, h, w), DType::F32, &Device::Cpu).unwrap();
                assert_eq!(net.forward(&x).unwrap().dims(), &[1, 6, h, w]);
            }
        }
    }

    #[test]
    fn param_count_is_seed_independent() {
        let a = Segmenter::build(&SegmenterConfig { seed: 1, ..small() }).unwrap();
        let b = Segmenter::build(&SegmenterConfig { seed: 2, ..small() }).unwrap();
        assert_eq!(a.param_count(), b.param_count());
        assert!(Segmenter::build(&SegmenterConfig { stage_blocks: vec![1, 0, 1], ..small() }).is_err());
    }

    #[test]
    fn reflect_padding_mirrors_edges() {
        let img = GrayImage::new(1, 3, vec![0.1, 0.2, 0.3]).unwrap();
        let lab = LabelMap::from_raw(1, 3, &[1, 2, 3]).unwrap();
        let (pi, pl) = reflect_pad(&img, &lab, 1, 7).unwrap();
        assert_eq!(pi.data(), &[0.3, 0.2, 0.1, 0.2, 0.3, 0.2, 0.1]);
        assert_eq!(pl.raw(), vec![3, 2, 1, 2, 3, 2, 1]);
    }

    #[test]
    fn zero_steps_keep_initialization() {
        let data = vec![(GrayImage::filled(32, 32, 0.4).unwrap(), LabelMap::background(32, 32).unwrap())];
        let cfg = SegmenterConfig { steps: 0, ..small() };
        let (ck, log) = train_segmenter(&data, &cfg, "test", None).unwrap();
        assert!(log.is_empty());
        let init = Segmenter::build(&cfg).unwrap().checkpoint(0).unwrap();
        assert!(ck.same_parameters(&init).unwrap());
        let (ft, _) = finetune(&ck, &data, 0, "real", None).unwrap();
        assert!(ft.same_parameters(&ck).unwrap());
        assert_eq!(ft.metadata["pretrain_source"], "test");
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let cfg = small();
        let net = Segmenter::build_with_dtype(&cfg, DType::F64).unwrap();
        let mut rng = seed::rng(8);
        let imgs: Vec<GrayImage> =
            (0..2).map(|_| GrayImage::new(32, 32, (0..1024).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()).collect();
        let labs: Vec<LabelMap> = (0..2)
            .map(|_| LabelMap::from_raw(32, 32, &(0..1024).map(|_| rng.random_range(0..6u8)).collect::<Vec<_>>()).unwrap())
            .collect();
        let (x, t) = net.batch_tensors(&imgs, &labs).unwrap();
        for name in ["enc.stage0.block0.a.weight", "dec.classifier.weight"] {
            let var = net.params().var(name).unwrap().clone();
            for index in [0usize, 5] {
                let (a, n) = gradient_check(&var, index, 1e-6, || net.loss(&net.forward(&x)?, &t)).unwrap();
                assert!(relative_error(a, n) < 1e-3, "{name}[{index}]: analytic {a}, numeric {n}");
            }
        }
    }
}
