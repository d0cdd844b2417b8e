//! Conditional translation of label or dot maps into label maps or radiographs.
//!
//! The generator is a residual encoder/decoder (optionally wrapped by finer
//! enhancer levels that run on progressively larger inputs). Several PatchGAN
//! discriminators look at the (source, target) pair at successively halved
//! resolutions. The generator minimizes the least-squares adversarial loss plus
//! `fm_weight` times the discriminator feature-matching term:
//!
//! ```text
//! FM = sum_k 1/num_d * sum_i 1/n_layers * mean |D_k^i(s, t) - D_k^i(s, G(s))|
//! ```

use std::io::Write;

use candle_core::{DType, Device, Tensor};
use candle_nn::ops::softmax;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    adam, downsample2x, finite_scalar, instance_norm, leaky_relu, step, upsample2x, Conv2d, ConvOpts,
    NetworkCheckpoint, ParamStore,
};
use crate::error::{Error, Result};
use crate::label::LabelMap;
use crate::raster::GrayImage;
use crate::seed;

pub const KIND: &str = "translator";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputKind {
    Label,
    Image,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TranslatorConfig {
    pub class_count: usize,
    pub output_kind: OutputKind,
    /// Coarse-to-fine generator levels; 1 is the global generator alone.
    pub generator_levels: usize,
    pub discriminators: usize,
    pub disc_layers: usize,
    pub base_channels: usize,
    pub disc_channels: usize,
    pub downsamples: usize,
    pub residual_blocks: usize,
    pub first_kernel: usize,
    pub fm_weight: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TranslatorConfig {
    fn default() -> Self {
        Self {
            class_count: crate::label::CLASS_COUNT,
            output_kind: OutputKind::Label,
            generator_levels: 1,
            discriminators: 2,
            disc_layers: 3,
            base_channels: 16,
            disc_channels: 16,
            downsamples: 2,
            residual_blocks: 3,
            first_kernel: 7,
            fm_weight: 10.0,
            steps: 200,
            batch_size: 4,
            learning_rate: 2e-4,
            seed: 0,
        }
    }
}

impl TranslatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.class_count == 0 || self.class_count > crate::label::CLASS_COUNT {
            return Err(Error::Config(format!("class_count must be in 1..=6, got {}", self.class_count)));
        }
        if self.generator_levels == 0 || self.discriminators == 0 || self.disc_layers == 0 {
            return Err(Error::Config("generator_levels, discriminators and disc_layers must be >= 1".into()));
        }
        if self.base_channels == 0 || self.disc_channels == 0 || self.batch_size == 0 {
            return Err(Error::Config("channel counts and batch_size must be >= 1".into()));
        }
        if self.first_kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("first_kernel must be odd, got {}", self.first_kernel)));
        }
        if !(self.fm_weight >= 0.0 && self.fm_weight.is_finite()) {
            return Err(Error::Config(format!("fm_weight must be >= 0, got {}", self.fm_weight)));
        }
        Ok(())
    }

    pub fn target_channels(&self) -> usize {
        match self.output_kind {
            OutputKind::Label => self.class_count,
            OutputKind::Image => 1,
        }
    }

    /// Input sides must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        let g = 1usize << (self.downsamples + self.generator_levels - 1);
        let d = 1usize << (self.disc_layers + self.discriminators - 1);
        g.max(d)
    }
}

/// Channel stack with a single 1 per pixel at the pixel's code.
pub fn one_hot(map: &LabelMap, class_count: usize) -> Result<Vec<f32>> {
    let (h, w) = map.dims();
    let mut out = vec![0f32; class_count * h * w];
    for (p, code) in map.codes().iter().enumerate() {
        let k = code.index();
        if k >= class_count {
            return Err(Error::Codec(format!("class code {k} does not fit {class_count} one-hot channels")));
        }
        out[k * h * w + p] = 1.0;
    }
    Ok(out)
}

/// Per-pixel argmax over `class_count` channel planes; ties go to the lowest code.
pub fn argmax_decode(scores: &[f32], class_count: usize, height: usize, width: usize) -> Result<LabelMap> {
    let plane = height * width;
    if scores.len() != class_count * plane {
        return Err(Error::Shape(format!("{} scores for {class_count}x{height}x{width}", scores.len())));
    }
    let mut raw = vec![0u8; plane];
    for (p, r) in raw.iter_mut().enumerate() {
        let mut best = 0;
        for k in 1..class_count {
            if scores[k * plane + p] > scores[best * plane + p] {
                best = k;
            }
        }
        *r = best as u8;
    }
    LabelMap::from_raw(height, width, &raw)
}

fn one_hot_tensor(maps: &[&LabelMap], class_count: usize, dtype: DType) -> Result<Tensor> {
    let (h, w) = maps[0].dims();
    let mut data = Vec::with_capacity(maps.len() * class_count * h * w);
    for m in maps {
        if m.dims() != (h, w) {
            return Err(Error::Shape(format!("batch mixes {:?} and {:?} maps", (h, w), m.dims())));
        }
        data.extend(one_hot(m, class_count)?);
    }
    Ok(Tensor::from_vec(data, (maps.len(), class_count, h, w), &Device::Cpu)?.to_dtype(dtype)?)
}

/// One training target.
#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Labels(LabelMap),
    Image(GrayImage),
}

impl Target {
    pub fn dims(&self) -> (usize, usize) {
        match self {
            Target::Labels(m) => m.dims(),
            Target::Image(i) => i.dims(),
        }
    }
}

fn conv_in_relu(conv: &Conv2d, x: &Tensor) -> Result<Tensor> {
    Ok(instance_norm(&conv.forward(x)?)?.relu()?)
}

struct ResBlock {
    a: Conv2d,
    b: Conv2d,
}

impl ResBlock {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = conv_in_relu(&self.a, x)?;
        Ok((x + instance_norm(&self.b.forward(&h)?)?)?)
    }
}

struct GlobalGen {
    front: Conv2d,
    down: Vec<Conv2d>,
    res: Vec<ResBlock>,
    up: Vec<Conv2d>,
}

struct Enhancer {
    front: Conv2d,
    down: Conv2d,
    res: Vec<ResBlock>,
    up: Conv2d,
}

struct PatchDisc {
    layers: Vec<Conv2d>,
    out: Conv2d,
}

impl PatchDisc {
    /// Intermediate features followed by the patch scores.
    fn forward(&self, x: &Tensor) -> Result<(Vec<Tensor>, Tensor)> {
        let mut feats = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            let y = l.forward(&h)?;
            let y = if i == 0 { y } else { instance_norm(&y)? };
            h = leaky_relu(&y, 0.2)?;
            feats.push(h.clone());
        }
        let score = self.out.forward(&h)?;
        Ok((feats, score))
    }
}

pub struct Translator {
    pub config: TranslatorConfig,
    params: ParamStore,
    global: GlobalGen,
    enhancers: Vec<Enhancer>,
    out: Conv2d,
    discs: Vec<PatchDisc>,
    steps_done: usize,
}

fn std_conv(stride: usize) -> ConvOpts {
    ConvOpts { stride, ..Default::default() }
}

impl Translator {
    pub fn build(config: &TranslatorConfig) -> Result<Self> {
        Self::build_with_dtype(config, DType::F32)
    }

    pub fn build_with_dtype(config: &TranslatorConfig, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut ps = ParamStore::new(seed::derive(config.seed, "translator-init"), dtype);
        let c = config.base_channels;
        let k = config.first_kernel;
        let src = config.class_count;

        let front = Conv2d::new(&mut ps, "g.global.front", src, c, k, ConvOpts::default())?;
        let mut down = Vec::new();
        let mut width = c;
        for i in 0..config.downsamples {
            down.push(Conv2d::new(&mut ps, &format!("g.global.down{i}"), width, width * 2, 3, std_conv(2))?);
            width *= 2;
        }
        let mut res = Vec::new();
        for i in 0..config.residual_blocks {
            res.push(ResBlock {
                a: Conv2d::new(&mut ps, &format!("g.global.res{i}.a"), width, width, 3, ConvOpts::default())?,
                b: Conv2d::new(&mut ps, &format!("g.global.res{i}.b"), width, width, 3, ConvOpts::default())?,
            });
        }
        let mut up = Vec::new();
        for i in 0..config.downsamples {
            up.push(Conv2d::new(&mut ps, &format!("g.global.up{i}"), width, width / 2, 3, ConvOpts::default())?);
            width /= 2;
        }
        let global = GlobalGen { front, down, res, up };

        let mut enhancers = Vec::new();
        for l in 1..config.generator_levels {
            let p = format!("g.enhance{l}");
            enhancers.push(Enhancer {
                front: Conv2d::new(&mut ps, &format!("{p}.front"), src, c, k, ConvOpts::default())?,
                down: Conv2d::new(&mut ps, &format!("{p}.down"), c, c, 3, std_conv(2))?,
                res: (0..2)
                    .map(|i| {
                        Ok(ResBlock {
                            a: Conv2d::new(&mut ps, &format!("{p}.res{i}.a"), c, c, 3, ConvOpts::default())?,
                            b: Conv2d::new(&mut ps, &format!("{p}.res{i}.b"), c, c, 3, ConvOpts::default())?,
                        })
                    })
                    .collect::<Result<_>>()?,
                up: Conv2d::new(&mut ps, &format!("{p}.up"), c, c, 3, ConvOpts::default())?,
            });
        }
        let out = Conv2d::new(&mut ps, "g.out", c, config.target_channels(), k, ConvOpts::default())?;

        let mut discs = Vec::new();
        let d_in = src + config.target_channels();
        for s in 0..config.discriminators {
            let mut layers = Vec::new();
            let mut w_in = d_in;
            let mut w = config.disc_channels;
            for i in 0..config.disc_layers {
                layers.push(Conv2d::new(&mut ps, &format!("d{s}.layer{i}"), w_in, w, 3, std_conv(2))?);
                w_in = w;
                w = (w * 2).min(config.disc_channels * 8);
            }
            layers.push(Conv2d::new(&mut ps, &format!("d{s}.layer{}", config.disc_layers), w_in, w_in, 3, ConvOpts::default())?);
            let out = Conv2d::new(&mut ps, &format!("d{s}.out"), w_in, 1, 3, ConvOpts::default())?;
            discs.push(PatchDisc { layers, out });
        }
        Ok(Self { config: config.clone(), params: ps, global, enhancers, out, discs, steps_done: 0 })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn steps_done(&self) -> usize {
        self.steps_done
    }

    /// Raw generator output: class logits (label kind) or `tanh` values in `[-1, 1]` (image kind).
    pub fn generate(&self, source: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = source.dims4()?;
        if c != self.config.class_count {
            return Err(Error::Shape(format!("source has {c} channels, translator expects {}", self.config.class_count)));
        }
        let m = self.config.size_multiple();
        if h % m != 0 || w % m != 0 {
            return Err(Error::Shape(format!("source {h}x{w} must be a multiple of {m}")));
        }
        // inputs for each level, coarsest first
        let mut inputs = vec![source.clone()];
        for _ in 1..self.config.generator_levels {
            let next = downsample2x(inputs.last().expect("non-empty"))?;
            inputs.push(next);
        }
        inputs.reverse();

        let g = &self.global;
        let mut f = conv_in_relu(&g.front, &inputs[0])?;
        for d in &g.down {
            f = conv_in_relu(d, &f)?;
        }
        for r in &g.res {
            f = r.forward(&f)?;
        }
        for u in &g.up {
            f = conv_in_relu(u, &upsample2x(&f)?)?;
        }
        for (e, x) in self.enhancers.iter().zip(&inputs[1..]) {
            let mut h = conv_in_relu(&e.down, &conv_in_relu(&e.front, x)?)?;
            h = (h + f)?;
            for r in &e.res {
                h = r.forward(&h)?;
            }
            f = conv_in_relu(&e.up, &upsample2x(&h)?)?;
        }
        let y = self.out.forward(&f)?;
        match self.config.output_kind {
            OutputKind::Label => Ok(y),
            OutputKind::Image => Ok(y.tanh()?),
        }
    }

    /// What the discriminators see for a generator output.
    fn target_view(&self, raw: &Tensor) -> Result<Tensor> {
        match self.config.output_kind {
            OutputKind::Label => Ok(softmax(raw, 1)?),
            OutputKind::Image => Ok(raw.clone()),
        }
    }

    /// Per-scale discriminator features and scores of a (source, target view) pair.
    fn discriminate(&self, source: &Tensor, target: &Tensor) -> Result<Vec<(Vec<Tensor>, Tensor)>> {
        let mut x = Tensor::cat(&[source, target], 1)?;
        let mut out = Vec::with_capacity(self.discs.len());
        for (i, d) in self.discs.iter().enumerate() {
            if i > 0 {
                x = downsample2x(&x)?;
            }
            out.push(d.forward(&x)?);
        }
        Ok(out)
    }

    fn feature_matching(&self, real: &[(Vec<Tensor>, Tensor)], fake: &[(Vec<Tensor>, Tensor)]) -> Result<Tensor> {
        let num_d = real.len() as f64;
        let mut total: Option<Tensor> = None;
        for ((rf, _), (ff, _)) in real.iter().zip(fake) {
            let layers = rf.len() as f64;
            for (r, f) in rf.iter().zip(ff) {
                let term = ((f - r.detach())?.abs()?.mean_all()? / (num_d * layers))?;
                total = Some(match total {
                    None => term,
                    Some(t) => (t + term)?,
                });
            }
        }
        total.ok_or_else(|| Error::State("no discriminator features".into()))
    }

    /// Feature-matching term of the generator loss for one batch.
    pub fn feature_matching_loss(&self, source: &Tensor, target: &Tensor) -> Result<Tensor> {
        let real = self.discriminate(source, target)?;
        let fake = self.discriminate(source, &self.target_view(&self.generate(source)?)?)?;
        self.feature_matching(&real, &fake)
    }

    pub fn checkpoint(&self) -> Result<NetworkCheckpoint> {
        NetworkCheckpoint::new(KIND, &self.config, 0, self.steps_done, self.params.tensors())
    }

    pub fn from_checkpoint(ck: &NetworkCheckpoint) -> Result<Self> {
        ck.expect_kind(KIND)?;
        let config: TranslatorConfig = ck.config()?;
        ck.expect(KIND, &config)?;
        let mut t = Self::build(&config)?;
        t.params.load(&ck.tensors)?;
        t.steps_done = ck.step;
        Ok(t)
    }

    fn source_tensor(&self, maps: &[&LabelMap]) -> Result<Tensor> {
        one_hot_tensor(maps, self.config.class_count, self.params.dtype())
    }

    fn target_tensor(&self, targets: &[&Target]) -> Result<Tensor> {
        let dtype = self.params.dtype();
        match self.config.output_kind {
            OutputKind::Label => {
                let maps = targets
                    .iter()
                    .map(|t| match t {
                        Target::Labels(m) => Ok(m),
                        Target::Image(_) => Err(Error::Shape("label translator given an image target".into())),
                    })
                    .collect::<Result<Vec<_>>>()?;
                one_hot_tensor(&maps, self.config.class_count, dtype)
            }
            OutputKind::Image => {
                let (h, w) = targets[0].dims();
                let mut data = Vec::with_capacity(targets.len() * h * w);
                for t in targets {
                    match t {
                        Target::Image(i) => data.extend(i.data().iter().map(|v| v * 2.0 - 1.0)),
                        Target::Labels(_) => return Err(Error::Shape("image translator given a label target".into())),
                    }
                }
                Ok(Tensor::from_vec(data, (targets.len(), 1, h, w), &Device::Cpu)?.to_dtype(dtype)?)
            }
        }
    }

    /// Translates one source map.
    pub fn translate(&self, source: &LabelMap) -> Result<Target> {
        let (h, w) = source.dims();
        let y = self.generate(&self.source_tensor(&[source])?)?.to_dtype(DType::F32)?;
        let flat: Vec<f32> = y.flatten_all()?.to_vec1()?;
        match self.config.output_kind {
            OutputKind::Label => Ok(Target::Labels(argmax_decode(&flat, self.config.class_count, h, w)?)),
            OutputKind::Image => {
                Ok(Target::Image(GrayImage::from_clamped(h, w, flat.iter().map(|v| (v + 1.0) * 0.5).collect())?))
            }
        }
    }
}

fn mse_to(x: &Tensor, value: f64) -> Result<Tensor> {
    Ok((x - value)?.sqr()?.mean_all()?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranslatorLogRecord {
    pub step: usize,
    pub d_loss: f64,
    pub adversarial: f64,
    pub feature_matching: f64,
    pub total: f64,
}

/// Trains a translator on (source map, target) pairs.
pub fn train_translation(
    sources: &[LabelMap],
    targets: &[Target],
    config: &TranslatorConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<(NetworkCheckpoint, Vec<TranslatorLogRecord>)> {
    config.validate()?;
    if sources.is_empty() {
        return Err(Error::Config("translation training needs at least one pair".into()));
    }
    if sources.len() != targets.len() {
        return Err(Error::Shape(format!("{} sources but {} targets", sources.len(), targets.len())));
    }
    let dims = sources[0].dims();
    for (i, (s, t)) in sources.iter().zip(targets).enumerate() {
        if s.dims() != dims || t.dims() != dims {
            return Err(Error::Shape(format!("pair {i}: source {:?}, target {:?}, expected {dims:?}", s.dims(), t.dims())));
        }
    }
    let net = Translator::build(config)?;
    let mut d_opt = adam(net.params.vars_with_prefix("d"), config.learning_rate, 0.5, 0.999)?;
    let mut g_opt = adam(net.params.vars_with_prefix("g."), config.learning_rate, 0.5, 0.999)?;
    let mut records = Vec::with_capacity(config.steps);
    let mut net = net;
    for s in 0..config.steps {
        let mut rng = seed::rng(seed::derive_indexed(config.seed, "translator-step", s as u64));
        let idx: Vec<usize> = (0..config.batch_size).map(|_| rng.random_range(0..sources.len())).collect();
        let src_refs: Vec<&LabelMap> = idx.iter().map(|&i| &sources[i]).collect();
        let tgt_refs: Vec<&Target> = idx.iter().map(|&i| &targets[i]).collect();
        let src = net.source_tensor(&src_refs)?;
        let real_t = net.target_tensor(&tgt_refs)?;

        let fake_t = net.target_view(&net.generate(&src)?)?;
        let real = net.discriminate(&src, &real_t)?;
        let fake = net.discriminate(&src, &fake_t.detach())?;
        let n = real.len() as f64;
        let mut d_loss = Tensor::zeros((), net.params.dtype(), &Device::Cpu)?;
        for ((_, rs), (_, fs)) in real.iter().zip(&fake) {
            d_loss = (d_loss + ((mse_to(rs, 1.0)? + mse_to(fs, 0.0)?)? * (0.5 / n))?)?;
        }
        let d_val = finite_scalar(&d_loss, s, "translator discriminator loss")?;
        step(&mut d_opt, &d_loss)?;

        let real = net.discriminate(&src, &real_t)?;
        let fake = net.discriminate(&src, &fake_t)?;
        let mut adv = Tensor::zeros((), net.params.dtype(), &Device::Cpu)?;
        for (_, fs) in &fake {
            adv = (adv + (mse_to(fs, 1.0)? / n)?)?;
        }
        let fm = net.feature_matching(&real, &fake)?;
        let total = (&adv + (&fm * config.fm_weight)?)?;
        let adv_val = finite_scalar(&adv, s, "translator adversarial loss")?;
        let fm_val = finite_scalar(&fm, s, "translator feature-matching loss")?;
        let total_val = finite_scalar(&total, s, "translator generator loss")?;
        step(&mut g_opt, &total)?;

        let rec = TranslatorLogRecord { step: s, d_loss: d_val, adversarial: adv_val, feature_matching: fm_val, total: total_val };
        if let Some(w) = log.as_mut() {
            writeln!(w, "{}", serde_json::to_string(&rec)?).map_err(|e| Error::io("<training log>", e))?;
        }
        records.push(rec);
        net.steps_done += 1;
    }
    Ok((net.checkpoint()?, records))
}

/// Translates `sources` with a checkpointed translator.
pub fn translate(ckpt: &NetworkCheckpoint, sources: &[LabelMap]) -> Result<Vec<Target>> {
    let net = Translator::from_checkpoint(ckpt)?;
    sources.iter().map(|s| net.translate(s)).collect()
}

/// Scores for `argmax_decode` from a `(C, H, W)` tensor.
pub fn decode_scores(t: &Tensor) -> Result<LabelMap> {
    let (c, h, w) = t.dims3()?;
    let flat: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    argmax_decode(&flat, c, h, w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::label::ClassCode;
    use crate::nn::{gradient_check, relative_error};

    fn small(kind: OutputKind) -> TranslatorConfig {
        TranslatorConfig {
            output_kind: kind,
            base_channels: 4,
            disc_channels: 4,
            downsamples: 1,
            residual_blocks: 1,
            first_kernel: 3,
            discriminators: 2,
            disc_layers: 2,
            steps: 2,
            batch_size: 2,
            ..Default::default()
        }
    }

    fn map16(seed_value: u64) -> LabelMap {
        let mut rng = seed::rng(seed_value);
        let raw: Vec<u8> = (0..256).map(|_| rng.random_range(0..6u8)).collect();
        LabelMap::from_raw(16, 16, &raw).unwrap()
    }

    #[test]
    fn one_hot_small_example() {
        let m = LabelMap::from_raw(2, 2, &[0, 1, 2, 0]).unwrap();
        let g = one_hot(&m, 6).unwrap();
        assert_eq!(g.len(), 24);
        for p in 0..4 {
            assert_eq!((0..6).map(|k| g[k * 4 + p]).sum::<f32>(), 1.0);
        }
        assert_eq!(g[4 + 1], 1.0);
        assert_eq!(g[2 * 4 + 2], 1.0);
        assert!(matches!(one_hot(&m, 2), Err(Error::Codec(_))));
    }

    #[test]
    fn argmax_ties_go_to_lowest_code() {
        let scores = vec![0.5f32, 0.5, 0.5];
        let m = argmax_decode(&scores, 3, 1, 1).unwrap();
        assert_eq!(m.get(0, 0), ClassCode::Background);
        let scores = vec![0.1f32, 0.7, 0.7];
        assert_eq!(argmax_decode(&scores, 3, 1, 1).unwrap().get(0, 0), ClassCode::RightLung);
    }

    #[test]
    fn output_dims_follow_input_for_each_level_count() {
        for levels in [1, 2] {
            let cfg = TranslatorConfig { generator_levels: levels, ..small(OutputKind::Label) };
            let t = Translator::build(&cfg).unwrap();
            let out = t.translate(&map16(1)).unwrap();
            assert_eq!(out.dims(), (16, 16));
        }
    }

    #[test]
    fn channel_mismatch_is_a_shape_error() {
        let t = Translator::build(&small(OutputKind::Image)).unwrap();
        let x = Tensor::zeros((1, 3, 16, 16), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(t.generate(&x), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_fm_weight_leaves_adversarial_term() {
        let cfg = TranslatorConfig { fm_weight: 0.0, ..small(OutputKind::Label) };
        let maps: Vec<LabelMap> = (0..3).map(map16).collect();
        let targets: Vec<Target> = maps.iter().cloned().map(Target::Labels).collect();
        let (_, log) = train_translation(&maps, &targets, &cfg, None).unwrap();
        for r in &log {
            assert_eq!(r.total, r.adversarial);
            assert!(r.feature_matching.is_finite());
        }
    }

    #[test]
    fn rejects_empty_and_mismatched_pairs() {
        let cfg = small(OutputKind::Label);
        assert!(matches!(train_translation(&[], &[], &cfg, None), Err(Error::Config(_))));
        let m = map16(2);
        let bad = Target::Labels(LabelMap::background(8, 8).unwrap());
        assert!(matches!(train_translation(&[m], &[bad], &cfg, None), Err(Error::Shape(_))));
    }

    #[test]
    fn feature_matching_gradient_matches_finite_differences() {
        let t = Translator::build_with_dtype(&small(OutputKind::Image), DType::F64).unwrap();
        let src = one_hot_tensor(&[&map16(3), &map16(4)], 6, DType::F64).unwrap();
        let mut rng = seed::rng(11);
        let tgt: Vec<f64> = (0..2 * 256).map(|_| rng.random_range(-1.0..1.0)).collect();
        let tgt = Tensor::from_vec(tgt, (2, 1, 16, 16), &Device::Cpu).unwrap();
        let var = t.params().var("g.global.res0.a.weight").unwrap().clone();
        for index in [0usize, 13, 77] {
            let (a, n) = gradient_check(&var, index, 1e-6, || t.feature_matching_loss(&src, &tgt)).unwrap();
            assert!(relative_error(a, n) < 1e-3, "index {index}: analytic {a}, numeric {n}");
        }
    }
}
