//! Network building blocks on top of `candle` tensors: a deterministic parameter
//! store, convolution/linear layers, normalizations, checkpoints and optimizers.
//!
//! Parameters are initialized from a seeded ChaCha stream (never from candle's
//! global RNG), so every build is reproducible from its config seed.

pub mod checkpoint;
pub mod gan;
mod ops;
pub mod segmenter;
pub mod translator;

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::raster::Grid;
use crate::seed;

pub use checkpoint::NetworkCheckpoint;

/// Named trainable tensors, created in a reproducible order.
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self { vars: BTreeMap::new(), rng: seed::rng(seed), dtype, device: Device::Cpu }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn insert(&mut self, name: &str, t: Tensor) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(Error::State(format!("parameter `{name}` defined twice")));
        }
        let v = Var::from_tensor(&t.to_dtype(self.dtype)?)?;
        let out = v.as_tensor().clone();
        self.vars.insert(name.to_string(), v);
        Ok(out)
    }

    /// Gaussian parameter with the given standard deviation.
    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                z * std
            })
            .collect();
        let t = Tensor::from_vec(data, shape, &self.device)?;
        self.insert(name, t)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Tensor> {
        let t = (Tensor::ones(shape, DType::F64, &self.device)? * value)?;
        self.insert(name, t)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    /// Vars whose names start with `prefix`.
    pub fn vars_with_prefix(&self, prefix: &str) -> Vec<Var> {
        self.vars.iter().filter(|(k, _)| k.starts_with(prefix)).map(|(_, v)| v.clone()).collect()
    }

    pub fn var(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn param_count(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn tensors(&self) -> BTreeMap<String, Tensor> {
        self.vars.iter().map(|(k, v)| (k.clone(), v.as_tensor().clone())).collect()
    }

    /// Overwrites every parameter from `tensors`; shapes and names must match exactly.
    pub fn load(&self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        if tensors.len() != self.vars.len() {
            return Err(Error::State(format!(
                "checkpoint holds {} tensors, network has {}",
                tensors.len(),
                self.vars.len()
            )));
        }
        for (name, var) in &self.vars {
            let src = tensors
                .get(name)
                .ok_or_else(|| Error::State(format!("checkpoint lacks parameter `{name}`")))?;
            if src.dims() != var.dims() {
                return Err(Error::State(format!(
                    "parameter `{name}`: checkpoint shape {:?}, network shape {:?}",
                    src.dims(),
                    var.dims()
                )));
            }
            var.set(&src.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConvOpts {
    pub dilation: usize,
    /// 1 or 2.
    pub stride: usize,
    pub bias: bool,
    /// Runtime He scaling of N(0, 1) weights, as used by progressive GANs.
    pub equalized: bool,
}

impl Default for ConvOpts {
    fn default() -> Self {
        Self { dilation: 1, stride: 1, bias: true, equalized: false }
    }
}

/// Square, odd-kernel, "same"-padded 2-D convolution.
///
/// Implemented as patch extraction followed by one matmul; on CPU both passes
/// are several times faster than the direct kernel. Stride 2 keeps every other
/// output position.
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    kernel: usize,
    opts: ConvOpts,
    gain: f64,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Conv2d {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        opts: ConvOpts,
    ) -> Result<Self> {
        if kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("conv `{name}`: kernel must be odd, got {kernel}")));
        }
        if !(opts.stride == 1 || opts.stride == 2) {
            return Err(Error::Config(format!("conv `{name}`: stride must be 1 or 2")));
        }
        let fan_in = (in_channels * kernel * kernel) as f64;
        let he = (2.0 / fan_in).sqrt();
        let (std, gain) = if opts.equalized { (1.0, he) } else { (he, 1.0) };
        let weight = ps.normal(&format!("{name}.weight"), &[out_channels, in_channels, kernel, kernel], std)?;
        let bias = if opts.bias { Some(ps.constant(&format!("{name}.bias"), &[out_channels], 0.0)?) } else { None };
        Ok(Self { weight, bias, kernel, opts, gain, in_channels, out_channels })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        if c != self.in_channels {
            return Err(Error::Shape(format!("conv expects {} channels, got {c}", self.in_channels)));
        }
        let k = self.kernel;
        let weight = if self.gain != 1.0 { (&self.weight * self.gain)? } else { self.weight.clone() };
        let weight = weight.reshape((self.out_channels, c * k * k))?;
        let patches = ops::Patches {
            channels: c,
            height: h,
            width: w,
            kernel: k,
            dilation: self.opts.dilation,
            stride: self.opts.stride,
        };
        let (oh, ow) = patches.out_dims();
        let cols = if k == 1 && self.opts.stride == 1 {
            x.reshape((n, c, h * w))?
        } else {
            x.contiguous()?.apply_op1(ops::Im2Col(patches))?
        };
        let y = weight.broadcast_matmul(&cols)?.reshape((n, self.out_channels, oh, ow))?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&b.reshape((1, self.out_channels, 1, 1))?)?),
            None => Ok(y),
        }
    }
}

/// Fully connected layer on `(batch, features)` inputs.
#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
    gain: f64,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        in_features: usize,
        out_features: usize,
        equalized: bool,
        gain_factor: f64,
    ) -> Result<Self> {
        let he = gain_factor * (1.0 / in_features as f64).sqrt();
        let (std, gain) = if equalized { (1.0, he) } else { (he, 1.0) };
        let weight = ps.normal(&format!("{name}.weight"), &[out_features, in_features], std)?;
        let bias = ps.constant(&format!("{name}.bias"), &[out_features], 0.0)?;
        Ok(Self { weight, bias, gain, in_features, out_features })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let w = if self.gain != 1.0 { (&self.weight * self.gain)? } else { self.weight.clone() };
        Ok(x.matmul(&w.t()?)?.broadcast_add(&self.bias)?)
    }
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(candle_nn::ops::leaky_relu(x, slope)?)
}

/// Normalizes each pixel's feature vector to unit RMS.
pub fn pixel_norm(x: &Tensor) -> Result<Tensor> {
    let rms = (x.sqr()?.mean_keepdim(1)? + 1e-8)?.sqrt()?;
    Ok(x.broadcast_div(&rms)?)
}

/// Per-sample, per-channel normalization over the spatial dims (no affine).
pub fn instance_norm(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let flat = x.reshape((n, c, h * w))?;
    let mean = flat.mean_keepdim(D::Minus1)?;
    let centered = flat.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let out = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
    Ok(out.reshape((n, c, h, w))?)
}

/// Group normalization with learned per-channel scale and shift.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    groups: usize,
    gamma: Tensor,
    beta: Tensor,
}

impl GroupNorm {
    pub fn new(ps: &mut ParamStore, name: &str, channels: usize, groups: usize) -> Result<Self> {
        let groups = groups.min(channels).max(1);
        if !channels.is_multiple_of(groups) {
            return Err(Error::Config(format!("group norm `{name}`: {channels} channels not divisible by {groups}")));
        }
        Ok(Self {
            groups,
            gamma: ps.constant(&format!("{name}.gamma"), &[channels], 1.0)?,
            beta: ps.constant(&format!("{name}.beta"), &[channels], 0.0)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let flat = x.reshape((n, self.groups, (c / self.groups) * h * w))?;
        let mean = flat.mean_keepdim(D::Minus1)?;
        let centered = flat.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?.reshape((n, c, h, w))?;
        Ok(normed
            .broadcast_mul(&self.gamma.reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.beta.reshape((1, c, 1, 1))?)?)
    }
}

/// `log(1 + exp(x))`, computed stably.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    // max(x, 0) + log(1 + exp(-|x|))
    let relu = x.relu()?;
    let tail = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((relu + tail)?)
}

/// Nearest-neighbour upsampling by integer factors.
pub fn upsample_by(x: &Tensor, fh: usize, fw: usize) -> Result<Tensor> {
    if (fh, fw) == (1, 1) {
        return Ok(x.clone());
    }
    Ok(x.contiguous()?.apply_op1(ops::Upsample { fh, fw })?)
}

/// Average pooling over non-overlapping `fh x fw` blocks.
pub fn avg_pool_by(x: &Tensor, fh: usize, fw: usize) -> Result<Tensor> {
    if (fh, fw) == (1, 1) {
        return Ok(x.clone());
    }
    let (n, c, h, w) = x.dims4()?;
    if h % fh != 0 || w % fw != 0 {
        return Err(Error::Shape(format!("cannot pool {h}x{w} by {fh}x{fw}")));
    }
    Ok(x.reshape((n, c, h / fh, fh, w / fw, fw))?.mean(5)?.mean(3)?)
}

pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    upsample_by(x, 2, 2)
}

pub fn downsample2x(x: &Tensor) -> Result<Tensor> {
    avg_pool_by(x, 2, 2)
}

/// Stacks grids of identical shape into an `(n, c, h, w)` tensor.
pub fn grids_to_tensor(grids: &[&Grid], dtype: DType) -> Result<Tensor> {
    let first = grids.first().ok_or_else(|| Error::Config("empty batch".into()))?;
    let (c, h, w) = (first.channels, first.height, first.width);
    let mut data = Vec::with_capacity(grids.len() * c * h * w);
    for g in grids {
        if (g.channels, g.height, g.width) != (c, h, w) {
            return Err(Error::Shape(format!(
                "batch mixes {}x{}x{} with {}x{}x{}",
                c, h, w, g.channels, g.height, g.width
            )));
        }
        data.extend_from_slice(&g.data);
    }
    Ok(Tensor::from_vec(data, (grids.len(), c, h, w), &Device::Cpu)?.to_dtype(dtype)?)
}

pub fn tensor_to_grids(t: &Tensor) -> Result<Vec<Grid>> {
    let (n, c, h, w) = t.dims4()?;
    let flat: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    flat.chunks(c * h * w).take(n).map(|chunk| Grid::new(c, h, w, chunk.to_vec())).collect()
}

/// Scalar value of a loss, failing on NaN/inf.
pub fn finite_scalar(loss: &Tensor, step: usize, what: &str) -> Result<f64> {
    let v = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if !v.is_finite() {
        return Err(Error::TrainingDiverged { step, what: format!("{what} = {v}") });
    }
    Ok(v)
}

/// Adaptive-moment optimizer (no weight decay).
pub fn adam(vars: Vec<Var>, lr: f64, beta1: f64, beta2: f64) -> Result<AdamW> {
    Ok(AdamW::new(vars, ParamsAdamW { lr, beta1, beta2, eps: 1e-8, weight_decay: 0.0 })?)
}

pub fn step(opt: &mut AdamW, loss: &Tensor) -> Result<()> {
    Ok(opt.backward_step(loss)?)
}

/// Value of one scalar element of a parameter, and a setter, for finite-difference checks.
pub fn param_element(var: &Var, index: usize) -> Result<f64> {
    let flat: Vec<f64> = var.as_tensor().to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    Ok(flat[index])
}

pub fn set_param_element(var: &Var, index: usize, value: f64) -> Result<()> {
    let dims = var.dims().to_vec();
    let mut flat: Vec<f64> = var.as_tensor().to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    flat[index] = value;
    let t = Tensor::from_vec(flat, dims, &Device::Cpu)?.to_dtype(var.dtype())?;
    Ok(var.set(&t)?)
}

pub fn grad_element(grads: &candle_core::backprop::GradStore, var: &Var, index: usize) -> Result<f64> {
    let g = grads
        .get(var.as_tensor())
        .ok_or_else(|| Error::State("parameter received no gradient".into()))?;
    let flat: Vec<f64> = g.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    Ok(flat[index])
}

/// Central finite-difference estimate of `d loss / d param[index]` next to the
/// analytic gradient. Returns `(analytic, numeric)`.
pub fn gradient_check(
    var: &Var,
    index: usize,
    eps: f64,
    mut loss: impl FnMut() -> Result<Tensor>,
) -> Result<(f64, f64)> {
    let l = loss()?;
    let grads = l.backward()?;
    let analytic = grad_element(&grads, var, index)?;
    let orig = param_element(var, index)?;
    set_param_element(var, index, orig + eps)?;
    let plus = loss()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    set_param_element(var, index, orig - eps)?;
    let minus = loss()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    set_param_element(var, index, orig)?;
    Ok((analytic, (plus - minus) / (2.0 * eps)))
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stacked_conv_matches_direct_conv() {
        let mut ps = ParamStore::new(3, DType::F64);
        for (dil, stride) in [(1, 1), (2, 1), (1, 2), (3, 1)] {
            let conv = Conv2d::new(
                &mut ps,
                &format!("c{dil}{stride}"),
                3,
                4,
                3,
                ConvOpts { dilation: dil, stride, ..Default::default() },
            )
            .unwrap();
            let x = Tensor::from_vec((0..2 * 3 * 8 * 8).map(|i| ((i * 37) % 11) as f64 / 7.0).collect::<Vec<_>>(), (2, 3, 8, 8), &Device::Cpu).unwrap();
            let ours = conv.forward(&x).unwrap();
            let direct = x
                .conv2d(&conv.weight, dil, stride, dil, 1)
                .unwrap()
                .broadcast_add(&conv.bias.as_ref().unwrap().reshape((1, 4, 1, 1)).unwrap())
                .unwrap();
            assert_eq!(ours.dims(), direct.dims());
            let diff: f64 = (ours - direct).unwrap().abs().unwrap().max_all().unwrap().to_scalar().unwrap();
            assert!(diff < 1e-12, "dil {dil} stride {stride}: {diff}");
        }
    }

    #[test]
    fn resampling_matches_candle() {
        let x = Tensor::from_vec((0..2 * 3 * 4 * 4).map(|i| i as f64).collect::<Vec<_>>(), (2, 3, 4, 4), &Device::Cpu).unwrap();
        let a: Vec<f64> = upsample_by(&x, 2, 2).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let b: Vec<f64> = x.upsample_nearest2d(8, 8).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(a, b);
        let a: Vec<f64> = avg_pool_by(&x, 2, 2).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let b: Vec<f64> = x.avg_pool2d(2).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn param_store_is_seeded() {
        let mut a = ParamStore::new(9, DType::F32);
        let mut b = ParamStore::new(9, DType::F32);
        let ta: Vec<f32> = a.normal("w", &[16], 1.0).unwrap().to_vec1().unwrap();
        let tb: Vec<f32> = b.normal("w", &[16], 1.0).unwrap().to_vec1().unwrap();
        assert_eq!(ta, tb);
        assert!(a.normal("w", &[1], 1.0).is_err());
    }

    #[test]
    fn softplus_is_stable() {
        let x = Tensor::new(&[-100.0f64, 0.0, 100.0], &Device::Cpu).unwrap();
        let y: Vec<f64> = softplus(&x).unwrap().to_vec1().unwrap();
        assert!(y[0] >= 0.0 && y[0] < 1e-40);
        assert!((y[1] - 2f64.ln()).abs() < 1e-15);
        assert!((y[2] - 100.0).abs() < 1e-12);
    }

    #[test]
    fn non_finite_loss_is_reported() {
        let t = Tensor::new(f32::NAN, &Device::Cpu).unwrap();
        assert!(matches!(finite_scalar(&t, 12, "d"), Err(Error::TrainingDiverged { step: 12, .. })));
    }
}
