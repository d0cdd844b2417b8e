//! Pre-generation augmentation: small rotations, small translations, and
//! image-only Gaussian noise.
//!
//! Order of operations: rotate about the image centre, translate, then (image
//! only) add noise and clamp to `[0, 1]`. Images are resampled bilinearly, labels
//! with nearest neighbour. Pixels that map outside the source frame become
//! intensity 0 / background.
//!
//! Noise scale: `noise_variance` is drawn from `[0.01, 0.03]`; multiplied by 255
//! it is the variance on the 0..255 intensity scale, so the variance applied in
//! the normalized domain is `noise_variance * 255 / 255^2 = noise_variance / 255`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::DatasetEntry;
use crate::error::{Error, Result};
use crate::label::{ClassCode, LabelMap};
use crate::raster::GrayImage;
use crate::seed;

pub const ROTATION_RANGE_DEG: (f64, f64) = (-2.0, 2.0);
pub const SHIFT_RANGE_FRAC: (f64, f64) = (-0.03, 0.03);
pub const NOISE_VARIANCE_RANGE: (f64, f64) = (0.01, 0.03);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub rotation_deg: f64,
    pub shift_y_frac: f64,
    pub shift_x_frac: f64,
    /// Variance factor; `noise_variance * 255` is the variance on the 0..255 scale.
    /// Zero disables noise.
    pub noise_variance: f64,
    /// Seeds the noise field.
    pub seed: u64,
}

impl AugmentParams {
    pub fn identity() -> Self {
        Self { rotation_deg: 0.0, shift_y_frac: 0.0, shift_x_frac: 0.0, noise_variance: 0.0, seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        let within = |v: f64, (lo, hi): (f64, f64)| v >= lo && v <= hi;
        if !within(self.rotation_deg, ROTATION_RANGE_DEG) {
            return Err(Error::Config(format!("rotation {}° outside [-2, 2]", self.rotation_deg)));
        }
        if !within(self.shift_y_frac, SHIFT_RANGE_FRAC) || !within(self.shift_x_frac, SHIFT_RANGE_FRAC) {
            return Err(Error::Config(format!(
                "shift ({}, {}) outside [-0.03, 0.03]",
                self.shift_y_frac, self.shift_x_frac
            )));
        }
        if !(self.noise_variance == 0.0 || within(self.noise_variance, NOISE_VARIANCE_RANGE)) {
            return Err(Error::Config(format!("noise variance {} outside [0.01, 0.03]", self.noise_variance)));
        }
        Ok(())
    }

    /// Standard deviation of the noise in the normalized `[0, 1]` domain.
    pub fn noise_std_normalized(&self) -> f64 {
        (self.noise_variance * 255.0 / (255.0 * 255.0)).sqrt()
    }
}

/// Draws every field uniformly over its closed interval.
pub fn sample_params(rng_seed: u64) -> AugmentParams {
    let mut rng = seed::rng(seed::derive(rng_seed, "augment-params"));
    AugmentParams {
        rotation_deg: rng.random_range(ROTATION_RANGE_DEG.0..=ROTATION_RANGE_DEG.1),
        shift_y_frac: rng.random_range(SHIFT_RANGE_FRAC.0..=SHIFT_RANGE_FRAC.1),
        shift_x_frac: rng.random_range(SHIFT_RANGE_FRAC.0..=SHIFT_RANGE_FRAC.1),
        noise_variance: rng.random_range(NOISE_VARIANCE_RANGE.0..=NOISE_VARIANCE_RANGE.1),
        seed: rng.random(),
    }
}

/// Inverse geometric map: output pixel -> source coordinate.
struct InverseWarp {
    cos: f64,
    sin: f64,
    cy: f64,
    cx: f64,
    ty: f64,
    tx: f64,
}

impl InverseWarp {
    fn new(h: usize, w: usize, p: &AugmentParams) -> Self {
        let theta = p.rotation_deg.to_radians();
        Self {
            cos: theta.cos(),
            sin: theta.sin(),
            cy: (h as f64 - 1.0) / 2.0,
            cx: (w as f64 - 1.0) / 2.0,
            ty: p.shift_y_frac * h as f64,
            tx: p.shift_x_frac * w as f64,
        }
    }

    /// Forward is `q = R (p - c) + c + t`; this returns `p = R^T (q - t - c) + c`.
    fn source(&self, r: usize, c: usize) -> (f64, f64) {
        let dy = r as f64 - self.ty - self.cy;
        let dx = c as f64 - self.tx - self.cx;
        let sy = self.cos * dy - self.sin * dx + self.cy;
        let sx = self.sin * dy + self.cos * dx + self.cx;
        (sy, sx)
    }
}

fn bilinear(img: &GrayImage, y: f64, x: f64) -> f32 {
    let (h, w) = img.dims();
    const EPS: f64 = 1e-9;
    if y < -EPS || x < -EPS || y > h as f64 - 1.0 + EPS || x > w as f64 - 1.0 + EPS {
        return 0.0;
    }
    let y = y.clamp(0.0, h as f64 - 1.0);
    let x = x.clamp(0.0, w as f64 - 1.0);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let v00 = img.get(y0, x0) as f64;
    let v01 = img.get(y0, x1) as f64;
    let v10 = img.get(y1, x0) as f64;
    let v11 = img.get(y1, x1) as f64;
    let top = v00 + (v01 - v00) * fx;
    let bottom = v10 + (v11 - v10) * fx;
    (top + (bottom - top) * fy) as f32
}

fn nearest(map: &LabelMap, y: f64, x: f64) -> ClassCode {
    let (h, w) = map.dims();
    let (ry, rx) = (y.round(), x.round());
    if ry < 0.0 || rx < 0.0 || ry > h as f64 - 1.0 || rx > w as f64 - 1.0 {
        ClassCode::Background
    } else {
        map.get(ry as usize, rx as usize)
    }
}

/// Applies one augmentation to an image/label pair.
pub fn apply(image: &GrayImage, labels: &LabelMap, p: &AugmentParams) -> Result<(GrayImage, LabelMap)> {
    if image.dims() != labels.dims() {
        return Err(Error::Shape(format!("image {:?} vs labels {:?}", image.dims(), labels.dims())));
    }
    p.validate()?;
    let (h, w) = image.dims();
    let warp = InverseWarp::new(h, w, p);
    let mut out_img = Vec::with_capacity(h * w);
    let mut out_lab = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let (sy, sx) = warp.source(r, c);
            out_img.push(bilinear(image, sy, sx));
            out_lab.push(nearest(labels, sy, sx));
        }
    }
    if p.noise_variance > 0.0 {
        let normal = Normal::new(0.0, p.noise_std_normalized()).map_err(|e| Error::Config(e.to_string()))?;
        let mut rng = seed::rng(seed::derive(p.seed, "augment-noise"));
        for v in &mut out_img {
            *v += normal.sample(&mut rng) as f32;
        }
    }
    Ok((GrayImage::from_clamped(h, w, out_img)?, LabelMap::new(h, w, out_lab)?))
}

/// Expands each entry into `variants` items: the original followed by
/// `variants - 1` augmented copies with ids `<id>_aug<k>`. Per-item seeds are
/// derived from `(seed, entry id, k)`, so the result does not depend on scheduling.
pub fn augment_dataset(entries: &[DatasetEntry], variants: usize, seed: u64) -> Result<Vec<DatasetEntry>> {
    if variants == 0 {
        return Err(Error::Config("variants must be >= 1".into()));
    }
    let nested: Vec<Vec<DatasetEntry>> = entries
        .par_iter()
        .map(|e| {
            let mut out = Vec::with_capacity(variants);
            out.push(e.clone());
            for k in 1..variants {
                let item_seed = seed::derive_indexed(seed, &e.id, k as u64);
                let params = sample_params(item_seed);
                let (image, labels) = apply(&e.image, &e.labels, &params)?;
                out.push(DatasetEntry::new(format!("{}_aug{k}", e.id), image, labels, e.split)?);
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok(nested.into_iter().flatten().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{make_phantom, PhantomConfig};

    fn phantom() -> DatasetEntry {
        make_phantom(&PhantomConfig { seed: 11, size: 64, ..Default::default() }, 0).unwrap()
    }

    #[test]
    fn sampling_is_deterministic() {
        assert_eq!(sample_params(42), sample_params(42));
        assert_ne!(sample_params(42), sample_params(43));
    }

    #[test]
    fn identity_params_are_identity() {
        let e = phantom();
        let (i, l) = apply(&e.image, &e.labels, &AugmentParams::identity()).unwrap();
        assert_eq!(i, e.image);
        assert_eq!(l, e.labels);
    }

    #[test]
    fn noise_only_leaves_labels_untouched() {
        let e = phantom();
        let p = AugmentParams { noise_variance: 0.03, seed: 9, ..AugmentParams::identity() };
        let (i, l) = apply(&e.image, &e.labels, &p).unwrap();
        assert_eq!(l, e.labels);
        assert_ne!(i, e.image);
    }

    #[test]
    fn shift_moves_content_and_leaves_zero_strip() {
        // one-hot oracle: a single bright column at x = 40 in a 100-wide image
        let (h, w) = (10, 100);
        let mut data = vec![0.0f32; h * w];
        for r in 0..h {
            data[r * w + 40] = 1.0;
        }
        let img = GrayImage::new(h, w, data).unwrap();
        let mut labels = LabelMap::background(h, w).unwrap();
        for r in 0..h {
            for c in 0..w {
                labels.set(r, c, ClassCode::Heart);
            }
        }
        let p = AugmentParams { shift_x_frac: 0.03, ..AugmentParams::identity() };
        let (i, l) = apply(&img, &labels, &p).unwrap();
        for r in 0..h {
            for c in 0..w {
                let expected = if c == 43 { 1.0 } else { 0.0 };
                assert!((i.get(r, c) - expected).abs() < 1e-6, "({r},{c}) = {}", i.get(r, c));
                let code = if c < 3 { ClassCode::Background } else { ClassCode::Heart };
                assert_eq!(l.get(r, c), code);
            }
        }
    }

    #[test]
    fn constant_image_stays_constant_inside() {
        let img = GrayImage::filled(64, 64, 0.6).unwrap();
        let labels = LabelMap::background(64, 64).unwrap();
        let p = AugmentParams { rotation_deg: 1.7, shift_y_frac: -0.02, shift_x_frac: 0.025, ..AugmentParams::identity() };
        let (i, _) = apply(&img, &labels, &p).unwrap();
        for r in 8..56 {
            for c in 8..56 {
                assert!((i.get(r, c) - 0.6).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn rejects_shape_mismatch_and_bad_params() {
        let img = GrayImage::filled(8, 8, 0.0).unwrap();
        let lab = LabelMap::background(8, 9).unwrap();
        assert!(matches!(apply(&img, &lab, &AugmentParams::identity()), Err(Error::Shape(_))));
        let lab = LabelMap::background(8, 8).unwrap();
        let bad = AugmentParams { rotation_deg: 5.0, ..AugmentParams::identity() };
        assert!(matches!(apply(&img, &lab, &bad), Err(Error::Config(_))));
    }

    #[test]
    fn dataset_expansion_counts_and_ids() {
        let e = phantom();
        let out = augment_dataset(std::slice::from_ref(&e), 6, 3).unwrap();
        assert_eq!(out.len(), 6);
        assert_eq!(out[0], e);
        assert_eq!(out[5].id, format!("{}_aug5", e.id));
        assert_eq!(out, augment_dataset(&[e], 6, 3).unwrap());
    }
}
