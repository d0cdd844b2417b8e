//! Real dataset ingestion and the procedural phantom thorax generator.
//!
//! On-disk layout (shared by ingestion, phantom export, augmentation and generation):
//!
//! ```text
//! <root>/images/<id>.png   grayscale radiograph (8 or 16 bit)
//! <root>/masks/<id>.png    8-bit mask of palette stored values
//! <root>/split.txt         one `<id>\t<train|test>` line per entry
//! ```

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label::{self, ClassCode, LabelMap, Palette};
use crate::raster::GrayImage;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Ingestion(format!("unknown split `{other}`"))),
        }
    }
}

/// An image with its organ labels.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetEntry {
    pub id: String,
    pub image: GrayImage,
    pub labels: LabelMap,
    pub split: Split,
}

impl DatasetEntry {
    pub fn new(id: impl Into<String>, image: GrayImage, labels: LabelMap, split: Split) -> Result<Self> {
        let id = id.into();
        if image.dims() != labels.dims() {
            return Err(Error::Ingestion(format!(
                "entry `{id}`: image {:?} and mask {:?} differ in size",
                image.dims(),
                labels.dims()
            )));
        }
        Ok(Self { id, image, labels, split })
    }
}

/// Ingestion knobs.
#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    /// Effective bit depth of the source intensities (e.g. 12 for JSRT stored in
    /// 16-bit containers). `None` uses the container depth.
    pub intensity_bits: Option<u8>,
    pub palette: Option<Palette>,
}

fn read_split(path: &Path) -> Result<Vec<(String, Split)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (id, split) = line.split_once('\t').ok_or_else(|| {
            Error::Ingestion(format!("{}:{}: expected `<id>\\t<train|test>`", path.display(), lineno + 1))
        })?;
        if !seen.insert(id.to_string()) {
            return Err(Error::Ingestion(format!("{}: duplicate id `{id}`", path.display())));
        }
        out.push((id.to_string(), split.trim().parse()?));
    }
    Ok(out)
}

/// Loads and validates every entry listed in the split file. `split_file`
/// defaults to `<root>/split.txt`. Entries come back sorted by id.
pub fn load_dataset(root: &Path, split_file: Option<&Path>, opts: &LoadOptions) -> Result<Vec<DatasetEntry>> {
    let split_path = split_file.map(Path::to_path_buf).unwrap_or_else(|| root.join("split.txt"));
    if !split_path.exists() {
        return Err(Error::Ingestion(format!("no split file at {}", split_path.display())));
    }
    let palette = opts.palette.clone().unwrap_or_default();
    let mut ids = read_split(&split_path)?;
    if ids.is_empty() {
        return Err(Error::Ingestion(format!("{} lists no entries", root.display())));
    }
    ids.sort();
    ids.par_iter()
        .map(|(id, split)| {
            let img_path = root.join("images").join(format!("{id}.png"));
            let mask_path = root.join("masks").join(format!("{id}.png"));
            if !img_path.exists() {
                return Err(Error::Ingestion(format!("entry `{id}`: missing image {}", img_path.display())));
            }
            if !mask_path.exists() {
                return Err(Error::Ingestion(format!("entry `{id}`: missing mask {}", mask_path.display())));
            }
            let image = GrayImage::load(&img_path, opts.intensity_bits)?;
            let labels = label::load_map(&mask_path, &palette)?;
            DatasetEntry::new(id.clone(), image, labels, *split)
        })
        .collect()
}

/// Writes entries in the shared layout. Existing files with the same ids are overwritten.
pub fn save_dataset(entries: &[DatasetEntry], root: &Path, palette: &Palette) -> Result<()> {
    let images = root.join("images");
    let masks = root.join("masks");
    for dir in [&images, &masks] {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut seen = BTreeSet::new();
    for e in entries {
        if !seen.insert(e.id.as_str()) {
            return Err(Error::Ingestion(format!("duplicate id `{}`", e.id)));
        }
    }
    entries.par_iter().try_for_each(|e| -> Result<()> {
        e.image.save_png(&images.join(format!("{}.png", e.id)))?;
        label::save_map(&e.labels, palette, &masks.join(format!("{}.png", e.id)))
    })?;
    let split: String = entries.iter().map(|e| format!("{}\t{}\n", e.id, e.split)).collect();
    let split_path = root.join("split.txt");
    std::fs::write(&split_path, split).map_err(|e| Error::io(split_path, e))
}

pub fn split_counts(entries: &[DatasetEntry]) -> (usize, usize) {
    let train = entries.iter().filter(|e| e.split == Split::Train).count();
    (train, entries.len() - train)
}

pub fn of_split(entries: &[DatasetEntry], split: Split) -> Vec<DatasetEntry> {
    entries.iter().filter(|e| e.split == split).cloned().collect()
}

/// Phantom thorax generator settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomConfig {
    pub seed: u64,
    /// Square side in pixels, a power of two >= 32.
    pub size: usize,
    pub count: usize,
    /// Relative jitter of organ radii.
    pub shape_variation: f64,
    /// Jitter of organ centres, as a fraction of the image side.
    pub position_variation: f64,
    /// Standard deviation of the additive intensity noise.
    pub noise_std: f64,
    /// Entries with index >= `test_from` are tagged as test split.
    pub test_from: Option<usize>,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            size: 128,
            count: 1,
            shape_variation: 0.08,
            position_variation: 0.02,
            noise_std: 0.02,
            test_from: None,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size < 32 || !self.size.is_power_of_two() {
            return Err(Error::Config(format!("phantom size must be a power of two >= 32, got {}", self.size)));
        }
        if self.count == 0 {
            return Err(Error::Config("phantom count must be >= 1".into()));
        }
        if !(0.0..0.5).contains(&self.shape_variation) || !(0.0..0.1).contains(&self.position_variation) {
            return Err(Error::Config("phantom variation amplitudes out of range".into()));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config("phantom noise_std must be finite and >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
}

impl Ellipse {
    /// Normalized radial distance, < 1 inside.
    fn rho(&self, y: f64, x: f64) -> f64 {
        (((y - self.cy) / self.ry).powi(2) + ((x - self.cx) / self.rx).powi(2)).sqrt()
    }
}

#[derive(Debug, Clone, Copy)]
struct Bar {
    y0: f64,
    x0: f64,
    y1: f64,
    x1: f64,
    half_thickness: f64,
}

impl Bar {
    fn distance(&self, y: f64, x: f64) -> f64 {
        let (dy, dx) = (self.y1 - self.y0, self.x1 - self.x0);
        let t = (((y - self.y0) * dy + (x - self.x0) * dx) / (dy * dy + dx * dx)).clamp(0.0, 1.0);
        ((y - self.y0 - t * dy).powi(2) + (x - self.x0 - t * dx).powi(2)).sqrt()
    }
}

fn smoothstep(edge0: f64, edge1: f64, x: f64) -> f64 {
    let t = ((x - edge0) / (edge1 - edge0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Generates the `index`-th phantom; a pure function of `(cfg, index)`.
pub fn make_phantom(cfg: &PhantomConfig, index: usize) -> Result<DatasetEntry> {
    cfg.validate()?;
    let mut rng = seed::rng(seed::derive_indexed(cfg.seed, "phantom", index as u64));
    let n = cfg.size;
    let s = n as f64;
    let sv = cfg.shape_variation;
    let pv = cfg.position_variation;
    let mut jit = |amp: f64| if amp > 0.0 { rng.random_range(-amp..=amp) } else { 0.0 };

    // Normalized coordinates: patient's right lung sits on the image's left.
    let lift = jit(pv);
    let right_lung = Ellipse {
        cy: 0.53 + lift + jit(pv),
        cx: 0.30 + jit(pv),
        ry: 0.25 * (1.0 + jit(sv)),
        rx: 0.125 * (1.0 + jit(sv)),
    };
    let left_lung = Ellipse {
        cy: 0.54 + lift + jit(pv),
        cx: 0.70 + jit(pv),
        ry: 0.24 * (1.0 + jit(sv)),
        rx: 0.115 * (1.0 + jit(sv)),
    };
    let heart = Ellipse {
        cy: 0.64 + jit(pv),
        cx: 0.54 + jit(pv),
        ry: 0.12 * (1.0 + jit(sv)),
        rx: 0.12 * (1.0 + jit(sv)),
    };
    let body = Ellipse { cy: 0.55, cx: 0.5, ry: 0.5, rx: 0.46 * (1.0 + jit(sv / 2.0)) };
    let half_thickness = (0.018 * (1.0 + jit(sv))).max(1.2 / s);
    let tilt = jit(0.02);
    let right_clav = Bar {
        y0: 0.19 + tilt + jit(pv),
        x0: 0.12 + jit(pv),
        y1: 0.25 + tilt + jit(pv),
        x1: 0.44 + jit(pv),
        half_thickness,
    };
    let left_clav = Bar {
        y0: 0.25 - tilt + jit(pv),
        x0: 0.56 + jit(pv),
        y1: 0.19 - tilt + jit(pv),
        x1: 0.88 + jit(pv),
        half_thickness,
    };
    let texture_phase = jit(std::f64::consts::PI);

    let mut codes = vec![ClassCode::Background; n * n];
    let mut inten = vec![0f64; n * n];
    let edge = 1.5 / s;
    for r in 0..n {
        for c in 0..n {
            let (y, x) = ((r as f64 + 0.5) / s, (c as f64 + 0.5) / s);
            let rl = right_lung.rho(y, x);
            let ll = left_lung.rho(y, x);
            let ht = heart.rho(y, x);
            let code = if right_clav.distance(y, x) <= right_clav.half_thickness {
                ClassCode::RightClavicle
            } else if left_clav.distance(y, x) <= left_clav.half_thickness {
                ClassCode::LeftClavicle
            } else if ht < 1.0 {
                ClassCode::Heart
            } else if rl < 1.0 {
                ClassCode::RightLung
            } else if ll < 1.0 {
                ClassCode::LeftLung
            } else {
                ClassCode::Background
            };
            codes[r * n + c] = code;

            // Smooth intensity field: soft tissue body, dark lungs, bright mediastinum.
            let in_body = 1.0 - smoothstep(1.0 - 4.0 * edge, 1.0, body.rho(y, x));
            let mut v = 0.04 + 0.48 * in_body;
            let spine = (-((x - 0.5) / 0.05).powi(2)).exp() * in_body;
            v += 0.22 * spine;
            let lung_w = (1.0 - smoothstep(1.0 - 3.0 * edge, 1.0 + edge, rl.min(ll))) * in_body;
            let texture = 0.04 * ((y * 37.0 + texture_phase).sin() * (x * 23.0).cos());
            v = v * (1.0 - lung_w) + (0.16 + 0.10 * y + texture) * lung_w;
            let heart_w = 1.0 - smoothstep(1.0 - 3.0 * edge, 1.0 + edge, ht);
            v = v * (1.0 - heart_w) + 0.74 * heart_w;
            let clav_d = right_clav.distance(y, x).min(left_clav.distance(y, x));
            let clav_w = 1.0 - smoothstep(half_thickness - edge, half_thickness + edge, clav_d);
            v = v * (1.0 - clav_w) + 0.88 * clav_w;
            inten[r * n + c] = v;
        }
    }
    if cfg.noise_std > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::Config(e.to_string()))?;
        for v in &mut inten {
            *v += normal.sample(&mut rng);
        }
    }
    let data: Vec<f32> = inten.iter().map(|v| v.clamp(0.0, 1.0) as f32).collect();
    let split = match cfg.test_from {
        Some(t) if index >= t => Split::Test,
        _ => Split::Train,
    };
    DatasetEntry::new(
        format!("phantom_{:05}", index),
        GrayImage::new(n, n, data)?,
        LabelMap::new(n, n, codes)?,
        split,
    )
}

/// Generates `cfg.count` phantoms (indices `0..count`).
pub fn make_phantoms(cfg: &PhantomConfig) -> Result<Vec<DatasetEntry>> {
    cfg.validate()?;
    (0..cfg.count).into_par_iter().map(|i| make_phantom(cfg, i)).collect()
}

/// `floor(len * fraction)` with a guard against binary rounding (e.g. `0.29 * 100`).
pub fn fraction_count(len: usize, fraction: f64) -> usize {
    (len as f64 * fraction + 1e-9).floor() as usize
}

/// Seeded uniform choice of `floor(len * fraction)` entries without replacement,
/// returned in their original order.
pub fn subsample_train(entries: &[DatasetEntry], fraction: f64, seed: u64) -> Result<Vec<DatasetEntry>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("fraction must lie in (0, 1], got {fraction}")));
    }
    subsample_count(entries, fraction_count(entries.len(), fraction), seed)
}

/// Seeded uniform choice of exactly `count` entries, original order kept.
pub fn subsample_count(entries: &[DatasetEntry], count: usize, seed: u64) -> Result<Vec<DatasetEntry>> {
    if count == 0 {
        return Err(Error::Config(format!("subsample of {} entries selects nothing", entries.len())));
    }
    if count > entries.len() {
        return Err(Error::Config(format!("cannot select {count} of {} entries", entries.len())));
    }
    if count == entries.len() {
        return Ok(entries.to_vec());
    }
    let mut rng = seed::rng(seed::derive(seed, "subsample"));
    let mut picked = rand::seq::index::sample(&mut rng, entries.len(), count).into_vec();
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| entries[i].clone()).collect())
}

pub fn image_path(root: &Path, id: &str) -> PathBuf {
    root.join("images").join(format!("{id}.png"))
}

pub fn mask_path(root: &Path, id: &str) -> PathBuf {
    root.join("masks").join(format!("{id}.png"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entries(n: usize) -> Vec<DatasetEntry> {
        (0..n)
            .map(|i| {
                DatasetEntry::new(
                    format!("e{i:03}"),
                    GrayImage::filled(2, 2, 0.0).unwrap(),
                    LabelMap::background(2, 2).unwrap(),
                    Split::Train,
                )
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn phantom_is_deterministic() {
        let cfg = PhantomConfig { seed: 7, size: 128, count: 1, ..Default::default() };
        let a = make_phantoms(&cfg).unwrap();
        let b = make_phantoms(&cfg).unwrap();
        assert_eq!(a, b);
        let pa = a[0].image.to_png_bytes().unwrap();
        let pb = b[0].image.to_png_bytes().unwrap();
        assert_eq!(pa, pb);
    }

    #[test]
    fn phantoms_have_every_class_and_large_lungs() {
        for size in [32usize, 64, 128] {
            for seed in 0..25u64 {
                let cfg = PhantomConfig { seed, size, count: 2, ..Default::default() };
                for e in make_phantoms(&cfg).unwrap() {
                    // counting oracle over the generated grid
                    let mut counts = [0usize; 6];
                    for c in e.labels.codes() {
                        counts[c.index()] += 1;
                    }
                    assert!(counts.iter().all(|&n| n > 0), "size {size} seed {seed}: {counts:?}");
                    let area = (size * size) as f64;
                    assert!(counts[1] as f64 >= 0.05 * area, "right lung {counts:?}");
                    assert!(counts[2] as f64 >= 0.05 * area, "left lung {counts:?}");
                    // clavicles live in the upper third
                    for r in 0..size {
                        for c in 0..size {
                            let code = e.labels.get(r, c);
                            if matches!(code, ClassCode::RightClavicle | ClassCode::LeftClavicle) {
                                assert!(r < size / 3 + 1, "clavicle at row {r}");
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn lungs_are_dark_and_mediastinum_bright() {
        let e = make_phantom(&PhantomConfig { seed: 3, ..Default::default() }, 0).unwrap();
        let mean = |code: ClassCode| {
            let (s, n) = e
                .labels
                .codes()
                .iter()
                .zip(e.image.data())
                .filter(|(c, _)| **c == code)
                .fold((0.0f64, 0usize), |(s, n), (_, v)| (s + *v as f64, n + 1));
            s / n as f64
        };
        assert!(mean(ClassCode::RightLung) + 0.3 < mean(ClassCode::Heart));
        assert!(mean(ClassCode::LeftLung) + 0.3 < mean(ClassCode::Heart));
    }

    #[test]
    fn different_seeds_give_different_maps() {
        let a = make_phantom(&PhantomConfig { seed: 1, ..Default::default() }, 0).unwrap();
        let b = make_phantom(&PhantomConfig { seed: 2, ..Default::default() }, 0).unwrap();
        let hamming = a.labels.codes().iter().zip(b.labels.codes()).filter(|(x, y)| x != y).count();
        assert!(hamming > 0);
    }

    #[test]
    fn phantom_config_is_validated() {
        assert!(make_phantoms(&PhantomConfig { size: 48, ..Default::default() }).is_err());
        assert!(make_phantoms(&PhantomConfig { size: 16, ..Default::default() }).is_err());
        assert!(make_phantoms(&PhantomConfig { count: 0, ..Default::default() }).is_err());
    }

    #[test]
    fn subsample_counts_and_determinism() {
        let all = entries(124);
        let tenth = subsample_train(&all, 0.1, 5).unwrap();
        assert_eq!(tenth.len(), 12);
        assert_eq!(tenth, subsample_train(&all, 0.1, 5).unwrap());
        assert!(tenth.windows(2).all(|w| w[0].id < w[1].id));
        assert_eq!(subsample_train(&all, 1.0, 5).unwrap(), all);
        assert!(matches!(subsample_train(&entries(5), 0.1, 5), Err(Error::Config(_))));
        assert!(subsample_train(&all, 0.0, 5).is_err());
        assert_eq!(fraction_count(100, 0.29), 29);
    }

    #[test]
    fn split_parsing_rejects_garbage() {
        assert!("val".parse::<Split>().is_err());
        assert_eq!("test".parse::<Split>().unwrap(), Split::Test);
    }
}
