//! Semantic label maps, their palette codec, and code-preserving transforms.
//!
//! Every stage of every pipeline exchanges organ annotations as a [`LabelMap`]:
//! one [`ClassCode`] per pixel, no overlaps. On disk a map is a single-channel
//! 8-bit PNG whose pixel values are the palette's `stored` values.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Cursor;
use std::path::Path;

use image::{GrayImage as LumaImage, ImageFormat};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{GrayImage, Grid};

/// Number of class codes, background included.
pub const CLASS_COUNT: usize = 6;

/// Anatomical class of a pixel. The numeric values are fixed and serialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[repr(u8)]
pub enum ClassCode {
    Background = 0,
    RightLung = 1,
    LeftLung = 2,
    Heart = 3,
    RightClavicle = 4,
    LeftClavicle = 5,
}

impl ClassCode {
    pub const ALL: [ClassCode; CLASS_COUNT] = [
        ClassCode::Background,
        ClassCode::RightLung,
        ClassCode::LeftLung,
        ClassCode::Heart,
        ClassCode::RightClavicle,
        ClassCode::LeftClavicle,
    ];

    /// Organ codes in draw order (everything except background).
    pub const ORGANS: [ClassCode; CLASS_COUNT - 1] = [
        ClassCode::RightLung,
        ClassCode::LeftLung,
        ClassCode::Heart,
        ClassCode::RightClavicle,
        ClassCode::LeftClavicle,
    ];

    pub fn from_u8(v: u8) -> Option<Self> {
        Self::ALL.get(v as usize).copied()
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            ClassCode::Background => "background",
            ClassCode::RightLung => "right_lung",
            ClassCode::LeftLung => "left_lung",
            ClassCode::Heart => "heart",
            ClassCode::RightClavicle => "right_clavicle",
            ClassCode::LeftClavicle => "left_clavicle",
        }
    }

    /// Human-readable name used in report tables.
    pub fn display_name(self) -> &'static str {
        match self {
            ClassCode::Background => "Background",
            ClassCode::RightLung => "Right Lung",
            ClassCode::LeftLung => "Left Lung",
            ClassCode::Heart => "Heart",
            ClassCode::RightClavicle => "Right Clavicle",
            ClassCode::LeftClavicle => "Left Clavicle",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|c| c.name() == name)
    }

    /// Continuous level used when a label map travels through a single real-valued
    /// channel: `code / 5`, i.e. the default palette's stored value over 255.
    pub fn level(self) -> f32 {
        self as u8 as f32 / (CLASS_COUNT - 1) as f32
    }

    /// Nearest code to a continuous channel level. Ties go to the lower code.
    pub fn from_level(v: f32) -> Self {
        let scaled = (v.clamp(0.0, 1.0) * (CLASS_COUNT - 1) as f32).clamp(0.0, (CLASS_COUNT - 1) as f32);
        let lower = scaled.floor();
        let idx = if scaled - lower > 0.5 { lower as usize + 1 } else { lower as usize };
        Self::ALL[idx.min(CLASS_COUNT - 1)]
    }
}

impl fmt::Display for ClassCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Row-major grid of class codes.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabelMap {
    height: usize,
    width: usize,
    codes: Vec<ClassCode>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, codes: Vec<ClassCode>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!("label map dims must be >= 1, got {height}x{width}")));
        }
        if codes.len() != height * width {
            return Err(Error::Shape(format!(
                "label map {height}x{width} needs {} codes, got {}",
                height * width,
                codes.len()
            )));
        }
        Ok(Self { height, width, codes })
    }

    pub fn background(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, vec![ClassCode::Background; height * width])
    }

    /// Builds a map from raw code values, rejecting anything outside `0..6`.
    pub fn from_raw(height: usize, width: usize, raw: &[u8]) -> Result<Self> {
        let codes = raw
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                ClassCode::from_u8(v).ok_or_else(|| {
                    Error::Codec(format!("invalid class code {v} at ({}, {})", i / width.max(1), i % width.max(1)))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(height, width, codes)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn codes(&self) -> &[ClassCode] {
        &self.codes
    }

    pub fn get(&self, row: usize, col: usize) -> ClassCode {
        self.codes[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, code: ClassCode) {
        self.codes[row * self.width + col] = code;
    }

    pub fn raw(&self) -> Vec<u8> {
        self.codes.iter().map(|c| *c as u8).collect()
    }

    pub fn code_set(&self) -> BTreeSet<ClassCode> {
        self.codes.iter().copied().collect()
    }

    pub fn count(&self, code: ClassCode) -> usize {
        self.codes.iter().filter(|c| **c == code).count()
    }
}

/// One palette row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PaletteEntry {
    pub code: u8,
    pub name: String,
    pub stored: u8,
    pub color: [u8; 3],
}

#[derive(Debug, Clone, Deserialize, Serialize)]
struct PaletteFile {
    version: u32,
    class: Vec<PaletteEntry>,
}

/// Bijective mapping between class codes, stored mask values and display colors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Palette {
    version: u32,
    by_code: BTreeMap<ClassCode, PaletteEntry>,
    by_stored: BTreeMap<u8, ClassCode>,
}

const DEFAULT_PALETTE: &str = include_str!("../config/palette.toml");

impl Palette {
    /// The palette shipped in `config/palette.toml`.
    pub fn standard() -> Self {
        Self::from_toml(DEFAULT_PALETTE).expect("bundled palette is valid")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let file: PaletteFile = toml::from_str(text)?;
        Self::from_entries(file.version, file.class)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn from_entries(version: u32, entries: Vec<PaletteEntry>) -> Result<Self> {
        let mut by_code = BTreeMap::new();
        let mut by_stored = BTreeMap::new();
        let mut colors = BTreeSet::new();
        for entry in entries {
            let code = ClassCode::from_u8(entry.code)
                .ok_or_else(|| Error::Codec(format!("palette lists unknown code {}", entry.code)))?;
            if code.name() != entry.name {
                return Err(Error::Codec(format!(
                    "palette names code {} `{}`, expected `{}`",
                    entry.code,
                    entry.name,
                    code.name()
                )));
            }
            if by_stored.insert(entry.stored, code).is_some() {
                return Err(Error::Codec(format!("palette stored value {} used twice", entry.stored)));
            }
            if !colors.insert(entry.color) {
                return Err(Error::Codec(format!("palette color {:?} used twice", entry.color)));
            }
            if by_code.insert(code, entry).is_some() {
                return Err(Error::Codec(format!("palette lists code {} twice", code as u8)));
            }
        }
        Ok(Self { version, by_code, by_stored })
    }

    pub fn version(&self) -> u32 {
        self.version
    }

    pub fn stored(&self, code: ClassCode) -> Option<u8> {
        self.by_code.get(&code).map(|e| e.stored)
    }

    pub fn color(&self, code: ClassCode) -> Option<[u8; 3]> {
        self.by_code.get(&code).map(|e| e.color)
    }

    pub fn code_for_stored(&self, stored: u8) -> Option<ClassCode> {
        self.by_stored.get(&stored).copied()
    }

    pub fn entries(&self) -> impl Iterator<Item = &PaletteEntry> {
        self.by_code.values()
    }
}

impl Default for Palette {
    fn default() -> Self {
        Self::standard()
    }
}

fn stored_values(map: &LabelMap, palette: &Palette) -> Result<Vec<u8>> {
    map.codes
        .iter()
        .enumerate()
        .map(|(i, c)| {
            palette.stored(*c).ok_or_else(|| {
                Error::Codec(format!(
                    "code {} ({}) at ({}, {}) missing from palette",
                    *c as u8,
                    c,
                    i / map.width,
                    i % map.width
                ))
            })
        })
        .collect()
}

/// Encodes a label map as a single-channel 8-bit PNG of palette stored values.
pub fn encode(map: &LabelMap, palette: &Palette) -> Result<Vec<u8>> {
    let raw = stored_values(map, palette)?;
    let img = LumaImage::from_raw(map.width as u32, map.height as u32, raw)
        .ok_or_else(|| Error::Shape("label buffer size mismatch".into()))?;
    let mut out = Vec::new();
    img.write_to(&mut Cursor::new(&mut out), ImageFormat::Png)?;
    Ok(out)
}

/// Decodes a single-channel mask image back into a label map.
pub fn decode(bytes: &[u8], palette: &Palette) -> Result<LabelMap> {
    let img = image::load_from_memory(bytes)?;
    if !matches!(img.color(), image::ColorType::L8) {
        return Err(Error::Codec(format!("mask must be 8-bit single channel, got {:?}", img.color())));
    }
    let img = img.into_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let codes = img
        .as_raw()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            palette.code_for_stored(v).ok_or_else(|| {
                Error::Codec(format!("pixel value {v} at ({}, {}) is not in the palette", i / w, i % w))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    LabelMap::new(h, w, codes)
}

pub fn save_map(map: &LabelMap, palette: &Palette, path: &Path) -> Result<()> {
    let bytes = encode(map, palette)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_map(path: &Path, palette: &Palette) -> Result<LabelMap> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, palette).map_err(|e| match e {
        Error::Codec(msg) => Error::Codec(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Renders a label map with the palette's display colors (RGB, row-major).
pub fn colorize(map: &LabelMap, palette: &Palette) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(map.codes.len() * 3);
    for c in &map.codes {
        let rgb = palette
            .color(*c)
            .ok_or_else(|| Error::Codec(format!("code {} missing from palette", *c as u8)))?;
        out.extend_from_slice(&rgb);
    }
    Ok(out)
}

/// Nearest-neighbour source index: `floor(dst * src / dst_size)`, computed exactly in integers.
#[inline]
pub fn nearest_index(dst: usize, src_size: usize, dst_size: usize) -> usize {
    (dst * src_size) / dst_size
}

/// Resizes with nearest-neighbour sampling, so no new codes can appear.
pub fn resize_nearest(map: &LabelMap, out_h: usize, out_w: usize) -> Result<LabelMap> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::Shape(format!("resize target must be >= 1, got {out_h}x{out_w}")));
    }
    let cols: Vec<usize> = (0..out_w).map(|c| nearest_index(c, map.width, out_w)).collect();
    let mut codes = Vec::with_capacity(out_h * out_w);
    for r in 0..out_h {
        let sr = nearest_index(r, map.height, out_h);
        let row = &map.codes[sr * map.width..(sr + 1) * map.width];
        codes.extend(cols.iter().map(|&sc| row[sc]));
    }
    LabelMap::new(out_h, out_w, codes)
}

/// Stacks an image and its label map into a 2-channel grid: channel 0 holds the
/// intensities, channel 1 the label levels ([`ClassCode::level`]).
pub fn stack_pair(image: &GrayImage, map: &LabelMap) -> Result<Grid> {
    if image.dims() != map.dims() {
        return Err(Error::Shape(format!(
            "cannot stack image {:?} with label map {:?}",
            image.dims(),
            map.dims()
        )));
    }
    let mut data = Vec::with_capacity(2 * map.codes.len());
    data.extend_from_slice(image.data());
    data.extend(map.codes.iter().map(|c| c.level()));
    Grid::new(2, map.height, map.width, data)
}

/// Inverse of [`stack_pair`]. Intensities are clamped and label levels quantized,
/// so this also decodes generator output.
pub fn unstack_pair(grid: &Grid) -> Result<(GrayImage, LabelMap)> {
    if grid.channels != 2 {
        return Err(Error::Shape(format!("expected 2 channels, got {}", grid.channels)));
    }
    let image = GrayImage::from_clamped(grid.height, grid.width, grid.plane(0).to_vec())?;
    let map = levels_to_map(grid.height, grid.width, grid.plane(1))?;
    Ok((image, map))
}

/// Quantizes a continuous label channel to the nearest class levels.
pub fn levels_to_map(height: usize, width: usize, levels: &[f32]) -> Result<LabelMap> {
    LabelMap::new(height, width, levels.iter().map(|v| ClassCode::from_level(*v)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn map(h: usize, w: usize, raw: &[u8]) -> LabelMap {
        LabelMap::from_raw(h, w, raw).unwrap()
    }

    #[test]
    fn class_codes_are_a_fixed_bijection() {
        for (i, c) in ClassCode::ALL.iter().enumerate() {
            assert_eq!(c.index(), i);
            assert_eq!(ClassCode::from_name(c.name()), Some(*c));
            assert_eq!(ClassCode::from_level(c.level()), *c);
        }
        assert_eq!(ClassCode::ALL[0], ClassCode::Background);
        assert_eq!(ClassCode::from_u8(6), None);
    }

    #[test]
    fn standard_palette_is_injective() {
        let p = Palette::standard();
        let stored: BTreeSet<_> = ClassCode::ALL.iter().map(|c| p.stored(*c).unwrap()).collect();
        assert_eq!(stored.len(), CLASS_COUNT);
        for c in ClassCode::ALL {
            assert_eq!(p.code_for_stored(p.stored(c).unwrap()), Some(c));
        }
    }

    #[test]
    fn palette_rejects_duplicates() {
        let text = "version = 1\n[[class]]\ncode = 0\nname = \"background\"\nstored = 0\ncolor = [0,0,0]\n\
                    [[class]]\ncode = 1\nname = \"right_lung\"\nstored = 0\ncolor = [1,1,1]\n";
        assert!(matches!(Palette::from_toml(text), Err(Error::Codec(_))));
    }

    #[test]
    fn encode_single_background_pixel() {
        let p = Palette::standard();
        let bytes = encode(&map(1, 1, &[0]), &p).unwrap();
        let img = image::load_from_memory(&bytes).unwrap().into_luma8();
        assert_eq!(img.as_raw(), &vec![p.stored(ClassCode::Background).unwrap()]);
    }

    #[test]
    fn encode_uses_distinct_stored_values() {
        let p = Palette::standard();
        let bytes = encode(&map(2, 2, &[1, 2, 3, 0]), &p).unwrap();
        let img = image::load_from_memory(&bytes).unwrap().into_luma8();
        let distinct: BTreeSet<_> = img.as_raw().iter().copied().collect();
        assert_eq!(distinct.len(), 4);
        assert_eq!(decode(&bytes, &p).unwrap(), map(2, 2, &[1, 2, 3, 0]));
    }

    #[test]
    fn encode_fails_when_palette_lacks_code() {
        let partial = Palette::from_entries(
            1,
            vec![PaletteEntry { code: 0, name: "background".into(), stored: 0, color: [0, 0, 0] }],
        )
        .unwrap();
        let err = encode(&map(1, 2, &[0, 3]), &partial).unwrap_err();
        assert!(matches!(err, Error::Codec(_)));
    }

    #[test]
    fn decode_reports_unknown_value_and_location() {
        let img = LumaImage::from_raw(2, 2, vec![0, 0, 0, 7]).unwrap();
        let mut bytes = Vec::new();
        img.write_to(&mut Cursor::new(&mut bytes), ImageFormat::Png).unwrap();
        match decode(&bytes, &Palette::standard()) {
            Err(Error::Codec(msg)) => {
                assert!(msg.contains("7"), "{msg}");
                assert!(msg.contains("(1, 1)"), "{msg}");
            }
            other => panic!("expected codec error, got {other:?}"),
        }
    }

    #[test]
    fn decode_all_background() {
        let img = LumaImage::from_raw(16, 16, vec![0; 256]).unwrap();
        let mut bytes = Vec::new();
        img.write_to(&mut Cursor::new(&mut bytes), ImageFormat::Png).unwrap();
        let m = decode(&bytes, &Palette::standard()).unwrap();
        assert_eq!(m, LabelMap::background(16, 16).unwrap());
    }

    #[test]
    fn resize_integer_upscale_replicates_blocks() {
        let m = map(2, 2, &[1, 2, 3, 4]);
        let up = resize_nearest(&m, 4, 4).unwrap();
        assert_eq!(up.raw(), vec![1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4]);
    }

    #[test]
    fn resize_left_half_survives_upscale() {
        let mut m = LabelMap::background(64, 64).unwrap();
        for r in 0..64 {
            for c in 0..32 {
                m.set(r, c, ClassCode::RightLung);
            }
        }
        let up = resize_nearest(&m, 1024, 1024).unwrap();
        for r in 0..1024 {
            for c in 0..1024 {
                // independent oracle: pixel centre maps into the left half iff c < 512
                let expected = if c < 512 { ClassCode::RightLung } else { ClassCode::Background };
                assert_eq!(up.get(r, c), expected);
            }
        }
    }

    #[test]
    fn resize_same_size_is_identity() {
        let m = map(3, 2, &[0, 1, 2, 3, 4, 5]);
        assert_eq!(resize_nearest(&m, 3, 2).unwrap(), m);
        assert!(resize_nearest(&m, 0, 2).is_err());
    }

    #[test]
    fn stack_rejects_mismatched_dims() {
        let img = GrayImage::filled(8, 8, 0.5).unwrap();
        let m = LabelMap::background(16, 16).unwrap();
        assert!(matches!(stack_pair(&img, &m), Err(Error::Shape(_))));
        let g = stack_pair(&img, &LabelMap::background(8, 8).unwrap()).unwrap();
        assert_eq!((g.channels, g.height, g.width), (2, 8, 8));
    }

    fn arb_map() -> impl Strategy<Value = LabelMap> {
        (1usize..24, 1usize..24).prop_flat_map(|(h, w)| {
            proptest::collection::vec(0u8..6, h * w).prop_map(move |raw| LabelMap::from_raw(h, w, &raw).unwrap())
        })
    }

    proptest! {
        #[test]
        fn codec_round_trip(m in arb_map()) {
            let p = Palette::standard();
            prop_assert_eq!(decode(&encode(&m, &p).unwrap(), &p).unwrap(), m);
        }

        #[test]
        fn resize_never_introduces_codes(m in arb_map(), oh in 1usize..48, ow in 1usize..48) {
            let r = resize_nearest(&m, oh, ow).unwrap();
            prop_assert_eq!(r.dims(), (oh, ow));
            prop_assert!(r.code_set().is_subset(&m.code_set()));
        }

        #[test]
        fn stack_round_trip(m in arb_map(), seed in 0u64..1000) {
            let (h, w) = m.dims();
            let data: Vec<f32> = (0..h * w).map(|i| ((i as u64 * 2654435761 + seed) % 1000) as f32 / 999.0).collect();
            let img = GrayImage::new(h, w, data).unwrap();
            let (i2, m2) = unstack_pair(&stack_pair(&img, &m).unwrap()).unwrap();
            prop_assert_eq!(i2, img);
            prop_assert_eq!(m2, m);
        }
    }
}
