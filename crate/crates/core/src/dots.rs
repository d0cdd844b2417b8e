//! Centroid dot maps: the first representation of the three-stage pipeline.
//!
//! Each organ present in a label map is reduced to a filled disk of its class
//! code, centred on the organ's pixel centroid and drawn on a 64x64 grid.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::dataset::DatasetEntry;
use crate::error::{Error, Result};
use crate::label::{resize_nearest, ClassCode, LabelMap};
use crate::raster::GrayImage;

/// Side of every dot map.
pub const DOT_SIZE: usize = 64;
pub const DEFAULT_RADIUS: usize = 2;

/// Per-class centroids in source pixel coordinates `(row, col)`. Never holds background.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CentroidSet {
    entries: BTreeMap<ClassCode, (f64, f64)>,
}

impl CentroidSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, code: ClassCode, row: f64, col: f64) -> Result<()> {
        if code == ClassCode::Background {
            return Err(Error::Config("background has no centroid".into()));
        }
        self.entries.insert(code, (row, col));
        Ok(())
    }

    pub fn get(&self, code: ClassCode) -> Option<(f64, f64)> {
        self.entries.get(&code).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ClassCode, (f64, f64))> + '_ {
        self.entries.iter().map(|(k, v)| (*k, *v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Arithmetic mean of each organ's pixel coordinates; absent organs are omitted.
pub fn centroids(labels: &LabelMap) -> CentroidSet {
    let mut acc = [(0.0f64, 0.0f64, 0usize); crate::CLASS_COUNT];
    let w = labels.width();
    for (i, code) in labels.codes().iter().enumerate() {
        let a = &mut acc[code.index()];
        a.0 += (i / w) as f64;
        a.1 += (i % w) as f64;
        a.2 += 1;
    }
    let mut set = CentroidSet::new();
    for code in ClassCode::ORGANS {
        let (sr, sc, n) = acc[code.index()];
        if n > 0 {
            set.entries.insert(code, (sr / n as f64, sc / n as f64));
        }
    }
    set
}

/// Cell a source coordinate lands in on the dot grid: `round(v * 64 / src)`, clamped.
pub fn scaled_center(row: f64, col: f64, src_h: usize, src_w: usize) -> (usize, usize) {
    let s = DOT_SIZE as f64;
    let r = (row * s / src_h as f64).round().clamp(0.0, s - 1.0);
    let c = (col * s / src_w as f64).round().clamp(0.0, s - 1.0);
    (r as usize, c as usize)
}

/// Draws one filled disk (cells with squared distance <= radius^2) per centroid.
/// Disks are drawn in code order, so later codes win overlaps.
pub fn render(cs: &CentroidSet, src_h: usize, src_w: usize, radius: usize) -> Result<LabelMap> {
    if radius == 0 {
        return Err(Error::Config("dot radius must be >= 1".into()));
    }
    if src_h == 0 || src_w == 0 {
        return Err(Error::Shape("source dims must be >= 1".into()));
    }
    let mut map = LabelMap::background(DOT_SIZE, DOT_SIZE)?;
    let r = radius as i64;
    for (code, (row, col)) in cs.iter() {
        let (cr, cc) = scaled_center(row, col, src_h, src_w);
        for dr in -r..=r {
            for dc in -r..=r {
                if dr * dr + dc * dc > r * r {
                    continue;
                }
                let (y, x) = (cr as i64 + dr, cc as i64 + dc);
                if (0..DOT_SIZE as i64).contains(&y) && (0..DOT_SIZE as i64).contains(&x) {
                    map.set(y as usize, x as usize, code);
                }
            }
        }
    }
    Ok(map)
}

/// Number of grid cells in a full (unclipped) disk.
pub fn disk_area(radius: usize) -> usize {
    let r = radius as i64;
    (-r..=r).flat_map(|dy| (-r..=r).map(move |dx| (dy, dx))).filter(|(dy, dx)| dy * dy + dx * dx <= r * r).count()
}

pub fn dot_map(labels: &LabelMap, radius: usize) -> Result<LabelMap> {
    render(&centroids(labels), labels.height(), labels.width(), radius)
}

/// Training triple for the three-stage translators.
#[derive(Debug, Clone, PartialEq)]
pub struct DotTriple {
    pub id: String,
    pub dots: LabelMap,
    /// `dots` resized (nearest neighbour) to the source resolution.
    pub dots_upscaled: LabelMap,
    pub labels: LabelMap,
    pub image: GrayImage,
}

pub fn dotify_dataset(entries: &[DatasetEntry], radius: usize) -> Result<Vec<DotTriple>> {
    entries
        .par_iter()
        .map(|e| {
            let dots = dot_map(&e.labels, radius)?;
            let dots_upscaled = resize_nearest(&dots, e.labels.height(), e.labels.width())?;
            Ok(DotTriple { id: e.id.clone(), dots, dots_upscaled, labels: e.labels.clone(), image: e.image.clone() })
        })
        .collect()
}
