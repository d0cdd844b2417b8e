//! Cheap sanity probes on generated data: diversity (mode collapse,
//! memorization) and structural plausibility of label maps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label::{ClassCode, LabelMap};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityStats {
    pub samples: usize,
    /// Per-pixel variance across samples, averaged over pixels.
    pub mean_pixel_variance: f64,
    pub min_pixel_variance: f64,
    pub max_pixel_variance: f64,
    /// Mean absolute difference from each sample to its closest training item.
    pub nn_distances: Vec<f64>,
    pub nn_mean: f64,
    pub nn_min: f64,
}

fn mad(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).abs()).sum::<f64>() / a.len() as f64
}

/// Diversity of `samples` (flattened rasters of equal length). `training` may be
/// empty, in which case the nearest-neighbour statistics are empty/zero.
pub fn diversity(samples: &[Vec<f32>], training: &[Vec<f32>]) -> Result<DiversityStats> {
    if samples.len() < 2 {
        return Err(Error::Config(format!("diversity needs >= 2 samples, got {}", samples.len())));
    }
    let len = samples[0].len();
    if len == 0 || samples.iter().chain(training).any(|s| s.len() != len) {
        return Err(Error::Shape("diversity inputs must share one non-empty size".into()));
    }
    let n = samples.len() as f64;
    let mut var_sum = 0.0;
    let mut var_min = f64::INFINITY;
    let mut var_max = 0.0f64;
    for p in 0..len {
        // two-pass per pixel; order-independent up to rounding of the sums
        let mean = samples.iter().map(|s| s[p] as f64).sum::<f64>() / n;
        let var = samples.iter().map(|s| (s[p] as f64 - mean).powi(2)).sum::<f64>() / n;
        var_sum += var;
        var_min = var_min.min(var);
        var_max = var_max.max(var);
    }
    let nn_distances: Vec<f64> = if training.is_empty() {
        Vec::new()
    } else {
        samples
            .iter()
            .map(|s| training.iter().map(|t| mad(s, t)).fold(f64::INFINITY, f64::min))
            .collect()
    };
    let nn_mean = if nn_distances.is_empty() { 0.0 } else { nn_distances.iter().sum::<f64>() / nn_distances.len() as f64 };
    let nn_min = nn_distances.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(DiversityStats {
        samples: samples.len(),
        mean_pixel_variance: var_sum / len as f64,
        min_pixel_variance: var_min,
        max_pixel_variance: var_max,
        nn_distances,
        nn_mean,
        nn_min: if nn_min.is_finite() { nn_min } else { 0.0 },
    })
}

pub fn label_raster(map: &LabelMap) -> Vec<f32> {
    map.codes().iter().map(|c| c.level()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MapChecks {
    pub lungs_present: bool,
    /// No right-lung pixel is 4-adjacent to a left-lung pixel.
    pub lungs_disjoint: bool,
    pub heart_present: bool,
}

impl MapChecks {
    pub fn all(&self) -> bool {
        self.lungs_present && self.lungs_disjoint && self.heart_present
    }
}

pub fn check_map(map: &LabelMap) -> MapChecks {
    let (h, w) = map.dims();
    let mut touching = false;
    for r in 0..h {
        for c in 0..w {
            let code = map.get(r, c);
            if code != ClassCode::RightLung && code != ClassCode::LeftLung {
                continue;
            }
            let other = if code == ClassCode::RightLung { ClassCode::LeftLung } else { ClassCode::RightLung };
            if (c + 1 < w && map.get(r, c + 1) == other) || (r + 1 < h && map.get(r + 1, c) == other) {
                touching = true;
            }
        }
    }
    MapChecks {
        lungs_present: map.count(ClassCode::RightLung) > 0 && map.count(ClassCode::LeftLung) > 0,
        lungs_disjoint: !touching,
        heart_present: map.count(ClassCode::Heart) > 0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SanityReport {
    pub maps: usize,
    pub lungs_present: f64,
    pub lungs_disjoint: f64,
    pub heart_present: f64,
    pub all_checks: f64,
    pub per_map: Vec<MapChecks>,
}

pub fn label_sanity(maps: &[LabelMap]) -> SanityReport {
    let per_map: Vec<MapChecks> = maps.iter().map(check_map).collect();
    let frac = |f: &dyn Fn(&MapChecks) -> bool| {
        if per_map.is_empty() {
            0.0
        } else {
            per_map.iter().filter(|m| f(m)).count() as f64 / per_map.len() as f64
        }
    };
    SanityReport {
        maps: maps.len(),
        lungs_present: frac(&|m| m.lungs_present),
        lungs_disjoint: frac(&|m| m.lungs_disjoint),
        heart_present: frac(&|m| m.heart_present),
        all_checks: frac(&|m| m.all()),
        per_map,
    }
}
