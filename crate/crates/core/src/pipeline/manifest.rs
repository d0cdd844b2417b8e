//! Declarative experiment manifests (TOML).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{fraction_count, PhantomConfig};
use crate::error::{Error, Result};
use crate::label::ClassCode;
use crate::metrics::{Averaging, DEFAULT_SUBSET};
use crate::nn::gan::GeneratorConfig;
use crate::nn::segmenter::SegmenterConfig;
use crate::nn::translator::{OutputKind, TranslatorConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineKind {
    RealOnly,
    SingleStage,
    TwoStage,
    ThreeStage,
}

impl PipelineKind {
    pub fn name(self) -> &'static str {
        match self {
            PipelineKind::RealOnly => "real_only",
            PipelineKind::SingleStage => "single_stage",
            PipelineKind::TwoStage => "two_stage",
            PipelineKind::ThreeStage => "three_stage",
        }
    }
}

/// How much of the real training split feeds augmentation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Every real training image.
    #[default]
    Full,
    /// A fixed handful of real images (`counts.tiny_real`).
    Tiny,
    /// `floor(fraction * train)` real images.
    Custom(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GenerationBackend {
    #[default]
    Neural,
    /// Skips network training and recycles augmented real pairs as "synthetic"
    /// samples; for protocol and plumbing checks only.
    Stub,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Counts {
    pub synth_train: usize,
    pub synth_val: usize,
    pub generation_pool: usize,
    pub tiny_real: usize,
    /// Items per real image after augmentation, the original included.
    pub variants: usize,
}

impl Default for Counts {
    fn default() -> Self {
        Self { synth_train: 7500, synth_val: 2500, generation_pool: 10000, tiny_real: 11, variants: 6 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Phantoms(PhantomConfig),
    Directory {
        root: PathBuf,
        #[serde(default)]
        split_file: Option<PathBuf>,
        #[serde(default)]
        intensity_bits: Option<u8>,
    },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Phantoms(PhantomConfig { count: 120, test_from: Some(80), ..Default::default() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Resolutions {
    pub image: usize,
    pub dots: usize,
}

impl Default for Resolutions {
    fn default() -> Self {
        Self { image: 128, dots: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Evaluation {
    pub subset: Vec<ClassCode>,
    pub averaging: Averaging,
}

impl Default for Evaluation {
    fn default() -> Self {
        Self { subset: DEFAULT_SUBSET.to_vec(), averaging: Averaging::Micro }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentManifest {
    pub name: String,
    pub pipeline: PipelineKind,
    pub regime: Regime,
    pub finetune: bool,
    pub finetune_steps: usize,
    /// Multiplies the synthetic counts (train, validation, pool).
    pub scale: f64,
    pub counts: Counts,
    /// Master seed; each stage derives its own.
    pub seed: u64,
    pub resolutions: Resolutions,
    pub output_dir: PathBuf,
    pub generation: GenerationBackend,
    pub dot_radius: usize,
    pub data: DataSource,
    pub gan: GeneratorConfig,
    pub dots_to_labels: TranslatorConfig,
    pub labels_to_images: TranslatorConfig,
    pub segmenter: SegmenterConfig,
    pub evaluation: Evaluation,
}

impl Default for ExperimentManifest {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            pipeline: PipelineKind::ThreeStage,
            regime: Regime::Full,
            finetune: false,
            finetune_steps: 100,
            scale: 1.0,
            counts: Counts::default(),
            seed: 0,
            resolutions: Resolutions::default(),
            output_dir: PathBuf::from("runs"),
            generation: GenerationBackend::Neural,
            dot_radius: crate::dots::DEFAULT_RADIUS,
            data: DataSource::default(),
            gan: GeneratorConfig::default(),
            dots_to_labels: TranslatorConfig::default(),
            labels_to_images: TranslatorConfig { output_kind: OutputKind::Image, ..Default::default() },
            segmenter: SegmenterConfig::default(),
            evaluation: Evaluation::default(),
        }
    }
}

/// Synthetic counts after scaling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScaledCounts {
    pub synth_train: usize,
    pub synth_val: usize,
    pub generation_pool: usize,
}

/// TOML paths like `segmenter.steps=50` applied on top of a parsed document.
pub fn apply_overrides(doc: &mut toml::Value, overrides: &[String]) -> Result<()> {
    for o in overrides {
        let (key, raw) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{o}` is not of the form key=value")))?;
        let value = parse_override_value(raw.trim());
        let mut cur = &mut *doc;
        let parts: Vec<&str> = key.trim().split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let table = cur
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("override `{key}`: `{part}` is not inside a table")))?;
            if i + 1 == parts.len() {
                table.insert(part.to_string(), value.clone());
                break;
            }
            cur = table.entry(part.to_string()).or_insert_with(|| toml::Value::Table(Default::default()));
        }
    }
    Ok(())
}

fn parse_override_value(raw: &str) -> toml::Value {
    // reuse the TOML grammar for numbers, booleans, arrays and quoted strings
    let wrapped = format!("v = {raw}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Parses a TOML document into `T` after applying overrides.
pub fn parse_with_overrides<T: serde::de::DeserializeOwned>(text: &str, overrides: &[String]) -> Result<T> {
    let mut doc: toml::Value = toml::Value::Table(text.parse::<toml::Table>()?);
    apply_overrides(&mut doc, overrides)?;
    doc.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))
}

impl ExperimentManifest {
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let m: Self = parse_with_overrides(text, overrides)?;
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(&self.name)
    }

    pub fn scaled_counts(&self) -> ScaledCounts {
        let s = |n: usize| if n == 0 { 0 } else { fraction_count(n, self.scale).max(1) };
        ScaledCounts {
            synth_train: s(self.counts.synth_train),
            synth_val: s(self.counts.synth_val),
            generation_pool: s(self.counts.generation_pool),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return bad(format!("manifest name `{}` must be a non-empty single path component", self.name));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return bad(format!("scale must be positive, got {}", self.scale));
        }
        if let Regime::Custom(f) = self.regime {
            if !(f > 0.0 && f <= 1.0) {
                return bad(format!("custom regime fraction must lie in (0, 1], got {f}"));
            }
        }
        if self.regime == Regime::Tiny && self.counts.tiny_real == 0 {
            return bad("tiny regime needs counts.tiny_real >= 1".into());
        }
        if self.counts.variants == 0 {
            return bad("counts.variants must be >= 1".into());
        }
        let c = &self.counts;
        if c.synth_train + c.synth_val > c.generation_pool {
            return bad(format!(
                "synth_train ({}) + synth_val ({}) exceeds generation_pool ({})",
                c.synth_train, c.synth_val, c.generation_pool
            ));
        }
        let sc = self.scaled_counts();
        if sc.synth_train + sc.synth_val > sc.generation_pool {
            return bad("scaled synthetic counts exceed the scaled pool".into());
        }
        if self.pipeline != PipelineKind::RealOnly && sc.synth_train == 0 {
            return bad("generative pipelines need synth_train >= 1".into());
        }
        let r = &self.resolutions;
        for (what, v) in [("image", r.image), ("dots", r.dots)] {
            if !v.is_power_of_two() || v < 8 {
                return bad(format!("resolutions.{what} must be a power of two >= 8, got {v}"));
            }
        }
        if r.dots > r.image {
            return bad("dot resolution cannot exceed the image resolution".into());
        }
        if self.evaluation.subset.is_empty() {
            return bad("evaluation.subset is empty".into());
        }
        if let DataSource::Phantoms(p) = &self.data {
            p.validate()?;
            if p.size != r.image {
                return bad(format!("phantom size {} differs from resolutions.image {}", p.size, r.image));
            }
        }
        self.segmenter.validate()?;
        if self.pipeline != PipelineKind::RealOnly && self.generation == GenerationBackend::Neural {
            self.gan.validate_shape()?;
        }
        Ok(())
    }

    /// Short, stable identifier of the manifest contents.
    pub fn fingerprint(&self) -> Result<String> {
        let json = serde_json::to_string(self)?;
        Ok(crate::nn::checkpoint::fingerprint("manifest", &json)[..16].to_string())
    }
}

impl GeneratorConfig {
    /// Config checks that do not depend on the stage-specific channel/resolution fields.
    pub(crate) fn validate_shape(&self) -> Result<()> {
        if self.latent_dim == 0 || self.max_feature_maps == 0 || self.batch_size < 2 {
            return Err(Error::Config("gan: latent_dim >= 1, max_feature_maps >= 1 and batch_size >= 2 required".into()));
        }
        if !(self.schedule.fade_fraction > 0.0 && self.schedule.fade_fraction < 1.0) {
            return Err(Error::Config("gan: fade_fraction must lie in (0, 1)".into()));
        }
        if self.schedule.stage_steps.is_empty() {
            return Err(Error::Config("gan: stage_steps is empty".into()));
        }
        Ok(())
    }
}
