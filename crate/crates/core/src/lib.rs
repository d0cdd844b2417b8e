//! Multi-stage adversarial generation of chest radiographs with organ label maps.
//!
//! Three generation pipelines share one set of components:
//!
//! * single stage: a progressive GAN emits stacked image + label channels;
//! * two stage: a progressive GAN emits label maps, a conditional translator renders images;
//! * three stage: a progressive GAN emits 64x64 centroid dot maps, which are upscaled,
//!   translated into label maps, and translated again into images.
//!
//! Generated pairs pre-train a segmentation network that is optionally fine-tuned on real
//! data and scored with Jaccard/Dice on a held-out real split.

pub mod augment;
pub mod cli;
pub mod dataset;
pub mod dots;
pub mod error;
pub mod label;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod probes;
pub mod raster;
pub mod seed;

pub use error::{Error, Result};
pub use label::{ClassCode, LabelMap, Palette, CLASS_COUNT};
pub use raster::{GrayImage, Grid};
