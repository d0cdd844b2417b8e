//! Stage graph execution with on-disk artifacts and resume.
//!
//! Every stage reads its inputs from the run directory and writes its outputs
//! plus a `done.json` marker into `runs/<name>/<stage>/`. A rerun skips stages
//! whose marker matches the manifest fingerprint, so an interrupted run resumes
//! where it stopped and yields the same final report.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use super::manifest::{DataSource, ExperimentManifest, GenerationBackend, PipelineKind, Regime};
use crate::dataset::{self, DatasetEntry, LoadOptions, Split};
use crate::error::{Error, Result};
use crate::label::{self, LabelMap, Palette};
use crate::metrics::{self, MetricsReport};
use crate::nn::gan::{self, ProgressiveGan, TrainOptions};
use crate::nn::segmenter::{self, Segmenter};
use crate::nn::translator::{self, OutputKind, Target, Translator};
use crate::nn::NetworkCheckpoint;
use crate::raster::{GrayImage, Grid};
use crate::{augment, dots, probes, seed};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageId {
    Data,
    Augment,
    Dots,
    Gan,
    DotsToLabels,
    LabelsToImages,
    Generate,
    Segment,
    Finetune,
    Evaluate,
}

impl StageId {
    pub fn name(self) -> &'static str {
        match self {
            StageId::Data => "data",
            StageId::Augment => "augment",
            StageId::Dots => "dots",
            StageId::Gan => "gan",
            StageId::DotsToLabels => "dots_to_labels",
            StageId::LabelsToImages => "labels_to_images",
            StageId::Generate => "generate",
            StageId::Segment => "segment",
            StageId::Finetune => "finetune",
            StageId::Evaluate => "evaluate",
        }
    }
}

/// Stages with their dependencies.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageGraph {
    pub nodes: Vec<(StageId, Vec<StageId>)>,
}

impl StageGraph {
    pub fn for_manifest(m: &ExperimentManifest) -> Self {
        use StageId::*;
        let mut nodes = vec![(Data, vec![]), (Augment, vec![Data])];
        match m.pipeline {
            PipelineKind::RealOnly => nodes.push((Segment, vec![Augment])),
            PipelineKind::SingleStage => {
                nodes.push((Gan, vec![Augment]));
                nodes.push((Generate, vec![Gan]));
                nodes.push((Segment, vec![Generate]));
            }
            PipelineKind::TwoStage => {
                nodes.push((Gan, vec![Augment]));
                nodes.push((LabelsToImages, vec![Augment]));
                nodes.push((Generate, vec![Gan, LabelsToImages]));
                nodes.push((Segment, vec![Generate]));
            }
            PipelineKind::ThreeStage => {
                nodes.push((Dots, vec![Augment]));
                nodes.push((Gan, vec![Dots]));
                nodes.push((DotsToLabels, vec![Dots]));
                nodes.push((LabelsToImages, vec![Augment]));
                nodes.push((Generate, vec![Gan, DotsToLabels, LabelsToImages]));
                nodes.push((Segment, vec![Generate]));
            }
        }
        let last = if m.finetune && m.pipeline != PipelineKind::RealOnly {
            nodes.push((Finetune, vec![Segment, Augment]));
            Finetune
        } else {
            Segment
        };
        nodes.push((Evaluate, vec![last, Data]));
        Self { nodes }
    }

    /// Topological order; fails on unknown dependencies or cycles.
    pub fn order(&self) -> Result<Vec<StageId>> {
        let known: BTreeSet<StageId> = self.nodes.iter().map(|(s, _)| *s).collect();
        if known.len() != self.nodes.len() {
            return Err(Error::Config("stage graph lists a stage twice".into()));
        }
        for (s, deps) in &self.nodes {
            if let Some(d) = deps.iter().find(|d| !known.contains(d)) {
                return Err(Error::Config(format!("stage `{}` depends on missing stage `{}`", s.name(), d.name())));
            }
        }
        let mut done: Vec<StageId> = Vec::with_capacity(self.nodes.len());
        while done.len() < self.nodes.len() {
            let next = self
                .nodes
                .iter()
                .find(|(s, deps)| !done.contains(s) && deps.iter().all(|d| done.contains(d)))
                .map(|(s, _)| *s)
                .ok_or_else(|| Error::Config("stage graph has a cycle".into()))?;
            done.push(next);
        }
        Ok(done)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StageMarker {
    stage: StageId,
    manifest_fingerprint: String,
    wall_clock_s: f64,
    /// Paths relative to the run directory.
    artifacts: BTreeMap<String, PathBuf>,
    info: serde_json::Value,
}

/// Sizes of every dataset the protocol produces.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtocolCounts {
    pub real_train: usize,
    pub real_test: usize,
    pub real_selected: usize,
    pub augmented: usize,
    pub synth_pool: usize,
    pub synth_train: usize,
    pub synth_val: usize,
    pub segmenter_train: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub count: usize,
    /// SHA-256 over the sorted test entries (ids, sizes, labels and pixels).
    pub fingerprint: String,
}

/// Everything one run produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub name: String,
    pub pipeline: PipelineKind,
    pub regime: Regime,
    pub finetune: bool,
    pub manifest: ExperimentManifest,
    pub manifest_fingerprint: String,
    pub run_dir: PathBuf,
    /// Relative to `run_dir`.
    pub checkpoints: BTreeMap<String, PathBuf>,
    pub artifacts: BTreeMap<String, PathBuf>,
    pub metrics: MetricsReport,
    pub validation: Option<MetricsReport>,
    pub wall_clock_s: BTreeMap<String, f64>,
    pub counts: ProtocolCounts,
    pub probes: Option<serde_json::Value>,
    pub evaluation_split: SplitSummary,
    pub stage_info: BTreeMap<String, serde_json::Value>,
}

impl RunRecord {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn checkpoint_path(&self, stage: &str) -> Option<PathBuf> {
        self.checkpoints.get(stage).map(|p| self.run_dir.join(p))
    }

    /// Column label used by comparison tables.
    pub fn column(&self) -> String {
        super::compare::column_label(self.pipeline, self.finetune)
    }
}

struct Ctx<'a> {
    m: &'a ExperimentManifest,
    dir: PathBuf,
    palette: Palette,
}

struct StageOutput {
    artifacts: BTreeMap<String, PathBuf>,
    info: serde_json::Value,
}

impl Ctx<'_> {
    fn stage_dir(&self, s: StageId) -> PathBuf {
        self.dir.join(s.name())
    }

    fn seed(&self, s: StageId) -> u64 {
        seed::derive(self.m.seed, s.name())
    }

    fn rel(&self, p: &Path) -> PathBuf {
        p.strip_prefix(&self.dir).map(Path::to_path_buf).unwrap_or_else(|_| p.to_path_buf())
    }

    fn load(&self, s: StageId, sub: &str) -> Result<Vec<DatasetEntry>> {
        let root = if sub.is_empty() { self.stage_dir(s) } else { self.stage_dir(s).join(sub) };
        dataset::load_dataset(&root, None, &LoadOptions { intensity_bits: None, palette: Some(self.palette.clone()) })
    }

    fn log_file(&self, s: StageId) -> Result<BufWriter<File>> {
        let p = self.stage_dir(s).join("log.jsonl");
        Ok(BufWriter::new(File::create(&p).map_err(|e| Error::io(&p, e))?))
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes label maps as `<id>.png` plus an `ids.txt` index.
pub fn save_maps(dir: &Path, maps: &[(String, LabelMap)], palette: &Palette) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut index = String::new();
    for (id, m) in maps {
        label::save_map(m, palette, &dir.join(format!("{id}.png")))?;
        index.push_str(id);
        index.push('\n');
    }
    let p = dir.join("ids.txt");
    fs::write(&p, index).map_err(|e| Error::io(&p, e))
}

/// Reads maps written by [`save_maps`].
pub fn load_maps(dir: &Path, palette: &Palette) -> Result<Vec<(String, LabelMap)>> {
    let p = dir.join("ids.txt");
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    text.lines()
        .filter(|l| !l.is_empty())
        .map(|id| Ok((id.to_string(), label::load_map(&dir.join(format!("{id}.png")), palette)?)))
        .collect()
}

fn split_summary(entries: &[DatasetEntry]) -> SplitSummary {
    let mut sorted: Vec<&DatasetEntry> = entries.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    let mut h = Sha256::new();
    for e in &sorted {
        let (r, c) = e.image.dims();
        h.update(format!("{}:{r}x{c}\n", e.id).as_bytes());
        h.update(e.labels.raw());
        for v in e.image.data() {
            h.update(v.to_le_bytes());
        }
    }
    SplitSummary { count: sorted.len(), fingerprint: h.finalize().iter().map(|b| format!("{b:02x}")).collect() }
}

fn pairs(entries: &[DatasetEntry]) -> Vec<(GrayImage, LabelMap)> {
    entries.iter().map(|e| (e.image.clone(), e.labels.clone())).collect()
}

fn levels(map: &LabelMap) -> Result<Grid> {
    Grid::new(1, map.height(), map.width(), probes::label_raster(map))
}

fn stage_data(cx: &Ctx) -> Result<StageOutput> {
    let entries = match &cx.m.data {
        DataSource::Phantoms(p) => dataset::make_phantoms(p)?,
        DataSource::Directory { root, split_file, intensity_bits } => dataset::load_dataset(
            root,
            split_file.as_deref(),
            &LoadOptions { intensity_bits: *intensity_bits, palette: Some(cx.palette.clone()) },
        )?,
    };
    if cx.m.pipeline != PipelineKind::RealOnly {
        let r = cx.m.resolutions.image;
        if let Some(e) = entries.iter().find(|e| e.image.dims() != (r, r)) {
            return Err(Error::Config(format!(
                "entry `{}` is {:?}; generative pipelines need {r}x{r} inputs",
                e.id,
                e.image.dims()
            )));
        }
    }
    let dir = cx.stage_dir(StageId::Data);
    dataset::save_dataset(&entries, &dir, &cx.palette)?;
    let (train, test) = dataset::split_counts(&entries);
    Ok(StageOutput {
        artifacts: BTreeMap::from([("dataset".into(), cx.rel(&dir))]),
        info: json!({ "real_train": train, "real_test": test }),
    })
}

fn stage_augment(cx: &Ctx) -> Result<StageOutput> {
    let s = cx.seed(StageId::Augment);
    let train = dataset::of_split(&cx.load(StageId::Data, "")?, Split::Train);
    if train.is_empty() {
        return Err(Error::Config("the real dataset has no training entries".into()));
    }
    let selected = match cx.m.regime {
        Regime::Full => train.clone(),
        Regime::Tiny => dataset::subsample_count(&train, cx.m.counts.tiny_real, seed::derive(s, "select"))?,
        Regime::Custom(f) => dataset::subsample_train(&train, f, seed::derive(s, "select"))?,
    };
    let augmented = augment::augment_dataset(&selected, cx.m.counts.variants, seed::derive(s, "augment"))?;
    let dir = cx.stage_dir(StageId::Augment);
    dataset::save_dataset(&augmented, &dir, &cx.palette)?;
    Ok(StageOutput {
        artifacts: BTreeMap::from([("dataset".into(), cx.rel(&dir))]),
        info: json!({ "real_selected": selected.len(), "augmented": augmented.len() }),
    })
}

fn stage_dots(cx: &Ctx) -> Result<StageOutput> {
    let entries = cx.load(StageId::Augment, "")?;
    let r = cx.m.resolutions.dots;
    let triples = dots::dotify_dataset(&entries, cx.m.dot_radius)?;
    let maps: Vec<(String, LabelMap)> = triples
        .into_iter()
        .map(|t| {
            let d = if t.dots.dims() == (r, r) { t.dots } else { label::resize_nearest(&t.dots, r, r)? };
            Ok((t.id, d))
        })
        .collect::<Result<_>>()?;
    let dir = cx.stage_dir(StageId::Dots).join("maps");
    save_maps(&dir, &maps, &cx.palette)?;
    Ok(StageOutput { artifacts: BTreeMap::from([("dot_maps".into(), cx.rel(&dir))]), info: json!({ "maps": maps.len() }) })
}

fn nn_stub(cx: &Ctx) -> bool {
    cx.m.generation == GenerationBackend::Stub
}

fn stage_gan(cx: &Ctx) -> Result<StageOutput> {
    let dir = cx.stage_dir(StageId::Gan);
    if nn_stub(cx) {
        return Ok(StageOutput { artifacts: BTreeMap::new(), info: json!({ "backend": "stub" }) });
    }
    let (grids, res, channels): (Vec<Grid>, usize, usize) = match cx.m.pipeline {
        PipelineKind::ThreeStage => {
            let maps = load_maps(&cx.stage_dir(StageId::Dots).join("maps"), &cx.palette)?;
            (maps.iter().map(|(_, m)| levels(m)).collect::<Result<_>>()?, cx.m.resolutions.dots, 1)
        }
        PipelineKind::TwoStage => {
            let e = cx.load(StageId::Augment, "")?;
            (e.iter().map(|e| levels(&e.labels)).collect::<Result<_>>()?, cx.m.resolutions.image, 1)
        }
        PipelineKind::SingleStage => {
            let e = cx.load(StageId::Augment, "")?;
            (e.iter().map(|e| label::stack_pair(&e.image, &e.labels)).collect::<Result<_>>()?, cx.m.resolutions.image, 2)
        }
        PipelineKind::RealOnly => return Err(Error::State("real_only runs have no generator".into())),
    };
    let mut cfg = cx.m.gan.clone();
    cfg.out_channels = channels;
    cfg.schedule.target_res = res;
    cfg.seed = cx.seed(StageId::Gan);
    let mut log = cx.log_file(StageId::Gan)?;
    let out = gan::train_adversarial(
        &grids,
        &cfg,
        TrainOptions { log: Some(&mut log), checkpoint_dir: Some(dir.join("stages")), resume: None },
    )?;
    log.flush().map_err(|e| Error::io(&dir, e))?;
    let ck = dir.join("final.ckpt");
    out.checkpoint.save(&ck)?;
    let resolutions: Vec<usize> = out.log.iter().map(|r| r.resolution).collect::<BTreeSet<_>>().into_iter().collect();
    let last = out.log.last();
    Ok(StageOutput {
        artifacts: BTreeMap::from([("checkpoint".into(), cx.rel(&ck)), ("log".into(), cx.rel(&dir.join("log.jsonl")))]),
        info: json!({
            "steps": out.log.len(),
            "resolutions": resolutions,
            "final_d_loss": last.map(|r| r.d_loss),
            "final_g_loss": last.map(|r| r.g_loss),
            "training_items": grids.len(),
        }),
    })
}

fn stage_translator(cx: &Ctx, stage: StageId) -> Result<StageOutput> {
    let dir = cx.stage_dir(stage);
    if nn_stub(cx) {
        return Ok(StageOutput { artifacts: BTreeMap::new(), info: json!({ "backend": "stub" }) });
    }
    let entries = cx.load(StageId::Augment, "")?;
    let r = cx.m.resolutions.image;
    let (sources, targets, mut cfg): (Vec<LabelMap>, Vec<Target>, _) = if stage == StageId::DotsToLabels {
        let maps: BTreeMap<String, LabelMap> =
            load_maps(&cx.stage_dir(StageId::Dots).join("maps"), &cx.palette)?.into_iter().collect();
        let mut s = Vec::with_capacity(entries.len());
        for e in &entries {
            let d = maps.get(&e.id).ok_or_else(|| Error::State(format!("no dot map for `{}`", e.id)))?;
            s.push(label::resize_nearest(d, r, r)?);
        }
        let t = entries.iter().map(|e| Target::Labels(e.labels.clone())).collect();
        let mut cfg = cx.m.dots_to_labels.clone();
        cfg.output_kind = OutputKind::Label;
        (s, t, cfg)
    } else {
        let s = entries.iter().map(|e| e.labels.clone()).collect();
        let t = entries.iter().map(|e| Target::Image(e.image.clone())).collect();
        let mut cfg = cx.m.labels_to_images.clone();
        cfg.output_kind = OutputKind::Image;
        (s, t, cfg)
    };
    cfg.seed = cx.seed(stage);
    let mut log = cx.log_file(stage)?;
    let (ck, records) = translator::train_translation(&sources, &targets, &cfg, Some(&mut log))?;
    log.flush().map_err(|e| Error::io(&dir, e))?;
    let path = dir.join("final.ckpt");
    ck.save(&path)?;
    let last = records.last();
    Ok(StageOutput {
        artifacts: BTreeMap::from([("checkpoint".into(), cx.rel(&path)), ("log".into(), cx.rel(&dir.join("log.jsonl")))]),
        info: json!({
            "steps": records.len(),
            "final_total_loss": last.map(|r| r.total),
            "final_d_loss": last.map(|r| r.d_loss),
            "training_pairs": sources.len(),
        }),
    })
}

const GENERATION_CHUNK: usize = 16;

fn generate_neural(cx: &Ctx, n: usize) -> Result<Vec<(GrayImage, LabelMap)>> {
    let s = cx.seed(StageId::Generate);
    let r = cx.m.resolutions.image;
    let g = ProgressiveGan::from_checkpoint(&NetworkCheckpoint::load(&cx.stage_dir(StageId::Gan).join("final.ckpt"))?)?;
    let load_tr = |st: StageId| -> Result<Translator> {
        Translator::from_checkpoint(&NetworkCheckpoint::load(&cx.stage_dir(st).join("final.ckpt"))?)
    };
    let d2l = if cx.m.pipeline == PipelineKind::ThreeStage { Some(load_tr(StageId::DotsToLabels)?) } else { None };
    let l2i = if cx.m.pipeline == PipelineKind::SingleStage { None } else { Some(load_tr(StageId::LabelsToImages)?) };
    let as_image = |t: Target| match t {
        Target::Image(i) => Ok(i),
        Target::Labels(_) => Err(Error::State("image translator produced labels".into())),
    };
    let as_labels = |t: Target| match t {
        Target::Labels(m) => Ok(m),
        Target::Image(_) => Err(Error::State("label translator produced an image".into())),
    };
    let mut out = Vec::with_capacity(n);
    for (chunk, start) in (0..n).step_by(GENERATION_CHUNK).enumerate() {
        let count = GENERATION_CHUNK.min(n - start);
        let grids = gan::sample_from(&g, count, seed::derive_indexed(s, "chunk", chunk as u64))?;
        for grid in grids {
            let pair = match cx.m.pipeline {
                PipelineKind::SingleStage => label::unstack_pair(&grid)?,
                PipelineKind::TwoStage => {
                    let labels = gan::decode_labels(&grid)?;
                    let image = as_image(l2i.as_ref().expect("two-stage translator").translate(&labels)?)?;
                    (image, labels)
                }
                PipelineKind::ThreeStage => {
                    let d = label::resize_nearest(&gan::decode_labels(&grid)?, r, r)?;
                    let labels = as_labels(d2l.as_ref().expect("dot translator").translate(&d)?)?;
                    let image = as_image(l2i.as_ref().expect("image translator").translate(&labels)?)?;
                    (image, labels)
                }
                PipelineKind::RealOnly => unreachable!("real_only has no generate stage"),
            };
            out.push(pair);
        }
    }
    Ok(out)
}

fn generate_stub(cx: &Ctx, n: usize) -> Result<Vec<(GrayImage, LabelMap)>> {
    let entries = cx.load(StageId::Augment, "")?;
    let mut order: Vec<usize> = (0..entries.len()).collect();
    order.shuffle(&mut seed::rng(cx.seed(StageId::Generate)));
    Ok((0..n).map(|i| {
        let e = &entries[order[i % order.len()]];
        (e.image.clone(), e.labels.clone())
    })
    .collect())
}

fn stage_generate(cx: &Ctx) -> Result<StageOutput> {
    let counts = cx.m.scaled_counts();
    let pool = counts.generation_pool;
    let generated = if nn_stub(cx) { generate_stub(cx, pool)? } else { generate_neural(cx, pool)? };
    let to_entries = |range: std::ops::Range<usize>, split: Split| -> Result<Vec<DatasetEntry>> {
        range
            .map(|i| {
                let (img, lab) = generated[i].clone();
                DatasetEntry::new(format!("synth_{i:05}"), img, lab, split)
            })
            .collect()
    };
    let train = to_entries(0..counts.synth_train, Split::Train)?;
    let val = to_entries(counts.synth_train..counts.synth_train + counts.synth_val, Split::Test)?;
    let dir = cx.stage_dir(StageId::Generate);
    dataset::save_dataset(&train, &dir.join("train"), &cx.palette)?;
    if !val.is_empty() {
        dataset::save_dataset(&val, &dir.join("val"), &cx.palette)?;
    }

    // probes on what the segmenter will see
    let real = cx.load(StageId::Augment, "")?;
    let take = generated.len().min(64);
    let diversity = if take >= 2 {
        let samples: Vec<Vec<f32>> = generated[..take].iter().map(|(i, _)| i.data().to_vec()).collect();
        let training: Vec<Vec<f32>> = real.iter().map(|e| e.image.data().to_vec()).collect();
        Some(probes::diversity(&samples, &training)?)
    } else {
        None
    };
    let maps: Vec<LabelMap> = generated.iter().map(|(_, l)| l.clone()).collect();
    let mut sanity = probes::label_sanity(&maps);
    sanity.per_map.clear();
    let probe_json = json!({ "diversity": diversity, "label_sanity": sanity });
    write_json(&dir.join("probes.json"), &probe_json)?;

    let mut artifacts = BTreeMap::from([
        ("synth_train".into(), cx.rel(&dir.join("train"))),
        ("probes".into(), cx.rel(&dir.join("probes.json"))),
    ]);
    if !val.is_empty() {
        artifacts.insert("synth_val".into(), cx.rel(&dir.join("val")));
    }
    Ok(StageOutput {
        artifacts,
        info: json!({
            "synth_pool": generated.len(),
            "synth_train": train.len(),
            "synth_val": val.len(),
            "probes": probe_json,
        }),
    })
}

fn stage_segment(cx: &Ctx) -> Result<StageOutput> {
    let dir = cx.stage_dir(StageId::Segment);
    let (train, source) = if cx.m.pipeline == PipelineKind::RealOnly {
        (cx.load(StageId::Augment, "")?, "real".to_string())
    } else {
        (cx.load(StageId::Generate, "train")?, format!("synthetic:{}", cx.m.pipeline.name()))
    };
    let mut cfg = cx.m.segmenter.clone();
    cfg.seed = cx.seed(StageId::Segment);
    let mut log = cx.log_file(StageId::Segment)?;
    let (ck, records) = segmenter::train_segmenter(&pairs(&train), &cfg, &source, Some(&mut log))?;
    log.flush().map_err(|e| Error::io(&dir, e))?;
    let path = dir.join("model.ckpt");
    ck.save(&path)?;
    let mut artifacts = BTreeMap::from([("checkpoint".into(), cx.rel(&path)), ("log".into(), cx.rel(&dir.join("log.jsonl")))]);
    let val_dir = cx.stage_dir(StageId::Generate).join("val");
    let mut validation = None;
    if cx.m.pipeline != PipelineKind::RealOnly && val_dir.join("split.txt").exists() {
        let val = cx.load(StageId::Generate, "val")?;
        let net = Segmenter::from_checkpoint(&ck)?;
        let (_, report) = segmenter::evaluate(&net, &pairs(&val), &cx.m.evaluation.subset)?;
        let p = dir.join("validation.json");
        write_json(&p, &report)?;
        artifacts.insert("validation".into(), cx.rel(&p));
        validation = Some(report);
    }
    Ok(StageOutput {
        artifacts,
        info: json!({
            "steps": records.len(),
            "first_loss": records.first().map(|r| r.loss),
            "final_loss": records.last().map(|r| r.loss),
            "training_pairs": train.len(),
            "source": source,
            "validation_average_jaccard": validation.as_ref().map(|v| v.average_jaccard),
        }),
    })
}

fn stage_finetune(cx: &Ctx) -> Result<StageOutput> {
    let dir = cx.stage_dir(StageId::Finetune);
    let pre = NetworkCheckpoint::load(&cx.stage_dir(StageId::Segment).join("model.ckpt"))?;
    let real = cx.load(StageId::Augment, "")?;
    let mut log = cx.log_file(StageId::Finetune)?;
    let (ck, records) = segmenter::finetune(&pre, &pairs(&real), cx.m.finetune_steps, "real", Some(&mut log))?;
    log.flush().map_err(|e| Error::io(&dir, e))?;
    let path = dir.join("model.ckpt");
    ck.save(&path)?;
    Ok(StageOutput {
        artifacts: BTreeMap::from([("checkpoint".into(), cx.rel(&path)), ("log".into(), cx.rel(&dir.join("log.jsonl")))]),
        info: json!({
            "steps": records.len(),
            "first_loss": records.first().map(|r| r.loss),
            "final_loss": records.last().map(|r| r.loss),
            "training_pairs": real.len(),
        }),
    })
}

/// Segmenter checkpoint that the evaluation uses.
fn final_model_stage(m: &ExperimentManifest) -> StageId {
    if m.finetune && m.pipeline != PipelineKind::RealOnly {
        StageId::Finetune
    } else {
        StageId::Segment
    }
}

/// Predicts the real test split with `ckpt` and writes predictions and reports to `out`.
pub fn evaluate_checkpoint(
    ckpt: &NetworkCheckpoint,
    test: &[DatasetEntry],
    m: &ExperimentManifest,
    palette: &Palette,
    out: Option<&Path>,
) -> Result<MetricsReport> {
    if test.is_empty() {
        return Err(Error::Config("the real dataset has no test entries to evaluate on".into()));
    }
    let net = Segmenter::from_checkpoint(ckpt)?;
    let preds: Vec<LabelMap> = test
        .iter()
        .map(|e| segmenter::predict_sliding(&net, &e.image).map(|p| p.labels))
        .collect::<Result<_>>()?;
    let refs: Vec<(&LabelMap, &LabelMap)> = preds.iter().zip(test.iter().map(|e| &e.labels)).collect();
    let report = metrics::report_refs(&refs, &m.evaluation.subset, m.evaluation.averaging)?;
    if let Some(dir) = out {
        let pred_dir = dir.join("pred");
        fs::create_dir_all(&pred_dir).map_err(|e| Error::io(&pred_dir, e))?;
        for (e, p) in test.iter().zip(&preds) {
            label::save_map(p, palette, &pred_dir.join(format!("{}.png", e.id)))?;
        }
        write_json(&dir.join("metrics.json"), &report)?;
        let csv = dir.join("metrics.csv");
        fs::write(&csv, report.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let md = dir.join("metrics.md");
        fs::write(&md, report.to_markdown(&super::compare::column_label(m.pipeline, m.finetune)))
            .map_err(|e| Error::io(&md, e))?;
    }
    Ok(report)
}

fn stage_evaluate(cx: &Ctx) -> Result<StageOutput> {
    let dir = cx.stage_dir(StageId::Evaluate);
    let model = cx.stage_dir(final_model_stage(cx.m)).join("model.ckpt");
    let ck = NetworkCheckpoint::load(&model)?;
    let test = dataset::of_split(&cx.load(StageId::Data, "")?, Split::Test);
    let report = evaluate_checkpoint(&ck, &test, cx.m, &cx.palette, Some(&dir))?;
    Ok(StageOutput {
        artifacts: BTreeMap::from([
            ("metrics".into(), cx.rel(&dir.join("metrics.json"))),
            ("metrics_csv".into(), cx.rel(&dir.join("metrics.csv"))),
            ("metrics_md".into(), cx.rel(&dir.join("metrics.md"))),
            ("predictions".into(), cx.rel(&dir.join("pred"))),
        ]),
        info: json!({
            "test_pairs": test.len(),
            "average_jaccard": report.average_jaccard,
            "average_dice": report.average_dice,
            "split": split_summary(&test),
        }),
    })
}

fn run_stage(cx: &Ctx, s: StageId) -> Result<StageOutput> {
    let dir = cx.stage_dir(s);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    match s {
        StageId::Data => stage_data(cx),
        StageId::Augment => stage_augment(cx),
        StageId::Dots => stage_dots(cx),
        StageId::Gan => stage_gan(cx),
        StageId::DotsToLabels | StageId::LabelsToImages => stage_translator(cx, s),
        StageId::Generate => stage_generate(cx),
        StageId::Segment => stage_segment(cx),
        StageId::Finetune => stage_finetune(cx),
        StageId::Evaluate => stage_evaluate(cx),
    }
}

fn read_marker(path: &Path) -> Result<Option<StageMarker>> {
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(Some(serde_json::from_str(&text)?))
}

fn log_event(log: &mut File, value: serde_json::Value) -> Result<()> {
    writeln!(log, "{value}").map_err(|e| Error::io("run.log", e))
}

/// Runs the stages of `m` up to and including `until` (everything when `None`).
/// Returns the markers of the stages that ran or were resumed.
fn execute(m: &ExperimentManifest, until: Option<StageId>) -> Result<(PathBuf, BTreeMap<StageId, StageMarker>)> {
    m.validate()?;
    let order = StageGraph::for_manifest(m).order()?;
    if let Some(u) = until {
        if !order.contains(&u) {
            return Err(Error::Config(format!("pipeline `{}` has no `{}` stage", m.pipeline.name(), u.name())));
        }
    }
    let dir = m.run_dir();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let fp = m.fingerprint()?;
    let manifest_path = dir.join("manifest.toml");
    fs::write(&manifest_path, m.to_toml()?).map_err(|e| Error::io(&manifest_path, e))?;
    let log_path = dir.join("run.log");
    let mut log = OpenOptions::new().create(true).append(true).open(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let cx = Ctx { m, dir: dir.clone(), palette: Palette::standard() };
    let mut markers = BTreeMap::new();
    for s in order {
        let marker_path = cx.stage_dir(s).join("done.json");
        if let Some(mk) = read_marker(&marker_path)? {
            if mk.manifest_fingerprint != fp {
                return Err(Error::State(format!(
                    "{} holds artifacts of a different manifest; use a fresh output directory",
                    dir.display()
                ))
                .in_stage(s.name()));
            }
            if mk.artifacts.values().all(|p| dir.join(p).exists()) {
                log_event(&mut log, json!({ "event": "stage_skipped", "stage": s.name() }))?;
                markers.insert(s, mk);
                if Some(s) == until {
                    break;
                }
                continue;
            }
        }
        log_event(&mut log, json!({ "event": "stage_start", "stage": s.name() }))?;
        let t = Instant::now();
        let out = run_stage(&cx, s).map_err(|e| e.in_stage(s.name()))?;
        let secs = t.elapsed().as_secs_f64();
        let mk = StageMarker { stage: s, manifest_fingerprint: fp.clone(), wall_clock_s: secs, artifacts: out.artifacts, info: out.info };
        write_json(&marker_path, &mk).map_err(|e| e.in_stage(s.name()))?;
        log_event(&mut log, json!({ "event": "stage_done", "stage": s.name(), "seconds": secs }))?;
        markers.insert(s, mk);
        if Some(s) == until {
            break;
        }
    }
    Ok((dir, markers))
}

/// Runs stages up to `until` without assembling a record (e.g. generation only).
pub fn run_until(m: &ExperimentManifest, until: StageId) -> Result<PathBuf> {
    Ok(execute(m, Some(until))?.0)
}

fn info_usize(markers: &BTreeMap<StageId, StageMarker>, s: StageId, key: &str) -> usize {
    markers.get(&s).and_then(|mk| mk.info.get(key)).and_then(|v| v.as_u64()).unwrap_or(0) as usize
}

/// Runs the whole manifest and writes `record.json` in the run directory.
pub fn run(m: &ExperimentManifest) -> Result<RunRecord> {
    let (dir, markers) = execute(m, None)?;
    let metrics: MetricsReport = {
        let p = dir.join(StageId::Evaluate.name()).join("metrics.json");
        serde_json::from_str(&fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?)?
    };
    let validation = {
        let p = dir.join(StageId::Segment.name()).join("validation.json");
        if p.exists() {
            Some(serde_json::from_str(&fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?)?)
        } else {
            None
        }
    };
    let split: SplitSummary = serde_json::from_value(
        markers[&StageId::Evaluate].info.get("split").cloned().ok_or_else(|| Error::State("evaluation lacks split".into()))?,
    )?;
    let mut checkpoints = BTreeMap::new();
    let mut artifacts = BTreeMap::new();
    let mut wall = BTreeMap::new();
    let mut stage_info = BTreeMap::new();
    for (s, mk) in &markers {
        for (k, p) in &mk.artifacts {
            if k == "checkpoint" {
                checkpoints.insert(s.name().to_string(), p.clone());
            } else {
                artifacts.insert(format!("{}.{k}", s.name()), p.clone());
            }
        }
        wall.insert(s.name().to_string(), mk.wall_clock_s);
        stage_info.insert(s.name().to_string(), mk.info.clone());
    }
    let counts = ProtocolCounts {
        real_train: info_usize(&markers, StageId::Data, "real_train"),
        real_test: info_usize(&markers, StageId::Data, "real_test"),
        real_selected: info_usize(&markers, StageId::Augment, "real_selected"),
        augmented: info_usize(&markers, StageId::Augment, "augmented"),
        synth_pool: info_usize(&markers, StageId::Generate, "synth_pool"),
        synth_train: info_usize(&markers, StageId::Generate, "synth_train"),
        synth_val: info_usize(&markers, StageId::Generate, "synth_val"),
        segmenter_train: info_usize(&markers, StageId::Segment, "training_pairs"),
    };
    let probes = markers.get(&StageId::Generate).and_then(|mk| mk.info.get("probes").cloned());
    let record = RunRecord {
        name: m.name.clone(),
        pipeline: m.pipeline,
        regime: m.regime,
        finetune: m.finetune && m.pipeline != PipelineKind::RealOnly,
        manifest: m.clone(),
        manifest_fingerprint: m.fingerprint()?,
        run_dir: dir.clone(),
        checkpoints,
        artifacts,
        metrics,
        validation,
        wall_clock_s: wall,
        counts,
        probes,
        evaluation_split: split,
        stage_info,
    };
    for p in record.checkpoints.values().chain(record.artifacts.values()) {
        if !dir.join(p).exists() {
            return Err(Error::State(format!("artifact {} vanished before the record was written", p.display())));
        }
    }
    write_json(&dir.join("record.json"), &record)?;
    Ok(record)
}

/// Recomputes the test metrics from a record's final checkpoint.
pub fn reevaluate(record: &RunRecord) -> Result<MetricsReport> {
    let stage = final_model_stage(&record.manifest);
    let ck_path = record
        .checkpoint_path(stage.name())
        .ok_or_else(|| Error::State(format!("record lacks a `{}` checkpoint", stage.name())))?;
    let ck = NetworkCheckpoint::load(&ck_path)?;
    let palette = Palette::standard();
    let data = dataset::load_dataset(
        &record.run_dir.join(StageId::Data.name()),
        None,
        &LoadOptions { intensity_bits: None, palette: Some(palette.clone()) },
    )?;
    let test = dataset::of_split(&data, Split::Test);
    evaluate_checkpoint(&ck, &test, &record.manifest, &palette, None)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn graphs_are_acyclic_and_ordered() {
        for pipeline in [PipelineKind::RealOnly, PipelineKind::SingleStage, PipelineKind::TwoStage, PipelineKind::ThreeStage] {
            for finetune in [false, true] {
                let m = ExperimentManifest { pipeline, finetune, ..Default::default() };
                let order = StageGraph::for_manifest(&m).order().unwrap();
                assert_eq!(order.first(), Some(&StageId::Data));
                assert_eq!(order.last(), Some(&StageId::Evaluate));
                let has_ft = order.contains(&StageId::Finetune);
                assert_eq!(has_ft, finetune && pipeline != PipelineKind::RealOnly);
            }
        }
        let m = ExperimentManifest::default();
        let three = StageGraph::for_manifest(&m).order().unwrap();
        assert!(three.contains(&StageId::Dots) && three.contains(&StageId::DotsToLabels));
    }

    #[test]
    fn cycles_and_missing_deps_rejected() {
        let g = StageGraph { nodes: vec![(StageId::Data, vec![StageId::Augment]), (StageId::Augment, vec![StageId::Data])] };
        assert!(matches!(g.order(), Err(Error::Config(_))));
        let g = StageGraph { nodes: vec![(StageId::Augment, vec![StageId::Data])] };
        assert!(matches!(g.order(), Err(Error::Config(_))));
    }
}
