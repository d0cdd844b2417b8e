//! Command-line surface.
//!
//! Stage verbs (`augment`, `train-gan`, ...) run the manifest's stage graph up
//! to that stage inside `runs/<name>/`, resuming whatever already exists. The
//! remaining verbs work on explicit files and directories.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::dataset::{self, LoadOptions, PhantomConfig};
use crate::error::{Error, Result};
use crate::label::{self, LabelMap, Palette};
use crate::metrics::{self, Averaging, DEFAULT_SUBSET};
use crate::nn::segmenter::{self, Segmenter};
use crate::nn::translator::{self, Target};
use crate::nn::{gan, NetworkCheckpoint};
use crate::pipeline::manifest::{parse_with_overrides, DataSource};
use crate::pipeline::run::{self as runner, RunRecord, StageId};
use crate::pipeline::{compare, ExperimentManifest, PipelineKind};
use crate::raster::GrayImage;

#[derive(Parser, Debug)]
#[command(name = "cxrgen", version, about = "Synthetic chest radiograph generation and segmentation experiments")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    /// Experiment manifest (TOML).
    #[arg(long = "config", visible_alias = "manifest", value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override a manifest key, e.g. `--set segmenter.steps=50`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Direction {
    DotsToLabels,
    LabelsToImages,
}

#[derive(Subcommand, Debug)]
enum Verb {
    /// Write a synthetic phantom dataset.
    PreparePhantoms {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Validate a directory dataset and write it in canonical form.
    Ingest {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        root: PathBuf,
        #[arg(long)]
        split_file: Option<PathBuf>,
        #[arg(long)]
        intensity_bits: Option<u8>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Select and augment the real training pairs.
    Augment(ConfigArgs),
    /// Derive centroid dot maps from the augmented pairs.
    ExtractDots(ConfigArgs),
    /// Train the progressive generator of the manifest's pipeline.
    TrainGan(ConfigArgs),
    /// Draw samples from a generator checkpoint.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the conditional translators of the manifest's pipeline.
    TrainTranslator {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_enum)]
        direction: Option<Direction>,
    },
    /// Translate a directory of label maps with a translator checkpoint.
    Translate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the segmenter (on synthetic pairs, or real ones for `real_only`).
    TrainSeg(ConfigArgs),
    /// Fine-tune the pretrained segmenter on the real pairs.
    FinetuneSeg(ConfigArgs),
    /// Produce the synthetic pool and its train/validation subsets.
    Generate(ConfigArgs),
    /// Segment every PNG image of a directory.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predicted label maps against targets with matching file names.
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        target: PathBuf,
        /// Report directory; defaults to the prediction directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the whole manifest and write the run record.
    Run(ConfigArgs),
    /// Tabulate several run records.
    Compare {
        #[arg(required = true)]
        records: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum Failure {
    Usage(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

/// Parses `args` (including the program name) and runs the verb; returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.verb) {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            eprintln!("{}", error_record(&Error::Config(msg.clone())));
            2
        }
        Err(Failure::Run(e)) => {
            eprintln!("{}", error_record(&e));
            1
        }
    }
}

fn error_record(e: &Error) -> serde_json::Value {
    let (stage, inner) = match e {
        Error::Stage { stage, source } => (Some(stage.as_str()), source.as_ref()),
        other => (None, other),
    };
    json!({ "error": { "kind": inner.kind(), "stage": stage, "message": e.to_string() } })
}

fn manifest(cfg: &ConfigArgs) -> std::result::Result<ExperimentManifest, Failure> {
    let path = cfg.config.as_ref().ok_or_else(|| Failure::Usage("this verb needs --config <PATH>".into()))?;
    if !path.is_file() {
        return Err(Failure::Usage(format!("manifest {} does not exist", path.display())));
    }
    Ok(ExperimentManifest::load(path, &cfg.set)?)
}

fn optional_manifest(cfg: &ConfigArgs) -> std::result::Result<ExperimentManifest, Failure> {
    if cfg.config.is_some() {
        manifest(cfg)
    } else {
        let defaults = ExperimentManifest::default().to_toml()?;
        Ok(parse_with_overrides::<ExperimentManifest>(&defaults, &cfg.set)?)
    }
}

fn stage_verb(cfg: &ConfigArgs, stage: StageId) -> std::result::Result<(), Failure> {
    let m = manifest(cfg)?;
    let dir = runner::run_until(&m, stage)?;
    println!("{}", dir.join(stage.name()).display());
    Ok(())
}

fn png_files(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")) {
            let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            out.push((stem, p));
        }
    }
    out.sort();
    Ok(out)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn dispatch(verb: Verb) -> std::result::Result<(), Failure> {
    let palette = Palette::standard();
    match verb {
        Verb::PreparePhantoms { cfg, out } => {
            let m = optional_manifest(&cfg)?;
            let p = match m.data {
                DataSource::Phantoms(p) => p,
                DataSource::Directory { .. } => PhantomConfig::default(),
            };
            let entries = dataset::make_phantoms(&p)?;
            dataset::save_dataset(&entries, &out, &palette)?;
            let (train, test) = dataset::split_counts(&entries);
            println!("{}", json!({ "out": out, "train": train, "test": test }));
        }
        Verb::Ingest { cfg, root, split_file, intensity_bits, out } => {
            let _ = optional_manifest(&cfg)?;
            let entries = dataset::load_dataset(
                &root,
                split_file.as_deref(),
                &LoadOptions { intensity_bits, palette: Some(palette.clone()) },
            )?;
            dataset::save_dataset(&entries, &out, &palette)?;
            let (train, test) = dataset::split_counts(&entries);
            println!("{}", json!({ "out": out, "train": train, "test": test }));
        }
        Verb::Augment(cfg) => stage_verb(&cfg, StageId::Augment)?,
        Verb::ExtractDots(cfg) => stage_verb(&cfg, StageId::Dots)?,
        Verb::TrainGan(cfg) => stage_verb(&cfg, StageId::Gan)?,
        Verb::TrainTranslator { cfg, direction } => {
            let m = manifest(&cfg)?;
            let stages: Vec<StageId> = match (direction, m.pipeline) {
                (Some(Direction::DotsToLabels), _) => vec![StageId::DotsToLabels],
                (Some(Direction::LabelsToImages), _) => vec![StageId::LabelsToImages],
                (None, PipelineKind::ThreeStage) => vec![StageId::DotsToLabels, StageId::LabelsToImages],
                (None, _) => vec![StageId::LabelsToImages],
            };
            for s in stages {
                stage_verb(&cfg, s)?;
            }
        }
        Verb::Sample { checkpoint, count, seed, out } => {
            let ck = NetworkCheckpoint::load(&checkpoint)?;
            let grids = gan::sample(&ck, count, seed)?;
            create_dir(&out)?;
            for (i, g) in grids.iter().enumerate() {
                match g.channels {
                    1 => label::save_map(&gan::decode_labels(g)?, &palette, &out.join(format!("sample_{i:05}.png")))?,
                    _ => {
                        let (img, lab) = label::unstack_pair(g)?;
                        img.save_png(&out.join(format!("sample_{i:05}_image.png")))?;
                        label::save_map(&lab, &palette, &out.join(format!("sample_{i:05}.png")))?;
                    }
                }
            }
            println!("{}", json!({ "out": out, "samples": grids.len() }));
        }
        Verb::Translate { checkpoint, input, out } => {
            let ck = NetworkCheckpoint::load(&checkpoint)?;
            let files = png_files(&input)?;
            let sources: Vec<LabelMap> = files.iter().map(|(_, p)| label::load_map(p, &palette)).collect::<Result<_>>()?;
            let targets = translator::translate(&ck, &sources)?;
            create_dir(&out)?;
            for ((id, _), t) in files.iter().zip(&targets) {
                let p = out.join(format!("{id}.png"));
                match t {
                    Target::Labels(m) => label::save_map(m, &palette, &p)?,
                    Target::Image(i) => i.save_png(&p)?,
                }
            }
            println!("{}", json!({ "out": out, "translated": targets.len() }));
        }
        Verb::TrainSeg(cfg) => stage_verb(&cfg, StageId::Segment)?,
        Verb::FinetuneSeg(cfg) => {
            let m = manifest(&cfg)?;
            if !m.finetune || m.pipeline == PipelineKind::RealOnly {
                return Err(Failure::Usage("fine-tuning needs a synthetic pipeline with `finetune = true`".into()));
            }
            stage_verb(&cfg, StageId::Finetune)?
        }
        Verb::Generate(cfg) => stage_verb(&cfg, StageId::Generate)?,
        Verb::Predict { checkpoint, images, out } => {
            let net = Segmenter::from_checkpoint(&NetworkCheckpoint::load(&checkpoint)?)?;
            create_dir(&out)?;
            let files = png_files(&images)?;
            for (id, p) in &files {
                let img = GrayImage::load(p, None)?;
                let pred = segmenter::predict_sliding(&net, &img)?;
                label::save_map(&pred.labels, &palette, &out.join(format!("{id}.png")))?;
            }
            println!("{}", json!({ "out": out, "predicted": files.len() }));
        }
        Verb::Evaluate { cfg, pred, target, out } => {
            let (subset, averaging) = match cfg.config {
                Some(_) => {
                    let m = manifest(&cfg)?;
                    (m.evaluation.subset, m.evaluation.averaging)
                }
                None => (DEFAULT_SUBSET.to_vec(), Averaging::Micro),
            };
            let mut pairs = Vec::new();
            for (id, p) in png_files(&pred)? {
                let t = target.join(format!("{id}.png"));
                if !t.exists() {
                    return Err(Error::Ingestion(format!("no target map for prediction `{id}`")).into());
                }
                pairs.push((label::load_map(&p, &palette)?, label::load_map(&t, &palette)?));
            }
            if pairs.is_empty() {
                return Err(Error::Ingestion(format!("{} holds no PNG predictions", pred.display())).into());
            }
            let report = metrics::report_with(&pairs, &subset, averaging)?;
            let out = out.unwrap_or(pred);
            create_dir(&out)?;
            let write = |name: &str, text: String| -> Result<()> {
                let p = out.join(name);
                fs::write(&p, text).map_err(|e| Error::io(&p, e))
            };
            write("metrics.csv", report.to_csv())?;
            write("metrics.md", report.to_markdown("Prediction"))?;
            write("metrics.json", serde_json::to_string_pretty(&report).map_err(Error::from)?)?;
            println!("{}", report.to_markdown("Prediction"));
        }
        Verb::Run(cfg) => {
            let m = manifest(&cfg)?;
            let record = runner::run(&m)?;
            println!(
                "{}",
                json!({
                    "record": record.run_dir.join("record.json"),
                    "average_jaccard": record.metrics.average_jaccard,
                    "average_dice": record.metrics.average_dice,
                })
            );
        }
        Verb::Compare { records, out } => {
            let loaded: Vec<RunRecord> = records.iter().map(|p| RunRecord::load(p)).collect::<Result<_>>()?;
            let table = compare::compare(&loaded)?;
            let mut text = table.markdown.clone();
            for n in &table.notes {
                text.push_str(&format!("\nNote: {n}\n"));
            }
            match out {
                Some(p) => fs::write(&p, &text).map_err(|e| Error::io(&p, e))?,
                None => {
                    let mut stdout = std::io::stdout();
                    stdout.write_all(text.as_bytes()).map_err(|e| Error::io("stdout", e))?;
                }
            }
        }
    }
    Ok(())
}
