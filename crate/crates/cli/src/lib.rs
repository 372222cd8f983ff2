//! Library surface behind the `mvaf` binary: config resolution, the five
//! commands, and PPM heatmap export. Kept as a library so integration
//! tests can drive the exact code paths the binary runs.

pub mod config;
pub mod ppm;

use std::fs;
use std::path::Path;

use mvaformer_core::data::{read_annotations, split_dataset, Annotation, Dataset};
use mvaformer_core::encoder::BoundingBox;
use mvaformer_core::model::{self, ModelConfig};
use mvaformer_core::nn::{write_attention_csv, AttentionRecord};
use mvaformer_core::params::ParamStore;
use mvaformer_core::train::{
    build_samples, comparison_to_csv, evaluate, load_clips, log_to_lines, run_baselines, train,
    BaselineData, TrainSample,
};
use mvaformer_core::{Error, Result, Tape};

pub use config::RunConfig;

/// Worker cap from `MVAF_THREADS`. All commands run their hot loops
/// sequentially, so the cap only needs to be validated and respected as an
/// upper bound; an unset variable means "no restriction".
pub fn max_threads() -> Result<usize> {
    match std::env::var("MVAF_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::Config(format!(
                "MVAF_THREADS must be a positive integer, got {v:?}"
            ))),
        },
        Err(_) => Ok(usize::MAX),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent.display().to_string(), e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Generates the dataset described by `cfg.scene` into `out`. Deterministic
/// in the config, so rerunning over the same directory is idempotent.
pub fn cmd_gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    max_threads()?;
    mvaformer_core::data::generate_dataset(&cfg.scene, out)?;
    Ok(())
}

/// The train/eval partition every command agrees on: seeded by the training
/// seed so downstream commands can reconstruct it from the config alone.
pub fn resolve_split(cfg: &RunConfig, data_dir: &Path) -> Result<(Dataset, Vec<Annotation>, Vec<Annotation>)> {
    let dataset = Dataset::open(data_dir)?;
    let (train_rows, eval_rows) =
        split_dataset(&dataset.annotations, cfg.split, cfg.train.seed)?;
    Ok((dataset, train_rows, eval_rows))
}

fn samples_and_clips(
    cfg: &RunConfig,
    dataset: &Dataset,
    rows: &[Annotation],
) -> Result<(Vec<TrainSample>, mvaformer_core::train::ClipMap<f32>)> {
    let samples = build_samples(rows, cfg.model.views, cfg.model.classes);
    let clips = load_clips(dataset, &samples)?;
    Ok((samples, clips))
}

/// Trains on the train split and writes `<out>` (checkpoint) plus
/// `<out>.log.csv` (per-batch loss curve).
pub fn cmd_train(cfg: &RunConfig, data_dir: &Path, out: &Path) -> Result<()> {
    max_threads()?;
    cfg.validate_for_data()?;
    let (dataset, train_rows, _) = resolve_split(cfg, data_dir)?;
    let (samples, clips) = samples_and_clips(cfg, &dataset, &train_rows)?;
    let (params, log) = train(&clips, &samples, &cfg.model, &cfg.train)?;
    let mut buf = Vec::new();
    params.write_to(&mut buf)?;
    write_file(out, &buf)?;
    let log_path = out.with_extension("log.csv");
    write_file(&log_path, log_to_lines(&log).as_bytes())?;
    Ok(())
}

/// Evaluates a checkpoint on the eval split and writes a per-class metric
/// CSV to `out`.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, data_dir: &Path, out: &Path) -> Result<()> {
    max_threads()?;
    cfg.validate_for_data()?;
    let params = read_checkpoint(checkpoint)?;
    let (dataset, _, eval_rows) = resolve_split(cfg, data_dir)?;
    let (samples, clips) = samples_and_clips(cfg, &dataset, &eval_rows)?;
    let report = evaluate(&params, &cfg.model, &clips, &samples, cfg.train.threshold)?;
    write_file(out, report.to_csv().as_bytes())?;
    Ok(())
}

/// Trains and evaluates all five methods and writes the comparison CSV.
pub fn cmd_compare(cfg: &RunConfig, data_dir: &Path, out: &Path) -> Result<()> {
    max_threads()?;
    cfg.validate_for_data()?;
    let (dataset, train_rows, eval_rows) = resolve_split(cfg, data_dir)?;
    let train_samples = build_samples(&train_rows, cfg.model.views, cfg.model.classes);
    let eval_samples = build_samples(&eval_rows, cfg.model.views, cfg.model.classes);
    let mut all = train_samples.clone();
    all.extend(eval_samples.iter().cloned());
    let clips = load_clips(&dataset, &all)?;
    let data = BaselineData {
        clips,
        train: train_samples,
        eval: eval_samples,
        frames: dataset.config.frames,
        height: dataset.config.height,
        width: dataset.config.width,
    };
    let results = run_baselines(&data, &cfg.model, &cfg.train)?;
    write_file(out, comparison_to_csv(&results).as_bytes())?;
    Ok(())
}

fn read_checkpoint(path: &Path) -> Result<ParamStore<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    ParamStore::read_from(&mut bytes.as_slice())
}

/// Attention weights for one person at one keyframe: CSV plus one grayscale
/// heatmap per (layer, head, kind).
pub struct AttentionDump {
    pub records: Vec<AttentionRecord<f32>>,
    /// Views where the person's box was MISSING (zero-padded input).
    pub missing_views: Vec<usize>,
}

/// Runs a recorded forward pass for `(clip, keyframe, person)`.
pub fn dump_attention(
    cfg: &RunConfig,
    params: &ParamStore<f32>,
    dataset: &Dataset,
    clip: &str,
    keyframe: usize,
    person: usize,
) -> Result<AttentionDump> {
    let mut boxes: Vec<Option<BoundingBox>> = vec![None; cfg.model.views];
    let mut seen = false;
    let mut missing_views = Vec::new();
    for a in &dataset.annotations {
        if a.clip == clip && a.keyframe == keyframe && a.person == person {
            if a.view >= cfg.model.views {
                return Err(Error::Contract(format!(
                    "annotation view {} outside model's {} views",
                    a.view, cfg.model.views
                )));
            }
            seen = true;
            boxes[a.view] = a.bbox;
            if a.bbox.is_none() {
                missing_views.push(a.view);
            }
        }
    }
    if !seen {
        return Err(Error::Lookup(format!(
            "no annotation for clip {clip}, keyframe {keyframe}, person {person}"
        )));
    }
    let video = dataset.load_clip(clip)?;
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let fw = model::forward(&tape, &bound, &cfg.model, &video.views, &[boxes], true, None)?;
    Ok(AttentionDump {
        records: fw.into_iter().next().expect("one person").records,
        missing_views,
    })
}

/// Writes `attention.csv` plus `layer{l}_head{h}_{kind}.ppm` heatmaps of
/// the query block for `query_view` into `out_dir`.
pub fn cmd_dump_attention(
    cfg: &RunConfig,
    checkpoint: &Path,
    data_dir: &Path,
    clip: &str,
    keyframe: usize,
    person: usize,
    query_view: usize,
    out_dir: &Path,
) -> Result<()> {
    max_threads()?;
    if query_view >= cfg.model.views {
        return Err(Error::Contract(format!(
            "query view {query_view} outside {} views",
            cfg.model.views
        )));
    }
    let params = read_checkpoint(checkpoint)?;
    let dataset = Dataset::open(data_dir)?;
    let dump = dump_attention(cfg, &params, &dataset, clip, keyframe, person)?;

    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let mut csv = Vec::new();
    write_attention_csv(&mut csv, &dump.records)?;
    write_file(&out_dir.join("attention.csv"), &csv)?;

    for rec in &dump.records {
        let img = ppm::attention_heatmap(rec, query_view)?;
        let name = format!(
            "layer{}_head{}_{}.ppm",
            rec.layer,
            rec.head,
            rec.kind.as_str()
        );
        write_file(&out_dir.join(name), &img)?;
    }
    Ok(())
}

/// Restores annotations for sanity checks without opening the whole dataset.
pub fn peek_annotations(data_dir: &Path) -> Result<Vec<Annotation>> {
    read_annotations(&data_dir.join("annotations.csv"))
}

/// Shared between `train`/`eval`/`compare`: model geometry must match the
/// dataset geometry the annotations were generated with.
impl RunConfig {
    pub fn validate_for_data(&self) -> Result<()> {
        self.scene.validate()?;
        self.train.validate()?;
        self.model.validate()?;
        if self.model.views != self.scene.views {
            return Err(Error::Config(format!(
                "model.views {} != data.views {}",
                self.model.views, self.scene.views
            )));
        }
        if self.model.classes != self.scene.classes {
            return Err(Error::Config(format!(
                "model.classes {} != data.classes {}",
                self.model.classes, self.scene.classes
            )));
        }
        if !(0.0 < self.split && self.split < 1.0) {
            return Err(Error::Config(format!(
                "split must be in (0, 1), got {}",
                self.split
            )));
        }
        Ok(())
    }
}

/// Fails fast with a config error when the model disagrees with itself.
pub fn default_model_for(scene_views: usize, scene_classes: usize) -> ModelConfig {
    ModelConfig {
        views: scene_views,
        classes: scene_classes,
        ..ModelConfig::default()
    }
}
