//! Flat key=value run configuration with dotted sections. Every key is
//! schema-checked; unknown keys are rejected with their line number so a
//! typo never silently falls back to a default.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use mvaformer_core::data::SceneConfig;
use mvaformer_core::model::{CoopMode, ModelConfig, SublayerCombo};
use mvaformer_core::train::TrainConfig;
use mvaformer_core::{Error, Result};

/// Resolved configuration for a whole run: dataset, training, model, and
/// the train/eval split fraction. `data.seed` and `train.seed` can be set
/// independently; the global `--seed` flag overrides both.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub scene: SceneConfig,
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub split: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let scene = SceneConfig::default();
        let model = ModelConfig {
            views: scene.views,
            classes: scene.classes,
            ..ModelConfig::default()
        };
        RunConfig {
            scene,
            train: TrainConfig::default(),
            model,
            split: 0.8,
        }
    }
}

impl RunConfig {
    /// Parses a config file, applying each line over the defaults.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_str(&text)
    }

    pub fn from_str(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, val) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("expected key=value, got {line:?}"),
            })?;
            cfg.set(key.trim(), val.trim()).map_err(|e| match e {
                Error::Config(msg) => Error::Parse { line: i + 1, msg },
                other => other,
            })?;
        }
        Ok(cfg)
    }

    /// Applies one key. Command-line overrides reuse this after the file is
    /// read, so the merge order is file first, flags second.
    pub fn set(&mut self, key: &str, val: &str) -> Result<()> {
        let bad = |msg: &str| Error::Config(format!("{key}: {msg} ({val:?})"));
        macro_rules! num {
            () => {
                val.parse().map_err(|_| bad("invalid number"))?
            };
        }
        match key {
            "seed" => {
                let s: u64 = num!();
                self.scene.seed = s;
                self.train.seed = s;
            }
            "split" => self.split = num!(),

            "data.classes" => self.scene.classes = num!(),
            "data.corruption" => self.scene.corruption = num!(),
            "data.frames" => self.scene.frames = num!(),
            "data.height" => self.scene.height = num!(),
            "data.keyframes" => self.scene.keyframes = num!(),
            "data.occluder_max" => self.scene.occluder_max = num!(),
            "data.occluder_min" => self.scene.occluder_min = num!(),
            "data.occluders" => self.scene.occluders = num!(),
            "data.persons_max" => self.scene.persons_max = num!(),
            "data.persons_min" => self.scene.persons_min = num!(),
            "data.pulse_prob" => self.scene.pulse_prob = num!(),
            "data.scenes" => self.scene.scenes = num!(),
            "data.seed" => self.scene.seed = num!(),
            "data.views" => self.scene.views = num!(),
            "data.width" => self.scene.width = num!(),

            "train.batch_size" => self.train.batch_size = num!(),
            "train.epochs" => self.train.epochs = num!(),
            "train.lr0" => self.train.lr0 = num!(),
            "train.lr_min" => self.train.lr_min = num!(),
            "train.seed" => self.train.seed = num!(),
            "train.threshold" => self.train.threshold = num!(),
            "train.weight_decay" => self.train.weight_decay = num!(),

            "model.channels" => self.model.channels = num!(),
            "model.classes" => self.model.classes = num!(),
            "model.combo" => self.model.combo = SublayerCombo::parse(val)?,
            "model.dropout" => self.model.dropout = num!(),
            "model.heads" => self.model.heads = num!(),
            "model.layers" => self.model.layers = num!(),
            "model.ln_eps" => self.model.ln_eps = num!(),
            "model.mode" => self.model.mode = CoopMode::parse(val)?,
            "model.patch" => self.model.patch = num!(),
            "model.views" => self.model.views = num!(),

            other => return Err(Error::Config(format!("unknown config key {other}"))),
        }
        Ok(())
    }

    /// The fully resolved configuration, one sorted key per line. Parsing
    /// this text back reproduces `self` exactly.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for line in self.scene.to_kv().lines() {
            let _ = writeln!(s, "data.{line}");
        }
        let _ = writeln!(s, "model.channels={}", self.model.channels);
        let _ = writeln!(s, "model.classes={}", self.model.classes);
        let _ = writeln!(s, "model.combo={}", self.model.combo.as_str());
        let _ = writeln!(s, "model.dropout={}", self.model.dropout);
        let _ = writeln!(s, "model.heads={}", self.model.heads);
        let _ = writeln!(s, "model.layers={}", self.model.layers);
        let _ = writeln!(s, "model.ln_eps={}", self.model.ln_eps);
        let _ = writeln!(s, "model.mode={}", self.model.mode.as_str());
        let _ = writeln!(s, "model.patch={}", self.model.patch);
        let _ = writeln!(s, "model.views={}", self.model.views);
        let _ = writeln!(s, "split={}", self.split);
        let _ = writeln!(s, "train.batch_size={}", self.train.batch_size);
        let _ = writeln!(s, "train.epochs={}", self.train.epochs);
        let _ = writeln!(s, "train.lr0={}", self.train.lr0);
        let _ = writeln!(s, "train.lr_min={}", self.train.lr_min);
        let _ = writeln!(s, "train.seed={}", self.train.seed);
        let _ = writeln!(s, "train.threshold={}", self.train.threshold);
        let _ = writeln!(s, "train.weight_decay={}", self.train.weight_decay);
        s
    }
}
