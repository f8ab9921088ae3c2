//! Fully resolved run configuration: world, renderer, reward metric,
//! training hyperparameters and paths, merged from defaults, a preset, a
//! config file and per-key overrides (later layers win).

use std::path::PathBuf;

use crate::config::{parse_value, KeyValues};
use crate::error::{Error, Result};
use crate::render::{Backend, RendererConfig};
use crate::similarity::{MetricKind, SimilarityMetric};
use crate::trainer::TrainConfig;
use crate::world::{Color, WorldConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Toy,
    Paper,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Toy => "toy",
            Preset::Paper => "paper",
        }
    }

    pub fn from_name(s: &str) -> Option<Preset> {
        match s {
            "toy" => Some(Preset::Toy),
            "paper" => Some(Preset::Paper),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub preset: Preset,
    pub world: WorldConfig,
    pub renderer: RendererConfig,
    pub metric: SimilarityMetric,
    pub train: TrainConfig,
    pub dataset: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::preset(Preset::Toy)
    }
}

impl RunConfig {
    pub fn preset(preset: Preset) -> RunConfig {
        RunConfig {
            preset,
            world: WorldConfig::default(),
            renderer: RendererConfig::default(),
            metric: SimilarityMetric::default(),
            train: match preset {
                Preset::Toy => TrainConfig::default(),
                Preset::Paper => TrainConfig::paper(),
            },
            dataset: PathBuf::from("scenes.jsonl"),
            out_dir: PathBuf::from("out"),
        }
    }

    /// Defaults for the preset named in `layers` (or `toy`), then every layer
    /// in order.
    pub fn resolve(layers: &[KeyValues]) -> Result<RunConfig> {
        let mut merged = KeyValues::new();
        for l in layers {
            merged.merge(l);
        }
        let preset = match merged.get("run.preset") {
            Some(p) => Preset::from_name(p)
                .ok_or_else(|| Error::Config(format!("run.preset: unknown preset {p:?}")))?,
            None => Preset::Toy,
        };
        let mut cfg = RunConfig::preset(preset);
        for (k, v) in merged.iter() {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.renderer.validate()?;
        self.train.validate()?;
        if !(0.0..=1.0).contains(&self.metric.blend_weight) {
            return Err(Error::Config(
                "reward.blend_weight must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let color = || {
            Color::from_name(value)
                .ok_or_else(|| Error::Config(format!("{key}: unknown colour {value:?}")))
        };
        match key {
            "run.preset" => {
                self.preset = Preset::from_name(value)
                    .ok_or_else(|| Error::Config(format!("{key}: unknown preset {value:?}")))?
            }
            "world.grid" => {
                self.world.grid = parse_value(key, value)?;
                self.renderer.grid = self.world.grid;
            }
            "world.min_objects" => self.world.min_objects = parse_value(key, value)?,
            "world.max_objects" => self.world.max_objects = parse_value(key, value)?,
            "world.max_relations" => self.world.max_relations = parse_value(key, value)?,
            "world.background" => self.world.background = color()?,
            "render.backend" => {
                self.renderer.backend = Backend::from_name(value)
                    .ok_or_else(|| Error::Config(format!("{key}: unknown backend {value:?}")))?
            }
            "render.jitter_sigma" => self.renderer.jitter_sigma = parse_value(key, value)?,
            "render.width" => self.renderer.width = parse_value(key, value)?,
            "render.height" => self.renderer.height = parse_value(key, value)?,
            "render.background" => self.renderer.background = color()?,
            "reward.metric" => {
                self.metric.kind = MetricKind::from_name(value)
                    .ok_or_else(|| Error::Config(format!("{key}: unknown metric {value:?}")))?
            }
            "reward.blend_weight" => self.metric.blend_weight = parse_value(key, value)?,
            "reward.projection_seed" => self.metric.projection_seed = parse_value(key, value)?,
            "paths.dataset" => self.dataset = PathBuf::from(value),
            "paths.out_dir" => self.out_dir = PathBuf::from(value),
            k if k.starts_with("train.") => {
                if !self.train.set(k, value)? {
                    return Err(Error::Config(format!("unknown key {k}")));
                }
            }
            _ => return Err(Error::Config(format!("unknown key {key}"))),
        }
        Ok(())
    }

    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = self.train.to_key_values();
        kv.set("run.preset", self.preset.name());
        kv.set("world.grid", self.world.grid);
        kv.set("world.min_objects", self.world.min_objects);
        kv.set("world.max_objects", self.world.max_objects);
        kv.set("world.max_relations", self.world.max_relations);
        kv.set("world.background", self.world.background.name());
        kv.set("render.backend", self.renderer.backend.name());
        kv.set("render.jitter_sigma", self.renderer.jitter_sigma);
        kv.set("render.width", self.renderer.width);
        kv.set("render.height", self.renderer.height);
        kv.set("render.background", self.renderer.background.name());
        kv.set("reward.metric", self.metric.kind.name());
        kv.set("reward.blend_weight", self.metric.blend_weight);
        kv.set("reward.projection_seed", self.metric.projection_seed);
        kv.set("paths.dataset", self.dataset.display());
        kv.set("paths.out_dir", self.out_dir.display());
        kv
    }
}
