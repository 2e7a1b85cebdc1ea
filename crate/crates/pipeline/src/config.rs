//! Run configuration: one TOML file with a top-level section and one typed
//! table per stage.
//!
//! The global `seed`, `k` and `m` are declared once at the top level and
//! propagated into the stage configs; stage tables may not set them.

use std::path::{Path, PathBuf};

use cariface_models::checkpoint::stream_seed;
use cariface_models::parsing::ParseTrainConfig;
use cariface_models::shape::ShapeTrainConfig;
use cariface_models::texture::{PerceptualConfig, TextureTrainConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{PipelineError, Result};

/// Independent RNG streams derived from the global seed.
pub(crate) mod streams {
    pub const SHAPE: u64 = 1;
    pub const TEXTURE: u64 = 2;
    pub const PARSER: u64 = 3;
    pub const CLUSTER: u64 = 4;
    pub const SYNTHESIS: u64 = 5;
    pub const TEXTURE_INPUTS: u64 = 6;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    /// Labelled source photos.
    pub photos: PathBuf,
    /// Unlabelled target caricatures.
    pub caricatures: PathBuf,
    /// Annotated caricatures held out for evaluation.
    pub eval: PathBuf,
    /// Landmark grouping file; the built-in grouping when absent.
    #[serde(default)]
    pub grouping: Option<PathBuf>,
}

/// Sizes of the generated toy datasets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyDataConfig {
    pub photos: usize,
    pub caricatures: usize,
    pub eval: usize,
    pub size: usize,
    /// Data seed, kept apart from the training seed so runs with different
    /// training seeds share one dataset.
    pub seed: u64,
}

impl Default for ToyDataConfig {
    fn default() -> Self {
        ToyDataConfig {
            photos: 64,
            caricatures: 64,
            eval: 64,
            size: 64,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub seed: u64,
    pub workspace: PathBuf,
    pub k: usize,
    pub m: usize,
    pub data: DataPaths,
    pub toy: ToyDataConfig,
    /// Landmark-map resolution for shape adaptation.
    pub shape_canvas: usize,
    pub shape: ShapeTrainConfig,
    pub texture: TextureTrainConfig,
    pub perceptual: PerceptualConfig,
    /// Optional external weights for the perceptual extractor.
    pub perceptual_weights: Option<PathBuf>,
    pub parser: ParseTrainConfig,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    seed: u64,
    workspace: PathBuf,
    k: usize,
    m: usize,
    data: DataPaths,
    #[serde(default)]
    toy: ToyDataConfig,
    #[serde(default)]
    shape: toml::Table,
    #[serde(default)]
    texture: toml::Table,
    #[serde(default)]
    perceptual: toml::Table,
    #[serde(default)]
    parser: toml::Table,
}

fn section<T: DeserializeOwned>(name: &str, table: toml::Table, reserved: &[&str]) -> Result<T> {
    for key in reserved {
        if table.contains_key(*key) {
            return Err(PipelineError::config(format!(
                "[{name}] may not set `{key}`; it is derived from the top-level settings"
            )));
        }
    }
    toml::Value::Table(table)
        .try_into()
        .map_err(|e| PipelineError::config(format!("[{name}]: {e}")))
}

impl PipelineConfig {
    /// Parses a config; relative paths are resolved against `base`.
    pub fn from_toml(text: &str, base: &Path) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| PipelineError::config(e.to_string()))?;
        let mut shape_table = raw.shape;
        let shape_canvas = match shape_table.remove("canvas") {
            None => 64,
            Some(v) => v
                .as_integer()
                .filter(|&c| c > 0)
                .ok_or_else(|| PipelineError::config("[shape] canvas must be a positive integer"))?
                as usize,
        };
        let mut perceptual_table = raw.perceptual;
        let perceptual_weights = match perceptual_table.remove("weights") {
            None => None,
            Some(v) => {
                Some(PathBuf::from(v.as_str().ok_or_else(|| {
                    PipelineError::config("[perceptual] weights must be a path")
                })?))
            }
        };
        let resolve = |p: PathBuf| if p.is_absolute() { p } else { base.join(p) };
        let mut cfg = PipelineConfig {
            seed: raw.seed,
            workspace: resolve(raw.workspace),
            k: raw.k,
            m: raw.m,
            data: DataPaths {
                photos: resolve(raw.data.photos),
                caricatures: resolve(raw.data.caricatures),
                eval: resolve(raw.data.eval),
                grouping: raw.data.grouping.map(resolve),
            },
            toy: raw.toy,
            shape_canvas,
            shape: section("shape", shape_table, &["k", "seed"])?,
            texture: section("texture", raw.texture, &["m", "seed"])?,
            perceptual: section("perceptual", perceptual_table, &[])?,
            perceptual_weights: perceptual_weights.map(resolve),
            parser: section("parser", raw.parser, &["seed"])?,
        };
        cfg.apply_seed(raw.seed);
        cfg.shape.k = cfg.k;
        cfg.texture.m = cfg.m;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base)
    }

    /// Sets the global seed and re-derives every stage seed from it.
    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.shape.seed = stream_seed(seed, streams::SHAPE);
        self.texture.seed = stream_seed(seed, streams::TEXTURE);
        self.parser.seed = stream_seed(seed, streams::PARSER);
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.apply_seed(seed);
        self
    }

    pub fn with_workspace(mut self, dir: PathBuf) -> Self {
        self.workspace = dir;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.m == 0 {
            return Err(PipelineError::config("k and m must be at least 1"));
        }
        if self.toy.photos == 0 || self.toy.caricatures == 0 || self.toy.eval == 0 {
            return Err(PipelineError::config("toy dataset sizes must be positive"));
        }
        if self.toy.size < cariface_core::raster::MIN_SIDE || self.shape_canvas < cariface_core::raster::MIN_SIDE {
            return Err(PipelineError::config(format!(
                "toy size and shape canvas must be at least {}",
                cariface_core::raster::MIN_SIDE
            )));
        }
        self.shape.validate()?;
        self.texture.validate()?;
        self.parser.validate()?;
        Ok(())
    }

    /// Fails with a config error naming the first dataset root that is missing.
    pub fn check_data_paths(&self) -> Result<()> {
        let d = &self.data;
        for (name, p) in [
            ("photos", &d.photos),
            ("caricatures", &d.caricatures),
            ("eval", &d.eval),
        ] {
            if !p.is_dir() {
                return Err(PipelineError::config(format!(
                    "data.{name} ({}) does not exist",
                    p.display()
                )));
            }
        }
        if let Some(g) = &d.grouping {
            if !g.is_file() {
                return Err(PipelineError::config(format!(
                    "data.grouping ({}) does not exist",
                    g.display()
                )));
            }
        }
        Ok(())
    }

    pub fn grouping(&self) -> Result<cariface_core::LandmarkGrouping> {
        Ok(match &self.data.grouping {
            Some(p) => cariface_core::LandmarkGrouping::load(p)?,
            None => cariface_core::LandmarkGrouping::default(),
        })
    }

    pub fn cluster_seed(&self) -> u64 {
        stream_seed(self.seed, streams::CLUSTER)
    }

    /// SHA-256 of the settings that influence results. Paths are excluded so
    /// identical runs in different directories hash equally.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.workspace = PathBuf::new();
        c.data = DataPaths {
            photos: PathBuf::new(),
            caricatures: PathBuf::new(),
            eval: PathBuf::new(),
            grouping: None,
        };
        c.perceptual_weights = None;
        let json = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}
