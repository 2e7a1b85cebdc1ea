//! Upstream stages: clustering the caricatures, then training the shape and
//! texture adaptation networks.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::DType;
use cariface_core::dataset::list_basenames;
use cariface_core::{
    cluster_shapes, cluster_styles, load_caricature_dataset, load_photo_dataset, CaricatureSample, Image, Linkage,
    PhotoSample, ShapeSet,
};
use cariface_models::shape::{
    apply_shape_adaptation, train_shape_adaptation, ShapeCondition, ShapeGenerator, ShapeModels,
};
use cariface_models::texture::{train_texture_network, PerceptualExtractor, TextureNetwork, TextureTrainLog};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{streams, PipelineConfig};
use crate::error::{PipelineError, Result};
use crate::workspace::{file_sha256, read_json, reset_dir, write_json, write_text, StageRecord, Workspace};

pub const PREPARE: &str = "prepare";
pub const SHAPE: &str = "train-shape";
pub const TEXTURE: &str = "train-texture";

pub(crate) const PREPARE_DIR: &str = "prepare";
pub(crate) const SHAPE_DIR: &str = "shape";
pub(crate) const TEXTURE_DIR: &str = "texture";

pub(crate) const SHAPES_FILE: &str = "prepare/shapes.json";
pub(crate) const STYLES_FILE: &str = "prepare/styles.json";
pub(crate) const PHOTO_TO_CARI: &str = "shape/photo_to_cari.safetensors";
pub(crate) const CARI_TO_PHOTO: &str = "shape/cari_to_photo.safetensors";
pub(crate) const TEXTURE_NET: &str = "texture/network.safetensors";

/// Caricature shape vocabulary chosen by the prepare stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeArtifact {
    pub k: usize,
    pub seed: u64,
    pub shapes: ShapeSet,
    /// Caricatures assigned to each center.
    pub cluster_sizes: Vec<usize>,
}

/// Style references chosen by the prepare stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleArtifact {
    pub m: usize,
    pub extractor: String,
    /// Basename of each reference caricature, in condition order.
    pub references: Vec<String>,
    /// Index of each reference in the sorted caricature set.
    pub indices: Vec<usize>,
    pub cluster_sizes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub photos: usize,
    pub caricatures: usize,
    pub eval: usize,
    /// Mean landmark displacement from each caricature to its shape center.
    pub shape_spread: f64,
}

/// Hash of the settings one stage depends on, stored in its record.
pub(crate) fn stage_hash(value: serde_json::Value) -> String {
    hex::encode(Sha256::digest(value.to_string().as_bytes()))
}

pub(crate) fn prepare_hash(cfg: &PipelineConfig) -> String {
    stage_hash(serde_json::json!({
        "seed": cfg.seed, "k": cfg.k, "m": cfg.m, "perceptual": cfg.perceptual,
    }))
}

pub(crate) fn shape_hash(cfg: &PipelineConfig) -> Result<String> {
    Ok(stage_hash(serde_json::json!({
        "prepare": prepare_hash(cfg), "shape": cfg.shape, "canvas": cfg.shape_canvas,
        "grouping": cfg.grouping()?.fingerprint(),
    })))
}

pub(crate) fn texture_hash(cfg: &PipelineConfig) -> Result<String> {
    Ok(stage_hash(
        serde_json::json!({ "shape": shape_hash(cfg)?, "texture": cfg.texture }),
    ))
}

/// Reads a dependency record and checks it was produced with the current
/// settings.
pub(crate) fn require(ws: &Workspace, dir: &str, stage: &'static str, hash: &str) -> Result<StageRecord> {
    let record = ws.read_record(dir, stage)?;
    if record.config_hash != hash {
        return Err(PipelineError::provenance(
            &ws.path(&format!("{dir}/stage.json")),
            format!("`{stage}` ran with different settings; rerun it"),
        ));
    }
    Ok(record)
}

/// Digest of every file in a dataset directory, keyed by relative path.
pub(crate) fn dataset_digest(root: &Path) -> Result<String> {
    let mut files = Vec::new();
    for sub in ["images", "labels", "landmarks"] {
        let dir = root.join(sub);
        if !dir.is_dir() {
            continue;
        }
        for entry in std::fs::read_dir(&dir).map_err(|e| PipelineError::io(&dir, e))? {
            let path = entry.map_err(|e| PipelineError::io(&dir, e))?.path();
            if path.is_file() {
                files.push(path);
            }
        }
    }
    files.sort();
    let mut h = Sha256::new();
    for f in &files {
        let rel = f.strip_prefix(root).unwrap_or(f);
        h.update(rel.to_string_lossy().as_bytes());
        h.update(file_sha256(f)?.as_bytes());
    }
    Ok(hex::encode(h.finalize()))
}

pub(crate) fn load_photos(cfg: &PipelineConfig) -> Result<Vec<PhotoSample>> {
    cfg.check_data_paths()?;
    Ok(load_photo_dataset(&cfg.data.photos)?)
}

pub(crate) fn load_caricatures(cfg: &PipelineConfig) -> Result<Vec<CaricatureSample>> {
    cfg.check_data_paths()?;
    Ok(load_caricature_dataset(&cfg.data.caricatures)?)
}

pub fn perceptual_extractor(cfg: &PipelineConfig) -> Result<PerceptualExtractor> {
    Ok(match &cfg.perceptual_weights {
        Some(p) => PerceptualExtractor::from_weights(cfg.perceptual.clone(), p, DType::F32)?,
        None => PerceptualExtractor::random(cfg.perceptual.clone(), DType::F32)?,
    })
}

fn dataset_inputs(cfg: &PipelineConfig) -> Result<BTreeMap<String, String>> {
    let mut inputs = BTreeMap::new();
    inputs.insert("data:photos".to_string(), dataset_digest(&cfg.data.photos)?);
    inputs.insert("data:caricatures".to_string(), dataset_digest(&cfg.data.caricatures)?);
    if let Some(p) = &cfg.perceptual_weights {
        inputs.insert("perceptual-weights".to_string(), file_sha256(p)?);
    }
    Ok(inputs)
}

fn counts(labels: &[usize], n: usize) -> Vec<usize> {
    let mut c = vec![0; n];
    for &l in labels {
        c[l] += 1;
    }
    c
}

/// Clusters caricature landmarks into K shape centers and caricature styles
/// into M references.
pub fn prepare(cfg: &PipelineConfig, ws: &Workspace) -> Result<(ShapeArtifact, StyleArtifact)> {
    let photos = load_photos(cfg)?;
    let caris = load_caricatures(cfg)?;
    let eval = list_basenames(&cfg.data.eval)?;
    if caris.len() < cfg.k.max(cfg.m) {
        return Err(PipelineError::config(format!(
            "{} caricatures cannot form K={} shape clusters and M={} style clusters",
            caris.len(),
            cfg.k,
            cfg.m
        )));
    }
    log::info!("prepare: {} photos, {} caricatures", photos.len(), caris.len());
    let dir = ws.path(PREPARE_DIR);
    reset_dir(&dir)?;

    let lms: Vec<_> = caris.iter().map(|c| c.landmarks.clone()).collect();
    let shapes = cluster_shapes(&lms, cfg.k, cfg.cluster_seed())?;
    let assigned: Vec<usize> = lms.iter().map(|l| shapes.nearest(l)).collect();
    let shape_spread = lms
        .iter()
        .zip(&assigned)
        .map(|(l, &a)| l.mean_displacement(&shapes.centers()[a]))
        .sum::<f64>()
        / lms.len() as f64;
    let shape_art = ShapeArtifact {
        k: cfg.k,
        seed: cfg.cluster_seed(),
        cluster_sizes: counts(&assigned, cfg.k),
        shapes,
    };

    let extractor = perceptual_extractor(cfg)?;
    let images: Vec<Image> = caris.iter().map(|c| c.image.clone()).collect();
    let refs = cluster_styles(&images, &extractor, cfg.m, Linkage::Ward)?;
    let style_art = StyleArtifact {
        m: cfg.m,
        extractor: cariface_models::texture::FeatureExtractor::fingerprint(&extractor),
        references: refs.indices.iter().map(|&i| caris[i].name.clone()).collect(),
        indices: refs.indices.clone(),
        cluster_sizes: counts(&refs.labels, cfg.m),
    };

    write_json(&ws.path(SHAPES_FILE), &shape_art)?;
    write_json(&ws.path(STYLES_FILE), &style_art)?;
    let diag = "prepare/diagnostics.json".to_string();
    write_json(
        &ws.path(&diag),
        &Diagnostics {
            photos: photos.len(),
            caricatures: caris.len(),
            eval: eval.len(),
            shape_spread,
        },
    )?;
    let record = StageRecord {
        stage: PREPARE.into(),
        config_hash: prepare_hash(cfg),
        inputs: dataset_inputs(cfg)?,
        outputs: ws.checksums(&[SHAPES_FILE.into(), STYLES_FILE.into(), diag])?,
    };
    ws.write_record(PREPARE_DIR, &record)?;
    Ok((shape_art, style_art))
}

/// Loads the prepare outputs after checking their provenance.
pub fn read_prepared(cfg: &PipelineConfig, ws: &Workspace) -> Result<(ShapeArtifact, StyleArtifact)> {
    let record = require(ws, PREPARE_DIR, PREPARE, &prepare_hash(cfg))?;
    let current = dataset_inputs(cfg)?;
    for (key, want) in &record.inputs {
        if current.get(key) != Some(want) {
            return Err(PipelineError::provenance(
                &ws.path("prepare/stage.json"),
                format!("{key} changed since prepare ran"),
            ));
        }
    }
    Ok((read_json(&ws.path(SHAPES_FILE))?, read_json(&ws.path(STYLES_FILE))?))
}

/// Trains the paired shape generators against the prepared shape set.
pub fn train_shape(cfg: &PipelineConfig, ws: &Workspace) -> Result<ShapeModels> {
    let (shape_art, _) = read_prepared(cfg, ws)?;
    let photos = load_photos(cfg)?;
    let caris = load_caricatures(cfg)?;
    let grouping = cfg.grouping()?;
    log::info!(
        "train-shape: {} iterations on a {}px canvas",
        cfg.shape.iterations,
        cfg.shape_canvas
    );
    let pl: Vec<_> = photos.iter().map(|p| p.landmarks.clone()).collect();
    let cl: Vec<_> = caris.iter().map(|c| c.landmarks.clone()).collect();
    let models = train_shape_adaptation(&pl, &cl, &shape_art.shapes, &grouping, cfg.shape_canvas, &cfg.shape)?;

    reset_dir(&ws.path(SHAPE_DIR))?;
    models.photo_to_cari.save(&ws.path(PHOTO_TO_CARI))?;
    models.cari_to_photo.save(&ws.path(CARI_TO_PHOTO))?;
    write_text(&ws.path("shape/train_log.csv"), &models.log.to_csv())?;
    write_json(&ws.path("shape/train_log.json"), &models.log)?;
    let outputs: Vec<String> = [PHOTO_TO_CARI, CARI_TO_PHOTO]
        .iter()
        .flat_map(|p| [p.to_string(), format!("{p}.json")])
        .chain(["shape/train_log.csv".to_string(), "shape/train_log.json".to_string()])
        .collect();
    let record = StageRecord {
        stage: SHAPE.into(),
        config_hash: shape_hash(cfg)?,
        inputs: ws.checksums(&[SHAPES_FILE.into()])?,
        outputs: ws.checksums(&outputs)?,
    };
    ws.write_record(SHAPE_DIR, &record)?;
    Ok(models)
}

pub(crate) fn load_shape_generator(cfg: &PipelineConfig, ws: &Workspace) -> Result<ShapeGenerator> {
    require(ws, SHAPE_DIR, SHAPE, &shape_hash(cfg)?)?;
    Ok(ShapeGenerator::load(&ws.path(PHOTO_TO_CARI))?)
}

/// One uniformly drawn condition index per item, from a dedicated stream.
pub(crate) fn draw_conditions(seed: u64, stream: u64, n: usize, len: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(cariface_models::checkpoint::stream_seed(seed, stream));
    (0..n).map(|_| rng.random_range(0..len)).collect()
}

/// Trains the style-conditioned texture network on shape-adapted photos.
pub fn train_texture(cfg: &PipelineConfig, ws: &Workspace) -> Result<(TextureNetwork, TextureTrainLog)> {
    let (_, style_art) = read_prepared(cfg, ws)?;
    let generator = load_shape_generator(cfg, ws)?;
    let grouping = cfg.grouping()?;
    let photos = load_photos(cfg)?;
    let caris = load_caricatures(cfg)?;
    let extractor = perceptual_extractor(cfg)?;
    let conds = draw_conditions(cfg.seed, streams::TEXTURE_INPUTS, photos.len(), cfg.k);
    let deformed = photos
        .iter()
        .zip(&conds)
        .map(|(p, &c)| {
            let cond = ShapeCondition::new(c, cfg.k)?;
            Ok(apply_shape_adaptation(&generator, &p.image, &p.labels, &p.landmarks, &cond, &grouping)?.image)
        })
        .collect::<Result<Vec<Image>>>()?;
    let refs = cariface_core::StyleReferenceSet {
        indices: style_art.indices.clone(),
        references: style_art.indices.iter().map(|&i| caris[i].image.clone()).collect(),
        labels: Vec::new(),
    };
    log::info!("train-texture: {} iterations, M={}", cfg.texture.iterations, cfg.m);
    let (net, log) = train_texture_network(&deformed, &refs, &extractor, &cfg.texture)?;

    reset_dir(&ws.path(TEXTURE_DIR))?;
    net.save(&ws.path(TEXTURE_NET))?;
    write_text(&ws.path("texture/train_log.csv"), &log.to_csv())?;
    let record = StageRecord {
        stage: TEXTURE.into(),
        config_hash: texture_hash(cfg)?,
        inputs: ws.checksums(&[STYLES_FILE.into(), PHOTO_TO_CARI.into()])?,
        outputs: ws.checksums(&[
            TEXTURE_NET.into(),
            format!("{TEXTURE_NET}.json"),
            "texture/train_log.csv".into(),
        ])?,
    };
    ws.write_record(TEXTURE_DIR, &record)?;
    Ok((net, log))
}

pub(crate) fn load_texture_network(cfg: &PipelineConfig, ws: &Workspace) -> Result<TextureNetwork> {
    require(ws, TEXTURE_DIR, TEXTURE, &texture_hash(cfg)?)?;
    Ok(TextureNetwork::load(&ws.path(TEXTURE_NET))?)
}
