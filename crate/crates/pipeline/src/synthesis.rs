//! Builds the adapted training sets: each photo and its labels, optionally
//! warped to a caricature shape and restyled with a caricature texture.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use cariface_core::{Image, LabelMap};
use cariface_models::shape::{apply_shape_adaptation, ShapeCondition};
use cariface_models::texture::{apply_texture, StyleCondition, TextureNetwork, TEXTURE_STRIDE};
use serde::{Deserialize, Serialize};

use crate::config::{streams, PipelineConfig};
use crate::error::{PipelineError, Result};
use crate::stages::{
    self, draw_conditions, load_photos, CARI_TO_PHOTO, PHOTO_TO_CARI, SHAPES_FILE, STYLES_FILE, TEXTURE_NET,
};
use crate::workspace::{create_dir, read_json, reset_dir, write_json, StageRecord, Workspace};

pub const SYNTHESIZE: &str = "synthesize";

/// Which adaptations a synthesized training set applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arm {
    Source,
    Texture,
    Shape,
    Both,
}

impl Arm {
    /// Table order.
    pub const ALL: [Arm; 4] = [Arm::Source, Arm::Texture, Arm::Shape, Arm::Both];

    pub fn name(self) -> &'static str {
        match self {
            Arm::Source => "source",
            Arm::Texture => "texture",
            Arm::Shape => "shape",
            Arm::Both => "both",
        }
    }

    /// Row label in result tables.
    pub fn label(self) -> &'static str {
        match self {
            Arm::Source => "source-only",
            Arm::Texture => "texture",
            Arm::Shape => "shape",
            Arm::Both => "shape + texture",
        }
    }

    pub fn uses_shape(self) -> bool {
        matches!(self, Arm::Shape | Arm::Both)
    }

    pub fn uses_texture(self) -> bool {
        matches!(self, Arm::Texture | Arm::Both)
    }

    pub(crate) fn dir(self) -> String {
        format!("synth/{}", self.name())
    }

    pub(crate) fn manifest(self) -> String {
        format!("synth/{}/manifest.json", self.name())
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arm {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self> {
        Arm::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| {
            PipelineError::config(format!("unknown arm `{s}` (expected source, texture, shape or both)"))
        })
    }
}

/// One synthesized training pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisRecord {
    /// Basename of the source photo.
    pub source: String,
    pub shape_condition: Option<usize>,
    pub style_condition: Option<usize>,
    /// Workspace-relative output paths.
    pub image: String,
    pub labels: String,
    /// Checksums of the two outputs.
    pub checksums: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisManifest {
    pub arm: Arm,
    pub seed: u64,
    pub k: usize,
    pub m: usize,
    /// Checksums of the upstream artifacts the samples were produced from.
    pub upstream: BTreeMap<String, String>,
    pub records: Vec<SynthesisRecord>,
}

impl SynthesisManifest {
    /// Checks every upstream artifact and output file against its checksum.
    pub fn verify(&self, ws: &Workspace) -> Result<()> {
        let owner = ws.path(&self.arm.manifest());
        ws.verify(&self.upstream, &owner)?;
        for r in &self.records {
            ws.verify(&r.checksums, &owner)?;
        }
        Ok(())
    }

    pub fn load(ws: &Workspace, arm: Arm) -> Result<Self> {
        let path = ws.path(&arm.manifest());
        if !path.exists() {
            return Err(PipelineError::Dependency {
                stage: SYNTHESIZE,
                what: arm.manifest(),
            });
        }
        let manifest: SynthesisManifest = read_json(&path)?;
        if manifest.arm != arm {
            return Err(PipelineError::provenance(
                &path,
                format!("manifest is for arm `{}`", manifest.arm),
            ));
        }
        manifest.verify(ws)?;
        Ok(manifest)
    }

    /// Loads the recorded pairs in manifest order.
    pub fn pairs(&self, ws: &Workspace) -> Result<Vec<(String, Image, LabelMap)>> {
        self.records
            .iter()
            .map(|r| {
                let image = Image::load_png(&ws.path(&r.image))?;
                let labels = LabelMap::load_png(&ws.path(&r.labels), cariface_core::NUM_CLASSES)?;
                Ok((r.source.clone(), image, labels))
            })
            .collect()
    }
}

/// Applies the texture network to an image of any size by padding to the
/// network's stride and cropping back.
pub(crate) fn restyle(net: &TextureNetwork, img: &Image, cond: &StyleCondition) -> Result<Image> {
    let (h, w) = (img.height(), img.width());
    let up = |n: usize| n.div_ceil(TEXTURE_STRIDE) * TEXTURE_STRIDE;
    if up(h) == h && up(w) == w {
        return Ok(apply_texture(net, img, cond)?);
    }
    let padded = img.crop_padded(0, 0, up(h), up(w), [0.0; 3])?;
    Ok(apply_texture(net, &padded, cond)?.crop_padded(0, 0, h, w, [0.0; 3])?)
}

/// Shape and style condition per photo. Drawn once from the synthesis stream
/// so every arm pairs a photo with the same conditions.
pub fn synthesis_conditions(cfg: &PipelineConfig, n: usize) -> Vec<(usize, usize)> {
    let shapes = draw_conditions(cfg.seed, streams::SYNTHESIS, n, cfg.k);
    let styles = draw_conditions(cfg.seed, streams::SYNTHESIS ^ 0x5717_1E00, n, cfg.m);
    shapes.into_iter().zip(styles).collect()
}

pub(crate) fn synthesis_hash(cfg: &PipelineConfig, arm: Arm) -> Result<String> {
    let upstream = match arm {
        Arm::Source => stages::prepare_hash(cfg),
        Arm::Shape => stages::shape_hash(cfg)?,
        Arm::Texture | Arm::Both => stages::texture_hash(cfg)?,
    };
    Ok(stages::stage_hash(
        serde_json::json!({ "arm": arm, "upstream": upstream }),
    ))
}

/// Writes `synth/<arm>/{images,labels}` and the arm's manifest.
pub fn synthesize(cfg: &PipelineConfig, ws: &Workspace, arm: Arm) -> Result<SynthesisManifest> {
    stages::read_prepared(cfg, ws)?;
    let generator = if arm.uses_shape() {
        Some(stages::load_shape_generator(cfg, ws)?)
    } else {
        None
    };
    let texture = if arm.uses_texture() {
        Some(stages::load_texture_network(cfg, ws)?)
    } else {
        None
    };
    let grouping = cfg.grouping()?;
    let photos = load_photos(cfg)?;
    let conds = synthesis_conditions(cfg, photos.len());
    log::info!("synthesize: arm {arm}, {} photos", photos.len());

    let dir = arm.dir();
    reset_dir(&ws.path(&dir))?;
    create_dir(&ws.path(&format!("{dir}/images")))?;
    create_dir(&ws.path(&format!("{dir}/labels")))?;
    let mut records = Vec::with_capacity(photos.len());
    for (p, &(sc, tc)) in photos.iter().zip(&conds) {
        let (mut image, labels) = match &generator {
            Some(g) => {
                let a = apply_shape_adaptation(
                    g,
                    &p.image,
                    &p.labels,
                    &p.landmarks,
                    &ShapeCondition::new(sc, cfg.k)?,
                    &grouping,
                )?;
                (a.image, a.labels)
            }
            None => (p.image.clone(), p.labels.clone()),
        };
        if let Some(net) = &texture {
            image = restyle(net, &image, &StyleCondition::new(tc, cfg.m)?)?;
        }
        let image_rel = format!("{dir}/images/{}.png", p.name);
        let labels_rel = format!("{dir}/labels/{}.png", p.name);
        image.save_png(&ws.path(&image_rel))?;
        labels.save_png(&ws.path(&labels_rel))?;
        records.push(SynthesisRecord {
            source: p.name.clone(),
            shape_condition: arm.uses_shape().then_some(sc),
            style_condition: arm.uses_texture().then_some(tc),
            checksums: ws.checksums(&[image_rel.clone(), labels_rel.clone()])?,
            image: image_rel,
            labels: labels_rel,
        });
    }

    let mut upstream = vec![SHAPES_FILE.to_string(), STYLES_FILE.to_string()];
    if arm.uses_shape() || arm.uses_texture() {
        upstream.extend([PHOTO_TO_CARI.to_string(), CARI_TO_PHOTO.to_string()]);
    }
    if arm.uses_texture() {
        upstream.push(TEXTURE_NET.to_string());
    }
    let manifest = SynthesisManifest {
        arm,
        seed: cfg.seed,
        k: cfg.k,
        m: cfg.m,
        upstream: ws.checksums(&upstream)?,
        records,
    };
    write_json(&ws.path(&arm.manifest()), &manifest)?;
    let record = StageRecord {
        stage: SYNTHESIZE.into(),
        config_hash: synthesis_hash(cfg, arm)?,
        inputs: manifest.upstream.clone(),
        outputs: ws.checksums(&[arm.manifest()])?,
    };
    ws.write_record(&dir, &record)?;
    Ok(manifest)
}
