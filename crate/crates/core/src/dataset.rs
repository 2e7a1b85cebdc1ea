//! On-disk dataset layout:
//!
//! ```text
//! root/images/<name>.png      RGB
//! root/labels/<name>.png      8-bit class indices (photos, annotated caricatures)
//! root/landmarks/<name>.txt   17 lines of "x y", normalized
//! ```

use std::path::{Path, PathBuf};

use crate::error::{CoreError, Result};
use crate::exec::Exec;
use crate::landmarks::{LandmarkSet, NUM_LANDMARKS};
use crate::raster::{Image, LabelMap};

/// Background plus the nine evaluated facial classes.
pub const NUM_CLASSES: usize = 10;

pub const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "background",
    "facial skin",
    "eye-l",
    "eye-r",
    "brow-l",
    "brow-r",
    "nose",
    "in mouth",
    "upper lip",
    "lower lip",
];

/// Class ids exchanged by a horizontal flip.
pub const LEFT_RIGHT_PAIRS: [(u8, u8); 2] = [(2, 3), (4, 5)];

/// Mapping applied to labels when the image is mirrored.
pub fn flip_class_mapping(num_classes: usize) -> Vec<u8> {
    let mut m: Vec<u8> = (0..num_classes as u8).collect();
    for &(a, b) in &LEFT_RIGHT_PAIRS {
        if (b as usize) < num_classes {
            m.swap(a as usize, b as usize);
        }
    }
    m
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhotoSample {
    pub name: String,
    pub image: Image,
    pub labels: LabelMap,
    pub landmarks: LandmarkSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaricatureSample {
    pub name: String,
    pub image: Image,
    pub landmarks: LandmarkSet,
    /// Present only for annotated evaluation sets.
    pub labels: Option<LabelMap>,
}

/// Maps native landmark annotations onto the shared 17-point scheme.
pub trait LandmarkConverter: Sync {
    fn convert(&self, name: &str, raw: Vec<[f64; 2]>) -> Result<LandmarkSet>;
}

/// Accepts files already in the 17-point scheme.
#[derive(Debug, Clone, Copy, Default)]
pub struct NativeLandmarks;

impl LandmarkConverter for NativeLandmarks {
    fn convert(&self, name: &str, raw: Vec<[f64; 2]>) -> Result<LandmarkSet> {
        LandmarkSet::new(raw).map_err(|e| CoreError::Load {
            name: name.to_string(),
            msg: e.to_string(),
        })
    }
}

/// Picks landmarks by index from a larger native annotation.
#[derive(Debug, Clone)]
pub struct IndexMapping(pub [usize; NUM_LANDMARKS]);

impl LandmarkConverter for IndexMapping {
    fn convert(&self, name: &str, raw: Vec<[f64; 2]>) -> Result<LandmarkSet> {
        let pts = self
            .0
            .iter()
            .map(|&i| {
                raw.get(i).copied().ok_or_else(|| CoreError::Load {
                    name: name.to_string(),
                    msg: format!("native annotation has no landmark {i}"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        NativeLandmarks.convert(name, pts)
    }
}

pub fn images_dir(root: &Path) -> PathBuf {
    root.join("images")
}

pub fn labels_dir(root: &Path) -> PathBuf {
    root.join("labels")
}

pub fn landmarks_dir(root: &Path) -> PathBuf {
    root.join("landmarks")
}

/// Sorted basenames of `root/images/*.png`.
pub fn list_basenames(root: &Path) -> Result<Vec<String>> {
    let dir = images_dir(root);
    let entries = std::fs::read_dir(&dir).map_err(|e| CoreError::io(&dir, e))?;
    let mut names = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| CoreError::io(&dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                names.push(stem.to_string());
            }
        }
    }
    names.sort();
    Ok(names)
}

fn load_landmarks(root: &Path, name: &str, converter: &dyn LandmarkConverter) -> Result<LandmarkSet> {
    let path = landmarks_dir(root).join(format!("{name}.txt"));
    if !path.exists() {
        return Err(CoreError::Load {
            name: name.to_string(),
            msg: format!("missing landmark file {}", path.display()),
        });
    }
    let text = std::fs::read_to_string(&path).map_err(|e| CoreError::io(&path, e))?;
    let raw = LandmarkSet::parse(&text).map_err(|msg| CoreError::Format {
        path: path.clone(),
        msg,
    })?;
    converter.convert(name, raw).map_err(|e| match e {
        CoreError::Load { msg, .. } => CoreError::Format { path, msg },
        other => other,
    })
}

fn load_labels(root: &Path, name: &str, img: &Image, num_classes: usize) -> Result<Option<LabelMap>> {
    let path = labels_dir(root).join(format!("{name}.png"));
    if !path.exists() {
        return Ok(None);
    }
    let lbl = LabelMap::load_png(&path, num_classes)?;
    if (lbl.height(), lbl.width()) != (img.height(), img.width()) {
        return Err(CoreError::Load {
            name: name.to_string(),
            msg: format!(
                "label map is {}x{} but image is {}x{}",
                lbl.height(),
                lbl.width(),
                img.height(),
                img.width()
            ),
        });
    }
    Ok(Some(lbl))
}

fn load_image(root: &Path, name: &str) -> Result<Image> {
    Image::load_png(&images_dir(root).join(format!("{name}.png")))
}

pub fn load_photo_dataset(root: &Path) -> Result<Vec<PhotoSample>> {
    load_photo_dataset_with(Exec::default(), root, NUM_CLASSES, &NativeLandmarks)
}

/// Loads (image, labels, landmarks) triples aligned by basename.
pub fn load_photo_dataset_with(
    exec: Exec,
    root: &Path,
    num_classes: usize,
    converter: &dyn LandmarkConverter,
) -> Result<Vec<PhotoSample>> {
    let names = list_basenames(root)?;
    exec.map(&names, |name| {
        let image = load_image(root, name)?;
        let labels = load_labels(root, name, &image, num_classes)?.ok_or_else(|| CoreError::Load {
            name: name.clone(),
            msg: "missing label file".to_string(),
        })?;
        let landmarks = load_landmarks(root, name, converter)?;
        Ok(PhotoSample {
            name: name.clone(),
            image,
            labels,
            landmarks,
        })
    })
    .into_iter()
    .collect()
}

pub fn load_caricature_dataset(root: &Path) -> Result<Vec<CaricatureSample>> {
    load_caricature_dataset_with(Exec::default(), root, NUM_CLASSES, &NativeLandmarks)
}

/// Loads (image, landmarks) pairs; label maps are attached when present.
pub fn load_caricature_dataset_with(
    exec: Exec,
    root: &Path,
    num_classes: usize,
    converter: &dyn LandmarkConverter,
) -> Result<Vec<CaricatureSample>> {
    let names = list_basenames(root)?;
    exec.map(&names, |name| {
        let image = load_image(root, name)?;
        let landmarks = load_landmarks(root, name, converter)?;
        let labels = load_labels(root, name, &image, num_classes)?;
        Ok(CaricatureSample {
            name: name.clone(),
            image,
            landmarks,
            labels,
        })
    })
    .into_iter()
    .collect()
}

pub(crate) fn ensure_layout(root: &Path, with_labels: bool) -> Result<()> {
    let mut dirs = vec![images_dir(root), landmarks_dir(root)];
    if with_labels {
        dirs.push(labels_dir(root));
    }
    for d in dirs {
        std::fs::create_dir_all(&d).map_err(|e| CoreError::io(&d, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flip_mapping_swaps_pairs() {
        let m = flip_class_mapping(NUM_CLASSES);
        assert_eq!(m, vec![0, 1, 3, 2, 5, 4, 6, 7, 8, 9]);
    }

    #[test]
    fn index_mapping_converter() {
        let raw: Vec<[f64; 2]> = (0..20).map(|i| [i as f64 / 20.0, 0.5]).collect();
        let mut idx = [0usize; NUM_LANDMARKS];
        for (k, v) in idx.iter_mut().enumerate() {
            *v = 19 - k;
        }
        let lms = IndexMapping(idx).convert("x", raw).unwrap();
        assert_eq!(lms.points()[0], [0.95, 0.5]);
        let short: Vec<[f64; 2]> = vec![[0.5, 0.5]; 10];
        assert!(IndexMapping(idx).convert("x", short).is_err());
    }
}
