//! Normalization-statistics style features and style-reference selection.

use serde::{Deserialize, Serialize};

use crate::cluster::{agglomerative, Linkage};
use crate::error::{CoreError, Result};
use crate::exec::Exec;
use crate::raster::{Image, Planar};

/// Anything that turns an image into a stack of style-layer activation maps.
pub trait StyleExtractor: Sync {
    /// Activation maps of the designated style layers, in layer order.
    fn style_maps(&self, img: &Image) -> Result<Vec<Planar<f32>>>;

    /// Identifies the extractor weights, so features computed by different
    /// extractors are never mixed.
    fn fingerprint(&self) -> String;
}

/// Uses the raw RGB image as its only style layer.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityExtractor;

impl StyleExtractor for IdentityExtractor {
    fn style_maps(&self, img: &Image) -> Result<Vec<Planar<f32>>> {
        Ok(vec![img.pixels().clone()])
    }

    fn fingerprint(&self) -> String {
        "identity".to_string()
    }
}

/// Per-layer channel means followed by per-layer channel population standard
/// deviations, concatenated in layer order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleFeature {
    vector: Vec<f64>,
    layer_channels: Vec<usize>,
}

impl StyleFeature {
    pub fn from_maps<T: Copy + Into<f64>>(maps: &[Planar<T>]) -> Result<Self> {
        if maps.is_empty() {
            return Err(CoreError::arg("style features need at least one layer"));
        }
        let mut vector = Vec::new();
        let mut layer_channels = Vec::new();
        for m in maps {
            let (c, h, w) = m.dims();
            let n = (h * w) as f64;
            let mut means = Vec::with_capacity(c);
            let mut stds = Vec::with_capacity(c);
            for ch in 0..c {
                let plane = m.plane(ch);
                let mean = plane.iter().map(|&v| v.into()).sum::<f64>() / n;
                let var = plane
                    .iter()
                    .map(|&v| {
                        let d = v.into() - mean;
                        d * d
                    })
                    .sum::<f64>()
                    / n;
                means.push(mean);
                stds.push(var.sqrt());
            }
            vector.extend(means);
            vector.extend(stds);
            layer_channels.push(c);
        }
        Ok(StyleFeature { vector, layer_channels })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.vector
    }

    pub fn layer_channels(&self) -> &[usize] {
        &self.layer_channels
    }

    pub fn len(&self) -> usize {
        self.vector.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vector.is_empty()
    }

    /// Squared Euclidean distance to another feature of the same layout.
    pub fn sq_distance(&self, other: &StyleFeature) -> Result<f64> {
        if self.layer_channels != other.layer_channels {
            return Err(CoreError::arg("style features come from different layer layouts"));
        }
        Ok(self
            .vector
            .iter()
            .zip(&other.vector)
            .map(|(a, b)| (a - b) * (a - b))
            .sum())
    }
}

pub fn extract_style_feature(img: &Image, extractor: &dyn StyleExtractor) -> Result<StyleFeature> {
    StyleFeature::from_maps(&extractor.style_maps(img)?)
}

/// Caricatures chosen as style references, one per style cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleReferenceSet {
    /// Index of each reference in the caricature dataset.
    pub indices: Vec<usize>,
    pub references: Vec<Image>,
    /// Cluster label of every caricature.
    pub labels: Vec<usize>,
}

impl StyleReferenceSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Member of each cluster nearest (Euclidean) to the cluster mean; ties go to
/// the lowest index. Clusters are visited in label order.
pub fn cluster_representatives(features: &[Vec<f64>], labels: &[usize]) -> Vec<usize> {
    let m = labels.iter().max().map(|&l| l + 1).unwrap_or(0);
    let dim = features.first().map(|f| f.len()).unwrap_or(0);
    (0..m)
        .map(|c| {
            let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
            let mut mean = vec![0.0; dim];
            for &i in &members {
                for (a, b) in mean.iter_mut().zip(&features[i]) {
                    *a += b;
                }
            }
            mean.iter_mut().for_each(|v| *v /= members.len() as f64);
            let mut best = (members[0], f64::INFINITY);
            for &i in &members {
                let d: f64 = features[i].iter().zip(&mean).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best.1 {
                    best = (i, d);
                }
            }
            best.0
        })
        .collect()
}

pub fn cluster_styles(
    caris: &[Image],
    extractor: &dyn StyleExtractor,
    m: usize,
    linkage: Linkage,
) -> Result<StyleReferenceSet> {
    cluster_styles_with(Exec::default(), caris, extractor, m, linkage)
}

pub fn cluster_styles_with(
    exec: Exec,
    caris: &[Image],
    extractor: &dyn StyleExtractor,
    m: usize,
    linkage: Linkage,
) -> Result<StyleReferenceSet> {
    if m == 0 || caris.len() < m {
        return Err(CoreError::arg(format!(
            "need at least M={m} caricatures, got {}",
            caris.len()
        )));
    }
    let features = exec
        .map(caris, |img| extract_style_feature(img, extractor))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<Vec<f64>> = features.into_iter().map(|f| f.vector).collect();
    let labels = agglomerative(exec, &rows, m, linkage)?;
    let indices = cluster_representatives(&rows, &labels);
    Ok(StyleReferenceSet {
        references: indices.iter().map(|&i| caris[i].clone()).collect(),
        indices,
        labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_gray_feature() {
        let img = Image::filled(32, 32, [0.5; 3]).unwrap();
        let f = extract_style_feature(&img, &IdentityExtractor).unwrap();
        assert_eq!(f.as_slice(), &[0.5, 0.5, 0.5, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn two_by_two_statistics() {
        let m = Planar::new(1, 2, 2, vec![0.0f32, 1.0, 0.0, 1.0]).unwrap();
        let f = StyleFeature::from_maps(&[m]).unwrap();
        assert_eq!(f.as_slice(), &[0.5, 0.5]);
    }

    #[test]
    fn feature_layout() {
        let maps = vec![Planar::filled(3, 4, 4, 0.1f32), Planar::filled(5, 2, 2, 0.2f32)];
        let f = StyleFeature::from_maps(&maps).unwrap();
        assert_eq!(f.len(), 2 * 8);
        assert!(f.as_slice()[3..6].iter().all(|&s| s >= 0.0));
    }

    fn shade(v: f32, jitter: f32) -> Image {
        Image::new(Planar::from_fn(3, 32, 32, |c, y, x| {
            (v + jitter * (((c + y * 3 + x) % 5) as f32 - 2.0) / 2.0).clamp(0.0, 1.0)
        }))
        .unwrap()
    }

    #[test]
    fn dark_and_bright_groups_get_one_reference_each() {
        let caris: Vec<Image> = vec![
            shade(0.1, 0.02),
            shade(0.9, 0.03),
            shade(0.15, 0.01),
            shade(0.85, 0.02),
            shade(0.12, 0.04),
            shade(0.88, 0.01),
        ];
        let refs = cluster_styles(&caris, &IdentityExtractor, 2, Linkage::Ward).unwrap();
        let dark: Vec<usize> = vec![0, 2, 4];
        assert_eq!(refs.len(), 2);
        assert!(dark.contains(&refs.indices[0]) != dark.contains(&refs.indices[1]));

        // Brute-force check: each reference minimizes distance to its group's mean.
        let feats: Vec<Vec<f64>> = caris
            .iter()
            .map(|c| {
                extract_style_feature(c, &IdentityExtractor)
                    .unwrap()
                    .as_slice()
                    .to_vec()
            })
            .collect();
        for &r in &refs.indices {
            let group: Vec<usize> = if dark.contains(&r) { dark.clone() } else { vec![1, 3, 5] };
            let mean: Vec<f64> = (0..6)
                .map(|d| group.iter().map(|&i| feats[i][d]).sum::<f64>() / 3.0)
                .collect();
            let dist = |i: usize| -> f64 { feats[i].iter().zip(&mean).map(|(a, b)| (a - b).powi(2)).sum() };
            assert!(group.iter().all(|&i| dist(r) <= dist(i)));
        }
    }

    #[test]
    fn single_style_and_singletons() {
        let caris: Vec<Image> = [0.2, 0.5, 0.55, 0.9].iter().map(|&v| shade(v, 0.0)).collect();
        let one = cluster_styles(&caris, &IdentityExtractor, 1, Linkage::Ward).unwrap();
        // Global mean brightness 0.5375: closest is 0.55.
        assert_eq!(one.indices, vec![2]);
        let all = cluster_styles(&caris, &IdentityExtractor, 4, Linkage::Ward).unwrap();
        assert_eq!(all.indices, vec![0, 1, 2, 3]);
        assert!(cluster_styles(&caris, &IdentityExtractor, 5, Linkage::Ward).is_err());
    }
}
