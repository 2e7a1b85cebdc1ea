//! Perceptual losses and the conditional stylization network.

use std::path::Path;

use candle_core::{DType, Module, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use cariface_core::style::StyleExtractor;
use cariface_core::{CoreError, Image, Planar, StyleReferenceSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, stream_seed};
pub use crate::condition::Condition as StyleCondition;
use crate::conv::{Conv, ConvGeometry};
use crate::error::{ModelError, Result};
use crate::ops;
use crate::params::ParamStore;

/// Added to variances before the square root so style gradients stay finite
/// on flat activation maps.
pub const STD_EPS: f64 = 1e-8;

/// Differentiable feature stack used by the content and style losses.
pub trait FeatureExtractor {
    /// Activations of the content layer.
    fn content_features(&self, x: &Tensor) -> Result<Tensor>;
    /// Activations of the style layers, in layer order.
    fn style_features(&self, x: &Tensor) -> Result<Vec<Tensor>>;
    fn fingerprint(&self) -> String;
}

/// The raw image is both the content layer and the only style layer.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityFeatures;

impl FeatureExtractor for IdentityFeatures {
    fn content_features(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.clone())
    }

    fn style_features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        Ok(vec![x.clone()])
    }

    fn fingerprint(&self) -> String {
        "identity".to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerceptualConfig {
    /// Channel widths of the four stages.
    pub widths: [usize; 4],
    pub style_layers: Vec<String>,
    pub content_layer: String,
    pub seed: u64,
}

impl Default for PerceptualConfig {
    fn default() -> Self {
        PerceptualConfig {
            widths: [8, 16, 32, 32],
            style_layers: ["relu1_2", "relu2_2", "relu3_3", "relu4_3"].map(String::from).to_vec(),
            content_layer: "conv4_2".to_string(),
            seed: 7,
        }
    }
}

/// Layer counts per stage, matching the usual 2-2-3-3 layout.
const STAGE_DEPTHS: [usize; 4] = [2, 2, 3, 3];

/// Fixed (never trained) VGG-shaped convolution stack. Layers are named
/// `conv{s}_{i}` before and `relu{s}_{i}` after the activation; stages are
/// separated by 2x2 average pooling.
#[derive(Debug)]
pub struct PerceptualExtractor {
    params: ParamStore,
    convs: Vec<(usize, usize, Conv)>,
    cfg: PerceptualConfig,
    fingerprint: String,
}

impl PerceptualExtractor {
    /// Random He-initialized weights drawn from `cfg.seed`.
    pub fn random(cfg: PerceptualConfig, dtype: DType) -> Result<Self> {
        let mut ps = ParamStore::new(stream_seed(cfg.seed, 0x7E_0000), dtype);
        let mut convs = Vec::new();
        let mut cin = 3;
        for (s, (&w, &depth)) in cfg.widths.iter().zip(&STAGE_DEPTHS).enumerate() {
            for i in 0..depth {
                let conv = ps.conv2d(&format!("conv{}_{}", s + 1, i + 1), cin, w, ConvGeometry::same3(1, 1))?;
                convs.push((s + 1, i + 1, conv));
                cin = w;
            }
        }
        let names: Vec<String> = convs
            .iter()
            .flat_map(|(s, i, _)| [format!("conv{s}_{i}"), format!("relu{s}_{i}")])
            .collect();
        for l in cfg.style_layers.iter().chain(std::iter::once(&cfg.content_layer)) {
            if !names.contains(l) {
                return Err(ModelError::arg(format!("unknown perceptual layer `{l}`")));
            }
        }
        if cfg.style_layers.is_empty() {
            return Err(ModelError::arg("at least one style layer is required"));
        }
        let fingerprint = format!("perceptual-{}", &ps.fingerprint()?[..16]);
        Ok(PerceptualExtractor {
            params: ps,
            convs,
            cfg,
            fingerprint,
        })
    }

    /// Builds the stack and overwrites its weights from a safetensors file
    /// with tensors named `conv{s}_{i}.weight` / `.bias`.
    pub fn from_weights(cfg: PerceptualConfig, path: &Path, dtype: DType) -> Result<Self> {
        let mut ex = Self::random(cfg, dtype)?;
        ex.params.load(path)?;
        ex.fingerprint = format!("perceptual-{}", &ex.params.fingerprint()?[..16]);
        Ok(ex)
    }

    pub fn config(&self) -> &PerceptualConfig {
        &self.cfg
    }

    /// Channel count of a named layer.
    pub fn layer_channels(&self, name: &str) -> Option<usize> {
        self.convs
            .iter()
            .find(|(s, i, _)| name == format!("conv{s}_{i}") || name == format!("relu{s}_{i}"))
            .map(|(s, _, _)| self.cfg.widths[s - 1])
    }

    /// Runs the stack up to the deepest requested layer and returns the
    /// requested activations in request order.
    pub fn activations(&self, x: &Tensor, names: &[&str]) -> Result<Vec<Tensor>> {
        let mut found: Vec<Option<Tensor>> = vec![None; names.len()];
        let mut x = x.to_dtype(self.params.dtype())?;
        let mut stage = 1;
        for (s, i, conv) in &self.convs {
            if *s != stage {
                x = x.avg_pool2d(2)?;
                stage = *s;
            }
            let pre = conv.forward(&x)?;
            let post = pre.relu()?;
            for (slot, name) in found.iter_mut().zip(names) {
                if *name == format!("conv{s}_{i}") {
                    *slot = Some(pre.clone());
                } else if *name == format!("relu{s}_{i}") {
                    *slot = Some(post.clone());
                }
            }
            if found.iter().all(|f| f.is_some()) {
                break;
            }
            x = post;
        }
        found
            .into_iter()
            .zip(names)
            .map(|(f, n)| f.ok_or_else(|| ModelError::arg(format!("unknown perceptual layer `{n}`"))))
            .collect()
    }
}

impl FeatureExtractor for PerceptualExtractor {
    fn content_features(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.activations(x, &[&self.cfg.content_layer])?.remove(0))
    }

    fn style_features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let names: Vec<&str> = self.cfg.style_layers.iter().map(String::as_str).collect();
        self.activations(x, &names)
    }

    fn fingerprint(&self) -> String {
        self.fingerprint.clone()
    }
}

impl StyleExtractor for PerceptualExtractor {
    fn style_maps(&self, img: &Image) -> cariface_core::Result<Vec<Planar<f32>>> {
        let run = || -> Result<Vec<Planar<f32>>> {
            let x = ops::image_batch(&[img], self.params.dtype())?;
            let mut out = Vec::new();
            for t in self.style_features(&x)? {
                out.extend(ops::unbatch(&t)?);
            }
            Ok(out)
        };
        run().map_err(|e| CoreError::Argument(format!("perceptual extractor: {e}")))
    }

    fn fingerprint(&self) -> String {
        self.fingerprint.clone()
    }
}

/// `(B, 2C)` per-channel means followed by per-channel standard deviations.
pub fn style_statistics(features: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = features.dims4()?;
    let flat = features.reshape((b, c, h * w))?;
    let mean = flat.mean_keepdim(2)?;
    let var = flat.broadcast_sub(&mean)?.sqr()?.mean_keepdim(2)?;
    let std = (var + STD_EPS)?.sqrt()?;
    Ok(Tensor::cat(&[mean.squeeze(2)?, std.squeeze(2)?], 1)?)
}

/// Mean squared difference of content-layer activations, one value per batch.
pub fn content_loss_t(gen: &Tensor, content: &Tensor, ex: &dyn FeatureExtractor) -> Result<Tensor> {
    let a = ex.content_features(gen)?;
    let b = ex.content_features(content)?;
    Ok((a - b)?.sqr()?.mean_all()?)
}

/// Squared distance between style statistics of each sample and its target
/// statistics (one `(B, 2C)` tensor per style layer), averaged over the batch.
pub fn style_loss_to_targets(gen: &Tensor, targets: &[Tensor], ex: &dyn FeatureExtractor) -> Result<Tensor> {
    let layers = ex.style_features(gen)?;
    if layers.len() != targets.len() {
        return Err(ModelError::arg(
            "style target count does not match the extractor's style layers",
        ));
    }
    let mut total: Option<Tensor> = None;
    for (l, t) in layers.iter().zip(targets) {
        let d = (style_statistics(l)? - t)?.sqr()?.sum(1)?.mean_all()?;
        total = Some(match total {
            None => d,
            Some(acc) => (acc + d)?,
        });
    }
    total.ok_or_else(|| ModelError::arg("extractor has no style layers"))
}

pub fn style_loss_t(gen: &Tensor, reference: &Tensor, ex: &dyn FeatureExtractor) -> Result<Tensor> {
    let targets = ex
        .style_features(reference)?
        .iter()
        .map(style_statistics)
        .collect::<Result<Vec<_>>>()?;
    style_loss_to_targets(gen, &targets, ex)
}

fn same_size(a: &Image, b: &Image) -> Result<()> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(ModelError::arg(format!(
            "images differ in size: {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Content loss between two images, evaluated at 64-bit precision.
pub fn content_loss(gen: &Image, content: &Image, ex: &dyn FeatureExtractor) -> Result<f64> {
    same_size(gen, content)?;
    scalar(&content_loss_t(
        &ops::image_batch(&[gen], DType::F64)?,
        &ops::image_batch(&[content], DType::F64)?,
        ex,
    )?)
}

/// Style loss between two images, evaluated at 64-bit precision.
pub fn style_loss(gen: &Image, reference: &Image, ex: &dyn FeatureExtractor) -> Result<f64> {
    scalar(&style_loss_t(
        &ops::image_batch(&[gen], DType::F64)?,
        &ops::image_batch(&[reference], DType::F64)?,
        ex,
    )?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextureTrainConfig {
    pub lr: f64,
    pub style_weight: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Number of style conditions (references).
    pub m: usize,
    /// Channel width of the first encoder stage.
    pub width: usize,
}

impl Default for TextureTrainConfig {
    fn default() -> Self {
        TextureTrainConfig {
            lr: 1e-4,
            style_weight: 10.0,
            iterations: 1000,
            batch_size: 4,
            seed: 0,
            m: 3,
            width: 16,
        }
    }
}

impl TextureTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.style_weight > 0.0) {
            return Err(ModelError::arg("lr and style_weight must be positive"));
        }
        if self.m == 0 || self.batch_size == 0 || self.width == 0 {
            return Err(ModelError::arg("m, batch_size and width must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextureMeta {
    pub m: usize,
    pub width: usize,
    pub seed: u64,
    pub extractor: String,
}

fn leaky(x: &Tensor) -> Result<Tensor> {
    Ok(x.maximum(&(x * 0.2)?)?)
}

fn conv_cfg(stride: usize) -> ConvGeometry {
    ConvGeometry::same3(stride, 1)
}

/// Conditional encoder-decoder predicting a residual that is added to the
/// input and clamped to `[0, 1]`. Condition planes enter at the input and
/// again at the bottleneck.
#[derive(Debug)]
pub struct TextureNetwork {
    params: ParamStore,
    e1: Conv,
    e2: Conv,
    e3: Conv,
    mid: Conv,
    d2: Conv,
    d1: Conv,
    out: Conv,
    meta: TextureMeta,
}

/// Spatial sizes must be multiples of this.
pub const TEXTURE_STRIDE: usize = 4;

pub fn build_texture_network(cfg: &TextureTrainConfig, extractor: &str) -> Result<TextureNetwork> {
    cfg.validate()?;
    TextureNetwork::from_meta(TextureMeta {
        m: cfg.m,
        width: cfg.width,
        seed: cfg.seed,
        extractor: extractor.to_string(),
    })
}

impl TextureNetwork {
    fn from_meta(meta: TextureMeta) -> Result<Self> {
        let mut ps = ParamStore::new(stream_seed(meta.seed, 0x7E_7000), DType::F32);
        let (w, m) = (meta.width, meta.m);
        Ok(TextureNetwork {
            e1: ps.conv2d("e1", 3 + m, w, conv_cfg(1))?,
            e2: ps.conv2d("e2", w, 2 * w, conv_cfg(2))?,
            e3: ps.conv2d("e3", 2 * w, 4 * w, conv_cfg(2))?,
            mid: ps.conv2d("mid", 4 * w + m, 4 * w, conv_cfg(1))?,
            d2: ps.conv2d("d2", 6 * w, 2 * w, conv_cfg(1))?,
            d1: ps.conv2d("d1", 3 * w, w, conv_cfg(1))?,
            out: ps.conv2d_zeroed("out", w, 3, conv_cfg(1))?,
            params: ps,
            meta,
        })
    }

    pub fn meta(&self) -> &TextureMeta {
        &self.meta
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn m(&self) -> usize {
        self.meta.m
    }

    pub fn forward(&self, x: &Tensor, conds: &[usize]) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        if c != 3 || b != conds.len() {
            return Err(ModelError::arg(
                "texture network expects RGB input and one condition per sample",
            ));
        }
        if h % TEXTURE_STRIDE != 0 || w % TEXTURE_STRIDE != 0 {
            return Err(ModelError::arg(format!(
                "texture network needs sizes divisible by {TEXTURE_STRIDE}, got {h}x{w}"
            )));
        }
        let m = self.meta.m;
        let c_full = ops::condition_planes(conds, m, h, w, x.dtype())?;
        let f1 = leaky(&self.e1.forward(&Tensor::cat(&[x, &c_full], 1)?)?)?;
        let f2 = leaky(&self.e2.forward(&f1)?)?;
        let f3 = leaky(&self.e3.forward(&f2)?)?;
        let c_low = ops::condition_planes(conds, m, h / 4, w / 4, x.dtype())?;
        let f3 = leaky(&self.mid.forward(&Tensor::cat(&[&f3, &c_low], 1)?)?)?;
        let u2 = ops::resize(&f3, h / 2, w / 2)?;
        let g2 = leaky(&self.d2.forward(&Tensor::cat(&[&u2, &f2], 1)?)?)?;
        let u1 = ops::resize(&g2, h, w)?;
        let g1 = leaky(&self.d1.forward(&Tensor::cat(&[&u1, &f1], 1)?)?)?;
        let residual = self.out.forward(&g1)?;
        Ok((x + residual)?.clamp(0.0, 1.0)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.params, &self.meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let meta: TextureMeta = checkpoint::read_meta(path)?;
        let net = Self::from_meta(meta)?;
        net.params.load(path)?;
        Ok(net)
    }
}

pub fn apply_texture(net: &TextureNetwork, img: &Image, cond: &StyleCondition) -> Result<Image> {
    if cond.len() != net.meta.m {
        return Err(ModelError::arg(format!(
            "condition has length {}, network was trained with M={}",
            cond.len(),
            net.meta.m
        )));
    }
    let y = net.forward(&ops::image_batch(&[img], DType::F32)?, &[cond.index()])?;
    let out = ops::unbatch(&y)?.remove(0);
    Ok(Image::from_clamped(out)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TextureLogRow {
    pub iteration: usize,
    pub content_loss: f64,
    pub style_loss: f64,
    pub total_loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TextureTrainLog {
    pub rows: Vec<TextureLogRow>,
}

impl TextureTrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,content_loss,style_loss\n");
        for r in &self.rows {
            s.push_str(&format!("{},{:.8},{:.8}\n", r.iteration, r.content_loss, r.style_loss));
        }
        s
    }
}

/// Minimizes `content + style_weight * style` with conditions drawn uniformly
/// and each condition's style target taken from its reference image.
pub fn train_texture_network(
    deformed: &[Image],
    refs: &StyleReferenceSet,
    ex: &dyn FeatureExtractor,
    cfg: &TextureTrainConfig,
) -> Result<(TextureNetwork, TextureTrainLog)> {
    cfg.validate()?;
    if deformed.is_empty() || refs.is_empty() {
        return Err(ModelError::arg("texture training needs images and style references"));
    }
    if refs.len() != cfg.m {
        return Err(ModelError::arg(format!(
            "{} style references but M={}",
            refs.len(),
            cfg.m
        )));
    }
    let net = build_texture_network(cfg, &ex.fingerprint())?;
    // Per reference, per style layer: (1, 2C) statistics.
    let ref_stats: Vec<Vec<Tensor>> = refs
        .references
        .iter()
        .map(|r| {
            ex.style_features(&ops::image_batch(&[r], DType::F32)?)?
                .iter()
                .map(|t| Ok(style_statistics(t)?.detach()))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let n_layers = ref_stats[0].len();

    let mut opt = AdamW::new(
        net.params.vars(),
        ParamsAdamW {
            lr: cfg.lr,
            weight_decay: 0.0,
            ..Default::default()
        },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, 0x7E_DA7A));
    let mut log = TextureTrainLog::default();
    for iteration in 0..cfg.iterations {
        let idx: Vec<usize> = (0..cfg.batch_size)
            .map(|_| rng.random_range(0..deformed.len()))
            .collect();
        let conds: Vec<usize> = (0..cfg.batch_size).map(|_| rng.random_range(0..cfg.m)).collect();
        let imgs: Vec<&Image> = idx.iter().map(|&i| &deformed[i]).collect();
        let x = ops::image_batch(&imgs, DType::F32)?;
        let targets = (0..n_layers)
            .map(|l| {
                let rows: Vec<&Tensor> = conds.iter().map(|&c| &ref_stats[c][l]).collect();
                Ok(Tensor::cat(&rows, 0)?)
            })
            .collect::<Result<Vec<_>>>()?;
        let y = net.forward(&x, &conds)?;
        let content = content_loss_t(&y, &x.detach(), ex)?;
        let style = style_loss_to_targets(&y, &targets, ex)?;
        let total = (&content + (&style * cfg.style_weight)?)?;
        opt.backward_step(&total)?;
        log.rows.push(TextureLogRow {
            iteration,
            content_loss: scalar(&content)?,
            style_loss: scalar(&style)?,
            total_loss: scalar(&total)?,
        });
    }
    Ok((net, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray(v: f32) -> Image {
        Image::filled(32, 32, [v; 3]).unwrap()
    }

    fn pattern(seed: usize) -> Image {
        Image::new(Planar::from_fn(3, 32, 32, |c, y, x| {
            (((c * 13 + y * 7 + x * 3 + seed * 5) % 17) as f32) / 16.0
        }))
        .unwrap()
    }

    #[test]
    fn identity_closed_forms() {
        let a = gray(0.2);
        let t = |v: f64| Tensor::full(v, (1, 3, 8, 8), &candle_core::Device::Cpu).unwrap();
        let c = content_loss_t(&(t(0.2) + 0.1).unwrap(), &t(0.2), &IdentityFeatures).unwrap();
        assert!((scalar(&c).unwrap() - 0.01).abs() < 1e-9);
        let st = style_loss_t(&t(0.2), &t(0.5), &IdentityFeatures).unwrap();
        assert!((scalar(&st).unwrap() - 0.27).abs() < 1e-9);
        assert_eq!(content_loss(&a, &a, &IdentityFeatures).unwrap(), 0.0);
        assert_eq!(style_loss(&a, &a, &IdentityFeatures).unwrap(), 0.0);
    }

    #[test]
    fn perceptual_losses_vanish_on_self_and_are_symmetric() {
        let ex = PerceptualExtractor::random(PerceptualConfig::default(), DType::F64).unwrap();
        let (a, b) = (pattern(1), pattern(2));
        assert_eq!(content_loss(&a, &a, &ex).unwrap(), 0.0);
        assert_eq!(style_loss(&a, &a, &ex).unwrap(), 0.0);
        let ab = content_loss(&a, &b, &ex).unwrap();
        assert!(ab > 0.0);
        assert_eq!(ab, content_loss(&b, &a, &ex).unwrap());
    }

    #[test]
    fn perceptual_layout_and_style_feature_length() {
        let ex = PerceptualExtractor::random(PerceptualConfig::default(), DType::F32).unwrap();
        assert_eq!(ex.layer_channels("relu3_3"), Some(32));
        let maps = ex.style_maps(&pattern(0)).unwrap();
        let chans: Vec<usize> = maps.iter().map(|m| m.channels()).collect();
        assert_eq!(chans, vec![8, 16, 32, 32]);
        assert_eq!(maps[3].height(), 4);
        let f = cariface_core::extract_style_feature(&pattern(0), &ex).unwrap();
        assert_eq!(f.len(), 2 * (8 + 16 + 32 + 32));
        let bad = PerceptualConfig {
            content_layer: "conv9_9".into(),
            ..Default::default()
        };
        assert!(PerceptualExtractor::random(bad, DType::F32).is_err());
        // Same seed, same weights.
        let again = PerceptualExtractor::random(PerceptualConfig::default(), DType::F32).unwrap();
        assert_eq!(StyleExtractor::fingerprint(&ex), StyleExtractor::fingerprint(&again));
    }

    #[test]
    fn fresh_network_is_identity_and_checks_conditions() {
        let cfg = TextureTrainConfig {
            width: 4,
            ..Default::default()
        };
        let net = build_texture_network(&cfg, "identity").unwrap();
        let img = pattern(3);
        let out = apply_texture(&net, &img, &StyleCondition::new(1, 3).unwrap()).unwrap();
        assert_eq!(out, img);
        assert!(apply_texture(&net, &img, &StyleCondition::new(0, 2).unwrap()).is_err());
    }

    fn refs(m: usize) -> StyleReferenceSet {
        let references: Vec<Image> = (0..m).map(|i| gray(0.2 + 0.3 * i as f32)).collect();
        StyleReferenceSet {
            indices: (0..m).collect(),
            labels: (0..m).collect(),
            references,
        }
    }

    #[test]
    fn training_is_reproducible_and_zero_iterations_is_a_no_op() {
        let cfg = TextureTrainConfig {
            width: 4,
            m: 2,
            batch_size: 2,
            iterations: 0,
            ..Default::default()
        };
        let imgs = vec![pattern(0), pattern(1)];
        let (net, log) = train_texture_network(&imgs, &refs(2), &IdentityFeatures, &cfg).unwrap();
        assert!(log.rows.is_empty());
        let fresh = build_texture_network(&cfg, "identity").unwrap();
        assert_eq!(net.params.fingerprint().unwrap(), fresh.params.fingerprint().unwrap());

        let cfg = TextureTrainConfig { iterations: 3, ..cfg };
        let (a, la) = train_texture_network(&imgs, &refs(2), &IdentityFeatures, &cfg).unwrap();
        let (_, lb) = train_texture_network(&imgs, &refs(2), &IdentityFeatures, &cfg).unwrap();
        assert_eq!(la, lb);
        assert_eq!(la.rows.len(), 3);
        assert!(train_texture_network(&imgs, &refs(3), &IdentityFeatures, &cfg).is_err());
        assert!(train_texture_network(&[], &refs(2), &IdentityFeatures, &cfg).is_err());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.safetensors");
        a.save(&path).unwrap();
        let b = TextureNetwork::load(&path).unwrap();
        assert_eq!(b.params.fingerprint().unwrap(), a.params.fingerprint().unwrap());
        assert_eq!(b.meta(), a.meta());
    }
}
