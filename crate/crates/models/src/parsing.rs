//! Dilated residual face parser with a pyramid pooling head.

use std::path::Path;

use candle_core::{DType, Device, Module, Tensor};
use candle_nn::{AdamW, GroupNorm, Optimizer, ParamsAdamW};
use cariface_core::dataset::flip_class_mapping;
use cariface_core::{Image, LabelMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{self, stream_seed};
use crate::conv::{Conv, ConvGeometry};
use crate::error::{ModelError, Result};
use crate::ops;
use crate::params::ParamStore;

/// Ratio of input size to backbone feature size.
pub const OUTPUT_STRIDE: usize = 8;

/// Channel widths of the full-size profile (stem, then four stages).
pub const FULL_WIDTHS: [usize; 5] = [64, 256, 512, 1024, 2048];

pub const PYRAMID_BINS: [usize; 4] = [1, 2, 3, 6];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParseTrainConfig {
    pub base_lr: f64,
    pub power: f64,
    pub max_iter: usize,
    pub batch_size: usize,
    pub crop_size: usize,
    pub num_classes: usize,
    pub seed: u64,
    /// Divides every channel width of the full profile (1 = full size).
    pub width_divisor: usize,
    /// Mirror samples with probability 1/2, swapping left/right classes.
    pub flip: bool,
    /// Uniform rescaling range applied before cropping; `[1, 1]` disables it.
    pub scale_range: [f64; 2],
}

impl Default for ParseTrainConfig {
    fn default() -> Self {
        ParseTrainConfig {
            base_lr: 1e-3,
            power: 0.9,
            max_iter: 500,
            batch_size: 8,
            crop_size: 64,
            num_classes: cariface_core::NUM_CLASSES,
            seed: 0,
            width_divisor: 8,
            flip: true,
            scale_range: [0.875, 1.125],
        }
    }
}

impl ParseTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.power > 0.0) {
            return Err(ModelError::arg("base_lr and power must be positive"));
        }
        if self.num_classes < 2 || self.num_classes > 256 {
            return Err(ModelError::arg("num_classes must lie in [2, 256]"));
        }
        if self.batch_size == 0 || self.width_divisor == 0 || FULL_WIDTHS.iter().any(|w| w % self.width_divisor != 0) {
            return Err(ModelError::arg(
                "batch_size must be positive and width_divisor must divide 64",
            ));
        }
        if self.crop_size < 32 || self.crop_size % OUTPUT_STRIDE != 0 {
            return Err(ModelError::arg("crop_size must be a multiple of 8 and at least 32"));
        }
        let [lo, hi] = self.scale_range;
        if !(lo > 0.0 && lo <= hi) {
            return Err(ModelError::arg("scale_range must satisfy 0 < min <= max"));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// Poly schedule: `base_lr * (1 - iter / max_iter)^power`.
pub fn poly_lr(iter: usize, base_lr: f64, power: f64, max_iter: usize) -> Result<f64> {
    if iter > max_iter {
        return Err(ModelError::arg(format!("iteration {iter} beyond max_iter {max_iter}")));
    }
    if iter == max_iter {
        return Ok(0.0);
    }
    Ok(base_lr * (1.0 - iter as f64 / max_iter as f64).powf(power))
}

fn groups_for(c: usize) -> usize {
    [8, 4, 2, 1].into_iter().find(|g| c % g == 0).unwrap_or(1)
}

fn conv3(stride: usize, dilation: usize) -> ConvGeometry {
    ConvGeometry::same3(stride, dilation)
}

#[derive(Debug)]
struct ResBlock {
    c1: Conv,
    n1: GroupNorm,
    c2: Conv,
    n2: GroupNorm,
    shortcut: Option<(Conv, GroupNorm)>,
}

impl ResBlock {
    fn new(ps: &mut ParamStore, name: &str, cin: usize, cout: usize, stride: usize, dilation: usize) -> Result<Self> {
        let shortcut = if cin != cout || stride != 1 {
            Some((
                ps.conv2d(&format!("{name}.proj"), cin, cout, ConvGeometry::pointwise(stride))?,
                ps.group_norm(&format!("{name}.proj_norm"), cout, groups_for(cout))?,
            ))
        } else {
            None
        };
        Ok(ResBlock {
            c1: ps.conv2d(&format!("{name}.conv1"), cin, cout, conv3(stride, dilation))?,
            n1: ps.group_norm(&format!("{name}.norm1"), cout, groups_for(cout))?,
            c2: ps.conv2d(&format!("{name}.conv2"), cout, cout, conv3(1, dilation))?,
            n2: ps.group_norm(&format!("{name}.norm2"), cout, groups_for(cout))?,
            shortcut,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.n1.forward(&self.c1.forward(x)?)?.relu()?;
        let y = self.n2.forward(&self.c2.forward(&y)?)?;
        let s = match &self.shortcut {
            Some((c, n)) => n.forward(&c.forward(x)?)?,
            None => x.clone(),
        };
        Ok((y + s)?.relu()?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParserMeta {
    pub num_classes: usize,
    pub width_divisor: usize,
    pub seed: u64,
    pub config_hash: String,
}

/// Stride-8 residual encoder (dilations 2 and 4 in the last two stages),
/// pyramid pooling over bins {1, 2, 3, 6}, a 1x1 classifier and bilinear
/// upsampling back to the input size.
#[derive(Debug)]
pub struct ParsingNetwork {
    params: ParamStore,
    stem: (Conv, GroupNorm),
    stages: Vec<ResBlock>,
    pyramid: Vec<Conv>,
    fuse: (Conv, GroupNorm),
    classifier: Conv,
    meta: ParserMeta,
}

pub fn build_parsing_network(cfg: &ParseTrainConfig) -> Result<ParsingNetwork> {
    cfg.validate()?;
    ParsingNetwork::from_meta(ParserMeta {
        num_classes: cfg.num_classes,
        width_divisor: cfg.width_divisor,
        seed: cfg.seed,
        config_hash: cfg.hash(),
    })
}

impl ParsingNetwork {
    fn from_meta(meta: ParserMeta) -> Result<Self> {
        let mut ps = ParamStore::new(stream_seed(meta.seed, 0x9A_0000), DType::F32);
        let w: Vec<usize> = FULL_WIDTHS.iter().map(|c| c / meta.width_divisor).collect();
        let stem = (
            ps.conv2d("stem", 3, w[0], conv3(2, 1))?,
            ps.group_norm("stem_norm", w[0], groups_for(w[0]))?,
        );
        let stages = vec![
            ResBlock::new(&mut ps, "layer1", w[0], w[1], 2, 1)?,
            ResBlock::new(&mut ps, "layer2", w[1], w[2], 2, 1)?,
            ResBlock::new(&mut ps, "layer3", w[2], w[3], 1, 2)?,
            ResBlock::new(&mut ps, "layer4", w[3], w[4], 1, 4)?,
        ];
        let branch = w[4] / 4;
        let pyramid = PYRAMID_BINS
            .iter()
            .map(|b| ps.conv2d(&format!("pyramid{b}"), w[4], branch, ConvGeometry::pointwise(1)))
            .collect::<Result<Vec<_>>>()?;
        let fused = w[4] / 2;
        let fuse = (
            ps.conv2d("fuse", w[4] + branch * PYRAMID_BINS.len(), fused, conv3(1, 1))?,
            ps.group_norm("fuse_norm", fused, groups_for(fused))?,
        );
        let classifier = ps.conv2d("classifier", fused, meta.num_classes, ConvGeometry::pointwise(1))?;
        Ok(ParsingNetwork {
            params: ps,
            stem,
            stages,
            pyramid,
            fuse,
            classifier,
            meta,
        })
    }

    pub fn meta(&self) -> &ParserMeta {
        &self.meta
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn num_classes(&self) -> usize {
        self.meta.num_classes
    }

    fn check_size(h: usize, w: usize) -> Result<()> {
        if h % OUTPUT_STRIDE != 0 || w % OUTPUT_STRIDE != 0 || h < 32 || w < 32 {
            return Err(ModelError::arg(format!(
                "parser input must be at least 32x32 with sides divisible by {OUTPUT_STRIDE}, got {h}x{w}"
            )));
        }
        Ok(())
    }

    /// Backbone features, `(B, C4, H/8, W/8)`.
    pub fn backbone(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        Self::check_size(h, w)?;
        let x = ((x - 0.5)? * 2.0)?;
        let mut y = self.stem.1.forward(&self.stem.0.forward(&x)?)?.relu()?;
        for s in &self.stages {
            y = s.forward(&y)?;
        }
        Ok(y)
    }

    /// Per-pixel class logits, `(B, C, H, W)`.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        let f = self.backbone(x)?;
        let (_, _, fh, fw) = f.dims4()?;
        let mut parts = vec![f.clone()];
        for (conv, &bins) in self.pyramid.iter().zip(&PYRAMID_BINS) {
            let p = conv.forward(&ops::adaptive_avg_pool(&f, bins)?)?.relu()?;
            parts.push(ops::resize(&p, fh, fw)?);
        }
        let y = self
            .fuse
            .1
            .forward(&self.fuse.0.forward(&Tensor::cat(&parts, 1)?)?)?
            .relu()?;
        ops::resize(&self.classifier.forward(&y)?, h, w)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.params, &self.meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let meta: ParserMeta = checkpoint::read_meta(path)?;
        let net = Self::from_meta(meta)?;
        net.params.load(path)?;
        Ok(net)
    }
}

/// Argmax labels for one image.
pub fn predict(net: &ParsingNetwork, img: &Image) -> Result<LabelMap> {
    let (h, w) = (img.height(), img.width());
    ParsingNetwork::check_size(h, w)?;
    let logits = net.logits(&ops::image_batch(&[img], DType::F32)?)?;
    let classes = logits.argmax(1)?.flatten_all()?.to_vec1::<u32>()?;
    Ok(LabelMap::new(
        h,
        w,
        net.num_classes(),
        classes.into_iter().map(|c| c as u8).collect(),
    )?)
}

/// A labelled training image.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsePair {
    pub name: String,
    pub image: Image,
    pub labels: LabelMap,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParseLogRow {
    pub iteration: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParseTrainLog {
    pub rows: Vec<ParseLogRow>,
}

impl ParseTrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,lr,loss\n");
        for r in &self.rows {
            s.push_str(&format!("{},{:e},{:.8}\n", r.iteration, r.lr, r.loss));
        }
        s
    }
}

/// Mirror with left/right class swap and random rescale, then a random
/// `crop x crop` window (zero/background padded when the image is smaller).
pub fn augment(pair: &ParsePair, cfg: &ParseTrainConfig, rng: &mut ChaCha8Rng) -> Result<(Image, LabelMap)> {
    let (mut img, mut lbl) = (pair.image.clone(), pair.labels.clone());
    if cfg.flip && rng.random_bool(0.5) {
        img = img.flip_horizontal();
        lbl = lbl.flip_horizontal().relabel(&flip_class_mapping(lbl.num_classes()))?;
    }
    let [lo, hi] = cfg.scale_range;
    if hi > lo || lo != 1.0 {
        let s = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        // Rasters below the minimum side are not representable.
        let side = |n: usize| ((n as f64 * s).round() as usize).max(cariface_core::raster::MIN_SIDE);
        let (h, w) = (side(img.height()), side(img.width()));
        if (h, w) != (img.height(), img.width()) {
            img = img.resize_bilinear(h, w)?;
            lbl = lbl.resize_nearest(h, w);
        }
    }
    let c = cfg.crop_size;
    let offset = |len: usize, rng: &mut ChaCha8Rng| -> isize {
        if len >= c {
            rng.random_range(0..=len - c) as isize
        } else {
            -(rng.random_range(0..=c - len) as isize)
        }
    };
    let top = offset(img.height(), rng);
    let left = offset(img.width(), rng);
    Ok((
        img.crop_padded(top, left, c, c, [0.0; 3])?,
        lbl.crop_padded(top, left, c, c, 0),
    ))
}

/// Per-pixel cross-entropy with Adam under the poly schedule.
pub fn train_parser(pairs: &[ParsePair], cfg: &ParseTrainConfig) -> Result<(ParsingNetwork, ParseTrainLog)> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(ModelError::arg("parser training needs at least one pair"));
    }
    for p in pairs {
        if let Some(&v) = p.labels.data().iter().find(|&&v| v as usize >= cfg.num_classes) {
            return Err(ModelError::Data {
                name: p.name.clone(),
                msg: format!("label {v} outside {} classes", cfg.num_classes),
            });
        }
        if (p.labels.height(), p.labels.width()) != (p.image.height(), p.image.width()) {
            return Err(ModelError::Data {
                name: p.name.clone(),
                msg: "label map and image differ in size".into(),
            });
        }
    }
    let net = build_parsing_network(cfg)?;
    let mut opt = AdamW::new(
        net.params.vars(),
        ParamsAdamW {
            lr: cfg.base_lr,
            weight_decay: 0.0,
            ..Default::default()
        },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, 0x9A_DA7A));
    let mut log = ParseTrainLog::default();
    let c = cfg.crop_size;
    for iteration in 0..cfg.max_iter {
        let lr = poly_lr(iteration, cfg.base_lr, cfg.power, cfg.max_iter)?;
        opt.set_learning_rate(lr);
        let mut imgs = Vec::with_capacity(cfg.batch_size);
        let mut targets = Vec::with_capacity(cfg.batch_size * c * c);
        for _ in 0..cfg.batch_size {
            let p = &pairs[rng.random_range(0..pairs.len())];
            let (img, lbl) = augment(p, cfg, &mut rng)?;
            targets.extend(lbl.data().iter().map(|&v| v as u32));
            imgs.push(img);
        }
        let refs: Vec<&Image> = imgs.iter().collect();
        let x = ops::image_batch(&refs, DType::F32)?;
        let logits = net.logits(&x)?;
        let flat = logits
            .permute((0, 2, 3, 1))?
            .reshape((cfg.batch_size * c * c, cfg.num_classes))?;
        let target = Tensor::from_vec(targets, cfg.batch_size * c * c, &Device::Cpu)?;
        let loss = candle_nn::loss::cross_entropy(&flat, &target)?;
        opt.backward_step(&loss)?;
        log.rows.push(ParseLogRow {
            iteration,
            lr,
            loss: loss.to_dtype(DType::F64)?.to_scalar::<f64>()?,
        });
    }
    Ok((net, log))
}
