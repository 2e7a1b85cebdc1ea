//! Conditional warp generators and Wasserstein critics over landmark maps.

use std::path::Path;

use candle_core::{DType, Module, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use cariface_core::landmarks::{rasterize_batch, rasterize_landmark_map};
use cariface_core::warp::{dense_flow_from_control, sample_nearest, warp_image, DEFAULT_BOUND, DEFAULT_GRID};
use cariface_core::{
    ControlGrid, DenseFlow, Exec, Image, LabelMap, LandmarkGrouping, LandmarkMap, LandmarkSet, ShapeSet,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, stream_seed};
pub use crate::condition::Condition as ShapeCondition;
use crate::conv::{Conv, ConvGeometry};
use crate::error::{ModelError, Result};
use crate::ops;
use crate::params::ParamStore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShapeTrainConfig {
    pub lr: f64,
    /// Number of shape conditions (shape-set entries).
    pub k: usize,
    pub cycle_weight: f64,
    /// Critic weights are clipped to `[-clip, clip]` after every update.
    pub clip: f64,
    pub critic_steps: usize,
    pub iterations: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Control lattice is `grid x grid`.
    pub grid: usize,
    pub bound: f64,
    /// Channel width of the first encoder stage.
    pub width: usize,
    /// Gaussian sigma, in pixels, applied to maps before the critics see them.
    pub critic_blur: f64,
}

impl Default for ShapeTrainConfig {
    fn default() -> Self {
        ShapeTrainConfig {
            lr: 1e-4,
            k: 8,
            cycle_weight: 10.0,
            clip: 0.01,
            critic_steps: 5,
            iterations: 1000,
            batch_size: 8,
            seed: 0,
            grid: DEFAULT_GRID,
            bound: DEFAULT_BOUND,
            width: 16,
            critic_blur: 1.5,
        }
    }
}

impl ShapeTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.lr, self.cycle_weight, self.clip, self.bound];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(ModelError::arg("lr, cycle_weight, clip and bound must be positive"));
        }
        if self.k == 0 || self.critic_steps == 0 || self.batch_size == 0 || self.width == 0 {
            return Err(ModelError::arg(
                "k, critic_steps, batch_size and width must be positive",
            ));
        }
        if self.grid < 2 {
            return Err(ModelError::arg("control grid must be at least 2x2"));
        }
        if !(self.critic_blur >= 0.0) {
            return Err(ModelError::arg("critic_blur must be non-negative"));
        }
        Ok(())
    }
}

fn leaky(x: &Tensor) -> Result<Tensor> {
    Ok(x.maximum(&(x * 0.2)?)?)
}

fn stride2() -> ConvGeometry {
    ConvGeometry::same3(2, 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeGeneratorMeta {
    pub groups: usize,
    pub k: usize,
    pub canvas: usize,
    pub grid: usize,
    pub bound: f64,
    pub width: usize,
    pub grouping_fingerprint: String,
    pub stream: u64,
    pub seed: u64,
}

/// Predicts a bounded control grid from a landmark map and a shape condition.
///
/// The input is the map's G channels concatenated with K constant condition
/// planes; the head is zero-initialized so a fresh generator is the identity.
#[derive(Debug)]
pub struct ShapeGenerator {
    params: ParamStore,
    encoder: Vec<Conv>,
    head: Conv,
    meta: ShapeGeneratorMeta,
}

pub fn build_shape_generator(
    cfg: &ShapeTrainConfig,
    grouping: &LandmarkGrouping,
    canvas: usize,
    stream: u64,
) -> Result<ShapeGenerator> {
    cfg.validate()?;
    ShapeGenerator::from_meta(ShapeGeneratorMeta {
        groups: grouping.len(),
        k: cfg.k,
        canvas,
        grid: cfg.grid,
        bound: cfg.bound,
        width: cfg.width,
        grouping_fingerprint: grouping.fingerprint(),
        stream,
        seed: cfg.seed,
    })
}

impl ShapeGenerator {
    fn from_meta(meta: ShapeGeneratorMeta) -> Result<Self> {
        if meta.canvas < 32 || meta.canvas % 8 != 0 {
            return Err(ModelError::arg(format!(
                "landmark canvas must be a multiple of 8 and at least 32, got {}",
                meta.canvas
            )));
        }
        let mut ps = ParamStore::new(stream_seed(meta.seed, 0x5A_0000 + meta.stream), DType::F32);
        let w = meta.width;
        let encoder = vec![
            ps.conv2d("enc1", meta.groups + meta.k, w, stride2())?,
            ps.conv2d("enc2", w, 2 * w, stride2())?,
            ps.conv2d("enc3", 2 * w, 2 * w, stride2())?,
        ];
        let head = ps.conv2d_zeroed("head", 2 * w, 2, ConvGeometry::same3(1, 1))?;
        Ok(ShapeGenerator {
            params: ps,
            encoder,
            head,
            meta,
        })
    }

    pub fn meta(&self) -> &ShapeGeneratorMeta {
        &self.meta
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn k(&self) -> usize {
        self.meta.k
    }

    pub fn canvas(&self) -> usize {
        self.meta.canvas
    }

    /// Channels of the network input: G landmark groups followed by K condition planes.
    pub fn input_channels(&self) -> (usize, usize) {
        (self.meta.groups, self.meta.k)
    }

    /// Bounded control offsets, `(B, 2, grid, grid)`, x plane first.
    pub fn control(&self, maps: &Tensor, conds: &[usize]) -> Result<Tensor> {
        let (b, g, h, w) = maps.dims4()?;
        if g != self.meta.groups || b != conds.len() {
            return Err(ModelError::arg(format!(
                "generator expects {} map channels and one condition per sample, got {g} channels, {b} samples, {} conditions",
                self.meta.groups,
                conds.len()
            )));
        }
        let cond = ops::condition_planes(conds, self.meta.k, h, w, maps.dtype())?;
        let mut x = Tensor::cat(&[maps, &cond], 1)?;
        for conv in &self.encoder {
            x = leaky(&conv.forward(&x)?)?;
        }
        let x = ops::adaptive_avg_pool(&x, self.meta.grid)?;
        Ok((self.head.forward(&x)?.tanh()? * self.meta.bound)?)
    }

    /// Dense backward flow `(B, 2, H, W)` at the map resolution.
    pub fn flow(&self, maps: &Tensor, conds: &[usize]) -> Result<Tensor> {
        let (_, _, h, w) = maps.dims4()?;
        ops::resize(&self.control(maps, conds)?, h, w)
    }

    pub fn warp_maps(&self, maps: &Tensor, conds: &[usize]) -> Result<Tensor> {
        ops::warp(maps, &self.flow(maps, conds)?)
    }

    pub fn predict_control(&self, map: &LandmarkMap, cond: &ShapeCondition) -> Result<ControlGrid<f32>> {
        if cond.len() != self.meta.k {
            return Err(ModelError::arg(format!(
                "condition has length {}, generator was trained with K={}",
                cond.len(),
                self.meta.k
            )));
        }
        let x = ops::planar_batch(&[map.channels()], DType::F32)?;
        let c = self.control(&x, &[cond.index()])?;
        let offsets = c.flatten_all()?.to_vec1::<f32>()?;
        Ok(ControlGrid::new(
            self.meta.grid,
            self.meta.grid,
            offsets
                .iter()
                .map(|v| v.clamp(-self.meta.bound as f32, self.meta.bound as f32))
                .collect(),
            self.meta.bound as f32,
        )?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.params, &self.meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let meta: ShapeGeneratorMeta = checkpoint::read_meta(path)?;
        let g = Self::from_meta(meta)?;
        g.params.load(path)?;
        Ok(g)
    }
}

/// Scores landmark maps; higher means more target-like. Maps are Gaussian-blurred before scoring so thin one-pixel
/// strokes still yield useful gradients after sub-pixel warps.
#[derive(Debug)]
pub struct ShapeCritic {
    params: ParamStore,
    layers: Vec<Conv>,
    out: Conv,
    groups: usize,
    blur: f64,
}

pub fn build_shape_critic(cfg: &ShapeTrainConfig, groups: usize, stream: u64) -> Result<ShapeCritic> {
    cfg.validate()?;
    let mut ps = ParamStore::new(stream_seed(cfg.seed, 0xC0_0000 + stream), DType::F32);
    let w = cfg.width;
    let layers = vec![
        ps.conv2d("c1", groups, w, stride2())?,
        ps.conv2d("c2", w, 2 * w, stride2())?,
        ps.conv2d("c3", 2 * w, 2 * w, stride2())?,
    ];
    let out = ps.conv2d("out", 2 * w, 1, ConvGeometry::pointwise(1))?;
    ps.clamp_all(cfg.clip)?;
    Ok(ShapeCritic {
        params: ps,
        layers,
        out,
        groups,
        blur: cfg.critic_blur,
    })
}

impl ShapeCritic {
    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Mean score over the batch.
    pub fn score(&self, maps: &Tensor) -> Result<Tensor> {
        let g = maps.dims4()?.1;
        if g != self.groups {
            return Err(ModelError::arg(format!(
                "critic expects {} channels, got {g}",
                self.groups
            )));
        }
        let mut x = ops::gaussian_blur(maps, self.blur)?;
        for conv in &self.layers {
            x = leaky(&conv.forward(&x)?)?;
        }
        Ok(self.out.forward(&x)?.mean_all()?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapeLogRow {
    pub iteration: usize,
    pub critic_loss: f64,
    pub generator_loss: f64,
    pub cycle_loss: f64,
    /// Largest absolute critic weight after this iteration's last update.
    pub critic_max_abs: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ShapeTrainLog {
    pub rows: Vec<ShapeLogRow>,
    /// Largest absolute critic weight observed after each critic update.
    pub critic_bounds: Vec<f64>,
}

impl ShapeTrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,critic_loss,generator_loss,cycle_loss\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{:.8},{:.8},{:.8}\n",
                r.iteration, r.critic_loss, r.generator_loss, r.cycle_loss
            ));
        }
        s
    }
}

/// Trained photo-to-caricature and caricature-to-photo generators.
#[derive(Debug)]
pub struct ShapeModels {
    pub photo_to_cari: ShapeGenerator,
    pub cari_to_photo: ShapeGenerator,
    pub log: ShapeTrainLog,
}

fn stack(maps: &[LandmarkMap], idx: &[usize]) -> Result<Tensor> {
    let sel: Vec<_> = idx.iter().map(|&i| maps[i].channels()).collect();
    ops::planar_batch(&sel, DType::F32)
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Cycle-consistent adversarial training of both warp generators.
///
/// Photo samples draw their condition uniformly from the K entries; each
/// caricature is conditioned on its nearest shape-set entry, and the same
/// condition is reused for the return trip of each cycle.
pub fn train_shape_adaptation(
    photo_landmarks: &[LandmarkSet],
    cari_landmarks: &[LandmarkSet],
    shapes: &ShapeSet,
    grouping: &LandmarkGrouping,
    canvas: usize,
    cfg: &ShapeTrainConfig,
) -> Result<ShapeModels> {
    cfg.validate()?;
    if photo_landmarks.is_empty() || cari_landmarks.is_empty() {
        return Err(ModelError::arg("shape training needs photo and caricature landmarks"));
    }
    if shapes.len() != cfg.k {
        return Err(ModelError::arg(format!(
            "shape set has {} entries but K={}",
            shapes.len(),
            cfg.k
        )));
    }
    let exec = Exec::default();
    let photo_maps = rasterize_batch(exec, photo_landmarks, grouping, canvas, canvas)?;
    let cari_maps = rasterize_batch(exec, cari_landmarks, grouping, canvas, canvas)?;
    let cari_conds: Vec<usize> = cari_landmarks.iter().map(|l| shapes.nearest(l)).collect();
    let groups = grouping.len();

    let g_pc = build_shape_generator(cfg, grouping, canvas, 0)?;
    let g_cp = build_shape_generator(cfg, grouping, canvas, 1)?;
    let d_cari = build_shape_critic(cfg, groups, 0)?;
    let d_photo = build_shape_critic(cfg, groups, 1)?;

    let adam = ParamsAdamW {
        lr: cfg.lr,
        beta1: 0.5,
        beta2: 0.999,
        eps: 1e-8,
        weight_decay: 0.0,
    };
    let mut gen_vars = g_pc.params.vars();
    gen_vars.extend(g_cp.params.vars());
    let mut critic_vars = d_cari.params.vars();
    critic_vars.extend(d_photo.params.vars());
    let mut gen_opt = AdamW::new(gen_vars, adam.clone())?;
    let mut critic_opt = AdamW::new(critic_vars, adam)?;

    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, 0xDA7A));
    let bs = cfg.batch_size;
    let draw = |rng: &mut ChaCha8Rng| {
        let p: Vec<usize> = (0..bs).map(|_| rng.random_range(0..photo_maps.len())).collect();
        let c: Vec<usize> = (0..bs).map(|_| rng.random_range(0..cari_maps.len())).collect();
        let pc: Vec<usize> = (0..bs).map(|_| rng.random_range(0..cfg.k)).collect();
        (p, c, pc)
    };

    let mut log = ShapeTrainLog::default();
    for iteration in 0..cfg.iterations {
        let mut critic_loss = 0.0;
        for _ in 0..cfg.critic_steps {
            let (pi, ci, pc) = draw(&mut rng);
            let cc: Vec<usize> = ci.iter().map(|&i| cari_conds[i]).collect();
            let p = stack(&photo_maps, &pi)?;
            let c = stack(&cari_maps, &ci)?;
            let fake_c = g_pc.warp_maps(&p, &pc)?.detach();
            let fake_p = g_cp.warp_maps(&c, &cc)?.detach();
            let loss_c = (d_cari.score(&fake_c)? - d_cari.score(&c)?)?;
            let loss_p = (d_photo.score(&fake_p)? - d_photo.score(&p)?)?;
            let loss = (loss_c + loss_p)?;
            critic_opt.backward_step(&loss)?;
            d_cari.params.clamp_all(cfg.clip)?;
            d_photo.params.clamp_all(cfg.clip)?;
            log.critic_bounds
                .push(d_cari.params.max_abs()?.max(d_photo.params.max_abs()?));
            critic_loss = scalar(&loss)?;
        }

        let (pi, ci, pc) = draw(&mut rng);
        let cc: Vec<usize> = ci.iter().map(|&i| cari_conds[i]).collect();
        let p = stack(&photo_maps, &pi)?;
        let c = stack(&cari_maps, &ci)?;
        let fake_c = g_pc.warp_maps(&p, &pc)?;
        let rec_p = g_cp.warp_maps(&fake_c, &pc)?;
        let fake_p = g_cp.warp_maps(&c, &cc)?;
        let rec_c = g_pc.warp_maps(&fake_p, &cc)?;
        let adv = (d_cari.score(&fake_c)?.neg()? - d_photo.score(&fake_p)?)?;
        let cycle = ((rec_p - &p)?.abs()?.mean_all()? + (rec_c - &c)?.abs()?.mean_all()?)?;
        let loss = (&adv + (&cycle * cfg.cycle_weight)?)?;
        gen_opt.backward_step(&loss)?;

        log.rows.push(ShapeLogRow {
            iteration,
            critic_loss,
            generator_loss: scalar(&adv)?,
            cycle_loss: scalar(&cycle)?,
            critic_max_abs: *log.critic_bounds.last().unwrap_or(&0.0),
        });
    }
    Ok(ShapeModels {
        photo_to_cari: g_pc,
        cari_to_photo: g_cp,
        log,
    })
}

/// A shape-adapted sample: the image and its labels warped by one flow.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeAdapted {
    pub image: Image,
    pub labels: LabelMap,
    pub flow: DenseFlow<f32>,
}

/// Warps a photo and its labels with the flow predicted from the photo's own
/// landmarks and a shape condition.
pub fn apply_shape_adaptation(
    generator: &ShapeGenerator,
    img: &Image,
    lbl: &LabelMap,
    lms: &LandmarkSet,
    cond: &ShapeCondition,
    grouping: &LandmarkGrouping,
) -> Result<ShapeAdapted> {
    if grouping.fingerprint() != generator.meta.grouping_fingerprint {
        return Err(ModelError::arg(
            "landmark grouping differs from the one the generator was trained with",
        ));
    }
    let map = rasterize_landmark_map(lms, grouping, generator.canvas(), generator.canvas())?;
    let cg = generator.predict_control(&map, cond)?;
    let flow = dense_flow_from_control(&cg, img.height(), img.width())?;
    let image = warp_image(img, &flow)?;
    let labels = sample_nearest(lbl, &flow)?;
    Ok(ShapeAdapted { image, labels, flow })
}

#[cfg(test)]
mod tests {
    use super::*;
    use cariface_core::cluster_shapes;
    use cariface_core::toy::{render_toy_face, Domain};

    fn cfg(k: usize) -> ShapeTrainConfig {
        ShapeTrainConfig {
            k,
            width: 4,
            iterations: 0,
            batch_size: 2,
            critic_steps: 1,
            ..Default::default()
        }
    }

    fn faces(domain: Domain, n: usize) -> Vec<cariface_core::toy::ToyFace> {
        (0..n).map(|i| render_toy_face(i, domain, 3, 64).unwrap()).collect()
    }

    #[test]
    fn fresh_generator_is_identity() {
        let grouping = LandmarkGrouping::default();
        let g = build_shape_generator(&cfg(3), &grouping, 64, 0).unwrap();
        assert_eq!(g.input_channels(), (grouping.len(), 3));
        let f = &faces(Domain::Photo, 1)[0];
        let map = rasterize_landmark_map(&f.landmarks, &grouping, 64, 64).unwrap();
        let cg = g.predict_control(&map, &ShapeCondition::new(1, 3).unwrap()).unwrap();
        assert!(cg.offsets().iter().all(|v| v.abs() < 1e-6));
        let out = apply_shape_adaptation(
            &g,
            &f.image,
            &f.labels,
            &f.landmarks,
            &ShapeCondition::new(0, 3).unwrap(),
            &grouping,
        )
        .unwrap();
        assert_eq!(out.image, f.image);
        assert_eq!(out.labels, f.labels);
        assert!(apply_shape_adaptation(
            &g,
            &f.image,
            &f.labels,
            &f.landmarks,
            &ShapeCondition::new(0, 4).unwrap(),
            &grouping
        )
        .is_err());
    }

    #[test]
    fn construction_is_deterministic() {
        let grouping = LandmarkGrouping::default();
        let a = build_shape_generator(&cfg(2), &grouping, 64, 0).unwrap();
        let b = build_shape_generator(&cfg(2), &grouping, 64, 0).unwrap();
        let c = build_shape_generator(&cfg(2), &grouping, 64, 1).unwrap();
        assert_eq!(a.params.fingerprint().unwrap(), b.params.fingerprint().unwrap());
        assert_ne!(a.params.fingerprint().unwrap(), c.params.fingerprint().unwrap());
        let d = build_shape_critic(&cfg(2), grouping.len(), 0).unwrap();
        assert!(d.params.max_abs().unwrap() <= 0.01 + 1e-9);
    }

    #[test]
    fn zero_iterations_and_clipping() {
        let grouping = LandmarkGrouping::default();
        let photos: Vec<_> = faces(Domain::Photo, 4).into_iter().map(|f| f.landmarks).collect();
        let caris: Vec<_> = faces(Domain::Caricature, 4).into_iter().map(|f| f.landmarks).collect();
        let shapes = cluster_shapes(&caris, 2, 0).unwrap();
        let fresh = build_shape_generator(&cfg(2), &grouping, 64, 0).unwrap();
        let m = train_shape_adaptation(&photos, &caris, &shapes, &grouping, 64, &cfg(2)).unwrap();
        assert!(m.log.rows.is_empty());
        assert_eq!(
            m.photo_to_cari.params.fingerprint().unwrap(),
            fresh.params.fingerprint().unwrap()
        );

        let mut c = cfg(2);
        c.iterations = 3;
        c.critic_steps = 2;
        let m = train_shape_adaptation(&photos, &caris, &shapes, &grouping, 64, &c).unwrap();
        assert_eq!(m.log.rows.len(), 3);
        assert_eq!(m.log.critic_bounds.len(), 6);
        assert!(m.log.critic_bounds.iter().all(|&b| b <= 0.01 + 1e-9));
        // Identity warps at the start make the first cycle loss exactly zero.
        assert_eq!(m.log.rows[0].cycle_loss, 0.0);
        assert!(m
            .log
            .to_csv()
            .starts_with("iteration,critic_loss,generator_loss,cycle_loss\n"));
        assert!(train_shape_adaptation(&[], &caris, &shapes, &grouping, 64, &c).is_err());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let grouping = LandmarkGrouping::default();
        let g = build_shape_generator(&cfg(2), &grouping, 64, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.safetensors");
        g.save(&path).unwrap();
        let h = ShapeGenerator::load(&path).unwrap();
        assert_eq!(h.meta(), g.meta());
        assert_eq!(h.params.fingerprint().unwrap(), g.params.fingerprint().unwrap());
    }
}
