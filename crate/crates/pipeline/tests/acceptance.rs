//! End-to-end acceptance checks. Runs as a plain binary so every criterion
//! prints one PASS/FAIL line; exits nonzero if any fails.
//!
//! Criteria 5-8 share four toy pipeline runs (seeds 1, 2, 3 and a repeat of
//! seed 1), which take the bulk of the runtime.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Device, Tensor, Var};
use cariface_core::metrics::IoUReport;
use cariface_core::raster::Planar;
use cariface_core::toy::{render_toy_face, Domain};
use cariface_core::warp::{flow_gradients, sample_bilinear};
use cariface_core::{iou_report, render_table, ConfusionMatrix, DenseFlow, Image, LabelMap, LandmarkGrouping};
use cariface_models::parsing::{poly_lr, train_parser, ParsePair, ParseTrainConfig};
use cariface_models::shape::{apply_shape_adaptation, ShapeCondition, ShapeGenerator, ShapeTrainLog};
use cariface_models::texture::{
    apply_texture, content_loss, content_loss_t, style_loss, style_loss_t, IdentityFeatures, PerceptualConfig,
    PerceptualExtractor, StyleCondition, TextureNetwork,
};
use cariface_pipeline::workspace::{file_sha256, read_json};
use cariface_pipeline::{make_toy_data, run_ablation, Arm, PipelineConfig, Workspace};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 3] = [1, 2, 3];

// Pinned tolerances.
const WARP_GRAD_REL_TOL: f64 = 1e-4;
const LOSS_CLOSED_FORM_TOL: f64 = 1e-9;
const LOSS_GRAD_REL_TOL: f64 = 1e-4;
const CRITIC_CLIP: f64 = 0.01;
const POLY_MID_TOL: f64 = 1e-8;
const ABLATION_MARGIN: f64 = 0.05;
const FLOW_DISTINCT: f64 = 1e-3;
const STYLE_DISTINCT: f64 = 1e-3;
const FAST_CHECK_SECONDS: f64 = 10.0;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = a
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

// ---- 1: warp ---------------------------------------------------------------

/// Flow whose source coordinates stay inside the image and away from pixel
/// boundaries, where the sampler is differentiable.
fn smooth_flow(rng: &mut ChaCha8Rng, h: usize, w: usize) -> DenseFlow<f64> {
    let coord = |rng: &mut ChaCha8Rng, pos: usize, len: usize| {
        let cell = rng.random_range(0..len - 1) as f64;
        let s = cell + rng.random_range(0.05..0.95);
        (s - pos as f64) / (len - 1) as f64
    };
    let field = Planar::from_fn(
        2,
        h,
        w,
        |c, y, x| if c == 0 { coord(rng, x, w) } else { coord(rng, y, h) },
    );
    DenseFlow::new(field).unwrap()
}

fn warp_correctness() -> Verdict {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let img = Planar::from_fn(3, 8, 9, |_, _, _| rng.random_range(-1.0..1.0f64));
    if sample_bilinear(&img, &DenseFlow::zeros(8, 9)).unwrap() != img {
        return verdict(false, "zero flow is not the identity");
    }
    for (dx, dy) in [(1i32, 0i32), (-1, 0), (0, 1), (0, -1)] {
        let flow = DenseFlow::constant(8, 9, dx as f64 / 8.0, dy as f64 / 7.0);
        let out = sample_bilinear(&img, &flow).unwrap();
        for c in 0..3 {
            for y in 0..8 {
                for x in 0..9 {
                    let sx = (x as i32 + dx).clamp(0, 8) as usize;
                    let sy = (y as i32 + dy).clamp(0, 7) as usize;
                    if out.get(c, y, x) != img.get(c, sy, sx) {
                        return verdict(false, format!("shift ({dx},{dy}) differs at ({c},{y},{x})"));
                    }
                }
            }
        }
    }
    let mut worst = 0.0f64;
    let eps = 1e-6;
    for _ in 0..100 {
        let img = Planar::from_fn(2, 8, 8, |_, _, _| rng.random_range(0.0..1.0f64));
        let up = Planar::from_fn(2, 8, 8, |_, _, _| rng.random_range(-1.0..1.0f64));
        let flow = smooth_flow(&mut rng, 8, 8);
        let (gi, gf) = flow_gradients(&img, &flow, &up).unwrap();
        let loss = |img: &Planar<f64>, flow: &DenseFlow<f64>| -> f64 {
            let o = sample_bilinear(img, flow).unwrap();
            o.data().iter().zip(up.data()).map(|(a, b)| a * b).sum()
        };
        let mut fd_flow = Vec::with_capacity(128);
        for i in 0..128 {
            let mut f = flow.field().clone();
            f.data_mut()[i] += eps;
            let plus = loss(&img, &DenseFlow::new(f.clone()).unwrap());
            f.data_mut()[i] -= 2.0 * eps;
            let minus = loss(&img, &DenseFlow::new(f).unwrap());
            fd_flow.push((plus - minus) / (2.0 * eps));
        }
        let mut fd_img = Vec::with_capacity(128);
        for i in 0..128 {
            let mut p = img.clone();
            p.data_mut()[i] += eps;
            let plus = loss(&p, &flow);
            p.data_mut()[i] -= 2.0 * eps;
            let minus = loss(&p, &flow);
            fd_img.push((plus - minus) / (2.0 * eps));
        }
        worst = worst
            .max(rel_err(gf.field().data(), &fd_flow))
            .max(rel_err(gi.data(), &fd_img));
    }
    let secs = t.elapsed().as_secs_f64();
    verdict(
        worst <= WARP_GRAD_REL_TOL && secs < FAST_CHECK_SECONDS,
        format!("identity and shifts exact, worst gradient rel err {worst:.2e}, {secs:.2}s"),
    )
}

// ---- 2: metrics ------------------------------------------------------------

fn brute_force_iou(pairs: &[(LabelMap, LabelMap)], c: usize) -> (Vec<Option<f64>>, f64) {
    let per_class: Vec<Option<f64>> = (1..c as u8)
        .map(|k| {
            let mut pred = HashSet::new();
            let mut gt = HashSet::new();
            for (n, (p, g)) in pairs.iter().enumerate() {
                for (i, (&a, &b)) in p.data().iter().zip(g.data()).enumerate() {
                    if a == k {
                        pred.insert((n, i));
                    }
                    if b == k {
                        gt.insert((n, i));
                    }
                }
            }
            let union = pred.union(&gt).count();
            (union > 0).then(|| pred.intersection(&gt).count() as f64 / union as f64)
        })
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let miou = present.iter().sum::<f64>() / present.len() as f64;
    (per_class, miou)
}

fn metric_oracle() -> Verdict {
    let t = Instant::now();
    let c = 10;
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let random_map = |rng: &mut ChaCha8Rng| {
        LabelMap::new(16, 16, c, (0..256).map(|_| rng.random_range(0..c as u8)).collect()).unwrap()
    };
    let pairs: Vec<(LabelMap, LabelMap)> = (0..200).map(|_| (random_map(&mut rng), random_map(&mut rng))).collect();
    let mut cm = ConfusionMatrix::new(c);
    for (p, g) in &pairs {
        cm.accumulate(p, g).unwrap();
    }
    let report = iou_report(&cm).unwrap();
    let (oracle, oracle_miou) = brute_force_iou(&pairs, c);
    let exact = report.per_class == oracle && report.miou == oracle_miou;

    let mut order: Vec<usize> = (0..pairs.len()).collect();
    for i in (1..order.len()).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let mut shuffled = ConfusionMatrix::new(c);
    for &i in &order {
        shuffled.accumulate(&pairs[i].0, &pairs[i].1).unwrap();
    }
    let (mut left, mut right) = (ConfusionMatrix::new(c), ConfusionMatrix::new(c));
    for (i, (p, g)) in pairs.iter().enumerate() {
        if i % 3 == 0 { &mut left } else { &mut right }
            .accumulate(p, g)
            .unwrap();
    }
    right.merge(&left).unwrap();
    let order_free = shuffled == cm && right == cm;
    let secs = t.elapsed().as_secs_f64();
    verdict(
        exact && order_free && secs < FAST_CHECK_SECONDS,
        format!("exact match {exact}, order independent {order_free}, {secs:.2}s"),
    )
}

// ---- 3: reporting ----------------------------------------------------------

fn table_reproduction() -> Verdict {
    let pct = |v: &[f64]| IoUReport::from_per_class(&v.iter().map(|x| x / 100.0).collect::<Vec<_>>()).unwrap();
    let first = [89.01, 63.94, 64.42, 70.58, 72.98, 87.67, 64.33, 74.46, 73.04];
    let second = [86.54, 54.93, 56.73, 63.67, 65.10, 82.07, 55.55, 58.63, 54.92];
    let table = render_table(&[("first".into(), pct(&first)), ("second".into(), pct(&second))]).unwrap();
    let avg: Vec<String> = table
        .csv
        .lines()
        .skip(1)
        .map(|l| l.rsplit(',').next().unwrap().to_string())
        .collect();
    verdict(avg == ["73.38", "64.23"], format!("avg cells {avg:?}"))
}

// ---- 4: losses -------------------------------------------------------------

fn tensor(v: Vec<f64>, shape: (usize, usize, usize, usize)) -> Tensor {
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

fn loss_gradient_error(loss: &dyn Fn(&Tensor) -> Tensor, x0: &[f64], shape: (usize, usize, usize, usize)) -> f64 {
    let var = Var::from_tensor(&tensor(x0.to_vec(), shape)).unwrap();
    let grads = loss(var.as_tensor()).backward().unwrap();
    let g = grads
        .get(var.as_tensor())
        .unwrap()
        .flatten_all()
        .unwrap()
        .to_vec1::<f64>()
        .unwrap();
    let eps = 1e-6;
    let value = |v: Vec<f64>| loss(&tensor(v, shape)).to_scalar::<f64>().unwrap();
    let fd: Vec<f64> = (0..x0.len())
        .map(|i| {
            let (mut p, mut m) = (x0.to_vec(), x0.to_vec());
            p[i] += eps;
            m[i] -= eps;
            (value(p) - value(m)) / (2.0 * eps)
        })
        .collect();
    rel_err(&g, &fd)
}

fn loss_analytics() -> Verdict {
    let face = render_toy_face(0, Domain::Photo, 5, 32).unwrap().image;
    let ex = PerceptualExtractor::random(PerceptualConfig::default(), DType::F64).unwrap();
    let self_content = content_loss(&face, &face, &ex).unwrap();
    let self_style = style_loss(&face, &face, &ex).unwrap();

    let shape = (1, 3, 4, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let base: Vec<f64> = (0..48).map(|_| rng.random_range(0.0..0.9)).collect();
    let shifted: Vec<f64> = base.iter().map(|v| v + 0.1).collect();
    let content = content_loss_t(&tensor(shifted, shape), &tensor(base.clone(), shape), &IdentityFeatures)
        .unwrap()
        .to_scalar::<f64>()
        .unwrap();
    let style = style_loss_t(
        &tensor(vec![0.2; 48], shape),
        &tensor(vec![0.5; 48], shape),
        &IdentityFeatures,
    )
    .unwrap()
    .to_scalar::<f64>()
    .unwrap();
    let closed = (content - 0.01).abs() <= LOSS_CLOSED_FORM_TOL && (style - 0.27).abs() <= LOSS_CLOSED_FORM_TOL;

    let target: Vec<f64> = (0..48).map(|_| rng.random_range(0.0..1.0)).collect();
    let reference = tensor(target, shape);
    let x0: Vec<f64> = (0..48).map(|_| rng.random_range(0.0..1.0)).collect();
    let content_err = loss_gradient_error(
        &|x| content_loss_t(x, &reference, &IdentityFeatures).unwrap(),
        &x0,
        shape,
    );
    let style_err = loss_gradient_error(&|x| style_loss_t(x, &reference, &IdentityFeatures).unwrap(), &x0, shape);
    let grads_ok = content_err <= LOSS_GRAD_REL_TOL && style_err <= LOSS_GRAD_REL_TOL;
    verdict(
        self_content == 0.0 && self_style == 0.0 && closed && grads_ok,
        format!(
            "self {self_content}/{self_style}, closed forms {content:.12}/{style:.12}, \
             gradient rel err {content_err:.2e}/{style_err:.2e}"
        ),
    )
}

// ---- 5-8: toy pipeline -----------------------------------------------------

struct Run {
    workspace: PathBuf,
    miou: BTreeMap<Arm, f64>,
}

fn toy_config(data_root: &Path, workspace: PathBuf, seed: u64) -> PipelineConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.toml");
    let mut cfg = PipelineConfig::load(&path)
        .unwrap()
        .with_seed(seed)
        .with_workspace(workspace);
    cfg.data = make_toy_data(&cfg, Some(data_root)).unwrap();
    cfg
}

fn run_toy(root: &Path, name: &str, seed: u64) -> Run {
    let t = Instant::now();
    let cfg = toy_config(&root.join("data"), root.join(name), seed);
    let ws = Workspace::open(&cfg.workspace).unwrap();
    let outcome = run_ablation(&cfg, &ws).unwrap();
    let miou = outcome.reports.iter().map(|r| (r.arm, r.iou.miou)).collect();
    println!(
        "  toy run {name}: {:?} in {:.0}s",
        outcome
            .reports
            .iter()
            .map(|r| (r.arm.name(), format!("{:.4}", r.iou.miou)))
            .collect::<Vec<_>>(),
        t.elapsed().as_secs_f64()
    );
    Run {
        workspace: cfg.workspace.clone(),
        miou,
    }
}

fn training_mechanics(first: &Run) -> Verdict {
    let log: ShapeTrainLog = read_json(&first.workspace.join("shape/train_log.json")).unwrap();
    let steps = log.critic_bounds.len();
    let worst = log.critic_bounds.iter().fold(0.0f64, |m, &b| m.max(b));
    let clipped = steps > 0 && worst <= CRITIC_CLIP + 1e-9 && log.rows.len() == 200;

    // Logged rates of the toy parser runs follow the schedule exactly.
    let cfg = PipelineConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.toml")).unwrap();
    let p = &cfg.parser;
    let mut toy_exact = true;
    for arm in Arm::ALL {
        let csv =
            std::fs::read_to_string(first.workspace.join(format!("parser/{}/train_log.csv", arm.name()))).unwrap();
        for line in csv.lines().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            let (i, lr): (usize, f64) = (f[0].parse().unwrap(), f[1].parse().unwrap());
            toy_exact &= lr == poly_lr(i, p.base_lr, p.power, p.max_iter).unwrap();
        }
    }

    // A short run at the default base rate checks the schedule's landmarks.
    let faces: Vec<ParsePair> = (0..4)
        .map(|i| {
            let f = render_toy_face(i, Domain::Photo, 3, 32).unwrap();
            ParsePair {
                name: format!("{i}"),
                image: f.image,
                labels: f.labels,
            }
        })
        .collect();
    let short = ParseTrainConfig {
        max_iter: 20,
        batch_size: 2,
        crop_size: 32,
        width_divisor: 16,
        ..Default::default()
    };
    let (_, plog) = train_parser(&faces, &short).unwrap();
    let logged_exact = plog
        .rows
        .iter()
        .all(|r| r.lr == poly_lr(r.iteration, short.base_lr, short.power, short.max_iter).unwrap());
    let start = plog.rows[0].lr;
    let mid = plog.rows[10].lr;
    let end = poly_lr(short.max_iter, short.base_lr, short.power, short.max_iter).unwrap();
    let landmarks = start == 0.001 && end == 0.0 && (mid - 5.3589e-4).abs() <= POLY_MID_TOL;
    verdict(
        clipped && toy_exact && logged_exact && landmarks,
        format!(
            "critic max |w| {worst:.6} over {steps} updates; schedule exact {}; lr start {start}, mid {mid:.6e}, end {end}",
            toy_exact && logged_exact
        ),
    )
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[v.len() / 2]
}

fn ablation_ordering(runs: &[Run]) -> Verdict {
    let med = |arm| median(runs.iter().map(|r| r.miou[&arm]).collect());
    let (source, texture, shape, both) = (med(Arm::Source), med(Arm::Texture), med(Arm::Shape), med(Arm::Both));
    verdict(
        both >= source + ABLATION_MARGIN && both >= texture && both >= shape,
        format!(
            "median mIoU source {:.2}, texture {:.2}, shape {:.2}, both {:.2}",
            source * 100.0,
            texture * 100.0,
            shape * 100.0,
            both * 100.0
        ),
    )
}

fn artifact_checksums(ws: &Path) -> BTreeMap<String, String> {
    let mut files: Vec<String> = Arm::ALL
        .iter()
        .map(|a| format!("synth/{}/manifest.json", a.name()))
        .collect();
    files.extend(["tables/ablation.md".to_string(), "tables/ablation.csv".to_string()]);
    files
        .into_iter()
        .map(|f| (f.clone(), file_sha256(&ws.join(&f)).unwrap()))
        .collect()
}

fn determinism(first: &Run, repeat: &Run) -> Verdict {
    let a = artifact_checksums(&first.workspace);
    let b = artifact_checksums(&repeat.workspace);
    let differing: Vec<&String> = a.keys().filter(|k| a[*k] != b[*k]).collect();
    verdict(
        differing.is_empty(),
        format!("{} artifacts compared, differing: {differing:?}", a.len()),
    )
}

/// Number of groups when items closer than `threshold` are merged greedily.
fn distinct_count<T>(items: &[T], dist: impl Fn(&T, &T) -> f64, threshold: f64) -> usize {
    let mut reps: Vec<&T> = Vec::new();
    for it in items {
        if reps.iter().all(|r| dist(r, it) > threshold) {
            reps.push(it);
        }
    }
    reps.len()
}

fn conditioning_diversity(first: &Run) -> Verdict {
    let cfg = PipelineConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.toml")).unwrap();
    let (k, m) = (cfg.k, cfg.m);
    let generator = ShapeGenerator::load(&first.workspace.join("shape/photo_to_cari.safetensors")).unwrap();
    let texture = TextureNetwork::load(&first.workspace.join("texture/network.safetensors")).unwrap();
    let face = render_toy_face(0, Domain::Photo, cfg.toy.seed, cfg.toy.size).unwrap();
    let grouping = LandmarkGrouping::default();
    let flows: Vec<DenseFlow<f32>> = (0..k)
        .map(|c| {
            apply_shape_adaptation(
                &generator,
                &face.image,
                &face.labels,
                &face.landmarks,
                &ShapeCondition::new(c, k).unwrap(),
                &grouping,
            )
            .unwrap()
            .flow
        })
        .collect();
    let shape_groups = distinct_count(&flows, |a, b| a.l2_distance(b).unwrap() as f64, FLOW_DISTINCT);
    let styled: Vec<Image> = (0..m)
        .map(|c| apply_texture(&texture, &face.image, &StyleCondition::new(c, m).unwrap()).unwrap())
        .collect();
    let mean_abs = |a: &Image, b: &Image| {
        let (x, y) = (a.pixels().data(), b.pixels().data());
        x.iter().zip(y).map(|(p, q)| (p - q).abs() as f64).sum::<f64>() / x.len() as f64
    };
    let style_groups = distinct_count(&styled, mean_abs, STYLE_DISTINCT);
    verdict(
        shape_groups + 1 >= k && style_groups + 1 >= m,
        format!("{shape_groups}/{k} distinct flows, {style_groups}/{m} distinct styles"),
    )
}

fn main() {
    let started = Instant::now();
    let mut results: Vec<(u32, &str, Verdict)> = Vec::new();
    let mut report = |n: u32, name: &'static str, v: Verdict| {
        println!(
            "criterion {n} {name}: {} ({})",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail
        );
        results.push((n, name, v));
    };
    report(1, "warp correctness", warp_correctness());
    report(2, "metric oracle equivalence", metric_oracle());
    report(3, "table reproduction", table_reproduction());
    report(4, "loss analytics", loss_analytics());

    let root = tempfile::tempdir().unwrap();
    let runs: Vec<Run> = SEEDS
        .iter()
        .map(|&s| run_toy(root.path(), &format!("seed{s}"), s))
        .collect();
    let repeat = run_toy(root.path(), "seed1-repeat", SEEDS[0]);
    report(5, "training mechanics", training_mechanics(&runs[0]));
    report(6, "toy ablation ordering", ablation_ordering(&runs));
    report(7, "determinism", determinism(&runs[0], &repeat));
    report(8, "conditioning diversity", conditioning_diversity(&runs[0]));

    let failed: Vec<u32> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!(
        "acceptance: {}/{} passed in {:.0}s",
        results.len() - failed.len(),
        results.len(),
        started.elapsed().as_secs_f64()
    );
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
