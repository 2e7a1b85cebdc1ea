//! k-means and agglomerative clustering over dense feature vectors, plus the
//! shape-set built from caricature landmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::exec::Exec;
use crate::landmarks::LandmarkSet;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansConfig {
    pub k: usize,
    pub max_iter: usize,
    /// Stop once no center moves farther than this.
    pub tol: f64,
    pub seed: u64,
}

impl KMeansConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        KMeansConfig {
            k,
            max_iter: 100,
            tol: 1e-6,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit {
    pub centers: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    /// Sum of squared distances after each assignment step.
    pub objective: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_rows(data: &[Vec<f64>]) -> Result<usize> {
    let dim = data.first().map(|r| r.len()).unwrap_or(0);
    if dim == 0 || data.iter().any(|r| r.len() != dim) {
        return Err(CoreError::arg("feature rows must be non-empty and of equal length"));
    }
    Ok(dim)
}

/// k-means++ seeding: first center uniform, the rest drawn with probability
/// proportional to squared distance from the nearest chosen center.
fn seed_centers(data: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = data.len();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = data.iter().map(|r| sq_dist(r, &data[chosen[0]])).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut t = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                if w <= 0.0 {
                    continue;
                }
                pick = Some(i);
                if t < w {
                    break;
                }
                t -= w;
            }
            pick.expect("positive total weight")
        } else {
            // Every remaining point coincides with a center; take unused indices.
            let unused: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            unused[rng.random_range(0..unused.len())]
        };
        chosen.push(next);
        for (i, r) in data.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(r, &data[next]));
        }
    }
    chosen
}

fn nearest_center(row: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centers.iter().enumerate() {
        let d = sq_dist(row, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Lloyd's algorithm with k-means++ initialization; deterministic given the seed.
pub fn kmeans(exec: Exec, data: &[Vec<f64>], cfg: &KMeansConfig) -> Result<KMeansFit> {
    if cfg.k == 0 || data.len() < cfg.k {
        return Err(CoreError::arg(format!(
            "k-means needs 1 <= k <= n, got k={} n={}",
            cfg.k,
            data.len()
        )));
    }
    let dim = check_rows(data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut centers: Vec<Vec<f64>> = seed_centers(data, cfg.k, &mut rng)
        .into_iter()
        .map(|i| data[i].clone())
        .collect();
    let mut objective = Vec::new();
    let mut assignments = vec![0; data.len()];
    for _ in 0..cfg.max_iter.max(1) {
        let nearest = exec.map(data, |r| nearest_center(r, &centers));
        assignments = nearest.iter().map(|a| a.0).collect();
        objective.push(nearest.iter().map(|a| a.1).sum());

        let mut sums = vec![vec![0.0; dim]; cfg.k];
        let mut counts = vec![0usize; cfg.k];
        for (r, &a) in data.iter().zip(&assignments) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(r) {
                *s += v;
            }
        }
        let mut shift: f64 = 0.0;
        for j in 0..cfg.k {
            // An empty cluster keeps its previous center.
            if counts[j] == 0 {
                continue;
            }
            let new: Vec<f64> = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            shift = shift.max(sq_dist(&new, &centers[j]).sqrt());
            centers[j] = new;
        }
        if shift <= cfg.tol {
            break;
        }
    }
    // Final assignment against the converged centers.
    let nearest = exec.map(data, |r| nearest_center(r, &centers));
    let final_assign: Vec<usize> = nearest.iter().map(|a| a.0).collect();
    let final_obj: f64 = nearest.iter().map(|a| a.1).sum();
    if final_assign != assignments || objective.last() != Some(&final_obj) {
        objective.push(final_obj);
    }
    Ok(KMeansFit {
        centers,
        assignments: final_assign,
        objective,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Linkage {
    #[default]
    Ward,
    Average,
    Complete,
    Single,
}

impl std::str::FromStr for Linkage {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ward" => Ok(Linkage::Ward),
            "average" => Ok(Linkage::Average),
            "complete" => Ok(Linkage::Complete),
            "single" => Ok(Linkage::Single),
            other => Err(CoreError::arg(format!("unknown linkage `{other}`"))),
        }
    }
}

impl Linkage {
    /// Lance-Williams update: distance from `k` to the union of `i` and `j`.
    fn update(self, dki: f64, dkj: f64, dij: f64, ni: f64, nj: f64, nk: f64) -> f64 {
        match self {
            Linkage::Ward => ((ni + nk) * dki + (nj + nk) * dkj - nk * dij) / (ni + nj + nk),
            Linkage::Average => (ni * dki + nj * dkj) / (ni + nj),
            Linkage::Complete => dki.max(dkj),
            Linkage::Single => dki.min(dkj),
        }
    }
}

/// One merge of the dendrogram: slots `a` and `b` joined at `height`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Merge {
    pub a: usize,
    pub b: usize,
    pub height: f64,
}

/// Full dendrogram by the nearest-neighbour-chain algorithm (all supported
/// linkages are reducible). Ward works on squared Euclidean distances, the
/// others on Euclidean distances.
pub fn dendrogram(exec: Exec, data: &[Vec<f64>], linkage: Linkage) -> Result<Vec<Merge>> {
    check_rows(data)?;
    let n = data.len();
    let rows = exec.map_range(n, |i| {
        data.iter()
            .map(|r| {
                let d = sq_dist(&data[i], r);
                if linkage == Linkage::Ward {
                    d
                } else {
                    d.sqrt()
                }
            })
            .collect::<Vec<f64>>()
    });
    let mut dist: Vec<f64> = rows.concat();
    let mut size = vec![1.0f64; n];
    let mut active = vec![true; n];
    let mut merges = Vec::with_capacity(n.saturating_sub(1));
    let mut chain: Vec<usize> = Vec::new();
    let mut remaining = n;
    while remaining > 1 {
        if chain.is_empty() {
            chain.push(active.iter().position(|&a| a).expect("an active slot"));
        }
        loop {
            let a = *chain.last().unwrap();
            let prev = if chain.len() >= 2 {
                Some(chain[chain.len() - 2])
            } else {
                None
            };
            // Prefer the previous chain element on ties so the chain terminates.
            let mut best = prev.unwrap_or(usize::MAX);
            let mut best_d = prev.map(|p| dist[a * n + p]).unwrap_or(f64::INFINITY);
            for j in 0..n {
                if !active[j] || j == a {
                    continue;
                }
                let d = dist[a * n + j];
                if d < best_d {
                    best = j;
                    best_d = d;
                }
            }
            if Some(best) == prev {
                break;
            }
            chain.push(best);
        }
        let b = chain.pop().unwrap();
        let a = chain.pop().unwrap();
        let (keep, drop) = (a.min(b), a.max(b));
        let dab = dist[a * n + b];
        merges.push(Merge {
            a: keep,
            b: drop,
            height: dab,
        });
        for k in 0..n {
            if !active[k] || k == a || k == b {
                continue;
            }
            let d = linkage.update(dist[k * n + a], dist[k * n + b], dab, size[a], size[b], size[k]);
            dist[k * n + keep] = d;
            dist[keep * n + k] = d;
        }
        size[keep] = size[a] + size[b];
        active[drop] = false;
        remaining -= 1;
    }
    Ok(merges)
}

/// Cuts the hierarchy into `n_clusters` flat clusters. Labels are numbered in
/// order of each cluster's smallest member index.
pub fn agglomerative(exec: Exec, data: &[Vec<f64>], n_clusters: usize, linkage: Linkage) -> Result<Vec<usize>> {
    if n_clusters == 0 || data.len() < n_clusters {
        return Err(CoreError::arg(format!(
            "agglomerative clustering needs 1 <= clusters <= n, got {} for n={}",
            n_clusters,
            data.len()
        )));
    }
    let mut merges = dendrogram(exec, data, linkage)?;
    merges.sort_by(|x, y| x.height.total_cmp(&y.height));
    let n = data.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    for m in merges.iter().take(n - n_clusters) {
        let (ra, rb) = (find(&mut parent, m.a), find(&mut parent, m.b));
        let (lo, hi) = (ra.min(rb), ra.max(rb));
        parent[hi] = lo;
    }
    let mut label_of_root = vec![usize::MAX; n];
    let mut next = 0;
    let mut labels = vec![0; n];
    for i in 0..n {
        let r = find(&mut parent, i);
        if label_of_root[r] == usize::MAX {
            label_of_root[r] = next;
            next += 1;
        }
        labels[i] = label_of_root[r];
    }
    Ok(labels)
}

/// Caricature shape vocabulary: k-means centers of flattened landmark sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeSet {
    centers: Vec<LandmarkSet>,
}

impl ShapeSet {
    pub fn new(centers: Vec<LandmarkSet>) -> Result<Self> {
        if centers.is_empty() {
            return Err(CoreError::arg("shape set needs at least one center"));
        }
        Ok(ShapeSet { centers })
    }

    pub fn centers(&self) -> &[LandmarkSet] {
        &self.centers
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    /// Index of the center closest to `lms`.
    pub fn nearest(&self, lms: &LandmarkSet) -> usize {
        let rows: Vec<Vec<f64>> = self.centers.iter().map(|c| c.flatten()).collect();
        nearest_center(&lms.flatten(), &rows).0
    }
}

pub fn cluster_shapes(sets: &[LandmarkSet], k: usize, seed: u64) -> Result<ShapeSet> {
    cluster_shapes_with(Exec::default(), sets, k, seed)
}

pub fn cluster_shapes_with(exec: Exec, sets: &[LandmarkSet], k: usize, seed: u64) -> Result<ShapeSet> {
    if k == 0 || sets.len() < k {
        return Err(CoreError::arg(format!(
            "need at least K={k} landmark sets, got {}",
            sets.len()
        )));
    }
    let rows: Vec<Vec<f64>> = sets.iter().map(|s| s.flatten()).collect();
    let fit = kmeans(exec, &rows, &KMeansConfig::new(k, seed))?;
    let centers = fit
        .centers
        .iter()
        .map(|c| LandmarkSet::from_flat_clamped(c))
        .collect::<Result<Vec<_>>>()?;
    ShapeSet::new(centers)
}
