//! Mutual-nearest-neighbour patch matching, keypoint selection and Gaussian
//! heatmap encoding.

use std::cmp::Ordering;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use repose_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::descriptor::{DescriptorBackend, DescriptorGrid, PATCH};
use crate::error::{CoreError, Result};
use crate::image::{ImageTensor, Mask};

pub const DEFAULT_K: usize = 35;
pub const KMEANS_ITERS: usize = 50;
pub const KMEANS_SEED: u64 = 0x6B6D_6561;

/// Heatmap spread used when none is configured: `H / 32` pixels.
pub fn default_sigma(height: usize) -> f64 {
    height as f64 / 32.0
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    let denom = na.sqrt() * nb.sqrt();
    if denom > 0.0 {
        dot / denom
    } else {
        0.0
    }
}

fn foreground(g: &DescriptorGrid) -> Vec<usize> {
    (0..g.cells()).filter(|&c| g.salience(c) > 0.0).collect()
}

/// Most similar cell of `to` for `from_cell`; the lowest index wins ties.
fn nearest(from: &DescriptorGrid, from_cell: usize, to: &DescriptorGrid, candidates: &[usize]) -> Option<usize> {
    let d = from.descriptor(from_cell);
    let mut best: Option<(usize, f64)> = None;
    for &c in candidates {
        let s = cosine(d, to.descriptor(c));
        if best.is_none_or(|(_, bs)| s > bs) {
            best = Some((c, s));
        }
    }
    best.map(|(c, _)| c)
}

/// Cell pairs `(a, p)` that are each other's nearest neighbour under cosine
/// similarity, among cells with positive salience in both grids. Sorted by `a`.
pub fn best_buddies(sa: &DescriptorGrid, sp: &DescriptorGrid) -> Result<Vec<(usize, usize)>> {
    if sa.dim() != sp.dim() {
        return Err(CoreError::invalid(format!("descriptor dimensions differ: {} vs {}", sa.dim(), sp.dim())));
    }
    let fa = foreground(sa);
    let fp = foreground(sp);
    if fa.is_empty() || fp.is_empty() {
        return Ok(Vec::new());
    }
    let back: Vec<Option<usize>> = (0..sp.cells())
        .map(|p| if sp.salience(p) > 0.0 { nearest(sp, p, sa, &fa) } else { None })
        .collect();
    let mut out = Vec::new();
    for &a in &fa {
        if let Some(p) = nearest(sa, a, sp, &fp) {
            if back[p] == Some(a) {
                out.push((a, p));
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeypointSet {
    /// `(x, y)` pixel coordinates.
    pub points: Vec<[f64; 2]>,
    pub salience: Vec<f64>,
}

impl KeypointSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Two keypoint sets in shared order: `a.points[i]` corresponds to `p.points[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Correspondences {
    pub a: KeypointSet,
    pub p: KeypointSet,
    /// Fewer matches than requested; the best match was repeated.
    pub padded: bool,
    pub image_size: [usize; 2],
}

impl Correspondences {
    pub fn k(&self) -> usize {
        self.a.len()
    }

    /// Per-pair ranking score `(salience_a + salience_p) / 2`.
    pub fn pair_salience(&self) -> Vec<f64> {
        self.a.salience.iter().zip(&self.p.salience).map(|(x, y)| (x + y) / 2.0).collect()
    }

    /// Reorders both sets by `perm` (`new[i] = old[perm[i]]`).
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let mut seen = vec![false; self.k()];
        for &i in perm {
            if i >= self.k() || std::mem::replace(&mut seen[i], true) {
                return Err(CoreError::invalid("not a permutation"));
            }
        }
        if perm.len() != self.k() {
            return Err(CoreError::invalid("not a permutation"));
        }
        let pick = |s: &KeypointSet| KeypointSet {
            points: perm.iter().map(|&i| s.points[i]).collect(),
            salience: perm.iter().map(|&i| s.salience[i]).collect(),
        };
        Ok(Self {
            a: pick(&self.a),
            p: pick(&self.p),
            padded: self.padded,
            image_size: self.image_size,
        })
    }
}

/// Centre pixel `(x, y)` of a grid cell.
pub fn cell_center(grid: &DescriptorGrid, cell: usize) -> [f64; 2] {
    let (r, c) = (cell / grid.cols(), cell % grid.cols());
    [(c * PATCH + PATCH / 2) as f64, (r * PATCH + PATCH / 2) as f64]
}

fn unit(v: &[f32]) -> Vec<f64> {
    let n = v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    v.iter().map(|&x| if n > 0.0 { x as f64 / n } else { 0.0 }).collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Seeded k-means++ followed by Lloyd iterations. Returns cluster labels.
fn kmeans(points: &[Vec<f64>], k: usize, iters: usize, seed: u64) -> Vec<usize> {
    let n = points.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers: Vec<Vec<f64>> = vec![points[rng.random_range(0..n)].clone()];
    while centers.len() < k {
        let d2: Vec<f64> = points
            .iter()
            .map(|p| centers.iter().map(|c| sq_dist(p, c)).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut t = rng.random_range(0.0..total);
            let mut idx = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if t < d {
                    idx = i;
                    break;
                }
                t -= d;
            }
            idx
        } else {
            rng.random_range(0..n)
        };
        centers.push(points[pick].clone());
    }
    let assign = |centers: &[Vec<f64>]| -> Vec<usize> {
        points
            .iter()
            .map(|p| {
                let mut best = (0, f64::INFINITY);
                for (j, c) in centers.iter().enumerate() {
                    let d = sq_dist(p, c);
                    if d < best.1 {
                        best = (j, d);
                    }
                }
                best.0
            })
            .collect()
    };
    let mut labels = assign(&centers);
    for _ in 0..iters {
        for (j, c) in centers.iter_mut().enumerate() {
            let members: Vec<&Vec<f64>> = points.iter().zip(&labels).filter(|(_, &l)| l == j).map(|(p, _)| p).collect();
            if members.is_empty() {
                continue;
            }
            for (d, v) in c.iter_mut().enumerate() {
                *v = members.iter().map(|m| m[d]).sum::<f64>() / members.len() as f64;
            }
        }
        let next = assign(&centers);
        if next == labels {
            break;
        }
        labels = next;
    }
    labels
}

/// Clusters the concatenated descriptors of matched pairs, keeps the most
/// salient pair per cluster and emits the `k` best in salience order.
pub fn select_keypoints(pairs: &[(usize, usize)], sa: &DescriptorGrid, sp: &DescriptorGrid, k: usize) -> Result<Correspondences> {
    if k == 0 {
        return Err(CoreError::invalid("k must be at least 1"));
    }
    if pairs.is_empty() {
        return Err(CoreError::invalid("no matched pairs to select keypoints from"));
    }
    if (sa.rows(), sa.cols()) != (sp.rows(), sp.cols()) {
        return Err(CoreError::invalid("descriptor grids differ in size"));
    }
    if pairs.iter().any(|&(a, p)| a >= sa.cells() || p >= sp.cells()) {
        return Err(CoreError::invalid("pair cell index out of range"));
    }
    let mut sorted = pairs.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let score = |&(a, p): &(usize, usize)| (sa.salience(a) as f64 + sp.salience(p) as f64) / 2.0;
    // Highest score first, then lexicographic cell order.
    let rank = |x: &(usize, usize), y: &(usize, usize)| score(y).partial_cmp(&score(x)).unwrap_or(Ordering::Equal).then(x.cmp(y));

    let mut reps: Vec<(usize, usize)> = if sorted.len() <= k {
        sorted.clone()
    } else {
        let feats: Vec<Vec<f64>> = sorted
            .iter()
            .map(|&(a, p)| {
                let mut v = unit(sa.descriptor(a));
                v.extend(unit(sp.descriptor(p)));
                v
            })
            .collect();
        let labels = kmeans(&feats, k, KMEANS_ITERS, KMEANS_SEED);
        let mut best: Vec<Option<(usize, usize)>> = vec![None; k];
        for (pair, &l) in sorted.iter().zip(&labels) {
            if best[l].is_none_or(|b| rank(pair, &b) == Ordering::Less) {
                best[l] = Some(*pair);
            }
        }
        let mut reps: Vec<_> = best.into_iter().flatten().collect();
        // Collapsed clusters: top up with the best unused pairs.
        if reps.len() < k {
            let mut rest: Vec<_> = sorted.iter().copied().filter(|p| !reps.contains(p)).collect();
            rest.sort_by(rank);
            reps.extend(rest.into_iter().take(k - reps.len()));
        }
        reps
    };
    reps.sort_by(rank);
    let padded = reps.len() < k;
    while reps.len() < k {
        reps.push(reps[0]);
    }
    let a = KeypointSet {
        points: reps.iter().map(|&(a, _)| cell_center(sa, a)).collect(),
        salience: reps.iter().map(|&(a, _)| sa.salience(a) as f64).collect(),
    };
    let p = KeypointSet {
        points: reps.iter().map(|&(_, p)| cell_center(sp, p)).collect(),
        salience: reps.iter().map(|&(_, p)| sp.salience(p) as f64).collect(),
    };
    Ok(Correspondences {
        a,
        p,
        padded,
        image_size: [sa.rows() * PATCH, sa.cols() * PATCH],
    })
}

/// Extracts descriptors for both images and returns `k` correspondences.
pub fn match_images(
    backend: &dyn DescriptorBackend,
    appearance: (&ImageTensor, Option<&Mask>),
    pose: (&ImageTensor, Option<&Mask>),
    k: usize,
) -> Result<Correspondences> {
    let sa = backend.extract(appearance.0, appearance.1)?;
    let sp = backend.extract(pose.0, pose.1)?;
    let pairs = best_buddies(&sa, &sp)?;
    if pairs.is_empty() {
        return Err(CoreError::invalid("no foreground correspondences between the two images"));
    }
    select_keypoints(&pairs, &sa, &sp, k)
}

/// One Gaussian channel per point: `exp(-|q - point|² / (2σ²))`.
pub fn encode_heatmaps(points: &[[f64; 2]], h: usize, w: usize, sigma: f64) -> Result<Tensor<f32>> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(CoreError::invalid(format!("sigma must be positive, got {sigma}")));
    }
    for &[x, y] in points {
        if !(x >= 0.0 && x < w as f64 && y >= 0.0 && y < h as f64) {
            return Err(CoreError::invalid(format!("keypoint ({x}, {y}) outside {h}×{w} image")));
        }
    }
    let inv = 1.0 / (2.0 * sigma * sigma);
    let plane = h * w;
    let mut data = vec![0.0f32; points.len() * plane];
    for (i, &[px, py]) in points.iter().enumerate() {
        let gx: Vec<f64> = (0..w).map(|x| (-(x as f64 - px).powi(2) * inv).exp()).collect();
        for y in 0..h {
            let gy = (-(y as f64 - py).powi(2) * inv).exp();
            for x in 0..w {
                data[i * plane + y * w + x] = (gy * gx[x]) as f32;
            }
        }
    }
    Ok(Tensor::from_vec(&[points.len(), h, w], data)?)
}

/// Serialised form of [`Correspondences`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeypointFile {
    pub k: usize,
    pub image_size: [usize; 2],
    pub points_a: Vec<[f64; 2]>,
    pub points_p: Vec<[f64; 2]>,
    pub salience: Vec<f64>,
    #[serde(default)]
    pub salience_a: Vec<f64>,
    #[serde(default)]
    pub salience_p: Vec<f64>,
    #[serde(default)]
    pub padded: bool,
}

impl KeypointFile {
    pub fn from_correspondences(c: &Correspondences) -> Self {
        Self {
            k: c.k(),
            image_size: c.image_size,
            points_a: c.a.points.clone(),
            points_p: c.p.points.clone(),
            salience: c.pair_salience(),
            salience_a: c.a.salience.clone(),
            salience_p: c.p.salience.clone(),
            padded: c.padded,
        }
    }

    pub fn parse(text: &str) -> Result<Correspondences> {
        let f: KeypointFile = serde_json::from_str(text).map_err(|e| CoreError::invalid(format!("keypoint JSON: {e}")))?;
        f.into_correspondences()
    }

    pub fn into_correspondences(self) -> Result<Correspondences> {
        let k = self.k;
        if self.points_a.len() != k || self.points_p.len() != k || self.salience.len() != k {
            return Err(CoreError::invalid(format!("keypoint file declares k={k} but lists differ")));
        }
        let [h, w] = self.image_size;
        let inside = |p: &[f64; 2]| p[0] >= 0.0 && p[0] < w as f64 && p[1] >= 0.0 && p[1] < h as f64;
        if !self.points_a.iter().chain(&self.points_p).all(inside) {
            return Err(CoreError::invalid("keypoint outside declared image size"));
        }
        let side = |v: Vec<f64>| {
            if v.len() == k {
                Ok(v)
            } else if v.is_empty() {
                Ok(self.salience.clone())
            } else {
                Err(CoreError::invalid("per-image salience length differs from k"))
            }
        };
        let sal_a = side(self.salience_a.clone())?;
        let sal_p = side(self.salience_p.clone())?;
        Ok(Correspondences {
            a: KeypointSet {
                points: self.points_a,
                salience: sal_a,
            },
            p: KeypointSet {
                points: self.points_p,
                salience: sal_p,
            },
            padded: self.padded,
            image_size: self.image_size,
        })
    }
}

pub fn save_keypoints(c: &Correspondences, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(&KeypointFile::from_correspondences(c)).map_err(|e| CoreError::format(path, e.to_string()))?;
    fs::write(path, text).map_err(|e| CoreError::io(path, e))
}

pub fn load_keypoints(path: &Path) -> Result<Correspondences> {
    let text = fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
    KeypointFile::parse(&text).map_err(|e| CoreError::format(path, e.to_string()))
}
