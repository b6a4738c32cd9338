//! Paired-pose dataset generation.
//!
//! Two models of the same class are each rendered under two random Euler
//! angle configurations, giving the quadruple `M1c1, M1c2, M2c1, M2c2`. A
//! training sample uses `M1c1` as the appearance image, `M2c2` as the pose
//! exemplar and `M1c2` as ground truth.

mod manifest;
pub mod mesh;
pub mod render;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use manifest::{read_manifest, write_manifest, Manifest, ManifestRecord, MANIFEST_FILE, MANIFEST_VERSION};
pub use mesh::Mesh;
pub use render::{Pattern, TextureSpec};

use crate::error::{CoreError, Result};
use crate::image::{ImageTensor, Mask};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectClass {
    Shoe,
    Briefcase,
    Vase,
    Cabinet,
}

impl ObjectClass {
    pub const ALL: [ObjectClass; 4] = [Self::Vase, Self::Briefcase, Self::Cabinet, Self::Shoe];

    pub fn name(self) -> &'static str {
        match self {
            Self::Shoe => "shoe",
            Self::Briefcase => "briefcase",
            Self::Vase => "vase",
            Self::Cabinet => "cabinet",
        }
    }

    /// Row label used in metric reports.
    pub fn report_label(self) -> &'static str {
        match self {
            Self::Shoe => "Shoes",
            Self::Briefcase => "Briefcases",
            Self::Vase => "Vases",
            Self::Cabinet => "File Cabinets",
        }
    }

    /// Number of distinct models in the reference asset set.
    pub fn reference_model_count(self) -> usize {
        match self {
            Self::Shoe => 8,
            Self::Briefcase => 12,
            Self::Vase => 29,
            Self::Cabinet => 11,
        }
    }

    fn index(self) -> u64 {
        match self {
            Self::Shoe => 0,
            Self::Briefcase => 1,
            Self::Vase => 2,
            Self::Cabinet => 3,
        }
    }
}

impl fmt::Display for ObjectClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ObjectClass {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "shoe" | "shoes" => Ok(Self::Shoe),
            "briefcase" | "briefcases" => Ok(Self::Briefcase),
            "vase" | "vases" => Ok(Self::Vase),
            "cabinet" | "cabinets" | "file-cabinet" => Ok(Self::Cabinet),
            other => Err(CoreError::invalid(format!("unknown object class `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectModel {
    pub class: ObjectClass,
    pub model_id: u32,
    pub mesh: Mesh,
    pub texture: TextureSpec,
}

pub const MIN_ANGLE: f64 = 30.0;
pub const MAX_ANGLE: f64 = 180.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AngleConfig {
    pub euler_deg: [f64; 3],
    pub config_id: u32,
}

impl AngleConfig {
    pub fn new(euler_deg: [f64; 3], config_id: u32) -> Result<Self> {
        if euler_deg.iter().any(|a| !(MIN_ANGLE..=MAX_ANGLE).contains(a)) {
            return Err(CoreError::invalid(format!(
                "Euler angles {euler_deg:?} outside [{MIN_ANGLE}, {MAX_ANGLE}]"
            )));
        }
        Ok(Self { euler_deg, config_id })
    }

    pub fn random<R: Rng>(rng: &mut R, config_id: u32) -> Self {
        let euler_deg = [0; 3].map(|_| rng.random_range(MIN_ANGLE..=MAX_ANGLE));
        Self { euler_deg, config_id }
    }
}

/// One rendered view with its foreground mask.
#[derive(Clone, Debug, PartialEq)]
pub struct View {
    pub image: ImageTensor,
    pub mask: Mask,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub id: u32,
    pub class: ObjectClass,
    /// `[m1, m2]`: appearance model, pose model.
    pub model_ids: [u32; 2],
    /// `[c1, c2]`: appearance angles, target angles.
    pub config_ids: [u32; 2],
    pub angles: [[f64; 3]; 2],
}

/// `appearance = M1c1`, `pose = M2c2`, `ground_truth = M1c2`, `aux = M2c1`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    pub meta: SampleMeta,
    pub appearance: View,
    pub pose: View,
    pub ground_truth: View,
    pub aux: View,
}

fn model_rng(class: ObjectClass, model_id: u32, seed: u64) -> ChaCha8Rng {
    let mixed = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(class.index() << 40)
        .wrapping_add(model_id as u64);
    ChaCha8Rng::seed_from_u64(mixed)
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Builds a procedural model. Identical arguments give identical models.
pub fn make_model(class: ObjectClass, model_id: u32, seed: u64) -> Result<ObjectModel> {
    let mut rng = model_rng(class, model_id, seed);
    let mut mesh = match class {
        ObjectClass::Shoe => mesh::shoe(&mut rng),
        ObjectClass::Briefcase => mesh::briefcase(&mut rng),
        ObjectClass::Vase => mesh::vase(&mut rng),
        ObjectClass::Cabinet => mesh::cabinet(&mut rng),
    };
    mesh.normalize(0.85);
    if mesh.triangles.is_empty() {
        return Err(CoreError::invalid("procedural mesh has no triangles"));
    }

    // Golden-ratio hue steps keep base colours distinct across model ids.
    let hue = 0.11 * class.index() as f64 + 0.618_033_988_75 * model_id as f64;
    let base = hsv(hue, rng.random_range(0.45..0.8), rng.random_range(0.55..0.9));
    let accent = hsv(hue + rng.random_range(0.3..0.7), rng.random_range(0.3..0.9), rng.random_range(0.2..0.95));
    let pattern = match rng.random_range(0..3) {
        0 => Pattern::Stripes {
            axis: rng.random_range(0..3),
            freq: rng.random_range(2.0..6.0),
        },
        1 => Pattern::Checker {
            freq: rng.random_range(2.0..5.0),
        },
        _ => Pattern::Rings {
            freq: rng.random_range(2.0..6.0),
        },
    };
    // Logo sits on the +x, +z side so the textured object has no mirror symmetry.
    let anchor = mesh
        .vertices
        .iter()
        .copied()
        .max_by(|a, b| (a[0] + a[2] + 0.3 * a[1]).total_cmp(&(b[0] + b[2] + 0.3 * b[1])))
        .unwrap_or([0.0; 3]);
    let texture = TextureSpec {
        base,
        accent,
        pattern,
        contrast: rng.random_range(0.4..0.8),
        logo_center: anchor,
        logo_radius: rng.random_range(0.25..0.4),
        logo_color: hsv(hue + 0.5, 0.9, rng.random_range(0.15..0.35)),
    };
    Ok(ObjectModel {
        class,
        model_id,
        mesh,
        texture,
    })
}

pub fn check_resolution(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || !h.is_multiple_of(8) || !w.is_multiple_of(8) {
        return Err(CoreError::invalid(format!("resolution {h}×{w} must be positive multiples of 8")));
    }
    Ok(())
}

/// Renders `model` under `cfg` on the uniform background.
pub fn render(model: &ObjectModel, cfg: &AngleConfig, h: usize, w: usize) -> Result<View> {
    check_resolution(h, w)?;
    if model.mesh.triangles.is_empty() {
        return Err(CoreError::invalid("cannot render a mesh with zero triangles"));
    }
    let (image, mask) = render::rasterize(&model.mesh, &model.texture, cfg.euler_deg, h, w);
    Ok(View { image, mask })
}

pub fn make_quadruple(id: u32, m1: &ObjectModel, m2: &ObjectModel, c1: &AngleConfig, c2: &AngleConfig, h: usize, w: usize) -> Result<PairedSample> {
    if m1.class != m2.class {
        return Err(CoreError::invalid(format!(
            "quadruple needs one class, got {} and {}",
            m1.class, m2.class
        )));
    }
    if m1.model_id == m2.model_id || m1 == m2 {
        return Err(CoreError::invalid("quadruple needs two distinct models"));
    }
    Ok(PairedSample {
        meta: SampleMeta {
            id,
            class: m1.class,
            model_ids: [m1.model_id, m2.model_id],
            config_ids: [c1.config_id, c2.config_id],
            angles: [c1.euler_deg, c2.euler_deg],
        },
        appearance: render(m1, c1, h, w)?,
        pose: render(m2, c2, h, w)?,
        ground_truth: render(m1, c2, h, w)?,
        aux: render(m2, c1, h, w)?,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatagenConfig {
    pub classes: Vec<ObjectClass>,
    pub pairs: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    /// Overrides the reference per-class model counts when set.
    pub models_per_class: Option<usize>,
}

impl DatagenConfig {
    pub fn models_for(&self, class: ObjectClass) -> usize {
        self.models_per_class.unwrap_or_else(|| class.reference_model_count())
    }
}

/// Generates `cfg.pairs` samples, cycling through the classes.
pub fn generate_dataset(cfg: &DatagenConfig) -> Result<Vec<PairedSample>> {
    check_resolution(cfg.height, cfg.width)?;
    if cfg.classes.is_empty() {
        return Err(CoreError::invalid("no classes selected"));
    }
    for &class in &cfg.classes {
        if cfg.models_for(class) < 2 {
            return Err(CoreError::invalid(format!("class {class} needs at least two models")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut models: BTreeMap<(ObjectClass, u32), ObjectModel> = BTreeMap::new();
    let mut samples = Vec::with_capacity(cfg.pairs);
    for i in 0..cfg.pairs {
        let class = cfg.classes[i % cfg.classes.len()];
        let n = cfg.models_for(class) as u32;
        let a = rng.random_range(0..n);
        let b = (a + rng.random_range(1..n)) % n;
        let c1 = AngleConfig::random(&mut rng, 2 * i as u32);
        let c2 = AngleConfig::random(&mut rng, 2 * i as u32 + 1);
        for id in [a, b] {
            if let std::collections::btree_map::Entry::Vacant(e) = models.entry((class, id)) {
                e.insert(make_model(class, id, cfg.seed)?);
            }
        }
        samples.push(make_quadruple(
            i as u32,
            &models[&(class, a)],
            &models[&(class, b)],
            &c1,
            &c2,
            cfg.height,
            cfg.width,
        )?);
    }
    Ok(samples)
}

/// The four role assignments a quadruple supports: the original, the two
/// models exchanged, the two angle configurations exchanged, and both.
/// Every variant keeps appearance and ground truth on one model and pose and
/// ground truth on one configuration.
pub fn role_variants(s: &PairedSample) -> [PairedSample; 4] {
    let [m1, m2] = s.meta.model_ids;
    let [c1, c2] = s.meta.config_ids;
    let [a1, a2] = s.meta.angles;
    let variant = |models: [u32; 2], configs: [u32; 2], angles: [[f64; 3]; 2], views: [&View; 4]| PairedSample {
        meta: SampleMeta {
            id: s.meta.id,
            class: s.meta.class,
            model_ids: models,
            config_ids: configs,
            angles,
        },
        appearance: views[0].clone(),
        pose: views[1].clone(),
        ground_truth: views[2].clone(),
        aux: views[3].clone(),
    };
    [
        s.clone(),
        variant([m2, m1], [c1, c2], [a1, a2], [&s.aux, &s.ground_truth, &s.pose, &s.appearance]),
        variant([m1, m2], [c2, c1], [a2, a1], [&s.ground_truth, &s.aux, &s.appearance, &s.pose]),
        variant([m2, m1], [c2, c1], [a2, a1], [&s.pose, &s.appearance, &s.aux, &s.ground_truth]),
    ]
}

/// Train/test partition of sample indices. Samples are grouped by their
/// unordered model pair; roughly `test_fraction` of the groups (at least one
/// when there are two or more) are held out.
pub fn split_by_model_pair(metas: &[SampleMeta], test_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let key = |m: &SampleMeta| (m.class, m.model_ids[0].min(m.model_ids[1]), m.model_ids[0].max(m.model_ids[1]));
    let mut groups: Vec<_> = metas.iter().map(key).collect();
    groups.sort();
    groups.dedup();
    let mut n_test = (groups.len() as f64 * test_fraction).round() as usize;
    if groups.len() >= 2 {
        n_test = n_test.max(1);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_5A17);
    for i in (1..groups.len()).rev() {
        let j = rng.random_range(0..=i);
        groups.swap(i, j);
    }
    let held: Vec<_> = groups[..n_test].to_vec();
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (i, m) in metas.iter().enumerate() {
        if held.contains(&key(m)) {
            test.push(i);
        } else {
            train.push(i);
        }
    }
    (train, test)
}
