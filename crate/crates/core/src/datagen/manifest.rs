//! On-disk dataset layout: `manifest.json` plus `images/` and `masks/` PNGs.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ObjectClass, PairedSample, SampleMeta, View};
use crate::error::{CoreError, Result};
use crate::image::{load_mask_png, load_png, save_mask_png, save_png};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RolePaths {
    pub appearance: String,
    pub pose: String,
    pub gt: String,
    pub aux: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: u32,
    pub class: ObjectClass,
    pub model_ids: [u32; 2],
    pub config_ids: [u32; 2],
    pub angles: [[f64; 3]; 2],
    pub paths: RolePaths,
    pub masks: RolePaths,
}

impl ManifestRecord {
    pub fn meta(&self) -> SampleMeta {
        SampleMeta {
            id: self.id,
            class: self.class,
            model_ids: self.model_ids,
            config_ids: self.config_ids,
            angles: self.angles,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    /// `[height, width]`
    pub resolution: [usize; 2],
    pub records: Vec<ManifestRecord>,
    /// Directory the relative paths resolve against; not serialised.
    #[serde(skip)]
    pub root: PathBuf,
}

impl Manifest {
    pub fn parse(text: &str, root: &Path) -> Result<Self> {
        let origin = root.join(MANIFEST_FILE);
        let mut m: Manifest = serde_json::from_str(text).map_err(|e| CoreError::format(&origin, e.to_string()))?;
        if m.version != MANIFEST_VERSION {
            return Err(CoreError::format(&origin, format!("unsupported manifest version {}", m.version)));
        }
        let [h, w] = m.resolution;
        super::check_resolution(h, w).map_err(|e| CoreError::format(&origin, e.to_string()))?;
        for r in &m.records {
            if r.model_ids[0] == r.model_ids[1] {
                return Err(CoreError::format(&origin, format!("record {} reuses one model", r.id)));
            }
            let all = [&r.paths, &r.masks].into_iter().flat_map(|p| [&p.appearance, &p.pose, &p.gt, &p.aux]);
            for p in all {
                if p.is_empty() || Path::new(p).is_absolute() || p.split(['/', '\\']).any(|c| c == "..") {
                    return Err(CoreError::format(&origin, format!("record {}: bad relative path `{p}`", r.id)));
                }
            }
        }
        m.root = root.to_path_buf();
        Ok(m)
    }

    pub fn height(&self) -> usize {
        self.resolution[0]
    }

    pub fn width(&self) -> usize {
        self.resolution[1]
    }

    pub fn load_sample(&self, index: usize) -> Result<PairedSample> {
        let r = self.records.get(index).ok_or_else(|| CoreError::invalid(format!("no record {index}")))?;
        let view = |img: &str, mask: &str| -> Result<View> {
            let ip = self.root.join(img);
            let image = load_png(&ip)?;
            let (_, h, w) = image.chw()?;
            if [h, w] != self.resolution {
                return Err(CoreError::format(&ip, format!("{h}×{w} does not match manifest resolution")));
            }
            let mp = self.root.join(mask);
            let mask = load_mask_png(&mp)?;
            if mask.height != h || mask.width != w {
                return Err(CoreError::format(&mp, "mask size mismatch"));
            }
            Ok(View { image, mask })
        };
        Ok(PairedSample {
            meta: r.meta(),
            appearance: view(&r.paths.appearance, &r.masks.appearance)?,
            pose: view(&r.paths.pose, &r.masks.pose)?,
            ground_truth: view(&r.paths.gt, &r.masks.gt)?,
            aux: view(&r.paths.aux, &r.masks.aux)?,
        })
    }

    pub fn load_all(&self) -> Result<Vec<PairedSample>> {
        (0..self.records.len()).map(|i| self.load_sample(i)).collect()
    }
}

fn role_paths(dir: &str, id: u32) -> RolePaths {
    RolePaths {
        appearance: format!("{dir}/{id:05}_appearance.png"),
        pose: format!("{dir}/{id:05}_pose.png"),
        gt: format!("{dir}/{id:05}_gt.png"),
        aux: format!("{dir}/{id:05}_aux.png"),
    }
}

/// Writes every view as PNG and the manifest as JSON. `resolution` is used
/// only when `samples` is empty.
pub fn write_manifest(samples: &[PairedSample], out_dir: &Path, resolution: [usize; 2]) -> Result<Manifest> {
    let resolution = match samples.first() {
        Some(s) => {
            let (_, h, w) = s.appearance.image.chw()?;
            [h, w]
        }
        None => resolution,
    };
    for sub in ["images", "masks"] {
        let d = out_dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| CoreError::io(&d, e))?;
    }
    let mut records = Vec::with_capacity(samples.len());
    for s in samples {
        let paths = role_paths("images", s.meta.id);
        let masks = role_paths("masks", s.meta.id);
        let views = [&s.appearance, &s.pose, &s.ground_truth, &s.aux];
        let p = [&paths.appearance, &paths.pose, &paths.gt, &paths.aux];
        let m = [&masks.appearance, &masks.pose, &masks.gt, &masks.aux];
        for i in 0..4 {
            let (_, h, w) = views[i].image.chw()?;
            if [h, w] != resolution {
                return Err(CoreError::invalid(format!("sample {} has resolution {h}×{w}", s.meta.id)));
            }
            save_png(&views[i].image, &out_dir.join(p[i]))?;
            save_mask_png(&views[i].mask, &out_dir.join(m[i]))?;
        }
        let SampleMeta {
            id,
            class,
            model_ids,
            config_ids,
            angles,
        } = s.meta.clone();
        records.push(ManifestRecord {
            id,
            class,
            model_ids,
            config_ids,
            angles,
            paths,
            masks,
        });
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        resolution,
        records,
        root: out_dir.to_path_buf(),
    };
    let path = out_dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| CoreError::format(&path, e.to_string()))?;
    fs::write(&path, text).map_err(|e| CoreError::io(&path, e))?;
    Ok(manifest)
}

/// Reads a manifest given either its file path or its dataset directory.
pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let (file, root) = if path.is_dir() {
        (path.join(MANIFEST_FILE), path.to_path_buf())
    } else {
        (path.to_path_buf(), path.parent().map(Path::to_path_buf).unwrap_or_default())
    };
    let text = fs::read_to_string(&file).map_err(|e| CoreError::io(&file, e))?;
    Manifest::parse(&text, &root)
}
