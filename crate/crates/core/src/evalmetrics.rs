//! Image-quality metrics and the evaluation report.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::datagen::{Manifest, ObjectClass};
use crate::descriptor::FeatureExtractor;
use crate::error::{CoreError, Result};
use crate::image::{hstack, save_png, ImageTensor};
use crate::train::{Checkpoint, Pipeline, TrainSample};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 1e-4;
pub const SSIM_C2: f64 = 9e-4;
pub const FID_JITTER: f64 = 1e-6;

fn same_shape(a: &ImageTensor, b: &ImageTensor) -> Result<(usize, usize, usize)> {
    if a.shape() != b.shape() {
        return Err(CoreError::invalid(format!("images differ in shape: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(a.chw()?)
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode filtering of one `h × w` plane.
fn filter(plane: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let n = g.len();
    let ow = w - n + 1;
    let oh = h - n + 1;
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| g[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| g[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Gaussian-window SSIM, averaged over valid window positions and channels.
pub fn ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    let (c, h, w) = same_shape(a, b)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(CoreError::invalid(format!("SSIM needs images of at least {SSIM_WINDOW}×{SSIM_WINDOW}")));
    }
    let g = gaussian_window();
    let plane = h * w;
    let mut total = 0.0;
    for ch in 0..c {
        let pa: Vec<f64> = a.data()[ch * plane..(ch + 1) * plane].iter().map(|&v| v as f64).collect();
        let pb: Vec<f64> = b.data()[ch * plane..(ch + 1) * plane].iter().map(|&v| v as f64).collect();
        let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>();
        let mu_a = filter(&pa, h, w, &g);
        let mu_b = filter(&pb, h, w, &g);
        let saa = filter(&prod(&pa, &pa), h, w, &g);
        let sbb = filter(&prod(&pb, &pb), h, w, &g);
        let sab = filter(&prod(&pa, &pb), h, w, &g);
        let mut acc = 0.0;
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = saa[i] - ma * ma;
            let vb = sbb[i] - mb * mb;
            let cov = sab[i] - ma * mb;
            acc += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2)) / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
        }
        total += acc / mu_a.len() as f64;
    }
    Ok(total / c as f64)
}

/// Mean absolute pixel difference.
pub fn l1_distance(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    same_shape(a, b)?;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (*x as f64 - *y as f64).abs()).sum::<f64>() / a.len() as f64)
}

/// Per stage: unit-normalise features across channels at each pixel, sum the
/// squared differences over channels, average over pixels; then sum stages.
pub fn lpips_like(a: &ImageTensor, b: &ImageTensor, fx: &FeatureExtractor) -> Result<f64> {
    same_shape(a, b)?;
    let fa = fx.eval(a)?;
    let fb = fx.eval(b)?;
    let mut total = 0.0;
    for (x, y) in fa.iter().zip(&fb) {
        let (c, h, w) = x.chw()?;
        let plane = h * w;
        let mut acc = 0.0;
        for p in 0..plane {
            let col = |t: &repose_tensor::Tensor<f32>| (0..c).map(|ch| t.data()[ch * plane + p] as f64).collect::<Vec<_>>();
            let (u, v) = (col(x), col(y));
            let nu = u.iter().map(|q| q * q).sum::<f64>().sqrt() + 1e-10;
            let nv = v.iter().map(|q| q * q).sum::<f64>().sqrt() + 1e-10;
            acc += u.iter().zip(&v).map(|(p, q)| (p / nu - q / nv).powi(2)).sum::<f64>();
        }
        total += acc / plane as f64;
    }
    Ok(total)
}

fn mean_cov(set: &[Vec<f64>]) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let n = set.len();
    let d = set
        .first()
        .map(Vec::len)
        .ok_or_else(|| CoreError::invalid("FID needs a nonempty feature set"))?;
    if set.iter().any(|v| v.len() != d) {
        return Err(CoreError::invalid("feature vectors differ in length"));
    }
    let mu: Vec<f64> = (0..d).map(|j| set.iter().map(|v| v[j]).sum::<f64>() / n as f64).collect();
    let mut cov = DMatrix::<f64>::zeros(d, d);
    if n > 1 {
        for v in set {
            for i in 0..d {
                for j in 0..d {
                    cov[(i, j)] += (v[i] - mu[i]) * (v[j] - mu[j]);
                }
            }
        }
        cov /= (n - 1) as f64;
    }
    for i in 0..d {
        cov[(i, i)] += FID_JITTER;
    }
    Ok((mu, cov))
}

fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()));
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussians fitted to two feature sets.
pub fn fid_from_features(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let (mu_a, ca) = mean_cov(a)?;
    let (mu_b, cb) = mean_cov(b)?;
    if mu_a.len() != mu_b.len() {
        return Err(CoreError::invalid("feature sets differ in dimension"));
    }
    if a.len() < mu_a.len() || b.len() < mu_b.len() {
        log::warn!(
            "FID on {} / {} samples of dimension {} is poorly conditioned",
            a.len(),
            b.len(),
            mu_a.len()
        );
    }
    let mean_term: f64 = mu_a.iter().zip(&mu_b).map(|(x, y)| (x - y).powi(2)).sum();
    let sa = sqrt_psd(&ca);
    let inner = &sa * &cb * &sa;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    Ok(mean_term + ca.trace() + cb.trace() - 2.0 * cross)
}

pub fn fid(a: &[ImageTensor], b: &[ImageTensor], fx: &FeatureExtractor) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(CoreError::invalid("FID needs nonempty image sets"));
    }
    let fa = a.iter().map(|i| fx.pooled(i)).collect::<Result<Vec<_>>>()?;
    let fb = b.iter().map(|i| fx.pooled(i)).collect::<Result<Vec<_>>>()?;
    fid_from_features(&fa, &fb)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodScores {
    pub ssim: f64,
    pub lpips_like: f64,
    pub fid: f64,
    pub l1: f64,
}

pub fn score_set(outputs: &[ImageTensor], targets: &[ImageTensor], fx: &FeatureExtractor) -> Result<MethodScores> {
    if outputs.is_empty() || outputs.len() != targets.len() {
        return Err(CoreError::invalid("score_set needs equally many outputs and targets"));
    }
    let n = outputs.len() as f64;
    let mut s = MethodScores {
        ssim: 0.0,
        lpips_like: 0.0,
        fid: fid(outputs, targets, fx)?,
        l1: 0.0,
    };
    for (o, t) in outputs.iter().zip(targets) {
        s.ssim += ssim(o, t)? / n;
        s.lpips_like += lpips_like(o, t, fx)? / n;
        s.l1 += l1_distance(o, t)? / n;
    }
    Ok(s)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    pub samples: usize,
    /// Method name → scores; empty when the row has no samples.
    pub methods: BTreeMap<String, MethodScores>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Feature backbone behind the perceptual metrics. Values are not
    /// comparable across backbones.
    pub backend: String,
    pub resolution: [usize; 2],
    pub samples: usize,
    pub rows: Vec<ReportRow>,
}

pub const METHOD_TPS: &str = "TPS";
pub const METHOD_OURS: &str = "OURS";
pub const METHOD_WARP_ONLY: &str = "WARP";
pub const ALL_LABEL: &str = "All together";

/// Row order of the report.
pub const REPORT_CLASSES: [ObjectClass; 4] = [ObjectClass::Vase, ObjectClass::Briefcase, ObjectClass::Cabinet, ObjectClass::Shoe];

/// Outputs of every method for one sample.
#[derive(Clone, Debug)]
pub struct SampleOutputs {
    pub class: ObjectClass,
    pub tps: ImageTensor,
    pub warped: ImageTensor,
    pub generated: ImageTensor,
    pub gt: ImageTensor,
}

pub fn build_report(outputs: &[SampleOutputs], fx: &FeatureExtractor, resolution: [usize; 2]) -> Result<MetricReport> {
    if outputs.is_empty() {
        return Err(CoreError::invalid("cannot evaluate an empty dataset"));
    }
    let mut rows = Vec::new();
    let groups: Vec<(String, Vec<&SampleOutputs>)> = REPORT_CLASSES
        .iter()
        .map(|c| (c.report_label().to_string(), outputs.iter().filter(|o| o.class == *c).collect()))
        .chain(std::iter::once((ALL_LABEL.to_string(), outputs.iter().collect())))
        .collect();
    for (label, group) in groups {
        let mut methods = BTreeMap::new();
        if !group.is_empty() {
            let gt: Vec<ImageTensor> = group.iter().map(|o| o.gt.clone()).collect();
            for (name, pick) in [
                (METHOD_TPS, (|o: &SampleOutputs| o.tps.clone()) as fn(&SampleOutputs) -> ImageTensor),
                (METHOD_WARP_ONLY, |o| o.warped.clone()),
                (METHOD_OURS, |o| o.generated.clone()),
            ] {
                let out: Vec<ImageTensor> = group.iter().map(|o| pick(o)).collect();
                methods.insert(name.to_string(), score_set(&out, &gt, fx)?);
            }
        }
        rows.push(ReportRow {
            label,
            samples: group.len(),
            methods,
        });
    }
    Ok(MetricReport {
        backend: fx.id().to_string(),
        resolution,
        samples: outputs.len(),
        rows,
    })
}

impl MetricReport {
    pub fn row(&self, label: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn overall(&self, method: &str) -> Option<MethodScores> {
        self.row(ALL_LABEL).and_then(|r| r.methods.get(method).copied())
    }

    /// Plain-text table: one line per class row and method.
    pub fn to_table(&self) -> String {
        let mut s = format!(
            "backend: {}\n{:<14} {:<6} {:>7} {:>8} {:>9} {:>7}\n",
            self.backend, "class", "method", "SSIM", "LPIPS*", "FID*", "L1"
        );
        for r in &self.rows {
            if r.methods.is_empty() {
                s.push_str(&format!("{:<14} {:<6} {:>7}\n", r.label, "-", "n/a"));
            }
            for (m, v) in &r.methods {
                s.push_str(&format!(
                    "{:<14} {:<6} {:>7.4} {:>8.4} {:>9.4} {:>7.4}\n",
                    r.label, m, v.ssim, v.lpips_like, v.fid, v.l1
                ));
            }
        }
        s
    }
}

/// Runs the pipeline over prepared samples: TPS baseline, learned warp and
/// re-rendered output for each.
pub fn run_methods(pipeline: &Pipeline, samples: &[TrainSample]) -> Result<Vec<SampleOutputs>> {
    samples
        .iter()
        .map(|s| {
            let out = pipeline.infer(s)?;
            Ok(SampleOutputs {
                class: s.meta.class,
                tps: crate::warp::warp_image(&s.appearance, &s.tps_flow)?,
                warped: out.warped,
                generated: out.generated,
                gt: s.gt.clone(),
            })
        })
        .collect()
}

/// Evaluates a checkpoint on a dataset, writing `report.json`, `report.txt`
/// and one comparison grid per sample (`I_a | I_p | I_wrp | I_gen | I_gt`).
pub fn evaluate(manifest: &Manifest, checkpoint: &Checkpoint, out_dir: &Path) -> Result<MetricReport> {
    if manifest.records.is_empty() {
        return Err(CoreError::invalid("cannot evaluate an empty dataset"));
    }
    let cfg = &checkpoint.meta.config;
    if manifest.resolution != [cfg.resolution, cfg.resolution] {
        return Err(CoreError::invalid(format!(
            "checkpoint was trained at {0}×{0} but the dataset is {1}×{2}",
            cfg.resolution, manifest.resolution[0], manifest.resolution[1]
        )));
    }
    let pipeline = Pipeline::from_checkpoint(checkpoint)?;
    let samples = crate::train::load_prepared(manifest, cfg)?;
    let outputs = run_methods(&pipeline, &samples)?;
    let report = build_report(&outputs, &pipeline.fx, manifest.resolution)?;
    let grids = out_dir.join("grids");
    fs::create_dir_all(&grids).map_err(|e| CoreError::io(&grids, e))?;
    for (s, o) in samples.iter().zip(&outputs) {
        let g = hstack(&[&s.appearance, &s.pose, &o.warped, &o.generated, &o.gt])?;
        save_png(&g, &grids.join(format!("{:05}.png", s.meta.id)))?;
    }
    let json = serde_json::to_string_pretty(&report).map_err(|e| CoreError::invalid(e.to_string()))?;
    let path = out_dir.join("report.json");
    fs::write(&path, json).map_err(|e| CoreError::io(&path, e))?;
    let path = out_dir.join("report.txt");
    fs::write(&path, report.to_table()).map_err(|e| CoreError::io(&path, e))?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use repose_tensor::Tensor;

    #[test]
    fn ssim_constant_images_closed_form() {
        let a = Tensor::zeros(&[3, 16, 16]);
        let b = Tensor::full(&[3, 16, 16], 1.0f32);
        let v = ssim(&a, &b).unwrap();
        assert!((v - SSIM_C1 / (1.0 + SSIM_C1)).abs() < 1e-12);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn fid_mean_shift() {
        let a: Vec<Vec<f64>> = (0..50).map(|i| vec![(i as f64 * 0.37).sin(), (i as f64 * 0.91).cos()]).collect();
        let b: Vec<Vec<f64>> = a.iter().map(|v| vec![v[0] + 2.0, v[1] - 1.0]).collect();
        let d = fid_from_features(&a, &b).unwrap();
        assert!((d - 5.0).abs() < 1e-6, "{d}");
        assert!(fid_from_features(&a, &a).unwrap().abs() < 1e-9);
        assert!(fid_from_features(&[], &a).is_err());
    }
}
