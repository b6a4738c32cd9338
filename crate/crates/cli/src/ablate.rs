//! Keypoint-count ablation: one full training run per `k` on a shared seed
//! and split, scored on the held-out model pairs.

use std::fs;
use std::path::PathBuf;

use repose_core::datagen::Manifest;
use repose_core::evalmetrics::{build_report, run_methods, MethodScores, SampleOutputs, METHOD_OURS};
use repose_core::image::{hstack, save_png, ImageTensor};
use repose_core::train::{load_split, Phase, TrainConfig, Trainer};
use repose_core::CoreError;
use serde::{Deserialize, Serialize};

use crate::commands::FINAL_CHECKPOINT;
use crate::draw::vstack;
use crate::{CliError, CliResult};

pub const WITHOUT_POSE_IMAGE: &str = "Without I_p";
pub const WITHOUT_E2E: &str = "Without End-to-End";

#[derive(Clone, Debug)]
pub struct AblationSpec {
    pub base: TrainConfig,
    pub manifest: Manifest,
    pub k_list: Vec<usize>,
    pub out: PathBuf,
    /// Add a row with the pose image zeroed in the warp input.
    pub without_pose_image: bool,
    /// Add a row scored before the end-to-end phase.
    pub without_e2e: bool,
    pub strips: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub k: usize,
    pub scores: MethodScores,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub backend: String,
    pub resolution: [usize; 2],
    pub test_samples: usize,
    pub rows: Vec<AblationRow>,
    /// Column labels of each comparison strip, left to right.
    pub strip_columns: Vec<String>,
}

impl AblationReport {
    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn to_table(&self) -> String {
        let mut s = format!(
            "backend: {}, {} held-out samples\n{:<20} {:>7} {:>8} {:>9}\n",
            self.backend, self.test_samples, "Method", "SSIM", "LPIPS*", "FID*"
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{:<20} {:>7.4} {:>8.4} {:>9.4}\n",
                r.label, r.scores.ssim, r.scores.lpips_like, r.scores.fid
            ));
        }
        s
    }
}

struct Variant {
    label: String,
    slug: String,
    cfg: TrainConfig,
    /// Also score the phase-2 state, giving the no-end-to-end row.
    capture_phase2: bool,
}

fn variants(spec: &AblationSpec) -> Vec<Variant> {
    let base_k = if spec.k_list.contains(&spec.base.k) {
        spec.base.k
    } else {
        spec.k_list[0]
    };
    let mut out: Vec<Variant> = spec
        .k_list
        .iter()
        .map(|&k| Variant {
            label: format!("{k} keypoints"),
            slug: format!("k{k}"),
            cfg: TrainConfig { k, ..spec.base.clone() },
            capture_phase2: spec.without_e2e && k == base_k,
        })
        .collect();
    if spec.without_pose_image {
        out.push(Variant {
            label: WITHOUT_POSE_IMAGE.into(),
            slug: format!("k{base_k}-no-pose-image"),
            cfg: TrainConfig {
                k: base_k,
                ablate_pose_input: true,
                ..spec.base.clone()
            },
            capture_phase2: false,
        });
    }
    out
}

fn score(outputs: &[SampleOutputs], fx: &repose_core::descriptor::FeatureExtractor, res: [usize; 2]) -> CliResult<MethodScores> {
    let report = build_report(outputs, fx, res)?;
    report
        .overall(METHOD_OURS)
        .ok_or_else(|| CoreError::invalid("no held-out samples to score").into())
}

/// Trains every variant, writes `report.json`, `report.txt` and one strip
/// per drawn sample under `strips/` (appearance, pose, each variant's warp,
/// ground truth), and returns the report.
pub fn ablate_keypoints(spec: &AblationSpec) -> CliResult<AblationReport> {
    if spec.k_list.is_empty() {
        return Err(CliError::Usage("the keypoint list is empty".into()));
    }
    let res = spec.manifest.resolution;
    let mut rows = Vec::new();
    let mut e2e_row = None;
    let mut warps: Vec<(String, Vec<ImageTensor>)> = Vec::new();
    let mut strip_base: Vec<(u32, [ImageTensor; 3])> = Vec::new();
    let mut backend = String::new();
    let mut test_samples = 0;
    for v in variants(spec) {
        log::info!("ablation run: {}", v.label);
        let split = load_split(&spec.manifest, &v.cfg)?;
        if split.test.is_empty() {
            return Err(CoreError::invalid("the dataset has no held-out model pairs").into());
        }
        test_samples = split.test.len();
        if strip_base.is_empty() {
            strip_base = split
                .test
                .iter()
                .take(spec.strips)
                .map(|s| (s.meta.id, [s.appearance.clone(), s.pose.clone(), s.gt.clone()]))
                .collect();
        }
        let dir = spec.out.join(&v.slug);
        let mut trainer = Trainer::new(v.cfg.clone(), split.train)?.with_run_dir(&dir);
        let mut phase2 = None;
        trainer
            .run_with(|phase, t| {
                if v.capture_phase2 && phase == Phase::Gen {
                    phase2 = Some(run_methods(&t.pipeline, &split.test)?);
                }
                Ok(())
            })
            .map_err(CliError::training)?;
        trainer.checkpoint(Phase::E2e).save(&dir.join(FINAL_CHECKPOINT))?;
        let fx = &trainer.pipeline.fx;
        backend = fx.id().to_string();
        let outputs = run_methods(&trainer.pipeline, &split.test)?;
        rows.push(AblationRow {
            label: v.label.clone(),
            k: v.cfg.k,
            scores: score(&outputs, fx, res)?,
        });
        if let Some(p2) = phase2 {
            e2e_row = Some(AblationRow {
                label: WITHOUT_E2E.into(),
                k: v.cfg.k,
                scores: score(&p2, fx, res)?,
            });
        }
        warps.push((v.label, outputs.into_iter().take(spec.strips).map(|o| o.warped).collect()));
    }
    rows.extend(e2e_row);

    let strip_dir = spec.out.join("strips");
    fs::create_dir_all(&strip_dir).map_err(|e| CoreError::io(&strip_dir, e))?;
    let mut strips = Vec::with_capacity(strip_base.len());
    for (i, (id, [a, p, gt])) in strip_base.iter().enumerate() {
        let mut cols = vec![a, p];
        cols.extend(warps.iter().map(|(_, w)| &w[i]));
        cols.push(gt);
        let strip = hstack(&cols)?;
        save_png(&strip, &strip_dir.join(format!("{id:05}.png")))?;
        strips.push(strip);
    }
    if !strips.is_empty() {
        save_png(&vstack(&strips)?, &strip_dir.join("all.png"))?;
    }

    let mut strip_columns = vec!["I_a".to_string(), "I_p".to_string()];
    strip_columns.extend(warps.iter().map(|(l, _)| format!("I_wrp ({l})")));
    strip_columns.push("I_gt".into());
    let report = AblationReport {
        backend,
        resolution: res,
        test_samples,
        rows,
        strip_columns,
    };
    let json = serde_json::to_string_pretty(&report).map_err(|e| CoreError::invalid(e.to_string()))?;
    for (name, text) in [("report.json", json), ("report.txt", report.to_table())] {
        let path = spec.out.join(name);
        fs::write(&path, text).map_err(|e| CoreError::io(&path, e))?;
    }
    Ok(report)
}
