use std::fs;
use std::path::{Path, PathBuf};

use repose_core::correspondence::{match_images, save_keypoints, Correspondences};
use repose_core::datagen::{generate_dataset, read_manifest, split_by_model_pair, write_manifest, DatagenConfig, Manifest, ObjectClass, SampleMeta};
use repose_core::evalmetrics::{evaluate, MetricReport};
use repose_core::image::{load_png, save_png, ImageTensor};
use repose_core::train::{load_split, log_from_csv, Checkpoint, Inference, Phase, Pipeline, TrainConfig, Trainer, LATEST, LOG_FILE};
use repose_core::warp::save_flow;
use repose_core::CoreError;

use crate::ablate::AblationSpec;
use crate::draw::correspondence_canvas;
use crate::{AblateArgs, CliError, CliResult, ConfigArgs, DatagenArgs, EvalArgs, InferArgs, MatchArgs, PairArgs, TrainArgs};

pub const CONFIG_FILE: &str = "config.toml";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e).into())
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CoreError::io(path, e).into())
}

/// Config file (or defaults) with the command-line overrides applied.
pub fn resolve_config(args: &ConfigArgs, dataset: Option<&Path>) -> CliResult<TrainConfig> {
    let mut cfg = match &args.config {
        Some(p) => TrainConfig::load(p).map_err(|e| CliError::Usage(e.to_string()))?,
        None => TrainConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(r) = args.res {
        cfg.resolution = r;
    }
    if let Some(k) = args.k {
        cfg.k = k;
    }
    cfg.ablate_pose_input |= args.ablate_pose_input;
    if args.skip_e2e {
        cfg.e2e_epochs = 0;
    }
    if let Some(d) = dataset {
        cfg.dataset = Some(d.to_path_buf());
    }
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}

/// Reads the config's dataset and adopts its resolution unless `--res`
/// asked for a different one.
pub fn open_dataset(cfg: &mut TrainConfig, explicit_res: Option<usize>) -> CliResult<Manifest> {
    let Some(path) = cfg.dataset.clone() else {
        return Err(CliError::Usage("no dataset: pass --dataset or set `dataset` in the config".into()));
    };
    let manifest = read_manifest(&path)?;
    if manifest.records.is_empty() {
        return Err(CoreError::invalid(format!("dataset {} is empty", path.display())).into());
    }
    let [h, w] = manifest.resolution;
    if h != w {
        return Err(CoreError::invalid(format!("dataset images are {h}×{w}; training needs square images")).into());
    }
    match explicit_res {
        Some(r) if r != h => {
            return Err(CoreError::invalid(format!("--res {r} does not match the dataset's {h}×{w}")).into());
        }
        _ => cfg.resolution = h,
    }
    cfg.validate().map_err(CliError::Data)?;
    Ok(manifest)
}

pub fn datagen(a: &DatagenArgs) -> CliResult<Manifest> {
    let classes = a
        .classes
        .iter()
        .map(|c| c.trim().parse::<ObjectClass>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let cfg = DatagenConfig {
        classes,
        pairs: a.pairs,
        height: a.res,
        width: a.res,
        seed: a.seed,
        models_per_class: a.models_per_class,
    };
    let samples = generate_dataset(&cfg)?;
    let m = write_manifest(&samples, &a.out, [a.res, a.res])?;
    log::info!("wrote {} samples to {}", m.records.len(), a.out.display());
    Ok(m)
}

/// An input pair, either two PNGs or one dataset sample.
pub struct LoadedPair {
    pub appearance: ImageTensor,
    pub pose: ImageTensor,
    pub ground_truth: Option<ImageTensor>,
    pub meta: Option<SampleMeta>,
}

pub fn load_pair(p: &PairArgs) -> CliResult<LoadedPair> {
    if let (Some(a), Some(pose)) = (&p.appearance, &p.pose) {
        return Ok(LoadedPair {
            appearance: load_png(a)?,
            pose: load_png(pose)?,
            ground_truth: None,
            meta: None,
        });
    }
    let Some(dir) = &p.dataset else {
        return Err(CliError::Usage("pass --appearance and --pose, or --dataset with --index".into()));
    };
    let m = read_manifest(dir)?;
    if p.index >= m.records.len() {
        return Err(CoreError::invalid(format!("index {} is out of range for {} samples", p.index, m.records.len())).into());
    }
    let s = m.load_sample(p.index)?;
    Ok(LoadedPair {
        appearance: s.appearance.image,
        pose: s.pose.image,
        ground_truth: Some(s.ground_truth.image),
        meta: Some(s.meta),
    })
}

/// Writes `keypoints.json` and the line drawing `match.png`.
pub fn match_pair(a: &MatchArgs) -> CliResult<Correspondences> {
    let cfg = resolve_config(&a.config, None)?;
    let pair = load_pair(&a.pair)?;
    if pair.appearance.shape() != pair.pose.shape() {
        return Err(CoreError::invalid("appearance and pose images differ in size").into());
    }
    let corr = match_images(&*cfg.backend(), (&pair.appearance, None), (&pair.pose, None), cfg.k)?;
    if corr.padded {
        log::warn!("fewer than {} distinct matches; the strongest was repeated", cfg.k);
    }
    create_dir(&a.out)?;
    save_keypoints(&corr, &a.out.join("keypoints.json"))?;
    save_png(&correspondence_canvas(&pair.appearance, &pair.pose, &corr)?, &a.out.join("match.png"))?;
    Ok(corr)
}

/// Trains in the run directory `--out`, which ends up holding the config,
/// per-epoch checkpoints, the CSV log and `final.ckpt`.
pub fn train(a: &TrainArgs) -> CliResult<Checkpoint> {
    let mut cfg = resolve_config(&a.config, a.dataset.as_deref())?;
    let manifest = open_dataset(&mut cfg, a.config.res)?;
    create_dir(&a.out)?;
    let split = load_split(&manifest, &cfg)?;
    log::info!("{} training samples, {} held out", split.train.len(), split.test.len());
    let trainer = if a.resume {
        let ck = Checkpoint::load(&a.out.join(LATEST))?;
        if ck.meta.config != cfg {
            return Err(CliError::Usage("the run directory was started with a different config".into()));
        }
        let mut t = Trainer::resume(&ck, split.train)?;
        let log_path = a.out.join(LOG_FILE);
        let text = fs::read_to_string(&log_path).map_err(|e| CoreError::io(&log_path, e))?;
        t.log = log_from_csv(&text)?.into_iter().filter(|r| r.step <= ck.meta.step).collect();
        t
    } else {
        Trainer::new(cfg.clone(), split.train)?
    };
    write_text(&a.out.join(CONFIG_FILE), &cfg.to_toml())?;
    let mut trainer = trainer.with_run_dir(&a.out);
    trainer.run().map_err(CliError::training)?;
    let ck = trainer.checkpoint(Phase::E2e);
    ck.save(&a.out.join(FINAL_CHECKPOINT))?;
    write_text(&a.out.join(LOG_FILE), &repose_core::train::log_to_csv(&trainer.log))?;
    Ok(ck)
}

/// Writes `generated.png`, `warped.png`, `keypoints.json` and, on request,
/// `flow.bin`.
pub fn infer(a: &InferArgs) -> CliResult<Inference> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let pipeline = Pipeline::from_checkpoint(&ck)?;
    let pair = load_pair(&a.pair)?;
    let (corr, out) = pipeline.infer_images(&ck.meta.config, &pair.appearance, &pair.pose)?;
    create_dir(&a.out)?;
    save_png(&out.generated, &a.out.join("generated.png"))?;
    save_png(&out.warped, &a.out.join("warped.png"))?;
    save_keypoints(&corr, &a.out.join("keypoints.json"))?;
    if let Some(gt) = &pair.ground_truth {
        save_png(gt, &a.out.join("ground_truth.png"))?;
    }
    if a.dump_flow {
        save_flow(&out.flow, &a.out.join("flow.bin"))?;
    }
    Ok(out)
}

/// Held-out records of `m` under the split `cfg` trains with.
pub fn held_out(m: &Manifest, cfg: &TrainConfig) -> Manifest {
    let metas: Vec<SampleMeta> = m.records.iter().map(|r| r.meta()).collect();
    let (_, test) = split_by_model_pair(&metas, cfg.test_fraction, cfg.seed);
    Manifest {
        records: test.iter().map(|&i| m.records[i].clone()).collect(),
        ..m.clone()
    }
}

pub fn eval(a: &EvalArgs) -> CliResult<MetricReport> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let mut manifest = read_manifest(&a.dataset)?;
    if a.held_out {
        manifest = held_out(&manifest, &ck.meta.config);
    }
    create_dir(&a.out)?;
    Ok(evaluate(&manifest, &ck, &a.out)?)
}

pub fn ablation_spec(a: &AblateArgs) -> CliResult<AblationSpec> {
    // the two ablation switches add rows rather than altering the base runs
    let base_args = ConfigArgs {
        ablate_pose_input: false,
        skip_e2e: false,
        ..a.config.clone()
    };
    let mut base = resolve_config(&base_args, a.dataset.as_deref())?;
    let manifest = open_dataset(&mut base, a.config.res)?;
    Ok(AblationSpec {
        base,
        manifest,
        k_list: a.k_list.clone(),
        out: PathBuf::from(&a.out),
        without_pose_image: a.config.ablate_pose_input,
        without_e2e: a.config.skip_e2e,
        strips: a.strips,
    })
}
