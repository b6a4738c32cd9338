//! Three-phase training: warp only, generator with the warp frozen, then
//! everything end to end. Checkpoints, CSV logs and exact resumption.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use repose_tensor::{accumulate_grads, Adam, Archive, ParamStore, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::correspondence::{default_sigma, encode_heatmaps, load_keypoints, match_images, save_keypoints, Correspondences, DEFAULT_K};
use crate::datagen::{role_variants, split_by_model_pair, Manifest, PairedSample, SampleMeta};
use crate::descriptor::{DescriptorBackend, FeatureExtractor, ShapeBackend, ToyBackend};
use crate::error::{CoreError, Result};
use crate::generator::{Discriminator, Generator, DISC_PREFIX, GEN_PREFIX};
use crate::image::ImageTensor;
use crate::losses::{gen_loss, lsgan_d, total_loss, warp_loss, LossWeights, WarpLevel};
use crate::warp::{drop_pose_image, tps_flow_for, warp_image, warp_input_for, FlowNet, LEVELS, WARP_PREFIX};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub dataset: Option<PathBuf>,
    pub resolution: usize,
    pub k: usize,
    /// Heatmap width in pixels; `resolution / 32` when unset.
    pub sigma: Option<f64>,
    pub warp_epochs: usize,
    pub gen_epochs: usize,
    pub e2e_epochs: usize,
    pub warp_batch: usize,
    pub gen_batch: usize,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub warp_width: usize,
    pub gen_width: usize,
    pub disc_width: usize,
    pub descriptor: DescriptorKind,
    pub descriptor_seed: u64,
    pub extractor_seed: u64,
    /// Per-epoch decay of the flow-supervision weight.
    pub flow_decay: f64,
    pub test_fraction: f64,
    /// Train on all four role assignments of each quadruple.
    pub role_augment: bool,
    /// Zero the pose image in the warp input.
    pub ablate_pose_input: bool,
    #[serde(flatten)]
    pub weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dataset: None,
            resolution: 64,
            k: DEFAULT_K,
            sigma: None,
            warp_epochs: 20,
            gen_epochs: 20,
            e2e_epochs: 10,
            warp_batch: 16,
            gen_batch: 8,
            lr: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            warp_width: 8,
            gen_width: 8,
            disc_width: 8,
            descriptor: DescriptorKind::Shape,
            descriptor_seed: 7,
            extractor_seed: FeatureExtractor::DEFAULT_SEED,
            flow_decay: 0.5,
            test_fraction: 0.1,
            role_augment: true,
            ablate_pose_input: false,
            weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CoreError::invalid(format!("config: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| CoreError::format(path, e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CoreError::invalid(m.to_string()));
        if self.resolution == 0 || !self.resolution.is_multiple_of(16) {
            return bad("resolution must be a positive multiple of 16");
        }
        if self.k == 0 {
            return bad("k must be at least 1");
        }
        if self.warp_batch == 0 || self.gen_batch == 0 {
            return bad("batch sizes must be at least 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if self.warp_width == 0 || self.gen_width == 0 || self.disc_width == 0 {
            return bad("network widths must be at least 1");
        }
        if let Some(s) = self.sigma {
            if !(s > 0.0 && s.is_finite()) {
                return bad("sigma must be positive");
            }
        }
        if !(0.0..=1.0).contains(&self.flow_decay) {
            return bad("flow_decay must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return bad("test_fraction must lie in [0, 1)");
        }
        self.weights.validate()
    }

    pub fn sigma_px(&self) -> f64 {
        self.sigma.unwrap_or_else(|| default_sigma(self.resolution))
    }

    pub fn backend(&self) -> Box<dyn DescriptorBackend> {
        match self.descriptor {
            DescriptorKind::Toy => Box::new(ToyBackend::new(self.descriptor_seed)),
            DescriptorKind::Shape => Box::new(ShapeBackend::new(self.descriptor_seed)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DescriptorKind {
    Toy,
    Shape,
}

/// One sample with everything the networks consume precomputed.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub meta: SampleMeta,
    pub appearance: ImageTensor,
    pub pose: ImageTensor,
    pub gt: ImageTensor,
    pub corr: Correspondences,
    pub input: Tensor<f32>,
    pub heat_a: Tensor<f32>,
    pub heat_p: Tensor<f32>,
    /// TPS flow from the keypoints, the warp's supervision target.
    pub tps_flow: Tensor<f32>,
}

/// Keypoints for every sample, computed with the configured backend.
pub fn compute_correspondences(samples: &[PairedSample], cfg: &TrainConfig) -> Result<Vec<Correspondences>> {
    let backend = cfg.backend();
    samples
        .iter()
        .map(|s| {
            match_images(&*backend, (&s.appearance.image, None), (&s.pose.image, None), cfg.k)
                .map_err(|e| CoreError::invalid(format!("sample {}: {e}", s.meta.id)))
        })
        .collect()
}

pub fn keypoint_cache_dir(root: &Path, backend: &dyn DescriptorBackend, k: usize) -> PathBuf {
    root.join("keypoints").join(format!("{}-k{k}", backend.name()))
}

/// Like [`compute_correspondences`], but reuses `keypoints/<backend>-k<k>/`
/// under the dataset root when present.
pub fn cached_correspondences(manifest: &Manifest, samples: &[PairedSample], cfg: &TrainConfig) -> Result<Vec<Correspondences>> {
    let backend = cfg.backend();
    let dir = keypoint_cache_dir(&manifest.root, &*backend, cfg.k);
    let paths: Vec<PathBuf> = samples.iter().map(|s| dir.join(format!("{:05}.json", s.meta.id))).collect();
    if paths.iter().all(|p| p.is_file()) {
        let loaded = paths.iter().map(|p| load_keypoints(p)).collect::<Result<Vec<_>>>();
        match loaded {
            Ok(c) if c.iter().all(|c| c.k() == cfg.k) => return Ok(c),
            _ => log::warn!("ignoring stale keypoint cache in {}", dir.display()),
        }
    }
    let corrs = compute_correspondences(samples, cfg)?;
    fs::create_dir_all(&dir).map_err(|e| CoreError::io(&dir, e))?;
    for (c, p) in corrs.iter().zip(&paths) {
        save_keypoints(c, p)?;
    }
    Ok(corrs)
}

pub fn prepare(samples: &[PairedSample], corrs: &[Correspondences], cfg: &TrainConfig) -> Result<Vec<TrainSample>> {
    if samples.len() != corrs.len() {
        return Err(CoreError::invalid("one correspondence set per sample is required"));
    }
    let sigma = cfg.sigma_px();
    samples
        .iter()
        .zip(corrs)
        .map(|(s, c)| {
            let (_, h, w) = s.appearance.image.chw()?;
            if h != cfg.resolution || w != cfg.resolution {
                return Err(CoreError::invalid(format!(
                    "sample {} is {h}×{w} but the config expects {1}×{1}",
                    s.meta.id, cfg.resolution
                )));
            }
            prepare_one(
                s.meta.clone(),
                &s.appearance.image,
                &s.pose.image,
                &s.ground_truth.image,
                c,
                sigma,
                cfg.ablate_pose_input,
            )
        })
        .collect()
}

pub fn prepare_one(
    meta: SampleMeta,
    appearance: &ImageTensor,
    pose: &ImageTensor,
    gt: &ImageTensor,
    corr: &Correspondences,
    sigma: f64,
    drop_pose: bool,
) -> Result<TrainSample> {
    let (_, h, w) = appearance.chw()?;
    let mut input = warp_input_for(appearance, pose, corr, sigma)?;
    if drop_pose {
        drop_pose_image(&mut input, corr.k())?;
    }
    Ok(TrainSample {
        meta,
        appearance: appearance.clone(),
        pose: pose.clone(),
        gt: gt.clone(),
        heat_a: encode_heatmaps(&corr.a.points, h, w, sigma)?,
        heat_p: encode_heatmaps(&corr.p.points, h, w, sigma)?,
        tps_flow: tps_flow_for(corr, h, w)?,
        corr: corr.clone(),
        input,
    })
}

/// Loads every sample of a manifest and prepares it, using the keypoint cache.
pub fn load_prepared(manifest: &Manifest, cfg: &TrainConfig) -> Result<Vec<TrainSample>> {
    let samples = manifest.load_all()?;
    let corrs = cached_correspondences(manifest, &samples, cfg)?;
    prepare(&samples, &corrs, cfg)
}

/// Prepared train and held-out samples.
#[derive(Clone, Debug)]
pub struct DataSplit {
    pub train: Vec<TrainSample>,
    pub test: Vec<TrainSample>,
}

/// Model-pair split of `samples` (see [`split_by_model_pair`]) with
/// precomputed keypoints. With `cfg.role_augment` the training half also
/// gets the three other role assignments of each quadruple; their keypoints
/// are matched afresh.
pub fn split_prepared(samples: &[PairedSample], corrs: &[Correspondences], cfg: &TrainConfig) -> Result<DataSplit> {
    let all = prepare(samples, corrs, cfg)?;
    let metas: Vec<SampleMeta> = samples.iter().map(|s| s.meta.clone()).collect();
    let (tr, te) = split_by_model_pair(&metas, cfg.test_fraction, cfg.seed);
    let mut train: Vec<TrainSample> = tr.iter().map(|&i| all[i].clone()).collect();
    if cfg.role_augment {
        let extra: Vec<PairedSample> = tr.iter().flat_map(|&i| role_variants(&samples[i]).into_iter().skip(1)).collect();
        train.extend(prepare(&extra, &compute_correspondences(&extra, cfg)?, cfg)?);
    }
    Ok(DataSplit {
        train,
        test: te.iter().map(|&i| all[i].clone()).collect(),
    })
}

/// [`split_prepared`] over a manifest, using the keypoint cache.
pub fn load_split(manifest: &Manifest, cfg: &TrainConfig) -> Result<DataSplit> {
    let samples = manifest.load_all()?;
    let corrs = cached_correspondences(manifest, &samples, cfg)?;
    split_prepared(&samples, &corrs, cfg)
}

/// Networks, the fixed feature extractor and all parameters.
#[derive(Clone, Debug)]
pub struct Pipeline {
    pub flow: FlowNet,
    pub gen: Generator,
    pub disc: Discriminator,
    pub fx: FeatureExtractor,
    pub params: ParamStore,
}

/// Pipeline outputs for one sample.
#[derive(Clone, Debug)]
pub struct Inference {
    pub flow: Tensor<f32>,
    pub warped: ImageTensor,
    pub generated: ImageTensor,
}

impl Pipeline {
    pub fn new(cfg: &TrainConfig) -> Self {
        let flow = FlowNet::new(cfg.k, cfg.warp_width);
        let gen = Generator::new(cfg.k, cfg.gen_width);
        let disc = Discriminator::new(cfg.k, cfg.disc_width);
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        flow.init(&mut params, &mut rng);
        gen.init(&mut params, &mut rng);
        disc.init(&mut params, &mut rng);
        Self {
            flow,
            gen,
            disc,
            fx: FeatureExtractor::standard(cfg.extractor_seed),
            params,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut p = Self::new(&ck.meta.config);
        for (name, t) in p.params.iter() {
            match ck.params.get(name) {
                Some(v) if v.shape() == t.shape() => {}
                _ => return Err(CoreError::invalid(format!("checkpoint lacks parameter `{name}` or its shape differs"))),
            }
        }
        p.params = ck.params.clone();
        Ok(p)
    }

    pub fn infer(&self, s: &TrainSample) -> Result<Inference> {
        let flow = self.flow.predict(&self.params, &s.input)?;
        let warped = warp_image(&s.appearance, &flow)?;
        let generated = self.gen.generate(&self.params, &warped, &s.heat_a, &s.heat_p, None)?;
        if !generated.all_finite() {
            return Err(CoreError::invalid("generator produced non-finite values"));
        }
        Ok(Inference { flow, warped, generated })
    }

    /// Inference on a bare image pair: keypoints are matched with the
    /// configured backend and the warp input is built from them.
    pub fn infer_images(&self, cfg: &TrainConfig, appearance: &ImageTensor, pose: &ImageTensor) -> Result<(Correspondences, Inference)> {
        let (_, h, w) = appearance.chw()?;
        if pose.chw()? != (3, h, w) {
            return Err(CoreError::invalid("appearance and pose images differ in size"));
        }
        if h != cfg.resolution || w != cfg.resolution {
            return Err(CoreError::invalid(format!(
                "images are {h}×{w} but the model expects {0}×{0}",
                cfg.resolution
            )));
        }
        let corr = match_images(&*cfg.backend(), (appearance, None), (pose, None), cfg.k)?;
        let sigma = cfg.sigma_px();
        let mut input = warp_input_for(appearance, pose, &corr, sigma)?;
        if cfg.ablate_pose_input {
            drop_pose_image(&mut input, corr.k())?;
        }
        let flow = self.flow.predict(&self.params, &input)?;
        let warped = warp_image(appearance, &flow)?;
        let heat_a = encode_heatmaps(&corr.a.points, h, w, sigma)?;
        let heat_p = encode_heatmaps(&corr.p.points, h, w, sigma)?;
        let generated = self.gen.generate(&self.params, &warped, &heat_a, &heat_p, None)?;
        if !generated.all_finite() {
            return Err(CoreError::invalid("generator produced non-finite values"));
        }
        Ok((corr, Inference { flow, warped, generated }))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Warp,
    Gen,
    E2e,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::Warp, Phase::Gen, Phase::E2e];

    fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Phase::Warp => "warp",
            Phase::Gen => "gen",
            Phase::E2e => "e2e",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// Decimal `u128`.
    pub word_pos: String,
}

impl RngState {
    fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    fn restore(&self) -> Result<ChaCha8Rng> {
        let pos: u128 = self.word_pos.parse().map_err(|_| CoreError::invalid("bad rng word position"))?;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;
pub const LOG_FILE: &str = "train_log.csv";
pub const LATEST: &str = "latest.ckpt";
const OPT_NAMES: [&str; 3] = ["warp", "gen", "disc"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub version: u32,
    /// Phase of the most recent completed epoch.
    pub phase: Phase,
    pub epoch: usize,
    /// Completed epochs per phase.
    pub completed: [usize; 3],
    pub step: u64,
    pub rng: RngState,
    pub adam_t: [u64; 3],
    pub config: TrainConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamStore,
    pub optimizers: [Adam; 3],
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut tensors = BTreeMap::new();
        for (k, v) in self.params.iter() {
            tensors.insert(format!("param/{k}"), v.clone());
        }
        for (opt, name) in self.optimizers.iter().zip(OPT_NAMES) {
            for (k, v) in &opt.m {
                tensors.insert(format!("adam/{name}/m/{k}"), v.clone());
            }
            for (k, v) in &opt.v {
                tensors.insert(format!("adam/{name}/v/{k}"), v.clone());
            }
        }
        let metadata = serde_json::to_string(&self.meta).expect("checkpoint metadata serializes");
        Archive { metadata, tensors }.to_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let archive = Archive::from_bytes(bytes)?;
        let meta: CheckpointMeta = serde_json::from_str(&archive.metadata).map_err(|e| CoreError::invalid(format!("checkpoint metadata: {e}")))?;
        if meta.version != CHECKPOINT_VERSION {
            return Err(CoreError::invalid(format!("unsupported checkpoint version {}", meta.version)));
        }
        meta.config.validate()?;
        let c = &meta.config;
        let lr = c.lr as f32;
        let mut optimizers = [0, 1, 2].map(|i| {
            let mut a = Adam::new(lr, c.adam_beta1 as f32, c.adam_beta2 as f32);
            a.t = meta.adam_t[i];
            a
        });
        let mut params = ParamStore::new();
        for (k, v) in archive.tensors {
            if let Some(name) = k.strip_prefix("param/") {
                params.insert(name, v);
                continue;
            }
            let rest = k
                .strip_prefix("adam/")
                .ok_or_else(|| CoreError::invalid(format!("unexpected tensor `{k}` in checkpoint")))?;
            let (opt, rest) = rest
                .split_once('/')
                .ok_or_else(|| CoreError::invalid(format!("bad optimizer key `{k}`")))?;
            let i = OPT_NAMES
                .iter()
                .position(|n| *n == opt)
                .ok_or_else(|| CoreError::invalid(format!("unknown optimizer `{opt}`")))?;
            match rest.split_once('/') {
                Some(("m", name)) => optimizers[i].m.insert(name.to_string(), v),
                Some(("v", name)) => optimizers[i].v.insert(name.to_string(), v),
                _ => return Err(CoreError::invalid(format!("bad optimizer key `{k}`"))),
            };
        }
        Ok(Self { meta, params, optimizers })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| CoreError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| CoreError::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| CoreError::format(path, e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub name: String,
    pub value: f64,
}

pub fn log_to_csv(rows: &[LogRow]) -> String {
    let mut s = String::from("step,loss_name,value\n");
    for r in rows {
        s.push_str(&format!("{},{},{:e}\n", r.step, r.name, r.value));
    }
    s
}

/// Inverse of [`log_to_csv`]; values round-trip exactly.
pub fn log_from_csv(text: &str) -> Result<Vec<LogRow>> {
    let mut lines = text.lines();
    if lines.next() != Some("step,loss_name,value") {
        return Err(CoreError::invalid("training log lacks its header"));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let bad = || CoreError::invalid(format!("training log line {}: `{line}`", i + 2));
            let mut f = line.splitn(3, ',');
            let (Some(step), Some(name), Some(value)) = (f.next(), f.next(), f.next()) else {
                return Err(bad());
            };
            Ok(LogRow {
                step: step.parse().map_err(|_| bad())?,
                name: name.to_string(),
                value: value.parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

/// Owns the pipeline, optimizers and rng for one run.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub pipeline: Pipeline,
    data: Vec<TrainSample>,
    rng: ChaCha8Rng,
    optimizers: [Adam; 3],
    completed: [usize; 3],
    step: u64,
    pub log: Vec<LogRow>,
    run_dir: Option<PathBuf>,
    last_good: Option<PathBuf>,
}

type GradMap = BTreeMap<String, Tensor<f32>>;

fn mean_into(sums: &mut BTreeMap<String, f64>, values: Vec<(String, f64)>) {
    for (k, v) in values {
        *sums.entry(k).or_insert(0.0) += v;
    }
}

impl Trainer {
    /// Fresh run on already prepared training samples.
    pub fn new(cfg: TrainConfig, data: Vec<TrainSample>) -> Result<Self> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(CoreError::invalid("no training samples"));
        }
        let lr = cfg.lr as f32;
        let optimizers = [0, 1, 2].map(|_| Adam::new(lr, cfg.adam_beta1 as f32, cfg.adam_beta2 as f32));
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        Ok(Self {
            pipeline: Pipeline::new(&cfg),
            cfg,
            data,
            rng,
            optimizers,
            completed: [0; 3],
            step: 0,
            log: Vec::new(),
            run_dir: None,
            last_good: None,
        })
    }

    /// Continues a run from a checkpoint. The log starts empty.
    pub fn resume(ck: &Checkpoint, data: Vec<TrainSample>) -> Result<Self> {
        let mut t = Self::new(ck.meta.config.clone(), data)?;
        t.pipeline = Pipeline::from_checkpoint(ck)?;
        t.optimizers = ck.optimizers.clone();
        t.completed = ck.meta.completed;
        t.step = ck.meta.step;
        t.rng = ck.meta.rng.restore()?;
        Ok(t)
    }

    /// Writes per-epoch checkpoints and the CSV log into `dir`.
    pub fn with_run_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.run_dir = Some(dir.into());
        self
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn completed(&self) -> [usize; 3] {
        self.completed
    }

    pub fn data(&self) -> &[TrainSample] {
        &self.data
    }

    pub fn checkpoint(&self, phase: Phase) -> Checkpoint {
        Checkpoint {
            meta: CheckpointMeta {
                version: CHECKPOINT_VERSION,
                phase,
                epoch: self.completed[phase.index()],
                completed: self.completed,
                step: self.step,
                rng: RngState::capture(&self.rng),
                adam_t: [0, 1, 2].map(|i| self.optimizers[i].t),
                config: self.cfg.clone(),
            },
            params: self.pipeline.params.clone(),
            optimizers: self.optimizers.clone(),
        }
    }

    fn record(&mut self, sums: BTreeMap<String, f64>, n: usize) {
        for (name, v) in sums {
            self.log.push(LogRow {
                step: self.step,
                name,
                value: v / n as f64,
            });
        }
    }

    fn guard(&self, what: &str, phase: Phase, value: f64) -> Result<()> {
        if value.is_finite() {
            return Ok(());
        }
        Err(CoreError::NonFinite {
            what: what.to_string(),
            phase: phase.name().to_string(),
            step: self.step,
            last_good: self
                .last_good
                .as_ref()
                .map_or_else(|| "none (initial state)".to_string(), |p| p.display().to_string()),
        })
    }

    fn apply(&mut self, opt: usize, mut grads: GradMap, n: usize, phase: Phase) -> Result<()> {
        let inv = 1.0 / n as f32;
        for g in grads.values_mut() {
            g.scale_assign(inv);
            if !g.all_finite() {
                return self.guard("gradient", phase, f64::NAN);
            }
        }
        self.optimizers[opt].step(&mut self.pipeline.params, &grads)?;
        Ok(())
    }

    fn batches(&mut self, size: usize) -> Vec<Vec<usize>> {
        let mut idx: Vec<usize> = (0..self.data.len()).collect();
        idx.shuffle(&mut self.rng);
        idx.chunks(size).map(<[usize]>::to_vec).collect()
    }

    fn flow_decay(&self) -> f64 {
        self.cfg.flow_decay.powi((self.completed[0] + self.completed[2]) as i32)
    }

    /// Records the warp forward pass and its loss on `tape`; returns the loss
    /// and the final warped image.
    fn warp_forward(&self, tape: &mut Tape<f32>, p: &repose_tensor::BoundParams, s: &TrainSample) -> Result<(crate::losses::Composite, Var)> {
        let input = tape.constant(s.input.clone());
        let pyr = self.pipeline.flow.forward(tape, p, input)?;
        let image = tape.constant(s.appearance.clone());
        let gt = tape.constant(s.gt.clone());
        let tps = tape.constant(s.tps_flow.clone());
        let mut levels = Vec::with_capacity(LEVELS);
        let mut final_warp = None;
        for (l, &flow) in pyr.upsampled.iter().enumerate() {
            let full = tape.warp(image, flow)?;
            if l == LEVELS - 1 {
                final_warp = Some(full);
            }
            let (mut warped, mut target) = (full, gt);
            for _ in l..LEVELS - 1 {
                warped = tape.avgpool2x(warped)?;
                target = tape.avgpool2x(target)?;
            }
            levels.push(WarpLevel { warped, target, flow });
        }
        let loss = warp_loss(tape, &self.pipeline.fx, &levels, tps, &self.cfg.weights, self.flow_decay())?;
        Ok((loss, final_warp.expect("at least one level")))
    }

    fn warp_epoch(&mut self) -> Result<()> {
        for batch in self.batches(self.cfg.warp_batch) {
            let mut grads = GradMap::new();
            let mut sums = BTreeMap::new();
            for &i in &batch {
                let mut tape = Tape::<f32>::new();
                let p = self.pipeline.params.bind(&mut tape, WARP_PREFIX, true);
                let (loss, _) = self.warp_forward(&mut tape, &p, &self.data[i])?;
                let total = tape.scalar(loss.total) as f64;
                self.guard("warp loss", Phase::Warp, total)?;
                let mut vals = loss.values(&tape);
                vals.push(("wrp_total".into(), total));
                mean_into(&mut sums, vals);
                accumulate_grads(&mut grads, p.gradients(&tape.backward(loss.total)));
            }
            self.apply(0, grads, batch.len(), Phase::Warp)?;
            self.step += 1;
            self.record(sums, batch.len());
        }
        Ok(())
    }

    /// One discriminator update on real ground truths and detached fakes.
    fn disc_update(&mut self, batch: &[usize], fakes: &[ImageTensor], phase: Phase, sums: &mut BTreeMap<String, f64>) -> Result<()> {
        let mut grads = GradMap::new();
        for (&i, fake) in batch.iter().zip(fakes) {
            let s = &self.data[i];
            let mut tape = Tape::<f32>::new();
            let p = self.pipeline.params.bind(&mut tape, DISC_PREFIX, true);
            let hp = tape.constant(s.heat_p.clone());
            let real = tape.constant(s.gt.clone());
            let fake = tape.constant(fake.clone());
            let rs = self.pipeline.disc.forward(&mut tape, &p, real, hp)?;
            let fs = self.pipeline.disc.forward(&mut tape, &p, fake, hp)?;
            let loss = lsgan_d(&mut tape, rs, fs)?;
            let v = tape.scalar(loss) as f64;
            self.guard("discriminator loss", phase, v)?;
            mean_into(sums, vec![("disc".into(), v)]);
            accumulate_grads(&mut grads, p.gradients(&tape.backward(loss)));
        }
        self.apply(2, grads, batch.len(), phase)
    }

    fn gen_epoch(&mut self, warped: &[ImageTensor]) -> Result<()> {
        let adv = self.cfg.weights.alpha_adv > 0.0;
        for batch in self.batches(self.cfg.gen_batch) {
            let mut grads = GradMap::new();
            let mut sums = BTreeMap::new();
            let mut fakes = Vec::with_capacity(batch.len());
            for &i in &batch {
                let s = &self.data[i];
                let noise = self.rng.next_u64();
                let mut tape = Tape::<f32>::new();
                let p = self.pipeline.params.bind(&mut tape, GEN_PREFIX, true);
                let d = self.pipeline.params.bind(&mut tape, DISC_PREFIX, false);
                let w = tape.constant(warped[i].clone());
                let ha = tape.constant(s.heat_a.clone());
                let hp = tape.constant(s.heat_p.clone());
                let gt = tape.constant(s.gt.clone());
                let out = self.pipeline.gen.forward(&mut tape, &p, w, ha, hp, Some(noise))?;
                let scores = if adv {
                    Some(self.pipeline.disc.forward(&mut tape, &d, out, hp)?)
                } else {
                    None
                };
                let loss = gen_loss(&mut tape, &self.pipeline.fx, out, gt, scores, &self.cfg.weights)?;
                let total = tape.scalar(loss.total) as f64;
                self.guard("generator loss", Phase::Gen, total)?;
                let mut vals = loss.values(&tape);
                vals.push(("gen_total".into(), total));
                mean_into(&mut sums, vals);
                fakes.push(tape.value(out).clone());
                accumulate_grads(&mut grads, p.gradients(&tape.backward(loss.total)));
            }
            self.apply(1, grads, batch.len(), Phase::Gen)?;
            if adv {
                self.disc_update(&batch, &fakes, Phase::Gen, &mut sums)?;
            }
            self.step += 1;
            self.record(sums, batch.len());
        }
        Ok(())
    }

    fn e2e_epoch(&mut self) -> Result<()> {
        let adv = self.cfg.weights.alpha_adv > 0.0;
        let (a1, a2) = (self.cfg.weights.alpha1, self.cfg.weights.alpha2);
        for batch in self.batches(self.cfg.gen_batch) {
            let mut warp_grads = GradMap::new();
            let mut gen_grads = GradMap::new();
            let mut sums = BTreeMap::new();
            let mut fakes = Vec::with_capacity(batch.len());
            for &i in &batch {
                let noise = self.rng.next_u64();
                let s = &self.data[i];
                let mut tape = Tape::<f32>::new();
                let pw = self.pipeline.params.bind(&mut tape, WARP_PREFIX, true);
                let pg = self.pipeline.params.bind(&mut tape, GEN_PREFIX, true);
                let d = self.pipeline.params.bind(&mut tape, DISC_PREFIX, false);
                let (lw, warped) = self.warp_forward(&mut tape, &pw, s)?;
                let ha = tape.constant(s.heat_a.clone());
                let hp = tape.constant(s.heat_p.clone());
                let gt = tape.constant(s.gt.clone());
                let out = self.pipeline.gen.forward(&mut tape, &pg, warped, ha, hp, Some(noise))?;
                let scores = if adv {
                    Some(self.pipeline.disc.forward(&mut tape, &d, out, hp)?)
                } else {
                    None
                };
                let lg = gen_loss(&mut tape, &self.pipeline.fx, out, gt, scores, &self.cfg.weights)?;
                let total = total_loss(&mut tape, lw.total, lg.total, a1, a2)?;
                let tv = tape.scalar(total) as f64;
                self.guard("end-to-end loss", Phase::E2e, tv)?;
                let mut vals = lw.values(&tape);
                vals.extend(lg.values(&tape));
                vals.push(("wrp_total".into(), tape.scalar(lw.total) as f64));
                vals.push(("gen_total".into(), tape.scalar(lg.total) as f64));
                vals.push(("e2e_total".into(), tv));
                mean_into(&mut sums, vals);
                fakes.push(tape.value(out).clone());
                let g = tape.backward(total);
                accumulate_grads(&mut warp_grads, pw.gradients(&g));
                accumulate_grads(&mut gen_grads, pg.gradients(&g));
            }
            self.apply(0, warp_grads, batch.len(), Phase::E2e)?;
            self.apply(1, gen_grads, batch.len(), Phase::E2e)?;
            if adv {
                self.disc_update(&batch, &fakes, Phase::E2e, &mut sums)?;
            }
            self.step += 1;
            self.record(sums, batch.len());
        }
        Ok(())
    }

    fn end_epoch(&mut self, phase: Phase) -> Result<()> {
        self.completed[phase.index()] += 1;
        let total = self.log.iter().rev().find(|r| r.name.ends_with("_total")).map_or(f64::NAN, |r| r.value);
        let planned = [self.cfg.warp_epochs, self.cfg.gen_epochs, self.cfg.e2e_epochs][phase.index()];
        log::info!(
            "{} epoch {}/{planned}, step {}, loss {total:.5}",
            phase.name(),
            self.completed[phase.index()],
            self.step
        );
        if !self.pipeline.params.iter().all(|(_, t)| t.all_finite()) {
            return self.guard("parameters", phase, f64::NAN);
        }
        let Some(dir) = self.run_dir.clone() else {
            return Ok(());
        };
        let ck = self.checkpoint(phase);
        let path = dir.join(format!("{}-{:03}.ckpt", phase.name(), self.completed[phase.index()]));
        ck.save(&path)?;
        ck.save(&dir.join(LATEST))?;
        let log = dir.join(LOG_FILE);
        fs::write(&log, log_to_csv(&self.log)).map_err(|e| CoreError::io(&log, e))?;
        self.last_good = Some(path);
        Ok(())
    }

    /// Warp images from the current (frozen) flow network.
    pub fn warped_images(&self) -> Result<Vec<ImageTensor>> {
        self.data
            .iter()
            .map(|s| warp_image(&s.appearance, &self.pipeline.flow.predict(&self.pipeline.params, &s.input)?))
            .collect()
    }

    /// Runs the remaining warp-only epochs.
    pub fn train_warp(&mut self) -> Result<()> {
        while self.completed[0] < self.cfg.warp_epochs {
            self.warp_epoch()?;
            self.end_epoch(Phase::Warp)?;
        }
        Ok(())
    }

    /// Runs the remaining generator epochs; warp parameters are never bound
    /// as trainable here.
    pub fn train_gen(&mut self) -> Result<()> {
        if self.completed[1] >= self.cfg.gen_epochs {
            return Ok(());
        }
        let warped = self.warped_images()?;
        while self.completed[1] < self.cfg.gen_epochs {
            self.gen_epoch(&warped)?;
            self.end_epoch(Phase::Gen)?;
        }
        Ok(())
    }

    pub fn finetune_e2e(&mut self) -> Result<()> {
        while self.completed[2] < self.cfg.e2e_epochs {
            self.e2e_epoch()?;
            self.end_epoch(Phase::E2e)?;
        }
        Ok(())
    }

    /// All three phases, calling `after` once each phase is done.
    pub fn run_with(&mut self, mut after: impl FnMut(Phase, &Trainer) -> Result<()>) -> Result<()> {
        self.train_warp()?;
        after(Phase::Warp, self)?;
        self.train_gen()?;
        after(Phase::Gen, self)?;
        self.finetune_e2e()?;
        after(Phase::E2e, self)
    }

    pub fn run(&mut self) -> Result<()> {
        self.run_with(|_, _| Ok(()))
    }

    /// Draws from the run's rng; exposed so callers can derive sub-seeds.
    pub fn next_seed(&mut self) -> u64 {
        self.rng.random()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_roundtrip_and_validation() {
        let cfg = TrainConfig::default();
        let back = TrainConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        let c = TrainConfig::from_toml("k = 15\nbeta4 = 2.0\nwarp_epochs = 0").unwrap();
        assert_eq!((c.k, c.weights.beta4, c.warp_epochs), (15, 2.0, 0));
        assert!(TrainConfig::from_toml("warp_batch = 0").is_err());
        assert!(TrainConfig::from_toml("lr = -1.0").is_err());
        assert!(TrainConfig::from_toml("nonsense = 1").is_err());
    }

    #[test]
    fn rng_state_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        rng.set_stream(1);
        let _: u64 = rng.random();
        let st = RngState::capture(&rng);
        let mut back = st.restore().unwrap();
        assert_eq!(rng.next_u64(), back.next_u64());
    }
}
