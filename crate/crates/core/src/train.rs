//! Experiment orchestration: the two training steps, evaluation under
//! perturbations, and the files a run leaves behind.
//!
//! Step 1 trains the FCNN on augmented renders with the complement network
//! held at zero. Step 2 fine-tunes the FCNN on heavily translated and
//! occluded renders while training the complement network on its own loss,
//! with the complement input cut off from the FCNN graph.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::exec::Exec;
use crate::extract::{decode_on_tape, ExtractError, InitialEstimate};
use crate::geom;
use crate::grad::{
    load_checkpoint, save_checkpoint, GradError, ParamSet, RmsProp, RmsPropConfig, Tape, Tensor,
};
use crate::loss::{l1_on_tape, total_loss, LossBreakdown, LossConfig, MapTargets, Supervision, CSV_HEADER};
use crate::mapcodec::MapSet;
use crate::metrics::{write_reports_csv, EvalReport, MetricsError};
use crate::net::{fcnn_forward, fcnn_init, image_tensor, pc_complement, pc_complement_on_tape, pc_init, pc_zero, FcnnConfig, PcError};
use crate::perturb::{self, item_seed, rng_for, BBox, OcclusionSpec, PerturbKind, PerturbSpec};
use crate::skeleton::{LimbLengths, LimbTopology, Pose3D, SkeletonError, NUM_LIMBS};
use crate::synthdata::{
    generate, read_dataset, Camera, DataConfig, DataError, RenderStyle, Sample, SceneConfig, PALETTE,
};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("step {step}: complement loss reached FCNN parameter `{param}`")]
    Detachment { step: usize, param: String },
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Skeleton(#[from] SkeletonError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Pc(#[from] PcError),
    #[error(transparent)]
    Extract(#[from] ExtractError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Toml(#[from] toml::de::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

/// Step-1 augmentation ranges, all applied to the renderer inputs so the
/// targets stay exact.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Augment {
    /// In-plane rotation, uniform on `[-r, r]` degrees.
    pub rotation_deg: f64,
    /// Probability of a left/right mirror with joint labels swapped.
    pub flip_prob: f64,
    /// Camera scale factor, uniform on `[1 - s, 1 + s]`.
    pub scale: f64,
    /// Root offset per axis as a fraction of the image side.
    pub translation: f64,
    /// Limb brightness factor, uniform on `[1 - c, 1 + c]`.
    pub color: f64,
}

impl Default for Augment {
    fn default() -> Self {
        Self {
            rotation_deg: 30.0,
            flip_prob: 0.5,
            scale: 0.25,
            translation: 0.2,
            color: 0.2,
        }
    }
}

impl Augment {
    pub fn none() -> Self {
        Self {
            rotation_deg: 0.0,
            flip_prob: 0.0,
            scale: 0.0,
            translation: 0.0,
            color: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub lr: f64,
    pub alpha: f64,
    pub eps: f64,
    /// The learning rate is multiplied by `decay_factor` at the start of
    /// this epoch.
    pub decay_epoch: Option<usize>,
    pub decay_factor: f64,
    pub batch_size: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            alpha: 0.99,
            eps: 1e-8,
            decay_epoch: None,
            decay_factor: 0.1,
            batch_size: 16,
        }
    }
}

impl OptimConfig {
    fn rmsprop(&self) -> RmsPropConfig {
        RmsPropConfig {
            lr: self.lr,
            alpha: self.alpha,
            eps: self.eps,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Step1Config {
    pub epochs: usize,
    pub augment: Augment,
    pub optim: OptimConfig,
}

impl Default for Step1Config {
    fn default() -> Self {
        Self {
            epochs: 200,
            augment: Augment::default(),
            optim: OptimConfig {
                decay_epoch: Some(150),
                ..OptimConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Step2Config {
    pub epochs: usize,
    /// Root offset per axis as a fraction of the image side.
    pub translation: f64,
    /// Chance that a training render gets occluders.
    pub occlude_prob: f64,
    pub occlusion: OcclusionSpec,
    pub optim: OptimConfig,
    /// Complement-network learning rate; `optim.lr` when absent. Decays
    /// with the same schedule.
    pub pc_lr: Option<f64>,
}

impl Default for Step2Config {
    fn default() -> Self {
        Self {
            epochs: 50,
            translation: 0.5,
            occlude_prob: 0.5,
            occlusion: OcclusionSpec::default(),
            optim: OptimConfig::default(),
            pc_lr: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Size and seed of the held-out set.
    pub count: usize,
    pub data_seed: u64,
    /// Perturbation seeds are `perturb_seed + r` for `r < repeats`.
    pub perturb_seed: u64,
    pub repeats: usize,
    pub fill: u8,
    pub conditions: Vec<PerturbKind>,
    /// `(sigma_c, sigma_s)` rows of the box-noise table.
    pub bbox_grid: Vec<(f64, f64)>,
    /// Number of overlay images written per evaluation.
    pub overlays: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            count: 200,
            data_seed: 1_000_003,
            perturb_seed: 77,
            repeats: 5,
            fill: 0,
            conditions: vec![
                PerturbKind::None,
                PerturbKind::Occlude(OcclusionSpec::default()),
                PerturbKind::Translate { tau: 0.25 },
                PerturbKind::Translate { tau: 0.4 },
                PerturbKind::EraseRect,
                PerturbKind::EraseCircle,
                PerturbKind::EraseEdge,
            ],
            bbox_grid: vec![
                (0.0, 0.0),
                (0.1, 0.0),
                (0.2, 0.0),
                (0.3, 0.0),
                (0.0, 0.1),
                (0.0, 0.2),
                (0.1, 0.1),
                (0.2, 0.2),
            ],
            overlays: 4,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Seeds initialisation, sample order and augmentation.
    pub seed: u64,
    /// Training set written by `gen-data`; generated from `data` if absent.
    pub dataset: Option<PathBuf>,
    pub data: DataConfig,
    pub fcnn: FcnnConfig,
    pub loss: LossConfig,
    pub step1: Step1Config,
    pub step2: Step2Config,
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, TrainError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        self.fcnn.validate()?;
        let scene = &self.data.scene;
        if self.fcnn.image_size != scene.image_size {
            return bad(format!("fcnn image size {} != scene image size {}", self.fcnn.image_size, scene.image_size));
        }
        if self.fcnn.map_size() != scene.map.width || scene.map.width != scene.map.height {
            return bad(format!("fcnn map size {} != scene map {:?}", self.fcnn.map_size(), scene.map.dims()));
        }
        if self.loss.stages != self.fcnn.stages {
            return bad(format!("loss has {} stages, fcnn {}", self.loss.stages, self.fcnn.stages));
        }
        if self.step2.translation < self.step1.augment.translation {
            return bad("step-2 translation range must contain the step-1 range".into());
        }
        for (name, o) in [("step1", &self.step1.optim), ("step2", &self.step2.optim)] {
            if o.batch_size == 0 || !(o.lr > 0.0) {
                return bad(format!("{name}: batch size and learning rate must be positive"));
            }
        }
        if self.step2.pc_lr.is_some_and(|lr| !(lr > 0.0)) {
            return bad("step2: complement learning rate must be positive".into());
        }
        for p in [self.data.frac_3d, self.step1.augment.flip_prob, self.step2.occlude_prob] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("probability {p} outside [0, 1]"));
            }
        }
        if self.eval.repeats == 0 || self.eval.count == 0 {
            return bad("evaluation needs at least one sample and one repeat".into());
        }
        Ok(())
    }
}

/// Training samples: the dataset file if configured, otherwise generated.
pub fn training_samples(cfg: &ExperimentConfig, exec: Exec) -> Result<Vec<Sample>, TrainError> {
    match &cfg.dataset {
        Some(path) => {
            let (header, samples) = read_dataset(path)?;
            let scene = &cfg.data.scene;
            if (header.image_w, header.map_w) != (scene.image_size, scene.map.width) {
                return Err(TrainError::Config(format!(
                    "dataset {} has image {} / map {}, config expects {} / {}",
                    path.display(),
                    header.image_w,
                    header.map_w,
                    scene.image_size,
                    scene.map.width
                )));
            }
            Ok(samples)
        }
        None => Ok(generate(&cfg.data, exec)?),
    }
}

pub fn heldout_samples(cfg: &ExperimentConfig, exec: Exec) -> Result<Vec<Sample>, TrainError> {
    let data = DataConfig {
        count: cfg.eval.count,
        seed: cfg.eval.data_seed,
        ..cfg.data
    };
    Ok(generate(&data, exec)?)
}

/// Left/right mirror: negate x and swap the twin joints.
pub fn mirror_pose(pose: &Pose3D, topo: &LimbTopology) -> Pose3D {
    let twin = topo.mirror_joints();
    Pose3D(std::array::from_fn(|j| {
        let p = pose.0[twin[j]];
        [-p[0], p[1], p[2]]
    }))
}

/// Rotation about the camera axis by `angle` radians.
pub fn rotate_pose(pose: &Pose3D, angle: f64) -> Pose3D {
    let (s, c) = angle.sin_cos();
    Pose3D(pose.0.map(|p| [c * p[0] - s * p[1], s * p[0] + c * p[1], p[2]]))
}

fn uniform(rng: &mut impl Rng, half: f64) -> f64 {
    if half > 0.0 {
        rng.gen_range(-half..=half)
    } else {
        0.0
    }
}

/// Re-renders a sample's pose with step-1 augmentation.
pub fn augment_sample(base: &Sample, scene: &SceneConfig, aug: &Augment, rng: &mut impl Rng) -> Result<Sample, TrainError> {
    let topo = LimbTopology::canonical();
    let mut pose = base.pose3d;
    if aug.flip_prob > 0.0 && rng.gen_bool(aug.flip_prob) {
        pose = mirror_pose(&pose, &topo);
    }
    pose = rotate_pose(&pose, uniform(rng, aug.rotation_deg).to_radians());
    let a = scene.image_size as f64;
    let mut cam = Camera::for_image(scene.image_size);
    cam.scale *= 1.0 + uniform(rng, aug.scale);
    cam.principal[0] += uniform(rng, aug.translation) * a;
    cam.principal[1] += uniform(rng, aug.translation) * a;
    let style = RenderStyle {
        brightness: 1.0 + uniform(rng, aug.color),
        ..scene.style()
    };
    Ok(scene.make_sample(&pose, &cam, &style, base.has_3d, &topo, rng)?)
}

/// A step-2 render: root offset up to `translation * a` per axis and, with
/// probability `occlude_prob`, occluders. Map targets under an occluder are
/// cleared, since nothing of the limb is visible there.
pub fn incomplete_sample(
    base: &Sample,
    scene: &SceneConfig,
    step2: &Step2Config,
    rng: &mut impl Rng,
) -> Result<(Sample, MapSet), TrainError> {
    let topo = LimbTopology::canonical();
    let a = scene.image_size as f64;
    let mut cam = Camera::for_image(scene.image_size);
    cam.principal[0] += uniform(rng, step2.translation) * a;
    cam.principal[1] += uniform(rng, step2.translation) * a;
    let mut sample = scene.make_sample(&base.pose3d, &cam, &scene.style(), base.has_3d, &topo, rng)?;
    let mut maps = sample.maps(&topo, &scene.map)?;
    if step2.occlude_prob > 0.0 && rng.gen_bool(step2.occlude_prob) {
        let (img, occluders, _) = perturb::occlude(&sample.image, &step2.occlusion, rng);
        sample.image = img;
        let s = scene.stride();
        for r in 0..maps.height {
            for c in 0..maps.width {
                let centre = crate::synthdata::map_to_image([c as f64, r as f64], s);
                if occluders.iter().any(|o| o.contains(centre)) {
                    clear_pixel(&mut maps, c, r);
                }
            }
        }
    }
    Ok((sample, maps))
}

fn clear_pixel(maps: &mut MapSet, c: usize, r: usize) {
    let plane = maps.plane();
    let px = r * maps.width + c;
    for limb in 0..NUM_LIMBS {
        maps.conf[limb * plane + px] = 0.0;
        for k in 0..2 {
            maps.orient2d[(limb * 2 + k) * plane + px] = 0.0;
        }
        for k in 0..3 {
            maps.orient3d[(limb * 3 + k) * plane + px] = 0.0;
        }
    }
}

/// Gradients and diagnostics of one training sample.
struct SampleOutput {
    fcnn_grads: Vec<Tensor>,
    pc_grads: Option<Vec<Tensor>>,
    breakdown: LossBreakdown,
    mpjpe: f64,
    /// Whether the detachment check ran (needs a 3D label).
    checked: bool,
    /// First FCNN parameter reached by the complement loss, if any.
    leak: Option<String>,
}

fn sample_step(
    fcnn: &ParamSet,
    pc: Option<&ParamSet>,
    cfg: &ExperimentConfig,
    image: &RgbImage,
    sup: &Supervision,
    gt: &Pose3D,
) -> Result<SampleOutput, TrainError> {
    let topo = LimbTopology::canonical();
    let lengths = LimbLengths::default();
    let tape = Tape::new();
    let fb = fcnn.bind(&tape, true);
    let maps = fcnn_forward(tape.constant(image_tensor(image)), &fb, &cfg.fcnn)?;
    let last = maps.last().expect("at least one stage");
    let est = decode_on_tape(last.conf, last.orient3d, &lengths, &topo)?;
    let mpjpe = crate::metrics::mpjpe(&Pose3D::from_flat(est.pose.value().data()), gt);
    let pb = pc.map(|p| p.bind(&tape, true));
    let comp = match &pb {
        Some(pb) => Some(pc_complement_on_tape(&tape, &est.to_estimate(), pb, &lengths, &topo)?.1),
        None => None,
    };
    let (loss, breakdown) = total_loss(&maps, Some(est.pose), comp, sup, &cfg.loss)?;
    // The complement loss on its own must leave every FCNN gradient empty.
    let mut leak = None;
    let checked = comp.is_some() && sup.pose.is_some();
    if let (Some(c), Some(pose)) = (comp, &sup.pose) {
        let only = tape.backward(l1_on_tape(c, pose)?)?;
        leak = fcnn
            .names()
            .iter()
            .zip(fb.vars())
            .find(|(_, &v)| only.get(v).is_some_and(|g| g.max_abs() != 0.0))
            .map(|(n, _)| n.clone());
    }
    let grads = tape.backward(loss)?;
    Ok(SampleOutput {
        fcnn_grads: fb.grads(&grads),
        pc_grads: pb.map(|pb| pb.grads(&grads)),
        breakdown,
        mpjpe,
        checked,
        leak,
    })
}

/// Per-epoch summary.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub steps: usize,
    pub lr: f64,
    pub loss: f64,
    /// Mean MPJPE of the initial estimate on this epoch's training renders.
    pub train_mpjpe: f64,
    pub breakdown: LossBreakdown,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochStats>,
    /// `(epoch, new lr)` for every schedule event.
    pub lr_events: Vec<(usize, f64)>,
    /// Samples on which detachment was checked.
    pub detachment_checks: usize,
}

impl TrainLog {
    pub fn write_loss_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(CSV_HEADER)?;
        for e in &self.epochs {
            e.breakdown.write_csv(&mut w, e.steps, e.epoch)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_epoch_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["epoch", "steps", "lr", "loss", "train_mpjpe"])?;
        for e in &self.epochs {
            w.write_record([
                e.epoch.to_string(),
                e.steps.to_string(),
                format!("{:e}", e.lr),
                format!("{:.9}", e.loss),
                format!("{:.6}", e.train_mpjpe),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Phase {
    One,
    Two,
}

/// Seed for epoch `epoch` of a phase; items within it use [`item_seed`].
fn epoch_seed(seed: u64, phase: Phase, epoch: usize) -> u64 {
    let tag = match phase {
        Phase::One => 1u64,
        Phase::Two => 2,
    };
    seed ^ (tag << 56) ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn sum_grads(acc: &mut Option<Vec<Tensor>>, g: Vec<Tensor>) {
    match acc {
        Some(a) => a.iter_mut().zip(&g).for_each(|(x, y)| x.add_assign(y)),
        None => *acc = Some(g),
    }
}

fn train_loop(
    cfg: &ExperimentConfig,
    phase: Phase,
    samples: &[Sample],
    fcnn: &mut ParamSet,
    mut pc: Option<&mut ParamSet>,
    exec: Exec,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainLog, TrainError> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(TrainError::Config("no training samples".into()));
    }
    let (epochs, optim) = match phase {
        Phase::One => (cfg.step1.epochs, cfg.step1.optim),
        Phase::Two => (cfg.step2.epochs, cfg.step2.optim),
    };
    let topo = LimbTopology::canonical();
    let scene = &cfg.data.scene;
    let mut fcnn_opt = RmsProp::new(optim.rmsprop(), fcnn.tensors());
    let mut pc_lr = cfg.step2.pc_lr.unwrap_or(optim.lr);
    let mut pc_opt = pc
        .as_ref()
        .map(|p| RmsProp::new(RmsPropConfig { lr: pc_lr, ..optim.rmsprop() }, p.tensors()));
    let mut log = TrainLog::default();
    let mut steps = 0;
    let mut lr = optim.lr;
    for epoch in 0..epochs {
        if optim.decay_epoch == Some(epoch) {
            lr *= optim.decay_factor;
            pc_lr *= optim.decay_factor;
            fcnn_opt.set_lr(lr);
            if let Some(o) = &mut pc_opt {
                o.set_lr(pc_lr);
            }
            log.lr_events.push((epoch, lr));
        }
        let eseed = epoch_seed(cfg.seed, phase, epoch);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut rng_for(eseed));
        let mut total = LossBreakdown::default();
        let mut mpjpe_sum = 0.0;
        for batch in order.chunks(optim.batch_size) {
            let fcnn_ref: &ParamSet = fcnn;
            let pc_ref: Option<&ParamSet> = pc.as_deref();
            let outputs = exec.map(batch, |&i| -> Result<SampleOutput, TrainError> {
                let mut rng = rng_for(item_seed(eseed, i));
                let (sample, maps) = match phase {
                    Phase::One => {
                        let s = augment_sample(&samples[i], scene, &cfg.step1.augment, &mut rng)?;
                        let m = s.maps(&topo, &scene.map)?;
                        (s, m)
                    }
                    Phase::Two => incomplete_sample(&samples[i], scene, &cfg.step2, &mut rng)?,
                };
                let sup = Supervision {
                    maps: MapTargets::from_maps(&maps),
                    pose: sample.has_3d.then_some(sample.pose3d),
                };
                sample_step(fcnn_ref, pc_ref, cfg, &sample.image, &sup, &sample.pose3d)
            });
            let mut fcnn_sum = None;
            let mut pc_sum = None;
            for out in outputs {
                let out = out?;
                log.detachment_checks += out.checked as usize;
                if let Some(param) = out.leak {
                    return Err(TrainError::Detachment { step: steps, param });
                }
                sum_grads(&mut fcnn_sum, out.fcnn_grads);
                if let Some(g) = out.pc_grads {
                    sum_grads(&mut pc_sum, g);
                }
                total.accumulate(&out.breakdown);
                mpjpe_sum += out.mpjpe;
            }
            let k = 1.0 / batch.len() as f64;
            if let Some(mut g) = fcnn_sum {
                g.iter_mut().for_each(|t| t.scale_assign(k));
                fcnn_opt.step(fcnn.tensors_mut(), &g)?;
            }
            if let (Some(mut g), Some(p), Some(o)) = (pc_sum, pc.as_deref_mut(), pc_opt.as_mut()) {
                g.iter_mut().for_each(|t| t.scale_assign(k));
                o.step(p.tensors_mut(), &g)?;
            }
            steps += 1;
        }
        let n = samples.len() as f64;
        let breakdown = total.scaled(1.0 / n);
        let stats = EpochStats {
            epoch,
            steps,
            lr,
            loss: breakdown.total(),
            train_mpjpe: mpjpe_sum / n,
            breakdown,
        };
        on_epoch(&stats);
        log.epochs.push(stats);
    }
    Ok(log)
}

/// Step 1: the FCNN alone, from a fresh initialisation.
pub fn train_step1(
    cfg: &ExperimentConfig,
    samples: &[Sample],
    exec: Exec,
    on_epoch: impl FnMut(&EpochStats),
) -> Result<(ParamSet, TrainLog), TrainError> {
    let mut fcnn = fcnn_init(&cfg.fcnn, &mut rng_for(cfg.seed))?;
    let log = train_loop(cfg, Phase::One, samples, &mut fcnn, None, exec, on_epoch)?;
    Ok((fcnn, log))
}

/// Step 2: fine-tunes `fcnn` and trains a fresh complement network.
pub fn train_step2(
    cfg: &ExperimentConfig,
    samples: &[Sample],
    mut fcnn: ParamSet,
    exec: Exec,
    on_epoch: impl FnMut(&EpochStats),
) -> Result<(ParamSet, ParamSet, TrainLog), TrainError> {
    let mut pc = pc_init(&mut rng_for(cfg.seed.wrapping_add(1)));
    let log = train_loop(cfg, Phase::Two, samples, &mut fcnn, Some(&mut pc), exec, on_epoch)?;
    Ok((fcnn, pc, log))
}

/// Network output for one image.
#[derive(Clone, Debug)]
pub struct Prediction {
    /// Last-stage maps.
    pub maps: MapSet,
    pub before: InitialEstimate,
    /// Pose after complementation.
    pub after: Pose3D,
}

pub fn predict(fcnn: &ParamSet, pc: &ParamSet, cfg: &FcnnConfig, image: &RgbImage) -> Result<Prediction, TrainError> {
    let topo = LimbTopology::canonical();
    let lengths = LimbLengths::default();
    let tape = Tape::new();
    let maps = fcnn_forward(tape.constant(image_tensor(image)), &fcnn.bind(&tape, false), cfg)?;
    let last = maps.last().expect("at least one stage");
    let before = decode_on_tape(last.conf, last.orient3d, &lengths, &topo)?.to_estimate();
    let after = pc_complement(&before, pc, &lengths, &topo)?;
    let m = cfg.map_size();
    Ok(Prediction {
        maps: last.to_maps(m, m),
        before,
        after,
    })
}

/// The evaluation input for `sample` under `kind`. Box noise re-renders
/// through a cropped camera; everything else edits the image.
pub fn perturbed_image(
    sample: &Sample,
    scene: &SceneConfig,
    kind: &PerturbKind,
    fill: u8,
    rng: &mut impl Rng,
) -> Result<RgbImage, TrainError> {
    match *kind {
        PerturbKind::BboxNoise { sigma_c, sigma_s } => {
            let a = scene.image_size;
            let base = Camera::for_image(a);
            let b = perturb::bbox_noise(BBox { center: base.principal, size: a as f64 }, sigma_c, sigma_s, rng);
            let cam = base.crop(b.center, b.size, a);
            let topo = LimbTopology::canonical();
            Ok(scene.make_sample(&sample.pose3d, &cam, &scene.style(), sample.has_3d, &topo, rng)?.image)
        }
        _ => {
            let s = scene.stride();
            let pose2d = sample.pose2d.map(|p| crate::synthdata::map_to_image(p, s));
            let spec = PerturbSpec { kind: *kind, seed: 0, fill };
            Ok(perturb::apply(&sample.image, &pose2d, &spec, rng).0)
        }
    }
}

/// Reports before and after complementation for one condition and seed.
pub fn eval_condition(
    fcnn: &ParamSet,
    pc: &ParamSet,
    cfg: &ExperimentConfig,
    samples: &[Sample],
    kind: &PerturbKind,
    seed: u64,
    exec: Exec,
) -> Result<(EvalReport, EvalReport), TrainError> {
    let preds = exec.map_range(samples.len(), |i| -> Result<(Pose3D, Pose3D), TrainError> {
        let mut rng = rng_for(item_seed(seed, i));
        let img = perturbed_image(&samples[i], &cfg.data.scene, kind, cfg.eval.fill, &mut rng)?;
        let p = predict(fcnn, pc, &cfg.fcnn, &img)?;
        Ok((p.before.pose, p.after))
    });
    let mut before = Vec::with_capacity(samples.len());
    let mut after = Vec::with_capacity(samples.len());
    for p in preds {
        let (b, a) = p?;
        before.push(b);
        after.push(a);
    }
    let gts: Vec<Pose3D> = samples.iter().map(|s| s.pose3d).collect();
    let label = kind.label();
    Ok((
        EvalReport::from_pairs(label.clone(), &before, &gts)?,
        EvalReport::from_pairs(label, &after, &gts)?,
    ))
}

/// One condition averaged over the configured seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub kind: PerturbKind,
    pub before: EvalReport,
    pub after: EvalReport,
}

/// All configured conditions followed by the box-noise grid.
pub fn sweep_conditions(eval: &EvalConfig) -> Vec<PerturbKind> {
    let mut kinds = eval.conditions.clone();
    kinds.extend(eval.bbox_grid.iter().map(|&(sigma_c, sigma_s)| PerturbKind::BboxNoise { sigma_c, sigma_s }));
    kinds
}

pub fn eval_sweep(
    fcnn: &ParamSet,
    pc: &ParamSet,
    cfg: &ExperimentConfig,
    samples: &[Sample],
    kinds: &[PerturbKind],
    exec: Exec,
) -> Result<Vec<SweepRow>, TrainError> {
    kinds
        .iter()
        .map(|kind| {
            let mut before = Vec::new();
            let mut after = Vec::new();
            for r in 0..cfg.eval.repeats {
                let (b, a) = eval_condition(fcnn, pc, cfg, samples, kind, cfg.eval.perturb_seed + r as u64, exec)?;
                before.push(b);
                after.push(a);
            }
            Ok(SweepRow {
                kind: *kind,
                before: EvalReport::mean(&before)?,
                after: EvalReport::mean(&after)?,
            })
        })
        .collect()
}

/// Writes `<stem>_before_pc.csv`, `<stem>_after_pc.csv` and a text table;
/// returns the written paths.
pub fn write_sweep(rows: &[SweepRow], dir: &Path, stem: &str) -> Result<Vec<PathBuf>, TrainError> {
    fs::create_dir_all(dir)?;
    let before: Vec<EvalReport> = rows.iter().map(|r| r.before.clone()).collect();
    let after: Vec<EvalReport> = rows.iter().map(|r| r.after.clone()).collect();
    let paths = [
        dir.join(format!("{stem}_before_pc.csv")),
        dir.join(format!("{stem}_after_pc.csv")),
        dir.join(format!("{stem}.txt")),
    ];
    write_reports_csv(&before, fs::File::create(&paths[0])?)?;
    write_reports_csv(&after, fs::File::create(&paths[1])?)?;
    let table = format!(
        "before complementation\n{}\nafter complementation\n{}",
        crate::metrics::format_table(&before),
        crate::metrics::format_table(&after)
    );
    fs::write(&paths[2], table)?;
    Ok(paths.to_vec())
}

/// Input, predicted confidence and target confidence side by side, each
/// limb tinted with its palette colour.
pub fn overlay(image: &RgbImage, pred: &MapSet, target: &MapSet) -> RgbImage {
    let a = image.width();
    let mut out = RgbImage::new(3 * a, a);
    for (x, y, px) in image.enumerate_pixels() {
        out.put_pixel(x, y, *px);
    }
    for (panel, maps) in [(1, pred), (2, target)] {
        let s = (a as usize / maps.width).max(1);
        for y in 0..a {
            for x in 0..a {
                let (c, r) = ((x as usize / s).min(maps.width - 1), (y as usize / s).min(maps.height - 1));
                let mut rgb = [0.0f64; 3];
                for limb in 0..NUM_LIMBS {
                    let v = maps.conf(limb)[r * maps.width + c].clamp(0.0, 1.0) as f64;
                    for k in 0..3 {
                        rgb[k] = rgb[k].max(v * PALETTE[limb][k] as f64);
                    }
                }
                out.put_pixel(panel * a + x, y, Rgb(rgb.map(|v| v.round() as u8)));
            }
        }
    }
    out
}

/// Files and facts recorded for a run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: Option<ExperimentConfig>,
    pub artifacts: Vec<Artifact>,
    pub notes: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the run directory.
    pub path: String,
    pub kind: String,
    pub bytes: u64,
}

/// A run directory and its `manifest.json`.
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self, TrainError> {
        fs::create_dir_all(root)?;
        Ok(Self { root: root.to_path_buf() })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn manifest(&self) -> Result<Manifest, TrainError> {
        let p = self.path("manifest.json");
        if !p.exists() {
            return Ok(Manifest::default());
        }
        Ok(serde_json::from_str(&fs::read_to_string(p)?)?)
    }

    /// Records files (paths under the run directory) in the manifest,
    /// replacing entries with the same path.
    pub fn record(&self, cfg: &ExperimentConfig, files: &[(PathBuf, &str)], note: Option<String>) -> Result<(), TrainError> {
        let mut m = self.manifest()?;
        m.config = Some(cfg.clone());
        for (path, kind) in files {
            let rel = path.strip_prefix(&self.root).unwrap_or(path).to_string_lossy().replace('\\', "/");
            let bytes = fs::metadata(path)?.len();
            m.artifacts.retain(|a| a.path != rel);
            m.artifacts.push(Artifact { path: rel, kind: kind.to_string(), bytes });
        }
        m.artifacts.sort_by(|a, b| a.path.cmp(&b.path));
        m.notes.extend(note);
        fs::write(self.path("manifest.json"), serde_json::to_string_pretty(&m)?)?;
        Ok(())
    }
}

fn checkpoint_files(stem: &Path) -> Vec<(PathBuf, &'static str)> {
    vec![
        (stem.with_extension("manifest"), "checkpoint"),
        (stem.with_extension("bin"), "checkpoint"),
    ]
}

fn write_log(run: &RunDir, dir: &str, log: &TrainLog) -> Result<Vec<(PathBuf, &'static str)>, TrainError> {
    fs::create_dir_all(run.path(dir))?;
    let loss = run.path(&format!("{dir}/loss.csv"));
    let epochs = run.path(&format!("{dir}/epochs.csv"));
    log.write_loss_csv(fs::File::create(&loss)?)?;
    log.write_epoch_csv(fs::File::create(&epochs)?)?;
    Ok(vec![(loss, "loss-csv"), (epochs, "epoch-csv")])
}

pub const STEP1_FCNN: &str = "step1/fcnn";
pub const STEP2_FCNN: &str = "step2/fcnn";
pub const STEP2_PC: &str = "step2/pc";

/// Runs step 1 and writes its checkpoint and logs under `run`.
pub fn run_step1(cfg: &ExperimentConfig, run: &RunDir, exec: Exec, on_epoch: impl FnMut(&EpochStats)) -> Result<TrainLog, TrainError> {
    let samples = training_samples(cfg, exec)?;
    let (fcnn, log) = train_step1(cfg, &samples, exec, on_epoch)?;
    let stem = run.path(STEP1_FCNN);
    save_checkpoint(&fcnn, &stem)?;
    let mut files = checkpoint_files(&stem);
    files.extend(write_log(run, "step1", &log)?);
    run.record(cfg, &files, Some(format!("step 1: {} epochs, {} samples", log.epochs.len(), samples.len())))?;
    Ok(log)
}

/// Runs step 2 from the step-1 checkpoint in `run`.
pub fn run_step2(cfg: &ExperimentConfig, run: &RunDir, exec: Exec, on_epoch: impl FnMut(&EpochStats)) -> Result<TrainLog, TrainError> {
    let samples = training_samples(cfg, exec)?;
    let fcnn = load_checkpoint(&run.path(STEP1_FCNN))?;
    let (fcnn, pc, log) = train_step2(cfg, &samples, fcnn, exec, on_epoch)?;
    let (fs_, ps) = (run.path(STEP2_FCNN), run.path(STEP2_PC));
    save_checkpoint(&fcnn, &fs_)?;
    save_checkpoint(&pc, &ps)?;
    let mut files = checkpoint_files(&fs_);
    files.extend(checkpoint_files(&ps));
    files.extend(write_log(run, "step2", &log)?);
    let note = format!(
        "step 2: {} epochs, detachment verified on {} samples",
        log.epochs.len(),
        log.detachment_checks
    );
    run.record(cfg, &files, Some(note))?;
    Ok(log)
}

/// The newest checkpoints in `run`: step 2 if present, else step 1 with a
/// zero complement network.
pub fn latest_model(run: &RunDir) -> Result<(ParamSet, ParamSet), TrainError> {
    let step2 = run.path(STEP2_FCNN);
    if step2.with_extension("manifest").exists() {
        Ok((load_checkpoint(&step2)?, load_checkpoint(&run.path(STEP2_PC))?))
    } else {
        Ok((load_checkpoint(&run.path(STEP1_FCNN))?, pc_zero()))
    }
}

/// Evaluates the newest model on `kinds`, writing tables named `stem` and
/// overlay images of the first held-out samples.
pub fn run_eval(
    cfg: &ExperimentConfig,
    run: &RunDir,
    kinds: &[PerturbKind],
    stem: &str,
    exec: Exec,
) -> Result<Vec<SweepRow>, TrainError> {
    let (fcnn, pc) = latest_model(run)?;
    let samples = heldout_samples(cfg, exec)?;
    let rows = eval_sweep(&fcnn, &pc, cfg, &samples, kinds, exec)?;
    let mut files: Vec<(PathBuf, &str)> = write_sweep(&rows, &run.path("eval"), stem)?
        .into_iter()
        .map(|p| (p, "eval"))
        .collect();
    let topo = LimbTopology::canonical();
    for (i, s) in samples.iter().take(cfg.eval.overlays).enumerate() {
        let p = predict(&fcnn, &pc, &cfg.fcnn, &s.image)?;
        let target = s.maps(&topo, &cfg.data.scene.map)?;
        let path = run.path(&format!("eval/overlay_{i:03}.png"));
        overlay(&s.image, &p.maps, &target).save(&path)?;
        files.push((path, "overlay"));
    }
    run.record(cfg, &files, None)?;
    Ok(rows)
}

/// Euclidean distance between the root-relative positions of one joint.
pub fn joint_distance(a: &Pose3D, b: &Pose3D, j: usize) -> f64 {
    geom::norm(geom::sub(a.0[j], b.0[j]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mirror_twice_is_identity_and_keeps_lengths() {
        let topo = LimbTopology::canonical();
        let pose = crate::synthdata::sample_pose(&mut rng_for(1));
        let m = mirror_pose(&pose, &topo);
        assert_eq!(mirror_pose(&m, &topo), pose);
        let d = crate::skeleton::orientations_from_pose(&m, &topo).unwrap();
        for (l, e) in d.lengths.iter().zip(LimbLengths::default().0) {
            assert!((l - e).abs() < 1e-9);
        }
    }

    #[test]
    fn rotation_keeps_depth_and_distances() {
        let pose = crate::synthdata::sample_pose(&mut rng_for(2));
        let r = rotate_pose(&pose, 0.4);
        for j in 0..pose.0.len() {
            assert_eq!(r.0[j][2], pose.0[j][2]);
            assert!((geom::norm(r.0[j]) - geom::norm(pose.0[j])).abs() < 1e-9);
        }
    }

    #[test]
    fn epoch_seeds_do_not_collide() {
        let mut seen = std::collections::HashSet::new();
        for phase in [Phase::One, Phase::Two] {
            for e in 0..200 {
                for i in 0..2000 {
                    assert!(seen.insert(item_seed(epoch_seed(1, phase, e), i)));
                }
            }
        }
    }

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        let bad = ExperimentConfig {
            step2: Step2Config { translation: 0.1, ..Step2Config::default() },
            ..ExperimentConfig::default()
        };
        assert!(matches!(bad.validate(), Err(TrainError::Config(_))));
    }
}
