//! Two-stage training, evaluation and inference.
//!
//! Stage one fits ScaffNet to dense synthetic depth. Stage two freezes it and
//! trains FusionNet on frame triplets without ground truth. Sample order and
//! augmentation are pure functions of `(seed, epoch)` and `(seed, step)`, so a
//! run resumed from a checkpoint retraces the uninterrupted run exactly.

pub mod ablation;

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, ModelKind};
use crate::dataset::{Dataset, Frame, TripletRef};
use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, Pose};
use crate::graph::{Gradients, ParamStore, Tape};
use crate::losses::{supervised_l0, unsupervised_loss, LossReport, LossWeights, SourceView, UnsupervisedInputs};
use crate::metrics::{evaluate, MetricSet, MetricsTable};
use crate::nets::{
    check_resolution, twist_gradient, twist_to_pose, FusionNet, FusionNetConfig, OutputHead, PoseNet, ScaffNet,
    ScaffNetConfig,
};
use crate::optim::{Adam, AdamConfig, LrSchedule};
use crate::sampling::SparseDepthMap;
use crate::seed::{derive_seed, rng_for};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoseSource {
    #[default]
    GroundTruth,
    Learned,
}

/// Optimisation settings shared by both stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOptions {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    #[serde(default)]
    pub adam: AdamConfig,
    /// Random `(height, width)` crops; ScaffNet only.
    #[serde(default)]
    pub crop: Option<(usize, usize)>,
    /// Random horizontal flips.
    #[serde(default)]
    pub flip: bool,
    /// Cap on optimiser steps, applied after `epochs`.
    #[serde(default)]
    pub max_steps: Option<u64>,
    /// Worker threads for per-sample gradients; results do not depend on it.
    #[serde(default)]
    pub workers: Option<usize>,
}

impl TrainOptions {
    pub fn new(seed: u64, epochs: usize, batch_size: usize, learning_rate: f64) -> Self {
        Self {
            seed,
            epochs,
            batch_size,
            schedule: LrSchedule::constant(learning_rate),
            adam: AdamConfig::default(),
            crop: None,
            flip: false,
            max_steps: None,
            workers: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidInput("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidInput("batch size must be at least 1".into()));
        }
        if !(self.schedule.base >= 0.0 && self.schedule.base.is_finite()) {
            return Err(Error::InvalidInput(format!("learning rate must be >= 0, got {}", self.schedule.base)));
        }
        if let Some((h, w)) = self.crop {
            check_resolution(w, h)?;
        }
        Ok(())
    }

    fn steps_per_epoch(&self, samples: usize) -> u64 {
        samples.div_ceil(self.batch_size) as u64
    }

    fn total_steps(&self, samples: usize) -> u64 {
        let full = self.epochs as u64 * self.steps_per_epoch(samples);
        self.max_steps.map_or(full, |m| m.min(full))
    }
}

/// Stage-two specific settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionOptions {
    #[serde(default)]
    pub weights: LossWeights,
    /// Defaults to 20% of the total steps.
    #[serde(default)]
    pub tp_start_step: Option<u64>,
    #[serde(default)]
    pub pose_source: PoseSource,
    /// Unfreeze ScaffNet and update it together with FusionNet.
    #[serde(default)]
    pub joint_finetune: bool,
}

impl Default for FusionOptions {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            tp_start_step: None,
            pose_source: PoseSource::GroundTruth,
            joint_finetune: false,
        }
    }
}

/// Deterministic sample order for one epoch.
pub fn epoch_order(seed: u64, epoch: u64, samples: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..samples).collect();
    order.shuffle(&mut rng_for(seed, "epoch", epoch));
    order
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Augment {
    crop: Option<(usize, usize, usize, usize)>,
    flip: bool,
}

fn draw_augment(opts: &TrainOptions, step: u64, slot: usize, height: usize, width: usize) -> Result<Augment> {
    let mut rng = rng_for(opts.seed, "augment", step * opts.batch_size as u64 + slot as u64);
    let crop = match opts.crop {
        Some((ch, cw)) if (ch, cw) != (height, width) => {
            if ch > height || cw > width {
                return Err(Error::InvalidInput(format!("crop {ch}x{cw} exceeds frame {height}x{width}")));
            }
            Some((rng.random_range(0..=height - ch), rng.random_range(0..=width - cw), ch, cw))
        }
        _ => None,
    };
    let flip = opts.flip && rng.random_bool(0.5);
    Ok(Augment { crop, flip })
}

fn apply_tensor(t: &Tensor, aug: Augment) -> Result<Tensor> {
    let t = match aug.crop {
        Some((top, left, h, w)) => t.crop(top, left, h, w)?,
        None => t.clone(),
    };
    Ok(if aug.flip { t.flip_horizontal() } else { t })
}

fn apply_sparse(z: &SparseDepthMap, aug: Augment) -> Result<SparseDepthMap> {
    let z = match aug.crop {
        Some((top, left, h, w)) => z.crop(top, left, h, w)?,
        None => z.clone(),
    };
    Ok(if aug.flip { z.flip_horizontal() } else { z })
}

/// One optimiser step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub report: LossReport,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: u64,
    pub mean_loss: f64,
    pub validation: Option<MetricSet>,
}

#[derive(Clone, Debug)]
pub struct TrainResult {
    pub checkpoint: Checkpoint,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochSummary>,
}

/// Where training writes checkpoints, loss curves and metrics.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    pub fn create(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        std::fs::create_dir_all(&path)?;
        Ok(Self { path })
    }

    pub fn checkpoint_path(&self, epoch: u64) -> PathBuf {
        self.path.join(format!("epoch_{epoch:03}.ckpt"))
    }

    pub fn latest(&self) -> PathBuf {
        self.path.join("latest.ckpt")
    }

    fn write_losses(&self, steps: &[StepRecord]) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(self.path.join("losses.csv"))?);
        writeln!(f, "step,epoch,lr,l0,l_ph,l_sz,l_sm,l_tp,total,w_coverage,tp_active")?;
        for s in steps {
            let r = &s.report;
            writeln!(
                f,
                "{},{},{:e},{},{},{},{},{},{},{},{}",
                s.step,
                s.epoch,
                s.lr,
                r.l0.map_or(String::new(), |v| v.to_string()),
                r.l_ph,
                r.l_sz,
                r.l_sm,
                r.l_tp,
                r.total,
                r.w_coverage,
                r.tp_active
            )?;
        }
        f.flush()?;
        Ok(())
    }

    fn write_epochs(&self, epochs: &[EpochSummary]) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(self.path.join("metrics.csv"))?);
        writeln!(f, "epoch,mean_loss,mae_mm,rmse_mm,imae_1km,irmse_1km")?;
        for e in epochs {
            match e.validation {
                Some(m) => writeln!(f, "{},{},{},{},{},{}", e.epoch, e.mean_loss, m.mae, m.rmse, m.imae, m.irmse)?,
                None => writeln!(f, "{},{},,,,", e.epoch, e.mean_loss)?,
            }
        }
        f.flush()?;
        Ok(())
    }
}

/// A ScaffNet and its weights.
#[derive(Clone, Debug)]
pub struct ScaffModel {
    pub net: ScaffNet,
    pub params: ParamStore,
}

impl ScaffModel {
    pub fn init(config: ScaffNetConfig, seed: u64) -> Result<Self> {
        let net = ScaffNet::new(config)?;
        let params = net.init(&mut rng_for(seed, "init-scaffnet", 0));
        Ok(Self { net, params })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let net = ScaffNet::new(ck.header.scaffnet.clone())?;
        let params = ck.params("scaffnet", net.layout())?;
        Ok(Self { net, params })
    }

    pub fn predict(&self, sparse: &SparseDepthMap) -> Result<Tensor> {
        self.net.predict(&self.params, &sparse.to_input())
    }
}

/// A FusionNet with the ScaffNet it refines and an optional pose network.
#[derive(Clone, Debug)]
pub struct FusionModel {
    pub net: FusionNet,
    pub params: ParamStore,
    pub scaffnet: ScaffModel,
    pub posenet: Option<(PoseNet, ParamStore)>,
}

/// Output of end-to-end inference.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub depth: Tensor,
    pub topology: Tensor,
}

impl FusionModel {
    pub fn init(config: FusionNetConfig, scaffnet: ScaffModel, learned_pose: bool, seed: u64) -> Result<Self> {
        let net = FusionNet::new(config)?;
        let params = net.init(&mut rng_for(seed, "init-fusionnet", 0));
        let posenet = learned_pose.then(|| {
            let p = PoseNet::new();
            let w = p.init(&mut rng_for(seed, "init-posenet", 0));
            (p, w)
        });
        Ok(Self {
            net,
            params,
            scaffnet,
            posenet,
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config = ck
            .header
            .fusionnet
            .clone()
            .ok_or_else(|| Error::Checkpoint("checkpoint holds no FusionNet".into()))?;
        let net = FusionNet::new(config)?;
        let params = ck.params("fusionnet", net.layout())?;
        let scaffnet = ScaffModel::from_checkpoint(ck)?;
        let posenet = if ck.has_group("posenet") {
            let p = PoseNet::new();
            let w = ck.params("posenet", p.layout())?;
            Some((p, w))
        } else {
            None
        };
        Ok(Self {
            net,
            params,
            scaffnet,
            posenet,
        })
    }

    pub fn infer(&self, image: &Tensor, sparse: &SparseDepthMap) -> Result<Inference> {
        let topology = self.scaffnet.predict(sparse)?;
        let depth = self.net.predict(&self.params, image, sparse.values(), &topology)?;
        Ok(Inference { depth, topology })
    }
}

/// Either kind of trained model, as loaded from a checkpoint.
#[derive(Clone, Debug)]
pub enum Model {
    Scaffnet(ScaffModel),
    Fusionnet(Box<FusionModel>),
}

impl Model {
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        Ok(match ck.header.kind {
            ModelKind::Scaffnet => Model::Scaffnet(ScaffModel::from_checkpoint(ck)?),
            ModelKind::Fusionnet => Model::Fusionnet(Box::new(FusionModel::from_checkpoint(ck)?)),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// Final depth for one frame.
    pub fn predict(&self, image: &Tensor, sparse: &SparseDepthMap) -> Result<Tensor> {
        match self {
            Model::Scaffnet(m) => m.predict(sparse),
            Model::Fusionnet(m) => Ok(m.infer(image, sparse)?.depth),
        }
    }
}

/// Evaluation range: the given one, or each sequence's own depth range.
pub fn evaluate_model(model: &Model, data: &Dataset, range: Option<(f64, f64)>) -> Result<MetricsTable> {
    let refs = data.frame_refs();
    let rows: Vec<(String, MetricSet)> = refs
        .par_iter()
        .map(|&(s, f)| {
            let seq = &data.sequences[s];
            let frame = &seq.frames[f];
            let pred = model.predict(&frame.image, &frame.sparse)?;
            let m = evaluate(&pred, &frame.depth, None, range.unwrap_or(seq.depth_range))?;
            Ok((format!("{}/{f:06}", seq.name), m))
        })
        .collect::<Result<_>>()?;
    MetricsTable::new(rows)
}

fn run_pool<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match workers {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| Error::InvalidInput(format!("cannot start {n} workers: {e}")))?;
            Ok(pool.install(f))
        }
        None => Ok(f()),
    }
}

/// Average per-sample gradients in sample order.
fn reduce(mut parts: Vec<(LossReport, Gradients)>) -> (LossReport, Gradients) {
    let n = parts.len() as f64;
    let (first_report, mut grads) = parts.remove(0);
    let mut report = first_report;
    for (r, g) in &parts {
        grads.accumulate(g);
        report.l0 = report.l0.zip(r.l0).map(|(a, b)| a + b);
        report.l_ph += r.l_ph;
        report.l_sz += r.l_sz;
        report.l_sm += r.l_sm;
        report.l_tp += r.l_tp;
        report.total += r.total;
        report.w_coverage += r.w_coverage;
    }
    grads.scale(1.0 / n);
    report.l0 = report.l0.map(|v| v / n);
    report.l_ph /= n;
    report.l_sz /= n;
    report.l_sm /= n;
    report.l_tp /= n;
    report.total /= n;
    report.w_coverage /= n;
    (report, grads)
}

fn summarise_epoch(steps: &[StepRecord], epoch: u64, validation: Option<MetricSet>) -> EpochSummary {
    let losses: Vec<f64> = steps.iter().filter(|s| s.epoch == epoch).map(|s| s.report.total).collect();
    EpochSummary {
        epoch,
        mean_loss: losses.iter().sum::<f64>() / losses.len().max(1) as f64,
        validation,
    }
}

/// Hooks for long runs: checkpoints and logs go to `run_dir`, `stop_after`
/// ends training early after that many total steps (as if interrupted).
#[derive(Clone, Debug, Default)]
pub struct RunControl<'a> {
    pub run_dir: Option<&'a RunDir>,
    pub validation: Option<&'a Dataset>,
    pub resume: Option<&'a Checkpoint>,
    pub stop_after: Option<u64>,
    pub eval_range: Option<(f64, f64)>,
}

/// Options as recorded in checkpoints; the worker count is left out so that
/// checkpoints do not depend on it.
fn run_snapshot(opts: &TrainOptions) -> TrainOptions {
    TrainOptions {
        workers: None,
        ..opts.clone()
    }
}

fn scaffnet_checkpoint(model: &ScaffModel, adam: &Adam, opts: &TrainOptions, step: u64) -> Result<Checkpoint> {
    let mut ck = Checkpoint::new(ModelKind::Scaffnet, model.net.config.clone(), None, step, opts.seed);
    ck.header.run = serde_json::to_value(run_snapshot(opts))?;
    ck.put_params("scaffnet", &model.params);
    ck.put_adam("scaffnet", &model.params, adam);
    Ok(ck)
}

/// Supervised training of ScaffNet on dense synthetic depth.
pub fn train_scaffnet(data: &Dataset, config: ScaffNetConfig, opts: &TrainOptions, ctl: &RunControl<'_>) -> Result<TrainResult> {
    opts.validate()?;
    let refs = data.frame_refs();
    if refs.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    let (width, height) = data.resolution()?;
    let mut model = ScaffModel::init(config.clone(), opts.seed)?;
    let mut adam = Adam::new(opts.adam, &model.params);
    let mut step = 0;
    if let Some(ck) = ctl.resume {
        if ck.header.kind != ModelKind::Scaffnet || ck.header.scaffnet != config {
            return Err(Error::Checkpoint("resume checkpoint does not match this ScaffNet configuration".into()));
        }
        model = ScaffModel::from_checkpoint(ck)?;
        adam = Adam::new(opts.adam, &model.params);
        ck.adam_into("scaffnet", &model.params, &mut adam)?;
        step = ck.header.step;
    }
    let per_epoch = opts.steps_per_epoch(refs.len());
    let total = opts.total_steps(refs.len());
    let end = ctl.stop_after.map_or(total, |s| s.min(total));
    let mut steps = Vec::new();
    let mut epochs = Vec::new();

    run_pool(opts.workers, || -> Result<()> {
        let mut order = (u64::MAX, Vec::new());
        while step < end {
            let epoch = step / per_epoch;
            if order.0 != epoch {
                order = (epoch, epoch_order(opts.seed, epoch, refs.len()));
            }
            let pos = ((step % per_epoch) as usize) * opts.batch_size;
            let batch = &order.1[pos..(pos + opts.batch_size).min(refs.len())];
            let parts: Vec<(LossReport, Gradients)> = batch
                .par_iter()
                .enumerate()
                .map(|(slot, &i)| {
                    let (s, f) = refs[i];
                    let frame = data.frame(s, f);
                    let aug = draw_augment(opts, step, slot, height, width)?;
                    let z = apply_sparse(&frame.sparse, aug)?;
                    let gt = apply_tensor(&frame.depth, aug)?;
                    let mut tape = Tape::new(&model.params);
                    let out = model.net.forward(&mut tape, &z.to_input())?;
                    let loss = supervised_l0(tape.value(out), &gt)?;
                    let grads = tape.backward(out, loss.grad).params;
                    Ok((LossReport::supervised(loss.value), grads))
                })
                .collect::<Result<_>>()?;
            let (report, grads) = reduce(parts);
            let lr = opts.schedule.rate(epoch as usize);
            adam.update(&mut model.params, &grads, lr)?;
            step += 1;
            steps.push(StepRecord { step, epoch, lr, report });
            if step % per_epoch == 0 || step == total {
                let val = match ctl.validation {
                    Some(v) => Some(evaluate_model(&Model::Scaffnet(model.clone()), v, ctl.eval_range)?.aggregate),
                    None => None,
                };
                let summary = summarise_epoch(&steps, epoch, val);
                log::info!(
                    "scaffnet epoch {epoch} step {step}/{total}: loss {:.5}{}",
                    summary.mean_loss,
                    val.map_or(String::new(), |m| format!(", val MAE {:.1} mm", m.mae))
                );
                epochs.push(summary);
                if let Some(dir) = ctl.run_dir {
                    let ck = scaffnet_checkpoint(&model, &adam, opts, step)?;
                    ck.save(&dir.checkpoint_path(epoch))?;
                    ck.save(&dir.latest())?;
                }
            } else if step == end {
                if let Some(dir) = ctl.run_dir {
                    scaffnet_checkpoint(&model, &adam, opts, step)?.save(&dir.latest())?;
                }
            }
        }
        Ok(())
    })??;

    if let Some(dir) = ctl.run_dir {
        dir.write_losses(&steps)?;
        dir.write_epochs(&epochs)?;
    }
    Ok(TrainResult {
        checkpoint: scaffnet_checkpoint(&model, &adam, opts, step)?,
        steps,
        epochs,
    })
}

/// Target frame, its neighbours and the poses from the target camera to each.
#[derive(Clone, Debug)]
struct TripletView {
    target: Tensor,
    sources: [Tensor; 2],
    poses: [Pose; 2],
    intrinsics: Intrinsics,
    sparse: SparseDepthMap,
}

fn triplet_view(data: &Dataset, t: TripletRef, flip: bool) -> TripletView {
    let seq = &data.sequences[t.sequence];
    let f = |i: usize| -> &Frame { &seq.frames[i] };
    let (prev, cur, next) = (f(t.frame - 1), f(t.frame), f(t.frame + 1));
    let mut v = TripletView {
        target: cur.image.clone(),
        sources: [prev.image.clone(), next.image.clone()],
        poses: [Pose::relative(&prev.pose, &cur.pose), Pose::relative(&next.pose, &cur.pose)],
        intrinsics: seq.intrinsics,
        sparse: cur.sparse.clone(),
    };
    if flip {
        v.target = v.target.flip_horizontal();
        v.sources = [v.sources[0].flip_horizontal(), v.sources[1].flip_horizontal()];
        v.poses = [v.poses[0].mirrored_x(), v.poses[1].mirrored_x()];
        v.intrinsics = v.intrinsics.flipped_horizontal();
        v.sparse = v.sparse.flip_horizontal();
    }
    v
}

struct FusionState {
    model: FusionModel,
    adam: Adam,
    pose_adam: Option<Adam>,
    scaff_adam: Option<Adam>,
}

fn fusionnet_checkpoint(
    state: &FusionState,
    opts: &TrainOptions,
    fusion: &FusionOptions,
    scaff_hash: &str,
    step: u64,
) -> Result<Checkpoint> {
    let m = &state.model;
    let mut ck = Checkpoint::new(
        ModelKind::Fusionnet,
        m.scaffnet.net.config.clone(),
        Some(m.net.config.clone()),
        step,
        opts.seed,
    );
    ck.header.run = serde_json::json!({ "train": run_snapshot(opts), "fusion": fusion });
    ck.header.scaffnet_hash = Some(scaff_hash.to_string());
    ck.put_params("scaffnet", &m.scaffnet.params);
    ck.put_params("fusionnet", &m.params);
    ck.put_adam("fusionnet", &m.params, &state.adam);
    if let (Some((_, pw)), Some(pa)) = (&m.posenet, &state.pose_adam) {
        ck.put_params("posenet", pw);
        ck.put_adam("posenet", pw, pa);
    }
    if let Some(sa) = &state.scaff_adam {
        ck.put_adam("scaffnet", &m.scaffnet.params, sa);
    }
    Ok(ck)
}

struct FusionSampleGrads {
    report: LossReport,
    fusion: Gradients,
    pose: Option<Gradients>,
    scaff: Option<Gradients>,
}

/// Unsupervised training of FusionNet on top of a frozen ScaffNet.
pub fn train_fusionnet(
    data: &Dataset,
    scaffnet: &Checkpoint,
    config: FusionNetConfig,
    opts: &TrainOptions,
    fusion: &FusionOptions,
    ctl: &RunControl<'_>,
) -> Result<TrainResult> {
    opts.validate()?;
    fusion.weights.validate()?;
    let triplets = data.triplets();
    if triplets.is_empty() {
        return Err(Error::Dataset("no frame triplets in the training set".into()));
    }
    for seq in &data.sequences {
        seq.intrinsics
            .validate()
            .map_err(|e| Error::Dataset(format!("sequence {} has unusable intrinsics: {e}", seq.name)))?;
    }
    let scaff = match scaffnet.header.kind {
        ModelKind::Scaffnet => ScaffModel::from_checkpoint(scaffnet)?,
        ModelKind::Fusionnet => FusionModel::from_checkpoint(scaffnet)?.scaffnet,
    };
    let scaff_hash = scaff.params.hash();
    let learned = fusion.pose_source == PoseSource::Learned;

    let mut model = FusionModel::init(config.clone(), scaff, learned, opts.seed)?;
    let mut step = 0;
    if let Some(ck) = ctl.resume {
        if ck.header.kind != ModelKind::Fusionnet || ck.header.fusionnet.as_ref() != Some(&config) {
            return Err(Error::Checkpoint("resume checkpoint does not match this FusionNet configuration".into()));
        }
        if !fusion.joint_finetune && ck.header.scaffnet_hash.as_deref() != Some(scaff_hash.as_str()) {
            return Err(Error::Checkpoint("resume checkpoint was trained on a different ScaffNet".into()));
        }
        let resumed = FusionModel::from_checkpoint(ck)?;
        if resumed.posenet.is_some() != learned {
            return Err(Error::Checkpoint("resume checkpoint uses a different pose source".into()));
        }
        model = resumed;
        step = ck.header.step;
    }
    let mut state = FusionState {
        adam: Adam::new(opts.adam, &model.params),
        pose_adam: model.posenet.as_ref().map(|(_, w)| Adam::new(opts.adam, w)),
        scaff_adam: fusion.joint_finetune.then(|| Adam::new(opts.adam, &model.scaffnet.params)),
        model,
    };
    if let Some(ck) = ctl.resume {
        ck.adam_into("fusionnet", &state.model.params, &mut state.adam)?;
        if let (Some((_, w)), Some(a)) = (&state.model.posenet, &mut state.pose_adam) {
            ck.adam_into("posenet", w, a)?;
        }
        if let Some(a) = &mut state.scaff_adam {
            ck.adam_into("scaffnet", &state.model.scaffnet.params, a)?;
        }
    }

    let per_epoch = opts.steps_per_epoch(triplets.len());
    let total = opts.total_steps(triplets.len());
    let end = ctl.stop_after.map_or(total, |s| s.min(total));
    let tp_start = fusion.tp_start_step.unwrap_or(total / 5);
    let (width, height) = data.resolution()?;
    check_resolution(width, height)?;

    // The frozen topology estimate never changes, so compute it once per view.
    let mut d0_cache: HashMap<(usize, usize, bool), Tensor> = HashMap::new();
    if !fusion.joint_finetune {
        let flips: &[bool] = if opts.flip { &[false, true] } else { &[false] };
        let keys: Vec<(TripletRef, bool)> = triplets.iter().flat_map(|&t| flips.iter().map(move |&f| (t, f))).collect();
        let scaff = &state.model.scaffnet;
        let computed: Vec<((usize, usize, bool), Tensor)> = run_pool(opts.workers, || {
            keys.par_iter()
                .map(|&(t, flip)| {
                    let z = &data.frame(t.sequence, t.frame).sparse;
                    let z = if flip { z.flip_horizontal() } else { z.clone() };
                    Ok(((t.sequence, t.frame, flip), scaff.predict(&z)?))
                })
                .collect::<Result<_>>()
        })??;
        d0_cache.extend(computed);
    }

    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    run_pool(opts.workers, || -> Result<()> {
        let mut order = (u64::MAX, Vec::new());
        while step < end {
            let epoch = step / per_epoch;
            if order.0 != epoch {
                order = (epoch, epoch_order(opts.seed, epoch, triplets.len()));
            }
            let pos = ((step % per_epoch) as usize) * opts.batch_size;
            let batch = &order.1[pos..(pos + opts.batch_size).min(triplets.len())];
            let m = &state.model;
            let parts: Vec<FusionSampleGrads> = batch
                .par_iter()
                .enumerate()
                .map(|(slot, &i)| {
                    let t = triplets[i];
                    let aug = draw_augment(&TrainOptions { crop: None, ..opts.clone() }, step, slot, height, width)?;
                    let view = triplet_view(data, t, aug.flip);
                    fusion_sample(m, &view, d0_cache.get(&(t.sequence, t.frame, aug.flip)), fusion, step, tp_start)
                })
                .collect::<Result<_>>()?;

            let n = parts.len() as f64;
            let mut reports = Vec::with_capacity(parts.len());
            let mut fusion_grads = Vec::with_capacity(parts.len());
            let mut pose_grads = Vec::new();
            let mut scaff_grads = Vec::new();
            for p in parts {
                reports.push((p.report, p.fusion.clone()));
                fusion_grads.push(p.fusion);
                pose_grads.extend(p.pose);
                scaff_grads.extend(p.scaff);
            }
            let (report, grads) = reduce(reports);
            let lr = opts.schedule.rate(epoch as usize);
            state.adam.update(&mut state.model.params, &grads, lr)?;
            let mean = |gs: Vec<Gradients>| {
                let mut it = gs.into_iter();
                it.next().map(|mut acc| {
                    for g in it {
                        acc.accumulate(&g);
                    }
                    acc.scale(1.0 / n);
                    acc
                })
            };
            if let (Some((_, w)), Some(a), Some(g)) = (&mut state.model.posenet, &mut state.pose_adam, mean(pose_grads)) {
                a.update(w, &g, lr)?;
            }
            if let (Some(a), Some(g)) = (&mut state.scaff_adam, mean(scaff_grads)) {
                a.update(&mut state.model.scaffnet.params, &g, lr)?;
            }
            step += 1;
            steps.push(StepRecord { step, epoch, lr, report });
            if step % per_epoch == 0 || step == total {
                let val = match ctl.validation {
                    Some(v) => Some(
                        evaluate_model(&Model::Fusionnet(Box::new(state.model.clone())), v, ctl.eval_range)?.aggregate,
                    ),
                    None => None,
                };
                let summary = summarise_epoch(&steps, epoch, val);
                log::info!(
                    "fusionnet epoch {epoch} step {step}/{total}: loss {:.5}{}",
                    summary.mean_loss,
                    val.map_or(String::new(), |m| format!(", val MAE {:.1} mm", m.mae))
                );
                epochs.push(summary);
                if let Some(dir) = ctl.run_dir {
                    let ck = fusionnet_checkpoint(&state, opts, fusion, &scaff_hash, step)?;
                    ck.save(&dir.checkpoint_path(epoch))?;
                    ck.save(&dir.latest())?;
                }
            } else if step == end {
                if let Some(dir) = ctl.run_dir {
                    fusionnet_checkpoint(&state, opts, fusion, &scaff_hash, step)?.save(&dir.latest())?;
                }
            }
        }
        Ok(())
    })??;

    if !fusion.joint_finetune && state.model.scaffnet.params.hash() != scaff_hash {
        return Err(Error::Checkpoint("frozen ScaffNet weights changed during training".into()));
    }
    if let Some(dir) = ctl.run_dir {
        dir.write_losses(&steps)?;
        dir.write_epochs(&epochs)?;
    }
    Ok(TrainResult {
        checkpoint: fusionnet_checkpoint(&state, opts, fusion, &scaff_hash, step)?,
        steps,
        epochs,
    })
}

fn fusion_sample(
    model: &FusionModel,
    view: &TripletView,
    cached_d0: Option<&Tensor>,
    fusion: &FusionOptions,
    step: u64,
    tp_start: u64,
) -> Result<FusionSampleGrads> {
    // Topology estimate, on a ScaffNet tape when it is being finetuned.
    let mut scaff_tape = Tape::new(&model.scaffnet.params);
    let (d0, scaff_out) = match cached_d0 {
        Some(d0) => (d0.clone(), None),
        None => {
            let out = model.scaffnet.net.forward(&mut scaff_tape, &view.sparse.to_input())?;
            (scaff_tape.value(out).clone(), Some(out))
        }
    };

    // Source poses: ground truth, or regressed on their own tapes.
    let mut pose_tapes = Vec::new();
    let mut poses = view.poses;
    if let Some((posenet, weights)) = &model.posenet {
        for (i, src) in view.sources.iter().enumerate() {
            let mut tape = Tape::new(weights);
            let twist = posenet.forward(&mut tape, &view.target, src)?;
            poses[i] = twist_to_pose(tape.value(twist));
            pose_tapes.push((tape, twist));
        }
    }

    let mut tape = Tape::new(&model.params);
    let out = if fusion.joint_finetune {
        model.net.forward_with_d0_grad(&mut tape, &view.target, view.sparse.values(), &d0)?
    } else {
        model.net.forward(&mut tape, &view.target, view.sparse.values(), &d0)?
    };
    let depth = tape.value(out.depth).clone();
    let sources = [
        SourceView {
            image: &view.sources[0],
            pose: poses[0],
        },
        SourceView {
            image: &view.sources[1],
            pose: poses[1],
        },
    ];
    let inputs = UnsupervisedInputs {
        target: &view.target,
        sources: &sources,
        intrinsics: &view.intrinsics,
        sparse: &view.sparse,
        d0: &d0,
    };
    let loss = unsupervised_loss(&inputs, &depth, &fusion.weights, step, tp_start)?;
    let bw = tape.backward(out.depth, loss.grad_depth);

    let pose = if pose_tapes.is_empty() {
        None
    } else {
        let mut acc: Option<Gradients> = None;
        for ((ptape, twist), (g_rot, g_t)) in pose_tapes.iter().zip(&loss.grad_poses) {
            let seed = twist_gradient(ptape.value(*twist), g_rot, g_t);
            let g = ptape.backward(*twist, seed).params;
            match &mut acc {
                Some(a) => a.accumulate(&g),
                None => acc = Some(g),
            }
        }
        acc
    };
    let scaff = match (scaff_out, bw.wrt(out.d0)) {
        (Some(o), Some(g)) if fusion.joint_finetune => Some(scaff_tape.backward(o, g.clone()).params),
        _ => None,
    };
    Ok(FusionSampleGrads {
        report: loss.report,
        fusion: bw.params,
        pose,
        scaff,
    })
}

/// Configuration of a FusionNet matched to a dataset's depth range.
pub fn fusion_config_for(preset: crate::nets::Preset, data: &Dataset, head: OutputHead) -> FusionNetConfig {
    let lo = data.sequences.iter().map(|s| s.depth_range.0).fold(f64::INFINITY, f64::min);
    let hi = data.sequences.iter().map(|s| s.depth_range.1).fold(0.0, f64::max);
    let range = if lo.is_finite() && hi > lo { (lo, hi) } else { (0.1, 100.0) };
    FusionNetConfig {
        head,
        ..FusionNetConfig::preset(preset, range)
    }
}

/// Seed for the sparse maps of an evaluation-time resampling.
pub fn resample_seed(seed: u64, points: usize) -> u64 {
    derive_seed(seed, "resample", points as u64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate, GenerateSpec};
    use crate::nets::Preset;
    use crate::sampling::SamplingStrategy;
    use crate::scenegen::Layout;
    use crate::spp::SppConfig;

    fn tiny_data(layout: Layout, sequences: usize, frames: usize) -> Dataset {
        let mut spec = GenerateSpec::new(5, layout, sequences, frames, SamplingStrategy::corners(24));
        spec.width = 64;
        spec.height = 32;
        generate(&spec).unwrap()
    }

    fn scaff_config() -> ScaffNetConfig {
        ScaffNetConfig::preset(Preset::Tiny, Some(SppConfig::corner()))
    }

    #[test]
    fn epoch_order_is_a_deterministic_permutation() {
        let a = epoch_order(3, 1, 10);
        let mut sorted = a.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..10).collect::<Vec<_>>());
        assert_eq!(a, epoch_order(3, 1, 10));
        assert_ne!(a, epoch_order(3, 2, 10));
    }

    #[test]
    fn zero_learning_rate_leaves_weights_unchanged() {
        let data = tiny_data(Layout::Room, 1, 3);
        let opts = TrainOptions::new(1, 1, 2, 0.0);
        let result = train_scaffnet(&data, scaff_config(), &opts, &RunControl::default()).unwrap();
        let trained = ScaffModel::from_checkpoint(&result.checkpoint).unwrap();
        let fresh = ScaffModel::init(scaff_config(), 1).unwrap();
        assert_eq!(trained.params.hash(), fresh.params.hash());
        assert_eq!(result.steps.len(), 2);
    }

    #[test]
    fn same_seed_gives_identical_checkpoint() {
        let data = tiny_data(Layout::Room, 1, 4);
        let mut opts = TrainOptions::new(2, 2, 2, 1e-3);
        opts.crop = Some((32, 32));
        opts.flip = true;
        let a = train_scaffnet(&data, scaff_config(), &opts, &RunControl::default()).unwrap();
        opts.workers = Some(2);
        let b = train_scaffnet(&data, scaff_config(), &opts, &RunControl::default()).unwrap();
        assert_eq!(a.checkpoint.hash(), b.checkpoint.hash());
    }

    #[test]
    fn scaffnet_loss_falls_on_a_fixed_batch() {
        let data = tiny_data(Layout::Room, 1, 3);
        let opts = TrainOptions::new(4, 100, 3, 2e-3);
        let r = train_scaffnet(&data, scaff_config(), &opts, &RunControl::default()).unwrap();
        let first: f64 = r.steps[..10].iter().map(|s| s.report.total).sum();
        let last: f64 = r.steps[r.steps.len() - 10..].iter().map(|s| s.report.total).sum();
        assert!(last < 0.7 * first, "loss went from {first} to {last}");
    }

    #[test]
    fn fusionnet_keeps_scaffnet_frozen_and_resumes_exactly() {
        let data = tiny_data(Layout::Corridor, 1, 5);
        let scaff = train_scaffnet(&data, scaff_config(), &TrainOptions::new(1, 1, 3, 1e-3), &RunControl::default())
            .unwrap()
            .checkpoint;
        let before = ScaffModel::from_checkpoint(&scaff).unwrap().params.hash();
        let config = fusion_config_for(Preset::Tiny, &data, OutputHead::ScaleResidual);
        let mut opts = TrainOptions::new(7, 3, 2, 1e-3);
        opts.flip = true;
        let fusion = FusionOptions {
            weights: LossWeights::corner(),
            tp_start_step: Some(2),
            ..FusionOptions::default()
        };
        let full = train_fusionnet(&data, &scaff, config.clone(), &opts, &fusion, &RunControl::default()).unwrap();
        let after = FusionModel::from_checkpoint(&full.checkpoint).unwrap().scaffnet.params.hash();
        assert_eq!(before, after);
        assert_eq!(full.checkpoint.header.scaffnet_hash.as_deref(), Some(before.as_str()));

        let dir = tempfile::tempdir().unwrap();
        let run = RunDir::create(dir.path()).unwrap();
        let partial = train_fusionnet(
            &data,
            &scaff,
            config.clone(),
            &opts,
            &fusion,
            &RunControl {
                stop_after: Some(3),
                run_dir: Some(&run),
                ..RunControl::default()
            },
        )
        .unwrap();
        let saved = Checkpoint::load(&run.latest()).unwrap();
        assert_eq!(saved.header.step, 3);
        let resumed = train_fusionnet(
            &data,
            &scaff,
            config,
            &opts,
            &fusion,
            &RunControl {
                resume: Some(&saved),
                ..RunControl::default()
            },
        )
        .unwrap();
        assert_eq!(resumed.checkpoint.hash(), full.checkpoint.hash());
        let joined: Vec<StepRecord> = partial.steps.iter().chain(&resumed.steps).copied().collect();
        assert_eq!(joined, full.steps);
        assert!(dir.path().join("losses.csv").exists());
    }

    #[test]
    fn identity_head_infers_topology_and_learned_pose_trains() {
        let data = tiny_data(Layout::Corridor, 1, 3);
        let scaff = ScaffModel::init(scaff_config(), 0).unwrap();
        let config = fusion_config_for(Preset::Tiny, &data, OutputHead::ScaleResidual);
        let model = FusionModel::init(config.clone(), scaff.clone(), false, 0).unwrap();
        let f = data.frame(0, 1);
        let out = model.infer(&f.image, &f.sparse).unwrap();
        for (a, b) in out.depth.data().iter().zip(out.topology.data()) {
            assert!((a - b.clamp(config.depth_range.0, config.depth_range.1)).abs() < 1e-9);
        }
        assert!(out.depth.min() > 0.0);

        let mut ck = Checkpoint::new(ModelKind::Scaffnet, scaff_config(), None, 0, 0);
        ck.put_params("scaffnet", &scaff.params);
        let fusion = FusionOptions {
            pose_source: PoseSource::Learned,
            joint_finetune: true,
            ..FusionOptions::default()
        };
        let r = train_fusionnet(&data, &ck, config, &TrainOptions::new(0, 2, 1, 1e-3), &fusion, &RunControl::default()).unwrap();
        let m = FusionModel::from_checkpoint(&r.checkpoint).unwrap();
        assert!(m.posenet.is_some());
        assert_ne!(m.scaffnet.params.hash(), scaff.params.hash());
    }

    #[test]
    fn ground_truth_depth_and_pose_give_small_photometric_loss() {
        let data = tiny_data(Layout::Room, 1, 3);
        let t = data.triplets()[0];
        let view = triplet_view(&data, t, false);
        let gt = &data.frame(t.sequence, t.frame).depth;
        let sources = [0, 1].map(|i| SourceView {
            image: &view.sources[i],
            pose: view.poses[i],
        });
        let inputs = UnsupervisedInputs {
            target: &view.target,
            sources: &sources,
            intrinsics: &view.intrinsics,
            sparse: &view.sparse,
            d0: gt,
        };
        let w = LossWeights {
            w_st: 0.0,
            w_co: 1.0,
            ..LossWeights::default()
        };
        let l = unsupervised_loss(&inputs, gt, &w, 0, 0).unwrap();
        assert!(l.report.l_ph < 1e-2, "photometric loss {}", l.report.l_ph);
    }
}
