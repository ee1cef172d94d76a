//! Rooms as tasks: data assembly, the three training conditions and
//! per-room evaluation for the SELD model.
//!
//! Conditions:
//! - `pretrain`: supervised training on all training rooms, evaluated as is;
//! - `finetune`: the pre-trained model adapted on each held-out room's support set;
//! - `meta`: the meta-trained model adapted the same way.
//!
//! Adaptation forward passes use batch statistics; running statistics are
//! read-only during adaptation and only predictions use them.

use std::path::PathBuf;
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{adamw_step, AdamState, BatchStats, ParamSet, Var};
use crate::dsp::{extract_features, FeatureTensor, SEGMENT_SAMPLES};
use crate::error::{Error, Result};
use crate::meta::{inner_adapt, loss_and_grad, meta_step, sample_task_batch, Learner, MetaConfig, PretrainConfig};
use crate::metrics::Accumulator;
use crate::model::{batch_features, batch_targets, decode, forward, make_targets, predict, seld_loss, BnState, ModelConfig, ModelState, Mode, ACT_THRESHOLD};
use crate::rng::Rng;
use crate::synth::{render_clip, Annotation, RoomEntry, SceneConfig, Split, LABEL_HOP_S};
use crate::tensor::Tensor;

/// Label frames per 5 s segment.
pub const SEGMENT_LABEL_FRAMES: usize = 50;

/// Where a segment's features live.
#[derive(Debug, Clone)]
pub enum FeatureSource {
    Memory(Arc<FeatureTensor>),
    Disk(PathBuf),
}

impl FeatureSource {
    pub fn load(&self) -> Result<Arc<FeatureTensor>> {
        match self {
            FeatureSource::Memory(f) => Ok(f.clone()),
            FeatureSource::Disk(p) => Ok(Arc::new(FeatureTensor::load(p)?)),
        }
    }
}

/// One 5 s training/evaluation sample.
#[derive(Debug, Clone)]
pub struct Segment {
    pub clip_id: String,
    pub index: usize,
    pub features: FeatureSource,
    /// `[T_out, n_classes, 3]`.
    pub target: Tensor<f32>,
    /// Reference labels re-based to the segment.
    pub labels: Annotation,
}

impl Segment {
    pub fn id(&self) -> String {
        format!("{}_seg{:02}", self.clip_id, self.index)
    }
}

#[derive(Debug, Clone)]
pub struct RoomData {
    pub room_id: String,
    pub split: Split,
    /// Sorted by clip id, then segment index.
    pub segments: Vec<Segment>,
}

/// Cut a clip annotation into per-segment windows.
pub fn segment_labels(ann: &Annotation, n_segments: usize) -> Vec<Annotation> {
    let per = (SEGMENT_SAMPLES as f64 / f64::from(crate::dsp::SAMPLE_RATE) / LABEL_HOP_S).round() as usize;
    (0..n_segments).map(|s| ann.window(s * per, (s + 1) * per)).collect()
}

/// Render and featurize every clip of `room` in memory.
pub fn synth_room(
    entry: &RoomEntry,
    clips: usize,
    scene: &SceneConfig,
    dataset_seed: u64,
    model: &ModelConfig,
) -> Result<RoomData> {
    let mut segments = Vec::new();
    for idx in 0..clips {
        let (clip, ann) = render_clip(&entry.preset, idx, scene, dataset_seed)?;
        let pieces = clip.segments(SEGMENT_SAMPLES);
        let labels = segment_labels(&ann, pieces.len());
        for (s, (piece, lab)) in pieces.iter().zip(labels).enumerate() {
            segments.push(Segment {
                clip_id: clip.clip_id.clone(),
                index: s,
                features: FeatureSource::Memory(Arc::new(extract_features(piece)?)),
                target: make_targets(model, &lab, SEGMENT_LABEL_FRAMES)?,
                labels: lab,
            });
        }
    }
    Ok(RoomData {
        room_id: entry.preset.room_id.clone(),
        split: entry.split,
        segments,
    })
}

/// Features and targets of a set of segments, batched.
#[derive(Debug, Clone)]
pub struct SeldBatch {
    /// `[B, 7, T, F]`.
    pub x: Tensor<f32>,
    /// `[B, T_out, 3·n_classes]`.
    pub y: Tensor<f32>,
}

impl SeldBatch {
    pub fn from_segments(segs: &[&Segment]) -> Result<Self> {
        let feats: Vec<Arc<FeatureTensor>> = segs.iter().map(|s| s.features.load()).collect::<Result<_>>()?;
        let refs: Vec<&FeatureTensor> = feats.iter().map(|f| f.as_ref()).collect();
        let targets: Vec<&Tensor<f32>> = segs.iter().map(|s| &s.target).collect();
        Ok(SeldBatch {
            x: batch_features(&refs)?,
            y: batch_targets(&targets)?,
        })
    }
}

/// The CRNN under MSE loss with batch-statistics normalization.
#[derive(Debug, Clone)]
pub struct CrnnLearner {
    pub cfg: ModelConfig,
}

impl Learner<f32> for CrnnLearner {
    type Batch = SeldBatch;
    type Aux = Vec<BatchStats<f32>>;

    fn loss<'t>(&self, params: &ParamSet<f32>, vars: &[Var<'t, f32>], batch: &SeldBatch) -> Result<(Var<'t, f32>, Self::Aux)> {
        let tape = vars.first().ok_or_else(|| Error::Invalid("model without parameters".into()))?.tape();
        let (pred, stats) = forward(&self.cfg, params, vars, tape.constant(batch.x.clone()), Mode::Train)?;
        Ok((seld_loss(pred, tape.constant(batch.y.clone()))?, stats))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub task_losses: Vec<f64>,
}

/// Supervised training over every segment of the training rooms.
pub fn pretrain(
    learner: &CrnnLearner,
    init: &ModelState,
    rooms: &[RoomData],
    cfg: &PretrainConfig,
    rng: &mut Rng,
    mut on_epoch: impl FnMut(&EpochLog, &ModelState) -> Result<()>,
) -> Result<ModelState> {
    let all: Vec<&Segment> = rooms.iter().flat_map(|r| r.segments.iter()).collect();
    if all.is_empty() {
        return Err(Error::Config("no training segments".into()));
    }
    let mut state = init.clone();
    let mut opt = AdamState::new(&state.params);
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut order: Vec<usize> = (0..all.len()).collect();
        order.shuffle(rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            if chunk.len() < 2 {
                continue; // batch norm needs two items
            }
            let segs: Vec<&Segment> = chunk.iter().map(|&i| all[i]).collect();
            let batch = SeldBatch::from_segments(&segs)?;
            let (loss, grads, stats) = loss_and_grad(learner, &state.params, &batch)?;
            let (o, p) = adamw_step(&opt, &state.params, &grads, lr, &cfg.adamw)?;
            opt = o;
            state = ModelState {
                params: p,
                bn: state.bn.updated(&stats)?,
            };
            total += loss;
            batches += 1;
        }
        let log = EpochLog {
            epoch,
            lr,
            loss: total / batches.max(1) as f64,
            task_losses: Vec::new(),
        };
        on_epoch(&log, &state)?;
    }
    Ok(state)
}

/// Meta-updates per epoch: explicit, or enough to draw every training
/// segment once in expectation.
pub fn steps_per_epoch(cfg: &MetaConfig, rooms: &[RoomData]) -> usize {
    if cfg.steps_per_epoch > 0 {
        return cfg.steps_per_epoch;
    }
    let total: usize = rooms.iter().map(|r| r.segments.len()).sum();
    total.div_ceil(cfg.rooms_per_batch * cfg.samples_per_room).max(1)
}

/// MAML over training rooms. Running statistics follow the query passes.
pub fn meta_train(
    learner: &CrnnLearner,
    init: &ModelState,
    rooms: &[RoomData],
    cfg: &MetaConfig,
    workers: usize,
    rng: &mut Rng,
    mut on_epoch: impl FnMut(&EpochLog, &ModelState) -> Result<()>,
) -> Result<ModelState> {
    cfg.validate()?;
    let sizes: Vec<(String, usize)> = rooms.iter().map(|r| (r.room_id.clone(), r.segments.len())).collect();
    let steps = steps_per_epoch(cfg, rooms);
    let mut state = init.clone();
    let mut opt = AdamState::new(&state.params);
    for epoch in 0..cfg.epochs {
        let step_cfg = cfg.step_config(epoch, workers);
        let mut losses = Vec::new();
        let mut task_losses = Vec::new();
        for _ in 0..steps {
            let draws = sample_task_batch(&sizes, cfg, rng)?;
            let mut data = Vec::with_capacity(draws.len());
            for d in &draws {
                let segs = &rooms[d.room].segments;
                let pick = |idx: &[usize]| idx.iter().map(|&i| &segs[i]).collect::<Vec<_>>();
                data.push((
                    SeldBatch::from_segments(&pick(&d.support))?,
                    SeldBatch::from_segments(&pick(&d.query))?,
                ));
            }
            let tasks: Vec<_> = data.iter().map(|(s, q)| (s, q)).collect();
            let (params, next_opt, log) = meta_step(learner, &state.params, &opt, &tasks, &step_cfg)?;
            let mut bn = state.bn.clone();
            for stats in &log.query_aux {
                bn = bn.updated(stats)?;
            }
            state = ModelState { params, bn };
            opt = next_opt;
            losses.push(log.meta_loss);
            task_losses = log.task_losses;
        }
        let log = EpochLog {
            epoch,
            lr: step_cfg.meta_lr,
            loss: losses.iter().sum::<f64>() / losses.len() as f64,
            task_losses,
        };
        on_epoch(&log, &state)?;
    }
    Ok(state)
}

/// Adapt the trainable parameters on a support set; shares the inner-loop
/// code path with meta-training.
pub fn finetune(learner: &CrnnLearner, state: &ModelState, support: &[&Segment], alpha: f64, steps: usize) -> Result<ModelState> {
    if steps == 0 {
        return Ok(state.clone());
    }
    let batch = SeldBatch::from_segments(support)?;
    Ok(ModelState {
        params: inner_adapt(learner, &state.params, &batch, alpha, steps)?.params,
        bn: state.bn.clone(),
    })
}

/// Result of adapting to and scoring one held-out room.
#[derive(Debug, Clone)]
pub struct RoomEval {
    pub room_id: String,
    pub accumulator: Accumulator,
    pub support_ids: Vec<String>,
    pub query_ids: Vec<String>,
    /// Eval-mode query MSE before and after adaptation.
    pub query_loss_before: f64,
    pub query_loss_after: f64,
    pub predictions: Vec<(String, Annotation)>,
    pub adapted: ModelState,
}

fn eval_mse(cfg: &ModelConfig, state: &ModelState, segs: &[&Segment]) -> Result<(f64, Vec<Tensor<f32>>)> {
    let feats: Vec<Arc<FeatureTensor>> = segs.iter().map(|s| s.features.load()).collect::<Result<_>>()?;
    let refs: Vec<&FeatureTensor> = feats.iter().map(|f| f.as_ref()).collect();
    let preds = predict(cfg, state, &refs, 16)?;
    let mut se = 0.0;
    let mut n = 0usize;
    for (p, s) in preds.iter().zip(segs) {
        for (a, b) in p.data().iter().zip(s.target.data()) {
            se += f64::from(a - b).powi(2);
        }
        n += p.len();
    }
    Ok((se / n as f64, preds))
}

/// Support = first `k_support` segments in filename order, query = the rest.
/// Adapt with `steps` SGD steps (0 = no adaptation) and score the query.
pub fn evaluate_room(
    learner: &CrnnLearner,
    state: &ModelState,
    room: &RoomData,
    k_support: usize,
    alpha: f64,
    steps: usize,
) -> Result<RoomEval> {
    let mut segs: Vec<&Segment> = room.segments.iter().collect();
    segs.sort_by(|a, b| a.clip_id.cmp(&b.clip_id).then(a.index.cmp(&b.index)));
    if segs.len() <= k_support {
        return Err(Error::RoomTooSmall {
            room: room.room_id.clone(),
            have: segs.len(),
            need: k_support + 1,
        });
    }
    let (support, query) = segs.split_at(k_support);
    let adapted = finetune(learner, state, support, alpha, steps)?;
    let (query_loss_before, _) = if steps == 0 {
        (f64::NAN, Vec::new())
    } else {
        eval_mse(&learner.cfg, state, query)?
    };
    let (query_loss_after, preds) = eval_mse(&learner.cfg, &adapted, query)?;
    let query_loss_before = if steps == 0 { query_loss_after } else { query_loss_before };
    let mut acc = Accumulator::new(learner.cfg.n_classes);
    let mut predictions = Vec::with_capacity(query.len());
    for (seg, p) in query.iter().zip(&preds) {
        let ann = decode(&learner.cfg, p, SEGMENT_LABEL_FRAMES, ACT_THRESHOLD)?;
        acc.push_annotations(&seg.labels, &ann)?;
        predictions.push((seg.id(), ann));
    }
    Ok(RoomEval {
        room_id: room.room_id.clone(),
        accumulator: acc,
        support_ids: support.iter().map(|s| s.id()).collect(),
        query_ids: query.iter().map(|s| s.id()).collect(),
        query_loss_before,
        query_loss_after,
        predictions,
        adapted,
    })
}

/// Fresh model state from the `init` stream.
pub fn init_state(cfg: &ModelConfig, rng: &mut Rng) -> Result<ModelState> {
    ModelState::init(cfg, rng)
}

/// Check that `bn` matches the model layout.
pub fn check_bn(cfg: &ModelConfig, bn: &BnState) -> Result<()> {
    if bn.layers.len() != cfg.n_bn() {
        return Err(Error::Misaligned(format!("{} BN layers, model has {}", bn.layers.len(), cfg.n_bn())));
    }
    Ok(())
}
