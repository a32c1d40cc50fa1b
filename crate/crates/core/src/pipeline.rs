//! Sequence loss, two-stage training, prediction and occluded inference.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rpstn_tensor::{adam_step, AdamSettings, Element, Mode, Session, Tape, Tensor, TensorError, Var};

use crate::backbone;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::heatmap::{self, JointHeatmaps, JointSet};
use crate::model::{self, frame_batch, Model};
use crate::pck::{self, FrameTruth, Norm, PckReport, Subset};
use crate::synth::{apply_occluders, Dataset, Occluder, PoseSequenceSample, JOINT_NAMES};

/// Mean over frames of the per-frame MSE.
pub fn sequence_loss<T: Element>(tape: &mut Tape<T>, predicted: &[Var], target: &[Var]) -> rpstn_tensor::Result<Var> {
    if predicted.len() != target.len() || predicted.is_empty() {
        return Err(TensorError::Dimension(format!(
            "sequence_loss: {} predicted frames for {} targets",
            predicted.len(),
            target.len()
        )));
    }
    let mut total: Option<Var> = None;
    for (&p, &t) in predicted.iter().zip(target) {
        let l = tape.mse(p, t)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, l)?,
            None => l,
        });
    }
    tape.mul_scalar(total.expect("non-empty"), T::from_f64(1.0 / predicted.len() as f64))
}

/// [`sequence_loss`] evaluated on plain heatmaps.
pub fn sequence_loss_value(predicted: &[JointHeatmaps], target: &[JointHeatmaps]) -> Result<f64> {
    let mut tape = Tape::<f32>::new();
    let p = predicted
        .iter()
        .map(|m| tape.constant(m.maps.clone()))
        .collect::<rpstn_tensor::Result<Vec<_>>>()?;
    let t = target
        .iter()
        .map(|m| tape.constant(m.maps.clone()))
        .collect::<rpstn_tensor::Result<Vec<_>>>()?;
    let loss = sequence_loss(&mut tape, &p, &t)?;
    Ok(tape.value(loss).data()[0] as f64)
}

/// Ground-truth maps of frame `t` for a batch, `[B,K,h,w]`.
pub fn target_batch(cfg: &ModelConfig, samples: &[&PoseSequenceSample], t: usize) -> Result<Tensor<f32>> {
    let (h, w) = (cfg.heatmap_height(), cfg.heatmap_width());
    let block = cfg.joints * h * w;
    let mut data = vec![0.0f32; samples.len() * block];
    for (i, s) in samples.iter().enumerate() {
        heatmap::render_into(
            &s.joints[t],
            cfg.sigma,
            cfg.stride,
            cfg.height,
            cfg.width,
            &mut data[i * block..(i + 1) * block],
        )?;
    }
    Ok(Tensor::new(&[samples.len(), cfg.joints, h, w], data)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Pretrain,
    Sequence,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub stage: Stage,
    /// 1-based within the stage.
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    /// mPCK@0.2 (bbox) on the validation set, when one is given.
    pub val_mpck: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub model: Model,
    pub log: Vec<EpochLog>,
}

const EVAL_BATCH: usize = 16;
const VAL_GAMMA: f64 = 0.2;

fn diverged(epoch: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Tensor(TensorError::NonFinite(reason)) => Error::Training { epoch, reason },
        other => other,
    }
}

/// Mark `ids` trainable and, when `only`, freeze everything else.
fn set_trainable(model: &mut Model, ids: &[rpstn_tensor::ParamId], only: bool) {
    let mut keep = vec![!only; model.store.params().len()];
    for id in ids {
        keep[id.index()] = true;
    }
    for (p, k) in model.store.params_mut().iter_mut().zip(keep) {
        p.trainable = k;
    }
}

fn pretrain_epoch(model: &mut Model, data: &Dataset, rng: &mut ChaCha8Rng, epoch: usize) -> Result<f64> {
    let cfg = model.config.clone();
    let mut order: Vec<(usize, usize)> = (0..data.len())
        .flat_map(|i| (0..data.frames).map(move |t| (i, t)))
        .collect();
    order.shuffle(rng);
    let layout = model.layout.clone();
    let settings = AdamSettings::default();
    let (mut sum, mut batches) = (0.0, 0usize);
    for chunk in order.chunks(cfg.batch_size) {
        let mut frames = Vec::with_capacity(chunk.len());
        let mut targets = Vec::with_capacity(chunk.len());
        for &(i, t) in chunk {
            let s = &data.samples[i];
            frames.push(s.frame(t));
            targets.push(target_batch(&cfg, &[s], t)?.select_first(0)?);
        }
        let loss = {
            let mut s = Session::new(&mut model.store, Mode::Train);
            let x = s.input(Tensor::stack(&frames)?)?;
            let y = s.input(Tensor::stack(&targets)?)?;
            let bb = layout.backbone.bind(&mut s)?;
            let (_, m) = backbone::initial_pose(s.tape_mut(), x, &bb)?;
            let loss = s.tape_mut().mse(m, y)?;
            s.backward(loss)?;
            s.value(loss).data()[0] as f64
        };
        if !loss.is_finite() {
            return Err(Error::Training {
                epoch,
                reason: format!("pretraining loss {loss}"),
            });
        }
        adam_step(model.store.params_mut(), cfg.pretrain_lr, settings);
        sum += loss;
        batches += 1;
    }
    Ok(sum / batches as f64)
}

fn sequence_epoch(model: &mut Model, data: &Dataset, rng: &mut ChaCha8Rng, epoch: usize, lr: f64) -> Result<f64> {
    let cfg = model.config.clone();
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    let layout = model.layout.clone();
    let settings = AdamSettings::default();
    let (mut sum, mut batches) = (0.0, 0usize);
    for chunk in order.chunks(cfg.batch_size) {
        let batch: Vec<&PoseSequenceSample> = chunk.iter().map(|&i| &data.samples[i]).collect();
        let loss = {
            let mut s = Session::new(&mut model.store, Mode::Train);
            let mut frames = Vec::with_capacity(data.frames);
            let mut targets = Vec::with_capacity(data.frames);
            for t in 0..data.frames {
                frames.push(s.input(frame_batch(&batch, t)?)?);
                targets.push(s.input(target_batch(&cfg, &batch, t)?)?);
            }
            let out = model::rollout(&mut s, &layout, cfg.ablation, &frames)?;
            let loss = sequence_loss(s.tape_mut(), &out.refined, &targets)?;
            s.backward(loss)?;
            s.value(loss).data()[0] as f64
        };
        if !loss.is_finite() {
            return Err(Error::Training {
                epoch,
                reason: format!("sequence loss {loss}"),
            });
        }
        adam_step(model.store.params_mut(), lr, settings);
        sum += loss;
        batches += 1;
    }
    Ok(sum / batches as f64)
}

fn reset_optimizer(model: &mut Model) {
    for p in model.store.params_mut() {
        p.first_moment.iter_mut().for_each(|v| *v = 0.0);
        p.second_moment.iter_mut().for_each(|v| *v = 0.0);
        p.step = 0;
        p.zero_grad();
    }
}

/// Stage 1 fits trunk and head on single frames (skipped with `no_init`).
/// Stage 2 trains the whole network on sequences with a fresh optimizer.
/// `on_epoch` sees each log entry as it is produced.
pub fn train(
    cfg: &ModelConfig,
    data: &Dataset,
    validation: Option<&Dataset>,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<Trained> {
    if data.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let mut model = Model::new(cfg.clone())?;
    let refs: Vec<&PoseSequenceSample> = data.samples.iter().collect();
    model.check_samples(&refs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut log = Vec::new();
    let init_ids = model.layout.initializer_ids();
    let head_ids = model.layout.backbone.head_ids();

    if !cfg.ablation.no_init {
        set_trainable(&mut model, &init_ids, true);
        for epoch in 1..=cfg.pretrain_epochs {
            let loss = pretrain_epoch(&mut model, data, &mut rng, epoch).map_err(diverged(epoch))?;
            let val_mpck = match validation {
                Some(v) => Some(initializer_pck(&mut model, v, VAL_GAMMA, Norm::Bbox)?.mpck_or_zero()),
                None => None,
            };
            let entry = EpochLog {
                stage: Stage::Pretrain,
                epoch,
                lr: cfg.pretrain_lr,
                loss,
                val_mpck,
            };
            on_epoch(&entry);
            log.push(entry);
        }
    }

    set_trainable(&mut model, &[], false);
    if cfg.ablation.no_init || cfg.freeze_init {
        for id in head_ids {
            model.store.param_mut(id).trainable = false;
        }
    }
    reset_optimizer(&mut model);
    for epoch in 1..=cfg.epochs {
        let lr = cfg.lr_at(epoch - 1);
        let loss = sequence_epoch(&mut model, data, &mut rng, epoch, lr).map_err(diverged(epoch))?;
        let val_mpck = match validation {
            Some(v) => Some(evaluate(&mut model, v, VAL_GAMMA, Norm::Bbox, Subset::Visible)?.mpck_or_zero()),
            None => None,
        };
        let entry = EpochLog {
            stage: Stage::Sequence,
            epoch,
            lr,
            loss,
            val_mpck,
        };
        on_epoch(&entry);
        log.push(entry);
    }
    Ok(Trained { model, log })
}

fn decode_batch(maps: &Tensor<f32>, stride: usize) -> Vec<JointSet> {
    heatmap::decode(&JointHeatmaps {
        maps: maps.clone(),
        stride,
    })
}

/// Decoded joints per sample and frame.
pub fn predict(model: &mut Model, data: &Dataset) -> Result<Vec<Vec<JointSet>>> {
    let stride = model.config.stride;
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.samples.chunks(EVAL_BATCH) {
        let refs: Vec<&PoseSequenceSample> = chunk.iter().collect();
        let r = model.rollout(&refs)?;
        let per_frame: Vec<Vec<JointSet>> = r.refined.iter().map(|m| decode_batch(m, stride)).collect();
        for b in 0..chunk.len() {
            out.push(per_frame.iter().map(|f| f[b].clone()).collect());
        }
    }
    Ok(out)
}

/// Score per-sample, per-frame predictions against a dataset.
pub fn score(
    predictions: &[Vec<JointSet>],
    data: &Dataset,
    gammas: &[f64],
    norm: Norm,
    subset: Subset,
) -> Result<Vec<PckReport>> {
    if predictions.len() != data.len() {
        return Err(Error::Shape(format!(
            "{} predicted samples for {} in the dataset",
            predictions.len(),
            data.len()
        )));
    }
    let preds: Vec<JointSet> = predictions.iter().flatten().cloned().collect();
    let truths: Vec<FrameTruth> = data
        .samples
        .iter()
        .flat_map(|s| s.joints.iter().zip(&s.bbox).map(|(j, &b)| FrameTruth { joints: j, bbox: b }))
        .collect();
    let names = joint_names(data.joints);
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    pck::pck_sweep(&preds, &truths, &names, gammas, norm, subset, data.len())
}

/// Joint names for a `k`-joint skeleton.
pub fn joint_names(k: usize) -> Vec<String> {
    if k == JOINT_NAMES.len() {
        JOINT_NAMES.iter().map(|s| s.to_string()).collect()
    } else {
        (0..k).map(|i| format!("joint{i}")).collect()
    }
}

/// Rollout PCK at one threshold.
pub fn evaluate(model: &mut Model, data: &Dataset, gamma: f64, norm: Norm, subset: Subset) -> Result<PckReport> {
    let preds = predict(model, data)?;
    Ok(score(&preds, data, &[gamma], norm, subset)?.remove(0))
}

/// PCK of the initializer alone, applied to every frame independently.
pub fn initializer_pck(model: &mut Model, data: &Dataset, gamma: f64, norm: Norm) -> Result<PckReport> {
    let stride = model.config.stride;
    let mut preds = Vec::with_capacity(data.len());
    for chunk in data.samples.chunks(EVAL_BATCH) {
        let refs: Vec<&PoseSequenceSample> = chunk.iter().collect();
        let mut per_frame = Vec::with_capacity(data.frames);
        for t in 0..data.frames {
            let maps = model.initial_pose(frame_batch(&refs, t)?)?;
            per_frame.push(decode_batch(&maps, stride));
        }
        for b in 0..chunk.len() {
            preds.push(per_frame.iter().map(|f| f[b].clone()).collect::<Vec<_>>());
        }
    }
    Ok(score(&preds, data, &[gamma], norm, Subset::Visible)?.remove(0))
}

/// Paint `occluders` onto a copy of the sample and roll it out.
pub fn infer_occluded(model: &mut Model, sample: &PoseSequenceSample, occluders: &[Occluder]) -> Result<Vec<JointSet>> {
    let mut masked = sample.clone();
    apply_occluders(&mut masked.frames, occluders);
    let r = model.rollout(&[&masked])?;
    Ok(r.refined
        .iter()
        .map(|m| decode_batch(m, model.config.stride).remove(0))
        .collect())
}
