//! Parameter layout of the full network and the sequence rollout.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rpstn_tensor::{BnStats, Element, Mode, ParamId, ParamStore, Session, Tape, Tensor, Var};

use crate::backbone::{self, BackboneParams, BackboneVars};
use crate::config::{Ablation, ModelConfig};
use crate::error::{Error, Result};
use crate::jre::{self, JreParams, JreVars};
use crate::jrpsp::{self, JrpspParams, JrpspVars};
use crate::synth::PoseSequenceSample;

/// Parameter handles of every module. All modules are always allocated, in
/// the same order, so ablations start from identical weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub backbone: BackboneParams,
    pub jre: JreParams,
    pub jrpsp: JrpspParams,
}

impl Layout {
    pub fn build<T: Element>(cfg: &ModelConfig) -> (Self, ParamStore<T>) {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let backbone = BackboneParams::new(&mut store, &mut rng, cfg.feature_channels, cfg.joints);
        let jre = JreParams::new(&mut store, &mut rng, cfg.joints);
        let jrpsp = JrpspParams::new(
            &mut store,
            &mut rng,
            cfg.feature_channels,
            cfg.joints,
            cfg.channels,
            cfg.distill_convs,
        );
        (Self { backbone, jre, jrpsp }, store)
    }

    /// Trunk and initializer head, the parameters of the pretraining stage.
    pub fn initializer_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.backbone.trunk.iter().flat_map(|&(w, b)| [w, b]).collect();
        ids.extend(self.backbone.head_ids());
        ids
    }
}

/// Tape outputs of one rollout.
#[derive(Debug, Clone)]
pub struct RolloutVars {
    /// Refined heatmaps `M'_t`, one per frame.
    pub refined: Vec<Var>,
    /// `W_r` per frame; `None` when the relation branch is ablated.
    pub relations: Vec<Option<Var>>,
}

/// Every parameter of the network placed on one tape.
#[derive(Debug, Clone)]
pub struct NetVars {
    pub backbone: BackboneVars,
    pub jre: JreVars,
    pub jrpsp: JrpspVars,
}

impl Layout {
    pub fn bind<T: Element>(&self, s: &mut Session<T>) -> rpstn_tensor::Result<NetVars> {
        Ok(NetVars {
            backbone: self.backbone.bind(s)?,
            jre: self.jre.bind(s)?,
            jrpsp: self.jrpsp.bind(s)?,
        })
    }
}

/// Frame 1: `BN(R(P(I_1)))`. Later frames: aggregate the previous features
/// and refined maps, distill a template, correlate it with the new frame's
/// features and refine. With `no_jrpsp` every frame goes through the
/// initializer instead.
pub fn rollout_on<T: Element>(
    tape: &mut Tape<T>,
    vars: &NetVars,
    bn: &mut BnStats<T>,
    mode: Mode,
    ablation: Ablation,
    frames: &[Var],
) -> rpstn_tensor::Result<RolloutVars> {
    let mut refined = Vec::with_capacity(frames.len());
    let mut relations = Vec::with_capacity(frames.len());
    let mut prev: Option<(Var, Var)> = None;
    for &frame in frames {
        let (features, pseudo) = match prev {
            Some((f_prev, m_prev)) if !ablation.no_jrpsp => {
                let jv = &vars.jrpsp;
                let carrier = jrpsp::aggregate(tape, f_prev, m_prev, jv.aggregate)?;
                let template = jrpsp::distill(tape, carrier, &jv.distill)?;
                let f = backbone::extract_features(tape, frame, &vars.backbone.trunk)?;
                (f, jrpsp::propagate(tape, template, f, jv.head)?)
            }
            _ => backbone::initial_pose(tape, frame, &vars.backbone)?,
        };
        let (z, rel) = if ablation.no_jre {
            (pseudo, None)
        } else {
            let (z, rel) = jre::excite(tape, pseudo, vars.jre.w_g, vars.jre.w_o)?;
            (z, Some(rel))
        };
        let m_refined = tape.batchnorm2d(z, vars.jre.gamma, vars.jre.beta, bn, mode)?;
        refined.push(m_refined);
        relations.push(rel);
        prev = Some((features, m_refined));
    }
    Ok(RolloutVars { refined, relations })
}

/// [`rollout_on`] with parameters and statistics taken from a session.
pub fn rollout<T: Element>(
    s: &mut Session<T>,
    layout: &Layout,
    ablation: Ablation,
    frames: &[Var],
) -> rpstn_tensor::Result<RolloutVars> {
    let vars = layout.bind(s)?;
    let mode = s.mode();
    let (tape, bn) = s.tape_and_stats(layout.jre.stats);
    rollout_on(tape, &vars, bn, mode, ablation, frames)
}

/// Frame `t` of every sample stacked into `[B,3,H,W]`.
pub fn frame_batch(samples: &[&PoseSequenceSample], t: usize) -> Result<Tensor<f32>> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Data("empty batch".into()))?
        .frames
        .shape();
    let (h, w) = (first[2], first[3]);
    let plane = 3 * h * w;
    let mut data = Vec::with_capacity(samples.len() * plane);
    for s in samples {
        if s.frames.shape()[2..] != [h, w] || t >= s.frame_count() {
            return Err(Error::Data("samples in one batch differ in shape".into()));
        }
        data.extend_from_slice(&s.frames.data()[t * plane..(t + 1) * plane]);
    }
    Ok(Tensor::new(&[samples.len(), 3, h, w], data)?)
}

/// Per-frame refined heatmaps `[B,K,h,w]` and relation matrices `[B,K,K]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutOutput {
    pub refined: Vec<Tensor<f32>>,
    pub relations: Vec<Option<Tensor<f32>>>,
}

/// A configured network with its weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub layout: Layout,
    pub store: ParamStore<f32>,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (layout, store) = Layout::build(&config);
        Ok(Self { config, layout, store })
    }

    /// Check that `samples` fit the configured geometry.
    pub fn check_samples(&self, samples: &[&PoseSequenceSample]) -> Result<()> {
        let c = &self.config;
        for s in samples {
            let shape = s.frames.shape();
            if shape[1..] != [3, c.height, c.width] {
                return Err(Error::Shape(format!(
                    "frames {:?} do not match the model's 3x{}x{} input",
                    shape, c.height, c.width
                )));
            }
            if s.joints.first().map(|j| j.len()) != Some(c.joints) {
                return Err(Error::Shape(format!(
                    "data has {} joints, model expects {}",
                    s.joints.first().map_or(0, |j| j.len()),
                    c.joints
                )));
            }
        }
        Ok(())
    }

    /// Eval-mode rollout over however many frames the samples carry.
    pub fn rollout(&mut self, samples: &[&PoseSequenceSample]) -> Result<RolloutOutput> {
        self.check_samples(samples)?;
        let t_len = samples.first().map_or(0, |s| s.frame_count());
        let ablation = self.config.ablation;
        let layout = self.layout.clone();
        let mut s = Session::new(&mut self.store, Mode::Eval);
        let frames = (0..t_len)
            .map(|t| Ok(s.input(frame_batch(samples, t)?)?))
            .collect::<Result<Vec<_>>>()?;
        let out = rollout(&mut s, &layout, ablation, &frames)?;
        Ok(RolloutOutput {
            refined: out.refined.iter().map(|&v| s.value(v).clone()).collect(),
            relations: out
                .relations
                .iter()
                .map(|r| r.map(|v| s.value(v).clone()))
                .collect(),
        })
    }

    /// Eval-mode initializer heatmaps `P(I)` for a `[B,3,H,W]` batch.
    pub fn initial_pose(&mut self, frames: Tensor<f32>) -> Result<Tensor<f32>> {
        let layout = self.layout.clone();
        let mut s = Session::new(&mut self.store, Mode::Eval);
        let x = s.input(frames)?;
        let bb = layout.backbone.bind(&mut s)?;
        let (_, m) = backbone::initial_pose(s.tape_mut(), x, &bb)?;
        Ok(s.value(m).clone())
    }
}
