//! Joint-relation guided pose semantics propagator.
//!
//! The previous frame's features and refined heatmaps are fused by a 1x1
//! conv, distilled into a small whole-pose template, and the template is
//! correlated channel by channel with the next frame's features.

use rand::Rng;
use rpstn_tensor::{Element, ParamId, ParamStore, Result, Session, Tape, Var};

use crate::init;

/// Pools in the distiller; the template is 1/8 of the heatmap extent.
pub const DISTILL_POOLS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct JrpspParams {
    pub aggregate: (ParamId, ParamId),
    pub distill: Vec<(ParamId, ParamId)>,
    pub head: (ParamId, ParamId),
}

#[derive(Debug, Clone)]
pub struct JrpspVars {
    pub aggregate: (Var, Var),
    pub distill: Vec<(Var, Var)>,
    pub head: (Var, Var),
}

impl JrpspParams {
    /// `distill_convs` is 4 for the full distiller, 3 to drop the final conv.
    pub fn new<T: Element, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        feature_channels: usize,
        joints: usize,
        channels: usize,
        distill_convs: usize,
    ) -> Self {
        let aggregate = init::conv(store, rng, "jrpsp.aggregate", feature_channels + joints, channels, 1);
        let distill = (0..distill_convs)
            .map(|i| init::conv(store, rng, &format!("jrpsp.distill{}", i + 1), channels, channels, 3))
            .collect();
        let head = init::conv(store, rng, "jrpsp.head", channels, joints, 1);
        Self {
            aggregate,
            distill,
            head,
        }
    }

    pub fn bind<T: Element>(&self, s: &mut Session<T>) -> Result<JrpspVars> {
        let pair = |s: &mut Session<T>, (w, b): (ParamId, ParamId)| Ok::<_, rpstn_tensor::TensorError>((s.param(w)?, s.param(b)?));
        Ok(JrpspVars {
            aggregate: pair(s, self.aggregate)?,
            distill: self.distill.iter().map(|&p| pair(s, p)).collect::<Result<_>>()?,
            head: pair(s, self.head)?,
        })
    }
}

/// `X^a = Conv_a(f ++ M')`.
pub fn aggregate<T: Element>(tape: &mut Tape<T>, features: Var, heatmaps: Var, conv: (Var, Var)) -> Result<Var> {
    let x = tape.concat_channels(&[features, heatmaps])?;
    tape.conv2d(x, conv.0, Some(conv.1), 1, 0)
}

/// (conv 3x3, ReLU, pool) three times, then a final conv when present.
pub fn distill<T: Element>(tape: &mut Tape<T>, x: Var, convs: &[(Var, Var)]) -> Result<Var> {
    let mut x = x;
    for (i, &(w, b)) in convs.iter().enumerate() {
        x = tape.conv2d(x, w, Some(b), 1, 1)?;
        if i < DISTILL_POOLS {
            x = tape.relu(x)?;
            x = tape.maxpool2(x)?;
        }
    }
    Ok(x)
}

/// `M_{t+1} = Conv_d(template (*) F(I_{t+1}))`, keeping the target extent.
pub fn propagate<T: Element>(tape: &mut Tape<T>, template: Var, next_features: Var, head: (Var, Var)) -> Result<Var> {
    let corr = tape.depthwise_correlate(next_features, template)?;
    tape.conv2d(corr, head.0, Some(head.1), 1, 0)
}

/// Receptive field, in input cells, of a stack of 3x3 stride-1 convs where
/// the first `pools` convs are each followed by a 2x2 stride-2 pool.
pub fn receptive_field(convs: usize, pools: usize) -> usize {
    let (mut rf, mut jump) = (1, 1);
    for i in 0..convs {
        rf += 2 * jump;
        if i < pools {
            rf += jump;
            jump *= 2;
        }
    }
    rf
}
