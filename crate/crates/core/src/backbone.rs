//! Feature trunk and pose-initializer head.
//!
//! Trunk: four 3x3 convs (3 -> 16 -> 32 -> 32 -> C_f), ReLU after each,
//! with 2x2 max-pools after the first two to reach stride 4. Head: one 1x1
//! conv C_f -> K.

use rand::Rng;
use rpstn_tensor::{Element, ParamId, ParamStore, Result, Session, Tape, Var};

use crate::init;

pub const TRUNK_CHANNELS: [usize; 3] = [16, 32, 32];
pub const OUTPUT_STRIDE: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneParams {
    pub trunk: Vec<(ParamId, ParamId)>,
    pub head: (ParamId, ParamId),
    pub feature_channels: usize,
}

/// Tape handles of [`BackboneParams`] for one pass.
#[derive(Debug, Clone)]
pub struct BackboneVars {
    pub trunk: Vec<(Var, Var)>,
    pub head: (Var, Var),
}

impl BackboneParams {
    pub fn new<T: Element, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, feature_channels: usize, joints: usize) -> Self {
        let widths = [3, TRUNK_CHANNELS[0], TRUNK_CHANNELS[1], TRUNK_CHANNELS[2], feature_channels];
        let trunk = (0..4)
            .map(|i| init::conv(store, rng, &format!("backbone.conv{}", i + 1), widths[i], widths[i + 1], 3))
            .collect();
        let w = store.add("backbone.head.weight", init::normal(rng, &[joints, feature_channels, 1, 1], 1e-3));
        let b = store.add("backbone.head.bias", rpstn_tensor::Tensor::zeros(&[joints]));
        Self {
            trunk,
            head: (w, b),
            feature_channels,
        }
    }

    pub fn head_ids(&self) -> [ParamId; 2] {
        [self.head.0, self.head.1]
    }

    pub fn bind<T: Element>(&self, s: &mut Session<T>) -> Result<BackboneVars> {
        let trunk = self
            .trunk
            .iter()
            .map(|&(w, b)| Ok((s.param(w)?, s.param(b)?)))
            .collect::<Result<_>>()?;
        Ok(BackboneVars {
            trunk,
            head: (s.param(self.head.0)?, s.param(self.head.1)?),
        })
    }
}

/// `F(I)`: `[B,3,H,W]` -> `[B,C_f,H/4,W/4]`.
pub fn extract_features<T: Element>(tape: &mut Tape<T>, frame: Var, trunk: &[(Var, Var)]) -> Result<Var> {
    let mut x = frame;
    for (i, &(w, b)) in trunk.iter().enumerate() {
        x = tape.conv2d(x, w, Some(b), 1, 1)?;
        x = tape.relu(x)?;
        if i < 2 {
            x = tape.maxpool2(x)?;
        }
    }
    Ok(x)
}

/// Initializer head on trunk features: `[B,C_f,h,w]` -> `[B,K,h,w]`.
pub fn pose_head<T: Element>(tape: &mut Tape<T>, features: Var, head: (Var, Var)) -> Result<Var> {
    tape.conv2d(features, head.0, Some(head.1), 1, 0)
}

/// `P(I)` sharing the trunk with [`extract_features`]; returns both.
pub fn initial_pose<T: Element>(tape: &mut Tape<T>, frame: Var, vars: &BackboneVars) -> Result<(Var, Var)> {
    let f = extract_features(tape, frame, &vars.trunk)?;
    let m = pose_head(tape, f, vars.head)?;
    Ok((f, m))
}
