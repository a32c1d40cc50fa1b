//! Joint relation extractor.
//!
//! `W_r = softmax_rows(M M^T)` over flattened joint maps, then
//! `BN(Conv_o(W_r Conv_g(M)) + M)`.

use rand::Rng;
use rpstn_tensor::{BnStats, Element, Mode, ParamId, ParamStore, Result, Session, StatsId, Tape, Tensor, Var};

use crate::init;

#[derive(Debug, Clone, PartialEq)]
pub struct JreParams {
    pub joints: usize,
    pub w_g: ParamId,
    pub w_o: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stats: StatsId,
}

/// Tape handles of [`JreParams`] for one pass.
#[derive(Debug, Clone, Copy)]
pub struct JreVars {
    pub w_g: Var,
    pub w_o: Var,
    pub gamma: Var,
    pub beta: Var,
}

impl JreParams {
    pub fn new<T: Element, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, joints: usize) -> Self {
        let k = joints;
        let w_g = store.add("jre.conv_g.weight", init::normal(rng, &[k, k, 1, 1], (1.0 / k as f64).sqrt()));
        let w_o = store.add("jre.conv_o.weight", init::normal(rng, &[k, k, 1, 1], 1e-2));
        let gamma = store.add("jre.bn.gamma", Tensor::full(&[k], T::one()));
        let beta = store.add("jre.bn.beta", Tensor::zeros(&[k]));
        let stats = store.add_stats("jre.bn", k);
        Self {
            joints,
            w_g,
            w_o,
            gamma,
            beta,
            stats,
        }
    }

    /// Trainable weights outside batch norm.
    pub fn parameter_count<T: Element>(&self, store: &ParamStore<T>) -> usize {
        store.param(self.w_g).value.len() + store.param(self.w_o).value.len()
    }

    pub fn bind<T: Element>(&self, s: &mut Session<T>) -> Result<JreVars> {
        Ok(JreVars {
            w_g: s.param(self.w_g)?,
            w_o: s.param(self.w_o)?,
            gamma: s.param(self.gamma)?,
            beta: s.param(self.beta)?,
        })
    }
}

fn flatten<T: Element>(tape: &mut Tape<T>, m: Var) -> Result<(Var, [usize; 4])> {
    let s = tape.value(m).shape().to_vec();
    if s.len() != 4 {
        return Err(rpstn_tensor::TensorError::Dimension(format!(
            "joint heatmaps must be rank 4, got {s:?}"
        )));
    }
    let shape = [s[0], s[1], s[2], s[3]];
    Ok((tape.reshape(m, &[s[0], s[1], s[2] * s[3]])?, shape))
}

/// `[B,K,H,W]` -> row-softmaxed joint correlations `[B,K,K]`.
pub fn relation_matrix<T: Element>(tape: &mut Tape<T>, pseudo: Var) -> Result<Var> {
    let (flat, _) = flatten(tape, pseudo)?;
    let flat_t = tape.transpose_last2(flat)?;
    let raw = tape.matmul(flat, flat_t)?;
    tape.softmax_rows(raw)
}

/// `Z = Conv_o(W_r Conv_g(M)) + M` before batch norm; also returns `W_r`.
pub fn excite<T: Element>(tape: &mut Tape<T>, pseudo: Var, w_g: Var, w_o: Var) -> Result<(Var, Var)> {
    let relations = relation_matrix(tape, pseudo)?;
    let g = tape.conv2d(pseudo, w_g, None, 1, 0)?;
    let (g_flat, [b, k, h, w]) = flatten(tape, g)?;
    let act = tape.matmul(relations, g_flat)?;
    let act = tape.reshape(act, &[b, k, h, w])?;
    let o = tape.conv2d(act, w_o, None, 1, 0)?;
    Ok((tape.add(o, pseudo)?, relations))
}

/// Refined heatmaps `BN(Z)`; with `enabled == false` the relation branch is
/// skipped and the result is `BN(M)`.
pub fn refine<T: Element>(
    tape: &mut Tape<T>,
    pseudo: Var,
    vars: &JreVars,
    stats: &mut BnStats<T>,
    mode: Mode,
    enabled: bool,
) -> Result<Var> {
    let z = if enabled {
        excite(tape, pseudo, vars.w_g, vars.w_o)?.0
    } else {
        pseudo
    };
    tape.batchnorm2d(z, vars.gamma, vars.beta, stats, mode)
}
