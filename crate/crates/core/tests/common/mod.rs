//! Shared oracles and fixtures. Every oracle here works on plain `f64`
//! slices with explicit loops, independent of the tape.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rpstn_core::heatmap::JointSet;
use rpstn_tensor::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `softmax_rows(M M^T)` for maps `[b, k, hw]`, all dot products by loops.
pub fn relation_oracle(m: &[f64], b: usize, k: usize, hw: usize) -> Vec<f64> {
    let mut out = vec![0.0; b * k * k];
    for bi in 0..b {
        for i in 0..k {
            let mut row = vec![0.0; k];
            for (j, r) in row.iter_mut().enumerate() {
                for p in 0..hw {
                    *r += m[(bi * k + i) * hw + p] * m[(bi * k + j) * hw + p];
                }
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
            let s: f64 = e.iter().sum();
            for j in 0..k {
                out[(bi * k + i) * k + j] = e[j] / s;
            }
        }
    }
    out
}

/// 1x1 convolution `[b, cin, hw]` by `[cout, cin]` plus optional bias.
pub fn pointwise_oracle(x: &[f64], b: usize, cin: usize, hw: usize, w: &[f64], cout: usize, bias: Option<&[f64]>) -> Vec<f64> {
    let mut out = vec![0.0; b * cout * hw];
    for bi in 0..b {
        for o in 0..cout {
            for p in 0..hw {
                let mut acc = bias.map_or(0.0, |bb| bb[o]);
                for c in 0..cin {
                    acc += w[o * cin + c] * x[(bi * cin + c) * hw + p];
                }
                out[(bi * cout + o) * hw + p] = acc;
            }
        }
    }
    out
}

/// Batch norm over `[b, c, hw]`: batch statistics when `running` is `None`,
/// otherwise the given `(mean, var)`.
pub fn batchnorm_oracle(
    x: &[f64],
    b: usize,
    c: usize,
    hw: usize,
    gamma: &[f64],
    beta: &[f64],
    running: Option<(&[f64], &[f64])>,
) -> Vec<f64> {
    let eps = 1e-5;
    let mut out = vec![0.0; x.len()];
    for ci in 0..c {
        let idx = |bi: usize, p: usize| (bi * c + ci) * hw + p;
        let (mean, var) = match running {
            Some((m, v)) => (m[ci], v[ci]),
            None => {
                let n = (b * hw) as f64;
                let mean = (0..b).flat_map(|bi| (0..hw).map(move |p| (bi, p))).map(|(bi, p)| x[idx(bi, p)]).sum::<f64>() / n;
                let var = (0..b)
                    .flat_map(|bi| (0..hw).map(move |p| (bi, p)))
                    .map(|(bi, p)| (x[idx(bi, p)] - mean).powi(2))
                    .sum::<f64>()
                    / n;
                (mean, var)
            }
        };
        for bi in 0..b {
            for p in 0..hw {
                out[idx(bi, p)] = gamma[ci] * (x[idx(bi, p)] - mean) / (var + eps).sqrt() + beta[ci];
            }
        }
    }
    out
}

/// Straight-line refinement: relations, `Conv_g`, `W_r G`, `Conv_o`,
/// residual, batch norm.
#[allow(clippy::too_many_arguments)]
pub fn refine_oracle(
    m: &[f64],
    b: usize,
    k: usize,
    hw: usize,
    w_g: &[f64],
    w_o: &[f64],
    gamma: &[f64],
    beta: &[f64],
    running: Option<(&[f64], &[f64])>,
) -> Vec<f64> {
    let rel = relation_oracle(m, b, k, hw);
    let g = pointwise_oracle(m, b, k, hw, w_g, k, None);
    let mut act = vec![0.0; b * k * hw];
    for bi in 0..b {
        for i in 0..k {
            for p in 0..hw {
                let mut acc = 0.0;
                for j in 0..k {
                    acc += rel[(bi * k + i) * k + j] * g[(bi * k + j) * hw + p];
                }
                act[(bi * k + i) * hw + p] = acc;
            }
        }
    }
    let o = pointwise_oracle(&act, b, k, hw, w_o, k, None);
    let z: Vec<f64> = o.iter().zip(m).map(|(a, b)| a + b).collect();
    batchnorm_oracle(&z, b, k, hw, gamma, beta, running)
}

/// Sliding-window correlation of one `h x w` plane with a `kh x kw`
/// template: output pixel `(y, x)` sees target `(y + i - (kh-1)/2, x + j - (kw-1)/2)`,
/// zero outside.
pub fn correlate_oracle(target: &[f64], h: usize, w: usize, kernel: &[f64], kh: usize, kw: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    let (pt, pl) = (((kh - 1) / 2) as i64, ((kw - 1) / 2) as i64);
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let mut acc = 0.0;
            for i in 0..kh as i64 {
                for j in 0..kw as i64 {
                    let (ty, tx) = (y + i - pt, x + j - pl);
                    if ty >= 0 && tx >= 0 && ty < h as i64 && tx < w as i64 {
                        acc += kernel[(i * kw as i64 + j) as usize] * target[(ty * w as i64 + tx) as usize];
                    }
                }
            }
            out[(y * w as i64 + x) as usize] = acc;
        }
    }
    out
}

/// Hand-built 3-frame, 2-joint PCK case with mixed visibility.
pub struct CraftedPck {
    pub predictions: Vec<JointSet>,
    pub truths: Vec<JointSet>,
    pub boxes: Vec<[f32; 4]>,
}

/// Threshold 0.2, bbox norm. Frame thresholds are 20, 12 and 16 pixels.
///
/// | frame | joint 0                 | joint 1                  |
/// |-------|-------------------------|--------------------------|
/// | 0     | visible, error 15: hit  | visible, error 25: miss  |
/// | 1     | hidden, error 113: miss | visible, error 12: hit   |
/// | 2     | visible, error 16: hit  | hidden, error 0: hit     |
pub fn crafted_pck() -> CraftedPck {
    CraftedPck {
        truths: vec![
            JointSet::new(vec![[10.0, 10.0], [50.0, 20.0]], vec![true, true]),
            JointSet::new(vec![[10.0, 10.0], [30.0, 30.0]], vec![false, true]),
            JointSet::new(vec![[20.0, 20.0], [60.0, 40.0]], vec![true, false]),
        ],
        predictions: vec![
            JointSet::all_visible(vec![[25.0, 10.0], [50.0, 45.0]]),
            JointSet::all_visible(vec![[90.0, 90.0], [42.0, 30.0]]),
            JointSet::all_visible(vec![[20.0, 36.0], [60.0, 40.0]]),
        ],
        boxes: vec![[0.0, 0.0, 100.0, 50.0], [0.0, 0.0, 40.0, 60.0], [10.0, 10.0, 90.0, 70.0]],
    }
}

/// Expected `(per-joint, mPCK)` of [`crafted_pck`] for visible, all and
/// occluded subsets, enumerated from the table above.
pub const CRAFTED_VISIBLE: ([f64; 2], f64) = ([1.0, 0.5], 0.75);
pub const CRAFTED_ALL: ([f64; 2], f64) = ([2.0 / 3.0, 2.0 / 3.0], 2.0 / 3.0);
pub const CRAFTED_OCCLUDED: ([f64; 2], f64) = ([0.0, 1.0], 0.5);
