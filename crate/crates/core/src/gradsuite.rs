//! Finite-difference gradient cases for the network modules, on top of the
//! per-op cases of the tensor crate.

use rand_chacha::ChaCha8Rng;
use rpstn_tensor::gradcheck::{self, projected, random_tensor, Case, CaseFn, CaseResult};
use rpstn_tensor::{BnStats, Mode, Tape, Var};

use crate::backbone::{self, BackboneVars};
use crate::config::Ablation;
use crate::jre::{self, JreVars};
use crate::jrpsp::{self, JrpspVars};
use crate::model::{rollout_on, NetVars};
use crate::pipeline::sequence_loss;

pub const TRIALS: usize = 5;
pub const SEED: u64 = 2024;

fn pairs(v: &[Var]) -> Vec<(Var, Var)> {
    v.chunks(2).map(|c| (c[0], c[1])).collect()
}

fn conv_shapes(widths: &[usize], k: usize) -> Vec<Vec<usize>> {
    widths
        .windows(2)
        .flat_map(|w| [vec![w[1], w[0], k, k], vec![w[1]]])
        .collect()
}

/// Tiny end-to-end network: 2 feature channels, 3 joints, 32x32 frames.
///
/// Both heatmap heads are scaled by [`HEAD_SCALES`] so the relation logits stay
/// O(1); a saturated softmax would leave gradients at rounding level. Without
/// the relation branch the head biases feed train-mode batch norm directly,
/// which removes per-channel constants, so their gradient is identically
/// zero; there they enter as fixed constants and [`head_bias_gradients`]
/// checks that they receive nothing.
fn rollout_case(name: &'static str, ablation: Ablation) -> Case {
    let mut shapes = rollout_shapes();
    if !ablation.no_jre {
        shapes.insert(9, vec![ROLLOUT_K]);
        shapes.push(vec![ROLLOUT_K]);
    }
    Case {
        name,
        shapes,
        build: Box::new(move |rng: &mut ChaCha8Rng| -> CaseFn {
            let frames: Vec<_> = (0..2).map(|_| random_tensor(rng, &[2, 3, 32, 32])).collect();
            let weights: Vec<_> = (0..2).map(|_| random_tensor(rng, &[2, ROLLOUT_K, 8, 8])).collect();
            let biases: Vec<_> = (0..2).map(|_| random_tensor(rng, &[ROLLOUT_K])).collect();
            Box::new(move |t: &mut Tape<f64>, v: &[Var]| {
                if !ablation.no_jre {
                    return rollout_projection(t, v, &frames, &weights, ablation);
                }
                let b0 = t.constant(biases[0].clone())?;
                let b1 = t.constant(biases[1].clone())?;
                let mut all = v[..9].to_vec();
                all.push(b0);
                all.extend_from_slice(&v[9..]);
                all.push(b1);
                rollout_projection(t, &all, &frames, &weights, ablation)
            })
        }),
    }
}

/// Output scales of the initializer and propagation heads in the rollout
/// cases. Correlation outputs are far larger than trunk features.
const HEAD_SCALES: [f64; 2] = [0.05, 0.0005];
const ROLLOUT_C: usize = 2;
const ROLLOUT_K: usize = 3;

/// Rollout parameter shapes without the two head biases.
fn rollout_shapes() -> Vec<Vec<usize>> {
    let (c, k) = (ROLLOUT_C, ROLLOUT_K);
    let mut shapes = conv_shapes(&[3, c, c, c, c], 3);
    shapes.push(vec![k, c, 1, 1]);
    shapes.extend([vec![k, k, 1, 1], vec![k, k, 1, 1], vec![k], vec![k]]);
    shapes.extend([vec![c, c + k, 1, 1], vec![c]]);
    shapes.extend(conv_shapes(&[c, c, c, c, c], 3));
    shapes.push(vec![k, c, 1, 1]);
    shapes
}

fn rollout_projection(
    t: &mut Tape<f64>,
    v: &[Var],
    frames: &[rpstn_tensor::Tensor<f64>],
    weights: &[rpstn_tensor::Tensor<f64>],
    ablation: Ablation,
) -> rpstn_tensor::Result<Var> {
    let mut scaled = Vec::with_capacity(4);
    for (i, scale) in [(8, 0), (9, 0), (24, 1), (25, 1)] {
        scaled.push(t.mul_scalar(v[i], HEAD_SCALES[scale])?);
    }
    let vars = NetVars {
        backbone: BackboneVars {
            trunk: pairs(&v[0..8]),
            head: (scaled[0], scaled[1]),
        },
        jre: JreVars {
            w_g: v[10],
            w_o: v[11],
            gamma: v[12],
            beta: v[13],
        },
        jrpsp: JrpspVars {
            aggregate: (v[14], v[15]),
            distill: pairs(&v[16..24]),
            head: (scaled[2], scaled[3]),
        },
    };
    let inputs = frames
        .iter()
        .map(|f| t.constant(f.clone()))
        .collect::<rpstn_tensor::Result<Vec<_>>>()?;
    let mut bn = BnStats::identity(ROLLOUT_K);
    let out = rollout_on(t, &vars, &mut bn, Mode::Train, ablation, &inputs)?;
    let mut total = None;
    for (&m, r) in out.refined.iter().zip(weights) {
        let p = gradcheck::project(t, m, r)?;
        total = Some(match total {
            Some(acc) => t.add(acc, p)?,
            None => p,
        });
    }
    Ok(total.expect("two frames"))
}

/// Largest analytic gradient entry of the two head biases in a train-mode
/// `no_jre` rollout of the tiny network.
pub fn head_bias_gradients(seed: u64) -> rpstn_tensor::Result<f64> {
    let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let ablation = Ablation {
        no_jre: true,
        ..Ablation::default()
    };
    for _ in 0..TRIALS {
        let mut shapes = rollout_shapes();
        shapes.insert(9, vec![ROLLOUT_K]);
        shapes.push(vec![ROLLOUT_K]);
        let frames: Vec<_> = (0..2).map(|_| random_tensor(&mut rng, &[2, 3, 32, 32])).collect();
        let weights: Vec<_> = (0..2).map(|_| random_tensor(&mut rng, &[2, ROLLOUT_K, 8, 8])).collect();
        let mut t = Tape::new();
        let v = shapes
            .iter()
            .map(|s| t.leaf(random_tensor(&mut rng, s), true))
            .collect::<rpstn_tensor::Result<Vec<_>>>()?;
        let out = rollout_projection(&mut t, &v, &frames, &weights, ablation)?;
        t.backward(out)?;
        for id in [v[9], v[25]] {
            if let Some(g) = t.grad(id) {
                worst = g.data().iter().fold(worst, |m, x| m.max(x.abs()));
            }
        }
    }
    Ok(worst)
}

/// One case per network module plus end-to-end rollouts.
pub fn module_cases() -> Vec<Case> {
    let mut backbone_shapes = vec![vec![1, 3, 8, 8]];
    backbone_shapes.extend(conv_shapes(&[3, 2, 2, 2, 2], 3));
    backbone_shapes.extend([vec![3, 2, 1, 1], vec![3]]);
    let mut distill_shapes = vec![vec![1, 2, 8, 8]];
    distill_shapes.extend(conv_shapes(&[2, 2, 2, 2, 2], 3));
    vec![
        projected("jre relation_matrix", vec![vec![2, 3, 2, 2]], vec![2, 3, 3], |t, v| {
            jre::relation_matrix(t, v[0])
        }),
        projected(
            "jre refine (train)",
            vec![vec![2, 3, 2, 2], vec![3, 3, 1, 1], vec![3, 3, 1, 1], vec![3], vec![3]],
            vec![2, 3, 2, 2],
            |t, v| {
                let vars = JreVars {
                    w_g: v[1],
                    w_o: v[2],
                    gamma: v[3],
                    beta: v[4],
                };
                let mut stats = BnStats::identity(3);
                jre::refine(t, v[0], &vars, &mut stats, Mode::Train, true)
            },
        ),
        projected("backbone initial_pose", backbone_shapes, vec![1, 3, 2, 2], |t, v| {
            let vars = BackboneVars {
                trunk: pairs(&v[1..9]),
                head: (v[9], v[10]),
            };
            Ok(backbone::initial_pose(t, v[0], &vars)?.1)
        }),
        projected(
            "jrpsp aggregate",
            vec![vec![1, 2, 4, 4], vec![1, 3, 4, 4], vec![2, 5, 1, 1], vec![2]],
            vec![1, 2, 4, 4],
            |t, v| jrpsp::aggregate(t, v[0], v[1], (v[2], v[3])),
        ),
        projected("jrpsp distill", distill_shapes, vec![1, 2, 1, 1], |t, v| {
            jrpsp::distill(t, v[0], &pairs(&v[1..9]))
        }),
        projected(
            "jrpsp propagate",
            vec![vec![1, 2, 2, 2], vec![1, 2, 4, 4], vec![3, 2, 1, 1], vec![3]],
            vec![1, 3, 4, 4],
            |t, v| jrpsp::propagate(t, v[0], v[1], (v[2], v[3])),
        ),
        Case {
            name: "sequence_loss",
            shapes: vec![vec![1, 2, 3, 3]; 4],
            build: Box::new(|_rng: &mut ChaCha8Rng| -> CaseFn {
                Box::new(|t: &mut Tape<f64>, v: &[Var]| sequence_loss(t, &v[0..2], &v[2..4]))
            }),
        },
        rollout_case("rollout end to end", Ablation::default()),
        rollout_case(
            "rollout without relation branch",
            Ablation {
                no_jre: true,
                ..Ablation::default()
            },
        ),
    ]
}

/// Op cases followed by module cases.
pub fn all_cases() -> Vec<Case> {
    let mut cases = gradcheck::op_cases();
    cases.extend(module_cases());
    cases
}

pub fn run(trials: usize, seed: u64) -> rpstn_tensor::Result<Vec<CaseResult>> {
    gradcheck::run_cases(&all_cases(), trials, seed)
}
