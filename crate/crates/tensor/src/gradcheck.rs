//! Central finite-difference gradient checking in 64-bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Relative tolerance used by the built-in gradient suite.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Finite-difference step for coordinate value `x`.
pub fn fd_step(x: f64) -> f64 {
    1e-5 * x.abs().max(1.0)
}

/// Compare analytic gradients of `f` with central differences.
///
/// `f` records a scalar computation over leaves created from `inputs` (in
/// order, all requiring gradients). Returns one norm-wise relative error
/// `|analytic - numeric| / max(|analytic|, |numeric|)` per input; zero when
/// both gradients vanish.
pub fn relative_errors<F>(inputs: &[Tensor<f64>], f: F) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = values
            .iter()
            .map(|t| tape.leaf(t.clone(), true))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).data()[0])
    };

    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|t| tape.leaf(t.clone(), true))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;

    let mut errors = Vec::with_capacity(inputs.len());
    let mut work = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = tape
            .grad(*var)
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        let mut diff2 = 0.0;
        let mut a2 = 0.0;
        let mut n2 = 0.0;
        for j in 0..inputs[i].len() {
            let x = inputs[i].data()[j];
            let h = fd_step(x);
            work[i].data_mut()[j] = x + h;
            let up = eval(&work)?;
            work[i].data_mut()[j] = x - h;
            let down = eval(&work)?;
            work[i].data_mut()[j] = x;
            let numeric = (up - down) / (2.0 * h);
            diff2 += (analytic[j] - numeric).powi(2);
            a2 += analytic[j].powi(2);
            n2 += numeric.powi(2);
        }
        let scale = a2.sqrt().max(n2.sqrt());
        errors.push(if scale == 0.0 { 0.0 } else { diff2.sqrt() / scale });
    }
    Ok(errors)
}

/// Outcome of one gradient-check case: worst error over all trials and inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseResult {
    pub name: String,
    pub max_error: f64,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.max_error < GRADCHECK_TOLERANCE
    }
}

pub type CaseFn = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

/// A gradient-check case: input shapes plus a builder for the function.
///
/// The builder receives an RNG so it can fix random projection weights per
/// trial.
pub struct Case {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    pub build: Box<dyn Fn(&mut ChaCha8Rng) -> CaseFn>,
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(shape, data).expect("valid shape")
}

/// `sum(y * r)` for a fixed random `r`, turning any op output into a scalar
/// with a generic gradient.
pub fn project(tape: &mut Tape<f64>, y: Var, weights: &Tensor<f64>) -> Result<Var> {
    let r = tape.constant(weights.clone())?;
    let p = tape.mul(y, r)?;
    tape.sum(p)
}

/// Run `cases` for `trials` random draws each.
pub fn run_cases(cases: &[Case], trials: usize, seed: u64) -> Result<Vec<CaseResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(cases.len());
    for case in cases {
        let mut worst: f64 = 0.0;
        for _ in 0..trials {
            let inputs: Vec<_> = case.shapes.iter().map(|s| random_tensor(&mut rng, s)).collect();
            let f = (case.build)(&mut rng);
            let errs = relative_errors(&inputs, |t, v| f(t, v))?;
            worst = errs.into_iter().fold(worst, f64::max);
        }
        out.push(CaseResult {
            name: case.name.to_string(),
            max_error: worst,
        });
    }
    Ok(out)
}

/// Projected case: `sum(op(inputs) * r)` with `r` drawn per trial in the
/// output shape.
pub fn projected<F>(name: &'static str, shapes: Vec<Vec<usize>>, out_shape: Vec<usize>, op: F) -> Case
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + Clone + 'static,
{
    Case {
        name,
        shapes,
        build: Box::new(move |rng| {
            let r = random_tensor(rng, &out_shape);
            let op = op.clone();
            Box::new(move |t: &mut Tape<f64>, v: &[Var]| {
                let y = op(t, v)?;
                project(t, y, &r)
            })
        }),
    }
}

/// One case per differentiable tensor op.
pub fn op_cases() -> Vec<Case> {
    use crate::tape::{BnStats, Mode};
    vec![
        projected(
            "conv2d 3x3 pad 1 with bias",
            vec![vec![2, 2, 5, 5], vec![3, 2, 3, 3], vec![3]],
            vec![2, 3, 5, 5],
            |t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 1),
        ),
        projected(
            "conv2d 3x3 stride 2",
            vec![vec![1, 2, 5, 5], vec![2, 2, 3, 3]],
            vec![1, 2, 2, 2],
            |t, v| t.conv2d(v[0], v[1], None, 2, 0),
        ),
        projected(
            "conv2d 1x1",
            vec![vec![2, 3, 3, 3], vec![4, 3, 1, 1], vec![4]],
            vec![2, 4, 3, 3],
            |t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 0),
        ),
        projected("maxpool2", vec![vec![2, 2, 4, 4]], vec![2, 2, 2, 2], |t, v| {
            t.maxpool2(v[0])
        }),
        projected("softmax_rows", vec![vec![2, 3, 4]], vec![2, 3, 4], |t, v| {
            t.softmax_rows(v[0])
        }),
        projected(
            "batchnorm2d train",
            vec![vec![2, 3, 3, 3], vec![3], vec![3]],
            vec![2, 3, 3, 3],
            |t, v| {
                let mut stats = BnStats::identity(3);
                t.batchnorm2d(v[0], v[1], v[2], &mut stats, Mode::Train)
            },
        ),
        projected(
            "batchnorm2d eval",
            vec![vec![2, 3, 2, 2], vec![3], vec![3]],
            vec![2, 3, 2, 2],
            |t, v| {
                let mut stats = BnStats {
                    mean: vec![0.1, -0.2, 0.3],
                    var: vec![0.5, 1.5, 2.0],
                };
                t.batchnorm2d(v[0], v[1], v[2], &mut stats, Mode::Eval)
            },
        ),
        projected(
            "matmul batched",
            vec![vec![2, 3, 4], vec![2, 4, 2]],
            vec![2, 3, 2],
            |t, v| t.matmul(v[0], v[1]),
        ),
        projected("matmul", vec![vec![3, 5], vec![5, 2]], vec![3, 2], |t, v| {
            t.matmul(v[0], v[1])
        }),
        projected("add", vec![vec![2, 3], vec![2, 3]], vec![2, 3], |t, v| t.add(v[0], v[1])),
        projected("mul", vec![vec![2, 3], vec![2, 3]], vec![2, 3], |t, v| t.mul(v[0], v[1])),
        projected("mul_scalar", vec![vec![4]], vec![4], |t, v| t.mul_scalar(v[0], -1.7)),
        projected(
            "concat_channels",
            vec![vec![2, 2, 2, 3], vec![2, 1, 2, 3]],
            vec![2, 3, 2, 3],
            |t, v| t.concat_channels(&[v[0], v[1]]),
        ),
        projected("reshape", vec![vec![2, 6]], vec![3, 4], |t, v| t.reshape(v[0], &[3, 4])),
        projected("transpose_last2", vec![vec![2, 3, 4]], vec![2, 4, 3], |t, v| {
            t.transpose_last2(v[0])
        }),
        projected("relu", vec![vec![3, 4]], vec![3, 4], |t, v| t.relu(v[0])),
        Case {
            name: "mse",
            shapes: vec![vec![2, 5], vec![2, 5]],
            build: Box::new(|_| Box::new(|t: &mut Tape<f64>, v: &[Var]| t.mse(v[0], v[1]))),
        },
        Case {
            name: "sum",
            shapes: vec![vec![3, 3]],
            build: Box::new(|_| Box::new(|t: &mut Tape<f64>, v: &[Var]| t.sum(v[0]))),
        },
        projected(
            "depthwise_correlate 3x3 template",
            vec![vec![2, 2, 5, 5], vec![2, 2, 3, 3]],
            vec![2, 2, 5, 5],
            |t, v| t.depthwise_correlate(v[0], v[1]),
        ),
        projected(
            "depthwise_correlate 2x2 template",
            vec![vec![1, 3, 4, 4], vec![1, 3, 2, 2]],
            vec![1, 3, 4, 4],
            |t, v| t.depthwise_correlate(v[0], v[1]),
        ),
    ]
}
