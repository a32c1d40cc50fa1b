//! Operation tape for reverse-mode differentiation.
//!
//! Every op evaluates eagerly and records what its backward rule needs.
//! A tape is single-use: one forward recording, one `backward`.

use crate::element::Element;
use crate::error::{dim_err, Result, TensorError};
use crate::kernels::{self, ConvGeometry};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running mean/variance of a batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Element> BnStats<T> {
    /// Fresh running statistics: mean 0, variance 1.
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }

    /// Statistics under which eval-mode normalization is exactly `x`:
    /// mean 0 and variance `1 - eps`, so `var + eps == 1`.
    pub fn pass_through(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::from_f64(1.0 - BN_EPS); channels],
        }
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
        batch: usize,
        out_c: usize,
        cols: Vec<T>,
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    Softmax {
        input: Var,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Matmul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        factor: T,
    },
    Concat {
        parts: Vec<(Var, usize)>,
    },
    Reshape {
        a: Var,
    },
    TransposeLast2 {
        a: Var,
    },
    Relu {
        a: Var,
    },
    Mse {
        a: Var,
        b: Var,
    },
    Sum {
        a: Var,
    },
    DepthwiseCorr {
        target: Var,
        kernel: Var,
    },
}

fn slot<'g, T: Element>(
    nodes: &[Node<T>],
    grads: &'g mut [Option<Vec<T>>],
    v: Var,
) -> Option<&'g mut Vec<T>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    requires_grad: bool,
    op: Op<T>,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape<T: Element>(op: &str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return dim_err(format!("{op}: shapes {:?} and {:?} differ", a.shape(), b.shape()));
    }
    Ok(())
}

fn rank4<T: Element>(op: &str, t: &Tensor<T>) -> Result<[usize; 4]> {
    match *t.shape() {
        [a, b, c, d] => Ok([a, b, c, d]),
        _ => dim_err(format!("{op}: expected rank-4 tensor, got {:?}", t.shape())),
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Gradient accumulated by the last `backward`, if the value needed one.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        self.push(value, Op::Leaf, requires_grad, "leaf")
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool, name: &str) -> Result<Var> {
        if self.consumed {
            return Err(TensorError::Usage(format!(
                "{name}: tape already consumed by backward"
            )));
        }
        if !value.is_finite() {
            return Err(TensorError::NonFinite(name.to_string()));
        }
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Cross-correlation of `[B,Cin,H,W]` with `[Cout,Cin,kh,kw]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let [batch, cin, h, w] = rank4("conv2d input", self.value(input))?;
        let [cout, wcin, kh, kw] = rank4("conv2d weight", self.value(weight))?;
        if wcin != cin {
            return dim_err(format!("conv2d: input has {cin} channels, weight expects {wcin}"));
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [cout] {
                return dim_err(format!(
                    "conv2d: bias shape {:?}, expected [{cout}]",
                    self.value(b).shape()
                ));
            }
        }
        let (Some(out_h), Some(out_w)) = (
            kernels::conv_out_extent(h, kh, stride, padding),
            kernels::conv_out_extent(w, kw, stride, padding),
        ) else {
            return dim_err(format!(
                "conv2d: {h}x{w} input with {kh}x{kw} kernel, stride {stride}, padding {padding} has no integer output extent"
            ));
        };
        let geom = ConvGeometry {
            channels: cin,
            height: h,
            width: w,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            padding,
            out_h,
            out_w,
        };
        let (rows, ncols) = (geom.col_rows(), geom.col_cols());
        let x = self.value(input).data();
        let wt = self.value(weight).data();
        let mut out = vec![T::zero(); batch * cout * ncols];
        let mut cols = if geom.is_pointwise() {
            Vec::new()
        } else {
            vec![T::zero(); batch * rows * ncols]
        };
        let in_plane = cin * h * w;
        for b in 0..batch {
            let xb = &x[b * in_plane..(b + 1) * in_plane];
            let colb: &[T] = if geom.is_pointwise() {
                xb
            } else {
                let c = &mut cols[b * rows * ncols..(b + 1) * rows * ncols];
                kernels::im2col(xb, &geom, c);
                c
            };
            T::gemm(
                cout,
                rows,
                ncols,
                wt,
                (rows as isize, 1),
                colb,
                (ncols as isize, 1),
                T::zero(),
                &mut out[b * cout * ncols..(b + 1) * cout * ncols],
                (ncols as isize, 1),
            );
        }
        if let Some(bv) = bias {
            let bd = self.value(bv).data();
            for (i, chunk) in out.chunks_mut(ncols).enumerate() {
                let bias = bd[i % cout];
                chunk.iter_mut().for_each(|o| *o = *o + bias);
            }
        }
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.any_grad(&deps);
        let value = Tensor::new(&[batch, cout, out_h, out_w], out)?;
        self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                batch,
                out_c: cout,
                cols,
            },
            rg,
            "conv2d",
        )
    }

    /// 2x2 window, stride 2 max-pooling.
    pub fn maxpool2(&mut self, input: Var) -> Result<Var> {
        let [b, c, h, w] = rank4("maxpool2", self.value(input))?;
        if h % 2 != 0 || w % 2 != 0 {
            return dim_err(format!("maxpool2: extents {h}x{w} must be even"));
        }
        let (oh, ow) = (h / 2, w / 2);
        let x = self.value(input).data();
        let mut out = vec![T::zero(); b * c * oh * ow];
        let mut argmax = vec![0usize; out.len()];
        for p in 0..b * c {
            kernels::maxpool2_plane(
                &x[p * h * w..(p + 1) * h * w],
                h,
                w,
                &mut out[p * oh * ow..(p + 1) * oh * ow],
                &mut argmax[p * oh * ow..(p + 1) * oh * ow],
            );
            for a in &mut argmax[p * oh * ow..(p + 1) * oh * ow] {
                *a += p * h * w;
            }
        }
        let rg = self.any_grad(&[input]);
        self.push(
            Tensor::new(&[b, c, oh, ow], out)?,
            Op::MaxPool2 { input, argmax },
            rg,
            "maxpool2",
        )
    }

    /// Softmax over the trailing axis.
    pub fn softmax_rows(&mut self, input: Var) -> Result<Var> {
        let t = self.value(input);
        let k = *t.shape().last().expect("tensor rank >= 1");
        let mut out = vec![T::zero(); t.len()];
        for (row, o) in t.data().chunks(k).zip(out.chunks_mut(k)) {
            kernels::softmax_row(row, o);
        }
        let shape = t.shape().to_vec();
        let rg = self.any_grad(&[input]);
        self.push(Tensor::new(&shape, out)?, Op::Softmax { input }, rg, "softmax_rows")
    }

    /// Per-channel batch normalization over (B, H, W) with affine parameters.
    ///
    /// Train mode normalizes with batch statistics and updates `stats`;
    /// eval mode normalizes with `stats`.
    pub fn batchnorm2d(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: &mut BnStats<T>,
        mode: Mode,
    ) -> Result<Var> {
        let [b, c, h, w] = rank4("batchnorm2d", self.value(input))?;
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).shape() != [c] {
                return dim_err(format!(
                    "batchnorm2d: {name} shape {:?}, expected [{c}]",
                    self.value(v).shape()
                ));
            }
        }
        if stats.mean.len() != c || stats.var.len() != c {
            return dim_err(format!("batchnorm2d: running stats do not cover {c} channels"));
        }
        let eps = T::from_f64(BN_EPS);
        let momentum = T::from_f64(BN_MOMENTUM);
        let plane = h * w;
        let count = b * plane;
        let n = T::from_f64(count as f64);
        let x = self.value(input).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![T::zero(); x.len()];
        let mut inv_std = vec![T::zero(); c];
        let mut out = vec![T::zero(); x.len()];
        let channel_iter = |ch: usize| {
            (0..b).flat_map(move |bi| {
                let start = (bi * c + ch) * plane;
                start..start + plane
            })
        };
        for ch in 0..c {
            let (mean, var) = match mode {
                Mode::Train => {
                    let mean = channel_iter(ch).fold(T::zero(), |acc, i| acc + x[i]) / n;
                    let var = channel_iter(ch)
                        .fold(T::zero(), |acc, i| acc + (x[i] - mean) * (x[i] - mean))
                        / n;
                    let unbiased = if count > 1 {
                        var * n / (n - T::one())
                    } else {
                        var
                    };
                    stats.mean[ch] = (T::one() - momentum) * stats.mean[ch] + momentum * mean;
                    stats.var[ch] = (T::one() - momentum) * stats.var[ch] + momentum * unbiased;
                    (mean, var)
                }
                Mode::Eval => (stats.mean[ch], stats.var[ch]),
            };
            let is = T::one() / (var + eps).sqrt();
            inv_std[ch] = is;
            for i in channel_iter(ch) {
                xhat[i] = (x[i] - mean) * is;
                out[i] = g[ch] * xhat[i] + bt[ch];
            }
        }
        let rg = self.any_grad(&[input, gamma, beta]);
        self.push(
            Tensor::new(&[b, c, h, w], out)?,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: mode == Mode::Train,
            },
            rg,
            "batchnorm2d",
        )
    }

    /// `[M,K]·[K,N]` or batched `[B,M,K]·[B,K,N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        let (batch, m, k, k2, n) = match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [k2, n]) => (1, *m, *k, *k2, *n),
            ([b1, m, k], [b2, k2, n]) if b1 == b2 => (*b1, *m, *k, *k2, *n),
            _ => return dim_err(format!("matmul: cannot multiply {sa:?} by {sb:?}")),
        };
        if k != k2 {
            return dim_err(format!("matmul: inner extents {k} and {k2} differ"));
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::zero(); batch * m * n];
        for bi in 0..batch {
            T::gemm(
                m,
                k,
                n,
                &ad[bi * m * k..(bi + 1) * m * k],
                (k as isize, 1),
                &bd[bi * k * n..(bi + 1) * k * n],
                (n as isize, 1),
                T::zero(),
                &mut out[bi * m * n..(bi + 1) * m * n],
                (n as isize, 1),
            );
        }
        let shape = if sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        let rg = self.any_grad(&[a, b]);
        self.push(
            Tensor::new(&shape, out)?,
            Op::Matmul { a, b, batch, m, k, n },
            rg,
            "matmul",
        )
    }

    fn zip_with(&mut self, a: Var, b: Var, name: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(name, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with(a, b, "add", |x, y| x + y)?;
        let rg = self.any_grad(&[a, b]);
        self.push(value, Op::Add { a, b }, rg, "add")
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with(a, b, "mul", |x, y| x * y)?;
        let rg = self.any_grad(&[a, b]);
        self.push(value, Op::Mul { a, b }, rg, "mul")
    }

    pub fn mul_scalar(&mut self, a: Var, factor: T) -> Result<Var> {
        let t = self.value(a);
        let value = Tensor::new(t.shape(), t.data().iter().map(|&x| x * factor).collect())?;
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Scale { a, factor }, rg, "mul_scalar")
    }

    /// Concatenate rank-4 tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return dim_err("concat_channels: no inputs");
        };
        let [b, _, h, w] = rank4("concat_channels", self.value(first))?;
        let mut channels = Vec::with_capacity(parts.len());
        for &p in parts {
            let [pb, pc, ph, pw] = rank4("concat_channels", self.value(p))?;
            if (pb, ph, pw) != (b, h, w) {
                return dim_err(format!(
                    "concat_channels: {:?} does not align with {:?}",
                    self.value(p).shape(),
                    self.value(first).shape()
                ));
            }
            channels.push((p, pc));
        }
        let total: usize = channels.iter().map(|&(_, c)| c).sum();
        let plane = h * w;
        let mut out = Vec::with_capacity(b * total * plane);
        for bi in 0..b {
            for &(p, c) in &channels {
                let d = self.value(p).data();
                out.extend_from_slice(&d[bi * c * plane..(bi + 1) * c * plane]);
            }
        }
        let rg = self.any_grad(parts);
        self.push(
            Tensor::new(&[b, total, h, w], out)?,
            Op::Concat { parts: channels },
            rg,
            "concat_channels",
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshaped(shape)?;
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Reshape { a }, rg, "reshape")
    }

    /// Swap the two trailing axes.
    pub fn transpose_last2(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let r = t.rank();
        if r < 2 {
            return dim_err(format!("transpose_last2: rank {r} < 2"));
        }
        let (rows, cols) = (t.shape()[r - 2], t.shape()[r - 1]);
        let mut out = vec![T::zero(); t.len()];
        for (src, dst) in t.data().chunks(rows * cols).zip(out.chunks_mut(rows * cols)) {
            for i in 0..rows {
                for j in 0..cols {
                    dst[j * rows + i] = src[i * cols + j];
                }
            }
        }
        let mut shape = t.shape().to_vec();
        shape.swap(r - 2, r - 1);
        let rg = self.any_grad(&[a]);
        self.push(Tensor::new(&shape, out)?, Op::TransposeLast2 { a }, rg, "transpose_last2")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let value = Tensor::new(
            t.shape(),
            t.data().iter().map(|&x| if x > T::zero() { x } else { T::zero() }).collect(),
        )?;
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Relu { a }, rg, "relu")
    }

    /// Mean of squared differences over all elements, as a `[1]` scalar.
    pub fn mse(&mut self, prediction: Var, target: Var) -> Result<Var> {
        let (p, t) = (self.value(prediction), self.value(target));
        same_shape("mse", p, t)?;
        let sum = p
            .data()
            .iter()
            .zip(t.data())
            .fold(T::zero(), |acc, (&x, &y)| acc + (x - y) * (x - y));
        let value = Tensor::scalar(sum / T::from_f64(p.len() as f64));
        let rg = self.any_grad(&[prediction, target]);
        self.push(value, Op::Mse { a: prediction, b: target }, rg, "mse")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().fold(T::zero(), |acc, &x| acc + x);
        let rg = self.any_grad(&[a]);
        self.push(Tensor::scalar(s), Op::Sum { a }, rg, "sum")
    }

    /// Per-sample, per-channel correlation of `target` `[B,C,H,W]` with
    /// `kernel` `[B,C,h,w]`, zero-padded so the output keeps `H x W`.
    pub fn depthwise_correlate(&mut self, target: Var, kernel: Var) -> Result<Var> {
        let [b, c, h, w] = rank4("depthwise_correlate target", self.value(target))?;
        let [kb, kc, kh, kw] = rank4("depthwise_correlate kernel", self.value(kernel))?;
        if (kb, kc) != (b, c) {
            return dim_err(format!(
                "depthwise_correlate: kernel {:?} does not match target {:?}",
                self.value(kernel).shape(),
                self.value(target).shape()
            ));
        }
        if kh > h || kw > w {
            return dim_err(format!("depthwise_correlate: template {kh}x{kw} larger than target {h}x{w}"));
        }
        let (td, kd) = (self.value(target).data(), self.value(kernel).data());
        let mut out = vec![T::zero(); td.len()];
        for p in 0..b * c {
            kernels::correlate_same(
                &td[p * h * w..(p + 1) * h * w],
                h,
                w,
                &kd[p * kh * kw..(p + 1) * kh * kw],
                kh,
                kw,
                &mut out[p * h * w..(p + 1) * h * w],
            );
        }
        let rg = self.any_grad(&[target, kernel]);
        self.push(
            Tensor::new(&[b, c, h, w], out)?,
            Op::DepthwiseCorr { target, kernel },
            rg,
            "depthwise_correlate",
        )
    }

    /// Accumulate d`loss`/d`x` into every value that requires a gradient.
    ///
    /// The tape cannot be reused afterwards.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(TensorError::Usage("backward called twice on one tape".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(TensorError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backprop_node(i, &g, &mut grads)?;
            if g.iter().any(|x| !x.is_finite()) {
                return Err(TensorError::NonFinite("backward".into()));
            }
            let shape = self.nodes[i].value.shape().to_vec();
            self.nodes[i].grad = Some(Tensor::new(&shape, g)?);
        }
        for node in &mut self.nodes {
            node.op = Op::Leaf;
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                batch,
                out_c,
                cols,
            } => {
                let (rows, ncols) = (geom.col_rows(), geom.col_cols());
                let cout = *out_c;
                let in_plane = geom.channels * geom.height * geom.width;
                let x = val(*input).data();
                let wt = val(*weight).data();
                if let Some(b) = bias {
                    if let Some(db) = slot(nodes, grads, *b) {
                        for (j, chunk) in g.chunks(ncols).enumerate() {
                            let s = chunk.iter().fold(T::zero(), |a, &v| a + v);
                            db[j % cout] = db[j % cout] + s;
                        }
                    }
                }
                if let Some(dw) = slot(nodes, grads, *weight) {
                    for b in 0..*batch {
                        let colb = if geom.is_pointwise() {
                            &x[b * in_plane..(b + 1) * in_plane]
                        } else {
                            &cols[b * rows * ncols..(b + 1) * rows * ncols]
                        };
                        T::gemm(
                            cout,
                            ncols,
                            rows,
                            &g[b * cout * ncols..(b + 1) * cout * ncols],
                            (ncols as isize, 1),
                            colb,
                            (1, ncols as isize),
                            T::one(),
                            dw,
                            (rows as isize, 1),
                        );
                    }
                }
                if let Some(dx) = slot(nodes, grads, *input) {
                    let mut dcols = if geom.is_pointwise() {
                        Vec::new()
                    } else {
                        vec![T::zero(); rows * ncols]
                    };
                    for b in 0..*batch {
                        let gb = &g[b * cout * ncols..(b + 1) * cout * ncols];
                        let dxb = &mut dx[b * in_plane..(b + 1) * in_plane];
                        if geom.is_pointwise() {
                            T::gemm(
                                rows,
                                cout,
                                ncols,
                                wt,
                                (1, rows as isize),
                                gb,
                                (ncols as isize, 1),
                                T::one(),
                                dxb,
                                (ncols as isize, 1),
                            );
                        } else {
                            T::gemm(
                                rows,
                                cout,
                                ncols,
                                wt,
                                (1, rows as isize),
                                gb,
                                (ncols as isize, 1),
                                T::zero(),
                                &mut dcols,
                                (ncols as isize, 1),
                            );
                            kernels::col2im(&dcols, geom, dxb);
                        }
                    }
                }
            }
            Op::MaxPool2 { input, argmax } => {
                if let Some(dx) = slot(nodes, grads, *input) {
                    for (&src, &gv) in argmax.iter().zip(g) {
                        dx[src] = dx[src] + gv;
                    }
                }
            }
            Op::Softmax { input } => {
                let y = nodes[i].value.data();
                let k = *nodes[i].value.shape().last().expect("rank >= 1");
                if let Some(dx) = slot(nodes, grads, *input) {
                    for ((yr, gr), dr) in y.chunks(k).zip(g.chunks(k)).zip(dx.chunks_mut(k)) {
                        let dot = yr.iter().zip(gr).fold(T::zero(), |a, (&p, &q)| a + p * q);
                        for j in 0..k {
                            dr[j] = dr[j] + yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let shape = val(*input).shape();
                let (b, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
                let n = T::from_f64((b * plane) as f64);
                let idx = |ch: usize| {
                    (0..b).flat_map(move |bi| {
                        let s = (bi * c + ch) * plane;
                        s..s + plane
                    })
                };
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for ch in 0..c {
                    for j in idx(ch) {
                        sum_g[ch] = sum_g[ch] + g[j];
                        sum_gx[ch] = sum_gx[ch] + g[j] * xhat[j];
                    }
                }
                if let Some(dg) = slot(nodes, grads, *gamma) {
                    for ch in 0..c {
                        dg[ch] = dg[ch] + sum_gx[ch];
                    }
                }
                if let Some(db) = slot(nodes, grads, *beta) {
                    for ch in 0..c {
                        db[ch] = db[ch] + sum_g[ch];
                    }
                }
                let gm = val(*gamma).data();
                if let Some(dx) = slot(nodes, grads, *input) {
                    for ch in 0..c {
                        let scale = gm[ch] * inv_std[ch];
                        for j in idx(ch) {
                            let d = if *batch_stats {
                                scale * (g[j] - sum_g[ch] / n - xhat[j] * sum_gx[ch] / n)
                            } else {
                                scale * g[j]
                            };
                            dx[j] = dx[j] + d;
                        }
                    }
                }
            }
            Op::Matmul { a, b, batch, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let (ad, bd) = (val(*a).data(), val(*b).data());
                if let Some(da) = slot(nodes, grads, *a) {
                    for bi in 0..*batch {
                        T::gemm(
                            m,
                            n,
                            k,
                            &g[bi * m * n..(bi + 1) * m * n],
                            (n as isize, 1),
                            &bd[bi * k * n..(bi + 1) * k * n],
                            (1, n as isize),
                            T::one(),
                            &mut da[bi * m * k..(bi + 1) * m * k],
                            (k as isize, 1),
                        );
                    }
                }
                if let Some(db) = slot(nodes, grads, *b) {
                    for bi in 0..*batch {
                        T::gemm(
                            k,
                            m,
                            n,
                            &ad[bi * m * k..(bi + 1) * m * k],
                            (1, k as isize),
                            &g[bi * m * n..(bi + 1) * m * n],
                            (n as isize, 1),
                            T::one(),
                            &mut db[bi * k * n..(bi + 1) * k * n],
                            (n as isize, 1),
                        );
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if let Some(d) = slot(nodes, grads, v) {
                        d.iter_mut().zip(g).for_each(|(d, &x)| *d = *d + x);
                    }
                }
            }
            Op::Mul { a, b } => {
                let (ad, bd) = (val(*a).data(), val(*b).data());
                if let Some(da) = slot(nodes, grads, *a) {
                    for j in 0..g.len() {
                        da[j] = da[j] + g[j] * bd[j];
                    }
                }
                if let Some(db) = slot(nodes, grads, *b) {
                    for j in 0..g.len() {
                        db[j] = db[j] + g[j] * ad[j];
                    }
                }
            }
            Op::Scale { a, factor } => {
                if let Some(d) = slot(nodes, grads, *a) {
                    d.iter_mut().zip(g).for_each(|(d, &x)| *d = *d + x * *factor);
                }
            }
            Op::Concat { parts } => {
                let shape = nodes[i].value.shape();
                let (b, total, plane) = (shape[0], shape[1], shape[2] * shape[3]);
                let mut offset = 0;
                for &(p, c) in parts {
                    if let Some(d) = slot(nodes, grads, p) {
                        for bi in 0..b {
                            let src = &g[(bi * total + offset) * plane..(bi * total + offset + c) * plane];
                            let dst = &mut d[bi * c * plane..(bi + 1) * c * plane];
                            dst.iter_mut().zip(src).for_each(|(d, &x)| *d = *d + x);
                        }
                    }
                    offset += c;
                }
            }
            Op::Reshape { a } => {
                if let Some(d) = slot(nodes, grads, *a) {
                    d.iter_mut().zip(g).for_each(|(d, &x)| *d = *d + x);
                }
            }
            Op::TransposeLast2 { a } => {
                let s = val(*a).shape();
                let (rows, cols) = (s[s.len() - 2], s[s.len() - 1]);
                if let Some(d) = slot(nodes, grads, *a) {
                    for (src, dst) in g.chunks(rows * cols).zip(d.chunks_mut(rows * cols)) {
                        for r in 0..rows {
                            for c in 0..cols {
                                dst[r * cols + c] = dst[r * cols + c] + src[c * rows + r];
                            }
                        }
                    }
                }
            }
            Op::Relu { a } => {
                let x = val(*a).data();
                if let Some(d) = slot(nodes, grads, *a) {
                    for j in 0..g.len() {
                        if x[j] > T::zero() {
                            d[j] = d[j] + g[j];
                        }
                    }
                }
            }
            Op::Mse { a, b } => {
                let (ad, bd) = (val(*a).data(), val(*b).data());
                let scale = g[0] * T::from_f64(2.0 / ad.len() as f64);
                if let Some(da) = slot(nodes, grads, *a) {
                    for j in 0..ad.len() {
                        da[j] = da[j] + scale * (ad[j] - bd[j]);
                    }
                }
                if let Some(db) = slot(nodes, grads, *b) {
                    for j in 0..ad.len() {
                        db[j] = db[j] - scale * (ad[j] - bd[j]);
                    }
                }
            }
            Op::Sum { a } => {
                if let Some(d) = slot(nodes, grads, *a) {
                    d.iter_mut().for_each(|d| *d = *d + g[0]);
                }
            }
            Op::DepthwiseCorr { target, kernel } => {
                let ts = val(*target).shape();
                let ks = val(*kernel).shape();
                let (planes, h, w) = (ts[0] * ts[1], ts[2], ts[3]);
                let (kh, kw) = (ks[2], ks[3]);
                let (td, kd) = (val(*target).data(), val(*kernel).data());
                let need_t = nodes[target.0].requires_grad;
                let need_k = nodes[kernel.0].requires_grad;
                let mut dt = if need_t { vec![T::zero(); td.len()] } else { Vec::new() };
                let mut dk = if need_k { vec![T::zero(); kd.len()] } else { Vec::new() };
                for p in 0..planes {
                    kernels::correlate_same_backward(
                        &td[p * h * w..(p + 1) * h * w],
                        h,
                        w,
                        &kd[p * kh * kw..(p + 1) * kh * kw],
                        kh,
                        kw,
                        &g[p * h * w..(p + 1) * h * w],
                        need_t.then(|| &mut dt[p * h * w..(p + 1) * h * w]),
                        need_k.then(|| &mut dk[p * kh * kw..(p + 1) * kh * kw]),
                    );
                }
                if let Some(d) = slot(nodes, grads, *target) {
                    d.iter_mut().zip(&dt).for_each(|(d, &x)| *d = *d + x);
                }
                if let Some(d) = slot(nodes, grads, *kernel) {
                    d.iter_mut().zip(&dk).for_each(|(d, &x)| *d = *d + x);
                }
            }
        }
        Ok(())
    }
}
