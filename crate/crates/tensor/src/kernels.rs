//! Slice-level compute kernels. Shapes are validated by the caller.

use crate::element::Element;

/// Output extent of a strided, padded window; `None` when it is not a
/// positive integer.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || padded < kernel || !(padded - kernel).is_multiple_of(stride) {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Debug, Clone, Copy)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel_h * self.kernel_w
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// 1x1, stride 1, no padding: the column matrix is the input itself.
    pub fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1 && self.padding == 0
    }
}

/// Unfold one image `[C, H, W]` into `[C*kh*kw, out_h*out_w]`.
pub fn im2col<T: Element>(input: &[T], g: &ConvGeometry, cols: &mut [T]) {
    let n = g.col_cols();
    let pad = g.padding as isize;
    for c in 0..g.channels {
        let plane = &input[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - pad;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, out) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - pad;
                        *out = if ix < 0 || ix >= g.width as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Fold a column matrix back onto an image, accumulating overlaps.
pub fn col2im<T: Element>(cols: &[T], g: &ConvGeometry, input_grad: &mut [T]) {
    let n = g.col_cols();
    let pad = g.padding as isize;
    for c in 0..g.channels {
        let plane = &mut input_grad[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - pad;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let base = iy as usize * g.width;
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kj) as isize - pad;
                        if ix >= 0 && ix < g.width as isize {
                            plane[base + ix as usize] =
                                plane[base + ix as usize] + src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// 2x2 stride-2 max over one plane. Returns the flat input index of each
/// winner; ties go to the first element in row-major order.
pub fn maxpool2_plane<T: Element>(
    input: &[T],
    height: usize,
    width: usize,
    out: &mut [T],
    argmax: &mut [usize],
) {
    let (oh, ow) = (height / 2, width / 2);
    for oy in 0..oh {
        for ox in 0..ow {
            let mut best_idx = (2 * oy) * width + 2 * ox;
            let mut best = input[best_idx];
            for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                let idx = (2 * oy + dy) * width + 2 * ox + dx;
                if input[idx] > best {
                    best = input[idx];
                    best_idx = idx;
                }
            }
            out[oy * ow + ox] = best;
            argmax[oy * ow + ox] = best_idx;
        }
    }
}

/// Numerically stable softmax of one row. The normalizer is summed in
/// ascending order, so permuting the row permutes the output bit for bit.
pub fn softmax_row<T: Element>(input: &[T], out: &mut [T]) {
    let max = input
        .iter()
        .copied()
        .fold(T::neg_infinity(), |a, b| if b > a { b } else { a });
    for (o, &x) in out.iter_mut().zip(input) {
        *o = (x - max).exp();
    }
    let mut sorted = out.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let sum = sorted.iter().fold(T::zero(), |acc, &v| acc + v);
    for o in out.iter_mut() {
        *o = *o / sum;
    }
}

/// Leading (top/left) zero padding that keeps a same-size correlation output.
pub fn same_pad_before(kernel: usize) -> usize {
    (kernel - 1) / 2
}

/// Per-plane correlation with zero "same" padding: `out` has the target's
/// extents.
pub fn correlate_same<T: Element>(
    target: &[T],
    height: usize,
    width: usize,
    kernel: &[T],
    kh: usize,
    kw: usize,
    out: &mut [T],
) {
    let (pt, pl) = (same_pad_before(kh) as isize, same_pad_before(kw) as isize);
    for y in 0..height {
        for x in 0..width {
            let mut acc = T::zero();
            for i in 0..kh {
                let ty = y as isize + i as isize - pt;
                if ty < 0 || ty >= height as isize {
                    continue;
                }
                for j in 0..kw {
                    let tx = x as isize + j as isize - pl;
                    if tx < 0 || tx >= width as isize {
                        continue;
                    }
                    acc = acc + kernel[i * kw + j] * target[ty as usize * width + tx as usize];
                }
            }
            out[y * width + x] = acc;
        }
    }
}

/// Backward of [`correlate_same`], accumulating into both gradients.
#[allow(clippy::too_many_arguments)]
pub fn correlate_same_backward<T: Element>(
    target: &[T],
    height: usize,
    width: usize,
    kernel: &[T],
    kh: usize,
    kw: usize,
    out_grad: &[T],
    target_grad: Option<&mut [T]>,
    kernel_grad: Option<&mut [T]>,
) {
    let (pt, pl) = (same_pad_before(kh) as isize, same_pad_before(kw) as isize);
    let mut target_grad = target_grad;
    let mut kernel_grad = kernel_grad;
    for y in 0..height {
        for x in 0..width {
            let g = out_grad[y * width + x];
            if g == T::zero() {
                continue;
            }
            for i in 0..kh {
                let ty = y as isize + i as isize - pt;
                if ty < 0 || ty >= height as isize {
                    continue;
                }
                for j in 0..kw {
                    let tx = x as isize + j as isize - pl;
                    if tx < 0 || tx >= width as isize {
                        continue;
                    }
                    let t_idx = ty as usize * width + tx as usize;
                    if let Some(tg) = target_grad.as_deref_mut() {
                        tg[t_idx] = tg[t_idx] + g * kernel[i * kw + j];
                    }
                    if let Some(kg) = kernel_grad.as_deref_mut() {
                        kg[i * kw + j] = kg[i * kw + j] + g * target[t_idx];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn out_extent_rules() {
        assert_eq!(conv_out_extent(4, 3, 1, 1), Some(4));
        assert_eq!(conv_out_extent(64, 3, 2, 1), None);
        assert_eq!(conv_out_extent(5, 3, 2, 1), Some(3));
        assert_eq!(conv_out_extent(2, 3, 1, 0), None);
    }

    #[test]
    fn maxpool_ties_pick_first() {
        let input = [5.0f32, 5.0, 5.0, 5.0];
        let (mut out, mut arg) = ([0.0f32], [9usize]);
        maxpool2_plane(&input, 2, 2, &mut out, &mut arg);
        assert_eq!(arg[0], 0);
    }

    #[test]
    fn even_kernel_pads_less_before() {
        assert_eq!(same_pad_before(2), 0);
        assert_eq!(same_pad_before(3), 1);
        assert_eq!(same_pad_before(4), 1);
    }
}
