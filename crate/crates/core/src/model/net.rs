//! Strided 3×3 convolution backbone with a global-average-pool linear head.
//!
//! Parameters live in one flat vector. For block `l` with `cin → cout`
//! channels the layout is `cout × cin × 3 × 3` weights followed by `cout`
//! biases; the head follows as `outputs × width` weights and `outputs`
//! biases.

use crate::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvShape {
    pub cin: usize,
    pub cout: usize,
    pub in_size: usize,
    pub out_size: usize,
    pub offset: usize,
}

impl ConvShape {
    pub fn weight_len(&self) -> usize {
        self.cout * self.cin * 9
    }

    pub fn param_len(&self) -> usize {
        self.weight_len() + self.cout
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Layout {
    pub blocks: Vec<ConvShape>,
    pub head_in: usize,
    pub head_out: usize,
    pub head_offset: usize,
    pub total: usize,
}

impl Layout {
    pub fn new(input_size: usize, channels: usize, widths: &[usize], outputs: usize) -> Self {
        let mut blocks = Vec::with_capacity(widths.len());
        let (mut cin, mut size, mut offset) = (channels, input_size, 0);
        for &cout in widths {
            let out_size = size.div_ceil(2);
            let b = ConvShape { cin, cout, in_size: size, out_size, offset };
            offset += b.param_len();
            blocks.push(b);
            cin = cout;
            size = out_size;
        }
        let head_offset = offset;
        let total = head_offset + cin * outputs + outputs;
        Self { blocks, head_in: cin, head_out: outputs, head_offset, total }
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

#[inline]
fn gelu<T: Real>(z: T) -> T {
    let inner = T::lit(SQRT_2_OVER_PI) * (z + T::lit(GELU_C) * z * z * z);
    T::lit(0.5) * z * (T::one() + inner.tanh())
}

#[inline]
fn gelu_grad<T: Real>(z: T) -> T {
    let inner = T::lit(SQRT_2_OVER_PI) * (z + T::lit(GELU_C) * z * z * z);
    let t = inner.tanh();
    let d_inner = T::lit(SQRT_2_OVER_PI) * (T::one() + T::lit(3.0 * GELU_C) * z * z);
    T::lit(0.5) * (T::one() + t) + T::lit(0.5) * z * (T::one() - t * t) * d_inner
}

/// Four-lane dot product; the lane split is fixed so results do not depend
/// on the platform.
#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = T::zero();
    for (x, y) in ra.iter().zip(rb) {
        tail += *x * *y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * *xi;
    }
}

/// Gathers the zero-padded 3×3 neighbourhood feeding output `(ox, oy)`,
/// laid out `cin × 3 × 3`.
#[inline]
fn gather_patch<T: Real>(input: &[T], b: &ConvShape, ox: usize, oy: usize, patch: &mut [T]) {
    let s = b.in_size as isize;
    let plane = b.in_size * b.in_size;
    if ox > 0 && oy > 0 && 2 * ox + 1 < b.in_size && 2 * oy + 1 < b.in_size {
        let origin = (2 * oy - 1) * b.in_size + 2 * ox - 1;
        for c in 0..b.cin {
            let base = c * plane + origin;
            let dst = &mut patch[c * 9..c * 9 + 9];
            for ky in 0..3 {
                let row = base + ky * b.in_size;
                dst[ky * 3..ky * 3 + 3].copy_from_slice(&input[row..row + 3]);
            }
        }
        return;
    }
    for c in 0..b.cin {
        let base = c * plane;
        for ky in 0..3 {
            let iy = (2 * oy + ky) as isize - 1;
            for kx in 0..3 {
                let ix = (2 * ox + kx) as isize - 1;
                patch[c * 9 + ky * 3 + kx] = if iy >= 0 && iy < s && ix >= 0 && ix < s {
                    input[base + iy as usize * b.in_size + ix as usize]
                } else {
                    T::zero()
                };
            }
        }
    }
}

#[inline]
fn scatter_patch<T: Real>(grad_in: &mut [T], b: &ConvShape, ox: usize, oy: usize, patch: &[T]) {
    let s = b.in_size as isize;
    let plane = b.in_size * b.in_size;
    for c in 0..b.cin {
        let base = c * plane;
        for ky in 0..3 {
            let iy = (2 * oy + ky) as isize - 1;
            if iy < 0 || iy >= s {
                continue;
            }
            for kx in 0..3 {
                let ix = (2 * ox + kx) as isize - 1;
                if ix >= 0 && ix < s {
                    grad_in[base + iy as usize * b.in_size + ix as usize] += patch[c * 9 + ky * 3 + kx];
                }
            }
        }
    }
}

/// Everything the reverse pass needs from a forward pass.
#[derive(Debug, Clone)]
pub(crate) struct Trace<T> {
    /// Input of each block; `inputs[0]` is the centered image.
    pub inputs: Vec<Vec<T>>,
    /// Pre-activations of each block.
    pub pre: Vec<Vec<T>>,
    pub pooled: Vec<T>,
    pub output: Vec<T>,
}

pub(crate) fn forward<T: Real>(layout: &Layout, params: &[T], input: Vec<T>) -> Trace<T> {
    let mut inputs = Vec::with_capacity(layout.blocks.len());
    let mut pre = Vec::with_capacity(layout.blocks.len());
    let mut x = input;
    let mut patch = Vec::new();
    for b in &layout.blocks {
        let n_out = b.out_size * b.out_size;
        let weights = &params[b.offset..b.offset + b.weight_len()];
        let bias = &params[b.offset + b.weight_len()..b.offset + b.param_len()];
        let k = b.cin * 9;
        patch.resize(k, T::zero());
        let mut z = vec![T::zero(); b.cout * n_out];
        for oy in 0..b.out_size {
            for ox in 0..b.out_size {
                gather_patch(&x, b, ox, oy, &mut patch);
                let p = oy * b.out_size + ox;
                for oc in 0..b.cout {
                    z[oc * n_out + p] = bias[oc] + dot(&weights[oc * k..(oc + 1) * k], &patch);
                }
            }
        }
        let a: Vec<T> = z.iter().map(|v| gelu(*v)).collect();
        inputs.push(std::mem::replace(&mut x, a));
        pre.push(z);
    }
    let last = layout.blocks.last().map_or(1, |b| b.out_size * b.out_size);
    let inv_n = T::one() / T::lit(last as f64);
    let pooled: Vec<T> = x.chunks_exact(last).map(|plane| plane.iter().copied().sum::<T>() * inv_n).collect();
    let hw = &params[layout.head_offset..layout.head_offset + layout.head_in * layout.head_out];
    let hb = &params[layout.head_offset + layout.head_in * layout.head_out..layout.total];
    let output = (0..layout.head_out)
        .map(|o| hb[o] + dot(&hw[o * layout.head_in..(o + 1) * layout.head_in], &pooled))
        .collect();
    Trace { inputs, pre, pooled, output }
}

/// Accumulates `∂L/∂params` into `grad` given `∂L/∂output`.
pub(crate) fn backward<T: Real>(layout: &Layout, params: &[T], trace: &Trace<T>, grad_out: &[T], grad: &mut [T]) {
    let (hi, ho) = (layout.head_in, layout.head_out);
    let hw_off = layout.head_offset;
    let hb_off = hw_off + hi * ho;
    let mut g_pooled = vec![T::zero(); hi];
    for o in 0..ho {
        let g = grad_out[o];
        grad[hb_off + o] += g;
        axpy(g, &trace.pooled, &mut grad[hw_off + o * hi..hw_off + (o + 1) * hi]);
        axpy(g, &params[hw_off + o * hi..hw_off + (o + 1) * hi], &mut g_pooled);
    }
    let Some(last) = layout.blocks.last() else { return };
    let n_last = last.out_size * last.out_size;
    let inv_n = T::one() / T::lit(n_last as f64);
    let mut g_act: Vec<T> = g_pooled.iter().flat_map(|g| std::iter::repeat_n(*g * inv_n, n_last)).collect();

    let mut patch = Vec::new();
    let mut g_patch = Vec::new();
    for (l, b) in layout.blocks.iter().enumerate().rev() {
        let n_out = b.out_size * b.out_size;
        let k = b.cin * 9;
        let w_off = b.offset;
        let b_off = b.offset + b.weight_len();
        let z = &trace.pre[l];
        let g_z: Vec<T> = g_act.iter().zip(z).map(|(g, z)| *g * gelu_grad(*z)).collect();
        let x = &trace.inputs[l];
        let need_input_grad = l > 0;
        let mut g_in = if need_input_grad { vec![T::zero(); x.len()] } else { Vec::new() };
        patch.resize(k, T::zero());
        g_patch.resize(k, T::zero());
        for oy in 0..b.out_size {
            for ox in 0..b.out_size {
                gather_patch(x, b, ox, oy, &mut patch);
                let p = oy * b.out_size + ox;
                g_patch.iter_mut().for_each(|v| *v = T::zero());
                for oc in 0..b.cout {
                    let g = g_z[oc * n_out + p];
                    if g == T::zero() {
                        continue;
                    }
                    grad[b_off + oc] += g;
                    axpy(g, &patch, &mut grad[w_off + oc * k..w_off + (oc + 1) * k]);
                    if need_input_grad {
                        axpy(g, &params[w_off + oc * k..w_off + (oc + 1) * k], &mut g_patch);
                    }
                }
                if need_input_grad {
                    scatter_patch(&mut g_in, b, ox, oy, &g_patch);
                }
            }
        }
        g_act = g_in;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_counts() {
        let l = Layout::new(32, 3, &[4, 6], 4);
        assert_eq!(l.blocks[0].out_size, 16);
        assert_eq!(l.blocks[1].out_size, 8);
        assert_eq!(l.total, (4 * 3 * 9 + 4) + (6 * 4 * 9 + 6) + (6 * 4 + 4));
        assert_eq!(Layout::new(7, 1, &[2], 3).blocks[0].out_size, 4);
    }

    #[test]
    fn gelu_derivative_matches_differences() {
        for z in [-3.0f64, -0.7, 0.0, 0.4, 2.5] {
            let fd = (gelu(z + 1e-6) - gelu(z - 1e-6)) / 2e-6;
            assert!((gelu_grad(z) - fd).abs() < 1e-8);
        }
    }

    #[test]
    fn dot_matches_naive_sum() {
        let a: Vec<f64> = (0..11).map(|i| i as f64 * 0.5).collect();
        let b: Vec<f64> = (0..11).map(|i| 1.0 - i as f64 * 0.25).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-12);
    }

    #[test]
    fn network_gradient_matches_differences() {
        let layout = Layout::new(9, 2, &[3, 2], 2);
        let params: Vec<f64> = (0..layout.total).map(|i| ((i * 37 % 23) as f64 / 23.0 - 0.5) * 0.6).collect();
        let input: Vec<f64> = (0..2 * 81).map(|i| ((i * 13 % 17) as f64 / 17.0) - 0.5).collect();
        let w_out = [0.7, -1.3];
        let objective = |p: &[f64]| {
            let t = forward(&layout, p, input.clone());
            t.output.iter().zip(w_out).map(|(o, w)| o * w).sum::<f64>()
        };
        let trace = forward(&layout, &params, input.clone());
        let mut grad = vec![0.0; layout.total];
        backward(&layout, &params, &trace, &w_out, &mut grad);
        for i in 0..layout.total {
            let mut p = params.clone();
            p[i] += 1e-5;
            let up = objective(&p);
            p[i] -= 2e-5;
            let fd = (up - objective(&p)) / 2e-5;
            assert!((grad[i] - fd).abs() <= 1e-6 * (1.0 + fd.abs()), "param {i}: {} vs {fd}", grad[i]);
        }
    }
}
